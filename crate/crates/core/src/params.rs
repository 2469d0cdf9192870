//! The full set of learnable tensors and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DSMCKPT1"
//! repeated until end of file:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank x u64 dims
//!     prod(dims) x f64
//! ```
//!
//! Records whose name starts with `meta.` carry configuration scalars and
//! are not learnable.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matcher::config::{FeatureMode, MatcherConfig};
use crate::matcher::features::FeatureNetParams;
use crate::matcher::regularizer::RegularizerParams;
use crate::nn::Tensor;
use crate::refine::KernelNetParams;
use crate::uncertainty::UncertaintyNetParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSMCKPT1";
pub const META_DISPARITIES: &str = "meta.disparities";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub features: Option<FeatureNetParams>,
    pub regularizer: Option<RegularizerParams>,
    pub uncertainty: UncertaintyNetParams,
    pub kernels: KernelNetParams,
}

impl ParamSet {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &MatcherConfig) -> Self {
        Self {
            features: (config.feature_mode == FeatureMode::Learned)
                .then(|| FeatureNetParams::zeros(config.channels)),
            regularizer: (config.regularizer_depth > 0)
                .then(|| RegularizerParams::zeros(config.regularizer_inputs())),
            uncertainty: UncertaintyNetParams::zeros(),
            kernels: KernelNetParams::zeros(),
        }
    }

    /// Deterministic random initialization.
    pub fn init(config: &MatcherConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (config.feature_mode == FeatureMode::Learned)
            .then(|| FeatureNetParams::init(config.channels, &mut rng));
        let regularizer = (config.regularizer_depth > 0)
            .then(|| RegularizerParams::init(config.regularizer_inputs(), &mut rng));
        Self {
            features,
            regularizer,
            uncertainty: UncertaintyNetParams::init(&mut rng),
            kernels: KernelNetParams::init(&mut rng),
        }
    }

    pub fn check_compatible(&self, config: &MatcherConfig) -> Result<()> {
        match (&self.features, config.feature_mode) {
            (Some(f), FeatureMode::Learned) if f.channels() == config.channels => {}
            (None, FeatureMode::Census) => {}
            _ => {
                return Err(Error::argument(
                    "feature parameters do not match the configured feature mode",
                ))
            }
        }
        match (&self.regularizer, config.regularizer_depth) {
            (None, 0) => {}
            (Some(r), _) if r.in_channels() == config.regularizer_inputs() => {}
            _ => {
                return Err(Error::argument(
                    "regularizer parameters do not match the configuration",
                ))
            }
        }
        Ok(())
    }

    /// Tensors in a fixed order with unique dotted names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(f) = &self.features {
            out.extend(f.named_tensors().into_iter().map(|(n, t)| (format!("features.{n}"), t)));
        }
        if let Some(r) = &self.regularizer {
            out.extend(r.named_tensors().into_iter().map(|(n, t)| (format!("regularizer.{n}"), t)));
        }
        out.extend(
            self.uncertainty
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("uncertainty.{n}"), t)),
        );
        out.extend(
            self.kernels
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("kernels.{n}"), t)),
        );
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(f) = &mut self.features {
            out.extend(
                f.named_tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("features.{n}"), t)),
            );
        }
        if let Some(r) = &mut self.regularizer {
            out.extend(
                r.named_tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("regularizer.{n}"), t)),
            );
        }
        out.extend(
            self.uncertainty
                .named_tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("uncertainty.{n}"), t)),
        );
        out.extend(
            self.kernels
                .named_tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("kernels.{n}"), t)),
        );
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, config: &MatcherConfig) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_record(&mut w, META_DISPARITIES, &[1], &[config.disparities as f64])?;
        for (name, t) in self.named_tensors() {
            write_record(&mut w, &name, t.dims(), &t.value)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, config: &MatcherConfig) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f), config)
    }

    /// Builds a parameter set for `config` from checkpoint records. Every
    /// learnable tensor must be present with the expected shape.
    pub fn from_records(config: &MatcherConfig, records: &[CheckpointRecord]) -> Result<Self> {
        let mut params = Self::zeros(config);
        let mut seen = 0;
        for rec in records.iter().filter(|r| !r.name.starts_with("meta.")) {
            let mut slots = params.named_tensors_mut();
            let Some((_, t)) = slots.iter_mut().find(|(n, _)| *n == rec.name) else {
                return Err(Error::format(
                    rec.offset,
                    format!("unexpected tensor {:?} for this configuration", rec.name),
                ));
            };
            if t.dims() != rec.dims.as_slice() {
                return Err(Error::format(
                    rec.offset,
                    format!(
                        "tensor {:?} has dims {:?}, expected {:?}",
                        rec.name,
                        rec.dims,
                        t.dims()
                    ),
                ));
            }
            t.value.copy_from_slice(&rec.values);
            seen += 1;
        }
        let expected = params.named_tensors().len();
        if seen != expected {
            return Err(Error::format(
                0,
                format!("checkpoint holds {seen} of {expected} expected tensors"),
            ));
        }
        Ok(params)
    }

    pub fn load(path: &Path, config: &MatcherConfig) -> Result<Self> {
        Self::from_records(config, &read_checkpoint_file(path)?)
    }
}

/// One tensor as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// Byte offset of the record in the file.
    pub offset: u64,
}

pub fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != values.len() {
        return Err(Error::argument(format!(
            "record {name:?}: dims {dims:?} vs {} values",
            values.len()
        )));
    }
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointRecord>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected DSMCKPT1"));
    }
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let offset = c.pos as u64;
        let name_len = c.u32("name length")? as usize;
        let name_pos = c.pos as u64;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(name_pos, "tensor name is not UTF-8"))?
            .to_string();
        if out.iter().any(|r: &CheckpointRecord| r.name == name) {
            return Err(Error::format(offset, format!("duplicate tensor {name:?}")));
        }
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dimension")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::format(offset, "tensor size overflows"))?;
        let bytes = c.take(count * 8, "tensor payload")?;
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(CheckpointRecord {
            name,
            dims,
            values,
            offset,
        });
    }
    Ok(out)
}

pub fn read_checkpoint_file(path: &Path) -> Result<Vec<CheckpointRecord>> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Scalar metadata value stored under `name`, if present.
pub fn meta_value(records: &[CheckpointRecord], name: &str) -> Option<f64> {
    records
        .iter()
        .find(|r| r.name == name)
        .and_then(|r| r.values.first().copied())
}
