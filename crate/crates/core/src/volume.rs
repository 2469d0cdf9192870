//! Dense disparity volumes and per-pixel maps.
//!
//! Volumes are stored `(d, y, x)` row-major: each disparity plane is
//! contiguous, and the distribution of one pixel is strided by `H * W`.

use crate::error::{Error, Result};

/// Shape of a disparity volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VolumeDims {
    pub disparities: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn new(disparities: usize, height: usize, width: usize) -> Self {
        Self {
            disparities,
            height,
            width,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.disparities * self.plane()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.height + y) * self.width + x
    }
}

/// Unvalidated dense `(d, y, x)` field. Used for gradients and for data
/// that has not yet been promoted to a [`CostVolume`] or
/// [`ProbabilityVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: VolumeDims,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: VolumeDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::argument(format!(
                "volume data has {} entries, dims {:?} need {}",
                data.len(),
                dims,
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: VolumeDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: VolumeDims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for d in 0..dims.disparities {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(d, y, x));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> VolumeDims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, d: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(d, y, x)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, y: usize, x: usize, v: f64) {
        let i = self.dims.index(d, y, x);
        self.data[i] = v;
    }

    /// Values along the disparity axis at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> impl Iterator<Item = f64> + '_ {
        let plane = self.dims.plane();
        let base = y * self.dims.width + x;
        (0..self.dims.disparities).map(move |d| self.data[d * plane + base])
    }
}

/// Matching cost per disparity hypothesis. Lower is a better match.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume(Volume);

impl CostVolume {
    pub fn new(dims: VolumeDims, data: Vec<f64>) -> Result<Self> {
        Self::from_volume(Volume::new(dims, data)?)
    }

    pub fn from_volume(volume: Volume) -> Result<Self> {
        let dims = volume.dims;
        if dims.disparities < 2 {
            return Err(Error::validation(format!(
                "cost volume needs at least 2 disparities, got {}",
                dims.disparities
            )));
        }
        if dims.height == 0 || dims.width == 0 {
            return Err(Error::validation(format!("empty cost volume {dims:?}")));
        }
        if let Some(i) = volume.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "cost volume entry {i} is not finite"
            )));
        }
        Ok(Self(volume))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

impl std::ops::Deref for CostVolume {
    type Target = Volume;
    fn deref(&self) -> &Volume {
        &self.0
    }
}

/// Per-pixel distribution over disparity hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume(Volume);

/// Tolerance on the per-pixel sum enforced by [`ProbabilityVolume::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

impl ProbabilityVolume {
    /// Validates entries in `[0, 1]` and per-pixel sums within
    /// [`SIMPLEX_TOLERANCE`] of one.
    pub fn new(dims: VolumeDims, data: Vec<f64>) -> Result<Self> {
        let volume = Volume::new(dims, data)?;
        if let Some(i) = volume
            .data
            .iter()
            .position(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::validation(format!(
                "probability entry {i} = {} outside [0, 1]",
                volume.data[i]
            )));
        }
        check_normalized(&volume, SIMPLEX_TOLERANCE)?;
        Ok(Self(volume))
    }

    /// Wraps data without any checks. Consumers such as
    /// [`crate::regression::soft_argmin`] re-validate what they rely on.
    pub fn new_unchecked(volume: Volume) -> Self {
        Self(volume)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

impl std::ops::Deref for ProbabilityVolume {
    type Target = Volume;
    fn deref(&self) -> &Volume {
        &self.0
    }
}

pub(crate) fn check_normalized(volume: &Volume, tol: f64) -> Result<()> {
    let dims = volume.dims;
    for y in 0..dims.height {
        for x in 0..dims.width {
            let s: f64 = volume.pixel(y, x).sum();
            if !((s - 1.0).abs() <= tol) {
                return Err(Error::validation(format!(
                    "distribution at (x={x}, y={y}) sums to {s}"
                )));
            }
        }
    }
    Ok(())
}

/// What a [`ScalarMap`] holds. Informational only; operations check shapes,
/// not roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapRole {
    Disparity,
    Matchability,
    LogScale,
    Weight,
    Mask,
    Image,
    Generic,
}

/// One scalar per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    role: MapRole,
}

pub type DisparityMap = ScalarMap;
pub type MatchabilityMap = ScalarMap;
pub type LogScaleMap = ScalarMap;
pub type WeightMap = ScalarMap;
pub type MaskMap = ScalarMap;

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, role: MapRole) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::argument(format!(
                "map data has {} entries, {height}x{width} needs {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            role,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, role: MapRole) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
            role,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        role: MapRole,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
            role,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn role(&self) -> MapRole {
        self.role
    }

    pub fn with_role(mut self, role: MapRole) -> Self {
        self.role = role;
        self
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, role: MapRole, f: impl Fn(f64) -> f64) -> ScalarMap {
        ScalarMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
            role,
        }
    }

    pub fn same_shape(&self, other: &ScalarMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn expect_shape(&self, other: &ScalarMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::argument(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub(crate) fn expect_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::validation(format!(
                "{what}: entry {i} is not finite"
            ))),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Softmax of the negated cost along the disparity axis:
/// `P(d) = exp(-c(d)/τ) / Σ exp(-c(d')/τ)`, max-subtracted.
pub fn softmax_over_disparity(cost: &CostVolume, temperature: f64) -> Result<ProbabilityVolume> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let dims = cost.dims();
    if let Some(i) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!("cost entry {i} is not finite")));
    }
    let plane = dims.plane();
    let src = cost.data();
    let mut out = vec![0.0; dims.len()];
    let mut logits = vec![0.0; dims.disparities];
    for p in 0..plane {
        let mut best = f64::NEG_INFINITY;
        for (d, l) in logits.iter_mut().enumerate() {
            *l = -src[d * plane + p] / temperature;
            best = best.max(*l);
        }
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - best).exp();
            sum += *l;
        }
        for (d, l) in logits.iter().enumerate() {
            out[d * plane + p] = l / sum;
        }
    }
    Ok(ProbabilityVolume(Volume { dims, data: out }))
}

/// Gradient of a scalar objective w.r.t. the cost volume, given its gradient
/// w.r.t. the softmax output.
pub fn softmax_backward(
    prob: &ProbabilityVolume,
    upstream: &Volume,
    temperature: f64,
) -> Result<Volume> {
    let dims = prob.dims();
    if upstream.dims() != dims {
        return Err(Error::argument(format!(
            "softmax backward: upstream {:?} vs probability {:?}",
            upstream.dims(),
            dims
        )));
    }
    let plane = dims.plane();
    let p = prob.data();
    let g = upstream.data();
    let mut out = vec![0.0; dims.len()];
    for px in 0..plane {
        let mut mean = 0.0;
        for d in 0..dims.disparities {
            let i = d * plane + px;
            mean += p[i] * g[i];
        }
        for d in 0..dims.disparities {
            let i = d * plane + px;
            out[i] = -p[i] * (g[i] - mean) / temperature;
        }
    }
    Ok(Volume { dims, data: out })
}

/// Linear interpolation taps for upsampling one axis by `factor`, using
/// pixel-center alignment and clamping at the borders.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

pub(crate) fn upsample_taps(n: usize, factor: usize) -> Vec<Tap> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Tap {
                lo,
                hi,
                t: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resampling of each disparity plane; the disparity axis is
/// left alone.
pub(crate) fn upsample_volume(vol: &Volume, factor: usize) -> Volume {
    if factor == 1 {
        return vol.clone();
    }
    let src = vol.dims();
    let dims = VolumeDims::new(src.disparities, src.height * factor, src.width * factor);
    let ty = upsample_taps(src.height, factor);
    let tx = upsample_taps(src.width, factor);
    let mut out = Vec::with_capacity(dims.len());
    for d in 0..src.disparities {
        for a in &ty {
            for b in &tx {
                let v00 = vol.get(d, a.lo, b.lo);
                let v01 = vol.get(d, a.lo, b.hi);
                let v10 = vol.get(d, a.hi, b.lo);
                let v11 = vol.get(d, a.hi, b.hi);
                let top = v00 + (v01 - v00) * b.t;
                let bot = v10 + (v11 - v10) * b.t;
                out.push(top + (bot - top) * a.t);
            }
        }
    }
    Volume { dims, data: out }
}

/// Adjoint of [`upsample_volume`].
pub fn upsample_backward(grad: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::argument("upsampling factor must be at least 1"));
    }
    let dims = grad.dims();
    if dims.height % factor != 0 || dims.width % factor != 0 {
        return Err(Error::argument(format!(
            "gradient {dims:?} is not a multiple of factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(grad.clone());
    }
    let src = VolumeDims::new(dims.disparities, dims.height / factor, dims.width / factor);
    let ty = upsample_taps(src.height, factor);
    let tx = upsample_taps(src.width, factor);
    let mut out = Volume::zeros(src);
    for d in 0..dims.disparities {
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = grad.get(d, oy, ox);
                let acc = |out: &mut Volume, y, x, w: f64| {
                    let i = src.index(d, y, x);
                    out.data[i] += g * w;
                };
                acc(&mut out, a.lo, b.lo, (1.0 - a.t) * (1.0 - b.t));
                acc(&mut out, a.lo, b.hi, (1.0 - a.t) * b.t);
                acc(&mut out, a.hi, b.lo, a.t * (1.0 - b.t));
                acc(&mut out, a.hi, b.hi, a.t * b.t);
            }
        }
    }
    Ok(out)
}

/// Volumes that can be spatially upsampled.
pub trait SpatialVolume: Sized {
    fn as_volume(&self) -> &Volume;
    fn from_interpolated(volume: Volume) -> Result<Self>;
}

impl SpatialVolume for CostVolume {
    fn as_volume(&self) -> &Volume {
        &self.0
    }

    fn from_interpolated(volume: Volume) -> Result<Self> {
        CostVolume::from_volume(volume)
    }
}

impl SpatialVolume for ProbabilityVolume {
    fn as_volume(&self) -> &Volume {
        &self.0
    }

    /// Interpolation leaves the simplex only by rounding; renormalize.
    fn from_interpolated(mut volume: Volume) -> Result<Self> {
        let dims = volume.dims;
        let plane = dims.plane();
        for p in 0..plane {
            let s: f64 = (0..dims.disparities).map(|d| volume.data[d * plane + p]).sum();
            if !(s > 0.0) {
                return Err(Error::validation("interpolated distribution has zero mass"));
            }
            for d in 0..dims.disparities {
                volume.data[d * plane + p] /= s;
            }
        }
        Ok(ProbabilityVolume(volume))
    }
}

/// Scales the spatial dimensions by `factor` with linear interpolation in
/// `y` and `x`. Probability volumes are renormalized afterwards.
pub fn upsample_trilinear<V: SpatialVolume>(vol: &V, factor: usize) -> Result<V> {
    if factor == 0 {
        return Err(Error::argument("upsampling factor must be at least 1"));
    }
    if factor == 1 {
        return V::from_interpolated(vol.as_volume().clone());
    }
    V::from_interpolated(upsample_volume(vol.as_volume(), factor))
}
