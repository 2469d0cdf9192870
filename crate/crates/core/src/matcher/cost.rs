//! Cost-volume construction. Left pixel `(x, y)` at disparity `d` is
//! compared with right pixel `(x - d, y)`. At stride `s` the shift in
//! feature pixels is `d / s`, sampled with linear interpolation.

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::volume::{CostVolume, Volume, VolumeDims};

use super::config::CostMode;
use super::features::FeatureMap;

/// Cost assigned where `x - d` falls outside the right image.
pub const SENTINEL_COST: f64 = 1e4;

#[derive(Clone, Copy, Debug)]
struct Shift {
    whole: usize,
    frac: f64,
}

impl Shift {
    fn new(d: usize, stride: usize) -> Self {
        let whole = d / stride;
        Self {
            whole,
            frac: (d % stride) as f64 / stride as f64,
        }
    }

    /// Left column `x` has a right sample when `x - d/s >= 0`.
    #[inline]
    fn valid(&self, x: usize) -> bool {
        x >= self.whole + usize::from(self.frac > 0.0)
    }
}

/// Multi-channel volume `(channels, D, h, w)` plus the in-range flags.
/// Out-of-range entries are zero.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    act: Activation,
    valid: Vec<bool>,
    mode: CostMode,
    stride: usize,
}

impl FeatureVolume {
    pub fn activation(&self) -> &Activation {
        &self.act
    }

    pub fn mode(&self) -> CostMode {
        self.mode
    }

    pub fn dims(&self) -> VolumeDims {
        VolumeDims::new(self.act.depth, self.act.height, self.act.width)
    }

    /// In-range flags in `(d, y, x)` order.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Channel sum with out-of-range entries set to [`SENTINEL_COST`].
    /// Only meaningful for absolute differences.
    pub fn summed_cost(&self) -> Volume {
        let dims = self.dims();
        let n = dims.len();
        let mut out = vec![0.0; n];
        for c in 0..self.act.channels {
            for (o, v) in out.iter_mut().zip(self.act.channel(c)) {
                *o += v;
            }
        }
        for (o, &ok) in out.iter_mut().zip(&self.valid) {
            if !ok {
                *o = SENTINEL_COST;
            }
        }
        Volume::new(dims, out).expect("dims match")
    }
}

fn check_pair(fl: &FeatureMap, fr: &FeatureMap, disparities: usize) -> Result<()> {
    if fl.channels() != fr.channels()
        || fl.height() != fr.height()
        || fl.width() != fr.width()
        || fl.stride() != fr.stride()
    {
        return Err(Error::argument("left and right feature maps differ in shape"));
    }
    if disparities < 2 {
        return Err(Error::argument("need at least 2 disparities"));
    }
    let full_width = fl.width() * fl.stride();
    if disparities > full_width {
        return Err(Error::argument(format!(
            "{disparities} disparities exceed image width {full_width}"
        )));
    }
    Ok(())
}

pub fn build_feature_volume(
    fl: &FeatureMap,
    fr: &FeatureMap,
    disparities: usize,
    mode: CostMode,
) -> Result<FeatureVolume> {
    check_pair(fl, fr, disparities)?;
    let (c_in, h, w, s) = (fl.channels(), fl.height(), fl.width(), fl.stride());
    let channels = match mode {
        CostMode::Concat => 2 * c_in,
        CostMode::AbsDiff => c_in,
    };
    let dims = VolumeDims::new(disparities, h, w);
    let vol = dims.len();
    let mut act = Activation::zeros(channels, disparities, h, w);
    let mut valid = vec![false; vol];
    for d in 0..disparities {
        let sh = Shift::new(d, s);
        for y in 0..h {
            for x in 0..w {
                if !sh.valid(x) {
                    continue;
                }
                let idx = dims.index(d, y, x);
                valid[idx] = true;
                let x0 = x - sh.whole;
                for c in 0..c_in {
                    let mut right = fr.get(c, y, x0);
                    if sh.frac > 0.0 {
                        right = (1.0 - sh.frac) * right + sh.frac * fr.get(c, y, x0 - 1);
                    }
                    let left = fl.get(c, y, x);
                    match mode {
                        CostMode::AbsDiff => act.data[c * vol + idx] = (left - right).abs(),
                        CostMode::Concat => {
                            act.data[c * vol + idx] = left;
                            act.data[(c_in + c) * vol + idx] = right;
                        }
                    }
                }
            }
        }
    }
    Ok(FeatureVolume {
        act,
        valid,
        mode,
        stride: s,
    })
}

/// Gradients w.r.t. the left and right feature maps.
pub fn feature_volume_backward(
    fl: &FeatureMap,
    fr: &FeatureMap,
    fv: &FeatureVolume,
    grad: &Activation,
) -> Result<(Activation, Activation)> {
    if !grad.same_shape(&fv.act) {
        return Err(Error::argument("feature volume backward: gradient shape mismatch"));
    }
    let (c_in, h, w) = (fl.channels(), fl.height(), fl.width());
    let dims = fv.dims();
    let vol = dims.len();
    let mut gl = Activation::zeros(c_in, 1, h, w);
    let mut gr = Activation::zeros(c_in, 1, h, w);
    for d in 0..dims.disparities {
        let sh = Shift::new(d, fv.stride);
        for y in 0..h {
            for x in 0..w {
                let idx = dims.index(d, y, x);
                if !fv.valid[idx] {
                    continue;
                }
                let x0 = x - sh.whole;
                for c in 0..c_in {
                    let (g_left, g_right) = match fv.mode {
                        CostMode::AbsDiff => {
                            let mut right = fr.get(c, y, x0);
                            if sh.frac > 0.0 {
                                right = (1.0 - sh.frac) * right + sh.frac * fr.get(c, y, x0 - 1);
                            }
                            let diff = fl.get(c, y, x) - right;
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let g = grad.data[c * vol + idx] * s;
                            (g, -g)
                        }
                        CostMode::Concat => (
                            grad.data[c * vol + idx],
                            grad.data[(c_in + c) * vol + idx],
                        ),
                    };
                    gl.data[(c * h + y) * w + x] += g_left;
                    gr.data[(c * h + y) * w + x0] += (1.0 - sh.frac) * g_right;
                    if sh.frac > 0.0 {
                        gr.data[(c * h + y) * w + x0 - 1] += sh.frac * g_right;
                    }
                }
            }
        }
    }
    Ok((gl, gr))
}

/// Result of [`build_cost_volume`]: absolute differences reduce directly to
/// a scalar cost; concatenated features wait for the regularizer.
#[derive(Clone, Debug)]
pub enum MatchingVolume {
    Cost(CostVolume),
    Features(FeatureVolume),
}

pub fn build_cost_volume(
    fl: &FeatureMap,
    fr: &FeatureMap,
    disparities: usize,
    mode: CostMode,
) -> Result<MatchingVolume> {
    let fv = build_feature_volume(fl, fr, disparities, mode)?;
    match mode {
        CostMode::AbsDiff => Ok(MatchingVolume::Cost(CostVolume::from_volume(
            fv.summed_cost(),
        )?)),
        CostMode::Concat => Ok(MatchingVolume::Features(fv)),
    }
}
