//! Reductions from the probability volume to per-pixel maps: the expected
//! disparity and the disparity-wise entropy.

use crate::error::{Error, Result};
use crate::volume::{
    check_normalized, DisparityMap, MapRole, MatchabilityMap, ProbabilityVolume, ScalarMap, Volume,
};

/// Sum tolerance accepted by the reductions.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Floor applied inside the logarithm of the entropy gradient.
pub const LOG_CLAMP: f64 = 1e-12;

/// Expected disparity `Σ_d P(d)·d`.
pub fn soft_argmin(prob: &ProbabilityVolume) -> Result<DisparityMap> {
    check_normalized(prob.volume(), NORMALIZATION_TOLERANCE)?;
    let dims = prob.dims();
    let plane = dims.plane();
    let p = prob.data();
    let mut out = vec![0.0; plane];
    for d in 0..dims.disparities {
        let w = d as f64;
        let slice = &p[d * plane..(d + 1) * plane];
        for (o, &v) in out.iter_mut().zip(slice) {
            *o += v * w;
        }
    }
    ScalarMap::new(dims.height, dims.width, out, MapRole::Disparity)
}

/// `∂D/∂P(d) = d`, scaled by the upstream gradient.
pub fn soft_argmin_backward(prob: &ProbabilityVolume, upstream: &ScalarMap) -> Result<Volume> {
    let dims = prob.dims();
    if upstream.height() != dims.height || upstream.width() != dims.width {
        return Err(Error::argument(format!(
            "soft-argmin backward: upstream {}x{} vs volume {}x{}",
            upstream.height(),
            upstream.width(),
            dims.height,
            dims.width
        )));
    }
    let g = upstream.data();
    Ok(Volume::from_fn(dims, |d, y, x| {
        g[y * dims.width + x] * d as f64
    }))
}

/// Shannon entropy `-Σ_d P(d)·ln P(d)` with `0·ln 0 = 0`. Larger values mean
/// a flatter distribution, i.e. a less matchable pixel.
pub fn entropy_matchability(prob: &ProbabilityVolume) -> Result<MatchabilityMap> {
    if let Some(i) = prob.data().iter().position(|&p| p < 0.0 || p.is_nan()) {
        return Err(Error::validation(format!(
            "probability entry {i} = {} is negative",
            prob.data()[i]
        )));
    }
    check_normalized(prob.volume(), NORMALIZATION_TOLERANCE)?;
    let dims = prob.dims();
    let plane = dims.plane();
    let p = prob.data();
    let mut out = vec![0.0; plane];
    for d in 0..dims.disparities {
        let slice = &p[d * plane..(d + 1) * plane];
        for (o, &v) in out.iter_mut().zip(slice) {
            if v > 0.0 {
                *o -= v * v.ln();
            }
        }
    }
    ScalarMap::new(dims.height, dims.width, out, MapRole::Matchability)
}

/// `∂M/∂P(d) = -(ln max(P(d), 1e-12) + 1)`, scaled by the upstream gradient.
pub fn entropy_backward(prob: &ProbabilityVolume, upstream: &ScalarMap) -> Result<Volume> {
    let dims = prob.dims();
    if upstream.height() != dims.height || upstream.width() != dims.width {
        return Err(Error::argument(format!(
            "entropy backward: upstream {}x{} vs volume {}x{}",
            upstream.height(),
            upstream.width(),
            dims.height,
            dims.width
        )));
    }
    let g = upstream.data();
    let p = prob.data();
    let plane = dims.plane();
    let mut out = vec![0.0; dims.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let gi = g[i % plane];
        if gi != 0.0 {
            *o = -gi * (p[i].max(LOG_CLAMP).ln() + 1.0);
        }
    }
    Volume::new(dims, out)
}
