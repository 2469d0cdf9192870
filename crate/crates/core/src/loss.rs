//! Training objectives and ground-truth masking.
//!
//! All losses are means over valid pixels. The L1 subgradient at zero
//! residual is taken as 0.

use crate::error::{Error, Result};
use crate::volume::{DisparityMap, LogScaleMap, MapRole, MaskMap, ScalarMap};

/// Ground-truth disparities above this are excluded by default.
pub const DEFAULT_MAX_DISPARITY: f64 = 192.0;

/// 1 where ground truth is present (finite, non-negative) and `<= d_max`.
pub fn valid_mask(gt: &DisparityMap, d_max: f64) -> MaskMap {
    gt.map(MapRole::Mask, |v| {
        if v.is_finite() && v >= 0.0 && v <= d_max {
            1.0
        } else {
            0.0
        }
    })
}

fn valid_count(mask: &MaskMap) -> Result<usize> {
    let n = mask.data().iter().filter(|&&m| m > 0.5).count();
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    Ok(n)
}

fn check_shapes(maps: &[&ScalarMap]) -> Result<()> {
    for m in &maps[1..] {
        maps[0].expect_shape(m, "loss inputs disagree in shape")?;
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over valid pixels.
pub fn l1_loss(d: &DisparityMap, gt: &DisparityMap, mask: &MaskMap) -> Result<f64> {
    check_shapes(&[d, gt, mask])?;
    let n = valid_count(mask)?;
    let mut sum = 0.0;
    for ((&p, &g), &m) in d.data().iter().zip(gt.data()).zip(mask.data()) {
        if m > 0.5 {
            sum += (p - g).abs();
        }
    }
    Ok(sum / n as f64)
}

/// `∂ l1_loss / ∂D`.
pub fn l1_loss_grad(d: &DisparityMap, gt: &DisparityMap, mask: &MaskMap) -> Result<ScalarMap> {
    check_shapes(&[d, gt, mask])?;
    let n = valid_count(mask)? as f64;
    let data = d
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .map(|((&p, &g), &m)| if m > 0.5 { sign(p - g) / n } else { 0.0 })
        .collect();
    ScalarMap::new(d.height(), d.width(), data, MapRole::Generic)
}

/// Laplacian negative log-likelihood with `B = exp(B')`, constants
/// dropped: mean of `|D - Dgt|·exp(-B') + B'`.
pub fn joint_loss(
    d: &DisparityMap,
    bp: &LogScaleMap,
    gt: &DisparityMap,
    mask: &MaskMap,
) -> Result<f64> {
    check_shapes(&[d, bp, gt, mask])?;
    let n = valid_count(mask)?;
    let mut sum = 0.0;
    for (((&p, &b), &g), &m) in d
        .data()
        .iter()
        .zip(bp.data())
        .zip(gt.data())
        .zip(mask.data())
    {
        if m > 0.5 {
            sum += (p - g).abs() * (-b).exp() + b;
        }
    }
    Ok(sum / n as f64)
}

/// Gradients of [`joint_loss`] w.r.t. `D` and `B'`.
pub fn joint_loss_grad(
    d: &DisparityMap,
    bp: &LogScaleMap,
    gt: &DisparityMap,
    mask: &MaskMap,
) -> Result<(ScalarMap, ScalarMap)> {
    check_shapes(&[d, bp, gt, mask])?;
    let n = valid_count(mask)? as f64;
    let len = d.len();
    let mut gd = vec![0.0; len];
    let mut gb = vec![0.0; len];
    for i in 0..len {
        if mask.data()[i] > 0.5 {
            let r = d.data()[i] - gt.data()[i];
            let w = (-bp.data()[i]).exp();
            gd[i] = sign(r) * w / n;
            gb[i] = (1.0 - r.abs() * w) / n;
        }
    }
    Ok((
        ScalarMap::new(d.height(), d.width(), gd, MapRole::Generic)?,
        ScalarMap::new(d.height(), d.width(), gb, MapRole::Generic)?,
    ))
}

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub initial: f64,
    pub joint: f64,
    pub refined: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            initial: 1.0,
            joint: 1.0,
            refined: 1.0,
        }
    }
}

impl LossWeights {
    /// Plain L1 on the initial disparity only.
    pub fn l1_baseline() -> Self {
        Self {
            initial: 1.0,
            joint: 0.0,
            refined: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1_init: f64,
    pub joint: f64,
    pub l1_refined: f64,
    pub total: f64,
    pub valid_pixel_count: usize,
}

pub fn total_loss(
    l1_init: f64,
    joint: f64,
    l1_refined: f64,
    weights: LossWeights,
    valid_pixel_count: usize,
) -> Result<LossBreakdown> {
    if weights.initial < 0.0 || weights.joint < 0.0 || weights.refined < 0.0 {
        return Err(Error::argument(format!(
            "loss weights must be non-negative: {weights:?}"
        )));
    }
    Ok(LossBreakdown {
        l1_init,
        joint,
        l1_refined,
        total: weights.initial * l1_init + weights.joint * joint + weights.refined * l1_refined,
        valid_pixel_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> ScalarMap {
        ScalarMap::new(1, v.len(), v.to_vec(), MapRole::Generic).unwrap()
    }

    #[test]
    fn valid_mask_bounds() {
        let gt = row(&[200.0, 192.0, f64::INFINITY, -1.0, f64::NAN, 0.0]);
        assert_eq!(
            valid_mask(&gt, DEFAULT_MAX_DISPARITY).data(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn l1_examples() {
        let gt = row(&[10.0, 10.0, 10.0, 10.0]);
        let ones = row(&[1.0; 4]);
        assert_eq!(l1_loss(&gt, &gt, &ones).unwrap(), 0.0);
        let d = row(&[10.0, 11.0, 8.0, 15.0]);
        assert_eq!(l1_loss(&d, &gt, &ones).unwrap(), 2.0);
        let mask = row(&[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(l1_loss(&d, &gt, &mask).unwrap(), 1.0);
        assert!(matches!(
            l1_loss(&d, &gt, &row(&[0.0; 4])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn joint_examples() {
        let gt = row(&[5.0]);
        let one = row(&[1.0]);
        assert_eq!(joint_loss(&gt, &row(&[0.0]), &gt, &one).unwrap(), 0.0);
        let v = joint_loss(&row(&[7.0]), &row(&[2f64.ln()]), &gt, &one).unwrap();
        assert!((v - (1.0 + 2f64.ln())).abs() < 1e-12);
        let v = joint_loss(&row(&[8.0]), &row(&[3f64.ln()]), &gt, &one).unwrap();
        assert!((v - (1.0 + 3f64.ln())).abs() < 1e-12);
        assert!(joint_loss(&gt, &row(&[0.0]), &gt, &row(&[0.0])).is_err());
    }

    #[test]
    fn joint_with_zero_logscale_equals_l1() {
        let d = row(&[1.0, 2.5, -3.0, 7.25]);
        let gt = row(&[0.5, 2.5, 1.0, 9.0]);
        let mask = row(&[1.0, 1.0, 0.0, 1.0]);
        let zero = row(&[0.0; 4]);
        assert_eq!(
            joint_loss(&d, &zero, &gt, &mask).unwrap(),
            l1_loss(&d, &gt, &mask).unwrap()
        );
    }

    #[test]
    fn total_examples() {
        let b = total_loss(0.5, 1.0, 0.4, LossWeights::default(), 10).unwrap();
        assert!((b.total - 1.9).abs() < 1e-15);
        let w = LossWeights {
            joint: 0.0,
            ..Default::default()
        };
        assert!((total_loss(0.5, 1.0, 0.4, w, 10).unwrap().total - 0.9).abs() < 1e-15);
        let w = LossWeights {
            initial: 0.0,
            ..Default::default()
        };
        assert!((total_loss(0.5, 1.0, 0.4, w, 10).unwrap().total - 1.4).abs() < 1e-15);
        let w = LossWeights {
            initial: -1.0,
            ..Default::default()
        };
        assert!(total_loss(0.5, 1.0, 0.4, w, 10).is_err());
    }

    #[test]
    fn masked_pixels_do_not_matter() {
        let gt = row(&[1.0, 2.0, f64::NAN]);
        let mask = valid_mask(&gt, 192.0);
        let bp = row(&[0.3, -0.2, 0.1]);
        let a = row(&[1.5, 1.0, 4.0]);
        let b = row(&[1.5, 1.0, -123.0]);
        assert_eq!(l1_loss(&a, &gt, &mask).unwrap(), l1_loss(&b, &gt, &mask).unwrap());
        assert_eq!(
            joint_loss(&a, &bp, &gt, &mask).unwrap(),
            joint_loss(&b, &bp, &gt, &mask).unwrap()
        );
    }
}
