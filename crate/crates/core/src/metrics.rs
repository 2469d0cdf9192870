//! Benchmark metrics over valid pixels.
//!
//! Sums run in `f64` in row-major order. Thresholds are strict: a pixel is
//! bad at N px when its error is `> N`, and D1-bad when the error exceeds
//! both 3 px and 5% of the ground truth.

use std::fmt;

use crate::error::{Error, Result};
use crate::volume::{DisparityMap, LogScaleMap, MaskMap, ScalarMap};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epe: f64,
    pub pct_gt1: f64,
    pub pct_gt3: f64,
    pub d1: f64,
    pub epe_matchable: Option<f64>,
    pub epe_unmatchable: Option<f64>,
    pub valid_pixels: usize,
    pub matchable_pixels: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "epe,pct_gt1,pct_gt3,d1,epe_matchable,epe_unmatchable,valid_pixels,matchable_pixels";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epe,
            self.pct_gt1,
            self.pct_gt3,
            self.d1,
            opt(self.epe_matchable),
            opt(self.epe_unmatchable),
            self.valid_pixels,
            self.matchable_pixels
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "{:<18}{:.4} px", "EPE", self.epe)?;
        writeln!(f, "{:<18}{:.2} %", ">1px", self.pct_gt1)?;
        writeln!(f, "{:<18}{:.2} %", ">3px", self.pct_gt3)?;
        writeln!(f, "{:<18}{:.2} %", "D1", self.d1)?;
        writeln!(f, "{:<18}{}", "EPE matchable", opt(self.epe_matchable))?;
        writeln!(f, "{:<18}{}", "EPE unmatchable", opt(self.epe_unmatchable))?;
        writeln!(f, "{:<18}{}", "valid pixels", self.valid_pixels)?;
        write!(f, "{:<18}{}", "matchable pixels", self.matchable_pixels)
    }
}

fn check(d: &ScalarMap, gt: &ScalarMap, mask: &ScalarMap) -> Result<()> {
    d.expect_shape(gt, "prediction vs ground truth")?;
    d.expect_shape(mask, "prediction vs mask")
}

#[inline]
fn is_d1_bad(err: f64, gt: f64) -> bool {
    err > 3.0 && err > 0.05 * gt
}

pub fn compute_metrics(d: &DisparityMap, gt: &DisparityMap, mask: &MaskMap) -> Result<MetricsReport> {
    check(d, gt, mask)?;
    let mut n = 0usize;
    let mut sum = 0.0;
    let (mut gt1, mut gt3, mut d1) = (0usize, 0usize, 0usize);
    for ((&p, &g), &m) in d.data().iter().zip(gt.data()).zip(mask.data()) {
        if m <= 0.5 {
            continue;
        }
        let err = (p - g).abs();
        n += 1;
        sum += err;
        gt1 += (err > 1.0) as usize;
        gt3 += (err > 3.0) as usize;
        d1 += is_d1_bad(err, g) as usize;
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels to evaluate".into()));
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(MetricsReport {
        epe: sum / n as f64,
        pct_gt1: pct(gt1),
        pct_gt3: pct(gt3),
        d1: pct(d1),
        epe_matchable: None,
        epe_unmatchable: None,
        valid_pixels: n,
        matchable_pixels: 0,
    })
}

/// [`compute_metrics`] plus EPE on the pixels with `B' < 0` (attenuation
/// weight above one) and on the rest.
pub fn split_metrics(
    d: &DisparityMap,
    gt: &DisparityMap,
    logscale: &LogScaleMap,
    mask: &MaskMap,
) -> Result<MetricsReport> {
    let mut report = compute_metrics(d, gt, mask)?;
    d.expect_shape(logscale, "prediction vs log-scale")?;
    let (mut nm, mut sm, mut nu, mut su) = (0usize, 0.0, 0usize, 0.0);
    for (((&p, &g), &m), &b) in d.data().iter().zip(gt.data()).zip(mask.data()).zip(logscale.data()) {
        if m <= 0.5 {
            continue;
        }
        let err = (p - g).abs();
        if b < 0.0 {
            nm += 1;
            sm += err;
        } else {
            nu += 1;
            su += err;
        }
    }
    report.epe_matchable = (nm > 0).then(|| sm / nm as f64);
    report.epe_unmatchable = (nu > 0).then(|| su / nu as f64);
    report.matchable_pixels = nm;
    Ok(report)
}

/// Whether a sample has enough ground truth to be averaged in: rejected
/// when fewer than 10% of its pixels are valid.
pub fn sample_filter(gt: &DisparityMap, mask: &MaskMap) -> bool {
    if !gt.same_shape(mask) || mask.is_empty() {
        return false;
    }
    let valid = mask.data().iter().filter(|&&m| m > 0.5).count();
    valid * 10 >= mask.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::MapRole;

    fn row(v: &[f64], role: MapRole) -> ScalarMap {
        ScalarMap::new(1, v.len(), v.to_vec(), role).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = row(&[1.0, 5.0, 9.0], MapRole::Disparity);
        let m = row(&[1.0; 3], MapRole::Mask);
        let r = compute_metrics(&gt, &gt, &m).unwrap();
        assert_eq!((r.epe, r.pct_gt1, r.pct_gt3, r.d1, r.valid_pixels), (0.0, 0.0, 0.0, 0.0, 3));
    }

    #[test]
    fn arithmetic_example() {
        let gt = row(&[10.0; 4], MapRole::Disparity);
        let d = row(&[10.0, 11.0, 12.0, 15.0], MapRole::Disparity);
        let m = row(&[1.0; 4], MapRole::Mask);
        let r = compute_metrics(&d, &gt, &m).unwrap();
        assert_eq!((r.epe, r.pct_gt1, r.pct_gt3), (2.0, 50.0, 25.0));
    }

    #[test]
    fn d1_needs_both_clauses() {
        let m = row(&[1.0], MapRole::Mask);
        let case = |err: f64, g: f64| {
            compute_metrics(&row(&[g + err], MapRole::Disparity), &row(&[g], MapRole::Disparity), &m)
                .unwrap()
                .d1
        };
        assert_eq!(case(3.5, 100.0), 0.0);
        assert_eq!(case(6.0, 100.0), 100.0);
        assert_eq!(case(4.0, 200.0), 0.0);
        assert_eq!(case(4.0, 20.0), 100.0);
        assert_eq!(case(3.0, 1.0), 0.0);
    }

    #[test]
    fn masked_pixels_ignored_and_empty_mask_degenerate() {
        let gt = row(&[1.0, 1.0], MapRole::Disparity);
        let d = row(&[1.0, 50.0], MapRole::Disparity);
        let r = compute_metrics(&d, &gt, &row(&[1.0, 0.0], MapRole::Mask)).unwrap();
        assert_eq!(r.epe, 0.0);
        assert!(matches!(
            compute_metrics(&d, &gt, &row(&[0.0, 0.0], MapRole::Mask)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn split_extremes() {
        let gt = row(&[1.0, 2.0, 3.0], MapRole::Disparity);
        let d = row(&[1.5, 2.0, 5.0], MapRole::Disparity);
        let m = row(&[1.0; 3], MapRole::Mask);
        let r = split_metrics(&d, &gt, &row(&[-1.0; 3], MapRole::LogScale), &m).unwrap();
        assert_eq!((r.epe_matchable, r.epe_unmatchable, r.matchable_pixels), (Some(r.epe), None, 3));
        let r = split_metrics(&d, &gt, &row(&[1.0; 3], MapRole::LogScale), &m).unwrap();
        assert_eq!((r.epe_matchable, r.epe_unmatchable, r.matchable_pixels), (None, Some(r.epe), 0));
    }

    #[test]
    fn filter_boundary() {
        let gt = ScalarMap::filled(10, 10, 1.0, MapRole::Disparity);
        let mask = |k: usize| {
            ScalarMap::from_fn(10, 10, MapRole::Mask, |y, x| ((y * 10 + x) < k) as u8 as f64)
        };
        assert!(!sample_filter(&gt, &mask(9)));
        assert!(sample_filter(&gt, &mask(10)));
        assert!(sample_filter(&gt, &mask(100)));
    }
}
