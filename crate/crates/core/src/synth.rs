//! Random-dot stereo pairs with exact ground truth.
//!
//! The left view is i.i.d. uniform noise with a few flat rectangles painted
//! in. Disparities are integers, so the right view is an exact forward
//! splat of the left one: the left pixel at `x` lands at `x - d` in the
//! right view, and where several land on the same spot the nearer surface
//! (larger disparity) wins. Right pixels nothing lands on get fresh noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{DisparityMap, MapRole, MaskMap, ScalarMap};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
    /// Target fraction of the left image covered by flat rectangles.
    pub textureless_fraction: f64,
    /// Replaces the random disparity layout with a constant field.
    pub constant_disparity: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            max_disp: 15,
            textureless_fraction: 0.1,
            constant_disparity: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::argument(format!(
                "synthetic image {}x{} too small",
                self.height, self.width
            )));
        }
        if 4 * self.max_disp >= self.width {
            return Err(Error::argument(format!(
                "max_disp {} must be below width / 4 = {}",
                self.max_disp,
                self.width as f64 / 4.0
            )));
        }
        if !(0.0..=1.0).contains(&self.textureless_fraction) {
            return Err(Error::argument(format!(
                "textureless_fraction {} outside [0, 1]",
                self.textureless_fraction
            )));
        }
        if let Some(k) = self.constant_disparity {
            if k > self.max_disp {
                return Err(Error::argument(format!(
                    "constant disparity {k} exceeds max_disp {}",
                    self.max_disp
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub left: ScalarMap,
    pub right: ScalarMap,
    pub disparity: DisparityMap,
    /// Left pixels with no counterpart in the right view.
    pub occlusion: MaskMap,
    pub textureless: MaskMap,
    pub seed: u64,
}

struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn random<R: Rng>(rng: &mut R, height: usize, width: usize, min: usize, max: usize) -> Self {
        let h = rng.gen_range(min.min(height)..=max.min(height));
        let w = rng.gen_range(min.min(width)..=max.min(width));
        Rect {
            y0: rng.gen_range(0..=height - h),
            x0: rng.gen_range(0..=width - w),
            h,
            w,
        }
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.h).flat_map(move |y| (self.x0..self.x0 + self.w).map(move |x| (y, x)))
    }
}

fn disparity_layout<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    if let Some(k) = cfg.constant_disparity {
        return vec![k as f64; h * w];
    }
    let top = cfg.max_disp as f64;
    // background: a tilted plane in the lower half of the range
    let base = rng.gen_range(0.0..=top * 0.25);
    let gx = rng.gen_range(-1.0..=1.0) * top * 0.25;
    let gy = rng.gen_range(-1.0..=1.0) * top * 0.25;
    let mut d: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let v = base + top * 0.25 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            v.round().clamp(0.0, top)
        })
        .collect();
    // fronto-parallel foreground blocks
    let blocks = rng.gen_range(1..=3);
    for _ in 0..blocks {
        let r = Rect::random(rng, h, w, (h.min(w) / 6).max(2), (h.min(w) / 2).max(2));
        let v = rng.gen_range(cfg.max_disp / 2..=cfg.max_disp) as f64;
        for (y, x) in r.cells() {
            d[y * w + x] = v;
        }
    }
    d
}

pub fn gen_synthetic_pair(seed: u64, cfg: &SynthConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disparity = disparity_layout(&mut rng, cfg);

    let mut left: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut flat = vec![0.0; h * w];
    let target = (cfg.textureless_fraction * (h * w) as f64).round() as usize;
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 64 {
        attempts += 1;
        let r = Rect::random(&mut rng, h, w, (h.min(w) / 5).max(2), (h.min(w) / 2).max(2));
        let v = rng.gen_range(0.0..1.0);
        for (y, x) in r.cells() {
            let i = y * w + x;
            left[i] = v;
            if flat[i] == 0.0 {
                flat[i] = 1.0;
                covered += 1;
            }
        }
    }

    let mut right = vec![f64::NAN; h * w];
    let mut depth = vec![-1.0; h * w];
    let mut owner = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = disparity[i];
            let xr = x as isize - d as isize;
            if xr < 0 {
                continue;
            }
            let j = y * w + xr as usize;
            if d > depth[j] {
                depth[j] = d;
                right[j] = left[i];
                owner[j] = x;
            }
        }
    }
    for v in right.iter_mut().filter(|v| v.is_nan()) {
        *v = rng.gen_range(0.0..1.0);
    }
    let occlusion: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let xr = x as isize - disparity[i] as isize;
            let visible = xr >= 0 && owner[y * w + xr as usize] == x;
            if visible {
                0.0
            } else {
                1.0
            }
        })
        .collect();

    Ok(SyntheticSample {
        left: ScalarMap::new(h, w, left, MapRole::Image)?,
        right: ScalarMap::new(h, w, right, MapRole::Image)?,
        disparity: ScalarMap::new(h, w, disparity, MapRole::Disparity)?,
        occlusion: ScalarMap::new(h, w, occlusion, MapRole::Mask)?,
        textureless: ScalarMap::new(h, w, flat, MapRole::Mask)?,
        seed,
    })
}

/// Resamples `right` into the left view: `out(x) = right(x - d(x))`.
/// Pixels whose source falls outside the image are NaN. Disparities are
/// rounded to the nearest integer.
pub fn warp_to_left(right: &ScalarMap, disparity: &DisparityMap) -> Result<ScalarMap> {
    right.expect_shape(disparity, "image vs disparity")?;
    let w = right.width() as isize;
    Ok(ScalarMap::from_fn(right.height(), right.width(), MapRole::Image, |y, x| {
        let xs = x as isize - disparity.get(y, x).round() as isize;
        if (0..w).contains(&xs) {
            right.get(y, xs as usize)
        } else {
            f64::NAN
        }
    }))
}
