//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each registered op is reduced to a scalar by a dot product with a fixed
//! random upstream gradient, so one check covers the whole Jacobian-vector
//! product. The relative error per coordinate is
//! `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{joint_loss, joint_loss_grad, l1_loss, l1_loss_grad, valid_mask, LossWeights};
use crate::matcher::cost::{build_feature_volume, feature_volume_backward};
use crate::matcher::features::FeatureMap;
use crate::matcher::regularizer::{regularize_backward, regularize_forward, RegularizerParams};
use crate::matcher::{CostMode, FeatureMode, MatcherConfig};
use crate::nn::{Activation, Conv, Tensor};
use crate::params::ParamSet;
use crate::refine::{
    cspn_backward, cspn_forward, kernels_backward, kernels_forward, normalize_affinities,
    normalize_affinities_backward, KernelMap, KernelNetParams, KERNEL_SIZE,
};
use crate::regression::{entropy_backward, entropy_matchability, soft_argmin, soft_argmin_backward};
use crate::train::objective;
use crate::uncertainty::{logscale_backward, logscale_forward, UncertaintyNetParams};
use crate::volume::{
    softmax_backward, softmax_over_disparity, upsample_backward, upsample_volume, CostVolume,
    MapRole, ProbabilityVolume, ScalarMap, Volume, VolumeDims,
};

/// Tolerance for ops that are linear (or piecewise linear) in their inputs.
pub const LINEAR_TOLERANCE: f64 = 1e-5;
pub const NONLINEAR_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 20;

/// A scalar function with an analytic gradient.
pub trait DiffOp {
    fn eval(&self, x: &[f64]) -> Result<f64>;
    fn grad(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Wraps a pair of closures as a [`DiffOp`].
pub struct FnOp<F, G>(pub F, pub G);

impl<F, G> DiffOp for FnOp<F, G>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn eval(&self, x: &[f64]) -> Result<f64> {
        (self.0)(x)
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.1)(x)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error over all coordinates of `x`.
pub fn grad_check(op: &dyn DiffOp, x: &[f64], eps: f64) -> Result<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(op, x, eps, &all)
}

/// Max relative error over the listed coordinates only.
pub fn grad_check_coords(op: &dyn DiffOp, x: &[f64], eps: f64, coords: &[usize]) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::argument(format!("eps must be positive, got {eps}")));
    }
    let f0 = op.eval(x)?;
    if !f0.is_finite() {
        return Err(Error::validation(format!("forward value is {f0}")));
    }
    let analytic = op.grad(x)?;
    if analytic.len() != x.len() {
        return Err(Error::argument(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = op.eval(&xp)?;
        xp[i] = orig - eps;
        let fm = op.eval(&xp)?;
        xp[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::validation(format!("forward value non-finite at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Max relative error of directional derivatives: the central difference
/// along each direction `v` against `∇f · v`.
pub fn grad_check_directions(
    op: &dyn DiffOp,
    x: &[f64],
    eps: f64,
    directions: &[Vec<f64>],
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::argument(format!("eps must be positive, got {eps}")));
    }
    let analytic = op.grad(x)?;
    if analytic.len() != x.len() {
        return Err(Error::argument(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for v in directions {
        let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + sign * eps * b).collect() };
        let fp = op.eval(&shifted(1.0))?;
        let fm = op.eval(&shifted(-1.0))?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::validation("forward value non-finite along a probe direction"));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a: f64 = analytic.iter().zip(v).map(|(g, d)| g * d).sum();
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Which derivatives of a [`GradCase`] get compared.
pub enum Probe {
    /// Every coordinate.
    All,
    /// A subset of coordinates.
    Coords(Vec<usize>),
    /// Random directions, for ops with thousands of inputs.
    Directions(Vec<Vec<f64>>),
}

/// One random problem: an op, the point to check it at, and the probe.
pub struct GradCase {
    pub op: Box<dyn DiffOp>,
    pub x: Vec<f64>,
    pub probe: Probe,
}

impl GradCase {
    pub fn check(&self, eps: f64) -> Result<f64> {
        let op = self.op.as_ref();
        match &self.probe {
            Probe::All => grad_check(op, &self.x, eps),
            Probe::Coords(c) => grad_check_coords(op, &self.x, eps, c),
            Probe::Directions(d) => grad_check_directions(op, &self.x, eps, d),
        }
    }
}

pub struct RegisteredOp {
    pub name: &'static str,
    pub linear: bool,
    pub eps: f64,
    pub build: fn(u64) -> Result<GradCase>,
}

impl RegisteredOp {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            LINEAR_TOLERANCE
        } else {
            NONLINEAR_TOLERANCE
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

pub fn run_op(op: &RegisteredOp, instances: usize, seed: u64) -> Result<OpReport> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let case = (op.build)(seed.wrapping_mul(7919).wrapping_add(i as u64))?;
        worst = worst.max(case.check(op.eps)?);
    }
    Ok(OpReport {
        name: op.name,
        instances,
        max_error: worst,
        tolerance: op.tolerance(),
    })
}

/// Runs every registered op, or only the one called `only`.
pub fn run_suite(only: Option<&str>, instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let ops = registry();
    let selected: Vec<&RegisteredOp> = match only {
        None | Some("all") => ops.iter().collect(),
        Some(name) => {
            let found: Vec<_> = ops.iter().filter(|o| o.name == name).collect();
            if found.is_empty() {
                let names: Vec<_> = ops.iter().map(|o| o.name).collect();
                return Err(Error::argument(format!(
                    "unknown op {name:?}; available: {}",
                    names.join(", ")
                )));
            }
            found
        }
    };
    selected.into_iter().map(|o| run_op(o, instances, seed)).collect()
}

pub fn registry() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp { name: "softmax", linear: false, eps: 1e-6, build: softmax_case },
        RegisteredOp { name: "soft_argmin", linear: true, eps: 1e-4, build: soft_argmin_case },
        RegisteredOp { name: "entropy", linear: false, eps: 1e-6, build: entropy_case },
        RegisteredOp { name: "uncertainty_map", linear: false, eps: 1e-6, build: uncertainty_case },
        RegisteredOp { name: "joint_loss", linear: false, eps: 1e-6, build: joint_case },
        RegisteredOp { name: "l1_loss", linear: true, eps: 1e-6, build: l1_case },
        RegisteredOp { name: "conv2d", linear: true, eps: 1e-3, build: conv2d_case },
        RegisteredOp { name: "conv3d", linear: true, eps: 1e-3, build: conv3d_case },
        RegisteredOp { name: "cspn_step", linear: false, eps: 1e-4, build: cspn_case },
        RegisteredOp { name: "upsample", linear: true, eps: 1e-3, build: upsample_case },
        RegisteredOp { name: "cost_absdiff", linear: true, eps: 1e-6, build: absdiff_case },
        RegisteredOp { name: "cost_concat", linear: true, eps: 1e-3, build: concat_case },
        RegisteredOp { name: "regularizer", linear: false, eps: 1e-6, build: regularizer_case },
        RegisteredOp { name: "kernel_net", linear: false, eps: 1e-6, build: kernel_net_case },
        RegisteredOp { name: "pipeline_census", linear: false, eps: 1e-7, build: pipeline_census_case },
        RegisteredOp { name: "pipeline_learned", linear: false, eps: 1e-7, build: pipeline_learned_case },
    ]
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flatten(tensors: &[&Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.value.iter().copied()).collect()
}

fn flatten_grads(tensors: &[&Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.grad.iter().copied()).collect()
}

fn load(tensors: Vec<&mut Tensor>, x: &[f64]) {
    let mut at = 0;
    for t in tensors {
        let n = t.len();
        t.value.copy_from_slice(&x[at..at + n]);
        at += n;
    }
}

fn directions(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Probe {
    Probe::Directions((0..k).map(|_| uniform(rng, n, -1.0, 1.0)).collect())
}

fn map(h: usize, w: usize, v: &[f64]) -> Result<ScalarMap> {
    ScalarMap::new(h, w, v.to_vec(), MapRole::Generic)
}

fn softmax_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = VolumeDims::new(rng.gen_range(2..=6), 2, 3);
    let tau = rng.gen_range(0.5..2.0);
    let x = uniform(&mut rng, dims.len(), -2.0, 2.0);
    let u = uniform(&mut rng, dims.len(), -1.0, 1.0);
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let p = softmax_over_disparity(&CostVolume::new(dims, x.to_vec())?, tau)?;
                Ok(dot(p.data(), &u))
            },
            move |x: &[f64]| {
                let p = softmax_over_disparity(&CostVolume::new(dims, x.to_vec())?, tau)?;
                Ok(softmax_backward(&p, &Volume::new(dims, u2.clone())?, tau)?.into_data())
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn random_simplex(rng: &mut ChaCha8Rng, dims: VolumeDims) -> Result<Vec<f64>> {
    let c = CostVolume::new(dims, uniform(rng, dims.len(), -2.0, 2.0))?;
    Ok(softmax_over_disparity(&c, 1.0)?.into_volume().into_data())
}

fn prob(dims: VolumeDims, x: &[f64]) -> Result<ProbabilityVolume> {
    Ok(ProbabilityVolume::new_unchecked(Volume::new(dims, x.to_vec())?))
}

fn soft_argmin_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = VolumeDims::new(rng.gen_range(2..=8), 2, 2);
    let x = random_simplex(&mut rng, dims)?;
    let u = uniform(&mut rng, dims.plane(), -1.0, 1.0);
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| Ok(dot(soft_argmin(&prob(dims, x)?)?.data(), &u)),
            move |x: &[f64]| {
                Ok(soft_argmin_backward(&prob(dims, x)?, &map(2, 2, &u2)?)?.into_data())
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn entropy_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = VolumeDims::new(rng.gen_range(2..=8), 2, 2);
    let x = random_simplex(&mut rng, dims)?;
    let u = uniform(&mut rng, dims.plane(), -1.0, 1.0);
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| Ok(dot(entropy_matchability(&prob(dims, x)?)?.data(), &u)),
            move |x: &[f64]| Ok(entropy_backward(&prob(dims, x)?, &map(2, 2, &u2)?)?.into_data()),
        )),
        x,
        probe: Probe::All,
    })
}

fn uncertainty_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3, 4);
    let mut base = UncertaintyNetParams::init(&mut rng);
    base.conv2.init_uniform(&mut rng, 0.3);
    let mut x = uniform(&mut rng, h * w, 0.0, 2.0);
    x.extend(flatten(&base.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>()));
    let u = uniform(&mut rng, h * w, -1.0, 1.0);
    let u2 = u.clone();
    let base2 = base.clone();
    let n = h * w;
    let params_at = move |base: &UncertaintyNetParams, x: &[f64]| {
        let mut p = base.clone();
        load(p.named_tensors_mut().into_iter().map(|(_, t)| t).collect(), &x[n..]);
        p
    };
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let p = params_at(&base, x);
                Ok(dot(logscale_forward(&map(h, w, &x[..n])?, &p)?.0.data(), &u))
            },
            move |x: &[f64]| {
                let mut p = params_at(&base2, x);
                let (_, trace) = logscale_forward(&map(h, w, &x[..n])?, &p)?;
                let gm = logscale_backward(&mut p, &trace, &map(h, w, &u2)?)?;
                let mut g = gm.into_data();
                g.extend(flatten_grads(&p.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>()));
                Ok(g)
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn loss_fixture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<(ScalarMap, ScalarMap)> {
    let gt = map(h, w, &uniform(rng, h * w, 0.0, 10.0))?;
    let mut m: Vec<f64> = (0..h * w).map(|_| (rng.gen_range(0.0..1.0) < 0.7) as u8 as f64).collect();
    m[0] = 1.0;
    Ok((gt, ScalarMap::new(h, w, m, MapRole::Mask)?))
}

fn joint_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3, 4);
    let n = h * w;
    let (gt, mask) = loss_fixture(&mut rng, h, w)?;
    let mut x = uniform(&mut rng, n, 0.0, 10.0);
    x.extend(uniform(&mut rng, n, -2.0, 2.0));
    let (gt2, mask2) = (gt.clone(), mask.clone());
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| joint_loss(&map(h, w, &x[..n])?, &map(h, w, &x[n..])?, &gt, &mask),
            move |x: &[f64]| {
                let (gd, gb) = joint_loss_grad(&map(h, w, &x[..n])?, &map(h, w, &x[n..])?, &gt2, &mask2)?;
                let mut g = gd.into_data();
                g.extend(gb.into_data());
                Ok(g)
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn l1_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3, 4);
    let (gt, mask) = loss_fixture(&mut rng, h, w)?;
    let x = uniform(&mut rng, h * w, 0.0, 10.0);
    let (gt2, mask2) = (gt.clone(), mask.clone());
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| l1_loss(&map(h, w, x)?, &gt, &mask),
            move |x: &[f64]| Ok(l1_loss_grad(&map(h, w, x)?, &gt2, &mask2)?.into_data()),
        )),
        x,
        probe: Probe::All,
    })
}

fn conv_case(seed: u64, three_d: bool) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ci = rng.gen_range(1..=3);
    let co = rng.gen_range(1..=3);
    let (depth, conv) = if three_d {
        (rng.gen_range(2..=3), Conv::new_3d(ci, co, 3))
    } else {
        (1, Conv::new_2d(ci, co, 3))
    };
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let n_in = ci * depth * h * w;
    let mut x = uniform(&mut rng, n_in, -1.0, 1.0);
    x.extend(uniform(&mut rng, conv.weight.len() + conv.bias.len(), -1.0, 1.0));
    let u = uniform(&mut rng, co * depth * h * w, -1.0, 1.0);
    let setup = move |x: &[f64]| -> Result<(Activation, Conv)> {
        let mut c = conv.clone();
        let nw = c.weight.len();
        c.weight.value.copy_from_slice(&x[n_in..n_in + nw]);
        c.bias.value.copy_from_slice(&x[n_in + nw..]);
        Ok((Activation::new(ci, depth, h, w, x[..n_in].to_vec())?, c))
    };
    let setup2 = setup.clone();
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let (a, c) = setup(x)?;
                Ok(dot(&c.forward(&a)?.data, &u))
            },
            move |x: &[f64]| {
                let (a, mut c) = setup2(x)?;
                let g = Activation::new(co, depth, h, w, u2.clone())?;
                let gi = c.backward(&a, &g, true)?.expect("input gradient requested");
                let mut out = gi.data;
                out.extend(&c.weight.grad);
                out.extend(&c.bias.grad);
                Ok(out)
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn conv2d_case(seed: u64) -> Result<GradCase> {
    conv_case(seed, false)
}

fn conv3d_case(seed: u64) -> Result<GradCase> {
    conv_case(seed, true)
}

const NEIGHBOURS: usize = KERNEL_SIZE * KERNEL_SIZE - 1;

fn raw_kernels(h: usize, w: usize, neighbours: &[f64]) -> Result<KernelMap> {
    let kk = KERNEL_SIZE * KERNEL_SIZE;
    let center = kk / 2;
    let mut data = vec![0.0; h * w * kk];
    for p in 0..h * w {
        let mut j = 0;
        for s in 0..kk {
            if s != center {
                data[p * kk + s] = neighbours[p * NEIGHBOURS + j];
                j += 1;
            }
        }
    }
    KernelMap::new(h, w, KERNEL_SIZE, data)
}

fn neighbour_grads(g: &KernelMap) -> Vec<f64> {
    let kk = KERNEL_SIZE * KERNEL_SIZE;
    g.data()
        .chunks(kk)
        .flat_map(|k| k.iter().enumerate().filter(|(s, _)| *s != kk / 2).map(|(_, &v)| v))
        .collect()
}

fn cspn_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=5));
    let n = h * w;
    let iters = rng.gen_range(1..=3);
    // Slots that replicate the pixel itself at the border have an exactly
    // zero gradient; small values keep the roundoff of the numeric estimate
    // there well below the error floor. Magnitudes stay away from the kinks
    // of |k| and of max(Σ|k|, 1).
    let mut x = uniform(&mut rng, n, 0.0, 1.0);
    for _ in 0..n {
        loop {
            let scale = rng.gen_range(0.05..0.3);
            let k: Vec<f64> = (0..NEIGHBOURS)
                .map(|_| {
                    let m = rng.gen_range(0.1 * scale..scale);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            if (k.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() > 1e-2 {
                x.extend(k);
                break;
            }
        }
    }
    let u = uniform(&mut rng, n, -0.05, 0.05);
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let k = normalize_affinities(&raw_kernels(h, w, &x[n..])?);
                Ok(dot(cspn_forward(&map(h, w, &x[..n])?, &k, iters)?.0.data(), &u))
            },
            move |x: &[f64]| {
                let raw = raw_kernels(h, w, &x[n..])?;
                let k = normalize_affinities(&raw);
                let (_, trace) = cspn_forward(&map(h, w, &x[..n])?, &k, iters)?;
                let (gd, gk) = cspn_backward(&k, &trace, &map(h, w, &u2)?)?;
                let graw = normalize_affinities_backward(&raw, &gk)?;
                let mut g = gd.into_data();
                g.extend(neighbour_grads(&graw));
                Ok(g)
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn upsample_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = VolumeDims::new(2, rng.gen_range(1..=3), rng.gen_range(1..=4));
    let f = rng.gen_range(1..=3);
    let out = VolumeDims::new(2, dims.height * f, dims.width * f);
    let x = uniform(&mut rng, dims.len(), -1.0, 1.0);
    let u = uniform(&mut rng, out.len(), -1.0, 1.0);
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| Ok(dot(upsample_volume(&Volume::new(dims, x.to_vec())?, f).data(), &u)),
            move |_: &[f64]| Ok(upsample_backward(&Volume::new(out, u2.clone())?, f)?.into_data()),
        )),
        x,
        probe: Probe::All,
    })
}

fn feature_case(seed: u64, mode: CostMode) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let (h, w) = (2, rng.gen_range(4..=6));
    let d = rng.gen_range(2..=w * stride);
    let n = c * h * w;
    let x = uniform(&mut rng, 2 * n, -1.0, 1.0);
    let channels = if mode == CostMode::Concat { 2 * c } else { c };
    let u = uniform(&mut rng, channels * d * h * w, -1.0, 1.0);
    let maps = move |x: &[f64]| -> Result<(FeatureMap, FeatureMap)> {
        Ok((
            FeatureMap::new(Activation::new(c, 1, h, w, x[..n].to_vec())?, stride)?,
            FeatureMap::new(Activation::new(c, 1, h, w, x[n..].to_vec())?, stride)?,
        ))
    };
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let (l, r) = maps(x)?;
                Ok(dot(&build_feature_volume(&l, &r, d, mode)?.activation().data, &u))
            },
            move |x: &[f64]| {
                let (l, r) = maps(x)?;
                let fv = build_feature_volume(&l, &r, d, mode)?;
                let g = Activation::new(channels, d, h, w, u2.clone())?;
                let (gl, gr) = feature_volume_backward(&l, &r, &fv, &g)?;
                let mut out = gl.data;
                out.extend(gr.data);
                Ok(out)
            },
        )),
        x,
        probe: Probe::All,
    })
}

fn absdiff_case(seed: u64) -> Result<GradCase> {
    feature_case(seed, CostMode::AbsDiff)
}

fn concat_case(seed: u64) -> Result<GradCase> {
    feature_case(seed, CostMode::Concat)
}

fn regularizer_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ci = rng.gen_range(1..=2);
    let (d, h, w) = (2, 4, 6);
    let base = RegularizerParams::init(ci, &mut rng);
    let n_in = ci * d * h * w;
    let mut x = uniform(&mut rng, n_in, -1.0, 1.0);
    x.extend(flatten(&base.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>()));
    let u = uniform(&mut rng, d * h * w, -1.0, 1.0);
    let probe = directions(&mut rng, x.len(), 8);
    let setup = move |x: &[f64]| -> Result<(Activation, RegularizerParams)> {
        let mut p = base.clone();
        load(p.named_tensors_mut().into_iter().map(|(_, t)| t).collect(), &x[n_in..]);
        Ok((Activation::new(ci, d, h, w, x[..n_in].to_vec())?, p))
    };
    let setup2 = setup.clone();
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let (a, p) = setup(x)?;
                Ok(dot(regularize_forward(&a, &p)?.0.data(), &u))
            },
            move |x: &[f64]| {
                let (a, mut p) = setup2(x)?;
                let (_, trace) = regularize_forward(&a, &p)?;
                let g = Volume::new(VolumeDims::new(d, h, w), u2.clone())?;
                let gi = regularize_backward(&mut p, &trace, &g, true)?.expect("input gradient requested");
                let mut out = gi.data;
                out.extend(flatten_grads(&p.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>()));
                Ok(out)
            },
        )),
        x,
        probe,
    })
}

fn kernel_net_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=6));
    let n = h * w;
    let mut base = KernelNetParams::init(&mut rng);
    base.head.init_uniform(&mut rng, 0.5);
    for (name, t) in base.named_tensors_mut() {
        if name.ends_with("bias") {
            t.value = uniform(&mut rng, t.len(), -0.2, 0.2);
        }
    }
    let mut x = uniform(&mut rng, 3 * n, 0.0, 1.0);
    x.extend(flatten(&base.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>()));
    let u = uniform(&mut rng, n * KERNEL_SIZE * KERNEL_SIZE, -1.0, 1.0);
    let probe = directions(&mut rng, x.len(), 8);
    let setup = move |x: &[f64]| -> Result<([ScalarMap; 3], KernelNetParams)> {
        let mut p = base.clone();
        load(p.named_tensors_mut().into_iter().map(|(_, t)| t).collect(), &x[3 * n..]);
        Ok(([map(h, w, &x[..n])?, map(h, w, &x[n..2 * n])?, map(h, w, &x[2 * n..3 * n])?], p))
    };
    let setup2 = setup.clone();
    let u2 = u.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| {
                let ([a, b, c], p) = setup(x)?;
                Ok(dot(kernels_forward(&a, &b, &c, &p)?.0.data(), &u))
            },
            move |x: &[f64]| {
                let ([a, b, c], mut p) = setup2(x)?;
                let (_, trace) = kernels_forward(&a, &b, &c, &p)?;
                let g = KernelMap::new(h, w, KERNEL_SIZE, u2.clone())?;
                let gi = kernels_backward(&mut p, &trace, &g)?;
                let mut out: Vec<f64> = gi.iter().flat_map(|m| m.data().iter().copied()).collect();
                out.extend(flatten_grads(&p.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>()));
                Ok(out)
            },
        )),
        x,
        probe,
    })
}

fn pipeline_case(seed: u64, config: MatcherConfig, h: usize, w: usize) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = ParamSet::init(&config, seed);
    base.kernels.head.init_uniform(&mut rng, 0.5);
    base.uncertainty.conv2.init_uniform(&mut rng, 0.3);
    // Zero biases over all-zero input regions put pre-activations exactly on
    // the rectifier kink, where the function has no derivative.
    for (name, t) in base.named_tensors_mut() {
        if name.ends_with("bias") && !name.starts_with("uncertainty") {
            t.value = uniform(&mut rng, t.len(), -0.2, 0.2);
        }
    }
    let left = map(h, w, &uniform(&mut rng, h * w, 0.0, 1.0))?;
    let right = map(h, w, &uniform(&mut rng, h * w, 0.0, 1.0))?;
    let top = (config.disparities - 1) as f64;
    let gt = map(h, w, &uniform(&mut rng, h * w, 0.0, top))?;
    let mask = valid_mask(&gt, top);
    let x = flatten(&base.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let probe = directions(&mut rng, x.len(), 4);
    let weights = LossWeights::default();
    let run = move |x: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut p = base.clone();
        load(p.named_tensors_mut().into_iter().map(|(_, t)| t).collect(), x);
        p.zero_grad();
        let (loss, _) = objective(&mut p, &config, &left, &right, &gt, &mask, weights)?;
        let g = if want_grad {
            flatten_grads(&p.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>())
        } else {
            Vec::new()
        };
        Ok((loss.total, g))
    };
    let run2 = run.clone();
    Ok(GradCase {
        op: Box::new(FnOp(
            move |x: &[f64]| Ok(run(x, false)?.0),
            move |x: &[f64]| Ok(run2(x, true)?.1),
        )),
        x,
        probe,
    })
}

fn pipeline_census_case(seed: u64) -> Result<GradCase> {
    let config = MatcherConfig {
        disparities: 4,
        regularizer_depth: 3,
        refine_iters: 3,
        ..Default::default()
    };
    pipeline_case(seed, config, 6, 10)
}

fn pipeline_learned_case(seed: u64) -> Result<GradCase> {
    let config = MatcherConfig {
        disparities: 4,
        stride: 2,
        feature_mode: FeatureMode::Learned,
        cost_mode: CostMode::Concat,
        channels: 3,
        regularizer_depth: 3,
        refine_iters: 3,
        ..Default::default()
    };
    pipeline_case(seed, config, 10, 12)
}
