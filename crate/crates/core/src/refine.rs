//! Matchability-aware disparity refinement.
//!
//! A small encoder-decoder predicts per-pixel affinities from the stacked
//! `{disparity, luminance, matchability}` maps. The affinities are
//! normalized into stable averaging kernels and applied iteratively
//! (convolutional spatial propagation) with edge replication at borders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, relu_backward, relu_inplace, upsample_nearest2,
    upsample_nearest2_backward, Activation, Conv, Tensor,
};
use crate::volume::{DisparityMap, MapRole, ScalarMap};

pub const KERNEL_SIZE: usize = 3;
pub const DEFAULT_ITERATIONS: usize = 24;
/// Tolerance on the per-pixel weight sum accepted by [`cspn_refine`].
pub const KERNEL_SUM_TOLERANCE: f64 = 1e-6;

/// Per-pixel `k x k` affinities, laid out `(H, W, k, k)`. Index
/// `(k/2, k/2)` is the pixel itself.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    height: usize,
    width: usize,
    k: usize,
    data: Vec<f64>,
}

impl KernelMap {
    pub fn new(height: usize, width: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::argument(format!("kernel size must be odd, got {k}")));
        }
        if data.len() != height * width * k * k {
            return Err(Error::argument(format!(
                "kernel map {height}x{width}x{k}x{k} needs {} values, got {}",
                height * width * k * k,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            k,
            data,
        })
    }

    /// Center weight 1, neighbours 0.
    pub fn identity(height: usize, width: usize, k: usize) -> Self {
        let mut data = vec![0.0; height * width * k * k];
        let c = (k / 2) * k + k / 2;
        for p in 0..height * width {
            data[p * k * k + c] = 1.0;
        }
        Self {
            height,
            width,
            k,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Kernel of pixel `(y, x)`.
    pub fn kernel(&self, y: usize, x: usize) -> &[f64] {
        let kk = self.k * self.k;
        let p = y * self.width + x;
        &self.data[p * kk..(p + 1) * kk]
    }

    fn center(&self) -> usize {
        (self.k / 2) * self.k + self.k / 2
    }

    /// Kernel positions other than the center, row-major.
    fn neighbor_slots(&self) -> impl Iterator<Item = usize> + '_ {
        let c = self.center();
        (0..self.k * self.k).filter(move |&i| i != c)
    }
}

/// Encoder-decoder widths 3 → 16 → 32 → 16 → (k²−1).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelNetParams {
    pub enc1: Conv,
    pub enc2: Conv,
    pub dec1: Conv,
    pub head: Conv,
}

pub const KERNEL_NET_INPUTS: usize = 3;

impl Default for KernelNetParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl KernelNetParams {
    pub fn zeros() -> Self {
        Self {
            enc1: Conv::new_2d(KERNEL_NET_INPUTS, 16, 3),
            enc2: Conv::new_2d(16, 32, 3),
            dec1: Conv::new_2d(32, 16, 3),
            head: Conv::new_2d(16, KERNEL_SIZE * KERNEL_SIZE - 1, 3),
        }
    }

    /// Random body with a zero head: refinement starts as the identity.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        p.enc1.init_uniform(rng, 1.0);
        p.enc2.init_uniform(rng, 1.0);
        p.dec1.init_uniform(rng, 1.0);
        p
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc1.weight", &self.enc1.weight),
            ("enc1.bias", &self.enc1.bias),
            ("enc2.weight", &self.enc2.weight),
            ("enc2.bias", &self.enc2.bias),
            ("dec1.weight", &self.dec1.weight),
            ("dec1.bias", &self.dec1.bias),
            ("head.weight", &self.head.weight),
            ("head.bias", &self.head.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("enc1.weight", &mut self.enc1.weight),
            ("enc1.bias", &mut self.enc1.bias),
            ("enc2.weight", &mut self.enc2.weight),
            ("enc2.bias", &mut self.enc2.bias),
            ("dec1.weight", &mut self.dec1.weight),
            ("dec1.bias", &mut self.dec1.bias),
            ("head.weight", &mut self.head.weight),
            ("head.bias", &mut self.head.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct KernelNetTrace {
    input: Activation,
    e1: Activation,
    p1: Activation,
    e2: Activation,
    u: Activation,
    r: Activation,
    d1: Activation,
}

/// Raw neighbour affinities from pre-scaled inputs (disparity divided by
/// its maximum, luminance in `[0, 1]`, matchability divided by `ln D`).
/// Center entries of the result are zero.
pub fn extract_diffusion_kernels(
    disparity: &DisparityMap,
    image: &ScalarMap,
    matchability: &ScalarMap,
    params: &KernelNetParams,
) -> Result<KernelMap> {
    Ok(kernels_forward(disparity, image, matchability, params)?.0)
}

pub fn kernels_forward(
    disparity: &DisparityMap,
    image: &ScalarMap,
    matchability: &ScalarMap,
    params: &KernelNetParams,
) -> Result<(KernelMap, KernelNetTrace)> {
    disparity.expect_shape(image, "disparity vs image")?;
    disparity.expect_shape(matchability, "disparity vs matchability")?;
    let (h, w) = (disparity.height(), disparity.width());
    let input = Activation::from_planes(h, w, &[disparity.data(), image.data(), matchability.data()])?;
    let mut e1 = params.enc1.forward(&input)?;
    relu_inplace(&mut e1);
    let p1 = avg_pool2(&e1);
    let mut e2 = params.enc2.forward(&p1)?;
    relu_inplace(&mut e2);
    let u = upsample_nearest2(&e2, h, w);
    let mut r = params.dec1.forward(&u)?;
    relu_inplace(&mut r);
    let mut d1 = r.clone();
    for (a, b) in d1.data.iter_mut().zip(&e1.data) {
        *a += b;
    }
    let out = params.head.forward(&d1)?;

    let k = KERNEL_SIZE;
    let mut kernels = KernelMap::new(h, w, k, vec![0.0; h * w * k * k])?;
    let slots: Vec<usize> = kernels.neighbor_slots().collect();
    let plane = h * w;
    for (n, &slot) in slots.iter().enumerate() {
        let chan = &out.data[n * plane..(n + 1) * plane];
        for (p, &v) in chan.iter().enumerate() {
            kernels.data[p * k * k + slot] = v;
        }
    }
    Ok((
        kernels,
        KernelNetTrace {
            input,
            e1,
            p1,
            e2,
            u,
            r,
            d1,
        },
    ))
}

/// Accumulates parameter gradients given `∂/∂raw kernels` and returns the
/// gradient w.r.t. the three input planes `[disparity, image, matchability]`.
pub fn kernels_backward(
    params: &mut KernelNetParams,
    trace: &KernelNetTrace,
    grad_raw: &KernelMap,
) -> Result<[ScalarMap; 3]> {
    let (h, w) = (trace.input.height, trace.input.width);
    if grad_raw.height != h || grad_raw.width != w || grad_raw.k != KERNEL_SIZE {
        return Err(Error::argument("kernel backward: gradient shape mismatch"));
    }
    let k = KERNEL_SIZE;
    let plane = h * w;
    let slots: Vec<usize> = grad_raw.neighbor_slots().collect();
    let mut g_out = Activation::zeros(slots.len(), 1, h, w);
    for (n, &slot) in slots.iter().enumerate() {
        for p in 0..plane {
            g_out.data[n * plane + p] = grad_raw.data[p * k * k + slot];
        }
    }
    let g_d1 = params
        .head
        .backward(&trace.d1, &g_out, true)?
        .expect("input gradient requested");
    let mut g_r = g_d1.clone();
    relu_backward(&trace.r, &mut g_r);
    let g_u = params
        .dec1
        .backward(&trace.u, &g_r, true)?
        .expect("input gradient requested");
    let mut g_e2 = upsample_nearest2_backward(&g_u, h, w);
    relu_backward(&trace.e2, &mut g_e2);
    let g_p1 = params
        .enc2
        .backward(&trace.p1, &g_e2, true)?
        .expect("input gradient requested");
    let mut g_e1 = avg_pool2_backward(&g_p1, h, w);
    for (a, b) in g_e1.data.iter_mut().zip(&g_d1.data) {
        *a += b;
    }
    relu_backward(&trace.e1, &mut g_e1);
    let g_in = params
        .enc1
        .backward(&trace.input, &g_e1, true)?
        .expect("input gradient requested");
    let plane_of = |c: usize| {
        ScalarMap::new(h, w, g_in.channel(c).to_vec(), MapRole::Generic)
    };
    Ok([plane_of(0)?, plane_of(1)?, plane_of(2)?])
}

/// Scales neighbour affinities by `max(Σ|κ|, 1)` and sets the center to the
/// residual, so every kernel sums to one.
pub fn normalize_affinities(raw: &KernelMap) -> KernelMap {
    let kk = raw.k * raw.k;
    let c = raw.center();
    let mut out = raw.clone();
    for p in 0..raw.height * raw.width {
        let ker = &mut out.data[p * kk..(p + 1) * kk];
        let abs_sum: f64 = (0..kk).filter(|&i| i != c).map(|i| ker[i].abs()).sum();
        let div = abs_sum.max(1.0);
        let mut s = 0.0;
        for i in (0..kk).filter(|&i| i != c) {
            ker[i] /= div;
            s += ker[i];
        }
        ker[c] = 1.0 - s;
    }
    out
}

/// Gradient w.r.t. raw neighbour affinities given the gradient w.r.t. the
/// normalized kernels (center included). Center entries of the result are
/// zero.
pub fn normalize_affinities_backward(raw: &KernelMap, grad: &KernelMap) -> Result<KernelMap> {
    if raw.height != grad.height || raw.width != grad.width || raw.k != grad.k {
        return Err(Error::argument("normalization backward: shape mismatch"));
    }
    let kk = raw.k * raw.k;
    let c = raw.center();
    let mut out = KernelMap::new(raw.height, raw.width, raw.k, vec![0.0; raw.data.len()])?;
    for p in 0..raw.height * raw.width {
        let kr = &raw.data[p * kk..(p + 1) * kk];
        let g = &grad.data[p * kk..(p + 1) * kk];
        let o = &mut out.data[p * kk..(p + 1) * kk];
        let abs_sum: f64 = (0..kk).filter(|&i| i != c).map(|i| kr[i].abs()).sum();
        // the center is 1 - Σ neighbours
        let eff = |i: usize| g[i] - g[c];
        if abs_sum <= 1.0 {
            for i in (0..kk).filter(|&i| i != c) {
                o[i] = eff(i);
            }
        } else {
            let dotp: f64 = (0..kk).filter(|&i| i != c).map(|i| eff(i) * kr[i]).sum();
            for i in (0..kk).filter(|&i| i != c) {
                let sgn = if kr[i] > 0.0 {
                    1.0
                } else if kr[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                o[i] = eff(i) / abs_sum - sgn * dotp / (abs_sum * abs_sum);
            }
        }
    }
    Ok(out)
}

fn check_kernels(d0: &DisparityMap, kernels: &KernelMap) -> Result<()> {
    if d0.height() != kernels.height || d0.width() != kernels.width {
        return Err(Error::argument(format!(
            "disparity {}x{} vs kernels {}x{}",
            d0.height(),
            d0.width(),
            kernels.height,
            kernels.width
        )));
    }
    let kk = kernels.k * kernels.k;
    for (p, ker) in kernels.data.chunks_exact(kk).enumerate() {
        let s: f64 = ker.iter().sum();
        if !((s - 1.0).abs() <= KERNEL_SUM_TOLERANCE) {
            return Err(Error::validation(format!(
                "kernel at pixel {p} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// One propagation step, edge-replicated. Kernels sum to one, so the
/// weighted sum is evaluated as `d + Σ κ_n (d_n - d)` over the neighbours,
/// which leaves constant maps exactly unchanged.
fn propagate(src: &[f64], kernels: &KernelMap, dst: &mut [f64]) {
    let (h, w, k) = (kernels.height, kernels.width, kernels.k);
    let r = (k / 2) as isize;
    let c = kernels.center();
    for y in 0..h {
        for x in 0..w {
            let ker = kernels.kernel(y, x);
            let own = src[y * w + x];
            let mut s = 0.0;
            for i in 0..k {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                for j in 0..k {
                    if i * k + j == c {
                        continue;
                    }
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    s += ker[i * k + j] * (src[yy * w + xx] - own);
                }
            }
            dst[y * w + x] = own + s;
        }
    }
}

pub fn cspn_refine(
    d0: &DisparityMap,
    kernels: &KernelMap,
    iterations: usize,
) -> Result<DisparityMap> {
    check_kernels(d0, kernels)?;
    let mut cur = d0.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..iterations {
        propagate(&cur, kernels, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    ScalarMap::new(d0.height(), d0.width(), cur, MapRole::Disparity)
}

/// Every iterate `D_0 .. D_T`, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CspnTrace {
    states: Vec<Vec<f64>>,
}

pub fn cspn_forward(
    d0: &DisparityMap,
    kernels: &KernelMap,
    iterations: usize,
) -> Result<(DisparityMap, CspnTrace)> {
    check_kernels(d0, kernels)?;
    let mut states = Vec::with_capacity(iterations + 1);
    states.push(d0.data().to_vec());
    for t in 0..iterations {
        let mut next = vec![0.0; d0.len()];
        propagate(&states[t], kernels, &mut next);
        states.push(next);
    }
    let out = ScalarMap::new(
        d0.height(),
        d0.width(),
        states[iterations].clone(),
        MapRole::Disparity,
    )?;
    Ok((out, CspnTrace { states }))
}

/// Returns `(∂/∂D0, ∂/∂normalized kernels)`. The center weight is implied
/// by the neighbours, so its gradient entry is zero.
pub fn cspn_backward(
    kernels: &KernelMap,
    trace: &CspnTrace,
    upstream: &ScalarMap,
) -> Result<(ScalarMap, KernelMap)> {
    let (h, w, k) = (kernels.height, kernels.width, kernels.k);
    if upstream.height() != h || upstream.width() != w {
        return Err(Error::argument("cspn backward: upstream shape mismatch"));
    }
    let r = (k / 2) as isize;
    let c = kernels.center();
    let mut gk = KernelMap::new(h, w, k, vec![0.0; kernels.data.len()])?;
    let mut g = upstream.data().to_vec();
    let mut g_prev = vec![0.0; g.len()];
    for t in (0..trace.states.len() - 1).rev() {
        let src = &trace.states[t];
        g_prev.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for x in 0..w {
                let go = g[y * w + x];
                if go == 0.0 {
                    continue;
                }
                let p = y * w + x;
                let ker = kernels.kernel(y, x);
                let own = src[p];
                let gker = &mut gk.data[p * k * k..(p + 1) * k * k];
                let mut kept = 1.0;
                for i in 0..k {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    for j in 0..k {
                        if i * k + j == c {
                            continue;
                        }
                        let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        let kv = ker[i * k + j];
                        gker[i * k + j] += go * (src[yy * w + xx] - own);
                        g_prev[yy * w + xx] += go * kv;
                        kept -= kv;
                    }
                }
                g_prev[p] += go * kept;
            }
        }
        std::mem::swap(&mut g, &mut g_prev);
    }
    Ok((ScalarMap::new(h, w, g, MapRole::Generic)?, gk))
}
