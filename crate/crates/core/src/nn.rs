//! Convolution layers and activations with hand-written backward passes.
//!
//! Activations are `(channels, depth, height, width)` row-major. A 2D layer
//! is a 3D layer with a kernel depth of one. Padding is zero, "same" size,
//! stride one.

use rand::Rng;

use crate::error::{Error, Result};

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(dims: &[usize], value: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if value.len() != n {
            return Err(Error::argument(format!(
                "tensor {dims:?} needs {n} values, got {}",
                value.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            grad: vec![0.0; n],
            value,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Dense `(C, D, H, W)` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn zeros(channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            depth,
            height,
            width,
            data: vec![0.0; channels * depth * height * width],
        }
    }

    pub fn new(
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != channels * depth * height * width {
            return Err(Error::argument(format!(
                "activation ({channels},{depth},{height},{width}) needs {} values, got {}",
                channels * depth * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            depth,
            height,
            width,
            data,
        })
    }

    /// Stacks equally sized 2D planes as channels of a depth-1 activation.
    pub fn from_planes(height: usize, width: usize, planes: &[&[f64]]) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(Error::argument("plane size mismatch"));
            }
            data.extend_from_slice(p);
        }
        Self::new(planes.len(), 1, height, width, data)
    }

    #[inline]
    pub fn channel_len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.channel_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Activation) -> bool {
        self.channels == other.channels
            && self.depth == other.depth
            && self.height == other.height
            && self.width == other.width
    }
}

/// Zero-padded, stride-one convolution with a `[kd, kh, kw]` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        assert!(
            kernel.iter().all(|k| k % 2 == 1),
            "kernel extents must be odd"
        );
        let [kd, kh, kw] = kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Tensor::zeros(&[out_channels, in_channels, kd, kh, kw]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn new_2d(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, [1, k, k])
    }

    pub fn new_3d(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, [k, k, k])
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Uniform He initialization scaled by `gain`; biases set to zero.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, gain: f64) {
        let fan_in = (self.in_channels * self.taps()) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        for w in self.weight.value.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    fn check_input(&self, x: &Activation) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::argument(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    #[inline]
    fn weight_index(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
        let [kd, kh, kw] = self.kernel;
        (((co * self.in_channels + ci) * kd + kz) * kh + ky) * kw + kx
    }

    pub fn forward(&self, x: &Activation) -> Result<Activation> {
        self.check_input(x)?;
        let (dd, hh, ww) = (x.depth, x.height, x.width);
        let plane = hh * ww;
        let vol = dd * plane;
        let [kd, kh, kw] = self.kernel;
        let mut out = Activation::zeros(self.out_channels, dd, hh, ww);
        for co in 0..self.out_channels {
            let bias = self.bias.value[co];
            for z in 0..dd {
                for y in 0..hh {
                    let o0 = co * vol + z * plane + y * ww;
                    let orow = &mut out.data[o0..o0 + ww];
                    orow.iter_mut().for_each(|v| *v = bias);
                    for ci in 0..self.in_channels {
                        for kz in 0..kd {
                            let Some(iz) = offset(z, kz, kd, dd) else {
                                continue;
                            };
                            for ky in 0..kh {
                                let Some(iy) = offset(y, ky, kh, hh) else {
                                    continue;
                                };
                                let i0 = ci * vol + iz * plane + iy * ww;
                                let irow = &x.data[i0..i0 + ww];
                                for kx in 0..kw {
                                    let w = self.weight.value[self.weight_index(co, ci, kz, ky, kx)];
                                    let (ox, ix, n) = row_span(kx, kw, ww);
                                    axpy(w, &irow[ix..ix + n], &mut orow[ox..ox + n]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and optionally returns the gradient
    /// w.r.t. the input.
    pub fn backward(
        &mut self,
        x: &Activation,
        grad_out: &Activation,
        want_input_grad: bool,
    ) -> Result<Option<Activation>> {
        self.check_input(x)?;
        if grad_out.channels != self.out_channels
            || grad_out.depth != x.depth
            || grad_out.height != x.height
            || grad_out.width != x.width
        {
            return Err(Error::argument("convolution backward: gradient shape mismatch"));
        }
        let (dd, hh, ww) = (x.depth, x.height, x.width);
        let plane = hh * ww;
        let vol = dd * plane;
        let [kd, kh, kw] = self.kernel;
        let mut gin = want_input_grad.then(|| Activation::zeros(self.in_channels, dd, hh, ww));
        for co in 0..self.out_channels {
            let gchan = grad_out.channel(co);
            self.bias.grad[co] += gchan.iter().sum::<f64>();
            for z in 0..dd {
                for y in 0..hh {
                    let g0 = z * plane + y * ww;
                    let grow = &gchan[g0..g0 + ww];
                    for ci in 0..self.in_channels {
                        for kz in 0..kd {
                            let Some(iz) = offset(z, kz, kd, dd) else {
                                continue;
                            };
                            for ky in 0..kh {
                                let Some(iy) = offset(y, ky, kh, hh) else {
                                    continue;
                                };
                                let i0 = ci * vol + iz * plane + iy * ww;
                                let irow = &x.data[i0..i0 + ww];
                                for kx in 0..kw {
                                    let wi = self.weight_index(co, ci, kz, ky, kx);
                                    let (ox, ix, n) = row_span(kx, kw, ww);
                                    self.weight.grad[wi] +=
                                        dot(&grow[ox..ox + n], &irow[ix..ix + n]);
                                    if let Some(gin) = gin.as_mut() {
                                        let w = self.weight.value[wi];
                                        let girow = &mut gin.data[i0..i0 + ww];
                                        axpy(w, &grow[ox..ox + n], &mut girow[ix..ix + n]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(gin)
    }
}

/// Input coordinate for output `o` and kernel tap `k` of extent `ext`,
/// or `None` when it falls in the zero padding.
#[inline]
fn offset(o: usize, k: usize, ext: usize, n: usize) -> Option<usize> {
    let i = o as isize + k as isize - (ext / 2) as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// `(output start, input start, length)` of the valid span of one row for
/// kernel column `kx`.
#[inline]
fn row_span(kx: usize, kw: usize, w: usize) -> (usize, usize, usize) {
    let dx = kx as isize - (kw / 2) as isize;
    if dx >= 0 {
        let dx = dx as usize;
        (0, dx, w.saturating_sub(dx))
    } else {
        let dx = (-dx) as usize;
        (dx, 0, w.saturating_sub(dx))
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu_inplace(a: &mut Activation) {
    a.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the rectified output was not positive.
pub fn relu_backward(output: &Activation, grad: &mut Activation) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 average pooling over `(H, W)`; odd trailing rows and columns are
/// averaged over the pixels that exist.
pub fn avg_pool2(a: &Activation) -> Activation {
    let (h2, w2) = (a.height.div_ceil(2), a.width.div_ceil(2));
    let mut out = Activation::zeros(a.channels, a.depth, h2, w2);
    for c in 0..a.channels {
        for z in 0..a.depth {
            for y in 0..h2 {
                for x in 0..w2 {
                    let mut s = 0.0;
                    let mut n = 0;
                    for sy in 2 * y..(2 * y + 2).min(a.height) {
                        for sx in 2 * x..(2 * x + 2).min(a.width) {
                            s += a.data[((c * a.depth + z) * a.height + sy) * a.width + sx];
                            n += 1;
                        }
                    }
                    out.data[((c * a.depth + z) * h2 + y) * w2 + x] = s / n as f64;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Activation, height: usize, width: usize) -> Activation {
    let mut out = Activation::zeros(grad.channels, grad.depth, height, width);
    for c in 0..grad.channels {
        for z in 0..grad.depth {
            for y in 0..height {
                for x in 0..width {
                    let (py, px) = (y / 2, x / 2);
                    let ny = (2 * py + 2).min(height) - 2 * py;
                    let nx = (2 * px + 2).min(width) - 2 * px;
                    let g = grad.data[((c * grad.depth + z) * grad.height + py) * grad.width + px];
                    out.data[((c * grad.depth + z) * height + y) * width + x] =
                        g / (ny * nx) as f64;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling to `(height, width)` from a map of size
/// `(ceil(height/2), ceil(width/2))`.
pub fn upsample_nearest2(a: &Activation, height: usize, width: usize) -> Activation {
    let mut out = Activation::zeros(a.channels, a.depth, height, width);
    for c in 0..a.channels {
        for z in 0..a.depth {
            for y in 0..height {
                for x in 0..width {
                    out.data[((c * a.depth + z) * height + y) * width + x] =
                        a.data[((c * a.depth + z) * a.height + y / 2) * a.width + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(grad: &Activation, height: usize, width: usize) -> Activation {
    let (h2, w2) = (height.div_ceil(2), width.div_ceil(2));
    let mut out = Activation::zeros(grad.channels, grad.depth, h2, w2);
    for c in 0..grad.channels {
        for z in 0..grad.depth {
            for y in 0..height {
                for x in 0..width {
                    out.data[((c * grad.depth + z) * h2 + y / 2) * w2 + x / 2] +=
                        grad.data[((c * grad.depth + z) * height + y) * width + x];
                }
            }
        }
    }
    out
}
