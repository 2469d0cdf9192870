//! Three 3x3x3 convolutions over the `(channel, d, y, x)` matching volume,
//! `in → 8 → 8 → 1`, rectified between layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Activation, Conv, Tensor};
use crate::volume::{CostVolume, Volume, VolumeDims};

pub const REGULARIZER_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl RegularizerParams {
    pub fn zeros(in_channels: usize) -> Self {
        Self {
            conv1: Conv::new_3d(in_channels, REGULARIZER_WIDTH, 3),
            conv2: Conv::new_3d(REGULARIZER_WIDTH, REGULARIZER_WIDTH, 3),
            conv3: Conv::new_3d(REGULARIZER_WIDTH, 1, 3),
        }
    }

    /// He-initialized hidden layers; the output layer starts small so the
    /// regularizer begins as a mild correction.
    pub fn init<R: Rng>(in_channels: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_channels);
        p.conv1.init_uniform(rng, 1.0);
        p.conv2.init_uniform(rng, 1.0);
        p.conv3.init_uniform(rng, 0.1);
        p
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("conv3.weight", &self.conv3.weight),
            ("conv3.bias", &self.conv3.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
            ("conv3.weight", &mut self.conv3.weight),
            ("conv3.bias", &mut self.conv3.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RegularizerTrace {
    input: Activation,
    h1: Activation,
    h2: Activation,
}

pub fn regularize(raw: &Activation, params: &RegularizerParams) -> Result<CostVolume> {
    let (v, _) = regularize_forward(raw, params)?;
    CostVolume::from_volume(v)
}

/// Forward pass returning the raw (unvalidated) scalar volume.
pub fn regularize_forward(
    raw: &Activation,
    params: &RegularizerParams,
) -> Result<(Volume, RegularizerTrace)> {
    if raw.channels != params.in_channels() {
        return Err(Error::argument(format!(
            "regularizer expects {} channels, volume has {}",
            params.in_channels(),
            raw.channels
        )));
    }
    let mut h1 = params.conv1.forward(raw)?;
    relu_inplace(&mut h1);
    let mut h2 = params.conv2.forward(&h1)?;
    relu_inplace(&mut h2);
    let out = params.conv3.forward(&h2)?;
    let dims = VolumeDims::new(raw.depth, raw.height, raw.width);
    Ok((
        Volume::new(dims, out.data)?,
        RegularizerTrace {
            input: raw.clone(),
            h1,
            h2,
        },
    ))
}

/// Accumulates parameter gradients; returns the input gradient when asked.
pub fn regularize_backward(
    params: &mut RegularizerParams,
    trace: &RegularizerTrace,
    grad: &Volume,
    want_input_grad: bool,
) -> Result<Option<Activation>> {
    let dims = grad.dims();
    let g3 = Activation::new(1, dims.disparities, dims.height, dims.width, grad.data().to_vec())?;
    let mut g2 = params
        .conv3
        .backward(&trace.h2, &g3, true)?
        .expect("input gradient requested");
    relu_backward(&trace.h2, &mut g2);
    let mut g1 = params
        .conv2
        .backward(&trace.h1, &g2, true)?
        .expect("input gradient requested");
    relu_backward(&trace.h1, &mut g1);
    params.conv1.backward(&trace.input, &g1, want_input_grad)
}
