//! Per-view feature extraction: census descriptors or a shared two-layer
//! convolutional extractor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Activation, Conv, Tensor};
use crate::volume::{MapRole, ScalarMap};

/// `C x (H/s) x (W/s)` features of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub(crate) act: Activation,
    stride: usize,
}

impl FeatureMap {
    pub fn new(act: Activation, stride: usize) -> Result<Self> {
        if act.depth != 1 {
            return Err(Error::argument("feature maps are 2D"));
        }
        if act.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature map has non-finite entries"));
        }
        Ok(Self { act, stride })
    }

    pub fn channels(&self) -> usize {
        self.act.channels
    }

    pub fn height(&self) -> usize {
        self.act.height
    }

    pub fn width(&self) -> usize {
        self.act.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn activation(&self) -> &Activation {
        &self.act
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.act.data[(c * self.act.height + y) * self.act.width + x]
    }
}

/// Zero mean, unit variance. A constant image becomes all zeros.
pub fn normalize_intensity(image: &ScalarMap) -> Result<ScalarMap> {
    image.expect_finite("image")?;
    if image.is_empty() {
        return Err(Error::argument("empty image"));
    }
    let n = image.len() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    Ok(image.map(MapRole::Image, |v| (v - mean) * scale))
}

/// 2x2 box average; dimensions must be even.
pub fn downsample2(image: &ScalarMap) -> Result<ScalarMap> {
    let (h, w) = (image.height(), image.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::argument(format!(
            "image {h}x{w} is not divisible by stride 2"
        )));
    }
    Ok(ScalarMap::from_fn(h / 2, w / 2, image.role(), |y, x| {
        0.25 * (image.get(2 * y, 2 * x)
            + image.get(2 * y, 2 * x + 1)
            + image.get(2 * y + 1, 2 * x)
            + image.get(2 * y + 1, 2 * x + 1))
    }))
}

/// Census descriptor: one binary channel per window offset (row-major,
/// center skipped), set when the neighbour is strictly brighter than the
/// center. Borders replicate the edge pixel.
pub fn census_features(image: &ScalarMap, window: usize, stride: usize) -> Result<FeatureMap> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::argument(format!(
            "census window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    if h < window || w < window {
        return Err(Error::argument(format!(
            "image {h}x{w} smaller than census window {window}"
        )));
    }
    let r = (window / 2) as isize;
    let channels = window * window - 1;
    let mut act = Activation::zeros(channels, 1, h, w);
    let plane = h * w;
    let mut c = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            let out = &mut act.data[c * plane..(c + 1) * plane];
            for y in 0..h {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for x in 0..w {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    if image.get(yy, xx) > image.get(y, x) {
                        out[y * w + x] = 1.0;
                    }
                }
            }
            c += 1;
        }
    }
    FeatureMap::new(act, stride)
}

/// Two 3x3 layers, 1 → C → C, rectified. Shared between both views.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetParams {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Smallest image side the learned extractor accepts (its receptive field).
pub const LEARNED_RECEPTIVE_FIELD: usize = 5;

impl FeatureNetParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            conv1: Conv::new_2d(1, channels, 3),
            conv2: Conv::new_2d(channels, channels, 3),
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels);
        p.conv1.init_uniform(rng, 1.0);
        p.conv2.init_uniform(rng, 1.0);
        p
    }

    pub fn channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FeatureTrace {
    input: Activation,
    hidden: Activation,
    output: Activation,
}

pub fn learned_features(
    image: &ScalarMap,
    params: &FeatureNetParams,
    stride: usize,
) -> Result<FeatureMap> {
    Ok(learned_forward(image, params, stride)?.0)
}

pub fn learned_forward(
    image: &ScalarMap,
    params: &FeatureNetParams,
    stride: usize,
) -> Result<(FeatureMap, FeatureTrace)> {
    let (h, w) = (image.height(), image.width());
    if h < LEARNED_RECEPTIVE_FIELD || w < LEARNED_RECEPTIVE_FIELD {
        return Err(Error::argument(format!(
            "image {h}x{w} smaller than the {LEARNED_RECEPTIVE_FIELD}px receptive field"
        )));
    }
    let input = Activation::new(1, 1, h, w, image.data().to_vec())?;
    let mut hidden = params.conv1.forward(&input)?;
    relu_inplace(&mut hidden);
    let mut output = params.conv2.forward(&hidden)?;
    relu_inplace(&mut output);
    let fm = FeatureMap::new(output.clone(), stride)?;
    Ok((
        fm,
        FeatureTrace {
            input,
            hidden,
            output,
        },
    ))
}

/// Accumulates parameter gradients for one view.
pub fn learned_backward(
    params: &mut FeatureNetParams,
    trace: &FeatureTrace,
    grad: &Activation,
) -> Result<()> {
    let mut g = grad.clone();
    relu_backward(&trace.output, &mut g);
    let mut g_hidden = params
        .conv2
        .backward(&trace.hidden, &g, true)?
        .expect("input gradient requested");
    relu_backward(&trace.hidden, &mut g_hidden);
    params.conv1.backward(&trace.input, &g_hidden, false)?;
    Ok(())
}
