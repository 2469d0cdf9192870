//! Learnable mapping from matchability to the log-scale map `B' = ln B`,
//! plus the attenuation weights and matchable mask derived from it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Activation, Conv, Tensor};
use crate::volume::{LogScaleMap, MapRole, MaskMap, MatchabilityMap, ScalarMap, WeightMap};

/// Bounds applied to the predicted log-scale.
pub const LOGSCALE_MIN: f64 = -3.0;
pub const LOGSCALE_MAX: f64 = 6.0;

pub const HIDDEN_CHANNELS: usize = 8;

/// Two 3x3 layers, 1 → 8 → 1 channels, rectifier in between.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyNetParams {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Default for UncertaintyNetParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl UncertaintyNetParams {
    pub fn zeros() -> Self {
        Self {
            conv1: Conv::new_2d(1, HIDDEN_CHANNELS, 3),
            conv2: Conv::new_2d(HIDDEN_CHANNELS, 1, 3),
        }
    }

    /// Random first layer with a small positive bias so hidden units start
    /// active; zero output layer, so the initial map is `B' ≡ 0`.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        p.conv1.init_uniform(rng, 1.0);
        p.conv1.bias.value.iter_mut().for_each(|b| *b = 0.1);
        p
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

    fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if t.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "uncertainty parameter {name} is not finite"
                )));
            }
        }
        Ok(())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct UncertaintyTrace {
    input: Activation,
    hidden: Activation,
    pre_clamp: Vec<f64>,
}

pub fn matchability_to_logscale(
    m: &MatchabilityMap,
    params: &UncertaintyNetParams,
) -> Result<LogScaleMap> {
    Ok(logscale_forward(m, params)?.0)
}

pub fn logscale_forward(
    m: &MatchabilityMap,
    params: &UncertaintyNetParams,
) -> Result<(LogScaleMap, UncertaintyTrace)> {
    m.expect_finite("matchability")?;
    params.check_finite()?;
    let input = Activation::new(1, 1, m.height(), m.width(), m.data().to_vec())?;
    let mut hidden = params.conv1.forward(&input)?;
    relu_inplace(&mut hidden);
    let out = params.conv2.forward(&hidden)?;
    let pre_clamp = out.data;
    let clamped = pre_clamp
        .iter()
        .map(|v| v.clamp(LOGSCALE_MIN, LOGSCALE_MAX))
        .collect();
    let map = ScalarMap::new(m.height(), m.width(), clamped, MapRole::LogScale)?;
    Ok((
        map,
        UncertaintyTrace {
            input,
            hidden,
            pre_clamp,
        },
    ))
}

/// Accumulates parameter gradients and returns `∂/∂M`. The clamp passes
/// gradient only strictly inside its bounds.
pub fn logscale_backward(
    params: &mut UncertaintyNetParams,
    trace: &UncertaintyTrace,
    upstream: &ScalarMap,
) -> Result<ScalarMap> {
    let (h, w) = (trace.input.height, trace.input.width);
    if upstream.height() != h || upstream.width() != w {
        return Err(Error::argument("log-scale backward: upstream shape mismatch"));
    }
    let g: Vec<f64> = upstream
        .data()
        .iter()
        .zip(&trace.pre_clamp)
        .map(|(&g, &v)| {
            if v > LOGSCALE_MIN && v < LOGSCALE_MAX {
                g
            } else {
                0.0
            }
        })
        .collect();
    let g_out = Activation::new(1, 1, h, w, g)?;
    let mut g_hidden = params
        .conv2
        .backward(&trace.hidden, &g_out, true)?
        .expect("input gradient requested");
    relu_backward(&trace.hidden, &mut g_hidden);
    let g_in = params
        .conv1
        .backward(&trace.input, &g_hidden, true)?
        .expect("input gradient requested");
    ScalarMap::new(h, w, g_in.data, MapRole::Generic)
}

/// `w = exp(-B') = 1/B`.
pub fn attenuation_weights(bp: &LogScaleMap) -> Result<WeightMap> {
    bp.expect_finite("log-scale")?;
    Ok(bp.map(MapRole::Weight, |v| (-v).exp()))
}

/// 1 where the attenuation weight exceeds one (`B' < 0`), else 0.
pub fn matchable_mask(bp: &LogScaleMap) -> Result<MaskMap> {
    bp.expect_finite("log-scale")?;
    Ok(bp.map(MapRole::Mask, |v| if v < 0.0 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_network_outputs_bias() {
        let mut p = UncertaintyNetParams::zeros();
        p.conv2.bias.value[0] = 0.7;
        let m = ScalarMap::from_fn(4, 5, MapRole::Matchability, |y, x| (y * x) as f64 * 0.1);
        let bp = matchability_to_logscale(&m, &p).unwrap();
        assert!(bp.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn output_is_clamped() {
        let mut p = UncertaintyNetParams::zeros();
        p.conv2.bias.value[0] = 10.0;
        let m = ScalarMap::filled(3, 3, 1.0, MapRole::Matchability);
        assert!(matchability_to_logscale(&m, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 6.0));
        p.conv2.bias.value[0] = -10.0;
        assert!(matchability_to_logscale(&m, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == -3.0));
    }

    #[test]
    fn non_finite_params_rejected() {
        let mut p = UncertaintyNetParams::zeros();
        p.conv1.weight.value[3] = f64::NAN;
        let m = ScalarMap::filled(3, 3, 1.0, MapRole::Matchability);
        assert!(matches!(
            matchability_to_logscale(&m, &p),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn attenuation_examples() {
        let bp = ScalarMap::new(
            1,
            3,
            vec![0.0, 2f64.ln(), -(4f64.ln())],
            MapRole::LogScale,
        )
        .unwrap();
        let w = attenuation_weights(&bp).unwrap();
        assert_eq!(w.data()[0], 1.0);
        assert!((w.data()[1] - 0.5).abs() < 1e-15);
        assert!((w.data()[2] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn matchable_mask_examples() {
        let bp = ScalarMap::new(1, 3, vec![-0.1, 0.0, 2.0], MapRole::LogScale).unwrap();
        assert_eq!(matchable_mask(&bp).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn initialized_net_is_neutral_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = UncertaintyNetParams::init(&mut rng);
        let m = ScalarMap::from_fn(6, 6, MapRole::Matchability, |y, x| ((y + x) % 3) as f64);
        let bp = matchability_to_logscale(&m, &p).unwrap();
        assert!(bp.data().iter().all(|&v| v == 0.0));
        assert!(attenuation_weights(&bp)
            .unwrap()
            .data()
            .iter()
            .all(|&w| w > 0.0));
    }
}
