//! The matching frontend and the end-to-end pipeline:
//!
//! features → cost volume → (regularizer) → softmax → {soft-argmin,
//! entropy} → log-scale mapping → kernel extraction → propagation.

pub mod config;
pub mod cost;
pub mod features;
pub mod regularizer;

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::params::ParamSet;
use crate::refine::{
    cspn_backward, cspn_forward, cspn_refine, extract_diffusion_kernels, kernels_backward, kernels_forward, normalize_affinities,
    normalize_affinities_backward, CspnTrace, KernelMap, KernelNetTrace,
};
use crate::regression::{entropy_backward, entropy_matchability, soft_argmin, soft_argmin_backward};
use crate::uncertainty::{logscale_backward, logscale_forward, UncertaintyTrace};
use crate::volume::{
    softmax_backward, softmax_over_disparity, upsample_backward, upsample_volume, CostVolume,
    DisparityMap, LogScaleMap, MapRole, MatchabilityMap, ProbabilityVolume, ScalarMap, Volume,
};

pub use config::{CostMode, FeatureMode, MatcherConfig};
pub use cost::{build_cost_volume, build_feature_volume, FeatureVolume, MatchingVolume, SENTINEL_COST};
pub use features::{census_features, learned_features, normalize_intensity, FeatureMap, FeatureNetParams};
pub use regularizer::{regularize, RegularizerParams};

use cost::feature_volume_backward;
use features::{downsample2, learned_backward, learned_forward, FeatureTrace};
use regularizer::{regularize_backward, regularize_forward, RegularizerTrace};

/// Every map the pipeline produces, at the input resolution.
#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub initial: DisparityMap,
    pub matchability: MatchabilityMap,
    pub logscale: LogScaleMap,
    pub refined: DisparityMap,
    pub probability: Option<ProbabilityVolume>,
}

/// Runs the full pipeline on a rectified pair of luminance images in
/// `[0, 1]`. The probability volume is retained.
pub fn match_pair(
    left: &ScalarMap,
    right: &ScalarMap,
    config: &MatcherConfig,
    params: &ParamSet,
) -> Result<MatchOutput> {
    Ok(forward(left, right, config, params)?.0)
}

enum FrontTrace {
    Census,
    Learned {
        left: FeatureTrace,
        right: FeatureTrace,
        fl: FeatureMap,
        fr: FeatureMap,
    },
}

/// Intermediates needed by [`backward`].
pub struct MatchTrace {
    config: MatcherConfig,
    front: FrontTrace,
    volume: FeatureVolume,
    regularizer: Option<RegularizerTrace>,
    probability: ProbabilityVolume,
    uncertainty: UncertaintyTrace,
    kernel_net: KernelNetTrace,
    raw_kernels: KernelMap,
    kernels: KernelMap,
    cspn: CspnTrace,
    refined_unclamped: Vec<f64>,
}

impl MatchTrace {
    pub fn probability(&self) -> &ProbabilityVolume {
        &self.probability
    }

    pub fn kernels(&self) -> &KernelMap {
        &self.kernels
    }
}

fn extract(
    image: &ScalarMap,
    config: &MatcherConfig,
    params: &ParamSet,
) -> Result<(FeatureMap, Option<FeatureTrace>)> {
    let normalized = normalize_intensity(image)?;
    let input = if config.stride == 2 {
        downsample2(&normalized)?
    } else {
        normalized
    };
    match config.feature_mode {
        FeatureMode::Census => Ok((
            census_features(&input, config.census_window()?, config.stride)?,
            None,
        )),
        FeatureMode::Learned => {
            let fp = params
                .features
                .as_ref()
                .ok_or_else(|| Error::argument("learned features need feature parameters"))?;
            let (fm, trace) = learned_forward(&input, fp, config.stride)?;
            Ok((fm, Some(trace)))
        }
    }
}

/// Disparity and matchability scaled to roughly `[0, 1]` for the kernel
/// network. The matchability channel is zero when the config disables it.
fn kernel_inputs(
    initial: &DisparityMap,
    matchability: &MatchabilityMap,
    config: &MatcherConfig,
) -> (ScalarMap, ScalarMap) {
    let d_scale = (config.disparities - 1) as f64;
    let m_scale = (config.disparities as f64).ln();
    let disp_in = initial.map(MapRole::Generic, |v| v / d_scale);
    let match_in = if config.refine_with_matchability {
        matchability.map(MapRole::Generic, |v| v / m_scale)
    } else {
        ScalarMap::filled(initial.height(), initial.width(), 0.0, MapRole::Generic)
    };
    (disp_in, match_in)
}

/// Runs only the refinement stage on an existing initial disparity and
/// matchability map, exactly as [`match_pair`] would.
pub fn refine_disparity(
    initial: &DisparityMap,
    left: &ScalarMap,
    matchability: &MatchabilityMap,
    config: &MatcherConfig,
    params: &ParamSet,
) -> Result<DisparityMap> {
    config.validate()?;
    params.check_compatible(config)?;
    initial.expect_shape(left, "disparity vs image")?;
    initial.expect_shape(matchability, "disparity vs matchability")?;
    let d_scale = (config.disparities - 1) as f64;
    let (disp_in, match_in) = kernel_inputs(initial, matchability, config);
    let raw = extract_diffusion_kernels(&disp_in, left, &match_in, &params.kernels)?;
    let refined = cspn_refine(initial, &normalize_affinities(&raw), config.refine_iters)?;
    Ok(refined.map(MapRole::Disparity, |v| v.clamp(0.0, d_scale)))
}

pub fn forward(
    left: &ScalarMap,
    right: &ScalarMap,
    config: &MatcherConfig,
    params: &ParamSet,
) -> Result<(MatchOutput, MatchTrace)> {
    config.validate()?;
    params.check_compatible(config)?;
    left.expect_shape(right, "left vs right image")?;
    let (h, w) = (left.height(), left.width());
    let s = config.stride;
    if h % s != 0 || w % s != 0 {
        return Err(Error::argument(format!(
            "image {h}x{w} is not divisible by stride {s}"
        )));
    }
    let dcount = config.disparities;

    let (fl, tl) = extract(left, config, params)?;
    let (fr, tr) = extract(right, config, params)?;
    let volume = build_feature_volume(&fl, &fr, dcount, config.cost_mode)?;

    let mut low = match config.cost_mode {
        CostMode::AbsDiff => volume.summed_cost(),
        CostMode::Concat => Volume::zeros(volume.dims()),
    };
    let regularizer = match &params.regularizer {
        Some(rp) => {
            let (correction, trace) = regularize_forward(volume.activation(), rp)?;
            for (c, r) in low.data_mut().iter_mut().zip(correction.data()) {
                *c += r;
            }
            Some(trace)
        }
        None => None,
    };
    for (c, &ok) in low.data_mut().iter_mut().zip(volume.valid()) {
        if !ok {
            *c = SENTINEL_COST;
        }
    }
    let cost = CostVolume::from_volume(upsample_volume(&low, s))?;
    let probability = softmax_over_disparity(&cost, config.temperature)?;
    let initial = soft_argmin(&probability)?;
    let matchability = entropy_matchability(&probability)?;
    let (logscale, uncertainty) = logscale_forward(&matchability, &params.uncertainty)?;

    let d_scale = (dcount - 1) as f64;
    let (disp_in, match_in) = kernel_inputs(&initial, &matchability, config);
    let (raw_kernels, kernel_net) = kernels_forward(&disp_in, left, &match_in, &params.kernels)?;
    let kernels = normalize_affinities(&raw_kernels);
    let (refined_raw, cspn) = cspn_forward(&initial, &kernels, config.refine_iters)?;
    let refined_unclamped = refined_raw.into_data();
    let refined = ScalarMap::new(
        h,
        w,
        refined_unclamped.iter().map(|v| v.clamp(0.0, d_scale)).collect(),
        MapRole::Disparity,
    )?;

    let front = match (tl, tr) {
        (Some(left), Some(right)) => FrontTrace::Learned {
            left,
            right,
            fl,
            fr,
        },
        _ => FrontTrace::Census,
    };
    let output = MatchOutput {
        initial,
        matchability,
        logscale,
        refined,
        probability: Some(probability.clone()),
    };
    let trace = MatchTrace {
        config: config.clone(),
        front,
        volume,
        regularizer,
        probability,
        uncertainty,
        kernel_net,
        raw_kernels,
        kernels,
        cspn,
        refined_unclamped,
    };
    Ok((output, trace))
}

/// Gradients of a scalar objective w.r.t. the pipeline outputs.
pub struct OutputGrads<'a> {
    pub initial: &'a ScalarMap,
    pub logscale: &'a ScalarMap,
    pub refined: &'a ScalarMap,
}

/// Accumulates parameter gradients into `params` (without zeroing first).
pub fn backward(params: &mut ParamSet, trace: &MatchTrace, grads: OutputGrads<'_>) -> Result<()> {
    let cfg = &trace.config;
    let dcount = cfg.disparities;
    let d_scale = (dcount - 1) as f64;
    let m_scale = (dcount as f64).ln();
    let prob = &trace.probability;
    let (h, w) = (prob.dims().height, prob.dims().width);

    // refined output clamp
    let g_ref: Vec<f64> = grads
        .refined
        .data()
        .iter()
        .zip(&trace.refined_unclamped)
        .map(|(&g, &v)| if (0.0..=d_scale).contains(&v) { g } else { 0.0 })
        .collect();
    let g_ref = ScalarMap::new(h, w, g_ref, MapRole::Generic)?;
    let (g_d0, g_norm) = cspn_backward(&trace.kernels, &trace.cspn, &g_ref)?;
    let g_raw = normalize_affinities_backward(&trace.raw_kernels, &g_norm)?;
    let [g_disp_in, _, g_match_in] = kernels_backward(&mut params.kernels, &trace.kernel_net, &g_raw)?;

    let mut g_init = grads.initial.clone();
    for ((g, a), b) in g_init
        .data_mut()
        .iter_mut()
        .zip(g_d0.data())
        .zip(g_disp_in.data())
    {
        *g += a + b / d_scale;
    }
    let mut g_match = logscale_backward(&mut params.uncertainty, &trace.uncertainty, grads.logscale)?;
    if cfg.refine_with_matchability {
        for (g, b) in g_match.data_mut().iter_mut().zip(g_match_in.data()) {
            *g += b / m_scale;
        }
    }

    let mut g_prob = soft_argmin_backward(prob, &g_init)?;
    let g_ent = entropy_backward(prob, &g_match)?;
    for (a, b) in g_prob.data_mut().iter_mut().zip(g_ent.data()) {
        *a += b;
    }
    let g_cost = softmax_backward(prob, &g_prob, cfg.temperature)?;
    let mut g_low = upsample_backward(&g_cost, cfg.stride)?;
    for (g, &ok) in g_low.data_mut().iter_mut().zip(trace.volume.valid()) {
        if !ok {
            *g = 0.0;
        }
    }

    let learned = matches!(trace.front, FrontTrace::Learned { .. });
    let mut g_volume = match (&mut params.regularizer, &trace.regularizer) {
        (Some(rp), Some(rt)) => regularize_backward(rp, rt, &g_low, learned)?,
        _ => None,
    };
    if let FrontTrace::Learned {
        left,
        right,
        fl,
        fr,
    } = &trace.front
    {
        let act = trace.volume.activation();
        let mut gv = g_volume
            .take()
            .unwrap_or_else(|| Activation::zeros(act.channels, act.depth, act.height, act.width));
        if cfg.cost_mode == CostMode::AbsDiff {
            for c in 0..gv.channels {
                for (a, b) in gv.channel_mut(c).iter_mut().zip(g_low.data()) {
                    *a += b;
                }
            }
        }
        let (g_fl, g_fr) = feature_volume_backward(fl, fr, &trace.volume, &gv)?;
        let fp = params
            .features
            .as_mut()
            .ok_or_else(|| Error::argument("learned features need feature parameters"))?;
        learned_backward(fp, left, &g_fl)?;
        learned_backward(fp, right, &g_fr)?;
    }
    Ok(())
}
