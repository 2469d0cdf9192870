//! Toy training on synthetic pairs.
//!
//! One Adam step per sample, samples visited in a fixed order each epoch.
//! Everything is seeded, so a run is bitwise reproducible.

use std::fmt::Write as _;
use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::keyvalue::{self, Entry};
use crate::loss::{
    joint_loss, joint_loss_grad, l1_loss, l1_loss_grad, total_loss, valid_mask, LossBreakdown,
    LossWeights, DEFAULT_MAX_DISPARITY,
};
use crate::matcher::{self, MatchOutput, MatcherConfig, OutputGrads};
use crate::params::ParamSet;
use crate::synth::{gen_synthetic_pair, SynthConfig, SyntheticSample};
use crate::volume::{DisparityMap, MaskMap, ScalarMap};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub matcher: MatcherConfig,
    pub synth: SynthConfig,
    /// Training pairs, regenerated identically every epoch.
    pub samples: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Epochs after which the learning rate is halved.
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    /// Ground truth above this is masked out.
    pub max_gt_disparity: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let matcher = MatcherConfig {
            regularizer_depth: 3,
            ..Default::default()
        };
        Self {
            synth: SynthConfig {
                max_disp: matcher.disparities - 1,
                ..Default::default()
            },
            matcher,
            samples: 8,
            epochs: 10,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lr_milestones: Vec::new(),
            seed: 0,
            max_gt_disparity: DEFAULT_MAX_DISPARITY,
        }
    }
}

fn parse_list(e: &Entry) -> Result<Vec<usize>> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| e.error(format!("bad milestone {s:?}")))
        })
        .collect()
}

impl TrainConfig {
    /// Matcher keys plus `height`, `width`, `max_disp`,
    /// `textureless_fraction`, `samples`, `epochs`, `lr`, `beta1`, `beta2`,
    /// `eps`, `lambda_init`, `lambda_joint`, `lambda_refine`,
    /// `lr_milestones` (comma separated epochs), `seed`, `max_gt_disparity`.
    /// The learned regularizer is on unless `regularizer_depth = 0`.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut max_disp_set = false;
        for e in entries {
            if cfg.matcher.apply(e)? {
                continue;
            }
            match e.key.as_str() {
                "height" => cfg.synth.height = e.parse_value()?,
                "width" => cfg.synth.width = e.parse_value()?,
                "max_disp" => {
                    cfg.synth.max_disp = e.parse_value()?;
                    max_disp_set = true;
                }
                "textureless_fraction" => cfg.synth.textureless_fraction = e.parse_value()?,
                "samples" => cfg.samples = e.parse_value()?,
                "epochs" => cfg.epochs = e.parse_value()?,
                "lr" => cfg.adam.lr = e.parse_value()?,
                "beta1" => cfg.adam.beta1 = e.parse_value()?,
                "beta2" => cfg.adam.beta2 = e.parse_value()?,
                "eps" => cfg.adam.eps = e.parse_value()?,
                "lambda_init" => cfg.weights.initial = e.parse_value()?,
                "lambda_joint" => cfg.weights.joint = e.parse_value()?,
                "lambda_refine" => cfg.weights.refined = e.parse_value()?,
                "lr_milestones" => cfg.lr_milestones = parse_list(e)?,
                "seed" => cfg.seed = e.parse_value()?,
                "max_gt_disparity" => cfg.max_gt_disparity = e.parse_value()?,
                _ => return Err(e.error(format!("unknown training key {:?}", e.key))),
            }
        }
        if !max_disp_set {
            cfg.synth.max_disp = cfg.matcher.disparities - 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&keyvalue::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&keyvalue::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.matcher.validate()?;
        self.synth.validate()?;
        self.adam.validate()?;
        if self.synth.max_disp >= self.matcher.disparities {
            return Err(Error::argument(format!(
                "max_disp {} needs at least {} disparities",
                self.synth.max_disp,
                self.synth.max_disp + 1
            )));
        }
        if self.samples == 0 {
            return Err(Error::argument("need at least one training sample"));
        }
        let w = self.weights;
        if [w.initial, w.joint, w.refined].iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::argument(format!("loss weights must be >= 0: {w:?}")));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.adam.lr * 0.5f64.powi(halvings as i32)
    }
}

fn mix(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)
}

/// Seed of training sample `i`.
pub fn training_seed(seed: u64, i: usize) -> u64 {
    mix(seed, i as u64)
}

/// Seed of held-out sample `i`; disjoint from the training seeds in practice.
pub fn held_out_seed(seed: u64, i: usize) -> u64 {
    mix(seed.wrapping_add(1_000_000), i as u64)
}

pub fn training_set(cfg: &TrainConfig) -> Result<Vec<SyntheticSample>> {
    (0..cfg.samples)
        .map(|i| gen_synthetic_pair(training_seed(cfg.seed, i), &cfg.synth))
        .collect()
}

pub fn held_out_set(cfg: &TrainConfig, n: usize) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|i| gen_synthetic_pair(held_out_seed(cfg.seed, i), &cfg.synth))
        .collect()
}

/// Runs the pipeline, evaluates the weighted loss, and accumulates its
/// parameter gradients into `params` (gradients are not zeroed first).
pub fn objective(
    params: &mut ParamSet,
    config: &MatcherConfig,
    left: &ScalarMap,
    right: &ScalarMap,
    gt: &DisparityMap,
    mask: &MaskMap,
    weights: LossWeights,
) -> Result<(LossBreakdown, MatchOutput)> {
    let (out, trace) = matcher::forward(left, right, config, params)?;
    let l1_init = l1_loss(&out.initial, gt, mask)?;
    let joint = joint_loss(&out.initial, &out.logscale, gt, mask)?;
    let l1_ref = l1_loss(&out.refined, gt, mask)?;
    let valid = mask.data().iter().filter(|&&m| m > 0.5).count();
    let breakdown = total_loss(l1_init, joint, l1_ref, weights, valid)?;

    let mut g_init = l1_loss_grad(&out.initial, gt, mask)?;
    let (g_joint_d, mut g_log) = joint_loss_grad(&out.initial, &out.logscale, gt, mask)?;
    for (g, j) in g_init.data_mut().iter_mut().zip(g_joint_d.data()) {
        *g = weights.initial * *g + weights.joint * j;
    }
    g_log.data_mut().iter_mut().for_each(|g| *g *= weights.joint);
    let mut g_ref = l1_loss_grad(&out.refined, gt, mask)?;
    g_ref.data_mut().iter_mut().for_each(|g| *g *= weights.refined);
    matcher::backward(
        params,
        &trace,
        OutputGrads {
            initial: &g_init,
            logscale: &g_log,
            refined: &g_ref,
        },
    )?;
    Ok((breakdown, out))
}

/// Epoch means over all steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// EPE of the refined disparity.
    pub epe: f64,
}

pub const HISTORY_HEADER: &str = "epoch,l1_init,joint,l1_ref,total,epe";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.loss.l1_init, r.loss.joint, r.loss.l1_refined, r.loss.total, r.epe
        );
    }
    s
}

pub struct Trainer {
    cfg: TrainConfig,
    params: ParamSet,
    adam: AdamState,
    data: Vec<(SyntheticSample, MaskMap)>,
    epoch: usize,
    step: usize,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let params = ParamSet::init(&cfg.matcher, cfg.seed);
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: TrainConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        params.check_compatible(&cfg.matcher)?;
        let adam = AdamState::for_params(cfg.adam, &params)?;
        let data = training_set(&cfg)?
            .into_iter()
            .map(|s| {
                let m = valid_mask(&s.disparity, cfg.max_gt_disparity);
                (s, m)
            })
            .collect();
        Ok(Self {
            cfg,
            params,
            adam,
            data,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn diverged(&self, message: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step: self.step,
            message,
        }
    }

    /// One pass over the training set. On a non-finite loss or gradient
    /// the parameters are restored to their state at the start of the
    /// epoch and [`Error::Diverged`] is returned.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let snapshot = self.params.clone();
        let adam_snapshot = self.adam.clone();
        self.adam.config.lr = self.cfg.lr_at(self.epoch);
        let mut sum = LossBreakdown::default();
        let mut epe = 0.0;
        for i in 0..self.data.len() {
            self.params.zero_grad();
            let (sample, mask) = &self.data[i];
            let step = objective(
                &mut self.params,
                &self.cfg.matcher,
                &sample.left,
                &sample.right,
                &sample.disparity,
                mask,
                self.cfg.weights,
            )
            .and_then(|(loss, out)| {
                if !loss.total.is_finite() {
                    return Err(Error::validation(format!("loss is {}", loss.total)));
                }
                let e = l1_loss(&out.refined, &sample.disparity, mask)?;
                self.adam.step(&mut self.params)?;
                Ok((loss, e))
            });
            let (loss, e) = match step {
                Ok(v) => v,
                Err(err @ (Error::Validation(_) | Error::Degenerate(_))) => {
                    self.params = snapshot;
                    self.adam = adam_snapshot;
                    return Err(self.diverged(err.to_string()));
                }
                Err(err) => return Err(err),
            };
            self.step += 1;
            sum.l1_init += loss.l1_init;
            sum.joint += loss.joint;
            sum.l1_refined += loss.l1_refined;
            sum.total += loss.total;
            sum.valid_pixel_count += loss.valid_pixel_count;
            epe += e;
        }
        let n = self.data.len() as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            loss: LossBreakdown {
                l1_init: sum.l1_init / n,
                joint: sum.joint / n,
                l1_refined: sum.l1_refined / n,
                total: sum.total / n,
                valid_pixel_count: sum.valid_pixel_count,
            },
            epe: epe / n,
        };
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one (the
    /// place to write a checkpoint).
    pub fn run(
        &mut self,
        mut on_epoch: impl FnMut(&EpochRecord, &ParamSet) -> Result<()>,
    ) -> Result<&[EpochRecord]> {
        while self.epoch < self.cfg.epochs {
            let r = self.run_epoch()?;
            on_epoch(&r, &self.params)?;
        }
        Ok(&self.history)
    }
}

/// Trains from scratch and returns the parameters and epoch history.
pub fn train(cfg: &TrainConfig) -> Result<(ParamSet, Vec<EpochRecord>)> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run(|_, _| Ok(()))?;
    let history = t.history.clone();
    Ok((t.into_params(), history))
}
