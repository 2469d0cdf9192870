//! Stereo matchability toolkit.
//!
//! Disparity regression from a probability volume, entropy matchability,
//! a log-scale uncertainty mapping with its attenuated joint loss, and
//! affinity-propagation refinement, plus the training and evaluation
//! plumbing around them.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod keyvalue;
pub mod loss;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod refine;
pub mod regression;
pub mod synth;
pub mod train;
pub mod uncertainty;
pub mod volume;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossWeights};
pub use matcher::{match_pair, refine_disparity, CostMode, FeatureMode, MatchOutput, MatcherConfig};
pub use metrics::{compute_metrics, sample_filter, split_metrics, MetricsReport};
pub use params::ParamSet;
pub use refine::KernelMap;
pub use synth::{gen_synthetic_pair, SynthConfig, SyntheticSample};
pub use train::{TrainConfig, Trainer};
pub use volume::{
    CostVolume, DisparityMap, LogScaleMap, MapRole, MaskMap, MatchabilityMap, ProbabilityVolume,
    ScalarMap, Volume, VolumeDims, WeightMap,
};
