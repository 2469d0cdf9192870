//! Shared fixtures for the benchmarks.

use dsm_core::{gen_synthetic_pair, MatcherConfig, SynthConfig, SyntheticSample};

/// A 64x128 random-dot pair with disparities up to 15.
pub fn desk_pair(seed: u64) -> SyntheticSample {
    gen_synthetic_pair(seed, &SynthConfig::default()).expect("default synthetic config is valid")
}

/// 16 disparities, census features, absolute-difference cost.
pub fn census_config() -> MatcherConfig {
    MatcherConfig {
        temperature: 0.1,
        ..Default::default()
    }
}

/// The training configuration: census front end plus the learned cost
/// regularizer.
pub fn regularized_config() -> MatcherConfig {
    MatcherConfig {
        regularizer_depth: 3,
        ..Default::default()
    }
}
