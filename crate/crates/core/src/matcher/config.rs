use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::keyvalue::{self, Entry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostMode {
    /// Stack left and right features; the regularizer reduces them to a cost.
    Concat,
    /// Per-channel absolute feature difference; summing the channels gives a
    /// usable cost without any learned stage.
    AbsDiff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    Learned,
    Census,
}

impl FromStr for CostMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(CostMode::Concat),
            "absdiff" => Ok(CostMode::AbsDiff),
            _ => Err(format!("unknown cost mode {s:?} (expected concat|absdiff)")),
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::Concat => "concat",
            CostMode::AbsDiff => "absdiff",
        })
    }
}

impl FromStr for FeatureMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned" => Ok(FeatureMode::Learned),
            "census" => Ok(FeatureMode::Census),
            _ => Err(format!("unknown feature mode {s:?} (expected learned|census)")),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::Learned => "learned",
            FeatureMode::Census => "census",
        })
    }
}

/// Layer count of the cost regularizer when present.
pub const REGULARIZER_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    /// Number of disparity hypotheses `0..D`.
    pub disparities: usize,
    /// Feature stride, 1 or 2.
    pub stride: usize,
    pub cost_mode: CostMode,
    pub feature_mode: FeatureMode,
    /// Feature channels. For census this fixes the window: `C = w² - 1`.
    pub channels: usize,
    /// 0 (no learned regularizer) or 3.
    pub regularizer_depth: usize,
    pub temperature: f64,
    pub refine_iters: usize,
    /// Feed the matchability map to the kernel extractor. When false the
    /// channel is zeroed.
    pub refine_with_matchability: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            disparities: 16,
            stride: 1,
            cost_mode: CostMode::AbsDiff,
            feature_mode: FeatureMode::Census,
            channels: 8,
            regularizer_depth: 0,
            temperature: 1.0,
            refine_iters: crate::refine::DEFAULT_ITERATIONS,
            refine_with_matchability: true,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.disparities < 2 {
            return Err(Error::argument(format!(
                "need at least 2 disparities, got {}",
                self.disparities
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::argument(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.channels == 0 {
            return Err(Error::argument("channels must be positive"));
        }
        if self.feature_mode == FeatureMode::Census {
            self.census_window()?;
        }
        if !matches!(self.regularizer_depth, 0 | REGULARIZER_LAYERS) {
            return Err(Error::argument(format!(
                "regularizer depth must be 0 or {REGULARIZER_LAYERS}, got {}",
                self.regularizer_depth
            )));
        }
        if self.cost_mode == CostMode::Concat && self.regularizer_depth == 0 {
            return Err(Error::argument(
                "concat cost volumes need a regularizer to become a scalar cost",
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::argument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Census window side for the configured channel count.
    pub fn census_window(&self) -> Result<usize> {
        let w = ((self.channels + 1) as f64).sqrt().round() as usize;
        if w * w != self.channels + 1 || w % 2 == 0 || w < 3 {
            return Err(Error::argument(format!(
                "census needs channels = w*w - 1 for odd w >= 3, got {}",
                self.channels
            )));
        }
        Ok(w)
    }

    /// Input channels of the regularizer's first layer.
    pub fn regularizer_inputs(&self) -> usize {
        match self.cost_mode {
            CostMode::Concat => 2 * self.channels,
            CostMode::AbsDiff => self.channels,
        }
    }

    /// Applies one entry; returns `false` when the key is not a matcher key.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "disparities" => self.disparities = e.parse_value()?,
            "stride" => self.stride = e.parse_value()?,
            "cost_mode" => self.cost_mode = e.parse_value()?,
            "feature_mode" => self.feature_mode = e.parse_value()?,
            "channels" => self.channels = e.parse_value()?,
            "temperature" => self.temperature = e.parse_value()?,
            "refine_iters" => self.refine_iters = e.parse_value()?,
            "regularizer_depth" => self.regularizer_depth = e.parse_value()?,
            "refine_matchability" => self.refine_with_matchability = e.parse_value()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        for e in entries {
            if !cfg.apply(e)? {
                return Err(e.error(format!("unknown matcher key {:?}", e.key)));
            }
        }
        if !entries.iter().any(|e| e.key == "regularizer_depth") && cfg.cost_mode == CostMode::Concat
        {
            cfg.regularizer_depth = REGULARIZER_LAYERS;
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

    pub fn to_text(&self) -> String {
        format!(
            "disparities = {}\nstride = {}\ncost_mode = {}\nfeature_mode = {}\nchannels = {}\n\
             temperature = {}\nrefine_iters = {}\nregularizer_depth = {}\nrefine_matchability = {}\n",
            self.disparities,
            self.stride,
            self.cost_mode,
            self.feature_mode,
            self.channels,
            self.temperature,
            self.refine_iters,
            self.regularizer_depth,
            self.refine_with_matchability
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let cfg = MatcherConfig::parse(
            "disparities=32\nstride=2\ncost_mode=concat\nfeature_mode=learned\nchannels=8\n\
             temperature=0.5\nrefine_iters=12\n",
        )
        .unwrap();
        assert_eq!(cfg.disparities, 32);
        assert_eq!(cfg.stride, 2);
        assert_eq!(cfg.cost_mode, CostMode::Concat);
        assert_eq!(cfg.feature_mode, FeatureMode::Learned);
        assert_eq!(cfg.temperature, 0.5);
        assert_eq!(cfg.refine_iters, 12);
        assert_eq!(cfg.regularizer_depth, 3);
        assert_eq!(cfg.regularizer_inputs(), 16);
        assert_eq!(MatcherConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(MatcherConfig::parse("disparities=1\n").is_err());
        assert!(MatcherConfig::parse("stride=3\n").is_err());
        assert!(MatcherConfig::parse("channels=9\n").is_err());
        assert!(MatcherConfig::parse("cost_mode=concat\nregularizer_depth=0\n").is_err());
        assert!(MatcherConfig::parse("temperature=0\n").is_err());
        assert!(matches!(
            MatcherConfig::parse("bogus=1\n"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            MatcherConfig::parse("cost_mode=sum\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn census_window_from_channels() {
        let mut cfg = MatcherConfig::default();
        assert_eq!(cfg.census_window().unwrap(), 3);
        cfg.channels = 24;
        assert_eq!(cfg.census_window().unwrap(), 5);
    }
}
