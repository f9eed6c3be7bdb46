use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, GateKind};
use crate::data::SplitRatios;
use crate::error::{Error, Result};

/// Architecture variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Regional encoder replaced by a grid CNN over static cell features; no population input.
    StaticRegion,
    NoPoi,
    NoSat,
    /// Dynamic convolution replaced by a 5×5 grid convolution.
    CnnSpatial,
    /// Bipartite attention without the proximity mask.
    NoMask,
    /// Road branch only.
    NoRegion,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::StaticRegion,
        Variant::NoPoi,
        Variant::NoSat,
        Variant::CnnSpatial,
        Variant::NoMask,
        Variant::NoRegion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::StaticRegion => "static-region",
            Variant::NoPoi => "no-poi",
            Variant::NoSat => "no-sat",
            Variant::CnnSpatial => "cnn-spatial",
            Variant::NoMask => "no-mask",
            Variant::NoRegion => "no-region",
        }
    }

    pub fn has_region(self) -> bool {
        self != Variant::NoRegion
    }

    /// Whether the model reads the population series.
    pub fn uses_population(self) -> bool {
        !matches!(self, Variant::NoRegion | Variant::StaticRegion)
    }

    pub fn uses_poi(self) -> bool {
        self != Variant::NoPoi
    }

    pub fn uses_satellite(self) -> bool {
        self != Variant::NoSat
    }

    pub fn uses_mask(self) -> bool {
        self != Variant::NoMask
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Time span used for the population correlations behind the cell graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrSpan {
    #[default]
    Train,
    Full,
}

impl FromStr for CorrSpan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(CorrSpan::Train),
            "full" => Ok(CorrSpan::Full),
            other => Err(Error::config(format!("unknown correlation span `{other}`"))),
        }
    }
}

/// Model and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// History length.
    pub p: usize,
    /// Forecast horizon.
    pub q: usize,
    pub d: usize,
    /// Attention heads.
    pub k: usize,
    /// Per-head width; derived as `d / k` when omitted.
    pub d_h: Option<usize>,
    pub l_x: usize,
    pub l_z: usize,
    pub lambda_r: f64,
    pub learning_rate: f64,
    /// Halve the learning rate every this many epochs (constant when `None`).
    pub lr_half_life: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub gate_kind: GateKind,
    pub corr_span: CorrSpan,
    /// Initial Gaussian mask width in meters.
    pub sigma0_m: f64,
    pub variant: Variant,
    /// Train on a fixed seeded subset of this many windows (all when `None`).
    pub max_train_windows: Option<usize>,
    /// Chronological train/validation/test fractions.
    pub split: SplitRatios,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 12,
            q: 3,
            d: 64,
            k: 8,
            d_h: None,
            l_x: 3,
            l_z: 2,
            lambda_r: 0.6,
            learning_rate: 0.001,
            lr_half_life: None,
            seed: 0,
            epochs: 100,
            patience: 10,
            batch_size: 8,
            gate_kind: GateKind::Relu,
            corr_span: CorrSpan::Train,
            sigma0_m: 500.0,
            variant: Variant::Full,
            max_train_windows: None,
            split: SplitRatios::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for fast experiments.
    pub fn desk() -> Self {
        ModelConfig {
            d: 16,
            k: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let att = AttentionConfig::new(self.d, self.k)?;
        if let Some(dh) = self.d_h {
            if dh * self.k != self.d {
                return Err(Error::config(format!(
                    "k·d_h must equal d: {}·{dh} != {}",
                    self.k, self.d
                )));
            }
        }
        debug_assert_eq!(att.d(), self.d);
        if self.p == 0 || self.q == 0 {
            return Err(Error::config("p and q must be at least 1"));
        }
        if self.l_x == 0 || self.l_z == 0 {
            return Err(Error::config("l_x and l_z must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.lr_half_life.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::config("lr_half_life must be positive"));
        }
        if !(self.sigma0_m > 0.0 && self.sigma0_m.is_finite()) {
            return Err(Error::config("sigma0_m must be positive"));
        }
        if self.max_train_windows == Some(0) {
            return Err(Error::config("max_train_windows must be at least 1"));
        }
        self.split.validate()?;
        if !self.lambda_r.is_finite() {
            return Err(Error::config("lambda_r must be finite"));
        }
        Ok(())
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        self.validate()?;
        AttentionConfig::new(self.d, self.k)
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_half_life {
            Some(h) => self.learning_rate * 0.5f64.powf(epoch.saturating_sub(1) as f64 / h),
            None => self.learning_rate,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.k
    }
}
