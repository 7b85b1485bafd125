use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::DEFAULT_SEED;

/// How the supervised-term weight α₀ is computed each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alpha0Mode {
    /// `min(|W_pce| / |V_Σ|, clamp)`.
    Reciprocal,
    /// `|V_Σ| / |W_pce|`, the unclamped ratio of the adversarial-only method.
    Original,
}

/// Divisor in front of the attention-map aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateDivisor {
    /// 1/d with d the decoder depth.
    Depth,
    /// 1/(d+1), the plain mean over levels.
    Levels,
}

/// Rule for downscaling dense masks to attention-map resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PyramidRule {
    /// Top-left sample of each block, then one-hot.
    Nearest,
    /// One-hot, then block average.
    AvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Triangular oscillation between `lr_min` and `lr_max`.
    Cyclic,
}

/// Full experiment description. Every field has a built-in default, so a
/// config file only needs the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Decoder depth d (number of 2× downsamplings).
    pub depth: usize,
    pub classes: usize,
    /// Channel count of the first encoder stage; doubles per stage.
    pub base_width: usize,
    /// Channel width of the discriminator adapters.
    pub disc_width: usize,

    pub alpha1: f64,
    pub alpha2: f64,
    /// Upper clamp 𝒞 of the reciprocal α₀.
    pub clamp_c: f64,
    pub log_eps: f64,
    pub alpha0_mode: Alpha0Mode,
    /// Enables the inter-layer divergence term. When off, κ is forced to 0.
    pub ssds: bool,
    /// Lets the divergence gradient reach the attention aggregate.
    pub ild_grad_through_aggregate: bool,
    pub aggregate_divisor: AggregateDivisor,
    /// Per-level aggregate weights w_i; empty means uniform 1.
    pub level_weights: Vec<f64>,
    pub invert_class_weights: bool,
    pub pyramid_rule: PyramidRule,

    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_epochs: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    /// Fraction of weak-set images that keep their scribbles.
    pub availability: f64,
    pub rotation_degrees: f64,
    pub unpaired_fraction: f64,
    pub test_fraction: f64,
    pub folds: usize,
    pub fold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            classes: 2,
            base_width: 16,
            disc_width: 8,
            alpha1: 0.1,
            alpha2: 0.1,
            clamp_c: 0.1,
            log_eps: 1e-8,
            alpha0_mode: Alpha0Mode::Reciprocal,
            ssds: true,
            ild_grad_through_aggregate: true,
            aggregate_divisor: AggregateDivisor::Depth,
            level_weights: Vec::new(),
            invert_class_weights: false,
            pyramid_rule: PyramidRule::Nearest,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            schedule: LrSchedule::Cyclic,
            lr_min: 1e-5,
            lr_max: 1e-4,
            cycle_epochs: 100,
            epochs: 100,
            batch_size: 4,
            seed: DEFAULT_SEED,
            availability: 1.0,
            rotation_degrees: 10.0,
            unpaired_fraction: 0.5,
            test_fraction: 0.3,
            folds: 5,
            fold: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.base_width == 0 || self.disc_width == 0 {
            return bad("network widths must be positive".into());
        }
        if !(self.availability > 0.0 && self.availability <= 1.0) {
            return bad(format!("availability {} outside (0, 1]", self.availability));
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("clamp_c", self.clamp_c),
            ("log_eps", self.log_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.unpaired_fraction > 0.0 && self.unpaired_fraction < 1.0) {
            return bad(format!(
                "unpaired_fraction {} outside (0, 1)",
                self.unpaired_fraction
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        if self.folds < 2 || self.fold >= self.folds {
            return bad(format!("fold {} of {} folds", self.fold, self.folds));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return bad(format!("rotation_degrees {} outside [0, 180]", self.rotation_degrees));
        }
        if !self.level_weights.is_empty() && self.level_weights.len() != self.depth + 1 {
            return bad(format!(
                "level_weights has {} entries, expected {}",
                self.level_weights.len(),
                self.depth + 1
            ));
        }
        if self.schedule == LrSchedule::Cyclic
            && (self.cycle_epochs == 0 || self.lr_min <= 0.0 || self.lr_max < self.lr_min)
        {
            return bad("cyclic schedule needs 0 < lr_min <= lr_max and cycle_epochs > 0".into());
        }
        Ok(())
    }

    /// Aggregate weights with the uniform default filled in.
    pub fn level_weights(&self) -> Vec<f64> {
        if self.level_weights.is_empty() {
            vec![1.0; self.depth + 1]
        } else {
            self.level_weights.clone()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The small-image CPU configuration used by the acceptance runs.
    pub fn desk_scale() -> Self {
        Self {
            base_width: 8,
            ..Self::default()
        }
    }
}
