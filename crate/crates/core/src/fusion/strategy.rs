//! Strategy tags and per-strategy hyperparameters.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyTag {
    VisionOnly,
    Concat,
    Gated,
    AuxGoals,
    Moe,
    MoeRaw,
    GatedCfg,
    MoeGated,
}

impl StrategyTag {
    pub const ALL: [StrategyTag; 8] = [
        StrategyTag::VisionOnly,
        StrategyTag::Concat,
        StrategyTag::Gated,
        StrategyTag::AuxGoals,
        StrategyTag::Moe,
        StrategyTag::MoeRaw,
        StrategyTag::GatedCfg,
        StrategyTag::MoeGated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyTag::VisionOnly => "vision_only",
            StrategyTag::Concat => "concat",
            StrategyTag::Gated => "gated",
            StrategyTag::AuxGoals => "aux_goals",
            StrategyTag::Moe => "moe",
            StrategyTag::MoeRaw => "moe_raw",
            StrategyTag::GatedCfg => "gated_cfg",
            StrategyTag::MoeGated => "moe_gated",
        }
    }

    /// Human-readable row label for reports.
    pub fn label(self) -> &'static str {
        match self {
            StrategyTag::VisionOnly => "Vision-only",
            StrategyTag::Concat => "Feature concatenation",
            StrategyTag::Gated => "Torque gating",
            StrategyTag::AuxGoals => "Auxiliary goals",
            StrategyTag::Moe => "MoE",
            StrategyTag::MoeRaw => "MoE (raw torque)",
            StrategyTag::GatedCfg => "Gated CFG fusion",
            StrategyTag::MoeGated => "Torque-gated MoE",
        }
    }

    pub fn valid_list() -> String {
        StrategyTag::ALL.map(|t| t.as_str()).join(", ")
    }

    /// Uses the learnable free-space embedding in place of torque features
    /// when no contact is detected.
    pub fn uses_gate(self) -> bool {
        matches!(self, StrategyTag::Gated | StrategyTag::GatedCfg | StrategyTag::MoeGated)
    }

    pub fn is_moe(self) -> bool {
        matches!(self, StrategyTag::Moe | StrategyTag::MoeRaw | StrategyTag::MoeGated)
    }

    pub fn two_denoisers(self) -> bool {
        self.is_moe() || self == StrategyTag::GatedCfg
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Invalid(format!("unknown strategy '{s}'; valid tags: {}", StrategyTag::valid_list()))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub tag: StrategyTag,
    /// Contact threshold on the latest torque column, N·m.
    pub gate_threshold: f64,
    /// Weight of the future-torque term (auxiliary goals only).
    pub alpha: f64,
    /// Router and torque expert see gated features (ablation row).
    pub moe_gated: bool,
    /// Upper bound on the guidance weight during sampling.
    pub max_guidance: f64,
}

impl StrategyConfig {
    pub fn new(tag: StrategyTag) -> Self {
        StrategyConfig {
            tag,
            gate_threshold: 1.0,
            alpha: 0.1,
            moe_gated: tag == StrategyTag::MoeGated,
            max_guidance: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_threshold > 0.0) {
            return Err(Error::Invalid(format!("gate_threshold must be > 0, got {}", self.gate_threshold)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.max_guidance > 0.0) {
            return Err(Error::Invalid("max_guidance must be > 0".into()));
        }
        Ok(())
    }
}
