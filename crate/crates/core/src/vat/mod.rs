//! Adversarial inner loops: PGD, FreeLB and the token-aware variant.

mod perturb;
mod step;

use serde::{Deserialize, Serialize};

use crate::data::{CLS_ID, PAD_ID, SEP_ID, UNK_ID};
use crate::error::{Error, Result};

pub use perturb::{
    batch_instance_step, batch_token_step, example_norms, frobenius, init_delta, instance_step,
    pgd_ascent, project_frobenius, project_frobenius_in_place, scaling_index, token_step,
    AscentTrace, ScalingSource, COLD_START_FLOOR, GRAD_NORM_FLOOR,
};
pub use step::{
    adversarial_gradient, tavat_batch_step, AccumulatedGradient, AdversarialGradient, InnerStep,
    PathCounters, StepReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    /// No perturbation: plain fine-tuning.
    Clean,
    /// `K` ascent steps, then one parameter gradient at the final perturbation.
    Pgd,
    /// `K` ascent steps accumulating `1/K` of each parameter gradient.
    FreeLb,
    /// FreeLB accumulation with token-level perturbations.
    TaVat,
}

/// Which token ids may be written back to the perturbation vocabulary.
/// The padding row is never written regardless of policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabPolicy {
    pub include_special: bool,
    pub include_normal: bool,
    pub special_ids: Vec<usize>,
}

impl Default for VocabPolicy {
    fn default() -> Self {
        Self {
            include_special: true,
            include_normal: true,
            special_ids: vec![PAD_ID, CLS_ID, SEP_ID, UNK_ID],
        }
    }
}

impl VocabPolicy {
    pub fn permits(&self, id: usize) -> bool {
        if id == PAD_ID {
            return false;
        }
        if self.special_ids.contains(&id) {
            self.include_special
        } else {
            self.include_normal
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub mode: AdvMode,
    pub epsilon: f64,
    /// Bound for eta when it should differ from `epsilon`.
    pub eta_epsilon: Option<f64>,
    pub sigma: f64,
    pub alpha: f64,
    pub steps: usize,
    pub use_vocab: bool,
    pub use_token_norm: bool,
    pub use_instance_delta: bool,
    pub scaling_source: ScalingSource,
    pub vocab_policy: VocabPolicy,
}

impl Default for AdvConfig {
    /// Defaults sized for a 64-wide embedding.
    fn default() -> Self {
        Self::for_dim(64)
    }
}

impl AdvConfig {
    /// `K = 3`, `epsilon = 1`, `sigma = 0.01 * sqrt(dim)`, `alpha = 0.3 * epsilon`.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            mode: AdvMode::TaVat,
            epsilon: 1.0,
            eta_epsilon: None,
            sigma: 1e-2 * (dim as f64).sqrt(),
            alpha: 0.3,
            steps: 3,
            use_vocab: true,
            use_token_norm: true,
            use_instance_delta: true,
            scaling_source: ScalingSource::PreStep,
            vocab_policy: VocabPolicy::default(),
        }
    }

    pub fn eta_bound(&self) -> f64 {
        self.eta_epsilon.unwrap_or(self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("adversarial config: {m}")));
        if !(self.epsilon > 0.0) || self.eta_epsilon.is_some_and(|e| !(e > 0.0)) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if matches!(self.mode, AdvMode::FreeLb | AdvMode::Pgd)
            && (self.use_vocab || self.use_token_norm)
        {
            return bad(format!(
                "{:?} does not use the perturbation vocabulary or token normalization",
                self.mode
            ));
        }
        Ok(())
    }

    /// True when the run keeps and updates a perturbation vocabulary.
    pub fn needs_vocab(&self) -> bool {
        self.mode == AdvMode::TaVat && self.use_vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_dimension() {
        let c = AdvConfig::for_dim(16);
        assert_eq!(c.steps, 3);
        assert!((c.sigma - 0.04).abs() < 1e-15);
        assert!((c.alpha - 0.3 * c.epsilon).abs() < 1e-15);
        c.validate().unwrap();
    }

    #[test]
    fn freelb_rejects_token_features() {
        let c = AdvConfig {
            mode: AdvMode::FreeLb,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = AdvConfig {
            mode: AdvMode::FreeLb,
            use_vocab: false,
            use_token_norm: false,
            ..Default::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn invalid_bounds_rejected() {
        for c in [
            AdvConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            AdvConfig {
                sigma: -1.0,
                ..Default::default()
            },
            AdvConfig {
                alpha: 0.0,
                ..Default::default()
            },
            AdvConfig {
                steps: 0,
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn policy_never_permits_padding() {
        let p = VocabPolicy::default();
        assert!(!p.permits(PAD_ID));
        assert!(p.permits(CLS_ID) && p.permits(10));
        let normal_only = VocabPolicy {
            include_special: false,
            ..Default::default()
        };
        assert!(!normal_only.permits(SEP_ID) && normal_only.permits(10));
    }
}
