use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{GanForm, LandmarkReduction, LossWeights};
use crate::registry::TargetId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Landmark autoencoding and cycle terms only.
    Converter,
    /// All five terms plus the discriminator update.
    Joint,
    /// Supervised detector training on image/landmark pairs.
    Detector,
}

/// Step decay: the rate is multiplied by `1 − fraction` every `every` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub fraction: f64,
    pub every: usize,
}

/// Optional converter-only warm-up run before a joint phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pretrain {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr_initial: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    pub max_iterations: usize,
    pub weights: LossWeights,
    /// Identities to train; empty means every identity with training data.
    pub identities: Vec<TargetId>,
    pub seed: u64,
    /// Feed the generator raw source landmarks and skip the converter terms.
    pub converter_bypass: bool,
    #[serde(default)]
    pub pretrain: Option<Pretrain>,
    pub reduction: LandmarkReduction,
    pub gan_form: GanForm,
    pub clip_norm: Option<f64>,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_joint()
    }
}

impl TrainConfig {
    /// Converter phase: batch 4, lr 1e-5, 45,000 iterations.
    pub fn full_converter() -> Self {
        Self {
            phase: Phase::Converter,
            batch_size: 4,
            lr_initial: 1e-5,
            lr_decay: None,
            max_iterations: 45_000,
            weights: LossWeights::default(),
            identities: Vec::new(),
            seed: 0,
            converter_bypass: false,
            pretrain: None,
            reduction: LandmarkReduction::Norm,
            gan_form: GanForm::NonSaturating,
            clip_norm: Some(10.0),
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            log_every: 100,
        }
    }

    /// Joint phase: batch 1, lr 6e-5 decayed by 10% every 2,500 steps,
    /// 400,000 iterations.
    pub fn full_joint() -> Self {
        Self {
            phase: Phase::Joint,
            batch_size: 1,
            lr_initial: 6e-5,
            lr_decay: Some(LrDecay {
                fraction: 0.1,
                every: 2_500,
            }),
            max_iterations: 400_000,
            ..Self::full_converter()
        }
    }

    /// Detector pre-training on image/landmark pairs.
    pub fn full_detector() -> Self {
        Self {
            phase: Phase::Detector,
            batch_size: 8,
            lr_initial: 2.5e-4,
            lr_decay: Some(LrDecay {
                fraction: 0.1,
                every: 2_500,
            }),
            max_iterations: 20_000,
            ..Self::full_converter()
        }
    }

    /// Desk-scale detector schedule for the toy set.
    pub fn toy_detector() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_decay: None,
            max_iterations: 1_500,
            ..Self::full_detector()
        }
    }

    /// Desk-scale converter schedule for the toy set.
    pub fn toy_converter() -> Self {
        Self {
            batch_size: 16,
            lr_initial: 1e-3,
            max_iterations: 8_000,
            log_every: 500,
            ..Self::full_converter()
        }
    }

    /// Desk-scale joint schedule for the toy set: the full decay shape
    /// with a larger starting rate and a 20k-step budget.
    pub fn toy_joint() -> Self {
        Self {
            lr_initial: 1e-3,
            max_iterations: 20_000,
            log_every: 250,
            ..Self::full_joint()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Converter => Self::full_converter(),
            Phase::Joint => Self::full_joint(),
            Phase::Detector => Self::full_detector(),
        }
    }

    /// `lr₀ · (1 − fraction)^⌊step / every⌋`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr_initial * (1.0 - d.fraction).powi((step / d.every) as i32),
            None => self.lr_initial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if let Some(d) = self.lr_decay {
            if !(d.fraction > 0.0 && d.fraction <= 1.0) || d.every == 0 {
                return bad("lr_decay needs fraction in (0, 1] and every > 0");
            }
        }
        if let Some(p) = self.pretrain {
            if p.iterations == 0 || p.batch_size == 0 || !(p.lr > 0.0) {
                return bad("pretrain needs positive iterations, batch_size and lr");
            }
        }
        if !(0.0..1.0).contains(&self.rms_alpha) || !(self.rms_eps > 0.0) {
            return bad("rms_alpha must be in [0, 1) and rms_eps positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_schedule_decays_by_ten_percent() {
        let c = TrainConfig::full_joint();
        assert_eq!(c.lr_at(0), 6e-5);
        assert_eq!(c.lr_at(2_499), 6e-5);
        assert_eq!(c.lr_at(2_500), 6e-5 * 0.9);
        assert_eq!(c.lr_at(7_600), 6e-5 * 0.9f64.powi(3));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::full_joint();
        c.lr_decay = Some(LrDecay {
            fraction: 0.0,
            every: 10,
        });
        assert!(c.validate().is_err());
        let mut c = TrainConfig::full_converter();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        TrainConfig::full_detector().validate().unwrap();
    }
}
