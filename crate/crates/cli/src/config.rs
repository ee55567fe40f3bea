use std::path::{Path, PathBuf};

use fsc_lab::digest::json_digest;
use fsc_lab::encoders::EncoderConfig;
use fsc_lab::objective::{LossConfig, NormMode};
use fsc_lab::synth::{SynthConfig, D_IN};
use fsc_lab::trainer::{AdamConfig, Phase, TrainConfig};
use fsc_lab::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every setting of a run in one flat JSON object.
///
/// Unset `steps`, `lr`, `lambda_g` and `lambda_l` take the defaults of the
/// chosen phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub w_max: usize,

    pub grid: usize,
    pub sigma: f64,
    pub train_size: usize,
    pub suite_size: usize,

    pub phase: Phase,
    pub batch_size: usize,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub lambda_g: Option<f64>,
    pub lambda_l: Option<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub norm_mode: NormMode,
    pub temperature_init: f64,

    pub data: Option<PathBuf>,
    pub suite: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let synth = SynthConfig::default();
        let train = TrainConfig::pretrain();
        let loss = LossConfig::default();
        Self {
            seed: 0,
            d: enc.d,
            layers: enc.layers,
            heads: enc.heads,
            w_max: enc.w_max,
            grid: synth.grid,
            sigma: synth.sigma,
            train_size: synth.train_size,
            suite_size: synth.suite_size,
            phase: Phase::PretrainContrastive,
            batch_size: train.batch_size,
            steps: None,
            lr: None,
            warmup_steps: train.warmup_steps,
            weight_decay: train.adam.weight_decay,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            lambda_g: None,
            lambda_l: None,
            gamma: loss.gamma,
            beta: loss.beta,
            norm_mode: loss.norm_mode,
            temperature_init: loss.temperature_init,
            data: None,
            suite: None,
            init: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config file; unknown keys are an error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            d_in: D_IN,
            vocab_size,
            w_max: self.w_max,
            grid: self.grid,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            grid: self.grid,
            sigma: self.sigma,
            train_size: self.train_size,
            suite_size: self.suite_size,
        }
    }

    pub fn loss(&self) -> LossConfig {
        let (g, l) = match self.phase {
            Phase::PretrainContrastive => (0.0, 0.0),
            Phase::Finetune => {
                let d = LossConfig::default();
                (d.lambda_g, d.lambda_l)
            }
        };
        LossConfig {
            lambda_g: self.lambda_g.unwrap_or(g),
            lambda_l: self.lambda_l.unwrap_or(l),
            gamma: self.gamma,
            beta: self.beta,
            norm_mode: self.norm_mode,
            temperature_init: self.temperature_init,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let base = match self.phase {
            Phase::PretrainContrastive => TrainConfig::pretrain(),
            Phase::Finetune => TrainConfig::finetune(),
        };
        TrainConfig {
            phase: self.phase,
            batch_size: self.batch_size,
            steps: self.steps.unwrap_or(base.steps),
            lr: self.lr.unwrap_or(base.lr),
            warmup_steps: self.warmup_steps,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            loss: self.loss(),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.encoder(vocab_size).validate()?;
        self.train().validate()?;
        if self.grid == 0 || !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("grid must be positive and sigma non-negative".into()));
        }
        if self.train_size == 0 || self.suite_size == 0 {
            return Err(Error::Config("train_size and suite_size must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON of every setting except file paths.
    pub fn digest(&self) -> Result<u64> {
        let settings = Self {
            data: None,
            suite: None,
            init: None,
            out: None,
            ..self.clone()
        };
        Ok(json_digest(&settings)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "lamda_g": 0.5}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 1, "phase": "finetune"}"#).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.loss().lambda_g, 0.5);
        assert_eq!(c.train().steps, 500);
    }

    #[test]
    fn phase_defaults_follow_the_phase() {
        let pre = RunConfig::default();
        assert_eq!(pre.loss().lambda_g, 0.0);
        assert_eq!(pre.train().lr, 3e-4);
        pre.validate(32).unwrap();
        let bad = RunConfig {
            lambda_l: Some(0.2),
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(32), Err(Error::Config(_))));
    }

    #[test]
    fn digest_ignores_paths_and_key_order() {
        let a = RunConfig::from_json(r#"{"seed": 3, "d": 16, "out": "x"}"#).unwrap();
        let b = RunConfig::from_json(r#"{"d": 16, "seed": 3}"#).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = RunConfig { seed: 4, ..b };
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }
}
