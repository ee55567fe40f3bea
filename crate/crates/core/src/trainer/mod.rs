//! AdamW training of the dual encoders, checkpoints, and weight interpolation.

mod checkpoint;
mod optim;

use std::fmt::Write as _;

use fsc_tensor::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{wise_ft_interpolate, Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use optim::{learning_rate, AdamConfig, AdamW};

use crate::digest::json_digest;
use crate::encoders::{
    encode_images, encode_texts, inverse_temperature, EncoderConfig, ImageInput, ParamKind, ParamStore, TextInput,
    Tokenizer,
};
use crate::error::{Error, Result};
use crate::objective::{total_loss, EncodedBatch, LossConfig};
use crate::synth::{Sample, SynthConfig};
use crate::textgen::{generate_set, mix64, NegativeSeed};

const BATCH_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain contrastive training, no hard negatives.
    #[default]
    PretrainContrastive,
    /// Every item carries its caption and online hard negatives.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    /// 2,000 contrastive steps at 3e-4, batch 64.
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::PretrainContrastive,
            batch_size: 64,
            steps: 2000,
            lr: 3e-4,
            warmup_steps: 50,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::contrastive(),
        }
    }

    /// 500 steps at 1e-4 with the full objective.
    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            steps: 500,
            lr: 1e-4,
            loss: LossConfig::default(),
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        if self.phase == Phase::PretrainContrastive && self.loss.uses_negatives() {
            return Err(Error::Config("the contrastive phase takes no hard-negative weights".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_clip: f64,
    pub l_neg_g: f64,
    pub l_neg_l: f64,
    pub l_total: f64,
    pub lr: f64,
    pub inv_tau: f64,
}

pub const METRICS_HEADER: &str = "step,l_clip,l_neg_g,l_neg_l,l_total,lr,inv_tau";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.l_clip, r.l_neg_g, r.l_neg_l, r.l_total, r.lr, r.inv_tau
        );
    }
    out
}

/// Training samples with images rendered and captions tokenized up front.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub captions: Vec<String>,
    pub images: Vec<ImageInput>,
    pub texts: Vec<TextInput>,
}

impl Dataset {
    pub fn prepare(samples: &[Sample], synth: &SynthConfig, tokenizer: &Tokenizer) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        let images = samples
            .par_iter()
            .map(|s| s.render(synth.grid, synth.sigma))
            .collect::<Result<Vec<_>>>()?;
        let texts = samples.iter().map(|s| tokenizer.encode(&s.caption)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            captions: samples.iter().map(|s| s.caption.clone()).collect(),
            images,
            texts,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Epoch-wise shuffled batches; the last partial batch of an epoch is dropped.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    size: usize,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(BATCH_STREAM))),
            order: (0..n).collect(),
            cursor: n,
            size: size.min(n),
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.cursor + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += self.size;
        &self.order[self.cursor - self.size..self.cursor]
    }
}

/// Digest of the settings that determine a training run.
pub fn train_digest(encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<u64> {
    Ok(json_digest(&(encoder, cfg))?)
}

/// Trains from `init` (or a fresh seeded initialization) and returns the final
/// checkpoint and per-step metrics. Deterministic given its inputs.
pub fn train(
    data: &Dataset,
    tokenizer: &Tokenizer,
    encoder: &EncoderConfig,
    init: Option<&Checkpoint>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    encoder.validate()?;
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::BatchTooSmall(data.len()));
    }
    let mut params = match init {
        Some(c) => {
            if c.encoder() != encoder {
                return Err(Error::StructureMismatch("initial checkpoint uses a different encoder".into()));
            }
            c.params().clone()
        }
        None => {
            let mut fresh = ParamStore::init(encoder, cfg.seed)?;
            if let Some(ls) = fresh.get_mut("logit_scale") {
                ls.data_mut()[0] = (1.0 / cfg.loss.temperature_init).ln() as f32;
            }
            fresh
        }
    };
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    let decay: Vec<bool> = params.iter().map(|(n, _)| ParamKind::of(n).decays()).collect();
    let mut opt = AdamW::<f32>::new(&sizes, cfg.adam);
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, cfg.seed);
    let with_negatives = cfg.phase == Phase::Finetune;
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lr = learning_rate(step, cfg.steps, cfg.warmup_steps, cfg.lr);
        let batch = batcher.next().to_vec();
        let mut negatives: Vec<TextInput> = Vec::new();
        let mut hn_valid = Vec::with_capacity(batch.len());
        if with_negatives {
            for &i in &batch {
                let seed = NegativeSeed {
                    global_seed: cfg.seed,
                    item_id: i as u64,
                    step: step as u64,
                };
                let set = generate_set(&data.captions[i], tokenizer.lexicon(), seed)?;
                for neg in &set.negatives {
                    negatives.push(tokenizer.encode(neg)?);
                }
                hn_valid.push(set.valid.to_vec());
            }
        } else {
            hn_valid.resize(batch.len(), Vec::new());
        }
        let k = if with_negatives { negatives.len() / batch.len() } else { 0 };
        let mut texts: Vec<&TextInput> = Vec::with_capacity(batch.len() * (1 + k));
        for (j, &i) in batch.iter().enumerate() {
            texts.push(&data.texts[i]);
            texts.extend(negatives[j * k..(j + 1) * k].iter());
        }
        let images: Vec<&ImageInput> = batch.iter().map(|&i| &data.images[i]).collect();

        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, true);
        let encoded = EncodedBatch {
            images: encode_images(&mut tape, encoder, &bound, &images)?,
            texts: encode_texts(&mut tape, encoder, &bound, &texts)?,
            hn_valid,
        };
        let scale = inverse_temperature(&mut tape, &bound)?;
        let inv_tau = f64::from(tape.item(scale));
        let loss = total_loss(&mut tape, &encoded, &cfg.loss, scale)?;
        let parts = loss.breakdown(&tape, &cfg.loss);
        if !parts.l_total.is_finite() {
            return Err(Error::Divergence { step });
        }
        tape.backward(loss.total)?;
        let grads: Vec<Vec<f32>> = bound
            .vars()
            .iter()
            .zip(&sizes)
            .map(|(&v, &n)| tape.grad(v).map_or_else(|| vec![0.0; n], <[f32]>::to_vec))
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        {
            let mut slots: Vec<&mut [f32]> = params.iter_mut().map(|(_, t)| t.data_mut()).collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut slots, &grad_refs, &decay, lr)?;
        }
        metrics.push(MetricsRow {
            step,
            l_clip: parts.l_clip,
            l_neg_g: parts.l_neg_g,
            l_neg_l: parts.l_neg_l,
            l_total: parts.l_total,
            lr,
            inv_tau,
        });
    }
    let checkpoint = Checkpoint::new(
        encoder,
        params,
        cfg.steps as u64,
        cfg.seed,
        train_digest(encoder, cfg)?,
    )?;
    Ok(TrainOutcome { checkpoint, metrics })
}
