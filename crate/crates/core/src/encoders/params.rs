use std::collections::HashMap;

use fsc_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_RANGE: f32 = 0.02;
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_in: usize,
    pub vocab_size: usize,
    pub w_max: usize,
    pub grid: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            d_in: 9,
            vocab_size: 32,
            w_max: 16,
            grid: 4,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.d, self.layers, self.heads, self.d_in, self.w_max, self.grid];
        if positive.contains(&0) {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover PAD, BOS and EOS".into()));
        }
        if self.w_max < 2 {
            return Err(Error::Config("w_max must fit BOS and EOS".into()));
        }
        Ok(())
    }

    /// Every parameter in canonical order with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d;
        let mut out = vec![("logit_scale".to_string(), vec![])];
        out.push(("image.patch_proj.weight".into(), vec![self.d_in, d]));
        out.push(("image.patch_proj.bias".into(), vec![d]));
        out.push(("image.pos".into(), vec![self.patches(), d]));
        self.push_blocks("image", &mut out);
        out.push(("image.ln_post.weight".into(), vec![d]));
        out.push(("image.ln_post.bias".into(), vec![d]));
        out.push(("image.proj".into(), vec![d, d]));
        out.push(("text.token_embedding".into(), vec![self.vocab_size, d]));
        out.push(("text.pos".into(), vec![self.w_max, d]));
        self.push_blocks("text", &mut out);
        out.push(("text.ln_final.weight".into(), vec![d]));
        out.push(("text.ln_final.bias".into(), vec![d]));
        out.push(("text.proj".into(), vec![d, d]));
        out
    }

    fn push_blocks(&self, tower: &str, out: &mut Vec<(String, Vec<usize>)>) {
        let d = self.d;
        for i in 0..self.layers {
            let p = format!("{tower}.blocks.{i}");
            out.push((format!("{p}.ln1.weight"), vec![d]));
            out.push((format!("{p}.ln1.bias"), vec![d]));
            out.push((format!("{p}.attn.qkv.weight"), vec![d, 3 * d]));
            out.push((format!("{p}.attn.qkv.bias"), vec![3 * d]));
            out.push((format!("{p}.attn.out.weight"), vec![d, d]));
            out.push((format!("{p}.attn.out.bias"), vec![d]));
            out.push((format!("{p}.ln2.weight"), vec![d]));
            out.push((format!("{p}.ln2.bias"), vec![d]));
            out.push((format!("{p}.mlp.fc1.weight"), vec![d, 4 * d]));
            out.push((format!("{p}.mlp.fc1.bias"), vec![4 * d]));
            out.push((format!("{p}.mlp.fc2.weight"), vec![4 * d, d]));
            out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
    }
}

/// How a parameter is initialized and whether weight decay applies to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Temperature,
    Weight,
    Bias,
    Position,
    NormGain,
    NormBias,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name == "logit_scale" {
            ParamKind::Temperature
        } else if name.ends_with(".pos") {
            ParamKind::Position
        } else if name.contains(".ln") {
            if name.ends_with(".weight") {
                ParamKind::NormGain
            } else {
                ParamKind::NormBias
            }
        } else if name.ends_with(".bias") {
            ParamKind::Bias
        } else {
            ParamKind::Weight
        }
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
            }
        }
        Ok(Self { entries, index })
    }

    /// Seeded initialization. Projection matrices draw from uniform(±1/√fan_in),
    /// the token embedding and positional embeddings from uniform(-0.02, 0.02),
    /// biases zero, norm gains one, 1/τ = 1/0.07.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match ParamKind::of(&name) {
                    ParamKind::Temperature => vec![(1.0 / INIT_TEMPERATURE).ln() as f32],
                    ParamKind::Weight if !name.ends_with("token_embedding") => {
                        let a = 1.0 / (shape[0] as f32).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    ParamKind::Weight | ParamKind::Position => (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
                    ParamKind::NormGain => vec![1.0; n],
                    ParamKind::Bias | ParamKind::NormBias => vec![0.0; n],
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(|i| &mut self.entries[i].1)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks names and shapes against the encoder layout.
    pub fn check_layout(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.entries.len() {
            return Err(Error::StructureMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(&self.entries) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::StructureMismatch(format!(
                    "expected {name} {shape:?}, found {have} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`, converting to `S`.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        self.bind_with(tape, |tape, _, t| {
            let mut c = t.cast::<S>();
            c.set_requires_grad(trainable);
            tape.leaf(c)
        })
    }

    /// Like [`ParamStore::bind`] but lets the caller supply each variable.
    pub fn bind_with<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        mut make: impl FnMut(&mut Tape<S>, &str, &Tensor<f32>) -> Var,
    ) -> Bound {
        let vars = self.entries.iter().map(|(n, t)| make(tape, n, t)).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::StructureMismatch(format!("missing parameter {name}")))
    }

    /// Variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_follows_kinds() {
        let cfg = EncoderConfig::default();
        let a = ParamStore::init(&cfg, 5).unwrap();
        assert_eq!(a, ParamStore::init(&cfg, 5).unwrap());
        assert_ne!(a, ParamStore::init(&cfg, 6).unwrap());
        a.check_layout(&cfg).unwrap();
        let pos = a.get("image.pos").unwrap().data();
        assert!(pos.iter().all(|&x| x.abs() <= INIT_RANGE) && pos.iter().any(|&x| x != 0.0));
        assert!(a.get("image.patch_proj.bias").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(a.get("text.ln_final.weight").unwrap().data().iter().all(|&x| x == 1.0));
        let w = a.get("text.blocks.1.mlp.fc1.weight").unwrap();
        let bound = 1.0 / (cfg.d as f32).sqrt();
        assert!(w.data().iter().all(|&x| x.abs() <= bound));
        assert!(w.data().iter().any(|&x| x.abs() > INIT_RANGE));
        let emb = a.get("text.token_embedding").unwrap().data();
        assert!(emb.iter().all(|&x| x.abs() <= INIT_RANGE));
        let ls = a.get("logit_scale").unwrap().data()[0];
        assert!((f64::from(ls).exp() - 1.0 / 0.07).abs() < 1e-4);
    }

    #[test]
    fn kinds_classify_names() {
        assert_eq!(ParamKind::of("logit_scale"), ParamKind::Temperature);
        assert_eq!(ParamKind::of("text.pos"), ParamKind::Position);
        assert_eq!(ParamKind::of("image.blocks.0.ln1.weight"), ParamKind::NormGain);
        assert_eq!(ParamKind::of("image.ln_post.bias"), ParamKind::NormBias);
        assert_eq!(ParamKind::of("image.blocks.0.attn.qkv.bias"), ParamKind::Bias);
        assert_eq!(ParamKind::of("text.token_embedding"), ParamKind::Weight);
        assert_eq!(ParamKind::of("image.proj"), ParamKind::Weight);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.grid = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layout_check_detects_mismatch() {
        let cfg = EncoderConfig::default();
        let store = ParamStore::init(&cfg, 1).unwrap();
        let other = EncoderConfig { d: 16, ..cfg.clone() };
        assert!(matches!(store.check_layout(&other), Err(Error::StructureMismatch(_))));
    }
}
