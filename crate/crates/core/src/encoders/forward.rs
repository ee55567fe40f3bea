use fsc_tensor::{Scalar, Tape, Var};

use super::params::{Bound, EncoderConfig};
use super::tokenizer::TextInput;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;
pub const MIN_SCALE: f64 = 1.0;
pub const MAX_SCALE: f64 = 100.0;

/// Patch features of one image, `patches × d_in` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub patches: usize,
    pub d_in: usize,
    pub features: Vec<f32>,
}

impl ImageInput {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.patches != cfg.patches() || self.d_in != cfg.d_in || self.features.len() != self.patches * self.d_in {
            return Err(Error::InvalidInput(format!(
                "image is {}x{} with {} values, encoder expects {}x{}",
                self.patches,
                self.d_in,
                self.features.len(),
                cfg.patches(),
                cfg.d_in
            )));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("image has non-finite features".into()));
        }
        Ok(())
    }
}

/// Encoded images: unit patch rows `[N, P, d]` and unit globals `[N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageEmbeddings {
    pub patches: Var,
    pub global: Var,
}

/// Encoded texts trimmed to the longest caption in the batch.
#[derive(Clone, Debug)]
pub struct TextEmbeddings {
    /// Unit token rows `[N, L, d]`.
    pub tokens: Var,
    /// Unit EOS rows `[N, d]`.
    pub global: Var,
    /// `N × L`, true for real tokens.
    pub mask: Vec<bool>,
    pub len: usize,
}

/// `clamp(exp(logit_scale), 1, 100)`, the inverse temperature.
pub fn inverse_temperature<S: Scalar>(tape: &mut Tape<S>, params: &Bound) -> Result<Var> {
    let ls = params.var("logit_scale")?;
    let e = tape.exp(ls)?;
    Ok(tape.clamp(e, S::lit(MIN_SCALE), S::lit(MAX_SCALE))?)
}

pub fn encode_images<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    params: &Bound,
    images: &[&ImageInput],
) -> Result<ImageEmbeddings> {
    if images.is_empty() {
        return Err(Error::InvalidInput("empty image batch".into()));
    }
    let (n, p) = (images.len(), cfg.patches());
    let mut data = Vec::with_capacity(n * p * cfg.d_in);
    for img in images {
        img.validate(cfg)?;
        data.extend(img.features.iter().map(|&x| S::lit(f64::from(x))));
    }
    let x = tape.constant(vec![n, p, cfg.d_in], data)?;
    let x = linear(tape, x, params.var("image.patch_proj.weight")?, Some(params.var("image.patch_proj.bias")?))?;
    let mut h = tape.add(x, params.var("image.pos")?)?;
    for i in 0..cfg.layers {
        h = block(tape, cfg, params, &format!("image.blocks.{i}"), h, None)?;
    }
    let h = layer_norm(tape, params, "image.ln_post", h)?;
    let raw = tape.matmul(h, params.var("image.proj")?)?;
    let patches = tape.l2_normalize(raw, 2)?;
    let pooled = tape.mean(raw, 1, false)?;
    let global = tape.l2_normalize(pooled, 1)?;
    Ok(ImageEmbeddings { patches, global })
}

pub fn encode_texts<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    params: &Bound,
    texts: &[&TextInput],
) -> Result<TextEmbeddings> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("empty text batch".into()));
    }
    let mut eos = Vec::with_capacity(texts.len());
    for t in texts {
        if t.token_ids.len() > cfg.w_max {
            return Err(Error::CaptionTooLong {
                needed: t.token_ids.len(),
                max: cfg.w_max,
            });
        }
        eos.push(t.validate(cfg.vocab_size)?);
    }
    let n = texts.len();
    let len = eos.iter().max().copied().unwrap_or(0) + 1;
    let mut ids = Vec::with_capacity(n * len);
    let mut mask = Vec::with_capacity(n * len);
    for t in texts {
        ids.extend_from_slice(&t.token_ids[..len]);
        mask.extend_from_slice(&t.pad_mask[..len]);
    }
    let d = cfg.d;
    let emb = tape.index_select(params.var("text.token_embedding")?, &ids)?;
    let emb = tape.reshape(emb, vec![n, len, d])?;
    let pos = tape.slice(params.var("text.pos")?, 0, 0, len)?;
    let mut h = tape.add(emb, pos)?;
    let fill: Vec<S> = mask.iter().map(|&m| if m { S::zero() } else { S::lit(MASK_FILL) }).collect();
    let key_mask = tape.constant(vec![n, 1, 1, len], fill)?;
    for i in 0..cfg.layers {
        h = block(tape, cfg, params, &format!("text.blocks.{i}"), h, Some(key_mask))?;
    }
    let h = layer_norm(tape, params, "text.ln_final", h)?;
    let raw = tape.matmul(h, params.var("text.proj")?)?;
    let tokens = tape.l2_normalize(raw, 2)?;
    let flat = tape.reshape(raw, vec![n * len, d])?;
    let rows: Vec<usize> = eos.iter().enumerate().map(|(i, &e)| i * len + e).collect();
    let picked = tape.index_select(flat, &rows)?;
    let global = tape.l2_normalize(picked, 1)?;
    Ok(TextEmbeddings {
        tokens,
        global,
        mask,
        len,
    })
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

fn layer_norm<S: Scalar>(tape: &mut Tape<S>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x, S::lit(LN_EPS))?;
    let y = tape.mul(y, params.var(&format!("{prefix}.weight"))?)?;
    Ok(tape.add(y, params.var(&format!("{prefix}.bias"))?)?)
}

/// Pre-norm transformer block on `[N, L, d]`.
fn block<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    params: &Bound,
    prefix: &str,
    x: Var,
    key_mask: Option<Var>,
) -> Result<Var> {
    let w = |name: &str| params.var(&format!("{prefix}.{name}"));
    let h = layer_norm(tape, params, &format!("{prefix}.ln1"), x)?;
    let a = attention(tape, cfg, h, w("attn.qkv.weight")?, w("attn.qkv.bias")?, key_mask)?;
    let a = linear(tape, a, w("attn.out.weight")?, Some(w("attn.out.bias")?))?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, params, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, h, w("mlp.fc1.weight")?, Some(w("mlp.fc1.bias")?))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, w("mlp.fc2.weight")?, Some(w("mlp.fc2.bias")?))?;
    Ok(tape.add(x, h)?)
}

fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    key_mask: Option<Var>,
) -> Result<Var> {
    let (n, l, d) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let heads = cfg.heads;
    let dh = d / heads;
    let qkv = linear(tape, x, qkv_w, Some(qkv_b))?;
    let split = |tape: &mut Tape<S>, i: usize, perm: &[usize]| -> Result<Var> {
        let part = tape.slice(qkv, 2, i * d, (i + 1) * d)?;
        let part = tape.reshape(part, vec![n, l, heads, dh])?;
        Ok(tape.permute(part, perm)?)
    };
    let q = split(tape, 0, &[0, 2, 1, 3])?;
    let kt = split(tape, 1, &[0, 2, 3, 1])?;
    let v = split(tape, 2, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.mul_scalar(scores, S::lit(1.0 / (dh as f64).sqrt()))?;
    if let Some(m) = key_mask {
        scores = tape.add(scores, m)?;
    }
    let attn = tape.softmax(scores, 3)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    Ok(tape.reshape(out, vec![n, l, d])?)
}
