//! Similarities and losses: the symmetric contrastive loss, global and local
//! hard-negative candidate distributions, and the focal/label-smoothed
//! cross-entropy applied to them.
//!
//! Candidate texts are laid out item-major: text `i·(1+K) + k` belongs to
//! image `i`, slot 0 being the original caption.

use fsc_tensor::{Scalar, Tape, Var, LOSS_EPS};
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEmbeddings, TextEmbeddings};
use crate::error::{Error, Result};

/// Rows whose similarity range is at most this attend uniformly.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Additive mask for excluded logits. Finite so that `0 · fill` stays 0.
const MASK_FILL: f64 = -1e30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Minmax,
    MinmaxSparse,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub gamma: f64,
    pub beta: f64,
    pub norm_mode: NormMode,
    pub temperature_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_g: 0.5,
            lambda_l: 0.2,
            gamma: 2.0,
            beta: 0.02,
            norm_mode: NormMode::Minmax,
            temperature_init: 0.07,
        }
    }
}

impl LossConfig {
    /// Contrastive loss only.
    pub fn contrastive() -> Self {
        Self {
            lambda_g: 0.0,
            lambda_l: 0.0,
            gamma: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn uses_negatives(&self) -> bool {
        self.lambda_g > 0.0 || self.lambda_l > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda_g, self.lambda_l, self.gamma, self.beta, self.temperature_init]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if self.lambda_g < 0.0 || self.lambda_l < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config("beta must lie in [0, 1)".into()));
        }
        if self.temperature_init <= 0.0 {
            return Err(Error::Config("temperature_init must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values of one step and the weights that combined them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_neg_g: f64,
    pub l_neg_l: f64,
    pub l_total: f64,
    pub lambda_g: f64,
    pub lambda_l: f64,
    /// Items that had at least one valid hard negative.
    pub hn_items: usize,
}

fn scalar_of<S: Scalar>(tape: &Tape<S>, v: Var) -> f64 {
    tape.item(v).as_f64()
}

/// `exp(scale · ⟨v, t⟩)` along the last axis of two unit-vector tensors.
pub fn global_similarity<S: Scalar>(tape: &mut Tape<S>, v: Var, t: Var, scale: Var) -> Result<Var> {
    let last = tape.shape(v).len().checked_sub(1).ok_or_else(|| Error::InvalidInput("scalar input".into()))?;
    let prod = tape.mul(v, t)?;
    let cos = tape.sum(prod, last, false)?;
    let logit = tape.mul(cos, scale)?;
    Ok(tape.exp(logit)?)
}

fn eye<S: Scalar>(tape: &mut Tape<S>, n: usize) -> Result<Var> {
    let data = (0..n * n).map(|i| if i % (n + 1) == 0 { S::one() } else { S::zero() }).collect();
    Ok(tape.constant(vec![n, n], data)?)
}

/// `½(L_i2t + L_t2i)` over a batch of matched unit vectors `[B, d]`.
pub fn clip_loss<S: Scalar>(tape: &mut Tape<S>, images: Var, texts: Var, scale: Var) -> Result<Var> {
    let b = tape.shape(images)[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if tape.shape(texts)[0] != b {
        return Err(Error::InvalidInput("image and text batches differ in size".into()));
    }
    let tt = tape.transpose(texts, 0, 1)?;
    let cos = tape.matmul(images, tt)?;
    let logits = tape.mul(cos, scale)?;
    let diag = eye(tape, b)?;
    let i2t = tape.log_softmax(logits, 1)?;
    let t2i = tape.log_softmax(logits, 0)?;
    let both = tape.add(i2t, t2i)?;
    let picked = tape.mul(both, diag)?;
    let total = tape.sum_all(picked)?;
    Ok(tape.mul_scalar(total, S::lit(-0.5 / b as f64))?)
}

fn mask_constant<S: Scalar>(tape: &mut Tape<S>, shape: Vec<usize>, valid: &[bool]) -> Result<Var> {
    let data = valid.iter().map(|&v| if v { S::zero() } else { S::lit(MASK_FILL) }).collect();
    Ok(tape.constant(shape, data)?)
}

/// Candidate validity per item: slot 0 always, slot `k ≥ 1` from `hn_valid`.
pub fn candidate_mask(hn_valid: &[Vec<bool>]) -> Vec<bool> {
    hn_valid
        .iter()
        .flat_map(|v| std::iter::once(true).chain(v.iter().copied()))
        .collect()
}

/// Softmax over each item's valid candidates; invalid slots get probability 0.
///
/// `logits` is `[M, 1+K]` holding `log S` for each candidate.
pub fn candidate_distribution<S: Scalar>(tape: &mut Tape<S>, logits: Var, mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || mask.len() != shape[0] * shape[1] {
        return Err(Error::InvalidInput(format!("candidate logits {shape:?} vs mask of {}", mask.len())));
    }
    for row in mask.chunks(shape[1]) {
        if !row[1..].iter().any(|&v| v) {
            return Err(Error::AllInvalid);
        }
    }
    let m = mask_constant(tape, shape, mask)?;
    let masked = tape.add(logits, m)?;
    Ok(tape.softmax(masked, 1)?)
}

/// Global-path candidate distribution `p^g` for `[M]` images against their
/// `[M·(1+K)]` candidate texts.
pub fn hn_distribution_global<S: Scalar>(
    tape: &mut Tape<S>,
    images: Var,
    texts: Var,
    mask: &[bool],
    scale: Var,
) -> Result<Var> {
    let logits = global_candidate_logits(tape, images, texts, mask.len(), scale)?;
    candidate_distribution(tape, logits, mask)
}

fn global_candidate_logits<S: Scalar>(tape: &mut Tape<S>, images: Var, texts: Var, total: usize, scale: Var) -> Result<Var> {
    let m = tape.shape(images)[0];
    if total == 0 || total % m != 0 || tape.shape(texts)[0] != total {
        return Err(Error::InvalidInput("candidate texts must be item-major with 1+K per image".into()));
    }
    let c = total / m;
    let owners: Vec<usize> = (0..total).map(|j| j / c).collect();
    let rep = tape.index_select(images, &owners)?;
    let prod = tape.mul(rep, texts)?;
    let cos = tape.sum(prod, 1, false)?;
    let logits = tape.mul(cos, scale)?;
    Ok(tape.reshape(logits, vec![m, c])?)
}

/// Row-wise normalization of a similarity map over its last (patch) axis.
pub fn attention_weights<S: Scalar>(tape: &mut Tape<S>, s: Var, mode: NormMode) -> Result<Var> {
    let axis = tape.shape(s).len() - 1;
    let p = tape.shape(s)[axis];
    let uniform = S::lit(1.0 / p as f64);
    match mode {
        NormMode::Softmax => Ok(tape.softmax(s, axis)?),
        NormMode::Minmax => Ok(tape.minmax_normalize(s, axis, S::lit(DEGENERATE_RANGE))?),
        NormMode::MinmaxSparse => {
            let a = tape.minmax_normalize(s, axis, S::lit(DEGENERATE_RANGE))?;
            let keep: Vec<S> = tape
                .value(a)
                .iter()
                .map(|&x| if x < uniform { S::zero() } else { S::one() })
                .collect();
            let keep = tape.constant(tape.shape(a).to_vec(), keep)?;
            Ok(tape.mul(a, keep)?)
        }
    }
}

/// `v̂_w = Σ_p a_wp v_p / Σ_p a_wp` with padded rows zeroed.
///
/// `tokens` is `[N, W, d]`, `patches` `[N, P, d]`, `mask` `N·W` flags.
pub fn textual_aligned_patches<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    tokens: Var,
    mask: &[bool],
    mode: NormMode,
) -> Result<Var> {
    let pt = tape.transpose(patches, 1, 2)?;
    let s = tape.matmul(tokens, pt)?;
    let a = attention_weights(tape, s, mode)?;
    let num = tape.matmul(a, patches)?;
    let den = tape.sum(a, 2, true)?;
    let v_hat = tape.div(num, den)?;
    let (n, w) = (tape.shape(tokens)[0], tape.shape(tokens)[1]);
    if mask.len() != n * w {
        return Err(Error::InvalidInput("token mask does not match token rows".into()));
    }
    let keep = mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect();
    let keep = tape.constant(vec![n, w, 1], keep)?;
    Ok(tape.mul(v_hat, keep)?)
}

/// `log S_l` per text: `log Σ_{w real} exp(scale · cos(v̂_w, t_w))`, shape `[N]`.
pub fn log_local_similarity<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    tokens: Var,
    mask: &[bool],
    scale: Var,
    mode: NormMode,
) -> Result<Var> {
    let (n, w) = (tape.shape(tokens)[0], tape.shape(tokens)[1]);
    if mask.len() != n * w {
        return Err(Error::InvalidInput("token mask does not match token rows".into()));
    }
    if mask.chunks(w).any(|row| !row.iter().any(|&m| m)) {
        return Err(Error::NoValidTokens);
    }
    let v_hat = textual_aligned_patches(tape, patches, tokens, mask, mode)?;
    let v_hat = tape.l2_normalize(v_hat, 2)?;
    let prod = tape.mul(v_hat, tokens)?;
    let cos = tape.sum(prod, 2, false)?;
    let logits = tape.mul(cos, scale)?;
    let fill = mask_constant(tape, vec![n, w], mask)?;
    let logits = tape.add(logits, fill)?;
    Ok(tape.logsumexp(logits, 1, false)?)
}

/// `S_l` per text (may overflow `f32` at large scales; the losses use the log form).
pub fn local_similarity<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    tokens: Var,
    mask: &[bool],
    scale: Var,
    mode: NormMode,
) -> Result<Var> {
    let l = log_local_similarity(tape, patches, tokens, mask, scale, mode)?;
    Ok(tape.exp(l)?)
}

/// `S_l / W_real` for each text, a length-neutral view of the local score.
pub fn local_similarity_per_token<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    tokens: Var,
    mask: &[bool],
    scale: Var,
    mode: NormMode,
) -> Result<Vec<f64>> {
    let s = local_similarity(tape, patches, tokens, mask, scale, mode)?;
    let w = tape.shape(tokens)[1];
    Ok(tape
        .value(s)
        .iter()
        .zip(mask.chunks(w))
        .map(|(&v, row)| v.as_f64() / row.iter().filter(|&&m| m).count() as f64)
        .collect())
}

/// Local-path candidate distribution `p^l`.
pub fn hn_distribution_local<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    tokens: Var,
    token_mask: &[bool],
    candidate_mask: &[bool],
    scale: Var,
    mode: NormMode,
) -> Result<Var> {
    let logits = local_candidate_logits(tape, patches, tokens, token_mask, candidate_mask.len(), scale, mode)?;
    candidate_distribution(tape, logits, candidate_mask)
}

fn local_candidate_logits<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    tokens: Var,
    token_mask: &[bool],
    total: usize,
    scale: Var,
    mode: NormMode,
) -> Result<Var> {
    let m = tape.shape(patches)[0];
    if total == 0 || total % m != 0 || tape.shape(tokens)[0] != total {
        return Err(Error::InvalidInput("candidate texts must be item-major with 1+K per image".into()));
    }
    let c = total / m;
    let owners: Vec<usize> = (0..total).map(|j| j / c).collect();
    let rep = tape.index_select(patches, &owners)?;
    let logs = log_local_similarity(tape, rep, tokens, token_mask, scale, mode)?;
    Ok(tape.reshape(logs, vec![m, c])?)
}

/// Smoothed targets: `(1-β)·[k=0] + β/(1+K_valid)` on valid slots, 0 elsewhere.
pub fn smoothed_labels(valid: &[bool], beta: f64) -> Vec<f64> {
    let n_valid = valid.iter().filter(|&&v| v).count() as f64;
    valid
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if !v {
                0.0
            } else {
                let base = if k == 0 { 1.0 - beta } else { 0.0 };
                base + beta / n_valid
            }
        })
        .collect()
}

/// Per-item `Σ_k (1-p_k)^γ · (-ỹ_k log max(p_k, ε))`, shape `[M]`.
///
/// `p` is `[M, 1+K]`; `mask` flags valid slots. With `γ = 0, β = 0` this is
/// the cross-entropy `-log p_0`.
pub fn scr_hn_loss<S: Scalar>(tape: &mut Tape<S>, p: Var, mask: &[bool], gamma: f64, beta: f64) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 2 || mask.len() != shape[0] * shape[1] {
        return Err(Error::InvalidInput(format!("probabilities {shape:?} vs mask of {}", mask.len())));
    }
    let eps = S::lit(LOSS_EPS);
    let degenerate = tape
        .value(p)
        .iter()
        .zip(mask)
        .any(|(&x, &v)| v && !(x >= S::zero()));
    if degenerate {
        return Err(Error::DegenerateP);
    }
    let labels: Vec<S> = mask
        .chunks(shape[1])
        .flat_map(|row| smoothed_labels(row, beta))
        .map(S::lit)
        .collect();
    let labels = tape.constant(shape, labels)?;
    let guarded = tape.clamp(p, eps, S::lit(2.0))?;
    let logp = tape.log(guarded)?;
    let ce = tape.mul(logp, labels)?;
    let weighted = if gamma == 0.0 {
        ce
    } else {
        let q = tape.neg(p)?;
        let q = tape.add_scalar(q, S::one())?;
        let focal = tape.pow(q, S::lit(gamma))?;
        tape.mul(ce, focal)?
    };
    let per_item = tape.sum(weighted, 1, false)?;
    Ok(tape.neg(per_item)?)
}

/// Encoded batch: `B` images and `B·(1+K)` item-major candidate texts.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub images: ImageEmbeddings,
    pub texts: TextEmbeddings,
    /// `B` rows of `K` hard-negative validity flags (empty rows when `K = 0`).
    pub hn_valid: Vec<Vec<bool>>,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.hn_valid.len()
    }

    pub fn negatives(&self) -> usize {
        self.hn_valid.first().map_or(0, Vec::len)
    }
}

/// Loss graph outputs: the scalar to differentiate and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub clip: Var,
    pub neg_g: Option<Var>,
    pub neg_l: Option<Var>,
    pub hn_items: usize,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>, cfg: &LossConfig) -> LossBreakdown {
        LossBreakdown {
            l_clip: scalar_of(tape, self.clip),
            l_neg_g: self.neg_g.map_or(0.0, |v| scalar_of(tape, v)),
            l_neg_l: self.neg_l.map_or(0.0, |v| scalar_of(tape, v)),
            l_total: scalar_of(tape, self.total),
            lambda_g: cfg.lambda_g,
            lambda_l: cfg.lambda_l,
            hn_items: self.hn_items,
        }
    }
}

/// `L_clip + λ_g·L^g_neg + λ_l·L^l_neg`.
///
/// HN losses average over items with at least one valid negative; items
/// without one only enter `L_clip`. A zero weight skips its term entirely.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, batch: &EncodedBatch, cfg: &LossConfig, scale: Var) -> Result<LossVars> {
    let b = batch.batch_size();
    let c = 1 + batch.negatives();
    if batch.hn_valid.iter().any(|v| v.len() + 1 != c) {
        return Err(Error::InvalidInput("every item needs the same number of negative slots".into()));
    }
    if tape.shape(batch.texts.global)[0] != b * c || tape.shape(batch.images.global)[0] != b {
        return Err(Error::InvalidInput("batch encodings do not match the validity layout".into()));
    }
    let originals: Vec<usize> = (0..b).map(|i| i * c).collect();
    let t0 = tape.index_select(batch.texts.global, &originals)?;
    let clip = clip_loss(tape, batch.images.global, t0, scale)?;

    let hn_rows: Vec<usize> = (0..b).filter(|&i| batch.hn_valid[i].iter().any(|&v| v)).collect();
    let mut out = LossVars {
        total: clip,
        clip,
        neg_g: None,
        neg_l: None,
        hn_items: hn_rows.len(),
    };
    if hn_rows.is_empty() || c == 1 {
        return Ok(out);
    }
    let mask = candidate_mask(&hn_rows.iter().map(|&i| batch.hn_valid[i].clone()).collect::<Vec<_>>());
    let text_rows: Vec<usize> = hn_rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();

    if cfg.lambda_g > 0.0 {
        let imgs = tape.index_select(batch.images.global, &hn_rows)?;
        let txts = tape.index_select(batch.texts.global, &text_rows)?;
        let p = hn_distribution_global(tape, imgs, txts, &mask, scale)?;
        let l = scr_hn_loss(tape, p, &mask, cfg.gamma, cfg.beta)?;
        let l = tape.mean_all(l)?;
        let weighted = tape.mul_scalar(l, S::lit(cfg.lambda_g))?;
        out.total = tape.add(out.total, weighted)?;
        out.neg_g = Some(l);
    }
    if cfg.lambda_l > 0.0 {
        let patches = tape.index_select(batch.images.patches, &hn_rows)?;
        let tokens = tape.index_select(batch.texts.tokens, &text_rows)?;
        let w = batch.texts.len;
        let token_mask: Vec<bool> = text_rows
            .iter()
            .flat_map(|&j| batch.texts.mask[j * w..(j + 1) * w].iter().copied())
            .collect();
        let p = hn_distribution_local(tape, patches, tokens, &token_mask, &mask, scale, cfg.norm_mode)?;
        let l = scr_hn_loss(tape, p, &mask, cfg.gamma, cfg.beta)?;
        let l = tape.mean_all(l)?;
        let weighted = tape.mul_scalar(l, S::lit(cfg.lambda_l))?;
        out.total = tape.add(out.total, weighted)?;
        out.neg_l = Some(l);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsc_tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T64 = Tape<f64>;

    fn c(tape: &mut T64, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn scale(tape: &mut T64, s: f64) -> Var {
        tape.constant(vec![], vec![s]).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    /// Unit vector in the (e1, e2) plane at cosine `cos` to e1, padded to `d`.
    fn at_cos(cos: f64, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[0] = cos;
        v[1] = (1.0 - cos * cos).sqrt();
        v
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn global_similarity_examples() {
        let mut tape = T64::new();
        let s1 = scale(&mut tape, 1.0);
        let v = c(&mut tape, &[2], &[1.0, 0.0]);
        let t = c(&mut tape, &[2], &[0.0, 1.0]);
        let same = global_similarity(&mut tape, v, v, s1).unwrap();
        close(tape.item(same), std::f64::consts::E, 1e-12);
        let orth = global_similarity(&mut tape, v, t, s1).unwrap();
        close(tape.item(orth), 1.0, 1e-12);
        let half = c(&mut tape, &[2], &at_cos(0.5, 2));
        let s = scale(&mut tape, 1.0 / 0.07);
        let g = global_similarity(&mut tape, v, half, s).unwrap();
        close(tape.item(g), (0.5f64 / 0.07).exp(), 1e-9);
    }

    #[test]
    fn clip_loss_examples() {
        let mut tape = T64::new();
        let s = scale(&mut tape, 1.0);
        let x = c(&mut tape, &[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let l = clip_loss(&mut tape, x, x, s).unwrap();
        close(tape.item(l), 2f64.ln(), 1e-12);

        let e = c(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let hot = scale(&mut tape, 100.0);
        let l = clip_loss(&mut tape, e, e, hot).unwrap();
        assert!(tape.item(l) < 1e-40);

        let one = c(&mut tape, &[1, 2], &[1.0, 0.0]);
        assert!(matches!(clip_loss(&mut tape, one, one, s), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn clip_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, d, sc) = (3, 5, 4.0);
        let vs: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let ts: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let logit = |i: usize, j: usize| sc * dot(&vs[i], &ts[j]);
        let mut expected = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| logit(i, j).exp()).sum();
            let col: f64 = (0..b).map(|j| logit(j, i).exp()).sum();
            expected += -(logit(i, i).exp() / row).ln() - (logit(i, i).exp() / col).ln();
        }
        expected /= 2.0 * b as f64;
        let mut tape = T64::new();
        let v = c(&mut tape, &[b, d], &vs.concat());
        let t = c(&mut tape, &[b, d], &ts.concat());
        let s = scale(&mut tape, sc);
        let l = clip_loss(&mut tape, v, t, s).unwrap();
        close(tape.item(l), expected, 1e-12);
    }

    fn candidates(tape: &mut T64, cosines: &[f64]) -> (Var, Var) {
        let img = c(tape, &[1, 3], &[1.0, 0.0, 0.0]);
        let txt: Vec<f64> = cosines.iter().flat_map(|&x| at_cos(x, 3)).collect();
        let t = c(tape, &[cosines.len(), 3], &txt);
        (img, t)
    }

    #[test]
    fn global_distribution_examples() {
        let mut tape = T64::new();
        let s = scale(&mut tape, 1.0 / 0.07);
        let (img, t) = candidates(&mut tape, &[0.3; 4]);
        let p = hn_distribution_global(&mut tape, img, t, &[true; 4], s).unwrap();
        for &x in tape.value(p) {
            close(x, 0.25, 1e-12);
        }
        let p = hn_distribution_global(&mut tape, img, t, &[true, true, true, false], s).unwrap();
        let want = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        for (&x, w) in tape.value(p).iter().zip(want) {
            close(x, w, 1e-12);
        }
        let cos = [0.9, 0.8, 0.1, 0.1];
        let (img, t) = candidates(&mut tape, &cos);
        let p = hn_distribution_global(&mut tape, img, t, &[true; 4], s).unwrap();
        let z: f64 = cos.iter().map(|x| (x / 0.07).exp()).sum();
        for (&x, cs) in tape.value(p).iter().zip(cos) {
            close(x, (cs / 0.07).exp() / z, 1e-12);
        }
        assert!(matches!(
            hn_distribution_global(&mut tape, img, t, &[true, false, false, false], s),
            Err(Error::AllInvalid)
        ));
    }

    #[test]
    fn attention_examples() {
        let mut tape = T64::new();
        let row = c(&mut tape, &[1, 3], &[1.0, 3.0, 2.0]);
        let a = attention_weights(&mut tape, row, NormMode::Minmax).unwrap();
        assert_eq!(tape.value(a), &[0.0, 1.0, 0.5]);
        let a = attention_weights(&mut tape, row, NormMode::MinmaxSparse).unwrap();
        assert_eq!(tape.value(a), &[0.0, 1.0, 0.5]);
        let flat = c(&mut tape, &[1, 3], &[2.0, 2.0, 2.0]);
        let a = attention_weights(&mut tape, flat, NormMode::Minmax).unwrap();
        assert_eq!(tape.value(a), &[1.0 / 3.0; 3]);
        let sm = attention_weights(&mut tape, row, NormMode::Softmax).unwrap();
        close(tape.value(sm).iter().sum(), 1.0, 1e-12);
        let wide = c(&mut tape, &[1, 4], &[0.0, 0.2, 1.0, 0.3]);
        let a = attention_weights(&mut tape, wide, NormMode::MinmaxSparse).unwrap();
        assert_eq!(tape.value(a), &[0.0, 0.0, 1.0, 0.3]);
    }

    #[test]
    fn minmax_rows_span_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = T64::new();
        let s = c(&mut tape, &[4, 5], &data);
        let a = attention_weights(&mut tape, s, NormMode::Minmax).unwrap();
        for row in tape.value(a).chunks(5) {
            assert_eq!(row.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(row.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn aligned_patches_examples() {
        let mut tape = T64::new();
        let v = c(&mut tape, &[1, 1, 2], &[0.6, 0.8]);
        let t = c(&mut tape, &[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        for mode in [NormMode::Minmax, NormMode::MinmaxSparse, NormMode::Softmax] {
            let vh = textual_aligned_patches(&mut tape, v, t, &[true, true], mode).unwrap();
            assert_eq!(tape.value(vh), &[0.6, 0.8, 0.6, 0.8]);
        }
        // Two patches: minmax turns each row one-hot onto its closer patch.
        let v2 = c(&mut tape, &[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let t2 = c(&mut tape, &[1, 2, 2], &[0.8, 0.6, 0.6, 0.8]);
        let vh = textual_aligned_patches(&mut tape, v2, t2, &[true, false], NormMode::Minmax).unwrap();
        assert_eq!(tape.value(vh), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn aligned_patches_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, p, d) = (2, 3, 4);
        let vs: Vec<Vec<f64>> = (0..p).map(|_| unit(&mut rng, d)).collect();
        let ts: Vec<Vec<f64>> = (0..w).map(|_| unit(&mut rng, d)).collect();
        let mut tape = T64::new();
        let v = c(&mut tape, &[1, p, d], &vs.concat());
        let t = c(&mut tape, &[1, w, d], &ts.concat());
        for mode in [NormMode::Minmax, NormMode::Softmax] {
            let vh = textual_aligned_patches(&mut tape, v, t, &[true; 2], mode).unwrap();
            for (wi, tw) in ts.iter().enumerate() {
                let s: Vec<f64> = vs.iter().map(|vp| dot(tw, vp)).collect();
                let a: Vec<f64> = match mode {
                    NormMode::Softmax => {
                        let z: f64 = s.iter().map(|x| x.exp()).sum();
                        s.iter().map(|x| x.exp() / z).collect()
                    }
                    _ => {
                        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        s.iter().map(|x| (x - lo) / (hi - lo)).collect()
                    }
                };
                let total: f64 = a.iter().sum();
                for k in 0..d {
                    let want: f64 = (0..p).map(|pi| a[pi] * vs[pi][k]).sum::<f64>() / total;
                    close(tape.value(vh)[wi * d + k], want, 1e-12);
                }
            }
        }
    }

    #[test]
    fn local_similarity_examples() {
        let mut tape = T64::new();
        let s1 = scale(&mut tape, 1.0);
        let v = c(&mut tape, &[1, 1, 2], &[1.0, 0.0]);
        let l = local_similarity(&mut tape, v, v, &[true], s1, NormMode::Minmax).unwrap();
        close(tape.item(l), std::f64::consts::E, 1e-12);

        let v3 = c(&mut tape, &[1, 1, 3], &[1.0, 0.0, 0.0]);
        let toks: Vec<f64> = (0..6)
            .flat_map(|i| if i % 2 == 0 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] })
            .collect();
        let t = c(&mut tape, &[1, 6, 3], &toks);
        let mask = [true, true, true, true, true, false];
        let l = local_similarity(&mut tape, v3, t, &mask, s1, NormMode::Softmax).unwrap();
        close(tape.item(l), 5.0, 1e-12);
        let per = local_similarity_per_token(&mut tape, v3, t, &mask, s1, NormMode::Softmax).unwrap();
        close(per[0], 1.0, 1e-12);
        assert!(matches!(
            local_similarity(&mut tape, v3, t, &[false; 6], s1, NormMode::Minmax),
            Err(Error::NoValidTokens)
        ));
    }

    #[test]
    fn local_similarity_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (w, p, d, sc) = (3, 4, 5, 3.0);
        let vs: Vec<Vec<f64>> = (0..p).map(|_| unit(&mut rng, d)).collect();
        let ts: Vec<Vec<f64>> = (0..w).map(|_| unit(&mut rng, d)).collect();
        let mut expected = 0.0;
        for tw in &ts {
            let s: Vec<f64> = vs.iter().map(|vp| dot(tw, vp)).collect();
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let a: Vec<f64> = s.iter().map(|x| (x - lo) / (hi - lo)).collect();
            let total: f64 = a.iter().sum();
            let vh: Vec<f64> = (0..d).map(|k| (0..p).map(|pi| a[pi] * vs[pi][k]).sum::<f64>() / total).collect();
            let n = dot(&vh, &vh).sqrt();
            expected += (sc * dot(&vh, tw) / n).exp();
        }
        let mut tape = T64::new();
        let v = c(&mut tape, &[1, p, d], &vs.concat());
        let t = c(&mut tape, &[1, w, d], &ts.concat());
        let s = scale(&mut tape, sc);
        let l = local_similarity(&mut tape, v, t, &[true; 3], s, NormMode::Minmax).unwrap();
        close(tape.item(l), expected, 1e-10);
    }

    #[test]
    fn local_differs_from_global_but_collapses_for_single_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, p, d) = (3, 4, 6);
        let vs: Vec<f64> = (0..p).flat_map(|_| unit(&mut rng, d)).collect();
        let ts: Vec<f64> = (0..w).flat_map(|_| unit(&mut rng, d)).collect();
        let mut tape = T64::new();
        let s = scale(&mut tape, 1.0 / 0.07);
        let v = c(&mut tape, &[1, p, d], &vs);
        let t = c(&mut tape, &[1, w, d], &ts);
        let sl = local_similarity(&mut tape, v, t, &[true; 3], s, NormMode::Minmax).unwrap();
        let vg = tape.mean(v, 1, false).unwrap();
        let vg = tape.l2_normalize(vg, 1).unwrap();
        let tg = tape.slice(t, 1, w - 1, w).unwrap();
        let tg = tape.reshape(tg, vec![1, d]).unwrap();
        let sg = global_similarity(&mut tape, vg, tg, s).unwrap();
        assert!((tape.item(sl) - tape.item(sg)).abs() > 1e-3);

        let v1 = c(&mut tape, &[1, 1, d], &vs[..d]);
        let t1 = c(&mut tape, &[1, 1, d], &ts[..d]);
        let sl = local_similarity(&mut tape, v1, t1, &[true], s, NormMode::Softmax).unwrap();
        let vg = tape.reshape(v1, vec![1, d]).unwrap();
        let tg = tape.reshape(t1, vec![1, d]).unwrap();
        let sg = global_similarity(&mut tape, vg, tg, s).unwrap();
        assert!((tape.item(sl) - tape.item(sg)).abs() < 1e-9 * tape.item(sg).max(1.0));
    }

    #[test]
    fn smoothed_label_examples() {
        let y = smoothed_labels(&[true; 4], 0.02);
        for (a, b) in y.iter().zip([0.985, 0.005, 0.005, 0.005]) {
            close(*a, b, 1e-15);
        }
        assert_eq!(smoothed_labels(&[true, true, false, true], 0.0), vec![1.0, 0.0, 0.0, 0.0]);
        let y = smoothed_labels(&[true, false, true, false], 0.1);
        close(y.iter().sum(), 1.0, 1e-15);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn scr_examples() {
        let mut tape = T64::new();
        let p = c(&mut tape, &[1, 4], &[0.25; 4]);
        let l = scr_hn_loss(&mut tape, p, &[true; 4], 0.0, 0.0).unwrap();
        close(tape.item(l), 4f64.ln(), 1e-15);
        let l = scr_hn_loss(&mut tape, p, &[true; 4], 2.0, 0.0).unwrap();
        close(tape.item(l), 0.5625 * 4f64.ln(), 1e-15);
        let q = c(&mut tape, &[1, 3], &[0.7, 0.2, 0.1]);
        let l = scr_hn_loss(&mut tape, q, &[true; 3], 0.0, 0.0).unwrap();
        close(tape.item(l), -0.7f64.ln(), 1e-15);
        let tiny = c(&mut tape, &[1, 2], &[1.0, 0.0]);
        let l = scr_hn_loss(&mut tape, tiny, &[true, true], 0.0, 0.1).unwrap();
        close(tape.item(l), -0.05 * 1e-12f64.ln(), 1e-12);
        let bad = c(&mut tape, &[1, 2], &[f64::NAN, 0.5]);
        assert!(matches!(scr_hn_loss(&mut tape, bad, &[true; 2], 0.0, 0.0), Err(Error::DegenerateP)));
    }

    struct Fixture {
        v: Vec<f64>,
        t: Vec<f64>,
        mask: Vec<bool>,
        hn_valid: Vec<Vec<bool>>,
        b: usize,
        w: usize,
    }

    const D: usize = 4;
    const P: usize = 3;

    fn fixture(seed: u64, hn_valid: Vec<Vec<bool>>) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = hn_valid.len();
        let c = 1 + hn_valid[0].len();
        let w = 3;
        let v = (0..b * P * D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = (0..b * c * w * D).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = (0..b * c).flat_map(|j| [true, true, j % 2 == 0]).collect();
        Fixture {
            v,
            t,
            mask,
            hn_valid,
            b,
            w,
        }
    }

    fn build(tape: &mut T64, f: &Fixture, v: Var, t: Var) -> EncodedBatch {
        let c = 1 + f.hn_valid[0].len();
        let patches = tape.l2_normalize(v, 2).unwrap();
        let pooled = tape.mean(v, 1, false).unwrap();
        let global = tape.l2_normalize(pooled, 1).unwrap();
        let tokens = tape.l2_normalize(t, 2).unwrap();
        let flat = tape.reshape(t, vec![f.b * c * f.w, D]).unwrap();
        let eos: Vec<usize> = (0..f.b * c).map(|j| j * f.w + if j % 2 == 0 { 2 } else { 1 }).collect();
        let tg = tape.index_select(flat, &eos).unwrap();
        let tg = tape.l2_normalize(tg, 1).unwrap();
        EncodedBatch {
            images: ImageEmbeddings { patches, global },
            texts: TextEmbeddings {
                tokens,
                global: tg,
                mask: f.mask.clone(),
                len: f.w,
            },
            hn_valid: f.hn_valid.clone(),
        }
    }

    fn eval_total(f: &Fixture, cfg: &LossConfig) -> (LossBreakdown, f64, f64, f64) {
        let mut tape = T64::new();
        let c = 1 + f.hn_valid[0].len();
        let v = c_owned(&mut tape, vec![f.b, P, D], f.v.clone());
        let t = c_owned(&mut tape, vec![f.b * c, f.w, D], f.t.clone());
        let batch = build(&mut tape, f, v, t);
        let s = scale(&mut tape, 5.0);
        let out = total_loss(&mut tape, &batch, cfg, s).unwrap();
        let bd = out.breakdown(&tape, cfg);

        let t0 = tape.index_select(batch.texts.global, &(0..f.b).map(|i| i * c).collect::<Vec<_>>()).unwrap();
        let clip = clip_loss(&mut tape, batch.images.global, t0, s).unwrap();
        let rows: Vec<usize> = (0..f.b).filter(|&i| f.hn_valid[i].iter().any(|&x| x)).collect();
        let mut g_sum = 0.0;
        let mut l_sum = 0.0;
        for &i in &rows {
            let mask = candidate_mask(&[f.hn_valid[i].clone()]);
            let img = tape.index_select(batch.images.global, &[i]).unwrap();
            let txt = tape.index_select(batch.texts.global, &(i * c..(i + 1) * c).collect::<Vec<_>>()).unwrap();
            let p = hn_distribution_global(&mut tape, img, txt, &mask, s).unwrap();
            let l = scr_hn_loss(&mut tape, p, &mask, cfg.gamma, cfg.beta).unwrap();
            g_sum += tape.item(l);
            let patches = tape.index_select(batch.images.patches, &[i]).unwrap();
            let toks = tape.index_select(batch.texts.tokens, &(i * c..(i + 1) * c).collect::<Vec<_>>()).unwrap();
            let tmask = f.mask[i * c * f.w..(i + 1) * c * f.w].to_vec();
            let p = hn_distribution_local(&mut tape, patches, toks, &tmask, &mask, s, cfg.norm_mode).unwrap();
            let l = scr_hn_loss(&mut tape, p, &mask, cfg.gamma, cfg.beta).unwrap();
            l_sum += tape.item(l);
        }
        let n = rows.len().max(1) as f64;
        (bd, tape.item(clip), g_sum / n, l_sum / n)
    }

    fn c_owned(tape: &mut T64, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.constant(shape, data).unwrap()
    }

    #[test]
    fn total_loss_composes_parts() {
        let f = fixture(4, vec![vec![true, true, false], vec![false, false, false], vec![true, false, true]]);
        let cfg = LossConfig::default();
        let (bd, clip, g, l) = eval_total(&f, &cfg);
        assert_eq!(bd.hn_items, 2);
        close(bd.l_clip, clip, 1e-12);
        close(bd.l_neg_g, g, 1e-12);
        close(bd.l_neg_l, l, 1e-12);
        close(bd.l_total, clip + 0.5 * g + 0.2 * l, 1e-12);
    }

    #[test]
    fn zero_weights_and_full_masking_reduce_to_clip() {
        let f = fixture(5, vec![vec![true, true, true], vec![true, false, true]]);
        let (bd, clip, _, _) = eval_total(&f, &LossConfig::contrastive());
        assert_eq!(bd.l_total, bd.l_clip);
        close(bd.l_clip, clip, 1e-12);
        let masked = fixture(5, vec![vec![false; 3], vec![false; 3]]);
        let (bd, _, _, _) = eval_total(&masked, &LossConfig::default());
        assert_eq!(bd.l_total, bd.l_clip);
        assert_eq!(bd.hn_items, 0);
    }

    #[test]
    fn total_loss_ignores_slot_order() {
        let f = fixture(6, vec![vec![true, false, true], vec![true, true, true]]);
        let (bd, _, _, _) = eval_total(&f, &LossConfig::default());
        let c = 4;
        let tw = f.w * D;
        let perm = [0usize, 3, 1, 2];
        let mut g = Fixture {
            v: f.v.clone(),
            t: vec![],
            mask: vec![],
            hn_valid: vec![],
            b: f.b,
            w: f.w,
        };
        for i in 0..f.b {
            for &k in &perm {
                let j = i * c + k;
                g.t.extend_from_slice(&f.t[j * tw..(j + 1) * tw]);
                g.mask.extend_from_slice(&f.mask[j * f.w..(j + 1) * f.w]);
            }
            g.hn_valid.push(perm[1..].iter().map(|&k| f.hn_valid[i][k - 1]).collect());
        }
        let bd2 = eval_permuted(&g, &perm);
        close(bd.l_total, bd2.l_total, 1e-12);
    }

    fn eval_permuted(g: &Fixture, perm: &[usize]) -> LossBreakdown {
        let c = perm.len();
        let mut tape = T64::new();
        let v = c_owned(&mut tape, vec![g.b, P, D], g.v.clone());
        let t = c_owned(&mut tape, vec![g.b * c, g.w, D], g.t.clone());
        let patches = tape.l2_normalize(v, 2).unwrap();
        let pooled = tape.mean(v, 1, false).unwrap();
        let global = tape.l2_normalize(pooled, 1).unwrap();
        let tokens = tape.l2_normalize(t, 2).unwrap();
        let flat = tape.reshape(t, vec![g.b * c * g.w, D]).unwrap();
        let eos: Vec<usize> = (0..g.b * c)
            .map(|j| {
                let orig = (j / c) * c + perm[j % c];
                j * g.w + if orig % 2 == 0 { 2 } else { 1 }
            })
            .collect();
        let tg = tape.index_select(flat, &eos).unwrap();
        let tg = tape.l2_normalize(tg, 1).unwrap();
        let batch = EncodedBatch {
            images: ImageEmbeddings { patches, global },
            texts: TextEmbeddings {
                tokens,
                global: tg,
                mask: g.mask.clone(),
                len: g.w,
            },
            hn_valid: g.hn_valid.clone(),
        };
        let s = scale(&mut tape, 5.0);
        let cfg = LossConfig::default();
        let out = total_loss(&mut tape, &batch, &cfg, s).unwrap();
        out.breakdown(&tape, &cfg)
    }

    #[test]
    fn losses_pass_grad_check() {
        let f = fixture(9, vec![vec![true, false, true], vec![true, true, true]]);
        let c = 4;
        for mode in [NormMode::Minmax, NormMode::MinmaxSparse, NormMode::Softmax] {
            let cfg = LossConfig {
                norm_mode: mode,
                ..LossConfig::default()
            };
            let x = Tensor::new(vec![f.b, P, D], f.v.clone()).unwrap();
            let r = grad_check(
                |tape: &mut T64, v| -> Result<Var> {
                    let t = c_owned(tape, vec![f.b * c, f.w, D], f.t.clone());
                    let batch = build(tape, &f, v, t);
                    let s = scale(tape, 5.0);
                    Ok(total_loss(tape, &batch, &cfg, s)?.total)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-4, "{mode:?} V: {}", r.max_relative_error);
            let x = Tensor::new(vec![f.b * c, f.w, D], f.t.clone()).unwrap();
            let r = grad_check(
                |tape: &mut T64, t| -> Result<Var> {
                    let v = c_owned(tape, vec![f.b, P, D], f.v.clone());
                    let batch = build(tape, &f, v, t);
                    let s = scale(tape, 5.0);
                    Ok(total_loss(tape, &batch, &cfg, s)?.total)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-4, "{mode:?} T: {}", r.max_relative_error);
            let x = Tensor::new(vec![], vec![1.6]).unwrap();
            let r = grad_check(
                |tape: &mut T64, ls| -> Result<Var> {
                    let v = c_owned(tape, vec![f.b, P, D], f.v.clone());
                    let t = c_owned(tape, vec![f.b * c, f.w, D], f.t.clone());
                    let batch = build(tape, &f, v, t);
                    let e = tape.exp(ls)?;
                    let s = tape.clamp(e, 1.0, 100.0)?;
                    Ok(total_loss(tape, &batch, &cfg, s)?.total)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-4, "{mode:?} tau: {}", r.max_relative_error);
        }
    }

    #[test]
    fn config_validation() {
        LossConfig::default().validate().unwrap();
        assert!(LossConfig { beta: 1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda_g: -0.1, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { gamma: f64::NAN, ..LossConfig::default() }.validate().is_err());
        let json = serde_json::to_string(&LossConfig::default()).unwrap();
        assert!(json.contains(r#""norm_mode":"minmax""#));
    }
}
