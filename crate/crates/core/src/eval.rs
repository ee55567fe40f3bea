//! Compositional selection, group accuracy, zero-shot accuracy and retrieval.
//!
//! Metric functions take plain score tables so they can be checked against
//! hand-built scorers; [`Evaluator`] produces those tables from a checkpoint.

use std::collections::HashSet;
use std::fmt::Write as _;

use fsc_tensor::Tape;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_images, encode_texts, inverse_temperature_value, ImageInput, TextInput, Tokenizer};
use crate::error::{Error, Result};
use crate::objective::{log_local_similarity, NormMode};
use crate::synth::{render, zs_classes, zs_prompt, EvalSuites, SynthConfig};
use crate::trainer::Checkpoint;

const CHUNK: usize = 64;

/// Accuracy over items whose first score must beat every other strictly.
pub fn comp_i2t_accuracy(items: &[Vec<f64>]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptySuite);
    }
    let mut hits = 0usize;
    for scores in items {
        if scores.len() < 2 {
            return Err(Error::InvalidInput("a selection item needs at least two captions".into()));
        }
        hits += usize::from(scores[1..].iter().all(|&s| scores[0] > s));
    }
    Ok(hits as f64 / items.len() as f64)
}

/// `s[i][j]` scores image `i` against caption `j`; correct means all four
/// directed choices pick the matching partner strictly.
pub fn group_accuracy(items: &[[[f64; 2]; 2]]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptySuite);
    }
    let hits = items
        .iter()
        .filter(|s| s[0][0] > s[0][1] && s[1][1] > s[1][0] && s[0][0] > s[1][0] && s[1][1] > s[0][1])
        .count();
    Ok(hits as f64 / items.len() as f64)
}

/// Accuracy of a strict argmax over class scores.
pub fn zs_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptySuite);
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("one label per item is required".into()));
    }
    let mut hits = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        let target = *row
            .get(label)
            .ok_or_else(|| Error::InvalidInput(format!("label {label} outside {} classes", row.len())))?;
        hits += usize::from(row.iter().enumerate().all(|(c, &s)| c == label || target > s));
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Fraction of rows whose diagonal entry ranks within the top `k`.
///
/// Equal scores are ordered by column index.
pub fn recall_at_k(sim: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = sim.len();
    if n == 0 {
        return Err(Error::EmptySuite);
    }
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut hits = 0usize;
    for (q, row) in sim.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidInput("similarity matrix must be square".into()));
        }
        let target = row[q];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > target || (s == target && c < q))
            .count();
        hits += usize::from(rank < k);
    }
    Ok(hits as f64 / n as f64)
}

pub fn transpose(sim: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = sim.first().map_or(0, Vec::len);
    (0..cols).map(|j| sim.iter().map(|r| r[j]).collect()).collect()
}

/// Rejects prompt sets that name a class twice.
pub fn check_prompts(prompts: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in prompts {
        if !seen.insert(p.as_str()) {
            return Err(Error::DuplicateClass(p.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub comp_i2t_acc: f64,
    pub comp_group_acc: f64,
    pub zs_acc: f64,
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    /// Mean of the two compositional accuracies.
    pub comp: f64,
    pub zs: f64,
    pub i2t_ret: f64,
    pub t2i_ret: f64,
}

pub const REPORT_HEADER: &str = "comp_i2t_acc,comp_group_acc,zs_acc,i2t_r1,i2t_r5,t2i_r1,t2i_r5,comp,zs,i2t_ret,t2i_ret";

impl MetricReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(comp_i2t_acc: f64, comp_group_acc: f64, zs_acc: f64, i2t_r1: f64, i2t_r5: f64, t2i_r1: f64, t2i_r5: f64) -> Self {
        Self {
            comp_i2t_acc,
            comp_group_acc,
            zs_acc,
            i2t_r1,
            i2t_r5,
            t2i_r1,
            t2i_r5,
            comp: (comp_i2t_acc + comp_group_acc) / 2.0,
            zs: zs_acc,
            i2t_ret: i2t_r1,
            t2i_ret: t2i_r1,
        }
    }

    pub fn csv_row(&self) -> String {
        let v = [
            self.comp_i2t_acc,
            self.comp_group_acc,
            self.zs_acc,
            self.i2t_r1,
            self.i2t_r5,
            self.t2i_r1,
            self.t2i_r5,
            self.comp,
            self.zs,
            self.i2t_ret,
            self.t2i_ret,
        ];
        let mut out = String::new();
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{x}");
        }
        out
    }
}

/// Which similarity ranks the candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Global,
    /// Token-level similarity with the given attention normalization.
    Local(NormMode),
}

/// Encoded images: global rows `N×d` and patch rows `N×P×d`.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub global: Vec<f32>,
    pub patches: Vec<f32>,
}

/// Encoded texts: global rows and each text's real token rows.
#[derive(Clone, Debug)]
pub struct TextSet {
    pub global: Vec<f32>,
    pub tokens: Vec<Vec<f32>>,
}

/// Scores images against texts with a fixed checkpoint.
pub struct Evaluator<'a> {
    ckpt: &'a Checkpoint,
    tokenizer: &'a Tokenizer,
    synth: SynthConfig,
    similarity: Similarity,
    scale: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(ckpt: &'a Checkpoint, tokenizer: &'a Tokenizer, synth: &SynthConfig, similarity: Similarity) -> Result<Self> {
        if synth.grid != ckpt.encoder().grid {
            return Err(Error::Config(format!(
                "suite grid {} does not match encoder grid {}",
                synth.grid,
                ckpt.encoder().grid
            )));
        }
        Ok(Self {
            ckpt,
            tokenizer,
            synth: synth.clone(),
            similarity,
            scale: inverse_temperature_value(ckpt.params()),
        })
    }

    fn d(&self) -> usize {
        self.ckpt.encoder().d
    }

    pub fn embed_images(&self, images: &[ImageInput]) -> Result<ImageSet> {
        let cfg = self.ckpt.encoder();
        let parts = images
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<(Vec<f32>, Vec<f32>)> {
                let mut tape = Tape::<f32>::new();
                let bound = self.ckpt.params().bind(&mut tape, false);
                let refs: Vec<&ImageInput> = chunk.iter().collect();
                let e = encode_images(&mut tape, cfg, &bound, &refs)?;
                Ok((tape.value(e.global).to_vec(), tape.value(e.patches).to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = ImageSet {
            global: Vec::new(),
            patches: Vec::new(),
        };
        for (g, p) in parts {
            out.global.extend(g);
            out.patches.extend(p);
        }
        Ok(out)
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<TextSet> {
        let cfg = self.ckpt.encoder();
        let d = cfg.d;
        let inputs = texts.iter().map(|t| self.tokenizer.encode(t)).collect::<Result<Vec<TextInput>>>()?;
        let parts = inputs
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
                let mut tape = Tape::<f32>::new();
                let bound = self.ckpt.params().bind(&mut tape, false);
                let refs: Vec<&TextInput> = chunk.iter().collect();
                let e = encode_texts(&mut tape, cfg, &bound, &refs)?;
                let tok = tape.value(e.tokens);
                let rows = (0..chunk.len())
                    .map(|i| {
                        (0..e.len)
                            .filter(|&w| e.mask[i * e.len + w])
                            .flat_map(|w| tok[(i * e.len + w) * d..(i * e.len + w + 1) * d].iter().copied())
                            .collect()
                    })
                    .collect();
                Ok((tape.value(e.global).to_vec(), rows))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = TextSet {
            global: Vec::new(),
            tokens: Vec::new(),
        };
        for (g, t) in parts {
            out.global.extend(g);
            out.tokens.extend(t);
        }
        Ok(out)
    }

    /// Log-similarities for `(image, text)` index pairs.
    pub fn score_pairs(&self, images: &ImageSet, texts: &TextSet, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let d = self.d();
        match self.similarity {
            Similarity::Global => Ok(pairs
                .iter()
                .map(|&(i, j)| {
                    let v = &images.global[i * d..(i + 1) * d];
                    let t = &texts.global[j * d..(j + 1) * d];
                    self.scale * v.iter().zip(t).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>()
                })
                .collect()),
            Similarity::Local(mode) => {
                let p = self.ckpt.encoder().patches();
                let chunks = pairs
                    .par_chunks(256)
                    .map(|chunk| -> Result<Vec<f64>> {
                        let w = chunk.iter().map(|&(_, j)| texts.tokens[j].len() / d).max().unwrap_or(1);
                        let mut patch_data = Vec::with_capacity(chunk.len() * p * d);
                        let mut token_data = vec![0.0f64; chunk.len() * w * d];
                        let mut mask = vec![false; chunk.len() * w];
                        for (r, &(i, j)) in chunk.iter().enumerate() {
                            patch_data.extend(images.patches[i * p * d..(i + 1) * p * d].iter().map(|&x| f64::from(x)));
                            let toks = &texts.tokens[j];
                            for (k, &x) in toks.iter().enumerate() {
                                token_data[r * w * d + k] = f64::from(x);
                            }
                            mask[r * w..r * w + toks.len() / d].iter_mut().for_each(|m| *m = true);
                        }
                        let mut tape = Tape::<f64>::new();
                        let n = chunk.len();
                        let pv = tape.constant(vec![n, p, d], patch_data)?;
                        let tv = tape.constant(vec![n, w, d], token_data)?;
                        let s = tape.constant(vec![], vec![self.scale])?;
                        let l = log_local_similarity(&mut tape, pv, tv, &mask, s, mode)?;
                        Ok(tape.value(l).to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(chunks.into_iter().flatten().collect())
            }
        }
    }

    fn render_all(&self, scenes: impl Iterator<Item = (crate::synth::SceneSpec, u64)>) -> Result<Vec<ImageInput>> {
        let list: Vec<_> = scenes.collect();
        list.par_iter()
            .map(|(s, seed)| render(s, self.synth.grid, *seed, self.synth.sigma))
            .collect()
    }

    pub fn comp_i2t(&self, suites: &EvalSuites) -> Result<f64> {
        let items = &suites.comp_i2t;
        if items.is_empty() {
            return Err(Error::EmptySuite);
        }
        let imgs = self.embed_images(&self.render_all(items.iter().map(|x| (x.scene.clone(), x.noise_seed)))?)?;
        let texts: Vec<String> = items.iter().flat_map(|x| [x.caption.clone(), x.negative.clone()]).collect();
        let txt = self.embed_texts(&texts)?;
        let pairs: Vec<(usize, usize)> = (0..items.len()).flat_map(|i| [(i, 2 * i), (i, 2 * i + 1)]).collect();
        let s = self.score_pairs(&imgs, &txt, &pairs)?;
        comp_i2t_accuracy(&s.chunks(2).map(<[f64]>::to_vec).collect::<Vec<_>>())
    }

    pub fn group(&self, suites: &EvalSuites) -> Result<f64> {
        let items = &suites.comp_group;
        if items.is_empty() {
            return Err(Error::EmptySuite);
        }
        let scenes = items
            .iter()
            .flat_map(|x| (0..2).map(move |k| (x.scenes[k].clone(), x.noise_seeds[k])));
        let imgs = self.embed_images(&self.render_all(scenes)?)?;
        let texts: Vec<String> = items.iter().flat_map(|x| x.captions.clone()).collect();
        let txt = self.embed_texts(&texts)?;
        let pairs: Vec<(usize, usize)> = (0..items.len())
            .flat_map(|g| [(2 * g, 2 * g), (2 * g, 2 * g + 1), (2 * g + 1, 2 * g), (2 * g + 1, 2 * g + 1)])
            .collect();
        let s = self.score_pairs(&imgs, &txt, &pairs)?;
        let grid: Vec<[[f64; 2]; 2]> = s.chunks(4).map(|c| [[c[0], c[1]], [c[2], c[3]]]).collect();
        group_accuracy(&grid)
    }

    pub fn zero_shot(&self, suites: &EvalSuites) -> Result<f64> {
        let items = &suites.zs;
        if items.is_empty() {
            return Err(Error::EmptySuite);
        }
        let prompts: Vec<String> = zs_classes().into_iter().map(|(c, s)| zs_prompt(c, s)).collect();
        check_prompts(&prompts)?;
        let imgs = self.embed_images(&self.render_all(items.iter().map(|x| (x.scene.clone(), x.noise_seed)))?)?;
        let txt = self.embed_texts(&prompts)?;
        let c = prompts.len();
        let pairs: Vec<(usize, usize)> = (0..items.len()).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
        let s = self.score_pairs(&imgs, &txt, &pairs)?;
        let rows: Vec<Vec<f64>> = s.chunks(c).map(<[f64]>::to_vec).collect();
        let labels: Vec<usize> = items.iter().map(|x| x.label).collect();
        zs_accuracy(&rows, &labels)
    }

    /// Image-by-text log-similarity matrix of the retrieval suite.
    pub fn retrieval_matrix(&self, suites: &EvalSuites) -> Result<Vec<Vec<f64>>> {
        let items = &suites.retrieval;
        if items.is_empty() {
            return Err(Error::EmptySuite);
        }
        let n = items.len();
        let imgs = self.embed_images(&self.render_all(items.iter().map(|x| (x.scene.clone(), x.noise_seed)))?)?;
        let texts: Vec<String> = items.iter().map(|x| x.caption.clone()).collect();
        let txt = self.embed_texts(&texts)?;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let s = self.score_pairs(&imgs, &txt, &pairs)?;
        Ok(s.chunks(n).map(<[f64]>::to_vec).collect())
    }

    pub fn report(&self, suites: &EvalSuites) -> Result<MetricReport> {
        let sim = self.retrieval_matrix(suites)?;
        let sim_t = transpose(&sim);
        let k5 = 5.min(sim.len());
        Ok(MetricReport::new(
            self.comp_i2t(suites)?,
            self.group(suites)?,
            self.zero_shot(suites)?,
            recall_at_k(&sim, 1)?,
            recall_at_k(&sim, k5)?,
            recall_at_k(&sim_t, 1)?,
            recall_at_k(&sim_t, k5)?,
        ))
    }
}

/// Global-similarity report of `ckpt` on `suites`.
pub fn evaluate(ckpt: &Checkpoint, tokenizer: &Tokenizer, synth: &SynthConfig, suites: &EvalSuites) -> Result<MetricReport> {
    Evaluator::new(ckpt, tokenizer, synth, Similarity::Global)?.report(suites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, ParamStore};
    use crate::synth::make_eval_suites;
    use crate::textgen::Lexicon;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_examples() {
        assert_eq!(comp_i2t_accuracy(&vec![vec![f64::INFINITY, 0.0]; 4]).unwrap(), 1.0);
        assert_eq!(comp_i2t_accuracy(&vec![vec![1.0, 1.0]; 4]).unwrap(), 0.0);
        assert_eq!(comp_i2t_accuracy(&[vec![2.0, 1.0, 3.0], vec![2.0, 1.0, 0.0]]).unwrap(), 0.5);
        assert!(matches!(comp_i2t_accuracy(&[]), Err(Error::EmptySuite)));
    }

    #[test]
    fn group_examples() {
        assert_eq!(group_accuracy(&[[[1.0, 0.0], [0.0, 1.0]]; 3]).unwrap(), 1.0);
        assert_eq!(group_accuracy(&[[[0.5, 0.5], [0.5, 0.5]]; 3]).unwrap(), 0.0);
        assert_eq!(group_accuracy(&[[[1.0, 0.0], [2.0, 3.0]]]).unwrap(), 0.0);
        assert!(matches!(group_accuracy(&[]), Err(Error::EmptySuite)));
    }

    #[test]
    fn random_group_scores_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items: Vec<[[f64; 2]; 2]> = (0..500)
            .map(|_| [[rng.random(), rng.random()], [rng.random(), rng.random()]])
            .collect();
        let acc = group_accuracy(&items).unwrap();
        assert!((0.0..=0.30).contains(&acc), "{acc}");
    }

    #[test]
    fn zs_examples() {
        let scores: Vec<Vec<f64>> = (0..12).map(|i| (0..12).map(|c| if c == i { 1.0 } else { 0.0 }).collect()).collect();
        let labels: Vec<usize> = (0..12).collect();
        assert_eq!(zs_accuracy(&scores, &labels).unwrap(), 1.0);
        assert_eq!(zs_accuracy(&[vec![0.0; 12]], &[3]).unwrap(), 0.0);
        assert!(matches!(zs_accuracy(&[], &[]), Err(Error::EmptySuite)));
        let dup = vec!["a photo of a red circle".to_string(); 2];
        assert!(matches!(check_prompts(&dup), Err(Error::DuplicateClass(_))));
    }

    #[test]
    fn recall_examples() {
        let n = 5;
        let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        assert_eq!(recall_at_k(&eye, 1).unwrap(), 1.0);
        let flat = vec![vec![0.3; n]; n];
        assert_eq!(recall_at_k(&flat, 1).unwrap(), 1.0 / n as f64);
        assert_eq!(recall_at_k(&flat, 5).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&eye, 6), Err(Error::KTooLarge { k: 6, n: 5 })));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim: Vec<Vec<f64>> = (0..20).map(|_| (0..20).map(|_| rng.random()).collect()).collect();
        assert!(recall_at_k(&sim, 5).unwrap() >= recall_at_k(&sim, 1).unwrap());
    }

    #[test]
    fn metrics_ignore_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sim: Vec<Vec<f64>> = (0..12).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let warped: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|&x| (3.0 * x).exp() + 1.0).collect()).collect();
        let labels: Vec<usize> = (0..12).collect();
        for k in [1, 5] {
            assert_eq!(recall_at_k(&sim, k).unwrap(), recall_at_k(&warped, k).unwrap());
        }
        assert_eq!(zs_accuracy(&sim, &labels).unwrap(), zs_accuracy(&warped, &labels).unwrap());
        assert_eq!(comp_i2t_accuracy(&sim).unwrap(), comp_i2t_accuracy(&warped).unwrap());
    }

    #[test]
    fn report_meta_values_are_means() {
        let r = MetricReport::new(0.8, 0.4, 0.3, 0.5, 0.9, 0.6, 0.95);
        assert!((r.comp - 0.6).abs() < 1e-15);
        assert_eq!(r.i2t_ret, 0.5);
        assert_eq!(r.csv_row().split(',').count(), REPORT_HEADER.split(',').count());
    }

    #[test]
    fn evaluator_runs_on_small_suites() {
        let lex = Lexicon::shipped();
        let cfg = EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            vocab_size: lex.len() + 3,
            ..EncoderConfig::default()
        };
        let tok = Tokenizer::new(lex, cfg.w_max);
        let ckpt = Checkpoint::new(&cfg, ParamStore::init(&cfg, 3).unwrap(), 0, 3, 0).unwrap();
        let synth = SynthConfig::default();
        let suites = make_eval_suites(&synth, 12, 4).unwrap();
        let a = evaluate(&ckpt, &tok, &synth, &suites).unwrap();
        let b = evaluate(&ckpt, &tok, &synth, &suites).unwrap();
        assert_eq!(a, b);
        assert!(a.i2t_r5 >= a.i2t_r1 && a.t2i_r5 >= a.t2i_r1);
        let local = Evaluator::new(&ckpt, &tok, &synth, Similarity::Local(NormMode::Minmax))
            .unwrap()
            .report(&suites)
            .unwrap();
        for v in [local.comp_i2t_acc, local.comp_group_acc, local.zs_acc, local.i2t_r1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
