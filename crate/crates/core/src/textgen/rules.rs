//! The three rule-based rewrites. Each returns `None` when it cannot produce a
//! caption that differs from the input.

use rand::seq::SliceRandom;
use rand::Rng;

use super::lexicon::{Lexicon, Pos, TaggedCaption};

/// Classes whose members may trade places.
const SWAPPABLE: [Pos; 3] = [Pos::Noun, Pos::Adj, Pos::Verb];

/// Swaps two differing tokens of one POS class.
///
/// The class is drawn uniformly among those with at least two distinct
/// tokens, then the position pair uniformly among pairs holding different
/// tokens.
pub fn negclip_swap<R: Rng + ?Sized>(tc: &TaggedCaption, rng: &mut R) -> Option<Vec<String>> {
    let mut classes = Vec::new();
    for pos in SWAPPABLE {
        let pairs: Vec<(usize, usize)> = (0..tc.len())
            .filter(|&i| tc.tags[i] == pos)
            .flat_map(|i| ((i + 1)..tc.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| tc.tags[j] == pos && tc.tokens[i] != tc.tokens[j])
            .collect();
        if !pairs.is_empty() {
            classes.push(pairs);
        }
    }
    if classes.is_empty() {
        return None;
    }
    let pairs = &classes[rng.random_range(0..classes.len())];
    let (i, j) = pairs[rng.random_range(0..pairs.len())];
    let mut out = tc.tokens.clone();
    out.swap(i, j);
    Some(out)
}

/// Replaces one ADJ by an antonym or one NOUN by a co-hyponym.
pub fn lexicon_replace<R: Rng + ?Sized>(tc: &TaggedCaption, lexicon: &Lexicon, rng: &mut R) -> Option<Vec<String>> {
    let candidates: Vec<usize> = (0..tc.len())
        .filter(|&i| matches!(tc.tags[i], Pos::Adj | Pos::Noun))
        .filter(|&i| lexicon.alternatives(&tc.tokens[i]).iter().any(|a| *a != tc.tokens[i]))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let at = candidates[rng.random_range(0..candidates.len())];
    let alts: Vec<&String> = lexicon
        .alternatives(&tc.tokens[at])
        .iter()
        .filter(|a| **a != tc.tokens[at])
        .collect();
    let mut out = tc.tokens.clone();
    out[at] = alts[rng.random_range(0..alts.len())].clone();
    Some(out)
}

const SHUFFLE_TRIES: usize = 64;
const EXHAUSTIVE_BLOCKS: usize = 8;

/// Reorders adjacent token pairs (a trailing odd token is its own block).
///
/// The permutation is uniform among those whose output differs from the
/// input: rejection sampling first, exhaustive enumeration as a fallback.
pub fn bigram_shuffle<R: Rng + ?Sized>(tc: &TaggedCaption, rng: &mut R) -> Option<Vec<String>> {
    if tc.len() < 4 {
        return None;
    }
    let blocks: Vec<&[String]> = tc.tokens.chunks(2).collect();
    let assemble = |order: &[usize]| -> Vec<String> { order.iter().flat_map(|&b| blocks[b].iter().cloned()).collect() };
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    for _ in 0..SHUFFLE_TRIES {
        order.shuffle(rng);
        let out = assemble(&order);
        if out != tc.tokens {
            return Some(out);
        }
    }
    if blocks.len() > EXHAUSTIVE_BLOCKS {
        return None;
    }
    let mut differing = Vec::new();
    let mut perm: Vec<usize> = (0..blocks.len()).collect();
    loop {
        let out = assemble(&perm);
        if out != tc.tokens {
            differing.push(out);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    if differing.is_empty() {
        return None;
    }
    let pick = rng.random_range(0..differing.len());
    Some(differing.swap_remove(pick))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
