//! Online hard-negative caption generation.
//!
//! Every training step each caption gets [`NUM_NEGATIVES`] rewrites in a fixed
//! slot order: negclip-style swap, lexicon replacement, bi-gram shuffle. A slot
//! whose rule cannot produce a different caption keeps the original text and
//! is marked invalid.

mod lexicon;
mod rules;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use lexicon::{tokenize, Lexicon, Pos, TaggedCaption};
pub use rules::{bigram_shuffle, lexicon_replace, negclip_swap};

pub const NUM_NEGATIVES: usize = 3;

/// Slot names in order.
pub const SLOT_NAMES: [&str; NUM_NEGATIVES] = ["negclip", "replace", "bigram"];

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `h = mix64(global + φ)`, then `h = mix64(h ^ (x + φ))` for item, step, slot.
pub fn sub_seed(global_seed: u64, item_id: u64, step: u64, slot: u64) -> u64 {
    let mut h = mix64(global_seed.wrapping_add(GOLDEN));
    for x in [item_id, step, slot] {
        h = mix64(h ^ x.wrapping_add(GOLDEN));
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardNegativeSet {
    pub caption: String,
    pub negatives: Vec<String>,
    pub valid: Vec<bool>,
}

impl HardNegativeSet {
    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// Original followed by the negatives.
    pub fn candidates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.caption.as_str()).chain(self.negatives.iter().map(String::as_str))
    }
}

/// Identifies one application of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativeSeed {
    pub global_seed: u64,
    pub item_id: u64,
    pub step: u64,
}

pub fn generate_set(caption: &str, lexicon: &Lexicon, seed: NegativeSeed) -> Result<HardNegativeSet> {
    let tc = lexicon.tag(caption)?;
    let original = tc.text();
    let rng = |slot: u64| ChaCha8Rng::seed_from_u64(sub_seed(seed.global_seed, seed.item_id, seed.step, slot));
    let outputs = [
        negclip_swap(&tc, &mut rng(0)),
        lexicon_replace(&tc, lexicon, &mut rng(1)),
        bigram_shuffle(&tc, &mut rng(2)),
    ];
    let mut negatives = Vec::with_capacity(NUM_NEGATIVES);
    let mut valid = Vec::with_capacity(NUM_NEGATIVES);
    for out in outputs {
        match out {
            Some(tokens) if tokens != tc.tokens => {
                negatives.push(tokens.join(" "));
                valid.push(true);
            }
            _ => {
                negatives.push(original.clone());
                valid.push(false);
            }
        }
    }
    Ok(HardNegativeSet {
        caption: original,
        negatives,
        valid,
    })
}
