use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textgen::{tokenize, Lexicon};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;

/// A fixed-width token sequence. `pad_mask[i]` is true for real tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    pub token_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl TextInput {
    /// Checks the BOS..EOS then padding layout and returns the EOS position.
    pub fn validate(&self, vocab_size: usize) -> Result<usize> {
        if self.token_ids.len() != self.pad_mask.len() {
            return Err(Error::InvalidInput("token ids and pad mask differ in length".into()));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} >= vocab size {vocab_size}")));
        }
        let eos_id = vocab_size - 1;
        let mut eos = self.token_ids.iter().enumerate().filter(|(_, &t)| t == eos_id).map(|(i, _)| i);
        let at = eos.next().ok_or(Error::MissingEos)?;
        if eos.next().is_some() {
            return Err(Error::InvalidInput("more than one EOS token".into()));
        }
        let layout_ok = self
            .pad_mask
            .iter()
            .enumerate()
            .all(|(i, &real)| real == (i <= at));
        let pads_ok = self.token_ids[at + 1..].iter().all(|&id| id == PAD_ID);
        if !layout_ok || !pads_ok {
            return Err(Error::InvalidInput("padding must follow EOS".into()));
        }
        Ok(at)
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

/// Word-level tokenizer over the lexicon: PAD=0, BOS=1, words from 2 in file
/// order, EOS last so that it carries the largest id.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    lexicon: Lexicon,
    w_max: usize,
}

impl Tokenizer {
    pub fn new(lexicon: Lexicon, w_max: usize) -> Self {
        Self { lexicon, w_max }
    }

    pub fn vocab_size(&self) -> usize {
        self.lexicon.len() + 3
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size() - 1
    }

    pub fn w_max(&self) -> usize {
        self.w_max
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn encode(&self, caption: &str) -> Result<TextInput> {
        let words = tokenize(caption);
        let needed = words.len() + 2;
        if needed > self.w_max {
            return Err(Error::CaptionTooLong {
                needed,
                max: self.w_max,
            });
        }
        let mut token_ids = Vec::with_capacity(self.w_max);
        token_ids.push(BOS_ID);
        for w in &words {
            let i = self.lexicon.word_index(w).ok_or_else(|| Error::UnknownWord(w.clone()))?;
            token_ids.push(i + 2);
        }
        token_ids.push(self.eos_id());
        token_ids.resize(self.w_max, PAD_ID);
        let pad_mask = (0..self.w_max).map(|i| i < needed).collect();
        Ok(TextInput { token_ids, pad_mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(w_max: usize) -> Tokenizer {
        Tokenizer::new(Lexicon::shipped(), w_max)
    }

    #[test]
    fn encodes_with_bos_eos_and_padding() {
        let t = tok(12);
        let x = t.encode("a red circle").unwrap();
        assert_eq!(x.real_len(), 5);
        assert_eq!(x.token_ids.len(), 12);
        assert_eq!(x.token_ids[0], BOS_ID);
        assert_eq!(x.token_ids[4], t.eos_id());
        assert_eq!(x.validate(t.vocab_size()).unwrap(), 4);
        assert!(x.token_ids[1..4].iter().all(|&i| i > BOS_ID && i < t.eos_id()));
    }

    #[test]
    fn rejects_long_and_unknown_captions() {
        let t = tok(4);
        assert!(matches!(t.encode("a red circle"), Err(Error::CaptionTooLong { needed: 5, max: 4 })));
        assert!(matches!(tok(8).encode("a mauve circle"), Err(Error::UnknownWord(_))));
    }

    #[test]
    fn validation_catches_layout_errors() {
        let t = tok(8);
        let mut x = t.encode("a red circle").unwrap();
        x.token_ids[4] = PAD_ID;
        x.pad_mask[4] = false;
        x.pad_mask[3] = true;
        assert!(matches!(x.validate(t.vocab_size()), Err(Error::MissingEos)));
        let mut y = t.encode("a red circle").unwrap();
        y.pad_mask[6] = true;
        assert!(y.validate(t.vocab_size()).is_err());
        let mut z = t.encode("a red circle").unwrap();
        z.token_ids[5] = t.eos_id();
        assert!(z.validate(t.vocab_size()).is_err());
    }
}
