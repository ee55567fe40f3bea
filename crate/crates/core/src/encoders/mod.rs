//! Tiny dual encoders: a patch transformer for images and a token transformer
//! for captions, both projecting into a shared `d`-dimensional space.
//!
//! Images pool by averaging patch rows; texts pool at the EOS position, which
//! holds the largest token id.

mod forward;
mod params;
mod tokenizer;

use fsc_tensor::Tape;

pub use forward::{
    encode_images, encode_texts, inverse_temperature, ImageEmbeddings, ImageInput, TextEmbeddings, MAX_SCALE, MIN_SCALE,
};
pub use params::{Bound, EncoderConfig, ParamKind, ParamStore, INIT_RANGE, INIT_TEMPERATURE};
pub use tokenizer::{TextInput, Tokenizer, BOS_ID, PAD_ID};

use crate::error::Result;

/// Unit global image vectors, one per input, computed without a gradient graph.
pub fn embed_images(cfg: &EncoderConfig, params: &ParamStore, images: &[&ImageInput]) -> Result<Vec<Vec<f32>>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let out = encode_images(&mut tape, cfg, &bound, images)?;
    Ok(tape.value(out.global).chunks(cfg.d).map(<[f32]>::to_vec).collect())
}

/// Unit global text vectors, one per input, computed without a gradient graph.
pub fn embed_texts(cfg: &EncoderConfig, params: &ParamStore, texts: &[&TextInput]) -> Result<Vec<Vec<f32>>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let out = encode_texts(&mut tape, cfg, &bound, texts)?;
    Ok(tape.value(out.global).chunks(cfg.d).map(<[f32]>::to_vec).collect())
}

/// The clamped inverse temperature stored in `params`.
pub fn inverse_temperature_value(params: &ParamStore) -> f64 {
    let ls = params.get("logit_scale").map(|t| f64::from(t.data()[0])).unwrap_or(0.0);
    ls.exp().clamp(MIN_SCALE, MAX_SCALE)
}
