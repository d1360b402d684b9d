//! Synthetic audio feature oracle.
//!
//! Every tokenizer character owns a fixed Gaussian prototype vector derived
//! from the lexicon seed. A transcript is rendered by walking the prototype
//! spelling of each word (spaces included), emitting each character's
//! prototype for 2-4 frames with small Gaussian jitter. Homophone pair
//! members share a prototype spelling, so their clean audio is identical
//! frame for frame given equal frame seeds.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lexicon::Lexicon;
use super::tokenizer;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

pub const FRAME_SHIFT_MS: u32 = 10;
pub const JITTER_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioFeatures {
    /// `[T][feat_dim]` frames.
    pub frames: Vec<Vec<f32>>,
    pub frame_shift_ms: u32,
}

impl AudioFeatures {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.first().map(|f| f.len()).unwrap_or(0)
    }

    pub fn flat(&self) -> Vec<f32> {
        self.frames.iter().flatten().copied().collect()
    }
}

/// Fixed prototype vector for one tokenizer symbol.
pub fn prototype_vector(proto_seed: u64, char_id: usize, feat_dim: usize) -> Vec<f32> {
    let mut rng = rng_for(proto_seed, &[tag("char-proto"), char_id as u64]);
    (0..feat_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect()
}

/// Render a transcript to features. The audible character stream is the
/// prototype spelling of each word joined by spaces, so the frame count lies
/// in `[2*chars, 4*chars]` of the transcript (respellings preserve length).
pub fn features_for(
    transcript: &str,
    lexicon: &Lexicon,
    feat_dim: usize,
    seed: u64,
) -> Result<AudioFeatures> {
    if transcript.trim().is_empty() {
        return Err(Error::Data("empty transcript has no features".into()));
    }
    let mut audible = String::new();
    for (i, word) in transcript.split_whitespace().enumerate() {
        if i > 0 {
            audible.push(' ');
        }
        audible.push_str(lexicon.prototype_spelling(word)?);
    }

    let mut rng = rng_for(seed, &[tag("features")]);
    let mut frames = Vec::new();
    for ch in audible.chars() {
        let ids = tokenizer::tokenize(&ch.to_string());
        let id = *ids
            .first()
            .ok_or_else(|| Error::Data(format!("untokenizable character '{ch}'")))?;
        let proto = prototype_vector(lexicon.proto_seed, id, feat_dim);
        let repeats = rng.gen_range(2..=4);
        for _ in 0..repeats {
            let frame: Vec<f32> = proto
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + (z * JITTER_SIGMA) as f32
                })
                .collect();
            frames.push(frame);
        }
    }
    Ok(AudioFeatures {
        frames,
        frame_shift_ms: FRAME_SHIFT_MS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::lexicon::build_lexicon;

    #[test]
    fn homophone_pair_features_are_identical() {
        let lex = build_lexicon(21, 200, 0.2).unwrap();
        let pair = &lex.homophone_pairs[0];
        let a = features_for(&pair.word_a, &lex, 16, 99).unwrap();
        let b = features_for(&pair.word_b, &lex, 16, 99).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn frame_count_bounds() {
        let lex = build_lexicon(21, 200, 0.2).unwrap();
        let transcript = format!("{} {}", lex.words[0], lex.words[1]);
        let chars = transcript.chars().count();
        let f = features_for(&transcript, &lex, 16, 7).unwrap();
        assert!(f.len() >= 2 * chars && f.len() <= 4 * chars);
    }

    #[test]
    fn empty_transcript_errors() {
        let lex = build_lexicon(21, 200, 0.2).unwrap();
        assert!(features_for("  ", &lex, 16, 0).is_err());
    }

    #[test]
    fn oov_word_errors() {
        let lex = build_lexicon(21, 200, 0.2).unwrap();
        assert!(features_for("qqqqqq", &lex, 16, 0).is_err());
    }
}
