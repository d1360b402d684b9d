//! Attention mask construction.
//!
//! Two schemes: plain causal, and prefix-LM masking where the context+audio
//! prefix is fully inter-visible while transcription positions stay causal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AttnMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskScheme {
    Causal,
    /// Positions `0..prefix_len` may attend anywhere within the prefix;
    /// later positions are causal.
    PrefixFull { prefix_len: usize },
}

impl MaskScheme {
    /// Same scheme with the prefix length taken from a prompt.
    pub fn with_prefix(self, prefix_len: usize) -> MaskScheme {
        match self {
            MaskScheme::Causal => MaskScheme::Causal,
            MaskScheme::PrefixFull { .. } => MaskScheme::PrefixFull { prefix_len },
        }
    }
}

/// Build the boolean mask for a scheme; `true` means "may attend".
pub fn build_mask(scheme: MaskScheme, seq_len: usize) -> Result<AttnMask> {
    if seq_len == 0 {
        return Err(Error::Config("mask needs seq_len >= 1".into()));
    }
    let mut allowed = vec![false; seq_len * seq_len];
    match scheme {
        MaskScheme::Causal => {
            for i in 0..seq_len {
                for j in 0..=i {
                    allowed[i * seq_len + j] = true;
                }
            }
        }
        MaskScheme::PrefixFull { prefix_len } => {
            if prefix_len > seq_len {
                return Err(Error::Config(format!(
                    "prefix_len {prefix_len} exceeds seq_len {seq_len}"
                )));
            }
            for i in 0..seq_len {
                for j in 0..=i {
                    allowed[i * seq_len + j] = true;
                }
                if i < prefix_len {
                    for j in 0..prefix_len {
                        allowed[i * seq_len + j] = true;
                    }
                }
            }
        }
    }
    Ok(AttnMask::new(seq_len, seq_len, allowed))
}
