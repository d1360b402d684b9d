//! Speech encoder: four strided downsampling blocks (16x), a Conformer
//! stack, one final downsampling block (32x total) and a projection to the
//! decoder width, so the decoder observes one audio token per 320ms of
//! 10ms frames.
//!
//! For CTC pretraining the projected output feeds an upsampling head that
//! emits several label frames per audio token. At 32x reduction the token
//! rate falls below the character rate of the synthetic corpus, so without
//! upsampling nearly every target would be infeasible; the head is discarded
//! after pretraining, the encoder weights carry over.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AudioFeatures;
use crate::error::{Error, Result};
use crate::nn::{
    self, conformer_block, downsample_block, AttentionConfig, Runtime,
};
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub num_conformer_blocks: usize,
    pub conv_kernel: usize,
    pub pre_blocks: usize,
    pub post_blocks: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    /// Label frames emitted per encoder token by the CTC pretraining head.
    pub ctc_upsample: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feat_dim: 16,
            hidden_dim: 64,
            num_conformer_blocks: 2,
            conv_kernel: 9,
            pre_blocks: 4,
            post_blocks: 1,
            decoder_dim: 128,
            num_heads: 4,
            ctc_upsample: 16,
        }
    }
}

impl EncoderConfig {
    pub fn total_reduction(&self) -> usize {
        1 << (self.pre_blocks + self.post_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_reduction() != 32 {
            return Err(Error::Config(format!(
                "pre_blocks {} + post_blocks {} must give 32x reduction",
                self.pre_blocks, self.post_blocks
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.hidden_dim % self.num_heads != 0 || (self.hidden_dim / self.num_heads) % 2 != 0 {
            return Err(Error::Config("hidden_dim / num_heads must be even".into()));
        }
        if self.ctc_upsample == 0 {
            return Err(Error::Config("ctc_upsample must be >= 1".into()));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.hidden_dim,
            num_heads: self.num_heads,
            rope_base: 10000.0,
        }
    }

    /// Output length for an input of `t` frames: the ceil-halving chain.
    pub fn output_len(&self, t: usize) -> usize {
        let mut len = t;
        for _ in 0..self.pre_blocks + self.post_blocks {
            len = len.div_ceil(2);
        }
        len
    }
}

pub fn init_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderConfig,
    vocab_size: usize,
) {
    let mut c_in = cfg.feat_dim;
    for i in 0..cfg.pre_blocks {
        nn::init_downsample_block(store, rng, &format!("encoder.pre{i}"), c_in, cfg.hidden_dim);
        c_in = cfg.hidden_dim;
    }
    for i in 0..cfg.num_conformer_blocks {
        nn::init_conformer_block(
            store,
            rng,
            &format!("encoder.conf{i}"),
            cfg.hidden_dim,
            cfg.conv_kernel,
        );
    }
    for i in 0..cfg.post_blocks {
        nn::init_downsample_block(
            store,
            rng,
            &format!("encoder.post{i}"),
            cfg.hidden_dim,
            cfg.hidden_dim,
        );
    }
    nn::init_linear(store, rng, "encoder.proj", cfg.hidden_dim, cfg.decoder_dim, true, true);
    // CTC head: a small MLP fanning out to `ctc_upsample` label frames per
    // encoder token, over vocab + blank. One token must emit an ordered run
    // of character predictions, which a single linear struggles to demux.
    let head_hidden = 4 * cfg.decoder_dim;
    nn::init_linear(store, rng, "encoder.ctc_head.h", cfg.decoder_dim, head_hidden, true, true);
    nn::init_linear(
        store,
        rng,
        "encoder.ctc_head.out",
        head_hidden,
        cfg.ctc_upsample * (vocab_size + 1),
        true,
        true,
    );
}

/// Run the encoder; output shape is `[output_len(T), decoder_dim]`.
pub fn encode<S: Scalar>(
    rt: &mut Runtime<S>,
    cfg: &EncoderConfig,
    feats: &AudioFeatures,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if feats.is_empty() {
        return Err(Error::Data("empty audio features".into()));
    }
    if feats.feat_dim() != cfg.feat_dim {
        return Err(Error::Config(format!(
            "feature dim {} does not match encoder feat_dim {}",
            feats.feat_dim(),
            cfg.feat_dim
        )));
    }
    let t = feats.len();
    let data: Vec<S> = feats
        .frames
        .iter()
        .flatten()
        .map(|&v| S::from_f64_exact(v as f64))
        .collect();
    let mut x = Tensor::from_vec(vec![t, cfg.feat_dim], data);
    for i in 0..cfg.pre_blocks {
        x = downsample_block(rt, &format!("encoder.pre{i}"), &x)?;
    }
    let attn = cfg.attention();
    for i in 0..cfg.num_conformer_blocks {
        x = conformer_block(rt, &format!("encoder.conf{i}"), &x, &attn, cfg.conv_kernel)?;
    }
    for i in 0..cfg.post_blocks {
        x = downsample_block(rt, &format!("encoder.post{i}"), &x)?;
    }
    nn::linear(rt, "encoder.proj", &x)
}

/// Log-probabilities for CTC pretraining: `[output_len(T) * upsample, V+1]`.
pub fn ctc_log_probs<S: Scalar>(
    rt: &mut Runtime<S>,
    cfg: &EncoderConfig,
    encoded: &Tensor<S>,
    vocab_size: usize,
) -> Result<Tensor<S>> {
    let t = encoded.shape()[0];
    let v1 = vocab_size + 1;
    let hidden = nn::linear(rt, "encoder.ctc_head.h", encoded)?.silu()?;
    let logits = nn::linear(rt, "encoder.ctc_head.out", &hidden)?;
    let frames = logits.reshape(vec![t * cfg.ctc_upsample, v1])?;
    Ok(frames.log_softmax_lastdim()?)
}
