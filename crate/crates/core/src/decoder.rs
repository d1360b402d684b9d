//! Decoder-only language model: frozen token embeddings and self-attention
//! stack with rotary positions, LoRA adapters on the attention projections,
//! and an optional cross-attention variant that treats audio as an external
//! encoder memory instead of inline tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, build_mask, mha_forward, AttentionConfig, AttnInputs, LoraConfig, MaskScheme, Runtime,
};
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab_size: crate::corpus::tokenizer::vocab_size(),
            model_dim: 128,
            num_layers: 4,
            num_heads: 4,
            rope_base: 10000.0,
        }
    }
}

impl DecoderConfig {
    pub fn ff_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            rope_base: self.rope_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.vocab_size == 0 || self.num_layers == 0 {
            return Err(Error::Config("decoder needs vocab and layers".into()));
        }
        Ok(())
    }
}

/// Register the base decoder parameters (trainable until frozen after base
/// pretraining). Adapters and cross-attention are added separately.
pub fn init_decoder_base<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    cfg: &DecoderConfig,
) {
    let d = cfg.model_dim;
    store.insert(
        "decoder.embed.table",
        vec![cfg.vocab_size, d],
        nn::gaussian(rng, cfg.vocab_size * d, 0.02),
        true,
    );
    for i in 0..cfg.num_layers {
        let p = format!("decoder.layer{i}");
        nn::init_rmsnorm(store, &format!("{p}.attn_norm"), d, true);
        nn::init_mha(store, rng, &format!("{p}.attn"), d, false, true, None);
        nn::init_rmsnorm(store, &format!("{p}.ffn_norm"), d, true);
        nn::init_linear(store, rng, &format!("{p}.ffn.w1"), d, cfg.ff_dim(), false, true);
        nn::init_linear(store, rng, &format!("{p}.ffn.w2"), cfg.ff_dim(), d, false, true);
    }
    nn::init_rmsnorm(store, "decoder.final_norm", d, true);
    nn::init_linear(store, rng, "decoder.head", d, cfg.vocab_size, false, true);
}

/// Add trainable LoRA factors to the targeted attention projections of every
/// layer. B starts at zero, so outputs equal the frozen base until updated.
pub fn attach_lora<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    cfg: &DecoderConfig,
    lora: &LoraConfig,
) -> Result<()> {
    lora.validate()?;
    let d = cfg.model_dim;
    for i in 0..cfg.num_layers {
        for (proj, tag) in [
            (nn::Proj::Q, "q"),
            (nn::Proj::K, "k"),
            (nn::Proj::V, "v"),
            (nn::Proj::O, "o"),
        ] {
            if lora.targets(proj) {
                nn::init_lora(
                    store,
                    rng,
                    &format!("decoder.layer{i}.attn.{tag}"),
                    d,
                    d,
                    lora.rank,
                );
            }
        }
    }
    Ok(())
}

/// Add the trainable cross-attention sub-layer parameters for the
/// encoder-decoder variant.
pub fn attach_cross_attention<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    cfg: &DecoderConfig,
) {
    let d = cfg.model_dim;
    for i in 0..cfg.num_layers {
        let p = format!("decoder.layer{i}");
        nn::init_rmsnorm(store, &format!("{p}.cross_norm"), d, true);
        nn::init_mha(store, rng, &format!("{p}.cross"), d, false, true, None);
    }
}

fn rmsnorm<S: Scalar>(rt: &mut Runtime<S>, name: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
    let gamma = rt.p(&format!("{name}.gamma"));
    Ok(x.rmsnorm(&gamma)?)
}

/// Logits per position. Self-attention is masked per `scheme`; the variant's
/// cross-attention attends over all encoder positions unmasked.
pub fn decoder_forward<S: Scalar>(
    rt: &mut Runtime<S>,
    cfg: &DecoderConfig,
    variant: Variant,
    lora: Option<&LoraConfig>,
    input_embeddings: &Tensor<S>,
    scheme: MaskScheme,
    encoder_out: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    match (variant, encoder_out) {
        (Variant::DecoderOnly, Some(_)) => {
            return Err(Error::Config(
                "decoder_only variant takes no encoder output".into(),
            ))
        }
        (Variant::EncoderDecoder, None) => {
            return Err(Error::Config(
                "encoder_decoder variant requires encoder output".into(),
            ))
        }
        (Variant::EncoderDecoder, Some(enc)) if enc.shape()[0] == 0 => {
            return Err(Error::Config("encoder output of length 0".into()))
        }
        _ => {}
    }
    let n = input_embeddings.shape()[0];
    let mask = build_mask(scheme, n)?;
    let positions: Vec<usize> = (0..n).collect();
    let attn = cfg.attention();

    let mut h = input_embeddings.clone();
    for i in 0..cfg.num_layers {
        let p = format!("decoder.layer{i}");
        let normed = rmsnorm(rt, &format!("{p}.attn_norm"), &h)?;
        let self_attn = mha_forward(
            rt,
            &format!("{p}.attn"),
            &attn,
            AttnInputs {
                x: &normed,
                mask: Some(&mask),
                kv_source: None,
                positions: Some(&positions),
                lora,
            },
        )?;
        h = h.add(&self_attn)?;

        if variant == Variant::EncoderDecoder {
            let normed = rmsnorm(rt, &format!("{p}.cross_norm"), &h)?;
            let cross = mha_forward(
                rt,
                &format!("{p}.cross"),
                &attn,
                AttnInputs {
                    x: &normed,
                    mask: None,
                    kv_source: encoder_out,
                    positions: None,
                    lora: None,
                },
            )?;
            h = h.add(&cross)?;
        }

        let normed = rmsnorm(rt, &format!("{p}.ffn_norm"), &h)?;
        let ff = nn::linear(rt, &format!("{p}.ffn.w1"), &normed)?.silu()?;
        let ff = nn::linear(rt, &format!("{p}.ffn.w2"), &ff)?;
        h = h.add(&ff)?;
    }
    let h = rmsnorm(rt, "decoder.final_norm", &h)?;
    nn::linear(rt, "decoder.head", &h)
}

/// Next-token LM loss over a token sequence (base pretraining): causal mask,
/// every position's successor is a target.
pub fn lm_loss<S: Scalar>(
    rt: &mut Runtime<S>,
    cfg: &DecoderConfig,
    token_ids: &[usize],
) -> Result<Tensor<S>> {
    if token_ids.len() < 2 {
        return Err(Error::Data("lm sequence needs at least 2 tokens".into()));
    }
    let table = rt.p("decoder.embed.table");
    let emb = Tensor::embedding_lookup(&table, token_ids)?;
    let logits = decoder_forward(rt, cfg, Variant::DecoderOnly, None, &emb, MaskScheme::Causal, None)?;
    let n = token_ids.len();
    let targets: Vec<usize> = (0..n).map(|i| if i + 1 < n { token_ids[i + 1] } else { 0 }).collect();
    let include: Vec<bool> = (0..n).map(|i| i + 1 < n).collect();
    Ok(logits.log_softmax_lastdim()?.masked_nll(&targets, &include)?)
}

/// Deterministic greedy decoding: append the argmax token's embedding until
/// eos or the cap. Returns generated ids (eos excluded).
#[allow(clippy::too_many_arguments)]
pub fn greedy_generate<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &DecoderConfig,
    variant: Variant,
    lora: Option<&LoraConfig>,
    prompt_embeddings: &Tensor<S>,
    scheme: MaskScheme,
    encoder_out: Option<&Tensor<S>>,
    eos_id: usize,
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    if max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be >= 1".into()));
    }
    let mut emb = prompt_embeddings.clone();
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let mut rt = Runtime::new(store, crate::tensor::Mode::Eval, 0);
        let logits = decoder_forward(&mut rt, cfg, variant, lora, &emb, scheme, encoder_out)?;
        let v = cfg.vocab_size;
        let data = logits.to_vec();
        let last = &data[(logits.shape()[0] - 1) * v..];
        let mut best = 0usize;
        for k in 1..v {
            if last[k] > last[best] {
                best = k;
            }
        }
        if best == eos_id {
            break;
        }
        out.push(best);
        let table = rt.p("decoder.embed.table");
        let next = Tensor::embedding_lookup(&table, &[best])?;
        emb = Tensor::concat(&[&emb, &next], 0)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::Mode;

    fn toy_cfg() -> DecoderConfig {
        DecoderConfig {
            vocab_size: 11,
            model_dim: 16,
            num_layers: 2,
            num_heads: 2,
            rope_base: 10000.0,
        }
    }

    fn toy_store(cfg: &DecoderConfig) -> ParamStore<f32> {
        let mut rng = rng_for(77, &[0]);
        let mut store = ParamStore::new();
        init_decoder_base(&mut store, &mut rng, cfg);
        store
    }

    #[test]
    fn causal_leakage_free() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let mut rng = rng_for(1, &[1]);
        let base = nn::gaussian::<f32>(&mut rng, 5 * cfg.model_dim, 1.0);
        let mut poked = base.clone();
        for v in &mut poked[4 * cfg.model_dim..] {
            *v += 1.0;
        }
        let run = |data: Vec<f32>| {
            let emb = Tensor::from_vec(vec![5, cfg.model_dim], data);
            let mut rt = Runtime::new(&store, Mode::Eval, 0);
            decoder_forward(&mut rt, &cfg, Variant::DecoderOnly, None, &emb, MaskScheme::Causal, None)
                .unwrap()
                .to_vec()
        };
        let a = run(base);
        let b = run(poked);
        for i in 0..4 * cfg.vocab_size {
            assert!((a[i] - b[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn variant_argument_contract() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let emb = Tensor::<f32>::zeros(vec![2, cfg.model_dim]);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let enc = Tensor::<f32>::zeros(vec![3, cfg.model_dim]);
        assert!(decoder_forward(
            &mut rt,
            &cfg,
            Variant::DecoderOnly,
            None,
            &emb,
            MaskScheme::Causal,
            Some(&enc)
        )
        .is_err());
        assert!(decoder_forward(
            &mut rt,
            &cfg,
            Variant::EncoderDecoder,
            None,
            &emb,
            MaskScheme::Causal,
            None
        )
        .is_err());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let mut rng = rng_for(2, &[2]);
        let prompt = Tensor::from_vec(vec![3, cfg.model_dim], nn::gaussian(&mut rng, 48, 0.5));
        let a = greedy_generate(&store, &cfg, Variant::DecoderOnly, None, &prompt, MaskScheme::Causal, None, 2, 8)
            .unwrap();
        let b = greedy_generate(&store, &cfg, Variant::DecoderOnly, None, &prompt, MaskScheme::Causal, None, 2, 8)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eos_only_head_generates_nothing() {
        let cfg = toy_cfg();
        let mut store = toy_store(&cfg);
        // Bias the head so eos (id 2) always wins.
        store.update("decoder.head.w", |d| {
            for (i, v) in d.iter_mut().enumerate() {
                *v = if i % 11 == 2 { 5.0 } else { -5.0 };
            }
        });
        let prompt = Tensor::from_vec(vec![2, cfg.model_dim], vec![0.1; 32]);
        let out = greedy_generate(&store, &cfg, Variant::DecoderOnly, None, &prompt, MaskScheme::Causal, None, 2, 8)
            .unwrap();
        assert!(out.is_empty());
    }
}
