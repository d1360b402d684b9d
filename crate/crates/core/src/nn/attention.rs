//! Multi-head scaled dot-product attention with rotary embeddings, optional
//! LoRA on the q/k/v/o projections, and an optional external key/value source
//! for the cross-attention decoder variant.

use serde::{Deserialize, Serialize};

use super::{lora_linear, LoraConfig, Proj, Runtime};
use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

pub struct AttnInputs<'a, S: Scalar> {
    pub x: &'a Tensor<S>,
    /// Self-attention mask; must be absent for cross-attention, which is
    /// unmasked over the key/value source.
    pub mask: Option<&'a AttnMask>,
    pub kv_source: Option<&'a Tensor<S>>,
    /// Rotary positions for queries and keys; `None` disables rotation.
    pub positions: Option<&'a [usize]>,
    pub lora: Option<&'a LoraConfig>,
}

/// Standard attention: project, rotate, score per head with the mask applied
/// before the softmax, mix values, and project out.
pub fn mha_forward<S: Scalar>(
    rt: &mut Runtime<S>,
    prefix: &str,
    cfg: &AttentionConfig,
    inp: AttnInputs<S>,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if inp.kv_source.is_some() && inp.mask.is_some() {
        return Err(Error::Config(
            "cross-attention over an external source is unmasked; drop the mask".into(),
        ));
    }
    let t_q = inp.x.shape()[0];
    let kv = inp.kv_source.unwrap_or(inp.x);
    let t_k = kv.shape()[0];
    if let Some(m) = inp.mask {
        if m.rows != t_q || m.cols != t_k {
            return Err(Error::Tensor(crate::error::TensorError::ShapeMismatch {
                op: "mha_forward",
                detail: format!("mask [{},{}] vs scores [{t_q},{t_k}]", m.rows, m.cols),
            }));
        }
    }

    let pick = |p: Proj| inp.lora.filter(|l| l.targets(p));
    let mut q = lora_linear(rt, &format!("{prefix}.q"), inp.x, pick(Proj::Q))?;
    let mut k = lora_linear(rt, &format!("{prefix}.k"), kv, pick(Proj::K))?;
    let v = lora_linear(rt, &format!("{prefix}.v"), kv, pick(Proj::V))?;

    if let Some(pos) = inp.positions {
        q = q.rope(cfg.num_heads, cfg.rope_base, pos)?;
        let kpos: Vec<usize> = if inp.kv_source.is_some() {
            (0..t_k).collect()
        } else {
            pos.to_vec()
        };
        k = k.rope(cfg.num_heads, cfg.rope_base, &kpos)?;
    }

    let hd = cfg.head_dim();
    let scale = S::from_f64_exact(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = q.slice(1, h * hd, (h + 1) * hd)?;
        let kh = k.slice(1, h * hd, (h + 1) * hd)?;
        let vh = v.slice(1, h * hd, (h + 1) * hd)?;
        let scores = qh.matmul_nt(&kh)?.scale(scale)?;
        let probs = scores.softmax_lastdim(inp.mask)?;
        heads.push(probs.matmul(&vh)?);
    }
    let head_refs: Vec<&Tensor<S>> = heads.iter().collect();
    let mixed = Tensor::concat(&head_refs, 1)?;
    lora_linear(rt, &format!("{prefix}.o"), &mixed, pick(Proj::O))
}

/// Register q/k/v/o projection weights (and adapters when `lora` is given).
pub fn init_mha<S: Scalar>(
    store: &mut crate::tensor::ParamStore<S>,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    model_dim: usize,
    bias: bool,
    trainable: bool,
    lora: Option<&LoraConfig>,
) {
    for p in ["q", "k", "v", "o"] {
        super::init_linear(
            store,
            rng,
            &format!("{prefix}.{p}"),
            model_dim,
            model_dim,
            bias,
            trainable,
        );
    }
    if let Some(cfg) = lora {
        for (p, tag) in [(Proj::Q, "q"), (Proj::K, "k"), (Proj::V, "v"), (Proj::O, "o")] {
            if cfg.targets(p) {
                super::init_lora(store, rng, &format!("{prefix}.{tag}"), model_dim, model_dim, cfg.rank);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mask, gaussian, MaskScheme};
    use crate::tensor::{Mode, ParamStore};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_store(dim: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_mha(&mut store, &mut rng, "attn", dim, false, true, None);
        store
    }

    #[test]
    fn single_position_is_value_path() {
        // With T=1 the softmax weight is 1, so out = o(v(x)).
        let dim = 8;
        let store = toy_store(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(vec![1, dim], gaussian(&mut rng, dim, 1.0));
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        let mask = build_mask(MaskScheme::Causal, 1).unwrap();
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let out = mha_forward(
            &mut rt,
            "attn",
            &cfg,
            AttnInputs { x: &x, mask: Some(&mask), kv_source: None, positions: None, lora: None },
        )
        .unwrap();
        let mut rt2 = Runtime::new(&store, Mode::Eval, 0);
        let v = crate::nn::linear(&mut rt2, "attn.v", &x).unwrap();
        let expect = crate::nn::linear(&mut rt2, "attn.o", &v).unwrap();
        for (a, b) in out.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_positions_cannot_influence_output() {
        let dim = 8;
        let store = toy_store(dim);
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        let mask = build_mask(MaskScheme::Causal, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = gaussian::<f64>(&mut rng, 4 * dim, 1.0);
        let mut poked = base.clone();
        for v in &mut poked[3 * dim..] {
            *v += 0.5; // perturb the last position only
        }
        let positions: Vec<usize> = (0..4).collect();
        let run = |data: Vec<f64>| {
            let x = Tensor::from_vec(vec![4, dim], data);
            let mut rt = Runtime::new(&store, Mode::Eval, 0);
            mha_forward(
                &mut rt,
                "attn",
                &cfg,
                AttnInputs {
                    x: &x,
                    mask: Some(&mask),
                    kv_source: None,
                    positions: Some(&positions),
                    lora: None,
                },
            )
            .unwrap()
            .to_vec()
        };
        let a = run(base);
        let b = run(poked);
        for i in 0..3 * dim {
            assert!((a[i] - b[i]).abs() < 1e-9, "row {} leaked", i / dim);
        }
    }

    #[test]
    fn cross_attention_rejects_mask() {
        let dim = 4;
        let store = toy_store(dim);
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        let x = Tensor::<f64>::zeros(vec![2, dim]);
        let enc = Tensor::<f64>::zeros(vec![3, dim]);
        let mask = build_mask(MaskScheme::Causal, 2).unwrap();
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let err = mha_forward(
            &mut rt,
            "attn",
            &cfg,
            AttnInputs {
                x: &x,
                mask: Some(&mask),
                kv_source: Some(&enc),
                positions: None,
                lora: None,
            },
        );
        assert!(err.is_err());
    }
}
