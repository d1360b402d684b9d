//! Neural layers shared by the audio encoder and the decoder LM: linear and
//! LoRA-wrapped projections, rotary attention with pluggable masks, Conformer
//! sub-blocks and strided downsampling blocks.
//!
//! Layers are pure functions over a [`Runtime`]: they bind named parameters
//! out of the store, so the same code path serves initialization-free
//! evaluation and tape-building training passes.

mod attention;
mod conformer;
mod mask;

pub use attention::{init_mha, mha_forward, AttentionConfig, AttnInputs};
pub use conformer::{
    conformer_block, downsample_block, init_conformer_block, init_downsample_block,
};
pub use mask::{build_mask, MaskScheme};

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamStore, Scalar, Tensor};

/// Attention projections that can carry low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

/// Low-rank adapter settings: `y = W x + scaling * B (A dropout(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub dropout_rate: f64,
    pub scaling: f64,
    pub target_projections: Vec<Proj>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            dropout_rate: 0.05,
            scaling: 0.05,
            target_projections: vec![Proj::Q, Proj::K, Proj::V, Proj::O],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("lora dropout_rate must be in [0,1)".into()));
        }
        if self.scaling <= 0.0 {
            return Err(Error::Config("lora scaling must be positive".into()));
        }
        if self.target_projections.is_empty() {
            return Err(Error::Config("lora target_projections must be non-empty".into()));
        }
        Ok(())
    }

    pub fn targets(&self, p: Proj) -> bool {
        self.target_projections.contains(&p)
    }
}

/// Per-pass execution context: parameter bindings, train/eval mode, and the
/// dropout stream. One runtime per sample per step; bindings are deduplicated
/// by name so reuse of a parameter accumulates into one gradient.
pub struct Runtime<'a, S: Scalar> {
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    binds: BTreeMap<String, Tensor<S>>,
}

impl<'a, S: Scalar> Runtime<'a, S> {
    pub fn new(store: &'a ParamStore<S>, mode: Mode, rng_seed: u64) -> Self {
        Runtime {
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            binds: BTreeMap::new(),
        }
    }

    /// Bind a named parameter as a leaf tensor. Training passes track grads
    /// for trainable entries; eval passes never build a tape.
    pub fn p(&mut self, name: &str) -> Tensor<S> {
        if let Some(t) = self.binds.get(name) {
            return t.clone();
        }
        let track = self.mode == Mode::Train && self.store.entry(name).trainable;
        let t = self.store.leaf(name, track);
        self.binds.insert(name.to_string(), t.clone());
        t
    }

    /// Trainable gradients accumulated by a backward pass, in name order.
    /// Parameters that were bound but received no gradient yield zeros.
    pub fn grads(&self) -> Vec<(String, Vec<S>)> {
        self.binds
            .iter()
            .filter(|(name, _)| self.store.entry(name).trainable)
            .map(|(name, t)| {
                let g = t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64_exact(z * std)
        })
        .collect()
}

/// Register a linear layer's parameters. Weight layout is `[d_in, d_out]`
/// (inputs are row vectors).
pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    trainable: bool,
) {
    let w = gaussian(rng, d_in * d_out, 0.02);
    store.insert(&format!("{name}.w"), vec![d_in, d_out], w, trainable);
    if bias {
        store.insert(&format!("{name}.b"), vec![d_out], vec![S::zero(); d_out], trainable);
    }
}

pub fn init_layernorm<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, trainable: bool) {
    store.insert(&format!("{name}.gamma"), vec![d], vec![S::one(); d], trainable);
    store.insert(&format!("{name}.beta"), vec![d], vec![S::zero(); d], trainable);
}

pub fn init_rmsnorm<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, trainable: bool) {
    store.insert(&format!("{name}.gamma"), vec![d], vec![S::one(); d], trainable);
}

/// Register the adapter factors for one projection: A is Gaussian, B starts
/// at zero so the adapted model equals the frozen base at step zero.
pub fn init_lora<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    base_name: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
) {
    let a = gaussian(rng, d_in * rank, 0.02);
    store.insert(&format!("{base_name}.lora_a"), vec![d_in, rank], a, true);
    store.insert(
        &format!("{base_name}.lora_b"),
        vec![rank, d_out],
        vec![S::zero(); rank * d_out],
        true,
    );
}

/// `x @ W (+ b)`, with the bias applied when the store has one.
pub fn linear<S: Scalar>(rt: &mut Runtime<S>, name: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
    let w = rt.p(&format!("{name}.w"));
    let mut y = x.matmul(&w)?;
    let bname = format!("{name}.b");
    if rt.store.contains(&bname) {
        let b = rt.p(&bname);
        y = y.bias_add(&b)?;
    }
    Ok(y)
}

/// Frozen-base linear with an optional low-rank adapter branch:
/// `y = x W + s * (A dropout(x)) B`. Only A and B are trainable; the scaling
/// is applied as the fixed multiplier `s`, not `s / rank`.
pub fn lora_linear<S: Scalar>(
    rt: &mut Runtime<S>,
    name: &str,
    x: &Tensor<S>,
    lora: Option<&LoraConfig>,
) -> Result<Tensor<S>> {
    let base = linear(rt, name, x)?;
    let Some(cfg) = lora else {
        return Ok(base);
    };
    let a = rt.p(&format!("{name}.lora_a"));
    let b = rt.p(&format!("{name}.lora_b"));
    if a.shape()[1] != b.shape()[0] {
        return Err(Error::Config(format!(
            "{name}: lora rank mismatch: A {:?} vs B {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mode = rt.mode;
    let dropped = x.dropout(cfg.dropout_rate, mode, &mut rt.rng)?;
    let branch = dropped
        .matmul(&a)?
        .matmul(&b)?
        .scale(S::from_f64_exact(cfg.scaling))?;
    Ok(base.add(&branch)?)
}

/// Adapter parameter count for `targets` projections over `layers` layers of
/// width `d` at rank `r`: each projection contributes A and B, `2 d r` each.
pub fn lora_param_count(layers: usize, d: usize, rank: usize, num_targets: usize) -> usize {
    num_targets * layers * 2 * d * rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn lora_zero_b_matches_base_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        init_linear(&mut store, &mut rng, "proj", 8, 8, false, false);
        init_lora(&mut store, &mut rng, "proj", 8, 8, 4);
        let x = Tensor::from_vec(vec![3, 8], gaussian(&mut rng, 24, 1.0));
        let cfg = LoraConfig {
            rank: 4,
            dropout_rate: 0.0,
            scaling: 0.05,
            target_projections: vec![Proj::Q],
        };
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let with = lora_linear(&mut rt, "proj", &x, Some(&cfg)).unwrap();
        let without = linear(&mut rt, "proj", &x).unwrap();
        assert_eq!(with.to_vec(), without.to_vec());
    }

    #[test]
    fn lora_zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        init_linear(&mut store, &mut rng, "proj", 6, 5, false, false);
        init_lora(&mut store, &mut rng, "proj", 6, 5, 2);
        let x = Tensor::<f32>::zeros(vec![2, 6]);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let y = lora_linear(&mut rt, "proj", &x, Some(&LoraConfig::default())).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_scale_adapter_count() {
        // 4 projections, 32 layers, width 4096, rank 32.
        assert_eq!(lora_param_count(32, 4096, 32, 4), 33_554_432);
    }

    #[test]
    fn bindings_dedupe_by_name() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", vec![1], vec![2.0], true);
        let mut rt = Runtime::new(&store, Mode::Train, 0);
        let a = rt.p("w");
        let b = rt.p("w");
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        // d(w^2)/dw = 2w accumulates through the single binding.
        assert_eq!(rt.grads()[0].1, vec![4.0]);
    }

    #[test]
    fn runtime_eval_builds_no_tape() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", vec![2], vec![1.0, 2.0], true);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let w = rt.p("w");
        assert!(!w.requires_grad());
        drop(Arc::clone(&w.data_arc()));
    }
}
