//! Conformer block and strided downsampling block for the audio encoder.

use rand_chacha::ChaCha8Rng;

use super::attention::{init_mha, mha_forward, AttentionConfig, AttnInputs};
use super::{init_layernorm, init_linear, linear, Runtime};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

fn layernorm<S: Scalar>(rt: &mut Runtime<S>, name: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
    let gamma = rt.p(&format!("{name}.gamma"));
    let beta = rt.p(&format!("{name}.beta"));
    Ok(x.layernorm(&gamma, &beta)?)
}

fn feed_forward<S: Scalar>(rt: &mut Runtime<S>, name: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
    let h = linear(rt, &format!("{name}.w1"), x)?.silu()?;
    linear(rt, &format!("{name}.w2"), &h)
}

/// Half-step FFN, bidirectional rotary self-attention, depthwise convolution
/// module, half-step FFN, final norm; residuals around every sub-block.
pub fn conformer_block<S: Scalar>(
    rt: &mut Runtime<S>,
    prefix: &str,
    x: &Tensor<S>,
    attn: &AttentionConfig,
    conv_kernel: usize,
) -> Result<Tensor<S>> {
    if conv_kernel % 2 == 0 {
        return Err(Error::Config(format!(
            "conformer conv kernel must be odd, got {conv_kernel}"
        )));
    }
    let t = x.shape()[0];
    let positions: Vec<usize> = (0..t).collect();
    let half = S::from_f64_exact(0.5);

    let mut h = x.clone();
    let ff1_in = layernorm(rt, &format!("{prefix}.ffn1_norm"), &h)?;
    let ff1 = feed_forward(rt, &format!("{prefix}.ffn1"), &ff1_in)?;
    h = h.add(&ff1.scale(half)?)?;

    let normed = layernorm(rt, &format!("{prefix}.attn_norm"), &h)?;
    let attn_out = mha_forward(
        rt,
        &format!("{prefix}.attn"),
        attn,
        AttnInputs {
            x: &normed,
            mask: None, // bidirectional
            kv_source: None,
            positions: Some(&positions),
            lora: None,
        },
    )?;
    h = h.add(&attn_out)?;

    let cin = layernorm(rt, &format!("{prefix}.conv_norm"), &h)?;
    let pw1 = linear(rt, &format!("{prefix}.conv_pw1"), &cin)?.glu()?;
    let dw = pw1.depthwise_conv1d(&rt.p(&format!("{prefix}.conv_dw.w")))?;
    let conv_out = linear(rt, &format!("{prefix}.conv_pw2"), &dw.silu()?)?;
    h = h.add(&conv_out)?;

    let ff2_in = layernorm(rt, &format!("{prefix}.ffn2_norm"), &h)?;
    let ff2 = feed_forward(rt, &format!("{prefix}.ffn2"), &ff2_in)?;
    h = h.add(&ff2.scale(half)?)?;

    layernorm(rt, &format!("{prefix}.final_norm"), &h)
}

pub fn init_conformer_block<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    conv_kernel: usize,
) {
    let ff = 4 * dim;
    for name in ["ffn1", "ffn2"] {
        init_layernorm(store, &format!("{prefix}.{name}_norm"), dim, true);
        init_linear(store, rng, &format!("{prefix}.{name}.w1"), dim, ff, true, true);
        init_linear(store, rng, &format!("{prefix}.{name}.w2"), ff, dim, true, true);
    }
    init_layernorm(store, &format!("{prefix}.attn_norm"), dim, true);
    init_mha(store, rng, &format!("{prefix}.attn"), dim, true, true, None);
    init_layernorm(store, &format!("{prefix}.conv_norm"), dim, true);
    init_linear(store, rng, &format!("{prefix}.conv_pw1"), dim, 2 * dim, true, true);
    store.insert(
        &format!("{prefix}.conv_dw.w"),
        vec![conv_kernel, dim],
        super::gaussian(rng, conv_kernel * dim, 0.02),
        true,
    );
    init_linear(store, rng, &format!("{prefix}.conv_pw2"), dim, dim, true, true);
    init_layernorm(store, &format!("{prefix}.final_norm"), dim, true);
}

/// Strided convolution + nonlinearity; halves the time axis to `ceil(T/2)`.
pub fn downsample_block<S: Scalar>(
    rt: &mut Runtime<S>,
    prefix: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let w = rt.p(&format!("{prefix}.conv.w"));
    let b = rt.p(&format!("{prefix}.conv.b"));
    Ok(x.conv1d(&w, 2, 1)?.bias_add(&b)?.silu()?)
}

pub fn init_downsample_block<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) {
    // Kernel 3, stride 2, padding 1: output length is exactly ceil(T/2).
    store.insert(
        &format!("{prefix}.conv.w"),
        vec![3, c_in, c_out],
        super::gaussian(rng, 3 * c_in * c_out, 0.05),
        true,
    );
    store.insert(&format!("{prefix}.conv.b"), vec![c_out], vec![S::zero(); c_out], true);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::tensor::Mode;
    use rand_chacha::rand_core::SeedableRng;

    fn block_store(dim: usize, kernel: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_conformer_block(&mut store, &mut rng, "blk", dim, kernel);
        store
    }

    #[test]
    fn conformer_preserves_shape() {
        let dim = 8;
        let store = block_store(dim, 9);
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        for t in [1usize, 7, 32] {
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            let x = Tensor::from_vec(vec![t, dim], gaussian(&mut rng, t * dim, 1.0));
            let mut rt = Runtime::new(&store, Mode::Eval, 0);
            let y = conformer_block(&mut rt, "blk", &x, &cfg, 9).unwrap();
            assert_eq!(y.shape(), vec![t, dim]);
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        let dim = 4;
        let store = block_store(dim, 9);
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        let x = Tensor::<f64>::zeros(vec![3, dim]);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        assert!(conformer_block(&mut rt, "blk", &x, &cfg, 8).is_err());
    }

    #[test]
    fn zeroed_weights_reduce_to_norm_of_input() {
        // With every linear/conv weight zeroed (norm scales kept), only the
        // residual path survives, so the block is norm(x).
        let dim = 8;
        let mut store = block_store(dim, 3);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            if name.ends_with(".w") || name.ends_with(".b") || name.ends_with(".beta") {
                store.update(&name, |d| d.iter_mut().for_each(|v| *v = 0.0));
            }
        }
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = gaussian::<f64>(&mut rng, 5 * dim, 1.0);
        let x = Tensor::from_vec(vec![5, dim], data);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let y = conformer_block(&mut rt, "blk", &x, &cfg, 3).unwrap();
        let mut rt2 = Runtime::new(&store, Mode::Eval, 0);
        let expect = layernorm(&mut rt2, "blk.final_norm", &x).unwrap();
        for (a, b) in y.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_with_kernel9_pads_cleanly() {
        let dim = 4;
        let store = block_store(dim, 9);
        let cfg = AttentionConfig { model_dim: dim, num_heads: 2, rope_base: 10000.0 };
        let x = Tensor::from_vec(vec![1, dim], vec![0.5; 4]);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        assert!(conformer_block(&mut rt, "blk", &x, &cfg, 9).is_ok());
    }

    #[test]
    fn downsample_lengths_follow_ceil_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        init_downsample_block(&mut store, &mut rng, "ds", 4, 4);
        let x = Tensor::from_vec(vec![10, 4], gaussian(&mut rng, 40, 1.0));
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        let y = downsample_block(&mut rt, "ds", &x).unwrap();
        assert_eq!(y.shape(), vec![5, 4]);
        let one = Tensor::from_vec(vec![1, 4], vec![1.0; 4]);
        let mut rt = Runtime::new(&store, Mode::Eval, 0);
        assert_eq!(downsample_block(&mut rt, "ds", &one).unwrap().shape()[0], 1);
    }
}
