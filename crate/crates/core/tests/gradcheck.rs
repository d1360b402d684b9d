//! Central finite-difference oracles for every op kind.
//!
//! For each kind we build a scalar objective (a fixed random projection of
//! the op output), compute analytic gradients via the tape, and compare each
//! probed coordinate against (f(x+eps) - f(x-eps)) / (2 eps) in f64.

use std::sync::Arc;

use ctxasr_core::tensor::{op_forward, AttnMask, OpAttrs, OpKind, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

struct Case {
    kind: OpKind,
    shapes: Vec<Vec<usize>>,
    attrs: OpAttrs,
}

/// Scalar objective: project the op output onto a fixed random vector.
fn objective(case: &Case, inputs: &[Vec<f64>], proj: &[f64], with_grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let tensors: Vec<Tensor<f64>> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(shape, data)| {
            if with_grads {
                Tensor::param(shape.clone(), Arc::new(data.clone()))
            } else {
                Tensor::from_vec(shape.clone(), data.clone())
            }
        })
        .collect();
    let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
    let out = op_forward(case.kind, &refs, &case.attrs).expect("op forward");
    let w = Tensor::from_vec(out.shape(), proj[..out.numel()].to_vec());
    let loss = out.mul(&w).unwrap().sum_all().unwrap();
    if with_grads {
        loss.backward().unwrap();
    }
    (loss.item(), tensors)
}

fn check_case(case: &Case, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    // Log-softmax-family ops want separated inputs; scale keeps FD stable.
    let proj = randn(&mut rng, 1 << 14);

    let (_, tensors) = objective(case, &inputs, &proj, true);
    let grads: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    for (arg, shape) in case.shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let probes: Vec<usize> = if n <= 20 {
            (0..n).collect()
        } else {
            (0..20).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in probes {
            let orig = inputs[arg][idx];
            inputs[arg][idx] = orig + EPS;
            let (fp, _) = objective(case, &inputs, &proj, false);
            inputs[arg][idx] = orig - EPS;
            let (fm, _) = objective(case, &inputs, &proj, false);
            inputs[arg][idx] = orig;
            let fd = (fp - fm) / (2.0 * EPS);
            let an = grads[arg][idx];
            assert!(
                rel_err(an, fd) < TOL || (an - fd).abs() < 1e-7,
                "{:?} input {arg} idx {idx}: analytic {an} vs fd {fd}",
                case.kind
            );
        }
    }
}

fn cases_for(kind: OpKind) -> Vec<Case> {
    let mk = |shapes: Vec<Vec<usize>>, attrs: OpAttrs| Case { kind, shapes, attrs };
    let d = OpAttrs::default;
    match kind {
        OpKind::Matmul => vec![
            mk(vec![vec![2, 3], vec![3, 4]], d()),
            mk(vec![vec![1, 5], vec![5, 1]], d()),
            mk(vec![vec![4, 4], vec![4, 2]], d()),
        ],
        OpKind::MatmulNt => vec![
            mk(vec![vec![2, 3], vec![4, 3]], d()),
            mk(vec![vec![1, 6], vec![1, 6]], d()),
            mk(vec![vec![3, 2], vec![5, 2]], d()),
        ],
        OpKind::Transpose => vec![
            mk(vec![vec![2, 3]], d()),
            mk(vec![vec![1, 4]], d()),
            mk(vec![vec![5, 5]], d()),
        ],
        OpKind::Add | OpKind::Mul => vec![
            mk(vec![vec![2, 3], vec![2, 3]], d()),
            mk(vec![vec![1, 1], vec![1, 1]], d()),
            mk(vec![vec![4, 2], vec![4, 2]], d()),
        ],
        OpKind::BiasAdd => vec![
            mk(vec![vec![3, 4], vec![4]], d()),
            mk(vec![vec![1, 2], vec![2]], d()),
            mk(vec![vec![6, 3], vec![3]], d()),
        ],
        OpKind::Scale => vec![
            mk(vec![vec![2, 3]], OpAttrs { scale: -1.7, ..d() }),
            mk(vec![vec![4]], OpAttrs { scale: 0.25, ..d() }),
            mk(vec![vec![1, 5]], OpAttrs { scale: 3.0, ..d() }),
        ],
        OpKind::Silu => vec![
            mk(vec![vec![2, 3]], d()),
            mk(vec![vec![7]], d()),
            mk(vec![vec![3, 3]], d()),
        ],
        OpKind::Glu => vec![
            mk(vec![vec![2, 6]], d()),
            mk(vec![vec![1, 2]], d()),
            mk(vec![vec![4, 8]], d()),
        ],
        OpKind::SoftmaxLastDim => {
            let mask = AttnMask::new(
                3,
                4,
                vec![
                    true, false, false, true, //
                    true, true, false, false, //
                    true, true, true, true,
                ],
            );
            vec![
                mk(vec![vec![2, 5]], d()),
                mk(vec![vec![1, 3]], d()),
                mk(vec![vec![3, 4]], OpAttrs { mask: Some(mask), ..d() }),
            ]
        }
        OpKind::LogSoftmaxLastDim => vec![
            mk(vec![vec![2, 5]], d()),
            mk(vec![vec![1, 3]], d()),
            mk(vec![vec![4, 2]], d()),
        ],
        OpKind::LayerNorm => vec![
            mk(vec![vec![2, 5], vec![5], vec![5]], d()),
            mk(vec![vec![1, 3], vec![3], vec![3]], d()),
            mk(vec![vec![4, 8], vec![8], vec![8]], d()),
        ],
        OpKind::RmsNorm => vec![
            mk(vec![vec![2, 5], vec![5]], d()),
            mk(vec![vec![1, 3], vec![3]], d()),
            mk(vec![vec![4, 8], vec![8]], d()),
        ],
        OpKind::EmbeddingLookup => vec![
            mk(vec![vec![5, 3]], OpAttrs { ids: vec![0, 2, 2, 4], ..d() }),
            mk(vec![vec![2, 2]], OpAttrs { ids: vec![1], ..d() }),
            mk(vec![vec![4, 6]], OpAttrs { ids: vec![3, 3, 3], ..d() }),
        ],
        OpKind::Concat => vec![
            mk(vec![vec![2, 3], vec![4, 3]], OpAttrs { axis: 0, ..d() }),
            mk(vec![vec![2, 3], vec![2, 2]], OpAttrs { axis: 1, ..d() }),
            mk(vec![vec![1, 2], vec![3, 2], vec![2, 2]], OpAttrs { axis: 0, ..d() }),
        ],
        OpKind::Slice => vec![
            mk(vec![vec![5, 3]], OpAttrs { axis: 0, range: (1, 4), ..d() }),
            mk(vec![vec![3, 6]], OpAttrs { axis: 1, range: (2, 5), ..d() }),
            mk(vec![vec![4, 4]], OpAttrs { axis: 1, range: (0, 4), ..d() }),
        ],
        OpKind::DepthwiseConv1d => vec![
            mk(vec![vec![6, 3], vec![3, 3]], d()),
            mk(vec![vec![1, 2], vec![9, 2]], d()),
            mk(vec![vec![10, 4], vec![5, 4]], d()),
        ],
        OpKind::Conv1d => vec![
            mk(vec![vec![8, 3], vec![3, 3, 5]], OpAttrs { stride: 2, pad: 1, ..d() }),
            mk(vec![vec![1, 2], vec![3, 2, 2]], OpAttrs { stride: 2, pad: 1, ..d() }),
            mk(vec![vec![7, 2], vec![3, 2, 4]], OpAttrs { stride: 1, pad: 1, ..d() }),
        ],
        OpKind::Dropout => vec![
            mk(vec![vec![4, 4]], OpAttrs { rate: 0.4, rng_seed: 11, ..d() }),
            mk(vec![vec![2, 3]], OpAttrs { rate: 0.0, ..d() }),
            mk(vec![vec![8]], OpAttrs { rate: 0.7, rng_seed: 5, ..d() }),
        ],
        OpKind::Rope => vec![
            mk(
                vec![vec![3, 8]],
                OpAttrs { num_heads: 2, positions: vec![0, 1, 2], ..d() },
            ),
            mk(
                vec![vec![1, 4]],
                OpAttrs { num_heads: 1, positions: vec![7], ..d() },
            ),
            mk(
                vec![vec![4, 12]],
                OpAttrs { num_heads: 3, positions: vec![5, 0, 2, 9], ..d() },
            ),
        ],
        OpKind::SumAll | OpKind::MeanAll => vec![
            mk(vec![vec![2, 3]], d()),
            mk(vec![vec![1]], d()),
            mk(vec![vec![4, 4]], d()),
        ],
        OpKind::MaskedNll => vec![
            mk(
                vec![vec![4, 5]],
                OpAttrs {
                    targets: vec![1, 0, 3, 2],
                    include: vec![true, false, true, true],
                    ..d()
                },
            ),
            mk(
                vec![vec![1, 2]],
                OpAttrs { targets: vec![1], include: vec![true], ..d() },
            ),
            mk(
                vec![vec![3, 4]],
                OpAttrs {
                    targets: vec![0, 0, 0],
                    include: vec![true, true, true],
                    ..d()
                },
            ),
        ],
    }
}

#[test]
fn every_op_kind_matches_finite_differences() {
    for kind in OpKind::ALL {
        for (i, case) in cases_for(kind).iter().enumerate() {
            check_case(case, 0x5eed + i as u64);
        }
    }
}

#[test]
fn layernorm_grad_on_2x5_matches_fd_tightly() {
    // The per-op contract pins this specific configuration.
    let case = Case {
        kind: OpKind::LayerNorm,
        shapes: vec![vec![2, 5], vec![5], vec![5]],
        attrs: OpAttrs::default(),
    };
    check_case(&case, 42);
}
