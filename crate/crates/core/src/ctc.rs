//! Connectionist Temporal Classification.
//!
//! The loss is `-log` of the total probability over all monotonic
//! frame-to-label alignments with blanks, computed by the forward (alpha)
//! recursion in log space. The backward rule uses the beta recursion:
//! `d loss / d log_prob[t][k] = -sum_{s: label(s)=k} exp(alpha[t][s] +
//! beta[t][s] - log_likelihood)`. Recursions run in f64 regardless of the
//! tensor scalar so f32 training stays stable.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

fn repeats(targets: &[usize]) -> usize {
    targets.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Standard CTC feasibility: enough frames for every label plus a blank
/// between each repeated pair.
pub fn ctc_feasible(frames: usize, targets: &[usize]) -> bool {
    frames >= targets.len() + repeats(targets)
}

struct Recursion {
    /// Extended label sequence: blank-interleaved targets, length 2L+1.
    ext: Vec<usize>,
    alpha: Vec<f64>,
    t: usize,
    m: usize,
    llh: f64,
}

fn forward(lp: &[f64], t: usize, v1: usize, targets: &[usize], blank: usize) -> Recursion {
    let l = targets.len();
    let m = 2 * l + 1;
    let ext: Vec<usize> = (0..m)
        .map(|s| if s % 2 == 0 { blank } else { targets[s / 2] })
        .collect();
    let at = |ti: usize, k: usize| lp[ti * v1 + k];

    let mut alpha = vec![NEG_INF; t * m];
    alpha[0] = at(0, ext[0]);
    if m > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for ti in 1..t {
        for s in 0..m {
            let stay = alpha[(ti - 1) * m + s];
            let step = if s >= 1 { alpha[(ti - 1) * m + s - 1] } else { NEG_INF };
            let skip_ok = s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
            let skip = if skip_ok { alpha[(ti - 1) * m + s - 2] } else { NEG_INF };
            let prev = lse3(stay, step, skip);
            alpha[ti * m + s] = if prev == NEG_INF {
                NEG_INF
            } else {
                prev + at(ti, ext[s])
            };
        }
    }
    let llh = if m > 1 {
        lse2(alpha[(t - 1) * m + m - 1], alpha[(t - 1) * m + m - 2])
    } else {
        alpha[(t - 1) * m]
    };
    Recursion { ext, alpha, t, m, llh }
}

fn backward_betas(lp: &[f64], rec: &Recursion, v1: usize, blank: usize) -> Vec<f64> {
    let (t, m) = (rec.t, rec.m);
    let at = |ti: usize, k: usize| lp[ti * v1 + k];
    let mut beta = vec![NEG_INF; t * m];
    beta[(t - 1) * m + m - 1] = 0.0;
    if m > 1 {
        beta[(t - 1) * m + m - 2] = 0.0;
    }
    for ti in (0..t.saturating_sub(1)).rev() {
        for s in 0..m {
            let stay = beta[(ti + 1) * m + s] + at(ti + 1, rec.ext[s]);
            let step = if s + 1 < m {
                beta[(ti + 1) * m + s + 1] + at(ti + 1, rec.ext[s + 1])
            } else {
                NEG_INF
            };
            let skip_ok = s + 2 < m && rec.ext[s + 2] != blank && rec.ext[s + 2] != rec.ext[s];
            let skip = if skip_ok {
                beta[(ti + 1) * m + s + 2] + at(ti + 1, rec.ext[s + 2])
            } else {
                NEG_INF
            };
            beta[ti * m + s] = lse3(stay, step, skip);
        }
    }
    beta
}

/// CTC loss over `[T, V+1]` log-probabilities. The blank id is the last
/// column. Infeasible targets are a structured error so callers can skip the
/// sample with a warning.
pub fn ctc_loss<S: Scalar>(
    log_probs: &Tensor<S>,
    targets: &[usize],
    blank: usize,
) -> Result<Tensor<S>, TensorError> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_loss",
            detail: format!("log_probs shape {shape:?}"),
        });
    }
    let (t, v1) = (shape[0], shape[1]);
    if blank != v1 - 1 {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_loss",
            detail: format!("blank {blank} must be the last column {}", v1 - 1),
        });
    }
    if targets.iter().any(|&y| y >= blank) {
        return Err(TensorError::ShapeMismatch {
            op: "ctc_loss",
            detail: "target contains blank or out-of-vocab id".into(),
        });
    }
    if !ctc_feasible(t, targets) {
        return Err(TensorError::CtcInfeasible {
            frames: t,
            target_len: targets.len(),
        });
    }

    let lp: Vec<f64> = log_probs.to_vec().iter().map(|v| v.to_f64().unwrap()).collect();
    let rec = forward(&lp, t, v1, targets, blank);
    let loss = -rec.llh;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "ctc_loss" });
    }

    let out_val = S::from_f64_exact(loss);
    Ok(Tensor::from_op(
        vec![1],
        vec![out_val],
        vec![log_probs.clone()],
        move |up, _| {
            let beta = backward_betas(&lp, &rec, v1, blank);
            let upstream = up[0].to_f64().unwrap();
            let mut grad = vec![S::zero(); t * v1];
            for ti in 0..t {
                // Accumulate posterior mass per label in log space.
                let mut acc = vec![NEG_INF; v1];
                for s in 0..rec.m {
                    let g = rec.alpha[ti * rec.m + s] + beta[ti * rec.m + s] - rec.llh;
                    acc[rec.ext[s]] = lse2(acc[rec.ext[s]], g);
                }
                for k in 0..v1 {
                    if acc[k] != NEG_INF {
                        grad[ti * v1 + k] = S::from_f64_exact(-acc[k].exp() * upstream);
                    }
                }
            }
            vec![Some(grad)]
        },
    ))
}

/// Frame-wise argmax, collapse repeats, strip blanks.
pub fn ctc_greedy_decode<S: Scalar>(log_probs: &[S], frames: usize, v1: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = blank;
    for t in 0..frames {
        let row = &log_probs[t * v1..(t + 1) * v1];
        let mut best = 0;
        for k in 1..v1 {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best != blank && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}
