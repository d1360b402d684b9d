//! Forward ops and their backward rules.
//!
//! Each op validates shapes, computes the output buffer, and (when any input
//! tracks gradients) records a node with a closure mapping the upstream
//! gradient to per-parent gradients. There is no broadcasting beyond the
//! trailing-dimension bias add; all other shape mismatches are errors.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Node, Scalar, Tensor};
use crate::error::TensorError;

/// Train/eval switch; dropout is identity in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Boolean attention mask, `true` where a query row may attend.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(rows * cols, allowed.len());
        AttnMask {
            rows,
            cols,
            allowed: Arc::new(allowed),
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

fn shape_err<S: Scalar>(op: &'static str, detail: String) -> Result<Tensor<S>, TensorError> {
    Err(TensorError::ShapeMismatch { op, detail })
}

#[cfg(debug_assertions)]
fn check_finite<S: Scalar>(op: &'static str, inputs: &[&Tensor<S>]) -> Result<(), TensorError> {
    for t in inputs {
        let inner = t.inner.borrow();
        if inner.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
    }
    Ok(())
}

#[cfg(not(debug_assertions))]
fn check_finite<S: Scalar>(_op: &'static str, _inputs: &[&Tensor<S>]) -> Result<(), TensorError> {
    Ok(())
}

/// Build an op output, recording a node only when some parent needs grads.
fn record<S: Scalar>(
    shape: Vec<usize>,
    data: Vec<S>,
    parents: Vec<Tensor<S>>,
    backward: impl Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + 'static,
) -> Tensor<S> {
    record_shared(shape, Arc::new(data), parents, backward)
}

/// As `record`, for outputs whose buffer the backward closure also captures.
fn record_shared<S: Scalar>(
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    parents: Vec<Tensor<S>>,
    backward: impl Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + 'static,
) -> Tensor<S> {
    let requires_grad = parents.iter().any(|p| p.requires_grad());
    let node = requires_grad.then(|| Node {
        parents,
        backward: Box::new(backward),
    });
    Tensor::new(shape, data, requires_grad, node)
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// out[i,j] = sum_l a[i,l] * b[l,j];  a: [m,k], b: [k,n]
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// out[i,j] = sum_l a[i,l] * b[j,l];  a: [m,k], b: [n,k]
fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for l in 0..k {
                acc = acc + arow[l] * brow[l];
            }
            *o = acc;
        }
    }
    out
}

/// out[l,j] = sum_i a[i,l] * b[i,j];  a: [m,k], b: [m,n], out: [k,n]
fn matmul_tn_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(x: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn dims2<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize), TensorError> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected 2-d tensor, got {:?}", shape),
        });
    }
    Ok((shape[0], shape[1]))
}

// ── Op implementations ───────────────────────────────────────────────

impl<S: Scalar> Tensor<S> {
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("matmul", &[self, other])?;
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]"));
        }
        let a = self.data_arc();
        let b = other.data_arc();
        let out = matmul_raw(&a, &b, m, k, n);
        Ok(record(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |up, needs| {
                let da = needs[0].then(|| matmul_nt_raw(up, &b, m, n, k));
                let db = needs[1].then(|| matmul_tn_raw(&a, up, m, k, n));
                vec![da, db]
            },
        ))
    }

    /// `self @ other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("matmul_nt", &[self, other])?;
        let (m, k) = dims2(self, "matmul_nt")?;
        let (n, k2) = dims2(other, "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T"));
        }
        let a = self.data_arc();
        let b = other.data_arc();
        let out = matmul_nt_raw(&a, &b, m, k, n);
        Ok(record(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |up, needs| {
                let da = needs[0].then(|| matmul_raw(up, &b, m, n, k));
                let db = needs[1].then(|| matmul_tn_raw(up, &a, m, n, k));
                vec![da, db]
            },
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor<S>, TensorError> {
        check_finite("transpose", &[self])?;
        let (m, n) = dims2(self, "transpose")?;
        let x = self.data_arc();
        let out = transpose_raw(&x, m, n);
        Ok(record(vec![n, m], out, vec![self.clone()], move |up, _| {
            vec![Some(transpose_raw(up, n, m))]
        }))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("add", &[self, other])?;
        if self.shape() != other.shape() {
            return shape_err("add", format!("{:?} + {:?}", self.shape(), other.shape()));
        }
        let a = self.data_arc();
        let b = other.data_arc();
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        Ok(record(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            move |up, needs| {
                let da = needs[0].then(|| up.to_vec());
                let db = needs[1].then(|| up.to_vec());
                vec![da, db]
            },
        ))
    }

    /// Add a vector over the trailing dimension (the one permitted broadcast).
    pub fn bias_add(&self, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("bias_add", &[self, bias])?;
        let shape = self.shape();
        let d = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "bias_add",
            detail: "0-d input".into(),
        })?;
        if bias.shape() != vec![d] {
            return shape_err(
                "bias_add",
                format!("{:?} + bias {:?}", shape, bias.shape()),
            );
        }
        let x = self.data_arc();
        let b = bias.data_arc();
        let rows = x.len() / d;
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = out[r * d + j] + b[j];
            }
        }
        Ok(record(
            shape,
            out,
            vec![self.clone(), bias.clone()],
            move |up, needs| {
                let dx = needs[0].then(|| up.to_vec());
                let db = needs[1].then(|| {
                    let mut g = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += up[r * d + j];
                        }
                    }
                    g
                });
                vec![dx, db]
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("mul", &[self, other])?;
        if self.shape() != other.shape() {
            return shape_err("mul", format!("{:?} * {:?}", self.shape(), other.shape()));
        }
        let a = self.data_arc();
        let b = other.data_arc();
        let out: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        Ok(record(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            move |up, needs| {
                let da = needs[0].then(|| up.iter().zip(b.iter()).map(|(&u, &y)| u * y).collect());
                let db = needs[1].then(|| up.iter().zip(a.iter()).map(|(&u, &x)| u * x).collect());
                vec![da, db]
            },
        ))
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>, TensorError> {
        check_finite("scale", &[self])?;
        let x = self.data_arc();
        let out: Vec<S> = x.iter().map(|&v| v * c).collect();
        Ok(record(self.shape(), out, vec![self.clone()], move |up, _| {
            vec![Some(up.iter().map(|&u| u * c).collect())]
        }))
    }

    pub fn silu(&self) -> Result<Tensor<S>, TensorError> {
        check_finite("silu", &[self])?;
        let x = self.data_arc();
        let out: Vec<S> = x.iter().map(|&v| v * sigmoid(v)).collect();
        Ok(record(self.shape(), out, vec![self.clone()], move |up, _| {
            let dx = up
                .iter()
                .zip(x.iter())
                .map(|(&u, &v)| {
                    let s = sigmoid(v);
                    u * (s + v * s * (S::one() - s))
                })
                .collect();
            vec![Some(dx)]
        }))
    }

    /// Gated linear unit over the last dimension: `a * sigmoid(g)` with the
    /// input split into halves `[a | g]`.
    pub fn glu(&self) -> Result<Tensor<S>, TensorError> {
        check_finite("glu", &[self])?;
        let (r, c) = dims2(self, "glu")?;
        if c % 2 != 0 {
            return shape_err("glu", format!("last dim {c} is odd"));
        }
        let d = c / 2;
        let x = self.data_arc();
        let mut out = vec![S::zero(); r * d];
        for i in 0..r {
            for j in 0..d {
                let a = x[i * c + j];
                let g = x[i * c + d + j];
                out[i * d + j] = a * sigmoid(g);
            }
        }
        Ok(record(vec![r, d], out, vec![self.clone()], move |up, _| {
            let mut dx = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..d {
                    let a = x[i * c + j];
                    let g = x[i * c + d + j];
                    let s = sigmoid(g);
                    let u = up[i * d + j];
                    dx[i * c + j] = u * s;
                    dx[i * c + d + j] = u * a * s * (S::one() - s);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Softmax over the last dimension. Positions disallowed by `mask` are
    /// excluded from the normalization and receive probability zero, which is
    /// equivalent to adding negative infinity to their scores.
    pub fn softmax_lastdim(&self, mask: Option<&AttnMask>) -> Result<Tensor<S>, TensorError> {
        check_finite("softmax_lastdim", &[self])?;
        let (r, c) = dims2(self, "softmax_lastdim")?;
        if let Some(m) = mask {
            if m.rows != r || m.cols != c {
                return shape_err(
                    "softmax_lastdim",
                    format!("input [{r},{c}] vs mask [{},{}]", m.rows, m.cols),
                );
            }
        }
        let allowed = mask.map(|m| Arc::clone(&m.allowed));
        let x = self.data_arc();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let ok = |j: usize| allowed.as_ref().map_or(true, |a| a[i * c + j]);
            let mut max = S::neg_infinity();
            for j in 0..c {
                if ok(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == S::neg_infinity() {
                return shape_err("softmax_lastdim", format!("row {i} is fully masked"));
            }
            let mut denom = S::zero();
            for j in 0..c {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / denom;
            }
        }
        let y = Arc::new(out);
        let y_for_node = Arc::clone(&y);
        Ok(record_shared(
            vec![r, c],
            y,
            vec![self.clone()],
            move |up, _| {
                let y = &y_for_node;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot = dot + up[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = y[i * c + j] * (up[i * c + j] - dot);
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn log_softmax_lastdim(&self) -> Result<Tensor<S>, TensorError> {
        check_finite("log_softmax_lastdim", &[self])?;
        let (r, c) = dims2(self, "log_softmax_lastdim")?;
        let x = self.data_arc();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for &v in row {
                denom = denom + (v - max).exp();
            }
            let lse = max + denom.ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let y = Arc::new(out);
        let y_for_node = Arc::clone(&y);
        Ok(record_shared(
            vec![r, c],
            y,
            vec![self.clone()],
            move |up, _| {
                let y = &y_for_node;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let mut sum = S::zero();
                    for j in 0..c {
                        sum = sum + up[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = up[i * c + j] - y[i * c + j].exp() * sum;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn layernorm(&self, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("layernorm", &[self, gamma, beta])?;
        let (r, d) = dims2(self, "layernorm")?;
        if gamma.shape() != vec![d] || beta.shape() != vec![d] {
            return shape_err(
                "layernorm",
                format!(
                    "input [{r},{d}] vs gamma {:?} beta {:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            );
        }
        let eps = S::from_f64_exact(1e-5);
        let x = self.data_arc();
        let g = gamma.data_arc();
        let b = beta.data_arc();
        let dn = S::from_f64_exact(d as f64);
        let mut out = vec![S::zero(); r * d];
        let mut xhat = vec![S::zero(); r * d];
        let mut inv_std = vec![S::zero(); r];
        for i in 0..r {
            let row = &x[i * d..(i + 1) * d];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = S::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / dn;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        Ok(record(
            vec![r, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |up, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); r * d];
                    for i in 0..r {
                        let mut mean_gy = S::zero();
                        let mut mean_gyh = S::zero();
                        for j in 0..d {
                            let gy = up[i * d + j] * g[j];
                            mean_gy = mean_gy + gy;
                            mean_gyh = mean_gyh + gy * xhat[i * d + j];
                        }
                        mean_gy = mean_gy / dn;
                        mean_gyh = mean_gyh / dn;
                        for j in 0..d {
                            let gy = up[i * d + j] * g[j];
                            dx[i * d + j] =
                                (gy - mean_gy - xhat[i * d + j] * mean_gyh) * inv_std[i];
                        }
                    }
                    dx
                });
                let dg = needs[1].then(|| {
                    let mut dg = vec![S::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] += up[i * d + j] * xhat[i * d + j];
                        }
                    }
                    dg
                });
                let db = needs[2].then(|| {
                    let mut db = vec![S::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            db[j] += up[i * d + j];
                        }
                    }
                    db
                });
                vec![dx, dg, db]
            },
        ))
    }

    pub fn rmsnorm(&self, gamma: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("rmsnorm", &[self, gamma])?;
        let (r, d) = dims2(self, "rmsnorm")?;
        if gamma.shape() != vec![d] {
            return shape_err(
                "rmsnorm",
                format!("input [{r},{d}] vs gamma {:?}", gamma.shape()),
            );
        }
        let eps = S::from_f64_exact(1e-5);
        let x = self.data_arc();
        let g = gamma.data_arc();
        let dn = S::from_f64_exact(d as f64);
        let mut out = vec![S::zero(); r * d];
        let mut inv_rms = vec![S::zero(); r];
        for i in 0..r {
            let row = &x[i * d..(i + 1) * d];
            let mut ms = S::zero();
            for &v in row {
                ms = ms + v * v;
            }
            let ir = S::one() / (ms / dn + eps).sqrt();
            inv_rms[i] = ir;
            for j in 0..d {
                out[i * d + j] = g[j] * row[j] * ir;
            }
        }
        let inv_rms = Arc::new(inv_rms);
        Ok(record(
            vec![r, d],
            out,
            vec![self.clone(), gamma.clone()],
            move |up, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); r * d];
                    for i in 0..r {
                        let ir = inv_rms[i];
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot = dot + up[i * d + j] * g[j] * x[i * d + j];
                        }
                        for j in 0..d {
                            let gy = up[i * d + j] * g[j];
                            dx[i * d + j] = gy * ir - x[i * d + j] * ir * ir * ir * dot / dn;
                        }
                    }
                    dx
                });
                let dg = needs[1].then(|| {
                    let mut dg = vec![S::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] += up[i * d + j] * x[i * d + j] * inv_rms[i];
                        }
                    }
                    dg
                });
                vec![dx, dg]
            },
        ))
    }

    /// Gather rows of an embedding table; backward scatter-adds.
    pub fn embedding_lookup(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>, TensorError> {
        check_finite("embedding_lookup", &[table])?;
        let (v, d) = dims2(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err("embedding_lookup", format!("id {bad} >= vocab {v}"));
        }
        let t = table.data_arc();
        let n = ids.len();
        let mut out = vec![S::zero(); n * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ids: Vec<usize> = ids.to_vec();
        Ok(record(vec![n, d], out, vec![table.clone()], move |up, _| {
            let mut dt = vec![S::zero(); v * d];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += up[i * d + j];
                }
            }
            vec![Some(dt)]
        }))
    }

    /// Concatenate 2-d tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>, TensorError> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs".into());
        }
        check_finite("concat", parts)?;
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| dims2(p, "concat"))
            .collect::<Result<_, _>>()?;
        let (r0, c0) = dims[0];
        let (rows, cols, sizes): (usize, usize, Vec<usize>) = match axis {
            0 => {
                if dims.iter().any(|&(_, c)| c != c0) {
                    return shape_err("concat", format!("column mismatch: {:?}", dims));
                }
                let total: usize = dims.iter().map(|&(r, _)| r).sum();
                (total, c0, dims.iter().map(|&(r, _)| r).collect())
            }
            1 => {
                if dims.iter().any(|&(r, _)| r != r0) {
                    return shape_err("concat", format!("row mismatch: {:?}", dims));
                }
                let total: usize = dims.iter().map(|&(_, c)| c).sum();
                (r0, total, dims.iter().map(|&(_, c)| c).collect())
            }
            _ => return shape_err("concat", format!("axis {axis} out of range")),
        };
        let mut out = vec![S::zero(); rows * cols];
        if axis == 0 {
            let mut off = 0;
            for p in parts {
                let d = p.data_arc();
                out[off..off + d.len()].copy_from_slice(&d);
                off += d.len();
            }
        } else {
            let mut coff = 0;
            for (p, &(_, c)) in parts.iter().zip(&dims) {
                let d = p.data_arc();
                for i in 0..rows {
                    out[i * cols + coff..i * cols + coff + c].copy_from_slice(&d[i * c..(i + 1) * c]);
                }
                coff += c;
            }
        }
        let parents: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(record(
            vec![rows, cols],
            out,
            parents,
            move |up, needs| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for (idx, &sz) in sizes.iter().enumerate() {
                    if axis == 0 {
                        let start = off * cols;
                        grads.push(needs[idx].then(|| up[start..start + sz * cols].to_vec()));
                    } else {
                        grads.push(needs[idx].then(|| {
                            let mut g = vec![S::zero(); rows * sz];
                            for i in 0..rows {
                                g[i * sz..(i + 1) * sz]
                                    .copy_from_slice(&up[i * cols + off..i * cols + off + sz]);
                            }
                            g
                        }));
                    }
                    off += sz;
                }
                grads
            },
        ))
    }

    /// Slice a 2-d tensor along `axis`, keeping `start..end`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<S>, TensorError> {
        check_finite("slice", &[self])?;
        let (r, c) = dims2(self, "slice")?;
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > bound {
            return shape_err("slice", format!("[{r},{c}] axis {axis} range {start}..{end}"));
        }
        let x = self.data_arc();
        let (out, shape) = if axis == 0 {
            (x[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let w = end - start;
            let mut o = vec![S::zero(); r * w];
            for i in 0..r {
                o[i * w..(i + 1) * w].copy_from_slice(&x[i * c + start..i * c + end]);
            }
            (o, vec![r, w])
        };
        Ok(record(shape, out, vec![self.clone()], move |up, _| {
            let mut dx = vec![S::zero(); r * c];
            if axis == 0 {
                dx[start * c..end * c].copy_from_slice(up);
            } else {
                let w = end - start;
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&up[i * w..(i + 1) * w]);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Per-channel 1-d convolution over time with same-length zero padding.
    pub fn depthwise_conv1d(&self, weight: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_finite("depthwise_conv1d", &[self, weight])?;
        let (t, d) = dims2(self, "depthwise_conv1d")?;
        let (k, d2) = dims2(weight, "depthwise_conv1d")?;
        if d != d2 || k % 2 == 0 {
            return shape_err(
                "depthwise_conv1d",
                format!("input [{t},{d}] vs kernel [{k},{d2}] (kernel must be odd)"),
            );
        }
        let pad = (k - 1) / 2;
        let x = self.data_arc();
        let w = weight.data_arc();
        let mut out = vec![S::zero(); t * d];
        for ti in 0..t {
            for u in 0..k {
                let src = ti + u;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xs = (src - pad) * d;
                for c in 0..d {
                    out[ti * d + c] = out[ti * d + c] + w[u * d + c] * x[xs + c];
                }
            }
        }
        Ok(record(
            vec![t, d],
            out,
            vec![self.clone(), weight.clone()],
            move |up, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); t * d];
                    for ti in 0..t {
                        for u in 0..k {
                            let src = ti + u;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xs = (src - pad) * d;
                            for c in 0..d {
                                dx[xs + c] += up[ti * d + c] * w[u * d + c];
                            }
                        }
                    }
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); k * d];
                    for ti in 0..t {
                        for u in 0..k {
                            let src = ti + u;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xs = (src - pad) * d;
                            for c in 0..d {
                                dw[u * d + c] += up[ti * d + c] * x[xs + c];
                            }
                        }
                    }
                    dw
                });
                vec![dx, dw]
            },
        ))
    }

    /// Strided 1-d convolution mixing channels: weight is `[k, c_in, c_out]`.
    pub fn conv1d(
        &self,
        weight: &Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>, TensorError> {
        check_finite("conv1d", &[self, weight])?;
        let (t, cin) = dims2(self, "conv1d")?;
        let wshape = weight.shape();
        if wshape.len() != 3 || wshape[1] != cin {
            return shape_err(
                "conv1d",
                format!("input [{t},{cin}] vs weight {:?}", wshape),
            );
        }
        let (k, cout) = (wshape[0], wshape[2]);
        if stride == 0 || t + 2 * pad < k {
            return shape_err("conv1d", format!("t={t} k={k} stride={stride} pad={pad}"));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let x = self.data_arc();
        let w = weight.data_arc();
        let mut out = vec![S::zero(); t_out * cout];
        for to in 0..t_out {
            for u in 0..k {
                let src = to * stride + u;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &x[(src - pad) * cin..(src - pad + 1) * cin];
                let orow = &mut out[to * cout..(to + 1) * cout];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(u * cin + i) * cout..(u * cin + i + 1) * cout];
                    for o in 0..cout {
                        orow[o] = orow[o] + xv * wrow[o];
                    }
                }
            }
        }
        Ok(record(
            vec![t_out, cout],
            out,
            vec![self.clone(), weight.clone()],
            move |up, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); t * cin];
                    for to in 0..t_out {
                        let urow = &up[to * cout..(to + 1) * cout];
                        for u in 0..k {
                            let src = to * stride + u;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xoff = (src - pad) * cin;
                            for i in 0..cin {
                                let wrow = &w[(u * cin + i) * cout..(u * cin + i + 1) * cout];
                                let mut acc = S::zero();
                                for o in 0..cout {
                                    acc = acc + urow[o] * wrow[o];
                                }
                                dx[xoff + i] += acc;
                            }
                        }
                    }
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); k * cin * cout];
                    for to in 0..t_out {
                        let urow = &up[to * cout..(to + 1) * cout];
                        for u in 0..k {
                            let src = to * stride + u;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xrow = &x[(src - pad) * cin..(src - pad + 1) * cin];
                            for (i, &xv) in xrow.iter().enumerate() {
                                let wrow = &mut dw[(u * cin + i) * cout..(u * cin + i + 1) * cout];
                                for o in 0..cout {
                                    wrow[o] += xv * urow[o];
                                }
                            }
                        }
                    }
                    dw
                });
                vec![dx, dw]
            },
        ))
    }

    /// Inverted dropout. Identity in eval mode or at rate zero.
    pub fn dropout(
        &self,
        rate: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return shape_err("dropout", format!("rate {rate} outside [0,1)"));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self.clone());
        }
        check_finite("dropout", &[self])?;
        let x = self.data_arc();
        let keep = S::from_f64_exact(1.0 / (1.0 - rate));
        let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() >= rate).collect();
        let out: Vec<S> = x
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * keep } else { S::zero() })
            .collect();
        Ok(record(self.shape(), out, vec![self.clone()], move |up, _| {
            let dx = up
                .iter()
                .zip(&mask)
                .map(|(&u, &m)| if m { u * keep } else { S::zero() })
                .collect();
            vec![Some(dx)]
        }))
    }

    /// Rotary position embedding over `[T, heads*head_dim]`, rotating each
    /// consecutive coordinate pair within a head by `pos * base^(-2i/head_dim)`.
    pub fn rope(
        &self,
        num_heads: usize,
        base: f64,
        positions: &[usize],
    ) -> Result<Tensor<S>, TensorError> {
        check_finite("rope", &[self])?;
        let (t, d) = dims2(self, "rope")?;
        if num_heads == 0 || d % num_heads != 0 {
            return shape_err("rope", format!("width {d} not divisible by {num_heads} heads"));
        }
        let hd = d / num_heads;
        if hd % 2 != 0 {
            return shape_err("rope", format!("head_dim {hd} is odd"));
        }
        if positions.len() != t {
            return shape_err("rope", format!("{t} rows vs {} positions", positions.len()));
        }
        let half = hd / 2;
        // Per-pair inverse frequencies, shared across heads.
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / hd as f64))
            .collect();
        let mut cos = vec![S::zero(); t * half];
        let mut sin = vec![S::zero(); t * half];
        for (ti, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = p as f64 * inv_freq[i];
                cos[ti * half + i] = S::from_f64_exact(theta.cos());
                sin[ti * half + i] = S::from_f64_exact(theta.sin());
            }
        }
        let x = self.data_arc();
        let rotate = move |src: &[S], cos: &[S], sin: &[S], invert: bool| {
            let mut out = vec![S::zero(); t * d];
            for ti in 0..t {
                for h in 0..num_heads {
                    let off = ti * d + h * hd;
                    for i in 0..half {
                        let a = src[off + 2 * i];
                        let b = src[off + 2 * i + 1];
                        let c = cos[ti * half + i];
                        let s = if invert {
                            S::zero() - sin[ti * half + i]
                        } else {
                            sin[ti * half + i]
                        };
                        out[off + 2 * i] = a * c - b * s;
                        out[off + 2 * i + 1] = a * s + b * c;
                    }
                }
            }
            out
        };
        let out = rotate(&x, &cos, &sin, false);
        Ok(record(vec![t, d], out, vec![self.clone()], move |up, _| {
            vec![Some(rotate(up, &cos, &sin, true))]
        }))
    }

    pub fn sum_all(&self) -> Result<Tensor<S>, TensorError> {
        check_finite("sum_all", &[self])?;
        let x = self.data_arc();
        let mut acc = S::zero();
        for &v in x.iter() {
            acc = acc + v;
        }
        let n = x.len();
        Ok(record(vec![1], vec![acc], vec![self.clone()], move |up, _| {
            vec![Some(vec![up[0]; n])]
        }))
    }

    pub fn mean_all(&self) -> Result<Tensor<S>, TensorError> {
        check_finite("mean_all", &[self])?;
        let x = self.data_arc();
        let n = x.len();
        let inv = S::from_f64_exact(1.0 / n as f64);
        let mut acc = S::zero();
        for &v in x.iter() {
            acc = acc + v;
        }
        Ok(record(
            vec![1],
            vec![acc * inv],
            vec![self.clone()],
            move |up, _| vec![Some(vec![up[0] * inv; n])],
        ))
    }

    /// Mean negative log-likelihood of `targets[i]` over rows with
    /// `include[i]`, on log-probability inputs.
    pub fn masked_nll(
        &self,
        targets: &[usize],
        include: &[bool],
    ) -> Result<Tensor<S>, TensorError> {
        check_finite("masked_nll", &[self])?;
        let (n, v) = dims2(self, "masked_nll")?;
        if targets.len() != n || include.len() != n {
            return shape_err(
                "masked_nll",
                format!("{n} rows vs {} targets / {} mask", targets.len(), include.len()),
            );
        }
        let m = include.iter().filter(|&&b| b).count();
        if m == 0 {
            return shape_err("masked_nll", "no unmasked targets".into());
        }
        if let Some(&bad) = targets
            .iter()
            .zip(include)
            .filter(|(_, &inc)| inc)
            .map(|(t, _)| t)
            .find(|&&t| t >= v)
        {
            return shape_err("masked_nll", format!("target {bad} >= vocab {v}"));
        }
        let x = self.data_arc();
        let inv_m = S::from_f64_exact(1.0 / m as f64);
        let mut acc = S::zero();
        for i in 0..n {
            if include[i] {
                acc = acc - x[i * v + targets[i]];
            }
        }
        let targets = targets.to_vec();
        let include = include.to_vec();
        Ok(record(
            vec![1],
            vec![acc * inv_m],
            vec![self.clone()],
            move |up, _| {
                let mut dx = vec![S::zero(); n * v];
                for i in 0..n {
                    if include[i] {
                        dx[i * v + targets[i]] = S::zero() - up[0] * inv_m;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Row-major shape change; the buffer is shared, backward is identity.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<S>, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), new_shape),
            );
        }
        Ok(record_shared(
            new_shape,
            self.data_arc(),
            vec![self.clone()],
            |up, _| vec![Some(up.to_vec())],
        ))
    }

    /// Custom-op escape hatch for ops with hand-derived backward rules (CTC).
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Tensor<S> {
        record(shape, data, parents, backward)
    }
}

// ── Enum dispatch for oracle harnesses ───────────────────────────────

/// Closed enumeration of op kinds, used by gradient-check harnesses to
/// exercise every kind systematically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    MatmulNt,
    Transpose,
    Add,
    BiasAdd,
    Mul,
    Scale,
    Silu,
    Glu,
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    LayerNorm,
    RmsNorm,
    EmbeddingLookup,
    Concat,
    Slice,
    DepthwiseConv1d,
    Conv1d,
    Dropout,
    Rope,
    SumAll,
    MeanAll,
    MaskedNll,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Matmul,
        OpKind::MatmulNt,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::BiasAdd,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Silu,
        OpKind::Glu,
        OpKind::SoftmaxLastDim,
        OpKind::LogSoftmaxLastDim,
        OpKind::LayerNorm,
        OpKind::RmsNorm,
        OpKind::EmbeddingLookup,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::DepthwiseConv1d,
        OpKind::Conv1d,
        OpKind::Dropout,
        OpKind::Rope,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::MaskedNll,
    ];
}

/// Attributes for `op_forward`; each kind reads the fields it needs.
#[derive(Debug, Clone)]
pub struct OpAttrs {
    pub scale: f64,
    pub axis: usize,
    pub range: (usize, usize),
    pub ids: Vec<usize>,
    pub mask: Option<AttnMask>,
    pub rate: f64,
    pub mode: Mode,
    pub rng_seed: u64,
    pub num_heads: usize,
    pub rope_base: f64,
    pub positions: Vec<usize>,
    pub stride: usize,
    pub pad: usize,
    pub targets: Vec<usize>,
    pub include: Vec<bool>,
}

impl Default for OpAttrs {
    fn default() -> Self {
        OpAttrs {
            scale: 1.0,
            axis: 0,
            range: (0, 1),
            ids: Vec::new(),
            mask: None,
            rate: 0.0,
            mode: Mode::Train,
            rng_seed: 0,
            num_heads: 1,
            rope_base: 10000.0,
            positions: Vec::new(),
            stride: 1,
            pad: 0,
            targets: Vec::new(),
            include: Vec::new(),
        }
    }
}

/// Uniform dispatch over op kinds. Layer code uses the `Tensor` methods
/// directly; this entry point exists so oracles can enumerate kinds.
pub fn op_forward<S: Scalar>(
    kind: OpKind,
    inputs: &[&Tensor<S>],
    attrs: &OpAttrs,
) -> Result<Tensor<S>, TensorError> {
    let arg = |i: usize| -> Result<&Tensor<S>, TensorError> {
        inputs.get(i).copied().ok_or(TensorError::ShapeMismatch {
            op: "op_forward",
            detail: format!("{kind:?}: missing input {i}"),
        })
    };
    match kind {
        OpKind::Matmul => arg(0)?.matmul(arg(1)?),
        OpKind::MatmulNt => arg(0)?.matmul_nt(arg(1)?),
        OpKind::Transpose => arg(0)?.transpose2(),
        OpKind::Add => arg(0)?.add(arg(1)?),
        OpKind::BiasAdd => arg(0)?.bias_add(arg(1)?),
        OpKind::Mul => arg(0)?.mul(arg(1)?),
        OpKind::Scale => arg(0)?.scale(S::from_f64_exact(attrs.scale)),
        OpKind::Silu => arg(0)?.silu(),
        OpKind::Glu => arg(0)?.glu(),
        OpKind::SoftmaxLastDim => arg(0)?.softmax_lastdim(attrs.mask.as_ref()),
        OpKind::LogSoftmaxLastDim => arg(0)?.log_softmax_lastdim(),
        OpKind::LayerNorm => arg(0)?.layernorm(arg(1)?, arg(2)?),
        OpKind::RmsNorm => arg(0)?.rmsnorm(arg(1)?),
        OpKind::EmbeddingLookup => Tensor::embedding_lookup(arg(0)?, &attrs.ids),
        OpKind::Concat => Tensor::concat(inputs, attrs.axis),
        OpKind::Slice => arg(0)?.slice(attrs.axis, attrs.range.0, attrs.range.1),
        OpKind::DepthwiseConv1d => arg(0)?.depthwise_conv1d(arg(1)?),
        OpKind::Conv1d => arg(0)?.conv1d(arg(1)?, attrs.stride, attrs.pad),
        OpKind::Dropout => {
            let mut rng = ChaCha8Rng::seed_from_u64(attrs.rng_seed);
            arg(0)?.dropout(attrs.rate, attrs.mode, &mut rng)
        }
        OpKind::Rope => arg(0)?.rope(attrs.num_heads, attrs.rope_base, &attrs.positions),
        OpKind::SumAll => arg(0)?.sum_all(),
        OpKind::MeanAll => arg(0)?.mean_all(),
        OpKind::MaskedNll => arg(0)?.masked_nll(&attrs.targets, &attrs.include),
    }
}
