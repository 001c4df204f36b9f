//! Tape operations: eager forward kernels plus their reverse-mode rules.
//!
//! Each method on [`Graph`] computes its result immediately, validates
//! finiteness, and (when the graph records) pushes an op so `backward` can
//! replay the chain rule in reverse. Broadcast support is deliberately
//! narrow: same-shape, trailing-axis (rhs is the last axis), and scalar.

use std::sync::Arc;

use super::linalg::{self, AxisMap};
use super::{Element, Graph, Tid};
use crate::error::{Error, Result};

/// Broadcast kind resolved at record time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    Same,
    /// rhs is a vector matching the last axis of lhs.
    Trailing,
    /// rhs is a single element.
    Scalar,
}

pub enum Op<E: Element> {
    Matmul { a: Tid, b: Tid, out: Tid, m: usize, k: usize, n: usize },
    Add { a: Tid, b: Tid, out: Tid, kind: Bcast },
    Sub { a: Tid, b: Tid, out: Tid },
    Mul { a: Tid, b: Tid, out: Tid, kind: Bcast },
    Neg { a: Tid, out: Tid },
    Scale { a: Tid, out: Tid, c: E },
    Gelu { a: Tid, out: Tid },
    Silu { a: Tid, out: Tid },
    Sigmoid { a: Tid, out: Tid },
    Softmax { a: Tid, out: Tid, cols: usize },
    LayerNorm { x: Tid, gamma: Tid, beta: Tid, out: Tid, cols: usize, mean: Vec<E>, rstd: Vec<E> },
    CrossEntropy { logits: Tid, out: Tid, targets: Arc<Vec<usize>>, smoothing: f64, probs: Vec<E>, cols: usize },
    Dropout { a: Tid, out: Tid, mask: Vec<E> },
    DropPath { a: Tid, out: Tid, factors: Vec<E>, block: usize },
    Sum { a: Tid, out: Tid },
    Reshape { a: Tid, out: Tid },
    Transpose { a: Tid, out: Tid, m: usize, n: usize },
    SliceRows { a: Tid, out: Tid, start: usize, rows: usize, cols: usize },
    ConcatRows { parts: Vec<Tid>, out: Tid, cols: usize },
    SliceCols { a: Tid, out: Tid, start: usize, cols_out: usize, cols_in: usize },
    ConcatCols { parts: Vec<Tid>, out: Tid, widths: Vec<usize> },
    Gather { a: Tid, out: Tid, idx: Arc<Vec<i64>> },
    Resample { a: Tid, out: Tid, h: usize, w: usize, c: usize, oh: usize, ow: usize, map: AxisMap },
    Scan { u: Tid, ga: Tid, gb: Tid, gc: Tid, out: Tid, state: Vec<E>, len: usize, dim: usize },
    ReverseRows { a: Tid, out: Tid, cols: usize },
}

impl<E: Element> Op<E> {
    pub(crate) fn output(&self) -> Tid {
        match *self {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Neg { out, .. }
            | Op::Scale { out, .. }
            | Op::Gelu { out, .. }
            | Op::Silu { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Softmax { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::Dropout { out, .. }
            | Op::DropPath { out, .. }
            | Op::Sum { out, .. }
            | Op::Reshape { out, .. }
            | Op::Transpose { out, .. }
            | Op::SliceRows { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::Gather { out, .. }
            | Op::Resample { out, .. }
            | Op::Scan { out, .. }
            | Op::ReverseRows { out, .. } => out,
        }
    }
}

fn gelu_val<E: Element>(x: E) -> E {
    let xf = x.to_f64();
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = k * (xf + 0.044715 * xf * xf * xf);
    E::from_f64(0.5 * xf * (1.0 + inner.tanh()))
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = k * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<E: Element> Graph<E> {
    fn bcast_kind(&self, op: &'static str, a: Tid, b: Tid) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() == 1 && sb[0] == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Bcast::Trailing)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Standard 2-D product; backward is dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![E::zero(); m * n];
        linalg::matmul_acc(self.data(a), self.data(b), &mut data, m, k, n);
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_result(data, vec![m, n], rg);
        self.check_finite("matmul", out)?;
        self.record(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn transpose2d(&mut self, a: Tid) -> Result<Tid> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![E::zero(); m * n];
        linalg::transpose_into(self.data(a), &mut data, m, n);
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, vec![n, m], rg);
        self.record(Op::Transpose { a, out, m, n });
        Ok(out)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let kind = self.bcast_kind("add", a, b)?;
        let av = self.data(a);
        let bv = self.data(b);
        let cols = *self.shape(a).last().unwrap_or(&1);
        let data: Vec<E> = match kind {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Bcast::Scalar => av.iter().map(|&x| x + bv[0]).collect(),
            Bcast::Trailing => av
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % cols])
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("add", out)?;
        self.record(Op::Add { a, b, out, kind });
        Ok(out)
    }

    /// Same-shape subtraction.
    pub fn sub(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("sub", out)?;
        self.record(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let kind = self.bcast_kind("mul", a, b)?;
        let av = self.data(a);
        let bv = self.data(b);
        let cols = *self.shape(a).last().unwrap_or(&1);
        let data: Vec<E> = match kind {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
            Bcast::Scalar => av.iter().map(|&x| x * bv[0]).collect(),
            Bcast::Trailing => av
                .iter()
                .enumerate()
                .map(|(i, &x)| x * bv[i % cols])
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("mul", out)?;
        self.record(Op::Mul { a, b, out, kind });
        Ok(out)
    }

    pub fn neg(&mut self, a: Tid) -> Result<Tid> {
        let data: Vec<E> = self.data(a).iter().map(|&x| -x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.record(Op::Neg { a, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Result<Tid> {
        let cc = E::from_f64(c);
        let data: Vec<E> = self.data(a).iter().map(|&x| x * cc).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("scale", out)?;
        self.record(Op::Scale { a, out, c: cc });
        Ok(out)
    }

    pub fn gelu(&mut self, a: Tid) -> Result<Tid> {
        let data: Vec<E> = self.data(a).iter().map(|&x| gelu_val(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("gelu", out)?;
        self.record(Op::Gelu { a, out });
        Ok(out)
    }

    pub fn silu(&mut self, a: Tid) -> Result<Tid> {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| {
                let xf = x.to_f64();
                E::from_f64(xf * sigmoid_val(xf))
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("silu", out)?;
        self.record(Op::Silu { a, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: Tid) -> Result<Tid> {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| E::from_f64(sigmoid_val(x.to_f64())))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("sigmoid", out)?;
        self.record(Op::Sigmoid { a, out });
        Ok(out)
    }

    /// Row-stochastic softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Tid) -> Result<Tid> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let av = self.data(a);
        let mut data = vec![E::zero(); av.len()];
        for r in 0..av.len() / cols {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v.to_f64() - max).exp();
                data[r * cols + j] = E::from_f64(e);
                denom += e;
            }
            for j in 0..cols {
                data[r * cols + j] = E::from_f64(data[r * cols + j].to_f64() / denom);
            }
        }
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("softmax", out)?;
        self.record(Op::Softmax { a, out, cols });
        Ok(out)
    }

    /// Per-last-axis normalization then scale-shift. Zero-variance rows map
    /// to zero before the affine (eps keeps the denominator finite).
    pub fn layernorm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Result<Tid> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.data(x);
        let gv = self.data(gamma);
        let bv = self.data(beta);
        let rows = xv.len() / cols;
        let mut data = vec![E::zero(); xv.len()];
        let mut means = vec![E::zero(); rows];
        let mut rstds = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = E::from_f64(mean);
            rstds[r] = E::from_f64(rstd);
            for j in 0..cols {
                let xhat = (row[j].to_f64() - mean) * rstd;
                data[r * cols + j] =
                    E::from_f64(xhat * gv[j].to_f64() + bv[j].to_f64());
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let out = self.push_result(data, shape, rg);
        self.check_finite("layernorm", out)?;
        self.record(Op::LayerNorm {
            x,
            gamma,
            beta,
            out,
            cols,
            mean: means,
            rstd: rstds,
        });
        Ok(out)
    }

    /// Mean smoothed negative log-likelihood over the batch (rows of logits).
    pub fn cross_entropy(
        &mut self,
        logits: Tid,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Tid> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Config(format!(
                    "cross_entropy: target {t} at row {i} out of range for {cols} classes"
                )));
            }
        }
        let lv = self.data(logits);
        let mut probs = vec![E::zero(); rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
            let lse = row
                .iter()
                .map(|&v| (v.to_f64() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            let t = targets[r];
            let mut loss_r = -(1.0 - smoothing) * (row[t].to_f64() - lse);
            for j in 0..cols {
                let logp = row[j].to_f64() - lse;
                probs[r * cols + j] = E::from_f64(logp.exp());
                if smoothing > 0.0 {
                    loss_r -= smoothing / cols as f64 * logp;
                }
            }
            total += loss_r;
        }
        let rg = self.any_requires_grad(&[logits]);
        let out = self.push_result(vec![E::from_f64(total / rows as f64)], vec![1], rg);
        self.check_finite("cross_entropy", out)?;
        self.record(Op::CrossEntropy {
            logits,
            out,
            targets: Arc::new(targets.to_vec()),
            smoothing,
            probs,
            cols,
        });
        Ok(out)
    }

    /// Inverted dropout; identity in eval mode or at p = 0.
    pub fn dropout(&mut self, a: Tid, p: f64) -> Result<Tid> {
        if !self.training() || p <= 0.0 {
            return Ok(a);
        }
        let n = self.data(a).len();
        let keep_scale = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
        let mask: Vec<E> = (0..n)
            .map(|_| {
                if self.rng.as_mut().expect("train graph rng").uniform() < p {
                    E::zero()
                } else {
                    E::from_f64(keep_scale)
                }
            })
            .collect();
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.record(Op::Dropout { a, out, mask });
        Ok(out)
    }

    /// Stochastic depth: zero whole per-sample blocks of the leading axis
    /// with probability p, rescaling survivors by 1/(1-p). Identity in eval
    /// mode or at p = 0.
    pub fn drop_path(&mut self, a: Tid, p: f64, samples: usize) -> Result<Tid> {
        if !self.training() || p <= 0.0 {
            return Ok(a);
        }
        let rows = self.shape(a)[0];
        if samples == 0 || rows % samples != 0 {
            return Err(Error::ShapeMismatch {
                op: "drop_path",
                lhs: self.shape(a).to_vec(),
                rhs: vec![samples],
            });
        }
        let keep_scale = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
        let factors: Vec<E> = (0..samples)
            .map(|_| {
                if self.rng.as_mut().expect("train graph rng").uniform() < p {
                    E::zero()
                } else {
                    E::from_f64(keep_scale)
                }
            })
            .collect();
        let block = self.data(a).len() / samples;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * factors[i / block])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.record(Op::DropPath {
            a,
            out,
            factors,
            block,
        });
        Ok(out)
    }

    // ── Reductions and data movement ────────────────────────────────

    pub fn sum(&mut self, a: Tid) -> Result<Tid> {
        let total: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(vec![E::from_f64(total)], vec![1], rg);
        self.check_finite("sum", out)?;
        self.record(Op::Sum { a, out });
        Ok(out)
    }

    pub fn mean(&mut self, a: Tid) -> Result<Tid> {
        let n = self.data(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Tid, shape: Vec<usize>) -> Result<Tid> {
        if super::numel(&shape) != self.data(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.record(Op::Reshape { a, out });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: Tid, start: usize, rows: usize) -> Result<Tid> {
        let s = self.shape(a).to_vec();
        let cols: usize = s[1..].iter().product();
        if s.is_empty() || start + rows > s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start, rows],
            });
        }
        let data = self.data(a)[start * cols..(start + rows) * cols].to_vec();
        let mut shape = s.clone();
        shape[0] = rows;
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.record(Op::SliceRows {
            a,
            out,
            start,
            rows,
            cols,
        });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[Tid]) -> Result<Tid> {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let cols: usize = first[1..].iter().product();
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first,
                    rhs: sp.to_vec(),
                });
            }
            rows += sp[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let rg = self.any_requires_grad(parts);
        let out = self.push_result(data, shape, rg);
        self.record(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
            cols,
        });
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: Tid, start: usize, width: usize) -> Result<Tid> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + width > s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, width],
            });
        }
        let (rows, cols_in) = (s[0], s[1]);
        let av = self.data(a);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av[r * cols_in + start..r * cols_in + start + width]);
        }
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, vec![rows, width], rg);
        self.record(Op::SliceCols {
            a,
            out,
            start,
            cols_out: width,
            cols_in,
        });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Tid]) -> Result<Tid> {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: sp.to_vec(),
                });
            }
            widths.push(sp[1]);
            total += sp[1];
        }
        let mut data = vec![E::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.data(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.any_requires_grad(parts);
        let out = self.push_result(data, vec![rows, total], rg);
        self.record(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
            widths,
        });
        Ok(out)
    }

    /// Pure data movement: out[k] = a[idx[k]], with idx[k] = -1 reading zero.
    /// Backward scatter-adds. This is the im2col primitive behind both the
    /// patchify layer and the 3x3 convolutions of the decoder proxy.
    pub fn gather(&mut self, a: Tid, idx: Arc<Vec<i64>>, shape: Vec<usize>) -> Result<Tid> {
        if super::numel(&shape) != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        let av = self.data(a);
        let data: Vec<E> = idx
            .iter()
            .map(|&i| if i < 0 { E::zero() } else { av[i as usize] })
            .collect();
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, shape, rg);
        self.record(Op::Gather { a, out, idx });
        Ok(out)
    }

    /// Bilinear resample of a channels-last [h×w×c] grid.
    pub fn resample2d(
        &mut self,
        a: Tid,
        oh: usize,
        ow: usize,
        map: AxisMap,
    ) -> Result<Tid> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "resample2d",
                lhs: s,
                rhs: vec![oh, ow],
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut data = vec![E::zero(); oh * ow * c];
        linalg::resample_grid(self.data(a), h, w, c, oh, ow, map, &mut data);
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, vec![oh, ow, c], rg);
        self.check_finite("resample2d", out)?;
        self.record(Op::Resample {
            a,
            out,
            h,
            w,
            c,
            oh,
            ow,
            map,
        });
        Ok(out)
    }

    /// Gated linear recurrence over rows:
    ///   h_t = a_t ⊙ h_{t-1} + b_t ⊙ u_t,   y_t = c_t ⊙ h_t
    /// Strictly causal; linear in sequence length. All inputs are [L×S].
    pub fn scan(&mut self, u: Tid, ga: Tid, gb: Tid, gc: Tid) -> Result<Tid> {
        let s = self.shape(u).to_vec();
        for &t in &[ga, gb, gc] {
            if self.shape(t) != s {
                return Err(Error::ShapeMismatch {
                    op: "scan",
                    lhs: s,
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "scan",
                lhs: s,
                rhs: vec![],
            });
        }
        let (len, dim) = (s[0], s[1]);
        let (uv, av, bv, cv) = (self.data(u), self.data(ga), self.data(gb), self.data(gc));
        let mut state = vec![E::zero(); len * dim];
        let mut data = vec![E::zero(); len * dim];
        let mut h = vec![E::zero(); dim];
        for t in 0..len {
            for j in 0..dim {
                let i = t * dim + j;
                h[j] = av[i] * h[j] + bv[i] * uv[i];
                state[i] = h[j];
                data[i] = cv[i] * h[j];
            }
        }
        let rg = self.any_requires_grad(&[u, ga, gb, gc]);
        let out = self.push_result(data, s, rg);
        self.check_finite("scan", out)?;
        self.record(Op::Scan {
            u,
            ga,
            gb,
            gc,
            out,
            state,
            len,
            dim,
        });
        Ok(out)
    }

    pub fn reverse_rows(&mut self, a: Tid) -> Result<Tid> {
        let s = self.shape(a).to_vec();
        let cols: usize = s[1..].iter().product();
        let rows = s[0];
        let av = self.data(a);
        let mut data = Vec::with_capacity(av.len());
        for r in (0..rows).rev() {
            data.extend_from_slice(&av[r * cols..(r + 1) * cols]);
        }
        let rg = self.any_requires_grad(&[a]);
        let out = self.push_result(data, s, rg);
        self.record(Op::ReverseRows { a, out, cols });
        Ok(out)
    }

    // ── Backward rules ──────────────────────────────────────────────

    fn take_out_grad(&mut self, out: Tid) -> Option<Vec<E>> {
        self.nodes[out.0].grad.take()
    }

    fn acc_into(&mut self, t: Tid, contrib: &[E]) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let g = self.grad_or_zeros(t);
        for (gv, &c) in g.iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    pub(crate) fn backward_op(&mut self, op: &Op<E>) {
        let out = op.output();
        let d = match self.take_out_grad(out) {
            Some(d) => d,
            None => return,
        };
        match op {
            Op::Matmul { a, b, m, k, n, .. } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let mut bt = vec![E::zero(); k * n];
                    linalg::transpose_into(self.data(*b), &mut bt, k, n);
                    let ga = self.grad_or_zeros(*a);
                    linalg::matmul_acc(&d, &bt, ga, m, n, k);
                }
                if self.nodes[b.0].requires_grad {
                    let mut at = vec![E::zero(); m * k];
                    linalg::transpose_into(self.data(*a), &mut at, m, k);
                    let gb = self.grad_or_zeros(*b);
                    linalg::matmul_acc(&at, &d, gb, k, m, n);
                }
            }
            Op::Add { a, b, kind, .. } => {
                self.acc_into(*a, &d);
                if self.nodes[b.0].requires_grad {
                    match kind {
                        Bcast::Same => self.acc_into(*b, &d),
                        Bcast::Scalar => {
                            let s: E = d.iter().copied().sum();
                            self.acc_into(*b, &[s]);
                        }
                        Bcast::Trailing => {
                            let cols = self.nodes[b.0].data.len();
                            let mut gb = vec![E::zero(); cols];
                            for (i, &dv) in d.iter().enumerate() {
                                gb[i % cols] += dv;
                            }
                            self.acc_into(*b, &gb);
                        }
                    }
                }
            }
            Op::Sub { a, b, .. } => {
                self.acc_into(*a, &d);
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<E> = d.iter().map(|&x| -x).collect();
                    self.acc_into(*b, &neg);
                }
            }
            Op::Mul { a, b, kind, .. } => {
                let cols = self.nodes[b.0].data.len();
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].data;
                    let contrib: Vec<E> = match kind {
                        Bcast::Same => d.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
                        Bcast::Scalar => d.iter().map(|&x| x * bv[0]).collect(),
                        Bcast::Trailing => d
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x * bv[i % cols])
                            .collect(),
                    };
                    self.acc_into(*a, &contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].data;
                    let contrib: Vec<E> = match kind {
                        Bcast::Same => d.iter().zip(av).map(|(&x, &y)| x * y).collect(),
                        Bcast::Scalar => {
                            vec![d.iter().zip(av).map(|(&x, &y)| x * y).sum()]
                        }
                        Bcast::Trailing => {
                            let mut gb = vec![E::zero(); cols];
                            for (i, (&dv, &avv)) in d.iter().zip(av).enumerate() {
                                gb[i % cols] += dv * avv;
                            }
                            gb
                        }
                    };
                    self.acc_into(*b, &contrib);
                }
            }
            Op::Neg { a, .. } => {
                let contrib: Vec<E> = d.iter().map(|&x| -x).collect();
                self.acc_into(*a, &contrib);
            }
            Op::Scale { a, c, .. } => {
                let contrib: Vec<E> = d.iter().map(|&x| x * *c).collect();
                self.acc_into(*a, &contrib);
            }
            Op::Gelu { a, .. } => {
                let av = &self.nodes[a.0].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(av)
                    .map(|(&dv, &x)| E::from_f64(dv.to_f64() * gelu_grad(x.to_f64())))
                    .collect();
                self.acc_into(*a, &contrib);
            }
            Op::Silu { a, .. } => {
                let av = &self.nodes[a.0].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(av)
                    .map(|(&dv, &x)| {
                        let xf = x.to_f64();
                        let s = sigmoid_val(xf);
                        E::from_f64(dv.to_f64() * s * (1.0 + xf * (1.0 - s)))
                    })
                    .collect();
                self.acc_into(*a, &contrib);
            }
            Op::Sigmoid { a, .. } => {
                let yv = &self.nodes[out.0].data;
                let contrib: Vec<E> = d
                    .iter()
                    .zip(yv)
                    .map(|(&dv, &y)| dv * y * (E::one() - y))
                    .collect();
                self.acc_into(*a, &contrib);
            }
            Op::Softmax { a, cols, .. } => {
                let yv = &self.nodes[out.0].data;
                let mut contrib = vec![E::zero(); d.len()];
                for r in 0..d.len() / cols {
                    let base = r * cols;
                    let dot: f64 = (0..*cols)
                        .map(|j| d[base + j].to_f64() * yv[base + j].to_f64())
                        .sum();
                    for j in 0..*cols {
                        contrib[base + j] = E::from_f64(
                            yv[base + j].to_f64() * (d[base + j].to_f64() - dot),
                        );
                    }
                }
                self.acc_into(*a, &contrib);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                mean,
                rstd,
                ..
            } => {
                let cols = *cols;
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gamma.0].data;
                let rows = xv.len() / cols;
                let mut dx = vec![E::zero(); xv.len()];
                let mut dgamma = vec![E::zero(); cols];
                let mut dbeta = vec![E::zero(); cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mu = mean[r].to_f64();
                    let ir = rstd[r].to_f64();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (xv[base + j].to_f64() - mu) * ir;
                        let dv = d[base + j].to_f64();
                        dgamma[j] += E::from_f64(dv * xhat);
                        dbeta[j] += E::from_f64(dv);
                        let dxhat = dv * gv[j].to_f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let n = cols as f64;
                    for j in 0..cols {
                        let xhat = (xv[base + j].to_f64() - mu) * ir;
                        let dxhat = d[base + j].to_f64() * gv[j].to_f64();
                        dx[base + j] = E::from_f64(
                            ir * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n),
                        );
                    }
                }
                self.acc_into(*x, &dx);
                self.acc_into(*gamma, &dgamma);
                self.acc_into(*beta, &dbeta);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                cols,
                ..
            } => {
                let cols = *cols;
                let rows = probs.len() / cols;
                let g = d[0].to_f64() / rows as f64;
                let mut contrib = vec![E::zero(); probs.len()];
                for r in 0..rows {
                    let t = targets[r];
                    for j in 0..cols {
                        let q = if j == t { 1.0 - smoothing } else { 0.0 }
                            + smoothing / cols as f64;
                        contrib[r * cols + j] =
                            E::from_f64(g * (probs[r * cols + j].to_f64() - q));
                    }
                }
                self.acc_into(*logits, &contrib);
            }
            Op::Dropout { a, mask, .. } => {
                let contrib: Vec<E> = d.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.acc_into(*a, &contrib);
            }
            Op::DropPath {
                a, factors, block, ..
            } => {
                let contrib: Vec<E> = d
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * factors[i / block])
                    .collect();
                self.acc_into(*a, &contrib);
            }
            Op::Sum { a, .. } => {
                let n = self.nodes[a.0].data.len();
                let contrib = vec![d[0]; n];
                self.acc_into(*a, &contrib);
            }
            Op::Reshape { a, .. } => {
                self.acc_into(*a, &d);
            }
            Op::Transpose { a, m, n, .. } => {
                let mut contrib = vec![E::zero(); d.len()];
                // d has shape [n×m]; transpose back to [m×n].
                linalg::transpose_into(&d, &mut contrib, *n, *m);
                self.acc_into(*a, &contrib);
            }
            Op::SliceRows {
                a,
                start,
                rows,
                cols,
                ..
            } => {
                if self.nodes[a.0].requires_grad {
                    let g = self.grad_or_zeros(*a);
                    for i in 0..rows * cols {
                        g[start * cols + i] += d[i];
                    }
                }
            }
            Op::ConcatRows { parts, cols, .. } => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.nodes[p.0].data.len() / cols;
                    let seg = d[off..off + rows * cols].to_vec();
                    self.acc_into(p, &seg);
                    off += rows * cols;
                }
            }
            Op::SliceCols {
                a,
                start,
                cols_out,
                cols_in,
                ..
            } => {
                if self.nodes[a.0].requires_grad {
                    let rows = d.len() / cols_out;
                    let g = self.grad_or_zeros(*a);
                    for r in 0..rows {
                        for j in 0..*cols_out {
                            g[r * cols_in + start + j] += d[r * cols_out + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts, widths, .. } => {
                let total: usize = widths.iter().sum();
                let rows = d.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.nodes[p.0].requires_grad {
                        let mut seg = vec![E::zero(); rows * w];
                        for r in 0..rows {
                            seg[r * w..(r + 1) * w]
                                .copy_from_slice(&d[r * total + off..r * total + off + w]);
                        }
                        self.acc_into(p, &seg);
                    }
                    off += w;
                }
            }
            Op::Gather { a, idx, .. } => {
                if self.nodes[a.0].requires_grad {
                    let g = self.grad_or_zeros(*a);
                    for (k, &i) in idx.iter().enumerate() {
                        if i >= 0 {
                            g[i as usize] += d[k];
                        }
                    }
                }
            }
            Op::Resample {
                a,
                h,
                w,
                c,
                oh,
                ow,
                map,
                ..
            } => {
                if self.nodes[a.0].requires_grad {
                    let mut contrib = vec![E::zero(); h * w * c];
                    linalg::resample_grid_adjoint(&d, *h, *w, *c, *oh, *ow, *map, &mut contrib);
                    self.acc_into(*a, &contrib);
                }
            }
            Op::Scan {
                u,
                ga,
                gb,
                gc,
                state,
                len,
                dim,
                ..
            } => {
                let (len, dim) = (*len, *dim);
                let uv = &self.nodes[u.0].data;
                let av = &self.nodes[ga.0].data;
                let bv = &self.nodes[gb.0].data;
                let cv = &self.nodes[gc.0].data;
                let mut du = vec![E::zero(); len * dim];
                let mut da = vec![E::zero(); len * dim];
                let mut db = vec![E::zero(); len * dim];
                let mut dc = vec![E::zero(); len * dim];
                let mut dh = vec![E::zero(); dim];
                for t in (0..len).rev() {
                    for j in 0..dim {
                        let i = t * dim + j;
                        dc[i] = d[i] * state[i];
                        let dht = dh[j] + d[i] * cv[i];
                        if t > 0 {
                            da[i] = dht * state[(t - 1) * dim + j];
                        }
                        db[i] = dht * uv[i];
                        du[i] = dht * bv[i];
                        dh[j] = dht * av[i];
                    }
                }
                self.acc_into(*u, &du);
                self.acc_into(*ga, &da);
                self.acc_into(*gb, &db);
                self.acc_into(*gc, &dc);
            }
            Op::ReverseRows { a, cols, .. } => {
                let rows = d.len() / cols;
                let mut contrib = vec![E::zero(); d.len()];
                for r in 0..rows {
                    contrib[(rows - 1 - r) * cols..(rows - r) * cols]
                        .copy_from_slice(&d[r * cols..(r + 1) * cols]);
                }
                self.acc_into(*a, &contrib);
            }
        }
    }
}
