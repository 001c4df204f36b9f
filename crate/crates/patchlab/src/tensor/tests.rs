use std::sync::Arc;

use super::gradcheck::{central_diff, rel_err};
use super::linalg::AxisMap;
use super::{Graph, Mode, Rng, Tid};
use crate::error::Error;

fn leaf64(g: &mut Graph<f64>, data: &[f64], shape: &[usize]) -> Tid {
    g.leaf(data.to_vec(), shape.to_vec(), true).unwrap()
}

fn randv(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Generic finite-difference check: loss = Σ w ⊙ op(inputs), comparing the
/// analytic gradient of every input against central differences.
fn fd_check<F>(inputs: &[(&[f64], &[usize])], build: F, tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Tid]) -> Tid,
{
    let mut wrng = Rng::new(777);
    // Forward once to size the weights.
    let out_len = {
        let mut g = Graph::recorded_eval();
        let tids: Vec<Tid> = inputs
            .iter()
            .map(|(d, s)| leaf64(&mut g, d, s))
            .collect();
        let out = build(&mut g, &tids);
        g.data(out).len()
    };
    let w = randv(&mut wrng, out_len);

    let loss_of = |flat: &[f64]| -> f64 {
        let mut g = Graph::recorded_eval();
        let mut tids = Vec::new();
        let mut off = 0;
        for (d, s) in inputs {
            let n = d.len();
            tids.push(leaf64(&mut g, &flat[off..off + n], s));
            off += n;
        }
        let out = build(&mut g, &tids);
        g.data(out)
            .iter()
            .zip(&w)
            .map(|(&o, &wv)| o * wv)
            .sum()
    };

    // Analytic gradients.
    let mut g = Graph::recorded_eval();
    let tids: Vec<Tid> = inputs
        .iter()
        .map(|(d, s)| leaf64(&mut g, d, s))
        .collect();
    let out = build(&mut g, &tids);
    let wt = g.constant(w.clone(), vec![out_len]).unwrap();
    let flat_out = g.reshape(out, vec![out_len]).unwrap();
    let weighted = g.mul(flat_out, wt).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = tids
        .iter()
        .map(|&t| g.grad(t).expect("grad").to_vec())
        .collect();

    // Numeric gradients over the concatenation of all inputs.
    let flat: Vec<f64> = inputs.iter().flat_map(|(d, _)| d.iter().copied()).collect();
    let numeric = central_diff(loss_of, &flat, 1e-5);

    let mut off = 0;
    for (i, (d, _)) in inputs.iter().enumerate() {
        for j in 0..d.len() {
            let e = rel_err(analytic[i][j], numeric[off + j]);
            assert!(
                e < tol,
                "input {i} elem {j}: analytic {} vs numeric {} (rel {e})",
                analytic[i][j],
                numeric[off + j]
            );
        }
        off += d.len();
    }
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity_case() {
    let mut g: Graph<f64> = Graph::inference();
    let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
    let b = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_by_column() {
    let mut g: Graph<f64> = Graph::inference();
    let a = g.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
    let b = g.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g: Graph<f64> = Graph::inference();
    let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = g.constant(vec![0.0; 8], vec![4, 2]).unwrap();
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let a = randv(&mut rng, 5 * 7);
    let b = randv(&mut rng, 7 * 3);
    fd_check(
        &[(&a, &[5, 7]), (&b, &[7, 3])],
        |g, t| g.matmul(t[0], t[1]).unwrap(),
        1e-4,
    );
}

// ── layernorm ───────────────────────────────────────────────────────

fn ln_params(g: &mut Graph<f64>, d: usize) -> (Tid, Tid) {
    let gamma = g.constant(vec![1.0; d], vec![d]).unwrap();
    let beta = g.constant(vec![0.0; d], vec![d]).unwrap();
    (gamma, beta)
}

#[test]
fn layernorm_constant_rows_map_to_zero() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![5.0; 8], vec![2, 4]).unwrap();
    let (gamma, beta) = ln_params(&mut g, 4);
    let y = g.layernorm(x, gamma, beta, 1e-6).unwrap();
    for &v in g.data(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layernorm_two_point_row() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![1.0, 3.0], vec![1, 2]).unwrap();
    let (gamma, beta) = ln_params(&mut g, 2);
    let y = g.layernorm(x, gamma, beta, 0.0).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-12);
    assert!((g.data(y)[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layernorm_normalizes_random_rows() {
    let mut rng = Rng::new(2);
    let mut g: Graph<f64> = Graph::inference();
    let d = 64;
    let x = g.constant(randv(&mut rng, 3 * d), vec![3, d]).unwrap();
    let (gamma, beta) = ln_params(&mut g, d);
    let y = g.layernorm(x, gamma, beta, 1e-12).unwrap();
    for r in 0..3 {
        let row = &g.data(y)[r * d..(r + 1) * d];
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
}

#[test]
fn layernorm_rejects_width_mismatch() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let gamma = g.constant(vec![1.0; 4], vec![4]).unwrap();
    let beta = g.constant(vec![0.0; 4], vec![4]).unwrap();
    assert!(g.layernorm(x, gamma, beta, 1e-6).is_err());
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let x = randv(&mut rng, 2 * 5);
    let gamma: Vec<f64> = (0..5).map(|i| 0.5 + 0.1 * i as f64).collect();
    let beta: Vec<f64> = (0..5).map(|i| -0.2 + 0.05 * i as f64).collect();
    fd_check(
        &[(&x, &[2, 5]), (&gamma, &[5]), (&beta, &[5])],
        |g, t| g.layernorm(t[0], t[1], t[2], 1e-6).unwrap(),
        1e-4,
    );
}

// ── softmax ─────────────────────────────────────────────────────────

#[test]
fn softmax_uniform() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![0.0, 0.0, 0.0], vec![1, 3]).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_extreme_logits_stable() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![1000.0, 0.0], vec![1, 2]).unwrap();
    let y = g.softmax(x).unwrap();
    assert!((g.data(y)[0] - 1.0).abs() < 1e-30);
    assert!(g.data(y)[1] < 1e-30);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(4);
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(randv(&mut rng, 6 * 9), vec![6, 9]).unwrap();
    let y = g.softmax(x).unwrap();
    for r in 0..6 {
        let s: f64 = g.data(y)[r * 9..(r + 1) * 9].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::new(6);
    let x = randv(&mut rng, 3 * 4);
    fd_check(&[(&x, &[3, 4])], |g, t| g.softmax(t[0]).unwrap(), 1e-4);
}

// ── elementwise suite ───────────────────────────────────────────────

#[test]
fn gelu_at_zero() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![0.0], vec![1]).unwrap();
    let y = g.gelu(x).unwrap();
    assert_eq!(g.data(y)[0], 0.0);
}

#[test]
fn unary_gradients_match_finite_differences() {
    let mut rng = Rng::new(7);
    let x = randv(&mut rng, 17);
    fd_check(&[(&x, &[17])], |g, t| g.gelu(t[0]).unwrap(), 1e-4);
    fd_check(&[(&x, &[17])], |g, t| g.silu(t[0]).unwrap(), 1e-4);
    fd_check(&[(&x, &[17])], |g, t| g.sigmoid(t[0]).unwrap(), 1e-4);
}

#[test]
fn add_mul_broadcast_gradients() {
    let mut rng = Rng::new(8);
    let a = randv(&mut rng, 3 * 4);
    let b = randv(&mut rng, 4);
    let s = randv(&mut rng, 1);
    fd_check(
        &[(&a, &[3, 4]), (&b, &[4])],
        |g, t| g.add(t[0], t[1]).unwrap(),
        1e-4,
    );
    fd_check(
        &[(&a, &[3, 4]), (&b, &[4])],
        |g, t| g.mul(t[0], t[1]).unwrap(),
        1e-4,
    );
    fd_check(
        &[(&a, &[3, 4]), (&s, &[1])],
        |g, t| g.mul(t[0], t[1]).unwrap(),
        1e-4,
    );
}

#[test]
fn incompatible_broadcast_rejected() {
    let mut g: Graph<f64> = Graph::inference();
    let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = g.constant(vec![0.0; 2], vec![2]).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn drop_path_p0_is_identity() {
    let mut g: Graph<f64> = Graph::train(Rng::new(0));
    let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let y = g.drop_path(x, 0.0, 1).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_eval_mode_is_identity() {
    let mut g: Graph<f64> = Graph::recorded_eval();
    let x = g.constant(vec![1.0; 4], vec![4]).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_train_mode_is_mean_preserving() {
    // Monte Carlo over 10^6 mask draws: mean of mask/(1-p) within 1 ± 0.01.
    let p = 0.3;
    let n = 1_000_000;
    let mut g: Graph<f64> = Graph::train(Rng::new(123));
    let x = g.constant(vec![1.0; n], vec![n]).unwrap();
    let y = g.dropout(x, p).unwrap();
    let mean: f64 = g.data(y).iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn drop_path_zeroes_whole_samples() {
    let mut g: Graph<f64> = Graph::train(Rng::new(9));
    let x = g.constant(vec![1.0; 40], vec![10, 4]).unwrap();
    let y = g.drop_path(x, 0.5, 10).unwrap();
    for r in 0..10 {
        let row = &g.data(y)[r * 4..(r + 1) * 4];
        let zero = row.iter().all(|&v| v == 0.0);
        let scaled = row.iter().all(|&v| (v - 2.0).abs() < 1e-12);
        assert!(zero || scaled, "row {r} mixed: {row:?}");
    }
}

// ── cross entropy ───────────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_logits() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![0.5; 8], vec![2, 4]).unwrap();
    let loss = g.cross_entropy(x, &[1, 3], 0.0).unwrap();
    assert!((g.value(loss) - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_is_zero() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g
        .constant(vec![1000.0, 0.0, 0.0, 0.0], vec![1, 4])
        .unwrap();
    let loss = g.cross_entropy(x, &[0], 0.0).unwrap();
    assert!(g.value(loss).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_independent_oracle() {
    // Oracle: direct log-sum-exp NLL with smoothing, coded separately.
    fn oracle(logits: &[f64], rows: usize, cols: usize, targets: &[usize], s: f64) -> f64 {
        let mut total = 0.0;
        for r in 0..rows {
            let row = &logits[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let mut l = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let q = if j == targets[r] { 1.0 - s } else { 0.0 } + s / cols as f64;
                if q > 0.0 {
                    l -= q * (v - lse);
                }
            }
            total += l;
        }
        total / rows as f64
    }
    let mut rng = Rng::new(11);
    let logits = randv(&mut rng, 5 * 7);
    let targets = [0usize, 3, 6, 2, 5];
    for &s in &[0.0, 0.1] {
        let mut g: Graph<f64> = Graph::inference();
        let x = g.constant(logits.clone(), vec![5, 7]).unwrap();
        let loss = g.cross_entropy(x, &targets, s).unwrap();
        let want = oracle(&logits, 5, 7, &targets, s);
        assert!((g.value(loss) - want).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g.constant(vec![0.0; 4], vec![1, 4]).unwrap();
    assert!(g.cross_entropy(x, &[4], 0.0).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(12);
    let x = randv(&mut rng, 4 * 5);
    fd_check(
        &[(&x, &[4, 5])],
        |g, t| g.cross_entropy(t[0], &[1, 0, 4, 2], 0.1).unwrap(),
        1e-4,
    );
}

// ── backward semantics ──────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut g: Graph<f64> = Graph::recorded_eval();
    let x = leaf64(&mut g, &[1.0, -2.0, 3.0], &[3]);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_sum_of_squares_gives_2x() {
    let mut g: Graph<f64> = Graph::recorded_eval();
    let x = leaf64(&mut g, &[1.0, -2.0, 3.0], &[3]);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g: Graph<f64> = Graph::recorded_eval();
    let x = leaf64(&mut g, &[1.0, 2.0], &[2]);
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_twice_rejected() {
    let mut g: Graph<f64> = Graph::recorded_eval();
    let x = leaf64(&mut g, &[1.0, 2.0], &[2]);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    match g.backward(loss) {
        Err(Error::Autodiff(msg)) => assert!(msg.contains("consumed")),
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn unreachable_grads_untouched() {
    let mut g: Graph<f64> = Graph::recorded_eval();
    let x = leaf64(&mut g, &[1.0, 2.0], &[2]);
    let orphan = leaf64(&mut g, &[5.0], &[1]);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(orphan).is_none());
}

// ── data movement ops ───────────────────────────────────────────────

#[test]
fn slice_concat_gradients() {
    let mut rng = Rng::new(13);
    let a = randv(&mut rng, 4 * 3);
    let b = randv(&mut rng, 2 * 3);
    fd_check(
        &[(&a, &[4, 3]), (&b, &[2, 3])],
        |g, t| {
            let top = g.slice_rows(t[0], 1, 2).unwrap();
            let cat = g.concat_rows(&[top, t[1]]).unwrap();
            let left = g.slice_cols(cat, 0, 2).unwrap();
            let right = g.slice_cols(cat, 2, 1).unwrap();
            g.concat_cols(&[right, left]).unwrap()
        },
        1e-4,
    );
}

#[test]
fn gather_zero_pad_and_gradient() {
    let mut rng = Rng::new(14);
    let a = randv(&mut rng, 6);
    fd_check(
        &[(&a, &[6])],
        |g, t| {
            let idx = Arc::new(vec![0i64, -1, 5, 2, 2, -1]);
            g.gather(t[0], idx, vec![6]).unwrap()
        },
        1e-4,
    );
}

#[test]
fn resample_gradient_matches_finite_differences() {
    let mut rng = Rng::new(15);
    let a = randv(&mut rng, 3 * 3 * 2);
    fd_check(
        &[(&a, &[3, 3, 2])],
        |g, t| g.resample2d(t[0], 5, 7, AxisMap::AlignCorners).unwrap(),
        1e-4,
    );
    fd_check(
        &[(&a, &[3, 3, 2])],
        |g, t| g.resample2d(t[0], 6, 6, AxisMap::Stride(2)).unwrap(),
        1e-4,
    );
}

#[test]
fn reverse_rows_involution() {
    let mut g: Graph<f64> = Graph::inference();
    let x = g
        .constant((0..12).map(|v| v as f64).collect(), vec![4, 3])
        .unwrap();
    let r = g.reverse_rows(x).unwrap();
    let rr = g.reverse_rows(r).unwrap();
    assert_eq!(g.data(x), g.data(rr));
}

// ── scan ────────────────────────────────────────────────────────────

#[test]
fn scan_memoryless_when_decay_zero() {
    let mut g: Graph<f64> = Graph::inference();
    let n = 4;
    let u = g
        .constant(vec![1.0, -2.0, 3.0, 0.5], vec![n, 1])
        .unwrap();
    let ga = g.constant(vec![0.0; n], vec![n, 1]).unwrap();
    let gb = g.constant(vec![2.0; n], vec![n, 1]).unwrap();
    let gc = g.constant(vec![1.0; n], vec![n, 1]).unwrap();
    let y = g.scan(u, ga, gb, gc).unwrap();
    assert_eq!(g.data(y), &[2.0, -4.0, 6.0, 1.0]);
}

#[test]
fn scan_prefix_sums() {
    let mut g: Graph<f64> = Graph::inference();
    let u = g.constant(vec![1.0, 1.0, 1.0], vec![3, 1]).unwrap();
    let ones = g.constant(vec![1.0; 3], vec![3, 1]).unwrap();
    let y = g.scan(u, ones, ones, ones).unwrap();
    assert_eq!(g.data(y), &[1.0, 2.0, 3.0]);
}

#[test]
fn scan_is_causal() {
    let mut rng = Rng::new(16);
    let (len, dim) = (8, 3);
    let u0 = randv(&mut rng, len * dim);
    let a0: Vec<f64> = (0..len * dim).map(|_| rng.uniform()).collect();
    let b0 = randv(&mut rng, len * dim);
    let c0 = randv(&mut rng, len * dim);
    let run = |u: &[f64]| -> Vec<f64> {
        let mut g: Graph<f64> = Graph::inference();
        let ut = g.constant(u.to_vec(), vec![len, dim]).unwrap();
        let at = g.constant(a0.clone(), vec![len, dim]).unwrap();
        let bt = g.constant(b0.clone(), vec![len, dim]).unwrap();
        let ct = g.constant(c0.clone(), vec![len, dim]).unwrap();
        let y = g.scan(ut, at, bt, ct).unwrap();
        g.data(y).to_vec()
    };
    let base = run(&u0);
    for k in [2usize, 5] {
        let mut pert = u0.clone();
        for j in 0..dim {
            pert[k * dim + j] += 1.5;
        }
        let out = run(&pert);
        for t in 0..k {
            for j in 0..dim {
                assert_eq!(base[t * dim + j], out[t * dim + j], "t={t} before k={k}");
            }
        }
        assert!(out[k * dim..] != base[k * dim..]);
    }
}

#[test]
fn scan_gradient_matches_finite_differences() {
    let mut rng = Rng::new(17);
    let (len, dim) = (5, 2);
    let u = randv(&mut rng, len * dim);
    let a: Vec<f64> = (0..len * dim).map(|_| rng.uniform() * 0.9).collect();
    let b = randv(&mut rng, len * dim);
    let c = randv(&mut rng, len * dim);
    fd_check(
        &[
            (&u, &[len, dim]),
            (&a, &[len, dim]),
            (&b, &[len, dim]),
            (&c, &[len, dim]),
        ],
        |g, t| g.scan(t[0], t[1], t[2], t[3]).unwrap(),
        1e-4,
    );
}

// ── determinism ─────────────────────────────────────────────────────

#[test]
fn train_graphs_are_bitwise_deterministic() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut g: Graph<f64> = Graph::new(Mode::Train, Some(Rng::new(42)));
        let x = leaf64(&mut g, &[0.3, -0.7, 1.1, 0.0, 2.0, -1.0], &[2, 3]);
        let d = g.dropout(x, 0.4).unwrap();
        let act = g.gelu(d).unwrap();
        let loss = g.sum(act).unwrap();
        let fwd = g.value(loss);
        g.backward(loss).unwrap();
        (vec![fwd], g.grad(x).unwrap().to_vec())
    };
    let (f1, g1) = run();
    let (f2, g2) = run();
    assert_eq!(f1[0].to_bits(), f2[0].to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
