//! Slow, direct reference implementations used as test oracles.

use std::collections::HashSet;

use crate::model::Model;
use crate::numkit::{Matrix, Real};
use crate::prior::PriorSubspace;
use crate::rope::FrequencyTable;
use crate::trainer::{loss_and_grads, LossWeighting, MaskedSample};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as columns.
pub fn jacobi_eigen(a: &Matrix<f64>) -> (Vec<f64>, Matrix<f64>) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "square input");
    let mut m = a.clone();
    let mut v = Matrix::<f64>::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    (values, vectors)
}

/// Sample covariance (divisor `n − 1`) of the rows of `x`.
pub fn covariance(x: &Matrix<f64>) -> Matrix<f64> {
    let (n, d) = x.shape();
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64).collect();
    Matrix::from_fn(d, d, |i, j| {
        (0..n).map(|r| (x.get(r, i) - mean[i]) * (x.get(r, j) - mean[j])).sum::<f64>() / (n - 1) as f64
    })
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

/// Block-diagonal rotation matrix `R(m)` of one frequency table.
pub fn rotation_matrix(table: &FrequencyTable, m: usize) -> Matrix<f64> {
    let d = table.d_head;
    let mut r = Matrix::<f64>::zeros(d, d);
    for i in 0..d / 2 {
        let (s, c) = table.angle(i, m).sin_cos();
        r.set(2 * i, 2 * i, c);
        r.set(2 * i, 2 * i + 1, -s);
        r.set(2 * i + 1, 2 * i, s);
        r.set(2 * i + 1, 2 * i + 1, c);
    }
    r
}

/// `(R(m) q)ᵀ (R(n) k)` through explicit rotation matrices.
pub fn rotary_score(q: &[f64], k: &[f64], m: usize, n: usize, table: &FrequencyTable) -> f64 {
    let rq = rotation_matrix(table, m);
    let rk = rotation_matrix(table, n);
    let d = q.len();
    let a: Vec<f64> = (0..d).map(|i| (0..d).map(|j| rq.get(i, j) * q[j]).sum()).collect();
    let b: Vec<f64> = (0..d).map(|i| (0..d).map(|j| rk.get(i, j) * k[j]).sum()).collect();
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Suppression written with explicit `d × d` projectors:
/// `Q = U Uᵀ` for the alignment norm and `P = U u uᵀ Uᵀ` for the removed
/// component, so `h̃ = h − λ·max(0, c)·P (h − μ)`.
pub fn dense_suppress(h: &[f64], sub: &PriorSubspace, lambda: f64) -> Vec<f64> {
    let d = h.len();
    let k = sub.k();
    let u_full: Vec<f64> = (0..d)
        .map(|i| (0..k).map(|j| sub.basis.get(i, j) * sub.prior_dir[j]).sum())
        .collect();
    let q = Matrix::from_fn(d, d, |i, j| (0..k).map(|c| sub.basis.get(i, c) * sub.basis.get(j, c)).sum::<f64>());
    let p = Matrix::from_fn(d, d, |i, j| u_full[i] * u_full[j]);
    let x: Vec<f64> = h.iter().zip(&sub.mu).map(|(a, b)| a - b).collect();
    let qx: Vec<f64> = (0..d).map(|i| (0..d).map(|j| q.get(i, j) * x[j]).sum()).collect();
    let z_norm = x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();
    let along: f64 = u_full.iter().zip(&x).map(|(a, b)| a * b).sum();
    let c = if z_norm < 1e-12 { 0.0 } else { along / z_norm };
    let alpha = lambda * c.max(0.0);
    let px: Vec<f64> = (0..d).map(|i| (0..d).map(|j| p.get(i, j) * x[j]).sum()).collect();
    h.iter().zip(&px).map(|(a, b)| a - alpha * b).collect()
}

/// Distinct-n through an explicit set of n-gram vectors.
pub fn distinct_n_set(tokens: &[u32], n: usize) -> f64 {
    let grams: Vec<Vec<u32>> = tokens.windows(n).map(|w| w.to_vec()).collect();
    let unique: HashSet<&Vec<u32>> = grams.iter().collect();
    unique.len() as f64 / grams.len() as f64
}

/// Per-position argmax over non-mask tokens, lowest id on ties.
pub fn argmax_excluding<T: Real>(logits: &[T], mask_id: u32) -> u32 {
    let mut best = None::<(u32, f64)>;
    for (i, l) in logits.iter().enumerate() {
        if i as u32 == mask_id {
            continue;
        }
        let v = l.wide();
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i as u32, v));
        }
    }
    best.expect("vocabulary has a non-mask token").0
}

/// Per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// of the batch-loss gradient against central differences.
pub fn gradcheck(
    model: &Model<f64>,
    batch: &[MaskedSample],
    mode: LossWeighting,
    eps: f64,
) -> crate::Result<Vec<(String, f64)>> {
    let (_, analytic) = loss_and_grads(model, batch, mode)?;
    let params = analytic.params();
    let mut out = Vec::with_capacity(params.len());
    for (ti, p) in params.iter().enumerate() {
        let mut num = vec![0.0; p.data.len()];
        for (i, n) in num.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.weights.params_mut()[ti][i] += eps;
            let mut minus = model.clone();
            minus.weights.params_mut()[ti][i] -= eps;
            let lp = loss_and_grads(&plus, batch, mode)?.0;
            let lm = loss_and_grads(&minus, batch, mode)?.0;
            *n = (lp - lm) / (2.0 * eps);
        }
        let diff = p.data.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = p.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.push((p.name.clone(), diff / na.max(nn).max(1e-300)));
    }
    Ok(out)
}
