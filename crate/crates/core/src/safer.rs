//! Worst-case-gain combination of base semi-supervised regressors: several
//! kNN-flavored predictors vote on the unlabeled rows and a simplex-
//! constrained quadratic program picks the convex combination closest to the
//! supervised baseline, which maximizes the worst-case improvement over it.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaferParams {
    /// Neighborhood size of the supervised baseline.
    pub baseline_k: usize,
    /// One base regressor per neighborhood size.
    pub regressor_ks: Vec<usize>,
    /// Self-training sweeps per base regressor (0 reduces each to the
    /// plain supervised estimate at its k).
    pub self_train_iters: usize,
}

impl Default for SaferParams {
    fn default() -> Self {
        SaferParams {
            baseline_k: 5,
            regressor_ks: vec![3, 7, 11],
            self_train_iters: 1,
        }
    }
}

/// Outcome of the combination step.
#[derive(Debug, Clone)]
pub struct CombineResult {
    /// Simplex weights over the base regressors.
    pub weights: Vec<f64>,
    /// Combined prediction Σ weightᵢ·fᵢ.
    pub combined: Array2<f64>,
    /// Projected-gradient optimality residual at the returned weights.
    pub kkt_residual: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Mean target vector of the k nearest pool rows (ties by pool index);
/// `skip` excludes one pool row (the query itself during self-training).
fn knn_soft_vote(
    query: &[f64],
    pool: &[&[f64]],
    pool_targets: &ArrayView2<f64>,
    k: usize,
    skip: Option<usize>,
) -> Vec<f64> {
    let mut d: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != skip)
        .map(|(i, p)| (i, sq_dist(query, p)))
        .collect();
    d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let take = k.min(d.len());
    let c = pool_targets.ncols();
    let mut out = vec![0.0; c];
    for &(i, _) in &d[..take] {
        for (o, &t) in out.iter_mut().zip(pool_targets.row(i)) {
            *o += t;
        }
    }
    if take > 0 {
        for o in &mut out {
            *o /= take as f64;
        }
    }
    out
}

/// Supervised baseline predictions over the unlabeled rows: soft class
/// frequencies of each point's k nearest labeled neighbors (all of them if
/// fewer than k exist).
pub fn supervised_baseline(
    labeled: &ArrayView2<f64>,
    labeled_targets: &ArrayView2<f64>,
    queries: &ArrayView2<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    if labeled.nrows() == 0 {
        return Err(Error::invalid("baseline needs at least one labeled point"));
    }
    if k == 0 {
        return Err(Error::invalid("baseline k must be >= 1"));
    }
    let pool: Vec<&[f64]> = (0..labeled.nrows())
        .map(|i| labeled.row(i).to_slice().expect("contiguous"))
        .collect();
    let c = labeled_targets.ncols();
    let rows: Vec<Vec<f64>> = (0..queries.nrows())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            knn_soft_vote(q.to_slice().expect("contiguous"), &pool, labeled_targets, k, None)
        })
        .collect();
    let mut out = Array2::zeros((queries.nrows(), c));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

/// One base regressor: the supervised estimate at neighborhood size k,
/// refined by `iters` synchronous self-training sweeps where neighbors are
/// drawn from labeled points and the other unlabeled points' current
/// estimates.
fn self_training_knn(
    labeled: &ArrayView2<f64>,
    labeled_targets: &ArrayView2<f64>,
    queries: &ArrayView2<f64>,
    k: usize,
    iters: usize,
) -> Result<Array2<f64>> {
    let mut estimate = supervised_baseline(labeled, labeled_targets, queries, k)?;
    if iters == 0 || queries.nrows() == 0 {
        return Ok(estimate);
    }
    let l = labeled.nrows();
    let u = queries.nrows();
    let c = labeled_targets.ncols();
    // pool = labeled ++ unlabeled, targets refreshed each sweep
    let mut pool_points = Array2::zeros((l + u, labeled.ncols()));
    for i in 0..l {
        pool_points.row_mut(i).assign(&labeled.row(i));
    }
    for i in 0..u {
        pool_points.row_mut(l + i).assign(&queries.row(i));
    }
    let pool: Vec<&[f64]> = (0..l + u)
        .map(|i| pool_points.row(i).to_slice().expect("contiguous"))
        .collect();
    for _ in 0..iters {
        let mut pool_targets = Array2::zeros((l + u, c));
        for i in 0..l {
            pool_targets.row_mut(i).assign(&labeled_targets.row(i));
        }
        for i in 0..u {
            pool_targets.row_mut(l + i).assign(&estimate.row(i));
        }
        let next: Vec<Vec<f64>> = (0..u)
            .into_par_iter()
            .map(|qi| {
                let q = queries.row(qi);
                knn_soft_vote(
                    q.to_slice().expect("contiguous"),
                    &pool,
                    &pool_targets.view(),
                    k,
                    Some(l + qi),
                )
            })
            .collect();
        for (i, row) in next.into_iter().enumerate() {
            estimate.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
    }
    Ok(estimate)
}

/// The bank of base regressors, one per neighborhood size.
pub fn build_base_regressors(
    labeled: &ArrayView2<f64>,
    labeled_targets: &ArrayView2<f64>,
    queries: &ArrayView2<f64>,
    ks: &[usize],
    self_train_iters: usize,
) -> Result<Vec<Array2<f64>>> {
    if ks.is_empty() {
        return Err(Error::invalid("need at least one base regressor"));
    }
    ks.iter()
        .map(|&k| self_training_knn(labeled, labeled_targets, queries, k, self_train_iters))
        .collect()
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut rho = 0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            rho = j + 1;
            tau = t;
        }
    }
    debug_assert!(rho > 0);
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn frobenius_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// Minimize ‖Σ αᵢ·fᵢ − f₀‖² over the simplex by projected gradient descent
/// (step 1/L with L from the Gram norm, 500 iterations).
pub fn safer_combine(f0: &Array2<f64>, f_list: &[Array2<f64>]) -> Result<CombineResult> {
    let b = f_list.len();
    if b == 0 {
        return Err(Error::invalid("need at least one base prediction"));
    }
    for f in f_list.iter().chain(std::iter::once(f0)) {
        if f.raw_dim() != f0.raw_dim() {
            return Err(Error::invalid("prediction shape mismatch"));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite prediction"));
        }
    }
    let mut gram = Array2::zeros((b, b));
    let mut lin = vec![0.0; b];
    for i in 0..b {
        lin[i] = frobenius_dot(&f_list[i], f0);
        for j in i..b {
            let g = frobenius_dot(&f_list[i], &f_list[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let gram_norm = gram.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut alpha = vec![1.0 / b as f64; b];
    if gram_norm > 0.0 {
        let step = 1.0 / (2.0 * gram_norm);
        for _ in 0..500 {
            let next = pg_step(&alpha, &gram, &lin, step);
            alpha = next;
        }
        // polish: exact equality-constrained solve on the active face keeps
        // the iterate within grid-search tolerance on ill-conditioned Grams
        alpha = polish_active_face(&alpha, &gram, &lin).unwrap_or(alpha);
    }
    let kkt_residual = {
        let g = gradient(&alpha, &gram, &lin);
        let moved: Vec<f64> = alpha.iter().zip(&g).map(|(&a, &gi)| a - gi).collect();
        let proj = simplex_project(&moved);
        proj.iter()
            .zip(&alpha)
            .map(|(&p, &a)| (p - a).abs())
            .fold(0.0, f64::max)
    };
    let mut combined = Array2::zeros(f0.raw_dim());
    for (i, f) in f_list.iter().enumerate() {
        combined.scaled_add(alpha[i], f);
    }
    Ok(CombineResult {
        weights: alpha,
        combined,
        kkt_residual,
    })
}

fn gradient(alpha: &[f64], gram: &Array2<f64>, lin: &[f64]) -> Vec<f64> {
    let b = alpha.len();
    (0..b)
        .map(|i| {
            let mut g = -2.0 * lin[i];
            for j in 0..b {
                g += 2.0 * gram[(i, j)] * alpha[j];
            }
            g
        })
        .collect()
}

fn pg_step(alpha: &[f64], gram: &Array2<f64>, lin: &[f64], step: f64) -> Vec<f64> {
    let g = gradient(alpha, gram, lin);
    let moved: Vec<f64> = alpha.iter().zip(&g).map(|(&a, &gi)| a - step * gi).collect();
    simplex_project(&moved)
}

fn objective(alpha: &[f64], gram: &Array2<f64>, lin: &[f64]) -> f64 {
    let b = alpha.len();
    let mut obj = 0.0;
    for i in 0..b {
        obj -= 2.0 * lin[i] * alpha[i];
        for j in 0..b {
            obj += gram[(i, j)] * alpha[i] * alpha[j];
        }
    }
    obj
}

/// Solve min αᵀGα − 2qᵀα s.t. Σα = 1 restricted to the support the PGD
/// iterate settled on, via the KKT system; fall back when infeasible or
/// no better.
fn polish_active_face(alpha: &[f64], gram: &Array2<f64>, lin: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = alpha
        .iter()
        .enumerate()
        .filter(|&(_, &a)| a > 1e-10)
        .map(|(i, _)| i)
        .collect();
    let m = support.len();
    if m == 0 {
        return None;
    }
    // KKT: [2G_ss  1; 1ᵀ 0] [x; ν] = [2q_s; 1]
    let mut kkt = Array2::zeros((m + 1, m + 1));
    let mut rhs = Array2::zeros((m + 1, 1));
    for (ai, &i) in support.iter().enumerate() {
        for (bi, &j) in support.iter().enumerate() {
            kkt[(ai, bi)] = 2.0 * gram[(i, j)];
        }
        kkt[(ai, m)] = 1.0;
        kkt[(m, ai)] = 1.0;
        rhs[(ai, 0)] = 2.0 * lin[i];
    }
    rhs[(m, 0)] = 1.0;
    // plain LU via nalgebra (the KKT matrix is symmetric indefinite)
    let na = nalgebra::DMatrix::from_fn(m + 1, m + 1, |i, j| kkt[(i, j)]);
    let nb = nalgebra::DVector::from_fn(m + 1, |i, _| rhs[(i, 0)]);
    let sol = na.lu().solve(&nb)?;
    let mut candidate = vec![0.0; alpha.len()];
    for (ai, &i) in support.iter().enumerate() {
        if sol[ai] < -1e-12 {
            return None; // left the face; keep the PGD iterate
        }
        candidate[i] = sol[ai].max(0.0);
    }
    let sum: f64 = candidate.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    for v in &mut candidate {
        *v /= sum;
    }
    if objective(&candidate, gram, lin) <= objective(alpha, gram, lin) {
        Some(candidate)
    } else {
        None
    }
}

/// The worst-case performance gain of prediction `f` against the baseline
/// under regressor weights `alpha`:
/// Σ αᵢ·(‖f₀−fᵢ‖² − ‖f−fᵢ‖²).
pub fn worst_case_gain(
    f: &Array2<f64>,
    f0: &Array2<f64>,
    f_list: &[Array2<f64>],
    alpha: &[f64],
) -> Result<f64> {
    if alpha.len() != f_list.len() {
        return Err(Error::invalid("weight/regressor count mismatch"));
    }
    if f.raw_dim() != f0.raw_dim() {
        return Err(Error::invalid("prediction shape mismatch"));
    }
    let mut gain = 0.0;
    for (fi, &a) in f_list.iter().zip(alpha) {
        if fi.raw_dim() != f0.raw_dim() {
            return Err(Error::invalid("prediction shape mismatch"));
        }
        let base: f64 = f0
            .iter()
            .zip(fi.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ours: f64 = f
            .iter()
            .zip(fi.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        gain += a * (base - ours);
    }
    Ok(gain)
}

/// Full engine: baseline + base regressors + worst-case-gain combination.
/// Rows are clamped and renormalized onto the simplex before use as
/// training targets. Aligned with `dataset.unlabeled_idx`.
pub fn soft_targets(
    dataset: &PatchDataset,
    embeddings: &ArrayView2<f64>,
    params: &SaferParams,
) -> Result<Array2<f64>> {
    let labeled = crate::nn::gather_rows(embeddings, &dataset.labeled_idx);
    let queries = crate::nn::gather_rows(embeddings, &dataset.unlabeled_idx);
    let f0 = supervised_baseline(
        &labeled.view(),
        &dataset.labeled_targets.view(),
        &queries.view(),
        params.baseline_k,
    )?;
    let f_list = build_base_regressors(
        &labeled.view(),
        &dataset.labeled_targets.view(),
        &queries.view(),
        &params.regressor_ks,
        params.self_train_iters,
    )?;
    let result = safer_combine(&f0, &f_list)?;
    let mut soft = result.combined;
    let c = soft.ncols();
    for mut row in soft.rows_mut() {
        row.mapv_inplace(|v| v.max(0.0));
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    Ok(soft)
}
