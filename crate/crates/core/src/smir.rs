//! Squared-loss mutual-information regularized kernel classifier: an
//! empirical Gaussian kernel map, a mutual-information estimate that rewards
//! confident cluster assignments, and a ridge term, combined into one convex
//! objective solved per class as an SPD linear system.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchDataset;
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmirParams {
    /// Weight of the mutual-information reward.
    pub gamma: f64,
    /// Ridge weight; `None` selects 2·gamma·c/n, safely above the convexity
    /// bound gamma·c/n.
    pub lambda: Option<f64>,
    /// Fit-sample cap; posteriors extend to the remaining rows through the
    /// kernel map.
    pub subsample: usize,
    /// Gaussian bandwidth; `None` selects the median pairwise distance.
    pub sigma: Option<f64>,
}

impl Default for SmirParams {
    fn default() -> Self {
        SmirParams {
            gamma: 1.0,
            lambda: None,
            subsample: 2000,
            sigma: None,
        }
    }
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

/// Median pairwise Euclidean distance, the default bandwidth.
pub fn median_pairwise_distance(points: &ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| points.row(i).to_slice().expect("contiguous"))
        .collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    median.max(1e-12)
}

/// Gaussian kernel matrix and its degree diagonal.
pub fn kernel_matrix(points: &ArrayView2<f64>, sigma: Option<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    if let Some(s) = sigma {
        if !(s > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
    }
    let n = points.nrows();
    if n == 0 {
        return Err(Error::invalid("kernel needs at least one point"));
    }
    let sigma = sigma.unwrap_or_else(|| median_pairwise_distance(points));
    let denom = 2.0 * sigma * sigma;
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| points.row(i).to_slice().expect("contiguous"))
        .collect();
    let flat: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| (-sq_dist(rows[i], rows[j]) / denom).exp())
                .collect()
        })
        .collect();
    let mut k = Array2::zeros((n, n));
    for (i, row) in flat.into_iter().enumerate() {
        k.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    // exact symmetry regardless of float noise in the distance loop
    let kt = k.t().to_owned();
    k += &kt;
    k.mapv_inplace(|v| 0.5 * v);
    for i in 0..n {
        k[(i, i)] = 1.0;
    }
    let degrees = k.sum_axis(ndarray::Axis(1));
    Ok((k, degrees))
}

/// Mutual-information estimate (c/2n)·tr(Aᵀ D^{-1/2} K D^{-1/2} A) − 1/2.
pub fn smi_estimate(k: &Array2<f64>, degrees: &Array1<f64>, a: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let c = a.ncols();
    let scaled = scale_rows(&scale_rows(k, degrees).t().to_owned(), degrees);
    let m = scaled.dot(a);
    let mut trace = 0.0;
    for j in 0..c {
        trace += a.column(j).dot(&m.column(j));
    }
    (c as f64 / (2.0 * n as f64)) * trace - 0.5
}

/// Rows of `m` scaled by d^{-1/2}.
fn scale_rows(m: &Array2<f64>, degrees: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let s = degrees[i].sqrt().recip();
        row.mapv_inplace(|v| v * s);
    }
    out
}

/// Fitted model: parameter matrix plus the precomputed maps needed to score
/// in-sample and held-out points.
#[derive(Debug, Clone)]
pub struct SmirModel {
    /// n×c parameter matrix (one column per class).
    pub coeffs: Array2<f64>,
    /// K^{1/2} D^{-1/2} · coeffs — in-sample scores.
    scores: Array2<f64>,
    /// K^{-1/2} D^{-1/2} · coeffs — right factor for held-out scores.
    extension: Array2<f64>,
}

/// Minimize ½·Σ_labeled ‖score − target‖² − γ·SMI + (λ/2)·‖A‖² where the
/// score matrix is K^{1/2} D^{-1/2} A; convex whenever λ > γ·c/n.
pub fn smir_fit(
    k: &Array2<f64>,
    degrees: &Array1<f64>,
    labels: &ArrayView2<f64>,
    labeled_mask: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<SmirModel> {
    let n = k.nrows();
    let c = labels.ncols();
    if labels.nrows() != n || labeled_mask.len() != n {
        return Err(Error::invalid("label shape mismatch"));
    }
    if gamma < 0.0 {
        return Err(Error::invalid("gamma must be >= 0"));
    }
    if lambda <= gamma * c as f64 / n as f64 {
        return Err(Error::invalid(format!(
            "convexity condition violated: lambda {lambda} must exceed gamma*c/n = {}",
            gamma * c as f64 / n as f64
        )));
    }
    let k_sqrt = linalg::symmetric_matrix_power(k, 0.5, 1e-10)?;
    let k_inv_sqrt = linalg::symmetric_matrix_power(k, -0.5, 1e-10)?;
    // B = K^{1/2} D^{-1/2}: scale columns of K^{1/2}
    let b = scale_rows(&k_sqrt.t().to_owned(), degrees).t().to_owned();
    // C = D^{-1/2} K D^{-1/2}
    let cmat = scale_rows(&scale_rows(k, degrees).t().to_owned(), degrees);

    // H = Bᵀ E_L B − γ(c/n) C + λ I, rhs = Bᵀ E_L P
    let mut masked_b = b.clone();
    for (i, &lab) in labeled_mask.iter().enumerate() {
        if !lab {
            masked_b.row_mut(i).fill(0.0);
        }
    }
    let mut h = b.t().dot(&masked_b);
    h.scaled_add(-(gamma * c as f64 / n as f64), &cmat);
    for i in 0..n {
        h[(i, i)] += lambda;
    }
    let mut masked_p = labels.to_owned();
    for (i, &lab) in labeled_mask.iter().enumerate() {
        if !lab {
            masked_p.row_mut(i).fill(0.0);
        }
    }
    let rhs = b.t().dot(&masked_p);
    let coeffs = linalg::cholesky_solve(&h, &rhs)?;
    let residual = linalg::max_abs(&(h.dot(&coeffs) - &rhs));
    if residual >= 1e-8 {
        return Err(Error::numerical(format!(
            "first-order optimality residual {residual:.3e} exceeds 1e-8"
        )));
    }
    let scaled_coeffs = scale_rows(&coeffs, degrees);
    Ok(SmirModel {
        scores: k_sqrt.dot(&scaled_coeffs),
        extension: k_inv_sqrt.dot(&scaled_coeffs),
        coeffs,
    })
}

/// The fitted objective, exposed for optimality checks.
pub fn smir_objective(
    k: &Array2<f64>,
    degrees: &Array1<f64>,
    labels: &ArrayView2<f64>,
    labeled_mask: &[bool],
    gamma: f64,
    lambda: f64,
    coeffs: &Array2<f64>,
) -> Result<f64> {
    let k_sqrt = linalg::symmetric_matrix_power(k, 0.5, 1e-10)?;
    let scores = k_sqrt.dot(&scale_rows(coeffs, degrees));
    let mut loss = 0.0;
    for (i, &lab) in labeled_mask.iter().enumerate() {
        if lab {
            for j in 0..labels.ncols() {
                let d = scores[(i, j)] - labels[(i, j)];
                loss += 0.5 * d * d;
            }
        }
    }
    let ridge: f64 = 0.5 * lambda * coeffs.iter().map(|v| v * v).sum::<f64>();
    Ok(loss - gamma * smi_estimate(k, degrees, coeffs) + ridge)
}

fn rows_to_simplex(mut scores: Array2<f64>) -> Array2<f64> {
    let c = scores.ncols();
    for mut row in scores.rows_mut() {
        row.mapv_inplace(|v| v.max(0.0));
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    scores
}

impl SmirModel {
    /// In-sample posteriors: scores clamped at 0, renormalized (uniform when
    /// a row has no positive score).
    pub fn posteriors(&self) -> Array2<f64> {
        rows_to_simplex(self.scores.clone())
    }

    /// Hard labels via argmax of the posteriors, ties to the lowest class.
    pub fn hard_labels(&self) -> Vec<usize> {
        let post = self.posteriors();
        post.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Posteriors for held-out points from their kernel rows against the
    /// fit sample (m×n).
    pub fn extend_posteriors(&self, kernel_rows: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if kernel_rows.ncols() != self.extension.nrows() {
            return Err(Error::invalid("kernel row width must match fit sample"));
        }
        Ok(rows_to_simplex(kernel_rows.dot(&self.extension)))
    }
}

/// Full engine: fit on a seeded subsample capped at `params.subsample`
/// points (labeled rows take priority up to half the budget, stratified per
/// class; unlabeled rows fill the rest), then extend posteriors to the
/// remaining unlabeled rows. Aligned with `dataset.unlabeled_idx`.
pub fn soft_targets(
    dataset: &PatchDataset,
    embeddings: &ArrayView2<f64>,
    params: &SmirParams,
    seed: u64,
) -> Result<Array2<f64>> {
    let l = dataset.labeled_idx.len();
    let u = dataset.unlabeled_idx.len();
    let c = dataset.num_classes;
    if l == 0 {
        return Err(Error::invalid("needs at least one labeled row"));
    }
    let cap = params.subsample.max(c + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // labeled part of the fit sample (positions into labeled_idx)
    let labeled_budget = if l + u <= cap { l } else { l.min(cap / 2).max(c) };
    let labeled_pos: Vec<usize> = if labeled_budget >= l {
        (0..l).collect()
    } else {
        // stratified: shuffle within each class, take proportional counts
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (pos, &row) in dataset.labeled_idx.iter().enumerate() {
            per_class[dataset.classes[row] as usize - 1].push(pos);
        }
        let mut picked = Vec::with_capacity(labeled_budget);
        for rows in &mut per_class {
            rows.shuffle(&mut rng);
            let share = ((rows.len() as f64 / l as f64) * labeled_budget as f64 + 0.5) as usize;
            let take = share.clamp(1, rows.len());
            picked.extend_from_slice(&rows[..take]);
        }
        picked.sort_unstable();
        picked.truncate(labeled_budget);
        picked
    };

    // unlabeled part (positions into unlabeled_idx)
    let budget = cap.saturating_sub(labeled_pos.len()).min(u);
    let mut positions: Vec<usize> = (0..u).collect();
    if budget < u {
        positions.shuffle(&mut rng);
        positions.truncate(budget);
        positions.sort_unstable();
    }

    let fit_l = labeled_pos.len();
    let mut fit_rows: Vec<usize> = labeled_pos.iter().map(|&p| dataset.labeled_idx[p]).collect();
    fit_rows.extend(positions.iter().map(|&p| dataset.unlabeled_idx[p]));
    let points = crate::nn::gather_rows(embeddings, &fit_rows);
    let n = fit_rows.len();

    let (kmat, degrees) = kernel_matrix(&points.view(), params.sigma)?;
    let mut labels = Array2::zeros((n, c));
    for (i, &p) in labeled_pos.iter().enumerate() {
        labels.row_mut(i).assign(&dataset.labeled_targets.row(p));
    }
    let mut mask = vec![false; n];
    mask[..fit_l].fill(true);
    let lambda = params
        .lambda
        .unwrap_or(2.0 * params.gamma * c as f64 / n as f64);
    let model = smir_fit(&kmat, &degrees, &labels.view(), &mask, params.gamma, lambda)?;

    let in_sample = model.posteriors();
    let mut out = Array2::zeros((u, c));
    let mut sampled = vec![false; u];
    for (fit_pos, &p) in positions.iter().enumerate() {
        out.row_mut(p).assign(&in_sample.row(fit_l + fit_pos));
        sampled[p] = true;
    }
    let rest: Vec<usize> = (0..u).filter(|&p| !sampled[p]).collect();
    if !rest.is_empty() {
        let sigma = params.sigma.unwrap_or_else(|| median_pairwise_distance(&points.view()));
        let denom = 2.0 * sigma * sigma;
        let fit_slices: Vec<&[f64]> = (0..n)
            .map(|i| points.row(i).to_slice().expect("contiguous"))
            .collect();
        let rest_rows: Vec<usize> = rest.iter().map(|&p| dataset.unlabeled_idx[p]).collect();
        let rest_points = crate::nn::gather_rows(embeddings, &rest_rows);
        let kernel_rows: Vec<Vec<f64>> = (0..rest.len())
            .into_par_iter()
            .map(|ri| {
                let q = rest_points.row(ri);
                let q = q.to_slice().expect("contiguous");
                fit_slices
                    .iter()
                    .map(|f| (-sq_dist(q, f) / denom).exp())
                    .collect()
            })
            .collect();
        let mut krows = Array2::zeros((rest.len(), n));
        for (i, row) in kernel_rows.into_iter().enumerate() {
            krows.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        let extended = model.extend_posteriors(&krows.view())?;
        for (ri, &p) in rest.iter().enumerate() {
            out.row_mut(p).assign(&extended.row(ri));
        }
    }
    Ok(out)
}
