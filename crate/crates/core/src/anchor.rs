//! Anchor-graph soft labeling: a small set of representative points carries
//! the label information, every sample couples to its nearest anchors
//! through a row-stochastic weight matrix, and a reduced-Laplacian
//! regularized least-squares solve produces anchor soft labels that are
//! pushed back to the samples with class-balanced scoring.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchDataset;
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorParams {
    /// Anchor budget; capped at the labeled count.
    pub num_anchors: usize,
    /// Nonzeros per weight row.
    pub neighbors: usize,
    /// Laplacian regularization weight.
    pub gamma: f64,
    /// Gaussian bandwidth; `None` selects the median of the retained
    /// sample-to-anchor distances.
    pub sigma: Option<f64>,
}

impl Default for AnchorParams {
    fn default() -> Self {
        AnchorParams {
            num_anchors: 500,
            neighbors: 3,
            gamma: 0.01,
            sigma: None,
        }
    }
}

/// Sample-to-anchor convex combination weights: each row holds at most `s`
/// nonzeros, is non-negative, and sums to 1.
#[derive(Debug, Clone)]
pub struct AnchorWeights {
    num_points: usize,
    num_anchors: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AnchorWeights {
    pub fn from_rows(num_anchors: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let w = AnchorWeights {
            num_points: rows.len(),
            num_anchors,
            rows,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(k, v) in row {
                if k >= self.num_anchors {
                    return Err(Error::invalid("anchor index out of range"));
                }
                if v < 0.0 {
                    return Err(Error::invalid(format!("negative weight in row {i}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Column sums (the per-anchor mass).
    pub fn column_sums(&self) -> Array1<f64> {
        let mut sums = Array1::zeros(self.num_anchors);
        for row in &self.rows {
            for &(k, v) in row {
                sums[k] += v;
            }
        }
        sums
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.num_points, self.num_anchors));
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, v) in row {
                dense[(i, k)] = v;
            }
        }
        dense
    }

    /// Product with a dense matrix: (n×p) · (p×c).
    pub fn matmul(&self, m: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_points, m.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, v) in row {
                let mut o = out.row_mut(i);
                o.scaled_add(v, &m.row(k));
            }
        }
        out
    }

    /// Transposed product: (p×n) · (n×c).
    pub fn t_matmul(&self, m: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_anchors, m.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, v) in row {
                let mut o = out.row_mut(k);
                o.scaled_add(v, &m.row(i));
            }
        }
        out
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

/// Seeded k-means (k-means++ start, fixed iteration budget, lowest-index
/// tie-breaking). Returns centroids and assignments.
pub fn kmeans(
    points: &ArrayView2<f64>,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= {n}, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| points.row(i).to_slice().expect("contiguous"))
        .collect();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centers.push(rows[first].to_vec());
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center; take the first
            // point not yet chosen
            (0..n)
                .find(|&i| !centers.iter().any(|c| c.as_slice() == rows[i]))
                .unwrap_or(0)
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if draw < w {
                    pick = i;
                    break;
                }
                draw -= w;
            }
            pick
        };
        centers.push(rows[next].to_vec());
        let c = centers.last().unwrap();
        for (i, r) in rows.iter().enumerate() {
            let d = sq_dist(r, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let dim = points.ncols();
    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        // assignment step; ties go to the lowest center index
        for (i, r) in rows.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = sq_dist(r, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assign[i] = best;
        }
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(*r) {
                *s += v;
            }
        }
        for ci in 0..k {
            if counts[ci] == 0 {
                // re-seed an empty cluster on the point farthest from its
                // current center (deterministic scan)
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(rows[a], &centers[assign[a]]);
                        let db = sq_dist(rows[b], &centers[assign[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[ci] = rows[far].to_vec();
            } else {
                for (cv, s) in centers[ci].iter_mut().zip(&sums[ci]) {
                    *cv = s / counts[ci] as f64;
                }
            }
        }
    }
    let centroids = Array2::from_shape_fn((k, dim), |(i, j)| centers[i][j]);
    Ok((centroids, assign))
}

/// Anchor selection: k-means over the labeled embeddings (25 iterations).
pub fn select_anchors(labeled: &ArrayView2<f64>, p: usize, seed: u64) -> Result<Array2<f64>> {
    if p > labeled.nrows() {
        return Err(Error::invalid(format!(
            "requested {p} anchors from {} labeled points",
            labeled.nrows()
        )));
    }
    let (centroids, _) = kmeans(labeled, p, 25, seed)?;
    Ok(centroids)
}

/// Gaussian weights over each sample's `s` nearest anchors, normalized to a
/// convex combination.
pub fn build_weights(
    points: &ArrayView2<f64>,
    anchors: &ArrayView2<f64>,
    s: usize,
    sigma: Option<f64>,
) -> Result<AnchorWeights> {
    let p = anchors.nrows();
    if s == 0 || s > p {
        return Err(Error::invalid(format!("need 1 <= s <= {p}, got {s}")));
    }
    if points.ncols() != anchors.ncols() {
        return Err(Error::invalid("point/anchor dimension mismatch"));
    }
    if let Some(sg) = sigma {
        if !(sg > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
    }
    let anchor_rows: Vec<&[f64]> = (0..p)
        .map(|i| anchors.row(i).to_slice().expect("contiguous"))
        .collect();
    // nearest anchors per point (squared distances, ties by index)
    let nearest: Vec<Vec<(usize, f64)>> = (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            let r = points.row(i);
            let r = r.to_slice().expect("contiguous");
            let mut d: Vec<(usize, f64)> = anchor_rows
                .iter()
                .enumerate()
                .map(|(k, a)| (k, sq_dist(r, a)))
                .collect();
            d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            d.truncate(s);
            d
        })
        .collect();

    let sigma = match sigma {
        Some(v) => v,
        None => {
            let mut dists: Vec<f64> = nearest
                .iter()
                .flat_map(|row| row.iter().map(|&(_, d2)| d2.sqrt()))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = dists.len();
            let median = if m % 2 == 1 {
                dists[m / 2]
            } else {
                0.5 * (dists[m / 2 - 1] + dists[m / 2])
            };
            median.max(1e-12)
        }
    };

    let denom = 2.0 * sigma * sigma;
    let mut rows = Vec::with_capacity(points.nrows());
    for (i, cand) in nearest.into_iter().enumerate() {
        let mut row: Vec<(usize, f64)> = cand
            .into_iter()
            .map(|(k, d2)| (k, (-d2 / denom).exp()))
            .collect();
        let sum: f64 = row.iter().map(|&(_, v)| v).sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::numerical(format!(
                "all-zero kernel row {i}: bandwidth {sigma} too small"
            )));
        }
        for e in &mut row {
            e.1 /= sum;
        }
        row.sort_by_key(|&(k, _)| k);
        rows.push(row);
    }
    AnchorWeights::from_rows(p, rows)
}

/// Reduced p×p Laplacian computed without materializing any n×n matrix.
///
/// With W = Z Λ⁻¹ Zᵀ and L = D − W (D the diagonal of W's row sums), the
/// reduction Zᵀ L Z expands to Zᵀ D Z − (ZᵀZ) Λ⁻¹ (ZᵀZ).
pub fn reduced_laplacian(z: &AnchorWeights) -> Result<Array2<f64>> {
    let p = z.num_anchors();
    let col_sums = z.column_sums();
    for (k, &v) in col_sums.iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::invalid(format!("orphan anchor {k} (zero mass)")));
        }
    }
    // gram = ZᵀZ
    let mut gram = Array2::zeros((p, p));
    for row in z.rows() {
        for &(a, va) in row {
            for &(b, vb) in row {
                gram[(a, b)] += va * vb;
            }
        }
    }
    // row sums of W: d = Z Λ⁻¹ (Zᵀ 1)
    let ones = Array2::ones((z.num_points(), 1));
    let zt1 = z.t_matmul(&ones.view());
    let scaled = Array2::from_shape_fn((p, 1), |(k, _)| zt1[(k, 0)] / col_sums[k]);
    let d = z.matmul(&scaled.view());
    // ZᵀDZ over the sparse rows
    let mut zdz = Array2::zeros((p, p));
    for (i, row) in z.rows().iter().enumerate() {
        let di = d[(i, 0)];
        for &(a, va) in row {
            for &(b, vb) in row {
                zdz[(a, b)] += di * va * vb;
            }
        }
    }
    let inv_gram = {
        // (ZᵀZ) Λ⁻¹ (ZᵀZ): scale gram's rows by 1/Λ, multiply from the left
        let mut g = gram.clone();
        for (k, mut row) in g.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v: f64| v / col_sums[k]);
        }
        gram.dot(&g)
    };
    let mut lap = zdz - inv_gram;
    // enforce exact symmetry against accumulation order noise
    let lap_t = lap.t().to_owned();
    lap += &lap_t;
    lap.mapv_inplace(|v| 0.5 * v);
    Ok(lap)
}

/// Anchor soft labels: the unique minimizer of the quadratic
/// ½‖Z·A − Y‖² + (γ/2)·tr(Aᵀ·L̂·A), solved per class as one SPD system.
pub fn solve_soft_labels(
    z: &AnchorWeights,
    lap: &Array2<f64>,
    indicator: &ArrayView2<f64>,
    gamma: f64,
) -> Result<Array2<f64>> {
    if gamma < 0.0 {
        return Err(Error::invalid("gamma must be >= 0"));
    }
    if indicator.nrows() != z.num_points() {
        return Err(Error::invalid("indicator rows must match sample count"));
    }
    let p = z.num_anchors();
    let mut gram = Array2::zeros((p, p));
    for row in z.rows() {
        for &(a, va) in row {
            for &(b, vb) in row {
                gram[(a, b)] += va * vb;
            }
        }
    }
    let system = &gram + &(lap * gamma);
    let rhs = z.t_matmul(indicator);
    let solution = linalg::cholesky_solve(&system, &rhs).map_err(|e| {
        Error::numerical(format!(
            "singular system ({e}); use gamma > 0 or add a ridge of 1e-10"
        ))
    })?;
    let residual = linalg::max_abs(&(system.dot(&solution) - &rhs));
    if residual >= 1e-8 {
        return Err(Error::numerical(format!(
            "soft-label solve residual {residual:.3e} exceeds 1e-8"
        )));
    }
    Ok(solution)
}

/// Per-sample class scores balanced by per-class mass, hard labels by
/// argmax (ties to the lowest class), and simplex-projected soft targets.
pub fn infer_soft_targets(
    z: &AnchorWeights,
    anchor_labels: &Array2<f64>,
) -> Result<(Vec<usize>, Array2<f64>)> {
    let scores_raw = z.matmul(&anchor_labels.view());
    let c = scores_raw.ncols();
    // per-class balance = total propagated mass of that class
    let mass: Vec<f64> = (0..c).map(|j| scores_raw.column(j).sum()).collect();
    if mass.iter().all(|&m| m <= 0.0) {
        return Err(Error::numerical("every class has non-positive mass"));
    }
    let n = scores_raw.nrows();
    let mut hard = Vec::with_capacity(n);
    let mut soft = Array2::zeros((n, c));
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..c {
            if mass[j] <= 0.0 {
                continue;
            }
            let s = scores_raw[(i, j)] / mass[j];
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        hard.push(best);
        let mut sum = 0.0;
        for j in 0..c {
            let s = if mass[j] > 0.0 {
                (scores_raw[(i, j)] / mass[j]).max(0.0)
            } else {
                0.0
            };
            soft[(i, j)] = s;
            sum += s;
        }
        if sum > 0.0 {
            for j in 0..c {
                soft[(i, j)] /= sum;
            }
        } else {
            soft.row_mut(i).fill(1.0 / c as f64);
        }
    }
    Ok((hard, soft))
}

/// Full engine: anchors from the labeled embeddings, weights over
/// labeled+unlabeled rows, solve, and balanced inference. Returns soft
/// targets aligned with `dataset.unlabeled_idx`.
pub fn soft_targets(
    dataset: &PatchDataset,
    embeddings: &ArrayView2<f64>,
    params: &AnchorParams,
    seed: u64,
) -> Result<Array2<f64>> {
    let l = dataset.labeled_idx.len();
    let u = dataset.unlabeled_idx.len();
    let c = dataset.num_classes;
    let p = params.num_anchors.min(l);
    if p < c {
        return Err(Error::invalid(format!(
            "anchor budget {p} below class count {c}"
        )));
    }
    let labeled = crate::nn::gather_rows(embeddings, &dataset.labeled_idx);
    let anchors = select_anchors(&labeled.view(), p, seed)?;

    let graph_rows = dataset.train_rows();
    let points = crate::nn::gather_rows(embeddings, &graph_rows);
    let weights = build_weights(&points.view(), &anchors.view(), params.neighbors.min(p), params.sigma)?;
    let lap = reduced_laplacian(&weights)?;

    let mut indicator = Array2::zeros((graph_rows.len(), c));
    for i in 0..l {
        indicator
            .row_mut(i)
            .assign(&dataset.labeled_targets.row(i));
    }
    let anchor_labels = solve_soft_labels(&weights, &lap, &indicator.view(), params.gamma)?;
    let (_, soft) = infer_soft_targets(&weights, &anchor_labels)?;
    // unlabeled rows sit after the l labeled rows in graph order
    let mut out = Array2::zeros((u, c));
    for i in 0..u {
        out.row_mut(i).assign(&soft.row(l + i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_weights(n: usize, p: usize, s: usize, seed: u64) -> AnchorWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let mut picks: Vec<usize> = (0..p).collect();
                rand::seq::SliceRandom::shuffle(&mut picks[..], &mut rng);
                picks.truncate(s);
                picks.sort_unstable();
                let raw: Vec<f64> = picks.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                picks
                    .into_iter()
                    .zip(raw)
                    .map(|(k, v)| (k, v / sum))
                    .collect()
            })
            .collect();
        // rows may leave an anchor untouched; retry until all have mass
        let w = AnchorWeights::from_rows(p, rows).unwrap();
        if w.column_sums().iter().any(|&v| v <= 0.0) {
            random_weights(n, p, s, seed + 1)
        } else {
            w
        }
    }

    /// Dense route: materialize W = ZΛ⁻¹Zᵀ, D, L = D − W, then ZᵀLZ.
    fn dense_reduced_laplacian(z: &AnchorWeights) -> Array2<f64> {
        let zd = z.to_dense();
        let lambda = z.column_sums();
        let mut zl = zd.clone();
        for (k, mut col) in zl.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v: f64| v / lambda[k]);
        }
        let w = zl.dot(&zd.t());
        let mut lap_full = -w.clone();
        for i in 0..z.num_points() {
            lap_full[(i, i)] += w.row(i).sum();
        }
        zd.t().dot(&lap_full).dot(&zd)
    }

    #[test]
    fn kmeans_singletons_when_k_equals_n() {
        let pts = array![[0.0, 0.0], [5.0, 5.0], [9.0, 0.0], [0.0, 9.0]];
        let anchors = select_anchors(&pts.view(), 4, 3).unwrap();
        let mut got: Vec<Vec<i64>> = anchors
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as i64).collect())
            .collect();
        got.sort();
        assert_eq!(got, vec![vec![0, 0], vec![0, 9], vec![5, 5], vec![9, 0]]);
    }

    #[test]
    fn kmeans_separated_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for _ in 0..20 {
            pts.push([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
        }
        for _ in 0..20 {
            pts.push([rng.gen_range(10.0..11.0), rng.gen_range(10.0..11.0)]);
        }
        let x = Array2::from_shape_fn((40, 2), |(i, j)| pts[i][j]);
        let anchors = select_anchors(&x.view(), 2, 7).unwrap();
        let mut in_low = 0;
        let mut in_high = 0;
        for r in anchors.rows() {
            if r[0] < 1.0 && r[1] < 1.0 {
                in_low += 1;
            }
            if r[0] >= 10.0 && r[1] >= 10.0 {
                in_high += 1;
            }
        }
        assert_eq!((in_low, in_high), (1, 1));
    }

    #[test]
    fn kmeans_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((30, 3), |_| rng.gen_range(-1.0..1.0));
        let a = select_anchors(&x.view(), 5, 99).unwrap();
        let b = select_anchors(&x.view(), 5, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_exact_anchor_single_neighbor() {
        let anchors = array![[0.0, 0.0], [4.0, 0.0]];
        let pts = array![[4.0, 0.0]];
        let z = build_weights(&pts.view(), &anchors.view(), 1, None).unwrap();
        assert_eq!(z.rows()[0], vec![(1, 1.0)]);
    }

    #[test]
    fn weights_equidistant_uniform() {
        let anchors = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let pts = array![[0.0, 0.0]];
        let z = build_weights(&pts.view(), &anchors.view(), 3, Some(0.7)).unwrap();
        for &(_, v) in &z.rows()[0] {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_match_kernel_oracle() {
        let anchors = array![[0.0, 0.0], [3.0, 1.0]];
        let pts = array![[0.1, 0.2], [2.5, 0.5], [1.4, 0.8], [3.1, 1.1], [-0.5, 0.3]];
        let sigma = 0.9;
        let z = build_weights(&pts.view(), &anchors.view(), 2, Some(sigma)).unwrap();
        for (i, row) in z.rows().iter().enumerate() {
            // brute-force over both anchors
            let mut expect = [0.0f64; 2];
            for k in 0..2 {
                let d2 = sq_dist(
                    pts.row(i).to_slice().unwrap(),
                    anchors.row(k).to_slice().unwrap(),
                );
                expect[k] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let sum = expect[0] + expect[1];
            for &(k, v) in row {
                assert_abs_diff_eq!(v, expect[k] / sum, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weight_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let pts = Array2::from_shape_fn((40, 4), |_| rng.gen_range(-2.0..2.0));
        let anchors = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-2.0..2.0));
        let z = build_weights(&pts.view(), &anchors.view(), 3, None).unwrap();
        z.validate().unwrap();
        for row in z.rows() {
            assert!(row.len() <= 3);
            let sum: f64 = row.iter().map(|&(_, v)| v).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn reduced_laplacian_matches_dense_oracle() {
        for seed in 0..8 {
            let n = 10 + (seed as usize % 30);
            let p = 3 + (seed as usize % 3);
            let z = random_weights(n, p, 2, seed);
            let fast = reduced_laplacian(&z).unwrap();
            let dense = dense_reduced_laplacian(&z);
            for i in 0..p {
                for j in 0..p {
                    assert_abs_diff_eq!(fast[(i, j)], dense[(i, j)], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn reduced_laplacian_identity_assignment() {
        // every point its own anchor
        let rows = (0..4).map(|i| vec![(i, 1.0)]).collect();
        let z = AnchorWeights::from_rows(4, rows).unwrap();
        let fast = reduced_laplacian(&z).unwrap();
        let dense = dense_reduced_laplacian(&z);
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(fast[(i, j)], dense[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reduced_laplacian_annihilates_ones() {
        let z = random_weights(25, 4, 2, 3);
        let lap = reduced_laplacian(&z).unwrap();
        let ones = Array2::ones((4, 1));
        let out = lap.dot(&ones);
        assert!(linalg::max_abs(&out) < 1e-9, "{out:?}");
    }

    #[test]
    fn laplacian_is_psd() {
        let z = random_weights(30, 5, 3, 11);
        let lap = reduced_laplacian(&z).unwrap();
        let (vals, _) = linalg::symmetric_eigen(&lap).unwrap();
        assert!(vals.iter().all(|&v| v > -1e-8), "{vals:?}");
    }

    #[test]
    fn solve_identity_design_returns_indicator() {
        let rows = (0..3).map(|i| vec![(i, 1.0)]).collect();
        let z = AnchorWeights::from_rows(3, rows).unwrap();
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let lap = Array2::zeros((3, 3));
        let a = solve_soft_labels(&z, &lap, &y.view(), 0.0).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_abs_diff_eq!(a[(i, j)], y[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn solve_satisfies_first_order_condition() {
        for seed in 0..10 {
            let n = 12 + (seed as usize % 20);
            let p = 3 + (seed as usize % 4);
            let z = random_weights(n, p, 2, 100 + seed);
            let lap = reduced_laplacian(&z).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y = Array2::zeros((n, 2));
            for i in 0..n {
                if rng.gen_bool(0.4) {
                    y[(i, rng.gen_range(0..2))] = 1.0;
                }
            }
            let gamma = 0.05;
            let a = solve_soft_labels(&z, &lap, &y.view(), gamma).unwrap();
            // gradient of the quadratic objective, assembled densely
            let zd = z.to_dense();
            let grad = zd.t().dot(&zd).dot(&a) - zd.t().dot(&y) + lap.dot(&a) * gamma;
            assert!(linalg::max_abs(&grad) < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn strong_smoothing_flattens_columns() {
        // connected chain: consecutive points share anchors
        let z = random_weights(30, 4, 2, 77);
        let lap = reduced_laplacian(&z).unwrap();
        // connectivity check via eigen: null space of a connected graph is 1-D
        let (vals, _) = linalg::symmetric_eigen(&lap).unwrap();
        let near_zero = vals.iter().filter(|v| v.abs() < 1e-9).count();
        assert_eq!(near_zero, 1, "oracle instance must be connected");

        let mut y = Array2::zeros((30, 2));
        y[(0, 0)] = 1.0;
        y[(1, 1)] = 1.0;
        let a = solve_soft_labels(&z, &lap, &y.view(), 1e8).unwrap();
        for j in 0..2 {
            let col = a.column(j);
            let mean = col.sum() / col.len() as f64;
            for &v in col {
                assert!((v - mean).abs() < 1e-6, "column {j} not constant: {col:?}");
            }
        }
    }

    #[test]
    fn singular_system_suggests_ridge() {
        // anchor 1 never referenced -> ZᵀZ rank-deficient
        let rows = vec![vec![(0, 1.0)], vec![(0, 1.0)]];
        let z = AnchorWeights::from_rows(2, rows).unwrap();
        let y = array![[1.0], [0.0]];
        let lap = Array2::zeros((2, 2));
        let err = solve_soft_labels(&z, &lap, &y.view(), 0.0).unwrap_err();
        assert!(err.to_string().contains("gamma > 0"), "{err}");
    }

    #[test]
    fn inference_recovers_identity_labels() {
        let rows = (0..4).map(|i| vec![(i, 1.0)]).collect();
        let z = AnchorWeights::from_rows(4, rows).unwrap();
        let labels = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let (hard, soft) = infer_soft_targets(&z, &labels).unwrap();
        assert_eq!(hard, vec![0, 1, 0, 1]);
        for (i, row) in soft.rows().into_iter().enumerate() {
            assert_abs_diff_eq!(row[hard[i]], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn inference_tie_breaks_to_lowest_class() {
        let rows = vec![vec![(0, 1.0)]];
        let z = AnchorWeights::from_rows(1, rows).unwrap();
        let labels = array![[0.5, 0.5]];
        let (hard, _) = infer_soft_targets(&z, &labels).unwrap();
        assert_eq!(hard, vec![0]);
    }

    #[test]
    fn inference_is_scale_invariant() {
        let z = random_weights(20, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let labels = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.01..1.0));
        let (hard, _) = infer_soft_targets(&z, &labels).unwrap();
        for scale in [4.0, 3.7] {
            let mut scaled = labels.clone();
            for v in scaled.column_mut(1) {
                *v *= scale;
            }
            let (hard2, _) = infer_soft_targets(&z, &scaled).unwrap();
            assert_eq!(hard, hard2, "scale {scale}");
        }
    }

    #[test]
    fn small_instance_matches_harmonic_oracle() {
        // n=6, p=2, c=2: two tight groups, one anchor each
        let pts = array![
            [0.0, 0.0],
            [0.2, 0.1],
            [0.1, 0.2],
            [5.0, 5.0],
            [5.2, 5.1],
            [5.1, 5.2]
        ];
        let anchors = array![[0.1, 0.1], [5.1, 5.1]];
        let z = build_weights(&pts.view(), &anchors.view(), 2, None).unwrap();
        let lap = reduced_laplacian(&z).unwrap();
        let mut y = Array2::zeros((6, 2));
        y[(0, 0)] = 1.0;
        y[(3, 1)] = 1.0;
        let a = solve_soft_labels(&z, &lap, &y.view(), 0.01).unwrap();
        let (hard, _) = infer_soft_targets(&z, &a).unwrap();

        // dense harmonic-function oracle on W = ZΛ⁻¹Zᵀ with rows 0 and 3 clamped
        let zd = z.to_dense();
        let lambda = z.column_sums();
        let mut zl = zd.clone();
        for (k, mut col) in zl.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v: f64| v / lambda[k]);
        }
        let w = zl.dot(&zd.t());
        let unl = [1usize, 2, 4, 5];
        let lab = [0usize, 3];
        let mut wuu = Array2::zeros((4, 4));
        let mut wul = Array2::zeros((4, 2));
        for (a_i, &i) in unl.iter().enumerate() {
            for (b_i, &j) in unl.iter().enumerate() {
                wuu[(a_i, b_i)] = w[(i, j)];
            }
            for (b_i, &j) in lab.iter().enumerate() {
                wul[(a_i, b_i)] = w[(i, j)];
            }
        }
        let mut duu = Array2::zeros((4, 4));
        for (a_i, &i) in unl.iter().enumerate() {
            duu[(a_i, a_i)] = w.row(i).sum();
        }
        let yl = array![[1.0, 0.0], [0.0, 1.0]];
        let rhs = wul.dot(&yl);
        let fu = linalg::cholesky_solve(&(duu - wuu), &rhs).unwrap();
        for (a_i, &i) in unl.iter().enumerate() {
            let oracle = if fu[(a_i, 0)] >= fu[(a_i, 1)] { 0 } else { 1 };
            assert_eq!(hard[i], oracle, "row {i}");
        }
        assert_eq!(hard[0], 0);
        assert_eq!(hard[3], 1);
    }
}
