//! Per-pixel feature construction: vegetation index, channel normalization,
//! patch vectors, and the stratified labeled/unlabeled/test split.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{BandStack, LabelMask};

/// Per-band z-score statistics, frozen at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalized difference of two bands: (nir - red) / (nir + red),
/// defined as 0 where the denominator vanishes.
pub fn compute_ndvi(nir: &[f32], red: &[f32]) -> Result<Vec<f32>> {
    if nir.len() != red.len() {
        return Err(Error::invalid("band size mismatch"));
    }
    if nir.iter().chain(red.iter()).any(|&v| v < 0.0) {
        return Err(Error::invalid("vegetation index needs non-negative bands"));
    }
    Ok(nir
        .iter()
        .zip(red)
        .map(|(&n, &r)| {
            let denom = n + r;
            if denom == 0.0 {
                0.0
            } else {
                (n - r) / denom
            }
        })
        .collect())
}

/// Append an "ndvi" band computed from the "nir" and "red" bands. Returns the
/// stack unchanged when it already carries one or lacks a NIR channel.
pub fn append_ndvi(stack: &BandStack) -> Result<BandStack> {
    if stack.band_index("ndvi").is_some() {
        return Ok(stack.clone());
    }
    let (nir, red) = match (stack.band_index("nir"), stack.band_index("red")) {
        (Some(n), Some(r)) => (n, r),
        _ => return Ok(stack.clone()),
    };
    let ndvi = compute_ndvi(stack.band(nir), stack.band(red))?;
    stack.with_band("ndvi", ndvi)
}

fn band_stats(plane: &[f32]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Z-score every band; the returned stats reproduce the transform at
/// inference time.
pub fn normalize_channels(stack: &BandStack) -> Result<(BandStack, NormStats)> {
    let mut mean = Vec::with_capacity(stack.bands());
    let mut std = Vec::with_capacity(stack.bands());
    for b in 0..stack.bands() {
        let (m, s) = band_stats(stack.band(b));
        if s < 1e-12 {
            return Err(Error::invalid(format!(
                "zero variance band {:?}",
                stack.band_names()[b]
            )));
        }
        mean.push(m);
        std.push(s);
    }
    let stats = NormStats { mean, std };
    Ok((apply_norm_stats(stack, &stats)?, stats))
}

pub fn apply_norm_stats(stack: &BandStack, stats: &NormStats) -> Result<BandStack> {
    if stats.mean.len() != stack.bands() || stats.std.len() != stack.bands() {
        return Err(Error::invalid("normalization stats do not match band count"));
    }
    if stats.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("normalization std must be positive"));
    }
    let plane = stack.width() * stack.height();
    let mut data = Vec::with_capacity(stack.data().len());
    for b in 0..stack.bands() {
        let (m, s) = (stats.mean[b], stats.std[b]);
        data.extend(
            stack.data()[b * plane..(b + 1) * plane]
                .iter()
                .map(|&v| ((v as f64 - m) / s) as f32),
        );
    }
    BandStack::new(
        stack.width(),
        stack.height(),
        stack.band_names().to_vec(),
        data,
    )
}

/// Reflect an out-of-range index back into [0, len).
fn mirror_index(mut i: isize, len: isize) -> usize {
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    while i < 0 || i >= len {
        if i < 0 {
            i = -i - 1;
        }
        if i >= len {
            i = 2 * len - i - 1;
        }
    }
    i as usize
}

/// Band-major flattening of the patch×patch window centered at (x, y), with
/// reflect padding at the image borders.
pub fn extract_patch(stack: &BandStack, x: usize, y: usize, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || patch % 2 == 0 {
        return Err(Error::invalid("patch size must be odd"));
    }
    if x >= stack.width() || y >= stack.height() {
        return Err(Error::invalid(format!(
            "patch center ({x}, {y}) outside image"
        )));
    }
    let half = (patch / 2) as isize;
    let (w, h) = (stack.width() as isize, stack.height() as isize);
    let mut out = Vec::with_capacity(patch * patch * stack.bands());
    for b in 0..stack.bands() {
        let plane = stack.band(b);
        for dy in -half..=half {
            let yy = mirror_index(y as isize + dy, h);
            for dx in -half..=half {
                let xx = mirror_index(x as isize + dx, w);
                out.push(plane[yy * stack.width() + xx] as f64);
            }
        }
    }
    Ok(out)
}

/// Fractions of the annotated pixels assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub labeled: f64,
    pub unlabeled: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            labeled: 0.16,
            unlabeled: 0.64,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        for r in [self.labeled, self.unlabeled, self.test] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid("split ratio outside [0, 1]"));
            }
        }
        if self.labeled + self.unlabeled + self.test > 1.0 + 1e-9 {
            return Err(Error::invalid("split ratios sum above 1"));
        }
        Ok(())
    }
}

/// Which split a dataset row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
    Unused,
}

/// Flattened patch vectors over the annotated pixels with disjoint
/// labeled/unlabeled/test index sets.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    /// n×m patch matrix, one row per annotated pixel in row-major scan order.
    pub x: Array2<f64>,
    /// (x, y) pixel of each row.
    pub coords: Vec<(usize, usize)>,
    /// Ground-truth class (1..=c) of each row.
    pub classes: Vec<u8>,
    pub num_classes: usize,
    pub labeled_idx: Vec<usize>,
    /// One-hot targets aligned with `labeled_idx`.
    pub labeled_targets: Array2<f64>,
    pub unlabeled_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl PatchDataset {
    pub fn num_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn one_hot(&self, class: u8) -> Vec<f64> {
        let mut row = vec![0.0; self.num_classes];
        row[class as usize - 1] = 1.0;
        row
    }

    /// Labeled rows followed by unlabeled rows, both ascending.
    pub fn train_rows(&self) -> Vec<usize> {
        let mut rows = self.labeled_idx.clone();
        rows.extend_from_slice(&self.unlabeled_idx);
        rows
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Split membership for the annotated pixels, independent of the feature
/// matrix so it can be computed once and persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub coords: Vec<(usize, usize)>,
    pub classes: Vec<u8>,
    pub num_classes: usize,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Stratified per-class split of the annotated pixels, deterministic for a
/// given seed. Rows enumerate annotated pixels in row-major scan order.
pub fn compute_splits(mask: &LabelMask, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    let num_classes = mask.max_class() as usize;
    if num_classes == 0 {
        return Err(Error::invalid("mask has no annotated pixels"));
    }
    let mut coords = Vec::new();
    let mut classes = Vec::new();
    let mut per_class_rows: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let c = mask.get(x, y);
            if c > 0 {
                per_class_rows[c as usize - 1].push(coords.len());
                coords.push((x, y));
                classes.push(c);
            }
        }
    }
    for (ci, rows) in per_class_rows.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::invalid(format!(
                "class {} absent from the mask",
                ci + 1
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled_idx = Vec::new();
    let mut unlabeled_idx = Vec::new();
    let mut test_idx = Vec::new();
    for rows in &mut per_class_rows {
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_l = round_half_up(n as f64 * ratios.labeled).min(n);
        let n_u = round_half_up(n as f64 * ratios.unlabeled).min(n - n_l);
        let n_t = round_half_up(n as f64 * ratios.test).min(n - n_l - n_u);
        labeled_idx.extend_from_slice(&rows[..n_l]);
        unlabeled_idx.extend_from_slice(&rows[n_l..n_l + n_u]);
        test_idx.extend_from_slice(&rows[n_l + n_u..n_l + n_u + n_t]);
    }
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitAssignment {
        coords,
        classes,
        num_classes,
        labeled_idx,
        unlabeled_idx,
        test_idx,
    })
}

/// Extract one patch row per annotated pixel for an existing split.
pub fn materialize_dataset(
    stack: &BandStack,
    splits: &SplitAssignment,
    patch: usize,
) -> Result<PatchDataset> {
    let dim = patch * patch * stack.bands();
    let mut x_mat = Array2::<f64>::zeros((splits.coords.len(), dim));
    for (row, &(px, py)) in splits.coords.iter().enumerate() {
        let v = extract_patch(stack, px, py, patch)?;
        x_mat.row_mut(row).assign(&ndarray::ArrayView1::from(&v));
    }
    let mut labeled_targets = Array2::<f64>::zeros((splits.labeled_idx.len(), splits.num_classes));
    for (i, &row) in splits.labeled_idx.iter().enumerate() {
        labeled_targets[(i, splits.classes[row] as usize - 1)] = 1.0;
    }
    Ok(PatchDataset {
        x: x_mat,
        coords: splits.coords.clone(),
        classes: splits.classes.clone(),
        num_classes: splits.num_classes,
        labeled_idx: splits.labeled_idx.clone(),
        labeled_targets,
        unlabeled_idx: splits.unlabeled_idx.clone(),
        test_idx: splits.test_idx.clone(),
    })
}

/// Extract a patch row per annotated pixel and split them per class into
/// labeled/unlabeled/test sets. Deterministic for a given seed.
pub fn build_dataset(
    stack: &BandStack,
    mask: &LabelMask,
    ratios: SplitRatios,
    patch: usize,
    seed: u64,
) -> Result<PatchDataset> {
    if mask.width() != stack.width() || mask.height() != stack.height() {
        return Err(Error::invalid("mask dimensions do not match band stack"));
    }
    let splits = compute_splits(mask, ratios, seed)?;
    materialize_dataset(stack, &splits, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ndvi_direct_values() {
        let out = compute_ndvi(&[0.6], &[0.2]).unwrap();
        assert_abs_diff_eq!(out[0], 0.5, epsilon = 1e-7);
        let eq = compute_ndvi(&[0.37, 1.0], &[0.37, 1.0]).unwrap();
        assert_eq!(eq, vec![0.0, 0.0]);
        let zero = compute_ndvi(&[0.0], &[0.0]).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn ndvi_size_mismatch() {
        assert!(compute_ndvi(&[0.1, 0.2], &[0.1]).is_err());
    }

    proptest! {
        #[test]
        fn ndvi_range_and_antisymmetry(
            nir in proptest::collection::vec(0.0f32..10.0, 1..40),
            red in proptest::collection::vec(0.0f32..10.0, 1..40),
        ) {
            let n = nir.len().min(red.len());
            let (nir, red) = (&nir[..n], &red[..n]);
            let fwd = compute_ndvi(nir, red).unwrap();
            let rev = compute_ndvi(red, nir).unwrap();
            for (a, b) in fwd.iter().zip(&rev) {
                prop_assert!((-1.0..=1.0).contains(a));
                prop_assert!((a + b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn normalization_zero_mean_unit_std() {
        let stack = BandStack::new(2, 2, vec!["a".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (norm, stats) = normalize_channels(&stack).unwrap();
        let (m, s) = band_stats(norm.band(0));
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(stats.mean[0], 2.5, epsilon = 1e-12);

        // already-normalized input stays put
        let (again, stats2) = normalize_channels(&norm).unwrap();
        for (a, b) in norm.data().iter().zip(again.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
        assert_abs_diff_eq!(stats2.mean[0], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_band_rejected() {
        let stack = BandStack::new(3, 1, vec!["a".into()], vec![5.0, 5.0, 5.0]).unwrap();
        let err = normalize_channels(&stack).unwrap_err();
        assert!(err.to_string().contains("zero variance band"));
    }

    fn ramp_stack(w: usize, h: usize, bands: usize) -> BandStack {
        let names = (0..bands).map(|i| format!("b{i}")).collect();
        let data = (0..w * h * bands).map(|i| i as f32 * 0.1).collect();
        BandStack::new(w, h, names, data).unwrap()
    }

    #[test]
    fn interior_patch_is_raw_window() {
        let stack = ramp_stack(20, 20, 5);
        let v = extract_patch(&stack, 9, 9, 15).unwrap();
        assert_eq!(v.len(), 1125);
        // spot-check the window against direct indexing
        for b in 0..5 {
            for dy in -7i32..=7 {
                for dx in -7i32..=7 {
                    let got = v[b * 225 + ((dy + 7) * 15 + dx + 7) as usize];
                    let want = stack.get(b, (9 + dx) as usize, (9 + dy) as usize) as f64;
                    assert_eq!(got, want);
                }
            }
        }
    }

    /// Index-mirroring oracle built by explicit table walk.
    fn mirror_oracle(i: isize, len: isize) -> usize {
        // construct the infinite reflected sequence and walk to position i
        let period: Vec<usize> = (0..len as usize).chain((0..len as usize).rev()).collect();
        let m = period.len() as isize;
        let pos = ((i % m) + m) % m;
        period[pos as usize]
    }

    #[test]
    fn corner_patch_uses_mirrored_values() {
        let stack = ramp_stack(20, 20, 5);
        let v = extract_patch(&stack, 0, 0, 15).unwrap();
        assert_eq!(v.len(), 1125);
        for b in 0..5 {
            for dy in -7isize..=7 {
                for dx in -7isize..=7 {
                    let got = v[(b as isize * 225 + (dy + 7) * 15 + dx + 7) as usize];
                    let want = stack.get(b, mirror_oracle(dx, 20), mirror_oracle(dy, 20)) as f64;
                    assert_eq!(got, want, "b={b} dx={dx} dy={dy}");
                }
            }
        }
    }

    #[test]
    fn constant_stack_constant_patches() {
        let stack = BandStack::new(4, 4, vec!["a".into()], vec![2.5; 16]).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let v = extract_patch(&stack, x, y, 3).unwrap();
                assert!(v.iter().all(|&q| q == 2.5));
            }
        }
    }

    #[test]
    fn patch_covers_small_images_via_mirror() {
        // patch larger than the image: mirroring must bounce repeatedly
        let stack = ramp_stack(3, 2, 2);
        for y in 0..2 {
            for x in 0..3 {
                let v = extract_patch(&stack, x, y, 7).unwrap();
                assert_eq!(v.len(), 7 * 7 * 2);
                for b in 0..2 {
                    for dy in -3isize..=3 {
                        for dx in -3isize..=3 {
                            let got = v[(b as isize * 49 + (dy + 3) * 7 + dx + 3) as usize];
                            let want = stack.get(
                                b,
                                mirror_oracle(x as isize + dx, 3),
                                mirror_oracle(y as isize + dy, 2),
                            ) as f64;
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patch_center_outside_errors() {
        let stack = ramp_stack(4, 4, 1);
        assert!(extract_patch(&stack, 4, 0, 3).is_err());
    }

    fn three_class_mask(per_class: usize) -> (BandStack, LabelMask) {
        let w = per_class * 3;
        let mut labels = Vec::with_capacity(w);
        for c in 1..=3u8 {
            labels.extend(std::iter::repeat(c).take(per_class));
        }
        let mask = LabelMask::new(w, 1, labels).unwrap();
        let stack = ramp_stack(w, 1, 2);
        (stack, mask)
    }

    #[test]
    fn split_counts_match_table_proportions() {
        let (stack, mask) = three_class_mask(100);
        let ds = build_dataset(&stack, &mask, SplitRatios::default(), 3, 7).unwrap();
        assert_eq!(ds.labeled_idx.len(), 48); // 16 per class
        assert_eq!(ds.unlabeled_idx.len(), 192); // 64 per class
        assert_eq!(ds.test_idx.len(), 60); // 20 per class
        for c in 1..=3u8 {
            let count = ds
                .labeled_idx
                .iter()
                .filter(|&&r| ds.classes[r] == c)
                .count();
            assert_eq!(count, 16, "class {c}");
        }
    }

    #[test]
    fn split_all_labeled() {
        let (stack, mask) = three_class_mask(10);
        let ratios = SplitRatios {
            labeled: 1.0,
            unlabeled: 0.0,
            test: 0.0,
        };
        let ds = build_dataset(&stack, &mask, ratios, 3, 7).unwrap();
        assert_eq!(ds.labeled_idx.len(), 30);
        assert!(ds.unlabeled_idx.is_empty());
        assert!(ds.test_idx.is_empty());
    }

    #[test]
    fn split_deterministic_per_seed() {
        let (stack, mask) = three_class_mask(40);
        let a = build_dataset(&stack, &mask, SplitRatios::default(), 3, 123).unwrap();
        let b = build_dataset(&stack, &mask, SplitRatios::default(), 3, 123).unwrap();
        assert_eq!(a.labeled_idx, b.labeled_idx);
        assert_eq!(a.unlabeled_idx, b.unlabeled_idx);
        assert_eq!(a.test_idx, b.test_idx);
        let c = build_dataset(&stack, &mask, SplitRatios::default(), 3, 124).unwrap();
        assert_ne!(a.labeled_idx, c.labeled_idx);
    }

    #[test]
    fn split_rejects_missing_class_and_bad_ratios() {
        let stack = ramp_stack(4, 1, 1);
        let mask = LabelMask::new(4, 1, vec![0, 0, 3, 3]).unwrap();
        assert!(build_dataset(&stack, &mask, SplitRatios::default(), 3, 1).is_err());

        let (stack, mask) = three_class_mask(4);
        let bad = SplitRatios {
            labeled: 1.2,
            unlabeled: 0.0,
            test: 0.0,
        };
        assert!(build_dataset(&stack, &mask, bad, 3, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_is_stratified_within_one_pixel(
            counts in proptest::collection::vec(3usize..60, 2..4),
            seed in 0u64..1000,
        ) {
            let total: usize = counts.iter().sum();
            let mut labels = Vec::new();
            for (i, &n) in counts.iter().enumerate() {
                labels.extend(std::iter::repeat(i as u8 + 1).take(n));
            }
            let mask = LabelMask::new(total, 1, labels).unwrap();
            let stack = ramp_stack(total, 1, 1);
            let ratios = SplitRatios::default();
            let ds = build_dataset(&stack, &mask, ratios, 3, seed).unwrap();
            for (i, &n) in counts.iter().enumerate() {
                let c = i as u8 + 1;
                let l = ds.labeled_idx.iter().filter(|&&r| ds.classes[r] == c).count();
                let u = ds.unlabeled_idx.iter().filter(|&&r| ds.classes[r] == c).count();
                let t = ds.test_idx.iter().filter(|&&r| ds.classes[r] == c).count();
                prop_assert!((l as f64 - n as f64 * ratios.labeled).abs() <= 1.0);
                prop_assert!((u as f64 - n as f64 * ratios.unlabeled).abs() <= 1.0);
                prop_assert!((t as f64 - n as f64 * ratios.test).abs() <= 1.0 + 1.0);
            }
            // disjointness
            let mut all: Vec<usize> = ds.labeled_idx.iter()
                .chain(&ds.unlabeled_idx).chain(&ds.test_idx).copied().collect();
            let before = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(before, all.len());
        }
    }
}
