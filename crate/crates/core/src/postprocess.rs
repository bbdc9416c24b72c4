//! Spatial cleanup of predicted masks: neighborhood majority voting and
//! binary erosion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelMask;

/// Voting neighborhood shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteShape {
    /// Pixels whose center distance is at most the radius.
    Disc,
    /// The axis-aligned square of side 2·radius+1.
    Square,
}

fn neighborhood_offsets(radius: usize, shape: VoteShape) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let keep = match shape {
                VoteShape::Disc => dx * dx + dy * dy <= r2,
                VoteShape::Square => true,
            };
            if keep {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

/// Each pixel takes the modal class of its neighborhood (truncated at the
/// image border); on a tie the pixel keeps its original value.
pub fn majority_filter(mask: &LabelMask, radius: usize, shape: VoteShape) -> Result<LabelMask> {
    if radius == 0 {
        return Err(Error::invalid("radius must be >= 1"));
    }
    let offsets = neighborhood_offsets(radius, shape);
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let num_values = mask.max_class() as usize + 1;
    let out: Vec<u8> = (0..mask.width() * mask.height())
        .into_par_iter()
        .map(|idx| {
            let x = (idx % mask.width()) as isize;
            let y = (idx / mask.width()) as isize;
            let mut counts = vec![0u32; num_values];
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && nx < w && ny >= 0 && ny < h {
                    counts[mask.get(nx as usize, ny as usize) as usize] += 1;
                }
            }
            let best = counts.iter().max().copied().unwrap_or(0);
            let winners: Vec<u8> = counts
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c == best)
                .map(|(v, _)| v as u8)
                .collect();
            if winners.len() == 1 {
                winners[0]
            } else {
                mask.get(x as usize, y as usize)
            }
        })
        .collect();
    LabelMask::new(mask.width(), mask.height(), out)
}

/// Binary erosion: a pixel survives iff its whole window×window
/// neighborhood is set; outside the image counts as unset, so borders erode.
pub fn erode_binary(mask: &LabelMask, window: usize) -> Result<LabelMask> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("erosion window must be odd"));
    }
    if mask.labels().iter().any(|&v| v > 1) {
        return Err(Error::invalid("erosion input must be a 0/1 mask"));
    }
    let half = (window / 2) as isize;
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let out: Vec<u8> = (0..mask.width() * mask.height())
        .into_par_iter()
        .map(|idx| {
            let x = (idx % mask.width()) as isize;
            let y = (idx / mask.width()) as isize;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || nx >= w || ny < 0 || ny >= h {
                        return 0;
                    }
                    if mask.get(nx as usize, ny as usize) == 0 {
                        return 0;
                    }
                }
            }
            1
        })
        .collect();
    LabelMask::new(mask.width(), mask.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_majority(mask: &LabelMask, radius: usize, shape: VoteShape) -> LabelMask {
        let r = radius as isize;
        let mut out = LabelMask::zeros(mask.width(), mask.height()).unwrap();
        for y in 0..mask.height() as isize {
            for x in 0..mask.width() as isize {
                let mut counts = std::collections::BTreeMap::<u8, u32>::new();
                for ny in 0..mask.height() as isize {
                    for nx in 0..mask.width() as isize {
                        let (dx, dy) = (nx - x, ny - y);
                        let inside = match shape {
                            VoteShape::Disc => dx * dx + dy * dy <= r * r,
                            VoteShape::Square => dx.abs() <= r && dy.abs() <= r,
                        };
                        if inside {
                            *counts.entry(mask.get(nx as usize, ny as usize)).or_default() += 1;
                        }
                    }
                }
                let best = counts.values().max().copied().unwrap();
                let winners: Vec<u8> = counts
                    .iter()
                    .filter(|&(_, &c)| c == best)
                    .map(|(&v, _)| v)
                    .collect();
                let value = if winners.len() == 1 {
                    winners[0]
                } else {
                    mask.get(x as usize, y as usize)
                };
                out.set(x as usize, y as usize, value);
            }
        }
        out
    }

    fn brute_erode(mask: &LabelMask, window: usize) -> LabelMask {
        let half = (window / 2) as isize;
        let mut out = LabelMask::zeros(mask.width(), mask.height()).unwrap();
        for y in 0..mask.height() as isize {
            for x in 0..mask.width() as isize {
                let mut all = true;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (nx, ny) = (x + dx, y + dy);
                        let v = if nx < 0
                            || ny < 0
                            || nx >= mask.width() as isize
                            || ny >= mask.height() as isize
                        {
                            0
                        } else {
                            mask.get(nx as usize, ny as usize)
                        };
                        if v == 0 {
                            all = false;
                        }
                    }
                }
                out.set(x as usize, y as usize, u8::from(all));
            }
        }
        out
    }

    #[test]
    fn constant_mask_is_fixed_point() {
        let mask = LabelMask::new(5, 5, vec![2; 25]).unwrap();
        let out = majority_filter(&mask, 2, VoteShape::Disc).unwrap();
        assert_eq!(out, mask);
    }

    #[test]
    fn lone_center_flips() {
        let mut mask = LabelMask::new(3, 3, vec![1; 9]).unwrap();
        mask.set(1, 1, 2);
        let out = majority_filter(&mask, 1, VoteShape::Disc).unwrap();
        assert_eq!(out.get(1, 1), 1);
    }

    #[test]
    fn majority_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..6 {
            let (w, h) = (rng.gen_range(4..=16), rng.gen_range(4..=16));
            let labels: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..4)).collect();
            let mask = LabelMask::new(w, h, labels).unwrap();
            for shape in [VoteShape::Disc, VoteShape::Square] {
                let fast = majority_filter(&mask, 3, shape).unwrap();
                let slow = brute_majority(&mask, 3, shape);
                assert_eq!(fast, slow);
            }
        }
    }

    #[test]
    fn whole_image_radius_yields_global_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(1..=3)).collect();
        let mask = LabelMask::new(8, 8, labels.clone()).unwrap();
        let out = majority_filter(&mask, 32, VoteShape::Disc).unwrap();
        let mut counts = [0u32; 4];
        for &v in &labels {
            counts[v as usize] += 1;
        }
        let best = *counts.iter().max().unwrap();
        let winners: Vec<u8> = (0..4u8).filter(|&v| counts[v as usize] == best).collect();
        if winners.len() == 1 {
            assert!(out.labels().iter().all(|&v| v == winners[0]));
        }
    }

    #[test]
    fn erosion_kills_isolated_pixel() {
        let mut mask = LabelMask::zeros(9, 9).unwrap();
        mask.set(4, 4, 1);
        let out = erode_binary(&mask, 7).unwrap();
        assert!(out.labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn erosion_shrinks_solid_block() {
        let mut mask = LabelMask::zeros(20, 20).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                mask.set(x, y, 1);
            }
        }
        let out = erode_binary(&mask, 7).unwrap();
        let survivors: usize = out.labels().iter().map(|&v| v as usize).sum();
        assert_eq!(survivors, 14 * 14);
        assert_eq!(out, brute_erode(&mask, 7));
    }

    #[test]
    fn erosion_zero_mask_and_bad_window() {
        let mask = LabelMask::zeros(4, 4).unwrap();
        let out = erode_binary(&mask, 3).unwrap();
        assert!(out.labels().iter().all(|&v| v == 0));
        assert!(erode_binary(&mask, 4).is_err());
    }

    #[test]
    fn erosion_is_anti_extensive_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            let (w, h) = (rng.gen_range(3..=14), rng.gen_range(3..=14));
            let labels: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..2)).collect();
            let mask = LabelMask::new(w, h, labels).unwrap();
            for window in [1, 3, 5] {
                let out = erode_binary(&mask, window).unwrap();
                assert_eq!(out, brute_erode(&mask, window));
                for (o, m) in out.labels().iter().zip(mask.labels()) {
                    assert!(o <= m, "erosion must be anti-extensive");
                }
                if window == 1 {
                    assert_eq!(out, mask, "window 1 is the identity");
                }
            }
        }
    }
}
