//! Synthetic scenes for desk-scale runs: class blobs with distinct band
//! signatures on a ground background, elevated height for buildings, a
//! vegetation-like spectral response, and seeded Gaussian pixel noise.
//! The full ground-truth mask comes back alongside the band stack.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BandStack, LabelMask};

pub const BAND_NAMES: [&str; 5] = ["nir", "red", "green", "ndsm", "ndvi"];

/// Mean band vector of one class over (nir, red, green, ndsm, ndvi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub bands: [f32; 5],
}

impl ClassSignature {
    /// Derive the vegetation-index component from the raw reflectances.
    pub fn from_raw(nir: f32, red: f32, green: f32, ndsm: f32) -> ClassSignature {
        let denom = nir + red;
        let ndvi = if denom == 0.0 { 0.0 } else { (nir - red) / denom };
        ClassSignature {
            bands: [nir, red, green, ndsm, ndvi],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Class count; the last class is the ground background.
    pub num_classes: usize,
    /// Blobs placed for each non-background class.
    pub blobs_per_class: usize,
    pub signatures: Vec<ClassSignature>,
    pub noise_sigma: f32,
    /// Blob extent range in pixels (half-width).
    pub blob_size: (usize, usize),
    pub seed: u64,
    pub max_placement_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            num_classes: 3,
            blobs_per_class: 6,
            signatures: vec![
                // buildings: bright roof, elevated, low vegetation response
                ClassSignature::from_raw(0.30, 0.45, 0.45, 0.60),
                // vegetation: strong NIR, low red
                ClassSignature::from_raw(0.80, 0.20, 0.40, 0.08),
                // ground: balanced reflectance, flat
                ClassSignature::from_raw(0.40, 0.40, 0.35, 0.02),
            ],
            noise_sigma: 0.05,
            blob_size: (4, 13),
            seed: 7,
            max_placement_retries: 400,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.signatures.len() != self.num_classes {
            return Err(Error::invalid("one signature per class required"));
        }
        for (i, a) in self.signatures.iter().enumerate() {
            for b in &self.signatures[i + 1..] {
                if a == b {
                    return Err(Error::invalid("class signatures must be pairwise distinct"));
                }
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        if self.blob_size.0 == 0 || self.blob_size.0 > self.blob_size.1 {
            return Err(Error::invalid("bad blob size range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    class: u8,
    cx: isize,
    cy: isize,
    rx: isize,
    ry: isize,
    rectangular: bool,
}

impl Blob {
    fn bbox(&self) -> (isize, isize, isize, isize) {
        (
            self.cx - self.rx,
            self.cy - self.ry,
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }

    fn overlaps(&self, other: &Blob) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        // one pixel of separation between bounding boxes
        ax0 <= bx1 + 1 && bx0 <= ax1 + 1 && ay0 <= by1 + 1 && by0 <= ay1 + 1
    }

    fn contains(&self, x: isize, y: isize) -> bool {
        if self.rectangular {
            (x - self.cx).abs() <= self.rx && (y - self.cy).abs() <= self.ry
        } else {
            let fx = (x - self.cx) as f64 / self.rx as f64;
            let fy = (y - self.cy) as f64 / self.ry as f64;
            fx * fx + fy * fy <= 1.0
        }
    }
}

/// Generate the scene. Deterministic for a given spec (the seed lives
/// inside it).
pub fn generate(spec: &SceneSpec) -> Result<(BandStack, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as isize, spec.height as isize);

    // place blobs for every non-background class; the last class fills the rest
    let mut blobs: Vec<Blob> = Vec::new();
    for class in 1..spec.num_classes as u8 {
        for blob_i in 0..spec.blobs_per_class {
            let mut placed = false;
            for _ in 0..spec.max_placement_retries {
                let rx = rng.gen_range(spec.blob_size.0..=spec.blob_size.1) as isize;
                let ry = rng.gen_range(spec.blob_size.0..=spec.blob_size.1) as isize;
                if 2 * rx + 2 >= w || 2 * ry + 2 >= h {
                    continue;
                }
                let candidate = Blob {
                    class,
                    cx: rng.gen_range(rx..w - rx),
                    cy: rng.gen_range(ry..h - ry),
                    rx,
                    ry,
                    rectangular: class == 1,
                };
                if blobs.iter().all(|b| !candidate.overlaps(b)) {
                    blobs.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::invalid(format!(
                    "blob {blob_i} of class {class} exceeded the placement retry budget"
                )));
            }
        }
    }

    let background = spec.num_classes as u8;
    let mut labels = vec![background; spec.width * spec.height];
    for y in 0..h {
        for x in 0..w {
            for blob in &blobs {
                if blob.contains(x, y) {
                    labels[(y * w + x) as usize] = blob.class;
                    break;
                }
            }
        }
    }
    let mask = LabelMask::new(spec.width, spec.height, labels)?;

    let plane = spec.width * spec.height;
    let mut data = vec![0.0f32; plane * 5];
    for (b, plane_data) in data.chunks_mut(plane).enumerate() {
        for (i, v) in plane_data.iter_mut().enumerate() {
            let class = mask.labels()[i] as usize - 1;
            *v = spec.signatures[class].bands[b];
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma as f64)
            .map_err(|e| Error::invalid(format!("noise sigma: {e}")))?;
        for (idx, v) in data.iter_mut().enumerate() {
            let noisy = *v as f64 + normal.sample(&mut rng);
            // the first three planes are reflectances; they stay non-negative
            // so the vegetation index remains well-defined downstream
            *v = if idx < plane * 3 {
                noisy.max(0.0) as f32
            } else {
                noisy as f32
            };
        }
    }
    let stack = BandStack::new(
        spec.width,
        spec.height,
        BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        data,
    )?;
    Ok((stack, mask))
}
