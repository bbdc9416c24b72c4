//! Multi-band raster and label-mask containers, their on-disk formats, and
//! polygon-annotation rasterization.
//!
//! File layout is deliberately minimal so round trips are bit-exact: a small
//! text header at `<path>` and a raw little-endian payload at `<path>.raw`.
//! Band stacks store planar (band-major) `f32` data, label masks store one
//! `u8` class code per pixel (0 = unannotated).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// H×W×B floating raster, band-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    width: usize,
    height: usize,
    band_names: Vec<String>,
    data: Vec<f32>,
}

impl BandStack {
    pub fn new(
        width: usize,
        height: usize,
        band_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || band_names.is_empty() {
            return Err(Error::invalid("band stack dimensions must be positive"));
        }
        for name in &band_names {
            if name.is_empty() || name.contains(',') || name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("bad band name {name:?}")));
            }
        }
        for (i, a) in band_names.iter().enumerate() {
            if band_names[i + 1..].contains(a) {
                return Err(Error::invalid(format!("duplicate band name {a:?}")));
            }
        }
        if data.len() != width * height * band_names.len() {
            return Err(Error::invalid(format!(
                "payload length mismatch: got {} values, expected {}",
                data.len(),
                width * height * band_names.len()
            )));
        }
        let stack = BandStack {
            width,
            height,
            band_names,
            data,
        };
        stack.check_finite()?;
        Ok(stack)
    }

    fn check_finite(&self) -> Result<()> {
        let plane = self.width * self.height;
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                let b = i / plane;
                let rest = i % plane;
                return Err(Error::invalid(format!(
                    "non-finite value at band {}, pixel ({}, {})",
                    b,
                    rest % self.width,
                    rest / self.width
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|n| n == name)
    }

    /// Plane of band `b`, row-major.
    pub fn band(&self, b: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[b * plane..(b + 1) * plane]
    }

    pub fn get(&self, b: usize, x: usize, y: usize) -> f32 {
        self.data[b * self.width * self.height + y * self.width + x]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// New stack with an extra plane appended.
    pub fn with_band(&self, name: &str, plane: Vec<f32>) -> Result<Self> {
        if plane.len() != self.width * self.height {
            return Err(Error::invalid("appended band has wrong size"));
        }
        let mut names = self.band_names.clone();
        names.push(name.to_string());
        let mut data = self.data.clone();
        data.extend_from_slice(&plane);
        BandStack::new(self.width, self.height, names, data)
    }
}

/// Per-pixel class codes paired with a [`BandStack`]; 0 means unannotated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if labels.len() != width * height {
            return Err(Error::invalid(format!(
                "payload length mismatch: got {} labels, expected {}",
                labels.len(),
                width * height
            )));
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        LabelMask::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Largest class code present (0 for an all-unannotated mask).
    pub fn max_class(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// 0/1 mask selecting one class.
    pub fn class_indicator(&self, class: u8) -> LabelMask {
        LabelMask {
            width: self.width,
            height: self.height,
            labels: self
                .labels
                .iter()
                .map(|&v| u8::from(v == class))
                .collect(),
        }
    }
}

/// One annotation polygon in pixel coordinates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolygonAnnotation {
    pub class_id: u8,
    pub vertices: Vec<(f64, f64)>,
}

impl PolygonAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.class_id == 0 {
            return Err(Error::invalid("polygon class_id must be >= 1"));
        }
        if self.vertices.len() < 3 {
            return Err(Error::invalid("polygon needs at least 3 vertices"));
        }
        if !is_simple_polygon(&self.vertices) {
            return Err(Error::invalid("polygon is self-intersecting"));
        }
        Ok(())
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    orient(a, b, p) == 0.0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

/// True if segments ab and cd share any point.
fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Simplicity test: no two non-adjacent edges may touch, adjacent edges may
/// share only their common vertex.
fn is_simple_polygon(v: &[(f64, f64)]) -> bool {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in i + 1..n {
            let (c, d) = (v[j], v[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // shared endpoint allowed, anything more means collinear overlap
                let shared = if j == i + 1 { b } else { a };
                let others = [a, b, c, d]
                    .into_iter()
                    .filter(|&p| p != shared)
                    .collect::<Vec<_>>();
                if others.iter().any(|&p| {
                    (p != shared)
                        && (on_segment(a, b, p) && on_segment(c, d, p))
                }) {
                    return false;
                }
            } else if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Even-odd point-in-polygon with boundary points counted as inside.
pub fn point_in_polygon(v: &[(f64, f64)], p: (f64, f64)) -> bool {
    let n = v.len();
    for i in 0..n {
        if on_segment(v[i], v[(i + 1) % n], p) {
            return true;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let (x1, y1) = v[i];
        let (x2, y2) = v[(i + 1) % n];
        if (y1 > p.1) != (y2 > p.1) {
            let xc = x1 + (p.1 - y1) / (y2 - y1) * (x2 - x1);
            if p.0 < xc {
                inside = !inside;
            }
        }
    }
    inside
}

/// Burn polygons into a label mask. Pixel (x, y) is tested at its center
/// (x+0.5, y+0.5); on overlap the last polygon in document order wins.
pub fn rasterize_annotations(
    polygons: &[PolygonAnnotation],
    width: usize,
    height: usize,
) -> Result<LabelMask> {
    let mut mask = LabelMask::zeros(width, height)?;
    for poly in polygons {
        poly.validate()?;
        for &(x, y) in &poly.vertices {
            if x < 0.0 || x > width as f64 || y < 0.0 || y > height as f64 {
                return Err(Error::invalid(format!(
                    "polygon vertex ({x}, {y}) outside image bounds {width}x{height}"
                )));
            }
        }
        // bounding box keeps the per-pixel loop tight
        let xs = poly.vertices.iter().map(|v| v.0);
        let ys = poly.vertices.iter().map(|v| v.1);
        let x0 = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (xs.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(width);
        let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (ys.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let center = (x as f64 + 0.5, y as f64 + 0.5);
                if point_in_polygon(&poly.vertices, center) {
                    mask.set(x, y, poly.class_id);
                }
            }
        }
    }
    Ok(mask)
}

/// Parse a polygon annotation document (a JSON array of objects with
/// `class_id` and `vertices`).
pub fn parse_annotations(text: &str) -> Result<Vec<PolygonAnnotation>> {
    let polys: Vec<PolygonAnnotation> = serde_json::from_str(text)
        .map_err(|e| Error::invalid(format!("annotation document: {e}")))?;
    for p in &polys {
        p.validate()?;
    }
    Ok(polys)
}

pub fn load_annotations(path: &Path) -> Result<Vec<PolygonAnnotation>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path, format!("cannot read annotations: {e}")))?;
    parse_annotations(&text)
}

fn raw_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".raw");
    s.into()
}

fn parse_header<'a>(
    path: &Path,
    text: &'a str,
    expect_format: &str,
) -> Result<std::collections::BTreeMap<&'a str, &'a str>> {
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("bad header line {line:?}")))?;
        fields.insert(k, v.trim());
    }
    match fields.get("format") {
        Some(&f) if f == expect_format => Ok(fields),
        other => Err(Error::format(
            path,
            format!("expected format {expect_format:?}, found {other:?}"),
        )),
    }
}

fn header_usize(path: &Path, fields: &std::collections::BTreeMap<&str, &str>, key: &str) -> Result<usize> {
    fields
        .get(key)
        .ok_or_else(|| Error::format(path, format!("missing header field {key:?}")))?
        .parse()
        .map_err(|_| Error::format(path, format!("field {key:?} is not a number")))
}

pub fn save_band_stack(stack: &BandStack, path: &Path) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "format bandstack").unwrap();
    writeln!(header, "version 1").unwrap();
    writeln!(header, "width {}", stack.width).unwrap();
    writeln!(header, "height {}", stack.height).unwrap();
    writeln!(header, "dtype f32le").unwrap();
    writeln!(header, "bands {}", stack.band_names.join(",")).unwrap();
    fs::write(path, header)?;
    let mut payload = Vec::with_capacity(stack.data.len() * 4);
    for v in &stack.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw_path(path), payload)?;
    Ok(())
}

pub fn load_band_stack(path: &Path) -> Result<BandStack> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path, format!("cannot read header: {e}")))?;
    let fields = parse_header(path, &text, "bandstack")?;
    let width = header_usize(path, &fields, "width")?;
    let height = header_usize(path, &fields, "height")?;
    if fields.get("dtype") != Some(&"f32le") {
        return Err(Error::format(path, "unsupported dtype"));
    }
    let band_names: Vec<String> = fields
        .get("bands")
        .ok_or_else(|| Error::format(path, "missing header field \"bands\""))?
        .split(',')
        .map(str::to_string)
        .collect();
    let raw = fs::read(raw_path(path))
        .map_err(|e| Error::format(raw_path(path), format!("cannot read payload: {e}")))?;
    let expected = width * height * band_names.len() * 4;
    if raw.len() != expected {
        return Err(Error::format(
            raw_path(path),
            format!("payload length mismatch: {} bytes, expected {expected}", raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    BandStack::new(width, height, band_names, data)
}

pub fn save_label_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "format labelmask").unwrap();
    writeln!(header, "version 1").unwrap();
    writeln!(header, "width {}", mask.width).unwrap();
    writeln!(header, "height {}", mask.height).unwrap();
    writeln!(header, "dtype u8").unwrap();
    fs::write(path, header)?;
    fs::write(raw_path(path), &mask.labels)?;
    Ok(())
}

pub fn load_label_mask(path: &Path) -> Result<LabelMask> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path, format!("cannot read header: {e}")))?;
    let fields = parse_header(path, &text, "labelmask")?;
    let width = header_usize(path, &fields, "width")?;
    let height = header_usize(path, &fields, "height")?;
    if fields.get("dtype") != Some(&"u8") {
        return Err(Error::format(path, "unsupported dtype"));
    }
    let raw = fs::read(raw_path(path))
        .map_err(|e| Error::format(raw_path(path), format!("cannot read payload: {e}")))?;
    if raw.len() != width * height {
        return Err(Error::format(
            raw_path(path),
            format!("payload length mismatch: {} bytes, expected {}", raw.len(), width * height),
        ));
    }
    LabelMask::new(width, height, raw)
}
