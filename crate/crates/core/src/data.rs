//! Labeled byte-image datasets.
//!
//! A [`LabeledImageSet`] stores `N × C × H × W` bytes in image-major,
//! channel, row, column order with one `u16` label per image. Sets are
//! immutable once built; every operation returns a new set.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;

pub const DFDS_MAGIC: [u8; 4] = *b"DFDS";
pub const DFDS_VERSION: u8 = 1;
/// Magic, version, N, C, H, W, K.
pub const DFDS_HEADER_LEN: usize = 4 + 1 + 4 + 2 * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a DFDS dataset (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported DFDS version {0}")]
    UnsupportedVersion(u8),
    #[error("dataset truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dataset has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("image {index} has label {label} but the set has {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u16,
        classes: u16,
    },
    #[error("dimensions overflow: {0}")]
    DimensionOverflow(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("class {class} has {have} members but {need} were requested")]
    InsufficientClass { class: usize, have: usize, need: usize },
    #[error("{n_total} samples cannot be split evenly over {classes} classes")]
    NotDivisible { n_total: usize, classes: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageSet {
    name: String,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u16>,
    pixels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        labels: Vec<u16>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Invalid("a set needs at least one image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::Invalid(format!("{channels} channels (expected 1 or 3)")));
        }
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(DataError::Invalid("zero height, width or class count".into()));
        }
        if num_classes > usize::from(u16::MAX) {
            return Err(DataError::DimensionOverflow(format!("{num_classes} classes")));
        }
        let image_len = channels
            .checked_mul(height)
            .and_then(|x| x.checked_mul(width))
            .ok_or_else(|| DataError::DimensionOverflow(format!("{channels}x{height}x{width}")))?;
        let total = image_len
            .checked_mul(labels.len())
            .ok_or_else(|| DataError::DimensionOverflow(format!("{} images", labels.len())))?;
        if pixels.len() != total {
            return Err(DataError::Invalid(format!(
                "{} pixel bytes for {} images of {image_len}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| usize::from(l) >= num_classes)
        {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes: num_classes as u16,
            });
        }
        Ok(Self {
            name: name.into(),
            channels,
            height,
            width,
            num_classes,
            labels,
            pixels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Bytes per image.
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    /// Indices of the members of `class`, in set order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i) == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut labels = Vec::with_capacity(indices.len());
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            labels.push(self.labels[i]);
            pixels.extend_from_slice(self.image(i));
        }
        Self::new(
            self.name.clone(),
            self.channels,
            self.height,
            self.width,
            self.num_classes,
            labels,
            pixels,
        )
    }

    /// Appends `other` (same geometry) after `self`; the class count becomes
    /// the larger of the two.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if !self.same_geometry(other) {
            return Err(DataError::Invalid("cannot concatenate sets of different geometry".into()));
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        Self::new(
            self.name.clone(),
            self.channels,
            self.height,
            self.width,
            self.num_classes.max(other.num_classes),
            labels,
            pixels,
        )
    }

    /// Pixels of the selected images mapped to `[0, 1]`, row-major
    /// `[indices.len(), image_len]`.
    pub fn unit_rows(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            out.extend(self.image(i).iter().map(|&p| f32::from(p) / 255.0));
        }
        out
    }

    /// Content fingerprint over geometry, labels and pixels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::fnv1a(&self.pixels);
        let labels: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        h = rng::mix(h, rng::fnv1a(&labels));
        rng::mix(h, (self.channels * 31 + self.height * 17 + self.width) as u64)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let overflow = |what: &str| DataError::DimensionOverflow(what.to_owned());
        let n = u32::try_from(self.len()).map_err(|_| overflow("N"))?;
        let c = u16::try_from(self.channels).map_err(|_| overflow("C"))?;
        let h = u16::try_from(self.height).map_err(|_| overflow("H"))?;
        let w = u16::try_from(self.width).map_err(|_| overflow("W"))?;
        let k = u16::try_from(self.num_classes).map_err(|_| overflow("K"))?;
        let mut buf = Vec::with_capacity(DFDS_HEADER_LEN + 2 * self.len() + self.pixels.len());
        buf.extend_from_slice(&DFDS_MAGIC);
        buf.push(DFDS_VERSION);
        buf.extend_from_slice(&n.to_le_bytes());
        for v in [c, h, w, k] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        buf.extend_from_slice(&self.pixels);
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], name: impl Into<String>) -> Result<Self> {
        let truncated = |expected| DataError::Truncated {
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(DFDS_HEADER_LEN));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != DFDS_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        if bytes.len() < DFDS_HEADER_LEN {
            return Err(truncated(DFDS_HEADER_LEN));
        }
        if bytes[4] != DFDS_VERSION {
            return Err(DataError::UnsupportedVersion(bytes[4]));
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let u16_at = |o: usize| usize::from(u16::from_le_bytes([bytes[o], bytes[o + 1]]));
        let (c, h, w, k) = (u16_at(9), u16_at(11), u16_at(13), u16_at(15));
        let overflow = || DataError::DimensionOverflow(format!("{n}x{c}x{h}x{w}"));
        let pixel_len = n
            .checked_mul(c)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(overflow)?;
        let expected = n
            .checked_mul(2)
            .and_then(|x| x.checked_add(pixel_len))
            .and_then(|x| x.checked_add(DFDS_HEADER_LEN))
            .ok_or_else(overflow)?;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes(bytes.len() - expected));
        }
        let label_end = DFDS_HEADER_LEN + 2 * n;
        let labels = bytes[DFDS_HEADER_LEN..label_end]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(name, c, h, w, k, labels, bytes[label_end..].to_vec())
    }
}

pub fn save_dfds(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.encode()?)?;
    Ok(())
}

/// Loads a DFDS file; the set is named after the file stem.
pub fn load_dfds(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledImageSet::decode(&bytes, name)
}

/// Byte value of a `[0, 1]` intensity.
pub fn unit_to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------------------
// Synthetic domains

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainKind {
    SolidShapes,
    OutlineShapes,
    StripedNoise,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::SolidShapes => "solid",
            DomainKind::OutlineShapes => "outline",
            DomainKind::StripedNoise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "solid" | "solid-shapes" => Some(DomainKind::SolidShapes),
            "outline" | "outline-shapes" => Some(DomainKind::OutlineShapes),
            "noise" | "striped-noise" => Some(DomainKind::StripedNoise),
            _ => None,
        }
    }
}

/// Glyph classes of the shape domains, in label order.
pub const SHAPE_CLASSES: [&str; 4] = ["square", "disc", "triangle", "cross"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDomainSpec {
    pub kind: DomainKind,
    pub side: usize,
    pub classes: usize,
    /// Maximum centre offset in pixels.
    pub position_jitter: f64,
    /// Maximum relative size change.
    pub size_jitter: f64,
    pub max_rotation_deg: f64,
    /// Standard deviation of additive pixel noise, in byte units.
    pub pixel_noise: f64,
    /// Stripes only: one period and zero phase for every image.
    pub fixed_phase: bool,
}

impl SynthDomainSpec {
    pub fn new(kind: DomainKind, side: usize) -> Self {
        Self {
            kind,
            side,
            classes: 4,
            position_jitter: 2.0,
            size_jitter: 0.2,
            max_rotation_deg: 15.0,
            pixel_noise: 8.0,
            fixed_phase: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(DataError::Invalid(format!("side {} < 8", self.side)));
        }
        if self.classes == 0 {
            return Err(DataError::Invalid("zero classes".into()));
        }
        if self.kind != DomainKind::StripedNoise && self.classes > SHAPE_CLASSES.len() {
            return Err(DataError::Invalid(format!(
                "shape domains have at most {} classes",
                SHAPE_CLASSES.len()
            )));
        }
        let ranges = [self.position_jitter, self.size_jitter, self.max_rotation_deg];
        if ranges.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) || self.size_jitter >= 1.0 {
            return Err(DataError::Invalid("jitter ranges must be finite and non-negative".into()));
        }
        if !(0.0..=32.0).contains(&self.pixel_noise) {
            return Err(DataError::Invalid(format!("pixel noise {} outside [0, 32]", self.pixel_noise)));
        }
        Ok(())
    }
}

fn sd_box(px: f64, py: f64, bx: f64, by: f64) -> f64 {
    let qx = px.abs() - bx;
    let qy = py.abs() - by;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

/// Equilateral triangle with half side `r`, centred on its centroid.
fn sd_triangle(px: f64, py: f64, r: f64) -> f64 {
    let k = 3f64.sqrt();
    let mut x = px.abs() - r;
    let mut y = py + r / k;
    if x + k * y > 0.0 {
        let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
        x = nx;
        y = ny;
    }
    x -= x.clamp(-2.0 * r, 0.0);
    -(x * x + y * y).sqrt() * y.signum()
}

/// Signed distance (pixels) from a point in glyph coordinates to the glyph
/// boundary; negative inside.
fn glyph_sdf(class: usize, x: f64, y: f64, s: f64) -> f64 {
    match class {
        0 => sd_box(x, y, s * 0.85, s * 0.85),
        1 => (x * x + y * y).sqrt() - s,
        2 => sd_triangle(x, y, s),
        _ => sd_box(x, y, s, s / 3.0).min(sd_box(x, y, s / 3.0, s)),
    }
}

const SUPERSAMPLE: usize = 4;

fn render_glyph(spec: &SynthDomainSpec, class: usize, rng: &mut rng::Rng, out: &mut [f64]) {
    let side = spec.side as f64;
    let pj = spec.position_jitter;
    let cx = side / 2.0 + if pj > 0.0 { rng.random_range(-pj..=pj) } else { 0.0 };
    let cy = side / 2.0 + if pj > 0.0 { rng.random_range(-pj..=pj) } else { 0.0 };
    let sj = spec.size_jitter;
    let scale = 1.0 + if sj > 0.0 { rng.random_range(-sj..=sj) } else { 0.0 };
    let s = 0.3 * side * scale;
    let rot = if spec.max_rotation_deg > 0.0 {
        rng.random_range(0.0..=spec.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let (sin, cos) = rot.sin_cos();
    let outline = spec.kind == DomainKind::OutlineShapes;
    let ss = SUPERSAMPLE as f64;
    for py in 0..spec.side {
        for px in 0..spec.side {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / ss - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / ss - cy;
                    // rotate the sample point by −rot into glyph coordinates
                    let gx = cos * x + sin * y;
                    let gy = -sin * x + cos * y;
                    let d = glyph_sdf(class, gx, gy, s);
                    let inside = if outline { d <= 0.0 && d > -1.0 } else { d <= 0.0 };
                    hits += usize::from(inside);
                }
            }
            out[py * spec.side + px] = 255.0 * hits as f64 / (ss * ss);
        }
    }
}

fn render_stripes(spec: &SynthDomainSpec, class: usize, rng: &mut rng::Rng, out: &mut [f64]) {
    let angle = std::f64::consts::PI * class as f64 / spec.classes as f64;
    let (period, phase) = if spec.fixed_phase {
        (4.0, 0.0)
    } else {
        (
            rng.random_range(3.0..=6.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        )
    };
    let (sin, cos) = angle.sin_cos();
    for py in 0..spec.side {
        for px in 0..spec.side {
            let t = (px as f64 + 0.5) * cos + (py as f64 + 0.5) * sin;
            out[py * spec.side + px] =
                127.5 + 127.5 * (std::f64::consts::TAU * t / period + phase).sin();
        }
    }
}

/// `n_per_class` single-channel images per class, classes interleaved
/// (image `i` has label `i mod K`). Fully determined by `seed`.
pub fn synth_domain(spec: &SynthDomainSpec, n_per_class: usize, seed: u64) -> Result<LabeledImageSet> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(DataError::Invalid("n_per_class must be at least 1".into()));
    }
    let k = spec.classes;
    let n = k * n_per_class;
    let area = spec.side * spec.side;
    let mut rng = rng::stream(seed, rng::key(&format!("synth:{}", spec.kind.name())));
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite noise");
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * area);
    let mut canvas = vec![0.0f64; area];
    for i in 0..n {
        let class = i % k;
        match spec.kind {
            DomainKind::StripedNoise => render_stripes(spec, class, &mut rng, &mut canvas),
            _ => render_glyph(spec, class, &mut rng, &mut canvas),
        }
        for &v in &canvas {
            let jitter = if spec.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push((v + jitter).round().clamp(0.0, 255.0) as u8);
        }
        labels.push(class as u16);
    }
    let name = format!("{}_{}", spec.kind.name(), n);
    LabeledImageSet::new(name, 1, spec.side, spec.side, k, labels, pixels)
}

// ---------------------------------------------------------------------------
// Resizing, subsampling, merging

/// Source coordinate pair and weight for one output index under the
/// half-pixel-centre convention with edge clamping.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Resizes one `C × H × W` image.
pub fn resize_image(
    image: &[u8],
    channels: usize,
    height: usize,
    width: usize,
    new_h: usize,
    new_w: usize,
) -> Vec<u8> {
    let ys: Vec<_> = (0..new_h).map(|y| bilinear_taps(y, height, new_h)).collect();
    let xs: Vec<_> = (0..new_w).map(|x| bilinear_taps(x, width, new_w)).collect();
    let mut out = Vec::with_capacity(channels * new_h * new_w);
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| f64::from(plane[y * width + x]);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Bilinear resize of every image (half-pixel centres, edge clamp, rounded
/// to the nearest byte).
pub fn resize_bilinear(set: &LabeledImageSet, new_h: usize, new_w: usize) -> Result<LabeledImageSet> {
    if new_h == 0 || new_w == 0 {
        return Err(DataError::Invalid("resize target must be at least 1x1".into()));
    }
    let mut pixels = Vec::with_capacity(set.len() * set.channels * new_h * new_w);
    for i in 0..set.len() {
        pixels.extend(resize_image(set.image(i), set.channels, set.height, set.width, new_h, new_w));
    }
    LabeledImageSet::new(
        set.name.clone(),
        set.channels,
        new_h,
        new_w,
        set.num_classes,
        set.labels.clone(),
        pixels,
    )
}

/// Draws `n_total / K` members of every class uniformly without replacement.
/// Selected images keep their relative order.
pub fn balance_subsample(set: &LabeledImageSet, n_total: usize, seed: u64) -> Result<LabeledImageSet> {
    let k = set.num_classes;
    if n_total == 0 || n_total % k != 0 {
        return Err(DataError::NotDivisible {
            n_total,
            classes: k,
        });
    }
    let per_class = n_total / k;
    let mut rng = rng::stream(seed, rng::key("balance-subsample"));
    let mut chosen = Vec::with_capacity(n_total);
    for class in 0..k {
        let mut members = set.class_indices(class);
        if members.len() < per_class {
            return Err(DataError::InsufficientClass {
                class,
                have: members.len(),
                need: per_class,
            });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    set.subset(&chosen)
}

/// Target and outer data in one disjoint label space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub target: LabeledImageSet,
    /// Outer set relabeled into `[label_offset, combined_classes)`.
    pub outer: LabeledImageSet,
    pub label_offset: usize,
    pub combined_classes: usize,
    pub collapsed: bool,
}

impl DomainPair {
    pub fn target_classes(&self) -> usize {
        self.label_offset
    }

    pub fn outer_classes(&self) -> usize {
        self.combined_classes - self.label_offset
    }
}

/// Shifts outer labels past the target's classes, or maps every outer image
/// to the single extra class `K_T` when `collapse_outer` is set.
pub fn merge_domains(
    target: &LabeledImageSet,
    outer: &LabeledImageSet,
    collapse_outer: bool,
) -> Result<DomainPair> {
    let offset = target.num_classes;
    let outer_k = if collapse_outer { 1 } else { outer.num_classes };
    let combined = offset + outer_k;
    if combined > usize::from(u16::MAX) {
        return Err(DataError::DimensionOverflow(format!("{combined} combined classes")));
    }
    let labels = outer
        .labels
        .iter()
        .map(|&l| {
            if collapse_outer {
                offset as u16
            } else {
                l + offset as u16
            }
        })
        .collect();
    let relabeled = LabeledImageSet::new(
        outer.name.clone(),
        outer.channels,
        outer.height,
        outer.width,
        combined,
        labels,
        outer.pixels.clone(),
    )?;
    Ok(DomainPair {
        target: target.clone(),
        outer: relabeled,
        label_offset: offset,
        combined_classes: combined,
        collapsed: collapse_outer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: Vec<u16>, k: usize) -> LabeledImageSet {
        let n = labels.len();
        let pixels = (0..n * 4).map(|i| (i * 7 % 256) as u8).collect();
        LabeledImageSet::new("t", 1, 2, 2, k, labels, pixels).unwrap()
    }

    #[test]
    fn invariants_enforced() {
        assert!(LabeledImageSet::new("x", 2, 2, 2, 1, vec![0], vec![0; 8]).is_err());
        assert!(LabeledImageSet::new("x", 1, 2, 2, 1, vec![], vec![]).is_err());
        assert!(matches!(
            LabeledImageSet::new("x", 1, 2, 2, 2, vec![2], vec![0; 4]),
            Err(DataError::LabelOutOfRange { .. })
        ));
        assert!(LabeledImageSet::new("x", 1, 2, 2, 1, vec![0], vec![0; 5]).is_err());
    }

    #[test]
    fn dfds_file_size_matches_field_sum() {
        let set = LabeledImageSet::new("x", 1, 8, 8, 1, vec![0], vec![9; 64]).unwrap();
        let bytes = set.encode().unwrap();
        // 4 magic + 1 version + 4 N + 4×2 (C, H, W, K), then one label, 64 pixels
        assert_eq!(DFDS_HEADER_LEN, 17);
        assert_eq!(bytes.len(), 17 + 2 + 64);
        assert_eq!(&bytes[..5], b"DFDS\x01");
    }

    #[test]
    fn dfds_rejects_malformed_files() {
        let bytes = tiny(vec![0, 1], 2).encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(LabeledImageSet::decode(&bad, "x"), Err(DataError::BadMagic(_))));
        assert!(matches!(
            LabeledImageSet::decode(&bytes[..bytes.len() - 3], "x"),
            Err(DataError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[DFDS_HEADER_LEN] = 5;
        assert!(matches!(
            LabeledImageSet::decode(&bad, "x"),
            Err(DataError::LabelOutOfRange { index: 0, label: 5, classes: 2 })
        ));
        let mut huge = bytes.clone();
        huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[9..11].copy_from_slice(&u16::MAX.to_le_bytes());
        huge[11..13].copy_from_slice(&u16::MAX.to_le_bytes());
        huge[13..15].copy_from_slice(&u16::MAX.to_le_bytes());
        let err = LabeledImageSet::decode(&huge, "x").unwrap_err();
        assert!(
            matches!(err, DataError::DimensionOverflow(_) | DataError::Truncated { .. }),
            "{err}"
        );
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        for kind in [DomainKind::SolidShapes, DomainKind::OutlineShapes, DomainKind::StripedNoise] {
            let spec = SynthDomainSpec::new(kind, 16);
            let a = synth_domain(&spec, 10, 3).unwrap();
            assert_eq!(a, synth_domain(&spec, 10, 3).unwrap());
            assert_ne!(a.pixels(), synth_domain(&spec, 10, 4).unwrap().pixels());
            assert_eq!(a.class_histogram(), vec![10; 4]);
            assert_eq!(a.len(), 40);
        }
    }

    #[test]
    fn solid_glyphs_are_brighter_than_outlines() {
        let solid = synth_domain(&SynthDomainSpec::new(DomainKind::SolidShapes, 16), 20, 1).unwrap();
        let outline =
            synth_domain(&SynthDomainSpec::new(DomainKind::OutlineShapes, 16), 20, 1).unwrap();
        let class_mean = |s: &LabeledImageSet, c: usize| {
            let idx = s.class_indices(c);
            let sum: f64 = idx.iter().flat_map(|&i| s.image(i)).map(|&p| f64::from(p)).sum();
            sum / (idx.len() * s.image_len()) as f64
        };
        for c in 0..4 {
            assert!(class_mean(&solid, c) > class_mean(&outline, c), "class {c}");
        }
    }

    #[test]
    fn resize_examples() {
        let set = LabeledImageSet::new("r", 1, 2, 2, 1, vec![0], vec![0, 255, 0, 255]).unwrap();
        let up = resize_bilinear(&set, 4, 4).unwrap();
        for row in up.image(0).chunks(4) {
            assert_eq!(row, [0, 64, 191, 255]);
        }
        let same = resize_bilinear(&tiny(vec![0, 0], 1), 2, 2).unwrap();
        assert_eq!(same.pixels(), tiny(vec![0, 0], 1).pixels());
        let flat = LabeledImageSet::new("c", 1, 3, 5, 1, vec![0], vec![77; 15]).unwrap();
        assert!(resize_bilinear(&flat, 7, 2).unwrap().pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn subsample_contract() {
        let set = synth_domain(&SynthDomainSpec::new(DomainKind::SolidShapes, 8), 12, 0).unwrap();
        let sub = balance_subsample(&set, 40, 5).unwrap();
        assert_eq!(sub.class_histogram(), vec![10; 4]);
        let all = balance_subsample(&set, 48, 5).unwrap();
        assert_eq!(all, set);
        assert!(matches!(balance_subsample(&set, 42, 5), Err(DataError::NotDivisible { .. })));
        let small = set.subset(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]).unwrap();
        assert!(matches!(
            balance_subsample(&small, 40, 5),
            Err(DataError::InsufficientClass { class: 0, have: 5, need: 10 })
        ));
    }

    #[test]
    fn merge_offsets_and_collapses() {
        let target = tiny(vec![0, 1, 2, 3], 4);
        let outer = tiny(vec![0, 1, 2], 3);
        let pair = merge_domains(&target, &outer, false).unwrap();
        assert_eq!(pair.combined_classes, 7);
        assert_eq!(pair.outer.labels(), &[4, 5, 6]);
        let t: std::collections::BTreeSet<_> = pair.target.labels().iter().collect();
        assert!(pair.outer.labels().iter().all(|l| !t.contains(l) && usize::from(*l) >= 4));
        let collapsed = merge_domains(&target, &outer, true).unwrap();
        assert_eq!(collapsed.combined_classes, 5);
        assert!(collapsed.outer.labels().iter().all(|&l| l == 4));
    }
}
