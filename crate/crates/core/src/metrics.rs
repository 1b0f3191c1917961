//! Distribution and diversity metrics: Fréchet distance, Inception-Score
//! analogue, multi-scale SSIM, mean pairwise MS-SSIM and the outer-dataset
//! metric 𝓜 used to rank candidate outer datasets.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::classifier::{fit, Classifier, ClassifierError, FitConfig};
use crate::data::{DataError, LabeledImageSet};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::rng;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {have}")]
    TooFewSamples { need: usize, have: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },
    #[error("significantly negative eigenvalue {0}")]
    NegativeEigenvalue(f64),
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("no candidate datasets")]
    NoCandidates,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Source of feature vectors and class posteriors standing in for a
/// pretrained Inception network.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn embed(&self, images: &LabeledImageSet) -> Result<Vec<Vec<f64>>>;
    fn class_probs(&self, images: &LabeledImageSet) -> Result<Vec<Vec<f64>>>;
}

/// Flattened `[0,1]` pixels as features with uniform class posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawPixelExtractor {
    pub input: usize,
    pub classes: usize,
}

impl FeatureExtractor for RawPixelExtractor {
    fn feature_dim(&self) -> usize {
        self.input
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn embed(&self, images: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        if images.image_len() != self.input {
            return Err(MetricError::DimensionMismatch(format!(
                "extractor takes {} pixels, images have {}",
                self.input,
                images.image_len()
            )));
        }
        Ok((0..images.len())
            .map(|i| images.image(i).iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect())
    }

    fn class_probs(&self, images: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        let p = 1.0 / self.classes as f64;
        Ok(vec![vec![p; self.classes]; images.len()])
    }
}

pub const REFERENCE_PREFIX: &str = "ref";

/// Small classifier trained on the union of all synthetic domains; features
/// are its last hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceExtractor {
    pub classifier: Classifier<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            fit: FitConfig {
                epochs: 8,
                batch_size: 64,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                seed: 0,
            },
        }
    }
}

/// Trains the reference extractor on the union of `full_sets`, giving every
/// set its own block of class ids.
pub fn train_reference_extractor(
    full_sets: &[LabeledImageSet],
    config: &ReferenceConfig,
    seed: u64,
) -> Result<ReferenceExtractor> {
    let union = union_of(full_sets)?;
    if union.num_classes() < 2 {
        return Err(MetricError::Invalid("reference extractor needs at least two classes".into()));
    }
    let clf = Classifier::new(
        REFERENCE_PREFIX,
        union.image_len(),
        &config.hidden,
        union.num_classes(),
        seed,
    )?;
    let cfg = FitConfig { seed, ..config.fit.clone() };
    let out = fit(clf, &union, None, &cfg, None)?;
    Ok(ReferenceExtractor { classifier: out.classifier })
}

/// Concatenates sets with disjoint, consecutive label blocks.
pub fn union_of(sets: &[LabeledImageSet]) -> Result<LabeledImageSet> {
    let first = sets.first().ok_or_else(|| MetricError::Invalid("no datasets given".into()))?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut offset = 0usize;
    for s in sets {
        if !s.same_geometry(first) {
            return Err(MetricError::DimensionMismatch(format!(
                "{} and {} differ in geometry",
                first.name(),
                s.name()
            )));
        }
        labels.extend(s.labels().iter().map(|&l| (usize::from(l) + offset) as u16));
        pixels.extend_from_slice(s.pixels());
        offset += s.num_classes();
    }
    if offset > usize::from(u16::MAX) {
        return Err(MetricError::Invalid("too many classes in union".into()));
    }
    Ok(LabeledImageSet::new(
        "union",
        first.channels(),
        first.height(),
        first.width(),
        offset,
        labels,
        pixels,
    )?)
}

impl ReferenceExtractor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(&self.classifier.params, path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let params = load_checkpoint(path)?;
        Ok(Self {
            classifier: Classifier::from_params(REFERENCE_PREFIX, params)?,
        })
    }
}

impl FeatureExtractor for ReferenceExtractor {
    fn feature_dim(&self) -> usize {
        let layers = &self.classifier.spec.layers;
        layers[layers.len() - 1].input
    }

    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn embed(&self, images: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        Ok(self.classifier.features(images)?)
    }

    fn class_probs(&self, images: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        Ok(self.classifier.probabilities(images)?)
    }
}

/// Gaussian fit of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and unbiased covariance of `features` (one row per sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(MetricError::TooFewSamples { need: 2, have: n });
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(MetricError::DimensionMismatch("ragged feature rows".into()));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for f in features {
            for ((c, &v), &m) in centered.iter_mut().zip(f).zip(&mean) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centered[i];
                for j in i..d {
                    cov[i * d + j] += ci * centered[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(MetricError::DimensionMismatch(format!(
                "covariance has {} entries for dimension {d}",
                self.cov.len()
            )));
        }
        if self.n < 2 {
            return Err(MetricError::TooFewSamples { need: 2, have: self.n });
        }
        Ok(())
    }
}

pub fn feature_stats(images: &LabeledImageSet, extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    FeatureStats::from_features(&extractor.embed(images)?)
}

pub const JACOBI_TOLERANCE: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;
const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-8;
const NEGATIVE_DISTANCE_TOLERANCE: f64 = 1e-6;

/// Eigen-decomposition of a symmetric `d × d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and the row-major matrix whose columns are
/// the matching eigenvectors.
pub fn symmetric_eigen(matrix: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != d * d {
        return Err(MetricError::DimensionMismatch(format!("{} entries for a {d}x{d} matrix", matrix.len())));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in 0..d {
                if p != q {
                    off += a[p * d + q] * a[p * d + q];
                }
            }
        }
        if off.sqrt() <= JACOBI_TOLERANCE * norm || norm == 0.0 {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(MetricError::NonConvergence { sweeps: JACOBI_MAX_SWEEPS });
    }
    Ok(((0..d).map(|i| a[i * d + i]).collect(), v))
}

fn clamp_eigenvalues(values: &mut [f64]) -> Result<()> {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for v in values.iter_mut() {
        if *v < -NEGATIVE_EIGEN_TOLERANCE * scale {
            return Err(MetricError::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0);
    }
    Ok(())
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrt_psd(matrix: &[f64], d: usize) -> Result<Vec<f64>> {
    let (mut values, vectors) = symmetric_eigen(matrix, d)?;
    clamp_eigenvalues(&mut values)?;
    let roots: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for k in 0..d {
                s += vectors[i * d + k] * roots[k] * vectors[j * d + k];
            }
            out[i * d + j] = s;
            out[j * d + i] = s;
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between two Gaussian fits:
/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn fid_from_stats(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(MetricError::DimensionMismatch(format!("feature dims {d} and {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrt_psd(&a.cov, d)?;
    let mut m = matmul_sq(&matmul_sq(&root_a, &b.cov, d), &root_a, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let (mut values, _) = symmetric_eigen(&m, d)?;
    clamp_eigenvalues(&mut values)?;
    let cross: f64 = values.iter().map(|v| v.sqrt()).sum();
    let trace_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let trace_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    let value = mean_term + trace_a + trace_b - 2.0 * cross;
    if value < 0.0 {
        if value < -NEGATIVE_DISTANCE_TOLERANCE {
            return Err(MetricError::NegativeDistance(value));
        }
        return Ok(0.0);
    }
    Ok(value)
}

pub fn fid(a: &LabeledImageSet, b: &LabeledImageSet, extractor: &dyn FeatureExtractor) -> Result<f64> {
    fid_from_stats(&feature_stats(a, extractor)?, &feature_stats(b, extractor)?)
}

/// `exp(mean_i KL(p_i ‖ p̄))` over a table of class posteriors.
pub fn inception_score_from_probs(probs: &[Vec<f64>]) -> Result<f64> {
    let n = probs.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples { need: 2, have: n });
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(MetricError::DimensionMismatch("ragged probability rows".into()));
    }
    let mut marginal = vec![0.0; k];
    for p in probs {
        for (m, &v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut marginal {
        *m /= n as f64;
    }
    let mut kl_sum = 0.0;
    for p in probs {
        for (&v, &m) in p.iter().zip(&marginal) {
            if v > 0.0 {
                kl_sum += v * (v.ln() - m.ln());
            }
        }
    }
    Ok((kl_sum / n as f64).exp())
}

pub fn inception_score(images: &LabeledImageSet, extractor: &dyn FeatureExtractor) -> Result<f64> {
    inception_score_from_probs(&extractor.class_probs(images)?)
}

/// Published five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    /// One exponent per scale, shared by the l, c and s terms.
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl MsSsimConfig {
    /// The first `scales` published weights renormalised to sum to one.
    pub fn with_scales(scales: usize) -> Result<Self> {
        if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
            return Err(MetricError::Invalid(format!("scale count {scales} outside 1..=5")));
        }
        let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
        Ok(Self {
            weights: MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / total).collect(),
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
        })
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(MetricError::Invalid("MS-SSIM needs at least one scale".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(MetricError::Invalid("MS-SSIM weights must be non-negative and sum to 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 || self.sigma <= 0.0 {
            return Err(MetricError::Invalid("window must be odd with positive sigma".into()));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(MetricError::Invalid("stabilising constants must be positive".into()));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let mut k: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        let total: f64 = k.iter().sum();
        for v in &mut k {
            *v /= total;
        }
        k
    }
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self::with_scales(3).expect("three scales are valid")
    }
}

#[derive(Debug, Clone)]
struct Level {
    h: usize,
    w: usize,
    pix: Vec<f64>,
    windowed: bool,
    mu: Vec<f64>,
    var: Vec<f64>,
}

/// Luma pyramid of one image with the per-image local statistics cached.
#[derive(Debug, Clone)]
pub struct SsimPyramid {
    levels: Vec<Level>,
}

fn to_luma(image: &[u8], channels: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let plane = h * w;
    if image.len() != channels * plane {
        return Err(MetricError::DimensionMismatch(format!(
            "{} bytes for a {channels}x{h}x{w} image",
            image.len()
        )));
    }
    match channels {
        1 => Ok(image.iter().map(|&p| f64::from(p)).collect()),
        3 => Ok((0..plane)
            .map(|i| {
                LUMA[0] * f64::from(image[i])
                    + LUMA[1] * f64::from(image[plane + i])
                    + LUMA[2] * f64::from(image[2 * plane + i])
            })
            .collect()),
        c => Err(MetricError::Invalid(format!("unsupported channel count {c}"))),
    }
}

fn mean_pool(pix: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        for c in 0..nw {
            let i = 2 * r * w + 2 * c;
            out.push(0.25 * (pix[i] + pix[i + 1] + pix[i + w] + pix[i + w + 1]));
        }
    }
    (out, nh, nw)
}

fn window_positions(h: usize, w: usize, win: usize) -> impl Iterator<Item = (usize, usize)> {
    let (ph, pw) = (h + 1 - win, w + 1 - win);
    (0..ph).flat_map(move |r| (0..pw).map(move |c| (r, c)))
}

impl Level {
    fn new(pix: Vec<f64>, h: usize, w: usize, cfg: &MsSsimConfig, kernel: &[f64]) -> Self {
        let win = cfg.window;
        let windowed = h >= win && w >= win;
        let (mut mu, mut var) = (Vec::new(), Vec::new());
        if windowed {
            for (r, c) in window_positions(h, w, win) {
                let (mut m, mut sq) = (0.0, 0.0);
                for i in 0..win {
                    let row = &pix[(r + i) * w + c..(r + i) * w + c + win];
                    for (x, k) in row.iter().zip(&kernel[i * win..(i + 1) * win]) {
                        m += k * x;
                        sq += k * x * x;
                    }
                }
                mu.push(m);
                var.push((sq - m * m).max(0.0));
            }
        } else {
            let n = pix.len() as f64;
            let m = pix.iter().sum::<f64>() / n;
            let sq = pix.iter().map(|x| x * x).sum::<f64>() / n;
            mu.push(m);
            var.push((sq - m * m).max(0.0));
        }
        Self { h, w, pix, windowed, mu, var }
    }

    fn covariances(&self, other: &Level, win: usize, kernel: &[f64]) -> Vec<f64> {
        if self.windowed {
            window_positions(self.h, self.w, win)
                .zip(self.mu.iter().zip(&other.mu))
                .map(|((r, c), (mx, my))| {
                    let mut s = 0.0;
                    for i in 0..win {
                        let off = (r + i) * self.w + c;
                        let xs = &self.pix[off..off + win];
                        let ys = &other.pix[off..off + win];
                        for ((x, y), k) in xs.iter().zip(ys).zip(&kernel[i * win..(i + 1) * win]) {
                            s += k * (x * y);
                        }
                    }
                    s - mx * my
                })
                .collect()
        } else {
            let n = self.pix.len() as f64;
            let s = self.pix.iter().zip(&other.pix).map(|(x, y)| x * y).sum::<f64>() / n;
            vec![s - self.mu[0] * other.mu[0]]
        }
    }
}

impl SsimPyramid {
    pub fn new(image: &[u8], channels: usize, h: usize, w: usize, cfg: &MsSsimConfig) -> Result<Self> {
        cfg.validate()?;
        let kernel = cfg.kernel();
        let mut pix = to_luma(image, channels, h, w)?;
        let (mut h, mut w) = (h, w);
        let mut levels = Vec::with_capacity(cfg.scales());
        for m in 0..cfg.scales() {
            if h == 0 || w == 0 {
                return Err(MetricError::Invalid(format!("image too small for {} scales", cfg.scales())));
            }
            let next = (m + 1 < cfg.scales()).then(|| mean_pool(&pix, h, w));
            levels.push(Level::new(pix, h, w, cfg, &kernel));
            if let Some((p, nh, nw)) = next {
                pix = p;
                h = nh;
                w = nw;
            } else {
                break;
            }
        }
        Ok(Self { levels })
    }

    pub fn of(set: &LabeledImageSet, i: usize, cfg: &MsSsimConfig) -> Result<Self> {
        Self::new(set.image(i), set.channels(), set.height(), set.width(), cfg)
    }
}

/// MS-SSIM of two precomputed pyramids built with the same config.
pub fn ms_ssim_pyramids(a: &SsimPyramid, b: &SsimPyramid, cfg: &MsSsimConfig) -> Result<f64> {
    if a.levels.len() != b.levels.len()
        || a.levels.iter().zip(&b.levels).any(|(x, y)| x.h != y.h || x.w != y.w)
    {
        return Err(MetricError::DimensionMismatch("images differ in size".into()));
    }
    let kernel = cfg.kernel();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let c3 = c2 / 2.0;
    let last = a.levels.len() - 1;
    let mut value = 1.0;
    for (m, (la, lb)) in a.levels.iter().zip(&b.levels).enumerate() {
        let cov = la.covariances(lb, cfg.window, &kernel);
        let count = cov.len() as f64;
        let (mut c_sum, mut s_sum, mut l_sum) = (0.0, 0.0, 0.0);
        for (p, sxy) in cov.iter().enumerate() {
            let (vx, vy) = (la.var[p], lb.var[p]);
            let sx_sy = vx.sqrt() * vy.sqrt();
            c_sum += (2.0 * sx_sy + c2) / (vx + vy + c2);
            s_sum += (sxy + c3) / (sx_sy + c3);
            if m == last {
                let (mx, my) = (la.mu[p], lb.mu[p]);
                l_sum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            }
        }
        let wgt = cfg.weights[m];
        value *= (c_sum / count).max(0.0).powf(wgt) * (s_sum / count).max(0.0).powf(wgt);
        if m == last {
            value *= (l_sum / count).max(0.0).powf(wgt);
        }
    }
    Ok(value.clamp(0.0, 1.0))
}

/// MS-SSIM between two images of shape `channels × h × w`.
pub fn ms_ssim(a: &[u8], b: &[u8], channels: usize, h: usize, w: usize, cfg: &MsSsimConfig) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch(format!("{} vs {} bytes", a.len(), b.len())));
    }
    let pa = SsimPyramid::new(a, channels, h, w, cfg)?;
    let pb = SsimPyramid::new(b, channels, h, w, cfg)?;
    ms_ssim_pyramids(&pa, &pb, cfg)
}

pub const EXHAUSTIVE_PAIR_LIMIT: usize = 512;
pub const DEFAULT_PAIR_BUDGET: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSsim {
    pub mean: f64,
    /// Ordered pairs evaluated.
    pub pairs: usize,
    pub exhaustive: bool,
}

/// Mean MS-SSIM over ordered pairs `i ≠ j`: every pair when the set has at
/// most [`EXHAUSTIVE_PAIR_LIMIT`] images, otherwise `pair_budget` seeded
/// uniform draws.
pub fn mean_ms_ssim(
    set: &LabeledImageSet,
    cfg: &MsSsimConfig,
    pair_budget: usize,
    seed: u64,
) -> Result<MeanSsim> {
    mean_ms_ssim_with_limit(set, cfg, pair_budget, seed, EXHAUSTIVE_PAIR_LIMIT)
}

pub fn mean_ms_ssim_with_limit(
    set: &LabeledImageSet,
    cfg: &MsSsimConfig,
    pair_budget: usize,
    seed: u64,
    exhaustive_limit: usize,
) -> Result<MeanSsim> {
    let n = set.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples { need: 2, have: n });
    }
    let pyramids = (0..n)
        .map(|i| SsimPyramid::of(set, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let exhaustive = n <= exhaustive_limit;
    if exhaustive {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += ms_ssim_pyramids(&pyramids[i], &pyramids[j], cfg)?;
                    pairs += 1;
                }
            }
        }
    } else {
        if pair_budget == 0 {
            return Err(MetricError::Invalid("pair budget must be positive".into()));
        }
        let mut rng = rng::stream(seed, rng::key("ms-ssim-pairs"));
        for _ in 0..pair_budget {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            sum += ms_ssim_pyramids(&pyramids[i], &pyramids[j], cfg)?;
            pairs += 1;
        }
    }
    Ok(MeanSsim {
        mean: sum / pairs as f64,
        pairs,
        exhaustive,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub ssim: MsSsimConfig,
    pub pair_budget: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ssim: MsSsimConfig::default(),
            pair_budget: DEFAULT_PAIR_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub candidate: String,
    pub fid: f64,
    pub ssim_bar: f64,
    pub metric_m: f64,
    pub pairs: usize,
    pub seed: u64,
}

pub const METRIC_CSV_HEADER: &str = "candidate,fid,ssim_bar,metric_m,pairs,seed";

impl MetricReport {
    pub fn new(candidate: impl Into<String>, fid: f64, ssim_bar: f64, pairs: usize, seed: u64) -> Self {
        Self {
            candidate: candidate.into(),
            fid,
            ssim_bar,
            metric_m: fid * ssim_bar,
            pairs,
            seed,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.candidate, self.fid, self.ssim_bar, self.metric_m, self.pairs, self.seed
        )
    }
}

/// 𝓜 = FID(target, candidate) · mean MS-SSIM(candidate).
pub fn metric_m(
    target: &LabeledImageSet,
    candidate: &LabeledImageSet,
    extractor: &dyn FeatureExtractor,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let distance = fid(target, candidate, extractor)?;
    let diversity = mean_ms_ssim(candidate, &cfg.ssim, cfg.pair_budget, cfg.seed)?;
    Ok(MetricReport::new(candidate.name(), distance, diversity.mean, diversity.pairs, cfg.seed))
}

/// Ascending by 𝓜, then by candidate name.
pub fn rank_reports(mut reports: Vec<MetricReport>) -> Result<Vec<MetricReport>> {
    if reports.is_empty() {
        return Err(MetricError::NoCandidates);
    }
    reports.sort_by(|a, b| match a.metric_m.total_cmp(&b.metric_m) {
        Ordering::Equal => a.candidate.cmp(&b.candidate),
        o => o,
    });
    Ok(reports)
}

/// Scores every candidate against `target`; the head of the result is the
/// selected outer dataset.
pub fn select_outer(
    target: &LabeledImageSet,
    candidates: &[LabeledImageSet],
    extractor: &dyn FeatureExtractor,
    cfg: &MetricConfig,
) -> Result<Vec<MetricReport>> {
    if candidates.is_empty() {
        return Err(MetricError::NoCandidates);
    }
    let reports = candidates
        .iter()
        .map(|c| metric_m(target, c, extractor, cfg))
        .collect::<Result<Vec<_>>>()?;
    rank_reports(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FeatureStats {
        FeatureStats { mean, cov, n: 10 }
    }

    fn eye(d: usize, s: f64) -> Vec<f64> {
        (0..d * d).map(|i| if i % (d + 1) == 0 { s } else { 0.0 }).collect()
    }

    #[test]
    fn hand_covariance() {
        let s = FeatureStats::from_features(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov, vec![2.0, 0.0, 0.0, 0.0]);
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fid_closed_forms() {
        let a = stats(vec![0.0, 0.0], eye(2, 1.0));
        let b = stats(vec![1.0, 0.0], eye(2, 1.0));
        assert!((fid_from_stats(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let a = stats(vec![0.0, 0.0], eye(2, 4.0));
        let b = stats(vec![0.0, 0.0], eye(2, 1.0));
        assert!((fid_from_stats(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        assert!(fid_from_stats(&a, &a).unwrap().abs() < 1e-9);
        let c = stats(vec![0.0; 3], eye(3, 1.0));
        assert!(matches!(fid_from_stats(&a, &c), Err(MetricError::DimensionMismatch(_))));
    }

    #[test]
    fn jacobi_reconstructs() {
        let m = vec![4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0];
        let (vals, vecs) = symmetric_eigen(&m, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - m[i * 3 + j]).abs() < 1e-10);
            }
        }
        let root = sqrt_psd(&m, 3).unwrap();
        let back = matmul_sq(&root, &root, 3);
        for (x, y) in back.iter().zip(&m) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0]);
        let b = stats(vec![0.0, 0.0], eye(2, 1.0));
        assert!(matches!(fid_from_stats(&a, &b), Err(MetricError::NegativeEigenvalue(_))));
    }

    #[test]
    fn inception_score_bounds() {
        let uniform = vec![vec![0.25; 4]; 8];
        assert!((inception_score_from_probs(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let one_hot: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|c| if c == i % 4 { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score_from_probs(&one_hot).unwrap() - 4.0).abs() < 1e-12);
        let same = vec![vec![0.7, 0.2, 0.1]; 5];
        assert!((inception_score_from_probs(&same).unwrap() - 1.0).abs() < 1e-12);
    }

    fn noise_image(len: usize, seed: u64) -> Vec<u8> {
        let mut r = rng::stream(seed, 1);
        (0..len).map(|_| r.random()).collect()
    }

    #[test]
    fn ms_ssim_identity_and_inversion() {
        let cfg = MsSsimConfig::default();
        let x = noise_image(32 * 32, 3);
        assert!((ms_ssim(&x, &x, 1, 32, 32, &cfg).unwrap() - 1.0).abs() < 1e-6);
        let inv: Vec<u8> = x.iter().map(|p| 255 - p).collect();
        assert_eq!(ms_ssim(&x, &inv, 1, 32, 32, &cfg).unwrap(), 0.0);
        let flat = vec![77u8; 64];
        assert!((ms_ssim(&flat, &flat, 1, 8, 8, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(ms_ssim(&x, &x[..100], 1, 32, 32, &cfg).is_err());
    }

    #[test]
    fn ms_ssim_colour_uses_luma() {
        let cfg = MsSsimConfig::default();
        let x = noise_image(3 * 16 * 16, 9);
        let y = noise_image(3 * 16 * 16, 10);
        let v = ms_ssim(&x, &y, 3, 16, 16, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!((ms_ssim(&x, &x, 3, 16, 16, &cfg).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weights_renormalised() {
        let cfg = MsSsimConfig::with_scales(3).unwrap();
        assert!((cfg.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((cfg.weights[0] - 0.0448 / 0.6305).abs() < 1e-12);
        assert!(MsSsimConfig::with_scales(0).is_err());
    }

    #[test]
    fn metric_report_product() {
        let r = MetricReport::new("voc", 50.79, 0.029, 0, 0);
        assert!((r.metric_m - 1.47291).abs() < 1e-9);
        assert_eq!(format!("{:.1}", r.metric_m), "1.5");
    }

    #[test]
    fn ranking_by_score_then_name() {
        let mk = |n: &str, m: f64| MetricReport::new(n, m, 1.0, 0, 0);
        let ranked = rank_reports(vec![mk("C", 4.1), mk("A", 1.5), mk("B", 2.6)]).unwrap();
        let names: Vec<_> = ranked.iter().map(|r| r.candidate.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
        let tied = rank_reports(vec![mk("z", 1.0), mk("a", 1.0)]).unwrap();
        assert_eq!(tied[0].candidate, "a");
        assert!(matches!(rank_reports(vec![]), Err(MetricError::NoCandidates)));
    }
}
