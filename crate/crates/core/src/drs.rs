//! Class-conditional discriminator rejection sampling.
//!
//! A calibrated discriminator logit `D̃*(x,y) = a_y·d(x,y) + b_y` is read as
//! a log density ratio. Samples are accepted with probability `σ(F̂)` where
//! `F̂ = D̃* − log M̄ − log(1 − exp(D̃* − log M̄ − ε)) − γ` and `M̄` is the
//! running per-class maximum ratio.

use rand::Rng as _;
use thiserror::Error;

use crate::data::{DataError, LabeledImageSet};
use crate::gan::{GanError, GanModel, ImageShape};
use crate::nn::Tensor;
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum DrsError {
    #[error("class {class} starved: {accepted} accepted in {attempts} attempts (rate {rate})")]
    Starvation {
        class: usize,
        accepted: usize,
        attempts: u64,
        rate: f64,
    },
    #[error("class {0} has no real samples")]
    NoRealSamples(usize),
    #[error("class {class} outside the {classes} target classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("class {0} has not been burned in")]
    NotBurnedIn(usize),
    #[error("log ratio {log_ratio} exceeds log maximum {log_m}")]
    AboveMaximum { log_ratio: f64, log_m: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = DrsError> = std::result::Result<T, E>;

/// A conditional generator paired with a frozen discriminator.
pub trait ConditionalSampler {
    fn target_classes(&self) -> usize;
    fn image_shape(&self) -> ImageShape;
    /// `n` class-`y` images, concatenated.
    fn generate(&self, y: usize, n: usize, rng: &mut Rng) -> Result<Vec<u8>>;
    /// Discriminator logits for concatenated byte images.
    fn logits(&self, pixels: &[u8], labels: &[usize]) -> Result<Vec<f64>>;
}

impl ConditionalSampler for GanModel<f32> {
    fn target_classes(&self) -> usize {
        self.target_classes
    }

    fn image_shape(&self) -> ImageShape {
        self.shape
    }

    fn generate(&self, y: usize, n: usize, rng: &mut Rng) -> Result<Vec<u8>> {
        Ok(self.generate_bytes(&vec![y; n], rng)?)
    }

    fn logits(&self, pixels: &[u8], labels: &[usize]) -> Result<Vec<f64>> {
        let x = Tensor::matrix(
            labels.len(),
            self.shape.len(),
            pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
        )
        .map_err(GanError::from)?;
        Ok(self.d_logits(&x, labels)?.into_iter().map(f64::from).collect())
    }
}

fn check_class(sampler: &dyn ConditionalSampler, y: usize) -> Result<()> {
    let classes = sampler.target_classes();
    if y >= classes {
        return Err(DrsError::UnknownClass { class: y, classes });
    }
    Ok(())
}

/// Per-class affine calibration of the discriminator logit.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationHead {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl CalibrationHead {
    pub fn identity(classes: usize) -> Self {
        Self {
            a: vec![1.0; classes],
            b: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.a.len()
    }

    /// Calibrated logit `D̃*`, which is also the log density ratio.
    pub fn apply(&self, y: usize, logit: f64) -> f64 {
        self.a[y] * logit + self.b[y]
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE of `a·d + b` with reals as positives and fakes as negatives,
/// and its gradient `(∂/∂a, ∂/∂b)`. Each side is averaged separately so
/// the two streams weigh equally.
pub fn head_loss(a: f64, b: f64, real: &[f64], fake: &[f64]) -> (f64, f64, f64) {
    let (mut loss, mut ga, mut gb) = (0.0, 0.0, 0.0);
    let nr = real.len() as f64;
    for &d in real {
        let z = a * d + b;
        loss += softplus(-z) / nr;
        let g = (sigmoid(z) - 1.0) / nr;
        ga += g * d;
        gb += g;
    }
    let nf = fake.len() as f64;
    for &d in fake {
        let z = a * d + b;
        loss += softplus(z) / nf;
        let g = sigmoid(z) / nf;
        ga += g * d;
        gb += g;
    }
    (loss, ga, gb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            steps: 1_000,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trains one calibration head per target class with Adam on BCE between
/// real class-`y` images and fresh class-`y` fakes. The sampler is only
/// read.
pub fn keep_training(
    sampler: &dyn ConditionalSampler,
    target: &LabeledImageSet,
    cfg: &HeadConfig,
) -> Result<CalibrationHead> {
    let classes = sampler.target_classes();
    if cfg.batch_size < 2 {
        return Err(DrsError::Invalid("head batch size must be at least 2".into()));
    }
    let mut head = CalibrationHead::identity(classes);
    let half = cfg.batch_size / 2;
    for y in 0..classes {
        let members = target.class_indices(y);
        if members.is_empty() {
            return Err(DrsError::NoRealSamples(y));
        }
        if cfg.steps == 0 {
            continue;
        }
        let subset = target.subset(&members)?;
        let labels = vec![y; subset.len()];
        let real_logits = sampler.logits(subset.pixels(), &labels)?;
        let mut rng = rng::stream(cfg.seed, rng::mix(rng::key("drs-head"), y as u64));
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        let fake_labels = vec![y; half];
        for t in 1..=cfg.steps {
            let real: Vec<f64> = (0..half).map(|_| real_logits[rng.random_range(0..real_logits.len())]).collect();
            let fake_px = sampler.generate(y, half, &mut rng)?;
            let fake = sampler.logits(&fake_px, &fake_labels)?;
            let (_, ga, gb) = head_loss(head.a[y], head.b[y], &real, &fake);
            for (k, g) in [ga, gb].into_iter().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / (1.0 - b1.powi(t as i32));
                let vh = v[k] / (1.0 - b2.powi(t as i32));
                let step = cfg.lr * mh / (vh.sqrt() + eps);
                if k == 0 {
                    head.a[y] -= step;
                } else {
                    head.b[y] -= step;
                }
            }
        }
    }
    Ok(head)
}

/// `(log ratio, ratio)`; the ratio overflows to infinity long before the
/// log does.
pub fn density_ratio(
    sampler: &dyn ConditionalSampler,
    head: &CalibrationHead,
    image: &[u8],
    y: usize,
) -> Result<(f64, f64)> {
    check_class(sampler, y)?;
    let logit = sampler.logits(image, &[y])?[0];
    let log_ratio = head.apply(y, logit);
    Ok((log_ratio, log_ratio.exp()))
}

pub const DEFAULT_EPSILON: f64 = 1e-14;
pub const DEFAULT_TAU: usize = 1_000;
pub const DEFAULT_GAMMA_PERCENTILE: f64 = 80.0;
const ABOVE_MAX_TOLERANCE: f64 = 1e-9;
const PROPOSAL_CHUNK: usize = 64;

/// Per-class sampling state.
#[derive(Debug, Clone, PartialEq)]
pub struct DrsState {
    /// `log M̄_y`; `-inf` until burned in.
    pub log_m_bar: Vec<f64>,
    pub epsilon: f64,
    pub gamma: f64,
    pub tau: usize,
    pub attempts: Vec<u64>,
}

impl DrsState {
    pub fn new(classes: usize, epsilon: f64, gamma: f64, tau: usize) -> Self {
        Self {
            log_m_bar: vec![f64::NEG_INFINITY; classes],
            epsilon,
            gamma,
            tau,
            attempts: vec![0; classes],
        }
    }
}

/// Log ratios seen during burn-in and their maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct BurnIn {
    pub log_m_bar: f64,
    pub log_ratios: Vec<f64>,
}

fn calibrated_batch(
    sampler: &dyn ConditionalSampler,
    head: &CalibrationHead,
    y: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<(Vec<u8>, Vec<f64>)> {
    let px = sampler.generate(y, n, rng)?;
    let logits = sampler.logits(&px, &vec![y; n])?;
    Ok((px, logits.into_iter().map(|l| head.apply(y, l)).collect()))
}

/// Maximum log density ratio over `tau` fresh class-`y` samples.
pub fn burn_in(
    sampler: &dyn ConditionalSampler,
    head: &CalibrationHead,
    y: usize,
    tau: usize,
    seed: u64,
) -> Result<BurnIn> {
    check_class(sampler, y)?;
    if tau == 0 {
        return Err(DrsError::Invalid("burn-in needs at least one sample".into()));
    }
    let mut rng = rng::stream(seed, rng::mix(rng::key("drs-burn-in"), y as u64));
    let mut log_ratios = Vec::with_capacity(tau);
    while log_ratios.len() < tau {
        let n = PROPOSAL_CHUNK.min(tau - log_ratios.len());
        log_ratios.extend(calibrated_batch(sampler, head, y, n, &mut rng)?.1);
    }
    let log_m_bar = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BurnIn { log_m_bar, log_ratios })
}

/// `ln(1 − eˣ)` for `x < 0`.
fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `F̂` of the acceptance rule.
pub fn f_hat(log_ratio: f64, log_m: f64, epsilon: f64, gamma: f64) -> Result<f64> {
    let delta = log_ratio - log_m;
    if delta > ABOVE_MAX_TOLERANCE || delta.is_nan() {
        return Err(DrsError::AboveMaximum { log_ratio, log_m });
    }
    let delta = delta.min(0.0);
    Ok(delta - log1m_exp(delta - epsilon) - gamma)
}

pub fn acceptance_prob(log_ratio: f64, log_m: f64, epsilon: f64, gamma: f64) -> Result<f64> {
    Ok(sigmoid(f_hat(log_ratio, log_m, epsilon, gamma)?))
}

/// `γ` as the `q`-th percentile (nearest rank) of the burn-in `F̂` values.
pub fn gamma_percentile(burn: &BurnIn, epsilon: f64, q: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&q) {
        return Err(DrsError::Invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut f = burn
        .log_ratios
        .iter()
        .map(|&r| f_hat(r, burn.log_m_bar, epsilon, 0.0))
        .collect::<Result<Vec<_>>>()?;
    if f.is_empty() {
        return Err(DrsError::Invalid("no burn-in values".into()));
    }
    f.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * f.len() as f64).ceil().max(1.0) as usize;
    Ok(f[rank - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRecord {
    pub class: usize,
    pub accepted: usize,
    pub attempts: u64,
    pub rate: f64,
    pub log_m_bar: f64,
}

pub const ACCEPTANCE_CSV_HEADER: &str = "class,accepted,attempts,rate,log_m_bar";

impl AcceptanceRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.class, self.accepted, self.attempts, self.rate, self.log_m_bar
        )
    }
}

/// Default attempt budget for `n` accepted samples.
pub fn default_max_attempts(n: usize) -> u64 {
    200 * n as u64
}

/// Draws proposals until `n` are accepted. `M̄_y` is raised to each
/// proposal's ratio before its acceptance probability is evaluated.
pub fn drs_sample(
    sampler: &dyn ConditionalSampler,
    head: &CalibrationHead,
    state: &mut DrsState,
    y: usize,
    n: usize,
    max_attempts: u64,
    seed: u64,
) -> Result<(Vec<u8>, AcceptanceRecord)> {
    check_class(sampler, y)?;
    if y >= state.log_m_bar.len() || y >= head.classes() {
        return Err(DrsError::UnknownClass { class: y, classes: state.log_m_bar.len() });
    }
    if state.log_m_bar[y] == f64::NEG_INFINITY {
        return Err(DrsError::NotBurnedIn(y));
    }
    let image_len = sampler.image_shape().len();
    let mut out = Vec::with_capacity(n * image_len);
    let mut accepted = 0;
    let mut attempts = 0u64;
    let mut propose = rng::stream(seed, rng::mix(rng::key("drs-propose"), y as u64));
    let mut accept = rng::stream(seed, rng::mix(rng::key("drs-accept"), y as u64));
    'outer: while accepted < n {
        let (px, ratios) = calibrated_batch(sampler, head, y, PROPOSAL_CHUNK, &mut propose)?;
        for (i, &r) in ratios.iter().enumerate() {
            if attempts >= max_attempts {
                break 'outer;
            }
            attempts += 1;
            state.log_m_bar[y] = state.log_m_bar[y].max(r);
            let p = acceptance_prob(r, state.log_m_bar[y], state.epsilon, state.gamma)?;
            let psi: f64 = accept.random();
            if psi < p {
                out.extend_from_slice(&px[i * image_len..(i + 1) * image_len]);
                accepted += 1;
                if accepted == n {
                    break 'outer;
                }
            }
        }
    }
    state.attempts[y] += attempts;
    let rate = if attempts == 0 { 1.0 } else { accepted as f64 / attempts as f64 };
    if accepted < n {
        return Err(DrsError::Starvation {
            class: y,
            accepted,
            attempts,
            rate,
        });
    }
    Ok((
        out,
        AcceptanceRecord {
            class: y,
            accepted,
            attempts,
            rate,
            log_m_bar: state.log_m_bar[y],
        },
    ))
}

/// Exactly `n_per_class` unfiltered samples for every label in `labels`,
/// grouped by label in the given order.
pub fn plain_sample(
    sampler: &dyn ConditionalSampler,
    labels: &[usize],
    n_per_class: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    let shape = sampler.image_shape();
    if labels.is_empty() || n_per_class == 0 {
        return Err(DrsError::Invalid("plain sampling needs labels and a positive count".into()));
    }
    let mut pixels = Vec::with_capacity(labels.len() * n_per_class * shape.len());
    let mut out_labels = Vec::with_capacity(labels.len() * n_per_class);
    for &y in labels {
        check_class(sampler, y)?;
        let mut rng = rng::stream(seed, rng::mix(rng::key("plain-sample"), y as u64));
        pixels.extend(sampler.generate(y, n_per_class, &mut rng)?);
        out_labels.extend(std::iter::repeat_n(y as u16, n_per_class));
    }
    Ok(LabeledImageSet::new(
        "generated",
        shape.channels,
        shape.height,
        shape.width,
        sampler.target_classes(),
        out_labels,
        pixels,
    )?)
}

/// Runs the burn-in for every class and fills a fresh state; with
/// `gamma_q` set, `γ` is the given percentile of the burn-in `F̂` values
/// pooled over classes.
pub fn prepare_state(
    sampler: &dyn ConditionalSampler,
    head: &CalibrationHead,
    tau: usize,
    epsilon: f64,
    gamma: f64,
    gamma_q: Option<f64>,
    seed: u64,
) -> Result<DrsState> {
    let classes = sampler.target_classes();
    let mut state = DrsState::new(classes, epsilon, gamma, tau);
    let mut pooled = Vec::new();
    for y in 0..classes {
        let b = burn_in(sampler, head, y, tau, seed)?;
        state.log_m_bar[y] = b.log_m_bar;
        if gamma_q.is_some() {
            for &r in &b.log_ratios {
                pooled.push(f_hat(r, b.log_m_bar, epsilon, 0.0)?);
            }
        }
    }
    if let Some(q) = gamma_q {
        pooled.sort_by(f64::total_cmp);
        let rank = ((q / 100.0) * pooled.len() as f64).ceil().max(1.0) as usize;
        state.gamma = pooled[rank.min(pooled.len()) - 1];
    }
    Ok(state)
}

/// DRS-filtered set with `n_per_class` images for every target class.
pub fn drs_sample_set(
    sampler: &dyn ConditionalSampler,
    head: &CalibrationHead,
    state: &mut DrsState,
    n_per_class: usize,
    max_attempts: u64,
    seed: u64,
) -> Result<(LabeledImageSet, Vec<AcceptanceRecord>)> {
    let shape = sampler.image_shape();
    let classes = sampler.target_classes();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut records = Vec::with_capacity(classes);
    for y in 0..classes {
        let (px, rec) = drs_sample(sampler, head, state, y, n_per_class, max_attempts, seed)?;
        pixels.extend(px);
        labels.extend(std::iter::repeat_n(y as u16, n_per_class));
        records.push(rec);
    }
    if labels.is_empty() {
        return Err(DrsError::Invalid("no samples requested".into()));
    }
    let set = LabeledImageSet::new(
        "generated",
        shape.channels,
        shape.height,
        shape.width,
        classes,
        labels,
        pixels,
    )?;
    Ok((set, records))
}

#[cfg(test)]
pub(crate) mod toy {
    use super::*;

    /// One-pixel images: pixel 200 with probability `p_high`, else 50.
    /// The discriminator returns `logit_of(pixel)`.
    pub struct TwoMode {
        pub classes: usize,
        pub p_high: f64,
        pub high_logit: f64,
        pub low_logit: f64,
    }

    impl ConditionalSampler for TwoMode {
        fn target_classes(&self) -> usize {
            self.classes
        }

        fn image_shape(&self) -> ImageShape {
            ImageShape { channels: 1, height: 1, width: 1 }
        }

        fn generate(&self, _y: usize, n: usize, rng: &mut Rng) -> Result<Vec<u8>> {
            Ok((0..n).map(|_| if rng.random::<f64>() < self.p_high { 200 } else { 50 }).collect())
        }

        fn logits(&self, pixels: &[u8], _labels: &[usize]) -> Result<Vec<f64>> {
            Ok(pixels
                .iter()
                .map(|&p| if p >= 128 { self.high_logit } else { self.low_logit })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::TwoMode;
    use super::*;

    #[test]
    fn acceptance_examples() {
        let f = f_hat(0.0, 0.0, 1e-14, 0.0).unwrap();
        assert!((f - 32.236).abs() < 1e-3, "{f}");
        assert!(acceptance_prob(0.0, 0.0, 1e-14, 0.0).unwrap() > 1.0 - 1e-12);
        let p = acceptance_prob(-10.0, 0.0, 1e-14, 0.0).unwrap();
        assert!((p - 4.54e-5).abs() < 1e-7, "{p}");
        assert!(acceptance_prob(0.0, 0.0, 1e-14, 1e6).unwrap() < 1e-100);
        assert!(matches!(acceptance_prob(1.0, 0.0, 1e-14, 0.0), Err(DrsError::AboveMaximum { .. })));
        assert!(acceptance_prob(1e-10, 0.0, 1e-14, 0.0).is_ok());
    }

    #[test]
    fn head_gradient_matches_differences() {
        let real = [1.5, 0.3, -0.2];
        let fake = [-1.0, 0.4];
        let (a, b) = (0.7, -0.3);
        let (_, ga, gb) = head_loss(a, b, &real, &fake);
        let h = 1e-6;
        let na = (head_loss(a + h, b, &real, &fake).0 - head_loss(a - h, b, &real, &fake).0) / (2.0 * h);
        let nb = (head_loss(a, b + h, &real, &fake).0 - head_loss(a, b - h, &real, &fake).0) / (2.0 * h);
        assert!((ga - na).abs() < 1e-8 && (gb - nb).abs() < 1e-8);
    }

    fn target(classes: usize) -> LabeledImageSet {
        let labels: Vec<u16> = (0..8).map(|i| (i % classes) as u16).collect();
        LabeledImageSet::new("t", 1, 1, 1, classes, labels, vec![200; 8]).unwrap()
    }

    #[test]
    fn head_training_keeps_separation() {
        let toy = TwoMode { classes: 2, p_high: 0.0, high_logit: 2.0, low_logit: -2.0 };
        let cfg = HeadConfig { steps: 0, ..HeadConfig::default() };
        assert_eq!(keep_training(&toy, &target(2), &cfg).unwrap(), CalibrationHead::identity(2));
        let cfg = HeadConfig { steps: 200, lr: 1e-2, batch_size: 8, seed: 1 };
        let head = keep_training(&toy, &target(2), &cfg).unwrap();
        for y in 0..2 {
            assert!(head.apply(y, 2.0) > head.apply(y, -2.0));
        }
        let one_class = LabeledImageSet::new("t", 1, 1, 1, 2, vec![0; 4], vec![200; 4]).unwrap();
        assert!(matches!(keep_training(&toy, &one_class, &cfg), Err(DrsError::NoRealSamples(1))));
    }

    #[test]
    fn burn_in_of_constant_discriminator() {
        let toy = TwoMode { classes: 1, p_high: 0.5, high_logit: 0.7, low_logit: 0.7 };
        let head = CalibrationHead::identity(1);
        assert_eq!(burn_in(&toy, &head, 0, 50, 3).unwrap().log_m_bar, 0.7);
        let toy = TwoMode { classes: 1, p_high: 0.5, high_logit: 2.0, low_logit: 0.0 };
        let b = burn_in(&toy, &head, 0, 1, 4).unwrap();
        assert_eq!(b.log_ratios.len(), 1);
        assert_eq!(b.log_m_bar, b.log_ratios[0]);
    }

    #[test]
    fn sampling_with_constant_logit_accepts_everything() {
        let toy = TwoMode { classes: 2, p_high: 0.5, high_logit: 1.0, low_logit: 1.0 };
        let head = CalibrationHead::identity(2);
        let mut state = prepare_state(&toy, &head, 10, DEFAULT_EPSILON, 0.0, None, 1).unwrap();
        let (px, rec) = drs_sample(&toy, &head, &mut state, 1, 100, default_max_attempts(100), 2).unwrap();
        assert_eq!(px.len(), 100);
        assert_eq!(rec.attempts, 100);
        let before = state.clone();
        let (px, rec) = drs_sample(&toy, &head, &mut state, 1, 0, 0, 2).unwrap();
        assert!(px.is_empty() && rec.attempts == 0);
        assert_eq!(state, before);
    }

    #[test]
    fn starvation_reports_rate() {
        let toy = TwoMode { classes: 1, p_high: 0.5, high_logit: 0.0, low_logit: -30.0 };
        let head = CalibrationHead::identity(1);
        let mut state = DrsState::new(1, DEFAULT_EPSILON, 0.0, 1);
        state.log_m_bar[0] = 0.0;
        let toy_low = TwoMode { p_high: 0.0, ..toy };
        let err = drs_sample(&toy_low, &head, &mut state, 0, 5, 20, 1).unwrap_err();
        assert!(matches!(err, DrsError::Starvation { class: 0, attempts: 20, .. }));
    }

    #[test]
    fn plain_sample_is_uniform_and_deterministic() {
        let toy = TwoMode { classes: 3, p_high: 0.5, high_logit: 0.0, low_logit: 0.0 };
        let a = plain_sample(&toy, &[0, 1, 2], 4, 7).unwrap();
        assert_eq!(a.class_histogram(), vec![4, 4, 4]);
        assert_eq!(a, plain_sample(&toy, &[0, 1, 2], 4, 7).unwrap());
        assert!(plain_sample(&toy, &[3], 1, 7).is_err());
    }

    #[test]
    fn percentile_gamma() {
        let burn = BurnIn { log_m_bar: 0.0, log_ratios: vec![0.0, -1.0, -2.0, -3.0, -4.0] };
        let g = gamma_percentile(&burn, DEFAULT_EPSILON, 80.0).unwrap();
        assert_eq!(g, f_hat(-1.0, 0.0, DEFAULT_EPSILON, 0.0).unwrap());
    }
}
