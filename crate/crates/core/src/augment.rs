//! Augmented training sets, conventional image augmentation, downstream
//! classifier training and evaluation.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::classifier::{fit, Classifier, ClassifierError, FitConfig, FitOutcome};
use crate::data::{resize_image, DataError, LabeledImageSet};
use crate::drs::{drs_sample_set, plain_sample, AcceptanceRecord, CalibrationHead, ConditionalSampler, DrsError, DrsState};
use crate::rng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Drs(#[from] DrsError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub gen_per_class: usize,
    pub use_drs: bool,
    pub n_train_real: usize,
    pub n_val: usize,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            gen_per_class: 100,
            use_drs: true,
            n_train_real: 400,
            n_val: 100,
        }
    }
}

/// Real images first, generated ones after `n_real`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub set: LabeledImageSet,
    pub n_real: usize,
    pub acceptance: Vec<AcceptanceRecord>,
}

impl AugmentedSet {
    pub fn n_generated(&self) -> usize {
        self.set.len() - self.n_real
    }

    pub fn is_generated(&self, i: usize) -> bool {
        i >= self.n_real
    }
}

/// Splits `target` into disjoint class-balanced train and validation sets.
pub fn split_target(
    target: &LabeledImageSet,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let k = target.num_classes();
    if n_train % k != 0 || n_val % k != 0 || n_train == 0 || n_val == 0 {
        return Err(AugmentError::Invalid(format!(
            "split sizes {n_train}/{n_val} must be positive multiples of {k} classes"
        )));
    }
    let (per_train, per_val) = (n_train / k, n_val / k);
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    for c in 0..k {
        let mut members = target.class_indices(c);
        if members.len() < per_train + per_val {
            return Err(DataError::InsufficientClass {
                class: c,
                have: members.len(),
                need: per_train + per_val,
            }
            .into());
        }
        members.shuffle(&mut rng::stream(seed, rng::mix(rng::key("split"), c as u64)));
        train.extend_from_slice(&members[..per_train]);
        val.extend_from_slice(&members[per_train..per_train + per_val]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((target.subset(&train)?, target.subset(&val)?))
}

/// Appends `gen_per_class` generated images of every target class to
/// `target`. DRS filtering needs a calibration head and burned-in state.
pub fn build_augmented(
    target: &LabeledImageSet,
    sampler: &dyn ConditionalSampler,
    drs: Option<(&CalibrationHead, &mut DrsState)>,
    plan: &AugmentPlan,
    seed: u64,
) -> Result<AugmentedSet> {
    let k = target.num_classes();
    if sampler.target_classes() != k {
        return Err(AugmentError::Invalid(format!(
            "generator has {} target classes, dataset {k}",
            sampler.target_classes()
        )));
    }
    if plan.gen_per_class == 0 {
        return Ok(AugmentedSet {
            set: target.clone(),
            n_real: target.len(),
            acceptance: Vec::new(),
        });
    }
    let (generated, acceptance) = match (plan.use_drs, drs) {
        (true, Some((head, state))) => drs_sample_set(
            sampler,
            head,
            state,
            plan.gen_per_class,
            crate::drs::default_max_attempts(plan.gen_per_class),
            seed,
        )?,
        (true, None) => return Err(AugmentError::Invalid("DRS requested without a head and state".into())),
        (false, _) => {
            let labels: Vec<usize> = (0..k).collect();
            (plain_sample(sampler, &labels, plan.gen_per_class, seed)?, Vec::new())
        }
    };
    let set = target.concat(&generated)?.with_name(format!("{}+gen", target.name()));
    Ok(AugmentedSet {
        set,
        n_real: target.len(),
        acceptance,
    })
}

/// Random flip, expand and rotation applied when a batch is loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct CdaConfig {
    pub flip: bool,
    pub flip_prob: f64,
    pub expand: bool,
    /// Expansion ratio is drawn from `[1, max_expand]`.
    pub max_expand: f64,
    pub rotate: bool,
    pub max_rotation_deg: f64,
}

impl Default for CdaConfig {
    fn default() -> Self {
        Self {
            flip: true,
            flip_prob: 0.5,
            expand: true,
            max_expand: 4.0,
            rotate: true,
            max_rotation_deg: 15.0,
        }
    }
}

impl CdaConfig {
    pub fn disabled() -> Self {
        Self {
            flip: false,
            expand: false,
            rotate: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || self.max_expand < 1.0 || self.max_rotation_deg < 0.0 {
            return Err(AugmentError::Invalid("augmentation ranges out of bounds".into()));
        }
        Ok(())
    }
}

/// Mirrors every row.
pub fn flip_horizontal(image: &[u8], channels: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len());
    for c in 0..channels {
        for r in 0..h {
            let row = &image[(c * h + r) * w..(c * h + r + 1) * w];
            out.extend(row.iter().rev());
        }
    }
    out
}

/// Pastes the image at `(top, left)` on a zero canvas of `ch × cw`, then
/// resizes the canvas back to `h × w`.
pub fn expand(image: &[u8], channels: usize, h: usize, w: usize, ch: usize, cw: usize, top: usize, left: usize) -> Vec<u8> {
    let mut canvas = vec![0u8; channels * ch * cw];
    for c in 0..channels {
        for r in 0..h {
            let src = &image[(c * h + r) * w..(c * h + r + 1) * w];
            let dst = (c * ch + top + r) * cw + left;
            canvas[dst..dst + w].copy_from_slice(src);
        }
    }
    resize_image(&canvas, channels, ch, cw, h, w)
}

/// Rotation by `degrees` about the image centre with bilinear sampling and
/// edge clamping.
pub fn rotate(image: &[u8], channels: usize, h: usize, w: usize, degrees: f64) -> Vec<u8> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..channels {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        let p = |y: usize, x: usize| f64::from(plane[y * w + x]);
        for r in 0..h {
            for col in 0..w {
                let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                let sy = (c * dy - s * dx + cy).clamp(0.0, (h - 1) as f64);
                let sx = (s * dy + c * dx + cx).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Flip, expand and rotate in that order, each with its own random draw.
pub fn conventional_augment(
    image: &[u8],
    channels: usize,
    h: usize,
    w: usize,
    cfg: &CdaConfig,
    seed: u64,
) -> Vec<u8> {
    let mut rng = rng::stream(seed, rng::key("cda"));
    let mut img = image.to_vec();
    let flip = rng.random::<f64>() < cfg.flip_prob;
    if cfg.flip && flip {
        img = flip_horizontal(&img, channels, h, w);
    }
    let ratio = 1.0 + rng.random::<f64>() * (cfg.max_expand - 1.0);
    let (ch, cw) = (((h as f64) * ratio).round() as usize, ((w as f64) * ratio).round() as usize);
    let (top, left) = (rng.random_range(0..=ch - h), rng.random_range(0..=cw - w));
    if cfg.expand && (ch, cw) != (h, w) {
        img = expand(&img, channels, h, w, ch, cw, top, left);
    }
    let angle = rng.random::<f64>() * cfg.max_rotation_deg;
    if cfg.rotate && angle != 0.0 {
        img = rotate(&img, channels, h, w, angle);
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            fit: FitConfig::default(),
        }
    }
}

pub const CLASSIFIER_PREFIX: &str = "clf";

/// Trains the downstream classifier and returns the best-on-validation
/// parameters. With `cda`, every training image is augmented at load time.
pub fn train_classifier(
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    cfg: &ClassifierConfig,
    cda: Option<&CdaConfig>,
) -> Result<FitOutcome> {
    if val.num_classes() > train.num_classes() {
        return Err(AugmentError::Invalid("validation labels outside the training label space".into()));
    }
    if !train.same_geometry(val) {
        return Err(AugmentError::Invalid("train and validation images differ in size".into()));
    }
    let clf = Classifier::new(
        CLASSIFIER_PREFIX,
        train.image_len(),
        &cfg.hidden,
        train.num_classes(),
        cfg.fit.seed,
    )?;
    let (c, h, w) = (train.channels(), train.height(), train.width());
    let out = match cda {
        Some(a) => {
            a.validate()?;
            let t = move |img: &[u8], seed: u64| conventional_augment(img, c, h, w, a, seed);
            fit(clf, train, Some(val), &cfg.fit, Some(&t))?
        }
        None => fit(clf, train, Some(val), &cfg.fit, None)?,
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCount {
    pub correct: usize,
    pub n: usize,
}

impl ClassCount {
    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub per_class: Vec<ClassCount>,
    pub n: usize,
}

/// Position of `label` when scores are sorted descending with ties going
/// to the lower class id.
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < label))
        .count()
}

/// Top-1 and top-k accuracy of a score table.
pub fn evaluate_scores(scores: &[Vec<f64>], labels: &[usize], classes: usize, k: usize) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(AugmentError::Invalid("need one non-empty score row per label".into()));
    }
    if k == 0 {
        return Err(AugmentError::Invalid("k must be at least 1".into()));
    }
    let mut per_class = vec![ClassCount { correct: 0, n: 0 }; classes];
    let (mut top1, mut topk) = (0usize, 0usize);
    for (row, &y) in scores.iter().zip(labels) {
        if row.len() != classes || y >= classes {
            return Err(AugmentError::Invalid(format!("score row or label {y} outside {classes} classes")));
        }
        let rank = rank_of(row, y);
        per_class[y].n += 1;
        if rank == 0 {
            top1 += 1;
            per_class[y].correct += 1;
        }
        if rank < k {
            topk += 1;
        }
    }
    let n = labels.len();
    Ok(EvalReport {
        top1: top1 as f64 / n as f64,
        topk: topk as f64 / n as f64,
        k,
        per_class,
        n,
    })
}

pub fn evaluate(classifier: &Classifier<f32>, test: &LabeledImageSet, k: usize) -> Result<EvalReport> {
    let scores = classifier.scores(test)?;
    let labels: Vec<usize> = (0..test.len()).map(|i| test.label(i)).collect();
    evaluate_scores(&scores, &labels, classifier.num_classes(), k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRate {
    pub group: String,
    pub with_da: f64,
    pub without_da: f64,
    /// `None` when the without-DA accuracy is zero.
    pub rate: Option<f64>,
}

/// Pooled top-1 accuracy ratio (with DA over without DA) per class group,
/// sorted by descending rate with undefined rates last.
pub fn improvement_rate(
    with_da: &EvalReport,
    without_da: &EvalReport,
    groups: &[(String, Vec<usize>)],
) -> Result<Vec<GroupRate>> {
    let classes = with_da.per_class.len();
    if without_da.per_class.len() != classes {
        return Err(AugmentError::Invalid("reports cover different class spaces".into()));
    }
    let mut rates = Vec::with_capacity(groups.len());
    for (name, members) in groups {
        if members.is_empty() {
            return Err(AugmentError::Invalid(format!("group `{name}` is empty")));
        }
        if let Some(c) = members.iter().find(|&&c| c >= classes) {
            return Err(AugmentError::Invalid(format!("group `{name}` names class {c}")));
        }
        let pooled = |r: &EvalReport| {
            let (c, n) = members.iter().fold((0, 0), |(c, n), &m| (c + r.per_class[m].correct, n + r.per_class[m].n));
            if n == 0 {
                0.0
            } else {
                c as f64 / n as f64
            }
        };
        let (w, wo) = (pooled(with_da), pooled(without_da));
        rates.push(GroupRate {
            group: name.clone(),
            with_da: w,
            without_da: wo,
            rate: (wo > 0.0).then(|| w / wo),
        });
    }
    rates.sort_by(|a, b| match (a.rate, b.rate) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.group.cmp(&b.group)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.group.cmp(&b.group),
    });
    Ok(rates)
}
