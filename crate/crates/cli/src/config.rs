//! Experiment configuration files.
//!
//! A configuration is plain text made of `[section]` headers followed by
//! `key = value` lines. Blank lines and lines starting with `#` are ignored,
//! so a run manifest (whose header lines are comments) is itself a valid
//! configuration. Every key listed in [`ExperimentConfig`] is mandatory and
//! unknown sections or keys are rejected. Lists are comma separated.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use domain_fusion::augment::{AugmentPlan, CdaConfig, ClassifierConfig};
use domain_fusion::classifier::FitConfig;
use domain_fusion::data::{DomainKind, SynthDomainSpec};
use domain_fusion::drs::HeadConfig;
use domain_fusion::gan::{GanArch, TrainConfig};
use domain_fusion::metrics::{MetricConfig, MsSsimConfig, ReferenceConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing key `{section}.{key}`")]
    Missing { section: String, key: String },
    #[error("unknown key `{section}.{key}`")]
    Unknown { section: String, key: String },
    #[error("unknown section `{0}`")]
    UnknownSection(String),
    #[error("bad value `{value}` for `{section}.{key}`: {reason}")]
    Value {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

type Sections = BTreeMap<String, BTreeMap<String, String>>;

/// Splits the text into sections, rejecting duplicates and stray lines.
pub fn parse_sections(text: &str) -> Result<Sections> {
    let mut sections = Sections::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    message: format!("malformed section header `{line}`"),
                })?;
            if sections.contains_key(name) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("section `{name}` appears twice"),
                });
            }
            sections.insert(name.to_owned(), BTreeMap::new());
            current = Some(name.to_owned());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let section = current.as_ref().ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            message: "key outside any section".into(),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: "empty key".into(),
            });
        }
        let entries = sections.get_mut(section).expect("section was inserted");
        if entries.insert(key.to_owned(), value.trim().to_owned()).is_some() {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: format!("key `{section}.{key}` appears twice"),
            });
        }
    }
    Ok(sections)
}

/// Takes keys out of one section; whatever is left afterwards is unknown.
struct Section<'a> {
    name: &'static str,
    entries: &'a mut BTreeMap<String, String>,
}

impl Section<'_> {
    fn raw(&mut self, key: &str) -> Result<String> {
        self.entries.remove(key).ok_or_else(|| ConfigError::Missing {
            section: self.name.into(),
            key: key.into(),
        })
    }

    fn bad(&self, key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            section: self.name.into(),
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| self.bad(key, &raw, "cannot parse"))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| self.bad(key, &raw, "cannot parse list")))
            .collect()
    }

    /// `none` maps to `None`.
    fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let raw = self.raw(key)?;
        if raw == "none" {
            return Ok(None);
        }
        raw.parse().map(Some).map_err(|_| self.bad(key, &raw, "cannot parse"))
    }

    fn kind(&mut self, key: &str) -> Result<DomainKind> {
        let raw = self.raw(key)?;
        DomainKind::parse(&raw).ok_or_else(|| self.bad(key, &raw, "expected solid, outline or noise"))
    }

    fn kinds(&mut self, key: &str) -> Result<Vec<DomainKind>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|s| DomainKind::parse(s.trim()).ok_or_else(|| self.bad(key, &raw, "expected solid, outline or noise")))
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(key) => Err(ConfigError::Unknown {
                section: self.name.into(),
                key: key.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanMode {
    Cgan,
    Tgan,
    Df,
}

impl GanMode {
    pub const ALL: [GanMode; 3] = [GanMode::Cgan, GanMode::Tgan, GanMode::Df];

    pub fn name(self) -> &'static str {
        match self {
            GanMode::Cgan => "cgan",
            GanMode::Tgan => "tgan",
            GanMode::Df => "df",
        }
    }

    pub fn needs_outer(self) -> bool {
        self != GanMode::Cgan
    }
}

impl FromStr for GanMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cgan" => Ok(GanMode::Cgan),
            "tgan" => Ok(GanMode::Tgan),
            "df" => Ok(GanMode::Df),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    /// Replicates run by `pipeline`; seeds are `base, base + 1, …`.
    pub replicates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub seed: u64,
    pub side: usize,
    pub target: DomainKind,
    pub candidates: Vec<DomainKind>,
    pub target_per_class: usize,
    pub outer_per_class: usize,
    pub test_per_class: usize,
    /// Size of the full-volume set used as FID reference and for the
    /// reference extractor.
    pub reference_per_class: usize,
    pub pixel_noise: f64,
    pub position_jitter: f64,
    pub size_jitter: f64,
    pub max_rotation_deg: f64,
    pub noise_fixed_phase: bool,
}

impl DataSection {
    pub fn spec(&self, kind: DomainKind) -> SynthDomainSpec {
        SynthDomainSpec {
            kind,
            side: self.side,
            classes: 4,
            position_jitter: self.position_jitter,
            size_jitter: self.size_jitter,
            max_rotation_deg: self.max_rotation_deg,
            pixel_noise: self.pixel_noise,
            fixed_phase: kind == DomainKind::StripedNoise && self.noise_fixed_phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanSection {
    pub mode: GanMode,
    pub train: TrainConfig,
    /// Outer-domain iterations of the TGAN pretraining phase.
    pub pretrain_iterations: u64,
    pub arch: GanArch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSection {
    pub metric: MetricConfig,
    /// Generated images per class for FID and IS.
    pub samples_per_class: usize,
    pub reference: ReferenceConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrsSection {
    pub use_drs: bool,
    pub tau: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub gamma_percentile: Option<f64>,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSection {
    pub plan: AugmentPlan,
    pub cda: CdaConfig,
}

impl AugmentSection {
    pub fn cda(&self) -> Option<&CdaConfig> {
        (self.cda.flip || self.cda.expand || self.cda.rotate).then_some(&self.cda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSection {
    pub config: ClassifierConfig,
    pub k: usize,
    /// Independent classifier fits per evaluation; reported accuracies are their mean.
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    pub data_dir: String,
    pub checkpoint_dir: String,
    pub report_dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub gan: GanSection,
    pub metrics: MetricsSection,
    pub drs: DrsSection,
    pub augment: AugmentSection,
    pub classifier: ClassifierSection,
    pub paths: PathsSection,
    /// The text this configuration was parsed from.
    pub source: String,
}

const SECTIONS: [&str; 8] = ["run", "data", "gan", "metrics", "drs", "augment", "classifier", "paths"];

fn section<'a>(sections: &'a mut Sections, name: &'static str) -> Result<Section<'a>> {
    let entries = sections.get_mut(name).ok_or_else(|| ConfigError::Missing {
        section: name.into(),
        key: "*".into(),
    })?;
    Ok(Section { name, entries })
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Result<Self>> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        if let Some(name) = sections.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownSection(name.clone()));
        }

        let mut s = section(&mut sections, "run")?;
        let run = RunSection {
            replicates: s.get("replicates")?,
        };
        s.finish()?;

        let mut s = section(&mut sections, "data")?;
        let data = DataSection {
            seed: s.get("seed")?,
            side: s.get("side")?,
            target: s.kind("target")?,
            candidates: s.kinds("candidates")?,
            target_per_class: s.get("target_per_class")?,
            outer_per_class: s.get("outer_per_class")?,
            test_per_class: s.get("test_per_class")?,
            reference_per_class: s.get("reference_per_class")?,
            pixel_noise: s.get("pixel_noise")?,
            position_jitter: s.get("position_jitter")?,
            size_jitter: s.get("size_jitter")?,
            max_rotation_deg: s.get("max_rotation_deg")?,
            noise_fixed_phase: s.get("noise_fixed_phase")?,
        };
        s.finish()?;

        let mut s = section(&mut sections, "gan")?;
        let gan = GanSection {
            mode: s.get("mode")?,
            train: TrainConfig {
                alpha: s.get("alpha")?,
                batch_size: s.get("batch_size")?,
                d_steps: s.get("d_steps")?,
                lr_g: s.get("lr_g")?,
                lr_d: s.get("lr_d")?,
                beta1: s.get("beta1")?,
                beta2: s.get("beta2")?,
                iterations: s.get("iterations")?,
                eval_interval: s.get("eval_interval")?,
                eval_samples: s.get("eval_samples")?,
                patience: s.get("patience")?,
                seed: 0,
                spectral_norm: s.get("spectral_norm")?,
                fresh_noise: s.get("fresh_noise")?,
            },
            pretrain_iterations: s.get("pretrain_iterations")?,
            arch: GanArch {
                z_dim: s.get("z_dim")?,
                embed_dim: s.get("embed_dim")?,
                g_hidden: s.list("g_hidden")?,
                d_hidden: s.list("d_hidden")?,
            },
        };
        s.finish()?;

        let mut s = section(&mut sections, "metrics")?;
        let scales: usize = s.get("ssim_scales")?;
        let mut ssim = MsSsimConfig::with_scales(scales).map_err(invalid)?;
        ssim.window = s.get("ssim_window")?;
        ssim.sigma = s.get("ssim_sigma")?;
        ssim.k1 = s.get("ssim_k1")?;
        ssim.k2 = s.get("ssim_k2")?;
        let metrics = MetricsSection {
            metric: MetricConfig {
                ssim,
                pair_budget: s.get("pair_budget")?,
                seed: 0,
            },
            samples_per_class: s.get("samples_per_class")?,
            reference: ReferenceConfig {
                hidden: s.list("extractor_hidden")?,
                fit: FitConfig {
                    epochs: s.get("extractor_epochs")?,
                    batch_size: s.get("extractor_batch_size")?,
                    lr: s.get("extractor_lr")?,
                    ..ReferenceConfig::default().fit
                },
            },
        };
        s.finish()?;

        let mut s = section(&mut sections, "drs")?;
        let drs = DrsSection {
            use_drs: s.get("use_drs")?,
            tau: s.get("tau")?,
            epsilon: s.get("epsilon")?,
            gamma: s.get("gamma")?,
            gamma_percentile: s.optional("gamma_percentile")?,
            head: HeadConfig {
                steps: s.get("head_steps")?,
                lr: s.get("head_lr")?,
                batch_size: s.get("head_batch_size")?,
                seed: 0,
            },
        };
        s.finish()?;

        let mut s = section(&mut sections, "augment")?;
        let augment = AugmentSection {
            plan: AugmentPlan {
                gen_per_class: s.get("gen_per_class")?,
                use_drs: drs.use_drs,
                n_train_real: s.get("n_train_real")?,
                n_val: s.get("n_val")?,
            },
            cda: CdaConfig {
                flip: s.get("flip")?,
                flip_prob: s.get("flip_prob")?,
                expand: s.get("expand")?,
                max_expand: s.get("max_expand")?,
                rotate: s.get("rotate")?,
                max_rotation_deg: s.get("max_rotation_deg")?,
            },
        };
        s.finish()?;

        let mut s = section(&mut sections, "classifier")?;
        let classifier = ClassifierSection {
            config: ClassifierConfig {
                hidden: s.list("hidden")?,
                fit: FitConfig {
                    epochs: s.get("epochs")?,
                    batch_size: s.get("batch_size")?,
                    lr: s.get("lr")?,
                    beta1: s.get("beta1")?,
                    beta2: s.get("beta2")?,
                    seed: 0,
                },
            },
            k: s.get("k")?,
            restarts: s.get("restarts")?,
        };
        s.finish()?;

        let mut s = section(&mut sections, "paths")?;
        let paths = PathsSection {
            data_dir: s.get("data_dir")?,
            checkpoint_dir: s.get("checkpoint_dir")?,
            report_dir: s.get("report_dir")?,
        };
        s.finish()?;

        let cfg = Self {
            run,
            data,
            gan,
            metrics,
            drs,
            augment,
            classifier,
            paths,
            source: text.to_owned(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.replicates == 0 {
            return Err(invalid("run.replicates must be at least 1"));
        }
        let d = &self.data;
        self.data.spec(d.target).validate().map_err(invalid)?;
        if d.candidates.is_empty() {
            return Err(invalid("data.candidates is empty"));
        }
        if d.candidates.contains(&d.target) {
            return Err(invalid("data.candidates must not contain the target domain"));
        }
        for (i, k) in d.candidates.iter().enumerate() {
            if d.candidates[..i].contains(k) {
                return Err(invalid(format!("candidate `{}` listed twice", k.name())));
            }
        }
        if [d.target_per_class, d.outer_per_class, d.test_per_class, d.reference_per_class].contains(&0) {
            return Err(invalid("per-class dataset sizes must be positive"));
        }
        self.gan.train.validate().map_err(invalid)?;
        self.gan.arch.validate().map_err(invalid)?;
        self.metrics.metric.ssim.validate().map_err(invalid)?;
        if self.metrics.samples_per_class < 2 {
            return Err(invalid("metrics.samples_per_class must be at least 2"));
        }
        if self.metrics.reference.hidden.is_empty() {
            return Err(invalid("metrics.extractor_hidden needs at least one layer"));
        }
        let drs = &self.drs;
        if drs.tau == 0 || !(drs.epsilon > 0.0) || drs.head.steps == 0 || drs.head.batch_size == 0 {
            return Err(invalid("drs.tau, drs.epsilon, drs.head_steps and drs.head_batch_size must be positive"));
        }
        if let Some(q) = drs.gamma_percentile {
            if !(0.0..=100.0).contains(&q) {
                return Err(invalid("drs.gamma_percentile must lie in [0, 100]"));
            }
        }
        self.augment.cda.validate().map_err(invalid)?;
        let plan = &self.augment.plan;
        let classes = 4;
        if plan.n_train_real % classes != 0 || plan.n_val % classes != 0 || plan.n_train_real == 0 || plan.n_val == 0 {
            return Err(invalid("augment split sizes must be positive multiples of the class count"));
        }
        if plan.n_train_real + plan.n_val > d.target_per_class * classes {
            return Err(invalid("augment splits exceed the target dataset"));
        }
        let c = &self.classifier;
        if c.k == 0 || c.restarts == 0 || c.config.fit.epochs == 0 || c.config.fit.batch_size == 0 {
            return Err(invalid("classifier.k, classifier.restarts, classifier.epochs and classifier.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.gan.train.clone()
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            iterations: self.gan.pretrain_iterations,
            ..self.gan.train.clone()
        }
    }

    pub fn metric_config(&self, seed: u64) -> MetricConfig {
        MetricConfig {
            seed,
            ..self.metrics.metric.clone()
        }
    }

    pub fn head_config(&self, seed: u64) -> HeadConfig {
        HeadConfig {
            seed,
            ..self.drs.head.clone()
        }
    }

    pub fn classifier_config(&self, seed: u64) -> ClassifierConfig {
        let mut c = self.classifier.config.clone();
        c.fit.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../../../configs/default.conf");
    const SMOKE: &str = include_str!("../../../configs/smoke.conf");

    #[test]
    fn shipped_configs_parse() {
        let d = ExperimentConfig::parse(DEFAULT).unwrap();
        assert_eq!(d.data.target, DomainKind::SolidShapes);
        assert_eq!(d.data.target_per_class * 4, 500);
        ExperimentConfig::parse(SMOKE).unwrap();
    }

    #[test]
    fn every_key_is_mandatory() {
        let lines: Vec<&str> = DEFAULT.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with('[') {
                continue;
            }
            let key = t.split('=').next().unwrap().trim();
            let text: String = lines
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, l)| format!("{l}\n"))
                .collect();
            match ExperimentConfig::parse(&text) {
                Err(ConfigError::Missing { key: k, .. }) => assert_eq!(k, key),
                other => panic!("dropping `{key}` gave {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_and_sections_fail() {
        let text = DEFAULT.replace("[gan]\n", "[gan]\nwarmup = 3\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::Unknown { key, .. }) if key == "warmup"));
        let text = format!("{DEFAULT}\n[extra]\nx = 1\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::UnknownSection(s)) if s == "extra"));
    }

    #[test]
    fn syntax_errors_report_lines() {
        assert!(matches!(parse_sections("x = 1"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_sections("[a]\nnot a pair"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(parse_sections("[a]\nx=1\nx=2"), Err(ConfigError::Syntax { line: 3, .. })));
        assert!(matches!(parse_sections("[a\n"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn comments_and_whitespace_are_ignored() {
        let s = parse_sections("# header\n\n [a] \n  k =  v w  \n").unwrap();
        assert_eq!(s["a"]["k"], "v w");
    }

    #[test]
    fn bad_values_name_the_key() {
        let text = DEFAULT.replace("alpha = 0.5", "alpha = half");
        match ExperimentConfig::parse(&text) {
            Err(ConfigError::Value { section, key, .. }) => assert_eq!((section.as_str(), key.as_str()), ("gan", "alpha")),
            other => panic!("{other:?}"),
        }
        let text = DEFAULT.replace("alpha = 0.5", "alpha = 1.5");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::Invalid(_))));
    }
}
