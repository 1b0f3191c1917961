//! Stages shared by the subcommands and the end-to-end pipeline.

use domain_fusion::augment::{
    build_augmented, evaluate, split_target, train_classifier, AugmentedSet, EvalReport,
};
use domain_fusion::data::{merge_domains, synth_domain, DomainKind, LabeledImageSet};
use domain_fusion::drs::{keep_training, plain_sample, prepare_state, AcceptanceRecord};
use domain_fusion::gan::{cgan_continue, cgan_train, df_train, tgan_train, transfer_to, GanModel, TrainLogRecord, TrainOutcome};
use domain_fusion::metrics::{
    fid, inception_score, select_outer, train_reference_extractor, FeatureExtractor, MetricReport,
    ReferenceExtractor,
};
use domain_fusion::rng;

use crate::config::{ExperimentConfig, GanMode};
use crate::output::SummaryRow;
use crate::{CliError, Result};

pub fn dataset_name(kind: DomainKind, n: usize) -> String {
    format!("{}_{n}", kind.name())
}

fn synth(cfg: &ExperimentConfig, kind: DomainKind, role: &str, per_class: usize, name: String) -> Result<LabeledImageSet> {
    let seed = rng::mix(rng::mix(cfg.data.seed, rng::key(role)), rng::key(kind.name()));
    synth_domain(&cfg.data.spec(kind), per_class, seed)
        .map(|s| s.with_name(name))
        .map_err(|e| CliError::from_data("synth", e))
}

/// The target set and one set per candidate outer domain.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub target: LabeledImageSet,
    pub candidates: Vec<LabeledImageSet>,
}

pub fn synth_sets(cfg: &ExperimentConfig) -> Result<Synthesized> {
    let d = &cfg.data;
    let target = synth(cfg, d.target, "target", d.target_per_class, dataset_name(d.target, 4 * d.target_per_class))?;
    let candidates = d
        .candidates
        .iter()
        .map(|&k| synth(cfg, k, "outer", d.outer_per_class, dataset_name(k, 4 * d.outer_per_class)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Synthesized { target, candidates })
}

/// Held-out evaluation images of the target domain.
pub fn test_set(cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    let d = &cfg.data;
    let name = format!("{}-test_{}", d.target.name(), 4 * d.test_per_class);
    synth(cfg, d.target, "test", d.test_per_class, name)
}

/// Full-volume target-domain set: FID reference and extractor training data.
pub fn reference_set(cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    let d = &cfg.data;
    let name = format!("{}-reference_{}", d.target.name(), 4 * d.reference_per_class);
    synth(cfg, d.target, "reference", d.reference_per_class, name)
}

pub fn train_extractor(cfg: &ExperimentConfig, sets: &[LabeledImageSet], seed: u64) -> Result<ReferenceExtractor> {
    train_reference_extractor(sets, &cfg.metrics.reference, seed).map_err(|e| CliError::from_metric("extractor", e))
}

/// Candidates ranked by ascending 𝓜; the first one is the chosen outer set.
pub fn rank(
    cfg: &ExperimentConfig,
    target: &LabeledImageSet,
    candidates: &[LabeledImageSet],
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    select_outer(target, candidates, extractor, &cfg.metric_config(seed)).map_err(|e| CliError::from_metric("rank", e))
}

#[derive(Debug, Clone)]
pub struct TrainedGan {
    pub mode: GanMode,
    pub model: GanModel<f32>,
    pub log: Vec<TrainLogRecord>,
    /// Outer-domain phase of TGAN.
    pub pretrain_log: Option<Vec<TrainLogRecord>>,
}

pub fn train_mode(
    cfg: &ExperimentConfig,
    mode: GanMode,
    target: &LabeledImageSet,
    outer: Option<&LabeledImageSet>,
    extractor: Option<&dyn FeatureExtractor>,
    seed: u64,
) -> Result<TrainedGan> {
    let stage = format!("train-{}", mode.name());
    let train_cfg = cfg.train_config(seed);
    let arch = &cfg.gan.arch;
    let outer = match (mode.needs_outer(), outer) {
        (true, None) => {
            return Err(CliError::Argument(format!("mode {} needs an outer dataset", mode.name())));
        }
        (_, o) => o,
    };
    let gan = |e| CliError::from_gan(&stage, e);
    Ok(match mode {
        GanMode::Cgan => {
            let out = cgan_train(target, arch, &train_cfg, extractor).map_err(gan)?;
            TrainedGan {
                mode,
                model: out.model,
                log: out.log,
                pretrain_log: None,
            }
        }
        GanMode::Tgan => {
            let outer = outer.expect("checked above");
            let out = tgan_train(target, outer, arch, &cfg.pretrain_config(seed), &train_cfg, extractor).map_err(gan)?;
            TrainedGan {
                mode,
                model: out.finetuned.model,
                log: out.finetuned.log,
                pretrain_log: Some(out.pretrain_log),
            }
        }
        GanMode::Df => {
            let outer = outer.expect("checked above");
            let pair = merge_domains(target, outer, false).map_err(|e| CliError::from_data(&stage, e))?;
            let out = df_train(&pair, arch, &train_cfg, extractor).map_err(gan)?;
            TrainedGan {
                mode,
                model: out.model,
                log: out.log,
                pretrain_log: None,
            }
        }
    })
}

/// Outer-domain phase of TGAN, trained once and shared by every replicate.
pub fn pretrain_outer(cfg: &ExperimentConfig, outer: &LabeledImageSet, seed: u64) -> Result<TrainOutcome> {
    cgan_train(outer, &cfg.gan.arch, &cfg.pretrain_config(seed), None).map_err(|e| CliError::from_gan("pretrain-tgan", e))
}

/// Fine-tunes a copy of the pretrained outer model on `target`.
pub fn finetune(
    cfg: &ExperimentConfig,
    pretrained: &TrainOutcome,
    target: &LabeledImageSet,
    extractor: Option<&dyn FeatureExtractor>,
    seed: u64,
) -> Result<TrainedGan> {
    let gan = |e| CliError::from_gan("train-tgan", e);
    let model = transfer_to(&pretrained.model, target, seed).map_err(gan)?;
    let out = cgan_continue(model, target, &cfg.train_config(seed), extractor).map_err(gan)?;
    Ok(TrainedGan {
        mode: GanMode::Tgan,
        model: out.model,
        log: out.log,
        pretrain_log: None,
    })
}

/// Generated images per class for FID and IS, drawn without filtering.
pub fn quality_samples(cfg: &ExperimentConfig, model: &GanModel<f32>, seed: u64) -> Result<LabeledImageSet> {
    let labels: Vec<usize> = (0..model.target_classes).collect();
    plain_sample(model, &labels, cfg.metrics.samples_per_class, seed).map_err(|e| CliError::from_drs("sample", e))
}

/// Real training images plus generated ones, DRS-filtered when enabled.
pub fn augmented_set(
    cfg: &ExperimentConfig,
    model: &GanModel<f32>,
    train: &LabeledImageSet,
    seed: u64,
) -> Result<AugmentedSet> {
    let plan = &cfg.augment.plan;
    let out = if plan.use_drs && plan.gen_per_class > 0 {
        let head = keep_training(model, train, &cfg.head_config(seed)).map_err(|e| CliError::from_drs("drs-head", e))?;
        let d = &cfg.drs;
        let mut state = prepare_state(model, &head, d.tau, d.epsilon, d.gamma, d.gamma_percentile, seed)
            .map_err(|e| CliError::from_drs("drs-burn-in", e))?;
        build_augmented(train, model, Some((&head, &mut state)), plan, seed)
    } else {
        build_augmented(train, model, None, plan, seed)
    };
    out.map_err(|e| CliError::from_augment("augment", e))
}

/// Trains the downstream classifier on `train` and scores it on `test`.
/// With several restarts, top-1/top-k are averaged and per-class counts are
/// pooled over the fits; restart 0 uses `seed` itself.
pub fn classify(
    cfg: &ExperimentConfig,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: &LabeledImageSet,
    seed: u64,
) -> Result<EvalReport> {
    let mut pooled: Option<EvalReport> = None;
    for r in 0..cfg.classifier.restarts {
        let fit_seed = if r == 0 { seed } else { rng::mix(seed, rng::key(&format!("restart{r}"))) };
        let fit = train_classifier(train, val, &cfg.classifier_config(fit_seed), cfg.augment.cda())
            .map_err(|e| CliError::from_augment("classifier", e))?;
        let report = evaluate(&fit.classifier, test, cfg.classifier.k).map_err(|e| CliError::from_augment("evaluate", e))?;
        pooled = Some(match pooled {
            None => report,
            Some(mut acc) => {
                acc.top1 += report.top1;
                acc.topk += report.topk;
                for (a, b) in acc.per_class.iter_mut().zip(&report.per_class) {
                    a.correct += b.correct;
                    a.n += b.n;
                }
                acc
            }
        });
    }
    let mut report = pooled.expect("restarts is positive");
    let n = cfg.classifier.restarts as f64;
    report.top1 /= n;
    report.topk /= n;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub gan: TrainedGan,
    pub samples: LabeledImageSet,
    pub fid: f64,
    pub is: f64,
    pub eval: EvalReport,
    pub acceptance: Vec<AcceptanceRecord>,
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub seed: u64,
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub baseline: EvalReport,
    pub modes: Vec<ModeResult>,
}

impl Replicate {
    pub fn rows(&self) -> Vec<SummaryRow> {
        let mut rows = vec![SummaryRow {
            mode: "none".into(),
            seed: self.seed,
            top1: self.baseline.top1,
            topk: self.baseline.topk,
            fid: None,
            is: None,
        }];
        rows.extend(self.modes.iter().map(|m| SummaryRow {
            mode: m.gan.mode.name().into(),
            seed: self.seed,
            top1: m.eval.top1,
            topk: m.eval.topk,
            fid: Some(m.fid),
            is: Some(m.is),
        }));
        rows
    }

    pub fn mode(&self, mode: GanMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.gan.mode == mode)
    }
}

/// Inputs shared by every replicate of a pipeline run.
pub struct Shared<'a> {
    pub target: &'a LabeledImageSet,
    pub outer: &'a LabeledImageSet,
    pub test: &'a LabeledImageSet,
    pub reference: &'a LabeledImageSet,
    pub extractor: &'a ReferenceExtractor,
    pub pretrained: &'a TrainOutcome,
}

/// One seed of the comparison: split, the no-augmentation baseline, then
/// train, sample, augment and classify for every GAN mode. `on_mode` sees
/// each finished mode before the next one starts.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    shared: &Shared,
    seed: u64,
    progress: &dyn Fn(&str),
    on_mode: &mut dyn FnMut(&ModeResult) -> Result<()>,
) -> Result<Replicate> {
    let plan = &cfg.augment.plan;
    let (train, val) = split_target(shared.target, plan.n_train_real, plan.n_val, seed)
        .map_err(|e| CliError::from_augment("split", e))?;
    progress(&format!("seed {seed}: baseline classifier"));
    let baseline = classify(cfg, &train, &val, shared.test, seed)?;
    let mut modes = Vec::with_capacity(GanMode::ALL.len());
    for mode in GanMode::ALL {
        progress(&format!("seed {seed}: training {}", mode.name()));
        let extractor: &dyn FeatureExtractor = shared.extractor;
        let gan = match mode {
            GanMode::Tgan => finetune(cfg, shared.pretrained, &train, Some(extractor), seed)?,
            _ => train_mode(cfg, mode, &train, Some(shared.outer), Some(extractor), seed)?,
        };
        let samples = quality_samples(cfg, &gan.model, seed)?;
        let fid = fid(&samples, shared.reference, shared.extractor).map_err(|e| CliError::from_metric("fid", e))?;
        let is = inception_score(&samples, shared.extractor).map_err(|e| CliError::from_metric("is", e))?;
        progress(&format!("seed {seed}: {} fid {fid:.3} is {is:.3}; classifying", mode.name()));
        let aug = augmented_set(cfg, &gan.model, &train, seed)?;
        let eval = classify(cfg, &aug.set, &val, shared.test, seed)?;
        let result = ModeResult {
            gan,
            samples,
            fid,
            is,
            eval,
            acceptance: aug.acceptance,
        };
        on_mode(&result)?;
        modes.push(result);
    }
    Ok(Replicate {
        seed,
        train,
        val,
        baseline,
        modes,
    })
}
