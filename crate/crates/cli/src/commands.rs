//! Subcommand bodies. Each writes its artifacts under the output directory
//! and finishes with a run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use domain_fusion::augment::{improvement_rate, split_target, EvalReport};
use domain_fusion::data::{load_dfds, save_dfds, LabeledImageSet};
use domain_fusion::drs::{
    default_max_attempts, drs_sample_set, keep_training, plain_sample, prepare_state, AcceptanceRecord,
    ACCEPTANCE_CSV_HEADER,
};
use domain_fusion::gan::{format_log, load_gan, save_gan, GanMeta, GanModel, TrainLogRecord};
use domain_fusion::metrics::{FeatureExtractor, MetricReport, ReferenceExtractor, METRIC_CSV_HEADER};

use crate::config::{ExperimentConfig, GanMode};
use crate::experiment::{self, ModeResult, Shared};
use crate::output::{encode_pgm, parse_summary, sample_grid, summary_table, RunManifest, SummaryRow};
use crate::{CliError, Result};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Globals {
    pub fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Argument("missing argument --config".into()))?;
        let parsed = ExperimentConfig::load(path).map_err(|e| CliError::io(path, e))?;
        Ok(parsed?)
    }

    fn config_text(&self) -> String {
        self.config
            .as_ref()
            .and_then(|p| std::fs::read_to_string(p).ok())
            .unwrap_or_default()
    }

    fn manifest(&self, command: &str, seeds: Vec<u64>, config: String, artifacts: Vec<PathBuf>, start: Instant) -> Result<PathBuf> {
        let m = RunManifest {
            command: command.into(),
            seed: self.seed,
            seeds,
            config,
            artifacts,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        m.write(&self.out).map_err(|e| CliError::io(&self.out, e))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn load_set(path: &Path) -> Result<LabeledImageSet> {
    load_dfds(path).map_err(|source| CliError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

fn save_set(set: &LabeledImageSet, path: &Path) -> Result<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dfds(set, path).map_err(|source| CliError::Dataset {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(path.to_path_buf())
}

fn save_model(model: &GanModel<f32>, meta: &GanMeta, path: &Path) -> Result<Vec<PathBuf>> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    save_gan(model, meta, path).map_err(|e| CliError::from_gan("checkpoint", e))?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".meta");
    Ok(vec![path.to_path_buf(), PathBuf::from(sidecar)])
}

fn write_grid(set: &LabeledImageSet, path: &Path) -> Result<PathBuf> {
    let (w, h, px) = sample_grid(set);
    write_file(path, encode_pgm(w, h, &px))
}

fn ranking_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{METRIC_CSV_HEADER}\n");
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

fn acceptance_csv(records: &[AcceptanceRecord]) -> String {
    let mut out = format!("{ACCEPTANCE_CSV_HEADER}\n");
    for r in records {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

fn meta_for(mode: GanMode, cfg: &ExperimentConfig, seed: u64, log: &[TrainLogRecord]) -> GanMeta {
    GanMeta {
        mode: mode.name().into(),
        alpha: if mode == GanMode::Df { cfg.gan.train.alpha } else { 1.0 },
        seed,
        iteration: log.len() as u64,
    }
}

/// Writes the partial training log of a diverged run before passing the
/// error on.
fn keep_partial_log(err: CliError, path: &Path) -> CliError {
    if let CliError::Divergence { log, .. } = &err {
        if let Err(e) = write_file(path, format_log(log)) {
            return e;
        }
    }
    err
}

pub fn synth(g: &Globals) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    let cfg = g.load_config()?;
    create_dir(&g.out)?;
    let sets = experiment::synth_sets(&cfg)?;
    let mut written = Vec::new();
    for set in std::iter::once(&sets.target).chain(&sets.candidates) {
        let path = g.out.join(format!("{}.dfds", set.name()));
        g.log(&format!("writing {}", path.display()));
        written.push(save_set(set, &path)?);
    }
    g.manifest("synth", vec![], cfg.source.clone(), written.clone(), start)?;
    Ok(written)
}

/// Ranks candidates by 𝓜 (or by injected precomputed scores) and returns
/// the chosen path.
pub fn rank_outer(
    g: &Globals,
    target: &Path,
    candidates: &[PathBuf],
    scores: Option<&[f64]>,
    extractor: Option<&Path>,
) -> Result<PathBuf> {
    let start = Instant::now();
    if candidates.is_empty() {
        return Err(CliError::Argument("no candidate datasets given (use --candidate)".into()));
    }
    let target_set = load_set(target)?;
    let mut sets = Vec::with_capacity(candidates.len());
    for p in candidates {
        sets.push(load_set(p)?.with_name(p.display().to_string()));
    }
    let reports = match scores {
        Some(s) => {
            if s.len() != candidates.len() {
                return Err(CliError::Argument(format!(
                    "{} scores given for {} candidates",
                    s.len(),
                    candidates.len()
                )));
            }
            let injected = sets
                .iter()
                .zip(s)
                .map(|(c, &m)| MetricReport {
                    candidate: c.name().to_owned(),
                    fid: f64::NAN,
                    ssim_bar: f64::NAN,
                    metric_m: m,
                    pairs: 0,
                    seed: g.seed,
                })
                .collect();
            domain_fusion::metrics::rank_reports(injected).map_err(|e| CliError::from_metric("rank", e))?
        }
        None => {
            let cfg = g.load_config()?;
            let ex = match extractor {
                Some(p) => ReferenceExtractor::load(p).map_err(|e| CliError::from_metric("extractor", e))?,
                None => {
                    g.log("training reference extractor");
                    let mut all = vec![target_set.clone()];
                    all.extend(sets.iter().cloned());
                    experiment::train_extractor(&cfg, &all, g.seed)?
                }
            };
            experiment::rank(&cfg, &target_set, &sets, &ex, g.seed)?
        }
    };
    create_dir(&g.out)?;
    let csv = write_file(&g.out.join("ranking.csv"), ranking_csv(&reports))?;
    g.manifest("rank-outer", vec![g.seed], g.config_text(), vec![csv], start)?;
    Ok(PathBuf::from(&reports[0].candidate))
}

pub fn train_gan(g: &Globals, target: &Path, outer: Option<&Path>, mode: Option<GanMode>) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg = g.load_config()?;
    let mode = mode.unwrap_or(cfg.gan.mode);
    if mode.needs_outer() && outer.is_none() {
        return Err(CliError::Argument(format!("mode {} requires missing argument --outer", mode.name())));
    }
    let target_set = load_set(target)?;
    let outer_set = outer.map(load_set).transpose()?;
    create_dir(&g.out)?;
    let extractor = if cfg.gan.train.eval_interval > 0 {
        g.log("training reference extractor for IS evaluation");
        let mut all = vec![target_set.clone()];
        all.extend(outer_set.iter().cloned());
        Some(experiment::train_extractor(&cfg, &all, g.seed)?)
    } else {
        None
    };
    let log_path = g.out.join(format!("{}.log.csv", mode.name()));
    g.log(&format!("training {} for {} iterations", mode.name(), cfg.gan.train.iterations));
    let trained = experiment::train_mode(
        &cfg,
        mode,
        &target_set,
        outer_set.as_ref(),
        extractor.as_ref().map(|e| e as &dyn FeatureExtractor),
        g.seed,
    )
    .map_err(|e| keep_partial_log(e, &log_path))?;
    let ckpt = g.out.join(format!("{}.dfck", mode.name()));
    let mut artifacts = save_model(&trained.model, &meta_for(mode, &cfg, g.seed, &trained.log), &ckpt)?;
    artifacts.push(write_file(&log_path, format_log(&trained.log))?);
    if let Some(pre) = &trained.pretrain_log {
        artifacts.push(write_file(&g.out.join("tgan-pretrain.log.csv"), format_log(pre))?);
    }
    g.manifest("train-gan", vec![g.seed], cfg.source.clone(), artifacts, start)?;
    Ok(ckpt)
}

pub fn sample(g: &Globals, checkpoint: &Path, n_per_class: usize, use_drs: bool, target: Option<&Path>) -> Result<PathBuf> {
    let start = Instant::now();
    if n_per_class == 0 {
        return Err(CliError::Argument("--n-per-class must be positive".into()));
    }
    let (model, _) = load_gan(checkpoint).map_err(|e| CliError::from_gan("load checkpoint", e))?;
    let labels: Vec<usize> = (0..model.target_classes).collect();
    let mut config_text = String::new();
    let mut artifacts = Vec::new();
    create_dir(&g.out)?;
    let set = if use_drs {
        let cfg = g.load_config()?;
        config_text = cfg.source.clone();
        let target = target.ok_or_else(|| CliError::Argument("DRS sampling requires missing argument --target".into()))?;
        let real = load_set(target)?;
        g.log("training calibration heads");
        let head = keep_training(&model, &real, &cfg.head_config(g.seed)).map_err(|e| CliError::from_drs("drs-head", e))?;
        let d = &cfg.drs;
        let mut state = prepare_state(&model, &head, d.tau, d.epsilon, d.gamma, d.gamma_percentile, g.seed)
            .map_err(|e| CliError::from_drs("drs-burn-in", e))?;
        let (set, records) = drs_sample_set(
            &model,
            &head,
            &mut state,
            n_per_class,
            default_max_attempts(n_per_class),
            g.seed,
        )
        .map_err(|e| CliError::from_drs("drs-sample", e))?;
        for r in &records {
            g.log(&format!("class {}: accepted {} of {} (rate {:.4})", r.class, r.accepted, r.attempts, r.rate));
        }
        artifacts.push(write_file(&g.out.join("acceptance.csv"), acceptance_csv(&records))?);
        set
    } else {
        plain_sample(&model, &labels, n_per_class, g.seed).map_err(|e| CliError::from_drs("sample", e))?
    };
    let set = set.with_name("samples");
    let path = save_set(&set, &g.out.join("samples.dfds"))?;
    artifacts.push(path.clone());
    artifacts.push(write_grid(&set, &g.out.join("samples.pgm"))?);
    g.manifest("sample", vec![g.seed], config_text, artifacts, start)?;
    Ok(path)
}

fn eval_row(mode: &str, r: &EvalReport) -> String {
    format!("{mode},{},{},{},{}", r.top1, r.topk, r.k, r.n)
}

/// Baseline classifier on the real split and, with a checkpoint, the
/// classifier trained on the augmented set.
pub fn augment_eval(g: &Globals, target: &Path, test: &Path, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg = g.load_config()?;
    let target_set = load_set(target)?;
    let test_set = load_set(test)?;
    let plan = &cfg.augment.plan;
    let (train, val) = split_target(&target_set, plan.n_train_real, plan.n_val, g.seed)
        .map_err(|e| CliError::from_augment("split", e))?;
    create_dir(&g.out)?;
    g.log("training baseline classifier");
    let baseline = experiment::classify(&cfg, &train, &val, &test_set, g.seed)?;
    let mut csv = String::from("mode,top1,topk,k,n\n");
    writeln!(csv, "{}", eval_row("none", &baseline)).unwrap();
    let mut artifacts = Vec::new();
    if let Some(ckpt) = checkpoint {
        let (model, meta) = load_gan(ckpt).map_err(|e| CliError::from_gan("load checkpoint", e))?;
        g.log("building augmented set");
        let aug = experiment::augmented_set(&cfg, &model, &train, g.seed)?;
        let with = experiment::classify(&cfg, &aug.set, &val, &test_set, g.seed)?;
        writeln!(csv, "{}", eval_row(&meta.mode, &with)).unwrap();
        let mut groups: Vec<(String, Vec<usize>)> =
            (0..baseline.per_class.len()).map(|c| (format!("class{c}"), vec![c])).collect();
        groups.push(("all".into(), (0..baseline.per_class.len()).collect()));
        let rates = improvement_rate(&with, &baseline, &groups).map_err(|e| CliError::from_augment("rates", e))?;
        let mut rc = String::from("group,with_da,without_da,rate\n");
        for r in rates {
            let rate = r.rate.map(|v| v.to_string()).unwrap_or_default();
            writeln!(rc, "{},{},{},{rate}", r.group, r.with_da, r.without_da).unwrap();
        }
        artifacts.push(write_file(&g.out.join("improvement.csv"), rc)?);
        if !aug.acceptance.is_empty() {
            artifacts.push(write_file(&g.out.join("acceptance.csv"), acceptance_csv(&aug.acceptance))?);
        }
    }
    let path = write_file(&g.out.join("eval.csv"), csv)?;
    artifacts.push(path.clone());
    g.manifest("augment-eval", vec![g.seed], cfg.source.clone(), artifacts, start)?;
    Ok(path)
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub rows: Vec<SummaryRow>,
    pub summary: String,
    pub ranking: Vec<MetricReport>,
    pub manifest: PathBuf,
}

pub fn pipeline(g: &Globals) -> Result<PipelineOutcome> {
    let cfg = g.load_config()?;
    pipeline_with(g, &cfg)
}

pub fn pipeline_with(g: &Globals, cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let data_dir = g.out.join(&cfg.paths.data_dir);
    let ckpt_dir = g.out.join(&cfg.paths.checkpoint_dir);
    let report_dir = g.out.join(&cfg.paths.report_dir);
    let mut artifacts = Vec::new();

    g.log("synthesising datasets");
    let sets = experiment::synth_sets(cfg)?;
    let test = experiment::test_set(cfg)?;
    let reference = experiment::reference_set(cfg)?;
    for set in std::iter::once(&sets.target).chain(&sets.candidates).chain([&test, &reference]) {
        artifacts.push(save_set(set, &data_dir.join(format!("{}.dfds", set.name())))?);
    }

    g.log("training reference extractor");
    let mut extractor_sets = vec![reference.clone()];
    extractor_sets.extend(sets.candidates.iter().cloned());
    let extractor = experiment::train_extractor(cfg, &extractor_sets, g.seed)?;
    create_dir(&ckpt_dir)?;
    let ex_path = ckpt_dir.join("extractor.dfck");
    extractor
        .save(&ex_path)
        .map_err(|e| CliError::from_metric("extractor", e))?;
    artifacts.push(ex_path);

    g.log("ranking outer candidates");
    let ranking = experiment::rank(cfg, &sets.target, &sets.candidates, &extractor, g.seed)?;
    artifacts.push(write_file(&report_dir.join("ranking.csv"), ranking_csv(&ranking))?);
    let outer = sets
        .candidates
        .iter()
        .find(|c| c.name() == ranking[0].candidate)
        .expect("ranking names a candidate");
    g.log(&format!("selected outer dataset {}", outer.name()));

    g.log("pretraining tgan on the outer dataset");
    let pretrained = experiment::pretrain_outer(cfg, outer, g.seed)?;
    artifacts.push(write_file(&ckpt_dir.join("tgan-pretrain.log.csv"), format_log(&pretrained.log))?);

    let shared = Shared {
        target: &sets.target,
        outer,
        test: &test,
        reference: &reference,
        extractor: &extractor,
        pretrained: &pretrained,
    };
    let seeds: Vec<u64> = (0..cfg.run.replicates).map(|r| g.seed + r).collect();
    let mut rows = Vec::new();
    for &seed in &seeds {
        let seed_ckpt = ckpt_dir.join(format!("seed_{seed}"));
        let seed_report = report_dir.join(format!("seed_{seed}"));
        let mut on_mode = |m: &ModeResult| -> Result<()> {
            let name = m.gan.mode.name();
            let meta = meta_for(m.gan.mode, cfg, seed, &m.gan.log);
            artifacts.extend(save_model(&m.gan.model, &meta, &seed_ckpt.join(format!("{name}.dfck")))?);
            artifacts.push(write_file(&seed_ckpt.join(format!("{name}.log.csv")), format_log(&m.gan.log))?);
            if let Some(pre) = &m.gan.pretrain_log {
                artifacts.push(write_file(&seed_ckpt.join(format!("{name}-pretrain.log.csv")), format_log(pre))?);
            }
            artifacts.push(write_grid(&m.samples, &seed_report.join(format!("{name}_samples.pgm")))?);
            if !m.acceptance.is_empty() {
                artifacts.push(write_file(
                    &seed_report.join(format!("{name}_acceptance.csv")),
                    acceptance_csv(&m.acceptance),
                )?);
            }
            Ok(())
        };
        let rep = experiment::run_replicate(cfg, &shared, seed, &|m| g.log(m), &mut on_mode)?;
        let seed_rows = rep.rows();
        let mut text = format!("{}\n", crate::output::SUMMARY_HEADER);
        for r in &seed_rows {
            writeln!(text, "{}", r.csv_row()).unwrap();
        }
        artifacts.push(write_file(&seed_report.join("results.csv"), text)?);
        rows.extend(seed_rows);
    }

    let summary = summary_table(&rows);
    artifacts.push(write_file(&report_dir.join("summary.csv"), &summary)?);
    let manifest = g.manifest("pipeline", seeds, cfg.source.clone(), artifacts, start)?;
    Ok(PipelineOutcome {
        rows,
        summary,
        ranking,
        manifest,
    })
}

/// Merges seed rows from summary files into a fresh summary with mean and
/// standard-deviation rows; `grid` renders a dataset as a PGM sample grid.
pub fn report(g: &Globals, summaries: &[PathBuf], grid: Option<&Path>) -> Result<Option<String>> {
    let start = Instant::now();
    if summaries.is_empty() && grid.is_none() {
        return Err(CliError::Argument("report needs --summary or --grid".into()));
    }
    create_dir(&g.out)?;
    let mut artifacts = Vec::new();
    if let Some(path) = grid {
        let set = load_set(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "grid".into());
        artifacts.push(write_grid(&set, &g.out.join(format!("{stem}.pgm")))?);
    }
    let mut table = None;
    if !summaries.is_empty() {
        let mut rows = Vec::new();
        for p in summaries {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let parsed = parse_summary(&text).ok_or_else(|| CliError::Failed {
                stage: "report".into(),
                message: format!("{} is not a summary table", p.display()),
            })?;
            rows.extend(parsed);
        }
        let text = summary_table(&rows);
        artifacts.push(write_file(&g.out.join("summary.csv"), &text)?);
        table = Some(text);
    }
    g.manifest("report", vec![], String::new(), artifacts, start)?;
    Ok(table)
}
