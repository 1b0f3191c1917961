mod common;

use common::*;
use dfuse::output::{parse_pgm_header, parse_summary, MANIFEST_NAME};
use domain_fusion::data::{load_dfds, synth_domain, DomainKind, SynthDomainSpec};
use domain_fusion::gan::{save_gan, GanArch, GanMeta, GanModel};

#[test]
fn synth_writes_the_triad_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "default.conf", DEFAULT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dfuse(&["synth", "--config", p(&cfg), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files: Vec<_> = tree(&a).into_iter().filter(|(n, _)| n.extension().is_some_and(|e| e == "dfds")).collect();
    let names: Vec<String> = files.iter().map(|(n, _)| n.display().to_string()).collect();
    assert_eq!(names, ["noise_2000.dfds", "outline_2000.dfds", "solid_500.dfds"]);
    let other: Vec<_> = tree(&b).into_iter().filter(|(n, _)| n.extension().is_some_and(|e| e == "dfds")).collect();
    assert_eq!(files, other);
    let solid = load_dfds(a.join("solid_500.dfds")).unwrap();
    assert_eq!((solid.len(), solid.num_classes()), (500, 4));
}

#[test]
fn missing_key_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = SMOKE.lines().filter(|l| !l.starts_with("pair_budget")).map(|l| format!("{l}\n")).collect();
    let cfg = write_config(dir.path(), "bad.conf", &text);
    let o = dfuse(&["synth", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("metrics.pair_budget"), "{}", stderr(&o));
    assert!(!dir.path().join("o").join(MANIFEST_NAME).exists());
}

#[test]
fn unknown_key_and_missing_config_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.conf", &SMOKE.replace("[drs]\n", "[drs]\nturbo = 1\n"));
    let o = dfuse(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("drs.turbo"));
    let o = dfuse(&["synth", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let o = dfuse(&["synth", "--config", p(&dir.path().join("absent.conf")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

fn synth_smoke(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = write_config(dir, "smoke.conf", SMOKE);
    let o = dfuse(&["synth", "--config", p(&cfg), "--out", p(&dir.join("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn rank_outer_selects_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_smoke(dir.path());
    let data = dir.path().join("data");
    let (target, outline, noise) = (data.join("solid_80.dfds"), data.join("outline_160.dfds"), data.join("noise_160.dfds"));
    let out = dir.path().join("rank");

    let o = dfuse(&["rank-outer", "--config", p(&cfg), "--out", p(&out), "--target", p(&target), "--candidate", p(&noise)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), p(&noise));
    assert!(std::fs::read_to_string(out.join("ranking.csv")).unwrap().starts_with("candidate,fid,ssim_bar,metric_m"));

    let o = dfuse(&[
        "rank-outer", "--out", p(&out), "--target", p(&target),
        "--candidate", p(&outline), "--candidate", p(&noise), "--scores", "2.6,1.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), p(&noise));

    let o = dfuse(&["rank-outer", "--config", p(&cfg), "--out", p(&out), "--target", p(&target)]);
    assert_eq!(o.status.code(), Some(3));

    let junk = write_config(dir.path(), "junk.dfds", "not a dataset");
    let o = dfuse(&["rank-outer", "--config", p(&cfg), "--out", p(&out), "--target", p(&target), "--candidate", p(&junk)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_gan_contracts() {
    let dir = tempfile::tempdir().unwrap();
    synth_smoke(dir.path());
    let data = dir.path().join("data");
    let target = data.join("solid_80.dfds");
    let cfg = write_config(dir.path(), "ten.conf", &set(SMOKE, "gan", "iterations", "10"));

    let o = dfuse(&["train-gan", "--config", p(&cfg), "--out", p(&dir.path().join("x")), "--target", p(&target), "--mode", "df"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--outer"), "{}", stderr(&o));

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dfuse(&["train-gan", "--config", p(&cfg), "--out", p(out), "--target", p(&target), "--mode", "cgan"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert!(a.join("cgan.dfck").exists());
    let log = std::fs::read_to_string(a.join("cgan.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 10);
    assert_eq!(std::fs::read(a.join("cgan.dfck")).unwrap(), std::fs::read(b.join("cgan.dfck")).unwrap());
    assert!(a.join(MANIFEST_NAME).exists());

    let o = dfuse(&[
        "train-gan", "--config", p(&cfg), "--out", p(&dir.path().join("t")), "--target", p(&target),
        "--outer", p(&data.join("outline_160.dfds")), "--mode", "tgan",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("t/tgan-pretrain.log.csv").exists());
}

#[test]
fn divergence_exits_4_keeps_log_and_skips_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth_smoke(dir.path());
    let text = set(&set(SMOKE, "gan", "lr_d", "1e38"), "gan", "lr_g", "1e38");
    let cfg = write_config(dir.path(), "hot.conf", &text);
    let out = dir.path().join("hot");
    let target = dir.path().join("data/solid_80.dfds");
    let o = dfuse(&["train-gan", "--config", p(&cfg), "--out", p(&out), "--target", p(&target), "--mode", "cgan"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(out.join("cgan.log.csv").exists());
    assert!(!out.join(MANIFEST_NAME).exists());
}

fn constant_logit_checkpoint(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let set = synth_domain(&SynthDomainSpec::new(DomainKind::SolidShapes, 8), 10, 3).unwrap();
    let target = dir.join("real.dfds");
    domain_fusion::data::save_dfds(&set, &target).unwrap();
    let arch = GanArch { z_dim: 4, embed_dim: 4, g_hidden: vec![8], d_hidden: vec![8] };
    let mut model = GanModel::for_set(&arch, &set, false, 1).unwrap();
    model.phi = model.phi.zeros_like();
    let ckpt = dir.join("flat.dfck");
    let meta = GanMeta { mode: "cgan".into(), alpha: 1.0, seed: 1, iteration: 0 };
    save_gan(&model, &meta, &ckpt).unwrap();
    (ckpt, target)
}

#[test]
fn sample_writes_dataset_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, target) = constant_logit_checkpoint(dir.path());
    let plain = dir.path().join("plain");
    let o = dfuse(&["sample", "--checkpoint", p(&ckpt), "--n-per-class", "2", "--out", p(&plain)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = load_dfds(plain.join("samples.dfds")).unwrap();
    assert_eq!(s.len(), 8);
    assert_eq!(s.class_histogram(), vec![2, 2, 2, 2]);
    let pgm = std::fs::read(plain.join("samples.pgm")).unwrap();
    let (w, h, maxval, offset) = parse_pgm_header(&pgm).unwrap();
    assert!(pgm.starts_with(b"P5"));
    assert_eq!((w, h, maxval), (8 * 8, 4 * 8, 255));
    assert_eq!(pgm.len() - offset, w * h);

    let cfg = write_config(dir.path(), "smoke.conf", SMOKE);
    let filtered = dir.path().join("drs");
    let o = dfuse(&[
        "sample", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--n-per-class", "2", "--drs",
        "--target", p(&target), "--out", p(&filtered),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_dfds(filtered.join("samples.dfds")).unwrap().len(), s.len());
    assert!(filtered.join("acceptance.csv").exists());
}

#[test]
fn drs_starvation_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, target) = constant_logit_checkpoint(dir.path());
    let cfg = write_config(dir.path(), "starve.conf", &set(SMOKE, "drs", "gamma", "1000"));
    let out = dir.path().join("s");
    let o = dfuse(&[
        "sample", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--n-per-class", "2", "--drs",
        "--target", p(&target), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("rate"));
    let o = dfuse(&["sample", "--checkpoint", p(&ckpt), "--n-per-class", "2", "--drs", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn augment_eval_reports_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_smoke(dir.path());
    let data = dir.path().join("data");
    let target = data.join("solid_80.dfds");
    let gan_out = dir.path().join("gan");
    let o = dfuse(&["train-gan", "--config", p(&cfg), "--out", p(&gan_out), "--target", p(&target), "--mode", "cgan"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dfuse(&[
        "augment-eval", "--config", p(&cfg), "--out", p(&dir.path().join("eval")), "--target", p(&target),
        "--test", p(&data.join("outline_160.dfds")), "--checkpoint", p(&gan_out.join("cgan.dfck")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("mode,top1,topk,k,n\nnone,"));
    assert!(text.contains("\ncgan,"));
    assert!(dir.path().join("eval/improvement.csv").exists());
}

#[test]
fn pipeline_smoke_and_reverse_side() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.conf", SMOKE);
    let out = dir.path().join("run");
    let o = dfuse(&["pipeline", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("reports/summary.csv")).unwrap();
    assert_eq!(stdout(&o), summary);
    let rows = parse_summary(&summary).unwrap();
    for mode in ["none", "cgan", "tgan", "df"] {
        let group: Vec<_> = rows.iter().filter(|r| r.mode == mode).collect();
        assert_eq!(group.len(), 2, "{mode}");
        let mean = group.iter().map(|r| r.top1).sum::<f64>() / 2.0;
        let line = summary.lines().find(|l| l.starts_with(&format!("{mode},mean,"))).unwrap();
        let reported: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((reported - mean).abs() < 1e-9);
    }
    assert!(out.join(MANIFEST_NAME).exists());

    let reverse = set(&set(SMOKE, "data", "target", "outline"), "data", "candidates", "solid");
    let cfg = write_config(dir.path(), "reverse.conf", &reverse);
    let out = dir.path().join("reverse");
    let o = dfuse(&["pipeline", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("reports/summary.csv")).unwrap();
    assert_eq!(text.lines().next(), summary.lines().next());
    assert_eq!(text.lines().count(), summary.lines().count());
}

#[test]
fn report_merges_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.csv", "mode,seed,top1,topk,fid,is\ndf,0,0.5,1,2,3\n");
    let b = write_config(dir.path(), "b.csv", "mode,seed,top1,topk,fid,is\ndf,1,0.7,1,4,3\ndf,mean,9,9,9,9\n");
    let out = dir.path().join("r");
    let o = dfuse(&["report", "--summary", p(&a), "--summary", p(&b), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mean = text.lines().find(|l| l.starts_with("df,mean,")).unwrap();
    let cells: Vec<f64> = mean.split(',').skip(2).map(|c| c.parse().unwrap()).collect();
    assert!((cells[0] - 0.6).abs() < 1e-12 && cells[2] == 3.0);
    let o = dfuse(&["report", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
}
