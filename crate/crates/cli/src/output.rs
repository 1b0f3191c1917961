//! Sample grids, summary tables and run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use domain_fusion::data::LabeledImageSet;
use domain_fusion::metrics::LUMA;

pub const GRID_COLUMNS: usize = 8;

/// One row per class holding its first eight images; empty cells stay
/// black. Colour images are reduced to luma.
pub fn sample_grid(set: &LabeledImageSet) -> (usize, usize, Vec<u8>) {
    let (h, w, c) = (set.height(), set.width(), set.channels());
    let rows = set.num_classes();
    let (gw, gh) = (GRID_COLUMNS * w, rows * h);
    let mut grid = vec![0u8; gw * gh];
    for class in 0..rows {
        for (col, &i) in set.class_indices(class).iter().take(GRID_COLUMNS).enumerate() {
            let img = set.image(i);
            for y in 0..h {
                for x in 0..w {
                    let v = if c == 1 {
                        img[y * w + x]
                    } else {
                        let l: f64 = (0..3).map(|ch| LUMA[ch] * img[(ch * h + y) * w + x] as f64).sum();
                        l.round().clamp(0.0, 255.0) as u8
                    };
                    grid[(class * h + y) * gw + col * w + x] = v;
                }
            }
        }
    }
    (gw, gh, grid)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel buffer does not match the PGM size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM header, returning width, height, maxval and the
/// offset of the raster.
pub fn parse_pgm_header(bytes: &[u8]) -> Option<(usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?.to_owned());
    }
    if fields[0] != "P5" || i >= bytes.len() {
        return None;
    }
    let width = fields[1].parse().ok()?;
    let height = fields[2].parse().ok()?;
    let maxval = fields[3].parse().ok()?;
    Some((width, height, maxval, i + 1))
}

/// One replicate's result for one mode; `fid` and `is` are absent for the
/// no-augmentation baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: String,
    pub seed: u64,
    pub top1: f64,
    pub topk: f64,
    pub fid: Option<f64>,
    pub is: Option<f64>,
}

pub const SUMMARY_HEADER: &str = "mode,seed,top1,topk,fid,is";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mode,
            self.seed,
            self.top1,
            self.topk,
            cell(self.fid),
            cell(self.is)
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let opt = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(Self {
            mode: f[0].to_owned(),
            seed: f[1].parse().ok()?,
            top1: f[2].parse().ok()?,
            topk: f[3].parse().ok()?,
            fid: opt(f[4])?,
            is: opt(f[5])?,
        })
    }
}

/// Arithmetic mean and sample standard deviation (`n − 1`); the deviation
/// is absent below two values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// Seed rows sorted by mode order of first appearance and then seed,
/// followed by a `mean` and a `std` row per mode.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut modes: Vec<&str> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    let mut out = String::new();
    writeln!(out, "{SUMMARY_HEADER}").unwrap();
    for mode in &modes {
        let mut group: Vec<&SummaryRow> = rows.iter().filter(|r| r.mode == *mode).collect();
        group.sort_by_key(|r| r.seed);
        for r in &group {
            writeln!(out, "{}", r.csv_row()).unwrap();
        }
    }
    for mode in &modes {
        let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.mode == *mode).collect();
        let stats = |f: &dyn Fn(&SummaryRow) -> Option<f64>| {
            let v: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
            mean_std(&v)
        };
        let cols = [
            stats(&|r| Some(r.top1)),
            stats(&|r| Some(r.topk)),
            stats(&|r| r.fid),
            stats(&|r| r.is),
        ];
        let line = |label: &str, pick: fn(&(Option<f64>, Option<f64>)) -> Option<f64>| {
            let cells: Vec<String> = cols.iter().map(|c| cell(pick(c))).collect();
            format!("{mode},{label},{}", cells.join(","))
        };
        writeln!(out, "{}", line("mean", |c| c.0)).unwrap();
        writeln!(out, "{}", line("std", |c| c.1)).unwrap();
    }
    out
}

/// Reads seed rows from a summary file, skipping the header and the
/// aggregate rows.
pub fn parse_summary(text: &str) -> Option<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next()? != SUMMARY_HEADER {
        return None;
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let seed = line.split(',').nth(1)?;
        if seed == "mean" || seed == "std" {
            continue;
        }
        rows.push(SummaryRow::parse(line)?);
    }
    Some(rows)
}

pub fn fnv_hex(parts: &[&[u8]]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in part.iter() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Record of a finished run. The header lines are comments, so the file
/// doubles as the configuration that reproduces the run.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub config: String,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl RunManifest {
    pub fn run_id(&self) -> String {
        fnv_hex(&[self.command.as_bytes(), &self.seed.to_le_bytes(), self.config.as_bytes()])
    }

    pub fn render(&self, root: &Path) -> String {
        let mut out = String::new();
        writeln!(out, "# dfuse run manifest").unwrap();
        writeln!(out, "# run_id = {}", self.run_id()).unwrap();
        writeln!(out, "# command = {}", self.command).unwrap();
        writeln!(out, "# seed = {}", self.seed).unwrap();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "# replicate_seeds = {}", seeds.join(",")).unwrap();
        writeln!(out, "# wall_clock_secs = {:.3}", self.wall_clock_secs).unwrap();
        for a in &self.artifacts {
            let shown = a.strip_prefix(root).unwrap_or(a);
            writeln!(out, "# artifact = {}", shown.display()).unwrap();
        }
        writeln!(out, "# rerun: dfuse {} --config <this file> --seed {}", self.command, self.seed).unwrap();
        if !self.config.is_empty() {
            out.push_str(&self.config);
            if !self.config.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }

    /// Writes `manifest.txt` under `root` once every artifact exists.
    pub fn write(&self, root: &Path) -> std::io::Result<PathBuf> {
        if let Some(missing) = self.artifacts.iter().find(|a| !a.exists()) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("artifact {} is missing", missing.display()),
            ));
        }
        let path = root.join(MANIFEST_NAME);
        std::fs::write(&path, self.render(root))?;
        Ok(path)
    }
}
