//! Subcommands of the `klfuse` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use klfuse::harness::{self, EstimatorKind, ExperimentConfig, SlopeAxis, Status, TrialRecord};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: String,
    pub output_path: String,
    pub records_written: usize,
    pub tool_version: String,
    /// SHA-256 of the config file bytes, hex encoded.
    pub config_sha256: String,
    pub master_seed: u64,
    pub failed_records: usize,
}

/// Manifest path for a record file: `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("config {} is not UTF-8", path.display()))?;
    let mut cfg = ExperimentConfig::from_json_str(text)?;
    cfg.apply_seed_override()?;
    cfg.validate()?;
    Ok((cfg, bytes))
}

pub fn cmd_validate(config_path: &Path) -> Result<String> {
    let (cfg, _) = load_config(config_path)?;
    let points = cfg.points()?;
    Ok(format!(
        "ok: {} sweep point(s) x {} trial(s) x {} estimator(s)",
        points.len(),
        cfg.trials,
        cfg.estimator_kinds().len()
    ))
}

/// Runs the sweep, writes the record CSV and its manifest. Nothing is left
/// behind when a step fails.
pub fn cmd_run(config_path: &Path, out_path: &Path) -> Result<RunManifest> {
    let (cfg, bytes) = load_config(config_path)?;
    let manifest_file = manifest_path(out_path);
    let result = (|| -> Result<RunManifest> {
        let records = harness::run_sweep(&cfg)?;
        let file = fs::File::create(out_path).with_context(|| format!("creating {}", out_path.display()))?;
        let written = harness::write_records(std::io::BufWriter::new(file), &records)?;
        let manifest = RunManifest {
            config_path: config_path.display().to_string(),
            output_path: out_path.display().to_string(),
            records_written: written,
            tool_version: TOOL_VERSION.to_string(),
            config_sha256: hex::encode(Sha256::digest(&bytes)),
            master_seed: cfg.master_seed,
            failed_records: records.iter().filter(|r| matches!(r.status, Status::Failed(_))).count(),
        };
        fs::write(&manifest_file, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", manifest_file.display()))?;
        Ok(manifest)
    })();
    if result.is_err() {
        let _ = fs::remove_file(out_path);
        let _ = fs::remove_file(&manifest_file);
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Slopes,
    LikelihoodTable,
}

impl std::str::FromStr for ReportKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "slopes" => Ok(ReportKind::Slopes),
            "likelihood_table" => Ok(ReportKind::LikelihoodTable),
            other => Err(format!("unknown report kind \"{other}\" (valid: slopes, likelihood_table)")),
        }
    }
}

pub fn cmd_report(records_csv: &Path, kind: ReportKind) -> Result<String> {
    let file = fs::File::open(records_csv).with_context(|| format!("opening {}", records_csv.display()))?;
    let records = harness::read_records(std::io::BufReader::new(file))?;
    if records.is_empty() {
        bail!("no data: {} has no record rows", records_csv.display());
    }
    match kind {
        ReportKind::Slopes => Ok(slope_table(&records)),
        ReportKind::LikelihoodTable => likelihood_table(&records),
    }
}

/// The size axis that varies in the records, if exactly one does.
fn varying_axis(records: &[TrialRecord]) -> Option<SlopeAxis> {
    let distinct = |axis: SlopeAxis| {
        let mut v: Vec<usize> = records.iter().map(|r| axis.value(r)).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    [SlopeAxis::BootstrapSize, SlopeAxis::Machines, SlopeAxis::TotalSize]
        .into_iter()
        .filter(|a| distinct(*a) > 1)
        .max_by_key(|a| distinct(*a))
}

fn axis_name(axis: SlopeAxis) -> &'static str {
    match axis {
        SlopeAxis::BootstrapSize => "n",
        SlopeAxis::Machines => "d",
        SlopeAxis::TotalSize => "N",
    }
}

fn by_estimator(records: &[TrialRecord]) -> BTreeMap<EstimatorKind, Vec<TrialRecord>> {
    let mut map: BTreeMap<EstimatorKind, Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.estimator).or_default().push(r.clone());
    }
    map
}

pub fn slope_table(records: &[TrialRecord]) -> String {
    let axis = varying_axis(records).unwrap_or(SlopeAxis::BootstrapSize);
    let mut out = String::new();
    writeln!(out, "axis: {}", axis_name(axis)).unwrap();
    writeln!(out, "{:<16} {:>10} {:>12} {:>8} {:>7}", "estimator", "slope", "intercept", "r2", "points").unwrap();
    for (kind, recs) in by_estimator(records) {
        match harness::fit_loglog_slope(&recs, axis) {
            Ok(f) => writeln!(
                out,
                "{:<16} {:>10.3} {:>12.4} {:>8.4} {:>7}",
                kind.name(),
                f.slope,
                f.intercept,
                f.r_squared,
                f.points.len()
            ),
            Err(e) => writeln!(out, "{:<16} {:>10} ({e})", kind.name(), "-"),
        }
        .unwrap();
    }
    out
}

/// Mean holdout log-likelihood per (estimator, axis value), minus the mean
/// of the `global` records at the same axis value.
pub fn likelihood_table(records: &[TrialRecord]) -> Result<String> {
    let axis = varying_axis(records).unwrap_or(SlopeAxis::BootstrapSize);
    let mut sums: BTreeMap<(EstimatorKind, usize), (f64, usize)> = BTreeMap::new();
    for r in records {
        if let (Status::Ok, Some(ll)) = (&r.status, r.test_loglik) {
            let e = sums.entry((r.estimator, axis.value(r))).or_insert((0.0, 0));
            e.0 += ll;
            e.1 += 1;
        }
    }
    let mean = |k: &(EstimatorKind, usize)| sums.get(k).map(|(s, c)| s / *c as f64);
    let baseline: BTreeMap<usize, f64> = sums
        .keys()
        .filter(|(e, _)| *e == EstimatorKind::Global)
        .map(|k| (k.1, mean(k).unwrap()))
        .collect();
    if baseline.is_empty() {
        bail!("likelihood table needs ok records of the global estimator as baseline");
    }
    let mut out = String::new();
    writeln!(out, "{:<16} {:>10} {:>14} {:>7}", "estimator", axis_name(axis), "loglik-global", "trials").unwrap();
    for (key, (_, count)) in &sums {
        let cell = match baseline.get(&key.1) {
            Some(b) => format!("{:>14.6}", mean(key).unwrap() - b),
            None => format!("{:>14}", "-"),
        };
        writeln!(out, "{:<16} {:>10} {cell} {:>7}", key.0.name(), key.1, count).unwrap();
    }
    Ok(out)
}
