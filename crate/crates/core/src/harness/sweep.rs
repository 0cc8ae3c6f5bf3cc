//! Sweeps over one scenario parameter, aggregated to CSV.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::coop::{correlation_study, median};
use crate::error::{config_err, Result};
use crate::harness::config::{Algorithm, Detection, ExperimentConfig};
use crate::harness::trial::{run_trial, trial_seed, PointContext, TrialRecord};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 17] = [
    "schema_version",
    "sweep_axis",
    "sweep_value",
    "algorithm",
    "detection",
    "quant_bits",
    "trials",
    "nmse_db_mean",
    "nmse_db_median",
    "aep_coop_mean",
    "aep_coop_median",
    "aep_noncoop_mean",
    "aep_noncoop_median",
    "ber_mean",
    "ber_median",
    "ber_trials",
    "backhaul_bits_per_frame",
];

/// Mean and median over the trials where the metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub count: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Self::default();
        }
        Self { mean: Some(v.iter().sum::<f64>() / v.len() as f64), median: Some(median(&v)), count: v.len() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub algorithm: Algorithm,
    pub detection: Detection,
    pub quant_bits: Option<u32>,
    pub trials: usize,
    pub nmse_db: Stat,
    pub aep_coop: Stat,
    pub aep_noncoop: Stat,
    pub ber: Stat,
    pub backhaul_bits: usize,
    /// Per-trial values, kept for callers that need more than mean/median.
    pub records: Vec<TrialRecord>,
}

impl SummaryRow {
    fn from_records(sweep_value: f64, records: Vec<TrialRecord>) -> Self {
        let first = &records[0];
        Self {
            sweep_value,
            algorithm: first.algorithm,
            detection: first.detection,
            quant_bits: first.quant_bits,
            trials: records.len(),
            nmse_db: Stat::of(records.iter().map(|r| r.nmse_db)),
            aep_coop: Stat::of(records.iter().map(|r| r.aep_coop)),
            aep_noncoop: Stat::of(records.iter().map(|r| r.aep_noncoop)),
            ber: Stat::of(records.iter().map(|r| r.ber)),
            backhaul_bits: records.iter().map(|r| r.backhaul_bits).max().unwrap_or(0),
            records,
        }
    }
}

/// Trials of one sweep point, grouped per (algorithm, detection, bits).
pub fn run_point(cfg: &ExperimentConfig, value: f64) -> Result<Vec<SummaryRow>> {
    let scenario = cfg.scenario.with(cfg.sweep_axis, value)?;
    let ctx = PointContext::new(scenario, cfg.seed)?;
    let bits = cfg.bits_at(value);
    let per_trial: Vec<Vec<TrialRecord>> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_trial(&ctx, cfg, &bits, trial_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let width = per_trial[0].len();
    let mut groups: Vec<Vec<TrialRecord>> = vec![Vec::with_capacity(cfg.trials); width];
    for trial in per_trial {
        for (g, rec) in groups.iter_mut().zip(trial) {
            g.push(rec);
        }
    }
    Ok(groups.into_iter().map(|g| SummaryRow::from_records(value, g)).collect())
}

pub fn run_sweep(cfg: &ExperimentConfig, progress: bool) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &value in &cfg.sweep_values {
        let start = Instant::now();
        rows.extend(run_point(cfg, value)?);
        if progress {
            eprintln!(
                "{} = {value}: {} trials in {:.1} s",
                cfg.sweep_axis.name(),
                cfg.trials,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(cfg: &ExperimentConfig, rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            cfg.sweep_axis.name().to_string(),
            r.sweep_value.to_string(),
            r.algorithm.name().to_string(),
            r.detection.name().to_string(),
            r.quant_bits.map(|b| b.to_string()).unwrap_or_default(),
            r.trials.to_string(),
            opt(r.nmse_db.mean),
            opt(r.nmse_db.median),
            opt(r.aep_coop.mean),
            opt(r.aep_coop.median),
            opt(r.aep_noncoop.mean),
            opt(r.aep_noncoop.median),
            opt(r.ber.mean),
            opt(r.ber.median),
            r.ber.count.to_string(),
            r.backhaul_bits.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Output path for a run: `--out` directory overrides the configured directory.
pub fn output_path(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> PathBuf {
    match out_dir {
        Some(dir) => dir.join(cfg.output.file_name().unwrap_or_else(|| "results.csv".as_ref())),
        None => cfg.output.clone(),
    }
}

/// Run the sweep, write the CSV and a `.meta.toml` sidecar with the
/// effective configuration and wall time.
pub fn run_to_file(cfg: &ExperimentConfig, path: &Path, progress: bool) -> Result<Vec<SummaryRow>> {
    let start = Instant::now();
    let rows = run_sweep(cfg, progress)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(cfg, &rows, std::fs::File::create(path)?)?;
    let meta = format!(
        "schema_version = {SCHEMA_VERSION}\nwall_time_s = {:.3}\ntrials_per_point = {}\n\n{}",
        start.elapsed().as_secs_f64(),
        cfg.trials,
        cfg.to_toml()
    );
    std::fs::write(path.with_extension("meta.toml"), meta)?;
    Ok(rows)
}

/// Sorted correlation samples per satellite count, as CSV
/// `q,index,correlation`.
pub fn correlation_csv<W: Write>(
    qs: &[usize],
    trials: usize,
    nr: usize,
    delta_theta: f64,
    seed: u64,
    out: W,
) -> Result<Vec<(usize, f64)>> {
    if trials == 0 || qs.is_empty() || qs.contains(&0) {
        return Err(config_err("correlation study needs trials >= 1 and satellite counts >= 1"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["q", "index", "correlation"])?;
    let mut medians = Vec::with_capacity(qs.len());
    for &q in qs {
        let mut c = correlation_study(q, nr, delta_theta, trials, seed);
        c.sort_by(f64::total_cmp);
        medians.push((q, median(&c)));
        for (i, v) in c.iter().enumerate() {
            w.write_record([q.to_string(), i.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(medians)
}
