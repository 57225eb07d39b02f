//! Learning-rate sweeps, the JSONL run log, and per-LR aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{make_probe_batch, EnvId};
use crate::error::{LabError, Result};
use crate::ppo::{run_id, train_run_with, PpoConfig, TrainingSnapshot, CHECKPOINTS};

pub const DEFAULT_LR_LOW: f64 = 3.16e-5;
pub const DEFAULT_LR_HIGH: f64 = 3.16e-2;
pub const DEFAULT_LR_POINTS: usize = 13;

/// One checkpoint of a run, field names as written to the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    /// Fraction of updates done: 0.01, 0.02, ..., 1.00.
    pub f: f64,
    /// Mean return of the last 50 completed episodes; `None` before any episode ended.
    pub ret: Option<f64>,
    pub oui_a: f64,
    pub oui_c: f64,
    pub kl: f64,
    pub clip: f64,
    /// Hamming flip fraction against the previous checkpoint, pooled over both branches.
    pub flip: f64,
    /// Fraction of hidden units with any changed bit against the previous checkpoint.
    pub flip_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub env_id: EnvId,
    pub lr: f64,
    pub seed: u64,
    pub diverged: bool,
    pub final_return: Option<f64>,
    pub checkpoints: Vec<CheckpointMetrics>,
    pub config: PpoConfig,
}

impl RunRecord {
    pub fn new(env_id: EnvId, config: PpoConfig) -> Self {
        Self {
            run_id: run_id(env_id, &config),
            env_id,
            lr: config.lr,
            seed: config.seed,
            diverged: false,
            final_return: None,
            checkpoints: Vec::with_capacity(CHECKPOINTS),
            config,
        }
    }

    pub fn mark_diverged(&mut self) {
        self.diverged = true;
    }

    /// Final return is the return of the last logged checkpoint, also for diverged runs.
    pub fn finish(&mut self) {
        self.final_return = self.checkpoints.last().and_then(|c| c.ret);
    }

    pub fn checkpoint_at(&self, fraction: f64) -> Option<&CheckpointMetrics> {
        self.checkpoints.iter().find(|c| (c.f - fraction).abs() < 1e-9)
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridSpacing {
    /// Geometric grid between the literal endpoints 3.16e-5 and 3.16e-2.
    #[default]
    Printed,
    /// Endpoints read as `10^-4.5` and `10^-1.5`, quarter-decade steps `10^(-4.5 + k/4)`.
    SqrtTen,
}

/// Thirteen log-spaced learning rates across three decades.
pub fn lr_grid(spacing: GridSpacing) -> Vec<f64> {
    let steps = (DEFAULT_LR_POINTS - 1) as f64;
    (0..DEFAULT_LR_POINTS)
        .map(|k| match spacing {
            GridSpacing::Printed => {
                if k == 0 {
                    DEFAULT_LR_LOW
                } else if k + 1 == DEFAULT_LR_POINTS {
                    DEFAULT_LR_HIGH
                } else {
                    DEFAULT_LR_LOW * (DEFAULT_LR_HIGH / DEFAULT_LR_LOW).powf(k as f64 / steps)
                }
            }
            GridSpacing::SqrtTen => 10f64.powf(-4.5 + k as f64 * 0.25),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub env_id: EnvId,
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Applied to every run config after the environment defaults.
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub total_steps: Option<usize>,
    pub rollout_len: Option<usize>,
}

impl SweepSpec {
    pub fn standard(env_id: EnvId) -> Self {
        Self {
            env_id,
            lr_grid: lr_grid(GridSpacing::Printed),
            seeds: (0..10).collect(),
            overrides: ConfigOverrides::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.seeds.is_empty() {
            return Err(LabError::Config("sweep needs at least one LR and one seed".into()));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(LabError::Config("learning rates must be positive".into()));
        }
        if self.lr_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::Config("LR grid must be strictly increasing".into()));
        }
        let unique: HashSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(LabError::Config("seeds must be distinct".into()));
        }
        Ok(())
    }

    /// True when consecutive grid ratios agree to 1e-9 relative.
    pub fn is_log_spaced(&self) -> bool {
        let ratios: Vec<f64> = self.lr_grid.windows(2).map(|w| w[1] / w[0]).collect();
        ratios.iter().all(|r| ((r - ratios[0]) / ratios[0]).abs() <= 1e-9)
    }
}

/// Cartesian product of LRs and seeds, LR-major.
pub fn expand_grid(spec: &SweepSpec) -> Vec<PpoConfig> {
    spec.lr_grid
        .iter()
        .flat_map(|&lr| {
            spec.seeds.iter().map(move |&seed| {
                let mut cfg = PpoConfig::for_env(spec.env_id, lr, seed);
                if let Some(t) = spec.overrides.total_steps {
                    cfg.total_steps = t;
                }
                if let Some(r) = spec.overrides.rollout_len {
                    cfg.rollout_len = r;
                }
                cfg
            })
        })
        .collect()
}

/// Parsed log plus the lines that could not be read (1-based line number, reason).
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
    pub bad_lines: Vec<(usize, String)>,
}

pub fn read_log(path: &Path) -> Result<RunLog> {
    let mut log = RunLog::default();
    if !path.exists() {
        return Ok(log);
    }
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(r) => log.records.push(r),
            Err(e) => log.bad_lines.push((i + 1, e.to_string())),
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub planned: usize,
    pub skipped: usize,
    pub completed: usize,
    pub diverged: usize,
    pub accounting_checks: u64,
}

/// Runs every configuration not already in the log, `parallelism` at a time, appending
/// each record as one line as soon as it completes.
pub fn execute_sweep(spec: &SweepSpec, parallelism: usize, log_path: &Path) -> Result<SweepSummary> {
    spec.validate()?;
    if parallelism == 0 {
        return Err(LabError::Config("parallelism must be at least 1".into()));
    }
    let done: HashSet<String> = read_log(log_path)?.records.into_iter().map(|r| r.run_id).collect();
    let configs = expand_grid(spec);
    let planned = configs.len();
    let pending: Vec<PpoConfig> = configs
        .into_iter()
        .filter(|c| !done.contains(&run_id(spec.env_id, c)))
        .collect();
    let skipped = planned - pending.len();

    if let Some(parent) = log_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let writer = Mutex::new(OpenOptions::new().create(true).append(true).open(log_path)?);
    let probe = make_probe_batch(spec.env_id, spec.env_id.probe_size(), 0)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| LabError::Config(e.to_string()))?;

    let results: Vec<Result<(bool, u64)>> = pool.install(|| {
        pending
            .par_iter()
            .map(|cfg| {
                let outcome = train_run_with(spec.env_id, cfg, &probe, &mut |_: &TrainingSnapshot<'_>| {})?;
                let mut line = outcome.record.to_json_line()?;
                line.push('\n');
                let mut file = writer.lock().expect("log writer poisoned");
                file.write_all(line.as_bytes())?;
                file.flush()?;
                Ok((outcome.record.diverged, outcome.accounting_checks))
            })
            .collect()
    });

    let mut summary = SweepSummary {
        planned,
        skipped,
        completed: 0,
        diverged: 0,
        accounting_checks: 0,
    };
    for r in results {
        let (diverged, checks) = r?;
        summary.completed += 1;
        summary.diverged += usize::from(diverged);
        summary.accounting_checks += checks;
    }
    canonicalize_log(spec, log_path)?;
    Ok(summary)
}

/// Rewrites the log with this sweep's runs in grid order so that the file does not depend
/// on scheduling. Lines from other sweeps keep their place in front. Logs with unreadable
/// lines are left untouched.
fn canonicalize_log(spec: &SweepSpec, log_path: &Path) -> Result<()> {
    let log = read_log(log_path)?;
    if !log.bad_lines.is_empty() {
        return Ok(());
    }
    let rank: BTreeMap<String, usize> = expand_grid(spec)
        .iter()
        .enumerate()
        .map(|(i, c)| (run_id(spec.env_id, c), i))
        .collect();
    let mut records = log.records;
    records.sort_by_key(|r| rank.get(&r.run_id).map_or((0, 0), |&i| (1, i)));
    let mut body = String::new();
    for r in &records {
        body.push_str(&r.to_json_line()?);
        body.push('\n');
    }
    let tmp = log_path.with_extension("jsonl.tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, log_path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Return,
    OuiActor,
    OuiCritic,
    Kl,
    Clip,
    Flip,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Return => "return",
            Metric::OuiActor => "oui_actor",
            Metric::OuiCritic => "oui_critic",
            Metric::Kl => "kl",
            Metric::Clip => "clip",
            Metric::Flip => "flip",
        }
    }

    pub fn read(self, c: &CheckpointMetrics) -> Option<f64> {
        match self {
            Metric::Return => c.ret,
            Metric::OuiActor => Some(c.oui_a),
            Metric::OuiCritic => Some(c.oui_c),
            Metric::Kl => Some(c.kl),
            Metric::Clip => Some(c.clip),
            Metric::Flip => Some(c.flip),
        }
    }
}

/// Median and quartiles of one metric across the seeds of one LR.
#[derive(Debug, Clone, PartialEq)]
pub struct LrAggregate {
    pub lr: f64,
    /// `None` when every run of this LR lacks the metric at the requested fraction.
    pub stats: Option<Quartiles>,
    pub n: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

/// Inclusive linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q25: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q75: quantile_sorted(&v, 0.75),
    })
}

/// Per-LR quartiles of `metric` at the checkpoint `at_fraction`; runs without that
/// checkpoint or value are counted as missing. Rows are sorted by LR.
pub fn aggregate(records: &[RunRecord], metric: Metric, at_fraction: f64) -> Vec<LrAggregate> {
    let mut cells: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let cell = cells.entry(r.lr.to_bits()).or_default();
        match r.checkpoint_at(at_fraction).and_then(|c| metric.read(c)) {
            Some(v) => cell.0.push(v),
            None => cell.1 += 1,
        }
    }
    let mut rows: Vec<LrAggregate> = cells
        .into_iter()
        .map(|(bits, (values, missing))| LrAggregate {
            lr: f64::from_bits(bits),
            stats: quartiles(&values),
            n: values.len(),
            missing,
        })
        .collect();
    rows.sort_by(|a, b| a.lr.total_cmp(&b.lr));
    rows
}

/// Per-LR quartiles of the final return (diverged runs contribute their last logged return).
pub fn aggregate_final_return(records: &[RunRecord]) -> Vec<LrAggregate> {
    let mut cells: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let cell = cells.entry(r.lr.to_bits()).or_default();
        match r.final_return {
            Some(v) => cell.0.push(v),
            None => cell.1 += 1,
        }
    }
    let mut rows: Vec<LrAggregate> = cells
        .into_iter()
        .map(|(bits, (values, missing))| LrAggregate {
            lr: f64::from_bits(bits),
            stats: quartiles(&values),
            n: values.len(),
            missing,
        })
        .collect();
    rows.sort_by(|a, b| a.lr.total_cmp(&b.lr));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(lr: f64, seed: u64, ret10: Option<f64>) -> RunRecord {
        let mut r = RunRecord::new(EnvId::CartPole, PpoConfig::for_env(EnvId::CartPole, lr, seed));
        r.checkpoints.push(CheckpointMetrics {
            f: 0.1,
            ret: ret10,
            oui_a: 0.5,
            oui_c: 0.4,
            kl: 0.01,
            clip: 0.1,
            flip: 0.02,
            flip_u: 0.3,
        });
        r.finish();
        r
    }

    #[test]
    fn default_grid_and_expansion() {
        let spec = SweepSpec::standard(EnvId::CartPole);
        spec.validate().unwrap();
        assert_eq!(spec.lr_grid.len(), 13);
        assert_eq!(spec.lr_grid[0], 3.16e-5);
        assert_eq!(spec.lr_grid[12], 3.16e-2);
        assert!(spec.is_log_spaced());
        let configs = expand_grid(&spec);
        assert_eq!(configs.len(), 130);
        assert_eq!((configs[0].lr, configs[0].seed), (3.16e-5, 0));
        assert_eq!((configs[11].lr, configs[11].seed), (spec.lr_grid[1], 1));
    }

    #[test]
    fn middle_grid_point() {
        let printed = lr_grid(GridSpacing::Printed);
        assert!((printed[6] - 3.16e-5 * 10f64.powf(1.5)).abs() / printed[6] < 1e-12);
        // the literal endpoints sit 0.07% below exact powers of √10
        assert!((printed[6] - 1e-3).abs() / 1e-3 < 1e-3);
        let exact = lr_grid(GridSpacing::SqrtTen);
        assert!((exact[6] - 1e-3).abs() / 1e-3 < 1e-6);
        assert!((exact[0] - 3.16e-5).abs() / 3.16e-5 < 1e-3);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SweepSpec::standard(EnvId::CartPole);
        spec.lr_grid.swap(0, 1);
        assert!(spec.validate().is_err());
        let mut spec = SweepSpec::standard(EnvId::CartPole);
        spec.seeds = vec![1, 1];
        assert!(spec.validate().is_err());
        spec.seeds.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn quartile_rule() {
        let q = quartiles(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((q.q25, q.median, q.q75), (2.0, 3.0, 4.0));
        let q = quartiles(&[7.0]).unwrap();
        assert_eq!((q.q25, q.median, q.q75), (7.0, 7.0, 7.0));
        let q = quartiles(&[1.0, 2.0]).unwrap();
        assert_eq!(q.median, 1.5);
        assert!(quartiles(&[]).is_none());
    }

    #[test]
    fn aggregate_cells() {
        let mut records: Vec<RunRecord> = (1..=5).map(|s| record(1e-3, s, Some(s as f64))).collect();
        records.push(record(1e-2, 0, None));
        records.push(record(1e-2, 1, None));
        let rows = aggregate(&records, Metric::Return, 0.1);
        assert_eq!(rows.len(), 2);
        let q = rows[0].stats.unwrap();
        assert_eq!((q.q25, q.median, q.q75), (2.0, 3.0, 4.0));
        assert_eq!(rows[1].stats, None);
        assert_eq!(rows[1].missing, 2);

        // order of runs does not matter
        records.reverse();
        assert_eq!(aggregate(&records, Metric::Return, 0.1), rows);
        // no checkpoint at that fraction
        assert!(aggregate(&records, Metric::OuiActor, 0.5)
            .iter()
            .all(|r| r.stats.is_none()));
    }

    #[test]
    fn record_json_schema() {
        let r = record(1e-3, 2, None);
        let v: serde_json::Value = serde_json::from_str(&r.to_json_line().unwrap()).unwrap();
        for key in [
            "run_id",
            "env_id",
            "lr",
            "seed",
            "diverged",
            "final_return",
            "checkpoints",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["final_return"].is_null());
        assert_eq!(v["env_id"], "cartpole");
        let c = &v["checkpoints"][0];
        for key in ["f", "ret", "oui_a", "oui_c", "kl", "clip", "flip"] {
            assert!(c.get(key).is_some(), "missing checkpoint field {key}");
        }
        assert!(c["ret"].is_null());
        let back: RunRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn log_reader_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let good = record(1e-3, 0, Some(1.0)).to_json_line().unwrap();
        fs::write(&path, format!("{good}\n{{not json\n\n{good}\n")).unwrap();
        let log = read_log(&path).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.bad_lines.len(), 1);
        assert_eq!(log.bad_lines[0].0, 2);
        assert!(read_log(&dir.path().join("absent.jsonl")).unwrap().records.is_empty());
    }
}
