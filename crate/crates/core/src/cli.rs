//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::envs::{make_probe_batch, EnvId, ProbeBatch};
use crate::error::{LabError, Result};
use crate::ppo::{train_run_with, PpoConfig, TrainingSnapshot};
use crate::screening::{
    extract_features, label_success, screen, RecallBinTable, DEFAULT_MIN_SUPPORT, DEFAULT_TOP_FRACTION,
};
use crate::sweep::{
    aggregate, aggregate_final_return, execute_sweep, lr_grid, read_log, ConfigOverrides, GridSpacing, LrAggregate,
    Metric, RunRecord, SweepSpec,
};
use crate::theory::{
    decade_below, estimate_flip_rate, guard_step_size, linear_uniform_experiment, oui_sensitivity_report,
    ppo_step_first_order_error, train_with_snapshots, DirectionSampler, FlipExperiment, FLIP_GUARD,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OUI_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "oui-lab",
    version,
    about = "PPO learning-rate sweeps with activation-balance diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the fixed probe batch and print its SHA-256.
    Probe(ProbeArgs),
    /// Train a single run and append its record to a JSONL log.
    Train(TrainArgs),
    /// Run a learning-rate by seed grid, resuming from an existing log.
    Sweep(SweepArgs),
    /// Flip-rate and OUI drift experiments on a trained CartPole agent.
    Theory(TheoryArgs),
    /// Recall-matched screening tables from a sweep log.
    Screen(ScreenArgs),
    /// Per-LR medians and quartiles at 10% and at the end of training.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub env: EnvId,
    /// Defaults to the environment's standard probe size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing file with different content.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunOverrides {
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub rollout_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub env: EnvId,
    #[arg(long)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe file; generated from seed 0 when omitted.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub env: EnvId,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Comma-separated learning rates; the 13-point grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    /// Comma-separated seeds; 0..9 when omitted.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Use the quarter-decade grid 10^(-4.5 + k/4) instead of the literal endpoints.
    #[arg(long)]
    pub sqrt_ten_grid: bool,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte Carlo directions per step size.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 20)]
    pub snapshots: usize,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    pub min_support: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_FRACTION)]
    pub top_fraction: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Probe(a) => cmd_probe(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Theory(a) => cmd_theory(&a),
        Command::Screen(a) => cmd_screen(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Worker count after applying the thread cap from the environment.
pub fn effective_parallelism(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok());
    match cap {
        Some(c) if c > 0 => requested.min(c),
        _ => requested,
    }
}

fn apply_overrides(mut config: PpoConfig, o: &RunOverrides) -> PpoConfig {
    if let Some(t) = o.total_steps {
        config.total_steps = t;
    }
    if let Some(r) = o.rollout_len {
        config.rollout_len = r;
    }
    config
}

fn cmd_probe(a: &ProbeArgs) -> Result<i32> {
    let probe = make_probe_batch(a.env, a.size.unwrap_or(a.env.probe_size()), a.seed)?;
    let hash = probe.content_hash();
    if a.out.exists() && !a.force {
        let existing = ProbeBatch::load(&a.out, a.env).map(|p| p.content_hash()).ok();
        if existing.as_deref() != Some(hash.as_str()) {
            return Err(LabError::Config(format!(
                "{} exists with different content; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    probe.save(&a.out)?;
    println!("{hash}");
    Ok(EXIT_OK)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let config = apply_overrides(PpoConfig::for_env(a.env, a.lr, a.seed), &a.overrides);
    let probe = match &a.probe {
        Some(p) => ProbeBatch::load(p, a.env)?,
        None => make_probe_batch(a.env, a.env.probe_size(), 0)?,
    };
    let outcome = train_run_with(a.env, &config, &probe, &mut |_: &TrainingSnapshot<'_>| {})?;
    let record = outcome.record;
    append_line(&a.out, &record.to_json_line()?)?;
    println!(
        "{} lr={} seed={} final_return={} checkpoints={}",
        record.run_id,
        record.lr,
        record.seed,
        record.final_return.map_or("none".into(), |v| format!("{v:.2}")),
        record.checkpoints.len()
    );
    if record.diverged {
        eprintln!("run diverged");
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let spacing = if a.sqrt_ten_grid {
        GridSpacing::SqrtTen
    } else {
        GridSpacing::Printed
    };
    let mut spec = SweepSpec::standard(a.env);
    spec.lr_grid = a.lrs.clone().unwrap_or_else(|| lr_grid(spacing));
    if let Some(s) = &a.seeds {
        spec.seeds = s.clone();
    }
    spec.overrides = ConfigOverrides {
        total_steps: a.overrides.total_steps,
        rollout_len: a.overrides.rollout_len,
    };
    let summary = execute_sweep(&spec, effective_parallelism(a.parallelism), &a.out)?;
    println!(
        "planned={} skipped={} completed={} diverged={} accounting_checks={}",
        summary.planned, summary.skipped, summary.completed, summary.diverged, summary.accounting_checks
    );
    Ok(EXIT_OK)
}

fn cmd_theory(a: &TheoryArgs) -> Result<i32> {
    if a.points < 3 {
        return Err(LabError::Config("--points must be at least 3".into()));
    }
    let threads = effective_parallelism(std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LabError::Config(e.to_string()))?;
    pool.install(|| theory_bench(a))
}

fn theory_bench(a: &TheoryArgs) -> Result<i32> {
    fs::create_dir_all(&a.out)?;
    let env = EnvId::CartPole;

    // single unit with X ~ U(-1, 1) and |U| = 1: guard at eta = 0.4
    let synthetic = linear_uniform_experiment(&decade_below(2.0 * FLIP_GUARD, a.points), 1.0, 1024, a.trials, a.seed)?;
    fs::write(a.out.join("linear_uniform.csv"), synthetic.to_csv())?;
    fs::write(
        a.out.join("linear_uniform_fit.json"),
        synthetic.fit_summary_json() + "\n",
    )?;
    println!("linear-uniform: {}", synthetic.fit_summary_json());

    let config = apply_overrides(PpoConfig::for_env(env, a.lr, a.seed), &a.overrides);
    let probe = make_probe_batch(env, env.probe_size(), 0)?;
    let (outcome, snapshots) = train_with_snapshots(env, &config, &probe, a.snapshots)?;
    let actor = &outcome.final_learner.actor;

    let guard = guard_step_size(actor, &probe, a.trials.min(50), a.seed)?;
    let curve = estimate_flip_rate(&FlipExperiment {
        net: actor,
        probe: &probe,
        sampler: DirectionSampler::Isotropic,
        eta_grid: decade_below(guard, a.points),
        trials: a.trials,
        seed: a.seed,
    })?;
    fs::write(a.out.join("flip_rate.csv"), curve.to_csv())?;
    fs::write(a.out.join("flip_rate_fit.json"), curve.fit_summary_json() + "\n")?;
    println!("trained actor (guard eta {guard:.3e}): {}", curve.fit_summary_json());

    let mut drift = String::from("update,eta,first_order_error\n");
    for s in &snapshots {
        for eta in [1e-4, 5e-5, 2.5e-5] {
            let err = ppo_step_first_order_error(&s.learner, &s.batch, &probe, &config, eta)?;
            drift.push_str(&format!("{},{},{}\n", s.update, eta, err));
        }
    }
    fs::write(a.out.join("drift.csv"), drift)?;

    let rows = oui_sensitivity_report(&outcome.record)?;
    let mut sens = String::from("f,flip,delta_oui_actor,delta_oui_critic\n");
    for r in rows {
        sens.push_str(&format!(
            "{},{},{},{}\n",
            r.f, r.flip, r.delta_oui_actor, r.delta_oui_critic
        ));
    }
    fs::write(a.out.join("sensitivity.csv"), sens)?;
    println!("wrote {}", a.out.display());
    Ok(EXIT_OK)
}

fn load_log(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Err(LabError::Config(format!("log {} does not exist", path.display())));
    }
    let log = read_log(path)?;
    for (line, msg) in &log.bad_lines {
        eprintln!("warning: skipping {}:{line}: {msg}", path.display());
    }
    if log.records.is_empty() {
        return Err(LabError::Config(format!("log {} holds no runs", path.display())));
    }
    Ok(log.records)
}

fn write_table(dir: &Path, stem: &str, title: &str, table: &RecallBinTable) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), table.to_csv())?;
    fs::write(dir.join(format!("{stem}.md")), table.to_markdown(title))?;
    Ok(())
}

fn cmd_screen(a: &ScreenArgs) -> Result<i32> {
    if !(a.top_fraction > 0.0 && a.top_fraction <= 1.0) {
        return Err(LabError::Config("--top-fraction must lie in (0, 1]".into()));
    }
    let records = load_log(&a.log)?;
    fs::create_dir_all(&a.out)?;
    let successes = label_success(&records, a.top_fraction);
    let features = extract_features(&records);
    let pooled = screen(&features, &successes, a.min_support)?;
    write_table(&a.out, "table", "All environments", &pooled)?;

    let mut envs: Vec<EnvId> = records.iter().map(|r| r.env_id).collect();
    envs.sort();
    envs.dedup();
    if envs.len() > 1 {
        for env in envs {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].env_id == env).collect();
            let f: Vec<_> = idx.iter().map(|&i| features[i].clone()).collect();
            let s: Vec<bool> = idx.iter().map(|&i| successes[i]).collect();
            write_table(
                &a.out,
                &format!("table_{env}"),
                env.as_str(),
                &screen(&f, &s, a.min_support)?,
            )?;
        }
    }
    println!(
        "{} runs, {} successes, {} filled cells",
        pooled.total_runs,
        pooled.total_successes,
        pooled.cells.len()
    );
    Ok(EXIT_OK)
}

fn regime_rows(out: &mut String, metric: &str, at: f64, rows: &[LrAggregate]) {
    for r in rows {
        let (m, lo, hi) = r
            .stats
            .map_or((f64::NAN, f64::NAN, f64::NAN), |s| (s.median, s.q25, s.q75));
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.lr, metric, at, m, lo, hi, r.n));
    }
}

/// CSV of per-LR quartiles of return and both OUIs at 10% and at the end of training.
pub fn regimes_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("lr,metric,at_fraction,median,q25,q75,n\n");
    for metric in [Metric::Return, Metric::OuiActor, Metric::OuiCritic] {
        regime_rows(&mut out, metric.name(), 0.1, &aggregate(records, metric, 0.1));
        let end = if metric == Metric::Return {
            aggregate_final_return(records)
        } else {
            aggregate(records, metric, 1.0)
        };
        regime_rows(&mut out, metric.name(), 1.0, &end);
    }
    out
}

fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let records = load_log(&a.log)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("regimes.csv"), regimes_csv(&records))?;
    println!("{} runs summarized", records.len());
    Ok(EXIT_OK)
}
