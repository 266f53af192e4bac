//! Experiment runner: flat `key = value` configs, multi-strategy runs over a
//! shared suite, and text comparison of summaries.
//!
//! Config files hold one `key = value` pair per line; `#` starts a comment.
//! A `summary.json` written by `run` is also accepted as a config, in which
//! case its echoed effective config is used.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Execution;
use crate::trainer::{train, RunOutput, Strategy, TrainConfig};
use crate::workloads::{generate_suite, ModelKind, SuiteConfig, TaskSuite};

pub const SUMMARY_SCHEMA: &str = "soco-summary/1";

/// Every accepted config key, in echo order.
pub const CONFIG_KEYS: [&str; 21] = [
    "n_tasks",
    "dim",
    "conflict_ratios",
    "model",
    "epochs",
    "lr",
    "strategy",
    "seed",
    "lambda",
    "alpha",
    "q1",
    "q3",
    "beta_left_max",
    "beta_right_max",
    "beta_min",
    "init_sparsity",
    "mask_interval",
    "hard_sparsity",
    "hard_swap_frac",
    "success_frac",
    "out_dir",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for anything wrong with the input, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } | CliError::Invalid(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Fixed 17-significant-digit float format used in every output file.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    pub strategies: Vec<Strategy>,
    pub out_dir: PathBuf,
}

/// Evenly spaced ratios from 0.10 to 0.45, used when none are given.
pub fn default_ratios(n_tasks: usize) -> Vec<f64> {
    match n_tasks {
        0 => Vec::new(),
        1 => vec![0.10],
        n => (0..n).map(|i| 0.10 + 0.35 * i as f64 / (n - 1) as f64).collect(),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            suite: SuiteConfig::quadratic(default_ratios(8), 256, train.seed),
            strategies: vec![train.strategy],
            train,
            out_dir: PathBuf::from("results"),
        }
    }
}

/// One `key = value` entry with its source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits config text into entries. Blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str, source_name: &str) -> Result<Vec<Entry>, CliError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Parse {
                source_name: source_name.to_string(),
                line: idx + 1,
                message: format!("expected key = value, got `{line}`"),
            });
        };
        out.push(Entry { key: k.trim().to_string(), value: v.trim().to_string(), line: idx + 1 });
    }
    Ok(out)
}

fn parse_strategies(s: &str) -> Result<Vec<Strategy>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let st = Strategy::parse(part).ok_or_else(|| format!("unknown strategy `{part}`"))?;
        if out.contains(&st) {
            return Err(format!("strategy `{part}` listed twice"));
        }
        out.push(st);
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

impl ExperimentConfig {
    /// Applies entries in order on top of the current values. Conflict
    /// ratios left unset follow `n_tasks`.
    pub fn apply(&mut self, entries: &[Entry], source_name: &str) -> Result<(), CliError> {
        let mut ratios_set = false;
        for e in entries {
            let res = self.set(&e.key, &e.value);
            if let Err(message) = res {
                return Err(CliError::Parse { source_name: source_name.to_string(), line: e.line, message });
            }
            if e.key == "conflict_ratios" {
                ratios_set = true;
            }
            if e.key == "n_tasks" && !ratios_set {
                self.suite.conflict_ratios = default_ratios(self.suite.n_tasks);
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (s, t) = (&mut self.suite, &mut self.train);
        let bad = |e: String| format!("{key}: {e}");
        match key {
            "n_tasks" => s.n_tasks = num(value).map_err(bad)?,
            "dim" => s.dim = num(value).map_err(bad)?,
            "conflict_ratios" => {
                s.conflict_ratios =
                    value.split(',').map(|x| num::<f64>(x.trim())).collect::<Result<_, _>>().map_err(bad)?
            }
            "model" => {
                s.model = match value {
                    "quadratic" => ModelKind::Quadratic,
                    "mlp" => ModelKind::Mlp,
                    _ => return Err(bad(format!("expected quadratic or mlp, got `{value}`"))),
                }
            }
            "epochs" => t.epochs = num(value).map_err(bad)?,
            "lr" => t.lr = num(value).map_err(bad)?,
            "strategy" => self.strategies = parse_strategies(value).map_err(bad)?,
            "seed" => {
                t.seed = num(value).map_err(bad)?;
                s.seed = t.seed;
            }
            "lambda" => t.tamu.lambda = num(value).map_err(bad)?,
            "alpha" => t.tamu.alpha = num(value).map_err(bad)?,
            "q1" => t.tamu.q1 = num(value).map_err(bad)?,
            "q3" => t.tamu.q3 = num(value).map_err(bad)?,
            "beta_left_max" => t.tamu.beta_left_max = num(value).map_err(bad)?,
            "beta_right_max" => t.tamu.beta_right_max = num(value).map_err(bad)?,
            "beta_min" => t.tamu.beta_min = num(value).map_err(bad)?,
            "init_sparsity" => t.init_sparsity = num(value).map_err(bad)?,
            "mask_interval" => t.mask_interval = num(value).map_err(bad)?,
            "hard_sparsity" => t.hard_sparsity = num(value).map_err(bad)?,
            "hard_swap_frac" => t.hard_swap_frac = num(value).map_err(bad)?,
            "success_frac" => t.success_frac = num(value).map_err(bad)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.strategies.is_empty() {
            return Err(CliError::Invalid("no strategy given".into()));
        }
        self.suite.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Effective config as strings; feeding it back through `apply`
    /// reproduces this value.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let (s, t) = (&self.suite, &self.train);
        let strategies: Vec<&str> = self.strategies.iter().map(|s| s.as_str()).collect();
        let ratios: Vec<String> = s.conflict_ratios.iter().map(|&r| fmt_f64(r)).collect();
        CONFIG_KEYS
            .iter()
            .map(|&k| {
                let v = match k {
                    "n_tasks" => s.n_tasks.to_string(),
                    "dim" => s.dim.to_string(),
                    "conflict_ratios" => ratios.join(","),
                    "model" => s.model.as_str().to_string(),
                    "epochs" => t.epochs.to_string(),
                    "lr" => fmt_f64(t.lr),
                    "strategy" => strategies.join(","),
                    "seed" => t.seed.to_string(),
                    "lambda" => fmt_f64(t.tamu.lambda),
                    "alpha" => fmt_f64(t.tamu.alpha),
                    "q1" => fmt_f64(t.tamu.q1),
                    "q3" => fmt_f64(t.tamu.q3),
                    "beta_left_max" => fmt_f64(t.tamu.beta_left_max),
                    "beta_right_max" => fmt_f64(t.tamu.beta_right_max),
                    "beta_min" => fmt_f64(t.tamu.beta_min),
                    "init_sparsity" => fmt_f64(t.init_sparsity),
                    "mask_interval" => t.mask_interval.to_string(),
                    "hard_sparsity" => fmt_f64(t.hard_sparsity),
                    "hard_swap_frac" => fmt_f64(t.hard_swap_frac),
                    "success_frac" => fmt_f64(t.success_frac),
                    "out_dir" => self.out_dir.display().to_string(),
                    _ => unreachable!(),
                };
                (k, v)
            })
            .collect()
    }
}

/// Reads either a flat config file or the config echo of a summary.
pub fn load_config_entries(path: &Path) -> Result<Vec<Entry>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    if text.trim_start().starts_with('{') {
        let summary: SummaryEcho = serde_json::from_str(&text).map_err(|e| CliError::Parse {
            source_name: name.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if summary.schema != SUMMARY_SCHEMA {
            return Err(CliError::Invalid(format!("{name}: unsupported schema `{}`", summary.schema)));
        }
        return Ok(summary.config.into_iter().map(|(key, value)| Entry { key, value, line: 0 }).collect());
    }
    parse_entries(&text, &name)
}

#[derive(Deserialize)]
struct SummaryEcho {
    schema: String,
    config: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct TaskOut {
    task_id: usize,
    initial_loss: Box<RawValue>,
    final_loss: Box<RawValue>,
    success: bool,
}

#[derive(Serialize)]
struct StrategyOut {
    seed: u64,
    success_rate: Box<RawValue>,
    mean_final_loss: Box<RawValue>,
    tasks: Vec<TaskOut>,
}

#[derive(Serialize)]
struct SummaryOut {
    schema: &'static str,
    config: BTreeMap<&'static str, String>,
    suite_manifest_sha256: String,
    strategies: BTreeMap<&'static str, StrategyOut>,
}

fn raw(x: f64) -> Result<Box<RawValue>, CliError> {
    if !x.is_finite() {
        return Err(CliError::Runtime(format!("non-finite value {x} in summary")));
    }
    RawValue::from_string(fmt_f64(x)).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn opt_f(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn opt_u(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.into() })
}

fn csv_done(w: csv::Writer<fs::File>, path: &Path) -> Result<(), CliError> {
    w.into_inner()
        .map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.into_error() })?
        .sync_all()
        .map_err(io_err(path))
}

macro_rules! rec {
    ($w:expr, $path:expr, $($f:expr),+ $(,)?) => {
        $w.write_record([$(AsRef::<[u8]>::as_ref(&$f)),+])
            .map_err(|e| CliError::Io { path: $path.to_path_buf(), source: e.into() })?
    };
}

pub fn write_metrics(path: &Path, out: &RunOutput) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    rec!(
        w,
        path,
        "step",
        "task_id",
        "loss",
        "sparsity",
        "beta_t",
        "n_conflict",
        "n_recover",
        "conflict_ratio",
        "wrongly_masked_top30"
    );
    for r in &out.record.rows {
        rec!(
            w,
            path,
            r.step.to_string(),
            r.task_id.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.sparsity),
            opt_f(r.beta_t),
            opt_u(r.n_conflict),
            opt_u(r.n_recover),
            opt_f(r.conflict_ratio),
            opt_u(r.wrongly_masked_top30),
        );
    }
    csv_done(w, path)
}

fn write_plot_data(dir: &Path, runs: &[(Strategy, RunOutput)]) -> Result<(), CliError> {
    let p = dir.join("fig1_success.csv");
    let mut w = csv_writer(&p)?;
    rec!(w, p, "strategy", "seed", "success_rate", "mean_final_loss");
    for (s, out) in runs {
        let r = &out.record;
        rec!(w, p, s.as_str(), r.seed.to_string(), fmt_f64(r.success_rate()), fmt_f64(r.mean_final_loss()));
    }
    csv_done(w, &p)?;

    let series: [(&str, &str); 2] =
        [("fig3a_wrongly_masked.csv", "wrongly_masked_top30"), ("fig3b_conflict_ratio.csv", "conflict_ratio")];
    for (file, column) in series {
        let p = dir.join(file);
        let mut w = csv_writer(&p)?;
        rec!(w, p, "strategy", "step", "task_id", column);
        for (s, out) in runs {
            for r in &out.record.rows {
                let value = if column == "conflict_ratio" {
                    r.conflict_ratio.map(fmt_f64)
                } else {
                    r.wrongly_masked_top30.map(|v| v.to_string())
                };
                if let Some(v) = value {
                    rec!(w, p, s.as_str(), r.step.to_string(), r.task_id.to_string(), v);
                }
            }
        }
        csv_done(w, &p)?;
    }
    Ok(())
}

fn write_masks(dir: &Path, out: &RunOutput) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, m) in out.masks.iter().enumerate() {
        let p = dir.join(format!("task_{i}.csv"));
        let mut w = csv_writer(&p)?;
        rec!(w, p, "param_index", "soft_value");
        for (j, v) in m.soft().iter().enumerate() {
            rec!(w, p, j.to_string(), fmt_f64(*v));
        }
        csv_done(w, &p)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Runs every configured strategy on one shared suite and writes all
/// outputs. A single strategy writes `metrics.csv` at the top level;
/// several write `<strategy>/metrics.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, dump_masks: bool) -> Result<Vec<(Strategy, RunOutput)>, CliError> {
    cfg.validate()?;
    let suite: TaskSuite = generate_suite(&cfg.suite).map_err(|e| CliError::Invalid(e.to_string()))?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = suite.manifest();
    write_text(&dir.join("suite.manifest"), &manifest)?;

    let mut runs = Vec::with_capacity(cfg.strategies.len());
    for &strategy in &cfg.strategies {
        let tc = TrainConfig { strategy, ..cfg.train.clone() };
        let out = train(&suite, &tc).map_err(|e| CliError::Runtime(format!("{}: {e}", strategy.as_str())))?;
        runs.push((strategy, out));
    }

    let nested = runs.len() > 1;
    let mut blocks = BTreeMap::new();
    for (strategy, out) in &runs {
        let sub = if nested { dir.join(strategy.as_str()) } else { dir.clone() };
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        write_metrics(&sub.join("metrics.csv"), out)?;
        if dump_masks {
            write_masks(&sub.join("masks"), out)?;
        }
        let r = &out.record;
        let tasks = (0..r.final_losses.len())
            .map(|i| {
                Ok(TaskOut {
                    task_id: i,
                    initial_loss: raw(r.initial_losses[i])?,
                    final_loss: raw(r.final_losses[i])?,
                    success: r.success[i],
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        blocks.insert(
            strategy.as_str(),
            StrategyOut {
                seed: r.seed,
                success_rate: raw(r.success_rate())?,
                mean_final_loss: raw(r.mean_final_loss())?,
                tasks,
            },
        );
    }
    write_plot_data(dir, &runs)?;

    let summary = SummaryOut {
        schema: SUMMARY_SCHEMA,
        config: cfg.echo().into_iter().collect(),
        suite_manifest_sha256: sha256_hex(manifest.as_bytes()),
        strategies: blocks,
    };
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    json.push('\n');
    write_text(&dir.join("summary.json"), &json)?;
    Ok(runs)
}

#[derive(Deserialize)]
struct SummaryIn {
    schema: String,
    strategies: BTreeMap<String, StrategyIn>,
}

#[derive(Deserialize)]
struct StrategyIn {
    seed: u64,
    success_rate: f64,
    mean_final_loss: f64,
    tasks: Vec<serde_json::Value>,
}

/// Renders the comparison table for several summaries. Warnings for
/// skipped blocks go to `warn`.
pub fn compare_summaries(paths: &[PathBuf], warn: &mut dyn std::io::Write) -> Result<String, CliError> {
    if paths.len() < 2 {
        return Err(CliError::Invalid("compare needs at least two summaries".into()));
    }
    let mut rows: BTreeMap<String, Vec<(String, u64, f64, f64)>> = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let s: SummaryIn = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{}: not a summary: {e}", path.display())))?;
        if s.schema != SUMMARY_SCHEMA {
            return Err(CliError::Invalid(format!(
                "{}: schema `{}` does not match `{SUMMARY_SCHEMA}`",
                path.display(),
                s.schema
            )));
        }
        for (name, block) in s.strategies {
            if block.tasks.is_empty() {
                let _ = writeln!(warn, "warning: {}: strategy `{name}` has no tasks, omitted", path.display());
                continue;
            }
            rows.entry(name).or_default().push((
                path.display().to_string(),
                block.seed,
                block.success_rate,
                block.mean_final_loss,
            ));
        }
    }
    let mut out = String::new();
    out.push_str("strategy,runs,mean_success_rate,mean_final_loss\n");
    for (name, rs) in &rows {
        let n = rs.len() as f64;
        let sr = rs.iter().map(|r| r.2).sum::<f64>() / n;
        let fl = rs.iter().map(|r| r.3).sum::<f64>() / n;
        out.push_str(&format!("{name},{},{},{}\n", rs.len(), fmt_f64(sr), fmt_f64(fl)));
    }
    out.push_str("\nstrategy,seed,success_rate,final_loss,source\n");
    for (name, rs) in &rows {
        for (src, seed, sr, fl) in rs {
            out.push_str(&format!("{name},{seed},{},{},{src}\n", fmt_f64(*sr), fmt_f64(*fl)));
        }
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "soco", about = "Multi-task masking experiments on synthetic suites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more strategies and write metrics and a summary.
    Run(RunArgs),
    /// Compare two or more summary.json files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat key = value config, or a summary.json to re-run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated list of soco, hard, none.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run strategies on one thread.
    #[arg(long)]
    pub sequential: bool,
    /// Also write final per-task masks.
    #[arg(long)]
    pub dump_masks: bool,
    /// Extra `key=value` settings applied after the config file.
    pub overrides: Vec<String>,
}

/// Builds the effective config: defaults, then the file, then positional
/// overrides, then the dedicated flags.
pub fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let entries = load_config_entries(path)?;
        cfg.apply(&entries, &path.display().to_string())?;
    }
    let text = args.overrides.join("\n");
    cfg.apply(&parse_entries(&text, "<overrides>")?, "<overrides>")?;
    let mut flags = Vec::new();
    if let Some(s) = &args.strategy {
        flags.push(Entry { key: "strategy".into(), value: s.clone(), line: 0 });
    }
    if let Some(seed) = args.seed {
        flags.push(Entry { key: "seed".into(), value: seed.to_string(), line: 0 });
    }
    if let Some(out) = &args.out {
        flags.push(Entry { key: "out_dir".into(), value: out.display().to_string(), line: 0 });
    }
    cfg.apply(&flags, "<flags>")?;
    if args.sequential {
        cfg.train.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = resolve_config(&args)?;
            let runs = run_experiment(&cfg, args.dump_masks)?;
            for (s, out) in &runs {
                println!(
                    "{}: success_rate={} mean_final_loss={}",
                    s.as_str(),
                    fmt_f64(out.record.success_rate()),
                    fmt_f64(out.record.mean_final_loss())
                );
            }
            Ok(())
        }
        Command::Compare { summaries } => {
            let table = compare_summaries(&summaries, &mut std::io::stderr())?;
            print!("{table}");
            Ok(())
        }
    }
}

/// Entry point for the binary. Argument errors are reported by clap.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_skip_comments_and_blank_lines() {
        let e = parse_entries("# header\n\nlr = 0.5 # step size\n dim=12\n", "x").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("lr", "0.5", 3));
        assert_eq!((e[1].key.as_str(), e[1].value.as_str(), e[1].line), ("dim", "12", 4));
    }

    #[test]
    fn missing_equals_names_the_line() {
        let err = parse_entries("lr = 1\nbogus\n", "cfg").unwrap_err();
        assert_eq!(err.to_string(), "cfg:2: expected key = value, got `bogus`");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply(&parse_entries("foo=1", "cfg").unwrap(), "cfg").unwrap_err();
        assert!(err.to_string().contains("unknown key `foo`"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in ["lr = fast", "model = cnn", "strategy = soco,soco", "strategy = best", "n_tasks = -1"] {
            let mut cfg = ExperimentConfig::default();
            let err = cfg.apply(&parse_entries(text, "cfg").unwrap(), "cfg").unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn n_tasks_resizes_default_ratios() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&parse_entries("n_tasks = 3", "c").unwrap(), "c").unwrap();
        assert_eq!(cfg.suite.conflict_ratios.len(), 3);
        assert!((cfg.suite.conflict_ratios[2] - 0.45).abs() < 1e-15);
        cfg.validate().unwrap();
        let mut explicit = ExperimentConfig::default();
        explicit.apply(&parse_entries("conflict_ratios = 0.1,0.2\nn_tasks = 2", "c").unwrap(), "c").unwrap();
        assert_eq!(explicit.suite.conflict_ratios, vec![0.1, 0.2]);
    }

    #[test]
    fn echo_covers_every_key_and_round_trips() {
        let mut cfg = ExperimentConfig::default();
        let text = "n_tasks=3\nconflict_ratios=0.1,0.3,0.2\nlr=0.07\nstrategy=hard,soco\nseed=9\nq1=0.1\nalpha=3.5\nout_dir=x/y";
        cfg.apply(&parse_entries(text, "c").unwrap(), "c").unwrap();
        let echo = cfg.echo();
        assert_eq!(echo.iter().map(|e| e.0).collect::<Vec<_>>(), CONFIG_KEYS.to_vec());
        let entries: Vec<Entry> =
            echo.into_iter().map(|(k, v)| Entry { key: k.to_string(), value: v, line: 0 }).collect();
        let mut again = ExperimentConfig::default();
        again.apply(&entries, "echo").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_combination_fails_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&parse_entries("conflict_ratios = 0.1,0.2", "c").unwrap(), "c").unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn float_format_has_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(-0.1).parse::<f64>().unwrap(), -0.1);
    }
}
