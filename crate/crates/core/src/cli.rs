//! Experiment commands behind the `tsegrid` binary: scene generation,
//! training, evaluation and the full train/test missing-rate grid with its
//! six report tables.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cues::CueKind;
use crate::error::{Error, Result};
use crate::scenes::{self, make_split, Scene, SceneConfig};
use crate::tensor::checkpoint::Checkpoint;
use crate::trainer::{self, cue_label, EvalReport, ReportRow, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "train.toml";
pub const LOG_FILE: &str = "train_log.csv";
pub const PESQ_UNAVAILABLE: &str = "n/a";
pub const THREADS_ENV: &str = "TSEGRID_THREADS";

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INPUT: i32 = 4;
    pub const IO: i32 = 5;
    pub const NUMERIC: i32 = 6;
    pub const FORMAT: i32 = 7;
    pub const SHAPE: i32 = 8;
    pub const CHECK_FAILED: i32 = 9;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Input(_) | Error::UndefinedReference | Error::TooShort { .. } | Error::UnsupportedRate(_) => exit::INPUT,
        Error::Io { .. } => exit::IO,
        Error::Numeric(_) | Error::Diverged(_) => exit::NUMERIC,
        Error::Version(_) | Error::Format(_) => exit::FORMAT,
        Error::Shape { .. } => exit::SHAPE,
    }
}

// ---------------------------------------------------------------------------
// configuration

/// The six cue sets in table row order.
pub fn grid_configurations() -> Vec<Vec<CueKind>> {
    use CueKind::*;
    vec![
        vec![Lip],
        vec![Lip, Expression],
        vec![Lip, Face],
        vec![Lip, Voice],
        vec![Lip, Expression, Face],
        vec![Lip, Expression, Face, Voice],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub configurations: Vec<Vec<CueKind>>,
    pub train_missing: Vec<f64>,
    pub test_missing: Vec<f64>,
    pub eval_seed: u64,
    /// Evaluation seeds averaged per cell.
    pub seeds: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            configurations: grid_configurations(),
            train_missing: vec![0.0, 0.8],
            test_missing: vec![0.0, 0.4, 0.8],
            eval_seed: 0,
            seeds: 1,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.configurations.is_empty() || self.train_missing.is_empty() || self.test_missing.is_empty() {
            return Err(Error::Config("grid needs configurations and missing rates".into()));
        }
        for c in &self.configurations {
            if !c.contains(&CueKind::Lip) {
                return Err(Error::Config(format!("grid configuration {} lacks the lip cue", cue_label(c))));
            }
        }
        for &r in self.train_missing.iter().chain(&self.test_missing) {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("missing rate {r} outside [0, 1]")));
            }
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenes: SceneConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
}

impl ExperimentConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        c.scenes.validate()?;
        c.grid.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn parse_cues(text: &str) -> Result<Vec<CueKind>> {
    let cues = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(CueKind::parse)
        .collect::<Result<Vec<_>>>()?;
    if !cues.contains(&CueKind::Lip) {
        return Err(Error::Config("the lip cue must always be active".into()));
    }
    Ok(CueKind::ALL.into_iter().filter(|k| cues.contains(k)).collect())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// commands

/// Writes every scene and `manifest.txt` under `out`; returns the manifest path.
pub fn cmd_generate(config: &SceneConfig, out: &Path) -> Result<PathBuf> {
    scenes::generate_cache(config, out)?;
    Ok(out.join("manifest.txt"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

pub fn load_split(config: &SceneConfig, scenes_dir: &Path, which: SplitName) -> Result<Vec<Scene>> {
    if !scenes_dir.join("manifest.txt").is_file() {
        return Err(Error::io(
            scenes_dir.join("manifest.txt"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "scene cache missing; run `tsegrid generate` first"),
        ));
    }
    let split = make_split(config)?;
    let ids = match which {
        SplitName::Train => split.train,
        SplitName::Dev => split.dev,
        SplitName::Test => split.test,
    };
    scenes::load_scenes(scenes_dir, &ids)
}

/// Saved model directory: checkpoint, training config and log.
pub struct SavedModel {
    pub config: TrainConfig,
    pub checkpoint: Checkpoint,
}

impl SavedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
        let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        Ok(Self { config, checkpoint })
    }
}

/// Trains one model from already-loaded splits and writes it to `out`.
pub fn train_to_dir(config: &TrainConfig, train: &[Scene], dev: &[Scene], out: &Path) -> Result<trainer::TrainOutcome<f32>> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcome = trainer::train::<f32>(config, train, dev, Some(&out.join(LOG_FILE)))?;
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join(CONFIG_FILE), &text)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

/// Trains the cue set on the cached scenes; returns the checkpoint path.
pub fn cmd_train(
    config: &ExperimentConfig,
    scenes_dir: &Path,
    cues: &[CueKind],
    train_missing: f64,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    let mut tc = config.train.clone();
    tc.model.active_cues = cues.to_vec();
    tc.train_missing_rate = train_missing;
    tc.seed = seed;
    tc.validate()?;
    let train = load_split(&config.scenes, scenes_dir, SplitName::Train)?;
    let dev = load_split(&config.scenes, scenes_dir, SplitName::Dev)?;
    train_to_dir(&tc, &train, &dev, out)?;
    Ok(out.join(CHECKPOINT_FILE))
}

/// Mean over `seeds` consecutive evaluation seeds starting at `seed`.
pub fn evaluate_saved(model: &SavedModel, test: &[Scene], test_missing: f64, seed: u64, seeds: usize) -> Result<EvalReport> {
    let (m, store) = trainer::load_model::<f32>(&model.config.model, &model.checkpoint)?;
    let mut acc: Option<EvalReport> = None;
    for k in 0..seeds.max(1) as u64 {
        let r = trainer::evaluate(&m, &store, test, test_missing, seed + k)?;
        acc = Some(match acc {
            None => r,
            Some(mut a) => {
                for (x, y) in a.rows.iter_mut().zip(&r.rows) {
                    x.si_snr += y.si_snr;
                    x.stoi += y.stoi;
                }
                a
            }
        });
    }
    let mut report = acc.expect("at least one seed");
    let n = seeds.max(1) as f64;
    for row in &mut report.rows {
        row.si_snr /= n;
        row.stoi /= n;
    }
    report.seed = seed;
    report.train_missing = Some(model.config.train_missing_rate);
    Ok(report)
}

/// Evaluates a saved model, or with `model_dir = None` only the mixture.
pub fn cmd_eval(
    config: &ExperimentConfig,
    scenes_dir: &Path,
    model_dir: Option<&Path>,
    test_missing: f64,
    seed: u64,
    seeds: usize,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&test_missing) {
        return Err(Error::Config(format!("test missing rate {test_missing} outside [0, 1]")));
    }
    let test = load_split(&config.scenes, scenes_dir, SplitName::Test)?;
    match model_dir {
        Some(dir) => {
            let model = SavedModel::load(dir)?;
            evaluate_saved(&model, &test, test_missing, seed, seeds)
        }
        None => Ok(EvalReport {
            train_missing: None,
            test_missing,
            n_scenes: test.len(),
            seed,
            rows: vec![trainer::mixture_row(&test)?],
        }),
    }
}

// ---------------------------------------------------------------------------
// reports

fn pct(r: f64) -> String {
    format!("{}%", (r * 100.0).round() as i64)
}

pub fn caption(report: &EvalReport) -> String {
    match report.train_missing {
        Some(t) => format!("Train {} missing, test {} missing", pct(t), pct(report.test_missing)),
        None => format!("Test {} missing", pct(report.test_missing)),
    }
}

fn header_line(report: &EvalReport) -> String {
    let train = report.train_missing.map(|t| format!("{t:.3}")).unwrap_or_else(|| "none".into());
    format!(
        "train_missing={train} test_missing={:.3} n_scenes={} seed={}",
        report.test_missing, report.n_scenes, report.seed
    )
}

/// CSV with a `#` header line, then `Metric,SISNR,PESQ,STOI`.
pub fn render_csv(report: &EvalReport) -> String {
    let mut s = format!("# {}\nMetric,SISNR,PESQ,STOI\n", header_line(report));
    for r in &report.rows {
        s.push_str(&format!("{},{:.3},{PESQ_UNAVAILABLE},{:.3}\n", r.name, r.si_snr, r.stoi));
    }
    s
}

/// Aligned markdown table with the caption above it.
pub fn render_markdown(report: &EvalReport) -> String {
    let head = ["Metric", "SISNR", "PESQ", "STOI"];
    let cells: Vec<[String; 4]> = report
        .rows
        .iter()
        .map(|r| [r.name.clone(), format!("{:.3}", r.si_snr), PESQ_UNAVAILABLE.to_string(), format!("{:.3}", r.stoi)])
        .collect();
    let width: Vec<usize> = (0..4)
        .map(|i| cells.iter().map(|c| c[i].len()).chain([head[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |v: [&str; 4]| -> String {
        let parts: Vec<String> = (0..4)
            .map(|i| if i == 0 { format!("{:<w$}", v[i], w = width[i]) } else { format!("{:>w$}", v[i], w = width[i]) })
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut s = format!("{}\n\n<!-- {} -->\n\n", caption(report), header_line(report));
    s.push_str(&line(head));
    let rule: Vec<String> = (0..4)
        .map(|i| if i == 0 { format!(":{}", "-".repeat(width[i] - 1)) } else { format!("{}:", "-".repeat(width[i] - 1)) })
        .collect();
    s.push_str(&format!("| {} |\n", rule.join(" | ")));
    for c in &cells {
        s.push_str(&line([&c[0], &c[1], &c[2], &c[3]]));
    }
    s
}

/// Parses the rows back out of [`render_csv`] output.
pub fn parse_csv_rows(text: &str) -> Result<Vec<ReportRow>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("Metric,") && !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("bad report line {l:?}")))
            };
            if f.len() != 4 {
                return Err(Error::Format(format!("bad report line {l:?}")));
            }
            Ok(ReportRow { name: f[0].to_string(), si_snr: num(1)?, stoi: num(3)? })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// grid

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub cues: Vec<CueKind>,
    pub train_missing: f64,
}

impl GridCell {
    pub fn dir_name(&self) -> String {
        format!("{}_train{:02}", cue_label(&self.cues).to_lowercase(), (self.train_missing * 100.0).round() as i64)
    }
}

#[derive(Clone, Debug)]
pub struct GridResult {
    /// One table per (train missing, test missing), train-major order.
    pub tables: Vec<EvalReport>,
    pub table_paths: Vec<PathBuf>,
}

impl GridResult {
    pub fn table(&self, train_missing: f64, test_missing: f64) -> Option<&EvalReport> {
        self.tables.iter().find(|t| t.train_missing == Some(train_missing) && t.test_missing == test_missing)
    }

    /// SI-SNR of a row in the table for the given condition.
    pub fn si_snr(&self, train_missing: f64, test_missing: f64, label: &str) -> Option<f64> {
        self.table(train_missing, test_missing)?.rows.iter().find(|r| r.name == label).map(|r| r.si_snr)
    }
}

fn cell_config(base: &TrainConfig, cell: &GridCell) -> TrainConfig {
    let mut c = base.clone();
    c.model.active_cues = cell.cues.clone();
    c.train_missing_rate = cell.train_missing;
    c
}

/// Returns the saved model of a cell, training it unless `resume` finds a
/// finished one with the same configuration.
fn ensure_cell(base: &TrainConfig, cell: &GridCell, dir: &Path, resume: bool, train: &[Scene], dev: &[Scene]) -> Result<SavedModel> {
    let config = cell_config(base, cell);
    if resume && dir.join(CHECKPOINT_FILE).is_file() {
        if let Ok(saved) = SavedModel::load(dir) {
            if saved.config == config {
                log::info!("{}: reusing checkpoint", cell.dir_name());
                return Ok(saved);
            }
            log::warn!("{}: config changed, retraining", cell.dir_name());
        }
    }
    log::info!("{}: training", cell.dir_name());
    let outcome = train_to_dir(&config, train, dev, dir)?;
    Ok(SavedModel { config, checkpoint: outcome.checkpoint })
}

/// Trains every (cue set, train missing) cell, evaluates each at every test
/// missing rate and writes `table{k}.csv` / `table{k}.md` under `out`.
/// `jobs > 1` trains that many cells concurrently.
pub fn cmd_grid(config: &ExperimentConfig, scenes_dir: &Path, out: &Path, resume: bool, jobs: usize) -> Result<GridResult> {
    config.grid.validate()?;
    let grid = &config.grid;
    let train = load_split(&config.scenes, scenes_dir, SplitName::Train)?;
    let dev = load_split(&config.scenes, scenes_dir, SplitName::Dev)?;
    let test = load_split(&config.scenes, scenes_dir, SplitName::Test)?;
    let cells: Vec<GridCell> = grid
        .train_missing
        .iter()
        .flat_map(|&t| grid.configurations.iter().map(move |c| GridCell { cues: c.clone(), train_missing: t }))
        .collect();
    let run = |cell: &GridCell| -> Result<Vec<EvalReport>> {
        let dir = out.join("cells").join(cell.dir_name());
        let saved = ensure_cell(&config.train, cell, &dir, resume, &train, &dev)?;
        grid.test_missing
            .iter()
            .map(|&r| {
                let report = evaluate_saved(&saved, &test, r, grid.eval_seed, grid.seeds)?;
                write(&dir.join(format!("eval_test{:02}.csv", (r * 100.0).round() as i64)), &render_csv(&report))?;
                Ok(report)
            })
            .collect()
    };
    let per_cell: Vec<Vec<EvalReport>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<_>>())?
    } else {
        cells.iter().map(run).collect::<Result<_>>()?
    };
    let mix = trainer::mixture_row(&test)?;
    let mut tables = Vec::new();
    let mut table_paths = Vec::new();
    for &t in &grid.train_missing {
        for (ri, &r) in grid.test_missing.iter().enumerate() {
            let mut rows = vec![mix.clone()];
            for (cell, reports) in cells.iter().zip(&per_cell) {
                if cell.train_missing == t {
                    rows.push(reports[ri].rows[1].clone());
                }
            }
            let report = EvalReport {
                train_missing: Some(t),
                test_missing: r,
                n_scenes: test.len(),
                seed: grid.eval_seed,
                rows,
            };
            let k = tables.len() + 1;
            let csv = out.join(format!("table{k}.csv"));
            write(&csv, &render_csv(&report))?;
            write(&out.join(format!("table{k}.md")), &render_markdown(&report))?;
            table_paths.push(csv);
            tables.push(report);
        }
    }
    Ok(GridResult { tables, table_paths })
}

// ---------------------------------------------------------------------------
// directional checks

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Minimum SI-SNR drop from 0% to 80% test missing for 0%-trained models.
pub const MIN_MISSING_DROP_DB: f64 = 2.0;
/// Minimum gain at 80% test missing from training with 80% missing.
pub const MIN_ROBUST_GAIN_DB: f64 = 1.0;
/// Maximum drop for the 80%-trained full model.
pub const MAX_RETENTION_DROP_DB: f64 = 2.0;

/// Compares grid cells: the drop under missing cues for 0%-trained models,
/// the gain from missing-aware training, and the retention of the
/// missing-aware full model.
pub fn directional_checks(result: &GridResult, configurations: &[Vec<CueKind>]) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    let get = |t: f64, r: f64, l: &str| result.si_snr(t, r, l);
    for c in configurations {
        let label = cue_label(c);
        let line = match (get(0.0, 0.0, &label), get(0.0, 0.8, &label)) {
            (Some(a), Some(b)) => CheckLine {
                name: format!("missing drop {label}"),
                passed: a - b >= MIN_MISSING_DROP_DB,
                detail: format!("train 0%: {a:.3} dB at test 0%, {b:.3} dB at test 80% (drop {:.3})", a - b),
            },
            _ => CheckLine { name: format!("missing drop {label}"), passed: false, detail: "cells missing".into() },
        };
        lines.push(line);
    }
    for c in configurations {
        let label = cue_label(c);
        let line = match (get(0.0, 0.8, &label), get(0.8, 0.8, &label)) {
            (Some(a), Some(b)) => CheckLine {
                name: format!("robust training {label}"),
                passed: b - a >= MIN_ROBUST_GAIN_DB,
                detail: format!("test 80%: {a:.3} dB trained at 0%, {b:.3} dB trained at 80% (gain {:.3})", b - a),
            },
            _ => CheckLine { name: format!("robust training {label}"), passed: false, detail: "cells missing".into() },
        };
        lines.push(line);
    }
    if let Some(full) = configurations.iter().max_by_key(|c| c.len()) {
        let label = cue_label(full);
        let line = match (get(0.8, 0.0, &label), get(0.8, 0.8, &label)) {
            (Some(a), Some(b)) => CheckLine {
                name: format!("retention {label}"),
                passed: a - b <= MAX_RETENTION_DROP_DB,
                detail: format!("train 80%: {a:.3} dB at test 0%, {b:.3} dB at test 80% (drop {:.3})", a - b),
            },
            _ => CheckLine { name: format!("retention {label}"), passed: false, detail: "cells missing".into() },
        };
        lines.push(line);
    }
    lines
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "tsegrid", version, about = "Multimodal target speaker extraction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; built-in desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene cache written by `generate`.
    #[arg(long, default_value = "scenes")]
    pub scenes: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise the train/dev/test scenes and write them to disk.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "scenes")]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cue set; must include lip.
        #[arg(long, default_value = "lip")]
        cues: String,
        #[arg(long, default_value_t = 0.0)]
        train_missing: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model (or only the mixture with --mix).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long, required_unless_present = "mix")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        test_missing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Average over this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Report the unprocessed mixture without a model.
        #[arg(long)]
        mix: bool,
        /// Directory for report.csv / report.md; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the full grid and write the six tables.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "grid")]
        out: PathBuf,
        /// Reuse finished cells whose configuration is unchanged.
        #[arg(long)]
        resume: bool,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the number of evaluation seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Compare cells afterwards; exit nonzero if a comparison fails.
        #[arg(long)]
        check: bool,
        /// Acknowledge that the grid trains one model per cell.
        #[arg(long)]
        accept_budget: bool,
    },
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { config, out } => {
            let c = ExperimentConfig::load(config.as_deref())?;
            let manifest = cmd_generate(&c.scenes, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { common, cues, train_missing, seed, out } => {
            let c = ExperimentConfig::load(common.config.as_deref())?;
            let cues = parse_cues(&cues)?;
            let seed = seed.unwrap_or(c.train.seed);
            let path = cmd_train(&c, &common.scenes, &cues, train_missing, seed, &out)?;
            println!("{}", path.display());
        }
        Command::Eval { common, checkpoint, test_missing, seed, seeds, mix, out } => {
            let c = ExperimentConfig::load(common.config.as_deref())?;
            let model = if mix { None } else { checkpoint.as_deref() };
            let report = cmd_eval(&c, &common.scenes, model, test_missing, seed, seeds)?;
            let csv = render_csv(&report);
            print!("{csv}");
            if let Some(dir) = out {
                write(&dir.join("report.csv"), &csv)?;
                write(&dir.join("report.md"), &render_markdown(&report))?;
            }
        }
        Command::Grid { common, out, resume, jobs, seeds, check, accept_budget } => {
            let mut c = ExperimentConfig::load(common.config.as_deref())?;
            if let Some(s) = seeds {
                c.grid.seeds = s;
            }
            let cells = c.grid.configurations.len() * c.grid.train_missing.len();
            if !accept_budget {
                return Err(Error::Config(format!(
                    "the grid trains {cells} models; pass --accept-budget to proceed"
                )));
            }
            let result = cmd_grid(&c, &common.scenes, &out, resume, jobs)?;
            for p in &result.table_paths {
                println!("{}", p.display());
            }
            if check {
                let lines = directional_checks(&result, &c.grid.configurations);
                for l in &lines {
                    println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
                }
                if lines.iter().any(|l| !l.passed) {
                    return Ok(exit::CHECK_FAILED);
                }
            }
        }
    }
    Ok(exit::OK)
}

/// Applies `TSEGRID_THREADS` to the global rayon pool.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}
