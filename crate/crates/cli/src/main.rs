use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vcr_core::data::{generate_synthetic, load_jsonl, save_jsonl, DEFAULT_MAX_GAP};
use vcr_core::forecast::{baseline, evaluate_forecaster, windows_from_records, Forecaster, Model, ModelKind, TrainedModel};
use vcr_core::metrics::{comparison_csv, comparison_table, parse_report_csv, EvalReport, METRIC_NAMES};
use vcr_core::training::TrainConfig;
use vcr_core::{Error, StateWindow, SyntheticConfig, WindowConfig};

mod config;
mod failure;
mod plot;

use failure::{CliResult, Context, Failure, EXIT_COMPAT, EXIT_CONFIG, EXIT_DATA};

#[derive(Parser)]
#[command(name = "vcr", version, about = "Visuomotor trajectory forecasting")]
struct Cli {
    /// Worker threads. Every computation is single-threaded, so any value
    /// gives bit-identical results.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic trajectories as JSONL.
    Generate(GenerateArgs),
    /// Clean, window and train a model; writes a checkpoint and a loss curve.
    Train(TrainArgs),
    /// Score trained models and baselines on held-out trajectories.
    Evaluate(EvaluateArgs),
    /// Draw per-step error curves from report CSVs.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_trajectories: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Diffusion,
    Regression,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Diffusion => ModelKind::Diffusion,
            ModelArg::Regression => ModelKind::Regression,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint manifest; weights go to `<out>.bin`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Continue from this checkpoint, keeping its model, window and normalizer.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss curve CSV; defaults to `<out stem>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
#[value(rename_all = "snake_case")]
enum BaselineArg {
    ConstantPose,
    ConstantVelocity,
}

impl BaselineArg {
    fn name(self) -> &'static str {
        match self {
            BaselineArg::ConstantPose => "constant_pose",
            BaselineArg::ConstantVelocity => "constant_velocity",
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained model; may be repeated.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Comma-separated naive baselines to include.
    #[arg(long, value_enum, value_delimiter = ',')]
    baselines: Vec<BaselineArg>,
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed for diffusion checkpoints; defaults to each one's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Forecast horizon to slice the data with.
    #[arg(long)]
    future: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Per-method report CSV; may be repeated. The file stem names the method.
    #[arg(long, required = true)]
    report: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of metrics; all by default.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: serde_json::Value,
    window: WindowConfig,
    max_gap: usize,
    train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            model: serde_json::Value::Null,
            window: WindowConfig::default(),
            max_gap: DEFAULT_MAX_GAP,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateFile {
    window: Option<WindowConfig>,
    max_gap: usize,
}

impl Default for EvaluateFile {
    fn default() -> Self {
        Self {
            window: None,
            max_gap: DEFAULT_MAX_GAP,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => plot_reports(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn config_error(e: Error) -> Failure {
    Failure::config(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).or_exit(EXIT_DATA, dir)?;
    }
    std::fs::write(path, contents).or_exit(EXIT_DATA, path)
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let (mut cfg, _) = config::load::<SyntheticConfig>(a.config.as_deref(), "generate.json")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_trajectories {
        cfg.n_trajectories = n;
    }
    if let Some(l) = a.length {
        cfg.length = l;
    }
    cfg.validate().map_err(config_error)?;
    let records = generate_synthetic(&cfg).map_err(config_error)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).or_exit(EXIT_DATA, dir)?;
    }
    save_jsonl(&records, &a.out).or_exit(EXIT_DATA, &a.out)?;
    config::echo(&cfg, &config::sibling(&a.out, "config.json"))?;

    let states: usize = records.iter().map(|r| r.len()).sum();
    println!("wrote {} trajectories ({states} states) to {}", records.len(), a.out.display());
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &records {
        let e = per_class.entry(r.class_label.as_str()).or_default();
        e.0 += 1;
        e.1 += r.len();
    }
    for (class, (n, s)) in per_class {
        println!("  {class:<10} {n:>6} trajectories {s:>9} states");
    }
    Ok(())
}

fn load_windows(data: &Path, window: &WindowConfig, max_gap: usize) -> CliResult<Vec<StateWindow>> {
    window.validate().map_err(config_error)?;
    let records = load_jsonl(data).or_exit(EXIT_DATA, data)?;
    let windows = windows_from_records(&records, window, max_gap).or_exit(EXIT_DATA, data)?;
    if windows.is_empty() {
        return Err(Failure::data(format!("{}: no valid windows", data.display())));
    }
    Ok(windows)
}

fn load_checkpoint(path: &Path) -> CliResult<TrainedModel> {
    TrainedModel::load(path).map_err(|e| {
        let code = match e {
            Error::Io(_) => EXIT_DATA,
            _ => EXIT_COMPAT,
        };
        Failure {
            code,
            message: format!("{}: {e}", path.display()),
        }
    })
}

fn train(a: TrainArgs) -> CliResult<()> {
    let (mut file, _) = config::load::<TrainFile>(a.config.as_deref(), "train.json")?;
    let t = &mut file.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.optimizer.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    file.train.validate().map_err(config_error)?;

    let resumed = match &a.resume {
        Some(path) => {
            let tm = load_checkpoint(path)?;
            if let Some(m) = a.model {
                if ModelKind::from(m) != tm.meta.kind {
                    return Err(Failure::compat(format!(
                        "--model {} does not match the {} checkpoint {}",
                        ModelKind::from(m).name(),
                        tm.meta.kind.name(),
                        path.display()
                    )));
                }
            }
            file.model = tm.meta.model.clone();
            file.window = tm.meta.window;
            Some(tm)
        }
        None => None,
    };
    let windows = load_windows(&a.data, &file.window, file.max_gap)?;
    let mut trained = match resumed {
        Some(tm) => tm,
        None => {
            let kind = a.model.map_or(ModelKind::Diffusion, ModelKind::from);
            let model = Model::from_config(kind, &file.model).map_err(config_error)?;
            file.model = model.config_json();
            TrainedModel::initialize(model, &windows, file.window, file.train).map_err(|e| match e {
                Error::InvalidArgument(m) => Failure::compat(m),
                other => config_error(other),
            })?
        }
    };
    config::echo(&file, &config::sibling(&a.out, "config.json"))?;
    println!(
        "training {} on {} windows from {} for {} epochs",
        trained.meta.kind.name(),
        windows.len(),
        a.data.display(),
        file.train.epochs
    );

    let offset = trained.meta.train.epochs;
    let curve = trained.train(&windows, &file.train).map_err(|e| Failure::data(e.to_string()))?;
    trained.save(&a.out).or_exit(EXIT_DATA, &a.out)?;

    let loss_path = a.loss_csv.unwrap_or_else(|| config::sibling(&a.out, "loss.csv"));
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", offset + i + 1);
    }
    write_file(&loss_path, &csv)?;

    match trained.meta.final_loss {
        Some(l) => println!("final loss {l:.6}"),
        None => println!("no epochs run"),
    }
    println!("checkpoint {}", a.out.display());
    println!("loss curve {}", loss_path.display());
    Ok(())
}

/// File-safe method names, disambiguated when two checkpoints share a kind.
fn method_names(models: &[(PathBuf, TrainedModel)]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, m) in models {
        *counts.entry(m.meta.kind.name()).or_default() += 1;
    }
    models
        .iter()
        .map(|(p, m)| {
            let kind = m.meta.kind.name();
            if counts[kind] > 1 {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                format!("{kind}-{stem}")
            } else {
                kind.to_string()
            }
        })
        .collect()
}

struct Named<'a> {
    name: &'a str,
    inner: &'a dyn Forecaster,
}

impl Forecaster for Named<'_> {
    fn name(&self) -> &str {
        self.name
    }

    fn horizon(&self) -> Option<usize> {
        self.inner.horizon()
    }

    fn forecast_batch(
        &self,
        windows: &[&StateWindow],
        horizon: usize,
        batch: usize,
    ) -> vcr_core::Result<Vec<Vec<vcr_core::VisuomotorState>>> {
        self.inner.forecast_batch(windows, horizon, batch)
    }
}

#[derive(Serialize)]
struct EvaluateEcho<'a> {
    data: &'a Path,
    window: WindowConfig,
    max_gap: usize,
    checkpoints: &'a [PathBuf],
    baselines: Vec<&'static str>,
    seed: Option<u64>,
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let (file, _) = config::load::<EvaluateFile>(a.config.as_deref(), "evaluate.json")?;
    let mut models = Vec::new();
    for p in &a.checkpoint {
        let mut tm = load_checkpoint(p)?;
        if let Some(s) = a.seed {
            tm.sample_seed = s;
        }
        models.push((p.clone(), tm));
    }
    let mut baselines = a.baselines.clone();
    baselines.sort();
    baselines.dedup();
    if models.is_empty() && baselines.is_empty() {
        return Err(Failure::config("nothing to evaluate: pass --checkpoint and/or --baselines"));
    }

    let mut window = file
        .window
        .or_else(|| models.first().map(|(_, m)| m.meta.window))
        .unwrap_or_default();
    if let Some(f) = a.future {
        window.future = f;
    }
    for (p, m) in &models {
        let mw = m.meta.window;
        if mw.future != window.future || mw.observed != window.observed {
            return Err(Failure::compat(format!(
                "{} forecasts {} steps from {} observed, data is sliced into {}+{}",
                p.display(),
                mw.future,
                mw.observed,
                window.observed,
                window.future
            )));
        }
    }
    let windows = load_windows(&a.data, &window, file.max_gap)?;
    std::fs::create_dir_all(&a.out).or_exit(EXIT_DATA, &a.out)?;
    config::echo(
        &EvaluateEcho {
            data: &a.data,
            window,
            max_gap: file.max_gap,
            checkpoints: &a.checkpoint,
            baselines: baselines.iter().map(|b| b.name()).collect(),
            seed: a.seed,
        },
        &a.out.join("effective_config.json"),
    )?;
    println!("evaluating on {} windows from {}", windows.len(), a.data.display());

    let names = method_names(&models);
    let boxed: Vec<Box<dyn Forecaster>> = baselines
        .iter()
        .map(|b| baseline(b.name()).expect("known baseline"))
        .collect();
    let mut methods: Vec<Named> = Vec::new();
    for (name, (_, m)) in names.iter().zip(&models) {
        methods.push(Named { name, inner: m });
    }
    for b in &boxed {
        methods.push(Named { name: b.name(), inner: b.as_ref() });
    }

    let mut reports: Vec<EvalReport> = Vec::new();
    for m in &methods {
        let report = evaluate_forecaster(m, &windows).map_err(|e| Failure::compat(format!("{}: {e}", m.name)))?;
        write_file(&a.out.join(format!("{}.csv", m.name)), &report.to_csv())?;
        let json = report.to_json().map_err(|e| Failure::data(e.to_string()))?;
        write_file(&a.out.join(format!("{}.json", m.name)), &json)?;
        reports.push(report);
    }
    write_file(&a.out.join("comparison.csv"), &comparison_csv(&reports))?;
    let table = comparison_table(&reports);
    write_file(&a.out.join("comparison.txt"), &table)?;
    print!("{table}");
    println!("reports in {}", a.out.display());
    Ok(())
}

fn metric_label(name: &str) -> &'static str {
    match name {
        "pa_mpjpe" => "PA-MPJPE [mm]",
        "head_pos" => "head position [mm]",
        "gaze_pos" => "gaze position [mm]",
        "hand_pos" => "hand position [mm]",
        _ => "head rotation [deg]",
    }
}

fn plot_reports(a: PlotArgs) -> CliResult<()> {
    let metrics: Vec<String> = if a.metrics.is_empty() {
        METRIC_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        a.metrics.clone()
    };
    for m in &metrics {
        if !METRIC_NAMES.contains(&m.as_str()) {
            return Err(Failure::config(format!(
                "unknown metric `{m}`; expected one of {}",
                METRIC_NAMES.join(", ")
            )));
        }
    }
    let mut series = Vec::new();
    for path in &a.report {
        let text = std::fs::read_to_string(path).or_exit(EXIT_DATA, path)?;
        let table = parse_report_csv(&text).or_exit(EXIT_CONFIG, path)?;
        let method = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for m in &metrics {
            series.push(plot::Series {
                label: if metrics.len() == 1 { method.clone() } else { format!("{method} {}", metric_label(m)) },
                values: table.per_step.iter().map(|s| s.get(m).expect("known metric")).collect(),
            });
        }
    }
    let y_label = if metrics.len() == 1 { metric_label(&metrics[0]) } else { "error [mm or deg]" };
    let svg = plot::line_chart("Forecast error by prediction step", y_label, &series);
    write_file(&a.out, &svg)?;
    println!("wrote {} lines to {}", series.len(), a.out.display());
    Ok(())
}
