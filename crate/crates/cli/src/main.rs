use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mvrd_core::diffcore::ParamStore;
use mvrd_core::experiment::{
    evaluate_checkpoint, log_csv, run_experiment, run_on_clips, train_model, write_artifacts, Arm, ExperimentConfig,
};
use mvrd_core::pipeline::{split_clips, ViewMask};
use mvrd_core::report::{emit_csv, parse_csv, render_table, ResultRow, CSV_HEADER};
use mvrd_core::synth::{read_dataset, write_dataset, BenchmarkSpec, Scenario};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "mvrd", version, about = "Multi-view remote pulse estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view benchmark to disk.
    Generate(GenerateArgs),
    /// Train the fused model on the training split and save its parameters.
    Train(RunArgs),
    /// Score a method on the test split and write metrics, predictions and plots.
    Eval(EvalArgs),
    /// Train and score every component and loss-term arm.
    Ablate(AblateArgs),
    /// Merge metric CSV files into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Benchmark recipe (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Render only this scenario.
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Available cameras, e.g. `lcr`, `cr`, `c`.
    #[arg(long)]
    views: Option<ViewMask>,
    /// Test scenario: stationary, speaking or movement.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Parameters saved by `train` (a `model.mvp` file or its directory);
    /// without it the learned method is trained first.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated subset of arms; all by default.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<Arm>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric CSV files written by `eval` or `ablate`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the merged CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Problems with the command line or configuration files.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = read_json(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.views {
            cfg.views = v;
        }
        if self.scenario.is_some() {
            cfg.scenario = self.scenario;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let mut spec: BenchmarkSpec = read_json(args.config.as_deref())?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(s) = args.scenario {
        spec.scenarios = vec![s];
    }
    let clips = spec.generate()?;
    let manifest = write_dataset(&args.out, &clips)?;
    fs::write(args.out.join("spec.json"), serde_json::to_vec_pretty(&spec)?)?;
    println!("wrote {} clips to {}", manifest.clips.len(), args.out.display());
    Ok(())
}

fn load_clips(cfg: &ExperimentConfig) -> Result<Vec<mvrd_core::synth::LabeledClip>> {
    read_dataset(&cfg.dataset).with_context(|| format!("reading dataset {}", cfg.dataset.display()))
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let clips = load_clips(&cfg)?;
    let (train_clips, _) = split_clips(&clips, cfg.split)?;
    eprintln!("training on {} clips", train_clips.len());
    let out = train_model(&cfg, train_clips)?;
    fs::create_dir_all(&cfg.out_dir)?;
    out.store.save(&cfg.out_dir.join("model.mvp"))?;
    fs::write(cfg.out_dir.join("train_log.csv"), log_csv(&out.log))?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.l_total);
    println!("{} steps, final l_total {last:.6}; saved to {}", out.log.len(), cfg.out_dir.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.run.config()?;
    let outcome = match &args.model {
        None => run_experiment(&cfg)?,
        Some(path) => {
            let file = if path.is_dir() { path.join("model.mvp") } else { path.clone() };
            let ck = ParamStore::<f32>::load(&file)?;
            let outcome = evaluate_checkpoint(&cfg, &load_clips(&cfg)?, &ck)?;
            write_artifacts(&cfg.out_dir, &outcome)?;
            outcome
        }
    };
    print!("{}", render_table(&[outcome.row]));
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let base = args.run.config()?;
    let clips = load_clips(&base)?;
    let arms = if args.arms.is_empty() { Arm::ALL.to_vec() } else { args.arms.clone() };
    let mut csv = format!("arm,{CSV_HEADER}\n");
    let mut rows = Vec::new();
    for arm in arms {
        eprintln!("arm {arm}");
        let cfg = arm.apply(&base);
        let outcome = run_on_clips(&cfg, &clips)?;
        write_artifacts(&base.out_dir.join(arm.name()), &outcome)?;
        for line in emit_csv(&[outcome.row]).lines().skip(1) {
            csv.push_str(&format!("{arm},{line}\n"));
        }
        rows.push((arm, outcome.row));
    }
    fs::write(base.out_dir.join("ablation.csv"), &csv)?;
    for (arm, row) in &rows {
        println!("{:<16} MAE {:.4}  RMSE {:.4}  R {:.4}", arm.name(), row.mae, row.rmse, row.r);
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut rows: Vec<ResultRow> = Vec::new();
    for path in &args.inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        rows.extend(parse_csv(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    print!("{}", render_table(&rows));
    if let Some(out) = &args.out {
        fs::write(out, emit_csv(&rows))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use mvrd_core::Error as E;
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    let core = err.chain().find_map(|e| e.downcast_ref::<E>());
    match core {
        Some(E::Config(_) | E::Parameter(_)) => EXIT_CONFIG,
        Some(E::NonFinite(_) | E::Degenerate(_) | E::NoPulse | E::Graph { .. }) => EXIT_NUMERIC,
        Some(_) => EXIT_DATA,
        // plain I/O failures while reading inputs
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => EXIT_DATA,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
