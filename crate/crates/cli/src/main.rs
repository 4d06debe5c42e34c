//! `depthcal` command-line workflows.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::Serialize;
use serde_json::json;

use depthcal::data::{gen_synthetic, load_manifest, Manifest};
use depthcal::trainer::{
    caption_sensitivity, evaluate, fit_global_baseline, load_checkpoint, pipeline_grad_check, save_checkpoint, train, Checkpoint,
    Evaluation, ImageRow, Predictor,
};
use depthcal::{fit_oracle, ForwardMode, MetricsReport, Sample64};

use config::{CliConfig, CommonArgs, EvalArgs, ModeArg, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<depthcal::Error> for CliError {
    fn from(e: depthcal::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "depthcal", version, about = "Metric calibration of relative depth maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted synthetic dataset.
    Synth(SynthCmd),
    /// Train both heads and write a checkpoint directory.
    Train(TrainCmd),
    /// Evaluate a checkpoint or the per-image oracle.
    Eval(EvalCmd),
    /// Per-image least-squares fits, raw and clamped, as CSV.
    Oracle(OracleCmd),
    /// Fit one calibration for a whole manifest.
    Global(GlobalCmd),
    /// Finite-difference check of the full training gradient.
    Gradcheck(GradcheckCmd),
    /// Spread of the predicted calibration across each image's captions.
    Sensitivity(SensitivityCmd),
}

#[derive(Args, Debug)]
struct SynthCmd {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synth: SynthArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory to evaluate.
    #[arg(long, conflicts_with = "use_oracle")]
    ckpt: Option<PathBuf>,
    /// Evaluate the per-image least-squares fit instead of a model.
    #[arg(long)]
    use_oracle: bool,
    /// With --use-oracle, skip clamping the fit to the bounds.
    #[arg(long, requires = "use_oracle")]
    unclamped: bool,
    /// Override the checkpoint's composition.
    #[arg(long, value_enum, requires = "ckpt")]
    mode: Option<ModeArg>,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Per-image CSV; defaults to the report path with a .csv extension.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct OracleCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct GlobalCmd {
    /// Manifest the single calibration is fitted on.
    #[arg(long)]
    manifest: PathBuf,
    /// Also evaluate the fitted calibration on this manifest.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Per-image CSV of the evaluation.
    #[arg(long, requires = "eval_manifest")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct SensitivityCmd {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Composition to analyse; defaults to the one the checkpoint was trained with.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Per-image CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

fn setup_threads(common: &CommonArgs) -> CliResult {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn echo(command: &str, config: &CliConfig, options: serde_json::Value) {
    let doc = json!({ "command": command, "config": config, "options": options });
    println!("resolved config: {}", serde_json::to_string(&doc).expect("config serializes"));
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> CliResult {
    let data = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(data)?;
    w.write_record(header).map_err(data)?;
    for r in rows {
        w.serialize(r).map_err(data)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

const IMAGE_HEADER: [&str; 7] = ["id", "alpha", "beta", "alpha_ls", "beta_ls", "abs_rel", "rmse"];

fn write_rows(path: &Path, rows: &[ImageRow]) -> CliResult {
    write_csv(path, rows, &IMAGE_HEADER)
}

fn open_manifest(path: &Path) -> CliResult<Manifest> {
    let m = load_manifest(path)?;
    m.validate()?;
    Ok(m)
}

fn print_metrics(name: &str, r: &MetricsReport) {
    println!(
        "{name}: abs_rel={:.6} rmse={:.6} rmse_log={:.6} log10={:.6} d1={:.4} d2={:.4} d3={:.4} images={}",
        r.abs_rel, r.rmse, r.rmse_log, r.log10, r.d1, r.d2, r.d3, r.n_images
    );
}

fn eval_report(predictor: &str, dataset: &str, ev: &Evaluation) -> serde_json::Value {
    json!({ "predictor": predictor, "dataset": dataset, "metrics": ev.report, "skipped": ev.skipped })
}

fn run_synth(cmd: &SynthCmd) -> CliResult {
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, None, None, Some(&cmd.synth))?;
    echo("synth", &cfg, json!({ "out": cmd.out }));
    let out = gen_synthetic(&cfg.synth, &cmd.out)?;
    println!("wrote {} samples to {}", out.truth.len(), out.manifest_path.display());
    Ok(())
}

fn run_train(cmd: &TrainCmd) -> CliResult {
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, Some(&cmd.train), None, None)?;
    echo("train", &cfg, json!({ "manifest": cmd.manifest, "out": cmd.out }));
    let manifest = open_manifest(&cmd.manifest)?;
    let ckpt: Checkpoint<f64> = train(&manifest, &cfg.train)?;
    save_checkpoint(&cmd.out, &ckpt)?;
    if let Some(last) = ckpt.log.last() {
        println!("final epoch {}: loss={:.6e} depth={:.6e}", last.epoch, last.loss.total, last.loss.depth);
    }
    println!("checkpoint written to {}", cmd.out.display());
    Ok(())
}

fn run_eval(cmd: &EvalCmd) -> CliResult {
    if cmd.ckpt.is_none() && !cmd.use_oracle {
        return Err(CliError::Usage("eval needs --ckpt or --use-oracle".into()));
    }
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, None, Some(&cmd.eval), None)?;
    echo(
        "eval",
        &cfg,
        json!({ "manifest": cmd.manifest, "ckpt": cmd.ckpt, "use_oracle": cmd.use_oracle, "unclamped": cmd.unclamped, "out": cmd.out }),
    );
    let manifest = open_manifest(&cmd.manifest)?;
    let ckpt: Option<Checkpoint<f64>> = cmd.ckpt.as_ref().map(load_checkpoint).transpose()?;
    if let Some(c) = &ckpt {
        c.check_compatible(&manifest)?;
        if c.model.bounds != cfg.bounds {
            warn!("evaluating with the bounds stored in the checkpoint");
        }
    }
    let samples: Vec<Sample64> = manifest.load_samples()?;
    let (predictor, bounds) = match &ckpt {
        Some(c) => {
            let mode = cmd.mode.map_or(c.config.mode, ForwardMode::from);
            (Predictor::Model(&c.model, mode), c.model.bounds)
        }
        None => (Predictor::Oracle { unclamped: cmd.unclamped }, cfg.bounds),
    };
    let ev = evaluate(&samples, &predictor, &bounds, &cfg.eval)?;
    print_metrics(predictor.name(), &ev.report);
    write_json(&cmd.out, &eval_report(predictor.name(), &manifest.header.dataset, &ev))?;
    let csv = cmd.csv.clone().unwrap_or_else(|| cmd.out.with_extension("csv"));
    write_rows(&csv, &ev.rows)
}

#[derive(Serialize)]
struct OracleRow {
    id: String,
    alpha_raw: f64,
    beta_raw: f64,
    alpha_ls: f64,
    beta_ls: f64,
    alpha_tilde: f64,
    beta_tilde: f64,
    n_valid: usize,
    degenerate: bool,
}

fn run_oracle(cmd: &OracleCmd) -> CliResult {
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, None, None, None)?;
    echo("oracle", &cfg, json!({ "manifest": cmd.manifest, "out": cmd.out }));
    let manifest = open_manifest(&cmd.manifest)?;
    let samples: Vec<Sample64> = manifest.load_samples()?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        match fit_oracle(&s.y, &s.gt, &cfg.bounds) {
            Ok(t) => rows.push(OracleRow {
                id: s.id.clone(),
                alpha_raw: t.alpha_raw,
                beta_raw: t.beta_raw,
                alpha_ls: t.alpha_ls,
                beta_ls: t.beta_ls,
                alpha_tilde: t.theta_tilde_star.alpha_tilde,
                beta_tilde: t.theta_tilde_star.beta_tilde,
                n_valid: t.n_valid,
                degenerate: t.degenerate,
            }),
            Err(depthcal::Error::EmptyMask) => warn!("sample {} has no valid pixels; skipped", s.id),
            Err(e) => return Err(e.into()),
        }
    }
    let header = ["id", "alpha_raw", "beta_raw", "alpha_ls", "beta_ls", "alpha_tilde", "beta_tilde", "n_valid", "degenerate"];
    write_csv(&cmd.out, &rows, &header)?;
    println!("{} fits written to {}", rows.len(), cmd.out.display());
    Ok(())
}

fn run_global(cmd: &GlobalCmd) -> CliResult {
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, None, Some(&cmd.eval), None)?;
    echo("global", &cfg, json!({ "manifest": cmd.manifest, "eval_manifest": cmd.eval_manifest, "out": cmd.out }));
    let manifest = open_manifest(&cmd.manifest)?;
    let samples: Vec<Sample64> = manifest.load_samples()?;
    let fit = fit_global_baseline(&samples, &cfg.bounds)?;
    println!("global fit: alpha={:.9} beta={:.9} pixels={}", fit.alpha_ls, fit.beta_ls, fit.n_valid);
    let mut report = json!({ "dataset": manifest.header.dataset, "fit": fit });
    if let Some(path) = &cmd.eval_manifest {
        let held = open_manifest(path)?;
        let held_samples: Vec<Sample64> = held.load_samples()?;
        let predictor = Predictor::Global(fit.clamped());
        let ev = evaluate(&held_samples, &predictor, &cfg.bounds, &cfg.eval)?;
        print_metrics("global", &ev.report);
        report["evaluation"] = eval_report("global", &held.header.dataset, &ev);
        if let Some(csv) = &cmd.csv {
            write_rows(csv, &ev.rows)?;
        }
    }
    write_json(&cmd.out, &report)
}

fn run_gradcheck(cmd: &GradcheckCmd) -> CliResult {
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, None, None, None)?;
    let seed = cmd.common.seed.unwrap_or(0);
    echo("gradcheck", &cfg, json!({ "seed": seed }));
    let rep = pipeline_grad_check(seed)?;
    println!("parameters checked: {}", rep.n_params);
    println!("max relative error: {:e}", rep.max_rel_err);
    if let Some(out) = &cmd.out {
        write_json(out, &rep)?;
    }
    if !rep.passed {
        return Err(CliError::Data(format!("gradient check failed: {:e} > {:e}", rep.max_rel_err, rep.tol)));
    }
    Ok(())
}

fn run_sensitivity(cmd: &SensitivityCmd) -> CliResult {
    setup_threads(&cmd.common)?;
    let cfg = CliConfig::resolve(&cmd.common, None, None, None)?;
    echo("sensitivity", &cfg, json!({ "manifest": cmd.manifest, "ckpt": cmd.ckpt, "out": cmd.out }));
    let manifest = open_manifest(&cmd.manifest)?;
    let ckpt: Checkpoint<f64> = load_checkpoint(&cmd.ckpt)?;
    ckpt.check_compatible(&manifest)?;
    let samples: Vec<Sample64> = manifest.load_samples()?;
    let mode = cmd.mode.map_or(ckpt.config.mode, ForwardMode::from);
    let rep = caption_sensitivity(&samples, &ckpt.model, mode)?;
    println!("{:<14} {:>14} {:>14} {:>14} {:>14}", "mode", "mean ln a", "std ln a", "mean b~", "std b~");
    println!(
        "{:<14} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
        format!("{mode:?}"),
        rep.mean_ln_alpha,
        rep.std_ln_alpha,
        rep.mean_beta_tilde,
        rep.std_beta_tilde
    );
    if let Some(csv) = &cmd.csv {
        let header = ["id", "mean_ln_alpha", "std_ln_alpha", "mean_beta_tilde", "std_beta_tilde"];
        write_csv(csv, &rep.per_image, &header)?;
    }
    write_json(&cmd.out, &rep)
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(c) => run_synth(c),
        Command::Train(c) => run_train(c),
        Command::Eval(c) => run_eval(c),
        Command::Oracle(c) => run_oracle(c),
        Command::Global(c) => run_global(c),
        Command::Gradcheck(c) => run_gradcheck(c),
        Command::Sensitivity(c) => run_sensitivity(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
