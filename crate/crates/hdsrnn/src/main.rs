//! Command-line entry point: batch experiment runner producing file
//! artifacts (CSV panels, checkpoints, reports, plot-ready CSVs).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdsrnn::config::ExperimentConfig;
use hdsrnn::error::{Error, Result};
use hdsrnn::eval::{
    export_spatial_weights, sweep_decoder_length, sweep_encoder_length, write_attention_csv,
    write_decoder_sweep_csv, write_encoder_sweep_csv,
};
use hdsrnn::model::{Checkpoint, CheckpointPreprocessing, HdsRnn};
use hdsrnn::pipeline::{
    apply_pretreatment, prepare, split_from_ratio, windowize, SeriesPanel,
};
use hdsrnn::synthdata::{
    default_wds_generator, default_wds_spec, generate_panel, GeneratorConfig, NetworkSpec,
};
use hdsrnn::training::{fit, grid_search};

#[derive(Parser)]
#[command(
    name = "hdsrnn",
    version,
    about = "Attention-based forecasting toolkit for geo-sensory panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file (generate) or directory (everything else).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress wall-clock metadata so outputs are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sensor panel CSV.
    Generate(GenerateArgs),
    /// Fit the pretreatment chain on a panel and save it.
    Preprocess(PreprocessArgs),
    /// Train a model (optionally after a grid search) and save checkpoint + report.
    Train,
    /// Re-evaluate a saved checkpoint against a panel CSV.
    Evaluate(EvaluateArgs),
    /// Train/evaluate across encoder or decoder lengths and emit plot CSVs.
    Sweep(SweepArgs),
    /// Average a trained model's spatial attention weights over the test split.
    ExportAttention(ExportAttentionArgs),
    /// Run a reference forecaster on the configured data.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Network specification JSON.
    #[arg(long, conflicts_with = "default_wds")]
    spec: Option<PathBuf>,
    /// Use the built-in 18-sensor network.
    #[arg(long)]
    default_wds: bool,
    /// Panel length in 30-minute steps.
    #[arg(long)]
    length: usize,
    /// Also write the network specification as JSON.
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Panel CSV to fit on.
    #[arg(long)]
    data: PathBuf,
    /// Seasonal slots per cycle.
    #[arg(long, default_value_t = 48)]
    period: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Panel CSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// `encoder_length` or `decoder_length`.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// One training run per seed per value; medians are reported.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Network specification JSON for distance annotation.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    /// persistence | seasonal-naive | linear-ar | mlp | seq2seq
    #[arg(long)]
    kind: String,
    /// Autoregression order for linear-ar.
    #[arg(long, default_value_t = 8)]
    order: usize,
    /// Hidden layer widths for mlp.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64])]
    hidden: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(&cli, args),
        Command::Preprocess(args) => cmd_preprocess(&cli, args),
        Command::Train => cmd_train(&cli),
        Command::Evaluate(args) => cmd_evaluate(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args),
        Command::ExportAttention(args) => cmd_export_attention(&cli, args),
        Command::Baseline(args) => cmd_baseline(&cli, args),
    }
}

fn out_dir(cli: &Cli, config: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| Error::Config("no output directory; pass --out".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_experiment(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut config = ExperimentConfig::from_toml_file(path)?;
    if let Some(seed) = cli.seed {
        config.train.rng_seed = seed;
    }
    if cli.deterministic {
        config.train.deterministic = true;
    }
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((config, base))
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("generate needs --out <csv path>".into()))?;
    let seed = cli.seed.unwrap_or(0);
    let (spec, gen_config) = if args.default_wds {
        (default_wds_spec(), default_wds_generator(args.length, seed))
    } else {
        let path = args
            .spec
            .as_ref()
            .ok_or_else(|| Error::Config("pass --default-wds or --spec <json>".into()))?;
        (
            NetworkSpec::from_json_file(path)?,
            GeneratorConfig::new(args.length, seed),
        )
    };
    let panel = generate_panel(&spec, &gen_config)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    panel.write_csv(&out)?;
    if let Some(spec_out) = &args.spec_out {
        spec.to_json_file(spec_out)?;
    }
    println!(
        "wrote {} ({} sensors x {} steps)",
        out.display(),
        panel.n_sensors(),
        panel.len()
    );
    Ok(())
}

fn cmd_preprocess(cli: &Cli, args: &PreprocessArgs) -> Result<()> {
    let dir = out_dir(cli, None)?;
    let panel = SeriesPanel::read_csv(&args.data)?;
    let data = prepare(&panel, args.period)?;
    data.decomp.to_json_file(&dir.join("decomposition.json"))?;
    data.processed.write_csv(&dir.join("processed.csv"))?;
    println!("wrote {}", dir.join("decomposition.json").display());
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let (config, base) = load_experiment(cli)?;
    let dir = out_dir(cli, Some(&config))?;
    let (panel, _) = config.load_panel(&base)?;
    let target = panel.sensor_index(&config.target_sensor)?;
    let data = prepare(&panel, config.period)?;

    let mut model_config = config.model.resolve(panel.n_sensors(), target);
    if let Some(grid) = &config.grid {
        let report = grid_search(&model_config, grid, &config.train, &data)?;
        report.to_json_file(&dir.join("grid_report.json"))?;
        if let Some(best) = report.best() {
            model_config = best.config.clone();
            println!(
                "grid search: {} trials, best validation MSE at trial {}",
                report.trials.len(),
                best.trial
            );
        }
    }

    let (model, report) = fit(&model_config, &config.train, &data)?;
    let preprocessing = CheckpointPreprocessing {
        decomposition: data.decomp.clone(),
        target_sensor_id: config.target_sensor.clone(),
        split_ratio: config.split_ratio,
    };
    model
        .to_checkpoint(Some(preprocessing))
        .to_json_file(&dir.join("checkpoint.json"))?;
    report.to_json_file(&dir.join("report.json"))?;
    std::fs::write(dir.join("resolved_config.toml"), config.to_toml_string()?)?;
    println!(
        "trained {} epochs, best validation MSE {:.6e}, test MSE {:.6e} (residual scale)",
        report.epochs.len(),
        report.best_val_mse,
        report.test_residual.mse
    );
    Ok(())
}

/// Rebuild the prepared data for a checkpoint: same decomposition, same
/// split convention, no re-fitting.
fn data_for_checkpoint(
    ckpt: &Checkpoint,
    csv: &Path,
) -> Result<(hdsrnn::pipeline::PreparedData, usize)> {
    let pre = ckpt.preprocessing.as_ref().ok_or_else(|| {
        Error::Config("checkpoint carries no preprocessing state; retrain with the CLI".into())
    })?;
    let mut panel = SeriesPanel::read_csv(csv)?;
    let ratio = (
        pre.split_ratio[0],
        pre.split_ratio[1],
        pre.split_ratio[2],
    );
    panel.set_split(split_from_ratio(panel.len(), ratio)?)?;
    let target = panel.sensor_index(&pre.target_sensor_id)?;
    let data = apply_pretreatment(&panel, &pre.decomposition)?;
    Ok((data, target))
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let dir = out_dir(cli, None)?;
    let ckpt = Checkpoint::from_json_file(&args.checkpoint)?;
    let model = HdsRnn::from_checkpoint(&ckpt)?;
    let (data, target) = data_for_checkpoint(&ckpt, &args.data)?;
    let windows = windowize(
        &data,
        model.config().encoder_length,
        model.config().decoder_length,
        target,
    )?;
    let outcome =
        hdsrnn::eval::evaluate_forecaster(&model, &windows.test, Some(&data.decomp), target)?;
    let text = serde_json::to_string_pretty(&outcome)?;
    std::fs::write(dir.join("evaluation.json"), text)?;
    println!(
        "test MSE {:.6e} (residual), {} windows",
        outcome.residual.mse, outcome.residual.n_windows
    );
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let (config, base) = load_experiment(cli)?;
    let dir = out_dir(cli, Some(&config))?;
    let (panel, _) = config.load_panel(&base)?;
    let target = panel.sensor_index(&config.target_sensor)?;
    let data = prepare(&panel, config.period)?;
    let template = config.model.resolve(panel.n_sensors(), target);
    let seeds = if args.seeds.is_empty() {
        vec![config.train.rng_seed]
    } else {
        args.seeds.clone()
    };
    match args.param.as_str() {
        "encoder_length" => {
            let result =
                sweep_encoder_length(&template, &config.train, &data, &args.values, &seeds)?;
            write_encoder_sweep_csv(&dir.join("fig3_encoder_sweep.csv"), &result)?;
            result.to_json_file(&dir.join("encoder_sweep.json"))?;
            println!("wrote {}", dir.join("fig3_encoder_sweep.csv").display());
        }
        "decoder_length" => {
            let result =
                sweep_decoder_length(&template, &config.train, &data, &args.values, &seeds)?;
            write_decoder_sweep_csv(&dir.join("fig5_decoder_sweep.csv"), &result)?;
            result.to_json_file(&dir.join("decoder_sweep.json"))?;
            println!("wrote {}", dir.join("fig5_decoder_sweep.csv").display());
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (use encoder_length or decoder_length)"
            )))
        }
    }
    Ok(())
}

fn cmd_export_attention(cli: &Cli, args: &ExportAttentionArgs) -> Result<()> {
    let dir = out_dir(cli, None)?;
    let ckpt = Checkpoint::from_json_file(&args.checkpoint)?;
    let model = HdsRnn::from_checkpoint(&ckpt)?;
    let (data, target) = data_for_checkpoint(&ckpt, &args.data)?;
    let windows = windowize(
        &data,
        model.config().encoder_length,
        model.config().decoder_length,
        target,
    )?;
    let network = match &args.network {
        Some(path) => Some(NetworkSpec::from_json_file(path)?),
        None => None,
    };
    let summary = export_spatial_weights(
        &model,
        &windows.test,
        data.processed.sensors(),
        network.as_ref(),
    )?;
    write_attention_csv(&dir.join("fig4_attention_weights.csv"), &summary)?;
    summary.to_json_file(&dir.join("attention.json"))?;
    println!("wrote {}", dir.join("fig4_attention_weights.csv").display());
    Ok(())
}

fn cmd_baseline(cli: &Cli, args: &BaselineArgs) -> Result<()> {
    let (config, base) = load_experiment(cli)?;
    let dir = out_dir(cli, Some(&config))?;
    let (panel, _) = config.load_panel(&base)?;
    let target = panel.sensor_index(&config.target_sensor)?;
    let data = prepare(&panel, config.period)?;
    let spec = match args.kind.as_str() {
        "persistence" => hdsrnn::baselines::BaselineSpec::Persistence,
        "seasonal-naive" => hdsrnn::baselines::BaselineSpec::SeasonalNaive {
            period: config.period,
        },
        "linear-ar" => hdsrnn::baselines::BaselineSpec::LinearAr { order: args.order },
        "mlp" => hdsrnn::baselines::BaselineSpec::Mlp {
            hidden: args.hidden.clone(),
        },
        "seq2seq" => hdsrnn::baselines::BaselineSpec::Seq2Seq,
        other => {
            return Err(Error::Config(format!(
                "unknown baseline `{other}` (persistence, seasonal-naive, linear-ar, mlp, seq2seq)"
            )))
        }
    };
    let windows = windowize(
        &data,
        config.model.encoder_length,
        config.model.decoder_length,
        target,
    )?;
    let report = hdsrnn::baselines::run_baseline(&spec, &data, &windows, &config.train)?;
    report.to_json_file(&dir.join(format!("baseline_{}.json", report.kind)))?;
    println!(
        "{}: test MSE {:.6e} (residual scale)",
        report.kind, report.outcome.residual.mse
    );
    Ok(())
}
