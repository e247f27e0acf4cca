//! Command-line front end: dataset generation, training, evaluation,
//! ablations, the expert-count sweep, and stability diagnostics.
//!
//! Every failure exits nonzero after printing a machine-readable error JSON
//! to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fame_core::data::{load_csv, make_case, save_csv, write_manifest, GenSpec, PointsSpec};
use fame_core::harness::{
    estimate_lipschitz, eval_mse, parse_config_file, routing_entropy, run_experiment,
    train as train_run, ExperimentOpts, TrainConfig,
};
use fame_core::model::FameParams;
use fame_core::Result;

#[derive(Parser)]
#[command(
    name = "fame",
    about = "Function-on-function regression with bidirectional neural CDEs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic case id (1-8).
    #[arg(long)]
    case: usize,
    /// Output CSV path (a .manifest.json is written next to it).
    #[arg(long)]
    out: PathBuf,
    /// Sample count (default: the case's standard 200).
    #[arg(long, default_value_t = 0)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override input channel count.
    #[arg(long)]
    d: Option<usize>,
    /// Override noise level lambda.
    #[arg(long)]
    noise: Option<f64>,
    /// Override RBF kernel widths (comma separated, cycled over channels).
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Override input observation counts (one value, or several to draw
    /// per-sample resolutions).
    #[arg(long, value_delimiter = ',')]
    in_points: Option<Vec<usize>>,
    /// Override output observation count.
    #[arg(long)]
    out_points: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Optional directory for metrics/epoch dumps.
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where to write predictions CSV (stdout summary only when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// case1..case8, ablation, sweep-k, or custom-csv.
    #[arg(long, default_value = "")]
    name: String,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset sizes for the case experiments.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Expert counts for sweep-k.
    #[arg(long, value_delimiter = ',')]
    k_values: Option<Vec<usize>>,
    /// CSV dataset for custom-csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LipschitzArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Perturbation sizes (1-variation of the input bump).
    #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1])]
    deltas: Vec<f64>,
    /// Number of samples probed per delta.
    #[arg(long, default_value_t = 8)]
    probes: usize,
    /// Optional JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen(GenArgs),
    /// Train a model on a CSV dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a CSV dataset.
    Eval(EvalArgs),
    /// Run the four-variant ablation battery on case-1 data.
    Ablate(ExperimentArgs),
    /// Sweep the expert count on case-8 data.
    #[command(name = "sweep-k")]
    SweepK(ExperimentArgs),
    /// Run a named experiment (case1..case8, ablation, sweep-k, custom-csv).
    Experiment(ExperimentArgs),
    /// Estimate the empirical input-to-output stability ratios.
    Lipschitz(LipschitzArgs),
}

fn load_train_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => parse_config_file(p)?,
        None => TrainConfig::new(1, 1),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut spec = GenSpec::for_case(args.case, args.n, args.seed)?;
    if let Some(d) = args.d {
        spec.d = d;
    }
    if let Some(noise) = args.noise {
        spec.lambda = noise;
    }
    if let Some(sigmas) = args.sigmas {
        spec.sigmas = sigmas;
    }
    if let Some(points) = args.in_points {
        spec.in_points = if points.len() == 1 {
            PointsSpec::Fixed(points[0])
        } else {
            PointsSpec::Choices(points)
        };
    }
    if let Some(out_points) = args.out_points {
        spec.out_points = out_points;
    }
    let ds = make_case(&spec)?;
    save_csv(&ds, &args.out)?;
    let manifest = args.out.with_extension("manifest.json");
    write_manifest(&ds, &args.out, &manifest)?;
    eprintln!(
        "wrote {} samples (d={}, m={}) to {} (+ {})",
        ds.len(),
        ds.d(),
        ds.m(),
        args.out.display(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_train_config(&args.config, args.seed)?;
    let ds = load_csv(&args.data)?;
    let result = train_run(&cfg, &ds)?;
    result.params.save(&args.ckpt)?;
    if let Some(outdir) = &args.outdir {
        std::fs::create_dir_all(outdir)?;
        std::fs::write(
            outdir.join("metrics.json"),
            serde_json::to_string_pretty(&result.metrics)?,
        )?;
        let mut epochs = String::from("epoch,train_loss\n");
        for (e, l) in result.metrics.train_loss.iter().enumerate() {
            epochs.push_str(&format!("{e},{l}\n"));
        }
        std::fs::write(outdir.join("epochs.csv"), epochs)?;
    }
    if let Some(epoch) = result.diverged_at {
        eprintln!("training diverged at epoch {epoch}; checkpoint holds the last finite state");
    }
    eprintln!(
        "test mse {:.6}, pooled routing entropy {:.4}, wall clock {:.1}s",
        result.metrics.test_mse, result.metrics.entropy_pooled, result.metrics.wall_clock_s
    );
    println!("{}", serde_json::json!({ "test_mse": result.metrics.test_mse }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let params = FameParams::load(&args.ckpt)?;
    let ds = load_csv(&args.data)?;
    let mse = eval_mse(&params, &ds)?;
    let (per_channel, pooled) = routing_entropy(&params, &ds)?;
    if let Some(out) = &args.out {
        let mut body = String::from("sample_id,channel,t,y_true,y_pred\n");
        for (i, s) in ds.samples.iter().enumerate() {
            let queries: Vec<Vec<f64>> = s
                .outputs
                .iter()
                .map(|o| o.times.iter().map(|t| t / o.horizon).collect())
                .collect();
            let preds = params.predict(&s.inputs, &queries)?;
            for (z, (o, p)) in s.outputs.iter().zip(&preds).enumerate() {
                for ((t, y), yp) in o.times.iter().zip(&o.values).zip(p) {
                    body.push_str(&format!("{i},{z},{t},{y},{yp}\n"));
                }
            }
        }
        std::fs::write(out, body)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "test_mse": mse,
            "routing_entropy_pooled": pooled,
            "routing_entropy_per_channel": per_channel,
        })
    );
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs, forced_name: Option<&str>) -> Result<()> {
    let config = load_train_config(&args.config, args.seed)?;
    let opts = ExperimentOpts {
        name: forced_name.map(str::to_string).unwrap_or_else(|| args.name.clone()),
        outdir: args.outdir.clone(),
        config,
        sizes: args.sizes.clone(),
        k_values: args.k_values.clone(),
        data: args.data.clone(),
    };
    let reports = run_experiment(&opts)?;
    for r in &reports {
        eprintln!(
            "{}: fame mse {:.6}{}",
            r.run,
            r.fame_test_mse,
            r.baseline_test_mse
                .map(|b| format!(", ridge baseline {b:.6}"))
                .unwrap_or_default()
        );
    }
    println!("{}", serde_json::to_string_pretty(&reports)?);
    Ok(())
}

fn cmd_lipschitz(args: LipschitzArgs) -> Result<()> {
    let params = FameParams::load(&args.ckpt)?;
    let ds = load_csv(&args.data)?;
    let reports = estimate_lipschitz(&params, &ds, &args.deltas, args.probes)?;
    let l_star = reports.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
    let body = serde_json::json!({
        "table": reports,
        "empirical_lipschitz": l_star,
    });
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&body)?)?;
    }
    println!("{body}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_experiment(args, Some("ablation")),
        Command::SweepK(args) => cmd_experiment(args, Some("sweep-k")),
        Command::Experiment(args) => cmd_experiment(args, None),
        Command::Lipschitz(args) => cmd_lipschitz(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
