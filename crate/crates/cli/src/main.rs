use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otunmix::data::{generate_synthetic, load_dataset, load_spectral_library, synthetic_library, Dataset, SynthConfig};
use otunmix::io::{self, read_named_columns_csv, read_points_csv};
use otunmix::losses::LossKind;
use otunmix::model::ModelParams;
use otunmix::numerics::DirichletSpec;
use otunmix::plot::{endmember_svg, Series};
use otunmix::sinkhorn::{sinkhorn_divergence, DiscreteMeasure, GroundCost, SinkhornConfig};
use otunmix::trainer::{bench, evaluate_params, train_with, write_run_dir, InitKind, RunOptions, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "otunmix", version, about = "Blind hyperspectral unmixing with an OT-regularized autoencoder")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic spectral library CSV (one named column per material).
    MakeLibrary(MakeLibraryArgs),
    /// Generate a synthetic linear-mixture dataset from a spectral library.
    Synth(SynthArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run against a dataset.
    Eval(EvalArgs),
    /// Train several seeds and summarize the best runs by endmember SAD.
    Bench(BenchArgs),
    /// Sinkhorn divergence between two CSV point clouds.
    Sinkhorn(SinkhornArgs),
    /// Plot endmember spectra as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct MakeLibraryArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 224)]
    bands: usize,
    #[arg(long, default_value_t = 12)]
    materials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Spectral library CSV: header of material names, one row per band.
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with SynthConfig keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated Dirichlet parameters.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    max_purity: Option<f64>,
    /// Signal-to-noise ratio in dB, or `inf` for noiseless data.
    #[arg(long, value_parser = parse_snr)]
    snr_db: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated library columns to use as endmembers.
    #[arg(long, value_delimiter = ',')]
    endmembers: Option<Vec<String>>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// JSON file with TrainConfig keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated Dirichlet parameters of the abundance prior.
    #[arg(long, value_delimiter = ',')]
    target_alpha: Option<Vec<f64>>,
    #[arg(long)]
    target_samples: Option<usize>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Two comma-separated hidden widths, e.g. 27,18.
    #[arg(long, value_parser = parse_hidden)]
    hidden: Option<[usize; 2]>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// NFINDR restarts for the decoder initialization.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    /// Divide every pixel by its maximum before training.
    #[arg(long)]
    normalize: bool,
    /// Log every batch at debug level.
    #[arg(long)]
    log_batches: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the metrics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    top: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Directory for bench.csv and bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the full report as JSON instead of the summary table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SinkhornArgs {
    /// Headerless CSV, one point per row.
    mu: PathBuf,
    nu: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Use squared Euclidean ground cost.
    #[arg(long)]
    squared: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Estimated endmembers CSV.
    #[arg(long)]
    endmembers: PathBuf,
    /// Ground-truth endmembers CSV drawn dashed.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Endmember spectra")]
    title: String,
}

enum CliError {
    Usage(String),
    Runtime(otunmix::Error),
}

impl From<otunmix::Error> for CliError {
    fn from(e: otunmix::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn parse_snr(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        other => other.parse::<f64>().map_err(|e| format!("{s:?}: {e}")),
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: otunmix::Error| e.to_string())
}

fn parse_init(s: &str) -> Result<InitKind, String> {
    s.parse().map_err(|e: otunmix::Error| e.to_string())
}

fn parse_hidden(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 2]>::try_from(parts).map_err(|_| "expected two comma-separated widths".to_string())
}

fn echo_config(name: &str, value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    eprintln!("resolved {name} config:\n{text}");
}

fn read_json_value(path: &Path) -> CliResult<serde_json::Value> {
    Ok(io::read_json(path)?)
}

fn from_value<T: serde::de::DeserializeOwned>(v: serde_json::Value, path: &Path) -> CliResult<T> {
    serde_json::from_value(v).map_err(|source| {
        CliError::Runtime(otunmix::Error::Json {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn alpha(values: Vec<f64>) -> CliResult<DirichletSpec> {
    DirichletSpec::new(values).map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_make_library(a: MakeLibraryArgs) -> CliResult<()> {
    echo_config(
        "make-library",
        &json!({"bands": a.bands, "materials": a.materials, "seed": a.seed}),
    );
    let lib = synthetic_library(a.bands, a.materials, a.seed)?;
    lib.save(&a.out)?;
    println!("wrote {} spectra x {} bands to {}", a.materials, a.bands, a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => from_value::<SynthConfig>(read_json_value(p)?, p)?,
        None => SynthConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
        if a.alpha.is_none() && cfg.alpha.k() != k {
            cfg.alpha = alpha(vec![cfg.alpha.alpha()[0]; k])?;
        }
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = alpha(v)?;
    }
    if let Some(v) = a.max_purity {
        cfg.max_purity = v;
    }
    if let Some(v) = a.snr_db {
        cfg.snr_db = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.endmembers.is_some() {
        cfg.endmember_names = a.endmembers;
    }
    echo_config("synth", &serde_json::to_value(&cfg).expect("config serializes"));
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let lib = load_spectral_library(&a.library)?;
    let ds = generate_synthetic(&lib, &cfg)?;
    ds.save(&a.out)?;
    let snr = ds.realized_snr_db().map_or("inf".to_string(), |v| format!("{v:.2}"));
    println!(
        "wrote {} pixels x {} bands, endmembers [{}], realized SNR {snr} dB to {}",
        ds.n(),
        ds.l(),
        ds.meta.endmember_names.join(", "),
        a.out.display()
    );
    Ok(())
}

/// Default, then config file, then flags. An unset `target_alpha` follows
/// the dataset's endmember count.
fn resolve_train(flags: &TrainFlags, ds: &Dataset) -> CliResult<(TrainConfig, RunOptions)> {
    let (mut cfg, alpha_given) = match &flags.config {
        Some(p) => {
            let v = read_json_value(p)?;
            let given = v.get("target_alpha").is_some();
            (from_value::<TrainConfig>(v, p)?, given)
        }
        None => (TrainConfig::default(), false),
    };
    let f = flags.clone();
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { cfg.$field = v; } )* };
    }
    set!(epochs, batch_size, lambda_reg, learning_rate, momentum, epsilon, target_samples, loss, init, seed);
    if let Some(h) = f.hidden {
        cfg.hidden = Some(h);
    }
    match f.target_alpha {
        Some(v) => cfg.target_alpha = alpha(v)?,
        None if !alpha_given => {
            if let Some(k) = ds.meta.k.filter(|&k| k != cfg.k()) {
                cfg.target_alpha = alpha(vec![4.0; k])?;
            }
        }
        None => {}
    }
    let opts = RunOptions {
        normalize_pixels: f.normalize,
        log_batches: f.log_batches,
        nfindr_restarts: f.restarts as usize,
        ..RunOptions::default()
    };
    let mut echo = serde_json::to_value(&cfg).expect("config serializes");
    echo["normalize"] = json!(opts.normalize_pixels);
    echo["restarts"] = json!(opts.nfindr_restarts);
    echo_config("train", &echo);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((cfg, opts))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunInfo {
    normalize: bool,
    restarts: usize,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let (cfg, opts) = resolve_train(&a.flags, &ds)?;
    let res = train_with(&ds, &cfg, &opts)?;
    let metrics = evaluate_params(&res.params, &ds, res.ot_divergence_final(), &opts)?;
    write_run_dir(&a.out, &res, &metrics, &ds, &cfg)?;
    io::write_json(
        &a.out.join("run.json"),
        &RunInfo {
            normalize: opts.normalize_pixels,
            restarts: opts.nfindr_restarts,
        },
    )?;
    let c = res.constraints;
    if c.unconverged_solves > 0 {
        log::warn!("{} Sinkhorn solves stopped at max_iters", c.unconverged_solves);
    }
    match metrics.mean_sad {
        Some(sad) => println!("mean SAD {sad:.4} rad, recon MSE {:.6e}; wrote {}", metrics.recon_mse, a.out.display()),
        None => println!("recon MSE {:.6e}; wrote {}", metrics.recon_mse, a.out.display()),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    echo_config(
        "eval",
        &json!({"run": a.run.display().to_string(), "data": a.data.display().to_string()}),
    );
    let ds = load_dataset(&a.data)?;
    let params = ModelParams::load(&a.run.join("model"))?;
    let info_path = a.run.join("run.json");
    let normalize = if info_path.exists() {
        io::read_json::<RunInfo>(&info_path)?.normalize
    } else {
        false
    };
    // The last OT value is a training statistic; carry it over from the run.
    let previous = a.run.join("metrics.json");
    let ot_final = if previous.exists() {
        io::read_json::<otunmix::trainer::Metrics>(&previous)?.ot_divergence_final
    } else {
        None
    };
    let opts = RunOptions {
        normalize_pixels: normalize,
        ..RunOptions::default()
    };
    let metrics = evaluate_params(&params, &ds, ot_final, &opts)?;
    if let Some(out) = &a.out {
        io::write_json(out, &metrics)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    if ds.m_true.is_none() {
        return Err(CliError::Runtime(otunmix::Error::InvalidArgument(format!(
            "{} has no ground-truth endmembers",
            a.data.display()
        ))));
    }
    if a.top > a.runs {
        return Err(CliError::Usage(format!("--top {} exceeds --runs {}", a.top, a.runs)));
    }
    let (cfg, opts) = resolve_train(&a.flags, &ds)?;
    eprintln!("bench: runs {}, top {}, jobs {}", a.runs, a.top, a.jobs);
    let report = bench(&ds, &cfg, a.runs as usize, a.top as usize, a.jobs as usize, &opts)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| otunmix::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let csv = dir.join("bench.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| otunmix::Error::Io { path: csv, source: e })?;
        io::write_json(&dir.join("bench.json"), &report)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.summary());
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn cmd_sinkhorn(a: SinkhornArgs) -> CliResult<()> {
    let cfg = SinkhornConfig {
        epsilon: a.epsilon,
        tol: a.tol,
        max_iters: a.max_iters,
        cost: if a.squared { GroundCost::SquaredEuclidean } else { GroundCost::Euclidean },
    };
    echo_config("sinkhorn", &serde_json::to_value(cfg).expect("config serializes"));
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mu = DiscreteMeasure::uniform(read_points_csv(&a.mu)?)?;
    let nu = DiscreteMeasure::uniform(read_points_csv(&a.nu)?)?;
    let div = sinkhorn_divergence(&mu, &nu, &cfg)?;
    if a.json {
        let out = json!({
            "divergence": div.value,
            "w_mu_nu": div.w_xy,
            "w_mu_mu": div.w_xx,
            "w_nu_nu": div.w_yy,
            "epsilon": cfg.epsilon,
            "converged": div.converged,
            "iterations": div.iters,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("JSON serializes"));
    } else {
        println!("S_eps     = {:e}", div.value);
        println!("W(mu, nu) = {:e}", div.w_xy);
        println!("W(mu, mu) = {:e}", div.w_xx);
        println!("W(nu, nu) = {:e}", div.w_yy);
        if !div.converged {
            println!("warning: some solves stopped at max_iters ({:?})", div.iters);
        }
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CliResult<()> {
    echo_config(
        "plot",
        &json!({
            "endmembers": a.endmembers.display().to_string(),
            "truth": a.truth.as_ref().map(|p| p.display().to_string()),
            "out": a.out.display().to_string(),
            "title": a.title,
        }),
    );
    let (names, values) = read_named_columns_csv(&a.endmembers)?;
    let truth = a.truth.as_ref().map(|p| read_named_columns_csv(p)).transpose()?;
    let svg = endmember_svg(
        Series {
            names: &names,
            values: &values,
        },
        truth.as_ref().map(|(n, v)| Series { names: n, values: v }),
        &a.title,
    )?;
    fs::write(&a.out, svg).map_err(|e| otunmix::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::MakeLibrary(a) => cmd_make_library(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sinkhorn(a) => cmd_sinkhorn(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
