//! `xlris` — dataset generation, training, evaluation, and parameter
//! reporting for hybrid-field XL-RIS channel estimation.
//!
//! Every subcommand reads an optional `key = value` config file; flags
//! mirror the config keys and override them.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xlris_core::channel::ScenarioConfig;
use xlris_core::config::KvConfig;
use xlris_core::error::Result;
use xlris_core::eval::{
    run_experiment, ClassicalConfig, ExperimentSpec, Method, SweepValues,
};
use xlris_core::measurement::{make_dataset, Dataset, SnrSpec};
use xlris_core::nets::checkpoint::{
    load_checkpoint_full, save_checkpoint, save_checkpoint_with_extras,
};
use xlris_core::train::{train, train_from, train_state_arrays, train_state_from_arrays, TrainConfig};

#[derive(Parser)]
#[command(name = "xlris", about = "Hybrid-field XL-RIS cascaded channel estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel/observation dataset file.
    Generate(GenerateArgs),
    /// Train one of the unrolled networks on a dataset.
    Train(TrainArgs),
    /// Run an evaluation experiment and write a CSV.
    Eval(EvalArgs),
    /// Print the parameter-count table of trained checkpoints.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// `key = value` scenario config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    count: Option<usize>,
    /// Fixed SNR in dB (`inf` for noiseless).
    #[arg(long)]
    snr: Option<String>,
    /// SNR range `lo,hi` in dB (overrides --snr).
    #[arg(long)]
    snr_range: Option<String>,
    /// Pilot slots P.
    #[arg(long)]
    pilots: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file (scenario + training keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model kind: cista | cista_plus | cnncdl.
    #[arg(long)]
    model: Option<String>,
    /// Dataset file produced by `generate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    net_layers: Option<usize>,
    #[arg(long)]
    net_width: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training-log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resume from a `.resume.ckpt` written by a previous run; continues the
    /// same schedule up to --epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// `key = value` config file (scenario + experiment keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// nmse_vs_snr | nmse_vs_pilots | multipath_sweep | layer_sweep |
    /// spectral_efficiency.
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated method list.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated sweep values (SNRs, pilot counts, or powers;
    /// `lf-ln` pairs for multipath_sweep).
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    pilots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// SE noise power σ².
    #[arg(long)]
    se_sigma2: Option<f64>,
    /// Checkpoint binding `method=path`; repeatable. `{p}` in the path
    /// expands to the pilot count.
    #[arg(long = "ckpt")]
    checkpoints: Vec<String>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Checkpoint files.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::from_file(p),
        None => Ok(KvConfig::new()),
    }
}

fn parse_snr(s: &str) -> Result<f64> {
    if s == "inf" || s == "noiseless" {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>().map_err(|_| {
        xlris_core::Error::Config(format!("cannot parse SNR value `{s}`"))
    })
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut kv = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        kv.set("seed", seed.to_string());
    }
    let scenario = ScenarioConfig::from_kv(&kv)?;
    let count = match args.count {
        Some(c) => c,
        None => kv.get_usize("count")?.unwrap_or(1000),
    };
    let pilots = match args.pilots {
        Some(p) => p,
        None => kv.get_usize("pilots")?.unwrap_or(32),
    };
    let snr = if let Some(range) = &args.snr_range {
        let parts: Vec<&str> = range.split(',').collect();
        if parts.len() != 2 {
            return Err(xlris_core::Error::Config(format!(
                "--snr-range expects `lo,hi`, got `{range}`"
            )));
        }
        SnrSpec::Range(parse_snr(parts[0].trim())?, parse_snr(parts[1].trim())?)
    } else if let Some(s) = &args.snr {
        SnrSpec::Fixed(parse_snr(s)?)
    } else if let (Some(lo), Some(hi)) = (kv.get_f64("snr_lo")?, kv.get_f64("snr_hi")?) {
        SnrSpec::Range(lo, hi)
    } else {
        SnrSpec::Fixed(kv.get_f64("snr")?.unwrap_or(0.0))
    };
    let dataset = make_dataset(&scenario, count, snr, pilots, scenario.seed)?;
    dataset.save(&args.out)?;
    println!(
        "wrote {} samples (N={}, M={}, P={pilots}) to {}",
        count,
        scenario.n_bs,
        scenario.m(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut kv = load_config(&args.config)?;
    if let Some(v) = &args.model {
        kv.set("model", v.clone());
    }
    if let Some(v) = &args.dataset {
        kv.set("dataset", v.display().to_string());
    }
    if let Some(v) = args.epochs {
        kv.set("epochs", v.to_string());
    }
    if let Some(v) = args.lr {
        kv.set("lr", v.to_string());
    }
    if let Some(v) = args.batch_size {
        kv.set("batch_size", v.to_string());
    }
    if let Some(v) = args.seed {
        kv.set("train_seed", v.to_string());
    }
    if let Some(v) = args.net_layers {
        kv.set("net_layers", v.to_string());
    }
    if let Some(v) = args.net_width {
        kv.set("net_width", v.to_string());
    }
    if let Some(v) = args.workers {
        kv.set("workers", v.to_string());
    }
    if let Some(v) = &args.out {
        kv.set("checkpoint", v.display().to_string());
    }
    if let Some(v) = &args.log {
        kv.set("log", v.display().to_string());
    }
    let config = TrainConfig::from_kv(&kv)?;
    let dataset_path = config
        .dataset_path
        .clone()
        .ok_or_else(|| xlris_core::Error::Config("no dataset given (--dataset)".into()))?;
    let dataset = Dataset::load(&dataset_path)?;
    println!(
        "training {} on {} samples for {} epochs",
        config.model,
        dataset.samples.len(),
        config.epochs
    );
    let outcome = match &args.resume {
        None => train(&dataset, &config)?,
        Some(path) => {
            let (model, _, arrays) = load_checkpoint_full(path)?;
            let n_params = model.named_tensors().len();
            let (state, next_epoch) = train_state_from_arrays(&arrays, n_params)?;
            println!("resuming at epoch {next_epoch} from {}", path.display());
            train_from(model, Some(state), next_epoch, &dataset, &config)?
        }
    };
    println!(
        "best validation NMSE: {:.2} dB after {} epochs",
        outcome.best_val_nmse_db,
        outcome.log.rows.len()
    );
    if let Some(ckpt) = &config.checkpoint_path {
        let mut meta = dataset.scenario.to_kv();
        meta.set("pilots", dataset.pilots.to_string());
        meta.set("dataset_seed", dataset.base_seed.to_string());
        meta.set("train_seed", config.seed.to_string());
        save_checkpoint(ckpt, &outcome.model, &meta)?;
        // final state plus optimizer arrays, in case the run is extended
        let resume = ckpt.with_extension("resume.ckpt");
        let extras = train_state_arrays(&outcome, outcome.log.rows.len());
        save_checkpoint_with_extras(&resume, &outcome.final_model, &meta, &extras)?;
        println!("checkpoint written to {}", ckpt.display());
    }
    if let Some(log) = &config.log_path {
        outcome.log.append_csv(log)?;
        println!("log appended to {}", log.display());
    }
    Ok(())
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',').map(|t| Method::parse(t.trim())).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut kv = load_config(&args.config)?;
    if let Some(v) = &args.experiment {
        kv.set("experiment", v.clone());
    }
    if let Some(v) = &args.methods {
        kv.set("methods", v.clone());
    }
    if let Some(v) = &args.sweep {
        kv.set("sweep", v.clone());
    }
    if let Some(v) = args.trials {
        kv.set("trials", v.to_string());
    }
    if let Some(v) = args.snr {
        kv.set("eval_snr", v.to_string());
    }
    if let Some(v) = args.pilots {
        kv.set("pilots", v.to_string());
    }
    if let Some(v) = args.seed {
        kv.set("eval_seed", v.to_string());
    }
    if let Some(v) = args.se_sigma2 {
        kv.set("se_sigma2", v.to_string());
    }
    let scenario = ScenarioConfig::from_kv(&kv)?;
    let methods = match kv.get("methods") {
        Some(m) => parse_methods(m)?,
        None => vec![Method::Ols],
    };
    let kind = kv.get("experiment").unwrap_or("nmse_vs_snr").to_string();
    let sweep_raw = kv.get("sweep").map(str::to_string);
    let sweep = build_sweep(&kind, sweep_raw.as_deref())?;
    let mut checkpoints = HashMap::new();
    for binding in &args.checkpoints {
        let Some((method, path)) = binding.split_once('=') else {
            return Err(xlris_core::Error::Config(format!(
                "--ckpt expects `method=path`, got `{binding}`"
            )));
        };
        checkpoints.insert(Method::parse(method.trim())?, PathBuf::from(path.trim()));
    }
    // config-file bindings: ckpt_cista = path, ...
    for m in [Method::Cista, Method::CistaPlus, Method::CnnCdl] {
        if let Some(p) = kv.get(&format!("ckpt_{m}")) {
            checkpoints.entry(m).or_insert_with(|| PathBuf::from(p));
        }
    }
    let mut classical = ClassicalConfig::for_scenario(&scenario);
    if let Some(v) = kv.get_usize("omp_max_atoms")? {
        classical.omp_max_atoms = v;
    }
    if let Some(v) = kv.get_f64("omp_residual_tol")? {
        classical.omp_residual_tol = v;
    }
    if let Some(v) = kv.get_usize("dict_bs_grid")? {
        classical.bs_grid = v;
    }
    if let Some(v) = kv.get_usize("dict_rings")? {
        classical.ris_distance_rings = v;
    }
    let spec = ExperimentSpec {
        methods,
        scenario,
        pilots: kv.get_usize("pilots")?.unwrap_or(32),
        snr_db: kv.get_f64("eval_snr")?.unwrap_or(0.0),
        trials: kv.get_usize("trials")?.unwrap_or(200),
        seed: kv.get_u64("eval_seed")?.unwrap_or(1),
        sweep,
        se_sigma2: kv.get_f64("se_sigma2")?.unwrap_or(1.0),
        checkpoints,
        classical,
    };
    let result = run_experiment(&spec)?;
    result.write_csv(&args.out)?;
    println!("{} rows written to {}", result.rows.len(), args.out.display());
    Ok(())
}

fn build_sweep(kind: &str, raw: Option<&str>) -> Result<SweepValues> {
    let parse_f64_list = |raw: Option<&str>, default: Vec<f64>| -> Result<Vec<f64>> {
        match raw {
            None => Ok(default),
            Some(s) => s.split(',').map(|t| parse_snr(t.trim())).collect(),
        }
    };
    match kind {
        "nmse_vs_snr" => Ok(SweepValues::Snr(parse_f64_list(
            raw,
            vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        )?)),
        "nmse_vs_pilots" => {
            let values = match raw {
                None => vec![8, 16, 24, 32],
                Some(s) => s
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<usize>().map_err(|_| {
                            xlris_core::Error::Config(format!("bad pilot count `{t}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            Ok(SweepValues::Pilots(values))
        }
        "multipath_sweep" => {
            let values = match raw {
                None => vec![(0, 6), (1, 5), (3, 3), (5, 1), (6, 0)],
                Some(s) => s
                    .split(',')
                    .map(|t| {
                        let t = t.trim();
                        let Some((a, b)) = t.split_once('-') else {
                            return Err(xlris_core::Error::Config(format!(
                                "multipath sweep expects `lf-ln` pairs, got `{t}`"
                            )));
                        };
                        Ok((
                            a.parse::<usize>().map_err(|_| {
                                xlris_core::Error::Config(format!("bad path count `{a}`"))
                            })?,
                            b.parse::<usize>().map_err(|_| {
                                xlris_core::Error::Config(format!("bad path count `{b}`"))
                            })?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            Ok(SweepValues::Multipath(values))
        }
        "layer_sweep" => Ok(SweepValues::Layers),
        "spectral_efficiency" => Ok(SweepValues::Power(parse_f64_list(
            raw,
            vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        )?)),
        other => Err(xlris_core::Error::Config(format!("unknown experiment kind `{other}`"))),
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let table = xlris_core::eval::report_params(&args.checkpoints)?;
    println!("{:<12} {:<24} {:>12}", "model", "group", "parameters");
    for row in &table {
        let kind = &row.kind;
        for (group, count) in &row.params.groups {
            println!("{kind:<12} {group:<24} {count:>12}");
        }
        println!("{kind:<12} {:<24} {:>12}", "total", row.params.total);
        if let Some(f) = row.flops {
            println!("{kind:<12} {:<24} {:>12}", "forward mul-adds", f);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
