//! `inviv`: simulate multi-environment data, train the encoder, estimate effects, run experiments.

mod builtins;
mod error;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inviv::nn::{load_checkpoint, save_checkpoint};
use inviv::pipeline::{
    cross_validate, estimate_with, identifiability_report, run_experiment, summary_csv, train, EpochLosses,
    EstimateOptions, ExperimentName, Lambda2Subset, LambdaGrid, Latents, Method, ScaleParams, Selection,
};
use inviv::simgen::{make_counterexample, read_dataset, simulate, write_dataset, MultiEnvData, Oracle};

use builtins::{load_mixing, load_spec, load_train_config, require_dir, require_file, SpecSource};
use error::CliError;
use manifest::{compare, hash_outputs, manifest_path, read_manifest, write_manifest, RunManifest, ScratchDir};

/// Environment variable that overrides `--seed`.
const SEED_ENV: &str = "INVIV_SEED";

#[derive(Parser, Debug)]
#[command(name = "inviv", version, about = "Invariant latent instruments from multi-environment data")]
struct Cli {
    /// Re-run into a scratch directory and verify output hashes against the existing manifest.
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from an SCM and a mixing function.
    Simulate(SimulateArgs),
    /// Train the autoencoder (optionally selecting λ over the grid).
    Train(TrainArgs),
    /// Estimate the causal effect with the requested methods.
    Estimate(EstimateArgs),
    /// Run a named experiment over several seeds.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Spec file (TOML) or builtin:d2, builtin:d3_threeenv, builtin:c4, builtin:c5.
    #[arg(long)]
    spec: String,
    /// Mixing file (TOML) or builtin:poly1..3, builtin:mlp. Ignored for the counterexamples.
    #[arg(long, default_value = "builtin:poly1")]
    mixing: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training rows per environment (total rows for the counterexamples).
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, default_value_t = 2000)]
    n_val: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SubsetArg {
    All,
    Zero,
    Nonzero,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Config file (TOML, TrainConfig fields) or builtin:d2_default.
    #[arg(long, default_value = "builtin:d2_default")]
    config: String,
    #[arg(long)]
    out: PathBuf,
    /// Select λ1 ∈ {1,5,10} × λ2 ∈ {0,1,5,10} by validation loss.
    #[arg(long)]
    grid: bool,
    /// λ2 values admitted by --grid.
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    lambda2_subset: SubsetArg,
    /// Score grid candidates with these fixed weights `L1,L2` instead of their own.
    #[arg(long, value_parser = parse_pair)]
    reference_lambda: Option<(f64, f64)>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`; required for the Ŵ/V̂ methods.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated methods; defaults to every method the inputs allow.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// PO(K) baselines keep Z as is and partial the environment out of D and Y only.
    #[arg(long)]
    po_k_keep_z: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    name: String,
    /// Number of seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First seed; seeds are consecutive from here.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// n = 10,000, 400 epochs and λ selection instead of the desk-scale defaults.
    #[arg(long)]
    full_scale: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
            b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
        )),
        _ => Err(format!("expected two comma-separated numbers, got '{s}'")),
    }
}

fn resolve_seed(flag: u64) -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("{SEED_ENV}={v} is not a seed: {e}"))),
        Err(_) => Ok(flag),
    }
}

/// What a command produced inside its output directory.
struct Produced {
    files: Vec<String>,
    config_path: Option<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
}

fn run_simulate(a: &SimulateArgs, out: &Path) -> Result<Produced, CliError> {
    let seed = resolve_seed(a.seed)?;
    let source = load_spec(&a.spec)?;
    let data = match &source {
        SpecSource::Scm(spec) => {
            let mixing = load_mixing(&a.mixing, spec.p + spec.q)?;
            simulate(spec, &mixing, a.n_train, a.n_val, seed)?
        }
        SpecSource::Counterexample(kind) => {
            let ce = make_counterexample(*kind, a.n_train, seed)?;
            let mut ds = ce.data;
            // the oracle columns carry the example's designated instrument and adjustment blocks
            let h = ds.oracle.take().map(|o| o.h).expect("counterexamples carry H");
            ds.oracle = Some(Oracle { w: ce.w_hat, v: ce.v_hat, h });
            MultiEnvData { spec: None, mixing: None, seed, train: vec![ds], val: vec![] }
        }
    };
    write_dataset(&data, out)?;
    let mut files: Vec<String> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|f| f.ends_with(".csv") || f == inviv::simgen::SIDECAR_NAME)
        .collect();
    files.sort();
    let config = serde_json::json!({
        "spec": a.spec,
        "mixing": a.mixing,
        "n_train": a.n_train,
        "n_val": a.n_val,
        "resolved_spec": data.spec,
        "resolved_mixing": data.mixing,
    });
    Ok(Produced { files, config_path: Some(a.spec.clone()), config, seeds: vec![seed] })
}

fn losses_csv(curves: &[EpochLosses]) -> String {
    let mut s = String::from("epoch,split,total,recon,inv,ind,logdet\n");
    for e in curves {
        for (split, b) in [("train", Some(e.train)), ("val", e.val)] {
            if let Some(b) = b {
                let _ = writeln!(s, "{},{split},{},{},{},{},{}", e.epoch, b.total, b.recon, b.inv, b.ind, b.logdet);
            }
        }
    }
    s
}

fn run_train(a: &TrainArgs, out: &Path) -> Result<Produced, CliError> {
    require_dir(&a.data, "data")?;
    let data = read_dataset(&a.data)?;
    let mut config = load_train_config(&a.config)?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.seed = resolve_seed(a.seed.unwrap_or(config.seed))?;
    let mut files = vec!["model.ckpt".to_string(), "losses.csv".to_string(), "config.json".to_string()];
    let output = if a.grid {
        let subset = match a.lambda2_subset {
            SubsetArg::All => Lambda2Subset::All,
            SubsetArg::Zero => Lambda2Subset::Zero,
            SubsetArg::Nonzero => Lambda2Subset::NonZero,
        };
        let selection = match a.reference_lambda {
            Some((lambda1, lambda2)) => Selection::Reference { lambda1, lambda2 },
            None => Selection::OwnWeights,
        };
        let cv = cross_validate(&data, &LambdaGrid::default(), &config, subset, selection)?;
        std::fs::write(out.join("grid.json"), serde_json::to_string_pretty(&cv.runs)? + "\n")?;
        files.push("grid.json".into());
        cv.output
    } else {
        train(&data, &config)?
    };
    save_checkpoint(&output.model, &out.join("model.ckpt"))?;
    std::fs::write(out.join("losses.csv"), losses_csv(&output.curves))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&output.config)? + "\n")?;
    if data.has_oracle() {
        let report = identifiability_report(&output.model, &data)?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        files.push("report.json".into());
    }
    files.sort();
    Ok(Produced {
        files,
        config_path: Some(a.config.clone()),
        config: serde_json::to_value(&output.config)?,
        seeds: vec![output.config.seed],
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn run_estimate(a: &EstimateArgs, out_file: &Path) -> Result<Produced, CliError> {
    require_dir(&a.data, "data")?;
    let data = read_dataset(&a.data)?;
    let pooled = data.pooled_train()?;
    let model = match &a.model {
        Some(p) => {
            require_file(p, "model")?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let methods: Vec<Method> = if a.methods.is_empty() {
        Method::ALL
            .into_iter()
            .filter(|m| (!m.needs_model() || model.is_some()) && (!m.needs_oracle() || pooled.w.is_some()))
            .collect()
    } else {
        a.methods.iter().map(|s| s.parse::<Method>()).collect::<Result<_, _>>()?
    };
    if methods.iter().any(|m| m.needs_model()) && model.is_none() {
        return Err(CliError::Usage("methods on Ŵ/V̂ need --model".into()));
    }
    let latents = match &model {
        Some(m) => Some(m.encode(&pooled.z)?),
        None => None,
    };
    let theta = data.spec.as_ref().map(|s| s.theta.clone());
    let mut csv = String::from("method,coord,theta_hat,bias,se,instrument_dim,min_sv_firststage,n,error\n");
    let options = EstimateOptions { po_k_partials_z: !a.po_k_keep_z };
    let mut failed = 0;
    for m in &methods {
        let l = latents.as_ref().map(|(w, v)| Latents { w_hat: w, v_hat: v });
        match estimate_with(*m, &pooled, l, theta.as_deref(), options) {
            Ok(r) => {
                for c in 0..r.theta_hat.len() {
                    let _ = writeln!(
                        csv,
                        "{},{c},{},{},{},{},{},{},",
                        m,
                        r.theta_hat[c],
                        fmt_opt(r.bias.as_ref().map(|b| b[c])),
                        r.se[c],
                        r.instrument_dim,
                        r.min_sv_first_stage,
                        r.n
                    );
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("{m}: {e}");
                let _ = writeln!(csv, "{m},,,,,,,,\"{}\"", e.to_string().replace('"', "'"));
            }
        }
    }
    std::fs::write(out_file, csv)?;
    if failed == methods.len() {
        return Err(CliError::Numerical("every requested method failed".into()));
    }
    let name = out_file.file_name().expect("file path").to_string_lossy().into_owned();
    let config = serde_json::json!({
        "data": a.data,
        "model": a.model,
        "methods": methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
    });
    Ok(Produced { files: vec![name], config_path: None, config, seeds: vec![data.seed] })
}

fn run_experiment_cmd(a: &ExperimentArgs, out: &Path) -> Result<Produced, CliError> {
    let name: ExperimentName = a.name.parse()?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = resolve_seed(a.seed)?;
    let seeds: Vec<u64> = (base..base + a.seeds).collect();
    let scale = if a.full_scale { ScaleParams::full() } else { ScaleParams::desk() };
    let progress = |msg: &str| eprintln!("{msg}");
    let result = run_experiment(name, &seeds, &scale, a.jobs, &progress)?;
    let summary = result.summary();
    std::fs::write(out.join("results.csv"), result.results_csv())?;
    std::fs::write(out.join("summary.csv"), summary_csv(&summary))?;
    let manifest = result.manifest()?;
    std::fs::write(out.join("experiment.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    for f in &result.failures {
        eprintln!("seed {} task {} {}: {}", f.seed, f.task, f.method.as_deref().unwrap_or("(task)"), f.error);
    }
    println!("{:<10} {:>5} {:<28} {:>10} {:>10} {:>9}", "mixing", "p_hat", "method", "mean_bias", "mean_|b|", "sd");
    for s in &summary {
        println!(
            "{:<10} {:>5} {:<28} {:>10.4} {:>10.4} {:>9.4}{}",
            s.mixing,
            s.p_hat,
            s.method,
            s.mean_bias,
            s.mean_abs_bias,
            s.sd_bias,
            if s.independence { "" } else { "  (λ2=0)" }
        );
    }
    Ok(Produced {
        files: vec!["experiment.json".into(), "results.csv".into(), "summary.csv".into()],
        config_path: None,
        config: serde_json::json!({ "name": name, "scale": scale, "jobs": a.jobs }),
        seeds,
    })
}

/// Runs `produce` into the real output location, or under `--check` into scratch and compares.
fn execute(
    command: &str,
    check: bool,
    out_dir: &Path,
    manifest_stem: Option<&str>,
    produce: impl FnOnce(&Path) -> Result<Produced, CliError>,
) -> Result<(), CliError> {
    let mpath = manifest_path(out_dir, manifest_stem);
    let start = Instant::now();
    if check {
        let recorded = read_manifest(&mpath)?;
        let scratch = ScratchDir::new()?;
        let p = produce(&scratch.0)?;
        compare(&recorded, &hash_outputs(&scratch.0, &p.files)?)?;
        println!("check passed: {} outputs match {}", p.files.len(), mpath.display());
        return Ok(());
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let p = produce(out_dir)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: p.config_path,
        config: p.config,
        seeds: p.seeds,
        output_dir: out_dir.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: hash_outputs(out_dir, &p.files)?,
    };
    write_manifest(&mpath, &manifest)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let check = cli.check;
    match &cli.command {
        Command::Simulate(a) => execute("simulate", check, &a.out, None, |dir| run_simulate(a, dir)),
        Command::Train(a) => execute("train", check, &a.out, None, |dir| run_train(a, dir)),
        Command::Estimate(a) => {
            let parent = match a.out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            let name = a
                .out
                .file_name()
                .ok_or_else(|| CliError::Usage(format!("--out must name a file: {}", a.out.display())))?
                .to_owned();
            let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned());
            execute("estimate", check, &parent, stem.as_deref(), |dir| run_estimate(a, &dir.join(&name)))
        }
        Command::Experiment(a) => {
            // reject unknown names before touching the output directory
            a.name.parse::<ExperimentName>()?;
            execute("experiment", check, &a.out, None, |dir| run_experiment_cmd(a, dir))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
