//! `svh`: synthetic data, training, inference, evaluation and ablations
//! from one binary. Exit codes: 0 success, 1 usage or validation error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use svh_core::eval::{self, SweepParam};
use svh_core::infer::{self, PatientPrediction};
use svh_core::model::{checkpoint, gradcheck, NetworkConfig, NetworkParams};
use svh_core::preprocess::{self, BBoxParams};
use svh_core::schema::load_manifest;
use svh_core::synth::{self, SynthConfig};
use svh_core::train::{self, TrainConfig};
use svh_core::{dataset, JointSchema, PatientRecord};

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Paths {
    /// Dataset directory; `<output_dir>/data` when unset.
    data_dir: Option<PathBuf>,
    output_dir: PathBuf,
    /// Joint manifest JSON; the built-in 21-type schema when unset.
    manifest: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: None,
            output_dir: PathBuf::from("out"),
            manifest: None,
        }
    }
}

/// Everything a run needs, loaded from one JSON file. Missing sections
/// take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    synth: SynthConfig,
    network: NetworkConfig,
    train: TrainConfig,
    bbox: BBoxParams,
    paths: Paths,
}

impl RunConfig {
    fn validate(&self) -> svh_core::Result<()> {
        self.synth.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if !(0.0 <= self.bbox.low_frac && self.bbox.low_frac <= self.bbox.high_frac && self.bbox.margin_frac >= 0.0) {
            return Err(svh_core::Error::InvalidConfig("bbox requires 0 <= low_frac <= high_frac, margin_frac >= 0".into()));
        }
        Ok(())
    }

    fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.clone().unwrap_or_else(|| self.paths.output_dir.join("data"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "svh", version, about = "Joint localization and damage scoring on hand and foot radiographs")]
struct Cli {
    /// JSON run configuration (see `svh config --print-defaults`).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides synth.seed and train.seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory (overrides paths.output_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved configuration as JSON.
    Config {
        /// Print built-in defaults instead, ignoring --config and flags.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Generate a synthetic dataset into the data directory.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Crop each image to its detected bounding box and resize to the network input size.
    Preprocess {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Train one model on the training folds.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train `n` models with seeds seed, seed+1, ...
    TrainEnsemble {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Write per-joint predictions as CSV.
    Predict {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Score predictions on the validation fold; writes eval.json.
    Evaluate {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Sweep one hyperparameter over several seeds; writes CSV and SVG.
    Ablate {
        #[arg(long, value_enum)]
        param: Param,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients on a tiny network.
    Gradcheck,
}

#[derive(Debug, clap::Args)]
struct ModelArgs {
    /// Checkpoint to use; repeat to ensemble. Defaults to `<out>/model.svhc`.
    #[arg(long = "model", value_name = "PATH")]
    models: Vec<PathBuf>,
    /// Use every `member_*/model.svhc` under this directory.
    #[arg(long, value_name = "DIR", conflicts_with = "models")]
    ensemble: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Param {
    P,
    R,
}

impl From<Param> for SweepParam {
    fn from(p: Param) -> Self {
        match p {
            Param::P => SweepParam::P,
            Param::R => SweepParam::R,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Core(svh_core::Error),
}

impl From<svh_core::Error> for Failure {
    fn from(e: svh_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_validation() => 1,
            Failure::Runtime(_) | Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SVH_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))?;
    }
    if let Command::Config { print_defaults: true } = cli.command {
        println!("{}", to_json(&RunConfig::default()));
        return Ok(());
    }
    let mut cfg = load_config(&cli)?;
    let schema = load_manifest(cfg.paths.manifest.as_deref())?;
    let out = cfg.paths.output_dir.clone();

    match cli.command {
        Command::Config { .. } => println!("{}", to_json(&cfg)),
        Command::Synth { patients } => {
            if let Some(n) = patients {
                cfg.synth.n_patients = n;
            }
            let dir = cfg.data_dir();
            let records = synth::generate_dataset(&schema, &cfg.synth, &dir)?;
            log::info!("wrote {} patients to {}", records.len(), dir.display());
        }
        Command::Preprocess { input } => {
            let records = dataset::load_dir(&input, &schema)?;
            let (h, w) = (cfg.network.in_h, cfg.network.in_w);
            let processed = records
                .iter()
                .map(|rec| {
                    let images = rec
                        .images
                        .iter()
                        .map(|(k, img)| Ok((*k, preprocess::normalize(img, &cfg.bbox, h, w)?)))
                        .collect::<svh_core::Result<_>>()?;
                    PatientRecord::new(rec.patient_id.clone(), images)
                })
                .collect::<svh_core::Result<Vec<_>>>()?;
            let dir = out.join("preprocessed");
            dataset::save_records(&dir, &processed)?;
            log::info!("wrote {} patients to {}", processed.len(), dir.display());
        }
        Command::Train { data } => {
            let records = load_data(&cfg, data.as_deref(), &schema)?;
            let art = train::fit_to_dir(&records, &schema, &cfg.network, &cfg.train, &out)?;
            log::info!("wrote {} and {}", art.checkpoint.display(), art.metrics.display());
        }
        Command::TrainEnsemble { n, data } => {
            if n == 0 {
                return Err(Failure::Usage("--n must be at least 1".into()));
            }
            let records = load_data(&cfg, data.as_deref(), &schema)?;
            for k in 0..n {
                let member = TrainConfig {
                    seed: cfg.train.seed + k as u64,
                    ..cfg.train.clone()
                };
                let dir = out.join("ensemble").join(format!("member_{k}"));
                log::info!("ensemble member {k} (seed {})", member.seed);
                train::fit_to_dir(&records, &schema, &cfg.network, &member, &dir)?;
            }
        }
        Command::Predict { models, data, split } => {
            let members = load_models(&models, &out, &cfg.network)?;
            let records = load_data(&cfg, data.as_deref(), &schema)?;
            let records = match split {
                Split::All => records,
                Split::Train => train::split_records(&records, cfg.train.n_folds, cfg.train.val_fold)?.0,
                Split::Val => train::split_records(&records, cfg.train.n_folds, cfg.train.val_fold)?.1,
            };
            let preds: Vec<PatientPrediction> = infer::predict_records(&members, &schema, &records)?;
            let path = out.join("predictions.csv");
            write(&path, infer::prediction_csv(&preds, Some(&records)))?;
            log::info!("wrote {}", path.display());
        }
        Command::Evaluate { models, data } => {
            let members = load_models(&models, &out, &cfg.network)?;
            let records = load_data(&cfg, data.as_deref(), &schema)?;
            let (_, val) = train::split_records(&records, cfg.train.n_folds, cfg.train.val_fold)?;
            let preds = infer::predict_records(&members, &schema, &val)?;
            let report = eval::evaluate(&preds, &val)?;
            let json = to_json(&report);
            write(&out.join("eval.json"), format!("{json}\n"))?;
            println!("{json}");
        }
        Command::Ablate {
            param,
            seeds,
            values,
            data,
        } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be at least 1".into()));
            }
            let param = SweepParam::from(param);
            let values = values.unwrap_or_else(|| param.default_values());
            let seed_list: Vec<u64> = (0..seeds as u64).map(|k| cfg.train.seed + k).collect();
            let records = load_data(&cfg, data.as_deref(), &schema)?;
            let rows = eval::ablate(&records, &schema, &cfg.network, &cfg.train, param, &values, &seed_list)?;
            let stem = format!("ablation_{}", param.as_str());
            write(&out.join(format!("{stem}.csv")), eval::ablation_csv(&rows))?;
            write(&out.join(format!("{stem}.svg")), eval::ablation_svg(&rows))?;
            log::info!("wrote {stem}.csv and {stem}.svg to {}", out.display());
        }
        Command::Gradcheck => {
            let report = gradcheck::run(cfg.train.seed)?;
            println!("{}", to_json(&report));
            if !(report.max_relative_error < GRADCHECK_TOLERANCE) {
                return Err(Failure::Runtime(format!(
                    "gradient check failed: relative error {:.3e} at {}",
                    report.max_relative_error, report.worst_parameter
                )));
            }
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn write(path: &Path, contents: String) -> Outcome {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(svh_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_data(cfg: &RunConfig, data: Option<&Path>, schema: &JointSchema) -> Outcome<Vec<PatientRecord>> {
    let dir = data.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let records = dataset::load_dir(&dir, schema)?;
    if records.is_empty() {
        return Err(Failure::Usage(format!("no annotations found in {}", dir.display())));
    }
    Ok(records)
}

fn load_models(args: &ModelArgs, out: &Path, network: &NetworkConfig) -> Outcome<Vec<NetworkParams<f32>>> {
    let paths = if let Some(dir) = &args.ensemble {
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| io_failure(dir, e))? {
            let path = entry.map_err(|e| io_failure(dir, e))?.path().join("model.svhc");
            if path.is_file() {
                found.push(path);
            }
        }
        found.sort();
        found
    } else if args.models.is_empty() {
        vec![out.join("model.svhc")]
    } else {
        args.models.clone()
    };
    if paths.is_empty() {
        return Err(Failure::Usage("no checkpoints found".into()));
    }
    paths
        .iter()
        .map(|p| {
            let ckpt = checkpoint::load(p)?;
            if ckpt.params.config() != network {
                return Err(Failure::Usage(format!(
                    "{} was trained with a different network configuration",
                    p.display()
                )));
            }
            Ok(ckpt.params)
        })
        .collect()
}
