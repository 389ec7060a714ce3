use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use spikeconv::analyzer::{
    ac_mac_ratio, convergence_csv, convergence_curve, spike_count_profile, timestep_grid, OpCensus,
};
use spikeconv::arch::{digits_cnn, digits_resnet};
use spikeconv::data::{load_split, Dataset};
use spikeconv::format::{load_model, save_model};
use spikeconv::normalizer::{
    ann_based_thresholds, spike_norm, to_weight_normalized, NormalizeOptions, DEFAULT_FLOOR, DEFAULT_SUBSET,
    DEFAULT_TIMESTEPS,
};
use spikeconv::pipeline::{ablation_ladder, fit, ladder_csv, mean, LadderConfig};
use spikeconv::resnet::{convert_at_level, ConstraintLevel};
use spikeconv::rng::derive_seed;
use spikeconv::snn::{simulate, SimConfig, SpikingNetwork};
use spikeconv::trainer::{accuracy, TrainConfig};
use spikeconv::{validate_convertibility, NetworkGraph, ThresholdMethod, ThresholdSet, ValidationMode};

use crate::config::{merge, resolve_seed, ConfigFile, RunManifest};
use crate::CliError;

const NUM_CLASSES: usize = 10;
const DATASET_KEY: &str = "dataset";
const MANIFEST_KEY: &str = "run_manifest";

fn write_artifact(path: &Path, manifest: &RunManifest, body: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    let text = format!("{}{body}", manifest.comment());
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_thresholds(path: &Path) -> Result<ThresholdSet, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    Ok(ThresholdSet::from_text(&text)?)
}

fn thresholds_path(model: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| model.with_extension("thresholds"))
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| CliError::Usage(format!("--{what}: {e}")))
}

fn positive(what: &str, v: usize) -> Result<usize, CliError> {
    if v == 0 {
        return Err(CliError::Usage(format!("--{what} must be at least 1")));
    }
    Ok(v)
}

// validate

#[derive(Args, Debug, Clone)]
pub struct ValidateArgs {
    /// Model file (.sfm).
    model: PathBuf,
    #[command(flatten)]
    opts: ValidateOpts,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateOpts {
    /// Also require a relu directly after every residual junction.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    strict_residual: Option<bool>,
}

pub fn validate(args: ValidateArgs, file: Option<&ConfigFile>) -> Result<(), CliError> {
    let opts = merge(&args.opts, file, "validate")?;
    let graph = load_model(&args.model)?;
    let mode = if opts.strict_residual.unwrap_or(false) {
        ValidationMode::StrictResidual
    } else {
        ValidationMode::Standard
    };
    let report = validate_convertibility(&graph, mode)?;
    for v in &report.violations {
        println!("{v}");
    }
    println!("{} violations", report.violations.len());
    if report.is_ok() {
        Ok(())
    } else {
        Err(CliError::Rejected(format!("{} is not convertible", args.model.display())))
    }
}

// train

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// cnn, resnet (junction relus) or resnet-basic (no junction relus).
    #[arg(long)]
    arch: Option<String>,
    /// Residual units for the resnet architectures [default: 3].
    #[arg(long)]
    blocks: Option<usize>,
    /// Dataset directory with train-* and t10k-* IDX files or containers.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output model [default: model.sfm].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch history CSV [default: <out>.history.csv].
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated epochs at which the rate is divided by --decay-factor.
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Dropout probability.
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            lr_decay_epochs: self.lr_decay_epochs.clone().unwrap_or(d.lr_decay_epochs),
            decay_factor: self.decay_factor.unwrap_or(d.decay_factor),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            momentum: self.momentum.unwrap_or(d.momentum),
            dropout_p: self.dropout.unwrap_or(d.dropout_p),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed,
        }
    }
}

fn build_arch(arch: &str, blocks: usize, dropout: f64) -> Result<NetworkGraph, CliError> {
    Ok(match arch {
        "cnn" => digits_cnn(dropout)?,
        "resnet" => digits_resnet(blocks, true, dropout)?,
        "resnet-basic" => digits_resnet(blocks, false, dropout)?,
        other => {
            return Err(CliError::Usage(format!(
                "--arch: unknown architecture '{other}' (cnn, resnet, resnet-basic)"
            )))
        }
    })
}

fn load_train_test(data: &Path) -> Result<(Dataset, Option<Dataset>), CliError> {
    let train = load_split(data, "train", NUM_CLASSES)?;
    let test = if data.join("t10k-images-idx3-ubyte").exists() || data.join("t10k").exists() {
        Some(load_split(data, "t10k", NUM_CLASSES)?)
    } else {
        None
    };
    Ok((train, test))
}

pub fn train(args: TrainArgs, file: Option<&ConfigFile>) -> Result<(), CliError> {
    let mut opts = merge(&args.opts, file, "train")?;
    let seed = resolve_seed(opts.seed);
    opts.seed = Some(seed);
    let data = opts
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("train needs --data DIR".into()))?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("model.sfm"));
    let history_path = opts.history.clone().unwrap_or_else(|| out.with_extension("history.csv"));
    let config = opts.config(seed);
    let arch = build_arch(opts.arch.as_deref().unwrap_or("cnn"), opts.blocks.unwrap_or(3), config.dropout_p)?;
    let (train_ds, test_ds) = load_train_test(&data)?;

    let outcome = fit(&arch, &train_ds, &config)?;
    let mut graph = outcome.graph;
    let mut history = String::from("epoch,learning_rate,loss,accuracy\n");
    for s in &outcome.history {
        history.push_str(&format!("{},{},{},{}\n", s.epoch, s.learning_rate, s.loss, s.accuracy));
    }
    if let Some(last) = outcome.history.last() {
        println!("final epoch {}: loss {:.4}, train accuracy {:.4}", last.epoch, last.loss, last.accuracy);
    }
    if let Some(test) = &test_ds {
        let xs = test.preprocessed(&graph)?;
        println!("test accuracy {:.4}", accuracy(&graph, &xs, &test.labels)?);
    }

    let manifest = RunManifest::new("train", Some(seed), &opts)
        .input(&data)
        .output(&out)
        .output(&history_path);
    graph.metadata.insert(DATASET_KEY.into(), data.display().to_string());
    graph.metadata.insert(MANIFEST_KEY.into(), manifest.to_json());
    save_model(&graph, &out)?;
    println!("wrote {}", out.display());
    write_artifact(&history_path, &manifest, &history)
}

// normalize

#[derive(Args, Debug, Clone)]
pub struct NormalizeArgs {
    /// Trained model file (.sfm).
    model: PathBuf,
    #[command(flatten)]
    opts: NormalizeOpts,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeOpts {
    /// spike-norm, ann-based or unity [default: spike-norm].
    #[arg(long)]
    method: Option<String>,
    /// Simulation steps per normalization sample [default: 2500].
    #[arg(long)]
    timesteps: Option<usize>,
    /// Normalization samples drawn at random from the training split [default: 256].
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Residual constraint level: basic, junction-relu, unity-threshold or full.
    #[arg(long)]
    constraints: Option<String>,
    /// Dataset directory [default: the one recorded in the model].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Threshold sidecar [default: <model>.thresholds].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threshold used for layers that never activate [default: 0.001].
    #[arg(long)]
    floor: Option<f64>,
    /// Fail on layers that never activate instead of using the floor.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_floor: Option<bool>,
    /// Also write a copy of the model with thresholds folded into the weights.
    #[arg(long)]
    weight_normalized: Option<PathBuf>,
}

pub fn normalize(args: NormalizeArgs, file: Option<&ConfigFile>) -> Result<(), CliError> {
    let mut opts = merge(&args.opts, file, "normalize")?;
    let method: ThresholdMethod = parse("method", opts.method.as_deref().unwrap_or("spike-norm"))?;
    let level: Option<ConstraintLevel> = opts.constraints.as_deref().map(|s| parse("constraints", s)).transpose()?;
    if level.is_some() && method != ThresholdMethod::SpikeNorm {
        return Err(CliError::Usage("--constraints requires --method spike-norm".into()));
    }
    let graph = load_model(&args.model)?;
    let out = thresholds_path(&args.model, &opts.out);
    let options = NormalizeOptions {
        floor: if opts.no_floor.unwrap_or(false) {
            None
        } else {
            Some(opts.floor.unwrap_or(DEFAULT_FLOOR))
        },
    };
    let timesteps = positive("timesteps", opts.timesteps.unwrap_or(DEFAULT_TIMESTEPS))?;
    let batch = positive("batch", opts.batch.unwrap_or(DEFAULT_SUBSET))?;

    let mut manifest_seed = None;
    let mut inputs = vec![args.model.clone()];
    let th = if method == ThresholdMethod::Unity {
        ThresholdSet::unity(&graph)
    } else {
        let data = opts
            .data
            .clone()
            .or_else(|| graph.metadata.get(DATASET_KEY).map(PathBuf::from))
            .ok_or_else(|| CliError::Usage("model records no dataset; pass --data DIR".into()))?;
        let seed = resolve_seed(opts.seed);
        opts.seed = Some(seed);
        manifest_seed = Some(seed);
        inputs.push(data.clone());
        let ds = load_split(&data, "train", graph.num_classes)?;
        let samples = ds.sample(batch, seed).preprocessed(&graph)?;
        match (method, level) {
            (ThresholdMethod::AnnBased, _) => ann_based_thresholds(&graph, &samples, &options)?,
            (_, Some(level)) => convert_at_level(&graph, level, &samples, timesteps, seed, &options)?,
            _ => spike_norm(&graph, &samples, timesteps, seed, &options)?,
        }
    };
    print!("{th}");

    let mut manifest = RunManifest::new("normalize", manifest_seed, &opts);
    for i in &inputs {
        manifest = manifest.input(i);
    }
    manifest = manifest.output(&out);
    if let Some(p) = &opts.weight_normalized {
        manifest = manifest.output(p);
        let (mut folded, _) = to_weight_normalized(&graph, &th)?;
        folded.metadata.insert(MANIFEST_KEY.into(), manifest.to_json());
        save_model(&folded, p)?;
        println!("wrote {}", p.display());
    }
    write_artifact(&out, &manifest, &th.to_text())
}

// run

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Trained model file (.sfm).
    model: PathBuf,
    /// Dataset directory.
    data: PathBuf,
    #[command(flatten)]
    opts: RunOpts,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOpts {
    /// Threshold sidecar [default: <model>.thresholds].
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Simulation steps [default: 2500].
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent encoder streams [default: 5].
    #[arg(long)]
    repeats: Option<usize>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Dataset split prefix [default: t10k].
    #[arg(long)]
    split: Option<String>,
    /// Spacing of the convergence grid [default: timesteps / 50].
    #[arg(long)]
    grid_step: Option<usize>,
    /// Output directory [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn eval_split(data: &Path, split: &str, samples: Option<usize>, graph: &NetworkGraph) -> Result<Dataset, CliError> {
    let ds = load_split(data, split, graph.num_classes)?;
    Ok(match samples {
        Some(n) => ds.take(n),
        None => ds,
    })
}

pub fn run(args: RunArgs, file: Option<&ConfigFile>) -> Result<(), CliError> {
    let mut opts = merge(&args.opts, file, "run")?;
    let seed = resolve_seed(opts.seed);
    opts.seed = Some(seed);
    let timesteps = positive("timesteps", opts.timesteps.unwrap_or(DEFAULT_TIMESTEPS))?;
    let repeats = positive("repeats", opts.repeats.unwrap_or(5))?;
    let grid = timestep_grid(timesteps, opts.grid_step.unwrap_or((timesteps / 50).max(1)));
    let graph = load_model(&args.model)?;
    let th_path = thresholds_path(&args.model, &opts.thresholds);
    let th = read_thresholds(&th_path)?;
    let ds = eval_split(&args.data, opts.split.as_deref().unwrap_or("t10k"), opts.samples, &graph)?;
    let xs = ds.preprocessed(&graph)?;
    let ann_error = 1.0 - accuracy(&graph, &xs, &ds.labels)?;
    let net = SpikingNetwork::new(&graph, &th)?;

    let mut curves = Vec::with_capacity(repeats);
    for r in 0..repeats as u64 {
        curves.push(convergence_curve(&net, &xs, &ds.labels, &grid, derive_seed(seed, r))?);
    }
    let finals: Vec<f64> = curves.iter().map(|c| c.last().map(|p| p.1).unwrap_or(f64::NAN)).collect();
    let averaged: Vec<(usize, f64)> = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, curves.iter().map(|c| c[k].1).sum::<f64>() / repeats as f64))
        .collect();

    println!("samples {} timesteps {timesteps} repeats {repeats}", ds.len());
    println!("ann error {ann_error:.4}");
    for (r, e) in finals.iter().enumerate() {
        println!("run {r}: snn error {e:.4}");
    }
    let m = mean(&finals);
    println!("mean snn error {m:.4} (increment {:+.4})", m - ann_error);

    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(".")).join("convergence.csv");
    let manifest = RunManifest::new("run", Some(seed), &opts)
        .input(&args.model)
        .input(&th_path)
        .input(&args.data)
        .output(&out);
    write_artifact(&out, &manifest, &convergence_csv(&averaged))
}

// analyze

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    /// Trained model file (.sfm).
    model: PathBuf,
    /// Dataset directory.
    data: PathBuf,
    #[command(flatten)]
    opts: AnalyzeOpts,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeOpts {
    /// Threshold sidecar [default: <model>.thresholds].
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Simulation steps [default: 2500].
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images drawn at random from the split [default: 32].
    #[arg(long)]
    batch: Option<usize>,
    /// Dataset split prefix [default: t10k].
    #[arg(long)]
    split: Option<String>,
    /// Output directory [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn analyze(args: AnalyzeArgs, file: Option<&ConfigFile>) -> Result<(), CliError> {
    let mut opts = merge(&args.opts, file, "analyze")?;
    let seed = resolve_seed(opts.seed);
    opts.seed = Some(seed);
    let timesteps = positive("timesteps", opts.timesteps.unwrap_or(DEFAULT_TIMESTEPS))?;
    let batch = positive("batch", opts.batch.unwrap_or(32))?;
    let graph = load_model(&args.model)?;
    let th_path = thresholds_path(&args.model, &opts.thresholds);
    let th = read_thresholds(&th_path)?;
    let ds = load_split(&args.data, opts.split.as_deref().unwrap_or("t10k"), graph.num_classes)?.sample(batch, seed);
    let xs = ds.preprocessed(&graph)?;
    let net = SpikingNetwork::new(&graph, &th)?;

    let profiles = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let cfg = SimConfig::new(timesteps, derive_seed(seed, i as u64)).with_profile();
            simulate(&net, x, &cfg).map(|(_, p)| p.expect("profile requested"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spikes = spike_count_profile(&profiles)?;
    let mut merged = profiles[0].clone();
    for p in &profiles[1..] {
        merged.merge(p)?;
    }
    let census = OpCensus::new(&graph, &merged, profiles.len())?;
    let ratio = ac_mac_ratio(&census)?;

    println!("images {} timesteps {timesteps}", profiles.len());
    println!("total macs {} mean acs {:.1}", census.total_macs(), census.total_acs());
    println!("ac/mac ratio {ratio:.4}");
    println!("depth-activity spearman {:.4}", spikes.depth_correlation());

    let dir = opts.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let (profile_path, census_path) = (dir.join("profile.csv"), dir.join("census.csv"));
    let manifest = RunManifest::new("analyze", Some(seed), &opts)
        .input(&args.model)
        .input(&th_path)
        .input(&args.data)
        .output(&profile_path)
        .output(&census_path);
    write_artifact(&profile_path, &manifest, &spikes.to_csv())?;
    write_artifact(&census_path, &manifest, &census.to_csv())
}

// ablate

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// Dataset directory.
    data: PathBuf,
    #[command(flatten)]
    opts: AblateOpts,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateOpts {
    /// Residual units [default: 3].
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Normalization samples taken from the training split [default: 256].
    #[arg(long)]
    norm_samples: Option<usize>,
    /// Simulation steps [default: 2500].
    #[arg(long)]
    timesteps: Option<usize>,
    /// Evaluate only the first N test samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Independent encoder streams per level [default: 5].
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ablate(args: AblateArgs, file: Option<&ConfigFile>) -> Result<(), CliError> {
    let mut opts = merge(&args.opts, file, "ablate")?;
    let seed = resolve_seed(opts.seed);
    opts.seed = Some(seed);
    let train_opts = TrainOpts {
        epochs: opts.epochs,
        learning_rate: opts.learning_rate,
        lr_decay_epochs: opts.lr_decay_epochs.clone(),
        dropout: opts.dropout,
        batch_size: opts.batch_size,
        ..Default::default()
    };
    let config = LadderConfig {
        blocks: positive("blocks", opts.blocks.unwrap_or(3))?,
        train: train_opts.config(seed),
        norm_samples: positive("norm-samples", opts.norm_samples.unwrap_or(DEFAULT_SUBSET))?,
        timesteps: positive("timesteps", opts.timesteps.unwrap_or(DEFAULT_TIMESTEPS))?,
        seed,
        repeats: positive("repeats", opts.repeats.unwrap_or(5))?,
    };
    let train = load_split(&args.data, "train", NUM_CLASSES)?;
    let test = load_split(&args.data, "t10k", NUM_CLASSES)?;
    let test = match opts.samples {
        Some(n) => test.take(n),
        None => test,
    };
    let points = ablation_ladder(&train, &test, &config)?;
    println!("{:<16} {:>9} {:>9} {:>10}", "level", "ann err", "snn err", "increment");
    for p in &points {
        println!(
            "{:<16} {:>9.4} {:>9.4} {:>+10.4}",
            p.level.as_str(),
            p.ann_error,
            p.mean_error(),
            p.mean_error() - p.ann_error
        );
    }
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(".")).join("ablation.csv");
    let manifest = RunManifest::new("ablate", Some(seed), &opts).input(&args.data).output(&out);
    write_artifact(&out, &manifest, &ladder_csv(&points))
}
