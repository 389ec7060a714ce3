//! End-to-end helpers shared by the command line and the acceptance suite.

use crate::data::{fit_input_statistics, Dataset};
use crate::error::Result;
use crate::graph::NetworkGraph;
use crate::normalizer::{NormalizeOptions, ThresholdSet};
use crate::resnet::{convert_at_level, ConstraintLevel};
use crate::rng::derive_seed;
use crate::snn::{snn_error, SpikingNetwork};
use crate::tensor::Tensor;
use crate::trainer::{accuracy, init_weights, train_on, TrainConfig, TrainOutcome};

/// Records input statistics from `train`, initializes and trains `graph`.
pub fn fit(graph: &NetworkGraph, train: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut g = graph.clone();
    fit_input_statistics(&mut g, train)?;
    let g = init_weights(&g, config.seed)?;
    train_on(&g, train, config)
}

/// Spiking-network error for `repeats` independent encoder streams; run `r`
/// uses base seed `derive_seed(seed, r)`.
pub fn repeated_snn_error(
    graph: &NetworkGraph,
    thresholds: &ThresholdSet,
    inputs: &[Tensor],
    labels: &[usize],
    timesteps: usize,
    seed: u64,
    repeats: usize,
) -> Result<Vec<f64>> {
    let net = SpikingNetwork::new(graph, thresholds)?;
    (0..repeats as u64)
        .map(|r| snn_error(&net, inputs, labels, timesteps, derive_seed(seed, r)))
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderConfig {
    pub blocks: usize,
    pub train: TrainConfig,
    /// Normalization subset size, taken from the front of the training set.
    pub norm_samples: usize,
    pub timesteps: usize,
    pub seed: u64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderPoint {
    pub level: ConstraintLevel,
    pub ann_error: f64,
    pub thresholds: ThresholdSet,
    pub snn_errors: Vec<f64>,
}

impl LadderPoint {
    pub fn mean_error(&self) -> f64 {
        mean(&self.snn_errors)
    }
}

/// Trains the desk-scale residual network with and without junction relus
/// and converts it at every constraint level.
pub fn ablation_ladder(train: &Dataset, test: &Dataset, config: &LadderConfig) -> Result<Vec<LadderPoint>> {
    let mut points = Vec::new();
    for junction in [false, true] {
        let arch = crate::arch::digits_resnet(config.blocks, junction, config.train.dropout_p)?;
        let graph = fit(&arch, train, &config.train)?.graph;
        let xs = test.preprocessed(&graph)?;
        let ann_error = 1.0 - accuracy(&graph, &xs, &test.labels)?;
        let norm = train.take(config.norm_samples).preprocessed(&graph)?;
        for level in ConstraintLevel::ALL.into_iter().filter(|l| l.junction_relus() == junction) {
            let th = convert_at_level(
                &graph,
                level,
                &norm,
                config.timesteps,
                config.seed,
                &NormalizeOptions::default(),
            )?;
            let errors = repeated_snn_error(&graph, &th, &xs, &test.labels, config.timesteps, config.seed, config.repeats)?;
            log::info!("{level}: ann {ann_error:.4} snn {:.4}", mean(&errors));
            points.push(LadderPoint {
                level,
                ann_error,
                thresholds: th,
                snn_errors: errors,
            });
        }
    }
    Ok(points)
}

/// `level,ann_error,mean_snn_error,increment,errors`
pub fn ladder_csv(points: &[LadderPoint]) -> String {
    let mut s = String::from("level,ann_error,mean_snn_error,increment,errors\n");
    for p in points {
        let errs: Vec<String> = p.snn_errors.iter().map(|e| e.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.level,
            p.ann_error,
            p.mean_error(),
            p.mean_error() - p.ann_error,
            errs.join(" ")
        ));
    }
    s
}
