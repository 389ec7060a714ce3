//! Per-layer threshold balancing.
//!
//! A [`ThresholdSet`] holds the firing threshold of every spiking layer with
//! the analog weights left untouched. Dividing a layer's incoming weights by
//! its threshold and setting the threshold to 1 gives the equivalent
//! weight-normalized network; see [`to_weight_normalized`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::ann::record_max_activations;
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Source};
use crate::rng::derive_seed;
use crate::snn::{Simulation, SpikingNetwork};
use crate::tensor::Tensor;

/// Default floor for layers that never become active.
pub const DEFAULT_FLOOR: f64 = 1e-3;
/// Default normalization subset size (one mini-batch).
pub const DEFAULT_SUBSET: usize = 256;
/// Default simulation length per layer for SPIKE-NORM.
pub const DEFAULT_TIMESTEPS: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMethod {
    AnnBased,
    SpikeNorm,
    Unity,
}

impl ThresholdMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThresholdMethod::AnnBased => "ann_based",
            ThresholdMethod::SpikeNorm => "spike_norm",
            ThresholdMethod::Unity => "unity",
        }
    }
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann_based" | "ann-based" => Ok(ThresholdMethod::AnnBased),
            "spike_norm" | "spike-norm" => Ok(ThresholdMethod::SpikeNorm),
            "unity" => Ok(ThresholdMethod::Unity),
            other => Err(Error::Argument(format!("unknown threshold method '{other}'"))),
        }
    }
}

/// Firing threshold of each spiking layer, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub method: ThresholdMethod,
    entries: Vec<(String, f64)>,
}

impl ThresholdSet {
    pub fn new(method: ThresholdMethod, entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, v) in &entries {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Argument(format!("threshold of '{id}' must be positive, got {v}")));
            }
            if !seen.insert(id) {
                return Err(Error::Argument(format!("duplicate threshold for '{id}'")));
            }
        }
        Ok(Self { method, entries })
    }

    /// Threshold 1 for every spiking layer of `graph`.
    pub fn unity(graph: &NetworkGraph) -> Self {
        Self {
            method: ThresholdMethod::Unity,
            entries: graph.spiking_layer_ids().into_iter().map(|id| (id, 1.0)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|(l, _)| l == id).map(|&(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, v)| v).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn as_map(&self) -> BTreeMap<String, f64> {
        self.entries.iter().cloned().collect()
    }

    /// Checks that every spiking layer of `graph`, and nothing else, has a value.
    pub fn check_complete(&self, graph: &NetworkGraph) -> Result<()> {
        let ids = graph.spiking_layer_ids();
        for id in &ids {
            if self.get(id).is_none() {
                return Err(Error::ConversionIncomplete(id.clone()));
            }
        }
        if let Some((extra, _)) = self.entries.iter().find(|(l, _)| !ids.contains(l)) {
            return Err(Error::Argument(format!("'{extra}' is not a spiking layer")));
        }
        Ok(())
    }

    /// Text sidecar: a `method` line then one `layer value` line per layer.
    /// Lines starting with `#` are comments.
    pub fn to_text(&self) -> String {
        let mut s = format!("method {}\n", self.method.as_str());
        for (id, v) in &self.entries {
            s.push_str(&format!("{id} {v:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut method = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(key), Some(val), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Argument(format!("threshold file line {}: expected two fields", n + 1)));
            };
            if key == "method" && method.is_none() {
                method = Some(val.parse()?);
                continue;
            }
            let v: f64 = val.parse().map_err(|_| {
                Error::Argument(format!("threshold file line {}: bad number '{val}'", n + 1))
            })?;
            entries.push((key.to_string(), v));
        }
        let method = method.ok_or_else(|| Error::Argument("threshold file has no method line".into()))?;
        Self::new(method, entries)
    }
}

impl fmt::Display for ThresholdSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|(id, _)| id.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  threshold ({})", "layer", self.method.as_str())?;
        for (id, v) in &self.entries {
            writeln!(f, "{id:<width$}  {v:.6}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeOptions {
    /// Replacement threshold for layers whose maximum is zero. `None` turns
    /// such layers into [`Error::DegenerateLayer`].
    pub floor: Option<f64>,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            floor: Some(DEFAULT_FLOOR),
        }
    }
}

impl NormalizeOptions {
    fn apply(&self, id: &str, max: f64) -> Result<f64> {
        if max > 0.0 {
            return Ok(max);
        }
        match self.floor {
            Some(floor) => {
                log::warn!("layer '{id}' never became active; using threshold floor {floor}");
                Ok(floor)
            }
            None => Err(Error::DegenerateLayer(id.to_string())),
        }
    }
}

/// Nearest spiking layers (or the input) upstream of each layer's operands,
/// looking through weighted, pooling, junction and pass-through layers.
fn spiking_sources(graph: &NetworkGraph, sources: &[Vec<Source>], of: usize) -> BTreeSet<Source> {
    let spiking: BTreeSet<usize> = graph.spiking_layers().into_iter().collect();
    let mut found = BTreeSet::new();
    let mut stack: Vec<Source> = sources[of].clone();
    while let Some(s) = stack.pop() {
        match s {
            Source::Input => {
                found.insert(Source::Input);
            }
            Source::Layer(j) if spiking.contains(&j) => {
                found.insert(s);
            }
            Source::Layer(j) => stack.extend(sources[j].iter().copied()),
        }
    }
    found
}

/// Thresholds from analog activation statistics.
///
/// With `λ_i` the largest activation of spiking layer `i` over `samples`,
/// the layer's input spikes encode its predecessors' activations divided by
/// their `λ`, so the threshold that reproduces `activation / λ_i` as a firing
/// rate is `λ_i / λ_in`, where `λ_in` is the largest `λ` among the nearest
/// upstream spiking layers and the encoder scale stands in for the input.
/// For a single layer fed by inputs in `[-1, 1]` this is `λ_i` itself.
pub fn ann_based_thresholds(
    graph: &NetworkGraph,
    samples: &[Tensor],
    options: &NormalizeOptions,
) -> Result<ThresholdSet> {
    let maxima = record_max_activations(graph, samples)?;
    let sources = graph.sources()?;
    let mut lambda: BTreeMap<usize, f64> = BTreeMap::new();
    let mut entries = Vec::new();
    for (i, (id, max)) in graph.spiking_layers().into_iter().zip(maxima.layers) {
        let own = options.apply(&id, max)?;
        let upstream = spiking_sources(graph, &sources, i)
            .into_iter()
            .map(|s| match s {
                Source::Input => graph.encoder_scale,
                Source::Layer(j) => lambda[&j],
            })
            .fold(0.0f64, f64::max);
        lambda.insert(i, own);
        let th = options.apply(&id, own / upstream)?;
        entries.push((id, th));
    }
    ThresholdSet::new(ThresholdMethod::AnnBased, entries)
}

/// Layer-sequential threshold balancing with the spiking network in the loop
/// (SPIKE-NORM).
///
/// Spiking layers are visited in graph order. For layer `i`, every sample is
/// Poisson-encoded and simulated for `timesteps` steps through the layers
/// already balanced; the layer's threshold becomes the largest weighted
/// spike input any of its neurons receives in any step, and is fixed before
/// layer `i + 1` is visited. Sample `k` always uses the encoder seed
/// `derive_seed(seed, k)`, so replaying a prefix reproduces the spike trains
/// that earlier layers saw.
pub fn spike_norm(
    graph: &NetworkGraph,
    samples: &[Tensor],
    timesteps: usize,
    seed: u64,
    options: &NormalizeOptions,
) -> Result<ThresholdSet> {
    spike_norm_with_fixed(graph, samples, timesteps, seed, &BTreeMap::new(), options)
}

/// [`spike_norm`] where the layers in `fixed` keep the given thresholds
/// instead of being balanced.
pub fn spike_norm_with_fixed(
    graph: &NetworkGraph,
    samples: &[Tensor],
    timesteps: usize,
    seed: u64,
    fixed: &BTreeMap<String, f64>,
    options: &NormalizeOptions,
) -> Result<ThresholdSet> {
    if timesteps == 0 {
        return Err(Error::Argument("timesteps must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Argument("empty dataset subset".into()));
    }
    let mut known: BTreeMap<String, f64> = BTreeMap::new();
    let mut entries = Vec::new();
    for id in graph.spiking_layer_ids() {
        if let Some(&v) = fixed.get(&id) {
            known.insert(id.clone(), v);
            entries.push((id, v));
            continue;
        }
        let net = SpikingNetwork::partial(graph, &known)?;
        let node = net.node_index(&id).expect("spiking layer is a node");
        let max = samples
            .par_iter()
            .enumerate()
            .map(|(k, x)| max_drive(&net, node, x, timesteps, derive_seed(seed, k as u64)))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0f64, f64::max);
        let th = options.apply(&id, max)?;
        log::debug!("spike-norm: {id} -> {th}");
        known.insert(id.clone(), th);
        entries.push((id, th));
    }
    ThresholdSet::new(ThresholdMethod::SpikeNorm, entries)
}

/// Largest weighted spike input seen by any neuron of `node` over `timesteps`.
pub fn max_drive(
    net: &SpikingNetwork,
    node: usize,
    image: &Tensor,
    timesteps: usize,
    seed: u64,
) -> Result<f64> {
    let mut sim = Simulation::new(net, image, seed, false)?;
    let mut max = 0.0f64;
    for _ in 0..timesteps {
        sim.step_through(node);
        max = sim.drive(node).iter().copied().fold(max, f64::max);
    }
    Ok(max)
}

/// Folds the thresholds into the weights.
///
/// Each conv/linear layer is divided by the threshold of the spiking layer
/// it drives and every threshold becomes 1. Because spikes are binary, this
/// leaves every membrane trajectory scaled by a constant and the spike
/// raster unchanged. A spiking layer reached by an unweighted path (an
/// identity shortcut or the raw input) can only be normalized when its
/// threshold is already 1.
pub fn to_weight_normalized(
    graph: &NetworkGraph,
    thresholds: &ThresholdSet,
) -> Result<(NetworkGraph, ThresholdSet)> {
    thresholds.check_complete(graph)?;
    let sources = graph.sources()?;
    let spiking: BTreeSet<usize> = graph.spiking_layers().into_iter().collect();
    let mut out = graph.clone();

    // The spiking layer each weighted layer drives.
    let consumers = graph.consumers()?;
    for (i, layer) in graph.layers.iter().enumerate() {
        if !layer.kind.is_weighted() {
            continue;
        }
        let targets = driven_spiking_layers(graph, &consumers, &spiking, i);
        let mut th = None;
        for t in targets {
            let v = thresholds.get(&graph.layers[t].id).expect("complete");
            match th {
                None => th = Some(v),
                Some(prev) if prev != v => {
                    return Err(Error::Argument(format!(
                        "layer '{}' drives spiking layers with different thresholds",
                        layer.id
                    )))
                }
                _ => {}
            }
        }
        let v = th.unwrap_or(1.0);
        if v == 0.0 {
            return Err(Error::ZeroThreshold(layer.id.clone()));
        }
        if v != 1.0 {
            let w = out.weights.get_mut(&layer.id).expect("weighted layer has weights");
            w.data_mut().iter_mut().for_each(|x| *x /= v);
        }
    }

    for &s in &spiking {
        let id = &graph.layers[s].id;
        let v = thresholds.get(id).expect("complete");
        if v != 1.0 && has_unweighted_path(graph, &sources, &spiking, s) {
            return Err(Error::Argument(format!(
                "spiking layer '{id}' receives an unweighted path and threshold {v} cannot be folded into weights"
            )));
        }
    }
    Ok((out, ThresholdSet::unity(graph)))
}

fn driven_spiking_layers(
    graph: &NetworkGraph,
    consumers: &[Vec<usize>],
    spiking: &BTreeSet<usize>,
    from: usize,
) -> BTreeSet<usize> {
    if spiking.contains(&from) {
        // Output layer: fires on its own current.
        return [from].into_iter().collect();
    }
    let mut found = BTreeSet::new();
    let mut stack = consumers[from].clone();
    while let Some(c) = stack.pop() {
        if spiking.contains(&c) {
            found.insert(c);
        } else if !graph.layers[c].kind.is_weighted() {
            stack.extend(consumers[c].iter().copied());
        }
    }
    found
}

fn has_unweighted_path(
    graph: &NetworkGraph,
    sources: &[Vec<Source>],
    spiking: &BTreeSet<usize>,
    to: usize,
) -> bool {
    if graph.layers[to].kind.is_weighted() {
        return false;
    }
    let mut stack = sources[to].clone();
    while let Some(s) = stack.pop() {
        match s {
            Source::Input => return true,
            Source::Layer(j) if spiking.contains(&j) => return true,
            Source::Layer(j) if graph.layers[j].kind.is_weighted() => {}
            Source::Layer(j) => stack.extend(sources[j].iter().copied()),
        }
    }
    false
}
