//! Residual-network rewrites and the residual threshold policy.
//!
//! A residual unit is an [`LayerKind::AddJunction`] whose operands are a
//! fork layer (the identity path, an edge with implicit weight 1) and the
//! end of a non-identity path that starts at that fork.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, NetworkGraph, Source};
use crate::normalizer::{spike_norm_with_fixed, NormalizeOptions, ThresholdMethod, ThresholdSet};
use crate::tensor::Tensor;

/// Default threshold of residual-unit spiking layers.
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 1.0;

/// Points on the constraint ladder for converting residual networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConstraintLevel {
    /// No junction relus; every spiking layer balanced with SPIKE-NORM.
    Basic,
    /// Junction relus; every spiking layer balanced with SPIKE-NORM.
    JunctionRelu,
    /// Junction relus; every hidden spiking layer at threshold 1.
    UnityThreshold,
    /// Junction relus; plain stem balanced, residual units at 1.
    Full,
}

impl ConstraintLevel {
    pub const ALL: [ConstraintLevel; 4] = [
        ConstraintLevel::Basic,
        ConstraintLevel::JunctionRelu,
        ConstraintLevel::UnityThreshold,
        ConstraintLevel::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConstraintLevel::Basic => "basic",
            ConstraintLevel::JunctionRelu => "junction-relu",
            ConstraintLevel::UnityThreshold => "unity-threshold",
            ConstraintLevel::Full => "full",
        }
    }

    pub fn junction_relus(&self) -> bool {
        *self != ConstraintLevel::Basic
    }
}

impl fmt::Display for ConstraintLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConstraintLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConstraintLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s || l.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::Argument(format!("unknown constraint level '{s}'")))
    }
}

/// One residual unit, by layer index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualUnit {
    pub junction: usize,
    /// Source of the identity operand.
    pub fork: Source,
    /// Layers strictly between the fork and the junction on the
    /// non-identity path.
    pub path: BTreeSet<usize>,
    /// Relus consuming the junction.
    pub junction_relus: Vec<usize>,
}

fn ancestors(sources: &[Vec<Source>], of: Source) -> BTreeSet<Source> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![of];
    while let Some(s) = stack.pop() {
        if !seen.insert(s) {
            continue;
        }
        if let Source::Layer(j) = s {
            stack.extend(sources[j].iter().copied());
        }
    }
    seen
}

/// Finds every residual unit of the graph.
pub fn residual_units(graph: &NetworkGraph) -> Result<Vec<ResidualUnit>> {
    let sources = graph.sources()?;
    let consumers = graph.consumers()?;
    let mut units = Vec::new();
    for (a, layer) in graph.layers.iter().enumerate() {
        if layer.kind != LayerKind::AddJunction {
            continue;
        }
        let (p, q) = (sources[a][0], sources[a][1]);
        let anc_p = ancestors(&sources, p);
        let anc_q = ancestors(&sources, q);
        let (fork, anc_end) = if anc_q.contains(&p) {
            (p, anc_q)
        } else if anc_p.contains(&q) {
            (q, anc_p)
        } else {
            return Err(Error::Structural {
                layer: layer.id.clone(),
                reason: "junction operands do not form an identity shortcut".into(),
            });
        };
        let path = anc_end
            .into_iter()
            .filter_map(|s| match s {
                Source::Layer(j) if s != fork && ancestors(&sources, s).contains(&fork) => Some(j),
                _ => None,
            })
            .collect();
        let junction_relus = consumers[a]
            .iter()
            .copied()
            .filter(|&c| graph.layers[c].kind == LayerKind::Relu)
            .collect();
        units.push(ResidualUnit {
            junction: a,
            fork,
            path,
            junction_relus,
        });
    }
    Ok(units)
}

/// Spiking layers that belong to a residual unit: relus on a non-identity
/// path and junction relus.
pub fn residual_spiking_layers(graph: &NetworkGraph) -> Result<BTreeSet<String>> {
    let spiking: BTreeSet<usize> = graph.spiking_layers().into_iter().collect();
    let mut out = BTreeSet::new();
    for u in residual_units(graph)? {
        for i in u.path.iter().chain(&u.junction_relus) {
            if spiking.contains(i) {
                out.insert(graph.layers[*i].id.clone());
            }
        }
    }
    Ok(out)
}

/// Spiking layers outside every residual unit: the plain stem and the head.
pub fn non_residual_spiking_layers(graph: &NetworkGraph) -> Result<Vec<String>> {
    let residual = residual_spiking_layers(graph)?;
    Ok(graph
        .spiking_layer_ids()
        .into_iter()
        .filter(|id| !residual.contains(id))
        .collect())
}

/// Makes every junction immediately followed by a relu, inserting one named
/// `{junction}_relu` where needed. Identity paths are left untouched.
pub fn insert_junction_relus(graph: &NetworkGraph) -> Result<NetworkGraph> {
    let consumers = graph.consumers()?;
    let mut out = graph.clone();
    out.layers.clear();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let mut l = layer.clone();
        for inp in &mut l.inputs {
            if let Some(r) = renames.get(inp) {
                *inp = r.clone();
            }
        }
        out.layers.push(l);
        let has_relu = !consumers[i].is_empty()
            && consumers[i]
                .iter()
                .all(|&c| graph.layers[c].kind == LayerKind::Relu);
        if layer.kind == LayerKind::AddJunction && !has_relu {
            let mut id = format!("{}_relu", layer.id);
            while graph.layer(&id).is_some() {
                id.push('_');
            }
            out.layers.push(Layer::new(id.clone(), LayerKind::Relu, &[&layer.id]));
            renames.insert(layer.id.clone(), id);
        }
    }
    out.check_structure()?;
    Ok(out)
}

/// Thresholds for a graph whose stem and head are balanced: residual-unit
/// layers get `residual_value`, every other spiking layer keeps its value
/// from `stem`.
pub fn apply_residual_threshold_policy(
    graph: &NetworkGraph,
    stem: &ThresholdSet,
    residual_value: f64,
) -> Result<ThresholdSet> {
    let residual = residual_spiking_layers(graph)?;
    let entries = graph
        .spiking_layer_ids()
        .into_iter()
        .map(|id| {
            if residual.contains(&id) {
                Ok((id, residual_value))
            } else {
                stem.get(&id)
                    .map(|v| (id.clone(), v))
                    .ok_or(Error::ConversionIncomplete(id))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ThresholdSet::new(stem.method, entries)
}

/// Checks that within every residual unit the non-identity path relus and
/// the junction relus share one threshold.
pub fn fan_in_thresholds_equal(graph: &NetworkGraph, thresholds: &ThresholdSet) -> Result<bool> {
    let spiking: BTreeSet<usize> = graph.spiking_layers().into_iter().collect();
    for u in residual_units(graph)? {
        let mut values = u
            .path
            .iter()
            .chain(&u.junction_relus)
            .filter(|i| spiking.contains(i))
            .map(|&i| {
                let id = &graph.layers[i].id;
                thresholds.get(id).ok_or_else(|| Error::ConversionIncomplete(id.clone()))
            })
            .collect::<Result<Vec<f64>>>()?;
        values.dedup();
        if values.len() > 1 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Converts a residual network at the given ladder point.
///
/// `graph` must already have (or lack) junction relus as the level requires;
/// levels are distinguished by how thresholds are assigned, and the basic
/// level is meant for a network trained without junction relus.
pub fn convert_at_level(
    graph: &NetworkGraph,
    level: ConstraintLevel,
    samples: &[Tensor],
    timesteps: usize,
    seed: u64,
    options: &NormalizeOptions,
) -> Result<ThresholdSet> {
    let has_junction_relus = residual_units(graph)?
        .iter()
        .all(|u| !u.junction_relus.is_empty());
    if level.junction_relus() && !has_junction_relus {
        return Err(Error::Argument(format!(
            "level '{level}' needs a relu after every junction"
        )));
    }
    let out_id = graph.layers[graph.output_index()].id.clone();
    let fixed: BTreeMap<String, f64> = match level {
        ConstraintLevel::Basic | ConstraintLevel::JunctionRelu => BTreeMap::new(),
        ConstraintLevel::UnityThreshold => graph
            .spiking_layer_ids()
            .into_iter()
            .filter(|id| *id != out_id)
            .map(|id| (id, DEFAULT_RESIDUAL_THRESHOLD))
            .collect(),
        ConstraintLevel::Full => residual_spiking_layers(graph)?
            .into_iter()
            .map(|id| (id, DEFAULT_RESIDUAL_THRESHOLD))
            .collect(),
    };
    let th = spike_norm_with_fixed(graph, samples, timesteps, seed, &fixed, options)?;
    ThresholdSet::new(ThresholdMethod::SpikeNorm, th.entries().to_vec())
}

/// Replaces a leading wide convolution (odd kernel above 3) with three 3x3
/// convolutions with relus between them. The first carries the original
/// stride; the output shape is unchanged. New weights are zero and listed in
/// `needs_training`. Returns `None` when there is no such stem.
pub fn replace_stem(graph: &NetworkGraph) -> Result<Option<NetworkGraph>> {
    let Some(first) = graph.layers.first() else {
        return Ok(None);
    };
    let LayerKind::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    } = first.kind
    else {
        return Ok(None);
    };
    let shrink = kernel.saturating_sub(3) / 2;
    if kernel <= 3 || kernel % 2 == 0 || padding < shrink {
        log::info!("layer '{}' is not a replaceable wide stem; graph unchanged", first.id);
        return Ok(None);
    }
    let id = first.id.clone();
    let names = [format!("{id}_a"), format!("{id}_b"), format!("{id}_c")];
    let relus = [format!("{id}_a_relu"), format!("{id}_b_relu")];
    for n in names.iter().chain(&relus) {
        if graph.layer(n).is_some() {
            return Err(Error::Structural {
                layer: n.clone(),
                reason: "id needed by the stem rewrite is taken".into(),
            });
        }
    }
    let conv = |cin, s, p| LayerKind::Conv2d {
        in_channels: cin,
        out_channels,
        kernel: 3,
        stride: s,
        padding: p,
    };
    let mut out = graph.clone();
    out.layers = vec![
        Layer::new(names[0].clone(), conv(in_channels, stride, padding - shrink), &first.inputs.iter().map(String::as_str).collect::<Vec<_>>()),
        Layer::new(relus[0].clone(), LayerKind::Relu, &[&names[0]]),
        Layer::new(names[1].clone(), conv(out_channels, 1, 1), &[&relus[0]]),
        Layer::new(relus[1].clone(), LayerKind::Relu, &[&names[1]]),
        Layer::new(names[2].clone(), conv(out_channels, 1, 1), &[&relus[1]]),
    ];
    for l in &graph.layers[1..] {
        let mut l = l.clone();
        for inp in &mut l.inputs {
            if *inp == id {
                *inp = names[2].clone();
            }
        }
        out.layers.push(l);
    }
    out.weights.remove(&id);
    out.needs_training.remove(&id);
    for (n, l) in names.iter().zip([0, 2, 4]) {
        let shape = out.layers[l].kind.weight_shape().expect("conv");
        out.weights.insert(n.clone(), Tensor::zeros(&shape));
        out.needs_training.insert(n.clone());
    }
    out.check_structure()?;
    Ok(Some(out))
}
