//! Event-driven integrate-and-fire simulation of a converted network.
//!
//! Every relu of the analog graph becomes a layer of integrate-and-fire
//! neurons without leak or refractory period, and the final conv/linear
//! layer gets an integrate-and-fire output layer whose spike counts are the
//! class evidence. Weighted layers are evaluated by scattering each incoming
//! event through its outgoing synapses. Average pooling is linear in the
//! spike counts, so it is folded into the consuming layer as fixed `1/k²`
//! synapses rather than simulated with neurons.
//!
//! All layers process a timestep's events immediately: a spike emitted by
//! the first layer at step `t` reaches the output during the same step.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::{EncoderState, SpikeMap};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, Source};
use crate::normalizer::ThresholdSet;
use crate::rng::derive_seed;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub timesteps: usize,
    pub seed: u64,
    pub record_profile: bool,
}

impl SimConfig {
    pub fn new(timesteps: usize, seed: u64) -> Self {
        Self {
            timesteps,
            seed,
            record_profile: false,
        }
    }

    pub fn with_profile(mut self) -> Self {
        self.record_profile = true;
        self
    }
}

/// Relative slack on the threshold comparison. A potential that equals the
/// threshold in exact arithmetic can land a few ulps below it after
/// rounding; without slack, folding thresholds into weights or rescaling a
/// layer would flip such ties.
pub const FIRE_TOLERANCE: f64 = 1e-9;

/// Membrane potentials of one layer of integrate-and-fire neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct IfLayerState {
    pub v_mem: Vec<f64>,
    pub v_th: f64,
}

impl IfLayerState {
    pub fn new(neurons: usize, v_th: f64) -> Result<Self> {
        if !(v_th.is_finite() && v_th > 0.0) {
            return Err(Error::Argument(format!("threshold must be positive, got {v_th}")));
        }
        Ok(Self {
            v_mem: vec![0.0; neurons],
            v_th,
        })
    }

    /// Integrates one step of weighted input and fires.
    ///
    /// `v_mem += input`; neurons reaching `v_th` (up to [`FIRE_TOLERANCE`])
    /// emit one spike and reset to zero, the rest keep their potential. At
    /// most one spike per step.
    /// Returns the number of spikes.
    pub fn step(&mut self, input: &[f64], out: &mut [f64]) -> usize {
        let th = self.v_th * (1.0 - FIRE_TOLERANCE);
        let mut fired = 0;
        for ((v, &x), o) in self.v_mem.iter_mut().zip(input).zip(out.iter_mut()) {
            *v += x;
            if *v >= th {
                *v = 0.0;
                *o = 1.0;
                fired += 1;
            } else {
                *o = 0.0;
            }
        }
        fired
    }

    pub fn reset(&mut self) {
        self.v_mem.iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn if_layer_step(state: &mut IfLayerState, weighted_input: &Tensor) -> SpikeMap {
    let mut out = vec![0.0; weighted_input.len()];
    state.step(weighted_input.data(), &mut out);
    SpikeMap {
        shape: weighted_input.shape().to_vec(),
        events: out.iter().map(|&v| v as i8).collect(),
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        /// `[c_in][k][k][c_out]`, so one input event touches contiguous weights.
        weights: Vec<f64>,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        oh: usize,
        ow: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        /// `[in][out]`
        weights: Vec<f64>,
        n_in: usize,
        n_out: usize,
    },
    Pool {
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        k: usize,
        stride: usize,
    },
    Add,
    Pass,
    Fire,
}

#[derive(Debug, Clone)]
struct Node {
    id: String,
    op: Op,
    sources: Vec<Source>,
    size: usize,
    /// Index into the spiking-layer list when this node fires.
    spiking: Option<usize>,
    /// Index into the weighted-layer list when this node has synapses.
    weighted: Option<usize>,
}

/// A graph compiled for simulation together with its thresholds.
///
/// Immutable once built; share it across simulations of different images.
#[derive(Debug, Clone)]
pub struct SpikingNetwork {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    input_size: usize,
    encoder_scale: f64,
    /// `(node index, threshold)`; `None` only in partially converted networks.
    spiking: Vec<(usize, Option<f64>)>,
    weighted: Vec<usize>,
    num_classes: usize,
}

impl SpikingNetwork {
    /// Compiles `graph` with a threshold for every spiking layer.
    pub fn new(graph: &NetworkGraph, thresholds: &ThresholdSet) -> Result<Self> {
        let net = Self::partial(graph, &thresholds.as_map())?;
        if let Some(&(i, _)) = net.spiking.iter().find(|(_, t)| t.is_none()) {
            return Err(Error::ConversionIncomplete(net.nodes[i].id.clone()));
        }
        Ok(net)
    }

    /// Compiles `graph` where only some spiking layers have thresholds.
    /// Such a network can only be simulated up to its first unset layer.
    pub fn partial(graph: &NetworkGraph, thresholds: &BTreeMap<String, f64>) -> Result<Self> {
        let shapes = graph.check_structure()?;
        let sources = graph.sources()?;
        let spiking_idx = graph.spiking_layers();
        let mut nodes = Vec::with_capacity(graph.layers.len());
        let mut spiking = Vec::new();
        let mut weighted = Vec::new();
        for (i, layer) in graph.layers.iter().enumerate() {
            let in_shape: &[usize] = match sources[i][0] {
                Source::Input => &graph.input_shape,
                Source::Layer(j) => &shapes[j],
            };
            let op = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let w = graph.weights[&layer.id].data();
                    let k = kernel;
                    let mut t = vec![0.0; w.len()];
                    for o in 0..out_channels {
                        for c in 0..in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    t[((c * k + ky) * k + kx) * out_channels + o] =
                                        w[((o * in_channels + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    Op::Conv {
                        weights: t,
                        c_in: in_channels,
                        h: in_shape[1],
                        w: in_shape[2],
                        c_out: out_channels,
                        oh: shapes[i][1],
                        ow: shapes[i][2],
                        k,
                        stride,
                        padding,
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let w = graph.weights[&layer.id].data();
                    let mut t = vec![0.0; w.len()];
                    for o in 0..out_features {
                        for j in 0..in_features {
                            t[j * out_features + o] = w[o * in_features + j];
                        }
                    }
                    Op::Linear {
                        weights: t,
                        n_in: in_features,
                        n_out: out_features,
                    }
                }
                LayerKind::AvgPool2d { kernel, stride } => Op::Pool {
                    c: in_shape[0],
                    h: in_shape[1],
                    w: in_shape[2],
                    oh: shapes[i][1],
                    ow: shapes[i][2],
                    k: kernel,
                    stride,
                },
                LayerKind::AddJunction => Op::Add,
                LayerKind::Relu => Op::Fire,
                LayerKind::Dropout { .. } | LayerKind::Identity => Op::Pass,
                LayerKind::MaxPool2d { .. } | LayerKind::BatchNorm { .. } => {
                    return Err(Error::Argument(format!(
                        "layer '{}' ({}) has no spiking equivalent",
                        layer.id,
                        layer.kind.name()
                    )))
                }
            };
            let spiking_slot = if spiking_idx.contains(&i) {
                spiking.push((i, thresholds.get(&layer.id).copied()));
                Some(spiking.len() - 1)
            } else {
                None
            };
            let weighted_slot = if layer.kind.is_weighted() {
                weighted.push(i);
                Some(weighted.len() - 1)
            } else {
                None
            };
            nodes.push(Node {
                id: layer.id.clone(),
                op,
                sources: sources[i].clone(),
                size: shapes[i].iter().product(),
                spiking: spiking_slot,
                weighted: weighted_slot,
            });
        }
        for &(i, th) in &spiking {
            if let Some(t) = th {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::Argument(format!(
                        "threshold of '{}' must be positive, got {t}",
                        nodes[i].id
                    )));
                }
            }
        }
        Ok(Self {
            nodes,
            input_shape: graph.input_shape.clone(),
            input_size: graph.input_shape.iter().product(),
            encoder_scale: graph.encoder_scale,
            spiking,
            weighted,
            num_classes: graph.num_classes,
        })
    }

    pub fn spiking_ids(&self) -> Vec<String> {
        self.spiking
            .iter()
            .map(|&(i, _)| self.nodes[i].id.clone())
            .collect()
    }

    pub fn weighted_ids(&self) -> Vec<String> {
        self.weighted.iter().map(|&i| self.nodes[i].id.clone()).collect()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Mutable state of one simulation run over one image.
pub struct Simulation<'a> {
    net: &'a SpikingNetwork,
    image: Vec<f64>,
    encoder: EncoderState,
    input_events: Vec<f64>,
    input_mult: Vec<f64>,
    /// Per node: output value this step (current, or 0/1 spikes).
    values: Vec<Vec<f64>>,
    /// Per node: spike events underlying each entry (0 for analog currents).
    mult: Vec<Vec<f64>>,
    /// Per node: pre-fire drive of the output layer; empty elsewhere.
    drive: Vec<Vec<f64>>,
    states: Vec<IfLayerState>,
    scratch: Vec<f64>,
    t: usize,
    profile: Option<ProfileCounters>,
    output_counts: Vec<u64>,
}

#[derive(Debug, Clone)]
struct ProfileCounters {
    input_counts: Vec<u64>,
    spike_counts: Vec<Vec<u64>>,
    ac_events: Vec<u64>,
    output_trace: Vec<Vec<u64>>,
}

impl<'a> Simulation<'a> {
    /// Fresh simulation with all membrane potentials at zero.
    /// `image` is a preprocessed input.
    pub fn new(net: &'a SpikingNetwork, image: &Tensor, seed: u64, record: bool) -> Result<Self> {
        if image.shape() != net.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "image {:?} does not match network input {:?}",
                image.shape(),
                net.input_shape
            )));
        }
        let encoder = EncoderState::new(seed, net.encoder_scale)?;
        let states = net
            .spiking
            .iter()
            .map(|&(i, th)| IfLayerState {
                v_mem: vec![0.0; net.nodes[i].size],
                v_th: th.unwrap_or(f64::INFINITY),
            })
            .collect();
        let out = net.output_node();
        let profile = record.then(|| ProfileCounters {
            input_counts: vec![0; net.input_size],
            spike_counts: net
                .spiking
                .iter()
                .map(|&(i, _)| vec![0; net.nodes[i].size])
                .collect(),
            ac_events: vec![0; net.weighted.len()],
            output_trace: Vec::new(),
        });
        Ok(Self {
            net,
            image: image.data().to_vec(),
            encoder,
            input_events: vec![0.0; net.input_size],
            input_mult: vec![0.0; net.input_size],
            values: net.nodes.iter().map(|n| vec![0.0; n.size]).collect(),
            mult: net.nodes.iter().map(|n| vec![0.0; n.size]).collect(),
            drive: net
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| if i == out && n.op != Op::Fire { vec![0.0; n.size] } else { Vec::new() })
                .collect(),
            states,
            scratch: Vec::new(),
            t: 0,
            profile,
            output_counts: vec![0; net.nodes[out].size],
        })
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    /// Cumulative spike count of each output neuron.
    pub fn output_counts(&self) -> &[u64] {
        &self.output_counts
    }

    /// Advances the whole network by one timestep.
    pub fn step(&mut self) {
        self.step_through(self.net.output_node());
        self.t += 1;
        let out = self.net.output_node();
        for (c, &s) in self.output_counts.iter_mut().zip(&self.values[out]) {
            *c += s as u64;
        }
        if let Some(p) = &mut self.profile {
            p.output_trace.push(self.output_counts.clone());
        }
    }

    /// Encodes one input step and evaluates nodes `0..=last`. Nodes after
    /// `last` are left untouched; used to probe a partially converted network.
    pub fn step_through(&mut self, last: usize) {
        let mut events = vec![0i8; self.net.input_size];
        self.encoder.step_into(&self.image, &mut events);
        for ((v, m), &e) in self
            .input_events
            .iter_mut()
            .zip(self.input_mult.iter_mut())
            .zip(&events)
        {
            *v = e as f64;
            *m = (e as f64).abs();
        }
        if let Some(p) = &mut self.profile {
            for (c, &e) in p.input_counts.iter_mut().zip(&events) {
                *c += e.unsigned_abs() as u64;
            }
        }
        for i in 0..=last {
            self.eval_node(i);
        }
    }

    /// Weighted spike input received by spiking layer `node` in the last step.
    pub fn drive(&self, node: usize) -> &[f64] {
        let n = &self.net.nodes[node];
        if n.op == Op::Fire {
            self.operand(n.sources[0]).0
        } else {
            &self.drive[node]
        }
    }

    fn operand(&self, s: Source) -> (&[f64], &[f64]) {
        match s {
            Source::Input => (&self.input_events, &self.input_mult),
            Source::Layer(j) => (&self.values[j], &self.mult[j]),
        }
    }

    fn eval_node(&mut self, i: usize) {
        let net = self.net;
        let node = &net.nodes[i];
        let mut out = std::mem::take(&mut self.values[i]);
        let mut mult = std::mem::take(&mut self.mult[i]);
        match &node.op {
            Op::Conv {
                weights,
                c_in,
                h,
                w,
                c_out,
                oh,
                ow,
                k,
                stride,
                padding,
            } => {
                // Accumulate in [oh][ow][c_out] order, then transpose.
                let mut acc = std::mem::take(&mut self.scratch);
                let (x, m) = self.operand(node.sources[0]);
                acc.clear();
                acc.resize(out.len(), 0.0);
                let mut ac = 0.0;
                let (k, stride, padding) = (*k, *stride, *padding);
                for c in 0..*c_in {
                    for iy in 0..*h {
                        for ix in 0..*w {
                            let j = (c * h + iy) * w + ix;
                            let v = x[j];
                            if v == 0.0 && m[j] == 0.0 {
                                continue;
                            }
                            let mut touched = 0usize;
                            for ky in 0..k {
                                let Some(oy) = scatter_target(iy, ky, stride, padding, *oh) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ox) = scatter_target(ix, kx, stride, padding, *ow)
                                    else {
                                        continue;
                                    };
                                    let wbase = ((c * k + ky) * k + kx) * c_out;
                                    let wrow = &weights[wbase..wbase + c_out];
                                    let obase = (oy * ow + ox) * c_out;
                                    for (a, &wv) in acc[obase..obase + c_out].iter_mut().zip(wrow) {
                                        *a += wv * v;
                                    }
                                    touched += c_out;
                                }
                            }
                            ac += m[j] * touched as f64;
                        }
                    }
                }
                for oc in 0..*c_out {
                    for pos in 0..oh * ow {
                        out[oc * oh * ow + pos] = acc[pos * c_out + oc];
                    }
                }
                self.scratch = acc;
                mult.iter_mut().for_each(|v| *v = 0.0);
                self.count_ac(node, ac);
            }
            Op::Linear {
                weights,
                n_in,
                n_out,
            } => {
                let (x, m) = self.operand(node.sources[0]);
                out.iter_mut().for_each(|v| *v = 0.0);
                let mut ac = 0.0;
                for j in 0..*n_in {
                    let v = x[j];
                    if v == 0.0 && m[j] == 0.0 {
                        continue;
                    }
                    let wrow = &weights[j * n_out..(j + 1) * n_out];
                    for (a, &wv) in out.iter_mut().zip(wrow) {
                        *a += wv * v;
                    }
                    ac += m[j] * *n_out as f64;
                }
                mult.iter_mut().for_each(|v| *v = 0.0);
                self.count_ac(node, ac);
            }
            Op::Pool {
                c,
                h,
                w,
                oh,
                ow,
                k,
                stride,
            } => {
                let (x, m) = self.operand(node.sources[0]);
                let inv = 1.0 / (k * k) as f64;
                for ch in 0..*c {
                    for oy in 0..*oh {
                        for ox in 0..*ow {
                            let (mut sv, mut sm) = (0.0, 0.0);
                            for ky in 0..*k {
                                let row = (ch * h + oy * stride + ky) * w + ox * stride;
                                for j in row..row + k {
                                    sv += x[j];
                                    sm += m[j];
                                }
                            }
                            let o = (ch * oh + oy) * ow + ox;
                            out[o] = sv * inv;
                            mult[o] = sm;
                        }
                    }
                }
            }
            Op::Add => {
                let (a, am) = self.operand(node.sources[0]);
                let (b, bm) = self.operand(node.sources[1]);
                for j in 0..out.len() {
                    out[j] = a[j] + b[j];
                    mult[j] = am[j] + bm[j];
                }
            }
            Op::Pass => {
                let (x, m) = self.operand(node.sources[0]);
                out.copy_from_slice(x);
                mult.copy_from_slice(m);
            }
            Op::Fire => {}
        }

        if let Some(slot) = node.spiking {
            let state = &mut self.states[slot];
            if node.op == Op::Fire {
                let drive = match node.sources[0] {
                    Source::Input => &self.input_events,
                    Source::Layer(j) => &self.values[j],
                };
                state.step(drive, &mut out);
            } else {
                // Output layer: the current computed above drives its neurons.
                let drive = &mut self.drive[i];
                drive.copy_from_slice(&out);
                state.step(drive, &mut out);
            }
            mult.copy_from_slice(&out);
            if let Some(p) = &mut self.profile {
                for (c, &s) in p.spike_counts[slot].iter_mut().zip(&out) {
                    *c += s as u64;
                }
            }
        }
        self.values[i] = out;
        self.mult[i] = mult;
    }

    fn count_ac(&mut self, node: &Node, ac: f64) {
        if let (Some(p), Some(slot)) = (&mut self.profile, node.weighted) {
            p.ac_events[slot] += ac as u64;
        }
    }

    /// Spike output of spiking layer `node` in the last step.
    pub fn spikes(&self, node: usize) -> &[f64] {
        &self.values[node]
    }

    /// Membrane potentials of spiking layer `node`; `None` for other nodes.
    pub fn membrane(&self, node: usize) -> Option<&[f64]> {
        self.net.nodes[node].spiking.map(|s| self.states[s].v_mem.as_slice())
    }

    pub fn into_profile(self) -> Option<RunProfile> {
        let net = self.net;
        let t = self.t;
        self.profile.map(|p| RunProfile {
            timesteps: t,
            input: LayerActivity {
                id: crate::graph::INPUT.to_string(),
                spike_counts: p.input_counts,
            },
            layers: net
                .spiking
                .iter()
                .zip(p.spike_counts)
                .map(|(&(i, _), counts)| LayerActivity {
                    id: net.nodes[i].id.clone(),
                    spike_counts: counts,
                })
                .collect(),
            ac_events: net
                .weighted
                .iter()
                .zip(p.ac_events)
                .map(|(&i, n)| (net.nodes[i].id.clone(), n))
                .collect(),
            output_trace: p.output_trace,
        })
    }
}

/// Output coordinate reached from input coordinate `i` through kernel tap
/// `tap`, if any: solves `o * stride + tap - padding = i`.
#[inline]
pub(crate) fn scatter_target(i: usize, tap: usize, stride: usize, padding: usize, n_out: usize) -> Option<usize> {
    let num = (i + padding).checked_sub(tap)?;
    if num % stride != 0 || num / stride >= n_out {
        return None;
    }
    Some(num / stride)
}

impl PartialEq for Op {
    fn eq(&self, other: &Self) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

/// Cumulative spike counts of one layer's neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivity {
    pub id: String,
    pub spike_counts: Vec<u64>,
}

impl LayerActivity {
    pub fn neurons(&self) -> usize {
        self.spike_counts.len()
    }

    pub fn total(&self) -> u64 {
        self.spike_counts.iter().sum()
    }

    pub fn average_per_neuron(&self) -> f64 {
        self.total() as f64 / self.neurons() as f64
    }
}

/// Activity recorded during one or more simulation runs of the same network.
#[derive(Debug, Clone, PartialEq)]
pub struct RunProfile {
    pub timesteps: usize,
    /// Input events per pixel (absolute value of signed spikes).
    pub input: LayerActivity,
    /// Spiking layers in graph order.
    pub layers: Vec<LayerActivity>,
    /// Accumulate operations performed by each conv/linear layer.
    pub ac_events: Vec<(String, u64)>,
    /// Cumulative output counts after each timestep (empty after a merge).
    pub output_trace: Vec<Vec<u64>>,
}

impl RunProfile {
    pub fn layer(&self, id: &str) -> Option<&LayerActivity> {
        if id == crate::graph::INPUT {
            return Some(&self.input);
        }
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn total_ac(&self) -> u64 {
        self.ac_events.iter().map(|&(_, n)| n).sum()
    }

    /// Sums the counts of two profiles of the same network and horizon.
    pub fn merge(&mut self, other: &RunProfile) -> Result<()> {
        if self.timesteps != other.timesteps
            || self.layers.len() != other.layers.len()
            || self.ac_events.len() != other.ac_events.len()
        {
            return Err(Error::Argument("profiles come from different runs".into()));
        }
        let add = |a: &mut LayerActivity, b: &LayerActivity| {
            for (x, y) in a.spike_counts.iter_mut().zip(&b.spike_counts) {
                *x += y;
            }
        };
        add(&mut self.input, &other.input);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add(a, b);
        }
        for (a, b) in self.ac_events.iter_mut().zip(&other.ac_events) {
            a.1 += b.1;
        }
        self.output_trace.clear();
        Ok(())
    }

    /// CSV with one row per layer: id, neuron count, cumulative spikes,
    /// average spikes per neuron and accumulate events.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,neurons,cumulative_spikes,avg_spikes_per_neuron,ac_events\n");
        let mut rows: Vec<(&str, usize, u64, f64, u64)> = vec![(
            &self.input.id,
            self.input.neurons(),
            self.input.total(),
            self.input.average_per_neuron(),
            0,
        )];
        for l in &self.layers {
            rows.push((&l.id, l.neurons(), l.total(), l.average_per_neuron(), 0));
        }
        for (id, n) in &self.ac_events {
            if let Some(r) = rows.iter_mut().find(|r| r.0 == id) {
                r.4 = *n;
            } else {
                rows.push((id, 0, 0, 0.0, *n));
            }
        }
        for (id, n, total, avg, acs) in rows {
            s.push_str(&format!("{id},{n},{total},{avg},{acs}\n"));
        }
        s
    }
}

/// Classifies one preprocessed image by the cumulative output spike counts
/// after `config.timesteps` steps. Ties go to the lowest class index.
pub fn run_inference(
    graph: &NetworkGraph,
    thresholds: &ThresholdSet,
    image: &Tensor,
    config: &SimConfig,
) -> Result<(usize, Option<RunProfile>)> {
    let net = SpikingNetwork::new(graph, thresholds)?;
    simulate(&net, image, config)
}

/// As [`run_inference`], reusing a compiled network.
pub fn simulate(
    net: &SpikingNetwork,
    image: &Tensor,
    config: &SimConfig,
) -> Result<(usize, Option<RunProfile>)> {
    if config.timesteps == 0 {
        return Err(Error::Argument("timesteps must be at least 1".into()));
    }
    let mut sim = Simulation::new(net, image, config.seed, config.record_profile)?;
    for _ in 0..config.timesteps {
        sim.step();
    }
    let class = argmax(sim.output_counts());
    Ok((class, sim.into_profile()))
}

/// Predictions of the spiking network over a batch.
///
/// Sample `i` is encoded with seed `derive_seed(seed, i)`, so the result does
/// not depend on how the batch is scheduled across threads.
pub fn classify_batch(
    net: &SpikingNetwork,
    images: &[Tensor],
    timesteps: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let cfg = SimConfig::new(timesteps, derive_seed(seed, i as u64));
            simulate(net, x, &cfg).map(|(c, _)| c)
        })
        .collect()
}

/// Fraction of `labels` the spiking network gets wrong.
pub fn snn_error(
    net: &SpikingNetwork,
    images: &[Tensor],
    labels: &[usize],
    timesteps: usize,
    seed: u64,
) -> Result<f64> {
    let preds = classify_batch(net, images, timesteps, seed)?;
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len().max(1) as f64)
}
