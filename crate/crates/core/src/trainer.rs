//! Bias-free SGD training with dropout, for desk-scale networks.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{validate_convertibility, Layer, LayerKind, NetworkGraph, Source, ValidationMode};
use crate::resnet::residual_units;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs (0-based) at whose start the rate is divided by `decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub dropout_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_decay_epochs: vec![16, 24],
            decay_factor: 10.0,
            weight_decay: 1e-4,
            momentum: 0.9,
            dropout_p: 0.5,
            epochs: 40,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning rate", self.learning_rate)?;
        positive("decay factor", self.decay_factor)?;
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Argument("weight decay must be >= 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Argument(format!("dropout p {} outside [0, 1)", self.dropout_p)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Rate in effect during `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate / self.decay_factor.powi(decays as i32)
    }
}

/// Layers on the non-identity path of some residual unit.
fn residual_path_layers(graph: &NetworkGraph) -> Result<BTreeSet<usize>> {
    Ok(residual_units(graph)?.into_iter().flat_map(|u| u.path).collect())
}

/// Initial weight standard deviation of a conv/linear layer: `sqrt(2/(k²n))`
/// for plain layers and `sqrt(2)/(k²n)` for convolutions inside a residual
/// path, with `k` the kernel size (1 for linear layers) and `n` the number
/// of output channels.
pub fn init_std(kind: &LayerKind, residual: bool) -> Option<f64> {
    let (k, n) = match *kind {
        LayerKind::Conv2d {
            kernel,
            out_channels,
            ..
        } => (kernel, out_channels),
        LayerKind::Linear { out_features, .. } => (1, out_features),
        _ => return None,
    };
    let kkn = (k * k * n) as f64;
    Some(if residual && matches!(kind, LayerKind::Conv2d { .. }) {
        2f64.sqrt() / kkn
    } else {
        (2.0 / kkn).sqrt()
    })
}

/// Draws every conv/linear weight from a zero-mean normal with
/// [`init_std`], in graph order from one seeded stream. Values are rounded
/// to single precision.
pub fn init_weights(graph: &NetworkGraph, seed: u64) -> Result<NetworkGraph> {
    let residual = residual_path_layers(graph)?;
    let mut rng = SplitMix64::new(seed);
    let mut out = graph.clone();
    for (i, layer) in graph.layers.iter().enumerate() {
        let (Some(shape), Some(std)) = (layer.kind.weight_shape(), init_std(&layer.kind, residual.contains(&i))) else {
            continue;
        };
        let normal = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng) as f32 as f64).collect();
        out.weights.insert(layer.id.clone(), Tensor::new(shape, data)?);
    }
    Ok(out)
}

/// Removes every dropout layer, then (for `p > 0`) inserts one after each
/// relu chosen by the placement rule. Networks with residual junctions get
/// dropout only after relus on non-identity paths; other networks get it
/// after every relu that does not feed a pooling layer.
pub fn place_dropout(graph: &NetworkGraph, p: f64) -> Result<NetworkGraph> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("dropout p {p} outside [0, 1)")));
    }
    let mut stripped = graph.clone();
    stripped.layers.clear();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    for layer in &graph.layers {
        let mut l = layer.clone();
        for inp in &mut l.inputs {
            if let Some(r) = renames.get(inp) {
                *inp = r.clone();
            }
        }
        if matches!(l.kind, LayerKind::Dropout { .. }) {
            renames.insert(l.id.clone(), l.inputs[0].clone());
        } else {
            stripped.layers.push(l);
        }
    }
    if p == 0.0 {
        stripped.check_structure()?;
        return Ok(stripped);
    }

    let consumers = stripped.consumers()?;
    let units = residual_units(&stripped)?;
    let chosen: BTreeSet<usize> = if units.is_empty() {
        stripped
            .layers
            .iter()
            .enumerate()
            .filter(|(i, l)| {
                l.kind == LayerKind::Relu
                    && !consumers[*i].iter().any(|&c| {
                        matches!(
                            stripped.layers[c].kind,
                            LayerKind::AvgPool2d { .. } | LayerKind::MaxPool2d { .. }
                        )
                    })
                    && !consumers[*i].is_empty()
            })
            .map(|(i, _)| i)
            .collect()
    } else {
        units
            .iter()
            .flat_map(|u| u.path.iter().copied())
            .filter(|&i| stripped.layers[i].kind == LayerKind::Relu)
            .collect()
    };

    let mut out = stripped.clone();
    out.layers.clear();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    for (i, layer) in stripped.layers.iter().enumerate() {
        let mut l = layer.clone();
        for inp in &mut l.inputs {
            if let Some(r) = renames.get(inp) {
                *inp = r.clone();
            }
        }
        out.layers.push(l);
        if chosen.contains(&i) {
            let mut id = format!("{}_drop", layer.id);
            while stripped.layer(&id).is_some() {
                id.push('_');
            }
            out.layers.push(Layer::new(id.clone(), LayerKind::Dropout { p }, &[&layer.id]));
            renames.insert(layer.id.clone(), id);
        }
    }
    out.check_structure()?;
    Ok(out)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: NetworkGraph,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        slot: usize,
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        k: usize,
        s: usize,
        p: usize,
        oh: usize,
        ow: usize,
    },
    Linear {
        slot: usize,
        n_in: usize,
        n_out: usize,
    },
    Pool {
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        s: usize,
        oh: usize,
        ow: usize,
    },
    Relu,
    Dropout(f64),
    Add,
    Pass,
}

/// A graph lowered to flat buffers for repeated forward/backward passes.
struct Compiled {
    ops: Vec<Op>,
    sources: Vec<Vec<Source>>,
    sizes: Vec<usize>,
    /// Layer id of each weight slot.
    slot_ids: Vec<String>,
}

impl Compiled {
    fn new(graph: &NetworkGraph) -> Result<Self> {
        let shapes = graph.check_structure()?;
        let sources = graph.sources()?;
        let mut ops = Vec::new();
        let mut slot_ids = Vec::new();
        for (i, layer) in graph.layers.iter().enumerate() {
            let ins: &[usize] = match sources[i][0] {
                Source::Input => &graph.input_shape,
                Source::Layer(j) => &shapes[j],
            };
            let op = match layer.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    slot_ids.push(layer.id.clone());
                    Op::Conv {
                        slot: slot_ids.len() - 1,
                        c: ins[0],
                        h: ins[1],
                        w: ins[2],
                        o: out_channels,
                        k: kernel,
                        s: stride,
                        p: padding,
                        oh: shapes[i][1],
                        ow: shapes[i][2],
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    slot_ids.push(layer.id.clone());
                    Op::Linear {
                        slot: slot_ids.len() - 1,
                        n_in: in_features,
                        n_out: out_features,
                    }
                }
                LayerKind::AvgPool2d { kernel, stride } => Op::Pool {
                    c: ins[0],
                    h: ins[1],
                    w: ins[2],
                    k: kernel,
                    s: stride,
                    oh: shapes[i][1],
                    ow: shapes[i][2],
                },
                LayerKind::Relu => Op::Relu,
                LayerKind::Dropout { p } => Op::Dropout(p),
                LayerKind::AddJunction => Op::Add,
                LayerKind::Identity => Op::Pass,
                LayerKind::MaxPool2d { .. } | LayerKind::BatchNorm { .. } => {
                    return Err(Error::Argument(format!(
                        "layer '{}' ({}) is not trainable here",
                        layer.id,
                        layer.kind.name()
                    )))
                }
            };
            ops.push(op);
        }
        Ok(Self {
            ops,
            sources,
            sizes: shapes.iter().map(|s| s.iter().product()).collect(),
            slot_ids,
        })
    }
}

struct Tape {
    outputs: Vec<Vec<f64>>,
    /// Kept-unit scale factors of each dropout layer (0 or `1/(1-p)`).
    masks: Vec<Vec<f64>>,
}

fn operand<'a>(tape_outputs: &'a [Vec<f64>], input: &'a [f64], s: Source) -> &'a [f64] {
    match s {
        Source::Input => input,
        Source::Layer(j) => &tape_outputs[j],
    }
}

#[inline]
fn tap(o: usize, s: usize, k: usize, p: usize, n: usize) -> Option<usize> {
    (o * s + k).checked_sub(p).filter(|&i| i < n)
}

fn forward(net: &Compiled, weights: &[Vec<f64>], input: &[f64], mut rng: Option<&mut SplitMix64>) -> Tape {
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(net.ops.len());
    let mut masks = vec![Vec::new(); net.ops.len()];
    for (i, op) in net.ops.iter().enumerate() {
        let x = operand(&outputs, input, net.sources[i][0]);
        let mut y = vec![0.0; net.sizes[i]];
        match *op {
            Op::Conv {
                slot,
                c,
                h,
                w,
                o,
                k,
                s,
                p,
                oh,
                ow,
            } => {
                let wt = &weights[slot];
                for oc in 0..o {
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                                for oy in 0..oh {
                                    let Some(iy) = tap(oy, s, ky, p, h) else { continue };
                                    let yrow = &mut y[(oc * oh + oy) * ow..][..ow];
                                    let xrow = &x[(ic * h + iy) * w..][..w];
                                    for (ox, yv) in yrow.iter_mut().enumerate() {
                                        if let Some(ix) = tap(ox, s, kx, p, w) {
                                            *yv += wv * xrow[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { slot, n_in, .. } => {
                for (yv, row) in y.iter_mut().zip(weights[slot].chunks(n_in)) {
                    *yv = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Op::Pool {
                c,
                h,
                w,
                k,
                s,
                oh,
                ow,
            } => {
                let norm = 1.0 / (k * k) as f64;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += x[(ch * h + oy * s + ky) * w + ox * s + kx];
                                }
                            }
                            y[(ch * oh + oy) * ow + ox] = acc * norm;
                        }
                    }
                }
            }
            Op::Relu => y.iter_mut().zip(x).for_each(|(a, &b)| *a = b.max(0.0)),
            Op::Dropout(p) => match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f64> = (0..x.len())
                        .map(|_| if r.next_f64() < p { 0.0 } else { keep })
                        .collect();
                    y.iter_mut().zip(x).zip(&m).for_each(|((a, &b), &s)| *a = b * s);
                    masks[i] = m;
                }
                _ => y.copy_from_slice(x),
            },
            Op::Add => {
                let x2 = operand(&outputs, input, net.sources[i][1]);
                y.iter_mut()
                    .zip(x.iter().zip(x2))
                    .for_each(|(a, (b, c))| *a = b + c);
            }
            Op::Pass => y.copy_from_slice(x),
        }
        outputs.push(y);
    }
    Tape { outputs, masks }
}

/// Softmax cross-entropy and its gradient with respect to the scores.
fn softmax_xent(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - scores[label];
    let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
    g[label] -= 1.0;
    (loss, g)
}

fn backward(net: &Compiled, weights: &[Vec<f64>], input: &[f64], tape: &Tape, grad_out: Vec<f64>) -> Vec<Vec<f64>> {
    let n = net.ops.len();
    let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gy: Vec<Option<Vec<f64>>> = vec![None; n];
    gy[n - 1] = Some(grad_out);
    let accumulate = |gy: &mut Vec<Option<Vec<f64>>>, s: Source, g: &[f64]| {
        if let Source::Layer(j) = s {
            match &mut gy[j] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    };
    for i in (0..n).rev() {
        let Some(g) = gy[i].take() else { continue };
        let src = net.sources[i][0];
        let x = operand(&tape.outputs, input, src);
        let needs_dx = src != Source::Input;
        match net.ops[i] {
            Op::Conv {
                slot,
                c,
                h,
                w,
                o,
                k,
                s,
                p,
                oh,
                ow,
            } => {
                let wt = &weights[slot];
                let gw = &mut grads[slot];
                let mut gx = vec![0.0; x.len()];
                for oc in 0..o {
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wi = ((oc * c + ic) * k + ky) * k + kx;
                                let wv = wt[wi];
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let Some(iy) = tap(oy, s, ky, p, h) else { continue };
                                    let grow = &g[(oc * oh + oy) * ow..][..ow];
                                    let base = (ic * h + iy) * w;
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        if let Some(ix) = tap(ox, s, kx, p, w) {
                                            acc += gv * x[base + ix];
                                            gx[base + ix] += wv * gv;
                                        }
                                    }
                                }
                                gw[wi] += acc;
                            }
                        }
                    }
                }
                if needs_dx {
                    accumulate(&mut gy, src, &gx);
                }
            }
            Op::Linear { slot, n_in, n_out } => {
                let wt = &weights[slot];
                let gw = &mut grads[slot];
                let mut gx = vec![0.0; n_in];
                for r in 0..n_out {
                    let gv = g[r];
                    let row = &wt[r * n_in..][..n_in];
                    let grow = &mut gw[r * n_in..][..n_in];
                    for j in 0..n_in {
                        grow[j] += gv * x[j];
                        gx[j] += row[j] * gv;
                    }
                }
                if needs_dx {
                    accumulate(&mut gy, src, &gx);
                }
            }
            Op::Pool {
                c,
                h,
                w,
                k,
                s,
                oh,
                ow,
            } => {
                let norm = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; x.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(ch * oh + oy) * ow + ox] * norm;
                            for ky in 0..k {
                                for kx in 0..k {
                                    gx[(ch * h + oy * s + ky) * w + ox * s + kx] += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut gy, src, &gx);
            }
            Op::Relu => {
                let y = &tape.outputs[i];
                let gx: Vec<f64> = g.iter().zip(y).map(|(&a, &v)| if v > 0.0 { a } else { 0.0 }).collect();
                accumulate(&mut gy, src, &gx);
            }
            Op::Dropout(_) if !tape.masks[i].is_empty() => {
                let gx: Vec<f64> = g.iter().zip(&tape.masks[i]).map(|(a, m)| a * m).collect();
                accumulate(&mut gy, src, &gx);
            }
            Op::Dropout(_) | Op::Pass => accumulate(&mut gy, src, &g),
            Op::Add => {
                accumulate(&mut gy, src, &g);
                accumulate(&mut gy, net.sources[i][1], &g);
            }
        }
    }
    grads
}

/// Loss of one sample and the gradient of every weight, with dropout
/// inactive. Intended for gradient checking.
pub fn loss_and_gradients(
    graph: &NetworkGraph,
    input: &Tensor,
    label: usize,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let net = Compiled::new(graph)?;
    if input.shape() != graph.input_shape.as_slice() {
        return Err(Error::Shape("input does not match graph".into()));
    }
    let weights: Vec<Vec<f64>> = net.slot_ids.iter().map(|id| graph.weights[id].data().to_vec()).collect();
    let tape = forward(&net, &weights, input.data(), None);
    let scores = tape.outputs.last().expect("non-empty");
    if label >= scores.len() {
        return Err(Error::Argument(format!("label {label} out of range")));
    }
    let (loss, g) = softmax_xent(scores, label);
    let grads = backward(&net, &weights, input.data(), &tape, g);
    Ok((loss, net.slot_ids.iter().cloned().zip(grads).collect()))
}

/// Loss of one sample with dropout inactive.
pub fn sample_loss(graph: &NetworkGraph, input: &Tensor, label: usize) -> Result<f64> {
    let net = Compiled::new(graph)?;
    let weights: Vec<Vec<f64>> = net.slot_ids.iter().map(|id| graph.weights[id].data().to_vec()).collect();
    let tape = forward(&net, &weights, input.data(), None);
    Ok(softmax_xent(tape.outputs.last().expect("non-empty"), label).0)
}

/// Class scores of a training-mode forward pass, with dropout masks drawn
/// from `seed`.
pub fn training_forward(graph: &NetworkGraph, input: &Tensor, seed: u64) -> Result<Tensor> {
    let net = Compiled::new(graph)?;
    let weights: Vec<Vec<f64>> = net.slot_ids.iter().map(|id| graph.weights[id].data().to_vec()).collect();
    let mut rng = SplitMix64::new(seed);
    let mut tape = forward(&net, &weights, input.data(), Some(&mut rng));
    let scores = tape.outputs.pop().expect("non-empty");
    Tensor::new(vec![scores.len()], scores)
}

/// Trains `graph` on preprocessed `inputs`.
///
/// Dropout layers are (re)placed with [`place_dropout`] at
/// `config.dropout_p`. Each epoch visits the samples in a seed-determined
/// order; mini-batch gradients are averaged, then weight decay and momentum
/// are applied. Weights are rounded to single precision at the end.
pub fn train(graph: &NetworkGraph, inputs: &[Tensor], labels: &[usize], config: &TrainConfig) -> Result<TrainOutcome> {
    config.check()?;
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Argument("training set is empty or inputs and labels differ in length".into()));
    }
    let report = validate_convertibility(graph, ValidationMode::Standard)?;
    if !report.is_ok() {
        return Err(Error::Constraint(report.violations));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= graph.num_classes) {
        return Err(Error::Argument(format!("label {l} out of range")));
    }
    let graph = place_dropout(graph, config.dropout_p)?;
    let net = Compiled::new(&graph)?;
    let mut weights: Vec<Vec<f64>> = net.slot_ids.iter().map(|id| graph.weights[id].data().to_vec()).collect();
    let mut velocity: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.rate_at(epoch);
        let epoch_seed = derive_seed(config.seed, epoch as u64);
        let mut shuffle = SplitMix64::new(epoch_seed);
        for i in (1..order.len()).rev() {
            let j = (shuffle.next() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let per_sample: Vec<(f64, bool, Vec<Vec<f64>>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut rng = SplitMix64::new(derive_seed(epoch_seed, (b * config.batch_size + k) as u64 + 1));
                    let x = inputs[idx].data();
                    let tape = forward(&net, &weights, x, Some(&mut rng));
                    let scores = tape.outputs.last().expect("non-empty");
                    let hit = crate::tensor::argmax(scores) == labels[idx];
                    let (loss, g) = softmax_xent(scores, labels[idx]);
                    (loss, hit, backward(&net, &weights, x, &tape, g))
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
            for (loss, hit, g) in &per_sample {
                loss_sum += loss;
                correct += *hit as usize;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
            for ((w, v), g) in weights.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    let d = gi * scale + config.weight_decay * *wi;
                    *vi = config.momentum * *vi + d;
                    *wi -= lr * *vi;
                }
            }
        }
        let loss = loss_sum / inputs.len() as f64;
        if !loss.is_finite() || weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { epoch, loss });
        }
        let accuracy = correct as f64 / inputs.len() as f64;
        log::info!("epoch {epoch}: lr {lr} loss {loss:.4} train acc {accuracy:.4}");
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            loss,
            accuracy,
        });
    }

    let mut out = graph.clone();
    for (id, w) in net.slot_ids.iter().zip(weights) {
        let shape = out.weights[id].shape().to_vec();
        out.weights.insert(id.clone(), Tensor::new(shape, w)?);
    }
    out.round_weights_to_f32();
    for id in &net.slot_ids {
        out.needs_training.remove(id);
    }
    debug_assert!(out.biases.is_empty());
    Ok(TrainOutcome { graph: out, history })
}

/// Convenience wrapper over [`train`] for a dataset of raw samples; the
/// graph's input statistics are applied first.
pub fn train_on(graph: &NetworkGraph, ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let inputs = ds.preprocessed(graph)?;
    train(graph, &inputs, &ds.labels, config)
}

/// Fraction of samples whose analog prediction matches the label.
pub fn accuracy(graph: &NetworkGraph, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    let hits = inputs
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| crate::ann::predict(graph, x).map(|p| (p == l) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::ann_forward;
    use crate::graph::INPUT;

    fn mlp(p: f64) -> NetworkGraph {
        let mut g = NetworkGraph::new(vec![2], 2);
        g.push(Layer::new(
            "fc1",
            LayerKind::Linear {
                in_features: 2,
                out_features: 8,
            },
            &[INPUT],
        ))
        .push(Layer::new("r1", LayerKind::Relu, &["fc1"]))
        .push(Layer::new(
            "fc2",
            LayerKind::Linear {
                in_features: 8,
                out_features: 2,
            },
            &["r1"],
        ));
        for l in &g.layers.clone() {
            if let Some(s) = l.kind.weight_shape() {
                g.weights.insert(l.id.clone(), Tensor::zeros(&s));
            }
        }
        place_dropout(&init_weights(&g, 1).unwrap(), p).unwrap()
    }

    #[test]
    fn decay_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.rate_at(0), 0.05);
        assert!((c.rate_at(16) - 0.005).abs() < 1e-15);
        assert!((c.rate_at(39) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let mut rng = SplitMix64::new(3);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..200 {
            let a = rng.next_f64() * 2.0 - 1.0;
            let b = rng.next_f64() * 2.0 - 1.0;
            if (a + b).abs() < 0.1 {
                continue;
            }
            xs.push(Tensor::new(vec![2], vec![a, b]).unwrap());
            ys.push((a + b > 0.0) as usize);
        }
        let cfg = TrainConfig {
            epochs: 20,
            dropout_p: 0.0,
            lr_decay_epochs: vec![],
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&mlp(0.0), &xs, &ys, &cfg).unwrap();
        assert!(accuracy(&out.graph, &xs, &ys).unwrap() >= 0.99);
        assert_eq!(out.history.len(), 20);
        assert!(out.graph.weights.values().all(|w| w.is_f32_exact()));
    }

    #[test]
    fn zero_dropout_matches_analog_forward() {
        let g = mlp(0.0);
        assert!(!g.layers.iter().any(|l| matches!(l.kind, LayerKind::Dropout { .. })));
        let x = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let a = training_forward(&g, &x, 9).unwrap();
        assert_eq!(a, ann_forward(&g, &x, false).unwrap().0);
    }

    #[test]
    fn dropout_keep_fraction() {
        let p = 0.3;
        let g = mlp(p);
        let net = Compiled::new(&g).unwrap();
        let weights: Vec<Vec<f64>> = net.slot_ids.iter().map(|id| g.weights[id].data().to_vec()).collect();
        let mut rng = SplitMix64::new(11);
        let (mut kept, mut total) = (0usize, 0usize);
        for _ in 0..2000 {
            let tape = forward(&net, &weights, &[0.5, 0.5], Some(&mut rng));
            for m in tape.masks.iter().filter(|m| !m.is_empty()) {
                kept += m.iter().filter(|&&v| v > 0.0).count();
                total += m.len();
            }
        }
        let frac = kept as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((frac - (1.0 - p)).abs() <= 3.0 * sigma, "keep fraction {frac}");
    }

    #[test]
    fn divergence_is_reported() {
        let xs = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(); 4];
        let cfg = TrainConfig {
            learning_rate: 1e200,
            dropout_p: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mlp(0.0), &xs, &[0, 1, 0, 1], &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn init_std_formulas() {
        let k3n64 = LayerKind::Conv2d {
            in_channels: 64,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert!((init_std(&k3n64, false).unwrap() - (2.0f64 / 576.0).sqrt()).abs() < 1e-15);
        assert!((init_std(&k3n64, true).unwrap() - 2f64.sqrt() / 576.0).abs() < 1e-15);
        let fc = LayerKind::Linear {
            in_features: 4,
            out_features: 8,
        };
        assert!((init_std(&fc, false).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vgg_dropout_placement_skips_relus_before_pooling() {
        let mut g = NetworkGraph::new(vec![1, 4, 4], 2);
        let conv = LayerKind::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        g.push(Layer::new("c1", conv.clone(), &[INPUT]))
            .push(Layer::new("r1", LayerKind::Relu, &["c1"]))
            .push(Layer::new("c2", conv, &["r1"]))
            .push(Layer::new("r2", LayerKind::Relu, &["c2"]))
            .push(Layer::new("p", LayerKind::AvgPool2d { kernel: 2, stride: 2 }, &["r2"]))
            .push(Layer::new(
                "fc",
                LayerKind::Linear {
                    in_features: 4,
                    out_features: 2,
                },
                &["p"],
            ));
        let g = init_weights(
            &{
                let mut g = g;
                for l in &g.layers.clone() {
                    if let Some(s) = l.kind.weight_shape() {
                        g.weights.insert(l.id.clone(), Tensor::zeros(&s));
                    }
                }
                g
            },
            0,
        )
        .unwrap();
        let d = place_dropout(&g, 0.5).unwrap();
        let ids: Vec<&str> = d.layers.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, ["c1", "r1", "r1_drop", "c2", "r2", "p", "fc"]);
        assert_eq!(place_dropout(&d, 0.5).unwrap(), d);
        assert_eq!(place_dropout(&d, 0.0).unwrap(), g);
    }
}
