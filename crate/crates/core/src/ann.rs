//! Analog forward pass with ReLU semantics.

use crate::error::{Error, Result};
use crate::graph::{window_out, LayerKind, NetworkGraph, Source};
use crate::tensor::Tensor;

/// Direct 2-D cross-correlation of a `[C, H, W]` input with `[O, C, k, k]`
/// weights. Accumulates in f64; no bias.
pub fn conv2d(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
        return Err(Error::Shape(format!(
            "conv weights {ws:?} incompatible with input {:?}",
            input.shape()
        )));
    }
    let (o, k) = (ws[0], ws[2]);
    let (oh, ow) = match (window_out(h, k, stride, padding), window_out(w, k, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Shape(format!("kernel {k} does not fit input {h}x{w}"))),
    };
    let x = input.data();
    let wd = weights.data();
    let mut out = vec![0.0f64; o * oh * ow];
    for oc in 0..o {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, acc) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *acc += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Mean over each `kernel × kernel` window.
pub fn avgpool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    let (oh, ow) = match (window_out(h, kernel, stride, 0), window_out(w, kernel, stride, 0)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Shape(format!("pool {kernel} does not fit {h}x{w}"))),
    };
    let x = input.data();
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..kernel {
                    let row = (ch * h + oy * stride + ky) * w + ox * stride;
                    s += x[row..row + kernel].iter().sum::<f64>();
                }
                out[(ch * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn maxpool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    let (oh, ow) = match (window_out(h, kernel, stride, 0), window_out(w, kernel, stride, 0)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Shape(format!("pool {kernel} does not fit {h}x{w}"))),
    };
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(ch * oh + oy) * ow + ox];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        *o = o.max(x[(ch * h + oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// `weights · flatten(input)` for `[out, in]` weights.
pub fn linear(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != input.len() {
        return Err(Error::Shape(format!(
            "linear weights {ws:?} incompatible with {} inputs",
            input.len()
        )));
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(ws[1])
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![ws[0]], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Per-layer outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub outputs: Vec<Tensor>,
}

/// Applies one non-dropout layer to its operands.
pub(crate) fn apply_layer(
    graph: &NetworkGraph,
    index: usize,
    inputs: &[&Tensor],
) -> Result<Tensor> {
    let layer = &graph.layers[index];
    let x = inputs[0];
    match layer.kind {
        LayerKind::Conv2d {
            stride, padding, ..
        } => conv2d(x, &graph.weights[&layer.id], stride, padding),
        LayerKind::Linear { .. } => linear(x, &graph.weights[&layer.id]),
        LayerKind::AvgPool2d { kernel, stride } => avgpool2d(x, kernel, stride),
        LayerKind::MaxPool2d { kernel, stride } => maxpool2d(x, kernel, stride),
        LayerKind::Relu => Ok(relu(x)),
        LayerKind::Dropout { .. } | LayerKind::Identity => Ok(x.clone()),
        LayerKind::AddJunction => {
            let y = inputs[1];
            if x.shape() != y.shape() {
                return Err(Error::Shape("junction operand shapes differ".into()));
            }
            let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        LayerKind::BatchNorm { .. } => Err(Error::Argument(format!(
            "layer '{}': batch normalization cannot be evaluated (no statistics)",
            layer.id
        ))),
    }
}

/// Subtracts the graph's input mean, if any, from a raw sample.
pub fn preprocess(graph: &NetworkGraph, raw: &Tensor) -> Result<Tensor> {
    if raw.shape() != graph.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "input {:?} does not match declared {:?}",
            raw.shape(),
            graph.input_shape
        )));
    }
    Ok(match &graph.input_mean {
        Some(mean) => {
            let data = raw.data().iter().zip(mean).map(|(x, m)| x - m).collect();
            Tensor::new(raw.shape().to_vec(), data)?
        }
        None => raw.clone(),
    })
}

/// Runs the network on one preprocessed sample; returns every layer's output.
pub fn forward_all(graph: &NetworkGraph, input: &Tensor) -> Result<ActivationTrace> {
    if input.shape() != graph.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "input {:?} does not match declared {:?}",
            input.shape(),
            graph.input_shape
        )));
    }
    let sources = graph.sources()?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
    for (i, srcs) in sources.iter().enumerate() {
        let ins: Vec<&Tensor> = srcs
            .iter()
            .map(|s| match *s {
                Source::Input => input,
                Source::Layer(j) => &outputs[j],
            })
            .collect();
        let y = apply_layer(graph, i, &ins)?;
        outputs.push(y);
    }
    Ok(ActivationTrace { outputs })
}

/// Class scores for one preprocessed sample, optionally with the full trace.
pub fn ann_forward(
    graph: &NetworkGraph,
    input: &Tensor,
    record: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    let mut trace = forward_all(graph, input)?;
    let scores = trace.outputs.last().cloned().expect("non-empty graph");
    if !record {
        trace.outputs.clear();
        return Ok((scores, None));
    }
    Ok((scores, Some(trace)))
}

/// Predicted class of a preprocessed sample (ties to the lowest index).
pub fn predict(graph: &NetworkGraph, input: &Tensor) -> Result<usize> {
    Ok(ann_forward(graph, input, false)?.0.argmax())
}

/// Largest post-activation value of each spiking layer over a set of samples.
///
/// Entries follow [`NetworkGraph::spiking_layers`]. For the output layer the
/// rectified score `max(0, score)` is used, since its integrate-and-fire
/// counterpart can only express non-negative drive.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMaxima {
    pub layers: Vec<(String, f64)>,
}

impl ActivationMaxima {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.layers.iter().find(|(l, _)| l == id).map(|&(_, v)| v)
    }

    /// Elementwise maximum of two partial results over the same graph.
    pub fn merge(mut self, other: &ActivationMaxima) -> Self {
        for ((_, a), (_, b)) in self.layers.iter_mut().zip(&other.layers) {
            *a = a.max(*b);
        }
        self
    }
}

pub fn sample_maxima(graph: &NetworkGraph, trace: &ActivationTrace) -> ActivationMaxima {
    let layers = graph
        .spiking_layers()
        .into_iter()
        .map(|i| {
            let m = trace.outputs[i].max().max(0.0);
            (graph.layers[i].id.clone(), m)
        })
        .collect();
    ActivationMaxima { layers }
}

/// Maximum activation of every spiking layer over all samples.
/// `samples` are preprocessed inputs.
pub fn record_max_activations(graph: &NetworkGraph, samples: &[Tensor]) -> Result<ActivationMaxima> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(Error::Argument("empty dataset subset".into()));
    }
    let per_sample: Vec<ActivationMaxima> = samples
        .par_iter()
        .map(|x| forward_all(graph, x).map(|t| sample_maxima(graph, &t)))
        .collect::<Result<_>>()?;
    let mut it = per_sample.into_iter();
    let first = it.next().unwrap();
    Ok(it.fold(first, |acc, m| acc.merge(&m)))
}
