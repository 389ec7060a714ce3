//! Sparsity and compute accounting for converted networks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, Source, INPUT};
use crate::rng::derive_seed;
use crate::snn::{RunProfile, Simulation, SpikingNetwork};
use crate::tensor::{argmax, Tensor};

/// Multiply-accumulates of one analog inference, per layer in graph order.
/// Only conv and linear layers are non-zero; pooling is folded into the
/// consuming layer.
pub fn synaptic_op_counts(graph: &NetworkGraph) -> Result<Vec<(String, u64)>> {
    let shapes = graph.check_structure()?;
    Ok(graph
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, out)| {
            let macs = match l.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (out[1] * out[2] * out_channels * in_channels * kernel * kernel) as u64,
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => (in_features * out_features) as u64,
                _ => 0,
            };
            (l.id.clone(), macs)
        })
        .collect())
}

/// Number of synapses each input neuron of a conv/linear layer projects to.
/// Zero-padding taps are not synapses.
pub fn fanout(graph: &NetworkGraph, layer: usize) -> Result<Vec<u64>> {
    let shapes = graph.check_structure()?;
    let sources = graph.sources()?;
    let in_shape: &[usize] = match sources[layer][0] {
        Source::Input => &graph.input_shape,
        Source::Layer(j) => &shapes[j],
    };
    match graph.layers[layer].kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (shapes[layer][1], shapes[layer][2]);
            let taps = |i: usize, n_out: usize| {
                (0..kernel)
                    .filter(|&t| crate::snn::scatter_target(i, t, stride, padding, n_out).is_some())
                    .count() as u64
            };
            let mut f = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        f.push(taps(iy, oh) * taps(ix, ow) * out_channels as u64);
                    }
                }
            }
            Ok(f)
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => Ok(vec![out_features as u64; in_features]),
        _ => Err(Error::Argument(format!(
            "layer '{}' has no synapses",
            graph.layers[layer].id
        ))),
    }
}

/// Cumulative spike events arriving at each layer's output positions,
/// reconstructed from a profile: spiking layers carry their own counts,
/// pooling sums its window, junctions sum operands, pass-through copies,
/// and analog currents carry none.
fn event_counts(graph: &NetworkGraph, profile: &RunProfile) -> Result<Vec<Vec<u64>>> {
    let shapes = graph.check_structure()?;
    let sources = graph.sources()?;
    let spiking = graph.spiking_layers();
    let mut counts: Vec<Vec<u64>> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let size: usize = shapes[i].iter().product();
        let operand = |s: Source, counts: &Vec<Vec<u64>>| -> Vec<u64> {
            match s {
                Source::Input => profile.input.spike_counts.clone(),
                Source::Layer(j) => counts[j].clone(),
            }
        };
        let c = if spiking.contains(&i) {
            let l = profile
                .layer(&layer.id)
                .ok_or_else(|| Error::Argument(format!("profile lacks layer '{}'", layer.id)))?;
            if l.neurons() != size {
                return Err(Error::Argument(format!("profile of '{}' has wrong size", layer.id)));
            }
            l.spike_counts.clone()
        } else {
            match layer.kind {
                LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => vec![0; size],
                LayerKind::AvgPool2d { kernel, stride } => {
                    let x = operand(sources[i][0], &counts);
                    let (h, w) = match sources[i][0] {
                        Source::Input => (graph.input_shape[1], graph.input_shape[2]),
                        Source::Layer(j) => (shapes[j][1], shapes[j][2]),
                    };
                    let (ch, oh, ow) = (shapes[i][0], shapes[i][1], shapes[i][2]);
                    let mut y = vec![0; size];
                    for c in 0..ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut s = 0;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        s += x[(c * h + oy * stride + ky) * w + ox * stride + kx];
                                    }
                                }
                                y[(c * oh + oy) * ow + ox] = s;
                            }
                        }
                    }
                    y
                }
                LayerKind::AddJunction => {
                    let a = operand(sources[i][0], &counts);
                    let b = operand(sources[i][1], &counts);
                    a.iter().zip(&b).map(|(x, y)| x + y).collect()
                }
                _ => operand(sources[i][0], &counts),
            }
        };
        counts.push(c);
    }
    Ok(counts)
}

/// Accumulate operations of each conv/linear layer over the run(s) in
/// `profile`: the dot product of the cumulative events at the layer's input
/// and the per-neuron synaptic fanout. Signed input events count once each.
pub fn ac_census(graph: &NetworkGraph, profile: &RunProfile) -> Result<Vec<(String, u64)>> {
    let counts = event_counts(graph, profile)?;
    let sources = graph.sources()?;
    let mut out = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        if !layer.kind.is_weighted() {
            continue;
        }
        let f = fanout(graph, i)?;
        let events = match sources[i][0] {
            Source::Input => &profile.input.spike_counts,
            Source::Layer(j) => &counts[j],
        };
        out.push((layer.id.clone(), events.iter().zip(&f).map(|(e, f)| e * f).sum()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCensus {
    pub id: String,
    /// Per analog inference.
    pub macs: u64,
    /// Mean per spiking inference.
    pub acs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCensus {
    pub timesteps: usize,
    pub runs: usize,
    pub layers: Vec<LayerCensus>,
}

impl OpCensus {
    /// `profile` may be the merge of `runs` inferences.
    pub fn new(graph: &NetworkGraph, profile: &RunProfile, runs: usize) -> Result<Self> {
        if runs == 0 {
            return Err(Error::Argument("census needs at least one run".into()));
        }
        let macs = synaptic_op_counts(graph)?;
        let acs = ac_census(graph, profile)?;
        let layers = acs
            .into_iter()
            .map(|(id, ac)| LayerCensus {
                macs: macs.iter().find(|(m, _)| *m == id).map(|&(_, n)| n).unwrap_or(0),
                acs: ac as f64 / runs as f64,
                id,
            })
            .collect();
        Ok(Self {
            timesteps: profile.timesteps,
            runs,
            layers,
        })
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_acs(&self) -> f64 {
        self.layers.iter().map(|l| l.acs).sum()
    }

    /// `layer,macs,acs`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,macs,acs\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.id, l.macs, l.acs));
        }
        s
    }
}

/// Spiking accumulates per analog multiply-accumulate.
pub fn ac_mac_ratio(census: &OpCensus) -> Result<f64> {
    let macs = census.total_macs();
    if macs == 0 {
        return Err(Error::DegenerateLayer("network has no multiply-accumulates".into()));
    }
    Ok(census.total_acs() / macs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpikes {
    pub id: String,
    pub neurons: usize,
    pub avg_cumulative_spikes: f64,
}

/// Mean over a batch of per-neuron cumulative spike counts, for the input
/// and every spiking layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeProfile {
    pub timesteps: usize,
    pub layers: Vec<LayerSpikes>,
}

impl SpikeProfile {
    /// `layer,neurons,avg_cumulative_spikes`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,neurons,avg_cumulative_spikes\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.id, l.neurons, l.avg_cumulative_spikes));
        }
        s
    }

    /// Spearman correlation between depth and activity over the spiking
    /// layers (the input excluded).
    pub fn depth_correlation(&self) -> f64 {
        let hidden: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| l.id != INPUT)
            .map(|l| l.avg_cumulative_spikes)
            .collect();
        let depth: Vec<f64> = (0..hidden.len()).map(|i| i as f64).collect();
        spearman(&depth, &hidden)
    }
}

pub fn spike_count_profile(profiles: &[RunProfile]) -> Result<SpikeProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Argument("no profiles".into()))?;
    for p in profiles {
        if p.timesteps != first.timesteps {
            return Err(Error::Argument(format!(
                "profiles mix horizons {} and {}",
                first.timesteps, p.timesteps
            )));
        }
        if p.layers.len() != first.layers.len()
            || p.layers.iter().zip(&first.layers).any(|(a, b)| a.id != b.id || a.neurons() != b.neurons())
        {
            return Err(Error::Argument("profiles come from different networks".into()));
        }
    }
    let n = profiles.len() as f64;
    let mean = |pick: &dyn Fn(&RunProfile) -> f64| profiles.iter().map(pick).sum::<f64>() / n;
    let mut layers = vec![LayerSpikes {
        id: first.input.id.clone(),
        neurons: first.input.neurons(),
        avg_cumulative_spikes: mean(&|p| p.input.average_per_neuron()),
    }];
    for (k, l) in first.layers.iter().enumerate() {
        layers.push(LayerSpikes {
            id: l.id.clone(),
            neurons: l.neurons(),
            avg_cumulative_spikes: mean(&|p| p.layers[k].average_per_neuron()),
        });
    }
    Ok(SpikeProfile {
        timesteps: first.timesteps,
        layers,
    })
}

/// Evaluation error after each timestep in `grid`, from one simulation per
/// sample. Sample `i` uses seed `derive_seed(seed, i)`; `t = 0` classifies
/// from all-zero counts.
pub fn convergence_curve(
    net: &SpikingNetwork,
    images: &[Tensor],
    labels: &[usize],
    grid: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Argument("evaluation set is empty or unlabeled".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("timestep grid must be strictly increasing".into()));
    }
    let t_max = grid.last().copied().unwrap_or(0);
    let hits: Vec<Vec<bool>> = images
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &label))| {
            let mut sim = Simulation::new(net, x, derive_seed(seed, i as u64), false)?;
            let mut out = Vec::with_capacity(grid.len());
            let mut g = grid.iter().peekable();
            for t in 0..=t_max {
                if t > 0 {
                    sim.step();
                }
                if g.peek() == Some(&&t) {
                    g.next();
                    out.push(argmax(sim.output_counts()) == label);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let wrong = hits.iter().filter(|h| !h[k]).count();
            (t, wrong as f64 / n)
        })
        .collect())
}

/// `t,error`
pub fn convergence_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("t,error\n");
    for (t, e) in curve {
        s.push_str(&format!("{t},{e}\n"));
    }
    s
}

/// Grid `0, step, 2*step, ..., t_max` (with `t_max` always included).
pub fn timestep_grid(t_max: usize, step: usize) -> Vec<usize> {
    let step = step.max(1);
    let mut g: Vec<usize> = (0..=t_max).step_by(step).collect();
    if g.last() != Some(&t_max) {
        g.push(t_max);
    }
    g
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// series is constant or shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(&x[..n]), ranks(&y[..n]));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layer;

    #[test]
    fn linear_mac_count() {
        let mut g = NetworkGraph::new(vec![10], 4);
        g.push(Layer::new(
            "fc",
            LayerKind::Linear {
                in_features: 10,
                out_features: 4,
            },
            &[INPUT],
        ));
        g.weights.insert("fc".into(), Tensor::zeros(&[4, 10]));
        assert_eq!(synaptic_op_counts(&g).unwrap(), vec![("fc".to_string(), 40)]);
    }

    #[test]
    fn conv_mac_count_and_pool() {
        let mut g = NetworkGraph::new(vec![1, 6, 6], 1);
        g.push(Layer::new(
            "c",
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            &[INPUT],
        ))
        .push(Layer::new("r", LayerKind::Relu, &["c"]))
        .push(Layer::new("p", LayerKind::AvgPool2d { kernel: 2, stride: 2 }, &["r"]))
        .push(Layer::new(
            "fc",
            LayerKind::Linear {
                in_features: 4,
                out_features: 1,
            },
            &["p"],
        ));
        g.weights.insert("c".into(), Tensor::zeros(&[1, 1, 3, 3]));
        g.weights.insert("fc".into(), Tensor::zeros(&[1, 4]));
        let m = synaptic_op_counts(&g).unwrap();
        assert_eq!(m[0].1, 144);
        assert_eq!(m[2].1, 0);
        // Every output position uses all 9 taps, so fanouts sum to the MACs.
        assert_eq!(fanout(&g, 0).unwrap().iter().sum::<u64>(), 144);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 9.0, 20.0]) - 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0, 1.0]).is_nan());
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 0.0]);
        // Ranks x = (1, 2, 3, 4), y = (2.5, 2.5, 4, 1) by hand.
        assert!((r + 1.5 / 22.5f64.sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn grid() {
        assert_eq!(timestep_grid(10, 4), vec![0, 4, 8, 10]);
        assert_eq!(timestep_grid(0, 4), vec![0]);
    }

    #[test]
    fn ratio_needs_macs() {
        let c = OpCensus {
            timesteps: 1,
            runs: 1,
            layers: vec![],
        };
        assert!(ac_mac_ratio(&c).is_err());
    }
}
