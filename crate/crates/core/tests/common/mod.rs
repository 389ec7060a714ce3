#![allow(dead_code)]

use spikeconv::graph::window_out;
use spikeconv::rng::SplitMix64;
use spikeconv::{Layer, LayerKind, NetworkGraph, Tensor, INPUT};

pub fn gauss(rng: &mut SplitMix64) -> f64 {
    let u = rng.next_f64().max(1e-300);
    let v = rng.next_f64();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

pub fn below(rng: &mut SplitMix64, n: usize) -> usize {
    (rng.next() % n as u64) as usize
}

/// He-style random weights for every weighted layer, rounded to f32.
pub fn randomize(g: &mut NetworkGraph, seed: u64, gain: f64) {
    let mut rng = SplitMix64::new(seed);
    for l in &g.layers {
        if let Some(s) = l.kind.weight_shape() {
            let fan_in: usize = s[1..].iter().product();
            let std = gain * (2.0 / fan_in as f64).sqrt();
            let data = (0..s.iter().product::<usize>())
                .map(|_| (gauss(&mut rng) * std) as f32 as f64)
                .collect();
            g.weights.insert(l.id.clone(), Tensor::new(s, data).unwrap());
        }
    }
}

pub fn random_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect()).unwrap()
}

pub fn random_images(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    (0..n as u64).map(|i| random_image(shape, seed.wrapping_mul(1000).wrapping_add(i))).collect()
}

/// Bias-free conv/relu stack with optional average pooling, one optional
/// hidden linear layer and a linear classifier. Always convertible.
pub fn random_cnn(seed: u64) -> NetworkGraph {
    let mut rng = SplitMix64::new(seed);
    let (mut c, mut h, mut w) = (1 + below(&mut rng, 2), 4 + below(&mut rng, 5), 4 + below(&mut rng, 5));
    let classes = 2 + below(&mut rng, 4);
    let mut g = NetworkGraph::new(vec![c, h, w], classes);
    let mut prev = INPUT.to_string();
    let convs = 1 + below(&mut rng, 3);
    for i in 0..convs {
        let kernel = [1, 3, 3, 5][below(&mut rng, 4)];
        let padding = below(&mut rng, kernel / 2 + 1);
        let stride = 1 + below(&mut rng, 2);
        let (Some(oh), Some(ow)) = (window_out(h, kernel, stride, padding), window_out(w, kernel, stride, padding)) else {
            continue;
        };
        let out = 1 + below(&mut rng, 4);
        let id = format!("conv{i}");
        g.push(Layer::new(
            &id,
            LayerKind::Conv2d {
                in_channels: c,
                out_channels: out,
                kernel,
                stride,
                padding,
            },
            &[&prev],
        ));
        let r = format!("relu{i}");
        g.push(Layer::new(&r, LayerKind::Relu, &[&id]));
        prev = r;
        (c, h, w) = (out, oh, ow);
        if h >= 2 && w >= 2 && below(&mut rng, 3) == 0 {
            let p = format!("pool{i}");
            g.push(Layer::new(&p, LayerKind::AvgPool2d { kernel: 2, stride: 2 }, &[&prev]));
            prev = p;
            (h, w) = (h / 2, w / 2);
        }
    }
    let mut features = c * h * w;
    if below(&mut rng, 2) == 0 {
        let hidden = 2 + below(&mut rng, 8);
        g.push(Layer::new(
            "fc_hidden",
            LayerKind::Linear {
                in_features: features,
                out_features: hidden,
            },
            &[&prev],
        ));
        g.push(Layer::new("fc_hidden_relu", LayerKind::Relu, &["fc_hidden"]));
        prev = "fc_hidden_relu".into();
        features = hidden;
    }
    g.push(Layer::new(
        "fc_out",
        LayerKind::Linear {
            in_features: features,
            out_features: classes,
        },
        &[&prev],
    ));
    randomize(&mut g, seed ^ 0x5eed, 1.0);
    g
}

/// Weighted-sum neuron layer: `n` inputs, one linear unit, unity weights.
pub fn two_input_neuron() -> NetworkGraph {
    let mut g = NetworkGraph::new(vec![2], 1);
    g.push(Layer::new(
        "fc",
        LayerKind::Linear {
            in_features: 2,
            out_features: 1,
        },
        &[INPUT],
    ));
    g.weights.insert("fc".into(), Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    g
}

/// Single linear synapse of weight `w` from one input pixel.
pub fn single_synapse(w: f64) -> NetworkGraph {
    let mut g = NetworkGraph::new(vec![1], 1);
    g.push(Layer::new(
        "fc",
        LayerKind::Linear {
            in_features: 1,
            out_features: 1,
        },
        &[INPUT],
    ));
    g.weights.insert("fc".into(), Tensor::new(vec![1, 1], vec![w]).unwrap());
    g
}

/// Spikes of every spiking layer at every step, flattened in layer order.
pub fn raster(net: &spikeconv::snn::SpikingNetwork, image: &Tensor, seed: u64, steps: usize) -> Vec<Vec<bool>> {
    let nodes: Vec<usize> = net.spiking_ids().iter().map(|id| net.node_index(id).unwrap()).collect();
    let mut sim = spikeconv::snn::Simulation::new(net, image, seed, false).unwrap();
    (0..steps)
        .map(|_| {
            sim.step();
            nodes.iter().flat_map(|&n| sim.spikes(n).iter().map(|&s| s > 0.0)).collect()
        })
        .collect()
}

pub fn mismatches(a: &[Vec<bool>], b: &[Vec<bool>]) -> usize {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count()).sum()
}

/// Thresholds drawn uniformly from `[lo, hi)` for every spiking layer.
pub fn random_thresholds(g: &NetworkGraph, seed: u64, lo: f64, hi: f64) -> spikeconv::ThresholdSet {
    let mut rng = SplitMix64::new(seed);
    spikeconv::ThresholdSet::new(
        spikeconv::ThresholdMethod::Unity,
        g.spiking_layer_ids().into_iter().map(|id| (id, lo + (hi - lo) * rng.next_f64())).collect(),
    )
    .unwrap()
}

/// Residual network with a wide stem, `1..=3` identity-shortcut units whose
/// paths hold two or three convolutions, optional junction relus, and a
/// linear head.
pub fn random_resnet(seed: u64, junction_relu: Option<bool>) -> NetworkGraph {
    let mut rng = SplitMix64::new(seed);
    let size = 8 + 2 * below(&mut rng, 5);
    let c_in = 1 + below(&mut rng, 2);
    let ch = 2 + below(&mut rng, 3);
    let mut g = NetworkGraph::new(vec![c_in, size, size], 3 + below(&mut rng, 3));
    let kernel = [3, 5, 7][below(&mut rng, 3)];
    let stride = 1 + below(&mut rng, 2);
    let conv = |cin, cout, k, s| LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: s,
        padding: k / 2,
    };
    g.push(Layer::new("stem", conv(c_in, ch, kernel, stride), &[INPUT]))
        .push(Layer::new("stem_relu", LayerKind::Relu, &["stem"]));
    let mut h = window_out(size, kernel, stride, kernel / 2).unwrap();
    let mut prev = "stem_relu".to_string();
    for b in 0..1 + below(&mut rng, 3) {
        let depth = 2 + below(&mut rng, 2);
        let mut p = prev.clone();
        for d in 0..depth {
            let c = format!("b{b}_conv{d}");
            g.push(Layer::new(&c, conv(ch, ch, 3, 1), &[&p]));
            p = c;
            if d + 1 < depth {
                let r = format!("b{b}_relu{d}");
                g.push(Layer::new(&r, LayerKind::Relu, &[&p]));
                p = r;
            }
        }
        let add = format!("b{b}_add");
        g.push(Layer::new(&add, LayerKind::AddJunction, &[&prev, &p]));
        prev = add.clone();
        if junction_relu.unwrap_or_else(|| below(&mut rng, 2) == 0) {
            let r = format!("b{b}_out");
            g.push(Layer::new(&r, LayerKind::Relu, &[&add]));
            prev = r;
        }
    }
    if h >= 2 {
        g.push(Layer::new("pool", LayerKind::AvgPool2d { kernel: 2, stride: 2 }, &[&prev]));
        prev = "pool".into();
        h /= 2;
    }
    let n = g.num_classes;
    g.push(Layer::new(
        "fc",
        LayerKind::Linear {
            in_features: ch * h * h,
            out_features: n,
        },
        &[&prev],
    ));
    randomize(&mut g, seed ^ 0xabc, 1.0);
    g
}
