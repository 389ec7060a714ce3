mod common;

use common::{random_cnn, random_images};
use proptest::prelude::*;
use spikeconv::ann::{ann_forward, forward_all, record_max_activations};
use spikeconv::graph::Source;
use spikeconv::{LayerKind, NetworkGraph, Tensor};

/// Straightforward loop evaluation with explicit zero padding.
fn naive_forward(g: &NetworkGraph, x: &Tensor) -> Vec<Vec<f64>> {
    let sources = g.sources().unwrap();
    let shapes = g.check_structure().unwrap();
    let mut outs: Vec<Vec<f64>> = Vec::new();
    for (i, l) in g.layers.iter().enumerate() {
        let (inp, in_shape): (&[f64], &[usize]) = match sources[i][0] {
            Source::Input => (x.data(), &g.input_shape),
            Source::Layer(j) => (&outs[j], &shapes[j]),
        };
        let y = match l.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let w = g.weights[&l.id].data();
                let (h, wd) = (in_shape[1] as i64, in_shape[2] as i64);
                let (oh, ow) = (shapes[i][1], shapes[i][2]);
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for c in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (oy * stride + ky) as i64 - padding as i64;
                                        let ix = (ox * stride + kx) as i64 - padding as i64;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let v = inp[(c as i64 * h * wd + iy * wd + ix) as usize];
                                        s += v * w[((o * in_channels + c) * kernel + ky) * kernel + kx];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                y
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let w = g.weights[&l.id].data();
                (0..out_features)
                    .map(|o| (0..in_features).map(|k| w[o * in_features + k] * inp[k]).sum())
                    .collect()
            }
            LayerKind::AvgPool2d { kernel, stride } => {
                let (h, wd) = (in_shape[1], in_shape[2]);
                let (c, oh, ow) = (shapes[i][0], shapes[i][1], shapes[i][2]);
                let mut y = Vec::new();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    s += inp[(ch * h + oy * stride + ky) * wd + ox * stride + kx];
                                }
                            }
                            y.push(s / (kernel * kernel) as f64);
                        }
                    }
                }
                y
            }
            LayerKind::Relu => inp.iter().map(|v| v.max(0.0)).collect(),
            _ => inp.to_vec(),
        };
        outs.push(y);
    }
    outs
}

fn weighted_ids(g: &NetworkGraph) -> Vec<String> {
    g.layers.iter().filter(|l| l.kind.is_weighted()).map(|l| l.id.clone()).collect()
}

fn scaled(g: &NetworkGraph, id: &str, c: f64) -> NetworkGraph {
    let mut g = g.clone();
    let w = g.weights[id].scale(c);
    g.weights.insert(id.to_string(), w);
    g
}

#[test]
fn forward_matches_naive_oracle() {
    for seed in 0..40 {
        let g = random_cnn(seed);
        for x in random_images(&g.input_shape, 3, seed) {
            let trace = forward_all(&g, &x).unwrap();
            let naive = naive_forward(&g, &x);
            for (a, b) in trace.outputs.iter().zip(&naive) {
                for (p, q) in a.data().iter().zip(b) {
                    assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "seed {seed}: {p} vs {q}");
                }
            }
        }
    }
}

#[test]
fn record_max_equals_brute_force() {
    for seed in 0..10 {
        let g = random_cnn(100 + seed);
        let xs = random_images(&g.input_shape, 50, seed);
        let maxima = record_max_activations(&g, &xs).unwrap();
        for i in g.spiking_layers() {
            let id = &g.layers[i].id;
            let brute = xs
                .iter()
                .map(|x| forward_all(&g, x).unwrap().outputs[i].data().iter().fold(0.0f64, |m, &v| m.max(v)))
                .fold(0.0f64, f64::max);
            assert_eq!(maxima.get(id).unwrap(), brute, "{id}");
            let naive = xs
                .iter()
                .map(|x| naive_forward(&g, x)[i].iter().fold(0.0f64, |m, &v| m.max(v)))
                .fold(0.0f64, f64::max);
            assert!((brute - naive).abs() <= 1e-12 * (1.0 + naive));
        }
        let mut rev = xs.clone();
        rev.reverse();
        assert_eq!(record_max_activations(&g, &rev).unwrap(), maxima);
    }
}

#[test]
fn forward_is_deterministic() {
    let g = random_cnn(3);
    let x = &random_images(&g.input_shape, 1, 3)[0];
    let a = ann_forward(&g, x, false).unwrap().0;
    let b = ann_forward(&g, x, false).unwrap().0;
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_homogeneity(seed in any::<u64>(), pick in any::<usize>(), c in 0.01f64..100.0) {
        let g = random_cnn(seed);
        let ids = weighted_ids(&g);
        let id = &ids[pick % ids.len()];
        let k = g.index_of(id).unwrap();
        let x = &random_images(&g.input_shape, 1, seed)[0];
        let base = forward_all(&g, x).unwrap();
        let s = forward_all(&scaled(&g, id, c), x).unwrap();
        // relu directly after the layer, or the layer itself when it is last
        let probe = if k + 1 < g.layers.len() && g.layers[k + 1].kind == LayerKind::Relu { k + 1 } else { k };
        for (a, b) in base.outputs[probe].data().iter().zip(s.outputs[probe].data()) {
            prop_assert!((a * c - b).abs() <= 1e-9 * (a * c).abs().max(1e-12));
        }
    }

    #[test]
    fn argmax_invariant_under_compensated_rescaling(seed in any::<u64>(), pick in any::<usize>(), c in 0.05f64..20.0) {
        let g = random_cnn(seed);
        let ids = weighted_ids(&g);
        prop_assume!(ids.len() >= 2);
        let k = pick % (ids.len() - 1);
        let g2 = scaled(&scaled(&g, &ids[k], c), &ids[k + 1], 1.0 / c);
        for x in random_images(&g.input_shape, 4, seed) {
            let a = ann_forward(&g, &x, false).unwrap().0;
            let b = ann_forward(&g2, &x, false).unwrap().0;
            let mut sorted = a.data().to_vec();
            sorted.sort_by(|p, q| q.total_cmp(p));
            if sorted.len() > 1 && sorted[0] - sorted[1] > 1e-9 * sorted[0].abs().max(1.0) {
                prop_assert_eq!(a.argmax(), b.argmax());
            }
        }
    }
}
