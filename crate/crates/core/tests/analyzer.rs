mod common;

use common::{random_cnn, random_image, random_resnet, random_thresholds, raster};
use spikeconv::analyzer::{
    ac_census, ac_mac_ratio, convergence_curve, fanout, spike_count_profile, synaptic_op_counts, OpCensus,
};
use spikeconv::graph::Source;
use spikeconv::snn::{simulate, SimConfig, SpikingNetwork};
use spikeconv::{Layer, LayerKind, NetworkGraph, Tensor, ThresholdSet, INPUT};

fn in_shape(g: &NetworkGraph, i: usize) -> Vec<usize> {
    let shapes = g.check_structure().unwrap();
    match g.sources().unwrap()[i][0] {
        Source::Input => g.input_shape.clone(),
        Source::Layer(j) => shapes[j].clone(),
    }
}

/// Counts every multiply of a direct evaluation, one by one.
fn enumerate_macs(g: &NetworkGraph) -> Vec<u64> {
    let shapes = g.check_structure().unwrap();
    let mut out = Vec::new();
    for (i, l) in g.layers.iter().enumerate() {
        let mut n = 0u64;
        match l.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                for _o in 0..out_channels {
                    for _y in 0..shapes[i][1] {
                        for _x in 0..shapes[i][2] {
                            for _c in 0..in_channels {
                                for _ky in 0..kernel {
                                    for _kx in 0..kernel {
                                        n += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                for _o in 0..out_features {
                    for _k in 0..in_features {
                        n += 1;
                    }
                }
            }
            _ => {}
        }
        out.push(n);
    }
    out
}

/// Synapses leaving each input neuron, found by walking every output
/// position and tap and skipping zero padding.
fn enumerate_fanout(g: &NetworkGraph, i: usize) -> Vec<u64> {
    let shapes = g.check_structure().unwrap();
    let ins = in_shape(g, i);
    match g.layers[i].kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = (ins[0], ins[1] as i64, ins[2] as i64);
            let mut f = vec![0u64; c * (h * w) as usize];
            for _o in 0..out_channels {
                for oy in 0..shapes[i][1] {
                    for ox in 0..shapes[i][2] {
                        for ch in 0..c {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let y = (oy * stride + ky) as i64 - padding as i64;
                                    let x = (ox * stride + kx) as i64 - padding as i64;
                                    if y >= 0 && x >= 0 && y < h && x < w {
                                        f[(ch as i64 * h * w + y * w + x) as usize] += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            f
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => vec![out_features as u64; in_features],
        _ => unreachable!(),
    }
}

fn architectures() -> Vec<NetworkGraph> {
    (0..25)
        .map(|s| random_cnn(500 + s))
        .chain((0..25).map(|s| random_resnet(700 + s, None)))
        .collect()
}

#[test]
fn mac_formulas_match_enumeration_on_fifty_architectures() {
    for (n, g) in architectures().iter().enumerate() {
        let macs: Vec<u64> = synaptic_op_counts(g).unwrap().into_iter().map(|(_, m)| m).collect();
        assert_eq!(macs, enumerate_macs(g), "architecture {n}");
        for (i, l) in g.layers.iter().enumerate() {
            if l.kind.is_weighted() {
                assert_eq!(fanout(g, i).unwrap(), enumerate_fanout(g, i), "architecture {n} layer {}", l.id);
            }
        }
    }
}

#[test]
fn ac_census_equals_instrumented_counts() {
    for (n, g) in architectures().iter().enumerate() {
        let th = random_thresholds(g, n as u64, 0.2, 1.2);
        let net = SpikingNetwork::new(g, &th).unwrap();
        let mut merged = None;
        for run in 0..3u64 {
            let x = random_image(&g.input_shape, run + 10 * n as u64);
            let cfg = SimConfig::new(80, run).with_profile();
            let p = simulate(&net, &x, &cfg).unwrap().1.unwrap();
            assert_eq!(ac_census(g, &p).unwrap(), p.ac_events, "architecture {n} run {run}");
            match &mut merged {
                None => merged = Some(p),
                Some(m) => m.merge(&p).unwrap(),
            }
        }
        let merged = merged.unwrap();
        assert_eq!(ac_census(g, &merged).unwrap(), merged.ac_events);
        let census = OpCensus::new(g, &merged, 3).unwrap();
        let expected = merged.total_ac() as f64 / 3.0;
        assert!((census.total_acs() - expected).abs() <= 1e-12 * expected.max(1.0));
        let pooled = g.layers.iter().any(|l| matches!(l.kind, LayerKind::AvgPool2d { .. } | LayerKind::AddJunction));
        if !pooled {
            assert!(census.total_acs() <= (census.total_macs() * 80) as f64);
        }
    }
}

fn two_layer_relay() -> (NetworkGraph, ThresholdSet) {
    let mut g = NetworkGraph::new(vec![2], 2);
    let lin = LayerKind::Linear {
        in_features: 2,
        out_features: 2,
    };
    g.push(Layer::new("fc1", lin.clone(), &[INPUT]))
        .push(Layer::new("relu1", LayerKind::Relu, &["fc1"]))
        .push(Layer::new("fc2", lin, &["relu1"]));
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    g.weights.insert("fc1".into(), eye.clone());
    g.weights.insert("fc2".into(), eye);
    let th = ThresholdSet::unity(&g);
    (g, th)
}

#[test]
fn ratio_is_one_when_every_neuron_spikes_once() {
    let (g, th) = two_layer_relay();
    let net = SpikingNetwork::new(&g, &th).unwrap();
    let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let p = simulate(&net, &x, &SimConfig::new(1, 0).with_profile()).unwrap().1.unwrap();
    let census = OpCensus::new(&g, &p, 1).unwrap();
    assert_eq!(ac_mac_ratio(&census).unwrap(), 1.0);
}

#[test]
fn hand_tally_of_a_known_raster() {
    let (g, th) = two_layer_relay();
    let net = SpikingNetwork::new(&g, &th).unwrap();
    // pixel 0 always fires, pixel 1 never does
    let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    let p = simulate(&net, &x, &SimConfig::new(10, 3).with_profile()).unwrap().1.unwrap();
    // 10 input events and 10 relu1 spikes, each reaching 2 synapses
    assert_eq!(ac_census(&g, &p).unwrap(), vec![("fc1".to_string(), 20), ("fc2".to_string(), 20)]);
    let census = OpCensus::new(&g, &p, 1).unwrap();
    assert_eq!(ac_mac_ratio(&census).unwrap(), 40.0 / 8.0);
}

#[test]
fn profile_mean_of_eight_runs_from_rasters() {
    let g = random_cnn(31);
    let th = random_thresholds(&g, 31, 0.2, 1.0);
    let net = SpikingNetwork::new(&g, &th).unwrap();
    let steps = 120;
    let mut profiles = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let sizes: Vec<usize> = net
        .spiking_ids()
        .iter()
        .map(|id| g.check_structure().unwrap()[g.index_of(id).unwrap()].iter().product())
        .collect();
    for run in 0..8u64 {
        let x = random_image(&g.input_shape, 90 + run);
        let cfg = SimConfig::new(steps, run).with_profile();
        profiles.push(simulate(&net, &x, &cfg).unwrap().1.unwrap());
        let r = raster(&net, &x, run, steps);
        let mut offset = 0;
        for (k, &n) in sizes.iter().enumerate() {
            let total: usize = r.iter().map(|step| step[offset..offset + n].iter().filter(|&&s| s).count()).sum();
            if sums.len() <= k {
                sums.push(0.0);
            }
            sums[k] += total as f64 / n as f64;
            offset += n;
        }
    }
    let profile = spike_count_profile(&profiles).unwrap();
    assert_eq!(profile.layers[0].id, INPUT);
    for (k, l) in profile.layers[1..].iter().enumerate() {
        let expected = sums[k] / 8.0;
        assert!((l.avg_cumulative_spikes - expected).abs() <= 1e-12 * expected.max(1.0), "{}", l.id);
    }
    let zero = Tensor::zeros(&g.input_shape);
    let silent = simulate(&net, &zero, &SimConfig::new(50, 0).with_profile()).unwrap().1.unwrap();
    let zp = spike_count_profile(&[silent.clone(), silent]).unwrap();
    assert!(zp.layers.iter().all(|l| l.avg_cumulative_spikes == 0.0));
    let short = simulate(&net, &zero, &SimConfig::new(10, 0).with_profile()).unwrap().1.unwrap();
    assert!(spike_count_profile(&[profiles[0].clone(), short]).is_err());
}

#[test]
fn convergence_edge_cases() {
    let mut g = NetworkGraph::new(vec![3], 3);
    g.push(Layer::new(
        "fc",
        LayerKind::Linear {
            in_features: 3,
            out_features: 3,
        },
        &[INPUT],
    ));
    g.weights.insert(
        "fc".into(),
        Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
    );
    let net = SpikingNetwork::new(&g, &ThresholdSet::unity(&g)).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for k in 0..12usize {
        let mut x = vec![0.0; 3];
        x[k % 3] = 1.0;
        images.push(Tensor::new(vec![3], x).unwrap());
        // every fourth sample mislabeled
        labels.push(if k % 4 == 3 { (k + 1) % 3 } else { k % 3 });
    }
    let curve = convergence_curve(&net, &images, &labels, &[0, 1, 2, 5, 50], 7).unwrap();
    assert_eq!(curve[0].0, 0);
    assert!((curve[0].1 - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    for &(t, e) in &curve[1..] {
        assert!((e - 0.25).abs() < 1e-12, "t = {t}: {e}");
    }
}
