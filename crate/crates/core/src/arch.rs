//! Desk-scale reference architectures for 8x8 single-channel digit images.
//!
//! Builders return zero weights; use [`crate::trainer::init_weights`].

use crate::error::Result;
use crate::graph::{Layer, LayerKind, NetworkGraph, INPUT};
use crate::tensor::Tensor;
use crate::trainer::place_dropout;

fn conv(cin: usize, cout: usize, stride: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride,
        padding: 1,
    }
}

const POOL: LayerKind = LayerKind::AvgPool2d { kernel: 2, stride: 2 };

fn zero_weights(mut g: NetworkGraph) -> NetworkGraph {
    for l in &g.layers {
        if let Some(s) = l.kind.weight_shape() {
            g.weights.insert(l.id.clone(), Tensor::zeros(&s));
        }
    }
    g
}

/// Four 3x3 convolutions and two linear layers:
/// `conv 1-8, conv 8-8, pool, conv 8-16, conv 16-16, pool, fc 64-64, fc 64-10`,
/// with relus after every layer but the last and dropout `p` per the VGG rule.
pub fn digits_cnn(dropout: f64) -> Result<NetworkGraph> {
    let mut g = NetworkGraph::new(vec![1, 8, 8], 10);
    g.push(Layer::new("conv1", conv(1, 8, 1), &[INPUT]))
        .push(Layer::new("relu1", LayerKind::Relu, &["conv1"]))
        .push(Layer::new("conv2", conv(8, 8, 1), &["relu1"]))
        .push(Layer::new("relu2", LayerKind::Relu, &["conv2"]))
        .push(Layer::new("pool1", POOL, &["relu2"]))
        .push(Layer::new("conv3", conv(8, 16, 1), &["pool1"]))
        .push(Layer::new("relu3", LayerKind::Relu, &["conv3"]))
        .push(Layer::new("conv4", conv(16, 16, 1), &["relu3"]))
        .push(Layer::new("relu4", LayerKind::Relu, &["conv4"]))
        .push(Layer::new("pool2", POOL, &["relu4"]))
        .push(Layer::new(
            "fc1",
            LayerKind::Linear {
                in_features: 64,
                out_features: 64,
            },
            &["pool2"],
        ))
        .push(Layer::new("relu5", LayerKind::Relu, &["fc1"]))
        .push(Layer::new(
            "fc2",
            LayerKind::Linear {
                in_features: 64,
                out_features: 10,
            },
            &["relu5"],
        ));
    place_dropout(&zero_weights(g), dropout)
}

/// Two plain stem convolutions (the second with stride 2), `blocks` residual
/// units of two 16-channel convolutions with an identity shortcut, then
/// average pooling and a linear classifier. `junction_relu` adds a relu after
/// every junction.
pub fn digits_resnet(blocks: usize, junction_relu: bool, dropout: f64) -> Result<NetworkGraph> {
    let mut g = NetworkGraph::new(vec![1, 8, 8], 10);
    g.push(Layer::new("stem1", conv(1, 8, 1), &[INPUT]))
        .push(Layer::new("stem1_relu", LayerKind::Relu, &["stem1"]))
        .push(Layer::new("stem2", conv(8, 16, 2), &["stem1_relu"]))
        .push(Layer::new("stem2_relu", LayerKind::Relu, &["stem2"]));
    let mut prev = "stem2_relu".to_string();
    for b in 1..=blocks {
        let c1 = format!("block{b}_conv1");
        let r1 = format!("block{b}_relu1");
        let c2 = format!("block{b}_conv2");
        let add = format!("block{b}_add");
        g.push(Layer::new(&c1, conv(16, 16, 1), &[&prev]))
            .push(Layer::new(&r1, LayerKind::Relu, &[&c1]))
            .push(Layer::new(&c2, conv(16, 16, 1), &[&r1]))
            .push(Layer::new(&add, LayerKind::AddJunction, &[&prev, &c2]));
        prev = add.clone();
        if junction_relu {
            let jr = format!("block{b}_relu");
            g.push(Layer::new(&jr, LayerKind::Relu, &[&add]));
            prev = jr;
        }
    }
    g.push(Layer::new("pool", POOL, &[&prev])).push(Layer::new(
        "fc",
        LayerKind::Linear {
            in_features: 64,
            out_features: 10,
        },
        &["pool"],
    ));
    place_dropout(&zero_weights(g), dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{validate_convertibility, ValidationMode};

    #[test]
    fn cnn_is_convertible() {
        let g = digits_cnn(0.5).unwrap();
        assert!(validate_convertibility(&g, ValidationMode::Standard).unwrap().is_ok());
        let weighted = g.layers.iter().filter(|l| l.kind.is_weighted()).count();
        assert_eq!(weighted, 6);
        let drops: Vec<&str> = g
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Dropout { .. }))
            .map(|l| l.inputs[0].as_str())
            .collect();
        assert_eq!(drops, ["relu1", "relu3", "relu5"]);
    }

    #[test]
    fn resnet_is_convertible() {
        for jr in [false, true] {
            let g = digits_resnet(3, jr, 0.2).unwrap();
            let mode = if jr { ValidationMode::StrictResidual } else { ValidationMode::Standard };
            assert!(validate_convertibility(&g, mode).unwrap().is_ok());
            assert_eq!(g.spiking_layers().len(), if jr { 9 } else { 6 });
        }
    }
}
