//! Network graph data model and the convertibility validator.
//!
//! A [`NetworkGraph`] is an ordered list of layers. Each layer names its
//! predecessors by id (the network input is [`INPUT`]); a layer may only
//! reference layers that appear before it, which makes the list a
//! topological order and rules out cycles. Shapes follow NCHW with the batch
//! dimension left implicit, so an image input is `[C, H, W]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Id under which layers refer to the network input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    /// Representable so that foreign graphs can be diagnosed; never convertible.
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    /// Representable so that foreign graphs can be diagnosed; never convertible.
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Training-time regularizer; identity at inference and in the spiking network.
    Dropout {
        p: f64,
    },
    /// Elementwise sum of exactly two predecessors. The first-listed input that
    /// is an ancestor of the other is the identity path.
    AddJunction,
    Identity,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::AddJunction => "add_junction",
            LayerKind::Identity => "identity",
        }
    }

    /// Conv and linear layers: the only kinds that own a weight tensor.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    /// Kinds that forward their single input unchanged at inference.
    pub fn is_passthrough(&self) -> bool {
        matches!(self, LayerKind::Dropout { .. } | LayerKind::Identity)
    }

    /// Expected weight shape for weighted kinds.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Where a layer reads one of its operands from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    /// Per-sample input shape, `[C, H, W]` for images or `[N]` for vectors.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Input magnitude mapped to firing probability 1 by the Poisson encoder.
    pub encoder_scale: f64,
    /// Per-element mean subtracted from raw inputs before the first layer.
    pub input_mean: Option<Vec<f64>>,
    pub layers: Vec<Layer>,
    pub weights: BTreeMap<String, Tensor>,
    /// Bias tensors of foreign graphs. Always a constraint violation.
    pub biases: BTreeMap<String, Tensor>,
    /// Layers whose weights were created by a rewrite and must be (re)trained.
    pub needs_training: BTreeSet<String>,
    /// Free-form provenance (dataset path, producing command).
    pub metadata: BTreeMap<String, String>,
}

impl NetworkGraph {
    pub fn new(input_shape: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            encoder_scale: 1.0,
            input_mean: None,
            layers: Vec::new(),
            weights: BTreeMap::new(),
            biases: BTreeMap::new(),
            needs_training: BTreeSet::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Resolves every layer's input ids to sources.
    pub fn sources(&self) -> Result<Vec<Vec<Source>>> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id == INPUT {
                return Err(structural(&layer.id, "the id 'input' is reserved"));
            }
            let mut srcs = Vec::with_capacity(layer.inputs.len());
            for name in &layer.inputs {
                if name == INPUT {
                    srcs.push(Source::Input);
                } else if let Some(&j) = seen.get(name.as_str()) {
                    srcs.push(Source::Layer(j));
                } else if self.layers[i..].iter().any(|l| &l.id == name) {
                    return Err(structural(
                        &layer.id,
                        &format!("input '{name}' is not earlier in the order (cycle or misordering)"),
                    ));
                } else {
                    return Err(structural(&layer.id, &format!("unknown input '{name}'")));
                }
            }
            if seen.insert(&layer.id, i).is_some() {
                return Err(structural(&layer.id, "duplicate layer id"));
            }
            out.push(srcs);
        }
        Ok(out)
    }

    /// Consumers of each layer's output, by layer index.
    pub fn consumers(&self) -> Result<Vec<Vec<usize>>> {
        let sources = self.sources()?;
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, srcs) in sources.iter().enumerate() {
            for s in srcs {
                if let Source::Layer(j) = *s {
                    out[j].push(i);
                }
            }
        }
        Ok(out)
    }

    /// Checks that the graph is well formed and returns every layer's output shape.
    ///
    /// Covers ordering, arity, single output, weight presence and shape, and
    /// operand shape compatibility. Constraint violations (bias, pooling
    /// kind, ...) are not structural and are left to [`validate_convertibility`].
    pub fn check_structure(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(structural(INPUT, "graph has no layers"));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(structural(INPUT, "input shape must have positive dimensions"));
        }
        if !(self.encoder_scale.is_finite() && self.encoder_scale > 0.0) {
            return Err(structural(INPUT, "encoder scale must be positive"));
        }
        if let Some(mean) = &self.input_mean {
            if mean.len() != self.input_shape.iter().product::<usize>() {
                return Err(structural(INPUT, "input mean length differs from input size"));
            }
        }
        let sources = self.sources()?;
        let consumers = self.consumers()?;
        for (i, c) in consumers.iter().enumerate() {
            if c.is_empty() && i != self.output_index() {
                return Err(structural(
                    &self.layers[i].id,
                    "output is never consumed (graph must have a single output)",
                ));
            }
        }
        for id in self.weights.keys().chain(self.biases.keys()) {
            if self.layer(id).is_none() {
                return Err(structural(id, "parameter tensor for unknown layer"));
            }
        }

        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let arity = if layer.kind == LayerKind::AddJunction { 2 } else { 1 };
            if sources[i].len() != arity {
                return Err(structural(
                    &layer.id,
                    &format!("expects {arity} input(s), has {}", sources[i].len()),
                ));
            }
            let in_shapes: Vec<&[usize]> = sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input => self.input_shape.as_slice(),
                    Source::Layer(j) => shapes[j].as_slice(),
                })
                .collect();

            match (layer.kind.weight_shape(), self.weights.get(&layer.id)) {
                (Some(expect), Some(w)) if w.shape() != expect.as_slice() => {
                    return Err(structural(
                        &layer.id,
                        &format!("weight shape {:?}, expected {expect:?}", w.shape()),
                    ));
                }
                (Some(_), None) => return Err(structural(&layer.id, "missing weight tensor")),
                (None, Some(_)) => {
                    return Err(structural(&layer.id, "weights on a parameter-free layer"))
                }
                _ => {}
            }

            let shape = output_shape(&layer.kind, &in_shapes).map_err(|e| match e {
                Error::Shape(msg) => structural(&layer.id, &msg),
                other => other,
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Indices of layers whose neurons spike after conversion: every relu,
    /// plus the final layer when it is a conv or linear layer (the output is
    /// decoded from an integrate-and-fire layer, not a bare accumulator).
    pub fn spiking_layers(&self) -> Vec<usize> {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| l.kind == LayerKind::Relu || (*i == last && l.kind.is_weighted()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn spiking_layer_ids(&self) -> Vec<String> {
        self.spiking_layers()
            .into_iter()
            .map(|i| self.layers[i].id.clone())
            .collect()
    }

    /// Rounds every parameter to single precision, the precision of the
    /// portable model format.
    pub fn round_weights_to_f32(&mut self) {
        for w in self.weights.values_mut() {
            w.round_to_f32();
        }
    }
}

fn structural(layer: &str, reason: &str) -> Error {
    Error::Structural {
        layer: layer.to_string(),
        reason: reason.to_string(),
    }
}

/// Output dims of a spatial window: `floor((n + 2p - k) / s) + 1`.
pub fn window_out(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn output_shape(kind: &LayerKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let x = inputs[0];
    let spatial = |kernel: usize, stride: usize, padding: usize, channels: usize| {
        if x.len() != 3 {
            return Err(Error::Shape(format!("expects [C, H, W] input, got {x:?}")));
        }
        let h = window_out(x[1], kernel, stride, padding);
        let w = window_out(x[2], kernel, stride, padding);
        match (h, w) {
            (Some(h), Some(w)) => Ok(vec![channels, h, w]),
            _ => Err(Error::Shape(format!(
                "window {kernel}/stride {stride}/pad {padding} does not fit input {x:?}"
            ))),
        }
    };
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if x.first() != Some(&in_channels) {
                return Err(Error::Shape(format!(
                    "conv expects {in_channels} input channels, got {x:?}"
                )));
            }
            spatial(kernel, stride, padding, out_channels)
        }
        LayerKind::AvgPool2d { kernel, stride } | LayerKind::MaxPool2d { kernel, stride } => {
            spatial(kernel, stride, 0, x.first().copied().unwrap_or(0))
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let n: usize = x.iter().product();
            if n != in_features {
                return Err(Error::Shape(format!(
                    "linear expects {in_features} features, input {x:?} has {n}"
                )));
            }
            Ok(vec![out_features])
        }
        LayerKind::BatchNorm { channels } => {
            if x.first() != Some(&channels) {
                return Err(Error::Shape(format!("batch-norm channel mismatch on {x:?}")));
            }
            Ok(x.to_vec())
        }
        LayerKind::Dropout { p } => {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Shape(format!("dropout probability {p} outside [0, 1)")));
            }
            Ok(x.to_vec())
        }
        LayerKind::Relu | LayerKind::Identity => Ok(x.to_vec()),
        LayerKind::AddJunction => {
            if inputs[0] != inputs[1] {
                return Err(Error::Shape(format!(
                    "junction operands differ: {:?} vs {:?}",
                    inputs[0], inputs[1]
                )));
            }
            Ok(x.to_vec())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    BiasPresent,
    MaxPool,
    BatchNorm,
    /// A conv/linear layer that neither feeds a relu (directly or through
    /// average pooling) nor a junction, and is not the final layer.
    MissingActivation,
    /// A residual junction with no relu directly after it.
    JunctionWithoutRelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::BiasPresent => "bias term present",
            ViolationKind::MaxPool => "max pooling (only average pooling converts)",
            ViolationKind::BatchNorm => "batch normalization present",
            ViolationKind::MissingActivation => "weighted layer not followed by a relu",
            ViolationKind::JunctionWithoutRelu => "residual junction not followed by a relu",
        };
        write!(f, "layer '{}': {what}", self.layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidationMode {
    #[default]
    Standard,
    /// Additionally require a relu directly after every residual junction.
    StrictResidual,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every convertibility constraint the graph violates.
///
/// Structural problems are returned as `Err`, distinct from an `Ok` report
/// listing constraint violations.
pub fn validate_convertibility(
    graph: &NetworkGraph,
    mode: ValidationMode,
) -> Result<ValidationReport> {
    graph.check_structure()?;
    let consumers = graph.consumers()?;
    let last = graph.output_index();
    let mut violations = Vec::new();
    let mut flag = |layer: &Layer, kind| {
        violations.push(Violation {
            layer: layer.id.clone(),
            kind,
        })
    };

    for (i, layer) in graph.layers.iter().enumerate() {
        if graph.biases.contains_key(&layer.id) {
            flag(layer, ViolationKind::BiasPresent);
        }
        match layer.kind {
            LayerKind::MaxPool2d { .. } => flag(layer, ViolationKind::MaxPool),
            LayerKind::BatchNorm { .. } => flag(layer, ViolationKind::BatchNorm),
            LayerKind::AddJunction if mode == ValidationMode::StrictResidual => {
                let next_is_relu = consumers[i]
                    .iter()
                    .all(|&c| graph.layers[c].kind == LayerKind::Relu)
                    && !consumers[i].is_empty();
                if !next_is_relu {
                    flag(layer, ViolationKind::JunctionWithoutRelu);
                }
            }
            _ if layer.kind.is_weighted() && i != last => {
                if !feeds_activation(graph, &consumers, i) {
                    flag(layer, ViolationKind::MissingActivation);
                }
            }
            _ => {}
        }
    }
    Ok(ValidationReport { violations })
}

fn feeds_activation(graph: &NetworkGraph, consumers: &[Vec<usize>], from: usize) -> bool {
    consumers[from].iter().all(|&c| match graph.layers[c].kind {
        LayerKind::Relu | LayerKind::AddJunction => true,
        LayerKind::AvgPool2d { .. } => feeds_activation(graph, consumers, c),
        ref k if k.is_passthrough() => feeds_activation(graph, consumers, c),
        _ => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize) -> LayerKind {
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    fn with_weights(mut g: NetworkGraph) -> NetworkGraph {
        for l in &g.layers {
            if let Some(s) = l.kind.weight_shape() {
                g.weights.insert(l.id.clone(), Tensor::zeros(&s));
            }
        }
        g
    }

    /// conv -> relu -> avgpool -> linear
    fn small_cnn() -> NetworkGraph {
        let mut g = NetworkGraph::new(vec![1, 4, 4], 3);
        g.push(Layer::new("c1", conv(1, 2), &[INPUT]))
            .push(Layer::new("r1", LayerKind::Relu, &["c1"]))
            .push(Layer::new("p1", LayerKind::AvgPool2d { kernel: 2, stride: 2 }, &["r1"]))
            .push(Layer::new(
                "fc",
                LayerKind::Linear {
                    in_features: 8,
                    out_features: 3,
                },
                &["p1"],
            ));
        with_weights(g)
    }

    fn residual_block(junction_relu: bool) -> NetworkGraph {
        let mut g = NetworkGraph::new(vec![2, 4, 4], 2);
        g.push(Layer::new("c0", conv(2, 2), &[INPUT]))
            .push(Layer::new("r0", LayerKind::Relu, &["c0"]))
            .push(Layer::new("c1", conv(2, 2), &["r0"]))
            .push(Layer::new("r1", LayerKind::Relu, &["c1"]))
            .push(Layer::new("c2", conv(2, 2), &["r1"]))
            .push(Layer::new("add", LayerKind::AddJunction, &["r0", "c2"]));
        let mut last = "add";
        if junction_relu {
            g.push(Layer::new("jr", LayerKind::Relu, &["add"]));
            last = "jr";
        }
        g.push(Layer::new(
            "fc",
            LayerKind::Linear {
                in_features: 32,
                out_features: 2,
            },
            &[last],
        ));
        with_weights(g)
    }

    #[test]
    fn compliant_cnn_passes() {
        let g = small_cnn();
        let report = validate_convertibility(&g, ValidationMode::Standard).unwrap();
        assert!(report.is_ok(), "{:?}", report);
        assert_eq!(
            g.check_structure().unwrap(),
            vec![vec![2, 4, 4], vec![2, 4, 4], vec![2, 2, 2], vec![3]]
        );
    }

    #[test]
    fn max_pool_is_flagged_once() {
        let mut g = small_cnn();
        g.layers[2].kind = LayerKind::MaxPool2d { kernel: 2, stride: 2 };
        let report = validate_convertibility(&g, ValidationMode::Standard).unwrap();
        assert_eq!(
            report.violations,
            vec![Violation {
                layer: "p1".into(),
                kind: ViolationKind::MaxPool
            }]
        );
    }

    #[test]
    fn bias_and_batch_norm_are_flagged() {
        let mut g = small_cnn();
        g.biases.insert("c1".into(), Tensor::zeros(&[2]));
        g.layers.insert(1, Layer::new("bn", LayerKind::BatchNorm { channels: 2 }, &["c1"]));
        g.layers[2].inputs = vec!["bn".into()];
        let report = validate_convertibility(&g, ValidationMode::Standard).unwrap();
        let kinds: Vec<_> = report.violations.iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::BiasPresent));
        assert!(kinds.contains(&ViolationKind::BatchNorm));
    }

    #[test]
    fn junction_without_relu_only_in_strict_mode() {
        let g = residual_block(false);
        assert!(validate_convertibility(&g, ValidationMode::Standard)
            .unwrap()
            .is_ok());
        let strict = validate_convertibility(&g, ValidationMode::StrictResidual).unwrap();
        assert_eq!(
            strict.violations,
            vec![Violation {
                layer: "add".into(),
                kind: ViolationKind::JunctionWithoutRelu
            }]
        );
        let fixed = residual_block(true);
        assert!(validate_convertibility(&fixed, ValidationMode::StrictResidual)
            .unwrap()
            .is_ok());
    }

    #[test]
    fn missing_activation_is_a_violation() {
        let mut g = small_cnn();
        // c1 -> p1 directly, relu removed
        g.layers.remove(1);
        g.layers[1].inputs = vec!["c1".into()];
        let report = validate_convertibility(&g, ValidationMode::Standard).unwrap();
        assert_eq!(report.violations[0].kind, ViolationKind::MissingActivation);
    }

    #[test]
    fn cycles_and_shape_errors_are_structural() {
        let mut g = small_cnn();
        g.layers[0].inputs = vec!["fc".into()];
        assert!(matches!(
            validate_convertibility(&g, ValidationMode::Standard),
            Err(Error::Structural { .. })
        ));

        let mut g = small_cnn();
        g.weights.insert("fc".into(), Tensor::zeros(&[3, 7]));
        assert!(matches!(g.check_structure(), Err(Error::Structural { .. })));

        let mut g = small_cnn();
        g.layers[3].kind = LayerKind::Linear {
            in_features: 9,
            out_features: 3,
        };
        g.weights.insert("fc".into(), Tensor::zeros(&[3, 9]));
        assert!(matches!(g.check_structure(), Err(Error::Structural { .. })));
    }

    #[test]
    fn dangling_output_is_structural() {
        let mut g = small_cnn();
        g.push(Layer::new("extra", LayerKind::Relu, &["r1"]));
        assert!(g.check_structure().is_err());
    }

    #[test]
    fn spiking_layers_include_output() {
        let g = residual_block(true);
        assert_eq!(g.spiking_layer_ids(), vec!["r0", "r1", "jr", "fc"]);
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_out(8, 3, 1, 1), Some(8));
        assert_eq!(window_out(8, 3, 2, 1), Some(4));
        assert_eq!(window_out(224, 7, 2, 3), Some(112));
        assert_eq!(window_out(2, 3, 1, 0), None);
    }
}
