//! Portable on-disk model format (`.sfm`).
//!
//! Layout: an 8-byte little-endian length `n`, then `n` bytes of UTF-8 JSON
//! manifest, then the weight blob. The blob is the concatenation of every
//! weight tensor as IEEE-754 binary32 little-endian values in row-major
//! order, in manifest layer order. Manifest offsets and lengths are in bytes
//! relative to the start of the blob.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, NetworkGraph, Violation, ViolationKind};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(thiserror::Error, Debug, PartialEq)]
pub enum FormatError {
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes of {what}, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("blob has {extra} trailing bytes not referenced by the manifest")]
    TrailingBytes { extra: u64 },

    #[error("layer '{layer}': manifest declares {declared} weight bytes but shape {shape:?} needs {expected}")]
    ShapeDisagreement {
        layer: String,
        declared: u64,
        expected: u64,
        shape: Vec<usize>,
    },

    #[error("layer '{layer}': weight region overlaps or precedes the previous one")]
    BadOffset { layer: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    encoder_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    needs_training: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    id: String,
    #[serde(flatten)]
    kind: LayerKind,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_length: Option<u64>,
    // Accepted only so that bias-bearing files are rejected with a
    // constraint error rather than a parse error.
    #[serde(default, skip_serializing)]
    bias_offset: Option<u64>,
    #[serde(default, skip_serializing)]
    bias_length: Option<u64>,
    #[serde(default, skip_serializing)]
    bias_shape: Option<Vec<usize>>,
}

/// Encodes a graph. Identical graphs produce identical bytes.
pub fn to_bytes(graph: &NetworkGraph) -> Result<Vec<u8>> {
    graph.check_structure()?;
    if let Some(id) = graph.biases.keys().next() {
        return Err(Error::Constraint(vec![Violation {
            layer: id.clone(),
            kind: ViolationKind::BiasPresent,
        }]));
    }
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let mut entry = ManifestLayer {
            id: layer.id.clone(),
            kind: layer.kind.clone(),
            inputs: layer.inputs.clone(),
            weight_shape: None,
            weight_offset: None,
            weight_length: None,
            bias_offset: None,
            bias_length: None,
            bias_shape: None,
        };
        if let Some(w) = graph.weights.get(&layer.id) {
            entry.weight_shape = Some(w.shape().to_vec());
            entry.weight_offset = Some(blob.len() as u64);
            entry.weight_length = Some(4 * w.len() as u64);
            for &v in w.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        layers.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: graph.input_shape.clone(),
        num_classes: graph.num_classes,
        encoder_scale: graph.encoder_scale,
        input_mean: graph.input_mean.clone(),
        needs_training: graph.needs_training.clone(),
        metadata: graph.metadata.clone(),
        layers,
    };
    let text = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + text.len() + blob.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkGraph> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            what: "length prefix",
            expected: 8,
            actual: bytes.len() as u64,
        }
        .into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let rest = &bytes[8..];
    if (rest.len() as u64) < n {
        return Err(FormatError::Truncated {
            what: "manifest",
            expected: n,
            actual: rest.len() as u64,
        }
        .into());
    }
    let (text, blob) = rest.split_at(n as usize);

    // Check the version before anything else so that future manifests fail
    // with a version error rather than a schema error.
    let raw: serde_json::Value =
        serde_json::from_slice(text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FormatError::Manifest("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(FormatError::Version {
            found: version as u32,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| FormatError::Manifest(e.to_string()))?;

    let bias_layers: Vec<Violation> = manifest
        .layers
        .iter()
        .filter(|l| l.bias_offset.is_some() || l.bias_length.is_some() || l.bias_shape.is_some())
        .map(|l| Violation {
            layer: l.id.clone(),
            kind: ViolationKind::BiasPresent,
        })
        .collect();
    if !bias_layers.is_empty() {
        return Err(Error::Constraint(bias_layers));
    }

    let mut end = 0u64;
    for l in &manifest.layers {
        match (&l.weight_shape, l.weight_offset, l.weight_length) {
            (None, None, None) => {}
            (Some(shape), Some(off), Some(len)) => {
                let expected = 4 * shape.iter().product::<usize>() as u64;
                if len != expected {
                    return Err(FormatError::ShapeDisagreement {
                        layer: l.id.clone(),
                        declared: len,
                        expected,
                        shape: shape.clone(),
                    }
                    .into());
                }
                if off < end {
                    return Err(FormatError::BadOffset { layer: l.id.clone() }.into());
                }
                end = off + len;
            }
            _ => {
                return Err(FormatError::Manifest(format!(
                    "layer '{}' has an incomplete weight declaration",
                    l.id
                ))
                .into())
            }
        }
    }
    let actual = blob.len() as u64;
    if actual < end {
        return Err(FormatError::Truncated {
            what: "weight blob",
            expected: end,
            actual,
        }
        .into());
    }
    if actual > end {
        return Err(FormatError::TrailingBytes { extra: actual - end }.into());
    }

    let mut graph = NetworkGraph::new(manifest.input_shape, manifest.num_classes);
    graph.encoder_scale = manifest.encoder_scale;
    graph.input_mean = manifest.input_mean;
    graph.needs_training = manifest.needs_training;
    graph.metadata = manifest.metadata;
    for l in manifest.layers {
        if let (Some(shape), Some(off)) = (l.weight_shape, l.weight_offset) {
            let n: usize = shape.iter().product();
            let start = off as usize;
            let values: Vec<f32> = blob[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_f32(shape, &values)
                .map_err(|e| FormatError::Manifest(format!("layer '{}': {e}", l.id)))?;
            graph.weights.insert(l.id.clone(), t);
        }
        graph.layers.push(Layer {
            id: l.id,
            kind: l.kind,
            inputs: l.inputs,
        });
    }
    graph.check_structure()?;
    Ok(graph)
}

/// Writes `graph` to `path`. Weights are stored at single precision.
pub fn save_model(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(graph)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    from_bytes(&fs::read(path)?)
}
