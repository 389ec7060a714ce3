//! Labeled image sets: the IDX format and a simple index + blob container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::preprocess;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
pub const CONTAINER_INDEX: &str = "index.json";
pub const CONTAINER_BLOB: &str = "data.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per-sample shape.
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Vec<usize>, num_classes: usize, images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(x) = images.iter().find(|x| x.shape() != shape.as_slice()) {
            return Err(Error::Dataset(format!("sample shape {:?}, expected {shape:?}", x.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape.clone(),
            num_classes: self.num_classes,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// `n` samples drawn without replacement, in a seed-determined order.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = SplitMix64::new(seed);
        for i in (1..idx.len()).rev() {
            let j = (rng.next() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        idx.truncate(n.min(self.len()));
        Dataset {
            shape: self.shape.clone(),
            num_classes: self.num_classes,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-element mean over all samples.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.shape.iter().product()];
        for x in &self.images {
            for (a, v) in m.iter_mut().zip(x.data()) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Samples with `graph`'s input mean removed, as consumed by the analog
    /// and spiking engines.
    pub fn preprocessed(&self, graph: &NetworkGraph) -> Result<Vec<Tensor>> {
        self.images.iter().map(|x| preprocess(graph, x)).collect()
    }
}

/// Records the training set's mean and the encoder scale (largest absolute
/// value after mean subtraction) in the graph.
pub fn fit_input_statistics(graph: &mut NetworkGraph, train: &Dataset) -> Result<()> {
    let mean = train.mean();
    let scale = train
        .images
        .iter()
        .flat_map(|x| x.data().iter().zip(&mean).map(|(v, m)| (v - m).abs()))
        .fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return Err(Error::Dataset("training inputs are constant".into()));
    }
    graph.input_mean = Some(mean);
    graph.encoder_scale = scale;
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::Dataset("IDX header truncated".into()))
}

/// Parses an IDX file of unsigned bytes; returns dims and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset("not an IDX file".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Dataset(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let dims = (0..ndim).map(|d| be_u32(bytes, 4 + 4 * d)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::Dataset(format!(
            "IDX payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255 and shaped
/// `[1, H, W]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let ib = fs::read(images)?;
    let lb = fs::read(labels)?;
    let (idims, pixels) = parse_idx(&ib)?;
    let (ldims, labs) = parse_idx(&lb)?;
    let [n, h, w] = idims[..] else {
        return Err(Error::Dataset(format!("image file has dims {idims:?}, expected 3")));
    };
    if ldims != [n] {
        return Err(Error::Dataset(format!("label dims {ldims:?} do not match {n} images")));
    }
    let size = h * w;
    let images = pixels
        .chunks(size)
        .map(|c| Tensor::new(vec![1, h, w], c.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels = labs.iter().map(|&l| l as usize).collect();
    Dataset::new(vec![1, h, w], num_classes, images, labels)
}

/// Looks for `{prefix}-images-idx3-ubyte` / `{prefix}-labels-idx1-ubyte` in `dir`.
pub fn load_idx_dir(dir: impl AsRef<Path>, prefix: &str, num_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Err(Error::Dataset(format!(
            "no '{prefix}' IDX pair in {}",
            dir.display()
        )));
    }
    load_idx(images, labels, num_classes)
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerIndex {
    format_version: u32,
    sample_shape: Vec<usize>,
    num_classes: usize,
    count: usize,
    labels: Vec<usize>,
}

/// Writes `index.json` and `data.bin` (f32 little endian, samples
/// concatenated row-major) into `dir`.
pub fn save_container(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let index = ContainerIndex {
        format_version: CONTAINER_VERSION,
        sample_shape: ds.shape.clone(),
        num_classes: ds.num_classes,
        count: ds.len(),
        labels: ds.labels.clone(),
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(dir.join(CONTAINER_INDEX), json)?;
    let mut blob = Vec::with_capacity(ds.len() * ds.shape.iter().product::<usize>() * 4);
    for x in &ds.images {
        for &v in x.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(CONTAINER_BLOB), blob)?;
    Ok(())
}

pub fn load_container(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(CONTAINER_INDEX))?;
    let index: ContainerIndex = serde_json::from_str(&text).map_err(|e| Error::Dataset(e.to_string()))?;
    if index.format_version != CONTAINER_VERSION {
        return Err(Error::Dataset(format!(
            "container version {} not supported",
            index.format_version
        )));
    }
    if index.labels.len() != index.count {
        return Err(Error::Dataset("label count differs from sample count".into()));
    }
    let blob = fs::read(dir.join(CONTAINER_BLOB))?;
    let size: usize = index.sample_shape.iter().product();
    if blob.len() != index.count * size * 4 {
        return Err(Error::Dataset(format!(
            "blob has {} bytes, index declares {}",
            blob.len(),
            index.count * size * 4
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let images = values
        .chunks(size.max(1))
        .take(index.count)
        .map(|c| Tensor::from_f32(index.sample_shape.clone(), c))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(index.sample_shape, index.num_classes, images, index.labels)
}

/// Loads a dataset split from `dir`: a container directory, or an IDX pair
/// with the given prefix (`train` or `t10k`).
pub fn load_split(dir: impl AsRef<Path>, prefix: &str, num_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    if dir.join(CONTAINER_INDEX).exists() {
        return load_container(dir);
    }
    let sub = dir.join(prefix);
    if sub.join(CONTAINER_INDEX).exists() {
        return load_container(sub);
    }
    load_idx_dir(dir, prefix, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..8).map(|i| i * 30).collect();
        fs::write(dir.path().join("train-images-idx3-ubyte"), idx(&[2, 2, 2], &px)).unwrap();
        fs::write(dir.path().join("train-labels-idx1-ubyte"), idx(&[2], &[3, 7])).unwrap();
        let ds = load_idx_dir(dir.path(), "train", 10).unwrap();
        assert_eq!(ds.shape, vec![1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.images[1].data()[3], 210.0 / 255.0);
    }

    #[test]
    fn idx_truncation_detected() {
        assert!(parse_idx(&idx(&[2, 2, 2], &[0; 7])).is_err());
        assert!(parse_idx(&[0, 0, 0x0d, 1]).is_err());
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![
            Tensor::new(vec![2], vec![0.5, -0.25]).unwrap(),
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        ];
        let ds = Dataset::new(vec![2], 3, images, vec![2, 0]).unwrap();
        save_container(&ds, dir.path()).unwrap();
        assert_eq!(load_container(dir.path()).unwrap(), ds);
    }

    #[test]
    fn label_out_of_range() {
        let x = vec![Tensor::zeros(&[1])];
        assert!(Dataset::new(vec![1], 2, x, vec![2]).is_err());
    }

    #[test]
    fn input_statistics() {
        let images = vec![
            Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
        ];
        let ds = Dataset::new(vec![2], 2, images, vec![0, 1]).unwrap();
        let mut g = NetworkGraph::new(vec![2], 2);
        fit_input_statistics(&mut g, &ds).unwrap();
        assert_eq!(g.input_mean, Some(vec![0.5, 1.0]));
        assert_eq!(g.encoder_scale, 0.5);
    }

    #[test]
    fn sampling_is_deterministic_and_without_replacement() {
        let images = (0..20).map(|i| Tensor::new(vec![1], vec![i as f64]).unwrap()).collect();
        let ds = Dataset::new(vec![1], 1, images, vec![0; 20]).unwrap();
        let a = ds.sample(10, 5);
        assert_eq!(a, ds.sample(10, 5));
        let mut seen: Vec<f64> = a.images.iter().map(|x| x.data()[0]).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }
}
