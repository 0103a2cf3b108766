//! Dataset ingestion, synthesis, and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DataSource;
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::protocol::ClientData;
use crate::util::{derive_seed, sha256_hex, TAG_PARTITION};

/// Smallest per-client shard that still yields nonempty test/val/train
/// splits under the 15% rules.
const MIN_SHARD: usize = 7;

/// A labeled dataset with normalized features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub dims: usize,
    pub classes_seen: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len() * self.dims);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            inputs.extend_from_slice(&self.features[r * self.dims..(r + 1) * self.dims]);
            labels.push(self.labels[r]);
        }
        Batch::new(inputs, labels, self.dims)
    }
}

/// One client's shard, already cut into train/val/test.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub client_id: u32,
    pub data: ClientData,
    pub provenance: String,
}

/// Loads or synthesizes a dataset. Synthetic and CSV features are
/// standardized per feature; IDX pixels are scaled to [0, 1].
pub fn load_or_generate_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic {
            n,
            dims,
            classes,
            sep,
            seed,
        } => Ok(generate_blobs(*n, *dims, *classes, *sep, seed.unwrap_or(1))),
        DataSource::Idx { images, labels } => load_idx(images, labels),
        DataSource::Csv { path } => load_csv(path),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per pair of uniforms keeps the stream simple
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian blobs with unit noise around class centers `sep` away from the
/// origin. Centers are orthonormalized while `classes <= dims`, so every
/// pair of centers sits `sep·√2` apart and separability depends only on
/// `sep`; `sep = 0` collapses all classes onto one blob.
fn generate_blobs(n: usize, dims: usize, classes: usize, sep: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut v: Vec<f64> = (0..dims).map(|_| gaussian(&mut rng)).collect();
        if c < dims {
            for prev in &centers {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for vi in &mut v {
            *vi /= norm;
        }
        centers.push(v);
    }
    let mut features = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        for f in 0..dims {
            features.push((sep * centers[label][f] + gaussian(&mut rng)) as f32);
        }
        labels.push(label as u32);
    }
    let mut ds = Dataset {
        features,
        labels,
        dims,
        classes_seen: classes,
        provenance: format!("synthetic:n={n},dims={dims},classes={classes},sep={sep},seed={seed}"),
    };
    standardize(&mut ds);
    ds
}

fn standardize(ds: &mut Dataset) {
    let n = ds.len();
    if n == 0 {
        return;
    }
    for f in 0..ds.dims {
        let mut mean = 0.0f64;
        for r in 0..n {
            mean += ds.features[r * ds.dims + f] as f64;
        }
        mean /= n as f64;
        let mut var = 0.0f64;
        for r in 0..n {
            let d = ds.features[r * ds.dims + f] as f64 - mean;
            var += d * d;
        }
        let std = (var / n as f64).sqrt();
        let denom = if std < 1e-12 { 1.0 } else { std };
        for r in 0..n {
            let v = &mut ds.features[r * ds.dims + f];
            *v = ((*v as f64 - mean) / denom) as f32;
        }
    }
}

fn read_idx(path: &Path, expect_ndim: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset(format!("{}: bad IDX magic", path.display())));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Dataset(format!(
            "{}: unsupported IDX dtype 0x{:02x} (only u8)",
            path.display(),
            bytes[2]
        )));
    }
    let ndim = bytes[3];
    if ndim != expect_ndim {
        return Err(Error::Dataset(format!(
            "{}: expected {expect_ndim}-d IDX, got {ndim}-d",
            path.display()
        )));
    }
    let header = 4 + 4 * ndim as usize;
    if bytes.len() < header {
        return Err(Error::Dataset(format!("{}: truncated IDX header", path.display())));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for i in 0..ndim as usize {
        let off = 4 + 4 * i;
        shape.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected: usize = shape.iter().product();
    if bytes.len() != header + expected {
        return Err(Error::Dataset(format!(
            "{}: IDX data length {} does not match shape {:?}",
            path.display(),
            bytes.len() - header,
            shape
        )));
    }
    Ok((shape, bytes[header..].to_vec()))
}

fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (img_shape, img_data) = read_idx(images, 3)?;
    let (lbl_shape, lbl_data) = read_idx(labels, 1)?;
    let (n, rows, cols) = (img_shape[0], img_shape[1], img_shape[2]);
    if lbl_shape[0] != n {
        return Err(Error::Dataset(format!(
            "{} has {} labels for {} images",
            labels.display(),
            lbl_shape[0],
            n
        )));
    }
    let features = img_data.iter().map(|&px| px as f32 / 255.0).collect();
    let labels_vec: Vec<u32> = lbl_data.iter().map(|&l| l as u32).collect();
    let classes_seen = labels_vec.iter().max().map_or(0, |&m| m as usize + 1);
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;
    Ok(Dataset {
        features,
        labels: labels_vec,
        dims: rows * cols,
        classes_seen,
        provenance: format!(
            "idx:{}:sha256={},{}:sha256={}",
            images.display(),
            sha256_hex(&img_bytes),
            labels.display(),
            sha256_hex(&lbl_bytes)
        ),
    })
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let checksum = sha256_hex(&raw);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_slice());
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Dataset(format!("{}: no `label` column", path.display())))?;
    let dims = headers.len() - 1;
    if dims == 0 {
        return Err(Error::Dataset(format!("{}: no feature columns", path.display())));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let y: u32 = field.parse().map_err(|_| {
                    Error::Dataset(format!("{}: row {}: bad label {field:?}", path.display(), i + 1))
                })?;
                labels.push(y);
            } else {
                let x: f32 = field.parse().map_err(|_| {
                    Error::Dataset(format!("{}: row {}: bad feature {field:?}", path.display(), i + 1))
                })?;
                features.push(x);
            }
        }
        if features.len() != labels.len() * dims {
            return Err(Error::Dataset(format!(
                "{}: row {} has wrong field count",
                path.display(),
                i + 1
            )));
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{}: empty dataset", path.display())));
    }
    let classes_seen = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut ds = Dataset {
        features,
        labels,
        dims,
        classes_seen,
        provenance: format!("csv:{}:sha256={}", path.display(), checksum),
    };
    standardize(&mut ds);
    Ok(ds)
}

/// IID partition into per-client shards: a seeded shuffle cut into
/// near-equal contiguous chunks (sizes differ by at most one), each shard
/// then split 15% test, then 15% of the remainder val, rest train.
pub fn partition(dataset: &Dataset, n_clients: u32, seed: u64) -> Result<Vec<DatasetSplit>> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let n = dataset.len();
    let k = n_clients as usize;
    if n / k < MIN_SHARD {
        return Err(Error::Dataset(format!(
            "too few samples: {n} over {k} clients leaves shards under {MIN_SHARD}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_PARTITION]));
    idx.shuffle(&mut rng);

    let base = n / k;
    let rem = n % k;
    let mut splits = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for c in 0..k {
        let size = base + usize::from(c < rem);
        let shard = &idx[cursor..cursor + size];
        cursor += size;
        let test_n = (0.15 * size as f64).round() as usize;
        let val_n = (0.15 * (size - test_n) as f64).round() as usize;
        let (test, rest) = shard.split_at(test_n);
        let (val, train) = rest.split_at(val_n);
        splits.push(DatasetSplit {
            client_id: c as u32,
            data: ClientData {
                train: dataset.gather(train)?,
                val: dataset.gather(val)?,
                test: dataset.gather(test)?,
            },
            provenance: dataset.provenance.clone(),
        });
    }
    Ok(splits)
}
