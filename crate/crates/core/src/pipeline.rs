//! Dataset container, Z-score normalisation, chronological splits and
//! sliding-window batching.
//!
//! On disk a dataset is a directory with `meta.json`, `flow.f32`
//! (little-endian f32, row-major `[time][node][feature]`) and `edges.csv`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metagraph::{self, EDGES_FILE};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const FLOW_FILE: &str = "flow.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub nodes: usize,
    pub timesteps: usize,
    pub features: usize,
    pub granularity_minutes: u32,
    /// Optional hex SHA-256 of `flow.f32`, verified on load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `[time][node][feature]`, upcast from f32 when loaded from disk.
    pub flow: Vec<f64>,
    pub spatial: Tensor,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, flow: Vec<f64>, spatial: Tensor) -> Result<Self> {
        let expect = meta.timesteps * meta.nodes * meta.features;
        if flow.len() != expect {
            return Err(Error::Ingestion(format!(
                "flow holds {} values, meta declares {expect}",
                flow.len()
            )));
        }
        metagraph::check_meta_matrix("spatial graph", &spatial, meta.nodes)?;
        Ok(Self { meta, flow, spatial })
    }

    pub fn n_nodes(&self) -> usize {
        self.meta.nodes
    }

    pub fn len(&self) -> usize {
        self.meta.timesteps
    }

    pub fn is_empty(&self) -> bool {
        self.meta.timesteps == 0
    }

    #[inline]
    pub fn index(&self, t: usize, node: usize, feature: usize) -> usize {
        (t * self.meta.nodes + node) * self.meta.features + feature
    }

    pub fn value(&self, t: usize, node: usize, feature: usize) -> f64 {
        self.flow[self.index(t, node, feature)]
    }

    pub fn series(&self, node: usize, feature: usize, range: Range<usize>) -> Vec<f64> {
        range.map(|t| self.value(t, node, feature)).collect()
    }
}

fn flow_bytes(flow: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(flow.len() * 4);
    for &x in flow {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Write the three-file container. Values are stored as f32.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = flow_bytes(&ds.flow);
    let mut meta = ds.meta.clone();
    meta.sha256 = Some(sha256_hex(&bytes));
    fs::write(dir.join(FLOW_FILE), &bytes)?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    fs::write(dir.join(EDGES_FILE), metagraph::edges_csv(&ds.spatial))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let require = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::NotFound(p))
        }
    };
    let meta_path = require(META_FILE)?;
    let flow_path = require(FLOW_FILE)?;
    let edges_path = require(EDGES_FILE)?;
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)
        .map_err(|e| Error::Ingestion(format!("{META_FILE}: {e}")))?;
    let bytes = fs::read(flow_path)?;
    let expect = meta.timesteps * meta.nodes * meta.features * 4;
    if bytes.len() != expect {
        return Err(Error::Ingestion(format!(
            "{FLOW_FILE}: expected {expect} bytes for {}×{}×{} f32 values, found {}",
            meta.timesteps,
            meta.nodes,
            meta.features,
            bytes.len()
        )));
    }
    if let Some(sum) = &meta.sha256 {
        let actual = sha256_hex(&bytes);
        if &actual != sum {
            return Err(Error::Ingestion(format!(
                "{FLOW_FILE}: checksum {actual} does not match recorded {sum}"
            )));
        }
    }
    let flow = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let spatial = metagraph::read_edges_csv(&edges_path, meta.nodes)?;
    Dataset::new(meta, flow, spatial)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Valid => self.valid.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// `train = ⌊f_train·L⌋`, `valid = ⌊f_valid·L⌋`, `test` takes the remainder.
/// Every split must hold at least `min_len` steps.
pub fn chronological_split(len: usize, fractions: (f64, f64, f64), min_len: usize) -> Result<SplitBounds> {
    let (ft, fv, fs_) = fractions;
    if [ft, fv, fs_].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs_) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let train = (ft * len as f64).floor() as usize;
    let valid = (fv * len as f64).floor() as usize;
    let test = len - train - valid;
    if train.min(valid).min(test) < min_len {
        return Err(Error::config(format!(
            "split lengths ({train}, {valid}, {test}) leave a split shorter than {min_len} steps"
        )));
    }
    Ok(SplitBounds {
        train: 0..train,
        valid: train..train + valid,
        test: train + valid..len,
    })
}

/// Per-feature training-split mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(ds: &Dataset, train: Range<usize>) -> Result<Self> {
        let f = ds.meta.features;
        let count = (train.len() * ds.meta.nodes) as f64;
        let mut mean = vec![0.0; f];
        for t in train.clone() {
            for n in 0..ds.meta.nodes {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += ds.value(t, n, k);
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; f];
        for t in train {
            for n in 0..ds.meta.nodes {
                for (k, v) in var.iter_mut().enumerate() {
                    let d = ds.value(t, n, k) - mean[k];
                    *v += d * d;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateData(format!(
                "feature {k} has zero variance on the training split"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: f64, feature: usize) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize(&self, z: f64, feature: usize) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }

    pub fn apply(&self, flow: &[f64]) -> Vec<f64> {
        let f = self.mean.len();
        flow.iter()
            .enumerate()
            .map(|(i, &x)| self.normalize(x, i % f))
            .collect()
    }

    pub fn invert(&self, normed: &[f64]) -> Vec<f64> {
        let f = self.mean.len();
        normed
            .iter()
            .enumerate()
            .map(|(i, &z)| self.denormalize(z, i % f))
            .collect()
    }
}

/// Normalise with training-split statistics only.
pub fn zscore(ds: &Dataset, train: Range<usize>) -> Result<(Vec<f64>, ZScore)> {
    let stats = ZScore::fit(ds, train)?;
    Ok((stats.apply(&ds.flow), stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// Normalised `[B, history, N, features]`.
    pub inputs: Tensor,
    /// Real-scale feature-0 targets `[B, horizon, N]`.
    pub targets: Tensor,
    pub starts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            history: 12,
            horizon: 12,
        }
    }
}

impl WindowSpec {
    pub fn span(&self) -> usize {
        self.history + self.horizon
    }

    /// Window start positions fully inside `range`.
    pub fn starts(&self, range: Range<usize>) -> Vec<usize> {
        if range.len() < self.span() {
            return Vec::new();
        }
        (range.start..=range.end - self.span()).collect()
    }
}

/// Dataset plus everything derived for training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub normalized: Vec<f64>,
    pub stats: ZScore,
    pub splits: SplitBounds,
    pub window: WindowSpec,
}

impl PreparedData {
    pub fn new(dataset: Dataset, fractions: (f64, f64, f64), window: WindowSpec) -> Result<Self> {
        let splits = chronological_split(dataset.len(), fractions, window.span())?;
        let (normalized, stats) = zscore(&dataset, splits.train.clone())?;
        Ok(Self {
            dataset,
            normalized,
            stats,
            splits,
            window,
        })
    }

    pub fn standard(dataset: Dataset) -> Result<Self> {
        Self::new(dataset, (0.6, 0.2, 0.2), WindowSpec::default())
    }

    pub fn starts(&self, split: Split) -> Vec<usize> {
        self.window.starts(self.splits.range(split))
    }

    pub fn batch(&self, starts: &[usize]) -> Result<WindowBatch> {
        let ds = &self.dataset;
        let (n, f) = (ds.meta.nodes, ds.meta.features);
        let (h, p) = (self.window.history, self.window.horizon);
        let b = starts.len();
        if b == 0 {
            return Err(Error::contract("empty window batch"));
        }
        let mut inputs = Vec::with_capacity(b * h * n * f);
        let mut targets = Vec::with_capacity(b * p * n);
        for &s in starts {
            if s + h + p > ds.len() {
                return Err(Error::Index(format!("window at {s} runs past the data")));
            }
            let lo = ds.index(s, 0, 0);
            inputs.extend_from_slice(&self.normalized[lo..lo + h * n * f]);
            for t in s + h..s + h + p {
                for node in 0..n {
                    targets.push(ds.value(t, node, 0));
                }
            }
        }
        Ok(WindowBatch {
            inputs: Tensor::new(vec![b, h, n, f], inputs)?,
            targets: Tensor::new(vec![b, p, n], targets)?,
            starts: starts.to_vec(),
        })
    }

    /// Batches of window starts; shuffled when a seed is given.
    pub fn batch_starts(&self, split: Split, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut starts = self.starts(split);
        if let Some(seed) = shuffle_seed {
            starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        starts.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Stream of batches for `split`. Training callers pass a seed; the
    /// evaluation splits stay in chronological order with `None`.
    pub fn make_windows(
        &self,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        self.batch_starts(split, batch_size, shuffle_seed)
            .into_iter()
            .map(move |s| self.batch(&s))
    }

    /// Normalised feature-0 training series per node (DTW input).
    pub fn training_series(&self, cap: Option<usize>) -> Vec<Vec<f64>> {
        let ds = &self.dataset;
        let range = self.splits.train.clone();
        let end = cap.map_or(range.end, |c| (range.start + c).min(range.end));
        (0..ds.meta.nodes)
            .map(|node| {
                (range.start..end)
                    .map(|t| self.normalized[ds.index(t, node, 0)])
                    .collect()
            })
            .collect()
    }
}
