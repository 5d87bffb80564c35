//! Bi-level structure search, final training and evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::Phase;
use crate::model::{l1_loss, ModelState, Trainable};
use crate::parallel;
use crate::pipeline::{PreparedData, Split, WindowBatch};
use crate::structure::FinalStructure;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

/// Default MAPE mask: targets below one flow unit are skipped.
pub const DEFAULT_MAPE_THRESHOLD: f64 = 1.0;

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub patience: usize,
    pub weight_lr: f64,
    /// Zero freezes the structure scores.
    pub arch_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Caps the alternating steps per epoch; `None` uses every training batch.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            patience: 15,
            weight_lr: 1e-3,
            arch_lr: 1e-3,
            batch_size: 64,
            seed: 0,
            max_batches_per_epoch: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience > self.epochs {
            return Err(Error::config(format!(
                "search needs 0 < epochs and patience ≤ epochs (got {} / {})",
                self.epochs, self.patience
            )));
        }
        if !(self.weight_lr > 0.0) || !(self.arch_lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::config("search rates must be positive and batch size nonzero"));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::config("max batches per epoch must be nonzero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fresh weights before training instead of warm-starting from search.
    pub reinit_weights: bool,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 30,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            reinit_weights: false,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience > self.epochs {
            return Err(Error::config(format!(
                "training needs 0 < epochs and patience ≤ epochs (got {} / {})",
                self.epochs, self.patience
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("learning rate must be positive and batch size nonzero"));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::config("max batches per epoch must be nonzero"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Weights,
    Architecture,
}

/// One optimiser update; `step` increases by one per entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub kind: StepKind,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub wall_seconds: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_loss,valid_metric,wall_seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.train_loss, r.valid_metric, r.wall_seconds));
    }
    out
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub structure: FinalStructure,
    pub log: Vec<StepRecord>,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_valid_mae: f64,
}

#[derive(Clone, Copy)]
enum Group {
    Weights,
    Arch,
}

/// One Adam update of a parameter group on `batch`; returns the loss before the step.
fn optimise_step(
    model: &mut ModelState,
    opt: &mut AdamState,
    batch: &WindowBatch,
    phase: Phase,
    group: Group,
) -> Result<f64> {
    let mut tape = Tape::new();
    let trainable = match group {
        Group::Weights => Trainable::WEIGHTS,
        Group::Arch => Trainable::ARCH,
    };
    let fwd = model.forward(&mut tape, &batch.inputs, phase, trainable)?;
    let target = tape.constant(batch.targets.clone());
    let loss = l1_loss(&mut tape, fwd.predictions, target)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let vars = match group {
        Group::Weights => &fwd.weight_vars,
        Group::Arch => &fwd.arch_vars,
    };
    let g: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
        .collect();
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let params = match group {
        Group::Weights => &mut model.weights.tensors,
        Group::Arch => &mut model.arch.tensors,
    };
    opt.step(params, &g)?;
    Ok(value)
}

/// Mean L1 over all windows of `split` (window-weighted).
pub fn split_loss(model: &ModelState, data: &PreparedData, split: Split, batch_size: usize, phase: Phase) -> Result<f64> {
    let batches = data.batch_starts(split, batch_size, None);
    if batches.is_empty() {
        return Err(Error::contract(format!("{split:?} split has no windows")));
    }
    let parts = parallel::map_range(batches.len(), |i| -> Result<(f64, usize)> {
        let b = data.batch(&batches[i])?;
        let pred = model.predict(&b.inputs, phase)?;
        let sum: f64 = pred.data().iter().zip(b.targets.data()).map(|(p, y)| (p - y).abs()).sum();
        Ok((sum, pred.numel()))
    });
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (s, c) = p?;
        total += s;
        count += c;
    }
    Ok(total / count as f64)
}

struct Snapshot {
    weights: Vec<Tensor>,
    arch: Vec<Tensor>,
}

impl Snapshot {
    fn take(model: &ModelState) -> Self {
        Self {
            weights: model.weights.tensors.clone(),
            arch: model.arch.tensors.clone(),
        }
    }

    fn restore(&self, model: &mut ModelState) {
        model.weights.tensors.clone_from(&self.weights);
        model.arch.tensors.clone_from(&self.arch);
    }
}

fn epoch_batches(data: &PreparedData, split: Split, bs: usize, seed: u64, cap: Option<usize>) -> Vec<Vec<usize>> {
    let mut b = data.batch_starts(split, bs, Some(seed));
    if let Some(c) = cap {
        b.truncate(c);
    }
    b
}

/// Alternate a weight step on a training batch with a structure step on a
/// validation batch, early-stop on validation L1 and finalise the best scores.
///
/// On divergence the model is rolled back to the best finite state before the
/// numeric error is returned.
pub fn search_structures(model: &mut ModelState, data: &PreparedData, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut w_opt = AdamState::new(&model.weights.tensors, AdamConfig::with_lr(cfg.weight_lr));
    let mut a_opt = AdamState::new(&model.arch.tensors, AdamConfig::with_lr(cfg.arch_lr));
    let start = Instant::now();
    let mut best = Snapshot::take(model);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let seed = epoch_seed(cfg.seed, epoch);
        let train = epoch_batches(data, Split::Train, cfg.batch_size, seed, cfg.max_batches_per_epoch);
        let valid = data.batch_starts(Split::Valid, cfg.batch_size, Some(seed.rotate_left(17)));
        if train.is_empty() || valid.is_empty() {
            return Err(Error::contract("search needs training and validation windows"));
        }
        let mut train_sum = 0.0;
        for (i, starts) in train.iter().enumerate() {
            let outcome = (|| -> Result<(f64, f64)> {
                let tb = data.batch(starts)?;
                let lw = optimise_step(model, &mut w_opt, &tb, Phase::Search, Group::Weights)?;
                let vb = data.batch(&valid[i % valid.len()])?;
                let la = optimise_step(model, &mut a_opt, &vb, Phase::Search, Group::Arch)?;
                Ok((lw, la))
            })();
            let (lw, la) = match outcome {
                Ok(v) => v,
                Err(e @ Error::Numeric(_)) => {
                    best.restore(model);
                    return Err(Error::Numeric(format!("{e}; rolled back to epoch {best_epoch}")));
                }
                Err(e) => return Err(e),
            };
            for (kind, loss) in [(StepKind::Weights, lw), (StepKind::Architecture, la)] {
                log.push(StepRecord {
                    step: log.len(),
                    epoch,
                    kind,
                    loss,
                });
            }
            train_sum += lw;
        }
        let valid_loss = split_loss(model, data, Split::Valid, cfg.batch_size, Phase::Search)?;
        if !valid_loss.is_finite() {
            best.restore(model);
            return Err(Error::Numeric(format!(
                "validation loss became {valid_loss}; rolled back to epoch {best_epoch}"
            )));
        }
        history.push(HistoryRow {
            epoch,
            train_loss: train_sum / train.len() as f64,
            valid_metric: valid_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_epoch = epoch;
            best = Snapshot::take(model);
        } else if epoch - best_epoch > cfg.patience {
            break;
        }
    }
    best.restore(model);
    let structure = model.finalize();
    Ok(SearchOutcome {
        structure,
        log,
        history,
        best_epoch,
        best_valid_loss: best_loss,
    })
}

/// Adam on L1 with the structure frozen; early-stops on validation MAE and
/// leaves the best-validation weights in `model`.
pub fn train_final(model: &mut ModelState, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.structure.is_none() {
        return Err(Error::State("final training requires a finalised structure".into()));
    }
    if cfg.reinit_weights {
        model.reinitialize_weights(cfg.seed);
    }
    let mut opt = AdamState::new(&model.weights.tensors, AdamConfig::with_lr(cfg.lr));
    let start = Instant::now();
    let mut best = Snapshot::take(model);
    let mut best_mae = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let train = epoch_batches(
            data,
            Split::Train,
            cfg.batch_size,
            epoch_seed(cfg.seed, epoch),
            cfg.max_batches_per_epoch,
        );
        if train.is_empty() {
            return Err(Error::contract("training split has no windows"));
        }
        let mut train_sum = 0.0;
        for starts in &train {
            let b = data.batch(starts)?;
            match optimise_step(model, &mut opt, &b, Phase::Final, Group::Weights) {
                Ok(l) => train_sum += l,
                Err(e @ Error::Numeric(_)) => {
                    best.restore(model);
                    return Err(Error::Numeric(format!("{e}; rolled back to epoch {best_epoch}")));
                }
                Err(e) => return Err(e),
            }
        }
        let valid_mae = split_loss(model, data, Split::Valid, cfg.batch_size, Phase::Final)?;
        if !valid_mae.is_finite() {
            best.restore(model);
            return Err(Error::Numeric(format!("validation MAE became {valid_mae}")));
        }
        history.push(HistoryRow {
            epoch,
            train_loss: train_sum / train.len() as f64,
            valid_metric: valid_mae,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if valid_mae < best_mae {
            best_mae = valid_mae;
            best_epoch = epoch;
            best = Snapshot::take(model);
        } else if epoch - best_epoch > cfg.patience {
            break;
        }
    }
    best.restore(model);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_valid_mae: best_mae,
    })
}

/// Mean L1 of `model` over `batches` in the final phase.
pub fn batches_loss(model: &ModelState, batches: &[WindowBatch]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for b in batches {
        let pred = model.predict(&b.inputs, Phase::Final)?;
        sum += pred.data().iter().zip(b.targets.data()).map(|(p, y)| (p - y).abs()).sum::<f64>();
        count += pred.numel();
    }
    Ok(sum / count as f64)
}

/// Cycle Adam steps over a fixed set of batches. Returns the loss over all
/// batches before training and after every step.
pub fn overfit(model: &mut ModelState, batches: &[WindowBatch], steps: usize, lr: f64) -> Result<(Vec<f64>, f64)> {
    if batches.is_empty() {
        return Err(Error::contract("overfit needs at least one batch"));
    }
    let initial = batches_loss(model, batches)?;
    let mut opt = AdamState::new(&model.weights.tensors, AdamConfig::with_lr(lr));
    let mut trace = Vec::with_capacity(steps);
    for s in 0..steps {
        optimise_step(model, &mut opt, &batches[s % batches.len()], Phase::Final, Group::Weights)?;
        trace.push(batches_loss(model, batches)?);
    }
    Ok((trace, initial))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
    pub mape_threshold: f64,
    /// Entries that passed the MAPE mask.
    pub mape_count: usize,
    pub windows: usize,
    pub per_horizon: Vec<HorizonMetrics>,
}

struct Sums {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Sums {
    fn new() -> Self {
        Self {
            abs: 0.0,
            sq: 0.0,
            pct: 0.0,
            n: 0,
            n_pct: 0,
        }
    }

    fn add(&mut self, p: f64, y: f64, threshold: f64) {
        let e = (p - y).abs();
        self.abs += e;
        self.sq += e * e;
        self.n += 1;
        if y >= threshold {
            self.pct += e / y;
            self.n_pct += 1;
        }
    }

    fn finish(&self) -> (f64, f64, f64) {
        let mae = self.abs / self.n as f64;
        // Equal-magnitude errors can put the root one ulp under the mean.
        let rmse = (self.sq / self.n as f64).sqrt().max(mae);
        let mape = if self.n_pct == 0 {
            0.0
        } else {
            100.0 * self.pct / self.n_pct as f64
        };
        (mae, rmse, mape)
    }
}

/// Metrics over `[windows, horizon, nodes]` predictions and real-scale targets.
pub fn compute_metrics(dump: &PredictionDump, mape_threshold: f64) -> Result<MetricsReport> {
    dump.check()?;
    if dump.windows == 0 {
        return Err(Error::contract("no predictions to score"));
    }
    let (h, n) = (dump.horizon, dump.nodes);
    let mut total = Sums::new();
    let mut per = (0..h).map(|_| Sums::new()).collect::<Vec<_>>();
    for w in 0..dump.windows {
        for (step, sums) in per.iter_mut().enumerate() {
            let base = (w * h + step) * n;
            for k in base..base + n {
                let (p, y) = (dump.predictions[k], dump.targets[k]);
                sums.add(p, y, mape_threshold);
                total.add(p, y, mape_threshold);
            }
        }
    }
    let (mae, rmse, mape_percent) = total.finish();
    Ok(MetricsReport {
        mae,
        rmse,
        mape_percent,
        mape_threshold,
        mape_count: total.n_pct,
        windows: dump.windows,
        per_horizon: per
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (mae, rmse, mape_percent) = s.finish();
                HorizonMetrics {
                    horizon: i + 1,
                    mae,
                    rmse,
                    mape_percent,
                }
            })
            .collect(),
    })
}

/// Raw predictions and targets, row-major `[windows, horizon, nodes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDump {
    pub windows: usize,
    pub horizon: usize,
    pub nodes: usize,
    pub starts: Vec<usize>,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DumpMeta {
    windows: usize,
    horizon: usize,
    nodes: usize,
    dtype: String,
    starts: Vec<usize>,
    predictions: String,
    targets: String,
}

pub const DUMP_META_FILE: &str = "predictions.json";
pub const DUMP_PRED_FILE: &str = "predictions.f64";
pub const DUMP_TARGET_FILE: &str = "targets.f64";

impl PredictionDump {
    fn check(&self) -> Result<()> {
        let len = self.windows * self.horizon * self.nodes;
        if self.predictions.len() != len || self.targets.len() != len || self.starts.len() != self.windows {
            return Err(Error::shape(format!(
                "dump of {} windows × {} × {} holds {} predictions, {} targets, {} starts",
                self.windows,
                self.horizon,
                self.nodes,
                self.predictions.len(),
                self.targets.len(),
                self.starts.len()
            )));
        }
        Ok(())
    }

    /// Writes the metadata file plus little-endian f64 predictions and targets.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir)?;
        let bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        fs::write(dir.join(DUMP_PRED_FILE), bytes(&self.predictions))?;
        fs::write(dir.join(DUMP_TARGET_FILE), bytes(&self.targets))?;
        let meta = DumpMeta {
            windows: self.windows,
            horizon: self.horizon,
            nodes: self.nodes,
            dtype: "f64le".into(),
            starts: self.starts.clone(),
            predictions: DUMP_PRED_FILE.into(),
            targets: DUMP_TARGET_FILE.into(),
        };
        fs::write(dir.join(DUMP_META_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(DUMP_META_FILE);
        if !meta_path.exists() {
            return Err(Error::NotFound(meta_path));
        }
        let meta: DumpMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        if meta.dtype != "f64le" {
            return Err(Error::Ingestion(format!("unsupported dump dtype {}", meta.dtype)));
        }
        let len = meta.windows * meta.horizon * meta.nodes;
        let load = |name: &str| -> Result<Vec<f64>> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::NotFound(path));
            }
            let raw = fs::read(&path)?;
            if raw.len() != len * 8 {
                return Err(Error::Ingestion(format!(
                    "{name}: expected {} bytes, found {}",
                    len * 8,
                    raw.len()
                )));
            }
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let dump = Self {
            windows: meta.windows,
            horizon: meta.horizon,
            nodes: meta.nodes,
            starts: meta.starts,
            predictions: load(&meta.predictions)?,
            targets: load(&meta.targets)?,
        };
        dump.check()?;
        Ok(dump)
    }
}

/// Predict every window of `split` in chronological order.
pub fn predict_split(model: &ModelState, data: &PreparedData, split: Split, batch_size: usize) -> Result<PredictionDump> {
    let phase = if model.structure.is_some() {
        Phase::Final
    } else {
        Phase::Search
    };
    let batches = data.batch_starts(split, batch_size.max(1), None);
    if batches.is_empty() {
        return Err(Error::contract(format!("{split:?} split has no windows")));
    }
    let parts = parallel::map_range(batches.len(), |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let b = data.batch(&batches[i])?;
        let pred = model.predict(&b.inputs, phase)?;
        Ok((pred.into_data(), b.targets.into_data()))
    });
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    for p in parts {
        let (pr, t) = p?;
        predictions.extend(pr);
        targets.extend(t);
    }
    let starts: Vec<usize> = batches.concat();
    Ok(PredictionDump {
        windows: starts.len(),
        horizon: data.window.horizon,
        nodes: data.dataset.n_nodes(),
        starts,
        predictions,
        targets,
    })
}

/// Score `model` on the test split.
pub fn evaluate_metrics(
    model: &ModelState,
    data: &PreparedData,
    batch_size: usize,
    mape_threshold: f64,
) -> Result<(MetricsReport, PredictionDump)> {
    let dump = predict_split(model, data, Split::Test, batch_size)?;
    let report = compute_metrics(&dump, mape_threshold)?;
    Ok((report, dump))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Repeat the last observed value for every horizon.
    LastObservation,
    /// Training-split mean per node and position within a seasonal period.
    HistoricalAverage { period: usize },
}

pub fn baseline_predictions(data: &PreparedData, split: Split, baseline: Baseline) -> Result<PredictionDump> {
    let ds = &data.dataset;
    let n = ds.n_nodes();
    let (h, p) = (data.window.history, data.window.horizon);
    let starts = data.starts(split);
    if starts.is_empty() {
        return Err(Error::contract(format!("{split:?} split has no windows")));
    }
    let profile = match baseline {
        Baseline::HistoricalAverage { period } => {
            if period == 0 {
                return Err(Error::config("seasonal period must be positive"));
            }
            let mut sum = vec![0.0; period * n];
            let mut cnt = vec![0usize; period * n];
            for t in data.splits.train.clone() {
                for node in 0..n {
                    sum[(t % period) * n + node] += ds.value(t, node, 0);
                    cnt[(t % period) * n + node] += 1;
                }
            }
            let overall: Vec<f64> = (0..n)
                .map(|node| {
                    let (s, c) = (0..period).fold((0.0, 0), |(s, c), k| (s + sum[k * n + node], c + cnt[k * n + node]));
                    s / c as f64
                })
                .collect();
            Some(
                (0..period * n)
                    .map(|i| if cnt[i] == 0 { overall[i % n] } else { sum[i] / cnt[i] as f64 })
                    .collect::<Vec<_>>(),
            )
        }
        Baseline::LastObservation => None,
    };
    let mut predictions = Vec::with_capacity(starts.len() * p * n);
    let mut targets = Vec::with_capacity(starts.len() * p * n);
    for &s in &starts {
        for t in s + h..s + h + p {
            for node in 0..n {
                let pred = match (&profile, baseline) {
                    (Some(prof), Baseline::HistoricalAverage { period }) => prof[(t % period) * n + node],
                    _ => ds.value(s + h - 1, node, 0),
                };
                predictions.push(pred);
                targets.push(ds.value(t, node, 0));
            }
        }
    }
    Ok(PredictionDump {
        windows: starts.len(),
        horizon: p,
        nodes: n,
        starts,
        predictions,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metagraph::MetaGraphs;
    use crate::model::{build_with_sets, ModelConfig};
    use crate::pipeline::{Dataset, DatasetMeta, WindowSpec};
    use crate::structure::{build_candidate_sets, MainChoice, SubChoice};
    use approx::assert_abs_diff_eq;

    fn dump(pred: Vec<f64>, target: Vec<f64>) -> PredictionDump {
        PredictionDump {
            windows: 1,
            horizon: 1,
            nodes: pred.len(),
            starts: vec![0],
            predictions: pred,
            targets: target,
        }
    }

    #[test]
    fn metric_examples() {
        let r = compute_metrics(&dump(vec![2.0, 4.0], vec![1.0, 6.0]), 1.0).unwrap();
        assert_abs_diff_eq!(r.mae, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rmse, 2.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.mape_percent, 200.0 / 3.0, epsilon = 1e-9);
        let z = compute_metrics(&dump(vec![3.0, 5.0], vec![3.0, 5.0]), 1.0).unwrap();
        assert_eq!((z.mae, z.rmse, z.mape_percent), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mape_mask_skips_small_targets() {
        let r = compute_metrics(&dump(vec![1.0, 4.0], vec![0.5, 2.0]), 1.0).unwrap();
        assert_eq!(r.mape_count, 1);
        assert_abs_diff_eq!(r.mape_percent, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_dump_is_a_contract_error() {
        let d = PredictionDump {
            windows: 0,
            horizon: 12,
            nodes: 3,
            starts: vec![],
            predictions: vec![],
            targets: vec![],
        };
        assert!(matches!(compute_metrics(&d, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dump(vec![0.1, -2.5, 1e300], vec![1.0, 2.0, 3.0]);
        d.write(dir.path()).unwrap();
        assert_eq!(PredictionDump::read(dir.path()).unwrap(), d);
    }

    fn tiny() -> (ModelState, PreparedData) {
        let n = 3;
        let steps = 120;
        let flow: Vec<f64> = (0..steps * n)
            .map(|i| 10.0 + ((i / n) as f64 * 0.3 + (i % n) as f64).sin() * 3.0)
            .collect();
        let mut sg = Tensor::zeros(&[n, n]);
        for (i, j) in [(0, 1), (1, 2)] {
            sg.set(&[i, j], 1.0);
            sg.set(&[j, i], 1.0);
        }
        let mut tg = Tensor::zeros(&[n, n]);
        tg.set(&[0, 2], 1.0);
        tg.set(&[2, 0], 1.0);
        let meta = DatasetMeta {
            nodes: n,
            timesteps: steps,
            features: 1,
            granularity_minutes: 5,
            sha256: None,
        };
        let ds = Dataset::new(meta, flow, sg.clone()).unwrap();
        let data = PreparedData::new(ds, (0.5, 0.25, 0.25), WindowSpec::default()).unwrap();
        let mut cfg = ModelConfig::new(n, 1);
        cfg.hidden_dim = 4;
        cfg.target_mean = data.stats.mean[0];
        cfg.target_std = data.stats.std[0];
        let sets = build_candidate_sets(&MetaGraphs::new(sg, tg).unwrap()).unwrap();
        (build_with_sets(&cfg, sets, 1).unwrap(), data)
    }

    fn quick_search() -> SearchConfig {
        SearchConfig {
            epochs: 2,
            patience: 1,
            batch_size: 8,
            max_batches_per_epoch: Some(2),
            ..SearchConfig::default()
        }
    }

    #[test]
    fn search_interleaves_strictly() {
        let (mut model, data) = tiny();
        let out = search_structures(&mut model, &data, &quick_search()).unwrap();
        assert_eq!(out.log.len(), 8);
        for (i, r) in out.log.iter().enumerate() {
            assert_eq!(r.step, i);
            let expect = if i % 2 == 0 { StepKind::Weights } else { StepKind::Architecture };
            assert_eq!(r.kind, expect);
        }
        assert_eq!(out.structure.blocks.len(), 26);
    }

    #[test]
    fn frozen_scores_stay_at_init() {
        let (mut model, data) = tiny();
        let cfg = SearchConfig {
            arch_lr: 0.0,
            ..quick_search()
        };
        search_structures(&mut model, &data, &cfg).unwrap();
        assert!(model.arch.tensors.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn degenerate_space_finalizes_unique_choice() {
        let (model, data) = tiny();
        let sets = model
            .candidate_sets()
            .restrict(&[MainChoice::SgSg], &[SubChoice::Tc])
            .unwrap();
        let mut m = build_with_sets(&model.config, sets, 1).unwrap();
        let out = search_structures(&mut m, &data, &quick_search()).unwrap();
        assert!(out
            .structure
            .blocks
            .iter()
            .all(|b| b.main_choice == MainChoice::SgSg && b.sub_choice == SubChoice::Tc));
    }

    #[test]
    fn zero_patience_stops_one_epoch_after_best() {
        let (mut model, data) = tiny();
        model.finalize();
        let cfg = TrainConfig {
            epochs: 50,
            patience: 0,
            lr: 0.3,
            batch_size: 8,
            max_batches_per_epoch: Some(1),
            ..TrainConfig::default()
        };
        let out = train_final(&mut model, &data, &cfg).unwrap();
        let last = out.history.last().unwrap().epoch;
        assert!(last == cfg.epochs - 1 || last == out.best_epoch + 1);
        // Best state is never worse than anything seen.
        let min = out.history.iter().map(|r| r.valid_metric).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_valid_mae, min);
        let now = split_loss(&model, &data, Split::Valid, 8, Phase::Final).unwrap();
        assert_eq!(now.to_bits(), min.to_bits());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, data) = tiny();
            model.finalize();
            let cfg = TrainConfig {
                epochs: 2,
                patience: 2,
                batch_size: 8,
                max_batches_per_epoch: Some(2),
                ..TrainConfig::default()
            };
            let out = train_final(&mut model, &data, &cfg).unwrap();
            out.history
                .iter()
                .map(|r| (r.train_loss.to_bits(), r.valid_metric.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_requires_structure() {
        let (mut model, data) = tiny();
        assert!(matches!(
            train_final(&mut model, &data, &TrainConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn baselines() {
        let (_, data) = tiny();
        let last = baseline_predictions(&data, Split::Test, Baseline::LastObservation).unwrap();
        let s = last.starts[0];
        assert_eq!(last.predictions[0], data.dataset.value(s + 11, 0, 0));
        let ha = baseline_predictions(&data, Split::Test, Baseline::HistoricalAverage { period: 1 }).unwrap();
        let train = data.splits.train.clone();
        let mean0 = train.clone().map(|t| data.dataset.value(t, 0, 0)).sum::<f64>() / train.len() as f64;
        assert_abs_diff_eq!(ha.predictions[0], mean0, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = SearchConfig {
            patience: 100,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
