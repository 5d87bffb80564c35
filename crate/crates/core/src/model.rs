//! The full forecasting network: input projection, stacked dilated layers,
//! skip aggregation, per-horizon output heads and the L1 objective.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{self, BlockVars, DilationSpec, GluVars, LayerVars, Phase, TcnVars};
use crate::metagraph::MetaGraphs;
use crate::pipeline::PreparedData;
use crate::structure::{self, CandidateSets, FinalStructure, GssParams, MainChoice, SubChoice};
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GssSharing {
    /// Independent structure scores for every block.
    #[default]
    PerBlock,
    /// One score pair per layer, shared by its blocks.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub input_features: usize,
    pub hidden_dim: usize,
    /// Defaults to `4 · hidden_dim`.
    pub skip_dim: Option<usize>,
    /// Hidden width of each output head; defaults to `hidden_dim`.
    pub head_dim: Option<usize>,
    pub hop_count: usize,
    pub dilations: Vec<usize>,
    pub history: usize,
    pub horizon: usize,
    #[serde(default)]
    pub gss_sharing: GssSharing,
    /// Inverse Z-score applied to predictions.
    pub target_mean: f64,
    pub target_std: f64,
}

impl ModelConfig {
    pub fn new(n_nodes: usize, input_features: usize) -> Self {
        Self {
            n_nodes,
            input_features,
            hidden_dim: 40,
            skip_dim: None,
            head_dim: None,
            hop_count: 2,
            dilations: vec![1, 2, 4, 4],
            history: 12,
            horizon: 12,
            gss_sharing: GssSharing::PerBlock,
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Defaults sized to `data`, with its feature-0 statistics for denormalising.
    pub fn for_data(data: &PreparedData) -> Self {
        Self {
            history: data.window.history,
            horizon: data.window.horizon,
            target_mean: data.stats.mean[0],
            target_std: data.stats.std[0],
            ..Self::new(data.dataset.n_nodes(), data.dataset.meta.features)
        }
    }

    pub fn skip_width(&self) -> usize {
        self.skip_dim.unwrap_or(4 * self.hidden_dim)
    }

    pub fn head_width(&self) -> usize {
        self.head_dim.unwrap_or(self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.input_features == 0 || self.hidden_dim == 0 || self.horizon == 0 {
            return Err(Error::config("node count, feature counts and horizon must be positive"));
        }
        if self.hop_count == 0 {
            return Err(Error::config("hop count must be at least 1"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::config("dilations must be a non-empty list of positive integers"));
        }
        let field: usize = 1 + self.dilations.iter().sum::<usize>();
        if field != self.history {
            return Err(Error::config(format!(
                "receptive field 1 + Σ dilations = {field} must equal history {}",
                self.history
            )));
        }
        if !(self.target_std > 0.0) || !self.target_mean.is_finite() {
            return Err(Error::config("target normalisation needs finite mean and std > 0"));
        }
        layer::layer_lengths(self.history, &self.dilations).map(|_| ())
    }

    /// Sequence lengths entering each layer plus the final one.
    pub fn layer_lengths(&self) -> Vec<usize> {
        layer::layer_lengths(self.history, &self.dilations).expect("validated config")
    }

    pub fn blocks_per_layer(&self) -> Vec<usize> {
        self.layer_lengths()[1..].to_vec()
    }

    /// Per layer, whether each block can influence the predictions.
    ///
    /// Only skip contributions reach the heads, and each takes the last
    /// step of its layer, so with kernel 2 some positions feed nothing. For
    /// `[1, 2, 4, 4]` that leaves 12 of 26 blocks live.
    pub fn live_blocks(&self) -> Vec<Vec<bool>> {
        let blocks = self.blocks_per_layer();
        let mut live: Vec<Vec<bool>> = blocks.iter().map(|&b| vec![false; b]).collect();
        let mut needed_out: Vec<bool> = vec![false; *blocks.last().unwrap_or(&0)];
        for l in (0..blocks.len()).rev() {
            let d = self.dilations[l];
            let agg = &mut live[l];
            agg[blocks[l] - 1] = true;
            let mut needed_in = vec![false; blocks[l] + d];
            for p in 0..blocks[l] {
                if needed_out[p] {
                    agg[p] = true;
                    needed_in[p + d] = true;
                }
                if agg[p] {
                    needed_in[p] = true;
                    needed_in[p + d] = true;
                }
            }
            needed_out = needed_in;
        }
        live
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    glus: Vec<[usize; 4]>,
    /// Indices into the structure-score set.
    alpha: [usize; 2],
}

#[derive(Clone, Debug)]
struct LayerLayout {
    blocks: Vec<BlockLayout>,
    tcn: [usize; 4],
    residual: [usize; 2],
    skip: [usize; 2],
}

#[derive(Clone, Debug)]
struct Layout {
    input: [usize; 2],
    layers: Vec<LayerLayout>,
    heads: Vec<[usize; 4]>,
}

/// Network parameters: weights θ and structure scores ω kept apart so the
/// alternating optimiser can update them independently.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub weights: ParamSet,
    pub arch: ParamSet,
    pub structure: Option<FinalStructure>,
    sets: CandidateSets,
    layout: Layout,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-bound..bound);
    }
    t
}

fn allocate(cfg: &ModelConfig, sets: &CandidateSets, seed: u64) -> (ParamSet, ParamSet, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ParamSet::default();
    let mut arch = ParamSet::default();
    let (din, d, ds, dh) = (cfg.input_features, cfg.hidden_dim, cfg.skip_width(), cfg.head_width());
    let (n1, n2) = (sets.m1().len(), sets.m2().len());

    let input = [
        w.push("input.W".into(), uniform(&mut rng, &[din, d], din)),
        w.push("input.b".into(), uniform(&mut rng, &[d], din)),
    ];
    let mut layers = Vec::new();
    for (l, &blocks) in cfg.blocks_per_layer().iter().enumerate() {
        let shared_alpha = (cfg.gss_sharing == GssSharing::PerLayer).then(|| {
            [
                arch.push(format!("layer.{l}.gss.alpha_m1"), Tensor::zeros(&[n1])),
                arch.push(format!("layer.{l}.gss.alpha_m2"), Tensor::zeros(&[n2])),
            ]
        });
        let mut block_layouts = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let glus = (1..=cfg.hop_count)
                .map(|h| {
                    let p = format!("layer.{l}.block.{b}.glu.{h}");
                    [
                        w.push(format!("{p}.W1"), uniform(&mut rng, &[d, d], d)),
                        w.push(format!("{p}.b1"), uniform(&mut rng, &[d], d)),
                        w.push(format!("{p}.W2"), uniform(&mut rng, &[d, d], d)),
                        w.push(format!("{p}.b2"), uniform(&mut rng, &[d], d)),
                    ]
                })
                .collect();
            let alpha = shared_alpha.unwrap_or_else(|| {
                [
                    arch.push(format!("layer.{l}.block.{b}.gss.alpha_m1"), Tensor::zeros(&[n1])),
                    arch.push(format!("layer.{l}.block.{b}.gss.alpha_m2"), Tensor::zeros(&[n2])),
                ]
            });
            block_layouts.push(BlockLayout { glus, alpha });
        }
        let p = format!("layer.{l}");
        let tcn = [
            w.push(format!("{p}.tcn.theta1"), uniform(&mut rng, &[2, d, d], 2 * d)),
            w.push(format!("{p}.tcn.b1"), uniform(&mut rng, &[d], 2 * d)),
            w.push(format!("{p}.tcn.theta2"), uniform(&mut rng, &[2, d, d], 2 * d)),
            w.push(format!("{p}.tcn.b2"), uniform(&mut rng, &[d], 2 * d)),
        ];
        let residual = [
            w.push(format!("{p}.residual.W"), uniform(&mut rng, &[d, d], d)),
            w.push(format!("{p}.residual.b"), uniform(&mut rng, &[d], d)),
        ];
        let skip = [
            w.push(format!("{p}.skip.W"), uniform(&mut rng, &[d, ds], d)),
            w.push(format!("{p}.skip.b"), uniform(&mut rng, &[ds], d)),
        ];
        layers.push(LayerLayout {
            blocks: block_layouts,
            tcn,
            residual,
            skip,
        });
    }
    let heads = (1..=cfg.horizon)
        .map(|i| {
            [
                w.push(format!("head.{i}.W1"), uniform(&mut rng, &[ds, dh], ds)),
                w.push(format!("head.{i}.b1"), uniform(&mut rng, &[dh], ds)),
                w.push(format!("head.{i}.W2"), uniform(&mut rng, &[dh, 1], dh)),
                w.push(format!("head.{i}.b2"), uniform(&mut rng, &[1], dh)),
            ]
        })
        .collect();
    (w, arch, Layout { input, layers, heads })
}

/// Deterministic initialisation: weights uniform in `±1/√fan_in`, scores zero.
pub fn build_model(cfg: &ModelConfig, meta: &MetaGraphs, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    if meta.n_nodes != cfg.n_nodes {
        return Err(Error::config(format!(
            "meta graphs have {} nodes, config expects {}",
            meta.n_nodes, cfg.n_nodes
        )));
    }
    let sets = structure::build_candidate_sets(meta)?;
    build_with_sets(cfg, sets, seed)
}

/// As [`build_model`] with an explicit (possibly restricted) search space.
pub fn build_with_sets(cfg: &ModelConfig, sets: CandidateSets, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    if sets.n_nodes() != cfg.n_nodes {
        return Err(Error::config("candidate sets do not match the node count"));
    }
    let (weights, arch, layout) = allocate(cfg, &sets, seed);
    Ok(ModelState {
        config: cfg.clone(),
        weights,
        arch,
        structure: None,
        sets,
        layout,
    })
}

/// Which parameter groups are tracked for gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    pub arch: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        weights: false,
        arch: false,
    };
    pub const WEIGHTS: Trainable = Trainable {
        weights: true,
        arch: false,
    };
    pub const ARCH: Trainable = Trainable {
        weights: false,
        arch: true,
    };
    pub const ALL: Trainable = Trainable {
        weights: true,
        arch: true,
    };
}

pub struct Forward {
    /// Denormalised predictions `[B, horizon, N]`.
    pub predictions: Var,
    pub weight_vars: Vec<Var>,
    pub arch_vars: Vec<Var>,
}

impl ModelState {
    pub fn candidate_sets(&self) -> &CandidateSets {
        &self.sets
    }

    /// Current scores per block (shared entries repeat in per-layer mode).
    pub fn gss_params(&self) -> Vec<GssParams> {
        let mut out = Vec::new();
        for (l, layer) in self.layout.layers.iter().enumerate() {
            for (b, block) in layer.blocks.iter().enumerate() {
                out.push(GssParams {
                    layer: l,
                    block: b,
                    alpha_m1: self.arch.tensors[block.alpha[0]].clone(),
                    alpha_m2: self.arch.tensors[block.alpha[1]].clone(),
                });
            }
        }
        out
    }

    /// Argmax-finalise the current scores and store the result.
    pub fn finalize(&mut self) -> FinalStructure {
        let fs = structure::finalize_structure(&self.sets, &self.gss_params());
        self.structure = Some(fs.clone());
        fs
    }

    pub fn set_structure(&mut self, fs: FinalStructure) -> Result<()> {
        for (l, layer) in self.layout.layers.iter().enumerate() {
            for b in 0..layer.blocks.len() {
                if fs.get(l, b).is_none() {
                    return Err(Error::State(format!("structure lacks layer {l} block {b}")));
                }
            }
        }
        self.structure = Some(fs);
        Ok(())
    }

    /// Fresh weights from `seed`, keeping scores and structure.
    pub fn reinitialize_weights(&mut self, seed: u64) {
        let (weights, _, _) = allocate(&self.config, &self.sets, seed);
        self.weights = weights;
    }

    /// Forward pass on normalised inputs `[B, history, N, features]`.
    pub fn forward(&self, tape: &mut Tape, inputs: &Tensor, phase: Phase, trainable: Trainable) -> Result<Forward> {
        let cfg = &self.config;
        let s = inputs.shape();
        if s.len() != 4 || s[1] != cfg.history || s[2] != cfg.n_nodes || s[3] != cfg.input_features {
            return Err(Error::shape(format!(
                "input batch {s:?} does not match [B, {}, {}, {}]",
                cfg.history, cfg.n_nodes, cfg.input_features
            )));
        }
        let batch = s[0];
        let weight_vars: Vec<Var> = self
            .weights
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable.weights))
            .collect();
        let arch_vars: Vec<Var> = if phase == Phase::Search {
            self.arch
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable.arch))
                .collect()
        } else {
            Vec::new()
        };
        let fs = match phase {
            Phase::Final => Some(
                self.structure
                    .as_ref()
                    .ok_or_else(|| Error::State("final phase requires a finalised structure".into()))?,
            ),
            Phase::Search => None,
        };
        let wv = |i: usize| weight_vars[i];

        let x = tape.constant(inputs.clone());
        let mut h = layer::linear(tape, x, wv(self.layout.input[0]), wv(self.layout.input[1]))?;
        let lengths = cfg.layer_lengths();
        let mut skip_sum: Option<Var> = None;
        for (l, (ll, &d)) in self.layout.layers.iter().zip(&cfg.dilations).enumerate() {
            let spec = DilationSpec::new(d, lengths[l])?;
            let blocks = ll
                .blocks
                .iter()
                .enumerate()
                .map(|(b, bl)| {
                    let final_choice = fs.and_then(|fs| fs.get(l, b)).map(|s| (s.main_choice, s.sub_choice));
                    if fs.is_some() && final_choice.is_none() {
                        return Err(Error::State(format!("structure lacks layer {l} block {b}")));
                    }
                    Ok(BlockVars {
                        alpha: (phase == Phase::Search).then(|| (arch_vars[bl.alpha[0]], arch_vars[bl.alpha[1]])),
                        final_choice,
                        glus: bl
                            .glus
                            .iter()
                            .map(|g| GluVars {
                                w1: wv(g[0]),
                                b1: wv(g[1]),
                                w2: wv(g[2]),
                                b2: wv(g[3]),
                            })
                            .collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let vars = LayerVars {
                blocks,
                tcn: TcnVars {
                    theta1: wv(ll.tcn[0]),
                    b1: wv(ll.tcn[1]),
                    theta2: wv(ll.tcn[2]),
                    b2: wv(ll.tcn[3]),
                },
                residual_w: wv(ll.residual[0]),
                residual_b: wv(ll.residual[1]),
                skip_w: wv(ll.skip[0]),
                skip_b: wv(ll.skip[1]),
            };
            let (out, skip) = layer::layer_forward(tape, h, &vars, &self.sets, phase, &spec)?;
            h = out;
            skip_sum = Some(match skip_sum {
                Some(acc) => tape.add(acc, skip)?,
                None => skip,
            });
        }
        let xs = skip_sum.expect("at least one layer");

        let mut steps = Vec::with_capacity(cfg.horizon);
        for head in &self.layout.heads {
            let hidden = layer::linear(tape, xs, wv(head[0]), wv(head[1]))?;
            let hidden = tape.relu(hidden);
            let y = layer::linear(tape, hidden, wv(head[2]), wv(head[3]))?;
            steps.push(tape.reshape(y, &[batch, 1, cfg.n_nodes])?);
        }
        let normed = tape.concat(&steps, 1)?;
        let scaled = tape.scale(normed, cfg.target_std);
        let mean = tape.constant(Tensor::scalar(cfg.target_mean));
        let predictions = tape.add(scaled, mean)?;
        Ok(Forward {
            predictions,
            weight_vars,
            arch_vars,
        })
    }

    /// Tape-free prediction.
    pub fn predict(&self, inputs: &Tensor, phase: Phase) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, inputs, phase, Trainable::NONE)?;
        Ok(tape.value(f.predictions).clone())
    }

    /// All parameters (weights then scores) under their stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.weights
            .names
            .iter()
            .cloned()
            .zip(self.weights.tensors.iter().cloned())
            .chain(self.arch.names.iter().cloned().zip(self.arch.tensors.iter().cloned()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_tensors())
    }

    /// Load tensors saved by [`ModelState::save`] into a model of the same shape.
    pub fn load_tensors(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        let expected = self.weights.len() + self.arch.len();
        if entries.len() != expected {
            return Err(Error::Ingestion(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                entries.len()
            )));
        }
        for (name, t) in entries {
            let slot = if let Some(i) = self.weights.names.iter().position(|n| *n == name) {
                &mut self.weights.tensors[i]
            } else if let Some(i) = self.arch.names.iter().position(|n| *n == name) {
                &mut self.arch.tensors[i]
            } else {
                return Err(Error::Ingestion(format!("unknown checkpoint entry {name}")));
            };
            if slot.shape() != t.shape() {
                return Err(Error::Ingestion(format!(
                    "checkpoint entry {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Mean absolute error over all entries.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "loss: prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.reduce_mean(abs))
}

/// Paths written by [`save_model`].
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const STRUCTURE_FILE: &str = "structure.json";

#[derive(Serialize, Deserialize)]
struct ModelSnapshot {
    config: ModelConfig,
    checkpoint: String,
    structure: Option<String>,
    restricted_main: Vec<MainChoice>,
    restricted_sub: Vec<SubChoice>,
}

/// Checkpoint, config snapshot and structure file into `dir`.
pub fn save_model(model: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(fs_) = &model.structure {
        fs::write(dir.join(STRUCTURE_FILE), fs_.to_json()?)?;
    }
    let snap = ModelSnapshot {
        config: model.config.clone(),
        checkpoint: CHECKPOINT_FILE.into(),
        structure: model.structure.as_ref().map(|_| STRUCTURE_FILE.to_string()),
        restricted_main: model.sets.main_options().to_vec(),
        restricted_sub: model.sets.sub_options().to_vec(),
    };
    fs::write(dir.join(MODEL_CONFIG_FILE), serde_json::to_string_pretty(&snap)? + "\n")?;
    Ok(())
}

pub fn load_model(dir: &Path, meta: &MetaGraphs) -> Result<ModelState> {
    let path = dir.join(MODEL_CONFIG_FILE);
    if !path.exists() {
        return Err(Error::NotFound(path));
    }
    let snap: ModelSnapshot = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let sets = structure::build_candidate_sets(meta)?.restrict(&snap.restricted_main, &snap.restricted_sub)?;
    let mut model = build_with_sets(&snap.config, sets, 0)?;
    model.load_tensors(&dir.join(&snap.checkpoint))?;
    if let Some(s) = snap.structure {
        let fs_ = FinalStructure::from_json(&fs::read_to_string(dir.join(s))?)?;
        model.set_structure(fs_)?;
    }
    Ok(model)
}
