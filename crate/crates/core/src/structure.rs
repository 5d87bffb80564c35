//! Graph structure search over 2N×2N synchronous adjacency matrices.
//!
//! A synchronous graph for kernel size 2 stacks two time steps: rows/cols
//! `0..N` are the earlier step and `N..2N` the later one. The main-diagonal
//! group picks the within-step graph of each step; the sub-diagonal group
//! picks the symmetric cross-step graph.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagraph::{check_meta_matrix, MetaGraphs};
use crate::tensor::tape::softmax_values;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaKind {
    #[serde(rename = "SG")]
    Sg,
    #[serde(rename = "TG")]
    Tg,
    #[serde(rename = "TC")]
    Tc,
}

/// Main-diagonal option `[earlier step, later step]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MainChoice {
    #[serde(rename = "TG,TG")]
    TgTg,
    #[serde(rename = "TG,SG")]
    TgSg,
    #[serde(rename = "SG,TG")]
    SgTg,
    #[serde(rename = "SG,SG")]
    SgSg,
}

impl MainChoice {
    pub const ALL: [MainChoice; 4] = [
        MainChoice::TgTg,
        MainChoice::TgSg,
        MainChoice::SgTg,
        MainChoice::SgSg,
    ];

    pub fn blocks(self) -> (MetaKind, MetaKind) {
        match self {
            MainChoice::TgTg => (MetaKind::Tg, MetaKind::Tg),
            MainChoice::TgSg => (MetaKind::Tg, MetaKind::Sg),
            MainChoice::SgTg => (MetaKind::Sg, MetaKind::Tg),
            MainChoice::SgSg => (MetaKind::Sg, MetaKind::Sg),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MainChoice::TgTg => "TG,TG",
            MainChoice::TgSg => "TG,SG",
            MainChoice::SgTg => "SG,TG",
            MainChoice::SgSg => "SG,SG",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubChoice {
    #[serde(rename = "TG")]
    Tg,
    #[serde(rename = "SG")]
    Sg,
    #[serde(rename = "TC")]
    Tc,
}

impl SubChoice {
    pub const ALL: [SubChoice; 3] = [SubChoice::Tg, SubChoice::Sg, SubChoice::Tc];

    pub fn kind(self) -> MetaKind {
        match self {
            SubChoice::Tg => MetaKind::Tg,
            SubChoice::Sg => MetaKind::Sg,
            SubChoice::Tc => MetaKind::Tc,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SubChoice::Tg => "TG",
            SubChoice::Sg => "SG",
            SubChoice::Tc => "TC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TG" => Ok(SubChoice::Tg),
            "SG" => Ok(SubChoice::Sg),
            "TC" => Ok(SubChoice::Tc),
            _ => Err(Error::config(format!("unknown sub-diagonal option `{s}`"))),
        }
    }
}

impl fmt::Display for SubChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Candidate matrices for one search space.
///
/// Order of the full space: main `[TG,TG], [TG,SG], [SG,TG], [SG,SG]`,
/// sub `TG, SG, TC`. A restricted space keeps a subset in that order.
#[derive(Clone, Debug)]
pub struct CandidateSets {
    n: usize,
    sg: Tensor,
    tg: Tensor,
    main_options: Vec<MainChoice>,
    sub_options: Vec<SubChoice>,
    m1: Vec<Tensor>,
    m2: Vec<Tensor>,
}

impl CandidateSets {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn m1(&self) -> &[Tensor] {
        &self.m1
    }

    pub fn m2(&self) -> &[Tensor] {
        &self.m2
    }

    pub fn main_options(&self) -> &[MainChoice] {
        &self.main_options
    }

    pub fn sub_options(&self) -> &[SubChoice] {
        &self.sub_options
    }

    fn meta(&self, kind: MetaKind) -> Tensor {
        match kind {
            MetaKind::Sg => self.sg.clone(),
            MetaKind::Tg => self.tg.clone(),
            MetaKind::Tc => Tensor::identity(self.n),
        }
    }

    pub fn main_matrix(&self, choice: MainChoice) -> Tensor {
        let (early, late) = choice.blocks();
        let mut out = Tensor::zeros(&[2 * self.n, 2 * self.n]);
        place_block(&mut out, &self.meta(early), 0, 0);
        place_block(&mut out, &self.meta(late), self.n, self.n);
        out
    }

    pub fn sub_matrix(&self, choice: SubChoice) -> Tensor {
        let m = self.meta(choice.kind());
        let mut out = Tensor::zeros(&[2 * self.n, 2 * self.n]);
        place_block(&mut out, &m, 0, self.n);
        place_block(&mut out, &m.transpose(), self.n, 0);
        out
    }

    /// Finalised A_ST for one block.
    pub fn final_matrix(&self, main: MainChoice, sub: SubChoice) -> Tensor {
        let a = self.main_matrix(main);
        let b = self.sub_matrix(sub);
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .expect("same shape")
    }

    /// Keep only the listed options (in canonical order).
    pub fn restrict(&self, main: &[MainChoice], sub: &[SubChoice]) -> Result<Self> {
        let main: Vec<MainChoice> = MainChoice::ALL.into_iter().filter(|c| main.contains(c)).collect();
        let sub: Vec<SubChoice> = SubChoice::ALL.into_iter().filter(|c| sub.contains(c)).collect();
        if main.is_empty() || sub.is_empty() {
            return Err(Error::config("restricted search space must keep one option per group"));
        }
        let mut out = self.clone();
        out.m1 = main.iter().map(|&c| self.main_matrix(c)).collect();
        out.m2 = sub.iter().map(|&c| self.sub_matrix(c)).collect();
        out.main_options = main;
        out.sub_options = sub;
        Ok(out)
    }
}

fn place_block(out: &mut Tensor, block: &Tensor, row: usize, col: usize) {
    let n = block.shape()[0];
    for i in 0..n {
        for j in 0..n {
            out.set(&[row + i, col + j], block.at(&[i, j]));
        }
    }
}

/// All 4 main-diagonal and 3 sub-diagonal candidates (kernel size 2).
pub fn build_candidate_sets(meta: &MetaGraphs) -> Result<CandidateSets> {
    let n = meta.n_nodes;
    check_meta_matrix("spatial graph", &meta.a_sg, n)?;
    check_meta_matrix("temporal graph", &meta.a_tg, n)?;
    let base = CandidateSets {
        n,
        sg: meta.a_sg.clone(),
        tg: meta.a_tg.clone(),
        main_options: vec![],
        sub_options: vec![],
        m1: vec![],
        m2: vec![],
    };
    base.restrict(&MainChoice::ALL, &SubChoice::ALL)
}

/// Learnable scores for one block (or one layer in shared mode).
#[derive(Clone, Debug, PartialEq)]
pub struct GssParams {
    pub layer: usize,
    pub block: usize,
    pub alpha_m1: Tensor,
    pub alpha_m2: Tensor,
}

impl GssParams {
    pub fn zeros(layer: usize, block: usize, sets: &CandidateSets) -> Self {
        Self {
            layer,
            block,
            alpha_m1: Tensor::zeros(&[sets.m1.len()]),
            alpha_m2: Tensor::zeros(&[sets.m2.len()]),
        }
    }
}

fn weighted_sum(tape: &mut Tape, weights: Var, mats: &[Tensor]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, m) in mats.iter().enumerate() {
        let w = tape.slice(weights, 0, i, 1)?;
        let c = tape.constant(m.clone());
        let term = tape.mul(w, c)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::contract("empty candidate set"))
}

/// Softmax-weighted mixture `Σ softmax(α₁)ᵢ m1ᵢ + Σ softmax(α₂)ⱼ m2ⱼ`,
/// differentiable in both score vectors.
pub fn mix_adjacency(tape: &mut Tape, sets: &CandidateSets, alpha_m1: Var, alpha_m2: Var) -> Result<Var> {
    if tape.shape(alpha_m1) != [sets.m1.len()] || tape.shape(alpha_m2) != [sets.m2.len()] {
        return Err(Error::shape(format!(
            "alpha shapes {:?}/{:?} do not match {} + {} candidates",
            tape.shape(alpha_m1),
            tape.shape(alpha_m2),
            sets.m1.len(),
            sets.m2.len()
        )));
    }
    let w1 = tape.softmax(alpha_m1)?;
    let w2 = tape.softmax(alpha_m2)?;
    let main = weighted_sum(tape, w1, &sets.m1)?;
    let sub = weighted_sum(tape, w2, &sets.m2)?;
    tape.add(main, sub)
}

/// Tape-free evaluation of [`mix_adjacency`].
pub fn mix_adjacency_values(sets: &CandidateSets, params: &GssParams) -> Result<Tensor> {
    let w1 = softmax_values(&params.alpha_m1)?;
    let w2 = softmax_values(&params.alpha_m2)?;
    let size = 2 * sets.n;
    let mut out = vec![0.0; size * size];
    for (w, m) in w1.data().iter().zip(&sets.m1).chain(w2.data().iter().zip(&sets.m2)) {
        for (o, x) in out.iter_mut().zip(m.data()) {
            *o += w * x;
        }
    }
    Tensor::new(vec![size, size], out)
}

/// `D⁻¹(A + I)` with `D` the row sums of `A + I`.
pub fn normalize_stsg(tape: &mut Tape, a: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("normalize expects a square matrix, got {shape:?}")));
    }
    if let Some(x) = tape.value(a).data().iter().find(|&&x| x < 0.0) {
        return Err(Error::contract(format!("adjacency has negative entry {x}")));
    }
    let eye = tape.constant(Tensor::identity(shape[0]));
    let looped = tape.add(a, eye)?;
    let degree = tape.sum_axis(looped, 1)?;
    tape.div(looped, degree)
}

/// Tape-free evaluation of [`normalize_stsg`].
pub fn normalize_stsg_values(a: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let out = normalize_stsg(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStructure {
    pub layer: usize,
    pub block: usize,
    pub main_choice: MainChoice,
    pub sub_choice: SubChoice,
    pub alpha_m1: Vec<f64>,
    pub alpha_m2: Vec<f64>,
}

/// Argmax-finalised structure for every block, serialised as a JSON array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FinalStructure {
    pub blocks: Vec<BlockStructure>,
}

impl FinalStructure {
    pub fn get(&self, layer: usize, block: usize) -> Option<&BlockStructure> {
        self.blocks
            .iter()
            .find(|b| b.layer == layer && b.block == block)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Highest-score option per group; ties resolve to the lowest index.
pub fn finalize_block(sets: &CandidateSets, params: &GssParams) -> BlockStructure {
    BlockStructure {
        layer: params.layer,
        block: params.block,
        main_choice: sets.main_options[argmax(params.alpha_m1.data())],
        sub_choice: sets.sub_options[argmax(params.alpha_m2.data())],
        alpha_m1: params.alpha_m1.data().to_vec(),
        alpha_m2: params.alpha_m2.data().to_vec(),
    }
}

pub fn finalize_structure(sets: &CandidateSets, params: &[GssParams]) -> FinalStructure {
    FinalStructure {
        blocks: params.iter().map(|p| finalize_block(sets, p)).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub sg: usize,
    pub tg: usize,
    pub tc: usize,
}

impl SlotCounts {
    fn add(&mut self, kind: MetaKind) {
        match kind {
            MetaKind::Sg => self.sg += 1,
            MetaKind::Tg => self.tg += 1,
            MetaKind::Tc => self.tc += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub blocks: usize,
    pub counts: SlotCounts,
}

/// Meta-graph selections across blocks. A main-diagonal choice contributes
/// two slots (one per diagonal block); a sub-diagonal choice contributes one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub blocks: usize,
    pub main_diagonal_slots: usize,
    pub sub_diagonal_slots: usize,
    pub total: SlotCounts,
    pub per_layer: Vec<LayerReport>,
    pub counting_convention: String,
}

impl StructureReport {
    /// `(label, value)` rows shaped like the usual "Average # of SGs / TGs"
    /// case-study table.
    pub fn table_rows(reports: &[StructureReport]) -> Vec<(String, f64)> {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&SlotCounts) -> usize| reports.iter().map(|r| f(&r.total) as f64).sum::<f64>() / n;
        vec![
            ("Average # of SGs".to_string(), avg(|c| c.sg)),
            ("Average # of TGs".to_string(), avg(|c| c.tg)),
            ("Average # of TCs".to_string(), avg(|c| c.tc)),
        ]
    }
}

pub fn report_structures(fs: &FinalStructure) -> StructureReport {
    let mut total = SlotCounts::default();
    let mut per_layer: Vec<LayerReport> = Vec::new();
    for b in &fs.blocks {
        let idx = match per_layer.iter().position(|l| l.layer == b.layer) {
            Some(i) => i,
            None => {
                per_layer.push(LayerReport {
                    layer: b.layer,
                    blocks: 0,
                    counts: SlotCounts::default(),
                });
                per_layer.len() - 1
            }
        };
        let (early, late) = b.main_choice.blocks();
        let sub = b.sub_choice.kind();
        let entry = &mut per_layer[idx];
        entry.blocks += 1;
        for k in [early, late, sub] {
            entry.counts.add(k);
            total.add(k);
        }
    }
    per_layer.sort_by_key(|l| l.layer);
    StructureReport {
        blocks: fs.blocks.len(),
        main_diagonal_slots: 2 * fs.blocks.len(),
        sub_diagonal_slots: fs.blocks.len(),
        total,
        per_layer,
        counting_convention: "main diagonal counted twice per block, sub diagonal once".into(),
    }
}
