//! One dilated layer: parallel synchronous-graph blocks plus a gated
//! temporal convolution, summed, with residual and skip outputs.
//!
//! Sequence tensors are laid out `[batch, time, node, feature]`.

use crate::error::{Error, Result};
use crate::structure::{self, CandidateSets, MainChoice, SubChoice};
use crate::tensor::{Tape, Var};

pub const KERNEL_SIZE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DilationSpec {
    pub dilation: usize,
    pub input_len: usize,
}

impl DilationSpec {
    pub fn new(dilation: usize, input_len: usize) -> Result<Self> {
        if dilation == 0 || dilation * (KERNEL_SIZE - 1) >= input_len {
            return Err(Error::shape(format!(
                "dilation {dilation} with kernel {KERNEL_SIZE} does not fit a length-{input_len} sequence"
            )));
        }
        Ok(Self {
            dilation,
            input_len,
        })
    }

    pub fn output_len(&self) -> usize {
        self.input_len - self.dilation * (KERNEL_SIZE - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Adjacency is the softmax mixture over candidates.
    Search,
    /// Adjacency is the argmax-finalised structure.
    Final,
}

#[derive(Clone, Copy, Debug)]
pub struct GluVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameters of one block as live tape handles.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub alpha: Option<(Var, Var)>,
    pub final_choice: Option<(MainChoice, SubChoice)>,
    pub glus: Vec<GluVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct TcnVars {
    /// `[2, D, D']`, index 0 applies to `t - d`, index 1 to `t`.
    pub theta1: Var,
    pub b1: Var,
    pub theta2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub blocks: Vec<BlockVars>,
    pub tcn: TcnVars,
    pub residual_w: Var,
    pub residual_b: Var,
    pub skip_w: Var,
    pub skip_b: Var,
}

fn seq_dims(tape: &Tape, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [b, t, n, d] => Ok((b, t, n, d)),
        ref s => Err(Error::shape(format!("expected [batch, time, node, feature], got {s:?}"))),
    }
}

/// `[x(t-d); x(t)]` stacked on the node axis: `[batch, 2N, D]`.
pub fn gather_dilated_window(tape: &mut Tape, x_seq: Var, t: usize, spec: &DilationSpec) -> Result<Var> {
    let (b, len, n, d) = seq_dims(tape, x_seq)?;
    if t < spec.dilation || t >= len {
        return Err(Error::Index(format!(
            "window position {t} outside [{}, {len})",
            spec.dilation
        )));
    }
    let early = tape.slice(x_seq, 1, t - spec.dilation, 1)?;
    let late = tape.slice(x_seq, 1, t, 1)?;
    let stacked = tape.concat(&[early, late], 2)?;
    tape.reshape(stacked, &[b, 2 * n, d])
}

/// Later half of the node axis (second-to-last axis).
pub fn crop_last_step(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape(format!("crop expects at least 2 axes, got {shape:?}")));
    }
    let axis = shape.len() - 2;
    let rows = shape[axis];
    if !rows.is_multiple_of(2) {
        return Err(Error::shape(format!("crop needs an even row count, got {rows}")));
    }
    tape.slice(x, axis, rows / 2, rows / 2)
}

/// `x·W + b` on the last axis.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// `(x·W1 + b1) ⊙ σ(x·W2 + b2)`
pub fn glu_apply(tape: &mut Tape, x: Var, glu: &GluVars) -> Result<Var> {
    let value = linear(tape, x, glu.w1, glu.b1)?;
    let gate_in = linear(tape, x, glu.w2, glu.b2)?;
    let gate = tape.sigmoid(gate_in);
    tape.mul(value, gate)
}

/// Normalised block adjacency for the requested phase.
pub fn block_adjacency(tape: &mut Tape, block: &BlockVars, sets: &CandidateSets, phase: Phase) -> Result<Var> {
    match phase {
        Phase::Search => {
            let (a1, a2) = block
                .alpha
                .ok_or_else(|| Error::State("search phase requires structure scores".into()))?;
            let mixed = structure::mix_adjacency(tape, sets, a1, a2)?;
            structure::normalize_stsg(tape, mixed)
        }
        Phase::Final => {
            let (main, sub) = block
                .final_choice
                .ok_or_else(|| Error::State("final phase requires a finalised structure".into()))?;
            let a = structure::normalize_stsg_values(&sets.final_matrix(main, sub))?;
            Ok(tape.constant(a))
        }
    }
}

/// Hops `i = 1..H`: `GLUᵢ(crop(Aⁱ·X))`, aggregated by elementwise max.
pub fn mixed_hop_conv(tape: &mut Tape, stacked: Var, adjacency: Var, glus: &[GluVars]) -> Result<Var> {
    if glus.is_empty() {
        return Err(Error::config("mixed-hop convolution needs at least one hop"));
    }
    let mut propagated = stacked;
    let mut hops = Vec::with_capacity(glus.len());
    for glu in glus {
        propagated = tape.matmul(adjacency, propagated)?;
        let cropped = crop_last_step(tape, propagated)?;
        hops.push(glu_apply(tape, cropped, glu)?);
    }
    tape.reduce_max_over_list(&hops)
}

/// Block convolution with adjacency resolved from `phase`.
pub fn block_forward(
    tape: &mut Tape,
    stacked: Var,
    block: &BlockVars,
    sets: &CandidateSets,
    phase: Phase,
) -> Result<Var> {
    let a = block_adjacency(tape, block, sets, phase)?;
    mixed_hop_conv(tape, stacked, a, &block.glus)
}

/// Output position `τ` is block `τ` applied to the window ending at `τ + d`.
pub fn auto_dstsg_module_forward(
    tape: &mut Tape,
    x_seq: Var,
    blocks: &[BlockVars],
    sets: &CandidateSets,
    phase: Phase,
    spec: &DilationSpec,
) -> Result<Var> {
    let out_len = spec.output_len();
    if blocks.len() != out_len {
        return Err(Error::config(format!(
            "layer with input length {} and dilation {} needs {out_len} blocks, got {}",
            spec.input_len,
            spec.dilation,
            blocks.len()
        )));
    }
    let mut outputs = Vec::with_capacity(out_len);
    for (tau, block) in blocks.iter().enumerate() {
        let stacked = gather_dilated_window(tape, x_seq, tau + spec.dilation, spec)?;
        let h = block_forward(tape, stacked, block, sets, phase)?;
        let s = tape.shape(h).to_vec();
        outputs.push(tape.reshape(h, &[s[0], 1, s[1], s[2]])?);
    }
    tape.concat(&outputs, 1)
}

/// `tanh(Θ₁★x + b₁) ⊙ σ(Θ₂★x + b₂)` with a causal kernel-2 dilated filter
/// shared by all nodes.
pub fn gated_tcn_forward(tape: &mut Tape, x_seq: Var, tcn: &TcnVars, spec: &DilationSpec) -> Result<Var> {
    let (_, len, _, d) = seq_dims(tape, x_seq)?;
    if len != spec.input_len || spec.dilation * (KERNEL_SIZE - 1) >= len {
        return Err(Error::shape(format!(
            "temporal window of dilation {} does not fit length {len}",
            spec.dilation
        )));
    }
    let out_len = spec.output_len();
    let past = tape.slice(x_seq, 1, 0, out_len)?;
    let now = tape.slice(x_seq, 1, spec.dilation, out_len)?;
    let mut conv = |theta: Var, bias: Var| -> Result<Var> {
        let ts = tape.shape(theta).to_vec();
        if ts.len() != 3 || ts[0] != KERNEL_SIZE || ts[1] != d {
            return Err(Error::shape(format!(
                "temporal filter must be [{KERNEL_SIZE}, {d}, D'], got {ts:?}"
            )));
        }
        let w_past = tape.slice(theta, 0, 0, 1)?;
        let w_past = tape.reshape(w_past, &ts[1..])?;
        let w_now = tape.slice(theta, 0, 1, 1)?;
        let w_now = tape.reshape(w_now, &ts[1..])?;
        let a = tape.matmul(past, w_past)?;
        let b = tape.matmul(now, w_now)?;
        let s = tape.add(a, b)?;
        tape.add(s, bias)
    };
    let filt = conv(tcn.theta1, tcn.b1)?;
    let gate = conv(tcn.theta2, tcn.b2)?;
    let filt = tape.tanh(filt);
    let gate = tape.sigmoid(gate);
    tape.mul(filt, gate)
}

/// Returns `(x_out, skip)` with `x_out: [B, T-d, N, D]` and `skip: [B, N, D_skip]`.
pub fn layer_forward(
    tape: &mut Tape,
    x_in: Var,
    layer: &LayerVars,
    sets: &CandidateSets,
    phase: Phase,
    spec: &DilationSpec,
) -> Result<(Var, Var)> {
    let (b, _, n, _) = seq_dims(tape, x_in)?;
    let graph = auto_dstsg_module_forward(tape, x_in, &layer.blocks, sets, phase, spec)?;
    let temporal = gated_tcn_forward(tape, x_in, &layer.tcn, spec)?;
    let agg = tape.add(graph, temporal)?;

    let out_len = spec.output_len();
    let kept = tape.slice(x_in, 1, spec.dilation, out_len)?;
    let mapped = linear(tape, agg, layer.residual_w, layer.residual_b)?;
    let x_out = tape.add(kept, mapped)?;

    let d = tape.shape(agg)[3];
    let last = tape.slice(agg, 1, out_len - 1, 1)?;
    let last = tape.reshape(last, &[b, n, d])?;
    let skip = linear(tape, last, layer.skip_w, layer.skip_b)?;
    Ok((x_out, skip))
}

/// Per-layer sequence lengths for a dilation schedule: `[T, T-d₁, ...]`.
pub fn layer_lengths(history: usize, dilations: &[usize]) -> Result<Vec<usize>> {
    let mut lens = vec![history];
    for &d in dilations {
        let spec = DilationSpec::new(d, *lens.last().unwrap())?;
        lens.push(spec.output_len());
    }
    Ok(lens)
}
