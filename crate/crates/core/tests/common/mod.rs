#![allow(dead_code)]

pub mod suite;

use std::collections::HashMap;

use autodstsg::metagraph::MetaGraphs;
use autodstsg::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[gap, 1]`, away from the kinks of relu/abs.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor], weights: &Tensor, grad: bool) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let mean = tape.reduce_mean(prod);
    let loss = tape.scale(mean, weights.numel() as f64);
    Ok((tape, loss, vars))
}

/// Largest relative error between the tape gradient of `sum(f(inputs) ⊙ R)`
/// and central differences, over every input coordinate (or `max_coords`
/// randomly chosen ones per input).
pub fn grad_check<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], max_coords: Option<usize>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.shape(out).to_vec()
    };
    let weights = rand_tensor(rng, &probe, -1.0, 1.0);
    let (tape, loss, vars) = scalar_loss(&f, inputs, &weights, true).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let (tape, loss, _) = scalar_loss(&f, xs, &weights, false).unwrap();
        tape.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("leaf gradient").clone();
        let n = inputs[k].numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn symmetric_binary(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                a.set(&[i, j], 1.0);
                a.set(&[j, i], 1.0);
            }
        }
    }
    a
}

pub fn random_meta(rng: &mut ChaCha8Rng, n: usize) -> MetaGraphs {
    let sg = symmetric_binary(rng, n, 0.4);
    let tg = symmetric_binary(rng, n, 0.4);
    MetaGraphs::new(sg, tg).unwrap()
}

/// Memoised textbook recursion for unconstrained DTW with absolute cost.
pub fn dtw_reference(x: &[f64], y: &[f64]) -> f64 {
    fn go(x: &[f64], y: &[f64], i: usize, j: usize, memo: &mut HashMap<(usize, usize), f64>) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let cost = (x[i] - y[j]).abs();
        let v = match (i, j) {
            (0, 0) => cost,
            (0, _) => cost + go(x, y, 0, j - 1, memo),
            (_, 0) => cost + go(x, y, i - 1, 0, memo),
            _ => {
                let a = go(x, y, i - 1, j, memo);
                let b = go(x, y, i, j - 1, memo);
                let c = go(x, y, i - 1, j - 1, memo);
                cost + a.min(b).min(c)
            }
        };
        memo.insert((i, j), v);
        v
    }
    go(x, y, x.len() - 1, y.len() - 1, &mut HashMap::new())
}

pub fn alphabet_series(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0..5) as f64).collect()
}
