//! Random-instance finite-difference checks, one entry per differentiable op.

use autodstsg::layer::{self, BlockVars, DilationSpec, GluVars, LayerVars, Phase, TcnVars};
use autodstsg::model::{build_model, ModelConfig, Trainable};
use autodstsg::structure::{self, build_candidate_sets, CandidateSets};
use autodstsg::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, rand_away_from_zero, rand_tensor, random_meta, FD_FLOOR, FD_STEP};

pub type Check = fn(&mut ChaCha8Rng) -> f64;

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

fn matmul_flat(rng: &mut ChaCha8Rng) -> f64 {
    let (b, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let a = rand_tensor(rng, &[b, m, k], -1.0, 1.0);
    let w = rand_tensor(rng, &[k, n], -1.0, 1.0);
    grad_check(rng, &[a, w], None, |t, v| t.matmul(v[0], v[1]))
}

fn matmul_shared_left(rng: &mut ChaCha8Rng) -> f64 {
    let (b, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
    let x = rand_tensor(rng, &[b, k, n], -1.0, 1.0);
    grad_check(rng, &[a, x], None, |t, v| t.matmul(v[0], v[1]))
}

fn matmul_paired(rng: &mut ChaCha8Rng) -> f64 {
    let (b, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let a = rand_tensor(rng, &[b, m, k], -1.0, 1.0);
    let x = rand_tensor(rng, &[b, k, n], -1.0, 1.0);
    grad_check(rng, &[a, x], None, |t, v| t.matmul(v[0], v[1]))
}

fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (a, b, c) = (dims(rng), dims(rng), dims(rng));
    let x = rand_tensor(rng, &[a, b, c], -1.0, 1.0);
    let y = match rng.gen_range(0..4) {
        0 => rand_tensor(rng, &[a, b, c], -1.0, 1.0),
        1 => rand_tensor(rng, &[c], -1.0, 1.0),
        2 => rand_tensor(rng, &[b, 1], -1.0, 1.0),
        _ => rand_tensor(rng, &[1], -1.0, 1.0),
    };
    (x, y)
}

fn add(rng: &mut ChaCha8Rng) -> f64 {
    let (x, y) = broadcast_pair(rng);
    grad_check(rng, &[x, y], None, |t, v| t.add(v[0], v[1]))
}

fn sub(rng: &mut ChaCha8Rng) -> f64 {
    let (x, y) = broadcast_pair(rng);
    grad_check(rng, &[y, x], None, |t, v| t.sub(v[0], v[1]))
}

fn mul(rng: &mut ChaCha8Rng) -> f64 {
    let (x, y) = broadcast_pair(rng);
    grad_check(rng, &[x, y], None, |t, v| t.mul(v[0], v[1]))
}

fn div(rng: &mut ChaCha8Rng) -> f64 {
    let (x, y) = broadcast_pair(rng);
    // Denominators in ±[0.5, 1.5].
    let y = y.map(|v| v.signum() * (0.5 + v.abs()));
    grad_check(rng, &[x, y], None, |t, v| t.div(v[0], v[1]))
}

fn unary_input(rng: &mut ChaCha8Rng) -> Tensor {
    let shape = [dims(rng), dims(rng)];
    rand_away_from_zero(rng, &shape, 0.05).map(|v| 2.0 * v)
}

fn sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let x = unary_input(rng);
    grad_check(rng, &[x], None, |t, v| Ok(t.sigmoid(v[0])))
}

fn tanh(rng: &mut ChaCha8Rng) -> f64 {
    let x = unary_input(rng);
    grad_check(rng, &[x], None, |t, v| Ok(t.tanh(v[0])))
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let x = unary_input(rng);
    grad_check(rng, &[x], None, |t, v| Ok(t.relu(v[0])))
}

fn abs(rng: &mut ChaCha8Rng) -> f64 {
    let x = unary_input(rng);
    grad_check(rng, &[x], None, |t, v| Ok(t.abs(v[0])))
}

fn scale(rng: &mut ChaCha8Rng) -> f64 {
    let x = unary_input(rng);
    let f = rng.gen_range(-3.0..3.0);
    grad_check(rng, &[x], None, move |t, v| Ok(t.scale(v[0], f)))
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..8);
    let x = rand_tensor(rng, &[n], -3.0, 3.0);
    grad_check(rng, &[x], None, |t, v| t.softmax(v[0]))
}

fn concat(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (dims(rng), dims(rng));
    let axis = rng.gen_range(0..2);
    let mut shape2 = [a, b];
    shape2[axis] = dims(rng);
    let x = rand_tensor(rng, &[a, b], -1.0, 1.0);
    let y = rand_tensor(rng, &shape2, -1.0, 1.0);
    grad_check(rng, &[x, y], None, move |t, v| t.concat(&[v[0], v[1], v[0]], axis))
}

fn slice(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b, c) = (dims(rng) + 1, dims(rng) + 1, dims(rng));
    let x = rand_tensor(rng, &[a, b, c], -1.0, 1.0);
    let axis = rng.gen_range(0..3);
    let len_axis = [a, b, c][axis];
    let start = rng.gen_range(0..len_axis);
    let len = rng.gen_range(1..=len_axis - start);
    grad_check(rng, &[x], None, move |t, v| t.slice(v[0], axis, start, len))
}

fn reshape(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (dims(rng), dims(rng));
    let x = rand_tensor(rng, &[a, b, 2], -1.0, 1.0);
    grad_check(rng, &[x], None, move |t, v| {
        let r = t.reshape(v[0], &[2 * b, a])?;
        let w = t.constant(Tensor::full(&[2 * b, a], 0.5));
        t.mul(r, w)
    })
}

fn max_over_list(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng), dims(rng)];
    let k = rng.gen_range(1..4);
    // Distinct values so no two inputs tie within the step.
    let mut inputs = Vec::new();
    for _ in 0..k {
        inputs.push(rand_tensor(rng, &shape, -1.0, 1.0));
    }
    let n = inputs[0].numel();
    for i in 0..n {
        for a in 0..k {
            for b in 0..a {
                if (inputs[a].data()[i] - inputs[b].data()[i]).abs() < 1e-3 {
                    inputs[a].data_mut()[i] += 0.01;
                }
            }
        }
    }
    grad_check(rng, &inputs, None, |t, v| t.reduce_max_over_list(v))
}

fn mean(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng), dims(rng)];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    grad_check(rng, &[x], None, |t, v| Ok(t.reduce_mean(v[0])))
}

fn abs_sum(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng), dims(rng)];
    let x = rand_away_from_zero(rng, &shape, 0.05);
    grad_check(rng, &[x], None, |t, v| Ok(t.abs_sum(v[0])))
}

fn sum_axis(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng), dims(rng), dims(rng)];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let axis = rng.gen_range(0..3);
    grad_check(rng, &[x], None, move |t, v| t.sum_axis(v[0], axis))
}

fn small_sets(rng: &mut ChaCha8Rng) -> CandidateSets {
    let n = rng.gen_range(2..5);
    build_candidate_sets(&random_meta(rng, n)).unwrap()
}

fn mix(rng: &mut ChaCha8Rng) -> f64 {
    let sets = small_sets(rng);
    let a1 = rand_tensor(rng, &[4], -2.0, 2.0);
    let a2 = rand_tensor(rng, &[3], -2.0, 2.0);
    grad_check(rng, &[a1, a2], None, move |t, v| structure::mix_adjacency(t, &sets, v[0], v[1]))
}

fn normalize(rng: &mut ChaCha8Rng) -> f64 {
    let n = 2 * rng.gen_range(2..5);
    let a = rand_tensor(rng, &[n, n], 0.0, 1.0);
    grad_check(rng, &[a], None, |t, v| structure::normalize_stsg(t, v[0]))
}

fn mix_then_normalize(rng: &mut ChaCha8Rng) -> f64 {
    let sets = small_sets(rng);
    let a1 = rand_tensor(rng, &[4], -2.0, 2.0);
    let a2 = rand_tensor(rng, &[3], -2.0, 2.0);
    grad_check(rng, &[a1, a2], None, move |t, v| {
        let m = structure::mix_adjacency(t, &sets, v[0], v[1])?;
        structure::normalize_stsg(t, m)
    })
}

fn glu(rng: &mut ChaCha8Rng) -> f64 {
    let (b, r, d, e) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let inputs = [
        rand_tensor(rng, &[b, r, d], -1.0, 1.0),
        rand_tensor(rng, &[d, e], -1.0, 1.0),
        rand_tensor(rng, &[e], -1.0, 1.0),
        rand_tensor(rng, &[d, e], -1.0, 1.0),
        rand_tensor(rng, &[e], -1.0, 1.0),
    ];
    grad_check(rng, &inputs, None, |t, v| {
        let g = GluVars {
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        };
        layer::glu_apply(t, v[0], &g)
    })
}

fn gated_tcn(rng: &mut ChaCha8Rng) -> f64 {
    let (b, n, d, e) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let len = rng.gen_range(2..7);
    let dil = rng.gen_range(1..len);
    let inputs = [
        rand_tensor(rng, &[b, len, n, d], -1.0, 1.0),
        rand_tensor(rng, &[2, d, e], -1.0, 1.0),
        rand_tensor(rng, &[e], -1.0, 1.0),
        rand_tensor(rng, &[2, d, e], -1.0, 1.0),
        rand_tensor(rng, &[e], -1.0, 1.0),
    ];
    let spec = DilationSpec::new(dil, len).unwrap();
    grad_check(rng, &inputs, None, move |t, v| {
        let tcn = TcnVars {
            theta1: v[1],
            b1: v[2],
            theta2: v[3],
            b2: v[4],
        };
        layer::gated_tcn_forward(t, v[0], &tcn, &spec)
    })
}

fn mixed_hop(rng: &mut ChaCha8Rng) -> f64 {
    let sets = small_sets(rng);
    let n2 = 2 * sets.n_nodes();
    let (b, d) = (dims(rng), dims(rng));
    let hops = rng.gen_range(1..4);
    let mut inputs = vec![
        rand_tensor(rng, &[b, n2, d], -1.0, 1.0),
        rand_tensor(rng, &[4], -1.0, 1.0),
        rand_tensor(rng, &[3], -1.0, 1.0),
    ];
    for _ in 0..hops {
        inputs.push(rand_tensor(rng, &[d, d], -1.0, 1.0));
        inputs.push(rand_tensor(rng, &[d], -1.0, 1.0));
        inputs.push(rand_tensor(rng, &[d, d], -1.0, 1.0));
        inputs.push(rand_tensor(rng, &[d], -1.0, 1.0));
    }
    grad_check(rng, &inputs, None, move |t, v| {
        let glus: Vec<GluVars> = v[3..]
            .chunks(4)
            .map(|c| GluVars {
                w1: c[0],
                b1: c[1],
                w2: c[2],
                b2: c[3],
            })
            .collect();
        let block = BlockVars {
            alpha: Some((v[1], v[2])),
            final_choice: None,
            glus,
        };
        layer::block_forward(t, v[0], &block, &sets, Phase::Search)
    })
}

fn layer_full(rng: &mut ChaCha8Rng) -> f64 {
    let sets = small_sets(rng);
    let n = sets.n_nodes();
    let (b, d, ds) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let len = rng.gen_range(2..5);
    let dil = rng.gen_range(1..len);
    let spec = DilationSpec::new(dil, len).unwrap();
    let blocks = spec.output_len();
    let mut inputs = vec![rand_tensor(rng, &[b, len, n, d], -1.0, 1.0)];
    let shapes: Vec<Vec<usize>> = vec![
        vec![2, d, d],
        vec![d],
        vec![2, d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, ds],
        vec![ds],
    ];
    for s in &shapes {
        inputs.push(rand_tensor(rng, s, -1.0, 1.0));
    }
    for _ in 0..blocks {
        inputs.push(rand_tensor(rng, &[4], -1.0, 1.0));
        inputs.push(rand_tensor(rng, &[3], -1.0, 1.0));
        for s in [vec![d, d], vec![d], vec![d, d], vec![d]] {
            inputs.push(rand_tensor(rng, &s, -1.0, 1.0));
        }
    }
    grad_check(rng, &inputs, None, move |t, v| {
        let blocks = v[9..]
            .chunks(6)
            .map(|c| BlockVars {
                alpha: Some((c[0], c[1])),
                final_choice: None,
                glus: vec![GluVars {
                    w1: c[2],
                    b1: c[3],
                    w2: c[4],
                    b2: c[5],
                }],
            })
            .collect();
        let vars = LayerVars {
            blocks,
            tcn: TcnVars {
                theta1: v[1],
                b1: v[2],
                theta2: v[3],
                b2: v[4],
            },
            residual_w: v[5],
            residual_b: v[6],
            skip_w: v[7],
            skip_b: v[8],
        };
        let (x, skip) = layer::layer_forward(t, v[0], &vars, &sets, Phase::Search, &spec)?;
        let xs = t.reduce_mean(x);
        let ss = t.reduce_mean(skip);
        t.add(xs, ss)
    })
}

/// Whole-network check on a random subset of parameter coordinates.
fn model(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..4);
    let meta = random_meta(rng, n);
    let mut cfg = ModelConfig::new(n, 1);
    cfg.hidden_dim = 2;
    cfg.skip_dim = Some(3);
    cfg.head_dim = Some(2);
    cfg.target_mean = rng.gen_range(-1.0..1.0);
    cfg.target_std = rng.gen_range(0.5..2.0);
    let mut m = build_model(&cfg, &meta, rng.gen()).unwrap();
    for t in m.arch.tensors.iter_mut() {
        *t = rand_tensor(rng, t.shape(), -1.0, 1.0);
    }
    let x = rand_tensor(rng, &[2, 12, n, 1], -1.0, 1.0);
    let weights = rand_tensor(rng, &[2, 12, n], -1.0, 1.0);

    let loss_of = |m: &autodstsg::model::ModelState, trainable: Trainable| {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &x, Phase::Search, trainable).unwrap();
        let w = tape.constant(weights.clone());
        let p = tape.mul(f.predictions, w).unwrap();
        let l = tape.reduce_mean(p);
        let l = tape.scale(l, weights.numel() as f64);
        (tape, l, f)
    };
    let (tape, loss, f) = loss_of(&m, Trainable::ALL);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let groups = [(false, f.weight_vars.clone()), (true, f.arch_vars.clone())];
    for (is_arch, vars) in groups {
        for _ in 0..30 {
            let k = rng.gen_range(0..vars.len());
            let g = grads.get(vars[k]).unwrap();
            let i = rng.gen_range(0..g.numel());
            let analytic = g.data()[i];
            let eval = |delta: f64| {
                let mut mm = m.clone();
                let set = if is_arch { &mut mm.arch } else { &mut mm.weights };
                set.tensors[k].data_mut()[i] += delta;
                let (t, l, _) = loss_of(&mm, Trainable::NONE);
                t.value(l).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul_flat", matmul_flat as Check),
        ("matmul_shared_left", matmul_shared_left),
        ("matmul_paired", matmul_paired),
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("div", div),
        ("sigmoid", sigmoid),
        ("tanh", tanh),
        ("relu", relu),
        ("abs", abs),
        ("scale", scale),
        ("softmax", softmax),
        ("concat", concat),
        ("slice", slice),
        ("reshape", reshape),
        ("max_over_list", max_over_list),
        ("mean", mean),
        ("abs_sum", abs_sum),
        ("sum_axis", sum_axis),
        ("mix_adjacency", mix),
        ("normalize_stsg", normalize),
        ("mix_then_normalize", mix_then_normalize),
        ("glu", glu),
        ("gated_tcn", gated_tcn),
        ("mixed_hop_conv", mixed_hop),
        ("layer_forward", layer_full),
        ("model_forward", model),
    ]
}

/// Worst error over `instances` seeded draws of `check`.
pub fn run(check: Check, instances: usize, seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    (0..instances).map(|_| check(&mut rng)).fold(0.0, f64::max)
}

pub fn by_name(name: &str) -> Check {
    checks()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| c)
        .expect("known check")
}
