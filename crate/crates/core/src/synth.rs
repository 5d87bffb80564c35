//! Planted-structure synthetic traffic.
//!
//! A latent state evolves as `z(t+1) = ρ·P·z(t) + s(t+1) + noise`, where `P`
//! is the row-normalised planted cross-time graph and `s` a per-cluster
//! seasonal signal. Observations add independent measurement noise and are
//! mapped to positive flow units.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagraph::{self, MetaGraphs};
use crate::pipeline::{Dataset, DatasetMeta};
use crate::structure::SubChoice;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_nodes: usize,
    pub steps: usize,
    /// Which meta graph drives the cross-time dynamics.
    pub planted_sub: SubChoice,
    pub clusters: usize,
    /// Edges added on top of a random spanning tree.
    pub extra_edges: usize,
    pub rho: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_period: usize,
    /// Innovation noise on the latent state.
    pub noise: f64,
    /// Measurement noise on the observed flow.
    pub observation_noise: f64,
    pub base_level: f64,
    pub flow_scale: f64,
    pub seed: u64,
}

impl PlantedConfig {
    pub fn new(n_nodes: usize, steps: usize, planted_sub: SubChoice, seed: u64) -> Self {
        Self {
            n_nodes,
            steps,
            planted_sub,
            clusters: 4,
            extra_edges: n_nodes / 2,
            rho: 0.95,
            seasonal_amplitude: 0.05,
            seasonal_period: 48,
            noise: 0.3,
            observation_noise: 1.0,
            base_level: 200.0,
            flow_scale: 30.0,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedData {
    pub dataset: Dataset,
    pub meta: MetaGraphs,
    pub ground_truth: SubChoice,
    pub clusters: Vec<usize>,
    /// Row-normalised cross-time propagation matrix.
    pub propagation: Tensor,
}

fn random_connected_graph(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut a = Tensor::zeros(&[n, n]);
    for i in 1..n {
        let j = order[rng.gen_range(0..i)];
        let k = order[i];
        a.set(&[j, k], 1.0);
        a.set(&[k, j], 1.0);
    }
    let max_edges = n * (n - 1) / 2;
    let mut added = 0;
    let mut attempts = 0;
    while added < extra && metagraph::count_nonzero(&a) / 2 < max_edges && attempts < 100 * (extra + 1) {
        attempts += 1;
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if i != j && a.at(&[i, j]) == 0.0 {
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
            added += 1;
        }
    }
    a
}

fn row_normalize(a: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0];
    let mut out = a.clone();
    for i in 0..n {
        let s: f64 = (0..n).map(|j| a.at(&[i, j])).sum();
        if s == 0.0 {
            return Err(Error::Generation(format!(
                "node {i} has no neighbours in the planted cross-time graph"
            )));
        }
        for j in 0..n {
            out.set(&[i, j], a.at(&[i, j]) / s);
        }
    }
    Ok(out)
}

pub fn synthesize_planted(cfg: &PlantedConfig) -> Result<PlantedData> {
    let n = cfg.n_nodes;
    if n < 2 || cfg.steps < 2 {
        return Err(Error::Generation("need at least two nodes and two steps".into()));
    }
    if cfg.clusters == 0 || cfg.clusters > n / 2 {
        return Err(Error::Generation(format!(
            "{} clusters cannot each hold two of {n} nodes",
            cfg.clusters
        )));
    }
    if !(cfg.rho > 0.0 && cfg.rho <= 1.0) {
        return Err(Error::Generation(format!("rho {} outside (0, 1]", cfg.rho)));
    }
    if cfg.noise < 0.0 || cfg.observation_noise < 0.0 || cfg.seasonal_period == 0 {
        return Err(Error::Generation("noise levels must be ≥ 0 and the period positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sg = random_connected_graph(n, cfg.extra_edges, &mut rng);

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut clusters = vec![0; n];
    for (rank, &node) in perm.iter().enumerate() {
        clusters[node] = rank % cfg.clusters;
    }
    let mut tg = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j && clusters[i] == clusters[j] {
                tg.set(&[i, j], 1.0);
            }
        }
    }
    let propagation = match cfg.planted_sub {
        SubChoice::Sg => row_normalize(&sg)?,
        SubChoice::Tg => row_normalize(&tg)?,
        SubChoice::Tc => Tensor::identity(n),
    };
    let phases: Vec<f64> = (0..cfg.clusters)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let seasonal = |t: usize, c: usize| {
        cfg.seasonal_amplitude
            * (std::f64::consts::TAU * t as f64 / cfg.seasonal_period as f64 + phases[c]).sin()
    };

    let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut flow = Vec::with_capacity(cfg.steps * n);
    for t in 0..cfg.steps {
        if t > 0 {
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let prop: f64 = (0..n).map(|j| propagation.at(&[i, j]) * z[j]).sum();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    cfg.rho * prop + seasonal(t, clusters[i]) + cfg.noise * eps
                })
                .collect();
            z = next;
        }
        for zi in &z {
            let eta: f64 = StandardNormal.sample(&mut rng);
            flow.push(cfg.base_level + cfg.flow_scale * (zi + cfg.observation_noise * eta));
        }
    }
    let meta = DatasetMeta {
        nodes: n,
        timesteps: cfg.steps,
        features: 1,
        granularity_minutes: 5,
        sha256: None,
    };
    let dataset = Dataset::new(meta, flow, sg.clone())?;
    Ok(PlantedData {
        dataset,
        meta: MetaGraphs::new(sg, tg)?,
        ground_truth: cfg.planted_sub,
        clusters,
        propagation,
    })
}
