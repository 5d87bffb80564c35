//! Meta graphs: the spatial graph from road topology and the temporal graph
//! from pairwise DTW similarity of node series.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub const EDGES_FILE: &str = "edges.csv";
pub const TEMPORAL_EDGES_FILE: &str = "temporal_edges.csv";
pub const TEMPORAL_SIDECAR_FILE: &str = "temporal_graph.json";

/// Spatial and temporal N×N binary adjacency matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGraphs {
    pub n_nodes: usize,
    pub a_sg: Tensor,
    pub a_tg: Tensor,
    pub epsilon: Option<f64>,
    pub sparsity_target: Option<f64>,
}

impl MetaGraphs {
    pub fn new(a_sg: Tensor, a_tg: Tensor) -> Result<Self> {
        let n = a_sg.shape()[0];
        check_meta_matrix("spatial graph", &a_sg, n)?;
        check_meta_matrix("temporal graph", &a_tg, n)?;
        Ok(Self {
            n_nodes: n,
            a_sg,
            a_tg,
            epsilon: None,
            sparsity_target: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_meta_matrix("spatial graph", &self.a_sg, self.n_nodes)?;
        check_meta_matrix("temporal graph", &self.a_tg, self.n_nodes)
    }

    /// Relabel nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = |a: &Tensor| {
            let n = self.n_nodes;
            let mut out = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    out.set(&[i, j], a.at(&[perm[i], perm[j]]));
                }
            }
            out
        };
        Self {
            a_sg: p(&self.a_sg),
            a_tg: p(&self.a_tg),
            ..self.clone()
        }
    }
}

/// Symmetric, binary, zero diagonal, N×N.
pub fn check_meta_matrix(what: &str, a: &Tensor, n: usize) -> Result<()> {
    if a.shape() != [n, n] {
        return Err(Error::contract(format!(
            "{what} has shape {:?}, expected [{n}, {n}]",
            a.shape()
        )));
    }
    for i in 0..n {
        if a.at(&[i, i]) != 0.0 {
            return Err(Error::contract(format!("{what} has a self-loop at node {i}")));
        }
        for j in 0..n {
            let v = a.at(&[i, j]);
            if v != 0.0 && v != 1.0 {
                return Err(Error::contract(format!("{what} entry ({i},{j}) = {v} is not binary")));
            }
            if v != a.at(&[j, i]) {
                return Err(Error::contract(format!("{what} is asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

pub fn count_nonzero(a: &Tensor) -> usize {
    a.data().iter().filter(|&&x| x != 0.0).count()
}

/// Symmetric adjacency from undirected edges; self-loops are dropped.
pub fn load_spatial_graph(edges: &[(usize, usize)], n_nodes: usize) -> Result<Tensor> {
    if n_nodes == 0 {
        return Err(Error::contract("graph needs at least one node"));
    }
    let mut a = Tensor::zeros(&[n_nodes, n_nodes]);
    for (line, &(i, j)) in edges.iter().enumerate() {
        if i >= n_nodes || j >= n_nodes {
            return Err(Error::Ingestion(format!(
                "edge {line}: ({i},{j}) references a node outside [0, {n_nodes})"
            )));
        }
        if i != j {
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
        }
    }
    Ok(a)
}

/// Parse `from,to` CSV text. Errors carry 1-based file line numbers.
pub fn parse_edges_csv(text: &str, n_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "from,to" => {}
        Some((_, header)) => {
            return Err(Error::Ingestion(format!(
                "line 1: expected header `from,to`, found `{header}`"
            )))
        }
        None => return Err(Error::Ingestion("edge file is empty".into())),
    }
    let mut edges = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let parse = |f: Option<&str>| -> Result<usize> {
            f.and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| {
                Error::Ingestion(format!("line {line_no}: cannot parse `{line}` as `from,to`"))
            })
        };
        let (i, j) = (parse(fields.next())?, parse(fields.next())?);
        if i >= n_nodes || j >= n_nodes {
            return Err(Error::Ingestion(format!(
                "line {line_no}: node id out of range [0, {n_nodes}) in `{line}`"
            )));
        }
        edges.push((i, j));
    }
    Ok(edges)
}

pub fn read_edges_csv(path: &Path, n_nodes: usize) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    load_spatial_graph(&parse_edges_csv(&text, n_nodes)?, n_nodes)
}

/// One `i<j` line per undirected edge.
pub fn edges_csv(a: &Tensor) -> String {
    let n = a.shape()[0];
    let mut out = String::from("from,to\n");
    for i in 0..n {
        for j in i + 1..n {
            if a.at(&[i, j]) != 0.0 {
                out.push_str(&format!("{i},{j}\n"));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtwConfig {
    /// Sakoe–Chiba half-width; `None` means unconstrained.
    pub band_radius: Option<usize>,
    /// Use only the first `cap` points of each series.
    pub series_length_cap: Option<usize>,
}

/// DTW with absolute-difference cost and the symmetric step pattern.
pub fn dtw_distance(x: &[f64], y: &[f64], cfg: &DtwConfig) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::contract("dtw of an empty series"));
    }
    let (m, n) = (x.len(), y.len());
    let band = cfg.band_radius.unwrap_or(usize::MAX);
    if m.abs_diff(n) > band {
        return Err(Error::contract(format!(
            "band radius {band} cannot connect corners of a {m}×{n} grid"
        )));
    }
    let inf = f64::INFINITY;
    let mut prev = vec![inf; n];
    let mut cur = vec![inf; n];
    for (i, &xi) in x.iter().enumerate() {
        let lo = i.saturating_sub(band);
        let hi = i.saturating_add(band).min(n - 1);
        cur.iter_mut().for_each(|c| *c = inf);
        for j in lo..=hi {
            let cost = (xi - y[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { inf };
                let left = if j > 0 { cur[j - 1] } else { inf };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { inf };
                up.min(left).min(diag)
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n - 1])
}

/// Thresholded DTW similarity graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub a_tg: Tensor,
    /// Largest pairwise distance that was admitted as an edge (0 when empty).
    pub epsilon: f64,
    pub sparsity_target: f64,
    pub edge_count: usize,
}

/// Pairwise DTW distances for `i<j`, in row-major pair order.
pub fn pairwise_dtw(series: &[Vec<f64>], cfg: &DtwConfig) -> Result<Vec<(usize, usize, f64)>> {
    let n = series.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let cap = cfg.series_length_cap.unwrap_or(usize::MAX);
    let trim = |s: &[f64]| -> Vec<f64> { s[..s.len().min(cap)].to_vec() };
    let trimmed: Vec<Vec<f64>> = series.iter().map(|s| trim(s)).collect();
    let dists = parallel::map_range(pairs.len(), |p| {
        let (i, j) = pairs[p];
        dtw_distance(&trimmed[i], &trimmed[j], cfg)
    });
    pairs
        .into_iter()
        .zip(dists)
        .map(|((i, j), d)| d.map(|d| (i, j, d)))
        .collect()
}

/// Keep the `round(target · pairs)` closest pairs; ties go to the smaller
/// `(i, j)` pair.
pub fn temporal_graph_from_distances(
    n: usize,
    distances: &[(usize, usize, f64)],
    sparsity_target: f64,
) -> Result<TemporalGraph> {
    if !(0.0..1.0).contains(&sparsity_target) {
        return Err(Error::config(format!(
            "sparsity target {sparsity_target} outside [0, 1)"
        )));
    }
    let total = n * (n - 1) / 2;
    let keep = (sparsity_target * total as f64).round() as usize;
    let mut a = Tensor::zeros(&[n, n]);
    if keep == 0 {
        return Ok(TemporalGraph {
            a_tg: a,
            epsilon: 0.0,
            sparsity_target,
            edge_count: 0,
        });
    }
    if distances.iter().all(|&(_, _, d)| d == 0.0) {
        return Err(Error::DegenerateData(
            "all pairwise DTW distances are zero; use a smaller sparsity target".into(),
        ));
    }
    let mut order: Vec<&(usize, usize, f64)> = distances.iter().collect();
    order.sort_by(|x, y| x.2.total_cmp(&y.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut epsilon = 0.0;
    for &&(i, j, d) in order.iter().take(keep) {
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
        epsilon = d;
    }
    Ok(TemporalGraph {
        a_tg: a,
        epsilon,
        sparsity_target,
        edge_count: keep,
    })
}

pub fn build_temporal_graph(
    series: &[Vec<f64>],
    sparsity_target: f64,
    cfg: &DtwConfig,
) -> Result<TemporalGraph> {
    if series.len() < 2 {
        return Err(Error::contract("temporal graph needs at least two series"));
    }
    let len = series[0].len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::contract("temporal graph series must share one length"));
    }
    let distances = pairwise_dtw(series, cfg)?;
    temporal_graph_from_distances(series.len(), &distances, sparsity_target)
}

/// Hex SHA-256 over the little-endian bytes of every series.
pub fn series_content_hash(series: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for s in series {
        for x in s {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSidecar {
    /// `None` when the graph was planted rather than thresholded.
    pub epsilon: Option<f64>,
    pub sparsity_target: Option<f64>,
    pub band_radius: Option<usize>,
    pub series_hash: String,
    pub source: String,
}

pub fn write_temporal_cache(dir: &Path, a_tg: &Tensor, sidecar: &TemporalSidecar) -> Result<()> {
    fs::write(dir.join(TEMPORAL_EDGES_FILE), edges_csv(a_tg))?;
    fs::write(
        dir.join(TEMPORAL_SIDECAR_FILE),
        serde_json::to_string_pretty(sidecar)? + "\n",
    )?;
    Ok(())
}

pub fn read_temporal_cache(dir: &Path, n_nodes: usize) -> Result<(Tensor, TemporalSidecar)> {
    let a = read_edges_csv(&dir.join(TEMPORAL_EDGES_FILE), n_nodes)?;
    let side_path = dir.join(TEMPORAL_SIDECAR_FILE);
    if !side_path.exists() {
        return Err(Error::NotFound(side_path));
    }
    let sidecar = serde_json::from_str(&fs::read_to_string(side_path)?)?;
    Ok((a, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_is_symmetric() {
        let a = load_spatial_graph(&[(0, 1)], 3).unwrap();
        assert_eq!(a.at(&[0, 1]), 1.0);
        assert_eq!(a.at(&[1, 0]), 1.0);
        assert_eq!(count_nonzero(&a), 2);
    }

    #[test]
    fn empty_edges_and_self_loops() {
        assert_eq!(count_nonzero(&load_spatial_graph(&[], 4).unwrap()), 0);
        assert_eq!(count_nonzero(&load_spatial_graph(&[(2, 2)], 4).unwrap()), 0);
    }

    #[test]
    fn out_of_range_id_reports_line() {
        let err = parse_edges_csv("from,to\n0,1\n1,7\n", 3).unwrap_err();
        assert!(matches!(err, Error::Ingestion(ref m) if m.contains("line 3")), "{err}");
        let err = parse_edges_csv("from,to\n0,x\n", 3).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn csv_round_trip() {
        let a = load_spatial_graph(&[(0, 1), (2, 1), (3, 0)], 4).unwrap();
        let text = edges_csv(&a);
        assert_eq!(load_spatial_graph(&parse_edges_csv(&text, 4).unwrap(), 4).unwrap(), a);
    }

    #[test]
    fn dtw_examples() {
        let cfg = DtwConfig::default();
        assert_eq!(dtw_distance(&[1., 2., 3.], &[1., 3.], &cfg).unwrap(), 1.0);
        assert_eq!(dtw_distance(&[2., 2.], &[5.], &cfg).unwrap(), 6.0);
        let x = [0.3, -1.0, 4.0, 2.2];
        assert_eq!(dtw_distance(&x, &x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn dtw_contract_errors() {
        let cfg = DtwConfig::default();
        assert!(matches!(dtw_distance(&[], &[1.0], &cfg), Err(Error::Contract(_))));
        let banded = DtwConfig {
            band_radius: Some(1),
            series_length_cap: None,
        };
        assert!(matches!(
            dtw_distance(&[1., 2., 3., 4.], &[1., 2.], &banded),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn quantile_on_three_pairs() {
        let d = [(0, 1, 1.0), (0, 2, 5.0), (1, 2, 9.0)];
        let tg = temporal_graph_from_distances(3, &d, 1.0 / 3.0).unwrap();
        assert_eq!(tg.edge_count, 1);
        assert_eq!(tg.a_tg.at(&[0, 1]), 1.0);
        assert_eq!(count_nonzero(&tg.a_tg), 2);
        assert_eq!(tg.epsilon, 1.0);
    }

    #[test]
    fn zero_target_gives_empty_graph() {
        let series = vec![vec![1., 2.], vec![2., 3.], vec![0., 0.]];
        let tg = build_temporal_graph(&series, 0.0, &DtwConfig::default()).unwrap();
        assert_eq!(count_nonzero(&tg.a_tg), 0);
    }

    #[test]
    fn identical_series_are_degenerate() {
        let series = vec![vec![1., 1., 1.]; 4];
        assert!(matches!(
            build_temporal_graph(&series, 0.5, &DtwConfig::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn two_clusters_give_two_cliques() {
        let a = vec![0.0, 1.0, 3.0, 1.0, 0.0, -2.0];
        let b = vec![5.0, 5.0, 4.0, 8.0, 9.0, 5.0];
        let members = [0usize, 1, 0, 1, 0, 0, 1];
        let series: Vec<Vec<f64>> = members
            .iter()
            .map(|&c| if c == 0 { a.clone() } else { b.clone() })
            .collect();
        let n = series.len();
        let intra = 4 * 3 / 2 + 3 * 2 / 2;
        let target = intra as f64 / (n * (n - 1) / 2) as f64;
        let tg = build_temporal_graph(&series, target, &DtwConfig::default()).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if i != j && members[i] == members[j] { 1.0 } else { 0.0 };
                assert_eq!(tg.a_tg.at(&[i, j]), expect, "({i},{j})");
            }
        }
        check_meta_matrix("tg", &tg.a_tg, n).unwrap();
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let s = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(series_content_hash(&s), series_content_hash(&s.clone()));
        let t = vec![vec![1.0, 2.0], vec![3.0, 4.5]];
        assert_ne!(series_content_hash(&s), series_content_hash(&t));
    }
}
