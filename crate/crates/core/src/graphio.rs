//! Graph representation, TSV import/export, and fixture generation.
//!
//! External graph data arrives as two tab-separated files: `nodes.tsv` with
//! header `node_id<TAB>label<TAB>features` (features comma-separated) and
//! `edges.tsv` with header `src<TAB>dst`. Edges are undirected: the loader
//! symmetrizes and deduplicates, and rejects self-loops loudly.

use crate::tensor::{Groups, Tensor};
use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io { path: path.display().to_string(), source }
}

/// Undirected node-labeled feature graph with contiguous ids `0..n`.
#[derive(Clone, Debug)]
pub struct Graph {
    features: Tensor,
    labels: Vec<usize>,
    adj: Vec<Vec<usize>>,
    n_classes: usize,
}

impl Graph {
    /// Build a graph from parts. Edges are symmetrized and deduplicated;
    /// self-loops and out-of-range endpoints are format errors. When
    /// `declared_classes` is given every label must lie below it; otherwise
    /// the class count is `max(label) + 1`.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        edges: &[(usize, usize)],
        declared_classes: Option<usize>,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if labels.len() != n {
            return Err(GraphError::Format(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        let n_classes = match declared_classes {
            Some(c) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(GraphError::Format(format!(
                        "label {bad} is out of range for declared class count {c}"
                    )));
                }
                c
            }
            None => labels.iter().max().map_or(0, |&m| m + 1),
        };
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a == b {
                return Err(GraphError::Format(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(GraphError::Format(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let adj = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Graph { features, labels, adj, n_classes })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, v: usize) -> usize {
        self.labels[v]
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Neighbor lists as row groups, for the neighbor-mean embedding primitive.
    pub fn neighbor_groups(&self) -> Groups {
        Groups::from_lists(&self.adj)
    }

    /// Induced subgraph on `nodes` (original ids, deduplicated, any order).
    /// Returns the subgraph plus the original id of each local node; local ids
    /// follow the sorted order of `nodes`. Class count is inherited so label
    /// space stays global.
    pub fn induced(&self, nodes: &[usize]) -> (Graph, Vec<usize>) {
        let mut orig: Vec<usize> = nodes.to_vec();
        orig.sort_unstable();
        orig.dedup();
        let mut local = vec![usize::MAX; self.n()];
        for (i, &v) in orig.iter().enumerate() {
            local[v] = i;
        }
        let mut feat = Vec::with_capacity(orig.len() * self.dim());
        let mut labels = Vec::with_capacity(orig.len());
        let mut adj = Vec::with_capacity(orig.len());
        for &v in &orig {
            feat.extend_from_slice(self.features.row(v));
            labels.push(self.labels[v]);
            adj.push(
                self.adj[v]
                    .iter()
                    .filter_map(|&u| (local[u] != usize::MAX).then(|| local[u]))
                    .collect::<Vec<_>>(),
            );
        }
        let features = Tensor::from_vec(orig.len(), self.dim(), feat).expect("consistent dims");
        (Graph { features, labels, adj, n_classes: self.n_classes }, orig)
    }

    /// Nodes within `hops` hops of `sources` (excluding the sources
    /// themselves), discovered by breadth-first search.
    pub fn hop_neighborhood(&self, sources: &[usize], hops: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n()];
        let mut queue = std::collections::VecDeque::new();
        for &s in sources {
            dist[s] = 0;
            queue.push_back(s);
        }
        let mut out = Vec::new();
        while let Some(v) = queue.pop_front() {
            if dist[v] == hops {
                continue;
            }
            for &u in &self.adj[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    out.push(u);
                    queue.push_back(u);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Per-class node fractions `|{v in nodes : label v = c}| / |nodes|`.
/// An empty node set yields all zeros.
pub fn class_rates(g: &Graph, nodes: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; g.n_classes()];
    for &v in nodes {
        counts[g.label(v)] += 1;
    }
    if nodes.is_empty() {
        return vec![0.0; g.n_classes()];
    }
    counts.iter().map(|&c| c as f64 / nodes.len() as f64).collect()
}

/// Split nodes into head (`degree > lambda`) and tail (`degree <= lambda`).
pub fn degree_headness_split(g: &Graph, lambda: usize) -> (Vec<usize>, Vec<usize>) {
    let mut head = Vec::new();
    let mut tail = Vec::new();
    for v in 0..g.n() {
        if g.degree(v) > lambda {
            head.push(v);
        } else {
            tail.push(v);
        }
    }
    (head, tail)
}

/// Load `nodes.tsv` + `edges.tsv` from a directory.
pub fn load_graph(dir: &Path, declared_classes: Option<usize>) -> Result<Graph, GraphError> {
    let nodes_path = dir.join("nodes.tsv");
    let edges_path = dir.join("edges.tsv");
    let nodes_file = std::fs::File::open(&nodes_path).map_err(|e| io_err(&nodes_path, e))?;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let fname = nodes_path.display().to_string();
    for (i, line) in std::io::BufReader::new(nodes_file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&nodes_path, e))?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim_end() != "node_id\tlabel\tfeatures" {
                return Err(GraphError::Parse {
                    file: fname,
                    line: lineno,
                    msg: format!("expected header 'node_id\\tlabel\\tfeatures', got '{line}'"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| GraphError::Parse { file: fname.clone(), line: lineno, msg };
        let mut parts = line.split('\t');
        let (id, label, feats) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(parse("expected exactly 3 tab-separated fields".into())),
        };
        let id: usize = id.parse().map_err(|_| parse(format!("bad node id '{id}'")))?;
        let label: usize = label.parse().map_err(|_| parse(format!("bad label '{label}'")))?;
        let feats: Vec<f64> = feats
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse(format!("bad feature value '{f}'"))))
            .collect::<Result<_, _>>()?;
        rows.push((id, label, feats));
    }
    if rows.is_empty() {
        return Err(GraphError::Format(format!("{fname}: no node rows")));
    }
    let n = rows.len();
    let dim = rows[0].2.len();
    let mut seen = vec![false; n];
    let mut labels = vec![0usize; n];
    let mut feat = vec![0.0; n * dim];
    for (id, label, f) in rows {
        if id >= n || seen[id] {
            return Err(GraphError::Format(format!(
                "{fname}: node ids must be unique and contiguous in 0..{n} (offending id {id})"
            )));
        }
        if f.len() != dim {
            return Err(GraphError::Format(format!(
                "{fname}: node {id} has {} features, expected {dim}",
                f.len()
            )));
        }
        seen[id] = true;
        labels[id] = label;
        feat[id * dim..(id + 1) * dim].copy_from_slice(&f);
    }

    let edges_file = std::fs::File::open(&edges_path).map_err(|e| io_err(&edges_path, e))?;
    let ename = edges_path.display().to_string();
    let mut edges = Vec::new();
    for (i, line) in std::io::BufReader::new(edges_file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&edges_path, e))?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim_end() != "src\tdst" {
                return Err(GraphError::Parse {
                    file: ename,
                    line: lineno,
                    msg: format!("expected header 'src\\tdst', got '{line}'"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| GraphError::Parse { file: ename.clone(), line: lineno, msg };
        let mut parts = line.split('\t');
        let (src, dst) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse("expected exactly 2 tab-separated fields".into())),
        };
        let src: usize = src.parse().map_err(|_| parse(format!("bad src id '{src}'")))?;
        let dst: usize = dst.parse().map_err(|_| parse(format!("bad dst id '{dst}'")))?;
        edges.push((src, dst));
    }
    let features = Tensor::from_vec(n, dim, feat).expect("consistent dims");
    Graph::new(features, labels, &edges, declared_classes)
}

/// Write `nodes.tsv` + `edges.tsv`; the output round-trips through
/// [`load_graph`] exactly (shortest-round-trip float formatting).
pub fn save_graph(g: &Graph, dir: &Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let nodes_path = dir.join("nodes.tsv");
    let mut w = BufWriter::new(std::fs::File::create(&nodes_path).map_err(|e| io_err(&nodes_path, e))?);
    let werr = |e| io_err(&nodes_path, e);
    writeln!(w, "node_id\tlabel\tfeatures").map_err(werr)?;
    for v in 0..g.n() {
        let feats: Vec<String> = g.features.row(v).iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{v}\t{}\t{}", g.label(v), feats.join(",")).map_err(werr)?;
    }
    w.flush().map_err(werr)?;

    let edges_path = dir.join("edges.tsv");
    let mut w = BufWriter::new(std::fs::File::create(&edges_path).map_err(|e| io_err(&edges_path, e))?);
    let werr = |e| io_err(&edges_path, e);
    writeln!(w, "src\tdst").map_err(werr)?;
    for v in 0..g.n() {
        for &u in g.neighbors(v) {
            if v < u {
                writeln!(w, "{v}\t{u}").map_err(werr)?;
            }
        }
    }
    w.flush().map_err(werr)?;
    Ok(())
}

/// Stochastic block model with one block per class and Gaussian features
/// around separated per-class means.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub block_sizes: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub dim: usize,
    /// Distance scale between class means in feature space.
    pub separation: f64,
    pub seed: u64,
}

pub fn generate_sbm(cfg: &SbmConfig) -> Result<Graph, GraphError> {
    if cfg.block_sizes.is_empty() || cfg.block_sizes.iter().any(|&s| s == 0) {
        return Err(GraphError::Format("block sizes must be non-empty and positive".into()));
    }
    if cfg.dim == 0 {
        return Err(GraphError::Format("feature dim must be positive".into()));
    }
    for (name, p) in [("p_intra", cfg.p_intra), ("p_inter", cfg.p_inter)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::Format(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    use rand::Rng;
    let n: usize = cfg.block_sizes.iter().sum();
    let classes = cfg.block_sizes.len();
    let mut labels = Vec::with_capacity(n);
    for (c, &size) in cfg.block_sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(c).take(size));
    }

    // Class means: random directions scaled to the requested separation.
    let mut means = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut rng = crate::rng::stream(cfg.seed, "sbm-means", &[c as u64]);
        let raw = Tensor::randn(1, cfg.dim, 1.0, &mut rng);
        let norm = raw.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means.push(raw.data().iter().map(|x| x / norm * cfg.separation).collect::<Vec<_>>());
    }

    let mut rng = crate::rng::stream(cfg.seed, "sbm-feat", &[]);
    let noise = Tensor::randn(n, cfg.dim, 1.0, &mut rng);
    let mut feat = noise.data().to_vec();
    for v in 0..n {
        for (j, m) in means[labels[v]].iter().enumerate() {
            feat[v * cfg.dim + j] += m;
        }
    }

    let mut rng = crate::rng::stream(cfg.seed, "sbm-edges", &[]);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if labels[a] == labels[b] { cfg.p_intra } else { cfg.p_inter };
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    let features = Tensor::from_vec(n, cfg.dim, feat).expect("consistent dims");
    Graph::new(features, labels, &edges, Some(classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph() -> Graph {
        let features = Tensor::from_rows(&[
            vec![1.0, 0.5],
            vec![0.0, -2.0],
            vec![0.25, 0.125],
            vec![3.0, 1.0],
        ])
        .unwrap();
        Graph::new(features, vec![0, 1, 0, 1], &[(0, 1), (1, 2), (1, 0)], None).unwrap()
    }

    #[test]
    fn edges_symmetrized_and_deduplicated() {
        let g = toy_graph();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.degree(3), 0);
    }

    #[test]
    fn self_loop_rejected() {
        let features = Tensor::zeros(2, 1);
        let err = Graph::new(features, vec![0, 0], &[(1, 1)], None).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let g = toy_graph();
        let dir = tempfile::tempdir().unwrap();
        save_graph(&g, dir.path()).unwrap();
        let g2 = load_graph(dir.path(), None).unwrap();
        assert_eq!(g.features(), g2.features());
        assert_eq!(g.labels(), g2.labels());
        assert_eq!(g.adj, g2.adj);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("nodes.tsv"),
            "node_id\tlabel\tfeatures\n0\t0\t1.0,2.0\n1\tnot-a-label\t1.0,2.0\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("edges.tsv"), "src\tdst\n").unwrap();
        let err = load_graph(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(err.contains("not-a-label"), "{err}");
    }

    #[test]
    fn inconsistent_feature_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("nodes.tsv"),
            "node_id\tlabel\tfeatures\n0\t0\t1.0,2.0\n1\t0\t1.0\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("edges.tsv"), "src\tdst\n").unwrap();
        let err = load_graph(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("expected 2"), "{err}");
    }

    #[test]
    fn declared_class_count_is_enforced() {
        let features = Tensor::zeros(2, 1);
        let err = Graph::new(features, vec![0, 5], &[], Some(3)).unwrap_err();
        assert!(err.to_string().contains("label 5"), "{err}");
    }

    #[test]
    fn sbm_edge_count_within_three_sigma() {
        let cfg = SbmConfig {
            block_sizes: vec![60, 60],
            p_intra: 0.2,
            p_inter: 0.02,
            dim: 4,
            separation: 2.0,
            seed: 9,
        };
        let g = generate_sbm(&cfg).unwrap();
        // Intra pairs: 2 * C(60,2) = 3540; inter pairs: 3600.
        let mean = 3540.0 * 0.2 + 3600.0 * 0.02;
        let var: f64 = 3540.0 * 0.2 * 0.8 + 3600.0 * 0.02 * 0.98;
        let sd = var.sqrt();
        let e = g.edge_count() as f64;
        assert!((e - mean).abs() < 3.0 * sd, "edges {e} vs mean {mean} (sd {sd})");
    }

    #[test]
    fn sbm_is_deterministic_per_seed() {
        let cfg = SbmConfig {
            block_sizes: vec![20, 20],
            p_intra: 0.3,
            p_inter: 0.05,
            dim: 3,
            separation: 1.0,
            seed: 4,
        };
        let a = generate_sbm(&cfg).unwrap();
        let b = generate_sbm(&cfg).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.adj, b.adj);
        let c = generate_sbm(&SbmConfig { seed: 5, ..cfg }).unwrap();
        assert!(a.adj != c.adj || a.features() != c.features());
    }

    #[test]
    fn rates_and_headness() {
        let g = toy_graph();
        let r = class_rates(&g, &[0, 1, 2]);
        assert_eq!(r, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(class_rates(&g, &[]), vec![0.0, 0.0]);
        let (head, tail) = degree_headness_split(&g, 1);
        assert_eq!(head, vec![1]);
        assert_eq!(tail, vec![0, 2, 3]);
    }
}
