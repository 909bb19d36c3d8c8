//! Network representation, edge-list ingestion and the random-graph
//! generators used by the simulation study.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    Directed,
    Undirected,
}

/// Sparse weighted graph over nodes `0..n_nodes`.
///
/// In directed mode the neighbor list of `i` holds the nodes `i` points to
/// (its nominees). Neighbor lists are sorted by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    mode: EdgeMode,
    neighbors: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    communities: Option<Vec<usize>>,
}

impl Network {
    /// Build from `(src, dst, weight)` triples. Duplicate edges keep the
    /// maximum weight; in undirected mode `(a, b)` and `(b, a)` are the same edge.
    pub fn from_edges(
        n_nodes: usize,
        mode: EdgeMode,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_nodes];
        for (a, b, w) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::validation(format!(
                    "edge ({a}, {b}) references a node outside 0..{n_nodes}"
                )));
            }
            if a == b {
                return Err(Error::validation(format!("self-loop on node {a}")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::validation(format!("edge ({a}, {b}) has invalid weight {w}")));
            }
            let mut insert = |s: usize, d: usize| {
                let e = maps[s].entry(d).or_insert(w);
                if w > *e {
                    *e = w;
                }
            };
            insert(a, b);
            if mode == EdgeMode::Undirected {
                insert(b, a);
            }
        }
        let (neighbors, weights) = maps
            .into_iter()
            .map(|m| m.into_iter().unzip::<usize, f64, Vec<_>, Vec<_>>())
            .unzip();
        Ok(Network {
            mode,
            neighbors,
            weights,
            communities: None,
        })
    }

    pub fn empty(n_nodes: usize, mode: EdgeMode) -> Self {
        Network {
            mode,
            neighbors: vec![Vec::new(); n_nodes],
            weights: vec![Vec::new(); n_nodes],
            communities: None,
        }
    }

    pub fn with_communities(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n_nodes() {
            return Err(Error::validation(format!(
                "{} community labels for {} nodes",
                labels.len(),
                self.n_nodes()
            )));
        }
        self.communities = Some(labels);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn mode(&self) -> EdgeMode {
        self.mode
    }

    pub fn is_directed(&self) -> bool {
        self.mode == EdgeMode::Directed
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    /// Weight of the edge `i -> j`, zero when absent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match self.neighbors[i].binary_search(&j) {
            Ok(pos) => self.weights[i][pos],
            Err(_) => 0.0,
        }
    }

    /// Number of edges; undirected edges are counted once.
    pub fn edge_count(&self) -> usize {
        let arcs: usize = self.neighbors.iter().map(Vec::len).sum();
        match self.mode {
            EdgeMode::Directed => arcs,
            EdgeMode::Undirected => arcs / 2,
        }
    }

    pub fn mean_degree(&self) -> f64 {
        if self.n_nodes() == 0 {
            return 0.0;
        }
        self.neighbors.iter().map(Vec::len).sum::<usize>() as f64 / self.n_nodes() as f64
    }

    /// Planted community labels, when the generator recorded them.
    pub fn communities(&self) -> Option<&[usize]> {
        self.communities.as_deref()
    }

    /// Edges as `(src, dst, weight)`; undirected edges are emitted once with `src < dst`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let undirected = self.mode == EdgeMode::Undirected;
        self.neighbors.iter().enumerate().flat_map(move |(i, nb)| {
            nb.iter()
                .zip(&self.weights[i])
                .filter(move |(&j, _)| !undirected || i < j)
                .map(move |(&j, &w)| (i, j, w))
        })
    }

    /// Symmetrized copy: an undirected edge wherever either direction exists.
    pub fn to_undirected(&self) -> Network {
        if self.mode == EdgeMode::Undirected {
            return self.clone();
        }
        let mut net = Network::from_edges(self.n_nodes(), EdgeMode::Undirected, self.edges())
            .expect("edges of a valid network are valid");
        net.communities = self.communities.clone();
        net
    }

    /// Write the edge list as CSV with a `src,dst,weight` header, sorted by
    /// `(src, dst)`.
    pub fn write_edge_list<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["src", "dst", "weight"])?;
        for (a, b, wt) in self.edges() {
            w.write_record([a.to_string(), b.to_string(), format_weight(wt)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_edge_list_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_edge_list(std::io::BufWriter::new(f))
    }
}

fn format_weight(w: f64) -> String {
    if w.fract() == 0.0 && w.abs() < 1e15 {
        format!("{}", w as i64)
    } else {
        format!("{w}")
    }
}

/// Options for [`from_edge_list`].
#[derive(Debug, Clone, Copy)]
pub struct EdgeListOptions {
    pub mode: EdgeMode,
    /// When set, ids are taken as-is and must lie in `0..n_nodes`; nodes
    /// without edges are kept. When unset, ids are compacted to `0..n`
    /// in ascending id order.
    pub n_nodes: Option<usize>,
}

impl EdgeListOptions {
    pub fn new(mode: EdgeMode) -> Self {
        EdgeListOptions { mode, n_nodes: None }
    }
}

/// Read a `src,dst[,weight]` CSV edge list. A header row is optional.
pub fn from_edge_list(path: &Path, opts: EdgeListOptions) -> Result<Network> {
    let f = std::fs::File::open(path)?;
    read_edge_list(f, path, opts)
}

pub fn read_edge_list<R: Read>(reader: R, path: &Path, opts: EdgeListOptions) -> Result<Network> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut raw: Vec<(i64, i64, f64)> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() < 2 || rec.len() > 3 {
            return Err(parse_err(line, format!("expected 2 or 3 fields, found {}", rec.len())));
        }
        let src = rec[0].parse::<i64>();
        let dst = rec[1].parse::<i64>();
        let (src, dst) = match (src, dst) {
            (Ok(s), Ok(d)) => (s, d),
            _ if idx == 0 && rec[0].parse::<f64>().is_err() => continue, // header
            _ => {
                return Err(parse_err(
                    line,
                    format!("node ids must be integers, got `{}`,`{}`", &rec[0], &rec[1]),
                ))
            }
        };
        if src < 0 || dst < 0 {
            return Err(parse_err(line, "node ids must be nonnegative".into()));
        }
        let weight = match rec.get(2) {
            Some(s) if !s.is_empty() => s
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("invalid weight `{s}`")))?,
            _ => 1.0,
        };
        if weight < 0.0 || !weight.is_finite() {
            return Err(Error::validation(format!(
                "{}: line {line}: negative or non-finite weight {weight}",
                path.display()
            )));
        }
        if src == dst {
            return Err(Error::validation(format!(
                "{}: line {line}: self-loop on node {src}",
                path.display()
            )));
        }
        raw.push((src, dst, weight));
    }

    match opts.n_nodes {
        Some(n) => Network::from_edges(
            n,
            opts.mode,
            raw.into_iter().map(|(a, b, w)| (a as usize, b as usize, w)),
        ),
        None => {
            let mut ids: Vec<i64> = raw.iter().flat_map(|&(a, b, _)| [a, b]).collect();
            ids.sort_unstable();
            ids.dedup();
            let index = |id: i64| ids.binary_search(&id).expect("id collected above");
            let edges: Vec<_> = raw.iter().map(|&(a, b, w)| (index(a), index(b), w)).collect();
            Network::from_edges(ids.len(), opts.mode, edges)
        }
    }
}

/// Stochastic block model with a constant within-block and a constant
/// between-block link probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbmConfig {
    pub community_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl SbmConfig {
    /// 100 communities of 10 nodes, within 0.08, between 0.02.
    pub fn simulation_default(seed: u64) -> Self {
        Self::blocks_of_ten(1000, seed)
    }

    /// `n / 10` communities of 10 nodes with the simulation link probabilities.
    pub fn blocks_of_ten(n: usize, seed: u64) -> Self {
        let mut sizes = vec![10; n / 10];
        if !n.is_multiple_of(10) {
            sizes.push(n % 10);
        }
        SbmConfig {
            community_sizes: sizes,
            p_in: 0.08,
            p_out: 0.02,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        for p in [self.p_in, self.p_out] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("link probability {p} outside [0, 1]")));
            }
        }
        if self.community_sizes.contains(&0) {
            return Err(Error::validation("community sizes must be positive"));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.community_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
            .collect()
    }
}

/// Each unordered pair is linked independently with the probability of its
/// block pair. Community labels are retained on the network.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Network> {
    cfg.validate()?;
    let labels = cfg.labels();
    let n = labels.len();
    let mut rng = rng_from_seed(cfg.seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    Network::from_edges(n, EdgeMode::Undirected, edges)?.with_communities(labels)
}

/// Latent cluster model: link probability
/// `exp(beta0 + beta_x . |X_i - X_j| + beta_c |C_i - C_j|)`, clamped at 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentClusterConfig {
    pub community_sizes: Vec<usize>,
    pub beta0: f64,
    pub beta_x: Vec<f64>,
    pub beta_c: f64,
    pub seed: u64,
}

impl LatentClusterConfig {
    pub fn simulation_default(n: usize, seed: u64) -> Self {
        LatentClusterConfig {
            community_sizes: SbmConfig::blocks_of_ten(n, seed).community_sizes,
            beta0: -4.6,
            beta_x: vec![0.05, 0.005],
            beta_c: 0.18,
            seed,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.community_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
            .collect()
    }

    pub fn link_probability(&self, xi: &[f64], xj: &[f64], ci: usize, cj: usize) -> (f64, bool) {
        let eta = self.beta0
            + self
                .beta_x
                .iter()
                .zip(xi.iter().zip(xj))
                .map(|(b, (a, c))| b * (a - c).abs())
                .sum::<f64>()
            + self.beta_c * (ci as f64 - cj as f64).abs();
        let p = eta.exp();
        if p > 1.0 {
            (1.0, true)
        } else {
            (p, false)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentClusterNetwork {
    pub network: Network,
    /// Pairs whose raw link probability exceeded 1 and was clamped.
    pub clamped_pairs: usize,
}

pub fn generate_latent_cluster(
    cfg: &LatentClusterConfig,
    covariates: &DMatrix<f64>,
) -> Result<LatentClusterNetwork> {
    let labels = cfg.labels();
    let n = labels.len();
    if covariates.nrows() != n {
        return Err(Error::validation(format!(
            "{} covariate rows for {} nodes",
            covariates.nrows(),
            n
        )));
    }
    if covariates.ncols() != cfg.beta_x.len() {
        return Err(Error::validation(format!(
            "beta_x has {} entries but there are {} covariates",
            cfg.beta_x.len(),
            covariates.ncols()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| covariates.row(i).iter().copied().collect()).collect();
    let mut rng = rng_from_seed(cfg.seed);
    let mut edges = Vec::new();
    let mut clamped = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let (p, was_clamped) = cfg.link_probability(&rows[i], &rows[j], labels[i], labels[j]);
            clamped += was_clamped as usize;
            if rng.random::<f64>() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    if clamped > 0 {
        log::warn!("latent cluster model: link probability clamped at 1 for {clamped} pairs");
    }
    let network = Network::from_edges(n, EdgeMode::Undirected, edges)?.with_communities(labels)?;
    Ok(LatentClusterNetwork {
        network,
        clamped_pairs: clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(text: &str, mode: EdgeMode) -> Result<Network> {
        read_edge_list(text.as_bytes(), Path::new("mem.csv"), EdgeListOptions::new(mode))
    }

    #[test]
    fn path_graph_degrees() {
        let net = read("0,1\n1,2\n", EdgeMode::Undirected).unwrap();
        assert_eq!(net.degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn empty_file_gives_empty_network() {
        let net = read("", EdgeMode::Undirected).unwrap();
        assert_eq!(net.n_nodes(), 0);
        assert_eq!(net.edge_count(), 0);
    }

    #[test]
    fn reversed_duplicate_collapses() {
        let net = read("src,dst\n0,1\n1,0\n", EdgeMode::Undirected).unwrap();
        assert_eq!(net.edge_count(), 1);
        assert_eq!(net.degrees(), vec![1, 1]);
    }

    #[test]
    fn duplicates_keep_max_weight() {
        let net = read("0,1,0.5\n1,0,2.0\n0,1,1.0\n", EdgeMode::Undirected).unwrap();
        assert_eq!(net.weight(0, 1), 2.0);
        assert_eq!(net.weight(1, 0), 2.0);
    }

    #[test]
    fn ids_are_compacted() {
        let net = read("10,30\n30,20\n", EdgeMode::Directed).unwrap();
        assert_eq!(net.n_nodes(), 3);
        assert_eq!(net.neighbors(0), &[2]);
        assert_eq!(net.neighbors(2), &[1]);
        assert_eq!(net.degree(1), 0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = read("0,1\n1,x\n", EdgeMode::Undirected).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let err = read("0,1,-1\n", EdgeMode::Undirected).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn self_loop_rejected() {
        assert!(matches!(read("1,1\n", EdgeMode::Undirected), Err(Error::Validation(_))));
    }

    #[test]
    fn sbm_without_links_is_empty() {
        let cfg = SbmConfig {
            community_sizes: vec![10; 5],
            p_in: 0.0,
            p_out: 0.0,
            seed: 3,
        };
        let net = generate_sbm(&cfg).unwrap();
        assert_eq!(net.n_nodes(), 50);
        assert_eq!(net.edge_count(), 0);
    }

    #[test]
    fn sbm_is_reproducible() {
        let cfg = SbmConfig::blocks_of_ten(200, 11);
        assert_eq!(generate_sbm(&cfg).unwrap(), generate_sbm(&cfg).unwrap());
    }

    #[test]
    fn sbm_rejects_bad_probability() {
        let cfg = SbmConfig {
            community_sizes: vec![3],
            p_in: 1.5,
            p_out: 0.0,
            seed: 0,
        };
        assert!(generate_sbm(&cfg).is_err());
    }

    #[test]
    fn sbm_edge_count_near_block_expectation() {
        let cfg = SbmConfig::simulation_default(2024);
        let net = generate_sbm(&cfg).unwrap();
        // 100 blocks * C(10,2) within pairs, the rest between.
        let within = 100.0 * 45.0;
        let between = 499_500.0 - within;
        let mean = within * 0.08 + between * 0.02;
        assert!((mean - 10260.0_f64).abs() < 1e-9);
        let sd = (within * 0.08 * 0.92 + between * 0.02 * 0.98).sqrt();
        let count = net.edge_count() as f64;
        assert!((count - mean).abs() < 4.0 * sd, "count {count} vs {mean} +- {sd}");
    }

    #[test]
    fn sbm_within_block_frequency() {
        // Within-block pairs only: 1000 blocks of 5 nodes = 10^4 pairs.
        let cfg = SbmConfig {
            community_sizes: vec![5; 1000],
            p_in: 0.3,
            p_out: 0.0,
            seed: 5,
        };
        let net = generate_sbm(&cfg).unwrap();
        let pairs = 1000.0 * 10.0;
        let freq = net.edge_count() as f64 / pairs;
        let se = (0.3_f64 * 0.7 / pairs).sqrt();
        assert!((freq - 0.3).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn latent_cluster_identical_units_same_community() {
        let cfg = LatentClusterConfig::simulation_default(1000, 1);
        let (p, clamped) = cfg.link_probability(&[0.3, 1.0], &[0.3, 1.0], 4, 4);
        assert!(!clamped);
        assert!((p - (-4.6_f64).exp()).abs() < 1e-15);
        assert!((p - 0.01005).abs() < 1e-5);
    }

    #[test]
    fn latent_cluster_clamps_distant_communities() {
        let cfg = LatentClusterConfig::simulation_default(1000, 1);
        let (p, clamped) = cfg.link_probability(&[0.0, 0.0], &[0.0, 0.0], 0, 99);
        assert!(clamped);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn latent_cluster_without_covariate_terms_is_erdos_renyi() {
        let n = 400;
        let cfg = LatentClusterConfig {
            community_sizes: vec![n],
            beta0: (0.05_f64).ln(),
            beta_x: vec![0.0, 0.0],
            beta_c: 0.0,
            seed: 9,
        };
        let x = DMatrix::from_fn(n, 2, |i, j| (i * (j + 1)) as f64);
        let out = generate_latent_cluster(&cfg, &x).unwrap();
        assert_eq!(out.clamped_pairs, 0);
        let pairs = (n * (n - 1) / 2) as f64;
        let freq = out.network.edge_count() as f64 / pairs;
        let se = (0.05_f64 * 0.95 / pairs).sqrt();
        assert!((freq - 0.05).abs() < 4.0 * se, "freq {freq}");
    }

    #[test]
    fn latent_cluster_checks_dimensions() {
        let cfg = LatentClusterConfig::simulation_default(20, 1);
        let x = DMatrix::zeros(20, 3);
        assert!(generate_latent_cluster(&cfg, &x).is_err());
    }

    proptest! {
        #[test]
        fn edge_list_round_trip(
            n in 1usize..30,
            raw in proptest::collection::vec((0usize..30, 0usize..30, 0u8..4), 0..80),
            directed in any::<bool>(),
        ) {
            let mode = if directed { EdgeMode::Directed } else { EdgeMode::Undirected };
            let edges: Vec<_> = raw
                .into_iter()
                .filter(|(a, b, _)| a != b && *a < n && *b < n)
                .map(|(a, b, w)| (a, b, f64::from(w) + 0.5))
                .collect();
            let net = Network::from_edges(n, mode, edges).unwrap();
            let mut buf = Vec::new();
            net.write_edge_list(&mut buf).unwrap();
            let opts = EdgeListOptions { mode, n_nodes: Some(n) };
            let back = read_edge_list(buf.as_slice(), Path::new("mem"), opts).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
