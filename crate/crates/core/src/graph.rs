//! Directed networks without self-loops and the synthetic network generator.
//!
//! Links are formed independently for every ordered pair from a logistic
//! utility shifted by a normal shock, and over-connected nodes then lose
//! randomly chosen out-links until every out-degree is at most `dbar`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Directed 0/1 network. `peers(i)` lists the nodes `i` names, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Network {
    peers: Vec<Vec<usize>>,
}

impl Network {
    /// Network with `n` nodes and no links.
    pub fn empty(n: usize) -> Self {
        Network {
            peers: vec![Vec::new(); n],
        }
    }

    /// Build from directed edges `(src, dst)`. Rejects self-loops, duplicate
    /// edges and ids outside `0..n`.
    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut peers = vec![Vec::new(); n];
        for (src, dst) in edges {
            if src >= n || dst >= n {
                return Err(Error::InvalidNetwork(format!(
                    "edge {src}->{dst} references a node outside 0..{n}"
                )));
            }
            if src == dst {
                return Err(Error::InvalidNetwork(format!("self-loop at node {src}")));
            }
            peers[src].push(dst);
        }
        for (i, row) in peers.iter_mut().enumerate() {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidNetwork(format!(
                    "duplicate edge from node {i}"
                )));
            }
        }
        Ok(Network { peers })
    }

    /// Build from a dense 0/1 matrix.
    pub fn from_adjacency(adj: &DMatrix<f64>) -> Result<Self> {
        if adj.nrows() != adj.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "adjacency must be square, got {}x{}",
                adj.nrows(),
                adj.ncols()
            )));
        }
        let n = adj.nrows();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let a = adj[(i, j)];
                if a == 1.0 {
                    edges.push((i, j));
                } else if a != 0.0 {
                    return Err(Error::InvalidNetwork(format!(
                        "adjacency entry ({i},{j}) = {a} is not 0 or 1"
                    )));
                }
            }
        }
        Network::from_edges(n, edges)
    }

    pub fn n(&self) -> usize {
        self.peers.len()
    }

    pub fn peers(&self, i: usize) -> &[usize] {
        &self.peers[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.peers[i].len()
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        self.peers.iter().map(Vec::len).collect()
    }

    pub fn max_degree(&self) -> usize {
        self.peers.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Every link has its reverse.
    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    pub fn edge_count(&self) -> usize {
        self.peers.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.peers[i].binary_search(&j).is_ok()
    }

    /// Edges in `(src, dst)` order, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.peers
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for (i, j) in self.edges() {
            a[(i, j)] = 1.0;
        }
        a
    }

    /// Row-normalized adjacency `A_ij / d_i`; rows of isolated nodes are zero.
    pub fn row_normalized(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut g = DMatrix::zeros(n, n);
        for (i, row) in self.peers.iter().enumerate() {
            let w = 1.0 / row.len() as f64;
            for &j in row {
                g[(i, j)] = w;
            }
        }
        g
    }

    /// `copies` disjoint replicas of this network, node `i` of copy `c`
    /// becoming `c * n + i`.
    pub fn replicate(&self, copies: usize) -> Network {
        let n = self.n();
        let mut peers = Vec::with_capacity(n * copies);
        for c in 0..copies {
            for row in &self.peers {
                peers.push(row.iter().map(|&j| c * n + j).collect());
            }
        }
        Network { peers }
    }

    /// Relabel nodes: old node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Network> {
        let n = self.n();
        if perm.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "permutation of length {} for {n} nodes",
                perm.len()
            )));
        }
        Network::from_edges(n, self.edges().map(|(i, j)| (perm[i], perm[j])))
    }
}

/// How the logistic utility and the normal shock combine into a link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkRule {
    /// `A_ij = 1{V_ij <= threshold + R_ij}`: link probability
    /// `E[1 / (1 + exp(-(threshold + R)))]`, about 0.0175 at threshold -4.5
    /// (mean out-degree near 5 with 300 nodes).
    #[default]
    Calibrated,
    /// `A_ij = 1{threshold + R_ij <= V_ij}`: the complementary event, link
    /// probability about 0.98 at threshold -4.5.
    Literal,
}

/// Whether link draws are per ordered pair or shared by both directions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One draw per ordered pair; `A_ij` and `A_ji` independent.
    #[default]
    Directed,
    /// One draw per unordered pair, stored as two directed links.
    Undirected,
}

/// Draw a network with independent links for every ordered pair `i != j`.
pub fn generate_logit_network(n: usize, threshold: f64, rng_seed: u64) -> Result<Network> {
    generate_logit_network_with(n, threshold, LinkRule::default(), rng_seed)
}

pub fn generate_logit_network_with(
    n: usize,
    threshold: f64,
    rule: LinkRule,
    rng_seed: u64,
) -> Result<Network> {
    generate_logit_network_oriented(n, threshold, rule, Orientation::Directed, rng_seed)
}

pub fn generate_logit_network_oriented(
    n: usize,
    threshold: f64,
    rule: LinkRule,
    orientation: Orientation,
    rng_seed: u64,
) -> Result<Network> {
    if n == 0 {
        return Err(Error::InvalidSize("network needs at least one node".into()));
    }
    let mut rng = stream_rng(rng_seed, Stream::Network, 0);
    let mut draw = move || {
        let u: f64 = rng.random();
        // open interval keeps the logit finite
        let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        let v = (u / (1.0 - u)).ln();
        let r: f64 = rng.sample(StandardNormal);
        match rule {
            LinkRule::Calibrated => v <= threshold + r,
            LinkRule::Literal => threshold + r <= v,
        }
    };
    let mut peers = vec![Vec::new(); n];
    match orientation {
        Orientation::Directed => {
            for (i, row) in peers.iter_mut().enumerate() {
                for j in (0..n).filter(|&j| j != i) {
                    if draw() {
                        row.push(j);
                    }
                }
            }
        }
        Orientation::Undirected => {
            for i in 0..n {
                for j in i + 1..n {
                    if draw() {
                        peers[i].push(j);
                        peers[j].push(i);
                    }
                }
            }
            for row in &mut peers {
                row.sort_unstable();
            }
        }
    }
    Ok(Network { peers })
}

/// Cap every out-degree at `dbar` by dropping uniformly chosen out-links of
/// over-connected nodes. Nodes already within the cap are untouched.
pub fn trim_degrees(net: &Network, dbar: usize, rng_seed: u64) -> Network {
    let peers = net
        .peers
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() <= dbar {
                return row.clone();
            }
            let mut rng = stream_rng(rng_seed, Stream::Trim, i as u64);
            let mut keep: Vec<usize> = sample(&mut rng, row.len(), dbar)
                .into_iter()
                .map(|k| row[k])
                .collect();
            keep.sort_unstable();
            keep
        })
        .collect();
    Network { peers }
}

/// Cap degrees of a symmetric network at `dbar`. While some node exceeds the
/// cap, a node of currently maximal degree (uniform among ties) loses one
/// uniformly chosen link, removed in both directions. Symmetry is preserved
/// and links are only cut at over-connected nodes, so isolated nodes stay rare.
pub fn trim_degrees_undirected(net: &Network, dbar: usize, rng_seed: u64) -> Network {
    debug_assert!(net.is_symmetric());
    let n = net.n();
    let mut rng = stream_rng(rng_seed, Stream::Trim, 0);
    let mut peers = net.peers.clone();
    // slot[i * n + j] = position of j in peers[i]
    let mut slot = vec![usize::MAX; n * n];
    for (i, row) in peers.iter().enumerate() {
        for (k, &j) in row.iter().enumerate() {
            slot[i * n + j] = k;
        }
    }
    let unlink = |peers: &mut Vec<Vec<usize>>, slot: &mut Vec<usize>, i: usize, j: usize| {
        let k = slot[i * n + j];
        peers[i].swap_remove(k);
        if let Some(&moved) = peers[i].get(k) {
            slot[i * n + moved] = k;
        }
        slot[i * n + j] = usize::MAX;
    };
    // nodes at the current maximum degree, with back-pointers for O(1) removal
    let mut top: Vec<usize> = Vec::new();
    let mut top_pos = vec![usize::MAX; n];
    let mut level = peers.iter().map(Vec::len).max().unwrap_or(0);
    while level > dbar {
        if top.is_empty() {
            top.extend((0..n).filter(|&i| peers[i].len() == level));
            for (k, &i) in top.iter().enumerate() {
                top_pos[i] = k;
            }
            if top.is_empty() {
                level -= 1;
                continue;
            }
        }
        let i = top[rng.random_range(0..top.len())];
        let j = peers[i][rng.random_range(0..peers[i].len())];
        for v in [i, j] {
            let k = top_pos[v];
            if k != usize::MAX {
                top.swap_remove(k);
                if let Some(&moved) = top.get(k) {
                    top_pos[moved] = k;
                }
                top_pos[v] = usize::MAX;
            }
        }
        unlink(&mut peers, &mut slot, i, j);
        unlink(&mut peers, &mut slot, j, i);
        if top.is_empty() {
            level -= 1;
        }
    }
    for row in &mut peers {
        row.sort_unstable();
    }
    Network { peers }
}

/// Count of nodes per out-degree.
pub fn degree_histogram(net: &Network) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for row in &net.peers {
        *hist.entry(row.len()).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Deserialize)]
struct EdgeRecord {
    src: usize,
    dst: usize,
}

/// Read a `src,dst` edge list. When `n` is not given it is one past the
/// largest id seen.
pub fn read_edge_list<R: Read>(reader: R, n: Option<usize>) -> Result<Network> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "src" || &headers[1] != "dst" {
        return Err(Error::InvalidNetwork(format!(
            "edge list header must be `src,dst`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut edges = Vec::new();
    for rec in rdr.deserialize::<EdgeRecord>() {
        let rec = rec?;
        edges.push((rec.src, rec.dst));
    }
    let n = n.unwrap_or_else(|| {
        edges
            .iter()
            .map(|&(s, d)| s.max(d) + 1)
            .max()
            .unwrap_or(0)
    });
    Network::from_edges(n, edges)
}

pub fn read_edge_list_path(path: &Path, n: Option<usize>) -> Result<Network> {
    let file = std::fs::File::open(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    read_edge_list(file, n).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_edge_list<W: Write>(net: &Network, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["src", "dst"])?;
    for (src, dst) in net.edges() {
        wtr.write_record([src.to_string(), dst.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_has_no_links() {
        let net = generate_logit_network(1, -4.5, 3).unwrap();
        assert_eq!(net.edge_count(), 0);
    }

    #[test]
    fn zero_nodes_is_rejected() {
        assert!(matches!(
            generate_logit_network(0, -4.5, 1),
            Err(Error::InvalidSize(_))
        ));
    }

    #[test]
    fn trimming_caps_a_seven_link_node() {
        let net = Network::from_edges(8, (1..8).map(|j| (0, j))).unwrap();
        let trimmed = trim_degrees(&net, 5, 11);
        assert_eq!(trimmed.degree(0), 5);
        assert!(trimmed.peers(0).iter().all(|j| net.has_edge(0, *j)));
    }

    #[test]
    fn trimming_to_zero_empties_the_network() {
        let net = generate_logit_network(40, -2.0, 5).unwrap();
        assert!(net.edge_count() > 0);
        assert_eq!(trim_degrees(&net, 0, 1).edge_count(), 0);
    }

    #[test]
    fn trimming_is_a_no_op_within_the_cap() {
        let net = Network::from_edges(4, [(0, 1), (0, 2), (3, 0)]).unwrap();
        assert_eq!(trim_degrees(&net, 2, 9), net);
    }

    #[test]
    fn histogram_examples() {
        let empty = Network::empty(3);
        assert_eq!(degree_histogram(&empty), BTreeMap::from([(0, 3)]));
        let star = Network::from_edges(3, [(0, 1), (0, 2)]).unwrap();
        assert_eq!(degree_histogram(&star), BTreeMap::from([(0, 2), (2, 1)]));
    }

    #[test]
    fn loader_rejects_self_loops_and_out_of_range_ids() {
        let bad = "src,dst\n0,0\n";
        assert!(read_edge_list(bad.as_bytes(), Some(2)).is_err());
        let bad = "src,dst\n0,5\n";
        assert!(read_edge_list(bad.as_bytes(), Some(3)).is_err());
        let bad = "a,b\n0,1\n";
        assert!(read_edge_list(bad.as_bytes(), None).is_err());
    }

    #[test]
    fn edge_list_writer_matches_loader() {
        let net = generate_logit_network(30, -2.5, 17).unwrap();
        let mut buf = Vec::new();
        write_edge_list(&net, &mut buf).unwrap();
        assert!(buf.starts_with(b"src,dst\n"));
        let back = read_edge_list(buf.as_slice(), Some(30)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn replicate_keeps_copies_disjoint() {
        let net = Network::from_edges(3, [(0, 1), (2, 0)]).unwrap();
        let two = net.replicate(2);
        assert_eq!(two.n(), 6);
        assert!(two.has_edge(3, 4) && two.has_edge(5, 3));
        assert!(!two.has_edge(0, 4));
    }

    #[test]
    fn undirected_draws_are_symmetric_and_trim_keeps_symmetry() {
        let net = generate_logit_network_oriented(150, -3.0, LinkRule::Calibrated, Orientation::Undirected, 9).unwrap();
        assert!(net.is_symmetric());
        assert!(net.max_degree() > 4);
        let trimmed = trim_degrees_undirected(&net, 4, 2);
        assert!(trimmed.is_symmetric());
        assert!(trimmed.max_degree() <= 4);
        assert!(trimmed.edges().all(|(i, j)| net.has_edge(i, j)));
        assert_eq!(trimmed, trim_degrees_undirected(&net, 4, 2));
    }

    #[test]
    fn undirected_trim_is_a_no_op_within_the_cap() {
        let net = Network::from_edges(3, [(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        assert_eq!(trim_degrees_undirected(&net, 2, 0), net);
    }
}
