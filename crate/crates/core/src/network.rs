//! Agent graphs, mixing matrices and the spectral quantities derived from them.
//!
//! A [`Graph`] is an undirected simple graph on agents `0..n`. Mixing
//! matrices come in three flavours (see [`MixingKind`]): the consensus
//! weights `W` used by DSGT/DSG, the gossip partner probabilities `Π` used by
//! GSGT, and the expected gossip matrix `W̄ = (1 - 1/n) I + (Π + Πᵀ)/(2n)`.
//! Each matrix caches `ρ`, the spectral norm of `M - (1/n) 1 1ᵀ`.
//!
//! All spectra are computed with a dense symmetric eigensolver.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{averaging_matrix, is_symmetric, spectral_norm, symmetric_eigenvalues};
use crate::rng::{mix64, Stream, StreamKey};

/// Attempts made to draw a connected Erdős–Rényi graph.
pub const ER_RETRY_BUDGET: usize = 100;

/// Row/column sum tolerance for doubly stochastic matrices.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Tolerance of the `ρ_w̄ = 1 - 1/n + λ₂((Π+Πᵀ)/2)/n` cross-check.
pub const EXPECTED_GOSSIP_TOL: f64 = 1e-12;

/// A spectral norm at or above `1 - CONTRACTION_TOL` counts as non-contractive.
pub const CONTRACTION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("graph needs at least one agent")]
    Empty,
    #[error("lattice {rows}x{cols} does not have {n} vertices")]
    LatticeShape { rows: usize, cols: usize, n: usize },
    #[error("edge probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("no connected Erdős–Rényi sample after {} attempts (sub-seeds {seeds:?})", seeds.len())]
    ErdosRenyiDisconnected { seeds: Vec<u64> },
    #[error("graph is not connected")]
    Disconnected,
    #[error("mixing matrix is not contractive (rho = {rho}); use lazy Metropolis weights")]
    NotContractive { rho: f64 },
    #[error("expected gossip matrix identity violated: rho = {rho}, identity gives {identity}")]
    ExpectedGossipIdentity { rho: f64, identity: f64 },
    #[error("expected a {expected} matrix, got {got}")]
    WrongKind { expected: MixingKind, got: MixingKind },
    #[error("matrix is not doubly stochastic (row residual {row}, column residual {col})")]
    NotDoublyStochastic { row: f64, col: f64 },
    #[error("bad topology descriptor `{0}`")]
    Parse(String),
}

/// Topology descriptor: `ring`, `path`, `lattice:RxC`, `complete`, `er:PROB:SEED`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Topology {
    Ring,
    Path,
    Lattice { rows: usize, cols: usize },
    Complete,
    ErdosRenyi { prob: f64, seed: u64 },
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Ring => write!(f, "ring"),
            Topology::Path => write!(f, "path"),
            Topology::Lattice { rows, cols } => write!(f, "lattice:{rows}x{cols}"),
            Topology::Complete => write!(f, "complete"),
            Topology::ErdosRenyi { prob, seed } => write!(f, "er:{prob}:{seed}"),
        }
    }
}

impl FromStr for Topology {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NetworkError::Parse(s.to_string());
        let s = s.trim();
        let mut parts = s.split(':');
        let head = parts.next().ok_or_else(bad)?;
        let topo = match head {
            "ring" => Topology::Ring,
            "path" => Topology::Path,
            "complete" => Topology::Complete,
            "lattice" => {
                let dims = parts.next().ok_or_else(bad)?;
                let (r, c) = dims.split_once('x').ok_or_else(bad)?;
                Topology::Lattice {
                    rows: r.parse().map_err(|_| bad())?,
                    cols: c.parse().map_err(|_| bad())?,
                }
            }
            "er" => {
                let prob = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let seed = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                Topology::ErdosRenyi { prob, seed }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(topo)
    }
}

/// Undirected simple graph on `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    /// Unordered edges stored as `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    /// Sub-seed of the accepted Erdős–Rényi draw, if sampled.
    accepted_seed: Option<u64>,
}

impl Graph {
    /// Build from an edge list. Self-loops are rejected; duplicates and
    /// orientation are normalised away.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, NetworkError> {
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        let mut list: Vec<(usize, usize)> = edges
            .into_iter()
            .map(|(i, j)| (i.min(j), i.max(j)))
            .collect();
        assert!(list.iter().all(|&(i, j)| i != j && j < n), "invalid edge for {n} vertices");
        list.sort_unstable();
        list.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j) in &list {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Ok(Self { n, edges: list, adjacency, accepted_seed: None })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn accepted_seed(&self) -> Option<u64> {
        self.accepted_seed
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == self.n
    }
}

/// Sub-seed used by the `attempt`-th Erdős–Rényi draw.
pub fn er_sub_seed(seed: u64, attempt: usize) -> u64 {
    (0..attempt).fold(seed, |s, _| mix64(s))
}

/// One Erdős–Rényi draw: pairs `(i, j)`, `i < j`, in lexicographic order, each
/// kept when a uniform from stream `(sub_seed, 0, 0)` falls below `prob`.
fn sample_er(n: usize, prob: f64, sub_seed: u64) -> Result<Graph, NetworkError> {
    let mut stream = Stream::new(StreamKey::new(sub_seed, 0, 0));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if stream.uniform() < prob {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, edges)
}

pub fn build_graph(topology: Topology, n: usize) -> Result<Graph, NetworkError> {
    if n == 0 {
        return Err(NetworkError::Empty);
    }
    match topology {
        Topology::Ring => {
            let edges = (0..n).filter(|_| n > 1).map(|i| (i, (i + 1) % n));
            Graph::from_edges(n, edges)
        }
        Topology::Path => Graph::from_edges(n, (1..n).map(|i| (i - 1, i))),
        Topology::Complete => {
            Graph::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
        }
        Topology::Lattice { rows, cols } => {
            if rows * cols != n {
                return Err(NetworkError::LatticeShape { rows, cols, n });
            }
            let id = |r: usize, c: usize| r * cols + c;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        edges.push((id(r, c), id(r, c + 1)));
                    }
                    if r + 1 < rows {
                        edges.push((id(r, c), id(r + 1, c)));
                    }
                }
            }
            Graph::from_edges(n, edges)
        }
        Topology::ErdosRenyi { prob, seed } => {
            if !(0.0..=1.0).contains(&prob) {
                return Err(NetworkError::Probability(prob));
            }
            let mut tried = Vec::with_capacity(ER_RETRY_BUDGET);
            for attempt in 0..ER_RETRY_BUDGET {
                let sub = er_sub_seed(seed, attempt);
                let mut g = sample_er(n, prob, sub)?;
                if g.is_connected() {
                    g.accepted_seed = Some(sub);
                    return Ok(g);
                }
                tried.push(sub);
            }
            Err(NetworkError::ErdosRenyiDisconnected { seeds: tried })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixingKind {
    /// Consensus weights `W`.
    Consensus,
    /// Gossip partner probabilities `Π`.
    Gossip,
    /// Expected gossip matrix `W̄ = E[W_kᵀ W_k]`.
    ExpectedGossip,
}

impl fmt::Display for MixingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixingKind::Consensus => "consensus-W",
            MixingKind::Gossip => "gossip-Pi",
            MixingKind::ExpectedGossip => "expected-gossip-Wbar",
        })
    }
}

/// Square nonnegative matrix with cached `ρ = ‖M - (1/n)11ᵀ‖₂` and a sparse
/// row view for applying it to stacked iterates.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    kind: MixingKind,
    entries: DMatrix<f64>,
    rho: f64,
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    pub fn new(kind: MixingKind, entries: DMatrix<f64>) -> Self {
        assert!(entries.is_square(), "mixing matrix must be square");
        let rho = spectral_gap(&entries);
        let rows = (0..entries.nrows())
            .map(|i| {
                (0..entries.ncols())
                    .filter(|&j| entries[(i, j)] != 0.0)
                    .map(|j| (j, entries[(i, j)]))
                    .collect()
            })
            .collect();
        Self { kind, entries, rho, rows }
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Spectral norm of `M - (1/n) 1 1ᵀ`.
    pub fn spectral_gap_norm(&self) -> f64 {
        self.rho
    }

    /// Nonzero entries of row `i`, diagonal included, by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Number of unordered agent pairs carrying weight in either direction.
    pub fn support_edge_count(&self) -> usize {
        let n = self.n();
        (0..n)
            .map(|i| {
                (i + 1..n)
                    .filter(|&j| self.entries[(i, j)] != 0.0 || self.entries[(j, i)] != 0.0)
                    .count()
            })
            .sum()
    }

    /// `‖M - I‖_F`.
    pub fn distance_to_identity_frobenius(&self) -> f64 {
        let n = self.n();
        (&self.entries - DMatrix::<f64>::identity(n, n)).norm()
    }

    /// `‖M - I‖₂`.
    pub fn distance_to_identity_spectral(&self) -> f64 {
        let n = self.n();
        spectral_norm(&(&self.entries - DMatrix::<f64>::identity(n, n)))
    }

    /// Multiply the stacked iterate `x` (rows = agents) by this matrix.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n());
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for c in 0..x.ncols() {
                    out[(i, c)] += w * x[(j, c)];
                }
            }
        }
        out
    }
}

/// Spectral norm of `m - (1/n) 1 1ᵀ`. For symmetric `m` this is the largest
/// absolute eigenvalue once the consensus direction is deflated.
pub fn spectral_gap(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    spectral_norm(&(m - averaging_matrix(n)))
}

fn metropolis_entries(g: &Graph, lazy: bool) -> DMatrix<f64> {
    let n = g.n();
    let scale = if lazy { 0.5 } else { 1.0 };
    let mut w = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        let v = scale / g.degree(i).max(g.degree(j)) as f64;
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = g.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        // A node whose neighbours all have lower degree sums to 1 up to rounding.
        w[(i, i)] = (1.0 - off).max(0.0);
    }
    w
}

/// Metropolis (or lazy Metropolis) weights without the contraction check.
pub fn metropolis_matrix(g: &Graph, lazy: bool, kind: MixingKind) -> MixingMatrix {
    MixingMatrix::new(kind, metropolis_entries(g, lazy))
}

/// Consensus weights `w_ij = 1/max{deg i, deg j}` on edges (halved when
/// `lazy`), remainder on the diagonal. Fails when the result does not contract
/// disagreement, which happens for plain Metropolis on bipartite regular graphs.
pub fn metropolis_weights(g: &Graph, lazy: bool) -> Result<MixingMatrix, NetworkError> {
    if !g.is_connected() {
        return Err(NetworkError::Disconnected);
    }
    let w = metropolis_matrix(g, lazy, MixingKind::Consensus);
    if w.spectral_gap_norm() >= 1.0 - CONTRACTION_TOL {
        return Err(NetworkError::NotContractive { rho: w.spectral_gap_norm() });
    }
    Ok(w)
}

/// Gossip partner probabilities built with the Metropolis rule.
pub fn gossip_probabilities(g: &Graph, lazy: bool) -> Result<MixingMatrix, NetworkError> {
    if !g.is_connected() {
        return Err(NetworkError::Disconnected);
    }
    Ok(metropolis_matrix(g, lazy, MixingKind::Gossip))
}

fn stochastic_residuals(m: &DMatrix<f64>) -> (f64, f64) {
    let row = m
        .row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let col = m
        .column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    (row, col)
}

/// `ρ_w̄` predicted from `λ₂((Π+Πᵀ)/2)`; `None` for a single agent.
pub fn expected_gossip_identity(pi: &DMatrix<f64>) -> Option<f64> {
    let n = pi.nrows();
    if n < 2 {
        return None;
    }
    let sym = (pi + pi.transpose()) * 0.5;
    let lambda2 = symmetric_eigenvalues(&sym)[1];
    Some(1.0 - 1.0 / n as f64 + lambda2 / n as f64)
}

/// `W̄ = (1 - 1/n) I + (Π + Πᵀ)/(2n)`, cross-checked against the `λ₂` identity.
pub fn gossip_expected_matrix(pi: &MixingMatrix) -> Result<MixingMatrix, NetworkError> {
    if pi.kind() != MixingKind::Gossip {
        return Err(NetworkError::WrongKind { expected: MixingKind::Gossip, got: pi.kind() });
    }
    let (row, col) = stochastic_residuals(pi.entries());
    if row > STOCHASTIC_TOL || col > STOCHASTIC_TOL {
        return Err(NetworkError::NotDoublyStochastic { row, col });
    }
    let n = pi.n();
    let nf = n as f64;
    let p = pi.entries();
    let wbar = DMatrix::<f64>::identity(n, n) * (1.0 - 1.0 / nf) + (p + p.transpose()) / (2.0 * nf);
    let out = MixingMatrix::new(MixingKind::ExpectedGossip, wbar);
    if let Some(identity) = expected_gossip_identity(p) {
        if (out.spectral_gap_norm() - identity).abs() > EXPECTED_GOSSIP_TOL {
            return Err(NetworkError::ExpectedGossipIdentity { rho: out.spectral_gap_norm(), identity });
        }
    }
    Ok(out)
}

/// Structural and spectral checks of a mixing matrix against its graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingDiagnostics {
    pub kind: MixingKind,
    pub shape_matches: bool,
    pub max_row_residual: f64,
    pub max_col_residual: f64,
    pub negative_entries: usize,
    /// Off-diagonal positive entries on pairs that are not graph edges.
    pub pattern_violations: Vec<(usize, usize)>,
    pub has_positive_diagonal: bool,
    pub min_diagonal: f64,
    pub spectral_gap_norm: f64,
    /// `ρ` of `W̄` when the matrix is a gossip `Π`.
    pub expected_gossip_rho: Option<f64>,
    pub contractive: bool,
    pub passed: bool,
}

impl fmt::Display for MixingDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kind={}", self.kind)?;
        writeln!(f, "verdict={}", if self.passed { "pass" } else { "fail" })?;
        writeln!(f, "max_row_residual={:e}", self.max_row_residual)?;
        writeln!(f, "max_col_residual={:e}", self.max_col_residual)?;
        writeln!(f, "negative_entries={}", self.negative_entries)?;
        writeln!(f, "pattern_violations={}", self.pattern_violations.len())?;
        writeln!(f, "has_positive_diagonal={}", self.has_positive_diagonal)?;
        writeln!(f, "spectral_gap_norm={}", self.spectral_gap_norm)?;
        if let Some(r) = self.expected_gossip_rho {
            writeln!(f, "expected_gossip_rho={r}")?;
        }
        write!(f, "contractive={}", self.contractive)
    }
}

/// Never fails; the caller decides what to do with a failing verdict.
///
/// The verdict relies on the computed spectral norm being below one rather
/// than on a positive diagonal entry, which only suffices for contraction.
/// For a gossip `Π`, contraction is judged on `W̄`, the matrix that drives
/// GSGT; `spectral_gap_norm` still reports `Π`'s own norm.
pub fn validate_mixing(m: &MixingMatrix, g: &Graph) -> MixingDiagnostics {
    let n = m.n();
    let e = m.entries();
    let shape_matches = n == g.n();
    let (max_row_residual, max_col_residual) = stochastic_residuals(e);
    let negative_entries = e.iter().filter(|&&v| v < 0.0).count();
    let mut pattern_violations = Vec::new();
    if shape_matches {
        for i in 0..n {
            for j in 0..n {
                if i != j && e[(i, j)] > 0.0 && !g.has_edge(i, j) {
                    pattern_violations.push((i, j));
                }
            }
        }
    }
    let min_diagonal = (0..n).map(|i| e[(i, i)]).fold(f64::INFINITY, f64::min);
    let has_positive_diagonal = (0..n).any(|i| e[(i, i)] > 0.0);
    let expected_gossip_rho = (m.kind() == MixingKind::Gossip).then(|| {
        let nf = n as f64;
        let wbar = DMatrix::<f64>::identity(n, n) * (1.0 - 1.0 / nf) + (e + e.transpose()) / (2.0 * nf);
        spectral_gap(&wbar)
    });
    let governing = expected_gossip_rho.unwrap_or(m.spectral_gap_norm());
    let contractive = n == 1 || governing < 1.0 - CONTRACTION_TOL;
    let passed = shape_matches
        && max_row_residual <= STOCHASTIC_TOL
        && max_col_residual <= STOCHASTIC_TOL
        && negative_entries == 0
        && pattern_violations.is_empty()
        && contractive;
    MixingDiagnostics {
        kind: m.kind(),
        shape_matches,
        max_row_residual,
        max_col_residual,
        negative_entries,
        pattern_violations,
        has_positive_diagonal,
        min_diagonal,
        spectral_gap_norm: m.spectral_gap_norm(),
        expected_gossip_rho,
        contractive,
        passed,
    }
}

/// Whether `m` is symmetric to working precision.
pub fn is_symmetric_mixing(m: &MixingMatrix) -> bool {
    is_symmetric(m.entries(), 1e-15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_four() {
        let g = build_graph(Topology::Ring, 4).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 3), (1, 2), (2, 3)]);
        assert_eq!(g.degrees(), vec![2; 4]);
    }

    #[test]
    fn complete_three() {
        let g = build_graph(Topology::Complete, 3).unwrap();
        assert_eq!(g.edge_count(), 3);
        assert_eq!(g.degrees(), vec![2; 3]);
    }

    #[test]
    fn small_rings_and_singletons() {
        assert_eq!(build_graph(Topology::Ring, 1).unwrap().edge_count(), 0);
        assert_eq!(build_graph(Topology::Ring, 2).unwrap().edge_count(), 1);
        assert!(build_graph(Topology::Path, 1).unwrap().is_connected());
        assert_eq!(build_graph(Topology::Ring, 0), Err(NetworkError::Empty));
    }

    #[test]
    fn lattice_shape() {
        let g = build_graph(Topology::Lattice { rows: 2, cols: 3 }, 6).unwrap();
        assert_eq!(g.edge_count(), 7);
        assert!(g.is_connected());
        assert!(matches!(
            build_graph(Topology::Lattice { rows: 2, cols: 3 }, 5),
            Err(NetworkError::LatticeShape { .. })
        ));
    }

    #[test]
    fn erdos_renyi_matches_replayed_bernoulli_stream() {
        let g = build_graph(Topology::ErdosRenyi { prob: 0.4, seed: 7 }, 10).unwrap();
        assert!(g.is_connected());
        let sub = g.accepted_seed().unwrap();
        // Independent replay: the raw ChaCha8 stream, one f64 per pair.
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        rng.set_stream(0);
        let mut pairs = 0;
        for i in 0..10 {
            for j in i + 1..10 {
                let keep = rng.random::<f64>() < 0.4;
                assert_eq!(keep, g.has_edge(i, j), "pair ({i},{j})");
                pairs += 1;
            }
        }
        assert_eq!(pairs, 45);
    }

    #[test]
    fn erdos_renyi_failure_reports_seeds() {
        match build_graph(Topology::ErdosRenyi { prob: 0.0, seed: 1 }, 5) {
            Err(NetworkError::ErdosRenyiDisconnected { seeds }) => {
                assert_eq!(seeds.len(), ER_RETRY_BUDGET);
                assert_eq!(seeds[0], 1);
                assert_eq!(seeds[1], er_sub_seed(1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            build_graph(Topology::ErdosRenyi { prob: 1.5, seed: 1 }, 5),
            Err(NetworkError::Probability(_))
        ));
    }

    #[test]
    fn topology_grammar() {
        for s in ["ring", "path", "lattice:3x4", "complete", "er:0.4:7"] {
            let t: Topology = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        for s in ["rings", "lattice:3", "er:0.4", "er:x:1", "ring:1"] {
            assert!(s.parse::<Topology>().is_err(), "{s}");
        }
    }

    #[test]
    fn lazy_path_two_is_averaging() {
        let g = build_graph(Topology::Path, 2).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        for v in w.entries().iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(w.spectral_gap_norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lazy_ring_four_against_dft() {
        let g = build_graph(Topology::Ring, 4).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let first: Vec<f64> = (0..4).map(|j| w.get(0, j)).collect();
        assert_eq!(first, vec![0.5, 0.25, 0.0, 0.25]);
        // Circulant eigenvalues: c0 + c1 e^{iθ} + c3 e^{-iθ} = 1/2 + cos(θ)/2, θ = 2πk/4.
        let oracle = (1..4)
            .map(|k| (0.5 + 0.5 * (std::f64::consts::PI * k as f64 / 2.0).cos()).abs())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(oracle, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.spectral_gap_norm(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn complete_three_non_lazy() {
        let g = build_graph(Topology::Complete, 3).unwrap();
        let w = metropolis_weights(&g, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert_abs_diff_eq!(w.get(i, j), want, epsilon = 1e-15);
            }
        }
        // Eigenvalues {1, -1/2, -1/2}.
        let ev = symmetric_eigenvalues(w.entries());
        assert_abs_diff_eq!(ev[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[2], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w.spectral_gap_norm(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn non_lazy_two_path_is_rejected() {
        let g = build_graph(Topology::Path, 2).unwrap();
        assert!(matches!(metropolis_weights(&g, false), Err(NetworkError::NotContractive { .. })));
        let raw = metropolis_matrix(&g, false, MixingKind::Consensus);
        let d = validate_mixing(&raw, &g);
        assert!(!d.passed);
        assert_abs_diff_eq!(d.spectral_gap_norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn disconnected_graph_rejected() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert_eq!(metropolis_weights(&g, true).unwrap_err(), NetworkError::Disconnected);
    }

    #[test]
    fn spectral_gap_examples() {
        assert_abs_diff_eq!(spectral_gap(&averaging_matrix(5)), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(spectral_gap(&DMatrix::identity(3, 3)), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn lazy_metropolis_validates_with_heavy_diagonal() {
        let g = build_graph(Topology::ErdosRenyi { prob: 0.3, seed: 11 }, 12).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let d = validate_mixing(&w, &g);
        assert!(d.passed, "{d}");
        assert!(d.min_diagonal >= 0.5 - 1e-15);
    }

    #[test]
    fn averaging_on_complete_passes() {
        let g = build_graph(Topology::Complete, 4).unwrap();
        let m = MixingMatrix::new(MixingKind::Consensus, averaging_matrix(4));
        assert!(validate_mixing(&m, &g).passed);
    }

    #[test]
    fn pattern_violation_detected() {
        let g = build_graph(Topology::Path, 3).unwrap();
        let m = MixingMatrix::new(MixingKind::Consensus, averaging_matrix(3));
        let d = validate_mixing(&m, &g);
        assert!(!d.passed);
        assert_eq!(d.pattern_violations, vec![(0, 2), (2, 0)]);
    }

    #[test]
    fn expected_gossip_two_agents() {
        let pi = MixingMatrix::new(MixingKind::Gossip, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let wbar = gossip_expected_matrix(&pi).unwrap();
        // (1 - 1/2) I + (Π + Πᵀ)/4 by hand.
        for v in wbar.entries().iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(wbar.spectral_gap_norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wbar.spectral_gap_norm(), 1.0 - 2.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_gossip_identity_pi() {
        let g = build_graph(Topology::Ring, 5).unwrap();
        let pi = MixingMatrix::new(MixingKind::Gossip, DMatrix::identity(5, 5));
        let wbar = gossip_expected_matrix(&pi).unwrap();
        assert_eq!(wbar.entries(), &DMatrix::<f64>::identity(5, 5));
        assert_abs_diff_eq!(wbar.spectral_gap_norm(), 1.0, epsilon = 1e-12);
        let d = validate_mixing(&pi, &g);
        assert!(!d.contractive && !d.passed);
    }

    #[test]
    fn expected_gossip_lazy_ring_four_in_range() {
        let g = build_graph(Topology::Ring, 4).unwrap();
        let pi = gossip_probabilities(&g, true).unwrap();
        let wbar = gossip_expected_matrix(&pi).unwrap();
        let rho = wbar.spectral_gap_norm();
        // Eigenvalues of the symmetric lazy ring Π are {1, 1/2, 1/2, 0}; λ₂ = 1/2.
        assert_abs_diff_eq!(rho, 1.0 - 0.25 + 0.5 / 4.0, epsilon = 1e-12);
        assert!((0.5..1.0).contains(&rho));
    }

    #[test]
    fn expected_gossip_rejects_consensus_kind() {
        let g = build_graph(Topology::Ring, 4).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        assert!(matches!(gossip_expected_matrix(&w), Err(NetworkError::WrongKind { .. })));
    }

    #[test]
    fn apply_matches_dense_product() {
        let g = build_graph(Topology::ErdosRenyi { prob: 0.5, seed: 3 }, 7).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let x = DMatrix::from_fn(7, 3, |i, j| (i * 3 + j) as f64 * 0.37 - 1.0);
        let dense = w.entries() * &x;
        assert!((w.apply(&x) - dense).norm() < 1e-13);
    }

    #[test]
    fn support_edges_match_graph() {
        let g = build_graph(Topology::Lattice { rows: 3, cols: 3 }, 9).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        assert_eq!(w.support_edge_count(), g.edge_count());
        assert!((w.distance_to_identity_frobenius() - w.distance_to_identity_spectral()) >= -1e-12);
    }
}
