//! Graph algebra: oriented incidence matrix, Laplacian and the edge-coordinate
//! transform `η = V Bᵀ θ` with `V = W^½`.
//!
//! Edges are stored with `tail < head`. Column `e` of the incidence matrix has
//! `+1` in the tail row and `-1` in the head row, so `(Bᵀθ)_e = θ_tail − θ_head`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_len, Error, Result};

/// Singular values (or eigenvalues) below `RANK_TOL · largest` count as zero.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub weight: f64,
}

/// A simple, connected, undirected graph with positive edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl NetworkGraph {
    /// Builds a graph from `(i, j, weight)` triples.
    ///
    /// Each pair is reoriented so that the lower index is the tail. Self-loops,
    /// duplicate edges, out-of-range nodes and non-positive weights are
    /// rejected, as is a disconnected edge set.
    pub fn new<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if n < 2 {
            return Err(Error::Validation(format!(
                "a network needs at least 2 nodes, got {n}"
            )));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (k, (i, j, w)) in edges.into_iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::Validation(format!(
                    "edge {k} ({i}, {j}) references a node outside 0..{n}"
                )));
            }
            if i == j {
                return Err(Error::Validation(format!("edge {k} is a self-loop on node {i}")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Validation(format!(
                    "edge {k} ({i}, {j}) has non-positive weight {w}"
                )));
            }
            let (tail, head) = if i < j { (i, j) } else { (j, i) };
            if !seen.insert((tail, head)) {
                return Err(Error::Validation(format!(
                    "edge {k} duplicates ({tail}, {head})"
                )));
            }
            out.push(Edge {
                tail,
                head,
                weight: w,
            });
        }
        let g = Self { n, edges: out };
        if !g.is_connected() {
            return Err(Error::Structural(format!(
                "graph with {n} nodes and {} edges is not connected",
                g.edges.len()
            )));
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// A connected graph is a tree iff it has exactly `n − 1` edges.
    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.n
    }

    fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.edges {
            adj[e.tail].push(e.head);
            adj[e.head].push(e.tail);
        }
        let mut visited = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    pub fn transform(&self) -> EdgeTransform {
        EdgeTransform::new(self)
    }
}

/// Incidence matrix `B`, square-root weights `V`, Laplacian `L = B V V Bᵀ`
/// and the edge map `V Bᵀ`, all dense.
#[derive(Debug, Clone)]
pub struct EdgeTransform {
    incidence: DMatrix<f64>,
    sqrt_weights: DVector<f64>,
    laplacian: DMatrix<f64>,
    edge_map: DMatrix<f64>,
    // Cholesky factor of L + 𝟙𝟙ᵀ/n, nonsingular for connected graphs.
    grounded: Cholesky<f64, Dyn>,
}

impl EdgeTransform {
    pub fn new(g: &NetworkGraph) -> Self {
        let n = g.node_count();
        let e = g.edge_count();
        let mut incidence = DMatrix::zeros(n, e);
        let mut sqrt_weights = DVector::zeros(e);
        let mut laplacian = DMatrix::zeros(n, n);
        for (k, edge) in g.edges().iter().enumerate() {
            incidence[(edge.tail, k)] = 1.0;
            incidence[(edge.head, k)] = -1.0;
            sqrt_weights[k] = edge.weight.sqrt();
            // Assemble L from the weights directly so that L𝟙 = 0 holds exactly.
            let w = edge.weight;
            laplacian[(edge.tail, edge.tail)] += w;
            laplacian[(edge.head, edge.head)] += w;
            laplacian[(edge.tail, edge.head)] -= w;
            laplacian[(edge.head, edge.tail)] -= w;
        }
        let mut edge_map = incidence.transpose();
        for (k, mut row) in edge_map.row_iter_mut().enumerate() {
            row *= sqrt_weights[k];
        }
        let shifted = &laplacian + DMatrix::from_element(n, n, 1.0 / n as f64);
        let grounded = Cholesky::new(shifted)
            .expect("L + 𝟙𝟙ᵀ/n is positive definite for a connected graph");
        Self {
            incidence,
            sqrt_weights,
            laplacian,
            edge_map,
            grounded,
        }
    }

    pub fn node_count(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.incidence.ncols()
    }

    /// `B`, n × e.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Diagonal of `V`, i.e. `√w_e`.
    pub fn sqrt_weights(&self) -> &DVector<f64> {
        &self.sqrt_weights
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// `V Bᵀ`, e × n.
    pub fn edge_map(&self) -> &DMatrix<f64> {
        &self.edge_map
    }

    /// `η = V Bᵀ θ`.
    pub fn to_edge_coords(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("theta", self.node_count(), theta.len())?;
        Ok(&self.edge_map * theta)
    }

    /// `B V η`, the network injection produced by edge coordinates.
    pub fn from_edge_coords(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("eta", self.edge_count(), eta.len())?;
        Ok(self.edge_map.tr_mul(eta))
    }

    /// Zero-mean `θ` with `L θ = rhs`. The right-hand side must be orthogonal
    /// to `𝟙`; its consensus component is ignored otherwise.
    pub fn solve_laplacian(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("rhs", self.node_count(), rhs.len())?;
        let theta = self.grounded.solve(&project_off_consensus(rhs));
        Ok(project_off_consensus(&theta))
    }

    /// Euclidean distance from `η` to `Im(V Bᵀ)`.
    pub fn distance_to_image(&self, eta: &DVector<f64>) -> Result<f64> {
        let theta = self.solve_laplacian(&self.from_edge_coords(eta)?)?;
        Ok((eta - &self.edge_map * theta).norm())
    }
}

pub fn build_transform(g: &NetworkGraph) -> EdgeTransform {
    EdgeTransform::new(g)
}

/// `v − mean(v) 𝟙`.
pub fn project_off_consensus(v: &DVector<f64>) -> DVector<f64> {
    if v.is_empty() {
        return v.clone();
    }
    let mean = v.mean();
    v.map(|x| x - mean)
}

/// Number of singular values above `RANK_TOL` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}
