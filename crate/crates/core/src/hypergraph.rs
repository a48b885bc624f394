//! Spatio-temporal hypergraph: one hyperedge per occupied (region, interval) cell.

use std::path::Path;
use std::rc::Rc;

use crate::error::{contract, Result};
use crate::io;
use crate::mobility::Population;
use crate::tensor::{sigmoid, SparseMatrix, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct StHypergraph {
    n_nodes: usize,
    n_regions: usize,
    n_intervals: usize,
    /// (region, interval) per edge, ordered by interval then region.
    cells: Vec<(usize, usize)>,
    edge_of_cell: Vec<u32>,
    edge_ptr: Vec<usize>,
    edge_members: Vec<usize>,
    node_ptr: Vec<usize>,
    node_edges: Vec<usize>,
}

const NO_EDGE: u32 = u32::MAX;

impl StHypergraph {
    /// Hypergraph over each user's reported visits.
    pub fn build(pop: &Population) -> Result<Self> {
        if pop.is_empty() {
            return Err(contract(
                "cannot build a hypergraph over an empty population",
            ));
        }
        let visits = pop
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(u, tr)| tr.reported().map(move |(t, r)| (u, t, r)));
        Ok(Self::from_visits(
            pop.n_users(),
            pop.n_regions,
            pop.n_intervals,
            visits,
        ))
    }

    /// Builds from `(user, interval, region)` memberships; repeats are ignored.
    pub fn from_visits(
        n_nodes: usize,
        n_regions: usize,
        n_intervals: usize,
        visits: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Self {
        let mut pairs: Vec<(usize, usize, usize)> = visits
            .into_iter()
            .map(|(u, t, r)| {
                assert!(
                    u < n_nodes && t < n_intervals && r < n_regions,
                    "visit out of range"
                );
                (t, r, u)
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();

        let mut cells = Vec::new();
        let mut edge_of_cell = vec![NO_EDGE; n_regions * n_intervals];
        let mut edge_ptr = vec![0];
        let mut edge_members = Vec::with_capacity(pairs.len());
        for &(t, r, u) in &pairs {
            if cells.last() != Some(&(r, t)) {
                if !cells.is_empty() {
                    edge_ptr.push(edge_members.len());
                }
                edge_of_cell[t * n_regions + r] = cells.len() as u32;
                cells.push((r, t));
            }
            edge_members.push(u);
        }
        if !cells.is_empty() {
            edge_ptr.push(edge_members.len());
        }

        let mut node_count = vec![0usize; n_nodes + 1];
        for &u in &edge_members {
            node_count[u + 1] += 1;
        }
        for i in 0..n_nodes {
            node_count[i + 1] += node_count[i];
        }
        let node_ptr = node_count.clone();
        let mut fill = node_count;
        let mut node_edges = vec![0; edge_members.len()];
        for e in 0..cells.len() {
            for &u in &edge_members[edge_ptr[e]..edge_ptr[e + 1]] {
                node_edges[fill[u]] = e;
                fill[u] += 1;
            }
        }
        Self {
            n_nodes,
            n_regions,
            n_intervals,
            cells,
            edge_of_cell,
            edge_ptr,
            edge_members,
            node_ptr,
            node_edges,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.cells.len()
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    /// `(region, interval)` of edge `e`.
    pub fn cell(&self, e: usize) -> (usize, usize) {
        self.cells[e]
    }

    pub fn edge_id(&self, region: usize, t: usize) -> Option<usize> {
        match self.edge_of_cell[t * self.n_regions + region] {
            NO_EDGE => None,
            e => Some(e as usize),
        }
    }

    /// Sorted member nodes of edge `e`.
    pub fn members(&self, e: usize) -> &[usize] {
        &self.edge_members[self.edge_ptr[e]..self.edge_ptr[e + 1]]
    }

    /// Edges containing node `u`, ordered by interval then region.
    pub fn incident(&self, u: usize) -> &[usize] {
        &self.node_edges[self.node_ptr[u]..self.node_ptr[u + 1]]
    }

    pub fn node_degree(&self, u: usize) -> usize {
        self.node_ptr[u + 1] - self.node_ptr[u]
    }

    pub fn edge_degree(&self, e: usize) -> usize {
        self.edge_ptr[e + 1] - self.edge_ptr[e]
    }

    pub fn node_degrees(&self) -> Vec<usize> {
        (0..self.n_nodes).map(|u| self.node_degree(u)).collect()
    }

    pub fn edge_degrees(&self) -> Vec<usize> {
        (0..self.n_edges()).map(|e| self.edge_degree(e)).collect()
    }

    /// `D_e^-1 H^T`: edge rows averaging their members.
    pub fn edge_mean(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.edge_members.len());
        for e in 0..self.n_edges() {
            let w = 1.0 / self.edge_degree(e) as f64;
            trip.extend(self.members(e).iter().map(|&u| (e, u, w)));
        }
        SparseMatrix::from_triplets(self.n_edges(), self.n_nodes, &trip)
    }

    /// `D_v^-1 H`: node rows averaging their incident edges; isolated nodes get a zero row.
    pub fn node_mean(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.node_edges.len());
        for u in 0..self.n_nodes {
            let d = self.node_degree(u);
            if d == 0 {
                continue;
            }
            let w = 1.0 / d as f64;
            trip.extend(self.incident(u).iter().map(|&e| (u, e, w)));
        }
        SparseMatrix::from_triplets(self.n_nodes, self.n_edges(), &trip)
    }

    /// Node rows averaging first within each interval, then across intervals:
    /// weight `1 / (T_u * M_{u,t})` on each incident edge.
    pub fn interval_mean(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.node_edges.len());
        for u in 0..self.n_nodes {
            let inc = self.incident(u);
            let mut groups: Vec<&[usize]> = Vec::new();
            let mut start = 0;
            for i in 1..=inc.len() {
                if i == inc.len() || self.cells[inc[i]].1 != self.cells[inc[start]].1 {
                    groups.push(&inc[start..i]);
                    start = i;
                }
            }
            let t_u = groups.len() as f64;
            for g in groups {
                let w = 1.0 / (t_u * g.len() as f64);
                trip.extend(g.iter().map(|&e| (u, e, w)));
            }
        }
        SparseMatrix::from_triplets(self.n_nodes, self.n_edges(), &trip)
    }

    /// Dense 0/1 incidence `H` (nodes x edges), for small oracle checks only.
    pub fn incidence_dense(&self) -> Tensor {
        let mut h = vec![0.0; self.n_nodes * self.n_edges().max(1)];
        let cols = self.n_edges().max(1);
        for e in 0..self.n_edges() {
            for &u in self.members(e) {
                h[u * cols + e] = 1.0;
            }
        }
        Tensor::matrix(self.n_nodes, cols, h)
    }

    pub fn export_debug(&self, path: &Path) -> Result<()> {
        let rows = (0..self.n_edges()).map(|e| {
            let (r, t) = self.cells[e];
            [e, r, t, self.edge_degree(e)]
        });
        io::write_csv(path, &["edge_id", "region", "t", "member_count"], rows)
    }
}

/// Sparse operators for one propagation step.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub edge_mean: Rc<SparseMatrix>,
    pub node_mean: Rc<SparseMatrix>,
}

impl Propagation {
    pub fn new(g: &StHypergraph) -> Self {
        Self {
            edge_mean: Rc::new(g.edge_mean()),
            node_mean: Rc::new(g.node_mean()),
        }
    }
}

/// Stacked hypergraph convolutions with identity edge weights and sigmoid activations.
pub fn hgnn_forward(g: &StHypergraph, x: &Tensor, thetas: &[Tensor]) -> Result<Tensor> {
    let em = g.edge_mean();
    let nm = g.node_mean();
    let mut h = x.clone();
    for theta in thetas {
        let edges = em.mul_dense(&h)?;
        let nodes = nm.mul_dense(&edges)?;
        h = nodes.matmul(theta)?.map(sigmoid);
    }
    Ok(h)
}
