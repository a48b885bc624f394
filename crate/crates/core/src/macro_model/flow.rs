use std::rc::Rc;

use crate::error::{contract, Result};
use crate::mobility::Population;
use crate::tensor::{DiffusionSupports, SparseMatrix};

/// Directed movement counts between consecutive intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    n_regions: usize,
    n_intervals: usize,
    /// Per interval `t < T - 1`: sorted `(from, to, count)` for moves `t -> t + 1`.
    moves: Vec<Vec<(usize, usize, u32)>>,
}

impl FlowGraph {
    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn moves(&self, t: usize) -> &[(usize, usize, u32)] {
        self.moves.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn weight(&self, t: usize, from: usize, to: usize) -> u32 {
        let m = self.moves(t);
        m.binary_search_by(|&(a, b, _)| (a, b).cmp(&(from, to)))
            .map_or(0, |i| m[i].2)
    }

    /// Row-normalized forward and transposed transition supports per interval;
    /// the last interval, which has no outgoing moves, uses the identity.
    pub fn supports(&self, k: usize) -> Vec<Rc<DiffusionSupports>> {
        (0..self.n_intervals)
            .map(|t| {
                if t + 1 >= self.n_intervals {
                    return Rc::new(DiffusionSupports::identity(self.n_regions, k));
                }
                let fwd: Vec<(usize, usize, f64)> = self.moves[t]
                    .iter()
                    .map(|&(a, b, c)| (a, b, f64::from(c)))
                    .collect();
                let bwd: Vec<(usize, usize, f64)> =
                    fwd.iter().map(|&(a, b, c)| (b, a, c)).collect();
                Rc::new(DiffusionSupports::new(
                    row_normalized(self.n_regions, &fwd),
                    row_normalized(self.n_regions, &bwd),
                    k,
                ))
            })
            .collect()
    }
}

/// Rows without mass become self-loops.
fn row_normalized(n: usize, trip: &[(usize, usize, f64)]) -> SparseMatrix {
    let mut out_deg = vec![0.0; n];
    for &(a, _, c) in trip {
        out_deg[a] += c;
    }
    let mut t: Vec<(usize, usize, f64)> = trip
        .iter()
        .map(|&(a, b, c)| (a, b, c / out_deg[a]))
        .collect();
    t.extend((0..n).filter(|&r| out_deg[r] == 0.0).map(|r| (r, r, 1.0)));
    SparseMatrix::from_triplets(n, n, &t)
}

/// Counts users seen at `r` in `t` and at `r'` in `t + 1`; gaps contribute nothing.
pub fn build_flow_graph(pop: &Population) -> Result<FlowGraph> {
    if pop.n_intervals < 2 {
        return Err(contract("flow graph needs at least two intervals"));
    }
    let mut moves: Vec<Vec<(usize, usize, u32)>> = vec![Vec::new(); pop.n_intervals - 1];
    let mut raw: Vec<Vec<(usize, usize)>> = vec![Vec::new(); pop.n_intervals - 1];
    for tr in &pop.trajectories {
        for (t, w) in tr.visits.windows(2).enumerate() {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                raw[t].push((a, b));
            }
        }
    }
    for (t, mut pairs) in raw.into_iter().enumerate() {
        pairs.sort_unstable();
        for (a, b) in pairs {
            match moves[t].last_mut() {
                Some(last) if (last.0, last.1) == (a, b) => last.2 += 1,
                _ => moves[t].push((a, b, 1)),
            }
        }
    }
    Ok(FlowGraph {
        n_regions: pop.n_regions,
        n_intervals: pop.n_intervals,
        moves,
    })
}
