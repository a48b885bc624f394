//! Pseudo-trajectory synthesis: mobility models, epidemic clustering and
//! cluster-constrained random walks, plus the three baseline generators.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::io;
use crate::mobility::{Population, RegionGeometry, Trajectory};
use crate::rng::{domain, stream};

/// Visit distribution per interval and a row-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityModel {
    pub visit_dist: Vec<Vec<f64>>,
    pub transition: Vec<Vec<f64>>,
}

impl MobilityModel {
    pub fn n_regions(&self) -> usize {
        self.transition.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.visit_dist.len()
    }

    pub fn uniform(m: usize, t: usize) -> Self {
        Self {
            visit_dist: vec![vec![1.0 / m as f64; m]; t],
            transition: vec![vec![1.0 / m as f64; m]; m],
        }
    }

    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        let rows = self.visit_dist.iter().chain(&self.transition);
        for (i, row) in rows.enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol || row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(contract(format!("row {i} is not a distribution (sum {s})")));
            }
        }
        Ok(())
    }
}

fn normalize_or_uniform(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|p| *p /= s);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|p| *p = u);
    }
}

/// Consecutive reported pairs `(from, to)`.
fn moves(tr: &Trajectory) -> impl Iterator<Item = (usize, usize)> + '_ {
    tr.visits.windows(2).filter_map(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    })
}

/// Empirical model of one user. Unreported intervals and unvisited rows are uniform.
pub fn fit_user_model(tr: &Trajectory, n_regions: usize) -> MobilityModel {
    let m = n_regions;
    let visit_dist = tr
        .visits
        .iter()
        .map(|v| match v {
            Some(r) => {
                let mut row = vec![0.0; m];
                row[*r] = 1.0;
                row
            }
            None => vec![1.0 / m as f64; m],
        })
        .collect();
    let mut transition = vec![vec![0.0; m]; m];
    if tr.n_reported() >= 2 {
        for (a, b) in moves(tr) {
            transition[a][b] += 1.0;
        }
    }
    for row in &mut transition {
        normalize_or_uniform(row);
    }
    MobilityModel {
        visit_dist,
        transition,
    }
}

/// Population model: users' transition rows weighted by how often each user
/// occupies the row's region, plus a distance-decay floor, rows renormalized.
pub fn fit_aggregate_model(
    users: &[Trajectory],
    n_regions: usize,
    n_intervals: usize,
    epsilon_floor: f64,
    geo: &RegionGeometry,
) -> Result<MobilityModel> {
    if users.is_empty() {
        return Err(contract("aggregate model needs at least one user"));
    }
    if epsilon_floor < 0.0 {
        return Err(contract("epsilon_floor must be non-negative"));
    }
    let m = n_regions;
    let n = users.len() as f64;
    let mut visit = vec![vec![0.0; m]; n_intervals];
    let mut reporters = vec![0usize; n_intervals];
    let mut trans = vec![vec![0.0; m]; m];
    let mut counts = vec![0.0; m];
    let mut out_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for tr in users {
        let total = tr.n_reported();
        if total == 0 {
            continue;
        }
        counts.iter_mut().for_each(|c| *c = 0.0);
        for (t, r) in tr.reported() {
            visit[t][r] += 1.0;
            reporters[t] += 1;
            counts[r] += 1.0;
        }
        out_rows.iter_mut().for_each(Vec::clear);
        if total >= 2 {
            for (a, b) in moves(tr) {
                out_rows[a].push((b, 1.0));
            }
        }
        for r in 0..m {
            if counts[r] == 0.0 {
                continue;
            }
            let w = counts[r] / total as f64 / n;
            let row = &out_rows[r];
            if row.is_empty() {
                let share = w / m as f64;
                trans[r].iter_mut().for_each(|p| *p += share);
            } else {
                let share = w / row.len() as f64;
                for &(b, c) in row {
                    trans[r][b] += share * c;
                }
            }
        }
    }
    for (t, row) in visit.iter_mut().enumerate() {
        if reporters[t] > 0 {
            let k = reporters[t] as f64;
            row.iter_mut().for_each(|p| *p /= k);
        }
        normalize_or_uniform(row);
    }
    for (a, row) in trans.iter_mut().enumerate() {
        if epsilon_floor > 0.0 {
            for (b, p) in row.iter_mut().enumerate() {
                *p += epsilon_floor * geo.distance(a, b).max(1.0).powi(-2);
            }
        }
        normalize_or_uniform(row);
    }
    Ok(MobilityModel {
        visit_dist: visit,
        transition: trans,
    })
}

/// Negated total absolute case difference plus a proximity bonus.
pub fn epidemic_similarity(
    cases_a: &[f64],
    cases_b: &[f64],
    d: f64,
    gamma: f64,
    min_d: f64,
) -> f64 {
    assert_eq!(cases_a.len(), cases_b.len(), "case series lengths differ");
    let diff: f64 = cases_a
        .iter()
        .zip(cases_b)
        .map(|(a, b)| (a - b).abs())
        .sum();
    let d = if d > 0.0 { d } else { min_d };
    -diff + gamma / (d * d)
}

/// Full pairwise similarity matrix over regions.
pub fn similarity_matrix(cases: &[Vec<f64>], geo: &RegionGeometry, gamma: f64) -> Vec<Vec<f64>> {
    let m = cases.len();
    let min_d = geo.min_positive_distance();
    let mut s = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a..m {
            let v = epidemic_similarity(&cases[a], &cases[b], geo.distance(a, b), gamma, min_d);
            s[a][b] = v;
            s[b][a] = v;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpidemicClustering {
    pub cluster_of: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
}

impl EpidemicClustering {
    pub fn singletons(m: usize) -> Self {
        Self {
            cluster_of: (0..m).collect(),
            clusters: (0..m).map(|r| vec![r]).collect(),
        }
    }

    pub fn members_of(&self, region: usize) -> &[usize] {
        &self.clusters[self.cluster_of[region]]
    }
}

/// Average-linkage agglomeration down to `k` clusters. Among equally similar
/// pairs the one with the smallest cluster ids merges first.
pub fn cluster_regions(sim: &[Vec<f64>], k: usize) -> Result<EpidemicClustering> {
    let m = sim.len();
    if k == 0 || k > m {
        return Err(contract(format!("k={k} must lie in [1, {m}]")));
    }
    let mut link: Vec<Vec<f64>> = sim.to_vec();
    let mut size = vec![1usize; m];
    let mut members: Vec<Vec<usize>> = (0..m).map(|r| vec![r]).collect();
    let mut alive: Vec<usize> = (0..m).collect();
    while alive.len() > k {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (ia, &a) in alive.iter().enumerate() {
            for &b in &alive[ia + 1..] {
                if link[a][b] > best.0 {
                    best = (link[a][b], a, b);
                }
            }
        }
        let (_, a, b) = best;
        for &c in &alive {
            if c != a && c != b {
                let v = (size[a] as f64 * link[a][c] + size[b] as f64 * link[b][c])
                    / (size[a] + size[b]) as f64;
                link[a][c] = v;
                link[c][a] = v;
            }
        }
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        alive.retain(|&c| c != b);
    }
    let mut clusters: Vec<Vec<usize>> = alive
        .iter()
        .map(|&a| {
            let mut c = members[a].clone();
            c.sort_unstable();
            c
        })
        .collect();
    clusters.sort_by_key(|c| c[0]);
    let mut cluster_of = vec![0; m];
    for (ci, c) in clusters.iter().enumerate() {
        for &r in c {
            cluster_of[r] = ci;
        }
    }
    Ok(EpidemicClustering {
        cluster_of,
        clusters,
    })
}

pub fn default_k(m: usize) -> usize {
    (m / 20).max(2).min(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Epidemic,
    UniformIid,
    AggregateIid,
    AggregateWalk,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] = [
        GeneratorKind::Epidemic,
        GeneratorKind::UniformIid,
        GeneratorKind::AggregateIid,
        GeneratorKind::AggregateWalk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Epidemic => "epidemic",
            GeneratorKind::UniformIid => "uniform-iid",
            GeneratorKind::AggregateIid => "aggregate-iid",
            GeneratorKind::AggregateWalk => "aggregate-walk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

fn sample_weighted(
    rng: &mut impl Rng,
    candidates: &[usize],
    weight: impl Fn(usize) -> f64,
) -> usize {
    let total: f64 = candidates.iter().map(|&c| weight(c)).sum();
    let u: f64 = rng.gen();
    if total <= 0.0 || !total.is_finite() {
        return candidates[((u * candidates.len() as f64) as usize).min(candidates.len() - 1)];
    }
    let target = u * total;
    let mut acc = 0.0;
    for &c in candidates {
        acc += weight(c);
        if target < acc {
            return c;
        }
    }
    *candidates.last().expect("non-empty candidates")
}

/// Everything a generator may consult besides the real trace.
pub struct GeneratorContext<'a> {
    pub n_regions: usize,
    pub aggregate: &'a MobilityModel,
    pub clustering: &'a EpidemicClustering,
}

/// `n_p` decoy traces for one user; unreported intervals stay unreported.
///
/// At each interval a decoy avoids locations already taken by the real visit
/// or by earlier decoys, unless its support has nothing else left. Every
/// trace draws from its own stream keyed by `(seed, user, trace index)`.
pub fn generate(
    kind: GeneratorKind,
    real: &[Option<usize>],
    ctx: &GeneratorContext<'_>,
    n_p: usize,
    seed: u64,
    user: u64,
) -> Vec<Vec<Option<usize>>> {
    let mut rngs: Vec<_> = (0..n_p)
        .map(|i| stream(seed, &[domain::PSEUDO, user, i as u64]))
        .collect();
    let mut traces = vec![vec![None; real.len()]; n_p];
    let mut prev: Vec<Option<usize>> = vec![None; n_p];
    let all: Vec<usize> = (0..ctx.n_regions).collect();
    let agg = ctx.aggregate;
    let mut used: Vec<usize> = Vec::with_capacity(n_p + 1);
    let mut open: Vec<usize> = Vec::new();
    for (t, r) in real.iter().enumerate() {
        let Some(r) = *r else { continue };
        used.clear();
        used.push(r);
        let support: &[usize] = match kind {
            GeneratorKind::Epidemic => ctx.clustering.members_of(r),
            _ => &all,
        };
        for i in 0..n_p {
            open.clear();
            open.extend(support.iter().copied().filter(|c| !used.contains(c)));
            let cands: &[usize] = if open.is_empty() { support } else { &open };
            let rng = &mut rngs[i];
            let next = match (kind, prev[i]) {
                (GeneratorKind::UniformIid, _) => sample_weighted(rng, cands, |_| 1.0),
                (GeneratorKind::AggregateIid, _) | (_, None) => {
                    sample_weighted(rng, cands, |c| agg.visit_dist[t][c])
                }
                (_, Some(p)) => sample_weighted(rng, cands, |c| agg.transition[p][c]),
            };
            used.push(next);
            prev[i] = Some(next);
            traces[i][t] = Some(next);
        }
    }
    traces
}

/// Cluster-constrained synthesis.
pub fn synthesize(
    real: &[Option<usize>],
    clustering: &EpidemicClustering,
    aggregate: &MobilityModel,
    n_p: usize,
    seed: u64,
    user: u64,
) -> Result<Vec<Vec<Option<usize>>>> {
    if n_p == 0 {
        return Err(contract("synthesize needs n_p >= 1"));
    }
    let ctx = GeneratorContext {
        n_regions: aggregate.n_regions(),
        aggregate,
        clustering,
    };
    Ok(generate(
        GeneratorKind::Epidemic,
        real,
        &ctx,
        n_p,
        seed,
        user,
    ))
}

/// Decoys for every user of a population.
pub fn generate_all(
    kind: GeneratorKind,
    pop: &Population,
    ctx: &GeneratorContext<'_>,
    n_p: usize,
    seed: u64,
) -> Vec<Vec<Vec<Option<usize>>>> {
    pop.trajectories
        .iter()
        .enumerate()
        .map(|(u, tr)| generate(kind, &tr.visits, ctx, n_p, seed, u as u64))
        .collect()
}

/// Writes `user_id,trace_idx,t,region_id`; trace 0 is the real trace.
pub fn export_traces(
    pop: &Population,
    pseudo: &[Vec<Vec<Option<usize>>>],
    path: &Path,
) -> Result<()> {
    let mut rows = Vec::new();
    for (u, tr) in pop.trajectories.iter().enumerate() {
        let traces = std::iter::once(&tr.visits).chain(pseudo[u].iter());
        for (i, visits) in traces.enumerate() {
            for (t, r) in visits.iter().enumerate() {
                if let Some(r) = r {
                    rows.push([u, i, t, *r]);
                }
            }
        }
    }
    io::write_csv(path, &["user_id", "trace_idx", "t", "region_id"], rows)
}

/// Reads decoys written by [`export_traces`], dropping trace 0.
pub fn read_traces(path: &Path, pop: &Population) -> Result<Vec<Vec<Vec<Option<usize>>>>> {
    let rows = io::read_csv_rows(path, &["user_id", "trace_idx", "t", "region_id"], "train")?;
    let mut out: Vec<Vec<Vec<Option<usize>>>> = vec![Vec::new(); pop.n_users()];
    for (line, f) in &rows {
        let u: usize = io::parse_field(path, *line, "user_id", &f[0])?;
        let i: usize = io::parse_field(path, *line, "trace_idx", &f[1])?;
        let t: usize = io::parse_field(path, *line, "t", &f[2])?;
        let r: usize = io::parse_field(path, *line, "region_id", &f[3])?;
        if u >= pop.n_users() || t >= pop.n_intervals || r >= pop.n_regions {
            return Err(crate::error::Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("row ({u}, {t}, {r}) outside the population grid"),
            });
        }
        if i == 0 {
            continue;
        }
        let traces = &mut out[u];
        if traces.len() < i {
            traces.resize(i, vec![None; pop.n_intervals]);
        }
        traces[i - 1][t] = Some(r);
    }
    let n_p = out.iter().map(Vec::len).max().unwrap_or(0);
    for traces in &mut out {
        traces.resize(n_p, vec![None; pop.n_intervals]);
    }
    Ok(if n_p == 0 { Vec::new() } else { out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{generate_population, RoutineParams};

    fn geo_line(m: usize) -> RegionGeometry {
        RegionGeometry {
            coords: (0..m).map(|i| (i as f64, 0.0)).collect(),
        }
    }

    #[test]
    fn alternating_user_model() {
        let tr = Trajectory {
            user_id: 0,
            visits: (0..10).map(|t| Some(1 + t % 2)).collect(),
        };
        let m = fit_user_model(&tr, 4);
        assert_eq!(m.visit_dist[0][1], 1.0);
        assert_eq!(m.visit_dist[4][1], 1.0);
        assert_eq!(m.transition[1][2], 1.0);
        assert_eq!(m.transition[2][1], 1.0);
        assert_eq!(m.transition[0], vec![0.25; 4]);
        m.check_stochastic(1e-9).unwrap();
    }

    #[test]
    fn short_user_gets_uniform_transitions() {
        let tr = Trajectory {
            user_id: 0,
            visits: vec![Some(2), None, None],
        };
        let m = fit_user_model(&tr, 3);
        for row in &m.transition {
            assert_eq!(row, &vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn aggregate_of_one_user_is_that_user() {
        let (pop, geo) = generate_population(3, 1, 6, 36, &RoutineParams::default()).unwrap();
        let agg = fit_aggregate_model(&pop.trajectories, 6, 36, 0.0, &geo).unwrap();
        let one = fit_user_model(&pop.trajectories[0], 6);
        for (a, b) in agg
            .transition
            .iter()
            .flatten()
            .zip(one.transition.iter().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in agg
            .visit_dist
            .iter()
            .flatten()
            .zip(one.visit_dist.iter().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn floor_only_rows_are_uniform() {
        let tr = Trajectory {
            user_id: 0,
            visits: vec![None, None],
        };
        let agg = fit_aggregate_model(&[tr], 2, 2, 0.1, &geo_line(2)).unwrap();
        assert_eq!(agg.transition, vec![vec![0.5, 0.5]; 2]);
    }

    #[test]
    fn aggregate_is_stochastic() {
        let (pop, geo) = generate_population(4, 60, 15, 48, &RoutineParams::default()).unwrap();
        let agg = fit_aggregate_model(&pop.trajectories, 15, 48, 1e-4, &geo).unwrap();
        agg.check_stochastic(1e-9).unwrap();
        assert!(agg.transition.iter().flatten().all(|&p| p > 0.0));
    }

    #[test]
    fn similarity_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(epidemic_similarity(&a, &a, 1.0, 1.0, 1.0), 1.0);
        let b = [0.0, 4.0, 5.0];
        assert_eq!(epidemic_similarity(&a, &b, 1.0, 1.0, 1.0), -4.0);
        assert_eq!(
            epidemic_similarity(&a, &b, 0.0, 1.0, 0.5),
            epidemic_similarity(&a, &b, 0.5, 1.0, 0.5)
        );
        assert_eq!(
            epidemic_similarity(&a, &b, 2.5, 0.7, 1.0),
            epidemic_similarity(&b, &a, 2.5, 0.7, 1.0)
        );
    }

    #[test]
    fn clustering_extremes() {
        let sim = similarity_matrix(
            &[vec![0.0], vec![1.0], vec![5.0], vec![2.0]],
            &geo_line(4),
            1.0,
        );
        let c = cluster_regions(&sim, 4).unwrap();
        assert_eq!(c, EpidemicClustering::singletons(4));
        let one = cluster_regions(&sim, 1).unwrap();
        assert_eq!(one.clusters, vec![vec![0, 1, 2, 3]]);
        assert!(cluster_regions(&sim, 5).is_err());
    }

    #[test]
    fn singleton_clusters_force_the_real_trace() {
        let (pop, geo) = generate_population(5, 10, 8, 24, &RoutineParams::default()).unwrap();
        let agg = fit_aggregate_model(&pop.trajectories, 8, 24, 1e-4, &geo).unwrap();
        let cl = EpidemicClustering::singletons(8);
        let real = &pop.trajectories[3].visits;
        for trace in synthesize(real, &cl, &agg, 3, 1, 3).unwrap() {
            assert_eq!(&trace, real);
        }
    }

    #[test]
    fn pseudo_locations_stay_in_the_real_cluster() {
        let (pop, geo) = generate_population(6, 30, 20, 48, &RoutineParams::default()).unwrap();
        let agg = fit_aggregate_model(&pop.trajectories, 20, 48, 1e-4, &geo).unwrap();
        let cases: Vec<Vec<f64>> = (0..20).map(|r| vec![(r % 3) as f64; 4]).collect();
        let cl = cluster_regions(&similarity_matrix(&cases, &geo, 1.0), 4).unwrap();
        for (u, tr) in pop.trajectories.iter().enumerate() {
            for trace in synthesize(&tr.visits, &cl, &agg, 2, 9, u as u64).unwrap() {
                assert_eq!(trace.len(), tr.visits.len());
                for (p, r) in trace.iter().zip(&tr.visits) {
                    assert_eq!(cl.cluster_of[p.unwrap()], cl.cluster_of[r.unwrap()]);
                }
            }
        }
    }

    #[test]
    fn uniform_iid_single_region() {
        let agg = MobilityModel::uniform(1, 5);
        let cl = EpidemicClustering::singletons(1);
        let ctx = GeneratorContext {
            n_regions: 1,
            aggregate: &agg,
            clustering: &cl,
        };
        let real = vec![Some(0); 5];
        for tr in generate(GeneratorKind::UniformIid, &real, &ctx, 3, 1, 0) {
            assert_eq!(tr, real);
        }
    }

    #[test]
    fn aggregate_iid_matches_marginal() {
        // The real visit sits on a zero-mass region so exclusion leaves the marginal intact.
        let m = 6;
        let pi = vec![0.1, 0.4, 0.2, 0.25, 0.05, 0.0];
        let agg = MobilityModel {
            visit_dist: vec![pi.clone()],
            transition: vec![vec![1.0 / 6.0; m]; m],
        };
        let cl = EpidemicClustering::singletons(m);
        let ctx = GeneratorContext {
            n_regions: m,
            aggregate: &agg,
            clustering: &cl,
        };
        let mut hist = vec![0.0; m];
        let draws = 100_000;
        for user in 0..draws {
            let tr = generate(GeneratorKind::AggregateIid, &[Some(5)], &ctx, 1, 3, user);
            hist[tr[0][0].unwrap()] += 1.0 / draws as f64;
        }
        let tv: f64 = hist
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn deterministic_walk_is_deterministic() {
        let m = 4;
        let agg = MobilityModel {
            visit_dist: vec![vec![0.0, 1.0, 0.0, 0.0]; 4],
            transition: vec![
                vec![0.0, 0.0, 1.0, 0.0],
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.25; 4],
            ],
        };
        let cl = EpidemicClustering::singletons(m);
        let ctx = GeneratorContext {
            n_regions: m,
            aggregate: &agg,
            clustering: &cl,
        };
        let a = generate(GeneratorKind::AggregateWalk, &[Some(3); 4], &ctx, 1, 5, 0);
        let b = generate(GeneratorKind::AggregateWalk, &[Some(3); 4], &ctx, 1, 77, 9);
        assert_eq!(a[0], vec![Some(1), Some(0), Some(2), Some(1)]);
        assert_eq!(a, b);
    }

    #[test]
    fn decoys_are_distinct_when_the_cluster_allows() {
        let (pop, geo) = generate_population(6, 20, 30, 24, &RoutineParams::default()).unwrap();
        let agg = fit_aggregate_model(&pop.trajectories, 30, 24, 1e-4, &geo).unwrap();
        let cl = cluster_regions(&similarity_matrix(&vec![vec![0.0]; 30], &geo, 1.0), 2).unwrap();
        let ctx = GeneratorContext {
            n_regions: 30,
            aggregate: &agg,
            clustering: &cl,
        };
        for kind in GeneratorKind::ALL {
            for (u, tr) in pop.trajectories.iter().enumerate() {
                let decoys = generate(kind, &tr.visits, &ctx, 4, 3, u as u64);
                for t in 0..24 {
                    let mut set: Vec<usize> = decoys.iter().map(|d| d[t].unwrap()).collect();
                    set.push(tr.visits[t].unwrap());
                    let room = match kind {
                        GeneratorKind::Epidemic => cl.members_of(tr.visits[t].unwrap()).len(),
                        _ => 30,
                    };
                    set.sort_unstable();
                    set.dedup();
                    assert_eq!(set.len(), 5.min(room));
                }
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let (pop, geo) = generate_population(8, 5, 10, 24, &RoutineParams::default()).unwrap();
        let agg = fit_aggregate_model(&pop.trajectories, 10, 24, 1e-4, &geo).unwrap();
        let cl = cluster_regions(&similarity_matrix(&vec![vec![0.0]; 10], &geo, 1.0), 3).unwrap();
        let ctx = GeneratorContext {
            n_regions: 10,
            aggregate: &agg,
            clustering: &cl,
        };
        for kind in GeneratorKind::ALL {
            assert_eq!(
                generate_all(kind, &pop, &ctx, 2, 4),
                generate_all(kind, &pop, &ctx, 2, 4)
            );
            assert_eq!(GeneratorKind::parse(kind.name()), Some(kind));
        }
    }
}
