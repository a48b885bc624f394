//! Trajectories, the synthetic routine generator and trace-file ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::io;

pub const TRACE_HEADER: [&str; 3] = ["user_id", "t", "region_id"];
pub const REGION_HEADER: [&str; 3] = ["region_id", "x_km", "y_km"];

/// Region visited per interval; `None` marks an unreported interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: u64,
    pub visits: Vec<Option<usize>>,
}

impl Trajectory {
    pub fn reported(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.visits
            .iter()
            .enumerate()
            .filter_map(|(t, r)| r.map(|r| (t, r)))
    }

    pub fn n_reported(&self) -> usize {
        self.visits.iter().filter(|v| v.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub trajectories: Vec<Trajectory>,
    pub n_regions: usize,
    pub n_intervals: usize,
    pub interval_hours: f64,
}

/// Shape metadata stored next to a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationMeta {
    pub n_users: usize,
    pub n_regions: usize,
    pub n_intervals: usize,
    pub interval_hours: f64,
}

impl Population {
    pub fn n_users(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn intervals_per_day(&self) -> usize {
        intervals_per_day(self.interval_hours)
    }

    pub fn n_days(&self) -> usize {
        self.n_intervals.div_ceil(self.intervals_per_day())
    }

    pub fn meta(&self) -> PopulationMeta {
        PopulationMeta {
            n_users: self.n_users(),
            n_regions: self.n_regions,
            n_intervals: self.n_intervals,
            interval_hours: self.interval_hours,
        }
    }

    /// Checks the shared-shape invariants.
    pub fn validate(&self) -> Result<()> {
        for tr in &self.trajectories {
            if tr.visits.len() != self.n_intervals {
                return Err(contract(format!(
                    "user {} has {} intervals, expected {}",
                    tr.user_id,
                    tr.visits.len(),
                    self.n_intervals
                )));
            }
            if let Some((t, r)) = tr.reported().find(|&(_, r)| r >= self.n_regions) {
                return Err(contract(format!(
                    "user {} visits region {r} at t={t}, only {} regions",
                    tr.user_id, self.n_regions
                )));
            }
        }
        Ok(())
    }
}

pub fn intervals_per_day(interval_hours: f64) -> usize {
    ((24.0 / interval_hours).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGeometry {
    pub coords: Vec<(f64, f64)>,
}

impl RegionGeometry {
    pub fn n_regions(&self) -> usize {
        self.coords.len()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.coords[a];
        let (bx, by) = self.coords[b];
        (ax - bx).hypot(ay - by)
    }

    /// Smallest non-zero pairwise distance, or 1 when every region coincides.
    pub fn min_positive_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.coords.len() {
            for b in a + 1..self.coords.len() {
                let d = self.distance(a, b);
                if d > 0.0 && d < best {
                    best = d;
                }
            }
        }
        if best.is_finite() {
            best
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutineParams {
    pub interval_hours: f64,
    /// Chance that a daytime interval is spent at a leisure destination.
    pub leisure_prob: f64,
    pub employed_fraction: f64,
    pub work_scale_km: f64,
    pub leisure_scale_km: f64,
    pub region_spacing_km: f64,
    /// First and last hour spent at work on weekdays.
    pub work_hours: (f64, f64),
    /// Hours outside this window are spent at home.
    pub awake_hours: (f64, f64),
}

impl Default for RoutineParams {
    fn default() -> Self {
        Self {
            interval_hours: 2.0,
            leisure_prob: 0.15,
            employed_fraction: 0.8,
            work_scale_km: 4.0,
            leisure_scale_km: 2.0,
            region_spacing_km: 1.0,
            work_hours: (8.0, 18.0),
            awake_hours: (8.0, 22.0),
        }
    }
}

fn jittered_grid(rng: &mut ChaCha8Rng, m: usize, spacing: f64) -> RegionGeometry {
    let side = (m as f64).sqrt().ceil() as usize;
    let coords = (0..m)
        .map(|i| {
            let (gx, gy) = ((i % side) as f64, (i / side) as f64);
            let jx = rng.gen_range(-0.3..0.3);
            let jy = rng.gen_range(-0.3..0.3);
            ((gx + jx) * spacing, (gy + jy) * spacing)
        })
        .collect();
    RegionGeometry { coords }
}

fn kernel_sampler(
    geo: &RegionGeometry,
    from: usize,
    scale: f64,
    attract: &[f64],
) -> WeightedIndex<f64> {
    let w: Vec<f64> = (0..geo.n_regions())
        .map(|r| attract[r] * (-geo.distance(from, r) / scale).exp())
        .collect();
    WeightedIndex::new(w).expect("positive kernel weights")
}

/// Synthetic home/work/leisure routines over a jittered grid of regions.
pub fn generate_population(
    seed: u64,
    n: usize,
    m: usize,
    t: usize,
    params: &RoutineParams,
) -> Result<(Population, RegionGeometry)> {
    if n == 0 || t == 0 {
        return Err(contract("generate_population needs N and T positive"));
    }
    if m < 2 {
        return Err(contract(format!(
            "generate_population needs M >= 2, got {m}"
        )));
    }
    if !(0.0..=1.0).contains(&params.leisure_prob) || params.interval_hours <= 0.0 {
        return Err(contract(
            "leisure_prob must be in [0,1] and interval_hours positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = jittered_grid(&mut rng, m, params.region_spacing_km);
    let attract: Vec<f64> = (0..m)
        .map(|_| rng.sample::<f64, _>(StandardNormal).exp())
        .collect();
    let ipd = intervals_per_day(params.interval_hours);
    let mut trajectories = Vec::with_capacity(n);
    for u in 0..n {
        let home = rng.gen_range(0..m);
        let employed = rng.gen_bool(params.employed_fraction);
        let work = kernel_sampler(&geo, home, params.work_scale_km, &attract).sample(&mut rng);
        let leisure = kernel_sampler(&geo, home, params.leisure_scale_km, &attract);
        let mut visits = Vec::with_capacity(t);
        for i in 0..t {
            let day = i / ipd;
            let hour = (i % ipd) as f64 * params.interval_hours;
            let weekday = day % 7 < 5;
            let awake = hour >= params.awake_hours.0 && hour < params.awake_hours.1;
            let at_work =
                employed && weekday && hour >= params.work_hours.0 && hour < params.work_hours.1;
            // Draw unconditionally so changing the routine does not shift later streams.
            let excursion = rng.gen::<f64>() < params.leisure_prob;
            let spot = leisure.sample(&mut rng);
            let region = if !awake {
                home
            } else if excursion {
                spot
            } else if at_work {
                work
            } else {
                home
            };
            visits.push(Some(region));
        }
        trajectories.push(Trajectory {
            user_id: u as u64,
            visits,
        });
    }
    let pop = Population {
        trajectories,
        n_regions: m,
        n_intervals: t,
        interval_hours: params.interval_hours,
    };
    Ok((pop, geo))
}

/// Keeps each reported cell independently with probability `eta`.
pub fn subsample_reporting(pop: &Population, eta: f64, seed: u64) -> Result<Population> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(contract(format!("eta must be in (0,1], got {eta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = pop.clone();
    for tr in &mut out.trajectories {
        for v in &mut tr.visits {
            let keep = rng.gen::<f64>() < eta;
            if !keep {
                *v = None;
            }
        }
    }
    Ok(out)
}

pub fn export_csv(pop: &Population, path: &Path) -> Result<()> {
    let rows = pop.trajectories.iter().flat_map(|tr| {
        tr.reported()
            .map(move |(t, r)| [tr.user_id, t as u64, r as u64])
    });
    io::write_csv(path, &TRACE_HEADER, rows)
}

/// Reads a trace file. Without `meta`, M and T are inferred from the largest ids.
pub fn ingest_csv(path: &Path, meta: Option<&PopulationMeta>) -> Result<Population> {
    let text = io::read_input(path, "gen-mobility")?;
    ingest_str(path, &text, meta)
}

pub(crate) fn ingest_str(
    path: &Path,
    text: &str,
    meta: Option<&PopulationMeta>,
) -> Result<Population> {
    let rows = if text.trim().is_empty() {
        Vec::new()
    } else {
        io::parse_csv_rows(path, text, &TRACE_HEADER)?
    };
    let mut cells: BTreeMap<u64, BTreeMap<usize, (usize, u64)>> = BTreeMap::new();
    for (line, f) in &rows {
        let user: u64 = io::parse_field(path, *line, "user_id", &f[0])?;
        let t: usize = io::parse_field(path, *line, "t", &f[1])?;
        let r: usize = io::parse_field(path, *line, "region_id", &f[2])?;
        if let Some(m) = meta {
            if t >= m.n_intervals || r >= m.n_regions {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!(
                        "out of range: t={t} (T={}), region={r} (M={})",
                        m.n_intervals, m.n_regions
                    ),
                });
            }
        }
        if let Some((_, first)) = cells.entry(user).or_default().insert(t, (r, *line)) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("duplicate (user {user}, t {t}), first seen on line {first}"),
            });
        }
    }
    let (n_regions, n_intervals, interval_hours) = match meta {
        Some(m) => (m.n_regions, m.n_intervals, m.interval_hours),
        None => {
            let max_r = cells.values().flat_map(|c| c.values().map(|v| v.0)).max();
            let max_t = cells.values().flat_map(|c| c.keys().copied()).max();
            match (max_r, max_t) {
                (Some(r), Some(t)) => (r + 1, t + 1, 2.0),
                _ => {
                    return Err(Error::Data(format!(
                        "{} holds no visits: M=T=0",
                        path.display()
                    )))
                }
            }
        }
    };
    let mut users: Vec<u64> = cells.keys().copied().collect();
    if let Some(m) = meta {
        if users.iter().all(|&u| (u as usize) < m.n_users) {
            users = (0..m.n_users as u64).collect();
        }
    }
    let trajectories = users
        .into_iter()
        .map(|u| {
            let mut visits = vec![None; n_intervals];
            if let Some(c) = cells.get(&u) {
                for (&t, &(r, _)) in c {
                    visits[t] = Some(r);
                }
            }
            Trajectory { user_id: u, visits }
        })
        .collect();
    Ok(Population {
        trajectories,
        n_regions,
        n_intervals,
        interval_hours,
    })
}

pub fn export_geometry(geo: &RegionGeometry, path: &Path) -> Result<()> {
    let rows = geo
        .coords
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| [i.to_string(), format!("{x}"), format!("{y}")]);
    io::write_csv(path, &REGION_HEADER, rows)
}

pub fn ingest_geometry(path: &Path) -> Result<RegionGeometry> {
    let rows = io::read_csv_rows(path, &REGION_HEADER, "gen-mobility")?;
    let mut coords = vec![None; rows.len()];
    for (line, f) in &rows {
        let id: usize = io::parse_field(path, *line, "region_id", &f[0])?;
        let x: f64 = io::parse_field(path, *line, "x_km", &f[1])?;
        let y: f64 = io::parse_field(path, *line, "y_km", &f[2])?;
        match coords.get_mut(id) {
            Some(slot @ None) => *slot = Some((x, y)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("region id {id} duplicated or not dense"),
                })
            }
        }
    }
    Ok(RegionGeometry {
        coords: coords.into_iter().map(|c| c.expect("dense ids")).collect(),
    })
}
