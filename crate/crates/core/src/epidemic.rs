//! Agent-based SEIR contagion over co-location cells.

use std::collections::HashSet;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::io;
use crate::mobility::Population;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Compartment {
    S,
    E,
    Ia,
    Is,
    R,
}

impl Compartment {
    pub fn is_infectious(self) -> bool {
        matches!(self, Compartment::Ia | Compartment::Is)
    }
}

/// Rates are per day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseParams {
    pub beta: f64,
    pub alpha: f64,
    pub mu: f64,
    #[serde(default = "default_asymptomatic")]
    pub asymptomatic_fraction: f64,
}

fn default_asymptomatic() -> f64 {
    0.3
}

impl DiseaseParams {
    pub fn sars_cov_2() -> Self {
        Self {
            beta: 0.405,
            alpha: 0.2564,
            mu: 0.071,
            asymptomatic_fraction: default_asymptomatic(),
        }
    }

    pub fn omicron() -> Self {
        Self {
            beta: 0.766,
            alpha: 0.6579,
            mu: 0.071,
            asymptomatic_fraction: default_asymptomatic(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "sars-cov-2" => Some(Self::sars_cov_2()),
            "omicron" => Some(Self::omicron()),
            _ => None,
        }
    }

    pub fn r0(&self) -> f64 {
        self.beta / self.mu
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.beta >= 0.0 && self.alpha > 0.0 && self.mu >= 0.0;
        if !rates_ok || !(0.0..=1.0).contains(&self.asymptomatic_fraction) {
            return Err(contract(format!("invalid disease params {self:?}")));
        }
        Ok(())
    }
}

/// Per-user transition times; `None` means the transition never happened
/// within the horizon. The state during interval `t` follows from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub exposed_t: Option<usize>,
    pub infectious_t: Option<usize>,
    pub recovered_t: Option<usize>,
    pub asymptomatic: bool,
    /// Region the user occupied when becoming infectious.
    pub case_region: Option<usize>,
}

impl Timeline {
    pub fn compartment(&self, t: usize) -> Compartment {
        let reached = |x: Option<usize>| x.is_some_and(|s| s <= t);
        if reached(self.recovered_t) {
            Compartment::R
        } else if reached(self.infectious_t) {
            if self.asymptomatic {
                Compartment::Ia
            } else {
                Compartment::Is
            }
        } else if reached(self.exposed_t) {
            Compartment::E
        } else {
            Compartment::S
        }
    }

    pub fn ever_infected(&self) -> bool {
        self.exposed_t.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicLog {
    pub timelines: Vec<Timeline>,
    pub n_regions: usize,
    pub n_intervals: usize,
    pub intervals_per_day: usize,
}

impl EpidemicLog {
    pub fn n_users(&self) -> usize {
        self.timelines.len()
    }

    pub fn n_days(&self) -> usize {
        self.n_intervals.div_ceil(self.intervals_per_day)
    }

    pub fn compartment(&self, user: usize, t: usize) -> Compartment {
        self.timelines[user].compartment(t)
    }

    pub fn final_labels(&self) -> Vec<bool> {
        self.timelines.iter().map(Timeline::ever_infected).collect()
    }

    /// New cases per region per day over all users.
    pub fn new_cases(&self) -> Vec<Vec<u32>> {
        self.new_cases_among(|_| true)
    }

    /// New cases per region per day, counting only users accepted by `keep`.
    pub fn new_cases_among(&self, keep: impl Fn(usize) -> bool) -> Vec<Vec<u32>> {
        let mut cases = vec![vec![0u32; self.n_days()]; self.n_regions];
        for (u, tl) in self.timelines.iter().enumerate() {
            if !keep(u) {
                continue;
            }
            if let (Some(t), Some(r)) = (tl.infectious_t, tl.case_region) {
                cases[r][t / self.intervals_per_day] += 1;
            }
        }
        cases
    }

    /// New cases per day summed over regions.
    pub fn daily_totals(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.n_days()];
        for row in self.new_cases() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Compartment counts at interval `t`, in S, E, Ia, Is, R order.
    pub fn census(&self, t: usize) -> [usize; 5] {
        let mut c = [0; 5];
        for tl in &self.timelines {
            let k = match tl.compartment(t) {
                Compartment::S => 0,
                Compartment::E => 1,
                Compartment::Ia => 2,
                Compartment::Is => 3,
                Compartment::R => 4,
            };
            c[k] += 1;
        }
        c
    }
}

fn region_near(visits: &[Option<usize>], t: usize) -> Option<usize> {
    visits[..=t.min(visits.len() - 1)]
        .iter()
        .rev()
        .flatten()
        .next()
        .or_else(|| visits[t..].iter().flatten().next())
        .copied()
}

struct Stepper<'a> {
    pop: &'a Population,
    params: DiseaseParams,
    dt: f64,
    timelines: Vec<Timeline>,
    inf_count: Vec<u32>,
    occupancy: Vec<u32>,
}

impl<'a> Stepper<'a> {
    fn new(pop: &'a Population, params: DiseaseParams) -> Self {
        Self {
            pop,
            params,
            dt: pop.interval_hours / 24.0,
            timelines: vec![Timeline::default(); pop.n_users()],
            inf_count: vec![0; pop.n_regions],
            occupancy: vec![0; pop.n_regions],
        }
    }

    /// Draws transitions at the end of interval `t`; they take effect at `t + 1`.
    fn step(&mut self, t: usize, rng: &mut ChaCha8Rng) {
        self.inf_count.iter_mut().for_each(|c| *c = 0);
        self.occupancy.iter_mut().for_each(|c| *c = 0);
        for (u, tr) in self.pop.trajectories.iter().enumerate() {
            if let Some(r) = tr.visits[t] {
                self.occupancy[r] += 1;
                if self.timelines[u].compartment(t).is_infectious() {
                    self.inf_count[r] += 1;
                }
            }
        }
        let p = self.params;
        let p_latent_exit = 1.0 - (-p.alpha * self.dt).exp();
        let p_recover = 1.0 - (-p.mu * self.dt).exp();
        let next = t + 1;
        for (u, tr) in self.pop.trajectories.iter().enumerate() {
            let draw: f64 = rng.gen();
            let tl = &mut self.timelines[u];
            match tl.compartment(t) {
                Compartment::S => {
                    let Some(r) = tr.visits[t] else { continue };
                    let i = f64::from(self.inf_count[r]);
                    if i == 0.0 {
                        continue;
                    }
                    let n = f64::from(self.occupancy[r]).max(1.0);
                    if draw < 1.0 - (-p.beta * self.dt * i / n).exp() {
                        tl.exposed_t = Some(next);
                    }
                }
                Compartment::E => {
                    if draw < p_latent_exit && next < self.pop.n_intervals {
                        tl.infectious_t = Some(next);
                        tl.asymptomatic = rng.gen::<f64>() < p.asymptomatic_fraction;
                        tl.case_region = region_near(&tr.visits, next);
                    }
                }
                Compartment::Ia | Compartment::Is => {
                    if draw < p_recover {
                        tl.recovered_t = Some(next);
                    }
                }
                Compartment::R => {}
            }
        }
    }
}

/// Runs the contagion with `n_seed` users exposed at `t = 0`.
pub fn simulate(
    pop: &Population,
    params: &DiseaseParams,
    n_seed: usize,
    seed: u64,
) -> Result<EpidemicLog> {
    params.validate()?;
    if n_seed > pop.n_users() {
        return Err(contract(format!(
            "{n_seed} seed infections exceed {} users",
            pop.n_users()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stepper = Stepper::new(pop, *params);
    for u in rand::seq::index::sample(&mut rng, pop.n_users(), n_seed) {
        stepper.timelines[u].exposed_t = Some(0);
    }
    for t in 0..pop.n_intervals.saturating_sub(1) {
        stepper.step(t, &mut rng);
    }
    Ok(EpidemicLog {
        timelines: stepper.timelines,
        n_regions: pop.n_regions,
        n_intervals: pop.n_intervals,
        intervals_per_day: pop.intervals_per_day(),
    })
}

/// Per-user count of intervals spent in a cell with a known positive while that
/// positive was infectious.
pub fn dct_scores(pop: &Population, log: &EpidemicLog, known_positive: &[usize]) -> Vec<u32> {
    let t_max = pop.n_intervals;
    // (t, region) -> number of infectious known positives present
    let mut hot = vec![0u32; t_max * pop.n_regions];
    let known: HashSet<usize> = known_positive.iter().copied().collect();
    for &k in &known {
        for (t, r) in pop.trajectories[k].reported() {
            if log.compartment(k, t).is_infectious() {
                hot[t * pop.n_regions + r] += 1;
            }
        }
    }
    pop.trajectories
        .iter()
        .enumerate()
        .map(|(u, tr)| {
            tr.reported()
                .filter(|&(t, r)| {
                    let mut h = hot[t * pop.n_regions + r];
                    if known.contains(&u) && log.compartment(u, t).is_infectious() {
                        h -= 1;
                    }
                    h > 0
                })
                .count() as u32
        })
        .collect()
}

pub fn dct_baseline(pop: &Population, log: &EpidemicLog, known_positive: &[usize]) -> Vec<bool> {
    dct_scores(pop, log, known_positive)
        .into_iter()
        .map(|s| s > 0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Split {
    pub fn train_mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &u in &self.train {
            m[u] = true;
        }
        m
    }
}

/// Uniformly random `round(lambda * n)` labeled users.
pub fn split_labels(n: usize, lambda: f64, seed: u64) -> Result<Split> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(contract(format!("lambda must be in (0,1), got {lambda}")));
    }
    let k = (lambda * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(contract(format!(
            "lambda={lambda} with N={n} leaves an empty set"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = ids[..k].to_vec();
    let mut eval = ids[k..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { train, eval })
}

pub fn export_labels(labels: &[bool], path: &Path) -> Result<()> {
    io::write_csv(
        path,
        &["user_id", "label"],
        labels.iter().enumerate().map(|(u, &l)| [u, usize::from(l)]),
    )
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let rows = io::read_csv_rows(path, &["user_id", "label"], "simulate")?;
    let mut out = vec![false; rows.len()];
    for (i, (line, f)) in rows.iter().enumerate() {
        let u: usize = io::parse_field(path, *line, "user_id", &f[0])?;
        let l: u8 = io::parse_field(path, *line, "label", &f[1])?;
        if u != i || l > 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: "labels must list users 0..N in order with 0/1 labels".into(),
            });
        }
        out[i] = l == 1;
    }
    Ok(out)
}

pub fn export_cases(cases: &[Vec<u32>], path: &Path) -> Result<()> {
    let rows = cases.iter().enumerate().flat_map(|(r, row)| {
        row.iter()
            .enumerate()
            .map(move |(d, &c)| [r as u64, d as u64, u64::from(c)])
    });
    io::write_csv(path, &["region_id", "day", "new_cases"], rows)
}

pub fn read_cases(path: &Path, n_regions: usize, n_days: usize) -> Result<Vec<Vec<u32>>> {
    let rows = io::read_csv_rows(path, &["region_id", "day", "new_cases"], "simulate")?;
    let mut out = vec![vec![0u32; n_days]; n_regions];
    for (line, f) in &rows {
        let r: usize = io::parse_field(path, *line, "region_id", &f[0])?;
        let d: usize = io::parse_field(path, *line, "day", &f[1])?;
        let c: u32 = io::parse_field(path, *line, "new_cases", &f[2])?;
        if r >= n_regions || d >= n_days {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("cell ({r},{d}) outside {n_regions} regions x {n_days} days"),
            });
        }
        out[r][d] = c;
    }
    Ok(out)
}

pub fn export_split(split: &Split, path: &Path) -> Result<()> {
    let mut rows: Vec<(usize, &str)> = split
        .train
        .iter()
        .map(|&u| (u, "train"))
        .chain(split.eval.iter().map(|&u| (u, "eval")))
        .collect();
    rows.sort_unstable();
    io::write_csv(
        path,
        &["user_id", "set"],
        rows.into_iter()
            .map(|(u, s)| [u.to_string(), s.to_string()]),
    )
}

pub fn read_split(path: &Path) -> Result<Split> {
    let rows = io::read_csv_rows(path, &["user_id", "set"], "simulate")?;
    let mut split = Split {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for (line, f) in &rows {
        let u: usize = io::parse_field(path, *line, "user_id", &f[0])?;
        match f[1].as_str() {
            "train" => split.train.push(u),
            "eval" => split.eval.push(u),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("unknown set `{other}`"),
                })
            }
        }
    }
    Ok(split)
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn export_timeline(log: &EpidemicLog, path: &Path) -> Result<()> {
    let rows = log.timelines.iter().enumerate().map(|(u, tl)| {
        [
            u.to_string(),
            opt(tl.exposed_t),
            opt(tl.infectious_t),
            opt(tl.recovered_t),
            usize::from(tl.asymptomatic).to_string(),
            opt(tl.case_region),
        ]
    });
    io::write_csv(path, &TIMELINE_HEADER, rows)
}

const TIMELINE_HEADER: [&str; 6] = [
    "user_id",
    "exposed_t",
    "infectious_t",
    "recovered_t",
    "asymptomatic",
    "case_region",
];

pub fn read_timeline(path: &Path, pop: &Population) -> Result<EpidemicLog> {
    let rows = io::read_csv_rows(path, &TIMELINE_HEADER, "simulate")?;
    let parse_opt = |line: u64, name: &str, raw: &str| -> Result<Option<usize>> {
        if raw.is_empty() {
            Ok(None)
        } else {
            io::parse_field(path, line, name, raw).map(Some)
        }
    };
    let mut timelines = Vec::with_capacity(rows.len());
    for (line, f) in &rows {
        timelines.push(Timeline {
            exposed_t: parse_opt(*line, "exposed_t", &f[1])?,
            infectious_t: parse_opt(*line, "infectious_t", &f[2])?,
            recovered_t: parse_opt(*line, "recovered_t", &f[3])?,
            asymptomatic: &f[4] == "1",
            case_region: parse_opt(*line, "case_region", &f[5])?,
        });
    }
    if timelines.len() != pop.n_users() {
        return Err(Error::Data(format!(
            "timeline has {} users, population has {}",
            timelines.len(),
            pop.n_users()
        )));
    }
    Ok(EpidemicLog {
        timelines,
        n_regions: pop.n_regions,
        n_intervals: pop.n_intervals,
        intervals_per_day: pop.intervals_per_day(),
    })
}
