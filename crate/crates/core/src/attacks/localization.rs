//! Trajectory-level adversary: a hidden Markov model whose hidden state is the
//! real region and whose observation is the candidate set of each interval.

use crate::error::{contract, Result};
use crate::pseudoloc::MobilityModel;

/// Candidate regions per interval; `None` where the user reported nothing.
pub type ObservedSets = Vec<Option<Vec<usize>>>;

/// Merges the real trace and its decoys into sorted candidate sets, which is
/// all an observer of the uploads learns.
pub fn observed_sets(real: &[Option<usize>], decoys: &[Vec<Option<usize>>]) -> ObservedSets {
    real.iter()
        .enumerate()
        .map(|(t, r)| {
            r.map(|r| {
                let mut set: Vec<usize> = std::iter::once(r)
                    .chain(decoys.iter().filter_map(|d| d[t]))
                    .collect();
                set.sort_unstable();
                set.dedup();
                set
            })
        })
        .collect()
}

/// Posterior marginals `P(state_t = r | observations)` as `(region, prob)`
/// lists over each interval's admissible states. The forward and backward
/// messages are renormalized at every step and the scale kept in log form.
pub fn posterior_marginals(
    obs: &ObservedSets,
    model: &MobilityModel,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let m = model.n_regions();
    if obs.len() > model.n_intervals() {
        return Err(contract(format!(
            "{} intervals observed, model covers {}",
            obs.len(),
            model.n_intervals()
        )));
    }
    let all: Vec<usize> = (0..m).collect();
    let states: Vec<&[usize]> = obs.iter().map(|o| o.as_deref().unwrap_or(&all)).collect();
    if let Some(bad) = states.iter().flat_map(|s| s.iter()).find(|&&r| r >= m) {
        return Err(contract(format!("candidate region {bad} out of range")));
    }
    let n = states.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(n);
    let first: Vec<f64> = states[0].iter().map(|&r| model.visit_dist[0][r]).collect();
    alpha.push(normalized(first)?);
    for t in 1..n {
        let prev = &alpha[t - 1];
        let row: Vec<f64> = states[t]
            .iter()
            .map(|&r| {
                states[t - 1]
                    .iter()
                    .zip(prev)
                    .map(|(&p, a)| a * model.transition[p][r])
                    .sum()
            })
            .collect();
        alpha.push(normalized(row)?);
    }
    let mut beta: Vec<Vec<f64>> = vec![Vec::new(); n];
    beta[n - 1] = vec![1.0; states[n - 1].len()];
    for t in (0..n - 1).rev() {
        let next = &beta[t + 1];
        let row: Vec<f64> = states[t]
            .iter()
            .map(|&r| {
                states[t + 1]
                    .iter()
                    .zip(next)
                    .map(|(&q, b)| model.transition[r][q] * b)
                    .sum()
            })
            .collect();
        beta[t] = normalized(row)?;
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let joint: Vec<f64> = alpha[t].iter().zip(&beta[t]).map(|(a, b)| a * b).collect();
        let post = normalized(joint)?;
        out.push(states[t].iter().copied().zip(post).collect());
    }
    Ok(out)
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(contract(
            "observations have zero probability under the model",
        ));
    }
    v.iter_mut().for_each(|x| *x /= s);
    Ok(v)
}

/// Most probable candidate per reported interval; ties go to the lowest id.
pub fn infer_locations(obs: &ObservedSets, model: &MobilityModel) -> Result<Vec<Option<usize>>> {
    let post = posterior_marginals(obs, model)?;
    Ok(obs
        .iter()
        .zip(post)
        .map(|(o, p)| {
            o.as_ref().map(|_| {
                p.iter()
                    .fold((usize::MAX, f64::NEG_INFINITY), |best, &(r, q)| {
                        if q > best.1 || (q == best.1 && r < best.0) {
                            (r, q)
                        } else {
                            best
                        }
                    })
                    .0
            })
        })
        .collect())
}

/// Counts `(wrong, total)` over reported intervals.
pub fn localization_errors(real: &[Option<usize>], inferred: &[Option<usize>]) -> (usize, usize) {
    real.iter()
        .zip(inferred)
        .filter_map(|(r, g)| r.map(|r| usize::from(*g != Some(r))))
        .fold((0, 0), |(w, n), e| (w + e, n + 1))
}
