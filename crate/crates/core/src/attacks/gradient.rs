//! Server-side guess of each interval's real cell from upload magnitudes.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::fedtrain::Transcript;
use crate::hypergraph::StHypergraph;
use crate::mobility::Population;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRule {
    /// The candidate with the largest update norm.
    Argmax,
    /// The lowest-id candidate whose norm exceeds the threshold, else the lowest id.
    Threshold(f64),
}

/// Wrong guesses and guesses made over every recorded `(round, user, interval)`
/// of `layer`. `graph` is the server's view, mapping edge ids to cells.
pub fn gradient_attack(
    transcript: &Transcript,
    graph: &StHypergraph,
    truth: &Population,
    layer: usize,
    rule: GradientRule,
) -> Result<(usize, usize)> {
    let mut wrong = 0;
    let mut total = 0;
    let mut group: Vec<(usize, f64)> = Vec::new();
    let mut key: Option<(u32, u32, usize)> = None;
    let mut settle = |key: Option<(u32, u32, usize)>,
                      group: &mut Vec<(usize, f64)>|
     -> Result<()> {
        let Some((_, user, t)) = key else {
            return Ok(());
        };
        let tr = truth
            .trajectories
            .get(user as usize)
            .ok_or_else(|| contract(format!("transcript names unknown user {user}")))?;
        let real = tr.visits[t]
            .ok_or_else(|| contract(format!("user {user} uploaded for unreported t={t}")))?;
        group.sort_by_key(|c| c.0);
        let guess = match rule {
            GradientRule::Argmax => {
                group
                    .iter()
                    .fold((usize::MAX, f64::NEG_INFINITY), |b, &(r, n)| {
                        if n > b.1 {
                            (r, n)
                        } else {
                            b
                        }
                    })
                    .0
            }
            GradientRule::Threshold(tau) => group.iter().find(|c| c.1 > tau).unwrap_or(&group[0]).0,
        };
        total += 1;
        wrong += usize::from(guess != real);
        group.clear();
        Ok(())
    };
    for rec in transcript
        .uploads
        .iter()
        .filter(|r| r.layer as usize == layer)
    {
        let (r, t) = graph.cell(rec.edge as usize);
        let k = (rec.round, rec.user, t);
        if key != Some(k) {
            settle(key, &mut group)?;
            key = Some(k);
        }
        group.push((r, rec.norm));
    }
    settle(key, &mut group)?;
    Ok((wrong, total))
}
