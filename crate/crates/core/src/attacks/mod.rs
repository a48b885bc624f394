//! Adversaries against the uploads: one reads update magnitudes, the other
//! chains candidate sets through a mobility model.

mod gradient;
mod localization;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gradient::{gradient_attack, GradientRule};
pub use localization::{
    infer_locations, localization_errors, observed_sets, posterior_marginals, ObservedSets,
};

use crate::error::Result;
use crate::io;
use crate::mobility::Population;
use crate::pseudoloc::{fit_user_model, MobilityModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Gradient,
    Localization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub generator: String,
    pub n_p: usize,
    pub sigma_l: f64,
    pub strong_adversary: bool,
    pub wrong: usize,
    pub total: usize,
    /// Fraction of intervals where the guessed region is not the real one.
    pub error: f64,
}

impl AttackReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

pub fn error_rate(wrong: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

/// Localization error over the first `max_users` users. The default adversary
/// knows the aggregate model; the strong one knows each user's own model.
pub fn localization_attack(
    pop: &Population,
    decoys: &[Vec<Vec<Option<usize>>>],
    aggregate: &MobilityModel,
    strong: bool,
    max_users: usize,
) -> Result<(usize, usize)> {
    let mut wrong = 0;
    let mut total = 0;
    for (u, tr) in pop.trajectories.iter().enumerate().take(max_users) {
        let obs = observed_sets(&tr.visits, decoys.get(u).map_or(&[], Vec::as_slice));
        let guess = if strong {
            infer_locations(&obs, &fit_user_model(tr, pop.n_regions))?
        } else {
            infer_locations(&obs, aggregate)?
        };
        let (w, n) = localization_errors(&tr.visits, &guess);
        wrong += w;
        total += n;
    }
    Ok((wrong, total))
}
