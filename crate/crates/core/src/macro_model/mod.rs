//! Region-level case forecasting on dynamic flow graphs. Its hidden states
//! are exported read-only for the hyperedge features of the federated model.

mod dcgru;
mod flow;

use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use dcgru::{CellVars, DcgruModel, DcgruParams, MacroTrainConfig};
pub use flow::{build_flow_graph, FlowGraph};

use crate::error::{contract, Error, Result};
use crate::io;
use crate::tensor::{DiffusionSupports, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroConfig {
    pub enabled: bool,
    /// Hidden width `F_m`.
    pub hidden: usize,
    /// Diffusion steps per direction.
    pub k: usize,
    /// Forecast horizon in intervals.
    pub horizon: usize,
    pub encoder_len: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden: 8,
            k: 2,
            horizon: 12,
            encoder_len: 12,
            epochs: 40,
            lr: 0.005,
        }
    }
}

impl MacroConfig {
    pub fn train_config(&self) -> MacroTrainConfig {
        MacroTrainConfig {
            horizon: self.horizon,
            encoder_len: self.encoder_len,
            epochs: self.epochs,
            lr: self.lr,
        }
    }
}

/// Per-interval node inputs and graph supports.
pub struct MacroInputs {
    pub x: Vec<Tensor>,
    pub supports: Vec<Rc<DiffusionSupports>>,
    /// Case counts were divided by this before entering `x`.
    pub scale: f64,
    pub intervals_per_day: usize,
}

impl MacroInputs {
    /// Daily counts (region x day) held constant across each day's intervals.
    pub fn new(
        flow: &FlowGraph,
        cases: &[Vec<f64>],
        intervals_per_day: usize,
        k: usize,
    ) -> Result<Self> {
        if cases.len() != flow.n_regions() {
            return Err(contract(format!(
                "{} case series for {} regions",
                cases.len(),
                flow.n_regions()
            )));
        }
        let days_needed = flow.n_intervals().div_ceil(intervals_per_day);
        if cases.iter().any(|c| c.len() < days_needed) {
            return Err(contract(format!(
                "case series shorter than {days_needed} days"
            )));
        }
        let peak = cases.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let scale = peak.max(1.0);
        let m = flow.n_regions();
        let x = (0..flow.n_intervals())
            .map(|t| {
                let d = t / intervals_per_day;
                Tensor::matrix(m, 1, cases.iter().map(|c| c[d] / scale).collect())
            })
            .collect();
        Ok(Self {
            x,
            supports: flow.supports(k),
            scale,
            intervals_per_day,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.x.first().map_or(0, Tensor::rows)
    }

    pub fn n_intervals(&self) -> usize {
        self.x.len()
    }
}

/// Spatio-temporal encoders whose hidden states feed the coupling.
pub trait Encoder {
    fn hidden_width(&self) -> usize;
    fn encode(&self, inputs: &MacroInputs) -> Result<MacroHidden>;
}

/// Hidden vector per (region, interval).
#[derive(Debug, Clone, PartialEq)]
pub struct MacroHidden {
    n_regions: usize,
    n_intervals: usize,
    width: usize,
    data: Vec<f64>,
}

const HIDDEN_MAGIC: &[u8; 4] = b"FMH1";

impl MacroHidden {
    pub fn zeros(n_regions: usize, n_intervals: usize, width: usize) -> Self {
        Self {
            n_regions,
            n_intervals,
            width,
            data: vec![0.0; n_regions * n_intervals * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn get(&self, region: usize, t: usize) -> &[f64] {
        let at = (t * self.n_regions + region) * self.width;
        &self.data[at..at + self.width]
    }

    /// Each dimension shifted to zero mean over all cells.
    pub fn centered(&self) -> Self {
        let w = self.width;
        let n = (self.data.len() / w.max(1)) as f64;
        let mut out = self.clone();
        for k in 0..w {
            let mean = self.data.iter().skip(k).step_by(w).sum::<f64>() / n;
            out.data
                .iter_mut()
                .skip(k)
                .step_by(w)
                .for_each(|v| *v -= mean);
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn fill_with(&mut self, mut f: impl FnMut() -> f64) {
        self.data.iter_mut().for_each(|v| *v = f());
    }

    fn set_interval(&mut self, t: usize, h: &Tensor) {
        let n = self.n_regions * self.width;
        self.data[t * n..(t + 1) * n].copy_from_slice(h.data());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, |w| {
            w.write_all(HIDDEN_MAGIC)?;
            for d in [self.n_regions, self.n_intervals, self.width] {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &self.data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                path: path.to_path_buf(),
                producer: "train",
            });
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::Data(format!("{} is not a hidden-state dump", path.display()));
        if bytes.len() < 28 || &bytes[..4] != HIDDEN_MAGIC {
            return Err(bad());
        }
        let dim = |i: usize| {
            u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes")) as usize
        };
        let (m, t, w) = (dim(0), dim(1), dim(2));
        let body = &bytes[28..];
        if body.len() != m * t * w * 8 {
            return Err(bad());
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            n_regions: m,
            n_intervals: t,
            width: w,
            data,
        })
    }
}

/// Trained model plus its per-epoch loss history.
pub struct MacroRun {
    pub model: DcgruModel,
    pub losses: Vec<f64>,
}

pub fn train_macro(inputs: &MacroInputs, cfg: &MacroConfig, seed: u64) -> Result<MacroRun> {
    let mut model = DcgruModel::new(DcgruParams::init(cfg.hidden, cfg.k, seed));
    let losses = model.train(inputs, &cfg.train_config())?;
    Ok(MacroRun { model, losses })
}

pub fn export_hidden(model: &dyn Encoder, inputs: &MacroInputs) -> Result<MacroHidden> {
    model.encode(inputs)
}

/// Predicted new cases per region per day: readouts made `horizon` intervals
/// earlier, averaged over each day's intervals and rescaled to counts.
pub fn forecast(model: &DcgruModel, inputs: &MacroInputs, horizon: usize) -> Result<Vec<Vec<f64>>> {
    let (_, preds) = model.run(inputs)?;
    let ipd = inputs.intervals_per_day;
    let n_days = inputs.n_intervals().div_ceil(ipd);
    let m = inputs.n_regions();
    let mut sums = vec![vec![0.0; n_days]; m];
    let mut counts = vec![0usize; n_days];
    for (t, p) in preds.iter().enumerate() {
        let target = t + horizon;
        if target >= inputs.n_intervals() {
            break;
        }
        let d = target / ipd;
        counts[d] += 1;
        for (r, row) in sums.iter_mut().enumerate() {
            row[d] += p.get(r, 0) * inputs.scale;
        }
    }
    for row in &mut sums {
        for (d, v) in row.iter_mut().enumerate() {
            if counts[d] > 0 {
                *v /= counts[d] as f64;
            }
        }
    }
    Ok(sums)
}

pub fn export_forecast(forecast: &[Vec<f64>], path: &Path) -> Result<()> {
    let rows = forecast.iter().enumerate().flat_map(|(r, row)| {
        row.iter()
            .enumerate()
            .map(move |(d, v)| [r.to_string(), d.to_string(), format!("{v:.6}")])
    });
    io::write_csv(path, &["region_id", "day", "predicted_new_cases"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epidemic::{simulate, DiseaseParams};
    use crate::mobility::{generate_population, RoutineParams};

    fn small_inputs(seed: u64, zero_cases: bool) -> MacroInputs {
        let (pop, _) = generate_population(seed, 120, 12, 72, &RoutineParams::default()).unwrap();
        let log = simulate(&pop, &DiseaseParams::omicron(), 10, seed).unwrap();
        let cases: Vec<Vec<f64>> = log
            .new_cases()
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&c| if zero_cases { 0.0 } else { f64::from(c) })
                    .collect()
            })
            .collect();
        let flow = build_flow_graph(&pop).unwrap();
        MacroInputs::new(&flow, &cases, 12, 2).unwrap()
    }

    fn cfg(epochs: usize, lr: f64) -> MacroConfig {
        MacroConfig {
            hidden: 4,
            epochs,
            lr,
            ..MacroConfig::default()
        }
    }

    #[test]
    fn zero_model_exports_zero_hidden() {
        let inputs = small_inputs(1, false);
        let model = DcgruModel::new(DcgruParams::zeros(4, 2));
        let h = export_hidden(&model, &inputs).unwrap();
        assert_eq!(h.width(), 4);
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn export_is_deterministic_with_configured_width() {
        let inputs = small_inputs(2, false);
        let run = train_macro(&inputs, &cfg(3, 0.01), 1).unwrap();
        let a = export_hidden(&run.model, &inputs).unwrap();
        let b = export_hidden(&run.model, &inputs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(3, 10).len(), 4);
        assert!(a.is_finite());
    }

    #[test]
    fn frozen_optimizer_keeps_params() {
        let inputs = small_inputs(3, false);
        let run = train_macro(&inputs, &cfg(3, 0.0), 4).unwrap();
        assert_eq!(run.model.params, DcgruParams::init(4, 2, 4));
    }

    #[test]
    fn zero_cases_drive_loss_to_zero() {
        let inputs = small_inputs(4, true);
        let run = train_macro(&inputs, &cfg(150, 0.02), 2).unwrap();
        let last = *run.losses.last().unwrap();
        assert!(
            last < 1e-4 && last < run.losses[0] / 10.0,
            "losses {:?}",
            &run.losses[..5]
        );
    }

    #[test]
    fn loss_decreases_early_for_most_seeds() {
        let lr = MacroConfig::default().lr;
        let mut ok = 0;
        for seed in 0..10 {
            let inputs = small_inputs(10 + seed, false);
            let run = train_macro(&inputs, &cfg(11, lr), seed).unwrap();
            if run.losses.windows(2).all(|w| w[1] < w[0]) {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10 seeds decreased monotonically");
    }

    #[test]
    fn hidden_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = small_inputs(6, false);
        let run = train_macro(&inputs, &cfg(2, 0.01), 5).unwrap();
        let h = export_hidden(&run.model, &inputs).unwrap();
        let p = dir.path().join("hidden.bin");
        h.write(&p).unwrap();
        assert_eq!(MacroHidden::read(&p).unwrap(), h);
        let f = forecast(&run.model, &inputs, 12).unwrap();
        assert_eq!(f.len(), 12);
        export_forecast(&f, &dir.path().join("forecast.csv")).unwrap();
    }
}
