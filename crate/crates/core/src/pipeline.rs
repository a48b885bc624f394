//! Stage functions shared by the command line and the tests: each one is a
//! pure function of the configuration and the artifacts of earlier stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{error_rate, gradient_attack, localization_attack, AttackKind, AttackReport};
use crate::config::ExperimentConfig;
use crate::epidemic::{
    dct_baseline, export_cases, export_labels, export_split, export_timeline, read_split,
    read_timeline, simulate, split_labels, EpidemicLog, Split,
};
use crate::error::{Error, Result};
use crate::fedtrain::{
    observed_graph, train_central, train_federated, CentralConfig, CentralInputs, FederatedInputs,
    GradientMode, PrivacyConfig, TrainOutcome, Trainer, TranscriptConfig, Variant,
};
use crate::hypergraph::StHypergraph;
use crate::io;
use crate::macro_model::{
    build_flow_graph, export_hidden, forecast, train_macro, MacroHidden, MacroInputs,
};
use crate::metrics::{evaluate, Metrics, ScoredLabels};
use crate::mobility::{
    export_csv, export_geometry, generate_population, ingest_csv, ingest_geometry,
    subsample_reporting, Population, PopulationMeta, RegionGeometry,
};
use crate::pseudoloc::{
    cluster_regions, default_k, fit_aggregate_model, generate_all, similarity_matrix,
    EpidemicClustering, GeneratorContext, GeneratorKind, MobilityModel,
};
use crate::rng::sub_seed;
use crate::tensor::Tensor;

mod stage {
    pub const MOBILITY: u64 = 1;
    pub const REPORTING: u64 = 2;
    pub const EPIDEMIC: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const MACRO: u64 = 5;
    pub const DECOYS: u64 = 6;
    pub const TRAIN: u64 = 7;

    pub const NAMED: [(&str, u64); 7] = [
        ("mobility", MOBILITY),
        ("reporting", REPORTING),
        ("epidemic", EPIDEMIC),
        ("split", SPLIT),
        ("macro", MACRO),
        ("decoys", DECOYS),
        ("train", TRAIN),
    ];
}

/// File names of the stage artifacts inside an output directory.
pub mod layout {
    pub const TRACES: &str = "traces.csv";
    pub const REGIONS: &str = "regions.csv";
    pub const POPULATION: &str = "population.json";
    pub const TIMELINE: &str = "timeline.csv";
    pub const LABELS: &str = "labels.csv";
    pub const CASES: &str = "cases.csv";
    pub const SPLIT: &str = "split.csv";
    pub const HIDDEN: &str = "hidden.bin";
    pub const FORECAST: &str = "forecast.csv";
    pub const PSEUDO_TRACES: &str = "pseudo_traces.csv";
    pub const TRAIN_DIR: &str = "train";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const LOSSES: &str = "losses.csv";
    pub const TRANSCRIPT: &str = "transcript.json";
    pub const METRICS: &str = "metrics.json";
    pub const PR_CURVE: &str = "pr_curve.csv";
    pub const SWEEP: &str = "sweep.csv";
    pub const ABLATION: &str = "ablation.csv";
}

/// Everything the simulation knows about one scenario.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub pop: Population,
    pub geo: RegionGeometry,
    pub log: EpidemicLog,
    pub split: Split,
    pub labels: Vec<bool>,
}

impl World {
    pub fn train_mask(&self) -> Vec<bool> {
        self.split.train_mask(self.pop.n_users())
    }

    /// Daily new cases per region among training users, the only case
    /// counts a health authority would hold.
    pub fn known_cases(&self) -> Vec<Vec<f64>> {
        let mask = self.train_mask();
        self.log
            .new_cases_among(|u| mask[u])
            .into_iter()
            .map(|row| row.into_iter().map(f64::from).collect())
            .collect()
    }
}

pub fn generate_mobility(cfg: &ExperimentConfig) -> Result<(Population, RegionGeometry)> {
    let m = &cfg.mobility;
    let (pop, geo) = generate_population(
        sub_seed(cfg.seed, stage::MOBILITY),
        m.n_users,
        m.n_regions,
        m.n_intervals,
        &m.routine,
    )?;
    let pop = if m.eta < 1.0 {
        subsample_reporting(&pop, m.eta, sub_seed(cfg.seed, stage::REPORTING))?
    } else {
        pop
    };
    Ok((pop, geo))
}

pub fn simulate_epidemic(cfg: &ExperimentConfig, pop: &Population) -> Result<(EpidemicLog, Split)> {
    let params = cfg.disease.params()?;
    let log = simulate(
        pop,
        &params,
        cfg.disease.n_seed_infections,
        sub_seed(cfg.seed, stage::EPIDEMIC),
    )?;
    let split = split_labels(
        pop.n_users(),
        cfg.model.label_ratio,
        sub_seed(cfg.seed, stage::SPLIT),
    )?;
    Ok((log, split))
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let (pop, geo) = generate_mobility(cfg)?;
    let (log, split) = simulate_epidemic(cfg, &pop)?;
    Ok(World {
        seed: cfg.seed,
        labels: log.final_labels(),
        pop,
        geo,
        log,
        split,
    })
}

/// Writes the mobility stage; returns the files written.
pub fn save_mobility(dir: &Path, pop: &Population, geo: &RegionGeometry) -> Result<Vec<PathBuf>> {
    let files = [layout::TRACES, layout::REGIONS, layout::POPULATION].map(|f| dir.join(f));
    export_csv(pop, &files[0])?;
    export_geometry(geo, &files[1])?;
    io::write_json(&files[2], &pop.meta())?;
    Ok(files.to_vec())
}

pub fn load_mobility(dir: &Path) -> Result<(Population, RegionGeometry)> {
    let meta: PopulationMeta = io::read_json(&dir.join(layout::POPULATION), "gen-mobility")?;
    let pop = ingest_csv(&dir.join(layout::TRACES), Some(&meta))?;
    let geo = ingest_geometry(&dir.join(layout::REGIONS))?;
    if geo.n_regions() != pop.n_regions {
        return Err(Error::Data(format!(
            "{} regions in the geometry, {} in the traces",
            geo.n_regions(),
            pop.n_regions
        )));
    }
    Ok((pop, geo))
}

/// Writes the epidemic stage; returns the files written.
pub fn save_epidemic(dir: &Path, log: &EpidemicLog, split: &Split) -> Result<Vec<PathBuf>> {
    let files = [
        layout::TIMELINE,
        layout::LABELS,
        layout::CASES,
        layout::SPLIT,
    ]
    .map(|f| dir.join(f));
    export_timeline(log, &files[0])?;
    export_labels(&log.final_labels(), &files[1])?;
    export_cases(&log.new_cases(), &files[2])?;
    export_split(split, &files[3])?;
    Ok(files.to_vec())
}

/// Rebuilds the world from the mobility and epidemic stage files.
pub fn load_world(cfg: &ExperimentConfig, dir: &Path) -> Result<World> {
    let (pop, geo) = load_mobility(dir)?;
    let log = read_timeline(&dir.join(layout::TIMELINE), &pop)?;
    let split = read_split(&dir.join(layout::SPLIT))?;
    let mut seen = vec![false; pop.n_users()];
    for &u in split.train.iter().chain(&split.eval) {
        match seen.get_mut(u) {
            Some(s @ false) => *s = true,
            _ => {
                return Err(Error::Data(format!(
                    "split lists user {u} twice or out of range"
                )))
            }
        }
    }
    if seen.contains(&false) {
        return Err(Error::Data("split does not cover every user".into()));
    }
    Ok(World {
        seed: cfg.seed,
        labels: log.final_labels(),
        pop,
        geo,
        log,
        split,
    })
}

pub struct MacroArtifacts {
    pub hidden: MacroHidden,
    /// Predicted new cases per region per day.
    pub forecast: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

pub fn macro_stage(cfg: &ExperimentConfig, world: &World) -> Result<MacroArtifacts> {
    let mc = &cfg.macro_model;
    let flow = build_flow_graph(&world.pop)?;
    let inputs = MacroInputs::new(
        &flow,
        &world.known_cases(),
        world.pop.intervals_per_day(),
        mc.k,
    )?;
    let run = train_macro(&inputs, mc, sub_seed(cfg.seed, stage::MACRO))?;
    let hidden = export_hidden(&run.model, &inputs)?;
    let forecast = forecast(&run.model, &inputs, mc.horizon)?;
    Ok(MacroArtifacts {
        hidden,
        forecast,
        losses: run.losses,
    })
}

pub struct DecoyArtifacts {
    pub aggregate: MobilityModel,
    pub clustering: EpidemicClustering,
    pub decoys: Vec<Vec<Vec<Option<usize>>>>,
}

/// Aggregate mobility model, epidemic clustering and `n_p` decoys per user.
pub fn decoy_stage(
    cfg: &ExperimentConfig,
    world: &World,
    kind: GeneratorKind,
    n_p: usize,
) -> Result<DecoyArtifacts> {
    let pop = &world.pop;
    let aggregate = fit_aggregate_model(
        &pop.trajectories,
        pop.n_regions,
        pop.n_intervals,
        cfg.decoys.transition_floor,
        &world.geo,
    )?;
    let k = match cfg.decoys.clusters {
        0 => default_k(pop.n_regions),
        k => k,
    };
    let clustering = cluster_regions(
        &similarity_matrix(&world.known_cases(), &world.geo, cfg.decoys.gamma),
        k,
    )?;
    let decoys = if n_p == 0 {
        Vec::new()
    } else {
        let ctx = GeneratorContext {
            n_regions: pop.n_regions,
            aggregate: &aggregate,
            clustering: &clustering,
        };
        generate_all(kind, pop, &ctx, n_p, sub_seed(cfg.seed, stage::DECOYS))
    };
    Ok(DecoyArtifacts {
        aggregate,
        clustering,
        decoys,
    })
}

/// Edge features for a centralized run over `graph`.
fn edge_features(graph: &StHypergraph, hidden: &MacroHidden) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..graph.n_edges())
        .map(|e| {
            let (r, t) = graph.cell(e);
            hidden.get(r, t).to_vec()
        })
        .collect();
    Tensor::from_rows(&rows)
}

pub struct VariantRun {
    pub variant: Variant,
    pub scores: Vec<f64>,
    pub outcome: Option<TrainOutcome>,
    pub privacy: PrivacyConfig,
}

/// Trains `variant` on `world`. Macro features and decoys come from the
/// caller so several variants can share them; missing ones are built here.
pub fn run_variant(
    cfg: &ExperimentConfig,
    world: &World,
    variant: Variant,
    macro_art: Option<&MacroArtifacts>,
    decoys: Option<&DecoyArtifacts>,
) -> Result<VariantRun> {
    let privacy = variant.privacy(&cfg.privacy);
    let train_mask = world.train_mask();
    let seed = sub_seed(cfg.seed, stage::TRAIN);
    let uses_macro = variant.uses_macro(cfg.macro_model.enabled);
    let built_macro;
    let macro_art = match (uses_macro, macro_art) {
        (false, _) => None,
        (true, Some(m)) => Some(m),
        (true, None) => {
            built_macro = macro_stage(cfg, world)?;
            Some(&built_macro)
        }
    };
    let coupled = macro_art.map(|m| m.hidden.centered());
    let hidden = coupled.as_ref();
    match variant.trainer() {
        Trainer::ContactTracing => {
            let known: Vec<usize> = world
                .split
                .train
                .iter()
                .copied()
                .filter(|&u| world.labels[u])
                .collect();
            let scores = dct_baseline(&world.pop, &world.log, &known)
                .into_iter()
                .map(|flag| if flag { 1.0 } else { 0.0 })
                .collect();
            Ok(VariantRun {
                variant,
                scores,
                outcome: None,
                privacy,
            })
        }
        Trainer::Central { noisy } => {
            let graph = StHypergraph::build(&world.pop)?;
            let feats = hidden.map(|h| edge_features(&graph, h));
            let central = CentralConfig {
                mode: GradientMode::Detached,
                edge_noise: if noisy {
                    privacy.effective_sigma_l(cfg.model.layers)?
                } else {
                    0.0
                },
            };
            let inputs = CentralInputs {
                graph: &graph,
                labels: &world.labels,
                train_mask: &train_mask,
                macro_feats: feats.as_ref(),
            };
            let out = train_central(&inputs, &cfg.model, &central, seed)?;
            Ok(VariantRun {
                variant,
                scores: out.scores.clone(),
                outcome: Some(out),
                privacy,
            })
        }
        Trainer::Federated => {
            let built_decoys;
            let decoys: &[Vec<Vec<Option<usize>>>] = if privacy.n_p == 0 {
                &[]
            } else {
                match decoys {
                    Some(d) if d.decoys.first().map_or(0, Vec::len) == privacy.n_p => &d.decoys,
                    _ => {
                        built_decoys = decoy_stage(cfg, world, privacy.generator, privacy.n_p)?;
                        &built_decoys.decoys
                    }
                }
            };
            let inputs = FederatedInputs {
                population: &world.pop,
                pseudo: decoys,
                labels: &world.labels,
                train_mask: &train_mask,
                macro_hidden: hidden,
            };
            let out = train_federated(&inputs, &cfg.model, &privacy, &cfg.transcript, seed)?;
            Ok(VariantRun {
                variant,
                scores: out.scores.clone(),
                outcome: Some(out),
                privacy,
            })
        }
    }
}

/// Metrics over the users whose labels were hidden during training.
pub fn eval_metrics(cfg: &ExperimentConfig, world: &World, scores: &[f64]) -> Result<Metrics> {
    let eval = &world.split.eval;
    let sl = ScoredLabels::new(
        eval.iter().map(|&u| scores[u]).collect(),
        eval.iter().map(|&u| world.labels[u]).collect(),
    )?;
    evaluate(&sl, cfg.disease.params()?.r0())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub auc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub bep: f64,
}

/// Every ablation variant on `seeds` consecutive scenarios. The centralized
/// row is the plain model without coupling.
pub fn ablation(cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for s in 0..seeds as u64 {
        let cfg_s = ExperimentConfig {
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        let world = build_world(&cfg_s)?;
        let macro_art = if cfg_s.macro_model.enabled {
            Some(macro_stage(&cfg_s, &world)?)
        } else {
            None
        };
        let base = cfg_s.privacy.effective();
        let decoys = if base.n_p > 0 {
            Some(decoy_stage(&cfg_s, &world, base.generator, base.n_p)?)
        } else {
            None
        };
        for variant in Variant::ABLATION {
            let run = if variant == Variant::HgnnCentral {
                let mut plain = cfg_s.clone();
                plain.macro_model.enabled = false;
                run_variant(&plain, &world, variant, None, None)?
            } else {
                run_variant(&cfg_s, &world, variant, macro_art.as_ref(), decoys.as_ref())?
            };
            let m = eval_metrics(&cfg_s, &world, &run.scores)?;
            log::info!("seed {} {}: auc {:.4}", cfg_s.seed, variant.name(), m.auc);
            rows.push(AblationRow {
                variant,
                seed: cfg_s.seed,
                auc: m.auc,
                f1: m.f1,
                accuracy: m.accuracy,
                bep: m.bep,
            });
        }
    }
    Ok(rows)
}

pub fn mean_auc(rows: &[AblationRow], variant: Variant) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.auc)
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub n_p: usize,
    pub sigma_l: f64,
    pub attack_error: f64,
    pub auc: f64,
    pub f1: f64,
}

/// Attack error and utility across the configured noise and decoy grids.
/// With `train_utility` off only the first round runs, which is all the
/// gradient attack reads; utility columns are then NaN.
pub fn privacy_utility_sweep(
    cfg: &ExperimentConfig,
    world: &World,
    train_utility: bool,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let macro_art = if cfg.macro_model.enabled && train_utility {
        Some(macro_stage(cfg, world)?)
    } else {
        None
    };
    for &n_p in &cfg.attack.n_p_grid {
        let decoys = decoy_stage(cfg, world, cfg.privacy.generator, n_p)?;
        let (w, n) = localization_attack(
            &world.pop,
            &decoys.decoys,
            &decoys.aggregate,
            cfg.attack.strong_adversary,
            cfg.attack.max_users,
        )?;
        rows.push(SweepRow {
            kind: format!("localization-{}", cfg.privacy.generator.name()),
            n_p,
            sigma_l: f64::NAN,
            attack_error: error_rate(w, n),
            auc: f64::NAN,
            f1: f64::NAN,
        });
        let graph = observed_graph(&world.pop, &decoys.decoys)?;
        for &sigma_l in &cfg.attack.sigma_grid {
            let mut c = cfg.clone();
            c.privacy = PrivacyConfig {
                enabled: true,
                n_p,
                sigma_l,
                calibrate_sigma_l: false,
                ..cfg.privacy.clone()
            };
            c.transcript = TranscriptConfig {
                rounds: vec![0],
                layers: vec![0],
                ..TranscriptConfig::default()
            };
            if !train_utility {
                c.model.epochs = 1;
                c.macro_model.enabled = false;
            }
            let run = run_variant(
                &c,
                world,
                Variant::Falcon,
                macro_art.as_ref(),
                Some(&decoys),
            )?;
            let out = run.outcome.as_ref().expect("federated run has an outcome");
            let (w, n) = gradient_attack(&out.transcript, &graph, &world.pop, 0, cfg.attack.rule)?;
            let (auc, f1) = if train_utility {
                let m = eval_metrics(&c, world, &run.scores)?;
                (m.auc, m.f1)
            } else {
                (f64::NAN, f64::NAN)
            };
            rows.push(SweepRow {
                kind: "gradient".into(),
                n_p,
                sigma_l,
                attack_error: error_rate(w, n),
                auc,
                f1,
            });
        }
    }
    Ok(rows)
}

pub fn attack_report(
    kind: AttackKind,
    privacy: &PrivacyConfig,
    strong: bool,
    (wrong, total): (usize, usize),
) -> AttackReport {
    AttackReport {
        kind,
        generator: privacy.generator.name().into(),
        n_p: privacy.n_p,
        sigma_l: privacy.sigma_l,
        strong_adversary: strong,
        wrong,
        total,
        error: error_rate(wrong, total),
    }
}

/// Provenance record written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seed each stage derives from `seed`.
    pub stage_seeds: BTreeMap<String, u64>,
    pub outputs: Vec<PathBuf>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &ExperimentConfig, outputs: Vec<PathBuf>) -> Self {
        Self {
            stage: stage.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            stage_seeds: stage::NAMED
                .iter()
                .map(|&(name, id)| (name.to_string(), sub_seed(cfg.seed, id)))
                .collect(),
            outputs,
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(format!("manifest-{}.json", self.stage)), self)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
