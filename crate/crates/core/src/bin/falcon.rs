use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use falcon::attacks::{gradient_attack, localization_attack, AttackKind};
use falcon::config::{parse_overrides, ExperimentConfig};
use falcon::epidemic::read_labels;
use falcon::fedtrain::{observed_graph, Checkpoint, Variant};
use falcon::io;
use falcon::macro_model::export_forecast;
use falcon::metrics::{
    evaluate, export_pr_curve, export_predictions, pr_curve, read_predictions, ScoredLabels,
};
use falcon::pipeline::{
    ablation, attack_report, decoy_stage, ensure_dir, generate_mobility, layout, load_mobility,
    load_world, macro_stage, mean_auc, privacy_utility_sweep, run_variant, save_epidemic,
    save_mobility, simulate_epidemic, Manifest, World,
};
use falcon::pseudoloc::{export_traces, read_traces};
use falcon::{Error, Result};

/// Federated infection prediction over simulated mobility traces.
#[derive(Parser)]
#[command(name = "falcon", version)]
struct Cli {
    /// TOML experiment configuration; omitted keys take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Dotted config overrides such as `--model.epochs 20` or `--privacy.n_p=4`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    rest: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectories and region geometry.
    GenMobility(Overrides),
    /// Run the epidemic over the generated traces and split the labels.
    Simulate(Overrides),
    /// Train one model variant and score every user.
    Train {
        #[arg(long, default_value = "falcon")]
        variant: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a privacy attack against stored artifacts.
    Attack {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Trained variant whose transcript the gradient attack reads.
        #[arg(long, default_value = "falcon")]
        variant: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compute metrics from a predictions file and a labels file.
    Evaluate {
        /// Defaults to the stored predictions of `--variant`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Defaults to the labels written by `simulate`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Restricts scoring to the `eval` users of this split; defaults to the stored split.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Score every user instead of the held-out ones.
        #[arg(long, conflicts_with = "split")]
        all_users: bool,
        #[arg(long, default_value = "falcon")]
        variant: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Attack error (and optionally utility) across the noise and decoy grids.
    Sweep {
        /// Also train each grid point to completion and report utility.
        #[arg(long)]
        utility: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Every ablation variant over several seeds.
    Ablate(Overrides),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gradient,
    Localization,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FALCON_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        Error::Config(format!(
            "FALCON_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli, rest: &[String]) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(rest)?;
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn variant(name: &str) -> Result<Variant> {
    Variant::parse(name).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        Error::Config(format!(
            "unknown variant `{name}` (one of {})",
            known.join(", ")
        ))
    })
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenMobility(o) => {
            let cfg = load_config(&cli, &o.rest)?;
            gen_mobility(&cfg)
        }
        Command::Simulate(o) => {
            let cfg = load_config(&cli, &o.rest)?;
            simulate(&cfg)
        }
        Command::Train {
            variant: v,
            overrides,
        } => {
            let cfg = load_config(&cli, &overrides.rest)?;
            train(&cfg, variant(v)?)
        }
        Command::Attack {
            kind,
            variant: v,
            overrides,
        } => {
            let cfg = load_config(&cli, &overrides.rest)?;
            attack(&cfg, *kind, variant(v)?)
        }
        Command::Evaluate {
            predictions,
            labels,
            split,
            all_users,
            variant: v,
            overrides,
        } => {
            let cfg = load_config(&cli, &overrides.rest)?;
            let dir = variant_dir(&cfg, variant(v)?);
            let predictions = predictions
                .clone()
                .unwrap_or_else(|| dir.join(layout::PREDICTIONS));
            let labels = labels
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(layout::LABELS));
            let split = match (split, all_users) {
                (_, true) => None,
                (Some(s), false) => Some(s.clone()),
                (None, false) => Some(cfg.out_dir.join(layout::SPLIT)),
            };
            eval_files(&cfg, &predictions, &labels, split.as_deref())
        }
        Command::Sweep { utility, overrides } => {
            let cfg = load_config(&cli, &overrides.rest)?;
            sweep(&cfg, *utility)
        }
        Command::Ablate(o) => {
            let cfg = load_config(&cli, &o.rest)?;
            ablate(&cfg)
        }
    }
}

fn gen_mobility(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let (pop, geo) = generate_mobility(cfg)?;
    let files = save_mobility(dir, &pop, &geo)?;
    Manifest::new("gen-mobility", cfg, files).write(dir)
}

fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    let (pop, _) = load_mobility(dir)?;
    let (log, split) = simulate_epidemic(cfg, &pop)?;
    let files = save_epidemic(dir, &log, &split)?;
    Manifest::new("simulate", cfg, files).write(dir)
}

fn variant_dir(cfg: &ExperimentConfig, v: Variant) -> PathBuf {
    cfg.out_dir.join(layout::TRAIN_DIR).join(v.name())
}

fn train(cfg: &ExperimentConfig, v: Variant) -> Result<()> {
    let root = &cfg.out_dir;
    let world = load_world(cfg, root)?;
    let mut files = Vec::new();
    let macro_art = if v.uses_macro(cfg.macro_model.enabled) {
        let m = macro_stage(cfg, &world)?;
        let (h, f) = (root.join(layout::HIDDEN), root.join(layout::FORECAST));
        m.hidden.write(&h)?;
        export_forecast(&m.forecast, &f)?;
        files.extend([h, f]);
        Some(m)
    } else {
        None
    };
    let privacy = v.privacy(&cfg.privacy);
    let decoys = if v == Variant::Dct || privacy.n_p == 0 {
        None
    } else {
        let d = decoy_stage(cfg, &world, privacy.generator, privacy.n_p)?;
        let p = root.join(layout::PSEUDO_TRACES);
        export_traces(&world.pop, &d.decoys, &p)?;
        files.push(p);
        Some(d)
    };
    let run = run_variant(cfg, &world, v, macro_art.as_ref(), decoys.as_ref())?;
    let dir = variant_dir(cfg, v);
    ensure_dir(&dir)?;
    let pred = dir.join(layout::PREDICTIONS);
    export_predictions(&run.scores, &pred)?;
    files.push(pred);
    if let Some(out) = &run.outcome {
        let ckpt = dir.join(layout::CHECKPOINT);
        Checkpoint::from_outcome(out, cfg.seed).write(&ckpt)?;
        let losses = dir.join(layout::LOSSES);
        io::write_csv(
            &losses,
            &["epoch", "loss"],
            out.losses
                .iter()
                .enumerate()
                .map(|(e, l)| [e.to_string(), format!("{l}")]),
        )?;
        files.extend([ckpt, losses]);
        if !out.transcript.is_empty() {
            let tr = dir.join(layout::TRANSCRIPT);
            io::write_json(&tr, &out.transcript)?;
            files.push(tr);
        }
    }
    files.extend(write_metrics(cfg, &world, &run.scores, &dir)?);
    Manifest::new(&format!("train-{}", v.name()), cfg, files).write(root)
}

fn eval_labels(world: &World, scores: &[f64]) -> Result<ScoredLabels> {
    let eval = &world.split.eval;
    ScoredLabels::new(
        eval.iter().map(|&u| scores[u]).collect(),
        eval.iter().map(|&u| world.labels[u]).collect(),
    )
}

fn write_metrics(
    cfg: &ExperimentConfig,
    world: &World,
    scores: &[f64],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    write_scored(cfg, &eval_labels(world, scores)?, dir)
}

fn write_scored(cfg: &ExperimentConfig, sl: &ScoredLabels, dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics = evaluate(sl, cfg.disease.params()?.r0())?;
    let (m, pr) = (dir.join(layout::METRICS), dir.join(layout::PR_CURVE));
    io::write_json(&m, &metrics)?;
    export_pr_curve(&pr_curve(sl), &pr)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(vec![m, pr])
}

fn eval_files(
    cfg: &ExperimentConfig,
    predictions: &Path,
    labels: &Path,
    split: Option<&Path>,
) -> Result<()> {
    let scores = read_predictions(predictions)?;
    let labels = read_labels(labels)?;
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let users: Vec<usize> = match split {
        Some(p) => falcon::epidemic::read_split(p)?.eval,
        None => (0..labels.len()).collect(),
    };
    if let Some(&u) = users.iter().find(|&&u| u >= labels.len()) {
        return Err(Error::Data(format!(
            "split names user {u}, only {} labeled",
            labels.len()
        )));
    }
    let sl = ScoredLabels::new(
        users.iter().map(|&u| scores[u]).collect(),
        users.iter().map(|&u| labels[u]).collect(),
    )?;
    let dir = cfg.out_dir.join("evaluate");
    let files = write_scored(cfg, &sl, &dir)?;
    Manifest::new("evaluate", cfg, files).write(&cfg.out_dir)
}

fn attack(cfg: &ExperimentConfig, kind: Kind, v: Variant) -> Result<()> {
    let root = &cfg.out_dir;
    let (pop, _) = load_mobility(root)?;
    let privacy = v.privacy(&cfg.privacy);
    let decoys_path = root.join(layout::PSEUDO_TRACES);
    let decoys = if privacy.n_p == 0 {
        Vec::new()
    } else {
        read_traces(&decoys_path, &pop)?
    };
    let (report, name) = match kind {
        Kind::Gradient => {
            let tr_path = variant_dir(cfg, v).join(layout::TRANSCRIPT);
            let transcript = io::read_json(&tr_path, "train")?;
            let graph = observed_graph(&pop, &decoys)?;
            let counts = gradient_attack(&transcript, &graph, &pop, 0, cfg.attack.rule)?;
            (
                attack_report(AttackKind::Gradient, &privacy, false, counts),
                "attack-gradient.json",
            )
        }
        Kind::Localization => {
            let world = load_world(cfg, root)?;
            let agg = decoy_stage(cfg, &world, privacy.generator, 0)?.aggregate;
            let strong = cfg.attack.strong_adversary;
            let counts = localization_attack(&pop, &decoys, &agg, strong, cfg.attack.max_users)?;
            (
                attack_report(AttackKind::Localization, &privacy, strong, counts),
                "attack-localization.json",
            )
        }
    };
    let path = root.join(name);
    report.write(&path)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Manifest::new(name.trim_end_matches(".json"), cfg, vec![path]).write(root)
}

fn sweep(cfg: &ExperimentConfig, utility: bool) -> Result<()> {
    let root = &cfg.out_dir;
    let world = load_world(cfg, root)?;
    let rows = privacy_utility_sweep(cfg, &world, utility)?;
    let path = root.join(layout::SWEEP);
    io::write_csv(
        &path,
        &["kind", "n_p", "sigma_l", "attack_error", "auc", "f1"],
        rows.iter().map(|r| {
            [
                r.kind.clone(),
                r.n_p.to_string(),
                format!("{}", r.sigma_l),
                format!("{}", r.attack_error),
                format!("{}", r.auc),
                format!("{}", r.f1),
            ]
        }),
    )?;
    Manifest::new("sweep", cfg, vec![path]).write(root)
}

fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    let root = &cfg.out_dir;
    ensure_dir(root)?;
    let rows = ablation(cfg, cfg.ablation.seeds)?;
    let path = root.join(layout::ABLATION);
    io::write_csv(
        &path,
        &["variant", "seed", "auc", "f1", "accuracy", "bep"],
        rows.iter().map(|r| {
            [
                r.variant.name().to_string(),
                r.seed.to_string(),
                format!("{}", r.auc),
                format!("{}", r.f1),
                format!("{}", r.accuracy),
                format!("{}", r.bep),
            ]
        }),
    )?;
    for v in Variant::ABLATION {
        println!("{:<18} {:.4}", v.name(), mean_auc(&rows, v));
    }
    Manifest::new("ablate", cfg, vec![path]).write(root)
}
