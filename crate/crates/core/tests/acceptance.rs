//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any fails.

use std::cell::OnceCell;
use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use falcon::attacks::{localization_attack, posterior_marginals, ObservedSets};
use falcon::config::ExperimentConfig;
use falcon::epidemic::{simulate, DiseaseParams};
use falcon::fedtrain::dp::{add_gaussian, calibrate_sigma, dpsgd_sanitize};
use falcon::fedtrain::{
    client_embedding_update, init_embedding, server_aggregate, train_federated, FederatedInputs,
    PrivacyConfig, TranscriptConfig, TranscriptLevel, Variant,
};
use falcon::hypergraph::StHypergraph;
use falcon::macro_model::{CellVars, DcgruParams};
use falcon::metrics::{auc, bep, dep, max_f1_acc, r_m, ScoredLabels};
use falcon::pipeline::{
    ablation, build_world, decoy_stage, macro_stage, mean_auc, privacy_utility_sweep, run_variant,
    AblationRow,
};
use falcon::pseudoloc::{GeneratorKind, MobilityModel};
use falcon::tensor::{DiffusionSupports, SparseMatrix, Tape, Tensor, Var};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed <= limit,
        format!(
            "took {:.1}s, limit {}s",
            elapsed.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
}

fn small_world(n_users: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.mobility.n_users = n_users;
    cfg.mobility.n_regions = 30;
    cfg.mobility.n_intervals = 48;
    cfg.disease.n_seed_infections = 10;
    cfg.macro_model.epochs = 5;
    cfg
}

// ---------------------------------------------------------------------------

fn protocol_oracle() -> Check {
    let start = Instant::now();
    let mut cfg = small_world(200, 21);
    cfg.privacy.enabled = false;
    cfg.model.epochs = 30;
    let world = build_world(&cfg).map_err(|e| e.to_string())?;
    let macro_art = macro_stage(&cfg, &world).map_err(|e| e.to_string())?;
    let fed = run_variant(&cfg, &world, Variant::Falcon, Some(&macro_art), None)
        .map_err(|e| e.to_string())?;
    let cen = run_variant(&cfg, &world, Variant::HgnnCentral, Some(&macro_art), None)
        .map_err(|e| e.to_string())?;
    let diff = fed
        .scores
        .iter()
        .zip(&cen.scores)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(fed.scores.len() == 200, "wrong user count")?;
    ensure(diff < 1e-6, format!("max prediction gap {diff:e}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "max prediction gap {diff:.1e} over 200 users, {} epochs",
        cfg.model.epochs
    ))
}

// ---------------------------------------------------------------------------

/// Central differences on every coordinate of every input.
fn max_rel_error(
    inputs: &[Tensor],
    build: &dyn for<'t> Fn(&'t Tape, &[Tensor]) -> (Var<'t>, Vec<Var<'t>>),
) -> f64 {
    let tape = Tape::new();
    let (loss, vars) = build(&tape, inputs);
    let grads = tape.backward(loss).expect("backward");
    let value = |ts: &[Tensor]| {
        let t = Tape::new();
        build(&t, ts).0.value().item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let an = grads.wrt(*var);
        for i in 0..inputs[k].len() {
            let nudge = |d: f64| {
                let mut ts = inputs.to_vec();
                let mut data = ts[k].data().to_vec();
                data[i] += d;
                ts[k] = Tensor::new(ts[k].shape().to_vec(), data).unwrap();
                value(&ts)
            };
            let fd = (nudge(h) - nudge(-h)) / (2.0 * h);
            let a = an.data()[i];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    worst
}

fn random_supports(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Rc<DiffusionSupports> {
    let mut side = || {
        let mut trip = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.5) {
                    trip.push((i, j, rng.gen_range(0.0..1.0)));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, &trip)
    };
    let (f, b) = (side(), side());
    Rc::new(DiffusionSupports::new(f, b, k))
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let instances = 20;
    for inst in 0..instances {
        let mut r = rng(100 + inst);

        // hypergraph convolution over a random population, then a masked cross-entropy head
        let (pop, _) =
            falcon::mobility::generate_population(inst, 12, 5, 6, &Default::default()).unwrap();
        let g = StHypergraph::build(&pop).unwrap();
        let em = Rc::new(g.edge_mean());
        let nm = Rc::new(g.node_mean());
        let (fin, fout) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = random_matrix(&mut r, g.n_nodes(), fin, 1.0);
        let theta = random_matrix(&mut r, fin, fout, 1.0);
        let target = random_matrix(&mut r, g.n_nodes(), fout, 1.0);
        worst[0] = worst[0].max(max_rel_error(&[x, theta], &|t, p| {
            let x = t.leaf(p[0].clone());
            let th = t.leaf(p[1].clone());
            let out = x
                .spmm(&em)
                .unwrap()
                .spmm(&nm)
                .unwrap()
                .matmul(th)
                .unwrap()
                .sigmoid();
            (out.mse(&target).unwrap(), vec![x, th])
        }));

        // one recurrent diffusion-convolution step plus readout
        let (n, hidden, k) = (r.gen_range(2..5), r.gen_range(1..3), r.gen_range(1..3));
        let sup = random_supports(&mut r, n, k);
        let p = DcgruParams::init(hidden, k, inst);
        let scale = |t: &Tensor, r: &mut ChaCha8Rng| random_matrix(r, t.rows(), t.cols(), 0.5);
        let params = vec![
            scale(&p.theta_gates, &mut r),
            scale(&p.b_gates, &mut r),
            scale(&p.theta_cand, &mut r),
            scale(&p.b_cand, &mut r),
            scale(&p.w_out, &mut r),
            scale(&p.b_out, &mut r),
            random_matrix(&mut r, n, 1, 1.0),
            random_matrix(&mut r, n, hidden, 1.0),
        ];
        let target = random_matrix(&mut r, n, 1, 1.0);
        worst[1] = worst[1].max(max_rel_error(&params, &|t, ps| {
            let p = DcgruParams {
                hidden,
                k,
                theta_gates: ps[0].clone(),
                b_gates: ps[1].clone(),
                theta_cand: ps[2].clone(),
                b_cand: ps[3].clone(),
                w_out: ps[4].clone(),
                b_out: ps[5].clone(),
            };
            let cv = CellVars::leaves(t, &p);
            let x = t.leaf(ps[6].clone());
            let h = t.leaf(ps[7].clone());
            let h2 = cv.cell(x, h, &sup).unwrap();
            let h3 = cv.cell(x, h2, &sup).unwrap();
            let loss = cv.readout(h3).unwrap().mse(&target).unwrap();
            (
                loss,
                vec![
                    cv.theta_gates,
                    cv.b_gates,
                    cv.theta_cand,
                    cv.b_cand,
                    cv.w_out,
                    cv.b_out,
                    x,
                    h,
                ],
            )
        }));

        // classification head
        let rows = r.gen_range(2..7);
        let width = r.gen_range(1..5);
        let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..2)).collect();
        let mask: Vec<usize> = (0..rows)
            .filter(|_| r.gen_bool(0.7))
            .chain([0])
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        let head_in = vec![
            random_matrix(&mut r, rows, width, 1.0),
            random_matrix(&mut r, width, 2, 1.0),
            random_matrix(&mut r, 1, 2, 1.0),
        ];
        worst[2] = worst[2].max(max_rel_error(&head_in, &|t, p| {
            let h = t.leaf(p[0].clone());
            let w = t.leaf(p[1].clone());
            let b = t.leaf(p[2].clone());
            let loss = h
                .matmul(w)
                .unwrap()
                .add_row(b)
                .unwrap()
                .softmax_xent(&targets, &mask)
                .unwrap();
            (loss, vec![h, w, b])
        }));

        // losses on their own
        let logits = random_matrix(&mut r, rows, 2, 3.0);
        worst[3] = worst[3].max(max_rel_error(&[logits], &|t, p| {
            let z = t.leaf(p[0].clone());
            (z.softmax_xent(&targets, &mask).unwrap(), vec![z])
        }));
        let pred = random_matrix(&mut r, rows, width, 2.0);
        let target = random_matrix(&mut r, rows, width, 2.0);
        worst[4] = worst[4].max(max_rel_error(&[pred], &|t, p| {
            let z = t.leaf(p[0].clone());
            (z.mse(&target).unwrap(), vec![z])
        }));
    }
    let names = [
        "hypergraph conv",
        "recurrent cell",
        "head",
        "cross-entropy",
        "mse",
    ];
    for (name, w) in names.iter().zip(worst) {
        ensure(w < 1e-4, format!("{name}: relative error {w:e}"))?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    let w = worst.iter().copied().fold(0.0, f64::max);
    Ok(format!(
        "{instances} instances per composite, worst relative error {w:.1e}"
    ))
}

// ---------------------------------------------------------------------------

fn mean_preservation() -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let members = r.gen_range(1..25);
        let width = r.gen_range(1..17);
        let olds: Vec<Vec<f64>> = (0..members)
            .map(|_| (0..width).map(|_| r.gen_range(-5.0..5.0)).collect())
            .collect();
        let news: Vec<Vec<f64>> = (0..members)
            .map(|_| (0..width).map(|_| r.gen_range(-5.0..5.0)).collect())
            .collect();
        let prev: Vec<f64> = (0..width)
            .map(|j| olds.iter().map(|o| o[j]).sum::<f64>() / members as f64)
            .collect();
        let contribs: Vec<Vec<f64>> = olds
            .iter()
            .zip(&news)
            .map(|(o, n)| client_embedding_update(&prev, o, n, members))
            .collect();
        let agg = server_aggregate(&contribs, &prev, members).map_err(|e| e.to_string())?;
        for j in 0..width {
            let want = news.iter().map(|n| n[j]).sum::<f64>() / members as f64;
            worst = worst.max((agg[j] - want).abs());
        }
    }
    ensure(worst < 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!(
        "1000 edges, max deviation from member mean {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn dp_calibration() -> Check {
    let privacy = PrivacyConfig::default();
    let mut details = Vec::new();
    for sigma in [
        privacy.sigma_l,
        calibrate_sigma(privacy.epsilon, privacy.delta, privacy.clip_l, 2).unwrap(),
    ] {
        let mut v = vec![0.0; 100_000];
        add_gaussian(&mut v, sigma, &mut rng(4));
        let s = std_dev(&v);
        ensure(
            (s / sigma - 1.0).abs() < 0.02,
            format!("sigma {sigma}: empirical {s}"),
        )?;
        details.push(format!("{sigma:.4}->{s:.4}"));
    }

    // noise as it appears in decoy uploads of a real run
    let cfg = small_world(300, 5);
    let world = build_world(&cfg).map_err(|e| e.to_string())?;
    let decoys =
        decoy_stage(&cfg, &world, GeneratorKind::Epidemic, 2).map_err(|e| e.to_string())?;
    let mut model = cfg.model.clone();
    model.epochs = 1;
    let tc = TranscriptConfig {
        level: TranscriptLevel::Full,
        rounds: vec![0],
        layers: vec![0, 1],
    };
    let train_mask = world.train_mask();
    let inputs = FederatedInputs {
        population: &world.pop,
        pseudo: &decoys.decoys,
        labels: &world.labels,
        train_mask: &train_mask,
        macro_hidden: None,
    };
    let out = train_federated(&inputs, &model, &privacy, &tc, 9).map_err(|e| e.to_string())?;
    let graph =
        falcon::fedtrain::observed_graph(&world.pop, &decoys.decoys).map_err(|e| e.to_string())?;
    let mut samples = Vec::new();
    for rec in &out.transcript.uploads {
        let (reg, t) = graph.cell(rec.edge as usize);
        if world.pop.trajectories[rec.user as usize].visits[t] != Some(reg) {
            samples.extend(rec.payload.iter().flatten());
        }
    }
    ensure(
        samples.len() >= 100_000,
        format!("only {} decoy samples", samples.len()),
    )?;
    let s = std_dev(&samples);
    ensure(
        (s / privacy.sigma_l - 1.0).abs() < 0.02,
        format!("decoy uploads: {s} vs {}", privacy.sigma_l),
    )?;
    details.push(format!("decoy uploads {s:.5} over {}", samples.len()));

    let mut r = rng(6);
    for _ in 0..10_000 {
        let len = r.gen_range(1..50);
        let mag = 10f64.powf(r.gen_range(-6.0..6.0));
        let g: Vec<f64> = (0..len).map(|_| r.gen_range(-mag..mag)).collect();
        let c = r.gen_range(1e-3..10.0);
        let clipped = dpsgd_sanitize(&g, Some(c), 0.0, &mut r);
        let norm = clipped.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure(
            norm <= c * (1.0 + 1e-12),
            format!("clipped norm {norm} above {c}"),
        )?;
    }
    Ok(format!(
        "std {}; 10000 clipped gradients within bound",
        details.join(", ")
    ))
}

// ---------------------------------------------------------------------------

fn paper_constants() -> Check {
    let (eps, delta, c, l) = (1.0f64, 0.001f64, 0.1f64, 2usize);
    let want = l as f64 * c * (2.0 * (1.25 / delta).ln()).sqrt() / eps;
    let got = calibrate_sigma(eps, delta, c, l).map_err(|e| e.to_string())?;
    ensure(got == want, format!("sigma_l {got} vs {want}"))?;
    let round4 = |x: f64| (x * 1e4).round() / 1e4;
    ensure(
        round4(r_m(5.7)) == 0.8246,
        format!("r_m(5.7) = {}", r_m(5.7)),
    )?;
    ensure(
        round4(r_m(10.78)) == 0.9072,
        format!("r_m(10.78) = {}", r_m(10.78)),
    )?;
    let s = DiseaseParams::preset("sars-cov-2").unwrap();
    let o = DiseaseParams::preset("omicron").unwrap();
    ensure(
        (s.beta, s.alpha, s.mu) == (0.405, 0.2564, 0.071),
        "sars-cov-2 preset",
    )?;
    ensure(
        (o.beta, o.alpha, o.mu) == (0.766, 0.6579, 0.071),
        "omicron preset",
    )?;
    for name in ["sars-cov-2", "omicron"] {
        let mut cfg = ExperimentConfig::default();
        cfg.disease.preset = name.into();
        ensure(
            cfg.disease.params().unwrap() == DiseaseParams::preset(name).unwrap(),
            format!("{name} via config"),
        )?;
    }
    Ok(format!(
        "sigma_l {got:.6}, r_m 0.8246 / 0.9072, presets exact"
    ))
}

// ---------------------------------------------------------------------------

fn gradient_attack() -> Check {
    let start = Instant::now();
    let mut top = Vec::new();
    for seed in 1..=5 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.attack.n_p_grid = vec![2, 9];
        cfg.attack.max_users = 50;
        let world = build_world(&cfg).map_err(|e| e.to_string())?;
        let rows = privacy_utility_sweep(&cfg, &world, false).map_err(|e| e.to_string())?;
        for n_p in [2, 9] {
            let errs: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.kind == "gradient" && r.n_p == n_p)
                .map(|r| (r.sigma_l, r.attack_error))
                .collect();
            ensure(
                errs.len() == cfg.attack.sigma_grid.len(),
                "missing sweep rows",
            )?;
            ensure(
                errs[0] == (0.0, 0.0),
                format!("seed {seed} n_p {n_p}: error {} without noise", errs[0].1),
            )?;
            ensure(
                errs.windows(2).all(|w| w[1].1 >= w[0].1),
                format!("seed {seed} n_p {n_p}: not monotone {errs:?}"),
            )?;
            if n_p == 9 {
                top.push(errs.last().unwrap().1);
            }
        }
    }
    let mean = top.iter().sum::<f64>() / top.len() as f64;
    let per_seed = top
        .iter()
        .map(|e| format!("{e:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        (0.85..=0.92).contains(&mean),
        format!("n_p 9, sigma 0.2: mean error {mean:.4} ({per_seed})"),
    )?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "zero without noise, monotone per seed; n_p 9 at sigma 0.2: mean {mean:.4} ({per_seed})"
    ))
}

// ---------------------------------------------------------------------------

fn enumerate_marginals(obs: &ObservedSets, model: &MobilityModel) -> Vec<Vec<f64>> {
    let (m, n) = (model.n_regions(), obs.len());
    let mut marg = vec![vec![0.0; m]; n];
    let mut total = 0.0;
    for code in 0..m.pow(n as u32) {
        let path: Vec<usize> = (0..n).map(|t| code / m.pow(t as u32) % m).collect();
        if path
            .iter()
            .zip(obs)
            .any(|(r, o)| o.as_ref().is_some_and(|s| !s.contains(r)))
        {
            continue;
        }
        let p = (1..n).fold(model.visit_dist[0][path[0]], |p, t| {
            p * model.transition[path[t - 1]][path[t]]
        });
        total += p;
        for t in 0..n {
            marg[t][path[t]] += p;
        }
    }
    marg.iter_mut().flatten().for_each(|x| *x /= total);
    marg
}

fn localization() -> Check {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (m, n) = (r.gen_range(2..=4), r.gen_range(1..=5));
        let row = |r: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..m).map(|_| r.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let model = MobilityModel {
            visit_dist: (0..n).map(|_| row(&mut r)).collect(),
            transition: (0..m).map(|_| row(&mut r)).collect(),
        };
        let obs: ObservedSets = (0..n)
            .map(|_| {
                r.gen_bool(0.8).then(|| {
                    let mut s: Vec<usize> = (0..m).filter(|_| r.gen_bool(0.5)).collect();
                    if s.is_empty() {
                        s.push(r.gen_range(0..m));
                    }
                    s
                })
            })
            .collect();
        let want = enumerate_marginals(&obs, &model);
        let got = posterior_marginals(&obs, &model).map_err(|e| e.to_string())?;
        for t in 0..n {
            let mut dense = vec![0.0; m];
            for &(reg, p) in &got[t] {
                dense[reg] = p;
            }
            for reg in 0..m {
                worst = worst.max((dense[reg] - want[t][reg]).abs());
            }
        }
    }
    ensure(worst <= 1e-10, format!("posterior gap {worst:e}"))?;

    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=5 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let world = build_world(&cfg).map_err(|e| e.to_string())?;
        let max_users = cfg.attack.max_users;
        let none =
            decoy_stage(&cfg, &world, GeneratorKind::Epidemic, 0).map_err(|e| e.to_string())?;
        let (w0, _) = localization_attack(&world.pop, &[], &none.aggregate, false, max_users)
            .map_err(|e| e.to_string())?;
        ensure(w0 == 0, format!("seed {seed}: {w0} errors without decoys"))?;
        let err = |kind| -> Result<f64, String> {
            let d = decoy_stage(&cfg, &world, kind, 2).map_err(|e| e.to_string())?;
            let (w, n) = localization_attack(&world.pop, &d.decoys, &d.aggregate, false, max_users)
                .map_err(|e| e.to_string())?;
            Ok(w as f64 / n as f64)
        };
        let (epi, uni) = (
            err(GeneratorKind::Epidemic)?,
            err(GeneratorKind::UniformIid)?,
        );
        wins += usize::from(epi >= uni);
        pairs.push(format!("{epi:.3}/{uni:.3}"));
    }
    ensure(
        wins >= 4,
        format!(
            "epidemic >= uniform in {wins}/5 seeds ({})",
            pairs.join(", ")
        ),
    )?;
    Ok(format!(
        "posterior gap {worst:.1e}; no decoys -> 0; epidemic/uniform error {} ({wins}/5)",
        pairs.join(", ")
    ))
}

// ---------------------------------------------------------------------------

struct Ablation {
    rows: Vec<AblationRow>,
    elapsed: Duration,
}

fn run_ablation() -> Result<Ablation, String> {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let rows = ablation(&cfg, 5).map_err(|e| e.to_string())?;
    Ok(Ablation {
        rows,
        elapsed: start.elapsed(),
    })
}

fn ablation_direction(ab: &Result<Ablation, String>) -> Check {
    let ab = ab.as_ref().map_err(Clone::clone)?;
    let falcon = mean_auc(&ab.rows, Variant::Falcon);
    let wo_macro = mean_auc(&ab.rows, Variant::WoMacro);
    let wo_privacy = mean_auc(&ab.rows, Variant::WoPrivacy);
    let summary =
        format!("falcon {falcon:.4}, w/o macro {wo_macro:.4}, w/o privacy {wo_privacy:.4}");
    ensure(
        falcon > wo_macro,
        format!("macro coupling does not help: {summary}"),
    )?;
    ensure(
        wo_privacy >= falcon - 0.02,
        format!("privacy costs more than 0.02: {summary}"),
    )?;
    within(ab.elapsed, Duration::from_secs(1800))?;
    Ok(format!(
        "{summary} ({:.0}s for all variants)",
        ab.elapsed.as_secs_f64()
    ))
}

fn baselines(ab: &Result<Ablation, String>) -> Check {
    let ab = ab.as_ref().map_err(Clone::clone)?;
    let falcon = mean_auc(&ab.rows, Variant::Falcon);
    let dct = mean_auc(&ab.rows, Variant::Dct);
    let central = mean_auc(&ab.rows, Variant::HgnnCentralNoisy);
    let summary = format!(
        "falcon {falcon:.4}, contact tracing {dct:.4}, noisy centralized hgnn {central:.4}"
    );
    ensure(falcon > dct && falcon > central, summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

fn brute_force(scores: &[f64], labels: &[bool], r0: f64) -> (f64, f64, f64, f64, f64) {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut wins = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    let auc = wins / (n_pos * n_neg) as f64;

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut best_f1 = 0.0f64;
    let mut best_acc = n_neg as f64 / labels.len() as f64;
    let mut curve = Vec::new();
    for &thr in &thresholds {
        let tp = (0..labels.len())
            .filter(|&i| scores[i] >= thr && labels[i])
            .count();
        let fp = (0..labels.len())
            .filter(|&i| scores[i] >= thr && !labels[i])
            .count();
        let fn_ = n_pos - tp;
        let tn = n_neg - fp;
        if tp > 0 {
            best_f1 = best_f1.max((2 * tp) as f64 / (2 * tp + fp + fn_) as f64);
        }
        best_acc = best_acc.max((tp + tn) as f64 / labels.len() as f64);
        curve.push((tp as f64 / (tp + fp) as f64, tp as f64 / n_pos as f64));
    }
    let need = 1.0 - 1.0 / r0;
    let dep = curve
        .iter()
        .filter(|c| c.1 >= need)
        .map(|c| c.0)
        .fold(0.0, f64::max);

    // precision = recall, exactly or by interpolating a sign change; else the closest point
    let mut bep: Option<(f64, f64)> = None;
    for k in (0..curve.len()).rev() {
        let (pa, ra) = curve[k];
        let da = pa - ra;
        if bep.is_none_or(|(g, _)| da.abs() < g) {
            bep = Some((da.abs(), pa));
        }
        if k > 0 {
            let (pb, rb) = curve[k - 1];
            let db = pb - rb;
            if da * db < 0.0 && bep.is_none_or(|(g, _)| 0.0 < g) {
                let lambda = db / (db - da);
                bep = Some((0.0, pb + lambda * (pa - pb)));
            }
        }
    }
    (auc, best_f1, best_acc, bep.map_or(0.0, |b| b.1), dep)
}

fn metrics_oracle() -> Check {
    let mut r = rng(10);
    let mut checked = 0;
    for _ in 0..2000 {
        let n = r.gen_range(2..=20);
        let levels = r.gen_range(2..=n + 1);
        let scores: Vec<f64> = (0..n)
            .map(|_| r.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let r0 = r.gen_range(1.1..12.0);
        let sl = ScoredLabels::new(scores.clone(), labels.clone()).map_err(|e| e.to_string())?;
        let (f1, acc) = max_f1_acc(&sl);
        let got = (auc(&sl), f1, acc, bep(&sl), dep(&sl, r0).unwrap());
        let want = brute_force(&scores, &labels, r0);
        ensure(
            got == want,
            format!("{scores:?} {labels:?}: {got:?} vs {want:?}"),
        )?;
        checked += 1;
    }
    Ok(format!(
        "{checked} instances of up to 20 points match exactly"
    ))
}

// ---------------------------------------------------------------------------

fn epidemic_shape() -> Check {
    let days = 40;
    let mut summary = Vec::new();
    for seed in 1..=3 {
        let mut cfg = ExperimentConfig::preset("omicron").unwrap();
        cfg.seed = seed;
        cfg.mobility.n_intervals = days * 12;
        let world = build_world(&cfg).map_err(|e| e.to_string())?;
        let daily: Vec<f64> = world.log.daily_totals().iter().map(|&c| c as f64).collect();
        // weekly smoothing, then no dip or rise beyond 5% of the peak on the wrong side of it
        let smooth: Vec<f64> = (0..daily.len())
            .map(|d| {
                let w = &daily[d.saturating_sub(3)..(d + 4).min(daily.len())];
                w.iter().sum::<f64>() / w.len() as f64
            })
            .collect();
        let (peak_day, &peak) = smooth
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let tol = 0.05 * peak;
        let rising = smooth[..=peak_day].windows(2).all(|w| w[1] >= w[0] - tol);
        let falling = smooth[peak_day..].windows(2).all(|w| w[1] <= w[0] + tol);
        ensure(
            rising && falling,
            format!("seed {seed}: not unimodal {daily:?}"),
        )?;
        ensure(
            peak_day > 0 && peak_day + 1 < daily.len(),
            format!("seed {seed}: peak at the boundary"),
        )?;
        let raw_peak = daily.iter().copied().fold(0.0, f64::max);
        ensure(
            raw_peak > 3.0 * daily[0],
            format!("seed {seed}: peak {raw_peak} vs day 1 {}", daily[0]),
        )?;
        summary.push(format!("peak {raw_peak}/day1 {}", daily[0]));
    }

    let betas = [0.2, 0.405, 0.6];
    let mut monotone = 0;
    for seed in 1..=5 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let (pop, _) = falcon::pipeline::generate_mobility(&cfg).map_err(|e| e.to_string())?;
        let fracs: Vec<f64> = betas
            .iter()
            .map(|&beta| {
                let params = DiseaseParams {
                    beta,
                    ..DiseaseParams::sars_cov_2()
                };
                let log = simulate(&pop, &params, cfg.disease.n_seed_infections, seed).unwrap();
                log.final_labels().iter().filter(|&&l| l).count() as f64 / pop.n_users() as f64
            })
            .collect();
        monotone += usize::from(fracs.windows(2).all(|w| w[1] > w[0]));
    }
    ensure(
        monotone >= 3,
        format!("final fraction monotone in beta for {monotone}/5 seeds"),
    )?;
    Ok(format!(
        "omicron {}; monotone in beta {monotone}/5",
        summary.join(", ")
    ))
}

// ---------------------------------------------------------------------------

fn transcript_audit() -> Check {
    let cfg = small_world(150, 12);
    let world = build_world(&cfg).map_err(|e| e.to_string())?;
    let privacy = cfg.privacy.clone();
    let decoys =
        decoy_stage(&cfg, &world, privacy.generator, privacy.n_p).map_err(|e| e.to_string())?;
    let macro_art = macro_stage(&cfg, &world).map_err(|e| e.to_string())?;
    let mut model = cfg.model.clone();
    model.epochs = 4;
    let tc = TranscriptConfig {
        level: TranscriptLevel::Full,
        rounds: (0..model.epochs).collect(),
        layers: (0..model.layers).collect(),
    };
    let train_mask = world.train_mask();
    let inputs = FederatedInputs {
        population: &world.pop,
        pseudo: &decoys.decoys,
        labels: &world.labels,
        train_mask: &train_mask,
        macro_hidden: Some(&macro_art.hidden),
    };
    let seed = 77;
    let out = train_federated(&inputs, &model, &privacy, &tc, seed).map_err(|e| e.to_string())?;
    let transcript = &out.transcript;
    ensure(!transcript.uploads.is_empty(), "empty transcript")?;

    let n = world.pop.n_users();
    let mut raw: HashSet<u64> = HashSet::new();
    for u in 0..n {
        raw.extend(
            init_embedding(u, model.embed_dim, seed)
                .iter()
                .map(|v| v.to_bits()),
        );
        raw.extend(out.embeddings[u].iter().map(|v| v.to_bits()));
    }
    raw.remove(&0f64.to_bits());
    let leaked = transcript
        .received_values()
        .filter(|v| raw.contains(&v.to_bits()))
        .count();
    ensure(
        leaked == 0,
        format!("{leaked} embedding values in the transcript"),
    )?;

    let json = serde_json::to_string(transcript).unwrap();
    for banned in ["visits", "trajectory", "region", "embedding", "label"] {
        ensure(
            !json.contains(banned),
            format!("transcript mentions `{banned}`"),
        )?;
    }
    let sample: Vec<String> = (0..n.min(40))
        .map(|u| format!("{}", init_embedding(u, model.embed_dim, seed)[0]))
        .collect();
    if let Some(hit) = sample.iter().find(|s| json.contains(s.as_str())) {
        return Err(format!("embedding value {hit} appears verbatim"));
    }

    // the edges a user touches never spell out the real trace alone
    let graph =
        falcon::fedtrain::observed_graph(&world.pop, &decoys.decoys).map_err(|e| e.to_string())?;
    let mut exposed = 0;
    let mut with_visits = 0;
    for u in 0..n {
        let real: HashSet<u32> = world.pop.trajectories[u]
            .reported()
            .filter_map(|(t, reg)| graph.edge_id(reg, t).map(|e| e as u32))
            .collect();
        if real.is_empty() {
            continue;
        }
        with_visits += 1;
        let seen: HashSet<u32> = transcript
            .uploads
            .iter()
            .filter(|r| r.user as usize == u && r.round == 0 && r.layer == 0)
            .map(|r| r.edge)
            .collect();
        exposed += usize::from(seen == real);
    }
    ensure(
        exposed == 0,
        format!("{exposed}/{with_visits} users upload only their real cells"),
    )?;
    Ok(format!(
        "{} values searched, no embedding value or trace field; every trace hidden among decoys",
        transcript.received_values().count()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |name: &str| only.is_empty() || only.iter().any(|o| name.contains(o.as_str()));
    let ablation_result = OnceCell::new();
    let ablation = || ablation_result.get_or_init(run_ablation);

    let mut failed = 0;
    let mut run = |name: &str, check: &mut dyn FnMut() -> Check| {
        if !wanted(name) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    };

    run("protocol-oracle-equivalence", &mut protocol_oracle);
    run("gradient-finite-differences", &mut gradient_checks);
    run("mean-preservation", &mut mean_preservation);
    run("dp-calibration", &mut dp_calibration);
    run("reference-constants", &mut paper_constants);
    run("gradient-inference-attack", &mut gradient_attack);
    run("localization-attack", &mut localization);
    run("ablation-direction", &mut || ablation_direction(ablation()));
    run("baseline-comparison", &mut || baselines(ablation()));
    run("metrics-oracle", &mut metrics_oracle);
    run("epidemic-shape", &mut epidemic_shape);
    run("transcript-audit", &mut transcript_audit);

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
