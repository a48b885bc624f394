//! Single-process trainer over the whole hypergraph, the reference the
//! protocol is checked against.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dp::add_gaussian;
use super::model::{dropout_mask, init_embedding, ModelParams};
use super::transcript::Transcript;
use super::{ClientStatus, TrainConfig, TrainOutcome};
use crate::error::{contract, Error, Result};
use crate::hypergraph::StHypergraph;
use crate::optim::Adam;
use crate::rng::{domain, stream};
use crate::tensor::{SparseMatrix, Tape, Tensor, Var};

/// Which paths through the edge aggregation carry gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Only a node's own share of each aggregate is differentiated.
    #[default]
    Detached,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CentralConfig {
    pub mode: GradientMode,
    /// Per-member noise std. Every epoch an edge with `N` members receives
    /// fresh Gaussian noise of std `edge_noise * sqrt(N)`, as if each member
    /// had perturbed its own upload.
    pub edge_noise: f64,
}

pub struct CentralInputs<'a> {
    pub graph: &'a StHypergraph,
    pub labels: &'a [bool],
    pub train_mask: &'a [bool],
    /// `n_edges x F_m` features appended to every edge embedding.
    pub macro_feats: Option<&'a Tensor>,
}

struct Operators {
    edge_mean: Rc<SparseMatrix>,
    interval_mean: Rc<SparseMatrix>,
    own: Rc<Vec<f64>>,
    /// `sqrt(N)` per edge.
    noise_scale: Vec<f64>,
    macro_nodes: Option<Tensor>,
}

impl Operators {
    fn new(inputs: &CentralInputs<'_>) -> Result<Self> {
        let g = inputs.graph;
        let im = g.interval_mean();
        let own = (0..g.n_nodes())
            .map(|u| {
                im.row_entries(u)
                    .map(|(e, w)| w / g.edge_degree(e) as f64)
                    .sum()
            })
            .collect();
        let macro_nodes = inputs.macro_feats.map(|m| im.mul_dense(m)).transpose()?;
        Ok(Self {
            edge_mean: Rc::new(g.edge_mean()),
            interval_mean: Rc::new(im),
            own: Rc::new(own),
            noise_scale: g
                .edge_degrees()
                .iter()
                .map(|&d| (d as f64).sqrt())
                .collect(),
            macro_nodes,
        })
    }
}

struct Forward<'t> {
    emb: Var<'t>,
    thetas: Vec<Var<'t>>,
    head_w: Var<'t>,
    head_b: Var<'t>,
    logits: Var<'t>,
}

fn add_edge_noise(edges: &mut Tensor, scale: &[f64], sigma: f64, rng: &mut ChaCha8Rng) {
    let w = edges.cols();
    for (row, s) in edges.data_mut().chunks_mut(w).zip(scale) {
        add_gaussian(row, sigma * s, rng);
    }
}

fn forward<'t>(
    tape: &'t Tape,
    ops: &Operators,
    emb: &Tensor,
    params: &ModelParams,
    cfg: &CentralConfig,
    noise: &mut Option<ChaCha8Rng>,
    dropout: Option<&Tensor>,
) -> Result<Forward<'t>> {
    let x = tape.leaf(emb.clone());
    let thetas: Vec<Var<'t>> = params.thetas.iter().map(|t| tape.leaf(t.clone())).collect();
    let head_w = tape.leaf(params.head_w.clone());
    let head_b = tape.leaf(params.head_b.clone());
    let mut h = x;
    for theta in &thetas {
        let agg = match cfg.mode {
            GradientMode::Detached => {
                let v = h.value();
                let mut edges = ops.edge_mean.mul_dense(&v)?;
                if let Some(rng) = noise.as_mut() {
                    add_edge_noise(&mut edges, &ops.noise_scale, cfg.edge_noise, rng);
                }
                let all = ops.interval_mean.mul_dense(&edges)?;
                let mine = h.scale_rows(&ops.own)?;
                let rest = all.sub(&mine.value())?;
                tape.constant(rest).add(mine)?
            }
            GradientMode::Full => {
                let mut edges = h.spmm(&ops.edge_mean)?;
                if let Some(rng) = noise.as_mut() {
                    let mut z = Tensor::zeros(edges.value().rows(), edges.value().cols());
                    add_edge_noise(&mut z, &ops.noise_scale, cfg.edge_noise, rng);
                    edges = edges.add(tape.constant(z))?;
                }
                edges.spmm(&ops.interval_mean)?
            }
        };
        let input = match &ops.macro_nodes {
            Some(m) => agg.concat_cols(tape.constant(m.clone()))?,
            None => agg,
        };
        h = input.matmul(*theta)?.sigmoid();
    }
    if let Some(mask) = dropout {
        h = h.mul(tape.constant(mask.clone()))?;
    }
    let logits = h.matmul(head_w)?.add_row(head_b)?;
    Ok(Forward {
        emb: x,
        thetas,
        head_w,
        head_b,
        logits,
    })
}

/// Trains all embeddings and weights in one process with the same
/// initialization, dropout masks and update order as the protocol.
pub fn train_central(
    inputs: &CentralInputs<'_>,
    cfg: &TrainConfig,
    central: &CentralConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let g = inputs.graph;
    let n = g.n_nodes();
    if inputs.labels.len() != n || inputs.train_mask.len() != n {
        return Err(contract("labels and train mask must cover every user"));
    }
    if let Some(m) = inputs.macro_feats {
        if m.rows() != g.n_edges() {
            return Err(contract("macro features need one row per edge"));
        }
    }
    let dims = cfg.dims(inputs.macro_feats.map_or(0, Tensor::cols));
    let ops = Operators::new(inputs)?;
    let mut params = ModelParams::init(&dims, seed);
    let mut emb = Tensor::from_rows(
        &(0..n)
            .map(|u| init_embedding(u, dims.embed, seed))
            .collect::<Vec<_>>(),
    );
    let adam_cfg = cfg.adam();
    let mut server_adam = Adam::new(adam_cfg, params.n_params());
    let mut client_adam: Vec<Adam> = (0..n).map(|_| Adam::new(adam_cfg, dims.embed)).collect();
    let trains: Vec<bool> = (0..n)
        .map(|u| inputs.train_mask[u] && g.node_degree(u) > 0)
        .collect();
    let mask: Vec<usize> = (0..n).filter(|&u| trains[u]).collect();
    if mask.is_empty() {
        return Err(Error::Data("no labeled user has an observed cell".into()));
    }
    let targets: Vec<usize> = inputs.labels.iter().map(|&y| usize::from(y)).collect();
    let noise_rng = |round: usize| {
        (central.edge_noise > 0.0)
            .then(|| stream(seed, &[domain::EDGE_NOISE, u64::MAX, round as u64]))
    };

    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let drop = Tensor::from_rows(
            &(0..n)
                .map(|u| dropout_mask(seed, epoch, u, dims.hidden, cfg.dropout))
                .collect::<Vec<_>>(),
        );
        let tape = Tape::new();
        let mut rng = noise_rng(epoch);
        let f = forward(&tape, &ops, &emb, &params, central, &mut rng, Some(&drop))?;
        let mean = f.logits.softmax_xent(&targets, &mask)?;
        let loss = mean.value().item();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss is {loss} at epoch {epoch}"
            )));
        }
        losses.push(loss);
        let total = mean.scale(mask.len() as f64);
        let grads = tape.backward(total)?;

        let g_emb = grads.wrt(f.emb);
        let data = emb.data_mut();
        for u in 0..n {
            let row = &mut data[u * dims.embed..(u + 1) * dims.embed];
            if trains[u] {
                client_adam[u].step(row, g_emb.row_slice(u));
            } else {
                client_adam[u].decay(row);
            }
        }
        let k = 1.0 / mask.len() as f64;
        let mut g_flat = Vec::with_capacity(params.n_params());
        for v in f.thetas.iter().chain([&f.head_w, &f.head_b]) {
            g_flat.extend(grads.wrt(*v).data().iter().map(|x| x * k));
        }
        let mut flat = params.to_flat();
        server_adam.step(&mut flat, &g_flat);
        params.set_flat(&flat);
        if !params.is_finite() {
            return Err(Error::Divergence(format!(
                "weights non-finite at epoch {epoch}"
            )));
        }
    }

    let tape = Tape::new();
    let mut rng = noise_rng(cfg.epochs);
    let f = forward(&tape, &ops, &emb, &params, central, &mut rng, None)?;
    let probs = crate::tensor::softmax_rows(&f.logits.value());
    let scores = (0..n).map(|u| probs.get(u, 1)).collect();
    let status = (0..n)
        .map(|u| {
            if g.node_degree(u) > 0 {
                ClientStatus::Active
            } else {
                ClientStatus::NoCells
            }
        })
        .collect();
    let embeddings = (0..n).map(|u| emb.row_slice(u).to_vec()).collect();
    Ok(TrainOutcome {
        scores,
        status,
        losses,
        params,
        embeddings,
        transcript: Transcript::default(),
    })
}
