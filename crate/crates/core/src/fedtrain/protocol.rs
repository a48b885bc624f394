//! Client/server message flow. Each client holds its own embedding and real
//! trace; the server holds the shared weights and one running embedding per
//! observed hyperedge.

use rayon::prelude::*;

use super::dp::{add_gaussian, clip_coords, dpsgd_sanitize};
use super::model::{
    dense_sigmoid, dropout_mask, head_positive, init_embedding, ModelDims, ModelParams,
};
use super::transcript::{Transcript, TranscriptConfig};
use super::{ClientStatus, PrivacyConfig, TrainConfig, TrainOutcome};
use crate::error::{contract, Error, Result};
use crate::hypergraph::StHypergraph;
use crate::macro_model::MacroHidden;
use crate::mobility::Population;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{domain, stream};
use crate::tensor::{Tape, Tensor, Var};

/// Full-form local location embedding `(N e_prev - old + new) / N`.
pub fn client_embedding_update(e_prev: &[f64], old: &[f64], new: &[f64], n_rt: usize) -> Vec<f64> {
    let n = n_rt as f64;
    e_prev
        .iter()
        .zip(old.iter().zip(new))
        .map(|(p, (o, w))| (n * p - o + w) / n)
        .collect()
}

/// Server-side combination of full-form contributions: `sum - (N - 1) e_prev`.
pub fn server_aggregate(
    contributions: &[Vec<f64>],
    e_prev: &[f64],
    n_rt: usize,
) -> Result<Vec<f64>> {
    if contributions.len() != n_rt || n_rt == 0 {
        return Err(contract(format!(
            "{} contributions for an edge with {n_rt} members",
            contributions.len()
        )));
    }
    let mut out: Vec<f64> = e_prev.iter().map(|p| -(n_rt as f64 - 1.0) * p).collect();
    for c in contributions {
        if c.len() != e_prev.len() {
            return Err(contract(
                "contribution width differs from the edge embedding",
            ));
        }
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    Ok(out)
}

/// Update form of a contribution before noise: the real-cell change
/// `(new - old) / N`, optionally clipped per coordinate, or zero for a decoy.
/// Returns whether clipping bound.
pub fn update_delta(
    old: &[f64],
    new: Option<&[f64]>,
    n_rt: usize,
    clip: Option<f64>,
    out: &mut [f64],
) -> bool {
    match new {
        Some(new) => {
            let n = n_rt as f64;
            for ((o, a), b) in out.iter_mut().zip(old).zip(new) {
                *o = (b - a) / n;
            }
            clip.is_some_and(|c| clip_coords(out, c))
        }
        None => {
            out.iter_mut().for_each(|o| *o = 0.0);
            false
        }
    }
}

/// What travels on the wire: [`update_delta`] plus `sigma * z`.
pub fn sanitized_update(
    old: &[f64],
    new: Option<&[f64]>,
    n_rt: usize,
    clip: Option<f64>,
    sigma: f64,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let mut out = vec![0.0; old.len().max(new.map_or(0, <[f64]>::len))];
    update_delta(old, new, n_rt, clip, &mut out);
    add_gaussian(&mut out, sigma, rng);
    out
}

/// Hypergraph the server assembles from every uploaded cell, real or decoy.
pub fn observed_graph(
    real: &Population,
    pseudo: &[Vec<Vec<Option<usize>>>],
) -> Result<StHypergraph> {
    if !pseudo.is_empty() && pseudo.len() != real.n_users() {
        return Err(contract(format!(
            "decoys for {} users, population has {}",
            pseudo.len(),
            real.n_users()
        )));
    }
    let mut visits = Vec::new();
    for (u, tr) in real.trajectories.iter().enumerate() {
        visits.extend(tr.reported().map(|(t, r)| (u, t, r)));
        if let Some(decoys) = pseudo.get(u) {
            for d in decoys {
                if d.len() != real.n_intervals {
                    return Err(contract("decoy trace length differs from the real trace"));
                }
                visits.extend(
                    d.iter()
                        .enumerate()
                        .filter_map(|(t, r)| r.map(|r| (u, t, r))),
                );
            }
        }
    }
    Ok(StHypergraph::from_visits(
        real.n_users(),
        real.n_regions,
        real.n_intervals,
        visits,
    ))
}

pub struct FederatedInputs<'a> {
    pub population: &'a Population,
    /// Decoy traces per user; empty when no decoys are used.
    pub pseudo: &'a [Vec<Vec<Option<usize>>>],
    pub labels: &'a [bool],
    pub train_mask: &'a [bool],
    pub macro_hidden: Option<&'a MacroHidden>,
}

/// The server's Adam epsilon is at least this multiple of the per-coordinate
/// noise std in the averaged DPSGD gradient, so coordinates whose signal is
/// below the noise level drift like plain SGD instead of taking unit steps.
const NOISE_EPS_FACTOR: f64 = 10.0;

struct Cell {
    edge: usize,
    /// Share in the client's own aggregate; zero for decoys.
    weight: f64,
    /// Real occupancy of the cell.
    n_occ: usize,
    /// Index into the client's real-cell state, `None` for decoys.
    real_slot: Option<usize>,
}

struct Client {
    cells: Vec<Cell>,
    /// `sum_real weight / N`: the share of the client's own value in its aggregate.
    own_weight: f64,
    n_real: usize,
    embedding: Vec<f64>,
    adam: Adam,
    /// Per layer, the value the server has accounted for in each real cell.
    accounted: Vec<Vec<f64>>,
    /// Per layer and cell, the noise added in the previous round; it is
    /// withdrawn with the next upload so edge noise does not accumulate.
    noise: Vec<Vec<f64>>,
}

struct Server {
    params: ModelParams,
    adam: Adam,
    /// Per layer, `n_edges x width` running edge embeddings.
    edges: Vec<Vec<f64>>,
    macro_feats: Vec<f64>,
}

struct Federation<'a> {
    cfg: &'a TrainConfig,
    privacy: &'a PrivacyConfig,
    transcript_cfg: &'a TranscriptConfig,
    dims: ModelDims,
    sigma_l: f64,
    seed: u64,
    labels: &'a [bool],
    train_mask: &'a [bool],
    clients: Vec<Client>,
    server: Server,
    transcript: Transcript,
}

impl<'a> Federation<'a> {
    fn new(
        inputs: &FederatedInputs<'a>,
        cfg: &'a TrainConfig,
        privacy: &'a PrivacyConfig,
        transcript_cfg: &'a TranscriptConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        privacy.validate()?;
        let pop = inputs.population;
        let n = pop.n_users();
        if inputs.labels.len() != n || inputs.train_mask.len() != n {
            return Err(contract("labels and train mask must cover every user"));
        }
        let macro_width = inputs.macro_hidden.map_or(0, MacroHidden::width);
        if let Some(h) = inputs.macro_hidden {
            if h.n_regions() != pop.n_regions || h.n_intervals() != pop.n_intervals {
                return Err(contract(
                    "macro hidden states do not match the population grid",
                ));
            }
        }
        let dims = cfg.dims(macro_width);
        let graph = observed_graph(pop, inputs.pseudo)?;
        let sigma_l = privacy.effective_sigma_l(dims.layers)?;
        // Real occupancy per cell is public aggregate data; decoys do not count.
        let mut occupancy = vec![0usize; graph.n_edges()];
        for tr in &pop.trajectories {
            for (t, r) in tr.visits.iter().enumerate() {
                if let Some(e) = r.and_then(|r| graph.edge_id(r, t)) {
                    occupancy[e] += 1;
                }
            }
        }
        let adam_cfg = cfg.adam();

        let clients = (0..n)
            .map(|u| {
                let visits = &pop.trajectories[u].visits;
                let n_reported = visits.iter().flatten().count();
                let real_w = if n_reported > 0 {
                    1.0 / n_reported as f64
                } else {
                    0.0
                };
                let mut n_real = 0;
                let mut own_weight = 0.0;
                let cells: Vec<Cell> = graph
                    .incident(u)
                    .iter()
                    .map(|&edge| {
                        let (r, t) = graph.cell(edge);
                        let n_occ = occupancy[edge].max(1);
                        let real_slot = (visits[t] == Some(r)).then(|| {
                            n_real += 1;
                            own_weight += real_w / n_occ as f64;
                            n_real - 1
                        });
                        Cell {
                            edge,
                            weight: if real_slot.is_some() { real_w } else { 0.0 },
                            n_occ,
                            real_slot,
                        }
                    })
                    .collect();
                let accounted = (0..dims.layers)
                    .map(|l| vec![0.0; n_real * dims.node_width(l)])
                    .collect();
                let noise = (0..dims.layers)
                    .map(|l| {
                        if sigma_l > 0.0 {
                            vec![0.0; cells.len() * dims.node_width(l)]
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                Client {
                    cells,
                    own_weight,
                    n_real,
                    embedding: init_embedding(u, dims.embed, seed),
                    adam: Adam::new(adam_cfg, dims.embed),
                    accounted,
                    noise,
                }
            })
            .collect();

        let mut macro_feats = Vec::with_capacity(graph.n_edges() * macro_width);
        if let Some(h) = inputs.macro_hidden {
            for e in 0..graph.n_edges() {
                let (r, t) = graph.cell(e);
                macro_feats.extend_from_slice(h.get(r, t));
            }
        }
        let params = ModelParams::init(&dims, seed);
        let n_trainers = (0..n)
            .filter(|&u| {
                inputs.train_mask[u] && pop.trajectories[u].visits.iter().any(Option::is_some)
            })
            .count();
        let server_adam = if privacy.dpsgd && privacy.sigma_f > 0.0 && n_trainers > 0 {
            let noise_floor = privacy.sigma_f / (n_trainers as f64).sqrt();
            AdamConfig {
                eps: adam_cfg.eps.max(NOISE_EPS_FACTOR * noise_floor),
                ..adam_cfg
            }
        } else {
            adam_cfg
        };
        let server = Server {
            adam: Adam::new(server_adam, params.n_params()),
            params,
            edges: (0..dims.layers)
                .map(|l| vec![0.0; graph.n_edges() * dims.node_width(l)])
                .collect(),
            macro_feats,
        };
        Ok(Self {
            cfg,
            privacy,
            transcript_cfg,
            dims,
            sigma_l,
            seed,
            labels: inputs.labels,
            train_mask: inputs.train_mask,
            clients,
            server,
            transcript: Transcript::default(),
        })
    }

    /// One upload/aggregate/download exchange for `layer`. `values[u]` is the
    /// client's current node value; returns each client's aggregated input.
    fn exchange(&mut self, round: usize, layer: usize, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = self.dims.node_width(layer);
        let clip = self.privacy.update_clip();
        let record = self.transcript_cfg.records(round, layer);
        let level = self.transcript_cfg.level;
        let mut msg = vec![0.0; w];
        let mut fresh = vec![0.0; w];
        for (u, c) in self.clients.iter_mut().enumerate() {
            let mut rng = stream(
                self.seed,
                &[domain::EDGE_NOISE, u as u64, round as u64, layer as u64],
            );
            let value = &values[u];
            for (k, cell) in c.cells.iter().enumerate() {
                let new = cell.real_slot.map(|_| value.as_slice());
                let acc = match cell.real_slot {
                    Some(s) => &mut c.accounted[layer][s * w..(s + 1) * w],
                    None => &mut [][..],
                };
                let clipped = update_delta(acc, new, cell.n_occ, clip, &mut msg);
                if !acc.is_empty() {
                    if clipped {
                        let n = cell.n_occ as f64;
                        for (a, m) in acc.iter_mut().zip(&msg) {
                            *a += m * n;
                        }
                    } else {
                        acc.copy_from_slice(value);
                    }
                }
                if self.sigma_l > 0.0 {
                    fresh.iter_mut().for_each(|z| *z = 0.0);
                    add_gaussian(&mut fresh, self.sigma_l, &mut rng);
                    let prev = &mut c.noise[layer][k * w..(k + 1) * w];
                    for ((m, z), p) in msg.iter_mut().zip(&fresh).zip(prev.iter_mut()) {
                        *m += z - *p;
                        *p = *z;
                    }
                }
                let edge = &mut self.server.edges[layer][cell.edge * w..(cell.edge + 1) * w];
                for (e, m) in edge.iter_mut().zip(&msg) {
                    *e += m;
                }
                if record {
                    self.transcript
                        .upload(level, round, layer, u, cell.edge, &msg);
                }
            }
        }
        let fm = self.dims.macro_width;
        let edges = &self.server.edges[layer];
        self.clients
            .iter()
            .map(|c| {
                let mut s = vec![0.0; w + fm];
                for cell in c.cells.iter().filter(|c| c.real_slot.is_some()) {
                    let e = &edges[cell.edge * w..(cell.edge + 1) * w];
                    let m = &self.server.macro_feats[cell.edge * fm..(cell.edge + 1) * fm];
                    for (o, v) in s.iter_mut().zip(e.iter().chain(m)) {
                        *o += cell.weight * v;
                    }
                }
                s
            })
            .collect()
    }

    /// All propagation rounds of one epoch. Returns per layer the node values
    /// fed in and the aggregated inputs, plus the final hidden rows.
    fn propagate(
        &mut self,
        round: usize,
    ) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        let mut values: Vec<Vec<f64>> = self.clients.iter().map(|c| c.embedding.clone()).collect();
        let mut all_values = Vec::with_capacity(self.dims.layers);
        let mut all_inputs = Vec::with_capacity(self.dims.layers);
        for l in 0..self.dims.layers {
            let inputs = self.exchange(round, l, &values);
            let theta = &self.server.params.thetas[l];
            let next: Vec<Vec<f64>> = inputs.iter().map(|s| dense_sigmoid(s, theta)).collect();
            all_values.push(std::mem::replace(&mut values, next));
            all_inputs.push(inputs);
        }
        (all_values, all_inputs, values)
    }

    fn epoch(&mut self, epoch: usize) -> Result<f64> {
        let (values, inputs, _) = self.propagate(epoch);
        let n_params = self.server.params.n_params();
        let mut grad_sum = vec![0.0; n_params];
        let mut contributors = 0usize;
        let mut loss_sum = 0.0;
        let record = self.transcript_cfg.records_round(epoch);
        let trainers: Vec<usize> = (0..self.clients.len())
            .filter(|&u| self.train_mask[u] && !self.clients[u].cells.is_empty())
            .collect();
        // Clients work independently; results are folded in user order.
        let this = &*self;
        let results: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = trainers
            .par_iter()
            .map(|&u| {
                let (loss, g_emb, g_params) = this.client_gradients(u, epoch, &values, &inputs)?;
                let g = if this.privacy.dpsgd {
                    let mut rng = stream(this.seed, &[domain::GRAD_NOISE, epoch as u64, u as u64]);
                    dpsgd_sanitize(
                        &g_params,
                        Some(this.privacy.clip_f),
                        this.privacy.sigma_f,
                        &mut rng,
                    )
                } else {
                    g_params
                };
                Ok((loss, g_emb, g))
            })
            .collect();
        let mut results = trainers.iter().zip(results).peekable();
        for u in 0..self.clients.len() {
            let Some((_, res)) = results.next_if(|(&t, _)| t == u) else {
                let c = &mut self.clients[u];
                c.adam.decay(&mut c.embedding);
                continue;
            };
            let (loss, g_emb, g) = res?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "client {u} loss is {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            contributors += 1;
            let c = &mut self.clients[u];
            c.adam.step(&mut c.embedding, &g_emb);
            if record {
                self.transcript
                    .gradient(self.transcript_cfg.level, epoch, u, &g);
            }
            for (s, v) in grad_sum.iter_mut().zip(&g) {
                *s += v;
            }
        }
        if contributors == 0 {
            return Err(Error::Data("no labeled user has an observed cell".into()));
        }
        let k = 1.0 / contributors as f64;
        grad_sum.iter_mut().for_each(|g| *g *= k);
        let mut flat = self.server.params.to_flat();
        self.server.adam.step(&mut flat, &grad_sum);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "shared weights non-finite at epoch {epoch}"
            )));
        }
        self.server.params.set_flat(&flat);
        Ok(loss_sum / contributors as f64)
    }

    /// Local loss of client `u` with gradients for its embedding and the shared
    /// weights. Only the client's own share of each aggregate is traced.
    fn client_gradients(
        &self,
        u: usize,
        epoch: usize,
        values: &[Vec<Vec<f64>>],
        inputs: &[Vec<Vec<f64>>],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let c = &self.clients[u];
        let p = &self.server.params;
        let tape = Tape::new();
        let thetas: Vec<Var<'_>> = p.thetas.iter().map(|t| tape.leaf(t.clone())).collect();
        let hw = tape.leaf(p.head_w.clone());
        let hb = tape.leaf(p.head_b.clone());
        let emb = tape.leaf(Tensor::row(c.embedding.clone()));
        let a = c.own_weight;
        let fm = self.dims.macro_width;
        let mut own = emb;
        for l in 0..self.dims.layers {
            let mut rest = inputs[l][u].clone();
            for (r, v) in rest.iter_mut().zip(&values[l][u]) {
                *r -= a * v;
            }
            let mut traced = own.scale(a);
            if fm > 0 {
                traced = traced.concat_cols(tape.constant(Tensor::zeros(1, fm)))?;
            }
            let x = tape.constant(Tensor::row(rest)).add(traced)?;
            own = x.matmul(thetas[l])?.sigmoid();
        }
        let mask = dropout_mask(self.seed, epoch, u, self.dims.hidden, self.cfg.dropout);
        let h = own.mul(tape.constant(Tensor::row(mask)))?;
        let logits = h.matmul(hw)?.add_row(hb)?;
        let loss = logits.softmax_xent(&[usize::from(self.labels[u])], &[0])?;
        let grads = tape.backward(loss)?;
        let mut g_params = Vec::with_capacity(p.n_params());
        for v in thetas.iter().chain([&hw, &hb]) {
            g_params.extend_from_slice(grads.wrt(*v).data());
        }
        Ok((loss.value().item(), grads.wrt(emb).into_data(), g_params))
    }

    fn predict(&mut self, round: usize) -> Vec<f64> {
        let (_, _, hidden) = self.propagate(round);
        hidden
            .iter()
            .map(|h| head_positive(h, &self.server.params))
            .collect()
    }
}

/// Runs the protocol for `cfg.epochs` epochs, then one evaluation round
/// whose outputs become the scores.
pub fn train_federated(
    inputs: &FederatedInputs<'_>,
    cfg: &TrainConfig,
    privacy: &PrivacyConfig,
    transcript: &TranscriptConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut fed = Federation::new(inputs, cfg, privacy, transcript, seed)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = fed.epoch(epoch)?;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        losses.push(loss);
    }
    let scores = fed.predict(cfg.epochs);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence("non-finite prediction".into()));
    }
    let status = fed
        .clients
        .iter()
        .map(|c| {
            if c.cells.is_empty() {
                ClientStatus::NoCells
            } else {
                ClientStatus::Active
            }
        })
        .collect();
    debug_assert!(fed.clients.iter().all(|c| c.n_real <= c.cells.len()));
    Ok(TrainOutcome {
        scores,
        status,
        losses,
        params: fed.server.params,
        embeddings: fed.clients.into_iter().map(|c| c.embedding).collect(),
        transcript: fed.transcript,
    })
}
