use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, MacroHidden, MacroInputs};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{domain, stream};
use crate::tensor::{DiffusionSupports, Tape, Tensor, Var};

/// Weights of a single-layer diffusion-convolutional GRU with a linear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcgruParams {
    pub hidden: usize,
    pub k: usize,
    pub theta_gates: Tensor,
    pub b_gates: Tensor,
    pub theta_cand: Tensor,
    pub b_cand: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl DcgruParams {
    pub fn zeros(hidden: usize, k: usize) -> Self {
        let s = 2 * k + 1;
        let fin = 1 + hidden;
        Self {
            hidden,
            k,
            theta_gates: Tensor::zeros(fin, s * 2 * hidden),
            b_gates: Tensor::zeros(1, 2 * hidden),
            theta_cand: Tensor::zeros(fin, s * hidden),
            b_cand: Tensor::zeros(1, hidden),
            w_out: Tensor::zeros(hidden, 1),
            b_out: Tensor::zeros(1, 1),
        }
    }

    pub fn init(hidden: usize, k: usize, seed: u64) -> Self {
        let mut p = Self::zeros(hidden, k);
        let mut rng = stream(seed, &[domain::MACRO]);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        p
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.theta_gates,
            &self.b_gates,
            &self.theta_cand,
            &self.b_cand,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.theta_gates,
            &mut self.b_gates,
            &mut self.theta_cand,
            &mut self.b_cand,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Parameters placed on a tape.
pub struct CellVars<'t> {
    pub theta_gates: Var<'t>,
    pub b_gates: Var<'t>,
    pub theta_cand: Var<'t>,
    pub b_cand: Var<'t>,
    pub w_out: Var<'t>,
    pub b_out: Var<'t>,
    hidden: usize,
}

impl<'t> CellVars<'t> {
    pub fn leaves(tape: &'t Tape, p: &DcgruParams) -> Self {
        Self::place(tape, p, true)
    }

    pub fn constants(tape: &'t Tape, p: &DcgruParams) -> Self {
        Self::place(tape, p, false)
    }

    fn place(tape: &'t Tape, p: &DcgruParams, trace: bool) -> Self {
        let put = |t: &Tensor| {
            if trace {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            theta_gates: put(&p.theta_gates),
            b_gates: put(&p.b_gates),
            theta_cand: put(&p.theta_cand),
            b_cand: put(&p.b_cand),
            w_out: put(&p.w_out),
            b_out: put(&p.b_out),
            hidden: p.hidden,
        }
    }

    fn all(&self) -> [Var<'t>; 6] {
        [
            self.theta_gates,
            self.b_gates,
            self.theta_cand,
            self.b_cand,
            self.w_out,
            self.b_out,
        ]
    }

    /// One recurrent step: reset and update gates, candidate, blended state.
    pub fn cell(&self, x: Var<'t>, h: Var<'t>, sup: &Rc<DiffusionSupports>) -> Result<Var<'t>> {
        let f = self.hidden;
        let xh = x.concat_cols(h)?;
        let gates = xh
            .matmul(self.theta_gates)?
            .diffuse(sup)?
            .add_row(self.b_gates)?
            .sigmoid();
        let r = gates.slice_cols(0, f)?;
        let u = gates.slice_cols(f, 2 * f)?;
        let xrh = x.concat_cols(r.mul(h)?)?;
        let c = xrh
            .matmul(self.theta_cand)?
            .diffuse(sup)?
            .add_row(self.b_cand)?
            .tanh();
        Ok(u.mul(h)?.add(u.one_minus().mul(c)?)?)
    }

    pub fn readout(&self, h: Var<'t>) -> Result<Var<'t>> {
        Ok(h.matmul(self.w_out)?.add_row(self.b_out)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroTrainConfig {
    pub horizon: usize,
    pub encoder_len: usize,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcgruModel {
    pub params: DcgruParams,
}

impl DcgruModel {
    pub fn new(params: DcgruParams) -> Self {
        Self { params }
    }

    fn check_inputs(&self, inputs: &MacroInputs) -> Result<()> {
        if inputs.x.len() != inputs.supports.len() {
            return Err(Error::Contract("one support set per interval".into()));
        }
        if let Some(s) = inputs.supports.first() {
            if s.n_supports() != 2 * self.params.k + 1 {
                return Err(Error::Contract(format!(
                    "supports built for k={}, model uses k={}",
                    (s.n_supports() - 1) / 2,
                    self.params.k
                )));
            }
        }
        Ok(())
    }

    /// Mean squared error of `horizon`-ahead predictions after `encoder_len` warm-up steps.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        vars: &CellVars<'t>,
        inputs: &MacroInputs,
        cfg: &MacroTrainConfig,
    ) -> Result<Var<'t>> {
        self.check_inputs(inputs)?;
        let t_len = inputs.x.len();
        let last = t_len.saturating_sub(cfg.horizon);
        if cfg.horizon == 0 || cfg.encoder_len >= last {
            return Err(Error::Contract(format!(
                "{t_len} intervals cannot cover warm-up {} plus horizon {}",
                cfg.encoder_len, cfg.horizon
            )));
        }
        let m = inputs.n_regions();
        let mut h = tape.constant(Tensor::zeros(m, self.params.hidden));
        let mut total: Option<Var<'t>> = None;
        for t in 0..last {
            let x = tape.constant(inputs.x[t].clone());
            h = vars.cell(x, h, &inputs.supports[t])?;
            if t >= cfg.encoder_len {
                let step = vars.readout(h)?.mse(&inputs.x[t + cfg.horizon])?;
                total = Some(match total {
                    Some(acc) => acc.add(step)?,
                    None => step,
                });
            }
        }
        let n = (last - cfg.encoder_len) as f64;
        Ok(total.expect("at least one supervised step").scale(1.0 / n))
    }

    /// Trains in place; returns the loss before each epoch's update.
    pub fn train(&mut self, inputs: &MacroInputs, cfg: &MacroTrainConfig) -> Result<Vec<f64>> {
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let mut opts: Vec<Adam> = self
            .params
            .tensors()
            .iter()
            .map(|t| Adam::new(adam_cfg, t.len()))
            .collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let tape = Tape::new();
            let vars = CellVars::leaves(&tape, &self.params);
            let loss = self.loss(&tape, &vars, inputs, cfg)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "macro loss {value} at epoch {epoch}"
                )));
            }
            history.push(value);
            let grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = vars.all().iter().map(|v| grads.wrt(*v)).collect();
            for ((p, g), opt) in self
                .params
                .tensors_mut()
                .into_iter()
                .zip(&gs)
                .zip(&mut opts)
            {
                opt.step_tensor(p, g);
            }
        }
        Ok(history)
    }

    /// Hidden states and one-step readouts for every interval.
    pub fn run(&self, inputs: &MacroInputs) -> Result<(MacroHidden, Vec<Tensor>)> {
        self.check_inputs(inputs)?;
        let m = inputs.n_regions();
        let f = self.params.hidden;
        let mut hidden = MacroHidden::zeros(m, inputs.x.len(), f);
        let mut preds = Vec::with_capacity(inputs.x.len());
        let mut h = Tensor::zeros(m, f);
        for t in 0..inputs.x.len() {
            let tape = Tape::new();
            let vars = CellVars::constants(&tape, &self.params);
            let hv = vars.cell(
                tape.constant(inputs.x[t].clone()),
                tape.constant(h),
                &inputs.supports[t],
            )?;
            preds.push(vars.readout(hv)?.value());
            h = hv.value();
            hidden.set_interval(t, &h);
        }
        Ok((hidden, preds))
    }
}

impl Encoder for DcgruModel {
    fn hidden_width(&self) -> usize {
        self.params.hidden
    }

    fn encode(&self, inputs: &MacroInputs) -> Result<MacroHidden> {
        Ok(self.run(inputs)?.0)
    }
}
