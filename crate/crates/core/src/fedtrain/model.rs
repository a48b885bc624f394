//! Shared parameter layout, initialization and dropout masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{domain, stream};
use crate::tensor::{sigmoid, Tensor};

pub const N_CLASSES: usize = 2;
const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Width of the macro features appended to every hyperedge embedding.
    pub macro_width: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(contract(format!("degenerate model dims {self:?}")));
        }
        Ok(())
    }

    /// Width of the node embeddings fed into layer `l`.
    pub fn node_width(&self, l: usize) -> usize {
        if l == 0 {
            self.embed
        } else {
            self.hidden
        }
    }

    pub fn layer_in(&self, l: usize) -> usize {
        self.node_width(l) + self.macro_width
    }
}

/// Propagation weights per layer plus the classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub thetas: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
            .collect(),
    )
}

impl ModelParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = stream(seed, &[domain::INIT, 0]);
        let thetas = (0..dims.layers)
            .map(|l| uniform(&mut rng, dims.layer_in(l), dims.hidden))
            .collect();
        let head_w = uniform(&mut rng, dims.hidden, N_CLASSES);
        Self {
            thetas,
            head_w,
            head_b: Tensor::zeros(1, N_CLASSES),
        }
    }

    pub fn blocks(&self) -> Vec<&Tensor> {
        self.thetas
            .iter()
            .chain([&self.head_w, &self.head_b])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut at = 0;
        for t in self
            .thetas
            .iter_mut()
            .chain([&mut self.head_w, &mut self.head_b])
        {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|t| t.is_finite())
    }
}

/// Initial embedding of one user, derivable by that user alone.
pub fn init_embedding(user: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[domain::INIT, 1, user as u64]);
    (0..dim)
        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
        .collect()
}

/// Inverted-dropout multipliers for one user in one epoch.
pub fn dropout_mask(seed: u64, epoch: usize, user: usize, width: usize, p: f64) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; width];
    }
    let mut rng = stream(seed, &[domain::DROPOUT, epoch as u64, user as u64]);
    let keep = 1.0 / (1.0 - p);
    (0..width)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// `sigmoid(x theta)` for a single row.
pub fn dense_sigmoid(x: &[f64], theta: &Tensor) -> Vec<f64> {
    debug_assert_eq!(x.len(), theta.rows());
    let mut out = vec![0.0; theta.cols()];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(theta.row_slice(i)) {
            *o += xi * w;
        }
    }
    out.iter_mut().for_each(|o| *o = sigmoid(*o));
    out
}

/// Probability of the positive class from the last hidden layer.
pub fn head_positive(h: &[f64], params: &ModelParams) -> f64 {
    let mut z = params.head_b.data().to_vec();
    for (i, &hi) in h.iter().enumerate() {
        for (zc, w) in z.iter_mut().zip(params.head_w.row_slice(i)) {
            *zc += hi * w;
        }
    }
    sigmoid(z[1] - z[0])
}
