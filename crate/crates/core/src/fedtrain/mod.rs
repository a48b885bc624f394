//! Federated detached hypergraph training, its centralized reference and the
//! ablation variants.

mod central;
mod checkpoint;
pub mod dp;
mod model;
mod protocol;
mod transcript;

use serde::{Deserialize, Serialize};

pub use central::{train_central, CentralConfig, CentralInputs, GradientMode};
pub use checkpoint::Checkpoint;
pub use model::{dropout_mask, init_embedding, ModelDims, ModelParams, N_CLASSES};
pub use protocol::{
    client_embedding_update, observed_graph, sanitized_update, server_aggregate, train_federated,
    update_delta, FederatedInputs,
};
pub use transcript::{GradientRecord, Transcript, TranscriptConfig, TranscriptLevel, UploadRecord};

use crate::error::{contract, Result};
use crate::pseudoloc::GeneratorKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Fraction of users whose labels are visible during training.
    pub label_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 16,
            layers: 2,
            lr: 0.001,
            epochs: 500,
            dropout: 0.2,
            weight_decay: 0.0005,
            label_ratio: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self, macro_width: usize) -> ModelDims {
        ModelDims {
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            layers: self.layers,
            macro_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims(0).validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(contract(format!("learning rate {} is invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(contract("weight decay must be non-negative"));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio < 1.0) {
            return Err(contract(format!(
                "label ratio {} outside (0, 1)",
                self.label_ratio
            )));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    /// When false every mechanism below is off regardless of its setting.
    pub enabled: bool,
    /// Decoy traces per user.
    pub n_p: usize,
    pub generator: GeneratorKind,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_updates: bool,
    /// Per-coordinate bound on location-embedding updates.
    pub clip_l: f64,
    pub sigma_l: f64,
    /// Derive `sigma_l` from the budget instead of using it directly.
    pub calibrate_sigma_l: bool,
    pub dpsgd: bool,
    /// L2 bound on each client's parameter gradient.
    pub clip_f: f64,
    pub sigma_f: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_p: 2,
            generator: GeneratorKind::Epidemic,
            epsilon: 1.0,
            delta: 0.001,
            clip_updates: true,
            clip_l: 0.1,
            sigma_l: 0.01,
            calibrate_sigma_l: false,
            dpsgd: true,
            clip_f: 5.0,
            sigma_f: 0.02,
        }
    }
}

impl PrivacyConfig {
    /// No decoys, no noise, no clipping.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            n_p: 0,
            clip_updates: false,
            sigma_l: 0.0,
            calibrate_sigma_l: false,
            dpsgd: false,
            sigma_f: 0.0,
            ..Self::default()
        }
    }

    /// The settings actually in force.
    pub fn effective(&self) -> Self {
        if self.enabled {
            self.clone()
        } else {
            Self::disabled()
        }
    }

    pub fn update_clip(&self) -> Option<f64> {
        self.clip_updates.then_some(self.clip_l)
    }

    pub fn effective_sigma_l(&self, layers: usize) -> Result<f64> {
        if self.calibrate_sigma_l {
            dp::calibrate_sigma(self.epsilon, self.delta, self.clip_l, layers)
        } else {
            Ok(self.sigma_l)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_l >= 0.0 && self.sigma_f >= 0.0) {
            return Err(contract("noise scales must be non-negative"));
        }
        if !(self.clip_l >= 0.0 && self.clip_f >= 0.0) {
            return Err(contract("clip bounds must be non-negative"));
        }
        if self.calibrate_sigma_l {
            dp::calibrate_sigma(self.epsilon, self.delta, self.clip_l, 1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientStatus {
    Active,
    /// No observed cell: scored from zero features, never trained on.
    NoCells,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Positive-class probability per user.
    pub scores: Vec<f64>,
    pub status: Vec<ClientStatus>,
    /// Mean labeled loss per epoch.
    pub losses: Vec<f64>,
    pub params: ModelParams,
    pub embeddings: Vec<Vec<f64>>,
    pub transcript: Transcript,
}

/// Pipeline variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Falcon,
    WoMacro,
    WoPseudo,
    WoPerturbation,
    WoPrivacy,
    HgnnCentral,
    HgnnCentralNoisy,
    Dct,
}

/// How a variant is trained once its configuration is adjusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainer {
    Federated,
    Central { noisy: bool },
    ContactTracing,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Falcon,
        Variant::WoMacro,
        Variant::WoPseudo,
        Variant::WoPerturbation,
        Variant::WoPrivacy,
        Variant::HgnnCentral,
        Variant::HgnnCentralNoisy,
        Variant::Dct,
    ];

    /// Rows of the ablation table.
    pub const ABLATION: [Variant; 8] = [
        Variant::HgnnCentral,
        Variant::HgnnCentralNoisy,
        Variant::WoMacro,
        Variant::WoPseudo,
        Variant::WoPerturbation,
        Variant::WoPrivacy,
        Variant::Falcon,
        Variant::Dct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Falcon => "falcon",
            Variant::WoMacro => "wo-macro",
            Variant::WoPseudo => "wo-pseudo",
            Variant::WoPerturbation => "wo-perturbation",
            Variant::WoPrivacy => "wo-privacy",
            Variant::HgnnCentral => "hgnn-central",
            Variant::HgnnCentralNoisy => "hgnn-central-noisy",
            Variant::Dct => "dct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn trainer(self) -> Trainer {
        match self {
            Variant::HgnnCentral => Trainer::Central { noisy: false },
            Variant::HgnnCentralNoisy => Trainer::Central { noisy: true },
            Variant::Dct => Trainer::ContactTracing,
            _ => Trainer::Federated,
        }
    }

    /// The plain centralized model follows the configured coupling so it can
    /// serve as the protocol's reference; the noisy baseline never couples.
    pub fn uses_macro(self, base: bool) -> bool {
        base && !matches!(
            self,
            Variant::WoMacro | Variant::HgnnCentralNoisy | Variant::Dct
        )
    }

    /// Privacy settings this variant trains with, derived from the base ones.
    pub fn privacy(self, base: &PrivacyConfig) -> PrivacyConfig {
        let base = &base.effective();
        match self {
            Variant::WoPseudo => PrivacyConfig {
                n_p: 0,
                ..base.clone()
            },
            Variant::WoPerturbation => PrivacyConfig {
                sigma_l: 0.0,
                calibrate_sigma_l: false,
                ..base.clone()
            },
            Variant::WoPrivacy | Variant::HgnnCentral | Variant::Dct => PrivacyConfig::disabled(),
            Variant::HgnnCentralNoisy => PrivacyConfig {
                n_p: 0,
                ..base.clone()
            },
            Variant::Falcon | Variant::WoMacro => base.clone(),
        }
    }
}
