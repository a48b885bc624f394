//! Everything the server receives, kept for audits and attacks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranscriptLevel {
    Off,
    /// Update norms only.
    #[default]
    Norms,
    /// Full message vectors.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscriptConfig {
    pub level: TranscriptLevel,
    /// Epochs whose messages are kept.
    pub rounds: Vec<usize>,
    /// Propagation layers whose uploads are kept.
    pub layers: Vec<usize>,
}

impl Default for TranscriptConfig {
    fn default() -> Self {
        Self {
            level: TranscriptLevel::Norms,
            rounds: vec![0],
            layers: vec![0],
        }
    }
}

impl TranscriptConfig {
    pub fn off() -> Self {
        Self {
            level: TranscriptLevel::Off,
            ..Self::default()
        }
    }

    pub fn records(&self, round: usize, layer: usize) -> bool {
        self.level != TranscriptLevel::Off
            && self.rounds.contains(&round)
            && self.layers.contains(&layer)
    }

    pub fn records_round(&self, round: usize) -> bool {
        self.level != TranscriptLevel::Off && self.rounds.contains(&round)
    }
}

/// One hyperedge message from a client. The server sees which edge it is for
/// and the payload, never whether the cell is real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadRecord {
    pub round: u32,
    pub layer: u8,
    pub user: u32,
    pub edge: u32,
    pub norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub round: u32,
    pub user: u32,
    pub norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub uploads: Vec<UploadRecord>,
    pub gradients: Vec<GradientRecord>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Transcript {
    pub(crate) fn upload(
        &mut self,
        level: TranscriptLevel,
        round: usize,
        layer: usize,
        user: usize,
        edge: usize,
        msg: &[f64],
    ) {
        self.uploads.push(UploadRecord {
            round: round as u32,
            layer: layer as u8,
            user: user as u32,
            edge: edge as u32,
            norm: l2(msg),
            payload: (level == TranscriptLevel::Full).then(|| msg.to_vec()),
        });
    }

    pub(crate) fn gradient(
        &mut self,
        level: TranscriptLevel,
        round: usize,
        user: usize,
        g: &[f64],
    ) {
        self.gradients.push(GradientRecord {
            round: round as u32,
            user: user as u32,
            norm: l2(g),
            payload: (level == TranscriptLevel::Full).then(|| g.to_vec()),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.uploads.is_empty() && self.gradients.is_empty()
    }

    /// Every number the server received, in record order.
    pub fn received_values(&self) -> impl Iterator<Item = f64> + '_ {
        let up = self
            .uploads
            .iter()
            .flat_map(|r| std::iter::once(r.norm).chain(r.payload.iter().flatten().copied()));
        let gr = self
            .gradients
            .iter()
            .flat_map(|r| std::iter::once(r.norm).chain(r.payload.iter().flatten().copied()));
        up.chain(gr)
    }
}
