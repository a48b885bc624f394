//! Experiment configuration: TOML files, named presets and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::GradientRule;
use crate::epidemic::DiseaseParams;
use crate::error::{Error, Result};
use crate::fedtrain::{PrivacyConfig, TrainConfig, TranscriptConfig};
use crate::macro_model::MacroConfig;
use crate::mobility::RoutineParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityConfig {
    pub n_users: usize,
    pub n_regions: usize,
    pub n_intervals: usize,
    /// Probability that a visit is reported.
    pub eta: f64,
    pub routine: RoutineParams,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_regions: 300,
            n_intervals: 168,
            eta: 1.0,
            routine: RoutineParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiseaseConfig {
    /// `sars-cov-2`, `omicron` or `custom`.
    pub preset: String,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub asymptomatic_fraction: Option<f64>,
    pub n_seed_infections: usize,
}

impl Default for DiseaseConfig {
    fn default() -> Self {
        Self {
            preset: "sars-cov-2".into(),
            beta: None,
            alpha: None,
            mu: None,
            asymptomatic_fraction: None,
            n_seed_infections: 40,
        }
    }
}

impl DiseaseConfig {
    /// Preset values with any explicit rate taking precedence.
    pub fn params(&self) -> Result<DiseaseParams> {
        let base = match self.preset.as_str() {
            "custom" => DiseaseParams {
                beta: self
                    .beta
                    .ok_or_else(|| Error::Config("custom disease needs disease.beta".into()))?,
                alpha: self
                    .alpha
                    .ok_or_else(|| Error::Config("custom disease needs disease.alpha".into()))?,
                mu: self
                    .mu
                    .ok_or_else(|| Error::Config("custom disease needs disease.mu".into()))?,
                ..DiseaseParams::sars_cov_2()
            },
            name => DiseaseParams::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown disease.preset `{name}`")))?,
        };
        let p = DiseaseParams {
            beta: self.beta.unwrap_or(base.beta),
            alpha: self.alpha.unwrap_or(base.alpha),
            mu: self.mu.unwrap_or(base.mu),
            asymptomatic_fraction: self
                .asymptomatic_fraction
                .unwrap_or(base.asymptomatic_fraction),
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoyConfig {
    /// Weight of the proximity term in region similarity.
    pub gamma: f64,
    /// Number of epidemic clusters; 0 picks one per twenty regions.
    pub clusters: usize,
    /// Distance-decay floor mixed into the aggregate transition rows.
    pub transition_floor: f64,
}

impl Default for DecoyConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            clusters: 0,
            transition_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub rule: GradientRule,
    pub strong_adversary: bool,
    /// Users scored by the localization attack.
    pub max_users: usize,
    pub sigma_grid: Vec<f64>,
    pub n_p_grid: Vec<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            rule: GradientRule::Argmax,
            strong_adversary: false,
            max_users: 300,
            sigma_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            n_p_grid: vec![2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mobility: MobilityConfig,
    pub disease: DiseaseConfig,
    pub model: TrainConfig,
    pub privacy: PrivacyConfig,
    #[serde(rename = "macro")]
    pub macro_model: MacroConfig,
    pub decoys: DecoyConfig,
    pub transcript: TranscriptConfig,
    pub attack: AttackConfig,
    pub ablation: AblationConfig,
}

/// The desk scenario. Training is shortened to 50 epochs at lr 0.01.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("falcon-out"),
            mobility: MobilityConfig::default(),
            disease: DiseaseConfig::default(),
            model: TrainConfig {
                lr: 0.01,
                epochs: 50,
                ..TrainConfig::default()
            },
            privacy: PrivacyConfig::default(),
            macro_model: MacroConfig::default(),
            decoys: DecoyConfig::default(),
            transcript: TranscriptConfig::default(),
            attack: AttackConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `text` as a TOML scalar or array, falling back to a bare string.
fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed config key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Builds from optional file text plus `(dotted.key, value)` overrides.
    pub fn from_sources(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        // Partial sections fill in from the desk defaults, not per-section defaults.
        let mut root = toml::Table::try_from(Self::default()).expect("config serializes");
        if let Some(t) = text {
            let user: toml::Table = t
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut root, user);
        }
        for (k, v) in overrides {
            set_path(&mut root, k, parse_value(v))?;
        }
        let cfg: Self =
            serde_path_to_error::deserialize(toml::Value::Table(root)).map_err(|e| {
                let path = e.path().to_string();
                let inner = e.into_inner();
                if path == "." {
                    Error::Config(inner.to_string())
                } else {
                    Error::Config(format!("`{path}`: {inner}"))
                }
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path
            .map(|p| {
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            })
            .transpose()?;
        Self::from_sources(text.as_deref(), overrides)
    }

    /// Named scenarios: `desk`, `sars-cov-2` and `omicron` (desk scale with that disease).
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "desk" | "sars-cov-2" => {}
            "omicron" => cfg.disease.preset = "omicron".into(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mobility;
        if m.n_users == 0 || m.n_regions < 2 || m.n_intervals < 2 {
            return Err(Error::Config(
                "mobility needs n_users >= 1, n_regions >= 2, n_intervals >= 2".into(),
            ));
        }
        if !(m.eta > 0.0 && m.eta <= 1.0) {
            return Err(Error::Config(format!(
                "mobility.eta {} outside (0, 1]",
                m.eta
            )));
        }
        if self.disease.n_seed_infections > m.n_users {
            return Err(Error::Config(
                "disease.n_seed_infections exceeds mobility.n_users".into(),
            ));
        }
        self.disease.params()?;
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(cfg_err)?;
        self.privacy.validate().map_err(cfg_err)?;
        if self.macro_model.enabled
            && (self.macro_model.hidden == 0 || self.macro_model.epochs == 0)
        {
            return Err(Error::Config(
                "macro needs hidden > 0 and epochs > 0 when enabled".into(),
            ));
        }
        if self.decoys.clusters > m.n_regions {
            return Err(Error::Config(
                "decoys.clusters exceeds mobility.n_regions".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Splits `--a.b value` / `--a.b=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{a}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("config key `{key}` has no value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_to_reference_rates() {
        let s = ExperimentConfig::preset("sars-cov-2")
            .unwrap()
            .disease
            .params()
            .unwrap();
        assert_eq!((s.beta, s.alpha, s.mu), (0.405, 0.2564, 0.071));
        let o = ExperimentConfig::preset("omicron")
            .unwrap()
            .disease
            .params()
            .unwrap();
        assert_eq!((o.beta, o.alpha, o.mu), (0.766, 0.6579, 0.071));
        assert!(ExperimentConfig::preset("flu").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let args: Vec<String> = [
            "--model.epochs",
            "7",
            "--privacy.sigma_l=0.1",
            "--disease.preset",
            "omicron",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let cfg = ExperimentConfig::from_sources(
            Some("seed = 4\n[model]\nlr = 0.01\n"),
            &parse_overrides(&args).unwrap(),
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.epochs, 7);
        let partial = ExperimentConfig::from_sources(Some("[model]\nlr = 0.5\n"), &[]).unwrap();
        assert_eq!(
            partial.model.epochs,
            ExperimentConfig::default().model.epochs
        );
        assert_eq!(cfg.model.lr, 0.01);
        assert_eq!(cfg.model.dropout, ExperimentConfig::default().model.dropout);
        assert_eq!(cfg.privacy.sigma_l, 0.1);
        assert_eq!(cfg.disease.params().unwrap().beta, 0.766);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_sources(None, &[("model.epohcs".into(), "3".into())])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epohcs"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        let err =
            ExperimentConfig::from_sources(Some("[mobilty]\nn_users = 3\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("mobilty"));
    }

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_sources(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        let other = ExperimentConfig { seed: 2, ..cfg };
        assert_ne!(other.hash(), back.hash());
    }

    #[test]
    fn explicit_rates_override_preset() {
        let cfg =
            ExperimentConfig::from_sources(None, &[("disease.beta".into(), "0.9".into())]).unwrap();
        let p = cfg.disease.params().unwrap();
        assert_eq!((p.beta, p.alpha), (0.9, 0.2564));
        assert!(ExperimentConfig::from_sources(
            None,
            &[("disease.preset".into(), "custom".into())]
        )
        .is_err());
    }
}
