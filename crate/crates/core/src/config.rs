//! Declarative experiment configuration.
//!
//! A config deserializes from JSON with unknown keys rejected; every
//! optional field has a documented default, so serializing a parsed config
//! back out yields the fully resolved form.

use serde::{Deserialize, Serialize};

use crate::adversary::{self, ClientRole};
use crate::data::LabeledDataset;
use crate::detection::DEFAULT_HISTORY_WINDOW;
use crate::error::{Error, Result};
use crate::model::{ModelLayout, TrainingHyperparams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    MineDetect,
    FedAvg,
    Krum,
    MultiKrum,
    GeoMed,
}

impl Defense {
    pub fn name(self) -> &'static str {
        match self {
            Defense::MineDetect => "minedetect",
            Defense::FedAvg => "fedavg",
            Defense::Krum => "krum",
            Defense::MultiKrum => "multi_krum",
            Defense::GeoMed => "geomed",
        }
    }
}

impl std::str::FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minedetect" => Ok(Defense::MineDetect),
            "fedavg" => Ok(Defense::FedAvg),
            "krum" => Ok(Defense::Krum),
            "multi_krum" => Ok(Defense::MultiKrum),
            "geomed" => Ok(Defense::GeoMed),
            other => Err(Error::config(
                "defense",
                format!("unknown defense `{other}` (expected minedetect, fedavg, krum, multi_krum, or geomed)"),
            )),
        }
    }
}

/// Client ids per adversarial role; everyone else is benign.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RosterSpec {
    pub sign_flip: Vec<usize>,
    pub additive_noise: Vec<usize>,
    pub unreliable: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rates: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dims: vec![16, 8],
            output_dim: 4,
            dropout_rates: vec![0.0, 0.0],
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.output_dim,
            dropout_rates: self.dropout_rates.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 8,
            local_epochs: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl HyperConfig {
    pub fn hyperparams(&self) -> TrainingHyperparams {
        TrainingHyperparams {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        n_samples: usize,
        n_classes: usize,
        dim: usize,
        class_separation: f64,
    },
    Idx {
        images: String,
        labels: String,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            n_samples: 4000,
            n_classes: 4,
            dim: 8,
            class_separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub clients: usize,
    pub rounds: u32,
    pub defense: Defense,
    pub seed: u64,
    #[serde(default)]
    pub roster: RosterSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_lambda")]
    pub partition_lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Per-coordinate noise level for additive-noise attackers; `null`
    /// resolves at round 1 to twice the median benign update norm.
    #[serde(default)]
    pub attack_sigma: Option<f64>,
    #[serde(default = "default_unreliable_sigma")]
    pub unreliable_sigma: f64,
    #[serde(default = "default_history_window")]
    pub history_window: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Assumed attacker bound for krum/multi_krum; `null` uses the true
    /// attacker count from the roster.
    #[serde(default)]
    pub krum_f: Option<usize>,
    /// Multi-Krum selection size; `null` uses `clients - krum_f`.
    #[serde(default)]
    pub multi_krum_m: Option<usize>,
    #[serde(default = "default_geomed_tolerance")]
    pub geomed_tolerance: f64,
    #[serde(default = "default_geomed_max_iters")]
    pub geomed_max_iters: usize,
    #[serde(default)]
    pub recompute_g_after_exclusion: bool,
    /// Rounds (1-indexed) in which attackers act; `null` means every round.
    #[serde(default)]
    pub intermittent: Option<Vec<u32>>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_lambda() -> f64 {
    0.9
}
fn default_beta() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    1.0
}
fn default_unreliable_sigma() -> f64 {
    0.5
}
fn default_history_window() -> usize {
    DEFAULT_HISTORY_WINDOW
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_geomed_tolerance() -> f64 {
    1e-8
}
fn default_geomed_max_iters() -> usize {
    100
}

impl ExperimentConfig {
    /// A minimal config with every optional field at its default.
    pub fn minimal(clients: usize, rounds: u32, defense: Defense, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            clients,
            rounds,
            defense,
            seed,
            roster: RosterSpec::default(),
            model: ModelConfig::default(),
            hyper: HyperConfig::default(),
            dataset: DatasetConfig::default(),
            partition_lambda: default_lambda(),
            beta: default_beta(),
            eta: default_eta(),
            attack_sigma: None,
            unreliable_sigma: default_unreliable_sigma(),
            history_window: default_history_window(),
            test_fraction: default_test_fraction(),
            krum_f: None,
            multi_krum_m: None,
            geomed_tolerance: default_geomed_tolerance(),
            geomed_max_iters: default_geomed_max_iters(),
            recompute_g_after_exclusion: false,
            intermittent: None,
        }
    }

    /// Per-client roles, index-aligned with client ids.
    pub fn roles(&self) -> Vec<ClientRole> {
        let mut roles = vec![ClientRole::Benign; self.clients];
        for &i in &self.roster.sign_flip {
            roles[i] = ClientRole::SignFlip;
        }
        for &i in &self.roster.additive_noise {
            roles[i] = ClientRole::AdditiveNoise;
        }
        for &i in &self.roster.unreliable {
            roles[i] = ClientRole::Unreliable;
        }
        roles
    }

    /// True attacker count (sign-flip plus additive-noise clients).
    pub fn attacker_count(&self) -> usize {
        self.roster.sign_flip.len() + self.roster.additive_noise.len()
    }

    pub fn resolved_krum_f(&self) -> usize {
        self.krum_f.unwrap_or_else(|| self.attacker_count())
    }

    pub fn resolved_multi_krum_m(&self) -> usize {
        self.multi_krum_m
            .unwrap_or_else(|| self.clients.saturating_sub(self.resolved_krum_f()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }

        for (key, ids) in [
            ("roster.sign_flip", &self.roster.sign_flip),
            ("roster.additive_noise", &self.roster.additive_noise),
            ("roster.unreliable", &self.roster.unreliable),
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for &i in ids {
                if i >= self.clients {
                    return Err(Error::config(key, format!("client id {i} out of range 0..{}", self.clients)));
                }
                if !seen.insert(i) {
                    return Err(Error::config(key, format!("client id {i} listed twice")));
                }
            }
        }
        let mut all = std::collections::BTreeSet::new();
        for &i in self
            .roster
            .sign_flip
            .iter()
            .chain(&self.roster.additive_noise)
            .chain(&self.roster.unreliable)
        {
            if !all.insert(i) {
                return Err(Error::config("roster", format!("client id {i} assigned two roles")));
            }
        }
        adversary::validate_roster(&self.roles())?;

        self.model.layout().validate()?;
        self.hyper.hyperparams().validate()?;

        match &self.dataset {
            DatasetConfig::Synthetic {
                n_samples,
                n_classes,
                dim,
                class_separation,
            } => {
                if *n_samples < *n_classes {
                    return Err(Error::config("dataset.n_samples", "need at least one sample per class"));
                }
                if *n_classes < 2 {
                    return Err(Error::config("dataset.n_classes", "must be at least 2"));
                }
                if *dim != self.model.input_dim {
                    return Err(Error::config(
                        "dataset.dim",
                        format!("feature width {dim} does not match model.input_dim {}", self.model.input_dim),
                    ));
                }
                if *n_classes > self.model.output_dim {
                    return Err(Error::config(
                        "dataset.n_classes",
                        format!("{n_classes} classes exceed model.output_dim {}", self.model.output_dim),
                    ));
                }
                if !(*class_separation > 0.0) {
                    return Err(Error::config("dataset.class_separation", "must be positive"));
                }
            }
            DatasetConfig::Idx { .. } => {
                // dimensions checked against the loaded file at run start
            }
        }

        if !(self.partition_lambda > 0.0) {
            return Err(Error::config("partition_lambda", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("beta", "must lie in (0, 1]"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::config("eta", "must be positive"));
        }
        if let Some(sigma) = self.attack_sigma {
            if !(sigma >= 0.0) {
                return Err(Error::config("attack_sigma", "must be >= 0"));
            }
        }
        if !(self.unreliable_sigma >= 0.0) {
            return Err(Error::config("unreliable_sigma", "must be >= 0"));
        }
        if self.history_window == 0 {
            return Err(Error::config("history_window", "must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must lie in (0, 1)"));
        }
        if !(self.geomed_tolerance > 0.0) {
            return Err(Error::config("geomed_tolerance", "must be positive"));
        }
        if self.geomed_max_iters == 0 {
            return Err(Error::config("geomed_max_iters", "must be at least 1"));
        }

        match self.defense {
            Defense::Krum | Defense::MultiKrum => {
                let f = self.resolved_krum_f();
                if self.clients < f + 3 {
                    return Err(Error::config(
                        "krum_f",
                        format!("krum needs clients >= f + 3, got {} with f = {f}", self.clients),
                    ));
                }
                if self.defense == Defense::MultiKrum {
                    let m = self.resolved_multi_krum_m();
                    if m == 0 || m > self.clients - f {
                        return Err(Error::config(
                            "multi_krum_m",
                            format!("m = {m} outside 1..={}", self.clients - f),
                        ));
                    }
                }
            }
            _ => {}
        }

        if let Some(rounds) = &self.intermittent {
            if rounds.iter().any(|&r| r == 0) {
                return Err(Error::config("intermittent", "rounds are 1-indexed; 0 is invalid"));
            }
        }
        Ok(())
    }

    /// Whether attackers act in the given (1-indexed) round.
    pub fn attack_active(&self, round: u32) -> bool {
        match &self.intermittent {
            None => true,
            Some(rounds) => rounds.contains(&round),
        }
    }

    /// Materializes the dataset named by the config.
    pub fn build_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_samples,
                n_classes,
                dim,
                class_separation,
            } => {
                let seed = crate::seed::derive_seed(self.seed, crate::seed::stream::DATASET, 0, 0);
                Ok(crate::data::generate_synthetic(
                    *n_samples,
                    *n_classes,
                    *dim,
                    *class_separation,
                    seed,
                ))
            }
            DatasetConfig::Idx { images, labels } => {
                let data = crate::data::load_idx(images.as_ref(), labels.as_ref())?;
                if data.dim() != self.model.input_dim {
                    return Err(Error::config(
                        "dataset",
                        format!(
                            "IDX feature width {} does not match model.input_dim {}",
                            data.dim(),
                            self.model.input_dim
                        ),
                    ));
                }
                if data.n_classes() > self.model.output_dim {
                    return Err(Error::config(
                        "dataset",
                        format!(
                            "IDX labels span {} classes but model.output_dim is {}",
                            data.n_classes(),
                            self.model.output_dim
                        ),
                    ));
                }
                Ok(data)
            }
        }
    }
}
