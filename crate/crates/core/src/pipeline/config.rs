use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::graph::Graph;
use crate::models::BackboneKind;
use crate::tensor::AdamConfig;

/// Soft-loss objective used for distillation and projector training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftLoss {
    #[default]
    Ntxent,
    Mse,
}

impl SoftLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftLoss::Ntxent => "ntxent",
            SoftLoss::Mse => "mse",
        }
    }
}

impl fmt::Display for SoftLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SoftLoss {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ntxent" | "nt-xent" => Ok(SoftLoss::Ntxent),
            "mse" => Ok(SoftLoss::Mse),
            _ => Err(PipelineError::Config(format!("unknown soft loss {s:?} (expected ntxent or mse)"))),
        }
    }
}

/// Every training hyperparameter. `None` for `tau` / `gamma` selects the
/// backbone-dependent default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub backbone: BackboneKind,
    pub hidden: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub weight_decay: f64,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub balancer_lr: f64,
    /// Bypass the balancer and use this hard-loss coefficient every epoch.
    pub fixed_alpha: Option<f64>,
    pub soft_loss: SoftLoss,
    pub sim_head: bool,
    pub with_sensitive: bool,
    /// Attribute removed from the student's input; defaults to the graph's
    /// first sensitive attribute.
    pub sensitive: Option<String>,
    /// Attributes to report fairness for; defaults to all of them.
    pub evaluate: Option<Vec<String>>,
    pub seed: u64,
    pub runs: usize,
    /// Explicit seed list; overrides `seed` and `runs`.
    pub seeds: Option<Vec<u64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Gcn,
            hidden: 16,
            epochs: 1000,
            step_size: 1e-3,
            weight_decay: 1e-5,
            tau: None,
            gamma: None,
            balancer_lr: 1.0,
            fixed_alpha: None,
            soft_loss: SoftLoss::Ntxent,
            sim_head: false,
            with_sensitive: false,
            sensitive: None,
            evaluate: None,
            seed: 0,
            runs: 10,
            seeds: None,
        }
    }
}

/// `(key, default, provenance)` for every option, in declaration order.
pub const DOCUMENTED_DEFAULTS: &[(&str, &str, &str)] = &[
    ("backbone", "gcn", "paper"),
    ("hidden", "16", "paper"),
    ("epochs", "1000", "paper"),
    ("step_size", "0.001", "paper"),
    ("weight_decay", "0.00001", "paper"),
    ("tau", "0.5 (gcn) / 0.9 (gin)", "paper"),
    ("gamma", "0.1 (gcn) / 0.001 (gin)", "paper"),
    ("balancer_lr", "1.0", "paper"),
    ("fixed_alpha", "unset", "repo"),
    ("soft_loss", "ntxent", "paper"),
    ("sim_head", "false", "repo"),
    ("with_sensitive", "false", "paper"),
    ("sensitive", "first sensitive attribute", "repo"),
    ("evaluate", "all sensitive attributes", "repo"),
    ("seed", "0", "repo"),
    ("runs", "10", "paper"),
    ("seeds", "seed..seed+runs", "repo"),
];

impl TrainConfig {
    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(match self.backbone {
            BackboneKind::Gcn => 0.5,
            BackboneKind::Gin => 0.9,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(match self.backbone {
            BackboneKind::Gcn => 0.1,
            BackboneKind::Gin => 0.001,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.runs as u64).map(|i| self.seed + i).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if !(self.tau() > 0.0) || !self.tau().is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau()));
        }
        if !(self.gamma() > 0.0) || !self.gamma().is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma()));
        }
        if !(0.0..=1.0).contains(&self.balancer_lr) {
            return bad(format!("balancer_lr {} outside [0, 1]", self.balancer_lr));
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("fixed_alpha {a} outside [0, 1]"));
            }
        }
        if !(self.step_size > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("step_size must be positive and weight_decay nonnegative".into());
        }
        let seeds = self.seed_list();
        if seeds.is_empty() {
            return bad("at least one run is required".into());
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return bad("seed list contains duplicates".into());
        }
        Ok(())
    }

    /// Short hex digest of the canonical JSON form of this config.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

/// Digest of a graph's content: topology, attributes, labels, sensitive
/// values and splits.
pub fn graph_digest(graph: &Graph) -> String {
    let mut h = Sha256::new();
    for (u, v) in graph.edge_list() {
        h.update((u as u64).to_le_bytes());
        h.update((v as u64).to_le_bytes());
    }
    h.update((graph.num_nodes() as u64).to_le_bytes());
    for v in graph.attributes().as_slice() {
        h.update(v.to_bits().to_le_bytes());
    }
    for name in graph.attribute_names() {
        h.update(name.as_bytes());
        h.update([0]);
    }
    h.update(graph.labels().iter().map(|l| l.map_or(2, |v| v)).collect::<Vec<u8>>());
    for s in graph.sensitive_attributes() {
        h.update(s.name.as_bytes());
        h.update([0]);
        h.update(&s.values);
    }
    let splits = serde_json::to_vec(graph.splits()).expect("splits serialize");
    h.update(splits);
    hex::encode(&h.finalize()[..8])
}

/// Provenance hash of a run: the hyperparameters plus the graph content.
pub fn run_hash(cfg: &TrainConfig, graph: &Graph) -> String {
    config_hash(&(cfg, graph_digest(graph)))
}

/// Independent seeds for the parameter initialisation of each model role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub mlp_expert: u64,
    pub gcn_expert: u64,
    /// Shared by the reference GNN, the student and the baselines, so they
    /// all start from the same parameters.
    pub classifier: u64,
    pub projector: u64,
    pub sim_head: u64,
}

impl StageSeeds {
    pub fn derive(run_seed: u64) -> Self {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run_seed);
        Self {
            mlp_expert: rng.next_u64(),
            gcn_expert: rng.next_u64(),
            classifier: rng.next_u64(),
            projector: rng.next_u64(),
            sim_head: rng.next_u64(),
        }
    }
}
