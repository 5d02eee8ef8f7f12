//! TOML run configuration. Every field has a default, so an empty (or
//! absent) file describes the reference two-queue system. Unknown keys are
//! rejected to catch typos early.

use mfsched::prob::FiniteDist;
use mfsched::queue::{
    default_access_dist, default_start_dist, enumerate_agent_states, enumerate_env_states,
    AgentState, EnvState, QueueConfig, QueueModel,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

/// A per-queue parameter given either once (shared by all queues) or as one
/// value per queue.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec<T> {
    Scalar(T),
    List(Vec<T>),
}

impl<T: Clone> ScalarOrVec<T> {
    fn expand(&self, m: usize, what: &str) -> Result<Vec<T>, CliError> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![v.clone(); m]),
            ScalarOrVec::List(vs) if vs.len() == m => Ok(vs.clone()),
            ScalarOrVec::List(vs) => Err(CliError::Config(format!(
                "{what} lists {} values for {m} queues",
                vs.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_queues: usize,
    pub capacities: ScalarOrVec<u32>,
    /// Defaults to 3 * num_queues - 1 when absent.
    pub arrival_rate: Option<f64>,
    pub service_rate: ScalarOrVec<f64>,
    pub dt: f64,
    pub drop_penalty: f64,
    pub trunc_eps: f64,
    pub gamma: f64,
    /// Access-set distribution, keyed like "[0,1]". States left out get
    /// zero mass. Absent: 0.6 on full access, rest uniform.
    pub mu0: Option<BTreeMap<String, f64>>,
    /// Initial buffer distribution, keyed like "[0,0]". Absent: all empty.
    pub mu0_env: Option<BTreeMap<String, f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_queues: 2,
            capacities: ScalarOrVec::Scalar(5),
            arrival_rate: None,
            service_rate: ScalarOrVec::Scalar(3.0),
            dt: 0.5,
            drop_penalty: 1.0,
            trunc_eps: 1e-12,
            gamma: 0.99,
            mu0: None,
            mu0_env: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub resolution: u32,
    pub tol: f64,
    pub max_rules: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            resolution: 20,
            tol: 1e-6,
            max_rules: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
    /// Horizon is chosen so the discarded discounted tail is below this.
    pub tail_eps: f64,
    pub n_agents: Vec<usize>,
    pub trials: usize,
    pub concentration_eps: Vec<f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            episodes: 500,
            tail_eps: 0.01,
            n_agents: vec![2, 4, 8, 16, 32, 64, 128],
            trials: 10_000,
            concentration_eps: vec![0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub solve: SolveSection,
    pub simulate: SimulateSection,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
    }

    /// Canonical serialization; identical inputs yield identical bytes.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn queue_config(&self) -> Result<QueueConfig, CliError> {
        let m = self.model.num_queues;
        let config = QueueConfig {
            num_queues: m,
            capacities: self.model.capacities.expand(m, "capacities")?,
            arrival_rate: self
                .model
                .arrival_rate
                .unwrap_or_else(|| QueueConfig::default_arrival_rate(m)),
            service_rates: self.model.service_rate.expand(m, "service_rate")?,
            dt: self.model.dt,
            drop_penalty: self.model.drop_penalty,
            trunc_eps: self.model.trunc_eps,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn build_model(&self) -> Result<QueueModel, CliError> {
        let qc = self.queue_config()?;
        let mu0 = match &self.model.mu0 {
            None => default_access_dist(qc.num_queues).map_err(|e| CliError::Config(e.to_string()))?,
            Some(map) => {
                dense_from_map(map, enumerate_agent_states(qc.num_queues), "mu0", |s| {
                    s.parse::<AgentState>()
                })?
            }
        };
        let mu0_env = match &self.model.mu0_env {
            None => default_start_dist(&qc.capacities),
            Some(map) => dense_from_map(
                map,
                enumerate_env_states(&qc.capacities),
                "mu0_env",
                |s| s.parse::<EnvState>(),
            )?,
        };
        QueueModel::new(qc, mu0, mu0_env, self.model.gamma)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

fn dense_from_map<T: Ord + Clone + std::fmt::Debug>(
    map: &BTreeMap<String, f64>,
    states: Vec<T>,
    what: &str,
    parse: impl Fn(&str) -> mfsched::Result<T>,
) -> Result<FiniteDist<T>, CliError> {
    let mut mass = vec![0.0; states.len()];
    for (key, &m) in map {
        let state = parse(key).map_err(|e| CliError::Config(format!("{what} key {key:?}: {e}")))?;
        let idx = states
            .binary_search(&state)
            .map_err(|_| CliError::Config(format!("{what} key {key:?} is not a valid state")))?;
        mass[idx] = m;
    }
    FiniteDist::from_sorted(states, mass)
        .map_err(|e| CliError::Config(format!("{what} is not a distribution: {e}")))
}
