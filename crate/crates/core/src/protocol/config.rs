use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, OptimizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// Clients upload raw weights; the server averages them.
    Fedavg,
    /// Clients upload weights plus Gaussian noise.
    Dp,
    /// Cluster-based share exchange; clients upload masked sums.
    Smc,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Fedavg, StrategyKind::Dp, StrategyKind::Smc];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::Dp => "dp",
            StrategyKind::Smc => "smc",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}` (fedavg, dp, smc)")))
    }
}

/// Every parameter of an experiment. Serialized as the `config.resolved.json`
/// written next to each run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of hospitals, K.
    pub clients: usize,
    /// Number of clusters, M. Cluster size is `clients / clusters`.
    pub clusters: usize,
    /// Communication rounds, T.
    pub rounds: usize,
    /// Local epochs per round, E.
    pub local_epochs: usize,
    /// Local batch size, B.
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub strategy: StrategyKind,
    /// Standard deviation of the DP upload noise.
    pub dp_sigma: f64,
    pub master_seed: u64,
    pub model: ModelSpec,
    pub data: DataConfig,
    /// Strategies run by `compare`.
    pub compare_strategies: Vec<StrategyKind>,
    /// Seeded repetitions per strategy in `compare`.
    pub repeats: usize,
    /// Permit single-hospital clusters under smc (the server then sees raw weights).
    pub allow_degenerate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            clients: 6,
            clusters: 2,
            rounds: 300,
            local_epochs: 1,
            batch_size: 32,
            optimizer: OptimizerSpec::adam(0.009),
            strategy: StrategyKind::Smc,
            dp_sigma: 0.03,
            master_seed: 0,
            model: ModelSpec::logistic(data.input_dim),
            data,
            compare_strategies: StrategyKind::ALL.to_vec(),
            repeats: 5,
            allow_degenerate: false,
        }
    }
}

impl RunConfig {
    /// Cluster size N.
    pub fn cluster_size(&self) -> usize {
        self.clients / self.clusters.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if self.clusters == 0 {
            return Err(Error::config("clusters", "must be at least 1"));
        }
        if !self.clients.is_multiple_of(self.clusters) {
            return Err(Error::config(
                "clusters",
                format!(
                    "clients ({}) must be divisible by clusters ({}) so every cluster has the same size",
                    self.clients, self.clusters
                ),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !self.dp_sigma.is_finite() || self.dp_sigma < 0.0 {
            return Err(Error::config("dp_sigma", "must be finite and >= 0"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.compare_strategies.is_empty() {
            return Err(Error::config("compare_strategies", "list at least one strategy"));
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if self.data.clients() != self.clients {
            return Err(Error::config(
                "data.sizes",
                format!(
                    "describes {} clients but clients = {}",
                    self.data.clients(),
                    self.clients
                ),
            ));
        }
        if self.model.input_dim != self.data.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!(
                    "is {} but data.input_dim is {}",
                    self.model.input_dim, self.data.input_dim
                ),
            ));
        }
        if self.strategy == StrategyKind::Smc && self.cluster_size() == 1 && !self.allow_degenerate {
            return Err(Error::config(
                "clusters",
                "smc with single-hospital clusters hands raw weights to the server; set allow_degenerate to override",
            ));
        }
        Ok(())
    }

    /// Switches the number of clients, resizing the data profile to match.
    pub fn with_clients(mut self, k: usize) -> Self {
        let base = DataConfig::with_clients(k);
        self.data.sizes = base.sizes;
        self.data.label_fracs = base.label_fracs;
        self.clients = k;
        self
    }
}
