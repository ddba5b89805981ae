//! Run configuration read from a TOML file.
//!
//! ```toml
//! [data]
//! subject = "subject_id"
//! time = "time"
//! outcome = "y"
//! covariates = ["x1", "x2"]
//! modifiers = ["z1", "z2", "z3"]
//!
//! [model]
//! trees = 50
//! tau_scale = 1.0          # or tau = [..] with one entry per coefficient
//! nu = 3.0
//! rho = 0.0
//! max_depth = 32
//! split_prior = { kind = "depth-polynomial", base = 0.95, power = 2.0 }
//! cutpoints = { kind = "continuous" }
//!
//! [chain]
//! iterations = 1500
//! burn = 500
//! chains = 2
//! seed = 0
//! ```
//!
//! Every key is optional. Command-line flags are applied on top of the file
//! before the configuration is resolved into [`Hyperparameters`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::priors::Hyperparameters;
use crate::tree::{Cutpoints, SplitPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub subject: String,
    pub time: Option<String>,
    pub outcome: String,
    /// Empty means every column named `x<digits>`.
    pub covariates: Vec<String>,
    /// Empty means every column named `z<digits>`.
    pub modifiers: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            subject: "subject_id".into(),
            time: None,
            outcome: "y".into(),
            covariates: Vec::new(),
            modifiers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub trees: Option<usize>,
    pub tau: Option<Vec<f64>>,
    pub tau_scale: Option<f64>,
    pub nu: Option<f64>,
    pub rho: Option<f64>,
    pub max_depth: Option<usize>,
    pub split_prior: Option<SplitPrior>,
    pub cutpoints: Option<Cutpoints>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub iterations: Option<usize>,
    pub burn: Option<usize>,
    pub chains: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub chain: ChainSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("bad config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolve against the defaults for `p` covariates.
    pub fn hyperparameters(&self, p: usize) -> Result<Hyperparameters> {
        let m = &self.model;
        let mut h = Hyperparameters::defaults(p);
        if let Some(t) = m.trees {
            if t == 0 {
                return Err(config_err("trees must be positive"));
            }
            h = h.with_trees(t);
        }
        match (&m.tau, m.tau_scale) {
            (Some(_), Some(_)) => return Err(config_err("give either tau or tau_scale, not both")),
            (Some(tau), None) => h.tau = tau.clone(),
            (None, Some(s)) => h = h.with_tau_scale(s),
            (None, None) => {}
        }
        if let Some(v) = m.nu {
            h.nu = v;
        }
        if let Some(v) = m.rho {
            h.rho = v;
        }
        if let Some(v) = m.max_depth {
            h.max_depth = v;
        }
        if let Some(v) = m.split_prior {
            h.split_prior = v;
        }
        if let Some(v) = m.cutpoints {
            h.cutpoints = v;
        }
        let c = &self.chain;
        if let Some(v) = c.iterations {
            h.n_iter = v;
        }
        if let Some(v) = c.burn {
            h.n_burn = v;
        }
        if let Some(v) = c.chains {
            h.n_chains = v;
        }
        if let Some(v) = c.seed {
            h.seed = v;
        }
        h.validate(p)?;
        Ok(h)
    }
}

/// Hex sha256 of the canonical JSON form of a resolved run.
pub fn config_hash<T: Serialize>(resolved: &T) -> String {
    let json = serde_json::to_vec(resolved).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// What a fit depends on: the data declarations and the resolved
/// hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRun<'a> {
    pub data: &'a DataSection,
    pub hyper: &'a Hyperparameters,
}
