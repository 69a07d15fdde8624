// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration files.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use zoomcp::design::{zeta_from_delta, StagePlan};
use zoomcp::harness::QuantileSpec;
use zoomcp::model::{ChangePointModel, ErrorDist, ModelFamily, NoiseScale, NoiseSpec};

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// A malformed or inconsistent configuration; maps to the validation exit code.
#[derive(Debug)]
pub struct ConfigError(String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    #[default]
    Stump,
    TwoLines,
}

impl FamilyName {
    pub fn family(self) -> ModelFamily {
        match self {
            FamilyName::Stump => ModelFamily::STUMP,
            FamilyName::TwoLines => ModelFamily::TWO_LINES,
        }
    }
}

/// Regression model simulated by the `model` oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d0: f64,
    pub beta_l: Vec<f64>,
    pub beta_u: Vec<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub error_dist: ErrorDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub budget: usize,
    #[serde(default)]
    pub family: FamilyName,
    /// Two equal stages with `gamma = 1/2` and `zeta = psi / 2` from `delta` when absent.
    #[serde(default)]
    pub plan: Option<StagePlan>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub quantiles: QuantileSpec,
}

fn default_schema() -> u32 {
    RUN_SCHEMA_VERSION
}

fn default_tau() -> f64 {
    0.05
}

fn default_delta() -> f64 {
    0.001
}

impl RunConfig {
    /// Checks the config and fills in the default plan.
    pub fn resolve(mut self) -> Result<Self> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(ConfigError::new(format!(
                "unsupported schema_version {} (expected {RUN_SCHEMA_VERSION})",
                self.schema_version
            ))
            .into());
        }
        if self.budget == 0 {
            return Err(ConfigError::new("budget must be positive").into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(
                ConfigError::new(format!("tau must lie in (0, 1), got {}", self.tau)).into(),
            );
        }
        if self.plan.is_none() {
            let psi = zeta_from_delta(2, self.delta)?;
            self.plan = Some(StagePlan::two_stage(0.5, 0.5, psi / 2.0)?);
        }
        let plan = self.plan();
        plan.validate()?;
        plan.stage_sizes(self.budget)?;
        if let Some(m) = &self.model {
            self.build_model(m)?;
        }
        Ok(self)
    }

    pub fn plan(&self) -> &StagePlan {
        self.plan.as_ref().expect("plan resolved")
    }

    pub fn build_model(&self, m: &ModelConfig) -> Result<ChangePointModel> {
        if !(m.sigma >= 0.0 && m.sigma.is_finite()) {
            return Err(ConfigError::new(format!(
                "sigma must be finite and non-negative, got {}",
                m.sigma
            ))
            .into());
        }
        let noise = NoiseSpec {
            scale: NoiseScale::Homoscedastic { sigma: m.sigma },
            error_dist: if m.sigma == 0.0 {
                ErrorDist::Zero
            } else {
                m.error_dist
            },
        };
        let eps0 = self.plan.as_ref().map_or(0.0, |p| p.eps0).max(1e-12);
        Ok(ChangePointModel::new(
            m.d0,
            self.family.family(),
            m.beta_l.clone(),
            m.beta_u.clone(),
            noise,
            eps0,
        )?)
    }

    /// Probabilities the quantile table must carry for this run.
    pub fn required_probs(&self) -> Vec<f64> {
        let mut p = self.plan().zeta.clone();
        p.push(self.tau / 2.0);
        p
    }
}
