//! JSON run configuration. Every field has a default, and the defaults
//! describe the MNIST experiment; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackerSpec};
use crate::dataset::{TriggerPattern, WeightsMode};
use crate::engine::{AffineSchedule, Aggregation, ClientParams, FederationConfig, RfaParams};
use crate::error::{CrflError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub dataset: DatasetBlock,
    pub federation: FederationBlock,
    pub attack: Option<AttackBlock>,
    pub certify: CertifyBlock,
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetBlock {
    Mnist {
        #[serde(default = "mnist_dir")]
        dir: PathBuf,
        /// Use only the first `train_cap` training images.
        #[serde(default)]
        train_cap: Option<usize>,
    },
    Synthetic {
        n_train: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
}

fn mnist_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

impl Default for DatasetBlock {
    fn default() -> Self {
        DatasetBlock::Mnist {
            dir: mnist_dir(),
            train_cap: None,
        }
    }
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationBlock {
    pub clients: usize,
    pub rounds: usize,
    pub eta: f64,
    pub tau: usize,
    pub batch_size: usize,
    pub rho: AffineSchedule,
    pub sigma: AffineSchedule,
    pub aggregation: Aggregation,
    pub rfa: RfaParams,
    pub weights: WeightsMode,
    pub input_norm_cap: bool,
}

impl Default for FederationBlock {
    fn default() -> Self {
        FederationBlock {
            clients: 20,
            rounds: 100,
            eta: 0.001,
            tau: 30,
            batch_size: 100,
            rho: AffineSchedule {
                slope: 0.1,
                intercept: 2.0,
            },
            sigma: AffineSchedule::constant(0.01),
            aggregation: Aggregation::FedAvg,
            rfa: RfaParams::default(),
            weights: WeightsMode::BySize,
            input_norm_cap: false,
        }
    }
}

impl FederationBlock {
    pub fn build(&self, weights: Vec<f64>, master_seed: u64) -> FederationConfig {
        FederationConfig {
            rounds: self.rounds,
            clients: vec![
                ClientParams {
                    eta: self.eta,
                    tau: self.tau,
                    batch_size: self.batch_size,
                };
                weights.len()
            ],
            weights,
            rho: self.rho,
            sigma: self.sigma,
            aggregation: self.aggregation,
            rfa: self.rfa,
            master_seed,
            input_norm_cap: self.input_norm_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternBlock {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub target_label: usize,
    /// Rescale `values` to this l2 norm; `None` keeps them as given.
    pub magnitude: Option<f64>,
}

impl Default for PatternBlock {
    fn default() -> Self {
        PatternBlock {
            indices: vec![0, 1, 28],
            values: vec![1.0, 1.0, 1.0],
            target_label: 0,
            magnitude: Some(0.1),
        }
    }
}

impl PatternBlock {
    pub fn build(&self) -> Result<TriggerPattern> {
        match self.magnitude {
            Some(m) => TriggerPattern::with_magnitude(
                self.indices.clone(),
                self.values.clone(),
                self.target_label,
                m,
            ),
            None => {
                TriggerPattern::new(self.indices.clone(), self.values.clone(), self.target_label)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBlock {
    /// Attackers are clients `0..attackers`.
    pub attackers: usize,
    pub t_adv: usize,
    pub gamma: f64,
    /// Triggered samples per local batch.
    pub q_b: usize,
    pub pattern: PatternBlock,
    pub relabel: bool,
    pub virtual_benign_scaling: bool,
}

impl Default for AttackBlock {
    fn default() -> Self {
        AttackBlock {
            attackers: 1,
            t_adv: 10,
            gamma: 10.0,
            q_b: 5,
            pattern: PatternBlock::default(),
            relabel: true,
            virtual_benign_scaling: false,
        }
    }
}

impl AttackBlock {
    pub fn build(&self) -> Result<AttackConfig> {
        let pattern = self.pattern.build()?;
        Ok(AttackConfig {
            attackers: (0..self.attackers)
                .map(|client_id| AttackerSpec {
                    client_id,
                    gamma: self.gamma,
                    q_b: self.q_b,
                    pattern: None,
                })
                .collect(),
            t_adv: self.t_adv,
            pattern,
            relabel: self.relabel,
            virtual_benign_scaling: self.virtual_benign_scaling,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestSelection {
    /// The first `test_cap` samples in file order.
    First,
    /// A seeded random subset of size `test_cap`, kept in file order.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyBlock {
    pub sigma_t: f64,
    pub m: usize,
    pub alpha: f64,
    pub r_grid: Vec<f64>,
    pub test_cap: Option<usize>,
    pub test_selection: TestSelection,
}

impl Default for CertifyBlock {
    fn default() -> Self {
        CertifyBlock {
            sigma_t: 0.01,
            m: 1000,
            alpha: 0.001,
            r_grid: (0..=40).map(|k| k as f64 / 20.0).collect(),
            test_cap: None,
            test_selection: TestSelection::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub emit_svg: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: PathBuf::from("out"),
            emit_svg: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CrflError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CrflError::Json(j) => CrflError::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.clients == 0 || f.rounds == 0 || f.tau == 0 || f.batch_size == 0 {
            return Err(CrflError::config(
                "clients, rounds, tau and batch_size must be >= 1",
            ));
        }
        let c = &self.certify;
        if c.m == 0 || !(c.alpha > 0.0 && c.alpha < 1.0) || !(c.sigma_t >= 0.0) {
            return Err(CrflError::config(
                "certify needs m >= 1, alpha in (0, 1) and sigma_t >= 0",
            ));
        }
        if c.r_grid.iter().any(|r| !(*r >= 0.0)) {
            return Err(CrflError::config("r_grid values must be >= 0"));
        }
        if c.test_cap == Some(0) {
            return Err(CrflError::config("test_cap must be >= 1"));
        }
        if let DatasetBlock::Synthetic {
            n_train,
            n_test,
            dim,
            classes,
            separation,
        } = &self.dataset
        {
            if *classes < 2
                || n_train < classes
                || *n_test == 0
                || dim < classes
                || !(*separation > 0.0)
            {
                return Err(CrflError::config(
                    "synthetic data needs classes >= 2, n_train >= classes, n_test >= 1, dim >= classes, separation > 0",
                ));
            }
        }
        if let Some(a) = &self.attack {
            if a.t_adv == 0 || a.t_adv > f.rounds {
                return Err(CrflError::config(format!(
                    "t_adv = {} must be within 1..={}",
                    a.t_adv, f.rounds
                )));
            }
            if a.attackers == 0 || a.attackers > f.clients {
                return Err(CrflError::config(format!(
                    "attackers = {} must be within 1..={}",
                    a.attackers, f.clients
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_mnist_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.federation.clients, 20);
        assert_eq!(cfg.federation.tau, 30);
        assert_eq!(cfg.federation.eta, 0.001);
        assert_eq!(cfg.federation.rho.at(10), 3.0);
        assert_eq!(cfg.certify.m, 1000);
        assert_eq!(cfg.certify.alpha, 0.001);
        assert_eq!(cfg.certify.sigma_t, 0.01);
        assert!(matches!(cfg.dataset, DatasetBlock::Mnist { .. }));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"federation": {"clientz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            attack: Some(AttackBlock::default()),
            ..Default::default()
        };
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let attack = back.attack.unwrap().build().unwrap();
        assert!((attack.pattern.magnitude() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn attack_round_validated() {
        let text = r#"{"federation": {"rounds": 5}, "attack": {"t_adv": 6}}"#;
        assert!(RunConfig::from_json(text).is_err());
    }
}
