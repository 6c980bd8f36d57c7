use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CotError, Result};
use crate::kernels::Kernel;
use crate::models::Activation;
use crate::objectives::{AdamConfig, CotConfig, Variant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Converge,
    Barycenter,
    Classify,
    CellToy,
    PromptToy,
    Gradcheck,
    Concentration,
    RegIdentity,
    Regression,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Converge,
        Experiment::Barycenter,
        Experiment::Classify,
        Experiment::CellToy,
        Experiment::PromptToy,
        Experiment::Gradcheck,
        Experiment::Concentration,
        Experiment::RegIdentity,
        Experiment::Regression,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Experiment::Converge => "converge",
            Experiment::Barycenter => "barycenter",
            Experiment::Classify => "classify",
            Experiment::CellToy => "cell-toy",
            Experiment::PromptToy => "prompt-toy",
            Experiment::Gradcheck => "gradcheck",
            Experiment::Concentration => "concentration",
            Experiment::RegIdentity => "reg-identity",
            Experiment::Regression => "regression",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Experiment {
    type Err = CotError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| CotError::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// Network shapes shared by both plan factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub noise_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            noise_dim: 4,
        }
    }
}

/// Evaluation settings; fields not used by an experiment are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub grid_points: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub eval_draws: usize,
    pub rho: f64,
    /// Classification: class-mean separation and class count.
    pub separation: f64,
    pub n_classes: usize,
    /// Held-out evaluation set size.
    pub test_size: usize,
    /// Concentration: resampled datasets per m.
    pub resamples: usize,
    pub delta: f64,
    /// Regularizer identity: random plan pairs.
    pub trials: usize,
    /// Gradient checks: finite-difference step and relative tolerance.
    pub grad_step: f64,
    pub grad_tolerance: f64,
    /// Cell toy: dosages (nM), feature width and shift scale.
    pub doses_nm: Vec<f64>,
    pub cell_dim: usize,
    pub cell_shift: f64,
    /// Prompt toy: prompts, local features per image, feature width.
    pub n_prompts: usize,
    pub local_features: usize,
    pub feature_dim: usize,
    /// Regression observation noise.
    pub noise_sd: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_points: 50,
            grid_lo: 0.05,
            grid_hi: 0.95,
            eval_draws: 500,
            rho: 0.5,
            separation: 6.0,
            n_classes: 3,
            test_size: 600,
            resamples: 200,
            delta: 0.01,
            trials: 50,
            grad_step: 1e-6,
            grad_tolerance: 1e-4,
            doses_nm: vec![10.0, 100.0, 1000.0, 10000.0],
            cell_dim: 2,
            cell_shift: 3.0,
            n_prompts: 4,
            local_features: 6,
            feature_dim: 8,
            noise_sd: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn grid(&self) -> Vec<f64> {
        match self.grid_points {
            0 => Vec::new(),
            1 => vec![0.5 * (self.grid_lo + self.grid_hi)],
            n => (0..n)
                .map(|i| self.grid_lo + (self.grid_hi - self.grid_lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub m: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cot: CotConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Worker threads for independent (m, seed) cells; output does not
    /// depend on it.
    #[serde(default = "default_threads", skip_serializing)]
    pub threads: usize,
    #[serde(default = "default_out", skip_serializing)]
    pub out_dir: PathBuf,
}

fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Tuned defaults per experiment.
    pub fn defaults_for(experiment: Experiment) -> Self {
        let mut cot = CotConfig::default();
        let mut model = ModelConfig::default();
        let eval = EvalConfig::default();
        let (m, seeds) = match experiment {
            Experiment::Converge => {
                cot.epochs = 300;
                cot.batch_size = Some(64);
                cot.noise_draws = Some(32);
                (vec![100, 200, 400, 800], vec![0, 1, 2])
            }
            Experiment::Barycenter => {
                // m=1600 takes 25 steps per epoch; 150 epochs keeps three seeds within budget
                cot.epochs = 150;
                cot.batch_size = Some(64);
                cot.noise_draws = Some(32);
                (vec![100, 200, 400, 800, 1600], vec![0, 1, 2])
            }
            Experiment::Regression => {
                cot.lambda1 = 500.0;
                cot.lambda2 = 500.0;
                cot.kernel = Kernel::rbf(1.0).expect("positive bandwidth");
                cot.epochs = 200;
                cot.batch_size = Some(64);
                cot.noise_draws = Some(32);
                model.noise_dim = 10;
                (vec![400], vec![0, 1, 2])
            }
            Experiment::Classify => {
                cot.variant = Variant::Classification;
                cot.lambda1 = 10.0;
                cot.epochs = 100;
                cot.batch_size = Some(64);
                cot.optimizer = AdamConfig {
                    learning_rate: 1e-2,
                    ..AdamConfig::default()
                };
                model.hidden = vec![16];
                (vec![300], vec![0, 1, 2])
            }
            Experiment::CellToy => {
                cot.variant = Variant::Cell;
                cot.lambda1 = 100.0;
                cot.epochs = 150;
                cot.batch_size = Some(64);
                model.noise_dim = 2;
                (vec![256], vec![0, 1, 2])
            }
            Experiment::PromptToy => {
                cot.variant = Variant::Prompt;
                cot.lambda1 = 10.0;
                cot.cost = crate::objectives::GroundCost::Cosine;
                cot.epochs = 100;
                cot.batch_size = Some(8);
                model.hidden = vec![16];
                (vec![32], vec![0, 1, 2])
            }
            Experiment::Gradcheck => (vec![1], (0..10).collect()),
            Experiment::Concentration => (vec![100, 400], vec![0]),
            Experiment::RegIdentity => (vec![1], vec![0]),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            experiment,
            m,
            seeds,
            cot,
            model,
            eval,
            threads: default_threads(),
            out_dir: default_out(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CotError::InvalidParameter(format!(
                "config schema {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.m.is_empty() || self.seeds.is_empty() || self.m.contains(&0) {
            return Err(CotError::InvalidParameter(
                "m and seed lists must be non-empty and positive".into(),
            ));
        }
        if self.threads == 0 {
            return Err(CotError::InvalidParameter(
                "threads must be positive".into(),
            ));
        }
        if self.eval.eval_draws < 2 || !(0.0..=1.0).contains(&self.eval.rho) {
            return Err(CotError::InvalidParameter(
                "eval_draws ≥ 2 and ρ ∈ [0, 1] required".into(),
            ));
        }
        if !(self.eval.grid_lo >= 0.0
            && self.eval.grid_hi <= 1.0
            && self.eval.grid_lo <= self.eval.grid_hi)
        {
            return Err(CotError::InvalidParameter(
                "evaluation grid must lie in [0, 1]".into(),
            ));
        }
        self.cot.validate()
    }

    /// JSON of the result-affecting fields (excludes threads and output dir).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.tag().parse::<Experiment>().unwrap(), e);
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.tag()));
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn default_grid() {
        let g = EvalConfig::default().grid();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 0.05);
        assert!((g[49] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn json_overrides_and_validation() {
        let cfg = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "experiment": "converge", "m": [100], "seeds": [7],
                "cot": {"epochs": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.cot.epochs, 5);
        assert_eq!(cfg.cot.lambda1, 1000.0);
        assert_eq!(cfg.eval.grid_points, 50);
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 2, "experiment": "converge", "m": [1], "seeds": [0]}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "experiment": "converge", "m": [], "seeds": [0]}"#
        )
        .is_err());
    }

    #[test]
    fn canonical_json_ignores_runtime_fields() {
        let mut a = ExperimentConfig::defaults_for(Experiment::Converge);
        let mut b = a.clone();
        a.threads = 1;
        b.threads = 8;
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.canonical_json(), b.canonical_json());
    }
}
