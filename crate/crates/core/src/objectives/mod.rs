//! COT loss variants and the training loop.
//!
//! Every loss is split in two layers: a `*_terms` function that works on plan
//! tensors already on the tape (generated samples or probability rows), and a
//! model-level wrapper that produces those tensors from bound networks. The
//! first layer is what hand-expanded tests exercise.
//!
//! Conventions shared by all variants: the auxiliary measure over x is the
//! empirical distribution of the source covariates in the batch, and the
//! λ₁ term compares the composed (ψ) marginal with the source samples while
//! the λ₂ term compares the θ marginal with the target samples.

mod cell;
mod explicit;
mod implicit;
mod joint_alt;
mod regularizer;
mod train;

pub use cell::{cot_cell_loss, cot_cell_terms, CellData, CellProblem};
pub use explicit::{
    cot_classification_loss, cot_classification_terms, cot_explicit_loss, cot_explicit_terms,
    cot_prompt_loss, cot_prompt_terms, ClassificationProblem, ExplicitProblem, LabelSpace,
    PromptData, PromptProblem,
};
pub use implicit::{
    cot_implicit_loss, cot_implicit_terms, ImplicitGrid, ImplicitNoise, ImplicitProblem,
};
pub use joint_alt::{
    cot_joint_alt_loss, product_gram, product_mmd2, product_mmd2_var, JointAltProblem,
};
pub use regularizer::{
    conditional_regularizer, joint_regularizer, regularizer_equivalence_gap, DiscreteJoint,
    DiscretePlan,
};
pub use train::{train, write_trace_csv, Adam, EpochRecord, Trainable};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::diffengine::{pairwise_sq_dist, Matrix, Var};
use crate::error::{shape_err, CotError, Result};
use crate::kernels::{Kernel, KernelFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundCost {
    SqEuclidean,
    Cosine,
}

/// Which loss a configuration drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Implicit,
    Explicit,
    Classification,
    Cell,
    Prompt,
    JointAlt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// λ₁, λ₂ as given.
    Fixed,
    /// λ · m^{1/4}, with m the training-set size.
    MQuarter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_schedule: LambdaSchedule,
    pub cost: GroundCost,
    pub kernel: Kernel,
    pub variant: Variant,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Minibatch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Noise draws per step for the inner generated measures; `None` uses
    /// one draw per batch element.
    pub noise_draws: Option<usize>,
    pub seed: u64,
}

impl Default for CotConfig {
    fn default() -> Self {
        Self {
            lambda1: 1000.0,
            lambda2: 1000.0,
            lambda_schedule: LambdaSchedule::Fixed,
            cost: GroundCost::SqEuclidean,
            kernel: Kernel {
                family: KernelFamily::Rbf,
                bandwidth: 1.0,
                normalized: false,
            },
            variant: Variant::Implicit,
            optimizer: AdamConfig::default(),
            epochs: 1000,
            batch_size: None,
            noise_draws: None,
            seed: 0,
        }
    }
}

impl CotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(CotError::InvalidParameter(format!(
                "regularization weights must be nonnegative: {} {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.optimizer.learning_rate.is_nan() || self.optimizer.learning_rate <= 0.0 {
            return Err(CotError::InvalidParameter(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == Some(0) || self.noise_draws == Some(0) {
            return Err(CotError::InvalidParameter(
                "batch and noise sizes must be positive".into(),
            ));
        }
        self.kernel.validate()
    }

    /// Effective (λ₁, λ₂) for a training set of `m` samples.
    pub fn lambdas(&self, m: usize) -> (f64, f64) {
        match self.lambda_schedule {
            LambdaSchedule::Fixed => (self.lambda1, self.lambda2),
            LambdaSchedule::MQuarter => {
                let s = (m as f64).powf(0.25);
                (self.lambda1 * s, self.lambda2 * s)
            }
        }
    }

    /// A copy with the schedule folded into fixed weights for `m` samples.
    pub fn resolved(&self, m: usize) -> Self {
        let (lambda1, lambda2) = self.lambdas(m);
        Self {
            lambda1,
            lambda2,
            lambda_schedule: LambdaSchedule::Fixed,
            ..self.clone()
        }
    }
}

/// Paired samples (xᵢ, yᵢ) from a joint distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDataset {
    x: Matrix,
    y: Matrix,
}

impl JointDataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return shape_err(
                "JointDataset",
                format!("{} x rows vs {} y rows", x.nrows(), y.nrows()),
            );
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(CotError::NonFinite("dataset".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
        }
    }
}

/// Scalar loss plus its named components, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub transport: Var<'t>,
    pub reg1: Var<'t>,
    pub reg2: Option<Var<'t>>,
}

impl<'t> LossTerms<'t> {
    /// total = transport + λ₁·reg1 (+ λ₂·reg2).
    pub fn combine(
        transport: Var<'t>,
        reg1: Var<'t>,
        reg2: Option<Var<'t>>,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        let mut total = transport.add(reg1.scale(lambda1))?;
        if let Some(r2) = reg2 {
            total = total.add(r2.scale(lambda2))?;
        }
        Ok(Self {
            total,
            transport,
            reg1,
            reg2,
        })
    }

    pub fn values(&self) -> (f64, f64, f64, f64) {
        (
            self.total.item(),
            self.transport.item(),
            self.reg1.item(),
            self.reg2.map(|v| v.item()).unwrap_or(0.0),
        )
    }
}

fn row_norms(a: &Matrix) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Pairwise ground cost between the rows of `a` and `b`.
pub fn ground_cost(cost: GroundCost, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return shape_err(
            "ground_cost",
            format!("{} vs {} columns", a.ncols(), b.ncols()),
        );
    }
    match cost {
        GroundCost::SqEuclidean => Ok(pairwise_sq_dist(a, b)),
        GroundCost::Cosine => {
            let (na, nb) = (row_norms(a), row_norms(b));
            if na.iter().chain(nb.iter()).any(|n| *n == 0.0) {
                return Err(CotError::InvalidParameter(
                    "cosine cost of a zero-norm row".into(),
                ));
            }
            let mut out = a.dot(&b.t());
            for ((i, j), v) in out.indexed_iter_mut() {
                *v = 1.0 - *v / (na[i] * nb[j]);
            }
            Ok(out)
        }
    }
}

/// Row-wise cost c(aᵢ, bᵢ) on the graph, n×1.
pub fn paired_cost_var<'t>(cost: GroundCost, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return shape_err("paired_cost", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    match cost {
        GroundCost::SqEuclidean => Ok(a.sub(b)?.square().row_sums()),
        GroundCost::Cosine => {
            let na = a.square().row_sums();
            let nb = b.square().row_sums();
            if na
                .value()
                .iter()
                .chain(nb.value().iter())
                .any(|v| *v == 0.0)
            {
                return Err(CotError::InvalidParameter(
                    "cosine cost of a zero-norm row".into(),
                ));
            }
            let inner = a.mul(b)?.row_sums();
            let cos = inner.mul(na.powf(-0.5))?.mul(nb.powf(-0.5))?;
            Ok(cos.scale(-1.0).add_scalar(1.0))
        }
    }
}

pub(crate) fn ensure_finite(name: &str, v: Var<'_>) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CotError::NonFinite(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tape;
    use ndarray::array;

    #[test]
    fn ground_cost_examples() {
        let sq = GroundCost::SqEuclidean;
        assert_eq!(
            ground_cost(sq, &array![[0.0]], &array![[2.0]]).unwrap()[[0, 0]],
            4.0
        );
        assert_eq!(
            ground_cost(sq, &array![[1.0, 0.0]], &array![[0.0, 1.0]]).unwrap()[[0, 0]],
            2.0
        );
        let c = ground_cost(GroundCost::Cosine, &array![[1.0, 2.0]], &array![[2.0, 4.0]]).unwrap();
        assert!(c[[0, 0]].abs() < 1e-15);
        assert!(ground_cost(GroundCost::Cosine, &array![[0.0, 0.0]], &array![[1.0, 0.0]]).is_err());
        assert!(ground_cost(sq, &array![[0.0]], &array![[1.0, 0.0]]).is_err());
    }

    #[test]
    fn paired_cost_matches_pairwise_diagonal() {
        let a = array![[1.0, 2.0], [0.5, -1.0]];
        let b = array![[0.0, 1.0], [2.0, 2.0]];
        let tape = Tape::new();
        for cost in [GroundCost::SqEuclidean, GroundCost::Cosine] {
            let pc = paired_cost_var(cost, tape.leaf(a.clone()), tape.constant(b.clone())).unwrap();
            let full = ground_cost(cost, &a, &b).unwrap();
            for i in 0..2 {
                assert!((pc.value()[[i, 0]] - full[[i, i]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn config_validation_and_schedule() {
        let mut c = CotConfig::default();
        assert!(c.validate().is_ok());
        c.lambda1 = -1.0;
        assert!(c.validate().is_err());
        let mut c = CotConfig::default();
        c.optimizer.learning_rate = 0.0;
        assert!(c.validate().is_err());

        let mut c = CotConfig {
            lambda1: 2.0,
            lambda2: 3.0,
            ..CotConfig::default()
        };
        assert_eq!(c.lambdas(16), (2.0, 3.0));
        c.lambda_schedule = LambdaSchedule::MQuarter;
        assert_eq!(c.lambdas(16), (4.0, 6.0));
    }

    #[test]
    fn config_json_defaults() {
        let c: CotConfig = serde_json::from_str(r#"{"lambda1": 5.0}"#).unwrap();
        assert_eq!(c.lambda1, 5.0);
        assert_eq!(c.lambda2, 1000.0);
        assert_eq!(c.optimizer.learning_rate, 5e-3);
    }

    #[test]
    fn dataset_checks() {
        assert!(JointDataset::new(array![[1.0], [2.0]], array![[1.0]]).is_err());
        assert!(JointDataset::new(array![[f64::NAN]], array![[1.0]]).is_err());
        let d =
            JointDataset::new(array![[1.0], [2.0], [3.0]], array![[4.0], [5.0], [6.0]]).unwrap();
        let s = d.select(&[2, 0]);
        assert_eq!(s.x(), &array![[3.0], [1.0]]);
        assert_eq!(s.y(), &array![[6.0], [4.0]]);
    }
}
