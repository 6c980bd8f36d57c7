//! Exact conditional and joint-sample regularizers on finite joints.
//!
//! For a discrete joint s(x, y) and a plan π(· | x) over the same y support,
//!
//! * R_joint(π) = Σ_{x,y} s(x, y) MMD²(π(· | x), δ_y)
//! * R_cond(π)  = Σ_x s(x) MMD²(π(· | x), s(· | x))
//!
//! and R_joint − R_cond = Σ_x s(x) [Σ_y s(y|x) k(y, y) − ‖μ_{s(·|x)}‖²], which
//! does not depend on π.

use crate::diffengine::Matrix;
use crate::error::{shape_err, CotError, Result};
use crate::kernels::{mmd2, mmd2_to_dirac, Kernel, WeightedSamples};

/// Probabilities `joint[i, j]` = s(xᵢ, yⱼ) on a finite grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    xs: Vec<f64>,
    support: Matrix,
    joint: Matrix,
}

impl DiscreteJoint {
    pub fn new(xs: Vec<f64>, support: Matrix, joint: Matrix) -> Result<Self> {
        if joint.dim() != (xs.len(), support.nrows()) {
            return shape_err(
                "DiscreteJoint",
                format!(
                    "joint {:?} for {} x, {} y",
                    joint.dim(),
                    xs.len(),
                    support.nrows()
                ),
            );
        }
        if joint.iter().any(|p| p.is_nan() || *p < 0.0) || (joint.sum() - 1.0).abs() > 1e-9 {
            return Err(CotError::InvalidParameter(
                "joint must be a probability table".into(),
            ));
        }
        if joint.rows().into_iter().any(|r| r.sum() <= 0.0) {
            return Err(CotError::InvalidParameter(
                "every x needs positive mass".into(),
            ));
        }
        Ok(Self { xs, support, joint })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn support(&self) -> &Matrix {
        &self.support
    }

    pub fn marginal_x(&self, i: usize) -> f64 {
        self.joint.row(i).sum()
    }

    pub fn conditional(&self, i: usize) -> WeightedSamples {
        let row = self.joint.row(i);
        WeightedSamples::new(self.support.clone(), &row / row.sum()).expect("validated joint")
    }
}

/// Conditional weight rows π(· | x) keyed by x, over a fixed y support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePlan {
    xs: Vec<f64>,
    rows: Matrix,
}

impl DiscretePlan {
    pub fn new(xs: Vec<f64>, rows: Matrix) -> Result<Self> {
        if rows.nrows() != xs.len() {
            return shape_err("DiscretePlan", "one row per x");
        }
        for r in rows.rows() {
            if r.iter().any(|p| p.is_nan() || *p < 0.0) || (r.sum() - 1.0).abs() > 1e-9 {
                return Err(CotError::InvalidParameter(
                    "plan rows must be probability vectors".into(),
                ));
            }
        }
        Ok(Self { xs, rows })
    }

    fn at(&self, x: f64, support: &Matrix) -> Result<WeightedSamples> {
        let i = self
            .xs
            .iter()
            .position(|v| *v == x)
            .ok_or_else(|| CotError::NotInSupport(format!("x = {x}")))?;
        if self.rows.ncols() != support.nrows() {
            return shape_err("DiscretePlan", "plan and joint supports differ");
        }
        WeightedSamples::new(support.clone(), self.rows.row(i).to_owned())
    }
}

pub fn joint_regularizer(plan: &DiscretePlan, s: &DiscreteJoint, kernel: &Kernel) -> Result<f64> {
    let mut total = 0.0;
    for (i, &x) in s.xs.iter().enumerate() {
        let p = plan.at(x, &s.support)?;
        for (j, y) in s.support.rows().into_iter().enumerate() {
            let w = s.joint[[i, j]];
            if w > 0.0 {
                total += w * mmd2_to_dirac(kernel, &p, y)?;
            }
        }
    }
    Ok(total)
}

pub fn conditional_regularizer(
    plan: &DiscretePlan,
    s: &DiscreteJoint,
    kernel: &Kernel,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, &x) in s.xs.iter().enumerate() {
        total += s.marginal_x(i) * mmd2(kernel, &plan.at(x, &s.support)?, &s.conditional(i))?;
    }
    Ok(total)
}

/// [R_joint − R_cond](π) − [R_joint − R_cond](π′); zero up to rounding.
pub fn regularizer_equivalence_gap(
    pi: &DiscretePlan,
    pi_prime: &DiscretePlan,
    s: &DiscreteJoint,
    kernel: &Kernel,
) -> Result<f64> {
    let d = |p: &DiscretePlan| -> Result<f64> {
        Ok(joint_regularizer(p, s, kernel)? - conditional_regularizer(p, s, kernel)?)
    };
    Ok(d(pi)? - d(pi_prime)?)
}
