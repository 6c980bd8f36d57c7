//! Independent ground truths: closed-form 1-D Gaussian W₂, Gaussian
//! barycenters, sorted-sample 1-D OT and Hungarian assignment OT.
//!
//! None of these touch the autodiff engine or the learned models.

use crate::diffengine::Matrix;
use crate::error::{shape_err, CotError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian1D {
    mean: f64,
    var: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(CotError::InvalidParameter(format!("N({mean}, {var})")));
        }
        Ok(Self { mean, var })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }
}

/// W₂²(p, q) = (μ₁ − μ₂)² + (σ₁ − σ₂)².
pub fn gaussian_w2sq(p: Gaussian1D, q: Gaussian1D) -> f64 {
    (p.mean - q.mean).powi(2) + (p.sd() - q.sd()).powi(2)
}

/// Closed-form W₂² between N(4(x−.5), 1) and N(−2(x−.5), 8x+1).
pub fn true_conditional_w2sq(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(CotError::InvalidParameter(format!(
            "x = {x} outside [0, 1]"
        )));
    }
    Ok((6.0 * (x - 0.5)).powi(2) + ((8.0 * x + 1.0).sqrt() - 1.0).powi(2))
}

/// The two conditional laws at x whose W₂² is [`true_conditional_w2sq`].
pub fn converge_conditionals(x: f64) -> (Gaussian1D, Gaussian1D) {
    (
        Gaussian1D {
            mean: 4.0 * (x - 0.5),
            var: 1.0,
        },
        Gaussian1D {
            mean: -2.0 * (x - 0.5),
            var: 8.0 * x + 1.0,
        },
    )
}

/// Weighted W₂ barycenter ρ·p ⊕ (1−ρ)·q of two 1-D Gaussians: quantile
/// functions average, so mean and standard deviation interpolate linearly.
pub fn gaussian_barycenter(p: Gaussian1D, q: Gaussian1D, rho: f64) -> Result<Gaussian1D> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CotError::InvalidParameter(format!(
            "ρ = {rho} outside [0, 1]"
        )));
    }
    let sd = rho * p.sd() + (1.0 - rho) * q.sd();
    Gaussian1D::new(rho * p.mean + (1.0 - rho) * q.mean, sd * sd)
}

/// Barycenter of N(2(x−.5), 1) (weight ρ) and N(−4(x−.5), 4) (weight 1−ρ).
pub fn analytic_barycenter(x: f64, rho: f64) -> Result<Gaussian1D> {
    let s = Gaussian1D::new(2.0 * (x - 0.5), 1.0)?;
    let t = Gaussian1D::new(-4.0 * (x - 0.5), 4.0)?;
    gaussian_barycenter(s, t, rho)
}

/// The equal-weight barycenter with variance 2.5 instead of 2.25, kept so
/// reports can show both readings.
pub fn literal_barycenter(x: f64) -> Gaussian1D {
    Gaussian1D {
        mean: -x + 0.5,
        var: 2.5,
    }
}

pub fn mccann_interpolate(rho: f64, y_source: f64, y_transported: f64) -> f64 {
    rho * y_source + (1.0 - rho) * y_transported
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtCost {
    SqEuclidean,
    Euclidean,
}

impl OtCost {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        match self {
            OtCost::SqEuclidean => sq,
            OtCost::Euclidean => sq.sqrt(),
        }
    }
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CotError::NonFinite("1-D sample".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(s)
}

/// Sorted matching cost (1/m)Σ c(a₍ᵢ₎, b₍ᵢ₎); optimal for convex costs of |a−b|.
pub fn exact_ot_1d(a: &[f64], b: &[f64], cost: OtCost) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err("exact_ot_1d", format!("{} vs {} samples", a.len(), b.len()));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let total: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(u, v)| cost.eval(&[*u], &[*v]))
        .sum();
    Ok(total / a.len() as f64)
}

pub fn empirical_w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    exact_ot_1d(a, b, OtCost::Euclidean)
}

pub const ASSIGNMENT_CAP: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub cost: f64,
    /// Row i of the source is matched to row `permutation[i]` of the target.
    pub permutation: Vec<usize>,
}

impl Assignment {
    /// The coupling matrix with mass 1/n on each matched pair.
    pub fn plan(&self) -> Matrix {
        let n = self.permutation.len();
        let mut p = Matrix::zeros((n, n));
        for (i, &j) in self.permutation.iter().enumerate() {
            p[[i, j]] = 1.0 / n as f64;
        }
        p
    }
}

/// (1/n) Σᵢ c[i, σ(i)], summed in row order.
pub fn assignment_cost(cost: &Matrix, permutation: &[usize]) -> f64 {
    let total: f64 = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    total / permutation.len() as f64
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, O(n³)).
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return shape_err("hungarian", format!("cost {:?} is not square", cost.dim()));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(CotError::NonFinite("assignment cost".into()));
    }
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Exact OT between two equal-size uniform empirical measures (rows of
/// `source` and `target`).
pub fn exact_assignment_ot(source: &Matrix, target: &Matrix, cost: OtCost) -> Result<Assignment> {
    let n = source.nrows();
    if target.nrows() != n || n == 0 || source.ncols() != target.ncols() {
        return shape_err(
            "exact_assignment_ot",
            format!("{:?} vs {:?}", source.dim(), target.dim()),
        );
    }
    if n > ASSIGNMENT_CAP {
        return Err(CotError::InvalidParameter(format!(
            "n = {n} exceeds the cap {ASSIGNMENT_CAP}"
        )));
    }
    let c = Matrix::from_shape_fn((n, n), |(i, j)| {
        cost.eval(
            source.row(i).as_slice().expect("standard layout"),
            target.row(j).as_slice().expect("standard layout"),
        )
    });
    let permutation = hungarian(&c)?;
    Ok(Assignment {
        cost: assignment_cost(&c, &permutation),
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gaussian_w2_examples() {
        let g = |m, v| Gaussian1D::new(m, v).unwrap();
        assert_eq!(gaussian_w2sq(g(0.0, 1.0), g(0.0, 1.0)), 0.0);
        assert_eq!(gaussian_w2sq(g(0.0, 1.0), g(3.0, 1.0)), 9.0);
        assert_eq!(gaussian_w2sq(g(0.0, 1.0), g(0.0, 4.0)), 1.0);
        assert!(Gaussian1D::new(0.0, 0.0).is_err());
    }

    #[test]
    fn conditional_formula_values() {
        assert!((true_conditional_w2sq(0.5).unwrap() - 1.527864).abs() < 1e-6);
        assert!((true_conditional_w2sq(0.75).unwrap() - 4.958497).abs() < 1e-6);
        assert!(true_conditional_w2sq(1.5).is_err());
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let (p, q) = converge_conditionals(x);
            assert!((gaussian_w2sq(p, q) - true_conditional_w2sq(x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn barycenter_endpoints_and_midpoint() {
        let x = 0.3;
        let b1 = analytic_barycenter(x, 1.0).unwrap();
        assert_eq!((b1.mean(), b1.var()), (2.0 * (x - 0.5), 1.0));
        let b0 = analytic_barycenter(x, 0.0).unwrap();
        assert_eq!((b0.mean(), b0.var()), (-4.0 * (x - 0.5), 4.0));
        let mid = analytic_barycenter(0.5, 0.5).unwrap();
        assert_eq!((mid.mean(), mid.sd()), (0.0, 1.5));
        assert!(
            (analytic_barycenter(0.9, 0.5).unwrap().mean() - literal_barycenter(0.9).mean()).abs()
                < 1e-15
        );
    }

    #[test]
    fn mccann_endpoints() {
        assert_eq!(mccann_interpolate(1.0, 2.0, 5.0), 2.0);
        assert_eq!(mccann_interpolate(0.0, 2.0, 5.0), 5.0);
        assert_eq!(mccann_interpolate(0.5, 2.0, 5.0), 3.5);
    }

    #[test]
    fn one_d_examples() {
        assert_eq!(
            exact_ot_1d(&[0.0, 1.0], &[1.0, 2.0], OtCost::SqEuclidean).unwrap(),
            1.0
        );
        assert_eq!(
            exact_ot_1d(&[0.0, 1.0], &[1.0, 0.0], OtCost::Euclidean).unwrap(),
            0.0
        );
        assert_eq!(empirical_w1_1d(&[0.0, 2.0], &[0.5, 2.5]).unwrap(), 0.5);
        assert!(exact_ot_1d(&[0.0], &[1.0, 2.0], OtCost::Euclidean).is_err());
    }

    #[test]
    fn assignment_small_cases() {
        let a = exact_assignment_ot(
            &array![[1.0, 2.0]],
            &array![[0.0, 0.0]],
            OtCost::SqEuclidean,
        )
        .unwrap();
        assert_eq!(a.cost, 5.0);
        assert_eq!(a.permutation, vec![0]);
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let p = hungarian(&c).unwrap();
        assert_eq!(assignment_cost(&c, &p), 5.0 / 3.0);
        let plan = exact_assignment_ot(
            &array![[0.0], [1.0]],
            &array![[1.0], [0.0]],
            OtCost::Euclidean,
        )
        .unwrap()
        .plan();
        assert_eq!(plan, array![[0.0, 0.5], [0.5, 0.0]]);
        assert!(
            exact_assignment_ot(&array![[0.0]], &array![[0.0], [1.0]], OtCost::Euclidean).is_err()
        );
    }
}
