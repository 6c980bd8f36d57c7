//! Characteristic kernels, Gram matrices and the biased (V-statistic) MMD².
//!
//! All three families are functions of the squared distance `r = ‖a − b‖²`:
//!
//! | family | k(a, b) |
//! |--------|---------|
//! | RBF    | exp(−r / (2σ²)) |
//! | IMQ    | (σ² + r)^(−1/2) |
//! | IMQ2   | ((1 + r) / σ²)^(−1/2) |
//!
//! The IMQ families are not normalized; `normalized: true` divides by
//! k(a, a) so that every family satisfies k(a, a) = 1.

use ndarray::{Array1, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::diffengine::{pairwise_sq_dist, Matrix, Var};
use crate::error::{shape_err, CotError, Result};

/// Values of MMD² in [−CLAMP_TOL, 0) are reported as 0.
pub const CLAMP_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Imq,
    Imq2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    /// σ² in the formulas above.
    pub bandwidth: f64,
    #[serde(default)]
    pub normalized: bool,
}

impl Kernel {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(CotError::InvalidParameter(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            family,
            bandwidth,
            normalized: false,
        })
    }

    pub fn rbf(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf, bandwidth)
    }

    pub fn imq(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Imq, bandwidth)
    }

    pub fn imq2(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Imq2, bandwidth)
    }

    /// Same family and bandwidth, rescaled so that k(a, a) = 1.
    pub fn normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    /// Bandwidth set to the median pairwise squared distance of `points`.
    pub fn with_median_bandwidth(family: KernelFamily, points: &Matrix) -> Result<Self> {
        Self::new(family, median_sq_distance(points)?)
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.family, self.bandwidth).map(|_| ())
    }

    /// k(a, a) of the raw (unnormalized) formula.
    fn raw_diagonal(&self) -> f64 {
        match self.family {
            KernelFamily::Rbf => 1.0,
            KernelFamily::Imq => self.bandwidth.powf(-0.5),
            KernelFamily::Imq2 => self.bandwidth.sqrt(),
        }
    }

    fn scale(&self) -> f64 {
        if self.normalized {
            1.0 / self.raw_diagonal()
        } else {
            1.0
        }
    }

    /// k(a, a); constant for these translation-invariant families.
    pub fn diagonal(&self) -> f64 {
        self.raw_diagonal() * self.scale()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized || self.family == KernelFamily::Rbf
    }

    /// Kernel value as a function of the squared distance.
    pub fn of_sq_dist(&self, r: f64) -> f64 {
        let s2 = self.bandwidth;
        let raw = match self.family {
            KernelFamily::Rbf => (-r / (2.0 * s2)).exp(),
            KernelFamily::Imq => (s2 + r).powf(-0.5),
            KernelFamily::Imq2 => ((1.0 + r) / s2).powf(-0.5),
        };
        raw * self.scale()
    }

    pub fn eval(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        let r: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.of_sq_dist(r)
    }

    /// Maps a node of squared distances to kernel values on the graph.
    pub fn apply_var<'t>(&self, sq_dist: Var<'t>) -> Var<'t> {
        let s2 = self.bandwidth;
        let raw = match self.family {
            KernelFamily::Rbf => sq_dist.scale(-1.0 / (2.0 * s2)).exp(),
            KernelFamily::Imq => sq_dist.add_scalar(s2).powf(-0.5),
            KernelFamily::Imq2 => sq_dist.add_scalar(1.0).scale(1.0 / s2).powf(-0.5),
        };
        if self.normalized {
            raw.scale(self.scale())
        } else {
            raw
        }
    }
}

/// Median of the pairwise squared distances over distinct pairs.
pub fn median_sq_distance(points: &Matrix) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(CotError::InvalidParameter(
            "median bandwidth needs at least two points".into(),
        ));
    }
    let d = pairwise_sq_dist(points, points);
    let mut vals: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            vals.push(d[[i, j]]);
        }
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    let mid = vals.len() / 2;
    let med = if vals.len().is_multiple_of(2) {
        0.5 * (vals[mid - 1] + vals[mid])
    } else {
        vals[mid]
    };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(CotError::InvalidParameter(
            "median pairwise distance is zero".into(),
        ))
    }
}

/// Points with probability weights: a finitely supported measure.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSamples {
    points: Matrix,
    weights: Array1<f64>,
}

impl WeightedSamples {
    pub fn new(points: Matrix, weights: Array1<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(CotError::InvalidParameter("empty measure".into()));
        }
        if weights.len() != n {
            return shape_err(
                "WeightedSamples",
                format!("{n} points but {} weights", weights.len()),
            );
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(CotError::InvalidParameter("negative weight".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CotError::InvalidParameter(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Matrix) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(CotError::InvalidParameter("empty measure".into()));
        }
        Ok(Self {
            points,
            weights: Array1::from_elem(n, 1.0 / n as f64),
        })
    }

    pub fn dirac(point: ArrayView1<'_, f64>) -> Self {
        Self {
            points: point.to_owned().insert_axis(Axis(0)),
            weights: Array1::ones(1),
        }
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Gram matrix with entry (i, j) = k(Aᵢ, Bⱼ).
pub fn gram(kernel: &Kernel, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kernel.validate()?;
    if a.ncols() != b.ncols() {
        return shape_err("gram", format!("{} vs {} columns", a.ncols(), b.ncols()));
    }
    Ok(pairwise_sq_dist(a, b).mapv(|r| kernel.of_sq_dist(r)))
}

fn clamp(v: f64) -> f64 {
    if (-CLAMP_TOL..0.0).contains(&v) {
        0.0
    } else {
        v
    }
}

/// Biased MMD² aᵀK_PP a + bᵀK_QQ b − 2aᵀK_PQ b.
pub fn mmd2(kernel: &Kernel, p: &WeightedSamples, q: &WeightedSamples) -> Result<f64> {
    if p.dim() != q.dim() {
        return shape_err("mmd2", format!("dimension {} vs {}", p.dim(), q.dim()));
    }
    let (a, b) = (p.weights(), q.weights());
    let kpp = gram(kernel, p.points(), p.points())?;
    let kqq = gram(kernel, q.points(), q.points())?;
    let kpq = gram(kernel, p.points(), q.points())?;
    let v = a.dot(&kpp.dot(a)) + b.dot(&kqq.dot(b)) - 2.0 * a.dot(&kpq.dot(b));
    Ok(clamp(v))
}

/// MMD² between `p` and the Dirac measure at `y`.
pub fn mmd2_to_dirac(kernel: &Kernel, p: &WeightedSamples, y: ArrayView1<'_, f64>) -> Result<f64> {
    if p.dim() != y.len() {
        return shape_err(
            "mmd2_to_dirac",
            format!("dimension {} vs {}", p.dim(), y.len()),
        );
    }
    let a = p.weights();
    let kpp = gram(kernel, p.points(), p.points())?;
    let yrow = y.to_owned().insert_axis(Axis(0));
    let kpy = gram(kernel, p.points(), &yrow)?.column(0).to_owned();
    let v = a.dot(&kpp.dot(a)) + kernel.diagonal() - 2.0 * a.dot(&kpy);
    Ok(clamp(v))
}

/// Gram matrix on the graph.
pub fn gram_var<'t>(kernel: &Kernel, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    kernel.validate()?;
    Ok(kernel.apply_var(a.sq_dist(b)?))
}

/// MMD² between the uniform measure on the rows of `generated` and a fixed
/// weighted measure, as a 1×1 node.
pub fn mmd2_uniform_var<'t>(
    kernel: &Kernel,
    generated: Var<'t>,
    target: &WeightedSamples,
) -> Result<Var<'t>> {
    let tape = generated.tape();
    let (n, d) = generated.shape();
    if d != target.dim() {
        return shape_err(
            "mmd2_uniform_var",
            format!("dimension {d} vs {}", target.dim()),
        );
    }
    let self_term = gram_var(kernel, generated, generated)?.mean();
    let tgt = tape.constant(target.points().clone());
    let b = target.weights().clone().insert_axis(Axis(1));
    let cross = gram_var(kernel, generated, tgt)?
        .matmul(tape.constant(b))?
        .sum()
        .scale(2.0 / n as f64);
    let w = target.weights();
    let kqq = gram(kernel, target.points(), target.points())?;
    let const_term = w.dot(&kqq.dot(w));
    // relu clamps the tiny negative values cancellation can leave behind
    Ok(self_term.sub(cross)?.add_scalar(const_term).relu())
}

/// MMD² between the uniform measure on the rows of `generated` and δ_y.
pub fn mmd2_uniform_to_dirac_var<'t>(
    kernel: &Kernel,
    generated: Var<'t>,
    y: ArrayView1<'_, f64>,
) -> Result<Var<'t>> {
    let tape = generated.tape();
    let (n, d) = generated.shape();
    if d != y.len() {
        return shape_err(
            "mmd2_uniform_to_dirac_var",
            format!("dimension {d} vs {}", y.len()),
        );
    }
    let self_term = gram_var(kernel, generated, generated)?.mean();
    let yrow = tape.constant(y.to_owned().insert_axis(Axis(0)));
    let cross = gram_var(kernel, generated, yrow)?
        .sum()
        .scale(2.0 / n as f64);
    Ok(self_term.sub(cross)?.add_scalar(kernel.diagonal()).relu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tape;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn gram_examples() {
        let k = Kernel::rbf(1.0).unwrap();
        assert_eq!(
            gram(&k, &array![[0.0]], &array![[0.0]]).unwrap()[[0, 0]],
            1.0
        );

        let k = Kernel::rbf(0.5).unwrap();
        let g = gram(&k, &array![[0.0]], &array![[1.0]]).unwrap();
        close(g[[0, 0]], (-1.0f64).exp(), 1e-15);
        close(g[[0, 0]], 0.367879, 1e-6);

        let k = Kernel::imq(1.0).unwrap();
        assert_eq!(
            gram(&k, &array![[0.0]], &array![[0.0]]).unwrap()[[0, 0]],
            1.0
        );
    }

    #[test]
    fn gram_errors() {
        let k = Kernel::rbf(1.0).unwrap();
        assert!(gram(&k, &array![[0.0, 1.0]], &array![[0.0]]).is_err());
        assert!(Kernel::rbf(0.0).is_err());
        assert!(Kernel::imq(-1.0).is_err());
        let bad = Kernel {
            family: KernelFamily::Rbf,
            bandwidth: -2.0,
            normalized: false,
        };
        assert!(gram(&bad, &array![[0.0]], &array![[0.0]]).is_err());
    }

    #[test]
    fn mmd2_examples() {
        let k = Kernel::rbf(0.5).unwrap();
        let two = WeightedSamples::uniform(array![[0.0], [1.0]]).unwrap();
        assert_eq!(mmd2(&k, &two, &two).unwrap(), 0.0);

        let d0 = WeightedSamples::dirac(array![0.0].view());
        let d1 = WeightedSamples::dirac(array![1.0].view());
        close(
            mmd2(&k, &d0, &d1).unwrap(),
            2.0 - 2.0 * (-1.0f64).exp(),
            1e-14,
        );
        close(mmd2(&k, &d0, &d1).unwrap(), 1.264241, 1e-6);
        assert_eq!(mmd2(&k, &d0, &d0).unwrap(), 0.0);
    }

    #[test]
    fn mmd2_to_dirac_examples() {
        let k = Kernel::rbf(0.5).unwrap();
        let y = array![1.0];
        let p = WeightedSamples::dirac(y.view());
        assert_eq!(mmd2_to_dirac(&k, &p, y.view()).unwrap(), 0.0);

        let p = WeightedSamples::uniform(array![[0.0], [2.0]]).unwrap();
        let e = |r: f64| (-r).exp();
        let expected = 1.0 + 0.25 * (2.0 + 2.0 * e(4.0)) - 2.0 * e(1.0);
        let got = mmd2_to_dirac(&k, &p, y.view()).unwrap();
        close(got, expected, 1e-14);
        close(got, 0.773399, 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let k = Kernel::rbf(1.0).unwrap();
        let p = WeightedSamples::uniform(array![[0.0, 1.0]]).unwrap();
        let q = WeightedSamples::uniform(array![[0.0]]).unwrap();
        assert!(mmd2(&k, &p, &q).is_err());
        assert!(mmd2_to_dirac(&k, &p, array![1.0].view()).is_err());
    }

    #[test]
    fn weighted_samples_validation() {
        assert!(WeightedSamples::new(array![[0.0], [1.0]], array![0.5, 0.6]).is_err());
        assert!(WeightedSamples::new(array![[0.0], [1.0]], array![1.5, -0.5]).is_err());
        assert!(WeightedSamples::new(array![[0.0]], array![0.5, 0.5]).is_err());
        assert!(WeightedSamples::uniform(Matrix::zeros((0, 1))).is_err());
    }

    #[test]
    fn normalized_imq_families() {
        for fam in [KernelFamily::Imq, KernelFamily::Imq2] {
            let k = Kernel::new(fam, 3.0).unwrap().normalized();
            close(k.of_sq_dist(0.0), 1.0, 1e-15);
            assert!(k.of_sq_dist(2.0) < 1.0);
        }
        // raw IMQ is not normalized
        let raw = Kernel::imq(4.0).unwrap();
        close(raw.diagonal(), 0.5, 1e-15);
    }

    #[test]
    fn imq2_formula() {
        let k = Kernel::imq2(2.0).unwrap();
        close(k.of_sq_dist(3.0), ((1.0 + 3.0) / 2.0f64).powf(-0.5), 1e-15);
    }

    #[test]
    fn median_bandwidth() {
        let pts = array![[0.0], [1.0], [3.0]];
        // squared distances 1, 9, 4
        close(median_sq_distance(&pts).unwrap(), 4.0, 0.0);
        let k = Kernel::with_median_bandwidth(KernelFamily::Rbf, &pts).unwrap();
        assert_eq!(k.bandwidth, 4.0);
        assert!(median_sq_distance(&array![[1.0]]).is_err());
    }

    #[test]
    fn graph_mmd_matches_numeric() {
        let k = Kernel::imq(1.5).unwrap();
        let gen = array![[0.1, 0.2], [1.0, -0.3], [0.4, 0.9]];
        let tgt = WeightedSamples::new(array![[0.0, 0.0], [1.0, 1.0]], array![0.3, 0.7]).unwrap();
        let tape = Tape::new();
        let v = mmd2_uniform_var(&k, tape.leaf(gen.clone()), &tgt)
            .unwrap()
            .item();
        let p = WeightedSamples::uniform(gen.clone()).unwrap();
        close(v, mmd2(&k, &p, &tgt).unwrap(), 1e-12);

        let y = array![0.5, 0.5];
        let v = mmd2_uniform_to_dirac_var(&k, tape.leaf(gen), y.view())
            .unwrap()
            .item();
        close(v, mmd2_to_dirac(&k, &p, y.view()).unwrap(), 1e-12);
    }
}
