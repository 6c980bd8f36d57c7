//! Reproducible samplers for the synthetic settings: conditional Gaussians
//! with Beta covariates, Gaussian-blob classification, dosage-shifted cell
//! populations, a 1-D regression toy, and prompt/visual feature clouds.
//!
//! Everything draws from an explicit [`RngStream`]; there is no global RNG.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffengine::Matrix;
use crate::error::{CotError, Result};
use crate::objectives::{CellData, JointDataset, PromptData};
use crate::rng::RngStream;

/// Gamma(shape, 1) by Marsaglia–Tsang; shapes below 1 use the
/// U^{1/a} boost.
pub fn sample_gamma(rng: &mut RngStream, shape: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(CotError::InvalidParameter(format!("gamma shape {shape}")));
    }
    if shape < 1.0 {
        let g = sample_gamma(rng, shape + 1.0)?;
        return Ok(g * rng.uniform_open().powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let z = rng.normal();
        let v = 1.0 + c * z;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        if u < 1.0 - 0.0331 * z.powi(4) || u.ln() < 0.5 * z * z + d * (1.0 - v + v.ln()) {
            return Ok(d * v);
        }
    }
}

pub fn sample_beta(rng: &mut RngStream, alpha: f64, beta: f64, m: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(CotError::InvalidParameter(format!("Beta({alpha}, {beta})")));
    }
    (0..m)
        .map(|_| {
            let a = sample_gamma(rng, alpha)?;
            let b = sample_gamma(rng, beta)?;
            Ok(a / (a + b))
        })
        .collect()
}

/// x ~ Beta(α, β), y | x ~ N(μ(x), v(x)) with affine μ and floored affine v.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussianSpec {
    pub alpha: f64,
    pub beta: f64,
    pub mean_slope: f64,
    pub mean_intercept: f64,
    pub var_slope: f64,
    pub var_intercept: f64,
    pub var_floor: f64,
}

impl ConditionalGaussianSpec {
    /// Mean a(x − 0.5), variance v₀ + v₁x.
    pub fn centered(alpha: f64, beta: f64, a: f64, v0: f64, v1: f64) -> Self {
        Self {
            alpha,
            beta,
            mean_slope: a,
            mean_intercept: -0.5 * a,
            var_slope: v1,
            var_intercept: v0,
            var_floor: 1e-6,
        }
    }

    /// Source of the conditional-distance experiment: Beta(2,4), N(4(x−.5), 1).
    pub fn converge_source() -> Self {
        Self::centered(2.0, 4.0, 4.0, 1.0, 0.0)
    }

    /// Target of the conditional-distance experiment: Beta(4,2), N(−2(x−.5), 8x+1).
    pub fn converge_target() -> Self {
        Self::centered(4.0, 2.0, -2.0, 1.0, 8.0)
    }

    /// First barycenter law: Beta(2,4), N(2(x−.5), 1).
    pub fn barycenter_first() -> Self {
        Self::centered(2.0, 4.0, 2.0, 1.0, 0.0)
    }

    /// Second barycenter law: Beta(4,2), N(−4(x−.5), 4).
    pub fn barycenter_second() -> Self {
        Self::centered(4.0, 2.0, -4.0, 4.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.alpha,
            self.beta,
            self.mean_slope,
            self.mean_intercept,
            self.var_slope,
            self.var_intercept,
            self.var_floor,
        ];
        if vals.iter().any(|v| !v.is_finite()) || !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(CotError::InvalidParameter(
                "conditional Gaussian spec".into(),
            ));
        }
        if self.var_floor.is_nan() || self.var_floor <= 0.0 {
            return Err(CotError::InvalidParameter(
                "variance floor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn mean(&self, x: f64) -> f64 {
        self.mean_slope * x + self.mean_intercept
    }

    pub fn variance(&self, x: f64) -> f64 {
        (self.var_slope * x + self.var_intercept).max(self.var_floor)
    }

    /// `n` draws from y | x.
    pub fn sample_at(&self, rng: &mut RngStream, x: f64, n: usize) -> Vec<f64> {
        let (mu, sd) = (self.mean(x), self.variance(x).sqrt());
        (0..n).map(|_| mu + sd * rng.normal()).collect()
    }
}

pub fn gen_conditional_gaussian(
    rng: &mut RngStream,
    spec: &ConditionalGaussianSpec,
    m: usize,
) -> Result<JointDataset> {
    spec.validate()?;
    let xs = sample_beta(rng, spec.alpha, spec.beta, m)?;
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| spec.mean(x) + spec.variance(x).sqrt() * rng.normal())
        .collect();
    JointDataset::new(column(xs), column(ys))
}

fn column(v: Vec<f64>) -> Matrix {
    let n = v.len();
    Matrix::from_shape_vec((n, 1), v).expect("length matches")
}

/// Blob means for `n_classes` classes, pairwise distance `separation`: scaled
/// standard basis vectors in R^{n_classes}.
pub fn blob_means(n_classes: usize, separation: f64) -> Matrix {
    Matrix::eye(n_classes) * (separation / 2f64.sqrt())
}

/// Balanced Gaussian blobs (unit covariance) with one-hot labels; class of
/// row i is i mod n_classes.
pub fn gen_toy_classification(
    rng: &mut RngStream,
    n_classes: usize,
    m: usize,
    separation: f64,
) -> Result<JointDataset> {
    if n_classes < 2 {
        return Err(CotError::InvalidParameter(
            "need at least two classes".into(),
        ));
    }
    if separation.is_nan() || separation < 0.0 {
        return Err(CotError::InvalidParameter(
            "separation must be nonnegative".into(),
        ));
    }
    let means = blob_means(n_classes, separation);
    let mut x = rng.normal_matrix(m, n_classes);
    let mut y = Matrix::zeros((m, n_classes));
    for i in 0..m {
        let c = i % n_classes;
        let mut row = x.row_mut(i);
        row += &means.row(c);
        y[[i, c]] = 1.0;
    }
    JointDataset::new(x, y)
}

/// Synthetic dose-response populations.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCell {
    pub data: CellData,
    /// Known translation applied at each dosage.
    pub shifts: Vec<Vec<f64>>,
}

/// Dosage in nM to the scalar condition log10(dose)/4, so 10⁴ nM maps to 1.
pub fn dosage_condition(dose_nm: f64) -> f64 {
    dose_nm.log10() / 4.0
}

/// Unperturbed cells ~ N(0, I_d); cells at condition x_q are the same law
/// shifted by `scale · x_q · u` with u = (1, …, 1)/√d.
pub fn gen_toy_cell(
    rng: &mut RngStream,
    doses_nm: &[f64],
    m_per_level: usize,
    d: usize,
    scale: f64,
) -> Result<ToyCell> {
    if d == 0 || m_per_level == 0 || doses_nm.is_empty() {
        return Err(CotError::InvalidParameter(
            "need d ≥ 1, m ≥ 1 and a dosage".into(),
        ));
    }
    if doses_nm.iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(CotError::InvalidParameter(
            "dosages must be positive".into(),
        ));
    }
    let unit = 1.0 / (d as f64).sqrt();
    let unperturbed = rng.normal_matrix(m_per_level, d);
    let mut dosages = Vec::new();
    let mut perturbed = Vec::new();
    let mut shifts = Vec::new();
    for &dose in doses_nm {
        let x = dosage_condition(dose);
        let shift = vec![scale * x * unit; d];
        let mut p = rng.normal_matrix(m_per_level, d);
        for mut row in p.rows_mut() {
            row.iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
        }
        dosages.push(x);
        perturbed.push(p);
        shifts.push(shift);
    }
    Ok(ToyCell {
        data: CellData::new(unperturbed, dosages, perturbed)?,
        shifts,
    })
}

/// x ~ U(0, 1), y = sin(2πx) + noise_sd · z.
pub fn gen_toy_regression(rng: &mut RngStream, m: usize, noise_sd: f64) -> Result<JointDataset> {
    if noise_sd.is_nan() || noise_sd < 0.0 {
        return Err(CotError::InvalidParameter(
            "noise sd must be nonnegative".into(),
        ));
    }
    let xs: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
    let ys = xs
        .iter()
        .map(|x| (2.0 * std::f64::consts::PI * x).sin() + noise_sd * rng.normal())
        .collect();
    JointDataset::new(column(xs), column(ys))
}

/// N prompt directions in R^d and K images of M local features, each local
/// feature a noisy copy of a randomly chosen prompt direction.
pub fn gen_toy_prompt(
    rng: &mut RngStream,
    n_prompts: usize,
    images: usize,
    local: usize,
    d: usize,
    noise_sd: f64,
) -> Result<PromptData> {
    let prompts = rng.normal_matrix(n_prompts, d);
    let imgs = (0..images)
        .map(|_| {
            let mut v = rng.normal_matrix(local, d) * noise_sd;
            for mut row in v.rows_mut() {
                let p = rng.below(n_prompts);
                row += &prompts.row(p);
            }
            v
        })
        .collect();
    PromptData::new(prompts, imgs)
}

/// Headered CSV: x_0..x_{dx−1}, y_0..y_{dy−1}.
pub fn write_dataset_csv(path: &Path, data: &JointDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..data.x_dim())
        .map(|i| format!("x_{i}"))
        .chain((0..data.y_dim()).map(|i| format!("y_{i}")))
        .collect();
    w.write_record(&header)?;
    for (x, y) in data.x().rows().into_iter().zip(data.y().rows()) {
        w.write_record(x.iter().chain(y.iter()).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<JointDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let dx = header.iter().filter(|h| h.starts_with("x_")).count();
    let dy = header.iter().filter(|h| h.starts_with("y_")).count();
    let expected: Vec<String> = (0..dx)
        .map(|i| format!("x_{i}"))
        .chain((0..dy).map(|i| format!("y_{i}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(CotError::InvalidParameter(format!(
            "unexpected dataset header {header:?}"
        )));
    }
    let (mut xs, mut ys, mut n) = (Vec::new(), Vec::new(), 0);
    for rec in r.records() {
        let rec = rec?;
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| CotError::InvalidParameter(format!("bad number {field:?}")))?;
            if i < dx {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        n += 1;
    }
    JointDataset::new(
        Matrix::from_shape_vec((n, dx), xs)
            .map_err(|e| CotError::InvalidParameter(e.to_string()))?,
        Matrix::from_shape_vec((n, dy), ys)
            .map_err(|e| CotError::InvalidParameter(e.to_string()))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn beta_means() {
        let mut r = RngStream::new(11);
        for (a, b) in [(1.0, 1.0), (2.0, 4.0), (0.5, 0.7)] {
            let v = sample_beta(&mut r, a, b, 100_000).unwrap();
            let mu = a / (a + b);
            let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
            let se = (var / 1e5).sqrt();
            assert!(
                (mean(&v) - mu).abs() < 3.0 * se,
                "Beta({a},{b}) mean {}",
                mean(&v)
            );
            assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
        assert!(sample_beta(&mut r, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn gamma_mean_and_variance() {
        let mut r = RngStream::new(5);
        for shape in [0.3, 1.0, 4.5] {
            let v: Vec<f64> = (0..50_000)
                .map(|_| sample_gamma(&mut r, shape).unwrap())
                .collect();
            let m = mean(&v);
            assert!(
                (m - shape).abs() < 4.0 * (shape / 5e4).sqrt(),
                "shape {shape}: {m}"
            );
        }
    }

    #[test]
    fn conditional_gaussian_centered_at_half() {
        let mut r = RngStream::new(3);
        let spec = ConditionalGaussianSpec::converge_source();
        let d = gen_conditional_gaussian(&mut r, &spec, 100_000).unwrap();
        let bin: Vec<f64> = d
            .x()
            .iter()
            .zip(d.y().iter())
            .filter(|(x, _)| (**x - 0.5).abs() < 0.01)
            .map(|(_, y)| *y)
            .collect();
        let se = (1.0 / bin.len() as f64).sqrt();
        // within the bin the mean drifts by at most 4 × 0.01
        assert!(mean(&bin).abs() < 3.0 * se + 0.04, "{}", mean(&bin));

        let flat = ConditionalGaussianSpec::centered(2.0, 2.0, 0.0, 1.0, 0.0);
        let d = gen_conditional_gaussian(&mut r, &flat, 100_000).unwrap();
        assert!(d.y().mean().unwrap().abs() < 0.02);
    }

    #[test]
    fn variance_floor_is_respected() {
        let spec = ConditionalGaussianSpec::centered(1.0, 1.0, 0.0, -1.0, 0.5);
        for i in 0..=100 {
            assert!(spec.variance(i as f64 / 100.0) > 0.0);
        }
        assert_eq!(
            ConditionalGaussianSpec::converge_target().variance(0.5),
            5.0
        );
    }

    #[test]
    fn blobs_have_requested_separation() {
        let m = blob_means(3, 4.0);
        for i in 0..3 {
            for j in 0..i {
                let d = (&m.row(i) - &m.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((d - 4.0).abs() < 1e-12);
            }
        }
        let mut r = RngStream::new(0);
        let d = gen_toy_classification(&mut r, 3, 30, 4.0).unwrap();
        assert_eq!(d.y().sum(), 30.0);
        assert_eq!(d.y().sum_axis(ndarray::Axis(0)).to_vec(), vec![10.0; 3]);
    }

    #[test]
    fn cell_shift_is_recoverable() {
        let mut r = RngStream::new(8);
        let toy = gen_toy_cell(&mut r, &[10.0, 10_000.0], 20_000, 2, 3.0).unwrap();
        assert_eq!(toy.data.perturbed()[0].nrows(), 20_000);
        assert_eq!(toy.data.dosages(), &[0.25, 1.0]);
        for (p, s) in toy.data.perturbed().iter().zip(&toy.shifts) {
            let mu = p.mean_axis(ndarray::Axis(0)).unwrap();
            for (a, b) in mu.iter().zip(s) {
                assert!((a - b).abs() < 3.0 / (20_000f64).sqrt());
            }
        }
        let zero = gen_toy_cell(&mut r, &[100.0], 5, 3, 0.0).unwrap();
        assert!(zero.shifts[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_toy_regression(&mut RngStream::new(4), 50, 0.1).unwrap();
        let b = gen_toy_regression(&mut RngStream::new(4), 50, 0.1).unwrap();
        assert_eq!(a, b);
        let p = gen_toy_prompt(&mut RngStream::new(1), 3, 2, 4, 5, 0.1).unwrap();
        assert_eq!(
            p,
            gen_toy_prompt(&mut RngStream::new(1), 3, 2, 4, 5, 0.1).unwrap()
        );
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = gen_toy_classification(&mut RngStream::new(2), 2, 7, 1.5).unwrap();
        write_dataset_csv(&path, &d).unwrap();
        assert_eq!(read_dataset_csv(&path).unwrap(), d);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_0,x_1,y_0,y_1\n"));
    }
}
