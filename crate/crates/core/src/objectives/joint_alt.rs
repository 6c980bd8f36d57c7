//! Baseline variant that regularizes joint (x, y) measures instead of the
//! per-covariate conditionals, using a product kernel k_x(x, x′)·k_y(y, y′).
//! One noise pair per sample; no inner average over noise.

use crate::diffengine::{Matrix, Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels::{gram, gram_var, Kernel};
use crate::models::{BoundGenerator, ImplicitGenerator};
use crate::rng::RngStream;

use super::implicit::ImplicitNoise;
use super::train::{subsample, Trainable};
use super::{ensure_finite, paired_cost_var, CotConfig, JointDataset, LossTerms};

/// Gram of the product kernel between joint samples (xa, ya) and (xb, yb).
pub fn product_gram(
    kx: &Kernel,
    ky: &Kernel,
    xa: &Matrix,
    ya: &Matrix,
    xb: &Matrix,
    yb: &Matrix,
) -> Result<Matrix> {
    if xa.nrows() != ya.nrows() || xb.nrows() != yb.nrows() {
        return shape_err("product_gram", "x and y row counts differ");
    }
    Ok(gram(kx, xa, xb)? * gram(ky, ya, yb)?)
}

/// Biased MMD² between two uniform joint empirical measures.
pub fn product_mmd2(kx: &Kernel, ky: &Kernel, a: &JointDataset, b: &JointDataset) -> Result<f64> {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let aa = product_gram(kx, ky, a.x(), a.y(), a.x(), a.y())?.sum() / (n * n);
    let bb = product_gram(kx, ky, b.x(), b.y(), b.x(), b.y())?.sum() / (m * m);
    let ab = product_gram(kx, ky, a.x(), a.y(), b.x(), b.y())?.sum() / (n * m);
    let v = aa + bb - 2.0 * ab;
    Ok(if (-crate::kernels::CLAMP_TOL..0.0).contains(&v) {
        0.0
    } else {
        v
    })
}

/// Graph version with generated `y_gen` paired with fixed `x_gen`.
pub fn product_mmd2_var<'t>(
    kx: &Kernel,
    ky: &Kernel,
    x_gen: &Matrix,
    y_gen: Var<'t>,
    reference: &JointDataset,
) -> Result<Var<'t>> {
    if x_gen.nrows() != y_gen.shape().0 {
        return shape_err("product_mmd2_var", "x and generated y row counts differ");
    }
    let tape = y_gen.tape();
    let (n, m) = (x_gen.nrows() as f64, reference.len() as f64);
    let kxx = tape.constant(gram(kx, x_gen, x_gen)?);
    let kxr = tape.constant(gram(kx, x_gen, reference.x())?);
    let yref = tape.constant(reference.y().clone());
    let aa = gram_var(ky, y_gen, y_gen)?
        .mul(kxx)?
        .sum()
        .scale(1.0 / (n * n));
    let ab = gram_var(ky, y_gen, yref)?
        .mul(kxr)?
        .sum()
        .scale(2.0 / (n * m));
    let bb = product_gram(
        kx,
        ky,
        reference.x(),
        reference.y(),
        reference.x(),
        reference.y(),
    )?
    .sum()
        / (m * m);
    Ok(aa.sub(ab)?.add_scalar(bb).relu())
}

/// `noise` has one row per source sample; `target_noise` one row per target
/// sample (θ noise only).
#[allow(clippy::too_many_arguments)]
pub fn cot_joint_alt_loss<'t>(
    theta: &BoundGenerator<'t>,
    psi: &BoundGenerator<'t>,
    source: &JointDataset,
    target: &JointDataset,
    noise: &ImplicitNoise,
    target_noise: &Matrix,
    x_kernel: &Kernel,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    if noise.len() != source.len() || target_noise.nrows() != target.len() {
        return shape_err("joint_alt loss", "need one noise row per sample");
    }
    let tape = theta.params()[0].tape();
    let xs = tape.constant(source.x().clone());
    let theta_src = theta.sample(xs, &noise.eta_prime)?;
    let psi_src = psi.sample(Var::concat_cols(&[theta_src, xs])?, &noise.eta)?;
    let theta_tgt = theta.sample(tape.constant(target.x().clone()), target_noise)?;
    let transport = paired_cost_var(cfg.cost, theta_src, psi_src)?.mean();
    ensure_finite("transport term", transport)?;
    let reg1 = product_mmd2_var(x_kernel, &cfg.kernel, source.x(), psi_src, source)?;
    ensure_finite("source joint regularizer", reg1)?;
    let reg2 = product_mmd2_var(x_kernel, &cfg.kernel, target.x(), theta_tgt, target)?;
    ensure_finite("target joint regularizer", reg2)?;
    LossTerms::combine(transport, reg1, Some(reg2), cfg.lambda1, cfg.lambda2)
}

#[derive(Clone, Debug)]
pub struct JointAltProblem {
    pub theta: ImplicitGenerator,
    pub psi: ImplicitGenerator,
    pub source: JointDataset,
    pub target: JointDataset,
    pub x_kernel: Kernel,
    pub config: CotConfig,
}

impl JointAltProblem {
    pub fn new(
        theta: ImplicitGenerator,
        psi: ImplicitGenerator,
        source: JointDataset,
        target: JointDataset,
        x_kernel: Kernel,
        config: CotConfig,
    ) -> Result<Self> {
        config.validate()?;
        x_kernel.validate()?;
        let (dx, dy) = (source.x_dim(), source.y_dim());
        if theta.cond_dim() != dx
            || theta.out_dim() != dy
            || psi.cond_dim() != dx + dy
            || psi.out_dim() != dy
        {
            return shape_err("JointAltProblem", "generator widths do not match the data");
        }
        Ok(Self {
            theta,
            psi,
            source,
            target,
            x_kernel,
            config,
        })
    }
}

impl Trainable for JointAltProblem {
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.theta.net_mut().params_mut();
        p.extend(self.psi.net_mut().params_mut());
        p
    }

    fn n_samples(&self) -> usize {
        self.source.len()
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &[usize],
        rng: &mut RngStream,
    ) -> Result<(LossTerms<'t>, Vec<Var<'t>>)> {
        let cfg = self.config.resolved(self.source.len());
        let source = self.source.select(batch);
        let target = self
            .target
            .select(&subsample(rng, self.target.len(), batch.len()));
        let noise = ImplicitNoise::draw(
            rng,
            source.len(),
            self.psi.noise_dim(),
            self.theta.noise_dim(),
        );
        let target_noise = rng.normal_matrix(target.len(), self.theta.noise_dim());
        let theta = self.theta.bind(tape);
        let psi = self.psi.bind(tape);
        let terms = cot_joint_alt_loss(
            &theta,
            &psi,
            &source,
            &target,
            &noise,
            &target_noise,
            &self.x_kernel,
            &cfg,
        )?;
        let mut params = theta.params().to_vec();
        params.extend_from_slice(psi.params());
        Ok((terms, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use ndarray::array;

    fn kernels() -> (Kernel, Kernel) {
        (Kernel::rbf(0.8).unwrap(), Kernel::imq(1.3).unwrap())
    }

    #[test]
    fn product_gram_is_elementwise_product() {
        let (kx, ky) = kernels();
        let (xa, ya) = (array![[0.1], [0.5]], array![[1.0, 2.0], [0.0, -1.0]]);
        let (xb, yb) = (
            array![[0.3], [0.9], [0.2]],
            array![[0.5, 0.5], [2.0, 1.0], [0.0, 0.0]],
        );
        let g = product_gram(&kx, &ky, &xa, &ya, &xb, &yb).unwrap();
        let expected = gram(&kx, &xa, &xb).unwrap() * gram(&ky, &ya, &yb).unwrap();
        assert_eq!(g, expected);
    }

    #[test]
    fn identical_joints_have_zero_mmd() {
        let (kx, ky) = kernels();
        let d = JointDataset::new(array![[0.1], [0.5]], array![[1.0], [2.0]]).unwrap();
        assert_eq!(product_mmd2(&kx, &ky, &d, &d).unwrap(), 0.0);
        let tape = Tape::new();
        let v = product_mmd2_var(&kx, &ky, d.x(), tape.leaf(d.y().clone()), &d).unwrap();
        assert!(v.item().abs() < 1e-15);
    }

    #[test]
    fn two_sample_double_loop() {
        let (kx, ky) = kernels();
        let a = JointDataset::new(array![[0.1], [0.7]], array![[1.0], [-0.5]]).unwrap();
        let b = JointDataset::new(array![[0.4], [0.2]], array![[0.3], [2.0]]).unwrap();
        let k = |i: (f64, f64), j: (f64, f64)| {
            let kxv = (-(i.0 - j.0).powi(2) / (2.0 * 0.8)).exp();
            let kyv = 1.0 / (1.3 + (i.1 - j.1).powi(2)).sqrt();
            kxv * kyv
        };
        let pa: Vec<(f64, f64)> = (0..2).map(|i| (a.x()[[i, 0]], a.y()[[i, 0]])).collect();
        let pb: Vec<(f64, f64)> = (0..2).map(|i| (b.x()[[i, 0]], b.y()[[i, 0]])).collect();
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                expected += (k(pa[i], pa[j]) + k(pb[i], pb[j]) - 2.0 * k(pa[i], pb[j])) / 4.0;
            }
        }
        assert!((product_mmd2(&kx, &ky, &a, &b).unwrap() - expected).abs() < 1e-10);
        let tape = Tape::new();
        let v = product_mmd2_var(&kx, &ky, a.x(), tape.leaf(a.y().clone()), &b).unwrap();
        assert!((v.item() - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_runs_and_is_nonnegative() {
        let theta = ImplicitGenerator::new(1, 1, 1, &[6], Activation::Tanh, 1).unwrap();
        let psi = ImplicitGenerator::new(2, 1, 1, &[6], Activation::Tanh, 2).unwrap();
        let mut r = RngStream::new(0);
        let s = JointDataset::new(r.normal_matrix(3, 1), r.normal_matrix(3, 1)).unwrap();
        let t = JointDataset::new(r.normal_matrix(3, 1), r.normal_matrix(3, 1)).unwrap();
        let noise = ImplicitNoise::draw(&mut r, 3, 1, 1);
        let tn = r.normal_matrix(3, 1);
        let tape = Tape::new();
        let cfg = CotConfig::default();
        let l = cot_joint_alt_loss(
            &theta.bind(&tape),
            &psi.bind(&tape),
            &s,
            &t,
            &noise,
            &tn,
            &Kernel::rbf(1.0).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!(l.total.item() >= 0.0);
        assert!(l.reg2.is_some());
    }
}
