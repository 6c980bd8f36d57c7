//! Implicit-model COT estimator.
//!
//! With n noise pairs (ηⱼ, η′ⱼ) and a batch of B covariates, the plan is
//! sampled on a B×n grid, row `i*n + j` holding the draw for (xᵢ, ηⱼ, η′ⱼ):
//!
//! * θ-samples  y(xᵢ, η′ⱼ; θ)
//! * ψ-samples  y(xᵢ, ηⱼ, η′ⱼ; θ, ψ) = ψ(y(xᵢ, η′ⱼ; θ), xᵢ, ηⱼ)
//!
//! The transport term averages c(θ-sample, ψ-sample) over the whole source
//! grid. The λ₁ term compares, for each source point, the n ψ-samples at xᵢ
//! with δ_{yᵢ}; the λ₂ term compares the n θ-samples at x′ᵢ with δ_{y′ᵢ}.

use crate::diffengine::{Matrix, Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels::mmd2_uniform_to_dirac_var;
use crate::models::{BoundGenerator, ImplicitGenerator};
use crate::rng::RngStream;

use super::train::{subsample, Trainable};
use super::{ensure_finite, paired_cost_var, CotConfig, JointDataset, LossTerms};

/// One step's noise: `eta` feeds ψ, `eta_prime` feeds θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitNoise {
    pub eta: Matrix,
    pub eta_prime: Matrix,
}

impl ImplicitNoise {
    pub fn draw(rng: &mut RngStream, draws: usize, psi_noise: usize, theta_noise: usize) -> Self {
        Self {
            eta: rng.normal_matrix(draws, psi_noise),
            eta_prime: rng.normal_matrix(draws, theta_noise),
        }
    }

    pub fn len(&self) -> usize {
        self.eta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Each row of `x` repeated `times` times, consecutively.
pub(crate) fn repeat_rows(x: &Matrix, times: usize) -> Matrix {
    let mut out = Matrix::zeros((x.nrows() * times, x.ncols()));
    for (i, row) in x.rows().into_iter().enumerate() {
        for j in 0..times {
            out.row_mut(i * times + j).assign(&row);
        }
    }
    out
}

/// The whole of `m` stacked `times` times.
pub(crate) fn tile_rows(m: &Matrix, times: usize) -> Matrix {
    let mut out = Matrix::zeros((m.nrows() * times, m.ncols()));
    for t in 0..times {
        out.slice_mut(ndarray::s![t * m.nrows()..(t + 1) * m.nrows(), ..])
            .assign(m);
    }
    out
}

/// Generated samples on the covariate × noise grid.
#[derive(Clone, Copy, Debug)]
pub struct ImplicitGrid<'t> {
    pub theta_source: Var<'t>,
    pub psi_source: Var<'t>,
    pub theta_target: Var<'t>,
    pub draws: usize,
}

impl<'t> ImplicitGrid<'t> {
    pub fn sample(
        theta: &BoundGenerator<'t>,
        psi: &BoundGenerator<'t>,
        source_x: &Matrix,
        target_x: &Matrix,
        noise: &ImplicitNoise,
    ) -> Result<Self> {
        let n = noise.len();
        if noise.eta_prime.nrows() != n {
            return shape_err("implicit noise", "eta and eta_prime draw counts differ");
        }
        let tape = theta
            .params()
            .first()
            .map(|p| p.tape())
            .expect("an MLP has parameters");
        let xs = repeat_rows(source_x, n);
        let xs_var = tape.constant(xs);
        let theta_source = theta.sample(xs_var, &tile_rows(&noise.eta_prime, source_x.nrows()))?;
        let psi_in = Var::concat_cols(&[theta_source, xs_var])?;
        let psi_source = psi.sample(psi_in, &tile_rows(&noise.eta, source_x.nrows()))?;
        let xt = tape.constant(repeat_rows(target_x, n));
        let theta_target = theta.sample(xt, &tile_rows(&noise.eta_prime, target_x.nrows()))?;
        Ok(Self {
            theta_source,
            psi_source,
            theta_target,
            draws: n,
        })
    }
}

fn mean_dirac_mmd<'t>(
    cfg: &CotConfig,
    grid: Var<'t>,
    draws: usize,
    ys: &Matrix,
) -> Result<Var<'t>> {
    let (rows, d) = grid.shape();
    if rows != ys.nrows() * draws || d != ys.ncols() {
        return shape_err(
            "implicit regularizer",
            format!(
                "grid {:?} for {} targets x {draws} draws",
                grid.shape(),
                ys.nrows()
            ),
        );
    }
    let mut terms = Vec::with_capacity(ys.nrows());
    for (i, y) in ys.rows().into_iter().enumerate() {
        let block = grid.slice_rows(i * draws, draws)?;
        terms.push(mmd2_uniform_to_dirac_var(&cfg.kernel, block, y)?);
    }
    Ok(Var::concat_rows(&terms)?.mean())
}

/// Loss from pre-sampled grids. Uses `cfg.lambda1`/`cfg.lambda2` as given.
pub fn cot_implicit_terms<'t>(
    grid: &ImplicitGrid<'t>,
    source_y: &Matrix,
    target_y: &Matrix,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    let transport = paired_cost_var(cfg.cost, grid.theta_source, grid.psi_source)?.mean();
    ensure_finite("transport term", transport)?;
    let reg1 = mean_dirac_mmd(cfg, grid.psi_source, grid.draws, source_y)?;
    ensure_finite("source regularizer", reg1)?;
    let reg2 = mean_dirac_mmd(cfg, grid.theta_target, grid.draws, target_y)?;
    ensure_finite("target regularizer", reg2)?;
    LossTerms::combine(transport, reg1, Some(reg2), cfg.lambda1, cfg.lambda2)
}

pub fn cot_implicit_loss<'t>(
    theta: &BoundGenerator<'t>,
    psi: &BoundGenerator<'t>,
    source: &JointDataset,
    target: &JointDataset,
    noise: &ImplicitNoise,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    let grid = ImplicitGrid::sample(theta, psi, source.x(), target.x(), noise)?;
    cot_implicit_terms(&grid, source.y(), target.y(), cfg)
}

/// θ maps (x, η′) to y; ψ maps (y, x, η) to y′.
#[derive(Clone, Debug)]
pub struct ImplicitProblem {
    pub theta: ImplicitGenerator,
    pub psi: ImplicitGenerator,
    pub source: JointDataset,
    pub target: JointDataset,
    pub config: CotConfig,
}

impl ImplicitProblem {
    pub fn new(
        theta: ImplicitGenerator,
        psi: ImplicitGenerator,
        source: JointDataset,
        target: JointDataset,
        config: CotConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (dx, dy) = (source.x_dim(), source.y_dim());
        if target.x_dim() != dx || target.y_dim() != dy {
            return shape_err("ImplicitProblem", "source and target dimensions differ");
        }
        if theta.cond_dim() != dx || theta.out_dim() != dy {
            return shape_err("ImplicitProblem", "θ must map x to y");
        }
        if psi.cond_dim() != dy + dx || psi.out_dim() != dy {
            return shape_err("ImplicitProblem", "ψ must map (y, x) to y");
        }
        Ok(Self {
            theta,
            psi,
            source,
            target,
            config,
        })
    }
}

impl Trainable for ImplicitProblem {
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
        let draws = cfg.noise_draws.unwrap_or(batch.len());
        let noise = ImplicitNoise::draw(rng, draws, self.psi.noise_dim(), self.theta.noise_dim());
        let theta = self.theta.bind(tape);
        let psi = self.psi.bind(tape);
        let terms = cot_implicit_loss(&theta, &psi, &source, &target, &noise, &cfg)?;
        let mut params = theta.params().to_vec();
        params.extend_from_slice(psi.params());
        Ok((terms, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;
    use crate::models::{Activation, Mlp, MlpConfig};
    use ndarray::array;

    fn cfg(l1: f64, l2: f64) -> CotConfig {
        CotConfig {
            lambda1: l1,
            lambda2: l2,
            kernel: Kernel::rbf(0.7).unwrap(),
            ..CotConfig::default()
        }
    }

    /// ψ(y, x, η) = y exactly: relu(y) − relu(−y) through two hidden layers.
    pub(crate) fn identity_psi(noise_dim: usize) -> ImplicitGenerator {
        let cfg = MlpConfig::new(vec![2 + noise_dim, 2, 2, 1], Activation::Relu, 0);
        let mut net = Mlp::zeros(cfg).unwrap();
        let layers = net.layers_mut();
        layers[0].weight[[0, 0]] = 1.0;
        layers[0].weight[[0, 1]] = -1.0;
        layers[1].weight[[0, 0]] = 1.0;
        layers[1].weight[[1, 1]] = 1.0;
        layers[2].weight[[0, 0]] = 1.0;
        layers[2].weight[[1, 0]] = -1.0;
        ImplicitGenerator::from_mlp(net, 2).unwrap()
    }

    fn data(seed: u64, m: usize) -> JointDataset {
        let mut r = RngStream::new(seed);
        JointDataset::new(r.normal_matrix(m, 1), r.normal_matrix(m, 1)).unwrap()
    }

    #[test]
    fn identity_psi_has_zero_transport() {
        let theta = ImplicitGenerator::new(1, 3, 1, &[8, 8], Activation::Tanh, 1).unwrap();
        let psi = identity_psi(3);
        let mut r = RngStream::new(2);
        let noise = ImplicitNoise::draw(&mut r, 5, 3, 3);
        let tape = Tape::new();
        let (s, t) = (data(3, 4), data(4, 4));
        let terms = cot_implicit_loss(
            &theta.bind(&tape),
            &psi.bind(&tape),
            &s,
            &t,
            &noise,
            &cfg(0.0, 0.0),
        )
        .unwrap();
        assert_eq!(terms.transport.item(), 0.0);
        assert_eq!(terms.total.item(), 0.0);
    }

    #[test]
    fn unregularized_loss_is_nonnegative() {
        for seed in 0..5 {
            let theta = ImplicitGenerator::new(1, 2, 1, &[6, 6], Activation::Tanh, seed).unwrap();
            let psi =
                ImplicitGenerator::new(2, 2, 1, &[6, 6], Activation::Tanh, seed + 10).unwrap();
            let mut r = RngStream::new(seed);
            let noise = ImplicitNoise::draw(&mut r, 4, 2, 2);
            let tape = Tape::new();
            let terms = cot_implicit_loss(
                &theta.bind(&tape),
                &psi.bind(&tape),
                &data(seed, 3),
                &data(seed + 1, 3),
                &noise,
                &cfg(0.0, 0.0),
            )
            .unwrap();
            assert!(terms.total.item() >= 0.0);
            assert_eq!(terms.total.item(), terms.transport.item());
        }
    }

    #[test]
    fn single_sample_hand_expansion() {
        let tape = Tape::new();
        let (a, b, u) = (0.4, -0.3, 1.1); // θ-sample, ψ-sample, θ-sample at x′
        let (y, yp) = (0.2, 0.9);
        let grid = ImplicitGrid {
            theta_source: tape.leaf(array![[a]]),
            psi_source: tape.leaf(array![[b]]),
            theta_target: tape.leaf(array![[u]]),
            draws: 1,
        };
        let c = cfg(3.0, 5.0);
        let terms = cot_implicit_terms(&grid, &array![[y]], &array![[yp]], &c).unwrap();
        let k = |p: f64, q: f64| (-(p - q) * (p - q) / (2.0 * 0.7)).exp();
        let expected =
            (a - b) * (a - b) + 3.0 * (2.0 - 2.0 * k(b, y)) + 5.0 * (2.0 - 2.0 * k(u, yp));
        assert!((terms.total.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn grid_layout_is_covariate_major() {
        let x = array![[1.0], [2.0]];
        assert_eq!(repeat_rows(&x, 2), array![[1.0], [1.0], [2.0], [2.0]]);
        assert_eq!(tile_rows(&x, 2), array![[1.0], [2.0], [1.0], [2.0]]);
    }

    #[test]
    fn problem_checks_dimensions() {
        let theta = ImplicitGenerator::new(1, 2, 1, &[4], Activation::Tanh, 0).unwrap();
        let psi = ImplicitGenerator::new(1, 2, 1, &[4], Activation::Tanh, 0).unwrap();
        assert!(ImplicitProblem::new(theta, psi, data(0, 3), data(1, 3), cfg(1.0, 1.0)).is_err());
    }
}
