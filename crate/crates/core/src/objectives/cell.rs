//! Dosage-conditioned perturbation loss.
//!
//! π_θ is fixed to the empirical law of the unperturbed cells, so only ψ is
//! learned: for dosage x_q it maps an unperturbed cell y′ᵢ and noise ηᵢ to a
//! predicted perturbed cell. The noise draws are shared across dosages.

use crate::diffengine::{Matrix, Tape, Var};
use crate::error::{shape_err, CotError, Result};
use crate::kernels::{mmd2_uniform_var, WeightedSamples};
use crate::models::{BoundGenerator, ImplicitGenerator};
use crate::rng::RngStream;

use super::implicit::repeat_rows;
use super::train::{subsample, Trainable};
use super::{ensure_finite, paired_cost_var, CotConfig, LossTerms};

#[derive(Clone, Debug, PartialEq)]
pub struct CellData {
    unperturbed: Matrix,
    /// Scalar conditioning value per dosage level.
    dosages: Vec<f64>,
    perturbed: Vec<Matrix>,
}

impl CellData {
    pub fn new(unperturbed: Matrix, dosages: Vec<f64>, perturbed: Vec<Matrix>) -> Result<Self> {
        if dosages.is_empty() || dosages.len() != perturbed.len() {
            return shape_err(
                "CellData",
                format!(
                    "{} dosages, {} perturbed sets",
                    dosages.len(),
                    perturbed.len()
                ),
            );
        }
        let d = unperturbed.ncols();
        if unperturbed.nrows() == 0 || perturbed.iter().any(|p| p.ncols() != d || p.nrows() == 0) {
            return shape_err("CellData", "empty set or feature width mismatch");
        }
        let all = unperturbed
            .iter()
            .chain(perturbed.iter().flatten())
            .chain(dosages.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(CotError::NonFinite("cell data".into()));
        }
        Ok(Self {
            unperturbed,
            dosages,
            perturbed,
        })
    }

    pub fn unperturbed(&self) -> &Matrix {
        &self.unperturbed
    }

    pub fn dosages(&self) -> &[f64] {
        &self.dosages
    }

    pub fn perturbed(&self) -> &[Matrix] {
        &self.perturbed
    }

    pub fn dim(&self) -> usize {
        self.unperturbed.ncols()
    }

    /// ψ conditioning rows `[y′ᵢ, x]` for one dosage value.
    pub fn conditioning(cells: &Matrix, dosage: f64) -> Matrix {
        let mut out = Matrix::from_elem((cells.nrows(), cells.ncols() + 1), dosage);
        out.slice_mut(ndarray::s![.., ..cells.ncols()])
            .assign(cells);
        out
    }
}

/// Loss from generated sets: `generated[q]` row i is ψ's prediction for
/// `unperturbed` row i at dosage q.
pub fn cot_cell_terms<'t>(
    generated: &[Var<'t>],
    unperturbed: &Matrix,
    perturbed: &[Matrix],
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    if generated.is_empty() || generated.len() != perturbed.len() {
        return shape_err(
            "cell loss",
            format!(
                "{} generated, {} perturbed sets",
                generated.len(),
                perturbed.len()
            ),
        );
    }
    let tape = generated[0].tape();
    let base = tape.constant(unperturbed.clone());
    let q = generated.len() as f64;
    let mut transport: Option<Var<'t>> = None;
    let mut reg: Option<Var<'t>> = None;
    for (gen, target) in generated.iter().zip(perturbed) {
        let t = paired_cost_var(cfg.cost, base, *gen)?.mean();
        let r = mmd2_uniform_var(
            &cfg.kernel,
            *gen,
            &WeightedSamples::uniform(target.clone())?,
        )?;
        transport = Some(match transport {
            Some(a) => a.add(t)?,
            None => t,
        });
        reg = Some(match reg {
            Some(a) => a.add(r)?,
            None => r,
        });
    }
    let transport = transport.expect("non-empty").scale(1.0 / q);
    ensure_finite("transport term", transport)?;
    let reg1 = reg.expect("non-empty").scale(1.0 / q);
    ensure_finite("dosage regularizer", reg1)?;
    LossTerms::combine(transport, reg1, None, cfg.lambda1, 0.0)
}

/// `cells` are the unperturbed rows in the batch, `noise` one row per cell.
pub fn cot_cell_loss<'t>(
    psi: &BoundGenerator<'t>,
    dosages: &[f64],
    cells: &Matrix,
    perturbed: &[Matrix],
    noise: &Matrix,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    let tape = psi.params()[0].tape();
    let generated = dosages
        .iter()
        .map(|&x| psi.sample(tape.constant(CellData::conditioning(cells, x)), noise))
        .collect::<Result<Vec<_>>>()?;
    cot_cell_terms(&generated, cells, perturbed, cfg)
}

/// ψ maps (y′, x, η) to a perturbed cell.
#[derive(Clone, Debug)]
pub struct CellProblem {
    pub psi: ImplicitGenerator,
    pub data: CellData,
    pub config: CotConfig,
}

impl CellProblem {
    pub fn new(psi: ImplicitGenerator, data: CellData, config: CotConfig) -> Result<Self> {
        config.validate()?;
        if psi.cond_dim() != data.dim() + 1 || psi.out_dim() != data.dim() {
            return shape_err("CellProblem", "ψ must map (cell, dosage) to a cell");
        }
        Ok(Self { psi, data, config })
    }

    /// Graph-free predictions for `cells` at one dosage, `draws` per cell.
    pub fn predict(
        &self,
        cells: &Matrix,
        dosage: f64,
        draws: usize,
        rng: &mut RngStream,
    ) -> Result<Matrix> {
        let cond = repeat_rows(&CellData::conditioning(cells, dosage), draws);
        let noise = rng.normal_matrix(cond.nrows(), self.psi.noise_dim());
        self.psi.sample(&cond, &noise)
    }
}

impl Trainable for CellProblem {
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.psi.net_mut().params_mut()
    }

    fn n_samples(&self) -> usize {
        self.data.unperturbed.nrows()
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &[usize],
        rng: &mut RngStream,
    ) -> Result<(LossTerms<'t>, Vec<Var<'t>>)> {
        let cfg = self.config.resolved(self.n_samples());
        let cells = self.data.unperturbed.select(ndarray::Axis(0), batch);
        let perturbed: Vec<Matrix> = self
            .data
            .perturbed
            .iter()
            .map(|p| p.select(ndarray::Axis(0), &subsample(rng, p.nrows(), batch.len())))
            .collect();
        let noise = rng.normal_matrix(batch.len(), self.psi.noise_dim());
        let psi = self.psi.bind(tape);
        let terms = cot_cell_loss(&psi, &self.data.dosages, &cells, &perturbed, &noise, &cfg)?;
        Ok((terms, psi.params().to_vec()))
    }
}
