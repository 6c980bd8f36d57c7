//! Finite-difference checks for every differentiable primitive and every
//! loss variant, on small seeded instances.

use crate::diffengine::{grad_check, GradCheckReport, Matrix, Tape, Var};
use crate::error::Result;
use crate::kernels::{
    gram_var, mmd2_uniform_to_dirac_var, mmd2_uniform_var, Kernel, WeightedSamples,
};
use crate::models::{Activation, ExplicitConditional, ImplicitGenerator};
use crate::objectives::{
    CellProblem, ClassificationProblem, CotConfig, ExplicitProblem, GroundCost, ImplicitProblem,
    JointAltProblem, JointDataset, LabelSpace, PromptProblem, Trainable,
};
use crate::rng::RngStream;
use crate::synthdata::{gen_toy_cell, gen_toy_classification, gen_toy_prompt};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Objective,
}

/// A named check; `run(seed, step, tolerance)`.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub kind: CaseKind,
    pub run: fn(u64, f64, f64) -> Result<GradCheckReport>,
}

/// Central differences on a [`Trainable`], perturbing its own parameters.
/// Every evaluation replays the same random stream, so noise and
/// subsampling are identical across perturbations.
pub fn check_trainable<P: Trainable + Clone>(
    problem: &P,
    batch: &[usize],
    rng: &RngStream,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = {
        let tape = Tape::new();
        let (terms, vars) = problem.loss(&tape, batch, &mut rng.clone())?;
        let g = tape.backward(terms.total)?;
        vars.iter()
            .flat_map(|v| g.wrt_or_zeros(*v).into_iter())
            .collect::<Vec<f64>>()
    };
    let eval = |p: &P| -> Result<f64> {
        let tape = Tape::new();
        let (terms, _) = p.loss(&tape, batch, &mut rng.clone())?;
        let v = terms.total.item();
        Ok(v)
    };
    let mut work = problem.clone();
    let shapes: Vec<(usize, usize)> = work.parameters_mut().iter().map(|m| m.dim()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (pi, &(_, cols)) in shapes.iter().enumerate() {
        for flat in 0..shapes[pi].0 * cols {
            let idx = (flat / cols, flat % cols);
            let orig = work.parameters_mut()[pi][idx];
            work.parameters_mut()[pi][idx] = orig + step;
            let plus = eval(&work)?;
            work.parameters_mut()[pi][idx] = orig - step;
            let minus = eval(&work)?;
            work.parameters_mut()[pi][idx] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    Ok(GradCheckReport::compare(analytic, numeric, tolerance))
}

/// Fixed random weights for contracting a node to a scalar; the same for
/// every evaluation with this seed and shape.
fn contract<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let (r, c) = out.shape();
    let w = RngStream::with_stream(seed, 0xC0).normal_matrix(r, c);
    Ok(out.mul(out.tape().constant(w))?.sum())
}

fn inputs(seed: u64, shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut r = RngStream::new(seed);
    shapes.iter().map(|&(a, b)| r.normal_matrix(a, b)).collect()
}

macro_rules! primitive {
    ($name:ident, [$($shape:expr),*], |$p:ident| $body:expr) => {
        fn $name(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
            let params = inputs(seed, &[$($shape),*]);
            grad_check(
                |_t, $p| {
                    let out: Var<'_> = $body;
                    contract(out, seed)
                },
                &params,
                step,
                tol,
            )
        }
    };
}

primitive!(p_add, [(3, 4), (3, 4)], |p| p[0].add(p[1])?);
primitive!(p_sub, [(3, 4), (3, 4)], |p| p[0].sub(p[1])?);
primitive!(p_mul, [(3, 4), (3, 4)], |p| p[0].mul(p[1])?);
primitive!(p_scale, [(3, 4)], |p| p[0].scale(-1.7));
primitive!(p_add_scalar, [(3, 4)], |p| p[0].add_scalar(0.3).square());
primitive!(p_matmul, [(3, 4), (4, 2)], |p| p[0].matmul(p[1])?);
primitive!(p_add_row, [(3, 4), (1, 4)], |p| p[0].add_row(p[1])?);
primitive!(p_mul_col, [(3, 4), (3, 1)], |p| p[0].mul_col(p[1])?);
primitive!(p_tanh, [(3, 4)], |p| p[0].tanh());
primitive!(p_relu, [(3, 4)], |p| p[0].relu());
primitive!(p_exp, [(3, 4)], |p| p[0].exp());
primitive!(p_square, [(3, 4)], |p| p[0].square());
primitive!(p_powf, [(3, 4)], |p| p[0]
    .square()
    .add_scalar(0.5)
    .powf(1.5));
primitive!(p_powf_negative, [(3, 4)], |p| p[0]
    .square()
    .add_scalar(0.5)
    .powf(-0.5));
primitive!(p_sum, [(3, 4)], |p| p[0].square().sum());
primitive!(p_mean, [(3, 4)], |p| p[0].square().mean());
primitive!(p_dot, [(3, 4), (3, 4)], |p| p[0].dot(p[1])?);
primitive!(p_row_sums, [(3, 4)], |p| p[0].row_sums());
primitive!(p_col_sums, [(3, 4)], |p| p[0].col_sums());
primitive!(p_sq_dist, [(3, 2), (4, 2)], |p| p[0].sq_dist(p[1])?);
primitive!(p_sq_dist_self, [(4, 2)], |p| p[0].sq_dist(p[0])?);
primitive!(p_softmax_rows, [(3, 4)], |p| p[0].softmax_rows());
primitive!(p_slice_rows, [(5, 3)], |p| p[0].slice_rows(1, 3)?);
primitive!(p_slice_cols, [(3, 5)], |p| p[0].slice_cols(2, 2)?);
primitive!(p_concat_cols, [(3, 2), (3, 1)], |p| Var::concat_cols(&[
    p[0], p[1], p[0]
])?);
primitive!(p_concat_rows, [(2, 3), (1, 3)], |p| Var::concat_rows(&[
    p[0], p[1], p[0]
])?);
primitive!(p_gram_rbf, [(3, 2), (4, 2)], |p| gram_var(
    &Kernel::rbf(0.8)?,
    p[0],
    p[1]
)?);
primitive!(p_gram_imq, [(3, 2), (4, 2)], |p| gram_var(
    &Kernel::imq(1.3)?,
    p[0],
    p[1]
)?);
primitive!(p_gram_imq2, [(3, 2), (4, 2)], |p| gram_var(
    &Kernel::imq2(0.7)?.normalized(),
    p[0],
    p[1]
)?);

fn p_mmd2_uniform(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::with_stream(seed, 1);
    let target = WeightedSamples::uniform(r.normal_matrix(4, 2) + 1.0)?;
    let params = inputs(seed, &[(5, 2)]);
    let k = Kernel::rbf(0.9)?;
    grad_check(
        |_, p| mmd2_uniform_var(&k, p[0], &target),
        &params,
        step,
        tol,
    )
}

fn p_mmd2_to_dirac(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let params = inputs(seed, &[(5, 2)]);
    let y = ndarray::array![0.7, -1.2];
    let k = Kernel::imq(1.0)?;
    grad_check(
        |_, p| mmd2_uniform_to_dirac_var(&k, p[0], y.view()),
        &params,
        step,
        tol,
    )
}

fn toy_cfg(seed: u64) -> CotConfig {
    CotConfig {
        lambda1: 3.0,
        lambda2: 2.0,
        kernel: Kernel::rbf(1.0).expect("positive"),
        seed,
        ..CotConfig::default()
    }
}

fn joint(r: &mut RngStream, m: usize) -> Result<JointDataset> {
    JointDataset::new(r.normal_matrix(m, 1), r.normal_matrix(m, 1))
}

fn o_implicit(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let cfg = CotConfig {
        noise_draws: Some(3),
        ..toy_cfg(seed)
    };
    let p = ImplicitProblem::new(
        ImplicitGenerator::new(1, 2, 1, &[4], Activation::Tanh, seed)?,
        ImplicitGenerator::new(2, 2, 1, &[4], Activation::Tanh, seed + 1)?,
        joint(&mut r, 5)?,
        joint(&mut r, 6)?,
        cfg,
    )?;
    check_trainable(
        &p,
        &[0, 2, 3, 4],
        &RngStream::with_stream(seed, 7),
        step,
        tol,
    )
}

fn o_implicit_cosine(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let cfg = CotConfig {
        noise_draws: Some(3),
        cost: GroundCost::Cosine,
        kernel: Kernel::imq(1.0)?,
        ..toy_cfg(seed)
    };
    let data = |r: &mut RngStream| JointDataset::new(r.normal_matrix(4, 1), r.normal_matrix(4, 2));
    let p = ImplicitProblem::new(
        ImplicitGenerator::new(1, 2, 2, &[4], Activation::Tanh, seed)?,
        ImplicitGenerator::new(3, 2, 2, &[4], Activation::Tanh, seed + 1)?,
        data(&mut r)?,
        data(&mut r)?,
        cfg,
    )?;
    check_trainable(
        &p,
        &[0, 1, 2, 3],
        &RngStream::with_stream(seed, 7),
        step,
        tol,
    )
}

fn o_explicit(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let k = Kernel::rbf(1.0)?;
    let labels = LabelSpace::from_embeddings(&r.normal_matrix(3, 2), GroundCost::SqEuclidean, &k)?;
    let source = gen_toy_classification(&mut r, 3, 5, 2.0)?;
    let target = gen_toy_classification(&mut r, 3, 5, 2.0)?;
    let p = ExplicitProblem::new(
        ExplicitConditional::new(3, 3, false, &[4], Activation::Tanh, seed)?,
        ExplicitConditional::new(3, 3, true, &[4], Activation::Tanh, seed + 1)?,
        source,
        target,
        labels,
        toy_cfg(seed),
    )?;
    check_trainable(&p, &[0, 1, 3], &RngStream::with_stream(seed, 7), step, tol)
}

fn o_classification(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let labels = LabelSpace::one_hot(3, &Kernel::rbf(1.0)?)?;
    let data = gen_toy_classification(&mut r, 3, 6, 2.0)?;
    let p = ClassificationProblem::new(
        ExplicitConditional::new(3, 3, false, &[4], Activation::Tanh, seed)?,
        ExplicitConditional::new(3, 3, true, &[4], Activation::Tanh, seed + 1)?,
        data,
        labels,
        toy_cfg(seed),
    )?;
    check_trainable(
        &p,
        &[0, 1, 2, 4, 5],
        &RngStream::with_stream(seed, 7),
        step,
        tol,
    )
}

fn o_cell(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let toy = gen_toy_cell(&mut r, &[10.0, 1000.0], 5, 2, 1.0)?;
    let p = CellProblem::new(
        ImplicitGenerator::new(3, 2, 2, &[4], Activation::Tanh, seed)?,
        toy.data,
        toy_cfg(seed),
    )?;
    check_trainable(
        &p,
        &[0, 1, 3, 4],
        &RngStream::with_stream(seed, 7),
        step,
        tol,
    )
}

fn o_prompt(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let data = gen_toy_prompt(&mut r, 3, 3, 3, 2, 0.3)?;
    let cfg = CotConfig {
        cost: GroundCost::Cosine,
        ..toy_cfg(seed)
    };
    let p = PromptProblem::new(
        ExplicitConditional::new(4, 3, false, &[4], Activation::Tanh, seed)?,
        data,
        cfg,
    )?;
    check_trainable(&p, &[0, 2], &RngStream::with_stream(seed, 7), step, tol)
}

fn o_joint_alt(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut r = RngStream::new(seed);
    let p = JointAltProblem::new(
        ImplicitGenerator::new(1, 2, 1, &[4], Activation::Tanh, seed)?,
        ImplicitGenerator::new(2, 2, 1, &[4], Activation::Tanh, seed + 1)?,
        joint(&mut r, 5)?,
        joint(&mut r, 5)?,
        Kernel::rbf(0.5)?,
        toy_cfg(seed),
    )?;
    check_trainable(
        &p,
        &[0, 1, 3, 4],
        &RngStream::with_stream(seed, 7),
        step,
        tol,
    )
}

const fn prim(name: &'static str, run: fn(u64, f64, f64) -> Result<GradCheckReport>) -> GradCase {
    GradCase {
        name,
        kind: CaseKind::Primitive,
        run,
    }
}

const fn obj(name: &'static str, run: fn(u64, f64, f64) -> Result<GradCheckReport>) -> GradCase {
    GradCase {
        name,
        kind: CaseKind::Objective,
        run,
    }
}

/// All cases, primitives first, in a fixed order.
pub fn cases() -> Vec<GradCase> {
    vec![
        prim("add", p_add),
        prim("sub", p_sub),
        prim("mul", p_mul),
        prim("scale", p_scale),
        prim("add_scalar", p_add_scalar),
        prim("matmul", p_matmul),
        prim("add_row", p_add_row),
        prim("mul_col", p_mul_col),
        prim("tanh", p_tanh),
        prim("relu", p_relu),
        prim("exp", p_exp),
        prim("square", p_square),
        prim("powf", p_powf),
        prim("powf_negative", p_powf_negative),
        prim("sum", p_sum),
        prim("mean", p_mean),
        prim("dot", p_dot),
        prim("row_sums", p_row_sums),
        prim("col_sums", p_col_sums),
        prim("sq_dist", p_sq_dist),
        prim("sq_dist_self", p_sq_dist_self),
        prim("softmax_rows", p_softmax_rows),
        prim("slice_rows", p_slice_rows),
        prim("slice_cols", p_slice_cols),
        prim("concat_cols", p_concat_cols),
        prim("concat_rows", p_concat_rows),
        prim("gram_rbf", p_gram_rbf),
        prim("gram_imq", p_gram_imq),
        prim("gram_imq2", p_gram_imq2),
        prim("mmd2_uniform", p_mmd2_uniform),
        prim("mmd2_to_dirac", p_mmd2_to_dirac),
        obj("implicit", o_implicit),
        obj("implicit_cosine", o_implicit_cosine),
        obj("explicit", o_explicit),
        obj("classification", o_classification),
        obj("cell", o_cell),
        obj("prompt", o_prompt),
        obj("joint_alt", o_joint_alt),
    ]
}
