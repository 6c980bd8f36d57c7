//! Experiment runners. Each returns a [`Report`] whose bytes depend only on
//! the configuration: every (m, seed) cell draws from its own streams and
//! rows are assembled in a fixed order whatever the thread count.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::diffengine::{Matrix, Tape};
use crate::error::{CotError, Result};
use crate::kernels::{mmd2, Kernel, KernelFamily, WeightedSamples};
use crate::models::{ExplicitConditional, ImplicitGenerator};
use crate::objectives::{
    conditional_regularizer, joint_regularizer, regularizer_equivalence_gap, DiscreteJoint,
    DiscretePlan,
};
use crate::objectives::{
    train, CellProblem, ClassificationProblem, CotConfig, ImplicitNoise, ImplicitProblem,
    JointDataset, LabelSpace, PromptProblem, Trainable,
};
use crate::oracles::{
    analytic_barycenter, converge_conditionals, empirical_w1_1d, literal_barycenter,
    true_conditional_w2sq, Gaussian1D,
};
use crate::rng::RngStream;
use crate::synthdata::{
    gen_conditional_gaussian, gen_toy_cell, gen_toy_classification, gen_toy_prompt,
    gen_toy_regression, ConditionalGaussianSpec,
};

use super::config::{Experiment, ExperimentConfig};
use super::gradsuite;
use super::plot::{series_from_report, Plot};
use super::report::{meta_json, Report, Value};

// Stream purposes within one (seed, m) cell.
const SOURCE_DATA: u64 = 1;
const TARGET_DATA: u64 = 2;
const EVAL_NOISE: u64 = 3;
const TEST_DATA: u64 = 4;

fn stream(seed: u64, m: usize, purpose: u64) -> RngStream {
    RngStream::with_stream(seed, ((m as u64) << 8) | purpose)
}

/// Network initialization and training seeds depend on the seed alone.
fn model_seed(seed: u64, which: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(which)
}

/// Runs `f` over `items` on up to `threads` workers; output order is the
/// input order.
pub fn par_map<T: Sync, R: Send>(
    threads: usize,
    items: &[T],
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut done: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads.min(items.len()))
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break out;
                        }
                        out.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

/// Standard normal draws rescaled so every column has sample mean exactly 0
/// and population variance exactly 1.
pub fn standardized_normal(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let mut z = rng.normal_matrix(rows, cols);
    if rows < 2 {
        return z;
    }
    for mut col in z.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        col.mapv_inplace(|v| v / sd);
    }
    z
}

/// Moment-matched evaluation noise for an implicit pair.
pub fn eval_noise(
    rng: &mut RngStream,
    draws: usize,
    psi_dim: usize,
    theta_dim: usize,
) -> ImplicitNoise {
    ImplicitNoise {
        eta: standardized_normal(rng, draws, psi_dim),
        eta_prime: standardized_normal(rng, draws, theta_dim),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(values: &[f64]) -> f64 {
    let m = mean(values).unwrap_or(0.0);
    let n = values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// A conditional coupling at scalar covariate x: paired draws (θ-side,
/// ψ-side) from the given noise rows.
pub trait ConditionalSampler {
    fn pairs(&self, x: f64, noise: &ImplicitNoise) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// A trained implicit pair: θ(x, η′) then ψ(θ(x, η′), x, η).
pub struct TrainedPair<'a> {
    pub theta: &'a ImplicitGenerator,
    pub psi: &'a ImplicitGenerator,
}

impl ConditionalSampler for TrainedPair<'_> {
    fn pairs(&self, x: f64, noise: &ImplicitNoise) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = noise.len();
        let xs = Matrix::from_elem((n, 1), x);
        let t = self.theta.sample(&xs, &noise.eta_prime)?;
        let cond = ndarray::concatenate![ndarray::Axis(1), t, xs];
        let p = self.psi.sample(&cond, &noise.eta)?;
        Ok((t.column(0).to_vec(), p.column(0).to_vec()))
    }
}

/// The optimal monotone coupling of the two true conditionals: θ-side from
/// the target law, ψ-side its quantile-matched image in the source law.
pub struct MonotoneCoupling;

impl ConditionalSampler for MonotoneCoupling {
    fn pairs(&self, x: f64, noise: &ImplicitNoise) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, t) = converge_conditionals(x);
        let z = noise.eta_prime.column(0);
        Ok((
            z.iter().map(|v| t.mean() + t.sd() * v).collect(),
            z.iter().map(|v| s.mean() + s.sd() * v).collect(),
        ))
    }
}

/// Mean squared-Euclidean cost of the sampler's pairs at each x.
pub fn transport_cost_grid(
    sampler: &dyn ConditionalSampler,
    grid: &[f64],
    noise: &ImplicitNoise,
) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&x| {
            let (a, b) = sampler.pairs(x, noise)?;
            Ok(a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64)
        })
        .collect()
}

/// Mean squared difference to the closed-form conditional W₂².
pub fn grid_mse(grid: &[f64], estimates: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (&x, e) in grid.iter().zip(estimates) {
        acc += (e - true_conditional_w2sq(x)?).powi(2);
    }
    Ok(acc / grid.len() as f64)
}

fn is_divergence(e: &CotError) -> bool {
    matches!(e, CotError::Diverged { .. } | CotError::NonFinite(_))
}

fn implicit_pair(
    cfg: &ExperimentConfig,
    dx: usize,
    dy: usize,
    seed: u64,
) -> Result<(ImplicitGenerator, ImplicitGenerator)> {
    let mc = &cfg.model;
    Ok((
        ImplicitGenerator::new(
            dx,
            mc.noise_dim,
            dy,
            &mc.hidden,
            mc.activation,
            model_seed(seed, 1),
        )?,
        ImplicitGenerator::new(
            dx + dy,
            mc.noise_dim,
            dy,
            &mc.hidden,
            mc.activation,
            model_seed(seed, 2),
        )?,
    ))
}

fn train_cot(cfg: &ExperimentConfig, seed: u64) -> CotConfig {
    CotConfig {
        seed: model_seed(seed, 3),
        ..cfg.cot.clone()
    }
}

/// Trains θ on `target` and ψ on `source`; `Ok(None)` if training diverged.
fn train_implicit(
    cfg: &ExperimentConfig,
    seed: u64,
    source: JointDataset,
    target: JointDataset,
) -> Result<Option<(ImplicitProblem, f64)>> {
    let (theta, psi) = implicit_pair(cfg, source.x_dim(), source.y_dim(), seed)?;
    let tc = train_cot(cfg, seed);
    let mut problem = ImplicitProblem::new(theta, psi, source, target, tc.clone())?;
    match train(&mut problem, &tc, |_| {}) {
        Ok(h) => Ok(Some((
            problem,
            h.last().map(|r| r.loss).unwrap_or(f64::NAN),
        ))),
        Err(e) if is_divergence(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

fn cells(cfg: &ExperimentConfig) -> Vec<(usize, u64)> {
    cfg.m
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect()
}

fn push_summaries(
    report: &mut Report,
    cfg: &ExperimentConfig,
    per_cell: &[(usize, Option<f64>)],
    build: impl Fn(usize, &str, f64) -> Vec<Value>,
) {
    for &m in &cfg.m {
        let vals: Vec<f64> = per_cell
            .iter()
            .filter(|(mm, _)| *mm == m)
            .filter_map(|(_, v)| *v)
            .collect();
        if let (Some(a), Some(b)) = (mean(&vals), median(&vals)) {
            report.push(build(m, "mean", a));
            report.push(build(m, "median", b));
        }
    }
}

pub const CONVERGE_COLUMNS: [&str; 9] = [
    "experiment",
    "m",
    "seed",
    "row",
    "x",
    "estimate",
    "truth",
    "sq_err",
    "grid_mse",
];

pub fn run_converge(cfg: &ExperimentConfig) -> Result<Report> {
    let grid = cfg.eval.grid();
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<Option<Vec<f64>>> {
            let source = gen_conditional_gaussian(
                &mut stream(seed, m, SOURCE_DATA),
                &ConditionalGaussianSpec::converge_source(),
                m,
            )?;
            let target = gen_conditional_gaussian(
                &mut stream(seed, m, TARGET_DATA),
                &ConditionalGaussianSpec::converge_target(),
                m,
            )?;
            let Some((p, _)) = train_implicit(cfg, seed, source, target)? else {
                return Ok(None);
            };
            let noise = eval_noise(
                &mut stream(seed, m, EVAL_NOISE),
                cfg.eval.eval_draws,
                p.psi.noise_dim(),
                p.theta.noise_dim(),
            );
            let est = transport_cost_grid(
                &TrainedPair {
                    theta: &p.theta,
                    psi: &p.psi,
                },
                &grid,
                &noise,
            )?;
            if est.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            Ok(Some(est))
        },
    );
    let mut report = Report::new("converge", &CONVERGE_COLUMNS);
    let mut per_cell = Vec::new();
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        let tag = || Value::from("converge");
        match res? {
            None => {
                report.push(vec![
                    tag(),
                    m.into(),
                    seed.into(),
                    "failed".into(),
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                ]);
                per_cell.push((m, None));
            }
            Some(est) => {
                for (&x, &e) in grid.iter().zip(&est) {
                    let truth = true_conditional_w2sq(x)?;
                    report.push(vec![
                        tag(),
                        m.into(),
                        seed.into(),
                        "point".into(),
                        x.into(),
                        e.into(),
                        truth.into(),
                        (e - truth).powi(2).into(),
                        Value::Empty,
                    ]);
                }
                let mse = grid_mse(&grid, &est)?;
                report.push(vec![
                    tag(),
                    m.into(),
                    seed.into(),
                    "cell".into(),
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    mse.into(),
                ]);
                per_cell.push((m, Some(mse)));
            }
        }
    }
    push_summaries(&mut report, cfg, &per_cell, |m, kind, v| {
        vec![
            "converge".into(),
            m.into(),
            Value::Empty,
            kind.into(),
            Value::Empty,
            Value::Empty,
            Value::Empty,
            Value::Empty,
            v.into(),
        ]
    });
    Ok(report)
}

/// B_x = ρ·y + (1−ρ)·ψ(y, x, η) for source-law draws `y` at x.
pub fn barycenter_samples(
    psi: &ImplicitGenerator,
    x: f64,
    rho: f64,
    y: &[f64],
    eta: &Matrix,
) -> Result<Vec<f64>> {
    let n = y.len();
    let mut cond = Matrix::from_elem((n, 2), x);
    for (i, v) in y.iter().enumerate() {
        cond[[i, 0]] = *v;
    }
    let t = psi.sample(&cond, eta)?;
    Ok(y.iter()
        .zip(t.column(0))
        .map(|(a, b)| rho * a + (1.0 - rho) * b)
        .collect())
}

/// Draws μ + σz for standardized `z`.
pub fn law_samples(law: Gaussian1D, z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| law.mean() + law.sd() * v).collect()
}

/// W1 of the samples against the derived and the literal barycenter at x.
pub fn barycenter_w1(samples: &[f64], x: f64, rho: f64, z: &[f64]) -> Result<(f64, f64)> {
    Ok((
        empirical_w1_1d(samples, &law_samples(analytic_barycenter(x, rho)?, z))?,
        empirical_w1_1d(samples, &law_samples(literal_barycenter(x), z))?,
    ))
}

pub const BARYCENTER_COLUMNS: [&str; 9] = [
    "experiment",
    "m",
    "seed",
    "row",
    "x",
    "w1_derived",
    "w1_literal",
    "mse_derived",
    "mse_literal",
];

pub fn run_barycenter(cfg: &ExperimentConfig) -> Result<Report> {
    let grid = cfg.eval.grid();
    let rho = cfg.eval.rho;
    let draws = cfg.eval.eval_draws;
    let first = ConditionalGaussianSpec::barycenter_first();
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<Option<Vec<(f64, f64)>>> {
            // ψ carries first-law samples to the second law; θ models the first.
            let source = gen_conditional_gaussian(
                &mut stream(seed, m, SOURCE_DATA),
                &ConditionalGaussianSpec::barycenter_second(),
                m,
            )?;
            let target = gen_conditional_gaussian(&mut stream(seed, m, TARGET_DATA), &first, m)?;
            let Some((p, _)) = train_implicit(cfg, seed, source, target)? else {
                return Ok(None);
            };
            let mut r = stream(seed, m, EVAL_NOISE);
            let y = standardized_normal(&mut r, draws, 1);
            let eta = standardized_normal(&mut r, draws, p.psi.noise_dim());
            let z = standardized_normal(&mut r, draws, 1);
            let z = z.column(0).to_vec();
            let mut out = Vec::with_capacity(grid.len());
            for &x in &grid {
                let ys: Vec<f64> = y
                    .column(0)
                    .iter()
                    .map(|v| first.mean(x) + first.variance(x).sqrt() * v)
                    .collect();
                let b = barycenter_samples(&p.psi, x, rho, &ys, &eta)?;
                if b.iter().any(|v| !v.is_finite()) {
                    return Ok(None);
                }
                out.push(barycenter_w1(&b, x, rho, &z)?);
            }
            Ok(Some(out))
        },
    );
    let mut report = Report::new("barycenter", &BARYCENTER_COLUMNS);
    let mut per_cell = Vec::new();
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        let tag = || Value::from("barycenter");
        match res? {
            None => {
                report.push(vec![
                    tag(),
                    m.into(),
                    seed.into(),
                    "failed".into(),
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                ]);
                per_cell.push((m, None));
            }
            Some(w) => {
                for (&x, &(d, l)) in grid.iter().zip(&w) {
                    report.push(vec![
                        tag(),
                        m.into(),
                        seed.into(),
                        "point".into(),
                        x.into(),
                        d.into(),
                        l.into(),
                        Value::Empty,
                        Value::Empty,
                    ]);
                }
                let n = w.len() as f64;
                let md = w.iter().map(|(d, _)| d * d).sum::<f64>() / n;
                let ml = w.iter().map(|(_, l)| l * l).sum::<f64>() / n;
                report.push(vec![
                    tag(),
                    m.into(),
                    seed.into(),
                    "cell".into(),
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    md.into(),
                    ml.into(),
                ]);
                per_cell.push((m, Some((md, ml))));
            }
        }
    }
    for &m in &cfg.m {
        let ok: Vec<(f64, f64)> = per_cell
            .iter()
            .filter(|(mm, _)| *mm == m)
            .filter_map(|(_, v)| *v)
            .collect();
        let d: Vec<f64> = ok.iter().map(|v| v.0).collect();
        let l: Vec<f64> = ok.iter().map(|v| v.1).collect();
        for (kind, f) in [
            ("mean", mean as fn(&[f64]) -> Option<f64>),
            ("median", median),
        ] {
            if let (Some(a), Some(b)) = (f(&d), f(&l)) {
                report.push(vec![
                    "barycenter".into(),
                    m.into(),
                    Value::Empty,
                    kind.into(),
                    Value::Empty,
                    Value::Empty,
                    Value::Empty,
                    a.into(),
                    b.into(),
                ]);
            }
        }
    }
    Ok(report)
}

/// 1 − Var(y − ŷ) / Var(y).
pub fn explained_variance(y: &[f64], pred: &[f64]) -> f64 {
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let resid: Vec<f64> = y.iter().zip(pred).map(|(a, b)| a - b).collect();
    1.0 - var(&resid) / var(y)
}

/// Mean of the ψ-side draws at each x.
pub fn implicit_predictions(
    sampler: &dyn ConditionalSampler,
    xs: &[f64],
    noise: &ImplicitNoise,
) -> Result<Vec<f64>> {
    xs.iter()
        .map(|&x| {
            let (_, p) = sampler.pairs(x, noise)?;
            Ok(p.iter().sum::<f64>() / p.len() as f64)
        })
        .collect()
}

pub const REGRESSION_COLUMNS: [&str; 6] = [
    "experiment",
    "m",
    "seed",
    "row",
    "explained_variance",
    "final_loss",
];

pub fn run_regression(cfg: &ExperimentConfig) -> Result<Report> {
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<Option<(f64, f64)>> {
            let data = gen_toy_regression(&mut stream(seed, m, SOURCE_DATA), m, cfg.eval.noise_sd)?;
            let test = gen_toy_regression(
                &mut stream(seed, m, TEST_DATA),
                cfg.eval.test_size,
                cfg.eval.noise_sd,
            )?;
            let Some((p, loss)) = train_implicit(cfg, seed, data.clone(), data)? else {
                return Ok(None);
            };
            let noise = eval_noise(
                &mut stream(seed, m, EVAL_NOISE),
                cfg.eval.eval_draws,
                p.psi.noise_dim(),
                p.theta.noise_dim(),
            );
            let xs = test.x().column(0).to_vec();
            let pred = implicit_predictions(
                &TrainedPair {
                    theta: &p.theta,
                    psi: &p.psi,
                },
                &xs,
                &noise,
            )?;
            Ok(Some((
                explained_variance(&test.y().column(0).to_vec(), &pred),
                loss,
            )))
        },
    );
    let mut report = Report::new("regression", &REGRESSION_COLUMNS);
    let mut per_cell = Vec::new();
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        match res? {
            None => {
                report.push(vec![
                    "regression".into(),
                    m.into(),
                    seed.into(),
                    "failed".into(),
                    Value::Empty,
                    Value::Empty,
                ]);
                per_cell.push((m, None));
            }
            Some((ev, loss)) => {
                report.push(vec![
                    "regression".into(),
                    m.into(),
                    seed.into(),
                    "cell".into(),
                    ev.into(),
                    loss.into(),
                ]);
                per_cell.push((m, Some(ev)));
            }
        }
    }
    push_summaries(&mut report, cfg, &per_cell, |m, kind, v| {
        vec![
            "regression".into(),
            m.into(),
            Value::Empty,
            kind.into(),
            v.into(),
            Value::Empty,
        ]
    });
    Ok(report)
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC of `scores` for the positives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let np = positive.iter().filter(|p| **p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, p)| **p)
        .map(|(r, _)| r)
        .sum();
    Some((sum - (np * (np + 1)) as f64 / 2.0) / (np * nn) as f64)
}

/// Macro average over classes of the one-vs-rest AUC of column c.
pub fn macro_auc_ovr(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut aucs = Vec::new();
    for c in 0..probs.ncols() {
        let pos: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        if let Some(a) = binary_auc(&probs.column(c).to_vec(), &pos) {
            aucs.push(a);
        }
    }
    mean(&aucs).ok_or_else(|| CotError::InvalidParameter("AUC needs two classes present".into()))
}

fn argmax_rows(y: &Matrix) -> Vec<usize> {
    y.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, v)| if *v > b.1 { (i, *v) } else { b },
                )
                .0
        })
        .collect()
}

pub const CLASSIFY_COLUMNS: [&str; 7] = [
    "experiment",
    "m",
    "seed",
    "row",
    "separation",
    "auc",
    "final_loss",
];

pub fn run_classify(cfg: &ExperimentConfig) -> Result<Report> {
    let (k, sep) = (cfg.eval.n_classes, cfg.eval.separation);
    let mc = &cfg.model;
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<Option<(f64, f64)>> {
            let data = gen_toy_classification(&mut stream(seed, m, SOURCE_DATA), k, m, sep)?;
            let test = gen_toy_classification(
                &mut stream(seed, m, TEST_DATA),
                k,
                cfg.eval.test_size,
                sep,
            )?;
            let labels = LabelSpace::one_hot(k, &cfg.cot.kernel)?;
            let f = ExplicitConditional::new(
                k,
                k,
                false,
                &mc.hidden,
                mc.activation,
                model_seed(seed, 1),
            )?;
            let psi = ExplicitConditional::new(
                k,
                k,
                true,
                &mc.hidden,
                mc.activation,
                model_seed(seed, 2),
            )?;
            let tc = train_cot(cfg, seed);
            let mut problem = ClassificationProblem::new(f, psi, data, labels, tc.clone())?;
            let loss = match train(&mut problem, &tc, |_| {}) {
                Ok(h) => h.last().map(|r| r.loss).unwrap_or(f64::NAN),
                Err(e) if is_divergence(&e) => return Ok(None),
                Err(e) => return Err(e),
            };
            let probs = problem.classifier.forward_explicit(test.x(), None)?;
            Ok(Some((macro_auc_ovr(&probs, &argmax_rows(test.y()))?, loss)))
        },
    );
    let mut report = Report::new("classify", &CLASSIFY_COLUMNS);
    let mut per_cell = Vec::new();
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        match res? {
            None => {
                report.push(vec![
                    "classify".into(),
                    m.into(),
                    seed.into(),
                    "failed".into(),
                    sep.into(),
                    Value::Empty,
                    Value::Empty,
                ]);
                per_cell.push((m, None));
            }
            Some((auc, loss)) => {
                report.push(vec![
                    "classify".into(),
                    m.into(),
                    seed.into(),
                    "cell".into(),
                    sep.into(),
                    auc.into(),
                    loss.into(),
                ]);
                per_cell.push((m, Some(auc)));
            }
        }
    }
    push_summaries(&mut report, cfg, &per_cell, |m, kind, v| {
        vec![
            "classify".into(),
            m.into(),
            Value::Empty,
            kind.into(),
            sep.into(),
            v.into(),
            Value::Empty,
        ]
    });
    Ok(report)
}

pub const CELL_COLUMNS: [&str; 8] = [
    "experiment",
    "m",
    "seed",
    "row",
    "dosage",
    "mmd_trained",
    "mmd_untrained",
    "shift_error",
];

/// Per dosage: (MMD² of predictions to held-out perturbed cells, shift error).
fn cell_metrics(
    p: &CellProblem,
    test: &crate::synthdata::ToyCell,
    rng: &mut RngStream,
    kernel: &Kernel,
) -> Result<Vec<(f64, f64)>> {
    let base = test.data.unperturbed();
    let base_mean = base.mean_axis(ndarray::Axis(0)).expect("non-empty");
    test.data
        .dosages()
        .iter()
        .zip(test.data.perturbed())
        .zip(&test.shifts)
        .map(|((&x, target), shift)| {
            let pred = p.predict(base, x, 1, rng)?;
            let d = mmd2(
                kernel,
                &WeightedSamples::uniform(pred.clone())?,
                &WeightedSamples::uniform(target.clone())?,
            )?;
            let moved = pred.mean_axis(ndarray::Axis(0)).expect("non-empty") - &base_mean;
            let err = moved
                .iter()
                .zip(shift)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok((d, err))
        })
        .collect()
}

/// (dosage, mmd_trained, mmd_untrained, shift_error) per dosage; `None` when training diverged.
type DosageRows = Option<Vec<(f64, f64, f64, f64)>>;

pub fn run_cell_toy(cfg: &ExperimentConfig) -> Result<Report> {
    let ev = &cfg.eval;
    let mc = &cfg.model;
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<DosageRows> {
            let toy = gen_toy_cell(
                &mut stream(seed, m, SOURCE_DATA),
                &ev.doses_nm,
                m,
                ev.cell_dim,
                ev.cell_shift,
            )?;
            let test = gen_toy_cell(
                &mut stream(seed, m, TEST_DATA),
                &ev.doses_nm,
                ev.test_size,
                ev.cell_dim,
                ev.cell_shift,
            )?;
            let d = ev.cell_dim;
            let psi = ImplicitGenerator::new(
                d + 1,
                mc.noise_dim,
                d,
                &mc.hidden,
                mc.activation,
                model_seed(seed, 2),
            )?;
            let tc = train_cot(cfg, seed);
            let mut problem = CellProblem::new(psi, toy.data, tc.clone())?;
            let untrained = problem.clone();
            match train(&mut problem, &tc, |_| {}) {
                Ok(_) => {}
                Err(e) if is_divergence(&e) => return Ok(None),
                Err(e) => return Err(e),
            }
            let before = cell_metrics(
                &untrained,
                &test,
                &mut stream(seed, m, EVAL_NOISE),
                &cfg.cot.kernel,
            )?;
            let after = cell_metrics(
                &problem,
                &test,
                &mut stream(seed, m, EVAL_NOISE),
                &cfg.cot.kernel,
            )?;
            Ok(Some(
                test.data
                    .dosages()
                    .iter()
                    .zip(before.iter().zip(&after))
                    .map(|(&x, (b, a))| (x, a.0, b.0, a.1))
                    .collect(),
            ))
        },
    );
    let mut report = Report::new("cell-toy", &CELL_COLUMNS);
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        match res? {
            None => report.push(vec![
                "cell-toy".into(),
                m.into(),
                seed.into(),
                "failed".into(),
                Value::Empty,
                Value::Empty,
                Value::Empty,
                Value::Empty,
            ]),
            Some(rows) => {
                for (x, trained, untrained, err) in rows {
                    report.push(vec![
                        "cell-toy".into(),
                        m.into(),
                        seed.into(),
                        "dosage".into(),
                        x.into(),
                        trained.into(),
                        untrained.into(),
                        err.into(),
                    ]);
                }
            }
        }
    }
    Ok(report)
}

pub const PROMPT_COLUMNS: [&str; 8] = [
    "experiment",
    "m",
    "seed",
    "row",
    "init_loss",
    "final_loss",
    "transport",
    "reg1",
];

fn full_loss<P: Trainable>(p: &P) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let all: Vec<usize> = (0..p.n_samples()).collect();
    let (t, _) = p.loss(&tape, &all, &mut RngStream::new(0))?;
    let (total, transport, reg1, _) = t.values();
    Ok((total, transport, reg1))
}

pub fn run_prompt_toy(cfg: &ExperimentConfig) -> Result<Report> {
    let ev = &cfg.eval;
    let mc = &cfg.model;
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<Option<(f64, f64, f64, f64)>> {
            let data = gen_toy_prompt(
                &mut stream(seed, m, SOURCE_DATA),
                ev.n_prompts,
                m,
                ev.local_features,
                ev.feature_dim,
                ev.noise_sd,
            )?;
            let psi = ExplicitConditional::new(
                2 * ev.feature_dim,
                ev.n_prompts,
                false,
                &mc.hidden,
                mc.activation,
                model_seed(seed, 2),
            )?;
            let tc = train_cot(cfg, seed);
            let mut problem = PromptProblem::new(psi, data, tc.clone())?;
            let (init, _, _) = full_loss(&problem)?;
            match train(&mut problem, &tc, |_| {}) {
                Ok(_) => {}
                Err(e) if is_divergence(&e) => return Ok(None),
                Err(e) => return Err(e),
            }
            let (fin, tr, r1) = full_loss(&problem)?;
            Ok(Some((init, fin, tr, r1)))
        },
    );
    let mut report = Report::new("prompt-toy", &PROMPT_COLUMNS);
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        match res? {
            None => report.push(vec![
                "prompt-toy".into(),
                m.into(),
                seed.into(),
                "failed".into(),
                Value::Empty,
                Value::Empty,
                Value::Empty,
                Value::Empty,
            ]),
            Some((a, b, c, d)) => report.push(vec![
                "prompt-toy".into(),
                m.into(),
                seed.into(),
                "cell".into(),
                a.into(),
                b.into(),
                c.into(),
                d.into(),
            ]),
        }
    }
    Ok(report)
}

pub const GRADCHECK_COLUMNS: [&str; 7] = [
    "experiment",
    "case",
    "kind",
    "seed",
    "max_rel_error",
    "tolerance",
    "passed",
];

pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Report> {
    let cases = gradsuite::cases();
    let items: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let (step, tol) = (cfg.eval.grad_step, cfg.eval.grad_tolerance);
    let results = par_map(cfg.threads, &items, |&(c, s)| (cases[c].run)(s, step, tol));
    let mut report = Report::new("gradcheck", &GRADCHECK_COLUMNS);
    for (&(c, s), res) in items.iter().zip(results) {
        let rep = res?;
        let kind = match cases[c].kind {
            gradsuite::CaseKind::Primitive => "primitive",
            gradsuite::CaseKind::Objective => "objective",
        };
        report.push(vec![
            "gradcheck".into(),
            cases[c].name.into(),
            kind.into(),
            s.into(),
            rep.max_rel_error.into(),
            tol.into(),
            rep.passed().into(),
        ]);
    }
    Ok(report)
}

/// Fixed plan π(· | x) = N(a·x + b, τ²) used by the concentration check.
pub const PLAN_SLOPE: f64 = -2.0;
pub const PLAN_INTERCEPT: f64 = 1.0;
pub const PLAN_SD: f64 = 0.5;

fn plan_mean(x: f64) -> f64 {
    PLAN_SLOPE * x + PLAN_INTERCEPT
}

fn rbf_bandwidth(kernel: &Kernel) -> Result<f64> {
    if kernel.family != KernelFamily::Rbf {
        return Err(CotError::InvalidParameter(
            "the concentration check needs an RBF kernel".into(),
        ));
    }
    Ok(kernel.bandwidth)
}

/// MMD²(N(μ, τ²), δ_y) under k(a, b) = exp(−(a−b)²/(2s²)), in closed form.
pub fn gaussian_dirac_mmd2(s2: f64, mu: f64, tau2: f64, y: f64) -> f64 {
    let self_term = (s2 / (s2 + 2.0 * tau2)).sqrt();
    let cross = (s2 / (s2 + tau2)).sqrt() * (-(mu - y).powi(2) / (2.0 * (s2 + tau2))).exp();
    self_term - 2.0 * cross + 1.0
}

/// E_y MMD²(N(μ, τ²), δ_y) for y ~ N(m, v).
pub fn expected_gaussian_dirac_mmd2(s2: f64, mu: f64, tau2: f64, m: f64, v: f64) -> f64 {
    let self_term = (s2 / (s2 + 2.0 * tau2)).sqrt();
    let s = s2 + tau2;
    let cross = (s2 / (s + v)).sqrt() * (-(mu - m).powi(2) / (2.0 * (s + v))).exp();
    self_term - 2.0 * cross + 1.0
}

/// Composite Simpson rule on [a, b] with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Population value of the sample-level regularizer for the fixed plan.
pub fn concentration_population(kernel: &Kernel) -> Result<f64> {
    let s2 = rbf_bandwidth(kernel)?;
    let spec = ConditionalGaussianSpec::converge_source();
    if (spec.alpha, spec.beta) != (2.0, 4.0) {
        return Err(CotError::InvalidParameter(
            "density below assumes Beta(2, 4)".into(),
        ));
    }
    Ok(simpson(
        |x| {
            20.0 * x
                * (1.0 - x).powi(3)
                * expected_gaussian_dirac_mmd2(
                    s2,
                    plan_mean(x),
                    PLAN_SD * PLAN_SD,
                    spec.mean(x),
                    spec.variance(x),
                )
        },
        0.0,
        1.0,
        4000,
    ))
}

/// The empirical regularizer (1/m) Σ MMD²(π(·|xᵢ), δ_{yᵢ}) on a dataset.
pub fn concentration_estimate(kernel: &Kernel, data: &JointDataset) -> Result<f64> {
    let s2 = rbf_bandwidth(kernel)?;
    let n = data.len() as f64;
    Ok(data
        .x()
        .column(0)
        .iter()
        .zip(data.y().column(0))
        .map(|(&x, &y)| gaussian_dirac_mmd2(s2, plan_mean(x), PLAN_SD * PLAN_SD, y))
        .sum::<f64>()
        / n)
}

/// 2√((2/m) log(2/δ)).
pub fn lemma_bound(m: usize, delta: f64) -> f64 {
    2.0 * ((2.0 / m as f64) * (2.0 / delta).ln()).sqrt()
}

pub const CONCENTRATION_COLUMNS: [&str; 10] = [
    "experiment",
    "seed",
    "m",
    "row",
    "resamples",
    "spread",
    "max_deviation",
    "bound",
    "ratio",
    "passed",
];

pub const RATIO_RANGE: (f64, f64) = (1.6, 2.6);

pub fn run_concentration(cfg: &ExperimentConfig) -> Result<Report> {
    let kernel = &cfg.cot.kernel;
    let pop = concentration_population(kernel)?;
    let spec = ConditionalGaussianSpec::converge_source();
    let n_res = cfg.eval.resamples;
    let results = par_map(
        cfg.threads,
        &cells(cfg),
        |&(m, seed)| -> Result<(f64, f64)> {
            let mut r = stream(seed, m, SOURCE_DATA);
            let mut est = Vec::with_capacity(n_res);
            for _ in 0..n_res {
                est.push(concentration_estimate(
                    kernel,
                    &gen_conditional_gaussian(&mut r, &spec, m)?,
                )?);
            }
            let max_dev = est.iter().map(|e| (e - pop).abs()).fold(0.0, f64::max);
            Ok((sample_sd(&est), max_dev))
        },
    );
    let mut report = Report::new("concentration", &CONCENTRATION_COLUMNS);
    let mut spreads = Vec::new();
    for (&(m, seed), res) in cells(cfg).iter().zip(results) {
        let (spread, dev) = res?;
        let bound = lemma_bound(m, cfg.eval.delta);
        report.push(vec![
            "concentration".into(),
            seed.into(),
            m.into(),
            "m".into(),
            n_res.into(),
            spread.into(),
            dev.into(),
            bound.into(),
            Value::Empty,
            (dev < bound).into(),
        ]);
        spreads.push((seed, m, spread));
    }
    for &(seed, m, s) in &spreads {
        if let Some(&(_, _, s4)) = spreads
            .iter()
            .find(|(sd, mm, _)| *sd == seed && *mm == 4 * m)
        {
            let ratio = s / s4;
            let ok = ratio >= RATIO_RANGE.0 && ratio <= RATIO_RANGE.1;
            report.push(vec![
                "concentration".into(),
                seed.into(),
                (4 * m).into(),
                "ratio".into(),
                n_res.into(),
                Value::Empty,
                Value::Empty,
                Value::Empty,
                ratio.into(),
                ok.into(),
            ]);
        }
    }
    Ok(report)
}

pub const REG_IDENTITY_COLUMNS: [&str; 6] = ["experiment", "seed", "trial", "gap", "v_s", "passed"];

pub const REG_IDENTITY_TOL: f64 = 1e-9;

fn random_rows(r: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::from_shape_fn((rows, cols), |_| r.uniform_open());
    for mut row in m.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    m
}

/// One random instance: a joint on 3 x-values × 4 support points in R² and
/// two random plans; returns (gap, R_joint − R_cond).
pub fn reg_identity_trial(r: &mut RngStream, kernel: &Kernel) -> Result<(f64, f64)> {
    let xs = vec![0.0, 0.5, 1.0];
    let support = r.normal_matrix(4, 2);
    let joint = random_rows(r, 1, 12)
        .into_shape_with_order((3, 4))
        .expect("12 entries");
    let s = DiscreteJoint::new(xs.clone(), support, joint)?;
    let pi = DiscretePlan::new(xs.clone(), random_rows(r, 3, 4))?;
    let pi2 = DiscretePlan::new(xs, random_rows(r, 3, 4))?;
    let gap = regularizer_equivalence_gap(&pi, &pi2, &s, kernel)?;
    let v = joint_regularizer(&pi, &s, kernel)? - conditional_regularizer(&pi, &s, kernel)?;
    Ok((gap, v))
}

pub fn run_reg_identity(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("reg-identity", &REG_IDENTITY_COLUMNS);
    for &seed in &cfg.seeds {
        let mut r = RngStream::with_stream(seed, SOURCE_DATA);
        for t in 0..cfg.eval.trials {
            let (gap, v) = reg_identity_trial(&mut r, &cfg.cot.kernel)?;
            report.push(vec![
                "reg-identity".into(),
                seed.into(),
                t.into(),
                gap.into(),
                v.into(),
                (gap.abs() <= REG_IDENTITY_TOL).into(),
            ]);
        }
    }
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::Converge => run_converge(cfg),
        Experiment::Barycenter => run_barycenter(cfg),
        Experiment::Classify => run_classify(cfg),
        Experiment::CellToy => run_cell_toy(cfg),
        Experiment::PromptToy => run_prompt_toy(cfg),
        Experiment::Gradcheck => run_gradcheck(cfg),
        Experiment::Concentration => run_concentration(cfg),
        Experiment::RegIdentity => run_reg_identity(cfg),
        Experiment::Regression => run_regression(cfg),
    }
}

/// The figure for a report: summary curves for training experiments, raw
/// measurements for the checks.
pub fn emit_plot(report: &Report) -> Plot {
    let (x, y, kinds, group, x_label): (&str, Vec<&str>, &[&str], &[&str], &str) =
        match report.experiment.as_str() {
            "converge" => ("m", vec!["grid_mse"], &["mean", "median"], &["row"], "m"),
            "barycenter" => ("m", vec!["mse_derived"], &["mean", "median"], &["row"], "m"),
            "regression" => (
                "seed",
                vec!["explained_variance"],
                &["cell"],
                &["m"],
                "seed",
            ),
            "classify" => ("seed", vec!["auc"], &["cell"], &["m"], "seed"),
            "cell-toy" => (
                "dosage",
                vec!["mmd_trained", "mmd_untrained"],
                &["dosage"],
                &["seed"],
                "dosage",
            ),
            "prompt-toy" => (
                "seed",
                vec!["init_loss", "final_loss"],
                &["cell"],
                &["m"],
                "seed",
            ),
            "gradcheck" => ("seed", vec!["max_rel_error"], &[], &["case"], "seed"),
            "concentration" => ("m", vec!["spread", "bound"], &["m"], &["seed"], "m"),
            "reg-identity" => ("trial", vec!["gap"], &[], &["seed"], "trial"),
            _ => ("x", vec![], &[], &[], "x"),
        };
    let mut series = Vec::new();
    for col in &y {
        for mut s in series_from_report(report, kinds, group, x, col) {
            if y.len() > 1 {
                s.name = format!("{col} {}", s.name);
            }
            series.push(s);
        }
    }
    Plot {
        title: report.experiment.clone(),
        x_label: x_label.to_string(),
        y_label: y.join(", "),
        series,
    }
}

/// Writes `<exp>.csv`, `<exp>.svg` and `meta.json` into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tag = cfg.experiment.tag();
    report.write_csv(&dir.join(format!("{tag}.csv")))?;
    std::fs::write(dir.join(format!("{tag}.svg")), emit_plot(report).render())?;
    std::fs::write(dir.join("meta.json"), meta_json(cfg)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_noise_has_exact_moments() {
        let z = standardized_normal(&mut RngStream::new(3), 500, 3);
        for c in z.columns() {
            assert!(c.sum().abs() < 1e-10);
            assert!((c.iter().map(|v| v * v).sum::<f64>() / 500.0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_coupling_recovers_the_closed_form() {
        let cfg = ExperimentConfig::defaults_for(Experiment::Converge);
        let grid = cfg.eval.grid();
        let noise = eval_noise(&mut RngStream::new(1), cfg.eval.eval_draws, 1, 1);
        let est = transport_cost_grid(&MonotoneCoupling, &grid, &noise).unwrap();
        assert!(grid_mse(&grid, &est).unwrap() <= 1e-6);
    }

    #[test]
    fn auc_handles_ties_and_perfect_scores() {
        assert_eq!(
            binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]),
            Some(1.0)
        );
        assert_eq!(
            binary_auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]),
            Some(0.5)
        );
        // one tie between a positive and a negative counts one half
        assert_eq!(
            binary_auc(&[0.1, 0.5, 0.5], &[false, false, true]),
            Some(0.75)
        );
        assert_eq!(binary_auc(&[0.1], &[true]), None);
    }

    #[test]
    fn explained_variance_of_perfect_and_constant_predictions() {
        let y = [1.0, 2.0, 4.0];
        assert_eq!(explained_variance(&y, &y), 1.0);
        assert!(explained_variance(&y, &[0.0; 3]).abs() < 1e-15);
    }

    #[test]
    fn gaussian_dirac_closed_form_matches_sample_mmd() {
        // a large moment-matched sample of N(μ, τ²) approximates the plan
        let (mu, tau, y, s2) = (0.3, 0.5, -0.4, 1.0);
        let z = standardized_normal(&mut RngStream::new(5), 4000, 1);
        let pts = z.mapv(|v| mu + tau * v);
        let k = Kernel::rbf(s2).unwrap();
        let sample = crate::kernels::mmd2_to_dirac(
            &k,
            &WeightedSamples::uniform(pts).unwrap(),
            ndarray::array![y].view(),
        )
        .unwrap();
        assert!((sample - gaussian_dirac_mmd2(s2, mu, tau * tau, y)).abs() < 2e-3);
    }

    #[test]
    fn expected_closed_form_matches_quadrature_over_y() {
        let (s2, mu, tau2, m, v) = (1.0, 0.2, 0.25, -0.3, 1.7f64);
        let sd = v.sqrt();
        let direct = simpson(
            |z| {
                (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
                    * gaussian_dirac_mmd2(s2, mu, tau2, m + sd * z)
            },
            -12.0,
            12.0,
            4000,
        );
        assert!((direct - expected_gaussian_dirac_mmd2(s2, mu, tau2, m, v)).abs() < 1e-10);
    }

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(4, &items, |i| i * i), par_map(1, &items, |i| i * i));
    }

    #[test]
    fn rho_one_barycenter_is_the_first_law() {
        let first = ConditionalGaussianSpec::barycenter_first();
        let mut r = RngStream::new(2);
        let y = standardized_normal(&mut r, 500, 1);
        let z = standardized_normal(&mut r, 500, 1).column(0).to_vec();
        let eta = standardized_normal(&mut r, 500, 2);
        let psi =
            ImplicitGenerator::new(2, 2, 1, &[4], crate::models::Activation::Tanh, 0).unwrap();
        let x = 0.3;
        let ys: Vec<f64> = y
            .column(0)
            .iter()
            .map(|v| first.mean(x) + first.variance(x).sqrt() * v)
            .collect();
        let b = barycenter_samples(&psi, x, 1.0, &ys, &eta).unwrap();
        assert_eq!(b, ys);
        let (w1, _) = barycenter_w1(&b, x, 1.0, &z).unwrap();
        assert!(w1 < 0.15, "{w1}");
    }
}
