//! Explicit (finite label set) COT estimators: the general two-factor loss,
//! the classification specialization with a classifier as π_θ, and the
//! prompt-learning loss with a cumulative-marginal regularizer.
//!
//! Measures over labels are weight vectors; a Dirac at label l is the
//! one-hot row e_l, so a JointDataset's `y` block carries one-hot labels.
//! With label Gram matrix K, MMD²(p, q) = (p − q) K (p − q)ᵀ.

use crate::diffengine::{Matrix, Tape, Var};
use crate::error::{shape_err, CotError, Result};
use crate::kernels::{gram, Kernel};
use crate::models::{plan_marginal, BoundExplicit, ExplicitConditional};
use crate::rng::RngStream;

use super::train::{subsample, Trainable};
use super::{ensure_finite, ground_cost, CotConfig, GroundCost, JointDataset, LossTerms};

/// Cost and kernel Gram matrices over a finite label set.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    cost: Matrix,
    gram: Matrix,
}

impl LabelSpace {
    pub fn new(cost: Matrix, gram: Matrix) -> Result<Self> {
        let n = cost.nrows();
        if cost.dim() != (n, n) || gram.dim() != (n, n) {
            return shape_err(
                "LabelSpace",
                format!("cost {:?}, gram {:?}", cost.dim(), gram.dim()),
            );
        }
        if n < 2 {
            return Err(CotError::InvalidParameter(
                "need at least two labels".into(),
            ));
        }
        if cost.iter().chain(gram.iter()).any(|v| !v.is_finite()) {
            return Err(CotError::NonFinite("label matrices".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if (gram[[i, j]] - gram[[j, i]]).abs() > 1e-12 {
                    return Err(CotError::InvalidParameter(
                        "label Gram matrix is not symmetric".into(),
                    ));
                }
            }
        }
        Ok(Self { cost, gram })
    }

    /// Cost and Gram computed from label embedding vectors (one per row).
    pub fn from_embeddings(embeddings: &Matrix, cost: GroundCost, kernel: &Kernel) -> Result<Self> {
        Self::new(
            ground_cost(cost, embeddings, embeddings)?,
            gram(kernel, embeddings, embeddings)?,
        )
    }

    /// 0-1 cost; kernel evaluated on one-hot embeddings.
    pub fn one_hot(n: usize, kernel: &Kernel) -> Result<Self> {
        let eye = Matrix::eye(n);
        let cost = Matrix::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
        Self::new(cost, gram(kernel, &eye, &eye)?)
    }

    pub fn len(&self) -> usize {
        self.cost.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cost(&self) -> &Matrix {
        &self.cost
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }
}

/// Row-wise (p − q) K (p − q)ᵀ, clamped at 0, as an n×1 node.
fn label_mmd_rows<'t>(p: Var<'t>, q: &Matrix, gram: &Matrix) -> Result<Var<'t>> {
    if p.shape() != q.dim() {
        return shape_err("label mmd", format!("{:?} vs {:?}", p.shape(), q.dim()));
    }
    let tape = p.tape();
    let d = p.sub(tape.constant(q.clone()))?;
    Ok(d.matmul(tape.constant(gram.clone()))?
        .mul(d)?
        .row_sums()
        .relu())
}

/// Per-row Σᵢⱼ c(lᵢ, lⱼ) π_ψ(lᵢ | lⱼ, x) π_θ(lⱼ | x), n×1.
fn explicit_transport_rows<'t>(
    theta_probs: Var<'t>,
    psi_given_label: &[Var<'t>],
    cost: &Matrix,
) -> Result<Var<'t>> {
    let n = cost.nrows();
    if psi_given_label.len() != n || theta_probs.shape().1 != n {
        return shape_err(
            "explicit transport",
            format!(
                "{} ψ factors, θ {:?}, {n} labels",
                psi_given_label.len(),
                theta_probs.shape()
            ),
        );
    }
    let tape = theta_probs.tape();
    let mut acc: Option<Var<'t>> = None;
    for (j, psi) in psi_given_label.iter().enumerate() {
        let col = tape.constant(cost.column(j).to_owned().insert_axis(ndarray::Axis(1)));
        let term = psi.mul_col(theta_probs.slice_cols(j, 1)?)?.matmul(col)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least two labels"))
}

/// Loss from probability tensors. `theta_probs` and `psi_given_label[j]`
/// are evaluated at the source covariates; `theta_target_probs` at the
/// target covariates. `source_y`/`target_y` are label weight rows.
pub fn cot_explicit_terms<'t>(
    theta_probs: Var<'t>,
    psi_given_label: &[Var<'t>],
    theta_target_probs: Var<'t>,
    source_y: &Matrix,
    target_y: &Matrix,
    labels: &LabelSpace,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    let transport = explicit_transport_rows(theta_probs, psi_given_label, labels.cost())?.mean();
    ensure_finite("transport term", transport)?;
    let marginal = plan_marginal(theta_probs, psi_given_label)?;
    let reg1 = label_mmd_rows(marginal, source_y, labels.gram())?.mean();
    ensure_finite("source regularizer", reg1)?;
    let reg2 = label_mmd_rows(theta_target_probs, target_y, labels.gram())?.mean();
    ensure_finite("target regularizer", reg2)?;
    LossTerms::combine(transport, reg1, Some(reg2), cfg.lambda1, cfg.lambda2)
}

fn psi_factors<'t>(psi: &BoundExplicit<'t>, x: &Matrix, n: usize) -> Result<Vec<Var<'t>>> {
    (0..n).map(|l| psi.probs_given_label(l, x)).collect()
}

fn check_labels(y: &Matrix, labels: &LabelSpace) -> Result<()> {
    if y.ncols() != labels.len() {
        return shape_err(
            "explicit loss",
            format!("{} label columns for {} labels", y.ncols(), labels.len()),
        );
    }
    Ok(())
}

pub fn cot_explicit_loss<'t>(
    psi: &BoundExplicit<'t>,
    theta: &BoundExplicit<'t>,
    source: &JointDataset,
    target: &JointDataset,
    labels: &LabelSpace,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    check_labels(source.y(), labels)?;
    check_labels(target.y(), labels)?;
    let tape = theta.params()[0].tape();
    let theta_src = theta.probs(tape.constant(source.x().clone()))?;
    let psis = psi_factors(psi, source.x(), labels.len())?;
    let theta_tgt = theta.probs(tape.constant(target.x().clone()))?;
    cot_explicit_terms(
        theta_src,
        &psis,
        theta_tgt,
        source.y(),
        target.y(),
        labels,
        cfg,
    )
}

/// Classification specialization: π_θ is the classifier f_θ and there is no
/// target-side regularizer.
pub fn cot_classification_terms<'t>(
    classifier_probs: Var<'t>,
    psi_given_label: &[Var<'t>],
    y: &Matrix,
    labels: &LabelSpace,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    let transport =
        explicit_transport_rows(classifier_probs, psi_given_label, labels.cost())?.mean();
    ensure_finite("transport term", transport)?;
    let marginal = plan_marginal(classifier_probs, psi_given_label)?;
    let reg1 = label_mmd_rows(marginal, y, labels.gram())?.mean();
    ensure_finite("source regularizer", reg1)?;
    LossTerms::combine(transport, reg1, None, cfg.lambda1, 0.0)
}

pub fn cot_classification_loss<'t>(
    psi: &BoundExplicit<'t>,
    classifier: &BoundExplicit<'t>,
    batch: &JointDataset,
    labels: &LabelSpace,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    check_labels(batch.y(), labels)?;
    let tape = classifier.params()[0].tape();
    let f = classifier.probs(tape.constant(batch.x().clone()))?;
    let psis = psi_factors(psi, batch.x(), labels.len())?;
    cot_classification_terms(f, &psis, batch.y(), labels, cfg)
}

/// Synthetic prompt-learning data: N prompt features and, per image, M local
/// visual features, all of width d.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptData {
    prompts: Matrix,
    images: Vec<Matrix>,
}

impl PromptData {
    pub fn new(prompts: Matrix, images: Vec<Matrix>) -> Result<Self> {
        let d = prompts.ncols();
        let m = images.first().map(|v| v.nrows()).unwrap_or(0);
        if prompts.nrows() < 2 || m == 0 {
            return Err(CotError::InvalidParameter(
                "need ≥ 2 prompts and ≥ 1 non-empty image".into(),
            ));
        }
        if images.iter().any(|v| v.dim() != (m, d)) {
            return shape_err("PromptData", format!("every image must be {m}×{d}"));
        }
        Ok(Self { prompts, images })
    }

    pub fn prompts(&self) -> &Matrix {
        &self.prompts
    }

    pub fn images(&self) -> &[Matrix] {
        &self.images
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.nrows()
    }

    pub fn local_features(&self) -> usize {
        self.images[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.prompts.ncols()
    }

    /// ψ input for one image: each local feature next to the image mean.
    pub fn psi_input(&self, image: usize) -> Matrix {
        let v = &self.images[image];
        let mean = v.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let mut out = Matrix::zeros((v.nrows(), 2 * v.ncols()));
        out.slice_mut(ndarray::s![.., ..v.ncols()]).assign(v);
        for mut row in out.slice_mut(ndarray::s![.., v.ncols()..]).rows_mut() {
            row.assign(&mean);
        }
        out
    }
}

/// `plan` stacks K blocks of M rows, row (q, j) = π_ψ(· | l_jq, x_q) over N
/// prompts; `cost[(q, j), i]` = c(prompt i, l_jq). Local features are
/// weighted uniformly and the cumulative marginal is renormalized to mass 1.
pub fn cot_prompt_terms<'t>(
    plan: Var<'t>,
    cost: &Matrix,
    prompt_gram: &Matrix,
    images: usize,
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    let (rows, n) = plan.shape();
    if cost.dim() != (rows, n) || prompt_gram.dim() != (n, n) || images == 0 || rows % images != 0 {
        return shape_err(
            "prompt loss",
            format!(
                "plan {:?}, cost {:?}, gram {:?}, {images} images",
                plan.shape(),
                cost.dim(),
                prompt_gram.dim()
            ),
        );
    }
    let tape = plan.tape();
    let transport = plan
        .mul(tape.constant(cost.clone()))?
        .sum()
        .scale(1.0 / rows as f64);
    ensure_finite("transport term", transport)?;
    let marginal = plan.col_sums().scale(1.0 / rows as f64);
    let u = Matrix::from_elem((1, n), 1.0 / n as f64);
    let reg1 = label_mmd_rows(marginal, &u, prompt_gram)?.sum();
    ensure_finite("prompt regularizer", reg1)?;
    LossTerms::combine(transport, reg1, None, cfg.lambda1, 0.0)
}

pub fn cot_prompt_loss<'t>(
    psi: &BoundExplicit<'t>,
    data: &PromptData,
    image_ids: &[usize],
    cfg: &CotConfig,
) -> Result<LossTerms<'t>> {
    if image_ids.is_empty() {
        return Err(CotError::InvalidParameter("no images in batch".into()));
    }
    let tape = psi.params()[0].tape();
    let mut blocks = Vec::with_capacity(image_ids.len());
    let mut costs = Vec::with_capacity(image_ids.len());
    for &q in image_ids {
        blocks.push(psi.probs(tape.constant(data.psi_input(q)))?);
        costs.push(ground_cost(
            GroundCost::Cosine,
            &data.images[q],
            &data.prompts,
        )?);
    }
    let plan = Var::concat_rows(&blocks)?;
    let views: Vec<_> = costs.iter().map(|c| c.view()).collect();
    let cost = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    let prompt_gram = gram(&cfg.kernel, &data.prompts, &data.prompts)?;
    cot_prompt_terms(plan, &cost, &prompt_gram, image_ids.len(), cfg)
}

/// θ: x ↦ labels; ψ: (one-hot l, x) ↦ labels.
#[derive(Clone, Debug)]
pub struct ExplicitProblem {
    pub theta: ExplicitConditional,
    pub psi: ExplicitConditional,
    pub source: JointDataset,
    pub target: JointDataset,
    pub labels: LabelSpace,
    pub config: CotConfig,
}

impl ExplicitProblem {
    pub fn new(
        theta: ExplicitConditional,
        psi: ExplicitConditional,
        source: JointDataset,
        target: JointDataset,
        labels: LabelSpace,
        config: CotConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_explicit_pair(&theta, &psi, source.x_dim(), &labels)?;
        check_labels(source.y(), &labels)?;
        check_labels(target.y(), &labels)?;
        if target.x_dim() != source.x_dim() {
            return shape_err(
                "ExplicitProblem",
                "source and target covariates differ in width",
            );
        }
        Ok(Self {
            theta,
            psi,
            source,
            target,
            labels,
            config,
        })
    }
}

fn check_explicit_pair(
    theta: &ExplicitConditional,
    psi: &ExplicitConditional,
    x_dim: usize,
    labels: &LabelSpace,
) -> Result<()> {
    if theta.is_label_conditioned() || !psi.is_label_conditioned() {
        return Err(CotError::InvalidParameter(
            "θ must condition on x alone and ψ on (label, x)".into(),
        ));
    }
    if theta.n_labels() != labels.len() || psi.n_labels() != labels.len() {
        return shape_err(
            "explicit models",
            "label counts differ from the label space",
        );
    }
    if theta.x_dim() != x_dim || psi.x_dim() != x_dim {
        return shape_err("explicit models", "covariate width mismatch");
    }
    Ok(())
}

impl Trainable for ExplicitProblem {
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
        let theta = self.theta.bind(tape);
        let psi = self.psi.bind(tape);
        let terms = cot_explicit_loss(&psi, &theta, &source, &target, &self.labels, &cfg)?;
        let mut params = theta.params().to_vec();
        params.extend_from_slice(psi.params());
        Ok((terms, params))
    }
}

#[derive(Clone, Debug)]
pub struct ClassificationProblem {
    pub classifier: ExplicitConditional,
    pub psi: ExplicitConditional,
    pub data: JointDataset,
    pub labels: LabelSpace,
    pub config: CotConfig,
}

impl ClassificationProblem {
    pub fn new(
        classifier: ExplicitConditional,
        psi: ExplicitConditional,
        data: JointDataset,
        labels: LabelSpace,
        config: CotConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_explicit_pair(&classifier, &psi, data.x_dim(), &labels)?;
        check_labels(data.y(), &labels)?;
        Ok(Self {
            classifier,
            psi,
            data,
            labels,
            config,
        })
    }
}

impl Trainable for ClassificationProblem {
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.classifier.net_mut().params_mut();
        p.extend(self.psi.net_mut().params_mut());
        p
    }

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &[usize],
        _rng: &mut RngStream,
    ) -> Result<(LossTerms<'t>, Vec<Var<'t>>)> {
        let cfg = self.config.resolved(self.data.len());
        let f = self.classifier.bind(tape);
        let psi = self.psi.bind(tape);
        let terms =
            cot_classification_loss(&psi, &f, &self.data.select(batch), &self.labels, &cfg)?;
        let mut params = f.params().to_vec();
        params.extend_from_slice(psi.params());
        Ok((terms, params))
    }
}

/// ψ_r maps [local feature, image mean] to a distribution over prompts.
#[derive(Clone, Debug)]
pub struct PromptProblem {
    pub psi: ExplicitConditional,
    pub data: PromptData,
    pub config: CotConfig,
}

impl PromptProblem {
    pub fn new(psi: ExplicitConditional, data: PromptData, config: CotConfig) -> Result<Self> {
        config.validate()?;
        if psi.is_label_conditioned()
            || psi.x_dim() != 2 * data.dim()
            || psi.n_labels() != data.n_prompts()
        {
            return shape_err(
                "PromptProblem",
                "ψ must map 2d features to N prompt probabilities",
            );
        }
        Ok(Self { psi, data, config })
    }
}

impl Trainable for PromptProblem {
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.psi.net_mut().params_mut()
    }

    fn n_samples(&self) -> usize {
        self.data.images.len()
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &[usize],
        _rng: &mut RngStream,
    ) -> Result<(LossTerms<'t>, Vec<Var<'t>>)> {
        let cfg = self.config.resolved(self.data.images.len());
        let psi = self.psi.bind(tape);
        let terms = cot_prompt_loss(&psi, &self.data, batch, &cfg)?;
        Ok((terms, psi.params().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use ndarray::array;

    fn cfg(l1: f64, l2: f64) -> CotConfig {
        CotConfig {
            lambda1: l1,
            lambda2: l2,
            ..CotConfig::default()
        }
    }

    fn uniform(tape: &Tape, rows: usize, n: usize) -> Var<'_> {
        tape.leaf(Matrix::from_elem((rows, n), 1.0 / n as f64))
    }

    fn labels01(n: usize) -> LabelSpace {
        LabelSpace::one_hot(n, &Kernel::rbf(1.0).unwrap()).unwrap()
    }

    #[test]
    fn uniform_conditionals_give_half_transport() {
        let tape = Tape::new();
        let th = uniform(&tape, 3, 2);
        let ps = [uniform(&tape, 3, 2), uniform(&tape, 3, 2)];
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let t = cot_explicit_terms(th, &ps, th, &y, &y, &labels01(2), &cfg(0.0, 0.0)).unwrap();
        assert!((t.transport.item() - 0.5).abs() < 1e-15);
        assert_eq!(t.total.item(), t.transport.item());
    }

    #[test]
    fn zero_cost_and_no_regularizers_is_zero() {
        let tape = Tape::new();
        let th = tape.leaf(array![[0.3, 0.7], [0.9, 0.1]]);
        let ps = [
            tape.leaf(array![[0.2, 0.8], [0.5, 0.5]]),
            tape.leaf(array![[0.6, 0.4], [0.1, 0.9]]),
        ];
        let labels = LabelSpace::new(Matrix::zeros((2, 2)), Matrix::eye(2)).unwrap();
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let t = cot_explicit_terms(th, &ps, th, &y, &y, &labels, &cfg(0.0, 0.0)).unwrap();
        assert_eq!(t.total.item(), 0.0);
    }

    #[test]
    fn exact_plan_has_zero_regularizers() {
        let tape = Tape::new();
        let y = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let th = tape.leaf(y.clone());
        let ps: Vec<_> = (0..3)
            .map(|l| {
                let mut m = Matrix::zeros((2, 3));
                m.column_mut(l).fill(1.0);
                tape.leaf(m)
            })
            .collect();
        let t = cot_explicit_terms(th, &ps, th, &y, &y, &labels01(3), &cfg(10.0, 10.0)).unwrap();
        assert_eq!(t.reg1.item(), 0.0);
        assert_eq!(t.reg2.unwrap().item(), 0.0);
        assert_eq!(t.transport.item(), 0.0);
    }

    #[test]
    fn explicit_hand_expansion() {
        // one sample, two labels, all factors hand-set
        let tape = Tape::new();
        let (a, b, c) = (0.3, 0.6, 0.2);
        let th = tape.leaf(array![[a, 1.0 - a]]);
        let ps = [
            tape.leaf(array![[b, 1.0 - b]]),
            tape.leaf(array![[c, 1.0 - c]]),
        ];
        let tt = tape.leaf(array![[0.8, 0.2]]);
        let cost = array![[0.0, 2.0], [3.0, 0.0]];
        let k = 0.4;
        let labels = LabelSpace::new(cost, array![[1.0, k], [k, 1.0]]).unwrap();
        let (ys, yt) = (array![[0.0, 1.0]], array![[1.0, 0.0]]);
        let t = cot_explicit_terms(th, &ps, tt, &ys, &yt, &labels, &cfg(5.0, 7.0)).unwrap();
        // Σᵢⱼ c(i,j) ψ(i|j) θ(j)
        let transport = 3.0 * (1.0 - b) * a + 2.0 * c * (1.0 - a);
        let p0 = b * a + c * (1.0 - a);
        let mmd = |d0: f64, d1: f64| d0 * d0 + d1 * d1 + 2.0 * k * d0 * d1;
        let expected = transport + 5.0 * mmd(p0, -p0) + 7.0 * mmd(0.8 - 1.0, 0.2);
        assert!((t.total.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn classification_cases() {
        let tape = Tape::new();
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let ident: Vec<_> = (0..2)
            .map(|l| {
                let mut m = Matrix::zeros((2, 2));
                m.column_mut(l).fill(1.0);
                tape.leaf(m)
            })
            .collect();
        let perfect = tape.leaf(y.clone());
        let t =
            cot_classification_terms(perfect, &ident, &y, &labels01(2), &cfg(3.0, 0.0)).unwrap();
        assert_eq!(t.reg1.item(), 0.0);
        assert!(t.reg2.is_none());

        let u = uniform(&tape, 2, 2);
        let ps = [uniform(&tape, 2, 2), uniform(&tape, 2, 2)];
        let labels = LabelSpace::new(array![[0.0, 4.0], [4.0, 0.0]], Matrix::eye(2)).unwrap();
        let t = cot_classification_terms(u, &ps, &y, &labels, &cfg(0.0, 0.0)).unwrap();
        // 0.5 × mean cost entry
        assert!((t.transport.item() - 0.5 * 2.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn prompt_uniform_plan_has_zero_regularizer() {
        let tape = Tape::new();
        let plan = uniform(&tape, 6, 3);
        let cost = Matrix::from_elem((6, 3), 0.4);
        let g = gram(&Kernel::rbf(1.0).unwrap(), &Matrix::eye(3), &Matrix::eye(3)).unwrap();
        let t = cot_prompt_terms(plan, &cost, &g, 2, &cfg(9.0, 0.0)).unwrap();
        assert!(t.reg1.item().abs() < 1e-15);
        assert!((t.transport.item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn prompt_hand_expansion() {
        // K=1, M=2, N=2
        let tape = Tape::new();
        let (p, q) = (0.9, 0.3);
        let plan = tape.leaf(array![[p, 1.0 - p], [q, 1.0 - q]]);
        let cost = array![[0.1, 0.5], [0.7, 0.2]];
        let k = 0.25;
        let g = array![[1.0, k], [k, 1.0]];
        let t = cot_prompt_terms(plan, &cost, &g, 1, &cfg(2.0, 0.0)).unwrap();
        let transport = 0.5 * (0.1 * p + 0.5 * (1.0 - p) + 0.7 * q + 0.2 * (1.0 - q));
        let m0 = 0.5 * (p + q) - 0.5;
        let m1 = -m0;
        let reg = m0 * m0 + m1 * m1 + 2.0 * k * m0 * m1;
        assert!((t.total.item() - (transport + 2.0 * reg)).abs() < 1e-12);
    }

    #[test]
    fn prompt_zero_cost_when_aligned() {
        let prompts = array![[1.0, 0.0], [2.0, 0.0]];
        let images = vec![array![[3.0, 0.0], [0.5, 0.0]]];
        let data = PromptData::new(prompts, images).unwrap();
        let psi = ExplicitConditional::new(4, 2, false, &[4], Activation::Tanh, 0).unwrap();
        let tape = Tape::new();
        let t = cot_prompt_loss(&psi.bind(&tape), &data, &[0], &cfg(0.0, 0.0)).unwrap();
        assert!(t.transport.item().abs() < 1e-15);
    }

    #[test]
    fn model_level_losses_run_and_are_nonnegative() {
        let theta = ExplicitConditional::new(2, 3, false, &[5], Activation::Tanh, 1).unwrap();
        let psi = ExplicitConditional::new(2, 3, true, &[5], Activation::Tanh, 2).unwrap();
        let x = array![[0.1, 0.2], [-1.0, 0.4]];
        let y = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let d = JointDataset::new(x, y).unwrap();
        let tape = Tape::new();
        let t = cot_explicit_loss(
            &psi.bind(&tape),
            &theta.bind(&tape),
            &d,
            &d,
            &labels01(3),
            &cfg(1.0, 1.0),
        )
        .unwrap();
        assert!(t.total.item() >= 0.0);
        let problem = ExplicitProblem::new(
            theta.clone(),
            psi.clone(),
            d.clone(),
            d.clone(),
            labels01(3),
            cfg(1.0, 1.0),
        );
        assert!(problem.is_ok());
        assert!(
            ExplicitProblem::new(psi, theta, d.clone(), d, labels01(3), cfg(1.0, 1.0)).is_err()
        );
    }

    #[test]
    fn label_space_validation() {
        assert!(LabelSpace::new(Matrix::zeros((2, 2)), array![[1.0, 0.2], [0.3, 1.0]]).is_err());
        assert!(LabelSpace::new(Matrix::zeros((1, 1)), Matrix::eye(1)).is_err());
        let emb = array![[1.0, 0.0], [0.0, 1.0]];
        let l =
            LabelSpace::from_embeddings(&emb, GroundCost::SqEuclidean, &Kernel::rbf(1.0).unwrap())
                .unwrap();
        assert_eq!(l.cost()[[0, 1]], 2.0);
    }
}
