//! Transport-plan parameterizations.
//!
//! A plan π(y, y′ | x) is factored as π_θ(· | x) · π_ψ(· | y, x). Each factor is
//! an [`Mlp`], wrapped either as an [`ImplicitGenerator`] (noise in, sample
//! out) or as an [`ExplicitConditional`] (softmax over a finite label set).
//!
//! Weight matrices are stored `fan_in × fan_out` so a batch forward pass is
//! `X·W + b` with one sample per row.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Matrix, Tape, Var};
use crate::error::{shape_err, CotError, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths..., output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            widths,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(CotError::InvalidParameter(format!(
                "an MLP needs input, at least one hidden and an output width; got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(CotError::InvalidParameter(format!(
                "layer widths must be positive: {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, reproducible from `config.seed`.
    pub fn init(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed);
        let layers = config
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.uniform_range(-limit, limit)
                });
                Layer {
                    weight,
                    bias: Matrix::zeros((1, fan_out)),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .widths
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros((w[0], w[1])),
                bias: Matrix::zeros((1, w[1])),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.config.widths.last().expect("validated")
    }

    /// Parameters in binding order: w0, b0, w1, b1, ...
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            params: self
                .params()
                .into_iter()
                .map(|p| tape.leaf(p.clone()))
                .collect(),
            activation: self.config.activation,
            input_dim: self.input_dim(),
        }
    }

    pub fn forward_values(&self, input: &Matrix) -> Result<Matrix> {
        let tape = Tape::detached();
        let out = self.bind(&tape).forward(tape.constant(input.clone()))?;
        let v = out.value().clone();
        Ok(v)
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.row(0).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(CotError::InvalidParameter(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        if ck.layers.len() + 1 != ck.config.widths.len() {
            return shape_err("checkpoint", "layer count does not match widths");
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for (l, w) in ck.layers.iter().zip(ck.config.widths.windows(2)) {
            let flat: Vec<f64> = l.weight.iter().flatten().copied().collect();
            if l.weight.len() != w[0] || l.bias.len() != w[1] || flat.len() != w[0] * w[1] {
                return shape_err("checkpoint", format!("layer does not match widths {w:?}"));
            }
            layers.push(Layer {
                weight: Array2::from_shape_vec((w[0], w[1]), flat).expect("length checked"),
                bias: Array2::from_shape_vec((1, w[1]), l.bias.clone()).expect("length checked"),
            });
        }
        Ok(Self {
            config: ck.config.clone(),
            layers,
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "cot-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: a config header followed by row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: MlpConfig,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    /// `fan_in` rows of `fan_out` entries.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// An MLP whose parameters live on a tape.
pub struct BoundMlp<'t> {
    params: Vec<Var<'t>>,
    activation: Activation,
    input_dim: usize,
}

impl<'t> BoundMlp<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn forward(&self, input: Var<'t>) -> Result<Var<'t>> {
        if input.shape().1 != self.input_dim {
            return shape_err(
                "mlp forward",
                format!(
                    "input has {} columns, network expects {}",
                    input.shape().1,
                    self.input_dim
                ),
            );
        }
        let n_layers = self.params.len() / 2;
        let mut h = input;
        for (i, wb) in self.params.chunks(2).enumerate() {
            h = h.matmul(wb[0])?.add_row(wb[1])?;
            if i + 1 < n_layers {
                h = match self.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Relu => h.relu(),
                };
            }
        }
        Ok(h)
    }
}

/// Noise-fed sampler: row i of the output is `net([conditioning_i, noise_i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitGenerator {
    net: Mlp,
    cond_dim: usize,
    noise_dim: usize,
}

impl ImplicitGenerator {
    pub fn new(
        cond_dim: usize,
        noise_dim: usize,
        out_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut widths = vec![cond_dim + noise_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        Self::from_mlp(
            Mlp::init(MlpConfig::new(widths, activation, seed))?,
            cond_dim,
        )
    }

    pub fn from_mlp(net: Mlp, cond_dim: usize) -> Result<Self> {
        let input = net.input_dim();
        if cond_dim > input {
            return Err(CotError::InvalidParameter(format!(
                "conditioning width {cond_dim} exceeds network input {input}"
            )));
        }
        Ok(Self {
            noise_dim: input - cond_dim,
            net,
            cond_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn out_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundGenerator<'t> {
        BoundGenerator {
            mlp: self.net.bind(tape),
            cond_dim: self.cond_dim,
            noise_dim: self.noise_dim,
        }
    }

    /// Graph-free sampling.
    pub fn sample(&self, conditioning: &Matrix, noise: &Matrix) -> Result<Matrix> {
        let tape = Tape::detached();
        let out = self
            .bind(&tape)
            .sample(tape.constant(conditioning.clone()), noise)?;
        let v = out.value().clone();
        Ok(v)
    }

    pub fn to_checkpoint(&self) -> GeneratorCheckpoint {
        GeneratorCheckpoint {
            cond_dim: self.cond_dim,
            noise_dim: self.noise_dim,
            net: self.net.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &GeneratorCheckpoint) -> Result<Self> {
        let g = Self::from_mlp(Mlp::from_checkpoint(&ck.net)?, ck.cond_dim)?;
        if g.noise_dim != ck.noise_dim {
            return shape_err("checkpoint", "noise width does not match network input");
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub cond_dim: usize,
    pub noise_dim: usize,
    pub net: MlpCheckpoint,
}

pub struct BoundGenerator<'t> {
    mlp: BoundMlp<'t>,
    cond_dim: usize,
    noise_dim: usize,
}

impl<'t> BoundGenerator<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        self.mlp.params()
    }

    /// `conditioning` may carry gradients (e.g. the output of another
    /// generator); the noise is always a constant.
    pub fn sample(&self, conditioning: Var<'t>, noise: &Matrix) -> Result<Var<'t>> {
        let (n, c) = conditioning.shape();
        if c != self.cond_dim {
            return shape_err(
                "sample_implicit",
                format!("conditioning width {c}, expected {}", self.cond_dim),
            );
        }
        if noise.ncols() != self.noise_dim || noise.nrows() != n {
            return shape_err(
                "sample_implicit",
                format!(
                    "noise {:?}, expected ({n}, {})",
                    noise.dim(),
                    self.noise_dim
                ),
            );
        }
        let input = if self.noise_dim == 0 {
            conditioning
        } else {
            let eta = conditioning.tape().constant(noise.clone());
            Var::concat_cols(&[conditioning, eta])?
        };
        self.mlp.forward(input)
    }
}

/// Softmax conditional over `n_labels` labels.
///
/// With `label_conditioned` the input is `[one_hot(l_j), x]`, which models
/// π_ψ(· | l_j, x); otherwise the input is `x` alone, modelling π_θ(· | x).
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitConditional {
    net: Mlp,
    n_labels: usize,
    label_conditioned: bool,
}

impl ExplicitConditional {
    pub fn new(
        x_dim: usize,
        n_labels: usize,
        label_conditioned: bool,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if n_labels < 2 {
            return Err(CotError::InvalidParameter(
                "need at least two labels".into(),
            ));
        }
        let mut widths = vec![x_dim + if label_conditioned { n_labels } else { 0 }];
        widths.extend_from_slice(hidden);
        widths.push(n_labels);
        Ok(Self {
            net: Mlp::init(MlpConfig::new(widths, activation, seed))?,
            n_labels,
            label_conditioned,
        })
    }

    pub fn from_mlp(net: Mlp, n_labels: usize, label_conditioned: bool) -> Result<Self> {
        if net.output_dim() != n_labels {
            return shape_err(
                "ExplicitConditional",
                "output width must equal the label count",
            );
        }
        if label_conditioned && net.input_dim() < n_labels {
            return shape_err(
                "ExplicitConditional",
                "input too narrow for a one-hot label",
            );
        }
        Ok(Self {
            net,
            n_labels,
            label_conditioned,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn x_dim(&self) -> usize {
        self.net.input_dim()
            - if self.label_conditioned {
                self.n_labels
            } else {
                0
            }
    }

    pub fn is_label_conditioned(&self) -> bool {
        self.label_conditioned
    }

    /// `[one_hot(label), x_i]` for every row of `x`.
    pub fn label_input(&self, label: usize, x: &Matrix) -> Result<Matrix> {
        one_hot_input(label, self.n_labels, x)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundExplicit<'t> {
        BoundExplicit {
            mlp: self.net.bind(tape),
            n_labels: self.n_labels,
        }
    }

    /// Graph-free class probabilities π(· | x) (or π(· | l, x) with `label`).
    pub fn forward_explicit(&self, x: &Matrix, label: Option<usize>) -> Result<Matrix> {
        let tape = Tape::detached();
        let bound = self.bind(&tape);
        let out = match label {
            Some(l) => bound.probs_given_label(l, x)?,
            None => bound.probs(tape.constant(x.clone()))?,
        };
        let v = out.value().clone();
        Ok(v)
    }
}

/// `[one_hot(label), x_i]` for every row of `x`.
pub fn one_hot_input(label: usize, n_labels: usize, x: &Matrix) -> Result<Matrix> {
    if label >= n_labels {
        return Err(CotError::InvalidParameter(format!(
            "label {label} out of range"
        )));
    }
    let mut out = Matrix::zeros((x.nrows(), n_labels + x.ncols()));
    out.column_mut(label).fill(1.0);
    out.slice_mut(ndarray::s![.., n_labels..]).assign(x);
    Ok(out)
}

pub struct BoundExplicit<'t> {
    mlp: BoundMlp<'t>,
    n_labels: usize,
}

impl<'t> BoundExplicit<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        self.mlp.params()
    }

    /// Softmax probabilities for an already assembled input.
    pub fn probs(&self, input: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mlp.forward(input)?.softmax_rows())
    }

    /// π_ψ(· | l, x_i) for every row of `x`.
    pub fn probs_given_label(&self, label: usize, x: &Matrix) -> Result<Var<'t>> {
        let tape = self.mlp.params()[0].tape();
        let input = tape.constant(one_hot_input(label, self.n_labels, x)?);
        self.probs(input)
    }
}

/// Row i: Σ_j π_ψ(· | l_j, x_i) π_θ(l_j | x_i).
pub fn plan_marginal<'t>(theta_probs: Var<'t>, psi_given_label: &[Var<'t>]) -> Result<Var<'t>> {
    let (m, n) = theta_probs.shape();
    if psi_given_label.len() != n {
        return shape_err(
            "plan_marginal",
            format!("{} conditionals for {n} labels", psi_given_label.len()),
        );
    }
    let mut acc: Option<Var<'t>> = None;
    for (j, psi) in psi_given_label.iter().enumerate() {
        if psi.shape() != (m, n) {
            return shape_err("plan_marginal", format!("{:?} vs ({m}, {n})", psi.shape()));
        }
        let term = psi.mul_col(theta_probs.slice_cols(j, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| CotError::InvalidParameter("no labels".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(seed: u64) -> MlpConfig {
        MlpConfig::new(vec![3, 8, 8, 2], Activation::Tanh, seed)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Mlp::init(cfg(5)).unwrap();
        let b = Mlp::init(cfg(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Mlp::init(cfg(6)).unwrap());
        for l in a.layers() {
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_weights_are_glorot_uniform() {
        let m = Mlp::init(MlpConfig::new(vec![100, 100, 1], Activation::Tanh, 9)).unwrap();
        let w = &m.layers()[0].weight;
        let limit = (6.0f64 / 200.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        let mean = w.mean().unwrap();
        let std = limit / 3f64.sqrt();
        assert!(mean.abs() <= 3.0 * std / 100.0, "mean {mean}");
    }

    #[test]
    fn config_validation() {
        assert!(Mlp::init(MlpConfig::new(vec![2, 3], Activation::Tanh, 0)).is_err());
        assert!(Mlp::init(MlpConfig::new(vec![2, 0, 3], Activation::Tanh, 0)).is_err());
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let net = Mlp::zeros(MlpConfig::new(vec![3, 4, 4, 1], Activation::Tanh, 0)).unwrap();
        let g = ImplicitGenerator::from_mlp(net, 1).unwrap();
        let out = g
            .sample(&array![[0.3], [0.7]], &array![[1.0, -2.0], [0.5, 0.1]])
            .unwrap();
        assert_eq!(out, Matrix::zeros((2, 1)));
    }

    #[test]
    fn sampling_is_deterministic_and_checks_shapes() {
        let g = ImplicitGenerator::new(1, 2, 1, &[8], Activation::Tanh, 3).unwrap();
        let x = array![[0.3], [0.7]];
        let eta = array![[1.0, -2.0], [0.5, 0.1]];
        assert_eq!(g.sample(&x, &eta).unwrap(), g.sample(&x, &eta).unwrap());
        assert!(g.sample(&x, &array![[1.0, 2.0]]).is_err());
        assert!(g.sample(&array![[0.1, 0.2], [0.3, 0.4]], &eta).is_err());
    }

    #[test]
    fn explicit_zero_parameters_are_uniform() {
        let net = Mlp::zeros(MlpConfig::new(vec![2, 5, 4], Activation::Relu, 0)).unwrap();
        let e = ExplicitConditional::from_mlp(net, 4, false).unwrap();
        let p = e
            .forward_explicit(&array![[1.0, 2.0], [-3.0, 0.5]], None)
            .unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn explicit_rows_are_simplex_and_check_shapes() {
        let e = ExplicitConditional::new(2, 3, true, &[6], Activation::Tanh, 1).unwrap();
        let x = array![[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]];
        for l in 0..3 {
            let p = e.forward_explicit(&x, Some(l)).unwrap();
            for row in p.rows() {
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        assert!(e.forward_explicit(&x, Some(3)).is_err());
        assert!(e.forward_explicit(&array![[1.0]], Some(0)).is_err());
    }

    #[test]
    fn composed_plan_marginal_is_simplex() {
        let theta = ExplicitConditional::new(2, 3, false, &[5], Activation::Tanh, 2).unwrap();
        let psi = ExplicitConditional::new(2, 3, true, &[5], Activation::Tanh, 4).unwrap();
        let x = array![[0.2, -1.0], [1.5, 0.3]];
        let tape = Tape::new();
        let bt = theta.bind(&tape);
        let bp = psi.bind(&tape);
        let tp = bt.probs(tape.constant(x.clone())).unwrap();
        let per: Vec<_> = (0..3)
            .map(|l| bp.probs_given_label(l, &x).unwrap())
            .collect();
        let marg = plan_marginal(tp, &per).unwrap();
        for row in marg.value().rows() {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = ImplicitGenerator::new(2, 3, 1, &[4, 4], Activation::Relu, 8).unwrap();
        let json = serde_json::to_string(&g.to_checkpoint()).unwrap();
        let back: GeneratorCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ImplicitGenerator::from_checkpoint(&back).unwrap(), g);

        let mut bad = g.to_checkpoint();
        bad.net.layers[0].bias.pop();
        assert!(ImplicitGenerator::from_checkpoint(&bad).is_err());
    }
}
