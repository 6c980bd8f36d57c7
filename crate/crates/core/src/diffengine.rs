//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in creation
//! order. [`Tape::backward`] walks that record in reverse, which is a valid
//! topological order because a node can only reference nodes created before
//! it. Scalars are 1×1 matrices; nothing in the engine exceeds rank 2.
//!
//! `backward` does not mutate the tape: calling it twice on the same output
//! returns two identical [`Gradients`] rather than accumulating.
//!
//! ```
//! use cot_core::diffengine::Tape;
//! use ndarray::array;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(array![[1.0, 2.0]]);
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &array![[2.0, 4.0]]);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use ndarray::{s, Array2, Axis};

use crate::error::{shape_err, CotError, Result};

pub type Matrix = Array2<f64>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Powf(usize, f64),
    SqDist(usize, usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    RowSums(usize),
    ColSums(usize),
    SliceRows { src: usize, start: usize },
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations since construction or the last [`Tape::reset`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("recording", &self.recording)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar output with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape if nothing flowed into it.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Matrix {
        match self.wrt(var) {
            Some(g) => g.clone(),
            None => Matrix::zeros(var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates. Values are identical to a recording tape,
    /// but [`Tape::backward`] is rejected.
    pub fn detached() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Differentiable input (a parameter or a quantity gradients should reach).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, self.recording)
    }

    /// Input treated as a constant: data, noise draws, fixed Gram matrices.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if self.recording {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !self.recording {
            return Err(CotError::Graph("backward on a detached tape".into()));
        }
        if !std::ptr::eq(output.tape, self) {
            return Err(CotError::Graph("output belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.dim() != (1, 1) {
            return shape_err(
                "backward",
                format!("output must be 1x1, got {:?}", nodes[output.id].value.dim()),
            );
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.id] = Some(Matrix::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], id: usize, delta: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, -g);
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, g * val(*b));
            accumulate(grads, nodes, *b, g * val(*a));
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g * *c),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.dot(&val(*b).t()));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, val(*a).t().dot(g));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        Op::MulCol(a, c) => {
            accumulate(grads, nodes, *a, g * val(*c));
            if nodes[*c].requires_grad {
                let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(grads, nodes, *c, gc);
            }
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, g * &out.mapv(|y| 1.0 - y * y)),
        Op::Relu(a) => {
            // subgradient 0 at the kink
            let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            accumulate(grads, nodes, *a, g * &mask);
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, g * out),
        Op::Square(a) => accumulate(grads, nodes, *a, g * &val(*a).mapv(|x| 2.0 * x)),
        Op::Powf(a, p) => {
            let p = *p;
            let d = val(*a).mapv(|x| p * x.powf(p - 1.0));
            accumulate(grads, nodes, *a, g * &d);
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = (av * &rs - g.dot(bv)) * 2.0;
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                let gb = (bv * &cs - g.t().dot(av)) * 2.0;
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::SoftmaxRows(a) => {
            let inner = (g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
            accumulate(grads, nodes, *a, out * &(g - &inner));
        }
        Op::Sum(a) => {
            accumulate(
                grads,
                nodes,
                *a,
                Matrix::from_elem(val(*a).dim(), g[[0, 0]]),
            );
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(
                grads,
                nodes,
                *a,
                Matrix::from_elem(val(*a).dim(), g[[0, 0]] / n),
            );
        }
        Op::Dot(a, b) => {
            let s = g[[0, 0]];
            accumulate(grads, nodes, *a, val(*b) * s);
            accumulate(grads, nodes, *b, val(*a) * s);
        }
        Op::RowSums(a) => {
            let mut d = Matrix::zeros(val(*a).dim());
            d += g;
            accumulate(grads, nodes, *a, d);
        }
        Op::ColSums(a) => {
            let mut d = Matrix::zeros(val(*a).dim());
            d += g;
            accumulate(grads, nodes, *a, d);
        }
        Op::SliceRows { src, start } => {
            let mut d = Matrix::zeros(val(*src).dim());
            d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
            accumulate(grads, nodes, *src, d);
        }
        Op::SliceCols { src, start } => {
            let mut d = Matrix::zeros(val(*src).dim());
            d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
            accumulate(grads, nodes, *src, d);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = val(p).ncols();
                let part = g.slice(s![.., offset..offset + w]).to_owned();
                accumulate(grads, nodes, p, part);
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let h = val(p).nrows();
                let part = g.slice(s![offset..offset + h, ..]).to_owned();
                accumulate(grads, nodes, p, part);
                offset += h;
            }
        }
    }
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            let mut acc = 0.0;
            for (x, y) in ra.iter().zip(rb.iter()) {
                let d = x - y;
                acc += d * d;
            }
            out[[i, j]] = acc;
        }
    }
    out
}

pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(CotError::Graph(format!(
                "{op}: operands live on different tapes"
            )))
        }
    }

    fn unary(&self, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var<'t> {
        let value = f(&self.value());
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        check: impl FnOnce((usize, usize), (usize, usize)) -> bool,
        f: impl FnOnce(&Matrix, &Matrix) -> Matrix,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let (sa, sb) = (self.shape(), other.shape());
        if !check(sa, sb) {
            return shape_err(name, format!("{sa:?} vs {sb:?}"));
        }
        let value = {
            let (a, b) = (self.value(), other.value());
            f(&a, &b)
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "add",
            |a, b| a == b,
            |a, b| a + b,
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sub",
            |a, b| a == b,
            |a, b| a - b,
            Op::Sub(self.id, other.id),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a == b,
            |a, b| a * b,
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|a| a + c, Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "matmul",
            |a, b| a.1 == b.0,
            |a, b| a.dot(b),
            Op::MatMul(self.id, other.id),
        )
    }

    /// Adds a 1×d row to every row of an n×d matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            "add_row",
            |a, b| b.0 == 1 && a.1 == b.1,
            |a, b| a + b,
            Op::AddRow(self.id, row.id),
        )
    }

    /// Scales row i of an n×d matrix by entry i of an n×1 column.
    pub fn mul_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            col,
            "mul_col",
            |a, b| b.1 == 1 && a.0 == b.0,
            |a, b| a * b,
            Op::MulCol(self.id, col.id),
        )
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x * x), Op::Square(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    /// n×d, p×d → n×p matrix of squared Euclidean row distances.
    pub fn sq_dist(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sq_dist",
            |a, b| a.1 == b.1,
            pairwise_sq_dist,
            Op::SqDist(self.id, other.id),
        )
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.unary(softmax_rows, Op::SoftmaxRows(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Matrix::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(
            |a| Matrix::from_elem((1, 1), a.sum() / a.len() as f64),
            Op::Mean(self.id),
        )
    }

    /// Frobenius inner product of two equally shaped matrices.
    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "dot",
            |a, b| a == b,
            |a, b| Matrix::from_elem((1, 1), (a * b).sum()),
            Op::Dot(self.id, other.id),
        )
    }

    /// n×d → n×1.
    pub fn row_sums(&self) -> Var<'t> {
        self.unary(
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::RowSums(self.id),
        )
    }

    /// n×d → 1×d.
    pub fn col_sums(&self) -> Var<'t> {
        self.unary(
            |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::ColSums(self.id),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (n, _) = self.shape();
        if start + len > n || len == 0 {
            return shape_err("slice_rows", format!("{start}+{len} out of {n} rows"));
        }
        Ok(self.unary(
            |a| a.slice(s![start..start + len, ..]).to_owned(),
            Op::SliceRows {
                src: self.id,
                start,
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (_, d) = self.shape();
        if start + len > d || len == 0 {
            return shape_err("slice_cols", format!("{start}+{len} out of {d} cols"));
        }
        Ok(self.unary(
            |a| a.slice(s![.., start..start + len]).to_owned(),
            Op::SliceCols {
                src: self.id,
                start,
            },
        ))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| CotError::Graph("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let rows = first.shape().0;
        for p in parts {
            first.same_tape(p, "concat_cols")?;
            if p.shape().0 != rows {
                return shape_err("concat_cols", format!("{rows} rows vs {:?}", p.shape()));
            }
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("row counts checked")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(value, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| CotError::Graph("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let cols = first.shape().1;
        for p in parts {
            first.same_tape(p, "concat_rows")?;
            if p.shape().1 != cols {
                return shape_err("concat_rows", format!("{cols} cols vs {:?}", p.shape()));
            }
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("col counts checked")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(value, Op::ConcatRows(ids), rg))
    }
}

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)` per coordinate.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Flat coordinate indices whose error exceeds the tolerance.
    pub failures: Vec<usize>,
}

impl GradCheckReport {
    /// Builds the report from matching analytic and numeric gradients.
    pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, tolerance: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
        let rel_errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
            .collect();
        let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
        let failures = rel_errors
            .iter()
            .enumerate()
            .filter(|(_, e)| **e > tolerance)
            .map(|(i, _)| i)
            .collect();
        Self {
            analytic,
            numeric,
            rel_errors,
            max_rel_error,
            tolerance,
            failures,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks the gradient of `f` with respect to every entry of `params`.
///
/// `f` must be deterministic: any noise it uses has to be drawn outside and
/// captured. Coordinates are flattened parameter by parameter in row-major
/// order.
pub fn grad_check<F>(f: F, params: &[Matrix], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(CotError::NonFinite("grad_check loss".into()));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .flat_map(|v| grads.wrt_or_zeros(*v).into_iter())
            .collect::<Vec<f64>>()
    };

    let eval = |ps: &[Matrix]| -> Result<f64> {
        let tape = Tape::detached();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CotError::NonFinite("grad_check perturbed loss".into()))
        }
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for flat in 0..p.len() {
            let idx = (flat / p.ncols(), flat % p.ncols());
            let orig = p[idx];
            work[pi][idx] = orig + step;
            let plus = eval(&work)?;
            work[pi][idx] = orig - step;
            let minus = eval(&work)?;
            work[pi][idx] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    Ok(GradCheckReport::compare(analytic, numeric, tolerance))
}
