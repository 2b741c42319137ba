//! Dense `f64` tensors with a tape-based reverse-mode gradient engine.
//!
//! Learnable arrays live in a [`ParamSet`]. A [`Graph`] borrows the set
//! immutably, records every operation of one forward pass in topological
//! order, and [`Graph::backward`] replays the tape in reverse, accumulating
//! parameter gradients into a caller-owned [`Gradients`] buffer. Several
//! graphs (one per instance of a minibatch) can therefore feed the same
//! buffer, and the summation order is the order in which they are run.

use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

use crate::rng::Rng;

/// Lower bound applied to a probability before taking its logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

static DEBUG_NUMERICS: AtomicBool = AtomicBool::new(false);

/// Turns on finiteness assertions on the output of every operation recorded
/// by graphs created afterwards.
pub fn set_debug_numerics(on: bool) {
    DEBUG_NUMERICS.store(on, Ordering::Relaxed);
}

pub fn debug_numerics() -> bool {
    DEBUG_NUMERICS.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("tensor", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len]).expect("valid zero shape")
    }

    /// Uniform `[lo, hi)` entries drawn from `rng` in row-major order.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform_range(lo, hi)).collect();
        Self::new(shape, data).expect("valid uniform shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a tensor viewed as `shape[0]` rows.
    pub fn row(&self, r: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[r * width..(r + 1) * width]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let width = self.data.len() / self.shape[0];
        &mut self.data[r * width..(r + 1) * width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    regularized: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` as learnable. `regularized` marks it for the L2 penalty.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, regularized: bool) -> ParamId {
        self.tensors.push(tensor.with_grad());
        self.names.push(name.into());
        self.regularized.push(regularized);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_regularized(&self, id: ParamId) -> bool {
        self.regularized[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies accumulated gradients onto the tensors' `grad` fields.
    pub fn store_grads(&mut self, grads: &Gradients) {
        for (t, slot) in self.tensors.iter_mut().zip(&grads.slots) {
            if t.requires_grad {
                t.grad = Some(slot.clone().unwrap_or_else(|| vec![0.0; t.len()]));
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// `Σ ||W||²` over the regularized tensors.
    pub fn l2_norm_sq(&self) -> f64 {
        self.ids()
            .filter(|&id| self.is_regularized(id))
            .map(|id| self.get(id).data().iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// Per-parameter gradient accumulators, allocated on first touch.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            slots: vec![None; params.len()],
            lens: params.tensors.iter().map(Tensor::len).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].as_deref()
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut [f64] {
        let len = self.lens[id.0];
        self.slots[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Adds `2·l2·W` for every regularized parameter.
    pub fn add_l2(&mut self, params: &ParamSet, l2: f64) {
        if l2 == 0.0 {
            return;
        }
        for id in params.ids().filter(|&id| params.is_regularized(id)) {
            let w = params.get(id).data();
            for (g, x) in self.slot_mut(id).iter_mut().zip(w) {
                *g += 2.0 * l2 * x;
            }
        }
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { src: Var, rows: Vec<usize> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { src: Var, factor: f64 },
    Sum { src: Var },
    SumSquares { src: Var },
    Concat { parts: Vec<Var> },
    Stack { rows: Vec<Var> },
    Slice { src: Var, start: usize },
    Reshape { src: Var },
    Relu { src: Var },
    Tanh { src: Var },
    Sigmoid { src: Var },
    Softmax { src: Var },
    Conv1d { input: Var, filters: Var, bias: Var },
    MaxOverTime { src: Var, argmax: Vec<usize> },
    Dropout { src: Var, mask: Vec<f64> },
    Nll { src: Var, gold: usize, clamped: bool },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Records one forward pass. Operands always precede their results, so the
/// node list is a topological order by construction.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    debug_numerics: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            debug_numerics: debug_numerics(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.debug_numerics && value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        self.push("input", t.shape().to_vec(), t.data().to_vec(), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Selects rows of a matrix (embedding lookup when `src` is a table).
    pub fn gather(&mut self, src: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(src);
        if shape.len() != 2 {
            return Err(shape_err("gather", format!("expected a matrix, got {shape:?}")));
        }
        let (n, dim) = (shape[0], shape[1]);
        if rows.is_empty() {
            return Err(invalid("gather", "no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(invalid("gather", format!("row {bad} out of range for {n} rows")));
        }
        let data = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            out.extend_from_slice(&data[r * dim..(r + 1) * dim]);
        }
        self.push(
            "gather",
            vec![rows.len(), dim],
            out,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    /// `[n,k]·[k,m] → [n,m]` or `[n,k]·[k] → [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k) = (sa[0], sa[1]);
        let m = if sb.len() == 2 { sb[1] } else { 1 };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &x) in arow.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        let shape = if sb.len() == 2 { vec![n, m] } else { vec![n] };
        self.push("matmul", shape, out, Op::MatMul { a, b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, src: Var, factor: f64) -> Result<Var, TensorError> {
        let out = self.value(src).iter().map(|x| x * factor).collect();
        self.push("scale", self.shape(src).to_vec(), out, Op::Scale { src, factor })
    }

    pub fn sum(&mut self, src: Var) -> Result<Var, TensorError> {
        let s = self.value(src).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { src })
    }

    pub fn sum_squares(&mut self, src: Var) -> Result<Var, TensorError> {
        let s = self.value(src).iter().map(|x| x * x).sum();
        self.push("sum_squares", vec![1], vec![s], Op::SumSquares { src })
    }

    /// Concatenation along the last axis. All parts must have the same rank
    /// and agree on every leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no parts"))?;
        let lead = self
            .shape(*first)
            .split_last()
            .map(|(_, l)| l.to_vec())
            .unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let (&w, l) = s.split_last().expect("non-empty shape");
            if l != lead.as_slice() {
                return Err(shape_err("concat", format!("{:?} vs {:?}", self.shape(*first), s)));
            }
            widths.push(w);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec() })
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let first = rows.first().ok_or_else(|| invalid("stack", "no rows"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 1 {
            return Err(shape_err("stack", format!("expected vectors, got {s0:?}")));
        }
        let mut out = Vec::with_capacity(rows.len() * s0[0]);
        for &r in rows {
            if self.shape(r) != s0.as_slice() {
                return Err(shape_err("stack", format!("{s0:?} vs {:?}", self.shape(r))));
            }
            out.extend_from_slice(self.value(r));
        }
        self.push("stack", vec![rows.len(), s0[0]], out, Op::Stack { rows: rows.to_vec() })
    }

    /// `src[start..start+len]` of a vector.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(src);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(shape_err("slice", format!("[{start}, {}) of {s:?}", start + len)));
        }
        let out = self.value(src)[start..start + len].to_vec();
        self.push("slice", vec![len], out, Op::Slice { src, start })
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(src).len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", self.shape(src))));
        }
        let out = self.value(src).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { src })
    }

    pub fn relu(&mut self, src: Var) -> Result<Var, TensorError> {
        let out = self
            .value(src)
            .iter()
            .map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
            .collect();
        self.push("relu", self.shape(src).to_vec(), out, Op::Relu { src })
    }

    pub fn tanh(&mut self, src: Var) -> Result<Var, TensorError> {
        let out = self.value(src).iter().map(|x| x.tanh()).collect();
        self.push("tanh", self.shape(src).to_vec(), out, Op::Tanh { src })
    }

    pub fn sigmoid(&mut self, src: Var) -> Result<Var, TensorError> {
        let out = self.value(src).iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", self.shape(src).to_vec(), out, Op::Sigmoid { src })
    }

    /// Softmax of a vector of at least two finite logits.
    pub fn softmax(&mut self, src: Var) -> Result<Var, TensorError> {
        let s = self.shape(src);
        if s.len() != 1 || s[0] < 2 {
            return Err(shape_err("softmax", format!("need a vector of >= 2 logits, got {s:?}")));
        }
        let logits = self.value(src);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let out = softmax(logits);
        self.push("softmax", s.to_vec(), out, Op::Softmax { src })
    }

    /// Valid 1-D convolution without activation: `input` is `[n, d]`,
    /// `filters` is `[m, k, d]`, `bias` is `[m]`; the result is `[n-k+1, m]`.
    pub fn conv1d_valid(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var, TensorError> {
        let (si, sf, sb) = (
            self.shape(input).to_vec(),
            self.shape(filters).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 2 || sf.len() != 3 || sb.len() != 1 {
            return Err(shape_err(
                "conv1d",
                format!("input {si:?}, filters {sf:?}, bias {sb:?}"),
            ));
        }
        let (n, d) = (si[0], si[1]);
        let (m, k) = (sf[0], sf[1]);
        if sf[2] != d {
            return Err(shape_err(
                "conv1d",
                format!("filter width {} vs input width {d}", sf[2]),
            ));
        }
        if sb[0] != m {
            return Err(shape_err("conv1d", format!("{} biases for {m} filters", sb[0])));
        }
        if n < k {
            return Err(invalid(
                "conv1d",
                format!("sequence length {n} shorter than window {k}"),
            ));
        }
        let len = n - k + 1;
        let (x, w, b) = (self.value(input), self.value(filters), self.value(bias));
        let span = k * d;
        let mut out = vec![0.0; len * m];
        for j in 0..len {
            let window = &x[j * d..j * d + span];
            for f in 0..m {
                out[j * m + f] = dot(&w[f * span..(f + 1) * span], window) + b[f];
            }
        }
        self.push("conv1d", vec![len, m], out, Op::Conv1d { input, filters, bias })
    }

    /// Column-wise maximum of an `[L, m]` matrix; ties go to the first row.
    pub fn max_over_time(&mut self, src: Var) -> Result<Var, TensorError> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 {
            return Err(shape_err("max_over_time", format!("expected a matrix, got {s:?}")));
        }
        let (l, m) = (s[0], s[1]);
        let x = self.value(src);
        let mut argmax = vec![0usize; m];
        let mut out = x[..m].to_vec();
        for j in 1..l {
            for f in 0..m {
                if x[j * m + f] > out[f] {
                    out[f] = x[j * m + f];
                    argmax[f] = j;
                }
            }
        }
        self.push("max_over_time", vec![m], out, Op::MaxOverTime { src, argmax })
    }

    /// Inverted dropout: in training each component is zeroed with
    /// probability `rho` and survivors are scaled by `1/(1-rho)`. Outside
    /// training, or with `rho == 0`, returns `src` itself.
    pub fn dropout(&mut self, src: Var, rho: f64, rng: &mut Rng, training: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rho) {
            return Err(invalid("dropout", format!("rho {rho} outside [0, 1)")));
        }
        if !training || rho == 0.0 {
            return Ok(src);
        }
        let keep = 1.0 / (1.0 - rho);
        let mask: Vec<f64> = (0..self.value(src).len())
            .map(|_| if rng.bernoulli(rho) { 0.0 } else { keep })
            .collect();
        let out = self.value(src).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push("dropout", self.shape(src).to_vec(), out, Op::Dropout { src, mask })
    }

    /// `-ln max(p[gold], 1e-12)` for a probability vector `p`.
    pub fn nll(&mut self, probs: Var, gold: usize) -> Result<Var, TensorError> {
        let s = self.shape(probs);
        if s.len() != 1 || gold >= s[0] {
            return Err(invalid("nll", format!("class {gold} for probabilities of shape {s:?}")));
        }
        let p = self.value(probs)[gold];
        let clamped = p < LOG_CLAMP;
        if clamped {
            log::debug!("nll: probability {p:e} of the gold class clamped to {LOG_CLAMP:e}");
            if self.debug_numerics {
                log::warn!("nll: gold-class probability {p:e} clamped");
            }
        }
        let v = -p.max(LOG_CLAMP).ln();
        self.push(
            "nll",
            vec![1],
            vec![v],
            Op::Nll {
                src: probs,
                gold,
                clamped,
            },
        )
    }

    /// `-ln p[gold] + l2·Σ||W||²` over the given weight nodes.
    pub fn nll_loss(&mut self, probs: Var, gold: usize, weights: &[Var], l2: f64) -> Result<Var, TensorError> {
        let mut loss = self.nll(probs, gold)?;
        if l2 != 0.0 {
            for &w in weights {
                let sq = self.sum_squares(w)?;
                let pen = self.scale(sq, l2)?;
                loss = self.add(loss, pen)?;
            }
        }
        Ok(loss)
    }

    /// Reverse pass from the scalar `root`, seeded with `seed` (usually 1,
    /// or `1/B` when averaging over a batch). Parameter gradients are added
    /// to `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Gradients) -> Result<(), TensorError> {
        if self.shape(root) != [1] {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut acc = Accum {
            graph: self,
            node_grads: vec![Vec::new(); root.0 + 1],
            grads,
        };
        acc.node_grads[root.0] = vec![seed];
        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut acc.node_grads[i]);
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Gather { src, rows } => {
                    let dim = node.shape[1];
                    if let Some(dst) = acc.slot(*src) {
                        for (r, &row) in rows.iter().enumerate() {
                            axpy(&mut dst[row * dim..(row + 1) * dim], 1.0, &g[r * dim..(r + 1) * dim]);
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let sa = self.shape(*a);
                    let (n, k) = (sa[0], sa[1]);
                    let m = g.len() / n;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(da) = acc.slot(*a) {
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                da[i * k + p] += dot(gi, &bv[p * m..(p + 1) * m]);
                            }
                        }
                    }
                    if let Some(db) = acc.slot(*b) {
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x != 0.0 {
                                    axpy(&mut db[p * m..(p + 1) * m], x, gi);
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    if let Some(da) = acc.slot(*a) {
                        axpy(da, 1.0, &g);
                    }
                    if let Some(db) = acc.slot(*b) {
                        axpy(db, 1.0, &g);
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(da) = acc.slot(*a) {
                        for ((d, gi), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * y;
                        }
                    }
                    if let Some(db) = acc.slot(*b) {
                        for ((d, gi), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * x;
                        }
                    }
                }
                Op::Scale { src, factor } => {
                    if let Some(d) = acc.slot(*src) {
                        axpy(d, *factor, &g);
                    }
                }
                Op::Sum { src } => {
                    if let Some(d) = acc.slot(*src) {
                        d.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::SumSquares { src } => {
                    let x = self.value(*src);
                    if let Some(d) = acc.slot(*src) {
                        axpy(d, 2.0 * g[0], x);
                    }
                }
                Op::Concat { parts } => {
                    let total = *node.shape.last().expect("non-empty shape");
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let w = *self.shape(p).last().expect("non-empty shape");
                        if let Some(d) = acc.slot(p) {
                            for r in 0..rows {
                                axpy(
                                    &mut d[r * w..(r + 1) * w],
                                    1.0,
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::Stack { rows } => {
                    let w = node.shape[1];
                    for (r, &src) in rows.iter().enumerate() {
                        if let Some(d) = acc.slot(src) {
                            axpy(d, 1.0, &g[r * w..(r + 1) * w]);
                        }
                    }
                }
                Op::Slice { src, start } => {
                    if let Some(d) = acc.slot(*src) {
                        axpy(&mut d[*start..*start + g.len()], 1.0, &g);
                    }
                }
                Op::Reshape { src } => {
                    if let Some(d) = acc.slot(*src) {
                        axpy(d, 1.0, &g);
                    }
                }
                Op::Relu { src } => {
                    let y = &node.value;
                    if let Some(d) = acc.slot(*src) {
                        for ((d, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            if *yi > 0.0 {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Tanh { src } => {
                    let y = &node.value;
                    if let Some(d) = acc.slot(*src) {
                        for ((d, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *d += gi * (1.0 - yi * yi);
                        }
                    }
                }
                Op::Sigmoid { src } => {
                    let y = &node.value;
                    if let Some(d) = acc.slot(*src) {
                        for ((d, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *d += gi * yi * (1.0 - yi);
                        }
                    }
                }
                Op::Softmax { src } => {
                    let y = &node.value;
                    let inner = dot(&g, y);
                    if let Some(d) = acc.slot(*src) {
                        for ((d, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *d += yi * (gi - inner);
                        }
                    }
                }
                Op::Conv1d { input, filters, bias } => {
                    let si = self.shape(*input);
                    let sf = self.shape(*filters);
                    let (d, m, k) = (si[1], sf[0], sf[1]);
                    let span = k * d;
                    let len = node.shape[0];
                    let (x, w) = (self.value(*input), self.value(*filters));
                    let active = |j: usize, f: usize| {
                        let v = g[j * m + f];
                        (v != 0.0).then_some(v)
                    };
                    if let Some(dx) = acc.slot(*input) {
                        for j in 0..len {
                            for f in 0..m {
                                if let Some(v) = active(j, f) {
                                    axpy(&mut dx[j * d..j * d + span], v, &w[f * span..(f + 1) * span]);
                                }
                            }
                        }
                    }
                    if let Some(dw) = acc.slot(*filters) {
                        for j in 0..len {
                            for f in 0..m {
                                if let Some(v) = active(j, f) {
                                    axpy(&mut dw[f * span..(f + 1) * span], v, &x[j * d..j * d + span]);
                                }
                            }
                        }
                    }
                    if let Some(db) = acc.slot(*bias) {
                        for j in 0..len {
                            for f in 0..m {
                                db[f] += g[j * m + f];
                            }
                        }
                    }
                }
                Op::MaxOverTime { src, argmax } => {
                    let m = argmax.len();
                    if let Some(d) = acc.slot(*src) {
                        for (f, &j) in argmax.iter().enumerate() {
                            d[j * m + f] += g[f];
                        }
                    }
                }
                Op::Dropout { src, mask } => {
                    if let Some(d) = acc.slot(*src) {
                        for ((d, gi), mi) in d.iter_mut().zip(&g).zip(mask) {
                            *d += gi * mi;
                        }
                    }
                }
                Op::Nll { src, gold, clamped } => {
                    if !*clamped {
                        let p = self.value(*src)[*gold];
                        if let Some(d) = acc.slot(*src) {
                            d[*gold] -= g[0] / p;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct Accum<'a, 'p> {
    graph: &'a Graph<'p>,
    node_grads: Vec<Vec<f64>>,
    grads: &'a mut Gradients,
}

impl Accum<'_, '_> {
    /// Gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        match self.graph.nodes[v.0].op {
            Op::Input => None,
            Op::Param(id) => {
                if self.graph.params.get(id).requires_grad {
                    Some(self.grads.slot_mut(id))
                } else {
                    None
                }
            }
            _ => {
                let len = self.graph.nodes[v.0].value.len();
                let buf = &mut self.node_grads[v.0];
                if buf.is_empty() {
                    *buf = vec![0.0; len];
                }
                Some(buf)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted exponential normalization.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// A scalar function of a parameter set, evaluated with or without its gradient.
pub trait Objective {
    fn value(&mut self, params: &ParamSet) -> Result<f64, TensorError>;
    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, Gradients), TensorError>;
}

/// Adapts a single-graph closure into an [`Objective`].
pub struct GraphObjective<F>(pub F);

impl<F> Objective for GraphObjective<F>
where
    F: FnMut(&mut Graph) -> Result<Var, TensorError>,
{
    fn value(&mut self, params: &ParamSet) -> Result<f64, TensorError> {
        let mut g = Graph::new(params);
        let out = (self.0)(&mut g)?;
        Ok(g.scalar(out))
    }

    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, Gradients), TensorError> {
        let mut g = Graph::new(params);
        let out = (self.0)(&mut g)?;
        let mut grads = Gradients::new(params);
        g.backward(out, 1.0, &mut grads)?;
        Ok((g.scalar(out), grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `objective` with central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` on every coordinate of every parameter
/// that requires a gradient. The objective must be deterministic; with a
/// stochastic one (dropout in training mode) the result is meaningless.
pub fn grad_check<O: Objective>(
    params: &ParamSet,
    eps: f64,
    objective: &mut O,
) -> Result<GradCheckReport, TensorError> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(invalid("grad_check", format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let (_, grads) = objective.value_and_grad(params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in params.ids() {
        if !params.get(id).requires_grad {
            continue;
        }
        for c in 0..params.get(id).len() {
            let orig = params.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + eps;
            let plus = objective.value(&work)?;
            work.get_mut(id).data_mut()[c] = orig - eps;
            let minus = objective.value(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[c]);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}
