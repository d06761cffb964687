//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in evaluation order, so the node list is
//! topologically sorted by construction. [`Tape::backward`] walks it once in
//! reverse. The tape is not consumed: values stay readable afterwards and
//! `backward` may be called again for another scalar on the same tape, each
//! call starting from fresh gradient buffers.
//!
//! Shape errors inside the primitives are programming errors and panic; the
//! model entry points validate their inputs and return `Error::Contract`.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound applied to sigmoid outputs before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    MaxCols(Var, Vec<usize>),
    MeanCols(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    BceLogits(Var, Vec<f64>),
    RowCosineDistance(Var, Var),
    RowSqDistance(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add-row",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::SumAll(..) => "reduce-sum",
            Op::MeanAll(..) => "reduce-mean",
            Op::MaxCols(..) => "reduce-max",
            Op::MeanCols(..) => "reduce-mean-cols",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols(..) => "split",
            Op::BceLogits(..) => "bce",
            Op::RowCosineDistance(..) => "cosine-distance",
            Op::RowSqDistance(..) => "sq-distance",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when absent.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::matrix(r, c, g.to_vec()),
            None => Tensor::zeros(r, c),
        }
    }

    /// Adds the gradients of `vars` into the matching tensors' grad buffers.
    pub fn accumulate_into(&self, vars: &[Var], params: &mut [&mut Tensor]) -> Result<()> {
        if vars.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        for (v, p) in vars.iter().zip(params.iter_mut()) {
            match self.get(*v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.len()])?,
            }
        }
        Ok(())
    }
}

fn unary(v: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    v.iter().map(|&x| f(x)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1 - cos(a, b)) / 2` with the zero-vector convention: both zero gives 0,
/// exactly one zero gives 0.5.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 0.5,
        (false, false) => {
            let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
            (1.0 - cos) / 2.0
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that honours the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf, t.requires_grad())
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(&[a, b]);
        self.push(out, m, n, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = kernels::transpose(self.value(a), r, c);
        let ng = self.needs(&[a]);
        self.push(out, c, r, Op::Transpose(a), ng)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "{} shape mismatch", op.name());
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(out, sa.0, sa.1, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + 1·row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let bias = self.value(row).to_vec();
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(&bias).map(|(x, b)| x + b))
            .collect();
        let ng = self.needs(&[a, row]);
        self.push(out, r, c, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = unary(self.value(a), |x| x * factor);
        let ng = self.needs(&[a]);
        self.push(out, r, c, Op::Scale(a, factor), ng)
    }

    fn elementwise(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = unary(self.value(a), f);
        let ng = self.needs(&[a]);
        self.push(out, r, c, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Exp(a), f64::exp)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Log(a), f64::ln)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(vec![s], 1, 1, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[a]);
        self.push(vec![s], 1, 1, Op::MeanAll(a), ng)
    }

    /// Column-wise maximum (`n×d → 1×d`). Ties go to the lowest row index.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert!(r >= 1, "max over an empty matrix");
        let v = self.value(a);
        let mut arg = vec![0usize; c];
        let mut out = v[..c].to_vec();
        for i in 1..r {
            for j in 0..c {
                let x = v[i * c + j];
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        let ng = self.needs(&[a]);
        self.push(out, 1, c, Op::MaxCols(a, arg), ng)
    }

    /// Column-wise mean (`n×d → 1×d`).
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert!(r >= 1, "mean over an empty matrix");
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        let ng = self.needs(&[a]);
        self.push(out, 1, c, Op::MeanCols(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(r, rb, "concat row mismatch");
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs(&[a, b]);
        self.push(out, r, ca + cb, Op::ConcatCols(a, b), ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start <= end && end <= c, "slice {start}..{end} of {c} columns");
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * c + start..i * c + end]);
        }
        let ng = self.needs(&[a]);
        self.push(out, r, w, Op::SliceCols(a, start, end), ng)
    }

    /// `-Σ [t log p + (1-t) log(1-p)]` with `p = clamp(sigmoid(logits))`.
    ///
    /// `targets` has the same length as `logits`. Clamped entries carry zero
    /// gradient, matching the derivative of the clamped expression.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.len(), targets.len(), "bce target length");
        let loss = v
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let p = sigmoid(x).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let ng = self.needs(&[logits]);
        self.push(vec![loss], 1, 1, Op::BceLogits(logits, targets.to_vec()), ng)
    }

    /// Per-row [`cosine_distance`] between two `n×d` matrices, giving `n×1`.
    pub fn row_cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "cosine distance shape mismatch");
        let out = (0..r)
            .map(|i| {
                cosine_distance(
                    &self.value(a)[i * c..(i + 1) * c],
                    &self.value(b)[i * c..(i + 1) * c],
                )
            })
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(out, r, 1, Op::RowCosineDistance(a, b), ng)
    }

    /// Per-row squared Euclidean distance, giving `n×1`.
    pub fn row_sq_distance(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "distance shape mismatch");
        let out = (0..r)
            .map(|i| {
                self.value(a)[i * c..(i + 1) * c]
                    .iter()
                    .zip(&self.value(b)[i * c..(i + 1) * c])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(out, r, 1, Op::RowSqDistance(a, b), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if let Some(bad) = node.value.iter().find(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    node: i,
                    op: node.op.name(),
                    detail: format!("forward value {bad}"),
                });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    node: idx,
                    op: node.op.name(),
                    detail: format!("gradient value {bad}"),
                });
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| if n.needs_grad { g } else { None })
                .collect(),
            shapes: self.nodes.iter().map(|n| (n.rows, n.cols)).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if self.nodes[a.0].needs_grad {
                    send(*a, kernels::matmul_nt(g, self.value(*b), m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, kernels::matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => send(*a, kernels::transpose(g, node.rows, node.cols)),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, unary(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                let c = node.cols;
                let mut acc = vec![0.0; c];
                for chunk in g.chunks(c.max(1)) {
                    acc.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                }
                send(*row, acc);
            }
            Op::Scale(a, f) => send(*a, unary(g, |x| x * f)),
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(d, e)| d * e).collect()),
            Op::Tanh(a) => send(*a, g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect()),
            Op::Sigmoid(a) => send(*a, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect(),
            ),
            Op::Log(a) => send(*a, g.iter().zip(self.value(*a)).map(|(d, x)| d / x).collect()),
            Op::SumAll(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::MaxCols(a, arg) => {
                let (r, c) = self.shape(*a);
                let mut out = vec![0.0; r * c];
                for (j, &i) in arg.iter().enumerate() {
                    out[i * c + j] = g[j];
                }
                send(*a, out);
            }
            Op::MeanCols(a) => {
                let (r, c) = self.shape(*a);
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend(g.iter().map(|x| x / r as f64));
                }
                send(*a, out);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.shape(*a);
                let cb = self.shape(*b).1;
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.shape(*a);
                let w = end - start;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*a, out);
            }
            Op::BceLogits(a, targets) => {
                let out = self
                    .value(*a)
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| {
                        let s = sigmoid(x);
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&s) {
                            0.0
                        } else {
                            g[0] * (s - t)
                        }
                    })
                    .collect();
                send(*a, out);
            }
            Op::RowCosineDistance(a, b) => {
                let c = self.shape(*a).1;
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for i in 0..node.rows {
                    let ra = &va[i * c..(i + 1) * c];
                    let rb = &vb[i * c..(i + 1) * c];
                    let na = dot(ra, ra).sqrt();
                    let nb = dot(rb, rb).sqrt();
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let ab = dot(ra, rb);
                    let cos = ab / (na * nb);
                    // d dist / d a = -1/2 (b/(|a||b|) - cos a/|a|²)
                    for j in 0..c {
                        ga[i * c + j] = -0.5 * g[i] * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        gb[i * c + j] = -0.5 * g[i] * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::RowSqDistance(a, b) => {
                let c = self.shape(*a).1;
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .enumerate()
                    .map(|(k, (x, y))| 2.0 * g[k / c] * (x - y))
                    .collect();
                let gb = unary(&ga, |x| -x);
                send(*a, ga);
                send(*b, gb);
            }
        }
    }
}
