use std::cell::Cell;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive. Shape rules are documented per variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    /// Input value; trainable or constant.
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,n] + [n]` or `[m,n] + [1,n]`, the row added to every row.
    AddRow,
    /// Same-shape elementwise ops.
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise unary ops, any shape.
    Neg,
    Scale(T),
    AddScalar(T),
    Exp,
    Log,
    Square,
    Sqrt,
    Relu,
    Sigmoid,
    Softplus,
    /// Gradient passes only where `lo <= x <= hi`.
    Clamp { lo: T, hi: T },
    /// `[m,n] -> [m,n]`, softmax over each row.
    SoftmaxRows,
    /// `[m,a], [m,b], ... -> [m,a+b+...]`
    Concat,
    /// `[m,n] -> [m,len]`, columns `start..start+len`.
    Slice { start: usize, len: usize },
    /// Any shape -> scalar.
    SumAll,
    MeanAll,
    /// `[m,n] -> [m,1]`
    SumLast,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::AddRow => "add_row",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxRows => "softmax_rows",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumLast => "sum_last",
        }
    }
}

/// A deliberately wrong backward rule, for mutation-testing gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackward,
}

thread_local! {
    static FAULT: Cell<Option<Fault>> = const {
        Cell::new(if cfg!(feature = "corrupt-gradient") {
            Some(Fault::SigmoidBackward)
        } else {
            None
        })
    };
}

/// Installs (or clears) a backward fault for graphs on the current thread.
pub fn set_fault(fault: Option<Fault>) {
    FAULT.with(|f| f.set(fault));
}

pub fn current_fault() -> Option<Fault> {
    FAULT.with(|f| f.get())
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Tape of recorded primitives. Nodes are appended in evaluation order, which
/// is a topological order of the computation.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Evaluates `op` on `inputs` and appends the result.
    pub fn apply(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &ins)?
        };
        if !value.all_finite() {
            return Err(Error::numerics(op.name(), "produced a non-finite value"));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Op::AddRow, &[a, row])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(T::from_f64_lossy(c)), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(T::from_f64_lossy(c)), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(
            Op::Clamp {
                lo: T::from_f64_lossy(lo),
                hi: T::from_f64_lossy(hi),
            },
            &[a],
        )
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { start, len }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MeanAll, &[a])
    }
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumLast, &[a])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let fault = current_fault();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = vjp(&node.op, &ins, &node.value, &g, &need, fault);
            for ((input, grad), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let Some(grad) = grad else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    forward(op, &ins)?
                }
            };
            values.push(value);
        }
        Ok(values)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf; zero if the leaf does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn arity<T>(op: &Op<T>, ins: usize, want: usize) -> Result<()> {
    if ins == want {
        Ok(())
    } else {
        Err(Error::shape(format!("{} takes {want} inputs, got {ins}", op.name())))
    }
}

fn same_shape<T: Real>(op: &Op<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{}: operand shapes {:?} and {:?} differ",
            op.name(),
            a.shape(),
            b.shape()
        )))
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn row_len<T: Real>(op: &Op<T>, t: &Tensor<T>) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| Error::shape(format!("{} needs a matrix, got {:?}", op.name(), t.shape())))
}

fn forward<T: Real>(op: &Op<T>, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let unary = |f: &dyn Fn(T) -> T| -> Result<Tensor<T>> {
        arity(op, ins.len(), 1)?;
        Ok(ins[0].map(f))
    };
    match op {
        Op::Leaf => Err(Error::shape("leaves are not evaluated")),
        Op::MatMul => {
            arity(op, ins.len(), 2)?;
            let (m, k) = row_len(op, ins[0])?;
            let (k2, n) = row_len(op, ins[1])?;
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul: inner dimensions {k} and {k2} differ"
                )));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, ins[0].data(), false, ins[1].data(), false, T::zero(), &mut out);
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::AddRow => {
            arity(op, ins.len(), 2)?;
            let (m, n) = row_len(op, ins[0])?;
            let row_ok = matches!(ins[1].shape(), [len] if *len == n)
                || matches!(ins[1].shape(), [1, len] if *len == n);
            if !row_ok {
                return Err(Error::shape(format!(
                    "add_row: cannot broadcast {:?} over rows of [{m}, {n}]",
                    ins[1].shape()
                )));
            }
            let row = ins[1].data();
            let mut out = ins[0].data().to_vec();
            for chunk in out.chunks_exact_mut(n) {
                for (o, &r) in chunk.iter_mut().zip(row) {
                    *o = *o + r;
                }
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            arity(op, ins.len(), 2)?;
            same_shape(op, ins[0], ins[1])?;
            Ok(match op {
                Op::Add => zip_map(ins[0], ins[1], |a, b| a + b),
                Op::Sub => zip_map(ins[0], ins[1], |a, b| a - b),
                Op::Mul => zip_map(ins[0], ins[1], |a, b| a * b),
                _ => zip_map(ins[0], ins[1], |a, b| a / b),
            })
        }
        Op::Neg => unary(&|x| -x),
        Op::Scale(c) => unary(&|x| x * *c),
        Op::AddScalar(c) => unary(&|x| x + *c),
        Op::Exp => unary(&|x| x.exp()),
        Op::Log => unary(&|x| x.ln()),
        Op::Square => unary(&|x| x * x),
        Op::Sqrt => unary(&|x| x.sqrt()),
        Op::Relu => unary(&|x| if x > T::zero() { x } else { T::zero() }),
        Op::Sigmoid => unary(&sigmoid),
        Op::Softplus => unary(&softplus),
        Op::Clamp { lo, hi } => unary(&|x| x.max(*lo).min(*hi)),
        Op::SoftmaxRows => {
            arity(op, ins.len(), 1)?;
            let (m, n) = row_len(op, ins[0])?;
            let mut out = ins[0].data().to_vec();
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Concat => {
            if ins.is_empty() {
                return Err(Error::shape("concat needs at least one input"));
            }
            let m = row_len(op, ins[0])?.0;
            let mut widths = Vec::with_capacity(ins.len());
            for t in ins {
                let (r, c) = row_len(op, t)?;
                if r != m {
                    return Err(Error::shape(format!("concat: row counts {m} and {r} differ")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(m * total);
            for i in 0..m {
                for (t, &w) in ins.iter().zip(&widths) {
                    out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
            }
            Ok(Tensor::from_parts(vec![m, total], out))
        }
        Op::Slice { start, len } => {
            arity(op, ins.len(), 1)?;
            let (m, n) = row_len(op, ins[0])?;
            if *len == 0 || start + len > n {
                return Err(Error::shape(format!(
                    "slice {start}..{} out of range for {n} columns",
                    start + len
                )));
            }
            let mut out = Vec::with_capacity(m * len);
            for row in ins[0].data().chunks_exact(n) {
                out.extend_from_slice(&row[*start..start + len]);
            }
            Ok(Tensor::from_parts(vec![m, *len], out))
        }
        Op::SumAll | Op::MeanAll => {
            arity(op, ins.len(), 1)?;
            let total = ins[0].data().iter().fold(T::zero(), |a, &b| a + b);
            Ok(Tensor::scalar(if matches!(op, Op::SumAll) {
                total
            } else {
                total / T::from_usize(ins[0].numel()).unwrap()
            }))
        }
        Op::SumLast => {
            arity(op, ins.len(), 1)?;
            let (m, n) = row_len(op, ins[0])?;
            let out = ins[0]
                .data()
                .chunks_exact(n)
                .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
                .collect();
            Ok(Tensor::from_parts(vec![m, 1], out))
        }
    }
}

/// Vector-Jacobian products for each input of `op`.
fn vjp<T: Real>(
    op: &Op<T>,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
    fault: Option<Fault>,
) -> Vec<Option<Tensor<T>>> {
    let elementwise = |f: &dyn Fn(T, T, T) -> T| -> Vec<Option<Tensor<T>>> {
        // f(input, output, upstream)
        let data = ins[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&x, &y), &gy)| f(x, y, gy))
            .collect();
        vec![Some(Tensor::from_parts(out.shape().to_vec(), data))]
    };
    let two = T::one() + T::one();
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (m, k) = ins[0].dims2().unwrap();
            let n = ins[1].dims2().unwrap().1;
            let da = need[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, ins[1].data(), true, T::zero(), &mut d);
                Tensor::from_parts(vec![m, k], d)
            });
            let db = need[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                T::gemm(k, m, n, ins[0].data(), true, g.data(), false, T::zero(), &mut d);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![da, db]
        }
        Op::AddRow => {
            let n = ins[1].numel();
            let db = need[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                Tensor::from_parts(ins[1].shape().to_vec(), acc)
            });
            vec![Some(g.clone()), db]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul => vec![
            need[0].then(|| zip_map(g, ins[1], |a, b| a * b)),
            need[1].then(|| zip_map(g, ins[0], |a, b| a * b)),
        ],
        Op::Div => vec![
            need[0].then(|| zip_map(g, ins[1], |a, b| a / b)),
            need[1].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(ins[0].data())
                    .zip(ins[1].data())
                    .map(|((&gy, &a), &b)| -gy * a / (b * b))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            }),
        ],
        Op::Neg => vec![Some(g.map(|v| -v))],
        Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Exp => elementwise(&|_, y, gy| gy * y),
        Op::Log => elementwise(&|x, _, gy| gy / x),
        Op::Square => elementwise(&|x, _, gy| gy * two * x),
        Op::Sqrt => elementwise(&|_, y, gy| gy / (two * y)),
        Op::Relu => elementwise(&|x, _, gy| if x > T::zero() { gy } else { T::zero() }),
        Op::Sigmoid => {
            let bias = if fault == Some(Fault::SigmoidBackward) {
                T::from_f64_lossy(1.5)
            } else {
                T::one()
            };
            elementwise(&|_, y, gy| gy * y * (T::one() - y) * bias)
        }
        Op::Softplus => elementwise(&|x, _, gy| gy * sigmoid(x)),
        Op::Clamp { lo, hi } => {
            elementwise(&|x, _, gy| if x >= *lo && x <= *hi { gy } else { T::zero() })
        }
        Op::SoftmaxRows => {
            let n = out.dims2().unwrap().1;
            let mut d = Vec::with_capacity(out.numel());
            for (y, gy) in out.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                let dot = y.iter().zip(gy).fold(T::zero(), |a, (&p, &q)| a + p * q);
                d.extend(y.iter().zip(gy).map(|(&p, &q)| p * (q - dot)));
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Op::Concat => {
            let (m, total) = out.dims2().unwrap();
            let mut offset = 0;
            ins.iter()
                .zip(need)
                .map(|(t, &needed)| {
                    let w = t.dims2().unwrap().1;
                    let start = offset;
                    offset += w;
                    needed.then(|| {
                        let mut d = Vec::with_capacity(m * w);
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[start..start + w]);
                        }
                        Tensor::from_parts(vec![m, w], d)
                    })
                })
                .collect()
        }
        Op::Slice { start, len } => {
            let (m, n) = ins[0].dims2().unwrap();
            let mut d = vec![T::zero(); m * n];
            for (row, gy) in d.chunks_exact_mut(n).zip(g.data().chunks_exact(*len)) {
                row[*start..start + len].copy_from_slice(gy);
            }
            vec![Some(Tensor::from_parts(vec![m, n], d))]
        }
        Op::SumAll => vec![Some(Tensor::full(ins[0].shape(), g.item()))],
        Op::MeanAll => {
            let n = T::from_usize(ins[0].numel()).unwrap();
            vec![Some(Tensor::full(ins[0].shape(), g.item() / n))]
        }
        Op::SumLast => {
            let (m, n) = ins[0].dims2().unwrap();
            let mut d = Vec::with_capacity(m * n);
            for &gy in g.data() {
                d.extend(std::iter::repeat_n(gy, n));
            }
            vec![Some(Tensor::from_parts(vec![m, n], d))]
        }
    }
}
