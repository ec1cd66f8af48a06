//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! Everything is 64-bit: the alignment recurrence multiplies long chains of
//! (1 - p) terms and 32-bit precision underflows in practice. Graphs are
//! rebuilt on every forward pass; a `Tensor` produced from grad-requiring
//! inputs carries backpointers to its parents, and [`GradGraph`] walks them
//! in reverse topological order.
//!
//! Construction and backward are single-threaded; tensors are not `Send`.
//! Code that wants concurrency rebuilds its model per thread from plain data.

mod op;

use crate::error::{Error, Result};
use op::Op;
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

#[derive(Debug)]
struct Inner {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    op: Option<Op>,
}

/// Dense real array participating in a reverse-mode gradient graph.
#[derive(Debug, Clone)]
pub struct Tensor(Rc<Inner>);

impl Tensor {
    /// Leaf tensor that does not require gradients.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(values, shape, false)
    }

    /// Leaf tensor that accumulates gradients during backward.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(values, shape, true)
    }

    fn leaf(values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "shape {:?} does not hold {} values",
                shape,
                values.len()
            )));
        }
        Ok(Tensor(Rc::new(Inner {
            shape: shape.to_vec(),
            values: RefCell::new(values),
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            op: None,
        })))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(vec![v], &[1]).expect("scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(vec![0.0; shape.iter().product()], shape).expect("zeros")
    }

    fn from_op(values: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, op: Op) -> Self {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite kernel output"
        );
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor(Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                op: Some(op),
            }))
        } else {
            // No gradient consumer: keep the result detached so inference
            // loops do not grow a graph.
            Tensor(Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                op: None,
            }))
        }
    }

    // ---- accessors ----

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn values_ref(&self) -> Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    /// Cloned value buffer (row-major).
    pub fn values(&self) -> Vec<f64> {
        self.0.values.borrow().clone()
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.0.values.borrow()[idx]
    }

    /// Single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar");
        self.0.values.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's values in place (optimizer updates, finite differences).
    pub fn set_values(&self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Contract(format!(
                "set_values: expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        *self.0.values.borrow_mut() = values;
        Ok(())
    }

    /// Add `delta` to one coordinate in place.
    pub fn nudge(&self, idx: usize, delta: f64) {
        self.0.values.borrow_mut()[idx] += delta;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn rows_cols(&self, kernel: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.len() {
            1 => Ok((1, self.0.shape[0])),
            2 => Ok((self.0.shape[0], self.0.shape[1])),
            _ => Err(Error::Dimension {
                kernel,
                lhs: self.0.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn mat2(&self, kernel: &'static str, other: &Tensor) -> Result<((usize, usize), (usize, usize))> {
        if self.0.shape.len() != 2 || other.0.shape.len() != 2 {
            return Err(Error::Dimension {
                kernel,
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        Ok((
            (self.0.shape[0], self.0.shape[1]),
            (other.0.shape[0], other.0.shape[1]),
        ))
    }

    // ---- kernels ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ((m, k), (k2, n)) = self.mat2("matmul", other)?;
        if k != k2 {
            return Err(Error::Dimension {
                kernel: "matmul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let out = op::matmul(&self.values_ref(), &other.values_ref(), m, k, n);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Op::Matmul,
        ))
    }

    /// self @ other^T, with self: [m x k] and other: [n x k].
    pub fn matmul_transb(&self, other: &Tensor) -> Result<Tensor> {
        let ((m, k), (n, k2)) = self.mat2("matmul_transb", other)?;
        if k != k2 {
            return Err(Error::Dimension {
                kernel: "matmul_transb",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let out = op::matmul_transb(&self.values_ref(), &other.values_ref(), m, k, n);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Op::MatmulTransB,
        ))
    }

    fn zip_elementwise(
        &self,
        other: &Tensor,
        kernel: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        if self.0.shape != other.0.shape {
            return Err(Error::Dimension {
                kernel,
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let out: Vec<f64> = self
            .values_ref()
            .iter()
            .zip(other.values_ref().iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Tensor::from_op(
            out,
            self.0.shape.clone(),
            vec![self.clone(), other.clone()],
            op,
        ))
    }

    /// Elementwise addition. A trailing-shape operand broadcasts over the
    /// leading dimension ([r x c] + [c]); a length-1 operand broadcasts over
    /// everything.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if other.len() == 1 && self.len() != 1 {
            let s = other.value_at(0);
            let out: Vec<f64> = self.values_ref().iter().map(|a| a + s).collect();
            return Ok(Tensor::from_op(
                out,
                self.0.shape.clone(),
                vec![self.clone(), other.clone()],
                Op::AddScalarT,
            ));
        }
        if self.0.shape.len() == 2 && other.len() == self.0.shape[1] && self.0.shape != other.0.shape
        {
            let c = self.0.shape[1];
            let b = other.values_ref();
            let out: Vec<f64> = self
                .values_ref()
                .iter()
                .enumerate()
                .map(|(i, a)| a + b[i % c])
                .collect();
            return Ok(Tensor::from_op(
                out,
                self.0.shape.clone(),
                vec![self.clone(), other.clone()],
                Op::AddRow,
            ));
        }
        self.zip_elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Elementwise a / max(b, floor).
    pub fn div_clamped(&self, other: &Tensor, floor: f64) -> Result<Tensor> {
        self.zip_elementwise(
            other,
            "div_clamped",
            |a, b| a / b.max(floor),
            Op::DivClamped { floor },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|a| a * c).collect();
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::Scale { c })
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|a| a + c).collect();
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::AddConst)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|a| op::sigmoid_scalar(*a)).collect();
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::Sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|a| a.max(0.0)).collect();
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::Relu)
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|a| a.exp()).collect();
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::Exp)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|a| a.clamp(lo, hi)).collect();
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::Clamp { lo, hi })
    }

    fn rowwise(
        &self,
        kernel: &'static str,
        f: impl Fn(&mut [f64]),
        op: Op,
    ) -> Result<Tensor> {
        let (r, c) = self.rows_cols(kernel)?;
        let mut out = self.values();
        for i in 0..r {
            f(&mut out[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], op))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.rowwise("softmax_rows", op::softmax_row, Op::SoftmaxRows)
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        self.rowwise("log_softmax_rows", op::log_softmax_row, Op::LogSoftmaxRows)
    }

    pub fn cumsum_rows(&self) -> Result<Tensor> {
        self.rowwise(
            "cumsum_rows",
            |row| {
                let mut acc = 0.0;
                for v in row.iter_mut() {
                    acc += *v;
                    *v = acc;
                }
            },
            Op::CumsumRows,
        )
    }

    pub fn rev_cumsum_rows(&self) -> Result<Tensor> {
        self.rowwise(
            "rev_cumsum_rows",
            |row| {
                let mut acc = 0.0;
                for v in row.iter_mut().rev() {
                    acc += *v;
                    *v = acc;
                }
            },
            Op::RevCumsumRows,
        )
    }

    pub fn cumprod_rows(&self) -> Result<Tensor> {
        self.rowwise(
            "cumprod_rows",
            |row| {
                let mut acc = 1.0;
                for v in row.iter_mut() {
                    acc *= *v;
                    *v = acc;
                }
            },
            Op::CumprodRows,
        )
    }

    pub fn layer_norm(&self) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        self.rowwise("layer_norm", |row| op::layer_norm_row(row, EPS), Op::LayerNorm { eps: EPS })
    }

    /// Rows of a [v x d] table selected by index (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let ((v, d), _) = self.mat2("gather_rows", self)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of range for {v} rows"
            )));
        }
        let vals = self.values_ref();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&vals[i * d..(i + 1) * d]);
        }
        drop(vals);
        Ok(Tensor::from_op(
            out,
            vec![indices.len(), d],
            vec![self.clone()],
            Op::Gather {
                indices: indices.to_vec(),
            },
        ))
    }

    /// One element per row: out[i] = self[i, indices[i]].
    pub fn pick_per_row(&self, indices: &[usize]) -> Result<Tensor> {
        let ((r, c), _) = self.mat2("pick_per_row", self)?;
        if indices.len() != r {
            return Err(Error::Contract(format!(
                "pick_per_row: {} indices for {} rows",
                indices.len(),
                r
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Contract(format!(
                "pick_per_row: column {bad} out of range for {c} columns"
            )));
        }
        let vals = self.values_ref();
        let out: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| vals[i * c + j]).collect();
        drop(vals);
        Ok(Tensor::from_op(
            out,
            vec![r],
            vec![self.clone()],
            Op::PickPerRow {
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let ((r, c), _) = self.mat2("slice_rows", self)?;
        if start + len > r || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows: rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.values_ref()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(
            out,
            vec![len, c],
            vec![self.clone()],
            Op::SliceRows { start, len },
        ))
    }

    /// Shift each row one step right, dropping the last entry and filling
    /// column 0 with `fill`.
    pub fn shift_rows_right(&self, fill: f64) -> Result<Tensor> {
        let (r, c) = self.rows_cols("shift_rows_right")?;
        let vals = self.values_ref();
        let mut out = vec![fill; r * c];
        for i in 0..r {
            for j in 1..c {
                out[i * c + j] = vals[i * c + j - 1];
            }
        }
        drop(vals);
        Ok(Tensor::from_op(
            out,
            self.0.shape.clone(),
            vec![self.clone()],
            Op::ShiftRowsRight,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::Contract(format!(
                "reshape: {:?} cannot hold {} values",
                shape,
                self.len()
            )));
        }
        Ok(Tensor::from_op(
            self.values(),
            shape.to_vec(),
            vec![self.clone()],
            Op::Reshape,
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values_ref().iter().sum();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], Op::SumAll)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_rows(&self) -> Result<Tensor> {
        let ((r, c), _) = self.mat2("sum_rows", self)?;
        let vals = self.values_ref();
        let out: Vec<f64> = (0..r).map(|i| vals[i * c..(i + 1) * c].iter().sum()).collect();
        drop(vals);
        Ok(Tensor::from_op(out, vec![r], vec![self.clone()], Op::SumRows))
    }

    /// Whole-tensor L2 normalization; the zero tensor maps to itself.
    pub fn l2_normalize(&self) -> Tensor {
        let norm = self.values_ref().iter().map(|v| v * v).sum::<f64>().sqrt();
        let out: Vec<f64> = if norm == 0.0 {
            vec![0.0; self.len()]
        } else {
            self.values_ref().iter().map(|v| v / norm).collect()
        };
        Tensor::from_op(out, self.0.shape.clone(), vec![self.clone()], Op::L2Normalize)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values_ref().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Vertical concatenation of matrices with matching column counts.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_rows of zero tensors".into()));
    }
    let c = parts[0].shape()[1];
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        if p.shape().len() != 2 || p.shape()[1] != c {
            return Err(Error::Dimension {
                kernel: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += p.shape()[0];
        out.extend_from_slice(&p.values_ref());
    }
    Ok(Tensor::from_op(out, vec![rows, c], parts.to_vec(), Op::ConcatRows))
}

/// Horizontal concatenation of matrices with matching row counts.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero tensors".into()));
    }
    let r = parts[0].shape()[0];
    let mut total = 0;
    for p in parts {
        if p.shape().len() != 2 || p.shape()[0] != r {
            return Err(Error::Dimension {
                kernel: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[1];
    }
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.values_ref()[i * pc..(i + 1) * pc]);
        }
    }
    Ok(Tensor::from_op(out, vec![r, total], parts.to_vec(), Op::ConcatCols))
}

// ---- graph ----

/// Reverse traversal order over the operation records reachable from a loss.
pub struct GradGraph {
    topo: Vec<Tensor>,
}

impl GradGraph {
    /// Collect every grad-requiring node reachable from `loss`, parents first.
    pub fn from_loss(loss: &Tensor) -> Self {
        let mut topo = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        // Iterative postorder DFS; (node, next-parent index) frames.
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if loss.requires_grad() {
            stack.push((loss.clone(), 0));
            visited.insert(Rc::as_ptr(&loss.0) as usize);
        }
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                let key = Rc::as_ptr(&parent.0) as usize;
                if parent.requires_grad() && visited.insert(key) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }
        GradGraph { topo }
    }

    pub fn node_count(&self) -> usize {
        self.topo.len()
    }

    /// Populate `grad` on every grad-requiring leaf reachable from `loss`
    /// with d(loss)/d(leaf). Visits each node exactly once.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Contract(
                "backward: loss does not require gradients".into(),
            ));
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.topo.iter().rev() {
            let Some(op) = node.0.op.as_ref() else { continue };
            let grad = node.0.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            op.backward(node, &node.0.parents, &grad);
            // Intermediate grads are never read again.
            node.clear_grad();
        }
        Ok(())
    }
}

/// Build the graph below `loss` and run one backward pass.
pub fn backward(loss: &Tensor) -> Result<()> {
    GradGraph::from_loss(loss).backward(loss)
}

// ---- spec-level kernel dispatch ----

/// The kernels exposed behind a single dispatch point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Matmul,
    Add,
    Mul,
    Sigmoid,
    SoftmaxRows,
    CumsumRows,
    CumprodRows,
    LayerNorm,
    Relu,
    Scale(f64),
}

/// Apply a named kernel to its operands, recording it on the graph whenever
/// any operand requires gradients.
pub fn kernel_apply(kernel: Kernel, operands: &[&Tensor]) -> Result<Tensor> {
    let want = match kernel {
        Kernel::Matmul | Kernel::Add | Kernel::Mul => 2,
        _ => 1,
    };
    if operands.len() != want {
        return Err(Error::Contract(format!(
            "{kernel:?} takes {want} operands, got {}",
            operands.len()
        )));
    }
    match kernel {
        Kernel::Matmul => operands[0].matmul(operands[1]),
        Kernel::Add => operands[0].add(operands[1]),
        Kernel::Mul => operands[0].mul(operands[1]),
        Kernel::Sigmoid => Ok(operands[0].sigmoid()),
        Kernel::SoftmaxRows => operands[0].softmax_rows(),
        Kernel::CumsumRows => operands[0].cumsum_rows(),
        Kernel::CumprodRows => operands[0].cumprod_rows(),
        Kernel::LayerNorm => operands[0].layer_norm(),
        Kernel::Relu => Ok(operands[0].relu()),
        Kernel::Scale(c) => Ok(operands[0].scale(c)),
    }
}

/// Central-difference gradient of `f` at `params`: the oracle that the
/// analytic backward pass is checked against.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    params: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!(
            "finite_difference_gradient: eps {eps} outside (0, 1e-2]"
        )));
    }
    let n = params.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        params.nudge(i, eps);
        let hi = f(params)?;
        params.nudge(i, -2.0 * eps);
        let lo = f(params)?;
        params.nudge(i, eps);
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_difference_gradient: non-finite objective at coordinate {i}"
            )));
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::constant(grad, params.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> Tensor {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        if grad {
            Tensor::param(vals, shape).unwrap()
        } else {
            Tensor::constant(vals, shape).unwrap()
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::constant(vec![0.0], &[1]).unwrap();
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn cumprod_definition() {
        let x = Tensor::constant(vec![0.5, 0.5, 0.5], &[1, 3]).unwrap();
        assert_eq!(x.cumprod_rows().unwrap().values(), vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randt(&mut rng, &[3, 3], false);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn matmul_shape_mismatch_reports_kernel() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero_slope() {
        let w = Tensor::param(vec![0.0], &[1, 1]).unwrap();
        let x = Tensor::constant(vec![1.0], &[1, 1]).unwrap();
        let loss = w.matmul(&x).unwrap().sigmoid().sum_all();
        backward(&loss).unwrap();
        assert!((w.grad().unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_two_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = randt(&mut rng, &[3, 4], true);
        let w2 = randt(&mut rng, &[4, 2], true);
        let x = randt(&mut rng, &[2, 3], false);
        let run = |_: &Tensor| -> Result<f64> {
            let h = x.matmul(&w1)?.sigmoid();
            let out = h.matmul(&w2)?;
            Ok(out.mul(&out)?.sum_all().item())
        };
        let h = x.matmul(&w1).unwrap().sigmoid();
        let out = h.matmul(&w2).unwrap();
        let loss = out.mul(&out).unwrap().sum_all();
        backward(&loss).unwrap();
        for w in [&w1, &w2] {
            let fd = finite_difference_gradient(run, w, 1e-5).unwrap();
            let an = w.grad().unwrap();
            for (a, f) in an.iter().zip(fd.values().iter()) {
                let denom = f.abs().max(1e-8);
                assert!((a - f).abs() / denom < 1e-5, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn fd_of_square_at_three() {
        let p = Tensor::param(vec![3.0], &[1]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.value_at(0) * t.value_at(0)), &p, 1e-5).unwrap();
        assert!((g.value_at(0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let p = Tensor::param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let g = finite_difference_gradient(|_| Ok(42.0), &p, 1e-4).unwrap();
        assert_eq!(g.values(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_rejects_bad_eps() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        assert!(finite_difference_gradient(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(finite_difference_gradient(|_| Ok(0.0), &p, 0.5).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = randt(&mut rng, &[3, 5], false);
            let shifted = x.add_const(7.25);
            let a = x.softmax_rows().unwrap().values();
            let b = shifted.softmax_rows().unwrap().values();
            for (a, b) in a.iter().zip(b.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cumprod_non_increasing_on_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..6).map(|_| rng.random::<f64>().max(1e-3)).collect();
            let x = Tensor::constant(vals, &[1, 6]).unwrap();
            let y = x.cumprod_rows().unwrap().values();
            for w in y.windows(2) {
                assert!(w[1] <= w[0] + 1e-15);
            }
        }
    }

    /// Every differentiable kernel against central differences, 50 seeds.
    #[test]
    fn kernel_gradients_match_finite_differences() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.random_range(1..=8);
            let c = rng.random_range(1..=8);
            let k = rng.random_range(1..=8);
            check_kernel_grad("matmul", &mut rng, &[r, k], Some([k, c]), |a, b| {
                a.matmul(b.unwrap())
            });
            check_kernel_grad("matmul_transb", &mut rng, &[r, k], Some([c, k]), |a, b| {
                a.matmul_transb(b.unwrap())
            });
            check_kernel_grad("add", &mut rng, &[r, c], Some([r, c]), |a, b| a.add(b.unwrap()));
            check_kernel_grad("sub", &mut rng, &[r, c], Some([r, c]), |a, b| a.sub(b.unwrap()));
            check_kernel_grad("mul", &mut rng, &[r, c], Some([r, c]), |a, b| a.mul(b.unwrap()));
            check_kernel_grad("div_clamped", &mut rng, &[r, c], Some([r, c]), |a, b| {
                // keep divisor away from the clamp
                a.div_clamped(&b.unwrap().add_const(3.0), 1e-10)
            });
            check_kernel_grad("sigmoid", &mut rng, &[r, c], None, |a, _| Ok(a.sigmoid()));
            check_kernel_grad("relu", &mut rng, &[r, c], None, |a, _| Ok(a.add_const(0.1).relu()));
            check_kernel_grad("exp", &mut rng, &[r, c], None, |a, _| Ok(a.exp()));
            check_kernel_grad("scale", &mut rng, &[r, c], None, |a, _| Ok(a.scale(-1.7)));
            check_kernel_grad("softmax_rows", &mut rng, &[r, c], None, |a, _| a.softmax_rows());
            check_kernel_grad("log_softmax_rows", &mut rng, &[r, c], None, |a, _| {
                a.log_softmax_rows()
            });
            check_kernel_grad("cumsum_rows", &mut rng, &[r, c], None, |a, _| a.cumsum_rows());
            check_kernel_grad("rev_cumsum_rows", &mut rng, &[r, c], None, |a, _| {
                a.rev_cumsum_rows()
            });
            check_kernel_grad("cumprod_rows", &mut rng, &[r, c], None, |a, _| {
                a.scale(0.4).add_const(0.5).cumprod_rows()
            });
            if c >= 2 {
                check_kernel_grad("layer_norm", &mut rng, &[r, c], None, |a, _| {
                    a.scale(2.0).layer_norm()
                });
            }
            check_kernel_grad("l2_normalize", &mut rng, &[r, c], None, |a, _| {
                Ok(a.add_const(0.2).l2_normalize())
            });
            check_kernel_grad("shift_rows_right", &mut rng, &[r, c], None, |a, _| {
                a.shift_rows_right(1.0)
            });
            check_kernel_grad("sum_rows", &mut rng, &[r, c], None, |a, _| {
                Ok(a.sum_rows()?.reshape(&[1, r])?)
            });
        }
    }

    fn check_kernel_grad(
        name: &str,
        rng: &mut ChaCha8Rng,
        a_shape: &[usize],
        b_shape: Option<[usize; 2]>,
        f: impl Fn(&Tensor, Option<&Tensor>) -> Result<Tensor>,
    ) {
        let a = randt(rng, a_shape, true);
        let b = b_shape.map(|s| randt(rng, &s, true));
        // Weighted sum output so every output coordinate gets a distinct pull.
        let wn = f(&a, b.as_ref()).unwrap().len();
        let weights =
            Tensor::constant((0..wn).map(|i| 0.3 + 0.1 * i as f64).collect(), &[wn]).unwrap();
        let loss = |at: &Tensor, bt: Option<&Tensor>| -> Result<f64> {
            let out = f(at, bt)?;
            Ok(out.reshape(&[wn])?.mul(&weights)?.sum_all().item())
        };
        let out = f(&a, b.as_ref()).unwrap();
        let l = out.reshape(&[wn]).unwrap().mul(&weights).unwrap().sum_all();
        backward(&l).unwrap();
        let fd_a = finite_difference_gradient(|t| loss(t, b.as_ref()), &a, 1e-6).unwrap();
        assert_close(name, &a.grad().unwrap(), &fd_a.values());
        if let Some(b) = &b {
            let fd_b = finite_difference_gradient(|t| loss(&a, Some(t)), b, 1e-6).unwrap();
            assert_close(name, &b.grad().unwrap(), &fd_b.values());
        }
    }

    fn assert_close(name: &str, analytic: &[f64], fd: &[f64]) {
        for (a, f) in analytic.iter().zip(fd.iter()) {
            let denom = f.abs().max(a.abs()).max(1e-6);
            assert!(
                (a - f).abs() / denom < 1e-4,
                "{name}: analytic {a} vs finite-difference {f}"
            );
        }
    }

    #[test]
    fn kernel_apply_dispatch() {
        let x = Tensor::constant(vec![0.0, 1.0], &[1, 2]).unwrap();
        let y = kernel_apply(Kernel::Sigmoid, &[&x]).unwrap();
        assert_eq!(y.value_at(0), 0.5);
        let s = kernel_apply(Kernel::SoftmaxRows, &[&x]).unwrap();
        let sum: f64 = s.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(kernel_apply(Kernel::Add, &[&x]).is_err());
    }

    #[test]
    fn detached_results_hold_no_graph() {
        let x = Tensor::constant(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap().sum_all();
        assert!(!y.requires_grad());
        assert_eq!(GradGraph::from_loss(&y).node_count(), 0);
    }

    #[test]
    fn graph_visits_shared_node_once() {
        // y = x * x reuses x; grad must be 2x, not 4x.
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().sum_all();
        let g = GradGraph::from_loss(&y);
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
        assert!(g.node_count() >= 2);
    }
}
