//! Kernel forward math and the per-operation backward rules.

use super::Tensor;

/// Operation record stored on a graph node. Saved fields hold whatever the
/// backward rule needs beyond the parents' and the node's own values.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Matmul,
    /// out = a @ b^T with a: [m x k], b: [n x k]
    MatmulTransB,
    Add,
    /// matrix [r x c] + row vector [c]
    AddRow,
    /// broadcast a scalar tensor [1] over every element
    AddScalarT,
    Sub,
    Mul,
    /// a / max(b, floor), elementwise
    DivClamped { floor: f64 },
    Scale { c: f64 },
    AddConst,
    Sigmoid,
    Relu,
    Exp,
    SoftmaxRows,
    LogSoftmaxRows,
    CumsumRows,
    RevCumsumRows,
    CumprodRows,
    LayerNorm { eps: f64 },
    Clamp { lo: f64, hi: f64 },
    /// rows of a table selected by index
    Gather { indices: Vec<usize> },
    /// one element per row
    PickPerRow { indices: Vec<usize> },
    ConcatCols,
    ConcatRows,
    SliceRows { start: usize, len: usize },
    /// shift every row one step right, filling column 0 with a constant
    ShiftRowsRight,
    Reshape,
    SumAll,
    SumRows,
    /// whole-tensor L2 normalization (zero stays zero)
    L2Normalize,
}

// ---- forward helpers (plain f64 slices) ----

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn matmul_transb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    // a: [m x k], b: [n x k] -> out [m x n]
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    // Clamp keeps the output strictly inside (0, 1) in f64.
    let x = x.clamp(-36.0, 36.0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub(crate) fn layer_norm_row(row: &mut [f64], eps: f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

// ---- backward dispatch ----

impl Op {
    /// Propagate `grad_out` through this node into its parents' accumulators.
    pub(crate) fn backward(&self, node: &Tensor, parents: &[Tensor], grad_out: &[f64]) {
        match self {
            Op::Matmul => {
                let (m, k) = mat_dims(&parents[0]);
                let n = mat_dims(&parents[1]).1;
                let a = parents[0].values_ref();
                let b = parents[1].values_ref();
                if parents[0].requires_grad() {
                    // dA = g @ B^T
                    let da = matmul_transb(grad_out, &b, m, n, k);
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    // dB = A^T @ g; compute via transpose of A
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = a[i * k + p];
                        }
                    }
                    let db = matmul(&at, grad_out, k, m, n);
                    parents[1].accumulate_grad(&db);
                }
            }
            Op::MatmulTransB => {
                let (m, k) = mat_dims(&parents[0]);
                let n = mat_dims(&parents[1]).0;
                let a = parents[0].values_ref();
                let b = parents[1].values_ref();
                if parents[0].requires_grad() {
                    // dA = g @ B   (g: [m x n], B: [n x k])
                    let da = matmul(grad_out, &b, m, n, k);
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    // dB = g^T @ A (g^T: [n x m], A: [m x k])
                    let mut gt = vec![0.0; n * m];
                    for i in 0..m {
                        for j in 0..n {
                            gt[j * m + i] = grad_out[i * n + j];
                        }
                    }
                    let db = matmul(&gt, &a, n, m, k);
                    parents[1].accumulate_grad(&db);
                }
            }
            Op::Add => {
                parents[0].accumulate_grad(grad_out);
                parents[1].accumulate_grad(grad_out);
            }
            Op::AddRow => {
                parents[0].accumulate_grad(grad_out);
                if parents[1].requires_grad() {
                    let c = parents[1].len();
                    let mut db = vec![0.0; c];
                    for (i, g) in grad_out.iter().enumerate() {
                        db[i % c] += g;
                    }
                    parents[1].accumulate_grad(&db);
                }
            }
            Op::AddScalarT => {
                parents[0].accumulate_grad(grad_out);
                if parents[1].requires_grad() {
                    parents[1].accumulate_grad(&[grad_out.iter().sum()]);
                }
            }
            Op::Sub => {
                parents[0].accumulate_grad(grad_out);
                if parents[1].requires_grad() {
                    let neg: Vec<f64> = grad_out.iter().map(|g| -g).collect();
                    parents[1].accumulate_grad(&neg);
                }
            }
            Op::Mul => {
                if parents[0].requires_grad() {
                    let b = parents[1].values_ref();
                    let da: Vec<f64> = grad_out.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    let a = parents[0].values_ref();
                    let db: Vec<f64> = grad_out.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                    parents[1].accumulate_grad(&db);
                }
            }
            Op::DivClamped { floor } => {
                let a = parents[0].values_ref();
                let b = parents[1].values_ref();
                if parents[0].requires_grad() {
                    let da: Vec<f64> = grad_out
                        .iter()
                        .zip(b.iter())
                        .map(|(g, b)| g / b.max(*floor))
                        .collect();
                    parents[0].accumulate_grad(&da);
                }
                if parents[1].requires_grad() {
                    let db: Vec<f64> = grad_out
                        .iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(g, (a, b))| if *b > *floor { -g * a / (b * b) } else { 0.0 })
                        .collect();
                    parents[1].accumulate_grad(&db);
                }
            }
            Op::Scale { c } => {
                let da: Vec<f64> = grad_out.iter().map(|g| g * c).collect();
                parents[0].accumulate_grad(&da);
            }
            Op::AddConst => {
                parents[0].accumulate_grad(grad_out);
            }
            Op::Sigmoid => {
                let y = node.values_ref();
                let da: Vec<f64> = grad_out
                    .iter()
                    .zip(y.iter())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                parents[0].accumulate_grad(&da);
            }
            Op::Relu => {
                let x = parents[0].values_ref();
                let da: Vec<f64> = grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&da);
            }
            Op::Exp => {
                let y = node.values_ref();
                let da: Vec<f64> = grad_out.iter().zip(y.iter()).map(|(g, y)| g * y).collect();
                parents[0].accumulate_grad(&da);
            }
            Op::SoftmaxRows => {
                let y = node.values_ref();
                let (r, c) = row_dims(node);
                let mut da = vec![0.0; y.len()];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &grad_out[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs.iter()).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        da[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::LogSoftmaxRows => {
                let y = node.values_ref();
                let (r, c) = row_dims(node);
                let mut da = vec![0.0; y.len()];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &grad_out[i * c..(i + 1) * c];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..c {
                        da[i * c + j] = gs[j] - ys[j].exp() * gsum;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::CumsumRows => {
                let (r, c) = row_dims(node);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let gs = &grad_out[i * c..(i + 1) * c];
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        acc += gs[j];
                        da[i * c + j] = acc;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::RevCumsumRows => {
                let (r, c) = row_dims(node);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let gs = &grad_out[i * c..(i + 1) * c];
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += gs[j];
                        da[i * c + j] = acc;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::CumprodRows => {
                // Exact skip-product form; avoids dividing by zero entries.
                let x = parents[0].values_ref();
                let (r, c) = row_dims(node);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let xs = &x[i * c..(i + 1) * c];
                    let gs = &grad_out[i * c..(i + 1) * c];
                    let mut prefix = 1.0;
                    for j in 0..c {
                        let mut run = prefix;
                        let mut acc = gs[j] * run;
                        for k in j + 1..c {
                            run *= xs[k];
                            acc += gs[k] * run;
                        }
                        da[i * c + j] = acc;
                        prefix *= xs[j];
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::LayerNorm { eps } => {
                let x = parents[0].values_ref();
                let y = node.values_ref();
                let (r, c) = row_dims(node);
                let n = c as f64;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let xs = &x[i * c..(i + 1) * c];
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &grad_out[i * c..(i + 1) * c];
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gs.iter().sum::<f64>() / n;
                    let gydot = gs.iter().zip(ys.iter()).map(|(g, y)| g * y).sum::<f64>() / n;
                    for j in 0..c {
                        da[i * c + j] = inv * (gs[j] - gmean - ys[j] * gydot);
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::Clamp { lo, hi } => {
                let x = parents[0].values_ref();
                let da: Vec<f64> = grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&da);
            }
            Op::Gather { indices } => {
                if parents[0].requires_grad() {
                    let d = parents[0].shape()[1];
                    let mut da = vec![0.0; parents[0].len()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            da[idx * d + j] += grad_out[row * d + j];
                        }
                    }
                    parents[0].accumulate_grad(&da);
                }
            }
            Op::PickPerRow { indices } => {
                if parents[0].requires_grad() {
                    let c = parents[0].shape()[1];
                    let mut da = vec![0.0; parents[0].len()];
                    for (i, &idx) in indices.iter().enumerate() {
                        da[i * c + idx] = grad_out[i];
                    }
                    parents[0].accumulate_grad(&da);
                }
            }
            Op::ConcatCols => {
                let (r, _) = row_dims(node);
                let total: usize = node.shape()[1];
                let mut offset = 0;
                for p in parents {
                    let pc = p.shape()[1];
                    if p.requires_grad() {
                        let mut dp = vec![0.0; r * pc];
                        for i in 0..r {
                            dp[i * pc..(i + 1) * pc].copy_from_slice(
                                &grad_out[i * total + offset..i * total + offset + pc],
                            );
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for p in parents {
                    let len = p.len();
                    if p.requires_grad() {
                        p.accumulate_grad(&grad_out[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { start, len } => {
                if parents[0].requires_grad() {
                    let c = parents[0].shape()[1];
                    let mut da = vec![0.0; parents[0].len()];
                    da[start * c..(start + len) * c].copy_from_slice(grad_out);
                    parents[0].accumulate_grad(&da);
                }
            }
            Op::ShiftRowsRight => {
                let (r, c) = row_dims(node);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c - 1 {
                        da[i * c + j] = grad_out[i * c + j + 1];
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::Reshape => {
                parents[0].accumulate_grad(grad_out);
            }
            Op::SumAll => {
                let g = grad_out[0];
                let da = vec![g; parents[0].len()];
                parents[0].accumulate_grad(&da);
            }
            Op::SumRows => {
                let c = parents[0].shape()[1];
                let mut da = vec![0.0; parents[0].len()];
                for (i, g) in grad_out.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] = *g;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            Op::L2Normalize => {
                let x = parents[0].values_ref();
                let y = node.values_ref();
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return;
                }
                let ydot: f64 = y.iter().zip(grad_out.iter()).map(|(y, g)| y * g).sum();
                let da: Vec<f64> = grad_out
                    .iter()
                    .zip(y.iter())
                    .map(|(g, y)| (g - y * ydot) / norm)
                    .collect();
                parents[0].accumulate_grad(&da);
            }
        }
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn row_dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    if s.len() == 1 {
        (1, s[0])
    } else {
        (s[0], s[1])
    }
}
