//! Primitive tensor kernels.
//!
//! These are pure functions on [`Tensor`] values; the autodiff
//! [`graph`](super::graph) records them and reuses them for backward rules.
//! Matrix products go through `matrixmultiply::sgemm`, with transposes
//! expressed via strides. Reductions (softmax denominators, layer-norm
//! statistics, sums, cross-entropy) accumulate in `f64` so that downstream
//! finite-difference checks are not drowned in rounding noise.

use super::{NumResult, NumericsError, Tensor};

pub const LAYERNORM_EPS: f32 = 1e-5;

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `a[m,k] x b[k,n] -> [m,n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let c = gemm(m, ka, n, a.data(), ka as isize, 1, b.data(), n as isize, 1);
    Tensor::with_op_name(vec![m, n], c, "matmul")
}

/// `a[m,k] x b[n,k]^T -> [m,n]`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    let (m, ka) = a.dims2("matmul_nt")?;
    let (n, kb) = b.dims2("matmul_nt")?;
    if ka != kb {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let c = gemm(m, ka, n, a.data(), ka as isize, 1, b.data(), 1, ka as isize);
    Tensor::with_op_name(vec![m, n], c, "matmul_nt")
}

/// `a[m,k]^T x b[m,n] -> [k,n]`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    let (ma, k) = a.dims2("matmul_tn")?;
    let (mb, n) = b.dims2("matmul_tn")?;
    if ma != mb {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let c = gemm(k, ma, n, a.data(), 1, k as isize, b.data(), n as isize, 1);
    Tensor::with_op_name(vec![k, n], c, "matmul_tn")
}

pub fn add(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::with_op_name(a.shape().to_vec(), data, "add")
}

/// Adds a length-`n` bias row to every row of `a[m,n]`. This is the single
/// sanctioned broadcast in the library.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> NumResult<Tensor> {
    let (m, n) = a.dims2("add_bias")?;
    if bias.shape() != [n] {
        return Err(NumericsError::DimensionMismatch {
            op: "add_bias",
            left: a.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let mut data = Vec::with_capacity(m * n);
    for row in a.data().chunks_exact(n) {
        data.extend(row.iter().zip(b).map(|(x, y)| x + y));
    }
    Tensor::with_op_name(vec![m, n], data, "add_bias")
}

pub fn mul(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "mul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::with_op_name(a.shape().to_vec(), data, "mul")
}

pub fn scale(a: &Tensor, c: f32) -> NumResult<Tensor> {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::with_op_name(a.shape().to_vec(), data, "scale")
}

/// Row-wise softmax with max subtraction; denominators accumulate in f64.
pub fn softmax_rows(a: &Tensor) -> NumResult<Tensor> {
    let (m, n) = a.dims2("softmax")?;
    let mut data = Vec::with_capacity(m * n);
    for row in a.data().chunks_exact(n) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().map(|&e| e as f64).sum();
        data.extend(exps.iter().map(|&e| (e as f64 / denom) as f32));
    }
    Tensor::with_op_name(vec![m, n], data, "softmax")
}

/// Row-wise layer normalization with learned gain/bias.
pub fn layernorm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> NumResult<Tensor> {
    let (m, n) = x.dims2("layernorm")?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(NumericsError::DimensionMismatch {
            op: "layernorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let g = gamma.data();
    let b = beta.data();
    let mut data = Vec::with_capacity(m * n);
    for row in x.data().chunks_exact(n) {
        let (mean, var) = row_mean_var(row);
        let inv = 1.0 / (var + LAYERNORM_EPS as f64).sqrt();
        for (j, &v) in row.iter().enumerate() {
            let xhat = ((v as f64 - mean) * inv) as f32;
            data.push(xhat * g[j] + b[j]);
        }
    }
    Tensor::with_op_name(vec![m, n], data, "layernorm")
}

pub(crate) fn row_mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;

pub fn gelu(a: &Tensor) -> NumResult<Tensor> {
    let data = a.data().iter().map(|&x| gelu_scalar(x)).collect();
    Tensor::with_op_name(a.shape().to_vec(), data, "gelu")
}

#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Gathers rows of `table[v, d]` for each token id.
pub fn embedding(table: &Tensor, ids: &[u32]) -> NumResult<Tensor> {
    let (v, d) = table.dims2("embedding")?;
    if ids.is_empty() {
        return Err(NumericsError::BadShape {
            op: "embedding",
            expected: "at least one token id",
            got: vec![0],
        });
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let row = id as usize;
        if row >= v {
            return Err(NumericsError::TokenOutOfRange { id, vocab: v });
        }
        data.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
    }
    Tensor::with_op_name(vec![ids.len(), d], data, "embedding")
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> NumResult<Tensor> {
    let (m, n) = a.dims2("slice_cols")?;
    if len == 0 || start + len > n {
        return Err(NumericsError::SliceOutOfBounds {
            op: "slice_cols",
            start,
            len,
            bound: n,
        });
    }
    let mut data = Vec::with_capacity(m * len);
    for row in a.data().chunks_exact(n) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Tensor::with_op_name(vec![m, len], data, "slice_cols")
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> NumResult<Tensor> {
    let (m, n) = a.dims2("slice_rows")?;
    if len == 0 || start + len > m {
        return Err(NumericsError::SliceOutOfBounds {
            op: "slice_rows",
            start,
            len,
            bound: m,
        });
    }
    let data = a.data()[start * n..(start + len) * n].to_vec();
    Tensor::with_op_name(vec![len, n], data, "slice_rows")
}

pub fn concat_cols(parts: &[&Tensor]) -> NumResult<Tensor> {
    if parts.is_empty() {
        return Err(NumericsError::BadShape {
            op: "concat_cols",
            expected: "at least one part",
            got: vec![0],
        });
    }
    let (m, _) = parts[0].dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (mp, np) = p.dims2("concat_cols")?;
        if mp != m {
            return Err(NumericsError::DimensionMismatch {
                op: "concat_cols",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        widths.push(np);
    }
    let n: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::with_op_name(vec![m, n], data, "concat_cols")
}

/// Sum of all elements, accumulated in f64, as a scalar tensor.
pub fn sum(a: &Tensor) -> NumResult<Tensor> {
    let s: f64 = a.data().iter().map(|&v| v as f64).sum();
    Tensor::with_op_name(vec![1], vec![s as f32], "sum")
}

/// Mean token-level cross-entropy of `logits[t, v]` against `targets`,
/// skipping positions whose target equals `pad`. Optional label smoothing
/// mixes `smoothing` of uniform mass into the target distribution.
///
/// Errors with [`NumericsError::DegenerateBatch`] when every target is pad.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    pad: u32,
    smoothing: f32,
) -> NumResult<Tensor> {
    let (t, v) = logits.dims2("cross_entropy")?;
    if targets.len() != t {
        return Err(NumericsError::DimensionMismatch {
            op: "cross_entropy",
            left: vec![t, v],
            right: vec![targets.len()],
        });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (row, &tgt) in logits.data().chunks_exact(v).zip(targets) {
        if tgt == pad {
            continue;
        }
        if tgt as usize >= v {
            return Err(NumericsError::TokenOutOfRange { id: tgt, vocab: v });
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
        let nll_target = lse - row[tgt as usize] as f64;
        if smoothing > 0.0 {
            let mean_nll: f64 =
                row.iter().map(|&x| lse - x as f64).sum::<f64>() / v as f64;
            total += (1.0 - smoothing as f64) * nll_target + smoothing as f64 * mean_nll;
        } else {
            total += nll_target;
        }
        count += 1;
    }
    if count == 0 {
        return Err(NumericsError::DegenerateBatch);
    }
    Tensor::with_op_name(vec![1], vec![(total / count as f64) as f32], "cross_entropy")
}

/// Gradient of [`cross_entropy`] with respect to the logits, scaled by
/// `upstream`. Shared by the graph backward rule.
pub(crate) fn cross_entropy_grad(
    logits: &Tensor,
    targets: &[u32],
    pad: u32,
    smoothing: f32,
    upstream: f32,
) -> NumResult<Vec<f32>> {
    let (t, v) = logits.dims2("cross_entropy")?;
    let count = targets.iter().filter(|&&x| x != pad).count();
    if count == 0 {
        return Err(NumericsError::DegenerateBatch);
    }
    let inv = upstream / count as f32;
    let mut grad = vec![0.0f32; t * v];
    for (i, (row, &tgt)) in logits.data().chunks_exact(v).zip(targets).enumerate() {
        if tgt == pad {
            continue;
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&x| ((x - max) as f64).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let smooth = smoothing as f64 / v as f64;
        for j in 0..v {
            let p = exps[j] / denom;
            let mut y = smooth;
            if j == tgt as usize {
                y += 1.0 - smoothing as f64;
            }
            grad[i * v + j] = ((p - y) * inv as f64) as f32;
        }
    }
    Ok(grad)
}
