//! Tensor primitives. Reductions accumulate in `f64` and round once to `f32`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let bt = b.transpose2()?;
    let (ad, btd) = (a.data(), bt.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let bcol = &btd[j * k..(j + 1) * k];
            let acc: f64 = arow
                .iter()
                .zip(bcol)
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            out.push(acc as f32);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x · w + b` with `x: n×in`, `w: in×out`, `b: out`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, w)?;
    match b {
        Some(b) => y.add_row(b.data()),
        None => Ok(y),
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Min-max normalization over all elements. A constant input maps to all zeros.
pub fn minmax_normalize(x: &Tensor) -> Tensor {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Tensor::zeros(x.shape());
    }
    let (lo, range) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    x.map(|v| ((f64::from(v) - lo) / range) as f32)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| (1.0 / (1.0 + (-f64::from(v)).exp())) as f32)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Concatenates along `axis`; `a`'s elements come first.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || axis >= sa.len() {
        return Err(Error::shape(format!("concat {sa:?} with {sb:?} on axis {axis}")));
    }
    if sa
        .iter()
        .zip(sb)
        .enumerate()
        .any(|(i, (x, y))| i != axis && x != y)
    {
        return Err(Error::shape(format!("concat {sa:?} with {sb:?} on axis {axis}")));
    }
    let outer: usize = sa[..axis].iter().product();
    let inner: usize = sa[axis + 1..].iter().product();
    let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * la..(o + 1) * la]);
        data.extend_from_slice(&b.data()[o * lb..(o + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Ok(Tensor::from_parts(shape, data))
}

/// Per-row layer normalization with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "layer norm params {} / {} for width {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let eps = f64::from(eps);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push(((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
