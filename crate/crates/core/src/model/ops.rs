//! Dense kernels. Every output row depends only on the matching input row and
//! accumulates in a fixed order, so a token's activations are bit-identical
//! whether it is processed alone or inside a larger batch of rows.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const ROPE_BASE: f64 = 10_000.0;

/// `x (n x k) · w (k x m)`.
pub(crate) fn matmul(x: &[f64], n: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    let mut out = vec![0.0; n * m];
    for (xi, oi) in x.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(m.max(1))) {
        for (&a, wp) in xi.iter().zip(w.chunks_exact(m)) {
            for (o, &b) in oi.iter_mut().zip(wp) {
                *o += a * b;
            }
        }
    }
    out
}

/// `x (n x k) · w (k x m) + bias (m)`.
pub(crate) fn affine(x: &[f64], n: usize, k: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let m = bias.len();
    let mut out = matmul(x, n, k, w, m);
    for row in out.chunks_exact_mut(m) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

/// `g (n x m) · w^T` where `w` is `k x m`.
pub(crate) fn matmul_bt(g: &[f64], n: usize, m: usize, w: &[f64], k: usize) -> Vec<f64> {
    let wt = transpose(w, k, m);
    matmul(g, n, m, &wt, k)
}

/// `acc (k x m) += x^T (k x n) · g (n x m)`.
pub(crate) fn acc_at_b(acc: &mut [f64], x: &[f64], n: usize, k: usize, g: &[f64], m: usize) {
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let gi = &g[i * m..(i + 1) * m];
        for (&a, accp) in xi.iter().zip(acc.chunks_exact_mut(m)) {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in accp.iter_mut().zip(gi) {
                *o += a * b;
            }
        }
    }
}

/// Column sums of `g (n x m)` added into `acc (m)`.
pub(crate) fn acc_col_sum(acc: &mut [f64], g: &[f64], m: usize) {
    for row in g.chunks_exact(m) {
        for (o, &b) in acc.iter_mut().zip(row) {
            *o += b;
        }
    }
}

pub(crate) fn transpose(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = w[r * cols + c];
        }
    }
    out
}

/// Per-row layer norm state needed by the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct NormTape {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormTape) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, NormTape { xhat, rstd })
}

/// Returns `dx`; accumulates into `dgain` and `dbias`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    gain: &[f64],
    tape: &NormTape,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &tape.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dgain[j] += dyi[j] * xh[j];
            dbias[j] += dyi[j];
            dxhat[j] = dyi[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = tape.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Rotates each `(2p, 2p + 1)` pair of every head by `position * base^(-2p / head_dim)`.
pub(crate) fn rotary(x: &mut [f64], positions: &[usize], d: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| ROPE_BASE.powf(-((2 * p) as f64) / head_dim as f64))
        .collect();
    for (row, &pos) in x.chunks_exact_mut(d).zip(positions) {
        for (p, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let sin = if inverse { -sin } else { sin };
            for head in row.chunks_exact_mut(head_dim) {
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                head[2 * p] = a * cos - b * sin;
                head[2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}

pub(crate) fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let angle = pos as f64 / ROPE_BASE.powf((j / 2 * 2) as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Masked softmax attention for one query and head. `keys` yields
/// `(key, value)` slices in a fixed order; `probs` receives the weights in
/// that order. An empty key set leaves `out` at zero.
pub(crate) fn attend<'a>(
    q: &[f64],
    keys: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    scale: f64,
    out: &mut [f64],
    probs: &mut Vec<f64>,
) {
    probs.clear();
    let mut max = f64::NEG_INFINITY;
    for (k, _) in keys.clone() {
        let s = dot(q, k) * scale;
        max = max.max(s);
        probs.push(s);
    }
    if probs.is_empty() {
        return;
    }
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    for ((_, v), &p) in keys.zip(probs.iter()) {
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(matmul(&x, 2, 2, &w, 3), vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
        assert_eq!(matmul_bt(&[1.0, 2.0, 3.0], 1, 3, &w, 2), vec![4.0, 5.0]);
    }

    #[test]
    fn rotary_round_trips() {
        let mut x: Vec<f64> = (0..16).map(|v| v as f64 * 0.1).collect();
        let orig = x.clone();
        rotary(&mut x, &[3, 17], 8, 4, false);
        rotary(&mut x, &[3, 17], 8, 4, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-5;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_attention_is_zero() {
        let mut out = vec![0.0; 2];
        let mut probs = Vec::new();
        attend(&[1.0, 1.0], std::iter::empty(), 1.0, &mut out, &mut probs);
        assert_eq!(out, vec![0.0, 0.0]);
    }
}
