//! Adaptive average pooling and the squeeze-and-excitation block, both over
//! channels-last `[N, L, C]` input.

use super::activation::sigmoid_scalar;
use super::gemm::gemm;
use super::Tensor;
use crate::error::Result;

/// Per-channel mean over positions: `[N, L, C] -> [N, C]`.
pub fn adaptive_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(3, "adaptive_avg_pool input")?;
    let (n, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    if l == 0 {
        return crate::error::dim_err("adaptive_avg_pool over empty length");
    }
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        let o = &mut out[b * c..(b + 1) * c];
        for row in x.data()[b * l * c..(b + 1) * l * c].chunks_exact(c) {
            for (acc, v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= l as f64);
    }
    Tensor::new(&[n, c], out)
}

/// Spreads `dy: [N, C]` uniformly over `len` positions.
pub fn adaptive_avg_pool_backward(dy: &Tensor, len: usize) -> Result<Tensor> {
    dy.expect_rank(2, "adaptive_avg_pool gradient")?;
    let (n, c) = (dy.dim(0), dy.dim(1));
    let mut dx = vec![0.0; n * len * c];
    for b in 0..n {
        let g = &dy.data()[b * c..(b + 1) * c];
        for row in dx[b * len * c..(b + 1) * len * c].chunks_exact_mut(c) {
            for (d, v) in row.iter_mut().zip(g) {
                *d = v / len as f64;
            }
        }
    }
    Tensor::new(&[n, len, c], dx)
}

/// Excitation weights: `w1: [C, H]`, `b1: [H]`, `w2: [H, C]`, `b2: [C]`.
pub struct SeWeights<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct SeCache {
    squeeze: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SeGrads {
    pub dx: Tensor,
    pub dw1: Tensor,
    pub db1: Tensor,
    pub dw2: Tensor,
    pub db2: Tensor,
}

/// Hidden width of the excitation bottleneck.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

pub fn se_block(x: &Tensor, w: &SeWeights<'_>) -> Result<(Tensor, SeCache)> {
    x.expect_rank(3, "se_block input")?;
    let (n, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    let h = w.w1.dim(1);
    w.w1.expect_shape(&[c, h], "se w1")?;
    w.b1.expect_shape(&[h], "se b1")?;
    w.w2.expect_shape(&[h, c], "se w2")?;
    w.b2.expect_shape(&[c], "se b2")?;

    let squeeze = adaptive_avg_pool(x)?.into_data();
    let mut hidden_pre = vec![0.0; n * h];
    for r in hidden_pre.chunks_exact_mut(h) {
        r.copy_from_slice(w.b1.data());
    }
    gemm(n, c, h, 1.0, &squeeze, false, w.w1.data(), false, 1.0, &mut hidden_pre);
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let mut gate = vec![0.0; n * c];
    for r in gate.chunks_exact_mut(c) {
        r.copy_from_slice(w.b2.data());
    }
    gemm(n, h, c, 1.0, &hidden, false, w.w2.data(), false, 1.0, &mut gate);
    gate.iter_mut().for_each(|g| *g = sigmoid_scalar(*g));

    let mut out = x.data().to_vec();
    for b in 0..n {
        let g = &gate[b * c..(b + 1) * c];
        for row in out[b * l * c..(b + 1) * l * c].chunks_exact_mut(c) {
            for (v, s) in row.iter_mut().zip(g) {
                *v *= s;
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, SeCache { squeeze, hidden_pre, hidden, gate }))
}

pub fn se_block_backward(x: &Tensor, w: &SeWeights<'_>, cache: &SeCache, dy: &Tensor) -> Result<SeGrads> {
    let (n, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    let h = w.w1.dim(1);
    dy.expect_shape(x.shape(), "se_block upstream gradient")?;

    // dy/dx through the direct scaling path, and dL/dgate.
    let mut dx = vec![0.0; x.len()];
    let mut dgate = vec![0.0; n * c];
    for b in 0..n {
        let g = &cache.gate[b * c..(b + 1) * c];
        let dg = &mut dgate[b * c..(b + 1) * c];
        let span = b * l * c..(b + 1) * l * c;
        for ((xr, dyr), dxr) in x.data()[span.clone()]
            .chunks_exact(c)
            .zip(dy.data()[span.clone()].chunks_exact(c))
            .zip(dx[span].chunks_exact_mut(c))
        {
            for j in 0..c {
                dxr[j] = dyr[j] * g[j];
                dg[j] += dyr[j] * xr[j];
            }
        }
    }
    // through the sigmoid
    let dz2: Vec<f64> = dgate.iter().zip(&cache.gate).map(|(d, s)| d * s * (1.0 - s)).collect();
    let mut dw2 = vec![0.0; h * c];
    gemm(h, n, c, 1.0, &cache.hidden, true, &dz2, false, 0.0, &mut dw2);
    let db2 = column_sums(&dz2, c);
    let mut dhidden = vec![0.0; n * h];
    gemm(n, c, h, 1.0, &dz2, false, w.w2.data(), true, 0.0, &mut dhidden);
    let dz1: Vec<f64> = dhidden
        .iter()
        .zip(&cache.hidden_pre)
        .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
        .collect();
    let mut dw1 = vec![0.0; c * h];
    gemm(c, n, h, 1.0, &cache.squeeze, true, &dz1, false, 0.0, &mut dw1);
    let db1 = column_sums(&dz1, h);
    let mut dsqueeze = vec![0.0; n * c];
    gemm(n, h, c, 1.0, &dz1, false, w.w1.data(), true, 0.0, &mut dsqueeze);
    // squeeze is a mean over positions
    for b in 0..n {
        let ds = &dsqueeze[b * c..(b + 1) * c];
        for row in dx[b * l * c..(b + 1) * l * c].chunks_exact_mut(c) {
            for (d, s) in row.iter_mut().zip(ds) {
                *d += s / l as f64;
            }
        }
    }
    Ok(SeGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw1: Tensor::new(&[c, h], dw1)?,
        db1: Tensor::vector(db1),
        dw2: Tensor::new(&[h, c], dw2)?,
        db2: Tensor::vector(db2),
    })
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in m.chunks_exact(cols) {
        for (a, v) in s.iter_mut().zip(r) {
            *a += v;
        }
    }
    s
}
