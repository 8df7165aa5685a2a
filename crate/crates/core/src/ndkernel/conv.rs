//! 1-D cross-correlation over channels-last sequences `[N, L, C]`.
//!
//! Kernels are stored `[k, C_in, C_out]`, so the im2col matrix row for output
//! position `l` is the concatenation of the `k` input rows it covers.

use super::gemm::gemm;
use super::Tensor;
use crate::error::{dim_err, Result};

#[derive(Clone, Debug)]
pub struct Conv1dCache {
    cols: Vec<f64>,
    n: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
pub struct Conv1dGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv1d_output_len(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return dim_err("conv1d stride must be positive");
    }
    if len + 2 * padding < k {
        return dim_err(format!("conv1d kernel of length {k} exceeds padded input {}", len + 2 * padding));
    }
    Ok((len + 2 * padding - k) / stride + 1)
}

pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Conv1dCache)> {
    x.expect_rank(3, "conv1d input")?;
    w.expect_rank(3, "conv1d kernel")?;
    let (n, len_in, c_in) = (x.dim(0), x.dim(1), x.dim(2));
    let (k, wc_in, c_out) = (w.dim(0), w.dim(1), w.dim(2));
    if wc_in != c_in {
        return dim_err(format!("conv1d: input has {c_in} channels, kernel expects {wc_in}"));
    }
    bias.expect_shape(&[c_out], "conv1d bias")?;
    let len_out = conv1d_output_len(len_in, k, stride, padding)?;

    let row = k * c_in;
    let mut cols = vec![0.0; n * len_out * row];
    let xd = x.data();
    for b in 0..n {
        for l in 0..len_out {
            let dst = &mut cols[(b * len_out + l) * row..][..row];
            for tap in 0..k {
                let pos = (l * stride + tap) as isize - padding as isize;
                if pos < 0 || pos >= len_in as isize {
                    continue;
                }
                let src = &xd[(b * len_in + pos as usize) * c_in..][..c_in];
                dst[tap * c_in..(tap + 1) * c_in].copy_from_slice(src);
            }
        }
    }
    let rows = n * len_out;
    let mut out = vec![0.0; rows * c_out];
    for r in out.chunks_exact_mut(c_out) {
        r.copy_from_slice(bias.data());
    }
    gemm(rows, row, c_out, 1.0, &cols, false, w.data(), false, 1.0, &mut out);
    let cache = Conv1dCache { cols, n, len_in, len_out, c_in, k, stride, padding };
    Ok((Tensor::new(&[n, len_out, c_out], out)?, cache))
}

pub fn conv1d_backward(w: &Tensor, cache: &Conv1dCache, dy: &Tensor) -> Result<Conv1dGrads> {
    let Conv1dCache { n, len_in, len_out, c_in, k, stride, padding, .. } = *cache;
    let c_out = w.dim(2);
    dy.expect_shape(&[n, len_out, c_out], "conv1d upstream gradient")?;
    let rows = n * len_out;
    let row = k * c_in;

    let mut dw = vec![0.0; row * c_out];
    gemm(row, rows, c_out, 1.0, &cache.cols, true, dy.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; c_out];
    for r in dy.data().chunks_exact(c_out) {
        for (acc, v) in db.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let mut dcols = vec![0.0; rows * row];
    gemm(rows, c_out, row, 1.0, dy.data(), false, w.data(), true, 0.0, &mut dcols);
    let mut dx = vec![0.0; n * len_in * c_in];
    for b in 0..n {
        for l in 0..len_out {
            let src = &dcols[(b * len_out + l) * row..][..row];
            for tap in 0..k {
                let pos = (l * stride + tap) as isize - padding as isize;
                if pos < 0 || pos >= len_in as isize {
                    continue;
                }
                let dst = &mut dx[(b * len_in + pos as usize) * c_in..][..c_in];
                for (d, s) in dst.iter_mut().zip(&src[tap * c_in..(tap + 1) * c_in]) {
                    *d += s;
                }
            }
        }
    }
    Ok(Conv1dGrads {
        dx: Tensor::new(&[n, len_in, c_in], dx)?,
        dw: Tensor::new(&[k, c_in, c_out], dw)?,
        db: Tensor::vector(db),
    })
}
