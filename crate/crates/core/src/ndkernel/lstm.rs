//! Single-layer LSTM over `[N, T, d]` input with full backpropagation
//! through time. Gate blocks are laid out `[i | f | g | o]` along the
//! `4h` axis of `w_ih: [d, 4h]`, `w_hh: [h, 4h]` and `bias: [4h]`.

use super::activation::{sigmoid_scalar, tanh_scalar};
use super::gemm::gemm;
use super::Tensor;
use crate::error::{dim_err, Result};

#[derive(Clone, Debug)]
pub struct LstmCache {
    n: usize,
    t: usize,
    h: usize,
    /// Post-activation gates per step, `[T][N, 4h]`.
    gates: Vec<f64>,
    /// Cell states per step, `[T][N, h]`.
    cells: Vec<f64>,
    /// tanh of the cell states.
    cell_tanh: Vec<f64>,
    /// Hidden states per step, `[T][N, h]`.
    hidden: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmGrads {
    pub dx: Tensor,
    pub dw_ih: Tensor,
    pub dw_hh: Tensor,
    pub db: Tensor,
}

fn dims(x: &Tensor, w_ih: &Tensor, w_hh: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    x.expect_rank(3, "lstm input")?;
    let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
    if t == 0 {
        return dim_err("lstm needs at least one time step");
    }
    w_hh.expect_rank(2, "lstm w_hh")?;
    let h = w_hh.dim(0);
    w_ih.expect_shape(&[d, 4 * h], "lstm w_ih")?;
    w_hh.expect_shape(&[h, 4 * h], "lstm w_hh")?;
    b.expect_shape(&[4 * h], "lstm bias")?;
    Ok((n, t, d, h))
}

pub fn lstm_forward(x: &Tensor, w_ih: &Tensor, w_hh: &Tensor, bias: &Tensor) -> Result<(Tensor, LstmCache)> {
    let (n, t, d, h) = dims(x, w_ih, w_hh, bias)?;
    let g4 = 4 * h;
    // Input projections for every (sample, step) at once: rows are n*T + t.
    let mut proj = vec![0.0; n * t * g4];
    for r in proj.chunks_exact_mut(g4) {
        r.copy_from_slice(bias.data());
    }
    gemm(n * t, d, g4, 1.0, x.data(), false, w_ih.data(), false, 1.0, &mut proj);

    let mut gates = vec![0.0; t * n * g4];
    let mut cells = vec![0.0; t * n * h];
    let mut cell_tanh = vec![0.0; t * n * h];
    let mut hidden = vec![0.0; t * n * h];
    let mut out = vec![0.0; n * t * h];
    let mut pre = vec![0.0; n * g4];
    for step in 0..t {
        for b in 0..n {
            pre[b * g4..(b + 1) * g4].copy_from_slice(&proj[(b * t + step) * g4..][..g4]);
        }
        if step > 0 {
            let h_prev = &hidden[(step - 1) * n * h..step * n * h];
            gemm(n, h, g4, 1.0, h_prev, false, w_hh.data(), false, 1.0, &mut pre);
        }
        let gs = &mut gates[step * n * g4..(step + 1) * n * g4];
        for b in 0..n {
            let p = &pre[b * g4..(b + 1) * g4];
            let g = &mut gs[b * g4..(b + 1) * g4];
            for j in 0..h {
                g[j] = sigmoid_scalar(p[j]);
                g[h + j] = sigmoid_scalar(p[h + j]);
                g[2 * h + j] = tanh_scalar(p[2 * h + j]);
                g[3 * h + j] = sigmoid_scalar(p[3 * h + j]);
            }
            for j in 0..h {
                let c_prev = if step > 0 { cells[((step - 1) * n + b) * h + j] } else { 0.0 };
                let c = g[h + j] * c_prev + g[j] * g[2 * h + j];
                let tc = tanh_scalar(c);
                let hv = g[3 * h + j] * tc;
                cells[(step * n + b) * h + j] = c;
                cell_tanh[(step * n + b) * h + j] = tc;
                hidden[(step * n + b) * h + j] = hv;
                out[(b * t + step) * h + j] = hv;
            }
        }
    }
    let cache = LstmCache { n, t, h, gates, cells, cell_tanh, hidden };
    Ok((Tensor::new(&[n, t, h], out)?, cache))
}

pub fn lstm_backward(
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    cache: &LstmCache,
    dy: &Tensor,
) -> Result<LstmGrads> {
    let LstmCache { n, t, h, .. } = *cache;
    let d = x.dim(2);
    let g4 = 4 * h;
    dy.expect_shape(&[n, t, h], "lstm upstream gradient")?;

    let mut dpre_all = vec![0.0; n * t * g4];
    let mut dw_hh = vec![0.0; h * g4];
    let mut dh_next = vec![0.0; n * h];
    let mut dc_next = vec![0.0; n * h];
    let mut dpre = vec![0.0; n * g4];
    for step in (0..t).rev() {
        let gs = &cache.gates[step * n * g4..(step + 1) * n * g4];
        for b in 0..n {
            let g = &gs[b * g4..(b + 1) * g4];
            let dp = &mut dpre[b * g4..(b + 1) * g4];
            for j in 0..h {
                let idx = b * h + j;
                let c_prev = if step > 0 { cache.cells[((step - 1) * n + b) * h + j] } else { 0.0 };
                let tc = cache.cell_tanh[(step * n + b) * h + j];
                let dh = dy.data()[(b * t + step) * h + j] + dh_next[idx];
                let (gi, gf, gg, go) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let d_o = dh * tc;
                let dc = dc_next[idx] + dh * go * (1.0 - tc * tc);
                dp[j] = dc * gg * gi * (1.0 - gi);
                dp[h + j] = dc * c_prev * gf * (1.0 - gf);
                dp[2 * h + j] = dc * gi * (1.0 - gg * gg);
                dp[3 * h + j] = d_o * go * (1.0 - go);
                dc_next[idx] = dc * gf;
            }
            dpre_all[(b * t + step) * g4..][..g4].copy_from_slice(dp);
        }
        if step > 0 {
            let h_prev = &cache.hidden[(step - 1) * n * h..step * n * h];
            gemm(h, n, g4, 1.0, h_prev, true, &dpre, false, 1.0, &mut dw_hh);
            gemm(n, g4, h, 1.0, &dpre, false, w_hh.data(), true, 0.0, &mut dh_next);
        } else {
            dh_next.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut dw_ih = vec![0.0; d * g4];
    gemm(d, n * t, g4, 1.0, x.data(), true, &dpre_all, false, 0.0, &mut dw_ih);
    let mut dx = vec![0.0; n * t * d];
    gemm(n * t, g4, d, 1.0, &dpre_all, false, w_ih.data(), true, 0.0, &mut dx);
    let mut db = vec![0.0; g4];
    for r in dpre_all.chunks_exact(g4) {
        for (a, v) in db.iter_mut().zip(r) {
            *a += v;
        }
    }
    Ok(LstmGrads {
        dx: Tensor::new(&[n, t, d], dx)?,
        dw_ih: Tensor::new(&[d, g4], dw_ih)?,
        dw_hh: Tensor::new(&[h, g4], dw_hh)?,
        db: Tensor::vector(db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_hidden() {
        let x = Tensor::new(&[2, 5, 3], (0..30).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (y, _) = lstm_forward(&x, &Tensor::zeros(&[3, 8]), &Tensor::zeros(&[2, 8]), &Tensor::zeros(&[8])).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_formula() {
        let x = Tensor::new(&[1, 1, 1], vec![0.7]).unwrap();
        // h = 1, gate weights chosen per block
        let w_ih = Tensor::new(&[1, 4], vec![0.5, -0.3, 0.8, 0.2]).unwrap();
        let w_hh = Tensor::new(&[1, 4], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.0, -0.2, 0.05]);
        let (y, _) = lstm_forward(&x, &w_ih, &w_hh, &b).unwrap();
        let i = sigmoid_scalar(0.35 + 0.1);
        let g = (0.56f64 - 0.2).tanh();
        let o = sigmoid_scalar(0.14 + 0.05);
        let want = o * (i * g).tanh();
        assert!((y.data()[0] - want).abs() < 1e-15);
    }
}
