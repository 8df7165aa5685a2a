use super::gemm::gemm;
use super::Tensor;
use crate::error::{dim_err, Result};

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

fn check(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank(2, "linear input")?;
    w.expect_rank(2, "linear weight")?;
    let (n, a) = (x.dim(0), x.dim(1));
    if w.dim(0) != a {
        return dim_err(format!("linear: input {:?} vs weight {:?}", x.shape(), w.shape()));
    }
    Ok((n, a, w.dim(1)))
}

/// `y = x·w + bias` for x: N×a, w: a×b, bias: b.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, a, b) = check(x, w)?;
    bias.expect_shape(&[b], "linear bias")?;
    let mut out = vec![0.0; n * b];
    for row in out.chunks_exact_mut(b) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, a, b, 1.0, x.data(), false, w.data(), false, 1.0, &mut out);
    Tensor::new(&[n, b], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    let (n, a, b) = check(x, w)?;
    dy.expect_shape(&[n, b], "linear upstream gradient")?;
    let mut dx = vec![0.0; n * a];
    gemm(n, b, a, 1.0, dy.data(), false, w.data(), true, 0.0, &mut dx);
    let mut dw = vec![0.0; a * b];
    gemm(a, n, b, 1.0, x.data(), true, dy.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; b];
    for row in dy.data().chunks_exact(b) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(&[n, a], dx)?,
        dw: Tensor::new(&[a, b], dw)?,
        db: Tensor::vector(db),
    })
}
