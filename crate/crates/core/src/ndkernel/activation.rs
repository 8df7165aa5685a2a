use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh through a single `exp`; absolute error stays near machine epsilon.
pub fn tanh_scalar(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    map(x, |v| v * sigmoid_scalar(v))
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => relu(x),
            Activation::Silu => silu(x),
        }
    }

    /// Gradient wrt the pre-activation input `x`.
    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Tensor {
        let d: Vec<f64> = match self {
            Activation::Relu => x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Silu => x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| {
                    let s = sigmoid_scalar(v);
                    g * (s + v * s * (1.0 - s))
                })
                .collect(),
        };
        Tensor::new(x.shape(), d).expect("same shape")
    }
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let d = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
    Tensor::new(y.shape(), d).expect("same shape")
}

/// Inverted dropout. Returns the output and, in train mode with a nonzero
/// rate, the scaled keep-mask used for the backward pass.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let y = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok((Tensor::new(x.shape(), y)?, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, dy: &Tensor) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(m) => {
            let d = dy.data().iter().zip(m).map(|(g, k)| g * k).collect();
            Tensor::new(dy.shape(), d).expect("same shape")
        }
    }
}
