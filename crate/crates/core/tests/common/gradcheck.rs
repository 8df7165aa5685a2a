//! Central finite-difference checks. Each check returns the worst relative
//! error `|a - n| / max(|a|, |n|, FLOOR)` over all checked components;
//! the floor keeps components that are zero up to rounding from dominating.

use protofed::federation::{batch_backward, batch_loss, Objective};
use protofed::losses::{self, ClassCounts, LossConfig, SecondTerm};
use protofed::model::{LcnnConfig, LcnnModel};
use protofed::ndkernel::*;
use protofed::prototypes::PrototypeSet;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst error of `analytic` against central differences of `f` around `x`.
pub fn fd(x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        let num = (f(&p) - f(&m)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

pub fn linear_layer() -> f64 {
    let (x, w, b) = (random(&[3, 4], 1), random(&[4, 5], 2), random(&[5], 3));
    let r = random(&[3, 5], 4);
    let g = linear_backward(&x, &w, &r).unwrap();
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&linear(x, w, b).unwrap(), &r);
    fd(&x, &g.dx, |t| f(t, &w, &b)).max(fd(&w, &g.dw, |t| f(&x, t, &b))).max(fd(&b, &g.db, |t| f(&x, &w, t)))
}

pub fn conv_layer() -> f64 {
    let mut worst: f64 = 0.0;
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let (x, w, b) = (random(&[2, 7, 3], 5), random(&[3, 3, 4], 6), random(&[4], 7));
        let (y, cache) = conv1d(&x, &w, &b, stride, pad).unwrap();
        let r = random(y.shape(), 8);
        let g = conv1d_backward(&w, &cache, &r).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv1d(x, w, b, stride, pad).unwrap().0, &r);
        worst = worst
            .max(fd(&x, &g.dx, |t| f(t, &w, &b)))
            .max(fd(&w, &g.dw, |t| f(&x, t, &b)))
            .max(fd(&b, &g.db, |t| f(&x, &w, t)));
    }
    worst
}

pub fn batchnorm_layer() -> f64 {
    let (x, gamma, beta) = (random(&[4, 3, 5], 9), random(&[5], 10), random(&[5], 11));
    let f = |x: &Tensor, g: &Tensor, b: &Tensor| {
        let (mut rm, mut rv) = (vec![0.0; 5], vec![1.0; 5]);
        batchnorm(x, g, b, &mut rm, &mut rv, Mode::Train, BN_EPS, BN_MOMENTUM).unwrap()
    };
    let (y, cache) = f(&x, &gamma, &beta);
    let r = random(y.shape(), 12);
    let g = batchnorm_backward(&gamma, &cache, &r).unwrap();
    let loss = |x: &Tensor, gm: &Tensor, b: &Tensor| dot(&f(x, gm, b).0, &r);
    fd(&x, &g.dx, |t| loss(t, &gamma, &beta))
        .max(fd(&gamma, &g.dgamma, |t| loss(&x, t, &beta)))
        .max(fd(&beta, &g.dbeta, |t| loss(&x, &gamma, t)))
}

pub fn activations() -> f64 {
    let x = random(&[6, 7], 13);
    let r = random(&[6, 7], 14);
    let mut worst: f64 = 0.0;
    for act in [Activation::Relu, Activation::Silu] {
        let dx = act.backward(&x, &r);
        worst = worst.max(fd(&x, &dx, |t| dot(&act.forward(t), &r)));
    }
    let dx = sigmoid_backward(&sigmoid(&x), &r);
    worst.max(fd(&x, &dx, |t| dot(&sigmoid(t), &r)))
}

pub fn dropout_layer() -> f64 {
    let x = random(&[5, 4], 15);
    let r = random(&[5, 4], 16);
    let (_, mask) = dropout(&x, 0.3, Mode::Train, &mut rng(17)).unwrap();
    let dx = dropout_backward(mask.as_deref(), &r);
    fd(&x, &dx, |t| dot(&dropout(t, 0.3, Mode::Train, &mut rng(17)).unwrap().0, &r))
}

pub fn pool_layer() -> f64 {
    let x = random(&[3, 6, 4], 18);
    let r = random(&[3, 4], 19);
    let dx = adaptive_avg_pool_backward(&r, 6).unwrap();
    fd(&x, &dx, |t| dot(&adaptive_avg_pool(t).unwrap(), &r))
}

pub fn se_layer() -> f64 {
    let c = 8;
    let h = se_hidden(c, 4);
    let x = random(&[2, 5, c], 20);
    let ws = [random(&[c, h], 21), random(&[h], 22), random(&[h, c], 23), random(&[c], 24)];
    let fwd = |x: &Tensor, ws: &[Tensor; 4]| {
        let w = SeWeights { w1: &ws[0], b1: &ws[1], w2: &ws[2], b2: &ws[3] };
        se_block(x, &w).unwrap()
    };
    let (y, cache) = fwd(&x, &ws);
    let r = random(y.shape(), 25);
    let w = SeWeights { w1: &ws[0], b1: &ws[1], w2: &ws[2], b2: &ws[3] };
    let g = se_block_backward(&x, &w, &cache, &r).unwrap();
    let mut worst = fd(&x, &g.dx, |t| dot(&fwd(t, &ws).0, &r));
    for (i, grad) in [&g.dw1, &g.db1, &g.dw2, &g.db2].into_iter().enumerate() {
        worst = worst.max(fd(&ws[i], grad, |t| {
            let mut v = ws.clone();
            v[i] = t.clone();
            dot(&fwd(&x, &v).0, &r)
        }));
    }
    worst
}

pub fn lstm_layer() -> f64 {
    let (n, t, d, h) = (2, 5, 3, 4);
    let x = random(&[n, t, d], 26);
    let (wih, whh, b) = (random(&[d, 4 * h], 27), random(&[h, 4 * h], 28), random(&[4 * h], 29));
    let (y, cache) = lstm_forward(&x, &wih, &whh, &b).unwrap();
    let r = random(y.shape(), 30);
    let g = lstm_backward(&x, &wih, &whh, &cache, &r).unwrap();
    let f = |x: &Tensor, a: &Tensor, c: &Tensor, b: &Tensor| dot(&lstm_forward(x, a, c, b).unwrap().0, &r);
    fd(&x, &g.dx, |v| f(v, &wih, &whh, &b))
        .max(fd(&wih, &g.dw_ih, |v| f(&x, v, &whh, &b)))
        .max(fd(&whh, &g.dw_hh, |v| f(&x, &wih, v, &b)))
        .max(fd(&b, &g.db, |v| f(&x, &wih, &whh, v)))
}

pub fn loss_terms() -> f64 {
    let counts = ClassCounts::new(30, 3);
    let logits = random(&[5, 2], 31);
    let labels = [0u8, 1, 0, 0, 1];
    let (_, dl) = losses::supervised_loss_with_grad(&logits, &labels, &counts).unwrap();
    let mut worst = fd(&logits, &dl, |t| losses::supervised_loss(t, &labels, &counts).unwrap());

    let cfg = LossConfig::default();
    let (c0, c1, g0, g1) = (random(&[6], 32), random(&[6], 33), random(&[6], 34), random(&[6], 35));
    let lc = |a: &Tensor, b: &Tensor| {
        losses::contrastive_loss_vectors((a.data(), b.data()), (g0.data(), g1.data()), &counts, &cfg).unwrap()
    };
    let (_, d0, d1) = lc(&c0, &c1);
    worst = worst.max(fd(&c0, &Tensor::vector(d0), |t| lc(t, &c1).0));
    worst = worst.max(fd(&c1, &Tensor::vector(d1), |t| lc(&c0, t).0));

    let (_, dl2) = losses::l2_distance_with_grad(c0.data(), g0.data()).unwrap();
    worst.max(fd(&c0, &Tensor::vector(dl2), |t| losses::l2_distance_with_grad(t.data(), g0.data()).unwrap().0))
}

pub fn gradcheck_model(activation: Activation) -> LcnnConfig {
    LcnnConfig {
        input_dim: 4,
        window: 8,
        lstm_hidden: 4,
        conv_channels: [4, 4, 4],
        kernel_size: 3,
        se_reduction: 4,
        activation,
        dropout_rate: 0.2,
        ..LcnnConfig::default()
    }
}

/// Every trainable parameter of the full model under the combined loss.
pub fn full_objective(activation: Activation, term: SecondTerm, lambda: f64) -> f64 {
    let mut model = LcnnModel::init(gradcheck_model(activation), 36).unwrap();
    let x = random(&[4, 8, 4], 37);
    let labels = [0u8, 1, 0, 1];
    let m = model.config().embed_dim();
    let mut target = PrototypeSet::new();
    target.insert(0, random(&[m], 38).into_data(), 40).unwrap();
    target.insert(1, random(&[m], 39).into_data(), 4).unwrap();
    let objective = Objective {
        counts: ClassCounts::new(6, 2),
        target: Some(&target),
        term,
        loss: LossConfig { lambda, ..LossConfig::default() },
    };
    batch_backward(&mut model, &x, &labels, &objective, &mut rng(40)).unwrap();
    let mut worst: f64 = 0.0;
    let n = model.params().len();
    for idx in 0..n {
        let p = &model.params().params()[idx];
        if !p.trainable {
            continue;
        }
        let value = p.value.clone();
        let analytic = Tensor::new(value.shape(), p.value.grad().unwrap().to_vec()).unwrap();
        let mut probe = model.clone();
        let e = fd(&value, &analytic, |t| {
            probe.params_mut().params_mut()[idx].value.data_mut().copy_from_slice(t.data());
            batch_loss(&mut probe, &x, &labels, &objective, &mut rng(40)).unwrap().total
        });
        worst = worst.max(e);
    }
    worst
}

/// `(name, worst relative error)` for every check.
pub fn all_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("linear", linear_layer()),
        ("conv1d", conv_layer()),
        ("batchnorm", batchnorm_layer()),
        ("activations", activations()),
        ("dropout", dropout_layer()),
        ("adaptive_avg_pool", pool_layer()),
        ("se_block", se_layer()),
        ("lstm", lstm_layer()),
        ("loss_terms", loss_terms()),
        ("full_contrastive_relu", full_objective(Activation::Relu, SecondTerm::Contrastive, 0.25)),
        ("full_contrastive_silu", full_objective(Activation::Silu, SecondTerm::Contrastive, 0.5)),
        ("full_l2_relu", full_objective(Activation::Relu, SecondTerm::L2, 0.25)),
        ("full_supervised_only", full_objective(Activation::Relu, SecondTerm::None, 0.25)),
    ]
}
