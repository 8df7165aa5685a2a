//! The LCNN classifier: LSTM, dropout, three (conv, SE, BN, activation)
//! stages, adaptive average pooling to the embedding, then a linear head.
//!
//! Sequence tensors are channels-last: the raw window is `[N, T, d]`, the
//! LSTM emits `[N, T, h]`, and the conv stages treat `T` as the length axis
//! and the LSTM features as channels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::{self as nd, Activation, Mode, ParamId, ParamStore, Tensor};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcnnConfig {
    pub input_dim: usize,
    pub window: usize,
    pub lstm_hidden: usize,
    pub conv_channels: [usize; 3],
    pub kernel_size: usize,
    pub se_reduction: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Max L2 norm of the LSTM gradients per step; `None` disables clipping.
    pub lstm_grad_clip: Option<f64>,
}

impl Default for LcnnConfig {
    fn default() -> Self {
        LcnnConfig {
            input_dim: 16,
            window: 32,
            lstm_hidden: 32,
            conv_channels: [32, 64, 64],
            kernel_size: 3,
            se_reduction: 4,
            num_classes: 2,
            activation: Activation::Relu,
            dropout_rate: 0.2,
            lstm_grad_clip: Some(5.0),
        }
    }
}

impl LcnnConfig {
    pub fn embed_dim(&self) -> usize {
        self.conv_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.lstm_hidden == 0 || self.conv_channels.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.kernel_size == 0 || self.se_reduction == 0 {
            return bad("kernel_size and se_reduction must be positive");
        }
        if self.num_classes != 2 {
            return bad("only binary classification is supported");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, k) = (self.input_dim, self.lstm_hidden, self.kernel_size);
        let mut total = d * 4 * h + h * 4 * h + 4 * h;
        let mut c_in = h;
        for &c in &self.conv_channels {
            let hid = nd::se_hidden(c, self.se_reduction);
            total += k * c_in * c + c; // conv
            total += c * hid + hid + hid * c + c; // SE
            total += 2 * c; // BN affine
            c_in = c;
        }
        total + self.embed_dim() * self.num_classes + self.num_classes
    }
}

#[derive(Clone, Debug)]
struct StageIds {
    conv_w: ParamId,
    conv_b: ParamId,
    se_w1: ParamId,
    se_b1: ParamId,
    se_w2: ParamId,
    se_b2: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
}

/// BatchNorm `(running_mean, running_var)` of one stage.
type RunningStats = (Vec<f64>, Vec<f64>);

#[derive(Clone, Debug)]
pub struct LcnnModel {
    config: LcnnConfig,
    store: ParamStore,
    lstm: [ParamId; 3],
    stages: Vec<StageIds>,
    head: [ParamId; 2],
}

struct StageCache {
    conv: nd::Conv1dCache,
    conv_out: Tensor,
    se: nd::SeCache,
    bn: nd::BatchNormCache,
    bn_out: Tensor,
}

pub struct ForwardCache {
    input: Tensor,
    lstm: nd::LstmCache,
    dropout_mask: Option<Vec<f64>>,
    stages: Vec<StageCache>,
    pooled_len: usize,
}

/// Output of one forward pass: embeddings `[N, m]`, logits `[N, 2]`, and the
/// activations the backward pass needs.
pub struct ForwardPass {
    pub embeddings: Tensor,
    pub logits: Tensor,
    cache: ForwardCache,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl LcnnModel {
    /// Deterministic initialization: weights and biases are drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); BN starts at identity.
    pub fn init(config: LcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::TAG_INIT]);
        let mut store = ParamStore::new();
        let (d, h, k) = (config.input_dim, config.lstm_hidden, config.kernel_size);
        let bd = 1.0 / (d as f64).sqrt();
        let bh = 1.0 / (h as f64).sqrt();
        let lstm = [
            store.add("lstm.w_ih", uniform(&[d, 4 * h], bd, &mut rng))?,
            store.add("lstm.w_hh", uniform(&[h, 4 * h], bh, &mut rng))?,
            store.add("lstm.bias", uniform(&[4 * h], bh, &mut rng))?,
        ];
        let mut stages = Vec::new();
        let mut c_in = h;
        for (s, &c) in config.conv_channels.iter().enumerate() {
            let hid = nd::se_hidden(c, config.se_reduction);
            let bc = 1.0 / ((k * c_in) as f64).sqrt();
            let b1 = 1.0 / (c as f64).sqrt();
            let b2 = 1.0 / (hid as f64).sqrt();
            let p = |n: &str| format!("stage{}.{n}", s + 1);
            stages.push(StageIds {
                conv_w: store.add(&p("conv.weight"), uniform(&[k, c_in, c], bc, &mut rng))?,
                conv_b: store.add(&p("conv.bias"), uniform(&[c], bc, &mut rng))?,
                se_w1: store.add(&p("se.w1"), uniform(&[c, hid], b1, &mut rng))?,
                se_b1: store.add(&p("se.b1"), uniform(&[hid], b1, &mut rng))?,
                se_w2: store.add(&p("se.w2"), uniform(&[hid, c], b2, &mut rng))?,
                se_b2: store.add(&p("se.b2"), uniform(&[c], b2, &mut rng))?,
                bn_gamma: store.add(&p("bn.gamma"), Tensor::full(&[c], 1.0))?,
                bn_beta: store.add(&p("bn.beta"), Tensor::zeros(&[c]))?,
                bn_mean: store.add_buffer(&p("bn.running_mean"), Tensor::zeros(&[c]))?,
                bn_var: store.add_buffer(&p("bn.running_var"), Tensor::full(&[c], 1.0))?,
            });
            c_in = c;
        }
        let m = config.embed_dim();
        let bm = 1.0 / (m as f64).sqrt();
        let head = [
            store.add("head.weight", uniform(&[m, config.num_classes], bm, &mut rng))?,
            store.add("head.bias", uniform(&[config.num_classes], bm, &mut rng))?,
        ];
        store.init_grads();
        Ok(LcnnModel { config, store, lstm, stages, head })
    }

    pub fn config(&self) -> &LcnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lstm_param_ids(&self) -> &[ParamId] {
        &self.lstm
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(3, "model input")?;
        if x.dim(1) != self.config.window || x.dim(2) != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "model expects [N, {}, {}], got {:?}",
                self.config.window,
                self.config.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Shared forward; returns the pass plus updated BN running statistics
    /// (train mode only). Does not mutate the model.
    fn run(&self, x: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<(ForwardPass, Vec<RunningStats>)> {
        self.check_input(x)?;
        let s = &self.store;
        let (seq, lstm_cache) = nd::lstm_forward(x, s.get(self.lstm[0]), s.get(self.lstm[1]), s.get(self.lstm[2]))?;
        let (mut cur, dropout_mask) = match (mode, rng) {
            (Mode::Train, Some(rng)) => nd::dropout(&seq, self.config.dropout_rate, mode, rng)?,
            (Mode::Train, None) if self.config.dropout_rate > 0.0 => {
                return Err(Error::State("train-mode forward with dropout needs an rng".into()))
            }
            _ => (seq, None),
        };
        let pad = self.config.padding();
        let mut stages = Vec::with_capacity(3);
        let mut running = Vec::with_capacity(3);
        for ids in &self.stages {
            let (conv_out, conv) = nd::conv1d(&cur, s.get(ids.conv_w), s.get(ids.conv_b), 1, pad)?;
            let se_w = nd::SeWeights {
                w1: s.get(ids.se_w1),
                b1: s.get(ids.se_b1),
                w2: s.get(ids.se_w2),
                b2: s.get(ids.se_b2),
            };
            let (se_out, se) = nd::se_block(&conv_out, &se_w)?;
            let mut rm = s.get(ids.bn_mean).data().to_vec();
            let mut rv = s.get(ids.bn_var).data().to_vec();
            let (bn_out, bn) = nd::batchnorm(
                &se_out,
                s.get(ids.bn_gamma),
                s.get(ids.bn_beta),
                &mut rm,
                &mut rv,
                mode,
                nd::BN_EPS,
                nd::BN_MOMENTUM,
            )?;
            running.push((rm, rv));
            cur = self.config.activation.forward(&bn_out);
            stages.push(StageCache { conv, conv_out, se, bn, bn_out });
        }
        let pooled_len = cur.dim(1);
        let embeddings = nd::adaptive_avg_pool(&cur)?;
        let logits = nd::linear(&embeddings, s.get(self.head[0]), s.get(self.head[1]))?;
        let cache = ForwardCache { input: x.clone(), lstm: lstm_cache, dropout_mask, stages, pooled_len };
        Ok((ForwardPass { embeddings, logits, cache }, running))
    }

    /// Train-mode forward: batch statistics, dropout, running-stat update.
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<ForwardPass> {
        let (pass, running) = self.run(x, Mode::Train, Some(rng))?;
        for (ids, (rm, rv)) in self.stages.iter().zip(running) {
            self.store.get_mut(ids.bn_mean).data_mut().copy_from_slice(&rm);
            self.store.get_mut(ids.bn_var).data_mut().copy_from_slice(&rv);
        }
        Ok(pass)
    }

    /// Eval-mode forward; a pure function of parameters and input.
    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardPass> {
        Ok(self.run(x, Mode::Eval, None)?.0)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval(x)?.embeddings)
    }

    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval(x)?.logits)
    }

    /// Backpropagates `d_logits` (and an optional extra gradient arriving
    /// directly at the embeddings) and accumulates parameter gradients.
    pub fn backward(&mut self, pass: &ForwardPass, d_logits: &Tensor, d_embed: Option<&Tensor>) -> Result<()> {
        let cache = &pass.cache;
        let head = nd::linear_backward(&pass.embeddings, self.store.get(self.head[0]), d_logits)?;
        self.store.accumulate(self.head[0], head.dw.data())?;
        self.store.accumulate(self.head[1], head.db.data())?;
        let mut d_emb = head.dx;
        if let Some(extra) = d_embed {
            extra.expect_shape(d_emb.shape(), "embedding gradient")?;
            for (a, b) in d_emb.data_mut().iter_mut().zip(extra.data()) {
                *a += b;
            }
        }
        let mut grad = nd::adaptive_avg_pool_backward(&d_emb, cache.pooled_len)?;
        for (ids, sc) in self.stages.iter().zip(&cache.stages).rev() {
            let d_bn_out = self.config.activation.backward(&sc.bn_out, &grad);
            let bn = nd::batchnorm_backward(self.store.get(ids.bn_gamma), &sc.bn, &d_bn_out)?;
            self.store.accumulate(ids.bn_gamma, bn.dgamma.data())?;
            self.store.accumulate(ids.bn_beta, bn.dbeta.data())?;
            let se = {
                let s = &self.store;
                let w = nd::SeWeights {
                    w1: s.get(ids.se_w1),
                    b1: s.get(ids.se_b1),
                    w2: s.get(ids.se_w2),
                    b2: s.get(ids.se_b2),
                };
                nd::se_block_backward(&sc.conv_out, &w, &sc.se, &bn.dx)?
            };
            self.store.accumulate(ids.se_w1, se.dw1.data())?;
            self.store.accumulate(ids.se_b1, se.db1.data())?;
            self.store.accumulate(ids.se_w2, se.dw2.data())?;
            self.store.accumulate(ids.se_b2, se.db2.data())?;
            let conv = nd::conv1d_backward(self.store.get(ids.conv_w), &sc.conv, &se.dx)?;
            self.store.accumulate(ids.conv_w, conv.dw.data())?;
            self.store.accumulate(ids.conv_b, conv.db.data())?;
            grad = conv.dx;
        }
        let d_seq = nd::dropout_backward(cache.dropout_mask.as_deref(), &grad);
        let s = &self.store;
        let lstm = nd::lstm_backward(&cache.input, s.get(self.lstm[0]), s.get(self.lstm[1]), &cache.lstm, &d_seq)?;
        self.store.accumulate(self.lstm[0], lstm.dw_ih.data())?;
        self.store.accumulate(self.lstm[1], lstm.dw_hh.data())?;
        self.store.accumulate(self.lstm[2], lstm.db.data())?;
        Ok(())
    }

    /// Clips the LSTM gradient norm if configured.
    pub fn clip_gradients(&mut self) {
        if let Some(max) = self.config.lstm_grad_clip {
            let ids = self.lstm;
            self.store.clip_grad_norm(&ids, max);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny() -> LcnnConfig {
        LcnnConfig {
            input_dim: 4,
            window: 8,
            lstm_hidden: 4,
            conv_channels: [4, 4, 4],
            kernel_size: 3,
            se_reduction: 4,
            num_classes: 2,
            activation: Activation::Relu,
            dropout_rate: 0.2,
            lstm_grad_clip: Some(5.0),
        }
    }

    fn batch(n: usize, cfg: &LcnnConfig, seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        let len = n * cfg.window * cfg.input_dim;
        Tensor::new(&[n, cfg.window, cfg.input_dim], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn shapes() {
        let cfg = tiny();
        let m = LcnnModel::init(cfg.clone(), 1).unwrap();
        let x = batch(5, &cfg, 2);
        let p = m.forward_eval(&x).unwrap();
        assert_eq!(p.embeddings.shape(), &[5, cfg.embed_dim()]);
        assert_eq!(p.logits.shape(), &[5, 2]);
        assert!(m.classify(&Tensor::zeros(&[1, 7, 4])).is_err());
    }

    #[test]
    fn identical_windows_identical_embeddings() {
        let cfg = tiny();
        let m = LcnnModel::init(cfg.clone(), 1).unwrap();
        let one = batch(1, &cfg, 3);
        let two = Tensor::new(&[2, cfg.window, cfg.input_dim], [one.data(), one.data()].concat()).unwrap();
        let e = m.embed(&two).unwrap();
        let m_ = cfg.embed_dim();
        assert_eq!(&e.data()[..m_], &e.data()[m_..]);
    }

    #[test]
    fn embedding_sensitive_to_every_input_element() {
        let cfg = LcnnConfig { activation: Activation::Silu, ..tiny() };
        let m = LcnnModel::init(cfg.clone(), 5).unwrap();
        let x = batch(1, &cfg, 6);
        let base = m.embed(&x).unwrap();
        for i in 0..x.len() {
            let mut y = x.clone();
            y.data_mut()[i] += 1.0;
            assert_ne!(m.embed(&y).unwrap(), base, "element {i} has no effect");
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let cfg = tiny();
        let mut m = LcnnModel::init(cfg.clone(), 1).unwrap();
        for name in ["head.weight", "head.bias"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = m.classify(&batch(3, &cfg, 1)).unwrap();
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn classify_is_head_over_embed() {
        let cfg = tiny();
        let m = LcnnModel::init(cfg.clone(), 9).unwrap();
        let x = batch(4, &cfg, 10);
        let p = m.forward_eval(&x).unwrap();
        let s = m.params();
        let again = nd::linear(&p.embeddings, s.by_name("head.weight").unwrap(), s.by_name("head.bias").unwrap()).unwrap();
        assert_eq!(again, p.logits);
        assert_eq!(m.classify(&x).unwrap(), p.logits);
    }

    #[test]
    fn seeded_init() {
        let a = LcnnModel::init(tiny(), 3).unwrap();
        let b = LcnnModel::init(tiny(), 3).unwrap();
        let c = LcnnModel::init(tiny(), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params().flatten_trainable(), c.params().flatten_trainable());
    }

    #[test]
    fn param_count_closed_form() {
        // lstm 4*16+4*16+16 = 144; stage 3*4*4+4 + (4+1+4+4) + 8 = 73; head 4*2+2
        let m = LcnnModel::init(tiny(), 0).unwrap();
        assert_eq!(m.params().trainable_count(), 144 + 3 * 73 + 10);
        assert_eq!(tiny().param_count(), 373);
        let d = LcnnConfig::default();
        let full = LcnnModel::init(d.clone(), 0).unwrap();
        assert_eq!(full.params().trainable_count(), d.param_count());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = tiny();
        c.num_classes = 3;
        assert!(LcnnModel::init(c, 0).is_err());
        let mut c = tiny();
        c.window = 0;
        assert!(c.validate().is_err());
    }
}
