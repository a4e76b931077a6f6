//! Small parameterised building blocks shared by the encoder and decoder.

use super::functional::dropout_mask;
use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::rng::RngStream;
use crate::Result;

pub const LN_EPS: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: training flag and the dropout stream.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub training: bool,
    pub dropout: f64,
    pub rng: RngStream,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng: RngStream::new(0),
        }
    }

    pub fn train(dropout: f64, rng: RngStream) -> Self {
        Self {
            training: true,
            dropout,
            rng,
        }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.training || self.dropout == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(g.value(x).len(), self.dropout, &mut self.rng)?;
        g.mul_const(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: RngStream) -> Result<Self> {
        let w = store.init(
            &format!("{name}.weight"),
            &[d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
            rng,
        )?;
        let b = if bias {
            Some(store.init(&format!("{name}.bias"), &[1, d_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: RngStream) -> Result<Self> {
        Ok(Self {
            gain: store.init(&format!("{name}.gain"), &[1, d], Init::Ones, rng)?,
            bias: store.init(&format!("{name}.bias"), &[1, d], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Batch normalisation with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: RngStream) -> Result<Self> {
        use super::tensor::Tensor;
        Ok(Self {
            gain: store.init(&format!("{name}.gain"), &[1, d], Init::Ones, rng)?,
            bias: store.init(&format!("{name}.bias"), &[1, d], Init::Zeros, rng)?,
            running_mean: store.register(&format!("{name}.running_mean"), Tensor::zeros(&[1, d]), false)?,
            running_var: store.register(&format!("{name}.running_var"), Tensor::full(&[1, d], 1.0), false)?,
        })
    }

    /// Training mode normalises with the statistics of `x` and records a
    /// running-statistics update on the graph; evaluation mode uses the
    /// stored running statistics.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &Ctx) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        if ctx.training {
            let (y, mean, var) = g.batch_norm(x, gain, bias, BN_EPS, None)?;
            g.bn_updates.push(super::graph::BnUpdate {
                mean_param: self.running_mean,
                var_param: self.running_var,
                mean,
                var,
            });
            Ok(y)
        } else {
            let m = store.value(self.running_mean).data().to_vec();
            let v = store.value(self.running_var).data().to_vec();
            Ok(g.batch_norm(x, gain, bias, BN_EPS, Some((&m, &v)))?.0)
        }
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Two linear layers with a ReLU in between; dropout after each layer.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: RngStream) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, d_ff, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_ff, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = ctx.dropout(g, h)?;
        let y = self.l2.forward(g, store, h)?;
        ctx.dropout(g, y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.l1.params();
        v.extend(self.l2.params());
        v
    }
}
