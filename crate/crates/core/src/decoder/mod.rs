//! Transformer decoder with optional per-step source truncation
//! (triggered attention) and its teacher-forced training losses.
//!
//! Decoder inputs use index 0 for the start symbol and `1..=V` for labels;
//! outputs use index 0 for end-of-sentence and `1..=V` for labels.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionMask, MhaParams};
use crate::encoder::positional_encoding;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::{Ctx, FeedForward, LayerNorm, Linear};
use crate::numerics::params::{Init, ParamId, ParamStore};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Label count `V`, excluding start and end symbols.
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Look-ahead in encoder frames past each trigger.
    pub eps_dec: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.vocab == 0 {
            return Err(Error::Config("decoder needs at least one block and one label".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("zero-sized decoder dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Output classes `V' = V + 1`.
    pub fn outputs(&self) -> usize {
        self.vocab + 1
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MhaParams,
    pub ln2: LayerNorm,
    pub src_attn: MhaParams,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: RngStream) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, rng)?,
            self_attn: MhaParams::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, rng)?,
            src_attn: MhaParams::new(store, &format!("{name}.src_attn"), d, cfg.heads, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.d_ff, rng)?,
        })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.ln1.params();
        v.extend(self.self_attn.params());
        v.extend(self.ln2.params());
        v.extend(self.src_attn.params());
        v.extend(self.ln3.params());
        v.extend(self.ff.params());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    /// `(V + 1) x d_model`; row 0 embeds the start symbol.
    pub embed: ParamId,
    pub ln_src: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

/// Source-visibility bound for a label triggered at (0-based) frame `n`:
/// `min(n + 1 + eps, T)` frames.
pub fn trigger_bound(n: usize, eps: usize, frames: usize) -> usize {
    (n + 1 + eps).min(frames)
}

/// Per-step bounds for `Y` plus the final end-of-sentence step, which sees
/// every frame.
pub fn step_bounds(triggers: &[usize], eps: usize, frames: usize) -> Vec<usize> {
    let mut nu: Vec<usize> = triggers.iter().map(|&n| trigger_bound(n, eps, frames)).collect();
    nu.push(frames);
    nu
}

/// Teacher-forcing inputs `(<s>, y_1..y_L)` and targets `(y_1..y_L, <eos>)`.
pub fn teacher_forcing(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = vec![SOS];
    inputs.extend_from_slice(y);
    let mut targets = y.to_vec();
    targets.push(EOS);
    (inputs, targets)
}

/// Cross entropy against targets smoothed uniformly over the other classes.
pub fn smoothed_nll(g: &mut Graph, logp: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let (n, c) = (g.value(logp).rows(), g.value(logp).cols());
    if n != targets.len() || c < 2 {
        return Err(Error::Shape(format!("{n}x{c} log-probabilities for {} targets", targets.len())));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("label smoothing {smoothing}")));
    }
    let off = smoothing / (c - 1) as f64;
    let mut w = vec![-off; n * c];
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::InvalidArgument(format!("target {t} outside {c} classes")));
        }
        w[i * c + t] = -(1.0 - smoothing);
    }
    let weighted = g.mul_const(logp, w)?;
    Ok(g.sum(weighted))
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, config: DecoderConfig, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = store.init(&format!("{name}.embed"), &[config.vocab + 1, d], Init::Normal(1.0), rng)?;
        let ln_src = LayerNorm::new(store, &format!("{name}.ln_src"), d, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d, rng)?;
        let out = Linear::new(store, &format!("{name}.out"), d, config.outputs(), true, rng)?;
        Ok(Self {
            config,
            embed,
            ln_src,
            blocks,
            ln_out,
            out,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        v.extend(self.ln_src.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_out.params());
        v.extend(self.out.params());
        v
    }

    fn check_inputs(&self, inputs: &[usize]) -> Result<()> {
        if inputs.first() != Some(&SOS) {
            return Err(Error::InvalidArgument("decoder input must start with <s>".into()));
        }
        match inputs[1..].iter().find(|&&l| l == SOS || l > self.config.vocab) {
            Some(l) => Err(Error::InvalidArgument(format!("label {l} outside 1..={}", self.config.vocab))),
            None => Ok(()),
        }
    }

    /// Per-step log-distributions (`n x (V+1)`) for `inputs = (<s>, y_1..)`.
    /// Step `l` attends to encoder frames `0..nu[l]` when `nu` is given and
    /// to all frames otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[usize],
        x_e: Var,
        nu: Option<&[usize]>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        self.check_inputs(inputs)?;
        let (n, t) = (inputs.len(), g.value(x_e).rows());
        if t == 0 {
            return Err(Error::InvalidArgument("empty encoder sequence".into()));
        }
        let src_mask = match nu {
            Some(nu) => {
                if nu.len() != n {
                    return Err(Error::Shape(format!("{} bounds for {n} steps", nu.len())));
                }
                if let Some(&b) = nu.iter().find(|&&b| b == 0 || b > t) {
                    return Err(Error::InvalidArgument(format!("source bound {b} outside 1..={t}")));
                }
                AttentionMask::from_fn(n, t, |l, j| j < nu[l])
            }
            None => AttentionMask::full(n, t),
        };
        let src_mask = Rc::new(src_mask);
        let self_mask = Rc::new(AttentionMask::from_fn(n, n, |i, j| j <= i));

        let emb = g.param(store, self.embed);
        let z = g.gather_rows(emb, inputs.to_vec())?;
        let pe = g.input(positional_encoding(n, self.config.d_model));
        let z = g.add(z, pe)?;
        let mut z = ctx.dropout(g, z)?;
        let xt = self.ln_src.forward(g, store, x_e)?;
        for b in &self.blocks {
            let h = b.ln1.forward(g, store, z)?;
            let a = multi_head_attention(g, store, &b.self_attn, h, h, h, &self_mask, None)?;
            let a = ctx.dropout(g, a)?;
            z = g.add(z, a)?;
            let h = b.ln2.forward(g, store, z)?;
            let a = multi_head_attention(g, store, &b.src_attn, h, xt, xt, &src_mask, None)?;
            let a = ctx.dropout(g, a)?;
            z = g.add(z, a)?;
            let h = b.ln3.forward(g, store, z)?;
            let f = b.ff.forward(g, store, h, ctx)?;
            z = g.add(z, f)?;
        }
        let z = self.ln_out.forward(g, store, z)?;
        let logits = self.out.forward(g, store, z)?;
        Ok(g.log_softmax(logits))
    }

    /// `-log p_dec(Y | X_E)` over `(y_1..y_L, <eos>)` with full source context.
    pub fn attention_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: &[usize],
        x_e: Var,
        smoothing: f64,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        self.loss(g, store, y, x_e, None, smoothing, ctx)
    }

    /// `-log p_ta(Y | X_E)`: step `l` sees frames up to its trigger plus
    /// `eps_dec`; the end-of-sentence step sees all frames.
    #[allow(clippy::too_many_arguments)]
    pub fn ta_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: &[usize],
        x_e: Var,
        triggers: &[usize],
        smoothing: f64,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let t = g.value(x_e).rows();
        if triggers.len() != y.len() {
            return Err(Error::Shape(format!("{} triggers for {} labels", triggers.len(), y.len())));
        }
        if triggers.windows(2).any(|w| w[0] >= w[1]) || triggers.iter().any(|&n| n >= t) {
            return Err(Error::InvalidArgument(format!("triggers {triggers:?} not increasing within {t} frames")));
        }
        let nu = step_bounds(triggers, self.config.eps_dec, t);
        self.loss(g, store, y, x_e, Some(&nu), smoothing, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: &[usize],
        x_e: Var,
        nu: Option<&[usize]>,
        smoothing: f64,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        if y.is_empty() {
            return Err(Error::InvalidArgument("empty label sequence".into()));
        }
        let (inputs, targets) = teacher_forcing(y);
        let logp = self.forward(g, store, &inputs, x_e, nu, ctx)?;
        smoothed_nll(g, logp, &targets, smoothing)
    }

    /// Next-label log-distribution after `prefix`, where the step for
    /// `prefix[i]` saw `nu[i]` frames and the new step sees `nu[prefix.len()]`.
    /// Only the frames any step can see are used.
    pub fn next_log_probs(&self, store: &ParamStore, prefix: &[usize], nu: &[usize], x_e: &Tensor) -> Result<Vec<f64>> {
        let visible = nu.iter().copied().max().unwrap_or(0);
        if nu.len() != prefix.len() + 1 || visible > x_e.rows() {
            return Err(Error::Shape(format!(
                "{} bounds for prefix of {} over {} frames",
                nu.len(),
                prefix.len(),
                x_e.rows()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(x_e.slice_rows(0, visible));
        let (inputs, _) = teacher_forcing(prefix);
        let logp = self.forward(&mut g, store, &inputs, x, Some(nu), &mut Ctx::eval())?;
        Ok(g.value(logp).row(prefix.len()).to_vec())
    }
}
