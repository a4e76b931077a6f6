//! CNN frontend, transformer and conformer blocks and the convolution module.
//!
//! Blocks run on one or two streams. With two streams (DCN) every sub-module
//! is applied to both, weights are shared and normalisation layers are
//! per-stream.

use std::rc::Rc;

use crate::attention::{
    multi_head_attention, relative_mha_dual, AttentionMask, DualSource, MhaParams, Positions, RelMhaParams,
};
use crate::numerics::functional::ConvTable;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::{BatchNorm, Ctx, FeedForward, LayerNorm, Linear};
use crate::numerics::params::{Init, ParamId, ParamStore};
use crate::numerics::rng::RngStream;
use crate::streaming::DualLayout;
use crate::{Error, Result};

pub const FRONTEND_KERNEL: usize = 3;
pub const FRONTEND_STRIDE: usize = 2;

/// Two stride-2 convolutions over time with ReLU (x4 subsampling).
#[derive(Debug, Clone)]
pub struct Frontend {
    pub conv1: Linear,
    pub conv2: Linear,
}

/// Output length of one stride-2 convolution, `None` if the input is too short.
fn conv_len(t: usize) -> Option<usize> {
    (t >= FRONTEND_KERNEL).then(|| (t - FRONTEND_KERNEL) / FRONTEND_STRIDE + 1)
}

impl Frontend {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_model: usize, rng: RngStream) -> Result<Self> {
        Ok(Self {
            conv1: Linear::new(store, &format!("{name}.conv1"), FRONTEND_KERNEL * d_in, d_model, true, rng)?,
            conv2: Linear::new(store, &format!("{name}.conv2"), FRONTEND_KERNEL * d_model, d_model, true, rng)?,
        })
    }

    /// `floor((floor((T0 - 3) / 2) + 1 - 3) / 2) + 1`.
    pub fn output_len(t0: usize) -> Option<usize> {
        conv_len(t0).and_then(conv_len)
    }

    /// Shortest input that yields one output frame.
    pub fn receptive_field() -> usize {
        FRONTEND_KERNEL + FRONTEND_STRIDE * (FRONTEND_KERNEL - 1)
    }

    /// Input frames needed before output frame `n` is final.
    pub fn frames_needed(n: usize) -> usize {
        4 * n + Self::receptive_field()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t0 = g.value(x).rows();
        if Self::output_len(t0).is_none() {
            return Err(Error::InvalidArgument(format!(
                "{t0} input frames is shorter than the frontend receptive field ({})",
                Self::receptive_field()
            )));
        }
        let h = g.unfold(x, FRONTEND_KERNEL, FRONTEND_STRIDE)?;
        let h = self.conv1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.unfold(h, FRONTEND_KERNEL, FRONTEND_STRIDE)?;
        let h = self.conv2.forward(g, store, h)?;
        Ok(g.relu(h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v
    }
}

/// A normalisation layer with an optional second copy for the causal stream.
#[derive(Debug, Clone)]
pub struct PerStream<T> {
    pub nc: T,
    pub c: Option<T>,
}

impl<T> PerStream<T> {
    pub fn new(dual: bool, mut make: impl FnMut(&str) -> Result<T>) -> Result<Self> {
        Ok(Self {
            nc: make("nc")?,
            c: if dual { Some(make("c")?) } else { None },
        })
    }

    pub fn get(&self, s: Stream) -> &T {
        match s {
            Stream::Nc => &self.nc,
            Stream::C => self.c.as_ref().unwrap_or(&self.nc),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &T> {
        std::iter::once(&self.nc).chain(self.c.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Nc,
    C,
}

/// Activations flowing through the block stack.
#[derive(Debug, Clone, Copy)]
pub enum Streams {
    Single(Var),
    Dual { nc: Var, c: Var },
}

impl Streams {
    pub fn map(self, mut f: impl FnMut(Var, Stream) -> Result<Var>) -> Result<Self> {
        Ok(match self {
            Streams::Single(x) => Streams::Single(f(x, Stream::Nc)?),
            Streams::Dual { nc, c } => Streams::Dual {
                nc: f(nc, Stream::Nc)?,
                c: f(c, Stream::C)?,
            },
        })
    }

    pub fn zip(self, other: Streams, mut f: impl FnMut(Var, Var) -> Result<Var>) -> Result<Self> {
        Ok(match (self, other) {
            (Streams::Single(a), Streams::Single(b)) => Streams::Single(f(a, b)?),
            (Streams::Dual { nc, c }, Streams::Dual { nc: n2, c: c2 }) => Streams::Dual {
                nc: f(nc, n2)?,
                c: f(c, c2)?,
            },
            _ => return Err(Error::Shape("stream count mismatch".into())),
        })
    }

    pub fn primary(&self) -> Var {
        match *self {
            Streams::Single(x) => x,
            Streams::Dual { nc, .. } => nc,
        }
    }
}

/// Per-layer attention and convolution context for one sequence.
#[derive(Debug, Clone)]
pub enum AttnPlan {
    Single(Rc<AttentionMask>),
    Dual(DualLayout),
}

#[derive(Debug, Clone)]
pub struct SeqContext {
    pub attn: AttnPlan,
    pub positions: Positions,
    pub conv: Option<Rc<ConvTable>>,
}

fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    att: &Attn,
    x: Streams,
    seq: &SeqContext,
) -> Result<Streams> {
    let call = |g: &mut Graph, q: Var, kv: Var, mask: &Rc<AttentionMask>, dual: Option<DualSource<'_>>| match att {
        Attn::Abs(p) => multi_head_attention(g, store, p, q, kv, kv, mask, dual),
        Attn::Rel(p) => relative_mha_dual(g, store, p, q, kv, mask, &seq.positions, dual),
    };
    match (x, &seq.attn) {
        (Streams::Single(x), AttnPlan::Single(mask)) => Ok(Streams::Single(call(g, x, x, mask, None)?)),
        (Streams::Dual { nc, c }, AttnPlan::Dual(d)) => {
            let dual = DualSource {
                x_k: c,
                x_v: c,
                table: &d.nc_sources,
            };
            let nc_out = call(g, nc, nc, &d.nc_mask, Some(dual))?;
            let dual = DualSource {
                x_k: c,
                x_v: c,
                table: &d.c_sources,
            };
            let c_out = call(g, c, nc, &d.c_mask, Some(dual))?;
            Ok(Streams::Dual { nc: nc_out, c: c_out })
        }
        _ => Err(Error::InvalidArgument("attention plan does not match stream count".into())),
    }
}

#[derive(Debug, Clone)]
pub enum Attn {
    Abs(MhaParams),
    Rel(RelMhaParams),
}

impl Attn {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Attn::Abs(p) => p.params(),
            Attn::Rel(p) => p.params(),
        }
    }
}

fn norm(g: &mut Graph, store: &ParamStore, ln: &PerStream<LayerNorm>, x: Streams) -> Result<Streams> {
    x.map(|v, s| ln.get(s).forward(g, store, v))
}

/// Pre-norm transformer block:
/// `X~ = LN1(X)`, `X- = X + MHA(X~)`, `X' = X- + FF(LN2(X-))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: PerStream<LayerNorm>,
    pub mha: Attn,
    pub ln2: PerStream<LayerNorm>,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        dual: bool,
        rng: RngStream,
    ) -> Result<Self> {
        Ok(Self {
            ln1: PerStream::new(dual, |s| LayerNorm::new(store, &format!("{name}.ln1.{s}"), d_model, rng))?,
            mha: Attn::Abs(MhaParams::new(store, &format!("{name}.mha"), d_model, heads, rng)?),
            ln2: PerStream::new(dual, |s| LayerNorm::new(store, &format!("{name}.ln2.{s}"), d_model, rng))?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Streams, seq: &SeqContext, ctx: &mut Ctx) -> Result<Streams> {
        let xt = norm(g, store, &self.ln1, x)?;
        let att = self_attention(g, store, &self.mha, xt, seq)?;
        let att = att.map(|v, _| ctx.dropout(g, v))?;
        let xbar = x.zip(att, |a, b| g.add(a, b))?;
        let h = norm(g, store, &self.ln2, xbar)?;
        let h = h.map(|v, _| self.ff.forward(g, store, v, ctx))?;
        xbar.zip(h, |a, b| g.add(a, b))
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut v = self.mha.params();
        v.extend(self.ff.params());
        v
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        [&self.ln1, &self.ln2].iter().flat_map(|n| n.all().flat_map(LayerNorm::params)).collect()
    }

    /// Parameters that only feed the non-causal output of this block.
    pub fn nc_output_params(&self) -> Vec<ParamId> {
        self.ln2.nc.params()
    }
}

/// Pointwise conv, GLU, depthwise conv, batch norm, swish, pointwise conv.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub pw1: Linear,
    pub depthwise: ParamId,
    pub bn: PerStream<BatchNorm>,
    pub pw2: Linear,
    pub kernel: usize,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, kernel: usize, dual: bool, rng: RngStream) -> Result<Self> {
        let pw1 = Linear::new(store, &format!("{name}.pw1"), d_model, 2 * d_model, true, rng)?;
        let depthwise = store.init(
            &format!("{name}.depthwise"),
            &[kernel, d_model],
            Init::Xavier {
                fan_in: kernel,
                fan_out: kernel,
            },
            rng,
        )?;
        let bn = PerStream::new(dual, |s| BatchNorm::new(store, &format!("{name}.bn.{s}"), d_model, rng))?;
        let pw2 = Linear::new(store, &format!("{name}.pw2"), d_model, d_model, true, rng)?;
        Ok(Self {
            pw1,
            depthwise,
            bn,
            pw2,
            kernel,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        stream: Stream,
        table: &Rc<ConvTable>,
        ctx: &Ctx,
    ) -> Result<Var> {
        let h = self.pw1.forward(g, store, x)?;
        let h = g.glu(h)?;
        let k = g.param(store, self.depthwise);
        let h = g.depthwise_conv(h, k, table.clone())?;
        let h = self.bn.get(stream).forward(g, store, h, ctx)?;
        let h = g.swish(h);
        self.pw2.forward(g, store, h)
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut v = self.pw1.params();
        v.push(self.depthwise);
        v.extend(self.pw2.params());
        v
    }
}

/// Conformer block (macaron feed-forward halves around attention and conv):
/// `X~ = X + FF1(LN1(X))/2`, `X- = X~ + MHA_pos(LN2(X~))`,
/// `X= = X- + Conv(LN3(X-))`, `X' = X= + FF2(LN4(X=))/2`.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ln1: PerStream<LayerNorm>,
    pub ff1: FeedForward,
    pub ln2: PerStream<LayerNorm>,
    pub mha: Attn,
    pub ln3: PerStream<LayerNorm>,
    pub conv: ConvModule,
    pub ln4: PerStream<LayerNorm>,
    pub ff2: FeedForward,
}

impl ConformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        kernel: usize,
        dual: bool,
        rng: RngStream,
    ) -> Result<Self> {
        let ln = |store: &mut ParamStore, i: usize| {
            PerStream::new(dual, |s| LayerNorm::new(store, &format!("{name}.ln{i}.{s}"), d_model, rng))
        };
        Ok(Self {
            ln1: ln(store, 1)?,
            ff1: FeedForward::new(store, &format!("{name}.ff1"), d_model, d_ff, rng)?,
            ln2: ln(store, 2)?,
            mha: Attn::Rel(RelMhaParams::new(store, &format!("{name}.mha"), d_model, heads, rng)?),
            ln3: ln(store, 3)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), d_model, kernel, dual, rng)?,
            ln4: ln(store, 4)?,
            ff2: FeedForward::new(store, &format!("{name}.ff2"), d_model, d_ff, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Streams, seq: &SeqContext, ctx: &mut Ctx) -> Result<Streams> {
        let table = seq
            .conv
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("conformer block needs a convolution table".into()))?;
        let h = norm(g, store, &self.ln1, x)?;
        let h = h.map(|v, _| self.ff1.forward(g, store, v, ctx))?;
        let xt = x.zip(h, |a, b| {
            let b = g.scale(b, 0.5);
            g.add(a, b)
        })?;
        let h = norm(g, store, &self.ln2, xt)?;
        let att = self_attention(g, store, &self.mha, h, seq)?;
        let att = att.map(|v, _| ctx.dropout(g, v))?;
        let xbar = xt.zip(att, |a, b| g.add(a, b))?;
        let h = norm(g, store, &self.ln3, xbar)?;
        let h = h.map(|v, s| {
            let c = self.conv.forward(g, store, v, s, table, ctx)?;
            ctx.dropout(g, c)
        })?;
        let xbb = xbar.zip(h, |a, b| g.add(a, b))?;
        let h = norm(g, store, &self.ln4, xbb)?;
        let h = h.map(|v, _| self.ff2.forward(g, store, v, ctx))?;
        xbb.zip(h, |a, b| {
            let b = g.scale(b, 0.5);
            g.add(a, b)
        })
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut v = self.ff1.params();
        v.extend(self.mha.params());
        v.extend(self.conv.shared_params());
        v.extend(self.ff2.params());
        v
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = [&self.ln1, &self.ln2, &self.ln3, &self.ln4]
            .iter()
            .flat_map(|n| n.all().flat_map(LayerNorm::params))
            .collect();
        v.extend(self.conv.bn.all().flat_map(BatchNorm::trainable));
        v
    }

    pub fn nc_output_params(&self) -> Vec<ParamId> {
        let mut v = self.ln3.nc.params();
        v.extend(self.conv.bn.nc.trainable());
        v.extend(self.ln4.nc.params());
        v
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Transformer(TransformerBlock),
    Conformer(ConformerBlock),
}

impl Block {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Streams, seq: &SeqContext, ctx: &mut Ctx) -> Result<Streams> {
        match self {
            Block::Transformer(b) => b.forward(g, store, x, seq, ctx),
            Block::Conformer(b) => b.forward(g, store, x, seq, ctx),
        }
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        match self {
            Block::Transformer(b) => b.shared_params(),
            Block::Conformer(b) => b.shared_params(),
        }
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        match self {
            Block::Transformer(b) => b.norm_params(),
            Block::Conformer(b) => b.norm_params(),
        }
    }

    pub fn nc_output_params(&self) -> Vec<ParamId> {
        match self {
            Block::Transformer(b) => b.nc_output_params(),
            Block::Conformer(b) => b.nc_output_params(),
        }
    }
}
