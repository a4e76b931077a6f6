//! Speech encoder: CNN frontend followed by transformer or conformer blocks
//! under a streaming attention plan, including the dual-stream DCN encoder
//! and its in-place distillation loss.

pub mod blocks;

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::Positions;
use crate::numerics::functional::{sinusoid, ConvTable, Padding};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::Ctx;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::streaming::{Layout, PlanKind};
use crate::{Error, Result};
pub use blocks::{Attn, AttnPlan, Block, ConformerBlock, ConvModule, Frontend, SeqContext, Stream, Streams, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Transformer,
    Conformer,
}

/// Depthwise-convolution window of the conformer convolution module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "padding", content = "size", rename_all = "lowercase")]
pub enum ConvWindow {
    Symmetric(usize),
    Causal(usize),
}

impl ConvWindow {
    pub fn size(&self) -> usize {
        match *self {
            ConvWindow::Symmetric(k) | ConvWindow::Causal(k) => k,
        }
    }

    pub fn padding(&self) -> Padding {
        match self {
            ConvWindow::Symmetric(_) => Padding::Symmetric,
            ConvWindow::Causal(_) => Padding::Causal,
        }
    }

    /// 31 frames centred for full-sequence models, 16 past frames plus the
    /// current one for streaming models.
    pub fn default_for(plan: &PlanKind) -> Self {
        if plan.is_streaming() {
            ConvWindow::Causal(17)
        } else {
            ConvWindow::Symmetric(31)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    pub plan: PlanKind,
    pub conv_window: ConvWindow,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.input_dim == 0 || self.d_ff == 0 {
            return Err(Error::Config("zero-sized encoder dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.plan.validate()?;
        if self.architecture == Architecture::Conformer {
            match self.conv_window {
                ConvWindow::Symmetric(k) if k % 2 == 0 => {
                    return Err(Error::Config(format!("symmetric conv window {k} must be odd")))
                }
                ConvWindow::Symmetric(_) if self.plan.is_streaming() => {
                    return Err(Error::Config("streaming plans need a causal conv window".into()))
                }
                w if w.size() == 0 => return Err(Error::Config("empty conv window".into())),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn is_dual(&self) -> bool {
        matches!(self.plan, PlanKind::Dcn(_))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub frontend: Frontend,
    pub blocks: Vec<Block>,
}

/// Encoder result; `causal` is the causal DCN stream (student) when present.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub out: Var,
    pub causal: Option<Var>,
}

/// Sinusoidal positional encodings for frames `0..t`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * d);
    for p in 0..t {
        data.extend(sinusoid(p as f64, d));
    }
    Tensor::raw(vec![t, d], data)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let dual = config.is_dual();
        let frontend = Frontend::new(store, &format!("{name}.frontend"), config.input_dim, config.d_model, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for e in 0..config.blocks {
            let bname = format!("{name}.block{e}");
            let b = match config.architecture {
                Architecture::Transformer => Block::Transformer(TransformerBlock::new(
                    store,
                    &bname,
                    config.d_model,
                    config.d_ff,
                    config.heads,
                    dual,
                    rng,
                )?),
                Architecture::Conformer => Block::Conformer(ConformerBlock::new(
                    store,
                    &bname,
                    config.d_model,
                    config.d_ff,
                    config.heads,
                    config.conv_window.size(),
                    dual,
                    rng,
                )?),
            };
            blocks.push(b);
        }
        Ok(Self {
            config,
            frontend,
            blocks,
        })
    }

    /// Encoder frames produced for `t0` input frames (0 if too short).
    pub fn output_frames(t0: usize) -> usize {
        Frontend::output_len(t0).unwrap_or(0)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, features: Var, ctx: &mut Ctx) -> Result<EncoderOutput> {
        let x0 = self.frontend.forward(g, store, features)?;
        self.encode_x0(g, store, x0, ctx)
    }

    /// Runs the blocks on the frontend output `X0`.
    pub fn encode_x0(&self, g: &mut Graph, store: &ParamStore, x0: Var, ctx: &mut Ctx) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let t = g.value(x0).rows();
        if g.value(x0).cols() != cfg.d_model {
            return Err(Error::Shape(format!("X0 width {} != d_model {}", g.value(x0).cols(), cfg.d_model)));
        }
        let plan = cfg.plan.build(t)?;
        let x0 = match cfg.architecture {
            Architecture::Transformer => {
                let pe = g.input(positional_encoding(t, cfg.d_model));
                g.add(x0, pe)?
            }
            Architecture::Conformer => x0,
        };
        let conformer = cfg.architecture == Architecture::Conformer;
        let (k, padding) = (cfg.conv_window.size(), cfg.conv_window.padding());
        let seq_conv = |n: usize, padding: Padding| -> Result<Option<Rc<ConvTable>>> {
            Ok(if conformer { Some(Rc::new(ConvTable::sequential(n, k, padding)?)) } else { None })
        };
        let run = |g: &mut Graph, mut x: Streams, seq: &SeqContext, ctx: &mut Ctx| -> Result<Streams> {
            for b in &self.blocks {
                x = b.forward(g, store, x, seq, ctx)?;
            }
            Ok(x)
        };
        match &plan.layout {
            Layout::Single(mask) => {
                let seq = SeqContext {
                    attn: AttnPlan::Single(mask.clone()),
                    positions: Positions::sequential(t),
                    conv: seq_conv(t, padding)?,
                };
                let out = run(g, Streams::Single(x0), &seq, ctx)?;
                Ok(EncoderOutput {
                    out: out.primary(),
                    causal: None,
                })
            }
            Layout::Dual(d) => {
                let seq = SeqContext {
                    attn: AttnPlan::Dual(d.clone()),
                    positions: Positions::sequential(t),
                    conv: seq_conv(t, Padding::Causal)?,
                };
                match run(g, Streams::Dual { nc: x0, c: x0 }, &seq, ctx)? {
                    Streams::Dual { nc, c } => Ok(EncoderOutput {
                        out: nc,
                        causal: Some(c),
                    }),
                    Streams::Single(_) => unreachable!("dual input yields dual output"),
                }
            }
            Layout::Chunked(ch) => {
                let frames = Rc::new(ch.slot_frame.clone());
                let seq = SeqContext {
                    attn: AttnPlan::Single(ch.mask.clone()),
                    positions: Positions {
                        query: frames.clone(),
                        key: frames,
                    },
                    conv: if conformer { Some(Rc::new(ch.conv_table(k, padding)?)) } else { None },
                };
                let slots = g.gather_rows(x0, ch.slot_frame.clone())?;
                let out = run(g, Streams::Single(slots), &seq, ctx)?;
                let out = g.gather_rows(out.primary(), ch.forwarded.clone())?;
                Ok(EncoderOutput { out, causal: None })
            }
        }
    }

    /// Distinct trainable parameter arrays.
    pub fn trainable_params(&self) -> BTreeSet<ParamId> {
        let mut s: BTreeSet<ParamId> = self.frontend.params().into_iter().collect();
        for b in &self.blocks {
            s.extend(b.shared_params());
            s.extend(b.norm_params());
        }
        s
    }

    pub fn norm_params(&self) -> BTreeSet<ParamId> {
        self.blocks.iter().flat_map(Block::norm_params).collect()
    }

    /// Parameters that influence the non-causal output but never the causal
    /// one: the non-causal norms after the last attention layer.
    pub fn teacher_only_params(&self) -> Vec<ParamId> {
        match (self.config.is_dual(), self.blocks.last()) {
            (true, Some(b)) => b.nc_output_params(),
            _ => Vec::new(),
        }
    }
}

/// Mean squared difference between the causal (student) and non-causal
/// (teacher) encoder outputs; the teacher is treated as a constant.
pub fn kd_loss(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let (s, t) = (g.value(student), g.value(teacher));
    let value = kd_loss_value(s, t)?;
    let n = s.len() as f64;
    let grad: Vec<f64> = s.data().iter().zip(t.data()).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let grad = Tensor::raw(s.shape().to_vec(), grad);
    g.external_loss(student, value, grad)
}

pub fn kd_loss_value(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "distillation {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let sum: f64 = student.data().iter().zip(teacher.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / student.len() as f64)
}
