//! Joint CTC/attention speech recogniser: encoder, CTC branch and decoder,
//! with the combined training objective.

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_forced_align, ctc_loss, Alignment, CtcDistribution};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{kd_loss, Encoder, EncoderConfig};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::{Ctx, LayerNorm, Linear};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder width {} != decoder width {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        Ok(())
    }

    /// Label count `V`.
    pub fn vocab(&self) -> usize {
        self.decoder.vocab
    }
}

/// Which decoder objective the joint loss uses.
#[derive(Debug, Clone, Copy)]
pub enum DecoderObjective<'a> {
    /// Full-sequence source attention.
    Full,
    /// Triggered attention with one (0-based) trigger frame per label.
    Triggered(&'a [usize]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// CTC weight `gamma`; the decoder gets `1 - gamma`.
    pub gamma: f64,
    /// Weight of the distillation term for dual-stream encoders (0 disables).
    pub kd: f64,
    pub smoothing: f64,
}

/// Loss node plus the values of its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ctc: f64,
    pub dec: f64,
    pub kd: Option<f64>,
    /// CTC log-probabilities of the utterance.
    pub ctc_log_probs: Var,
}

/// Inference-time encoder output and CTC posteriors.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub x_e: Tensor,
    pub ctc: CtcDistribution,
}

#[derive(Debug, Clone)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub ctc_norm: LayerNorm,
    pub ctc_out: Linear,
    pub decoder: Decoder,
}

impl AsrModel {
    pub fn new(store: &mut ParamStore, config: ModelConfig, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.d_model;
        let encoder = Encoder::new(store, "encoder", config.encoder.clone(), rng.derive(1))?;
        let ctc_norm = LayerNorm::new(store, "ctc.norm", d, rng.derive(2))?;
        let ctc_out = Linear::new(store, "ctc.out", d, config.vocab() + 1, true, rng.derive(2))?;
        let decoder = Decoder::new(store, "decoder", config.decoder.clone(), rng.derive(3))?;
        Ok(Self {
            config,
            encoder,
            ctc_norm,
            ctc_out,
            decoder,
        })
    }

    /// Changes the decoder's trigger look-ahead (no parameters depend on it).
    pub fn set_decoder_lookahead(&mut self, eps_dec: usize) {
        self.config.decoder.eps_dec = eps_dec;
        self.decoder.config.eps_dec = eps_dec;
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.encoder.trainable_params().into_iter().collect();
        v.extend(self.ctc_norm.params());
        v.extend(self.ctc_out.params());
        v.extend(self.decoder.params());
        v
    }

    /// Per-frame CTC log-probabilities over blank and labels.
    pub fn ctc_log_probs(&self, g: &mut Graph, store: &ParamStore, x_e: Var) -> Result<Var> {
        let h = self.ctc_norm.forward(g, store, x_e)?;
        let logits = self.ctc_out.forward(g, store, h)?;
        Ok(g.log_softmax(logits))
    }

    /// `gamma * ctc + (1 - gamma) * dec (+ kd * mse)` for one utterance.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
        y: &[usize],
        objective: DecoderObjective<'_>,
        w: &LossWeights,
        ctx: &mut Ctx,
    ) -> Result<LossTerms> {
        if !(0.0..=1.0).contains(&w.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1]", w.gamma)));
        }
        let x = g.input(features.clone());
        let enc = self.encoder.encode(g, store, x, ctx)?;
        let lp = self.ctc_log_probs(g, store, enc.out)?;
        let ctc = ctc_loss(g, lp, y)?;
        let dec = match objective {
            DecoderObjective::Full => self.decoder.attention_loss(g, store, y, enc.out, w.smoothing, ctx)?,
            DecoderObjective::Triggered(tr) => self.decoder.ta_loss(g, store, y, enc.out, tr, w.smoothing, ctx)?,
        };
        let mut terms = vec![(ctc, w.gamma), (dec, 1.0 - w.gamma)];
        let mut kd = None;
        if let (Some(c), true) = (enc.causal, w.kd > 0.0) {
            let k = kd_loss(g, c, enc.out)?;
            kd = Some(g.value(k).item());
            terms.push((k, w.kd));
        }
        let total = g.lin_comb(&terms)?;
        Ok(LossTerms {
            total,
            ctc: g.value(ctc).item(),
            dec: g.value(dec).item(),
            kd,
            ctc_log_probs: lp,
        })
    }

    /// Encoder output and CTC posteriors in inference mode; `None` when the
    /// input is shorter than the frontend's receptive field.
    pub fn infer(&self, store: &ParamStore, features: &Tensor) -> Result<Option<Encoded>> {
        if Encoder::output_frames(features.rows()) == 0 {
            return Ok(None);
        }
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let enc = self.encoder.encode(&mut g, store, x, &mut Ctx::eval())?;
        let lp = self.ctc_log_probs(&mut g, store, enc.out)?;
        Ok(Some(Encoded {
            x_e: g.value(enc.out).clone(),
            ctc: CtcDistribution::new(g.value(lp).clone())?,
        }))
    }

    /// CTC forced alignment of `y` under the current parameters.
    pub fn align(&self, store: &ParamStore, features: &Tensor, y: &[usize]) -> Result<Alignment> {
        match self.infer(store, features)? {
            Some(e) => ctc_forced_align(&e.ctc, y),
            None => Err(Error::CtcInfeasible {
                frames: 0,
                labels: y.len(),
                needed: y.len().max(1),
            }),
        }
    }
}
