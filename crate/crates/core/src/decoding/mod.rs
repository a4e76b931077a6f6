//! Frame-synchronous joint CTC / triggered-attention decoding with language
//! model shallow fusion, offline and streaming.
//!
//! A hypothesis scores `lambda * ctc + (1 - lambda) * dec + alpha * lm +
//! beta * |prefix|`. The CTC pass ranks prefixes by `ctc + alpha0 * lm +
//! beta * |prefix|`. A label appended at frame `n` is rescored by the
//! decoder on encoder frames `0..min(n + 1 + eps_dec, T)`.

pub mod lm;
pub mod session;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ctc::{CtcDistribution, Hypothesis, PrefixSearch, SearchConfig, SearchHooks};
use crate::decoder::{trigger_bound, Decoder, EOS};
use crate::model::AsrModel;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};
pub use lm::{LanguageModel, NgramLm, UniformLm};
pub use session::{PartialResult, StreamingSession};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    /// LM weight inside the CTC pass (`alpha0`).
    pub ctc_lm_weight: f64,
    /// CTC weight `lambda` of the joint score.
    pub ctc_weight: f64,
    /// LM weight `alpha` of the joint score.
    pub lm_weight: f64,
    /// Extension margin `theta1`.
    pub theta1: f64,
    /// CTC-pass margin `theta2`.
    pub theta2: f64,
    /// Insertion bonus `beta` per label.
    pub bonus: f64,
    /// Prefixes kept by the CTC pass (`K`).
    pub prune: usize,
    /// Hypotheses carried per frame (`P`).
    pub beam: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            ctc_lm_weight: 0.0,
            ctc_weight: 0.6,
            lm_weight: 0.0,
            theta1: 8.0,
            theta2: 4.0,
            bonus: 1.0,
            prune: 20,
            beam: 5,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("CTC weight {} outside [0, 1]", self.ctc_weight)));
        }
        self.search().validate()
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            prune: self.prune,
            theta1: self.theta1,
            theta2: self.theta2,
        }
    }

    /// Search with every pruning stage disabled.
    pub fn exhaustive(mut self, size: usize) -> Self {
        self.beam = size;
        self.prune = size;
        self.theta1 = f64::INFINITY;
        self.theta2 = f64::INFINITY;
        self
    }
}

/// Per-hypothesis decoder and LM scores plus the source bound of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaState {
    pub dec: f64,
    pub lm: f64,
    pub nu: Vec<usize>,
}

/// Rescoring hooks: triggered-attention decoder and language model.
pub struct TaHooks<'a, L: LanguageModel + ?Sized> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
    pub lm: &'a L,
    pub cfg: DecodingConfig,
    /// Encoder frames usable so far.
    pub x_e: Tensor,
    /// End-of-sentence scores `(dec, lm)` per finalised prefix.
    eos: BTreeMap<Vec<usize>, (f64, f64)>,
}

impl<'a, L: LanguageModel + ?Sized> TaHooks<'a, L> {
    pub fn new(decoder: &'a Decoder, store: &'a ParamStore, lm: &'a L, cfg: DecodingConfig, x_e: Tensor) -> Self {
        Self {
            decoder,
            store,
            lm,
            cfg,
            x_e,
            eos: BTreeMap::new(),
        }
    }

    fn combine(&self, ctc: f64, dec: f64, lm: f64, len: usize) -> f64 {
        let c = &self.cfg;
        c.ctc_weight * ctc + (1.0 - c.ctc_weight) * dec + c.lm_weight * lm + c.bonus * len as f64
    }
}

impl<L: LanguageModel + ?Sized> SearchHooks for TaHooks<'_, L> {
    type State = TaState;

    fn root(&mut self) -> Result<TaState> {
        Ok(TaState {
            dec: 0.0,
            lm: 0.0,
            nu: Vec::new(),
        })
    }

    fn ctc_pass_score(&mut self, prefix: &[usize]) -> f64 {
        self.cfg.ctc_lm_weight * self.lm.prefix_score(prefix) + self.cfg.bonus * prefix.len() as f64
    }

    fn extend(&mut self, parent: &TaState, prefix: &[usize], labels: &[usize], frame: usize) -> Result<Vec<TaState>> {
        let bound = trigger_bound(frame, self.decoder.config.eps_dec, self.x_e.rows());
        let mut nu = parent.nu.clone();
        nu.push(bound);
        let dec = self.decoder.next_log_probs(self.store, prefix, &nu, &self.x_e)?;
        let lm = self.lm.log_probs(prefix);
        Ok(labels
            .iter()
            .map(|&c| TaState {
                dec: parent.dec + dec[c],
                lm: parent.lm + lm[c],
                nu: nu.clone(),
            })
            .collect())
    }

    fn joint(&self, ctc: f64, prefix: &[usize], s: &TaState) -> f64 {
        self.combine(ctc, s.dec, s.lm, prefix.len())
    }

    fn finalize(&mut self, ctc: f64, prefix: &[usize], s: &TaState) -> Result<f64> {
        let t = self.x_e.rows();
        let mut steps = s.nu.clone();
        steps.push(t);
        let dec = self.decoder.next_log_probs(self.store, prefix, &steps, &self.x_e)?[EOS];
        let lm = self.lm.log_prob(prefix, EOS);
        self.eos.insert(prefix.to_vec(), (dec, lm));
        Ok(self.combine(ctc, s.dec + dec, s.lm + lm, prefix.len()))
    }
}

/// A finished hypothesis with its score components (end-of-sentence terms
/// included in `dec` and `lm`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub labels: Vec<usize>,
    /// 0-based encoder frame at which each label was appended.
    pub triggers: Vec<usize>,
    pub ctc: f64,
    pub dec: f64,
    pub lm: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeResult {
    pub nbest: Vec<ScoredHypothesis>,
}

impl DecodeResult {
    /// Best transcript; empty for an empty result.
    pub fn labels(&self) -> &[usize] {
        self.nbest.first().map(|h| h.labels.as_slice()).unwrap_or(&[])
    }

    pub fn triggers(&self) -> &[usize] {
        self.nbest.first().map(|h| h.triggers.as_slice()).unwrap_or(&[])
    }
}

fn collect<L: LanguageModel + ?Sized>(hooks: &TaHooks<'_, L>, nbest: Vec<Hypothesis<TaState>>) -> DecodeResult {
    let nbest = nbest
        .into_iter()
        .map(|h| {
            let (dec_eos, lm_eos) = hooks.eos[&h.prefix];
            ScoredHypothesis {
                ctc: h.ctc_score(),
                dec: h.state.dec + dec_eos,
                lm: h.state.lm + lm_eos,
                score: h.score,
                triggers: h.triggers,
                labels: h.prefix,
            }
        })
        .collect();
    DecodeResult { nbest }
}

/// Search state shared by offline and streaming decoding.
pub(crate) struct Search<'a, L: LanguageModel + ?Sized> {
    pub(crate) inner: PrefixSearch<TaHooks<'a, L>>,
}

impl<'a, L: LanguageModel + ?Sized> Search<'a, L> {
    pub(crate) fn new(decoder: &'a Decoder, store: &'a ParamStore, lm: &'a L, cfg: DecodingConfig) -> Result<Self> {
        cfg.validate()?;
        if lm.vocab() != decoder.config.vocab {
            return Err(Error::Config(format!(
                "LM vocabulary {} != model vocabulary {}",
                lm.vocab(),
                decoder.config.vocab
            )));
        }
        let hooks = TaHooks::new(decoder, store, lm, cfg, Tensor::zeros(&[0, decoder.config.d_model]));
        Ok(Self {
            inner: PrefixSearch::new(cfg.search(), hooks)?,
        })
    }

    pub(crate) fn finish(&mut self) -> Result<DecodeResult> {
        let nbest = self.inner.finish()?;
        Ok(collect(&self.inner.hooks, nbest))
    }
}

/// Offline decoding of one utterance from its CTC posteriors and encoder
/// output. An utterance without frames decodes to an empty result.
pub fn ta_decode<L: LanguageModel + ?Sized>(
    dist: &CtcDistribution,
    x_e: &Tensor,
    decoder: &Decoder,
    store: &ParamStore,
    lm: &L,
    cfg: DecodingConfig,
) -> Result<DecodeResult> {
    if dist.frames() != x_e.rows() {
        return Err(Error::Shape(format!("{} CTC frames for {} encoder frames", dist.frames(), x_e.rows())));
    }
    if dist.labels() != decoder.config.vocab {
        return Err(Error::Shape(format!("{} CTC labels for vocabulary {}", dist.labels(), decoder.config.vocab)));
    }
    let mut s = Search::new(decoder, store, lm, cfg)?;
    if dist.frames() == 0 {
        return Ok(DecodeResult::default());
    }
    s.inner.hooks.x_e = x_e.clone();
    for t in 0..dist.frames() {
        s.inner.step(dist.row(t))?;
    }
    s.finish()
}

/// Runs the model on `features` and decodes offline.
pub fn decode_features<L: LanguageModel + ?Sized>(
    model: &AsrModel,
    store: &ParamStore,
    features: &Tensor,
    lm: &L,
    cfg: DecodingConfig,
) -> Result<DecodeResult> {
    match model.infer(store, features)? {
        Some(e) => ta_decode(&e.ctc, &e.x_e, &model.decoder, store, lm, cfg),
        None => {
            Search::new(&model.decoder, store, lm, cfg)?;
            Ok(DecodeResult::default())
        }
    }
}

#[cfg(test)]
mod tests;
