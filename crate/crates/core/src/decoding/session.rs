//! Incremental decoding: feature frames arrive in pieces, the search
//! advances over encoder frames as soon as their outputs (and the decoder
//! look-ahead behind them) can no longer change.

use serde::{Deserialize, Serialize};

use super::{DecodeResult, DecodingConfig, LanguageModel, Search};
use crate::encoder::Encoder;
use crate::model::AsrModel;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

/// Stable partial output after a chunk of input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialResult {
    /// Encoder frames consumed by the search so far.
    pub frame: usize,
    /// Labels shared by every live hypothesis.
    pub partial: Vec<usize>,
    pub triggers: Vec<usize>,
}

pub struct StreamingSession<'a, L: LanguageModel + ?Sized> {
    model: &'a AsrModel,
    store: &'a ParamStore,
    search: Search<'a, L>,
    features: Vec<f64>,
    input_dim: usize,
    finalized: bool,
}

impl<'a, L: LanguageModel + ?Sized> StreamingSession<'a, L> {
    pub fn new(model: &'a AsrModel, store: &'a ParamStore, lm: &'a L, cfg: DecodingConfig) -> Result<Self> {
        if !model.config.encoder.plan.is_streaming() {
            return Err(Error::Config("streaming needs an RSA, CSA or DCN encoder plan".into()));
        }
        Ok(Self {
            model,
            store,
            search: Search::new(&model.decoder, store, lm, cfg)?,
            features: Vec::new(),
            input_dim: model.config.encoder.input_dim,
            finalized: false,
        })
    }

    pub fn input_frames(&self) -> usize {
        self.features.len() / self.input_dim
    }

    /// Appends feature frames (`n x input_dim`) and advances the search.
    pub fn push(&mut self, frames: &Tensor) -> Result<PartialResult> {
        if self.finalized {
            return Err(Error::SessionFinalized);
        }
        if frames.rows() > 0 && frames.cols() != self.input_dim {
            return Err(Error::Shape(format!("{} feature columns, expected {}", frames.cols(), self.input_dim)));
        }
        self.features.extend_from_slice(frames.data());
        self.advance(false)?;
        Ok(self.partial())
    }

    /// Decodes the remaining frames and returns the final result.
    pub fn finalize(&mut self) -> Result<DecodeResult> {
        if self.finalized {
            return Err(Error::SessionFinalized);
        }
        self.finalized = true;
        if Encoder::output_frames(self.input_frames()) == 0 {
            return Ok(DecodeResult::default());
        }
        self.advance(true)?;
        self.search.finish()
    }

    fn advance(&mut self, last: bool) -> Result<()> {
        let available = Encoder::output_frames(self.input_frames());
        if available == 0 {
            return Ok(());
        }
        let cfg = &self.model.config;
        let (stable, limit) = if last {
            (available, available)
        } else {
            let s = cfg.encoder.plan.stable_frames(cfg.encoder.blocks, available);
            (s, s.saturating_sub(cfg.decoder.eps_dec))
        };
        let done = self.search.inner.frames();
        if limit <= done {
            return Ok(());
        }
        let feats = Tensor::matrix(self.input_frames(), self.input_dim, self.features.clone())?;
        let enc = self.model.infer(self.store, &feats)?.expect("frontend output exists");
        self.search.inner.hooks.x_e = enc.x_e.slice_rows(0, stable);
        for t in done..limit {
            self.search.inner.step(enc.ctc.row(t))?;
        }
        Ok(())
    }

    /// Longest label prefix common to every live hypothesis.
    pub fn partial(&self) -> PartialResult {
        let beam = self.search.inner.beam();
        let first = &beam[0];
        let n = beam
            .iter()
            .map(|h| h.prefix.iter().zip(&first.prefix).take_while(|(a, b)| a == b).count())
            .min()
            .unwrap_or(0);
        PartialResult {
            frame: self.search.inner.frames(),
            partial: first.prefix[..n].to_vec(),
            triggers: first.triggers[..n].to_vec(),
        }
    }
}
