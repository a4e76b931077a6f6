//! Joint CTC/attention training with full-sequence pre-training and
//! triggered-attention fine-tuning.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::corpus::{Corpus, Utterance};
use super::optim::{lr_schedule, Adam, AdamConfig};
use crate::ctc::{greedy_decode, CtcDistribution};
use crate::decoding::{decode_features, DecodeResult, DecodingConfig, LanguageModel};
use crate::model::{AsrModel, DecoderObjective, LossWeights, ModelConfig};
use crate::numerics::graph::Graph;
use crate::numerics::layers::{Ctx, BN_MOMENTUM};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub dec: f64,
    pub kd: Option<f64>,
    /// Greedy CTC token accuracy on the training utterances as seen in training.
    pub ctc_accuracy: f64,
}

/// Levenshtein distance between label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Up to two time masks of at most 10% of the frames and one feature mask of
/// at most 20% of the channels, all set to zero.
pub fn augment(features: &Tensor, rng: &mut impl Rng) -> Tensor {
    let mut out = features.clone();
    let (t, d) = (out.rows(), out.cols());
    for _ in 0..rng.gen_range(0..=2) {
        let w = rng.gen_range(0..=t / 10);
        let s = rng.gen_range(0..=t - w);
        for r in s..s + w {
            out.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let w = rng.gen_range(0..=d / 5);
    let s = rng.gen_range(0..=d - w);
    for r in 0..t {
        out.row_mut(r)[s..s + w].iter_mut().for_each(|x| *x = 0.0);
    }
    out
}

pub struct Trainer {
    pub model: AsrModel,
    pub store: ParamStore,
    pub vocabulary: Vec<String>,
    pub config: TrainConfig,
    /// Optimiser updates applied so far, across phases.
    pub step: u64,
    adam: Adam,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, vocabulary: Vec<String>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = AsrModel::new(&mut store, model, RngStream::new(config.seed).derive(10))?;
        Ok(Self::assemble(model, store, vocabulary, config, 0))
    }

    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::assemble(ck.model, ck.store, ck.vocabulary, config, ck.step))
    }

    fn assemble(model: AsrModel, store: ParamStore, vocabulary: Vec<String>, config: TrainConfig, step: u64) -> Self {
        let adam = Adam::new(AdamConfig::default(), &store);
        Self {
            model,
            store,
            vocabulary,
            config,
            step,
            adam,
            epochs_done: 0,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            store: self.store.clone(),
            vocabulary: self.vocabulary.clone(),
            step: self.step,
        }
    }

    /// Scheduled learning rate of the next update.
    pub fn scheduled_lr(&self) -> f64 {
        let c = &self.config;
        lr_schedule(self.step + 1, self.model.config.encoder.d_model, c.lr_factor, c.warmup)
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.config.gamma,
            kd: if self.config.kd { self.config.kd_weight } else { 0.0 },
            smoothing: self.config.smoothing,
        }
    }

    /// Full-sequence decoder objective with the warmup schedule.
    pub fn pretrain(&mut self, corpus: &Corpus, epochs: usize, log: &mut dyn FnMut(&EpochMetrics)) -> Result<()> {
        for _ in 0..epochs {
            let m = self.epoch(corpus, Phase::Pretrain, None, None)?;
            log(&m);
        }
        Ok(())
    }

    /// Triggered-attention objective at a constant learning rate with fresh
    /// optimiser moments. Triggers come from CTC forced alignment under the
    /// current parameters, recomputed every epoch.
    pub fn finetune(&mut self, corpus: &Corpus, epochs: usize, lr: f64, log: &mut dyn FnMut(&EpochMetrics)) -> Result<()> {
        self.adam = Adam::new(AdamConfig::default(), &self.store);
        for _ in 0..epochs {
            let triggers = corpus
                .utterances
                .iter()
                .map(|u| Ok(self.model.align(&self.store, &u.features, &u.labels)?.triggers))
                .collect::<Result<Vec<_>>>()?;
            let m = self.epoch(corpus, Phase::Finetune, Some(&triggers), Some(lr))?;
            log(&m);
        }
        Ok(())
    }

    /// Joint loss of one utterance under the given decoder objective, in
    /// evaluation mode.
    pub fn eval_loss(&self, u: &Utterance, triggers: Option<&[usize]>) -> Result<f64> {
        let mut g = Graph::new();
        let objective = triggers.map_or(DecoderObjective::Full, DecoderObjective::Triggered);
        let terms = self.model.loss(&mut g, &self.store, &u.features, &u.labels, objective, &self.weights(), &mut Ctx::eval())?;
        Ok(g.value(terms.total).item())
    }

    fn epoch(&mut self, corpus: &Corpus, phase: Phase, triggers: Option<&[Vec<usize>]>, lr: Option<f64>) -> Result<EpochMetrics> {
        let epoch = self.epochs_done;
        let rng = RngStream::new(self.config.seed).derive(1000 + epoch as u64);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng.derive(0).generator());
        let snapshot = (self.store.clone(), self.adam.clone(), self.step);
        let weights = self.weights();
        let n = corpus.len().max(1) as f64;
        let (mut loss, mut ctc, mut dec, mut kd) = (0.0, 0.0, 0.0, None::<f64>);
        let (mut errors, mut tokens) = (0usize, 0usize);
        let mut last_lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            self.store.zero_grads();
            for &i in batch {
                let u = &corpus.utterances[i];
                let utt_rng = RngStream::with_counter(rng.seed, 1 + i as u64);
                let features = if self.config.augment {
                    augment(&u.features, &mut utt_rng.derive(1).generator())
                } else {
                    u.features.clone()
                };
                let objective = match triggers {
                    Some(t) => DecoderObjective::Triggered(&t[i]),
                    None => DecoderObjective::Full,
                };
                let mut ctx = Ctx::train(self.model.config.encoder.dropout, utt_rng.derive(2));
                let mut g = Graph::new();
                let terms = self.model.loss(&mut g, &self.store, &features, &u.labels, objective, &weights, &mut ctx)?;
                let value = g.value(terms.total).item();
                if !value.is_finite() {
                    return Err(self.diverged(snapshot, epoch));
                }
                loss += value / n;
                ctc += terms.ctc / n;
                dec += terms.dec / n;
                if let Some(k) = terms.kd {
                    kd = Some(kd.unwrap_or(0.0) + k / n);
                }
                let hyp = greedy_decode(&CtcDistribution::new(g.value(terms.ctc_log_probs).clone())?);
                errors += edit_distance(&hyp, &u.labels);
                tokens += u.labels.len();
                let grads = g.backward(terms.total);
                self.store.accumulate(&grads.param_grads(self.store.len()), 1.0 / batch.len() as f64);
                for up in g.bn_updates() {
                    for (pid, batch_stat) in [(up.mean_param, &up.mean), (up.var_param, &up.var)] {
                        let p = self.store.get_mut(pid);
                        for (r, b) in p.value.data_mut().iter_mut().zip(batch_stat) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                        }
                    }
                }
            }
            last_lr = lr.unwrap_or_else(|| self.scheduled_lr());
            self.step += 1;
            self.adam.step(&mut self.store, last_lr);
            if self.store.iter().any(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(self.diverged(snapshot, epoch));
            }
        }
        self.epochs_done += 1;
        Ok(EpochMetrics {
            phase,
            epoch,
            step: self.step,
            lr: last_lr,
            loss,
            ctc,
            dec,
            kd,
            ctc_accuracy: 1.0 - errors as f64 / tokens.max(1) as f64,
        })
    }

    fn diverged(&mut self, snapshot: (ParamStore, Adam, u64), epoch: usize) -> Error {
        let step = self.step;
        (self.store, self.adam, self.step) = snapshot;
        Error::Diverged { epoch, step }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub tokens: usize,
    pub edits: usize,
    pub token_accuracy: f64,
    pub sentence_accuracy: f64,
}

/// Decodes every utterance and scores it against its transcript.
pub fn evaluate<L: LanguageModel + ?Sized>(
    model: &AsrModel,
    store: &ParamStore,
    corpus: &Corpus,
    lm: &L,
    cfg: DecodingConfig,
) -> Result<(EvalReport, Vec<DecodeResult>)> {
    let mut results = Vec::with_capacity(corpus.len());
    let (mut edits, mut tokens, mut correct) = (0, 0, 0);
    for u in &corpus.utterances {
        let r = decode_features(model, store, &u.features, lm, cfg)?;
        let e = edit_distance(r.labels(), &u.labels);
        edits += e;
        tokens += u.labels.len();
        correct += usize::from(e == 0);
        results.push(r);
    }
    let report = EvalReport {
        utterances: corpus.len(),
        tokens,
        edits,
        token_accuracy: 1.0 - edits as f64 / tokens.max(1) as f64,
        sentence_accuracy: correct as f64 / corpus.len().max(1) as f64,
    };
    Ok((report, results))
}
