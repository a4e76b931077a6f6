//! Label language models for shallow fusion. Distributions are over
//! end-of-sentence (index 0) and labels `1..=V`.

use std::collections::BTreeMap;

use crate::{Error, Result};

pub trait LanguageModel {
    /// Label count `V`.
    fn vocab(&self) -> usize;

    /// `log p(. | context)` over `V + 1` outputs.
    fn log_probs(&self, context: &[usize]) -> Vec<f64>;

    fn log_prob(&self, context: &[usize], next: usize) -> f64 {
        self.log_probs(context)[next]
    }

    /// Log-probability of `labels` without the end-of-sentence term.
    fn prefix_score(&self, labels: &[usize]) -> f64 {
        (0..labels.len()).map(|i| self.log_prob(&labels[..i], labels[i])).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformLm {
    pub vocab: usize,
}

impl LanguageModel for UniformLm {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, _: &[usize]) -> Vec<f64> {
        vec![-((self.vocab + 1) as f64).ln(); self.vocab + 1]
    }

    fn log_prob(&self, _: &[usize], _: usize) -> f64 {
        -((self.vocab + 1) as f64).ln()
    }
}

/// Add-k smoothed n-gram over label sequences. Contexts are padded with the
/// start symbol 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    pub order: usize,
    pub vocab: usize,
    pub k: f64,
    counts: BTreeMap<Vec<usize>, Vec<f64>>,
}

impl NgramLm {
    pub fn train<'a>(order: usize, vocab: usize, k: f64, corpus: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        if order == 0 || vocab == 0 || k <= 0.0 {
            return Err(Error::Config(format!("n-gram order {order}, vocab {vocab}, k {k}")));
        }
        let mut lm = Self {
            order,
            vocab,
            k,
            counts: BTreeMap::new(),
        };
        for sent in corpus {
            if let Some(&bad) = sent.iter().find(|&&l| l == 0 || l > vocab) {
                return Err(Error::InvalidArgument(format!("label {bad} outside 1..={vocab}")));
            }
            for i in 0..=sent.len() {
                let next = sent.get(i).copied().unwrap_or(0);
                let ctx = lm.context(&sent[..i]);
                lm.counts.entry(ctx).or_insert_with(|| vec![0.0; vocab + 1])[next] += 1.0;
            }
        }
        Ok(lm)
    }

    fn context(&self, history: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        let mut ctx = vec![0; n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        ctx
    }
}

impl LanguageModel for NgramLm {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, context: &[usize]) -> Vec<f64> {
        let outs = (self.vocab + 1) as f64;
        match self.counts.get(&self.context(context)) {
            Some(c) => {
                let total: f64 = c.iter().sum();
                c.iter().map(|n| ((n + self.k) / (total + self.k * outs)).ln()).collect()
            }
            None => vec![-outs.ln(); self.vocab + 1],
        }
    }
}
