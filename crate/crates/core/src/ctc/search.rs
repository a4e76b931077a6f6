//! Frame-synchronous CTC prefix beam search with pluggable rescoring.
//!
//! Per frame: every hypothesis contributes its blank and repeat mass, label
//! extensions within `theta1` of the frame's best extension are merged in,
//! the merged set is pruned on the CTC-pass score (margin `theta2`, then
//! top `prune`), newly created prefixes are rescored by the hooks, and the
//! best `beam` hypotheses by joint score survive.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{CtcDistribution, BLANK};
use crate::numerics::functional::log_add;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Hypotheses carried to the next frame (`P`).
    pub beam: usize,
    /// Prefixes kept after CTC-pass pruning (`K`).
    pub prune: usize,
    /// Extension margin below the frame-best extension score.
    pub theta1: f64,
    /// CTC-pass margin below the best prefix score.
    pub theta2: f64,
}

impl SearchConfig {
    /// Plain beam search: no score margins and `K = P`.
    pub fn beam(p: usize) -> Self {
        Self {
            beam: p,
            prune: p,
            theta1: f64::INFINITY,
            theta2: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.prune < self.beam {
            return Err(Error::Config(format!(
                "need K >= P >= 1, got K={} P={}",
                self.prune, self.beam
            )));
        }
        if !(self.theta1 >= self.theta2 && self.theta2 >= 0.0) {
            return Err(Error::Config(format!(
                "need theta1 >= theta2 >= 0, got {} and {}",
                self.theta1, self.theta2
            )));
        }
        Ok(())
    }
}

/// Scoring beyond pure CTC. `State` is per-hypothesis data (for example a
/// decoder cache and accumulated decoder/LM scores).
pub trait SearchHooks {
    type State: Clone;

    fn root(&mut self) -> Result<Self::State>;

    /// Added to the CTC prefix score during CTC-pass pruning.
    fn ctc_pass_score(&mut self, _prefix: &[usize]) -> f64 {
        0.0
    }

    /// States for `prefix + [label]` for every label, created at `frame`.
    fn extend(&mut self, parent: &Self::State, prefix: &[usize], labels: &[usize], frame: usize) -> Result<Vec<Self::State>>;

    /// Ranking score of a live hypothesis.
    fn joint(&self, ctc: f64, prefix: &[usize], state: &Self::State) -> f64;

    /// Final score once the input has ended.
    fn finalize(&mut self, ctc: f64, prefix: &[usize], state: &Self::State) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<S> {
    pub prefix: Vec<usize>,
    pub log_pb: f64,
    pub log_pnb: f64,
    /// Frame at which each label was appended.
    pub triggers: Vec<usize>,
    pub state: S,
    /// Joint score during search, final score in the n-best list.
    pub score: f64,
}

impl<S> Hypothesis<S> {
    /// `log(p_blank + p_nonblank)`: CTC probability of the prefix so far.
    pub fn ctc_score(&self) -> f64 {
        log_add(self.log_pb, self.log_pnb)
    }
}

/// Descending score, ties broken by ascending prefix.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Entry {
    pb: f64,
    pnb: f64,
    existing: Option<usize>,
    parent: Option<(usize, usize)>,
}

impl Entry {
    fn empty() -> Self {
        Self {
            pb: f64::NEG_INFINITY,
            pnb: f64::NEG_INFINITY,
            existing: None,
            parent: None,
        }
    }
}

/// Incremental search state: feed frames with [`PrefixSearch::step`].
pub struct PrefixSearch<H: SearchHooks> {
    cfg: SearchConfig,
    pub hooks: H,
    beam: Vec<Hypothesis<H::State>>,
    frames: usize,
}

impl<H: SearchHooks> PrefixSearch<H> {
    pub fn new(cfg: SearchConfig, mut hooks: H) -> Result<Self> {
        cfg.validate()?;
        let state = hooks.root()?;
        let score = hooks.joint(0.0, &[], &state);
        Ok(Self {
            cfg,
            hooks,
            beam: vec![Hypothesis {
                prefix: Vec::new(),
                log_pb: 0.0,
                log_pnb: f64::NEG_INFINITY,
                triggers: Vec::new(),
                state,
                score,
            }],
            frames: 0,
        })
    }

    pub fn beam(&self) -> &[Hypothesis<H::State>] {
        &self.beam
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn exhausted(&self) -> Error {
        let best = &self.beam[0];
        Error::BeamExhausted {
            frame: self.frames,
            prefix: best.prefix.clone(),
            triggers: best.triggers.clone(),
        }
    }

    /// Advances by one frame of log-probabilities over blank and labels.
    pub fn step(&mut self, lp: &[f64]) -> Result<()> {
        let t = self.frames;
        let mut next: BTreeMap<Vec<usize>, Entry> = BTreeMap::new();
        for (i, h) in self.beam.iter().enumerate() {
            let e = next.entry(h.prefix.clone()).or_insert_with(Entry::empty);
            e.existing = Some(i);
            e.pb = log_add(e.pb, h.ctc_score() + lp[BLANK]);
            if let Some(&c) = h.prefix.last() {
                e.pnb = log_add(e.pnb, h.log_pnb + lp[c]);
            }
        }
        let mut cands = Vec::new();
        for (i, h) in self.beam.iter().enumerate() {
            let total = h.ctc_score();
            for (c, &lpc) in lp.iter().enumerate().skip(1) {
                let base = if h.prefix.last() == Some(&c) { h.log_pb } else { total };
                let s = base + lpc;
                if s > f64::NEG_INFINITY {
                    cands.push((i, c, s));
                }
            }
        }
        let best_ext = cands.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
        for &(i, c, s) in &cands {
            if s < best_ext - self.cfg.theta1 {
                continue;
            }
            let mut p = self.beam[i].prefix.clone();
            p.push(c);
            let e = next.entry(p).or_insert_with(Entry::empty);
            e.pnb = log_add(e.pnb, s);
            if e.existing.is_none() {
                e.parent = Some((i, c));
            }
        }

        // CTC-pass pruning
        let mut scored: Vec<(f64, Vec<usize>, Entry)> = next
            .into_iter()
            .filter_map(|(p, e)| {
                let ctc = log_add(e.pb, e.pnb);
                (ctc > f64::NEG_INFINITY).then(|| (ctc + self.hooks.ctc_pass_score(&p), p, e))
            })
            .collect();
        let best = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        scored.retain(|s| s.0 >= best - self.cfg.theta2 && s.0 > f64::NEG_INFINITY);
        scored.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        scored.truncate(self.cfg.prune);

        // rescore new prefixes, grouped by parent
        let mut by_parent: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, (_, _, e)) in scored.iter().enumerate() {
            if let (None, Some((i, _))) = (e.existing, e.parent) {
                by_parent.entry(i).or_default().push(k);
            }
        }
        let mut new_states: BTreeMap<usize, H::State> = BTreeMap::new();
        for (&i, ks) in &by_parent {
            let labels: Vec<usize> = ks.iter().map(|&k| scored[k].2.parent.expect("new prefix").1).collect();
            let parent = &self.beam[i];
            let states = self.hooks.extend(&parent.state, &parent.prefix, &labels, t)?;
            for (&k, s) in ks.iter().zip(states) {
                new_states.insert(k, s);
            }
        }
        let mut hyps = Vec::with_capacity(scored.len());
        for (k, (_, prefix, e)) in scored.into_iter().enumerate() {
            let (state, triggers) = match e.existing {
                Some(i) => (self.beam[i].state.clone(), self.beam[i].triggers.clone()),
                None => {
                    let (i, _) = e.parent.expect("new prefix has a parent");
                    let mut tr = self.beam[i].triggers.clone();
                    tr.push(t);
                    (new_states.remove(&k).expect("rescored"), tr)
                }
            };
            let score = self.hooks.joint(log_add(e.pb, e.pnb), &prefix, &state);
            if score > f64::NEG_INFINITY {
                hyps.push(Hypothesis {
                    prefix,
                    log_pb: e.pb,
                    log_pnb: e.pnb,
                    triggers,
                    state,
                    score,
                });
            }
        }
        if hyps.is_empty() {
            return Err(self.exhausted());
        }
        hyps.sort_by(|a, b| rank((a.score, &a.prefix), (b.score, &b.prefix)));
        hyps.truncate(self.cfg.beam);
        self.beam = hyps;
        self.frames += 1;
        Ok(())
    }

    /// Final n-best list ranked by the hooks' final score.
    pub fn finish(&mut self) -> Result<Vec<Hypothesis<H::State>>> {
        let mut out = Vec::with_capacity(self.beam.len());
        for h in &self.beam {
            let score = self.hooks.finalize(h.ctc_score(), &h.prefix, &h.state)?;
            if score > f64::NEG_INFINITY {
                out.push(Hypothesis { score, ..h.clone() });
            }
        }
        if out.is_empty() {
            return Err(self.exhausted());
        }
        out.sort_by(|a, b| rank((a.score, &a.prefix), (b.score, &b.prefix)));
        Ok(out)
    }
}

/// Hooks for pure CTC search: the score is the CTC prefix probability.
#[derive(Debug, Clone, Copy, Default)]
pub struct CtcOnly;

impl SearchHooks for CtcOnly {
    type State = ();

    fn root(&mut self) -> Result<()> {
        Ok(())
    }

    fn extend(&mut self, _: &(), _: &[usize], labels: &[usize], _: usize) -> Result<Vec<()>> {
        Ok(vec![(); labels.len()])
    }

    fn joint(&self, ctc: f64, _: &[usize], _: &()) -> f64 {
        ctc
    }

    fn finalize(&mut self, ctc: f64, _: &[usize], _: &()) -> Result<f64> {
        Ok(ctc)
    }
}

/// Runs a full search over `dist`, returning the n-best list.
pub fn ctc_prefix_beam_search<H: SearchHooks>(
    dist: &CtcDistribution,
    cfg: SearchConfig,
    hooks: H,
) -> Result<Vec<Hypothesis<H::State>>> {
    let mut s = PrefixSearch::new(cfg, hooks)?;
    for t in 0..dist.frames() {
        s.step(dist.row(t))?;
    }
    s.finish()
}
