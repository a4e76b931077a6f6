//! Connectionist temporal classification: likelihood and gradient, Viterbi
//! forced alignment with trigger positions, and frame-synchronous prefix
//! beam search.
//!
//! Index 0 is the blank; labels are `1..=V`.

pub mod search;

use serde::{Deserialize, Serialize};

use crate::numerics::functional::{log_add, log_sum_exp};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};
pub use search::{ctc_prefix_beam_search, CtcOnly, Hypothesis, PrefixSearch, SearchConfig, SearchHooks};

pub const BLANK: usize = 0;

/// Per-frame log-probabilities over blank and labels (`T x (V+1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcDistribution {
    logp: Tensor,
}

impl CtcDistribution {
    /// Rows must log-sum-exp to zero within `1e-9`.
    pub fn new(logp: Tensor) -> Result<Self> {
        if logp.shape().len() != 2 || logp.cols() < 2 {
            return Err(Error::Shape(format!("CTC distribution {:?}", logp.shape())));
        }
        for t in 0..logp.rows() {
            let z = log_sum_exp(logp.row(t));
            if z.abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("frame {t} normalises to {z}")));
            }
        }
        Ok(Self { logp })
    }

    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Self::new(Tensor::from_rows(&logs)?)
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    /// Label count `V` (excluding blank).
    pub fn labels(&self) -> usize {
        self.logp.cols() - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.logp.row(t)
    }

    pub fn logp(&self) -> &Tensor {
        &self.logp
    }
}

/// Frames needed to emit `y`: one per label plus a separating blank between
/// repeated labels.
pub fn min_frames(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(y: &[usize], v: usize) -> Result<()> {
    match y.iter().find(|&&l| l == BLANK || l > v) {
        Some(l) => Err(Error::InvalidArgument(format!("label {l} outside 1..={v}"))),
        None => Ok(()),
    }
}

fn check_feasible(dist: &CtcDistribution, y: &[usize]) -> Result<()> {
    check_labels(y, dist.labels())?;
    let needed = min_frames(y);
    if dist.frames() < needed || (dist.frames() == 0 && y.is_empty()) {
        return Err(Error::CtcInfeasible {
            frames: dist.frames(),
            labels: y.len(),
            needed: needed.max(1),
        });
    }
    Ok(())
}

/// Blank-interleaved label sequence `b y1 b y2 ... yL b`.
fn extended(y: &[usize]) -> Vec<usize> {
    let mut e = Vec::with_capacity(2 * y.len() + 1);
    e.push(BLANK);
    for &l in y {
        e.push(l);
        e.push(BLANK);
    }
    e
}

/// Whether state `s` may be entered directly from `s - 2`.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]` (emission at `t` included).
fn forward(dist: &CtcDistribution, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (dist.frames(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = dist.row(0)[ext[0]];
    if s_len > 1 {
        alpha[0][1] = dist.row(0)[ext[1]];
    }
    for t in 1..t_len {
        let lp = dist.row(t);
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp[ext[s]];
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`: probability of the remaining emissions
/// `t+1..` given state `s` at `t` (emission at `t` excluded).
fn backward(dist: &CtcDistribution, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (dist.frames(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let lp = dist.row(t + 1);
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lp[ext[s]];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lp[ext[s + 1]]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lp[ext[s + 2]]);
            }
            beta[t][s] = b;
        }
    }
    beta
}

fn final_mass(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("nonempty");
    let s = last.len();
    if s > 1 {
        log_add(last[s - 1], last[s - 2])
    } else {
        last[0]
    }
}

/// `log p_ctc(Y | X)` by the forward algorithm. An infeasible target is
/// reported as [`Error::CtcInfeasible`].
pub fn ctc_log_likelihood(dist: &CtcDistribution, y: &[usize]) -> Result<f64> {
    check_feasible(dist, y)?;
    Ok(final_mass(&forward(dist, &extended(y))))
}

/// Log-likelihood and its gradient with respect to every entry of `logp`
/// (the posterior occupancy of each symbol at each frame).
pub fn ctc_log_likelihood_grad(dist: &CtcDistribution, y: &[usize]) -> Result<(f64, Tensor)> {
    check_feasible(dist, y)?;
    let ext = extended(y);
    let alpha = forward(dist, &ext);
    let beta = backward(dist, &ext);
    let ll = final_mass(&alpha);
    let cols = dist.logp.cols();
    let mut grad = vec![0.0; dist.frames() * cols];
    for t in 0..dist.frames() {
        for (s, &k) in ext.iter().enumerate() {
            let a = alpha[t][s] + beta[t][s];
            if a > f64::NEG_INFINITY {
                grad[t * cols + k] += (a - ll).exp();
            }
        }
    }
    Ok((ll, Tensor::raw(vec![dist.frames(), cols], grad)))
}

/// `-log p_ctc(Y | X)` as a graph node over log-probabilities `logp`.
pub fn ctc_loss(g: &mut Graph, logp: Var, y: &[usize]) -> Result<Var> {
    let dist = CtcDistribution {
        logp: g.value(logp).clone(),
    };
    let (ll, grad) = ctc_log_likelihood_grad(&dist, y)?;
    let neg: Vec<f64> = grad.data().iter().map(|v| -v).collect();
    g.external_loss(logp, -ll, Tensor::raw(grad.shape().to_vec(), neg))
}

/// Best CTC path for a known transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Symbol per frame (0 = blank).
    pub path: Vec<usize>,
    /// 0-based frame of the first emission of every label.
    pub triggers: Vec<usize>,
    pub log_prob: f64,
}

/// Viterbi forced alignment. Among equally probable paths the one that
/// advances through the label sequence earliest is chosen.
pub fn ctc_forced_align(dist: &CtcDistribution, y: &[usize]) -> Result<Alignment> {
    check_feasible(dist, y)?;
    let ext = extended(y);
    let (t_len, s_len) = (dist.frames(), ext.len());
    // best[t][s]: best log score of emissions t.. when in state s at t
    let mut best = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    best[t_len - 1][s_len - 1] = dist.row(t_len - 1)[ext[s_len - 1]];
    if s_len > 1 {
        best[t_len - 1][s_len - 2] = dist.row(t_len - 1)[ext[s_len - 2]];
    }
    let successors = |s: usize| {
        let mut v = vec![s];
        if s + 1 < s_len {
            v.push(s + 1);
        }
        if s + 2 < s_len && can_skip(&ext, s + 2) {
            v.push(s + 2);
        }
        v
    };
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let m = successors(s).into_iter().map(|n| best[t + 1][n]).fold(f64::NEG_INFINITY, f64::max);
            if m > f64::NEG_INFINITY {
                best[t][s] = dist.row(t)[ext[s]] + m;
            }
        }
    }
    // greedy trace; `>=` prefers the later state on ties
    let pick = |cands: &[usize], t: usize| {
        let mut arg = cands[0];
        for &c in cands {
            if best[t][c] >= best[t][arg] {
                arg = c;
            }
        }
        arg
    };
    let starts: Vec<usize> = (0..s_len.min(2)).collect();
    let mut s = pick(&starts, 0);
    let log_prob = best[0][s];
    let mut states = vec![s];
    for t in 1..t_len {
        s = pick(&successors(s), t);
        states.push(s);
    }
    let path: Vec<usize> = states.iter().map(|&s| ext[s]).collect();
    let triggers = (0..y.len())
        .map(|l| states.iter().position(|&s| s == 2 * l + 1).expect("valid path visits every label"))
        .collect();
    Ok(Alignment {
        path,
        triggers,
        log_prob,
    })
}

/// Collapse a frame path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Frame-wise argmax path collapsed to labels.
pub fn greedy_decode(dist: &CtcDistribution) -> Vec<usize> {
    let path: Vec<usize> = (0..dist.frames())
        .map(|t| {
            let r = dist.row(t);
            (0..r.len()).fold(0, |a, k| if r[k] > r[a] { k } else { a })
        })
        .collect();
    collapse(&path)
}

#[cfg(test)]
mod tests;
