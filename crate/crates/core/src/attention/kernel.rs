//! Fused multi-head attention kernel used by the graph.
//!
//! One kernel covers plain, relative-position and dual-source attention.
//! Masked keys are skipped outright, so the output for a query row never
//! reads a masked key or value row.

use std::rc::Rc;

use super::{AttentionMask, KvSource, KvSourceTable};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{dot, Tensor};
use crate::{Error, Result};

/// Relative-position terms: `(q + u)·k + (q + v)·p[r]` with
/// `r = q_pos[i] + base - k_pos[j]`.
#[derive(Debug, Clone)]
pub(crate) struct RelTerms {
    pub pos: Var,
    pub u: Var,
    pub v: Var,
    pub q_pos: Rc<Vec<usize>>,
    pub k_pos: Rc<Vec<usize>>,
    pub base: usize,
}

#[derive(Debug)]
pub(crate) struct AttnOp {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Key/value projections of the second stream (source `B`).
    pub second: Option<(Var, Var)>,
    pub sources: Option<Rc<KvSourceTable>>,
    pub rel: Option<RelTerms>,
    pub mask: Rc<AttentionMask>,
    pub heads: usize,
    // filled by the forward pass
    pub(crate) keys: Vec<Vec<usize>>,
    pub(crate) row_offset: Vec<usize>,
    pub(crate) probs: Vec<f64>,
}

impl AttnOp {
    pub fn new(q: Var, k: Var, v: Var, mask: Rc<AttentionMask>, heads: usize) -> Self {
        Self {
            q,
            k,
            v,
            second: None,
            sources: None,
            rel: None,
            mask,
            heads,
            keys: Vec::new(),
            row_offset: Vec::new(),
            probs: Vec::new(),
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.q, self.k, self.v];
        if let Some((k2, v2)) = self.second {
            v.extend([k2, v2]);
        }
        if let Some(r) = &self.rel {
            v.extend([r.pos, r.u, r.v]);
        }
        v
    }

    fn source(&self, i: usize, j: usize) -> KvSource {
        match &self.sources {
            Some(t) => t.get(i, j).unwrap_or(KvSource::A),
            None => KvSource::A,
        }
    }
}

fn kv_rows<'a>(g: &'a Graph, op: &AttnOp, src: KvSource) -> (&'a Tensor, &'a Tensor) {
    match (src, op.second) {
        (KvSource::B, Some((k2, v2))) => (g.value(k2), g.value(v2)),
        _ => (g.value(op.k), g.value(op.v)),
    }
}

pub(crate) fn attention_forward(g: &Graph, mut op: AttnOp) -> Result<(Tensor, AttnOp)> {
    let q = g.value(op.q);
    let (nq, d) = (q.rows(), q.cols());
    let nk = g.value(op.k).rows();
    if op.heads == 0 || d % op.heads != 0 {
        return Err(Error::Shape(format!("d_model {d} not divisible by {} heads", op.heads)));
    }
    if op.mask.n_q() != nq || op.mask.n_k() != nk {
        return Err(Error::Shape(format!(
            "mask {}x{} for {nq} queries and {nk} keys",
            op.mask.n_q(),
            op.mask.n_k()
        )));
    }
    for t in [op.k, op.v] {
        if g.value(t).cols() != d || g.value(t).rows() != nk {
            return Err(Error::Shape("key/value shape".into()));
        }
    }
    if let Some((k2, v2)) = op.second {
        for t in [k2, v2] {
            if g.value(t).cols() != d || g.value(t).rows() != nk {
                return Err(Error::Shape("second stream key/value shape".into()));
            }
        }
    }
    if op.sources.is_some() && op.second.is_none() {
        return Err(Error::InvalidArgument("source table without a second stream".into()));
    }
    let dk = d / op.heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut keys = Vec::with_capacity(nq);
    let mut row_offset = Vec::with_capacity(nq + 1);
    let mut total = 0;
    for i in 0..nq {
        let ks: Vec<usize> = op.mask.row_keys(i).collect();
        if ks.is_empty() {
            return Err(Error::MaskedRow(i));
        }
        row_offset.push(total);
        total += ks.len();
        keys.push(ks);
    }
    row_offset.push(total);

    let rel = op.rel.as_ref().map(|r| (g.value(r.pos), g.value(r.u).data(), g.value(r.v).data(), r));
    if let Some((pos, _, _, r)) = &rel {
        if pos.cols() != d || r.q_pos.len() != nq || r.k_pos.len() != nk {
            return Err(Error::Shape("relative position table".into()));
        }
    }

    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; op.heads * total];
    let mut logits = Vec::new();
    let mut qu = vec![0.0; dk];
    let mut qv = vec![0.0; dk];
    for h in 0..op.heads {
        let cs = h * dk..(h + 1) * dk;
        for i in 0..nq {
            let qi = &q.row(i)[cs.clone()];
            if let Some((_, u, v, _)) = &rel {
                for c in 0..dk {
                    qu[c] = qi[c] + u[h * dk + c];
                    qv[c] = qi[c] + v[h * dk + c];
                }
            }
            logits.clear();
            for &j in &keys[i] {
                let (kt, _) = kv_rows(g, &op, op.source(i, j));
                let kj = &kt.row(j)[cs.clone()];
                let s = match &rel {
                    Some((pos, _, _, r)) => {
                        let ridx = r.q_pos[i] + r.base - r.k_pos[j];
                        dot(&qu, kj) + dot(&qv, &pos.row(ridx)[cs.clone()])
                    }
                    None => dot(qi, kj),
                };
                logits.push(s * scale);
            }
            let p = crate::numerics::functional::softmax_unchecked(&logits);
            let orow = &mut out[i * d + h * dk..i * d + (h + 1) * dk];
            for (n, &j) in keys[i].iter().enumerate() {
                let (_, vt) = kv_rows(g, &op, op.source(i, j));
                let vj = &vt.row(j)[cs.clone()];
                for c in 0..dk {
                    orow[c] += p[n] * vj[c];
                }
                probs[h * total + row_offset[i] + n] = p[n];
            }
        }
    }
    op.keys = keys;
    op.row_offset = row_offset;
    op.probs = probs;
    Ok((Tensor::raw(vec![nq, d], out), op))
}

pub(crate) fn attention_backward(g: &Graph, op: &AttnOp, dout: &Tensor) -> Vec<(Var, Tensor)> {
    let q = g.value(op.q);
    let (nq, d) = (q.rows(), q.cols());
    let dk = d / op.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let total = *op.row_offset.last().unwrap_or(&0);
    let zeros = |v: Var| vec![0.0; g.value(v).len()];

    let mut dq = vec![0.0; nq * d];
    let mut dk_a = zeros(op.k);
    let mut dv_a = zeros(op.v);
    let (mut dk_b, mut dv_b) = match op.second {
        Some((k2, v2)) => (zeros(k2), zeros(v2)),
        None => (Vec::new(), Vec::new()),
    };
    let rel = op.rel.as_ref().map(|r| (g.value(r.pos), g.value(r.u).data(), g.value(r.v).data(), r));
    let (mut dpos, mut du, mut dvb) = match &op.rel {
        Some(r) => (zeros(r.pos), vec![0.0; d], vec![0.0; d]),
        None => (Vec::new(), Vec::new(), Vec::new()),
    };

    let mut da = Vec::new();
    for h in 0..op.heads {
        let cs = h * dk..(h + 1) * dk;
        for i in 0..nq {
            let go = &dout.row(i)[cs.clone()];
            let p = &op.probs[h * total + op.row_offset[i]..h * total + op.row_offset[i + 1]];
            da.clear();
            for (n, &j) in op.keys[i].iter().enumerate() {
                let src = op.source(i, j);
                let (_, vt) = kv_rows(g, op, src);
                da.push(dot(go, &vt.row(j)[cs.clone()]));
                let dv = if src == KvSource::B && op.second.is_some() { &mut dv_b } else { &mut dv_a };
                for c in 0..dk {
                    dv[j * d + h * dk + c] += p[n] * go[c];
                }
            }
            let mean: f64 = p.iter().zip(&da).map(|(a, b)| a * b).sum();
            let qi = &q.row(i)[cs.clone()];
            for (n, &j) in op.keys[i].iter().enumerate() {
                let ds = p[n] * (da[n] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                let src = op.source(i, j);
                let (kt, _) = kv_rows(g, op, src);
                let kj = &kt.row(j)[cs.clone()];
                let dkt = if src == KvSource::B && op.second.is_some() { &mut dk_b } else { &mut dk_a };
                match &rel {
                    Some((pos, u, v, r)) => {
                        let ridx = r.q_pos[i] + r.base - r.k_pos[j];
                        let pr = &pos.row(ridx)[cs.clone()];
                        for c in 0..dk {
                            let col = h * dk + c;
                            dq[i * d + col] += ds * (kj[c] + pr[c]);
                            du[col] += ds * kj[c];
                            dvb[col] += ds * pr[c];
                            dkt[j * d + col] += ds * (qi[c] + u[col]);
                            dpos[ridx * d + col] += ds * (qi[c] + v[col]);
                        }
                    }
                    None => {
                        for c in 0..dk {
                            dq[i * d + h * dk + c] += ds * kj[c];
                            dkt[j * d + h * dk + c] += ds * qi[c];
                        }
                    }
                }
            }
        }
    }

    let shape = |v: Var| g.value(v).shape().to_vec();
    let mut res = vec![
        (op.q, Tensor::raw(shape(op.q), dq)),
        (op.k, Tensor::raw(shape(op.k), dk_a)),
        (op.v, Tensor::raw(shape(op.v), dv_a)),
    ];
    if let Some((k2, v2)) = op.second {
        res.push((k2, Tensor::raw(shape(k2), dk_b)));
        res.push((v2, Tensor::raw(shape(v2), dv_b)));
    }
    if let Some(r) = &op.rel {
        res.push((r.pos, Tensor::raw(shape(r.pos), dpos)));
        res.push((r.u, Tensor::raw(shape(r.u), du)));
        res.push((r.v, Tensor::raw(shape(r.v), dvb)));
    }
    res
}
