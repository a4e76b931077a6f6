//! Scaled dot-product and multi-head attention over arbitrary boolean masks,
//! with optional relative-position terms and dual-source key/value tables.

pub(crate) mod kernel;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::numerics::functional::{sinusoid, softmax_unchecked};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::Linear;
use crate::numerics::params::{Init, ParamId, ParamStore};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::{dot, Tensor};
use crate::{Error, Result};
use kernel::{AttnOp, RelTerms};

/// `allow[i][j]` is true when key `j` is visible to query `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n_q: usize, n_k: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                allow.push(f(i, j));
            }
        }
        Self { n_q, n_k, allow }
    }

    pub fn full(n_q: usize, n_k: usize) -> Self {
        Self::from_fn(n_q, n_k, |_, _| true)
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n_k + j]
    }

    pub fn row_keys(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_k).filter(move |&j| self.allowed(i, j))
    }

    /// Fails on the first query row without any visible key.
    pub fn validate(&self) -> Result<()> {
        match (0..self.n_q).find(|&i| self.row_keys(i).next().is_none()) {
            Some(i) => Err(Error::MaskedRow(i)),
            None => Ok(()),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.allow.chunks(self.n_k.max(1)).map(<[bool]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvSource {
    A,
    B,
}

/// Which of two streams supplies the key/value for each visible
/// `(query, key)` pair. Entries are `None` exactly where the mask blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvSourceTable {
    n_q: usize,
    n_k: usize,
    src: Vec<Option<KvSource>>,
}

impl KvSourceTable {
    pub fn from_fn(mask: &AttentionMask, f: impl Fn(usize, usize) -> KvSource) -> Self {
        let mut src = Vec::with_capacity(mask.n_q * mask.n_k);
        for i in 0..mask.n_q {
            for j in 0..mask.n_k {
                src.push(mask.allowed(i, j).then(|| f(i, j)));
            }
        }
        Self {
            n_q: mask.n_q,
            n_k: mask.n_k,
            src,
        }
    }

    pub fn uniform(mask: &AttentionMask, s: KvSource) -> Self {
        Self::from_fn(mask, |_, _| s)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<KvSource> {
        self.src[i * self.n_k + j]
    }

    pub fn matches(&self, mask: &AttentionMask) -> bool {
        self.n_q == mask.n_q
            && self.n_k == mask.n_k
            && (0..self.n_q).all(|i| (0..self.n_k).all(|j| self.get(i, j).is_some() == mask.allowed(i, j)))
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` with masked keys excluded.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention Q{:?} K{:?} V{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.n_q != q.rows() || mask.n_k != k.rows() {
        return Err(Error::Shape("attention mask shape".into()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = v.cols();
    let mut out = Vec::with_capacity(q.rows() * dv);
    for i in 0..q.rows() {
        let keys: Vec<usize> = mask.row_keys(i).collect();
        if keys.is_empty() {
            return Err(Error::MaskedRow(i));
        }
        let logits: Vec<f64> = keys.iter().map(|&j| dot(q.row(i), k.row(j)) * scale).collect();
        let p = softmax_unchecked(&logits);
        let mut row = vec![0.0; dv];
        for (w, &j) in p.iter().zip(&keys) {
            for (o, x) in row.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
        out.extend(row);
    }
    Tensor::matrix(q.rows(), dv, out)
}

/// Projections of one multi-head attention layer. Head `i` uses columns
/// `i*d_k..(i+1)*d_k` of `wq`, `wk`, `wv` and the matching rows of `wo`.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: RngStream) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let lin = |store: &mut ParamStore, n: &str| {
            Linear::new(store, &format!("{name}.{n}"), d_model, d_model, false, rng).map(|l| l.w)
        };
        Ok(Self {
            wq: lin(store, "wq")?,
            wk: lin(store, "wk")?,
            wv: lin(store, "wv")?,
            wo: lin(store, "wo")?,
            heads,
            d_model,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// Relative-position attention parameters: the plain projections plus the
/// position projection and the two global bias vectors.
#[derive(Debug, Clone)]
pub struct RelMhaParams {
    pub mha: MhaParams,
    pub w_pos: ParamId,
    pub bias_u: ParamId,
    pub bias_v: ParamId,
}

impl RelMhaParams {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: RngStream) -> Result<Self> {
        let mha = MhaParams::new(store, name, d_model, heads, rng)?;
        Ok(Self {
            mha,
            w_pos: Linear::new(store, &format!("{name}.wpos"), d_model, d_model, false, rng)?.w,
            bias_u: store.init(&format!("{name}.bias_u"), &[1, d_model], Init::Zeros, rng)?,
            bias_v: store.init(&format!("{name}.bias_v"), &[1, d_model], Init::Zeros, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.mha.params();
        v.extend([self.w_pos, self.bias_u, self.bias_v]);
        v
    }
}

/// A second key/value input stream plus the table choosing between streams.
pub struct DualSource<'a> {
    pub x_k: Var,
    pub x_v: Var,
    pub table: &'a Rc<KvSourceTable>,
}

fn project(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    g.matmul(x, w)
}

fn check_heads(p: &MhaParams, g: &Graph, x: Var) -> Result<()> {
    let d = g.value(x).cols();
    if p.heads == 0 || !d.is_multiple_of(p.heads) || d != p.d_model {
        return Err(Error::Shape(format!("input width {d} for d_model {} / {} heads", p.d_model, p.heads)));
    }
    Ok(())
}

/// `MHA(x_q, x_k, x_v) = Concat(head_1..head_h) W^H`. With `dual`, the key
/// and value at position `j` seen by query `i` come from the stream named by
/// the source table (`A` = `x_k`/`x_v`, `B` = the dual inputs).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &MhaParams,
    x_q: Var,
    x_k: Var,
    x_v: Var,
    mask: &Rc<AttentionMask>,
    dual: Option<DualSource<'_>>,
) -> Result<Var> {
    check_heads(p, g, x_q)?;
    let q = project(g, store, x_q, p.wq)?;
    let k = project(g, store, x_k, p.wk)?;
    let v = project(g, store, x_v, p.wv)?;
    let mut op = AttnOp::new(q, k, v, mask.clone(), p.heads);
    if let Some(ds) = dual {
        let k2 = project(g, store, ds.x_k, p.wk)?;
        let v2 = project(g, store, ds.x_v, p.wv)?;
        op.second = Some((k2, v2));
        op.sources = Some(ds.table.clone());
    }
    let heads = g.attention(op)?;
    project(g, store, heads, p.wo)
}

/// Frame positions of queries and keys for relative attention.
#[derive(Debug, Clone)]
pub struct Positions {
    pub query: Rc<Vec<usize>>,
    pub key: Rc<Vec<usize>>,
}

impl Positions {
    pub fn sequential(n: usize) -> Self {
        let p = Rc::new((0..n).collect::<Vec<_>>());
        Self { query: p.clone(), key: p }
    }
}

/// Sinusoidal encodings of the relative offsets `-max_key..=max_query`;
/// row `r` encodes offset `r - max_key`.
pub fn relative_table(max_query: usize, max_key: usize, d: usize) -> Tensor {
    let rows = max_query + max_key + 1;
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        data.extend(sinusoid(r as f64 - max_key as f64, d));
    }
    Tensor::raw(vec![rows, d], data)
}

/// Self-attention with relative positional encoding: logits are
/// `((q_i + u)·k_j + (q_i + v)·r_{i-j}) / sqrt(d_k)` where `r` is the
/// projected sinusoidal encoding of the offset.
pub fn relative_mha(
    g: &mut Graph,
    store: &ParamStore,
    p: &RelMhaParams,
    x: Var,
    mask: &Rc<AttentionMask>,
    positions: &Positions,
) -> Result<Var> {
    relative_mha_dual(g, store, p, x, x, mask, positions, None)
}

/// Relative-position attention with queries from `x_q`, keys/values from
/// `x_kv` (source `A`) and optionally a second key/value stream.
#[allow(clippy::too_many_arguments)]
pub fn relative_mha_dual(
    g: &mut Graph,
    store: &ParamStore,
    p: &RelMhaParams,
    x_q: Var,
    x_kv: Var,
    mask: &Rc<AttentionMask>,
    positions: &Positions,
    dual: Option<DualSource<'_>>,
) -> Result<Var> {
    check_heads(&p.mha, g, x_q)?;
    let max_q = positions.query.iter().copied().max().unwrap_or(0);
    let max_k = positions.key.iter().copied().max().unwrap_or(0);
    let table = g.input(relative_table(max_q, max_k, p.mha.d_model));
    let pos = project(g, store, table, p.w_pos)?;
    let q = project(g, store, x_q, p.mha.wq)?;
    let k = project(g, store, x_kv, p.mha.wk)?;
    let v = project(g, store, x_kv, p.mha.wv)?;
    let mut op = AttnOp::new(q, k, v, mask.clone(), p.mha.heads);
    op.rel = Some(RelTerms {
        pos,
        u: g.param(store, p.bias_u),
        v: g.param(store, p.bias_v),
        q_pos: positions.query.clone(),
        k_pos: positions.key.clone(),
        base: max_k,
    });
    if let Some(ds) = dual {
        let k2 = project(g, store, ds.x_k, p.mha.wk)?;
        let v2 = project(g, store, ds.x_v, p.mha.wv)?;
        op.second = Some((k2, v2));
        op.sources = Some(ds.table.clone());
    }
    let heads = g.attention(op)?;
    project(g, store, heads, p.mha.wo)
}
