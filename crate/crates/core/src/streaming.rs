//! Attention plans for restricted (RSA), chunk-based (CSA) and dual
//! causal/non-causal (DCN) self-attention, plus latency arithmetic.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, KvSource, KvSourceTable};
use crate::numerics::functional::{ConvTable, Padding};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PastContext {
    #[default]
    Unlimited,
    Limited(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookaheadSpec {
    pub lookahead: usize,
    #[serde(default)]
    pub past: PastContext,
}

impl LookaheadSpec {
    pub fn new(lookahead: usize) -> Self {
        Self {
            lookahead,
            past: PastContext::Unlimited,
        }
    }

    fn past_ok(&self, t: usize, p: usize) -> bool {
        match self.past {
            PastContext::Unlimited => true,
            PastContext::Limited(n) => p + n >= t,
        }
    }
}

/// Chunk size `C` with a fixed hop of `C / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk: usize,
}

impl ChunkSpec {
    pub fn new(chunk: usize) -> Result<Self> {
        let s = Self { chunk };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 || !self.chunk.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "chunk size must be positive and even, got {}",
                self.chunk
            )));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.chunk / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanKind {
    Full,
    Rsa(LookaheadSpec),
    Csa(ChunkSpec),
    Dcn(LookaheadSpec),
}

impl PlanKind {
    pub fn is_streaming(&self) -> bool {
        !matches!(self, PlanKind::Full)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlanKind::Full => "full",
            PlanKind::Rsa(_) => "rsa",
            PlanKind::Csa(_) => "csa",
            PlanKind::Dcn(_) => "dcn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PlanKind::Csa(c) => c.validate(),
            _ => Ok(()),
        }
    }

    /// Leading encoder frames whose outputs are final once `available`
    /// frontend frames exist, for an encoder of `layers` blocks.
    pub fn stable_frames(&self, layers: usize, available: usize) -> usize {
        match *self {
            PlanKind::Full => 0,
            PlanKind::Rsa(s) => available.saturating_sub(layers * s.lookahead),
            PlanKind::Dcn(s) => available.saturating_sub(s.lookahead),
            // first halves of every complete chunk
            PlanKind::Csa(c) if available >= c.chunk => ((available - c.chunk) / c.hop() + 1) * c.hop(),
            PlanKind::Csa(_) => 0,
        }
    }

    /// Plan for a sequence of `frames` encoder frames.
    pub fn build(&self, frames: usize) -> Result<StreamPlan> {
        if frames == 0 {
            return Err(Error::InvalidArgument("plan needs at least one frame".into()));
        }
        match *self {
            PlanKind::Full => Ok(StreamPlan {
                kind: *self,
                frames,
                layout: Layout::Single(Rc::new(AttentionMask::full(frames, frames))),
            }),
            PlanKind::Rsa(spec) => Ok(StreamPlan {
                kind: *self,
                frames,
                layout: Layout::Single(Rc::new(build_rsa_mask(frames, &spec))),
            }),
            PlanKind::Csa(spec) => build_csa_plan(frames, &spec),
            PlanKind::Dcn(spec) => Ok(build_dcn_plan(frames, &spec)),
        }
    }
}

/// Masks for the two DCN query streams. Source `A` is the non-causal
/// stream and `B` the causal stream in both tables.
#[derive(Debug, Clone)]
pub struct DualLayout {
    pub nc_mask: Rc<AttentionMask>,
    pub nc_sources: Rc<KvSourceTable>,
    pub c_mask: Rc<AttentionMask>,
    pub c_sources: Rc<KvSourceTable>,
}

/// CSA expands the sequence into per-chunk slots: every chunk holds its
/// own copy of its frames. Slots attend to their chunk and to the forwarded
/// slots of all earlier frames.
#[derive(Debug, Clone)]
pub struct ChunkLayout {
    pub spec: ChunkSpec,
    /// Half-open frame range of every chunk.
    pub chunks: Vec<(usize, usize)>,
    pub slot_frame: Vec<usize>,
    pub slot_chunk: Vec<usize>,
    /// Slot forwarded for every frame.
    pub forwarded: Vec<usize>,
    pub mask: Rc<AttentionMask>,
}

impl ChunkLayout {
    pub fn slots(&self) -> usize {
        self.slot_frame.len()
    }

    /// Chunk whose copy of frame `t` is forwarded.
    pub fn forwarding_chunk(&self, t: usize) -> usize {
        self.slot_chunk[self.forwarded[t]]
    }

    /// Frame-level visibility of the forwarded representation of each frame.
    pub fn frame_mask(&self) -> AttentionMask {
        let t = self.forwarded.len();
        AttentionMask::from_fn(t, t, |i, p| p < self.chunks[self.forwarding_chunk(i)].1)
    }

    /// Depthwise-convolution taps over slots: a tap inside the slot's chunk
    /// reads that chunk's copy, an earlier frame reads its forwarded slot and
    /// anything later than the chunk is zero padding.
    pub fn conv_table(&self, k: usize, padding: Padding) -> Result<ConvTable> {
        // rejects even symmetric kernels
        ConvTable::sequential(1, k, padding)?;
        let left = match padding {
            Padding::Causal => k - 1,
            Padding::Symmetric => (k - 1) / 2,
        };
        let mut taps = Vec::with_capacity(self.slots() * k);
        for s in 0..self.slots() {
            let (f, c) = (self.slot_frame[s], self.slot_chunk[s]);
            let (start, end) = self.chunks[c];
            let first = s - (f - start);
            for j in 0..k {
                let src = f as isize + j as isize - left as isize;
                let tap = if src < 0 {
                    None
                } else {
                    let src = src as usize;
                    if src >= end {
                        None
                    } else if src >= start {
                        Some(first + src - start)
                    } else {
                        Some(self.forwarded[src])
                    }
                };
                taps.push(tap);
            }
        }
        Ok(ConvTable {
            rows: self.slots(),
            k,
            taps,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Layout {
    /// One mask shared by every layer.
    Single(Rc<AttentionMask>),
    Dual(DualLayout),
    Chunked(ChunkLayout),
}

#[derive(Debug, Clone)]
pub struct StreamPlan {
    pub kind: PlanKind,
    pub frames: usize,
    pub layout: Layout,
}

/// `allow[t][p] <=> p <= t + L`, optionally with `t - p <= P`.
pub fn build_rsa_mask(frames: usize, spec: &LookaheadSpec) -> AttentionMask {
    AttentionMask::from_fn(frames, frames, |t, p| p <= t + spec.lookahead && spec.past_ok(t, p))
}

pub fn build_dcn_plan(frames: usize, spec: &LookaheadSpec) -> StreamPlan {
    let l = spec.lookahead;
    let nc_mask = build_rsa_mask(frames, spec);
    let nc_sources = KvSourceTable::from_fn(&nc_mask, |t, p| if p <= t { KvSource::A } else { KvSource::B });
    let c_mask = build_rsa_mask(frames, &LookaheadSpec { lookahead: 0, ..*spec });
    let c_sources = KvSourceTable::from_fn(&c_mask, |t, p| if p + l <= t { KvSource::A } else { KvSource::B });
    StreamPlan {
        kind: PlanKind::Dcn(*spec),
        frames,
        layout: Layout::Dual(DualLayout {
            nc_mask: Rc::new(nc_mask),
            nc_sources: Rc::new(nc_sources),
            c_mask: Rc::new(c_mask),
            c_sources: Rc::new(c_sources),
        }),
    }
}

pub fn build_csa_plan(frames: usize, spec: &ChunkSpec) -> Result<StreamPlan> {
    spec.validate()?;
    let (c, h) = (spec.chunk, spec.hop());
    let n_chunks = if frames <= c { 1 } else { (frames - c).div_ceil(h) + 1 };
    let chunks: Vec<(usize, usize)> = (0..n_chunks).map(|i| (i * h, (i * h + c).min(frames))).collect();
    let mut slot_frame = Vec::new();
    let mut slot_chunk = Vec::new();
    let mut first_slot = Vec::with_capacity(n_chunks);
    for (i, &(s, e)) in chunks.iter().enumerate() {
        first_slot.push(slot_frame.len());
        for f in s..e {
            slot_frame.push(f);
            slot_chunk.push(i);
        }
    }
    let forwarded: Vec<usize> = (0..frames)
        .map(|f| {
            let ch = (f / h).min(n_chunks - 1);
            first_slot[ch] + f - chunks[ch].0
        })
        .collect();
    let is_forwarded = {
        let mut v = vec![false; slot_frame.len()];
        forwarded.iter().for_each(|&s| v[s] = true);
        v
    };
    let mask = AttentionMask::from_fn(slot_frame.len(), slot_frame.len(), |q, k| {
        let (ch, kch) = (slot_chunk[q], slot_chunk[k]);
        kch == ch || (is_forwarded[k] && slot_frame[k] < chunks[ch].0)
    });
    Ok(StreamPlan {
        kind: PlanKind::Csa(*spec),
        frames,
        layout: Layout::Chunked(ChunkLayout {
            spec: *spec,
            chunks,
            slot_frame,
            slot_chunk,
            forwarded,
            mask: Rc::new(mask),
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub plan: String,
    pub layers: usize,
    pub frame_ms: f64,
    /// `None` for full-sequence attention (needs the whole utterance).
    pub per_layer_lookahead: Option<Vec<usize>>,
    pub total_frames: Option<usize>,
    pub total_ms: Option<f64>,
    /// CSA only: hop size and worst-case per-frame look-ahead.
    pub hop_frames: Option<usize>,
    pub worst_case_frames: Option<usize>,
    /// Last input frame that can influence each output frame, from composing
    /// the attention masks of all layers (empty when no length is given).
    pub receptive_field: Vec<usize>,
}

impl LatencyReport {
    pub fn summary(&self) -> String {
        match self.total_ms {
            Some(ms) => format!("{ms} ms"),
            None => "whole utterance".to_string(),
        }
    }
}

/// Frame-level delay arithmetic; `frames` (when given) adds the composed
/// receptive-field bound for a sequence of that length.
pub fn compute_latency(kind: &PlanKind, layers: usize, frame_ms: f64, frames: Option<usize>) -> Result<LatencyReport> {
    if layers == 0 {
        return Err(Error::InvalidArgument("latency needs at least one layer".into()));
    }
    if !(frame_ms > 0.0 && frame_ms.is_finite()) {
        return Err(Error::InvalidArgument(format!("frame duration {frame_ms}")));
    }
    kind.validate()?;
    let (per_layer, total, hop, worst) = match kind {
        PlanKind::Full => (None, None, None, None),
        PlanKind::Rsa(s) => (Some(vec![s.lookahead; layers]), Some(layers * s.lookahead), None, None),
        PlanKind::Dcn(s) => (Some(vec![s.lookahead; layers]), Some(s.lookahead), None, None),
        PlanKind::Csa(c) => (
            Some(vec![c.chunk; layers]),
            Some(c.chunk),
            Some(c.hop()),
            Some(c.chunk - 1),
        ),
    };
    let receptive_field = match frames {
        Some(t) => receptive_field(&kind.build(t)?, layers),
        None => Vec::new(),
    };
    Ok(LatencyReport {
        plan: kind.name().to_string(),
        layers,
        frame_ms,
        per_layer_lookahead: per_layer,
        total_frames: total,
        total_ms: total.map(|f| f as f64 * frame_ms),
        hop_frames: hop,
        worst_case_frames: worst,
        receptive_field,
    })
}

/// Delay contributed by the triggered-attention decoder look-ahead.
pub fn decoder_delay_ms(eps_dec: usize, frame_ms: f64) -> f64 {
    eps_dec as f64 * frame_ms
}

fn compose(mask: &AttentionMask, reach: &[usize]) -> Vec<usize> {
    (0..mask.n_q())
        .map(|i| mask.row_keys(i).map(|j| reach[j]).max().unwrap_or(0))
        .collect()
}

/// Upper bound on the last input frame reachable from every output frame.
pub fn receptive_field(plan: &StreamPlan, layers: usize) -> Vec<usize> {
    match &plan.layout {
        Layout::Single(m) => {
            let mut r: Vec<usize> = (0..plan.frames).collect();
            for _ in 0..layers {
                r = compose(m, &r);
            }
            r
        }
        Layout::Dual(d) => {
            let mut nc: Vec<usize> = (0..plan.frames).collect();
            let mut c = nc.clone();
            for _ in 0..layers {
                let pick = |mask: &AttentionMask, src: &KvSourceTable, i: usize, nc: &[usize], c: &[usize]| {
                    mask.row_keys(i)
                        .map(|j| match src.get(i, j) {
                            Some(KvSource::B) => c[j],
                            _ => nc[j],
                        })
                        .max()
                        .unwrap_or(0)
                };
                let n2 = (0..plan.frames).map(|i| pick(&d.nc_mask, &d.nc_sources, i, &nc, &c)).collect();
                let c2 = (0..plan.frames).map(|i| pick(&d.c_mask, &d.c_sources, i, &nc, &c)).collect();
                nc = n2;
                c = c2;
            }
            nc
        }
        Layout::Chunked(ch) => {
            let mut r = ch.slot_frame.clone();
            for _ in 0..layers {
                r = compose(&ch.mask, &r);
            }
            ch.forwarded.iter().map(|&s| r[s]).collect()
        }
    }
}

fn grid(mask: &AttentionMask, cell: impl Fn(usize, usize) -> char) -> Vec<String> {
    (0..mask.n_q())
        .map(|i| (0..mask.n_k()).map(|j| if mask.allowed(i, j) { cell(i, j) } else { '.' }).collect())
        .collect()
}

fn src_char(t: &KvSourceTable, i: usize, j: usize) -> char {
    match t.get(i, j) {
        Some(KvSource::B) => 'C',
        _ => 'N',
    }
}

/// Plain-text rendering: `x` = visible, `.` = masked; DCN grids use `N`/`C`
/// for keys taken from the non-causal/causal stream.
pub fn mask_dump_text(plan: &StreamPlan) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "plan {} frames {}", plan.kind.name(), plan.frames);
    match &plan.layout {
        Layout::Single(m) => {
            for row in grid(m, |_, _| 'x') {
                let _ = writeln!(out, "{row}");
            }
        }
        Layout::Dual(d) => {
            let _ = writeln!(out, "non-causal queries");
            for row in grid(&d.nc_mask, |i, j| src_char(&d.nc_sources, i, j)) {
                let _ = writeln!(out, "{row}");
            }
            let _ = writeln!(out, "causal queries");
            for row in grid(&d.c_mask, |i, j| src_char(&d.c_sources, i, j)) {
                let _ = writeln!(out, "{row}");
            }
        }
        Layout::Chunked(ch) => {
            let spans: Vec<String> = ch.chunks.iter().map(|(s, e)| format!("[{s},{e})")).collect();
            let _ = writeln!(out, "chunks {}", spans.join(" "));
            let fw: Vec<String> = (0..plan.frames).map(|t| format!("{t}:{}", ch.forwarding_chunk(t))).collect();
            let _ = writeln!(out, "forwarded {}", fw.join(" "));
            for row in grid(&ch.frame_mask(), |_, _| 'x') {
                let _ = writeln!(out, "{row}");
            }
        }
    }
    out
}

pub fn mask_dump_json(plan: &StreamPlan) -> serde_json::Value {
    use serde_json::json;
    let cells = |m: &AttentionMask, f: &dyn Fn(usize, usize) -> char| -> Vec<String> { grid(m, f) };
    match &plan.layout {
        Layout::Single(m) => json!({
            "plan": plan.kind.name(),
            "frames": plan.frames,
            "mask": m.to_rows(),
        }),
        Layout::Dual(d) => json!({
            "plan": "dcn",
            "frames": plan.frames,
            "non_causal": {
                "mask": d.nc_mask.to_rows(),
                "sources": cells(&d.nc_mask, &|i, j| src_char(&d.nc_sources, i, j)),
            },
            "causal": {
                "mask": d.c_mask.to_rows(),
                "sources": cells(&d.c_mask, &|i, j| src_char(&d.c_sources, i, j)),
            },
        }),
        Layout::Chunked(ch) => json!({
            "plan": "csa",
            "frames": plan.frames,
            "chunk": ch.spec.chunk,
            "chunks": ch.chunks,
            "forwarded_chunk": (0..plan.frames).map(|t| ch.forwarding_chunk(t)).collect::<Vec<_>>(),
            "frame_mask": ch.frame_mask().to_rows(),
        }),
    }
}
