//! Patch-parallel CLEAR inference over simulated workers.
//!
//! The image is cut into `N` horizontal bands. Each worker owns one band and
//! a replica of every text token. Local attention only needs `ceil(r)` rows of
//! keys and values from each neighbour (the halo), so image-token outputs are
//! exact. Text queries see every image token: each worker computes a partial
//! over `[text; own band]` and the partials are combined either by uniform
//! averaging or by exact log-sum-exp recombination.
//!
//! Workers are threads that share nothing mutable and talk only through typed
//! channel messages. Every send and receive is logged in a [`Ledger`].

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dit::{multihead, multihead_with_lse, ToyDit};
use crate::error::{LabError, Result};
use crate::geometry::TokenGrid;
use crate::mask::MaskPattern;
use crate::report::{Cell, Table};
use crate::tensor::Matrix;
use crate::zoo::AttentionInputs;

/// How long a worker waits for a message before declaring a deadlock.
const RECV_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    grid: TokenGrid,
    radius: f64,
    halo: usize,
    ranges: Vec<Range<usize>>,
}

/// Splits the image rows into `n` contiguous bands, remainder rows going to
/// the last worker.
///
/// With more than one worker every band must be at least `ceil(r)` rows tall,
/// so a halo never spans two neighbours.
pub fn make_plan(grid: TokenGrid, n: usize, r: f64) -> Result<PatchPlan> {
    if n == 0 {
        return Err(LabError::Config("need at least one worker".into()));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(LabError::Config(format!("radius {r} must be positive and finite")));
    }
    let halo = r.ceil() as usize;
    let base = grid.height / n;
    if base == 0 {
        return Err(LabError::Geometry(format!(
            "{} workers for {} image rows",
            n, grid.height
        )));
    }
    if n > 1 && base < halo {
        return Err(LabError::Geometry(format!(
            "patch of {base} rows is smaller than the {halo}-row halo"
        )));
    }
    let ranges = (0..n)
        .map(|w| {
            let end = if w + 1 == n { grid.height } else { (w + 1) * base };
            w * base..end
        })
        .collect();
    Ok(PatchPlan {
        grid,
        radius: r,
        halo,
        ranges,
    })
}

impl PatchPlan {
    pub fn workers(&self) -> usize {
        self.ranges.len()
    }

    pub fn halo(&self) -> usize {
        self.halo
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    /// Image rows owned by worker `w`.
    pub fn rows(&self, w: usize) -> Range<usize> {
        self.ranges[w].clone()
    }

    /// Global token ids of worker `w`'s image rows.
    pub fn image_tokens(&self, w: usize) -> Vec<usize> {
        self.row_tokens(self.rows(w))
    }

    fn row_tokens(&self, rows: Range<usize>) -> Vec<usize> {
        let g = &self.grid;
        let start = g.n_text + rows.start * g.width;
        let end = g.n_text + rows.end * g.width;
        (start..end).collect()
    }

    /// Rows worker `w` sends upward and downward.
    fn halo_out(&self, w: usize) -> (Option<Range<usize>>, Option<Range<usize>>) {
        let r = self.rows(w);
        let up = (w > 0).then(|| r.start..(r.start + self.halo).min(r.end));
        let down = (w + 1 < self.workers()).then(|| r.end.saturating_sub(self.halo).max(r.start)..r.end);
        (up, down)
    }

    /// Keys worker `w` holds after the exchange: text, upper halo, own band,
    /// lower halo, in that order.
    fn key_tokens(&self, w: usize) -> Vec<usize> {
        let mut keys: Vec<usize> = (0..self.grid.n_text).collect();
        if w > 0 {
            keys.extend(self.row_tokens(self.halo_out(w - 1).1.expect("lower halo")));
        }
        keys.extend(self.image_tokens(w));
        if w + 1 < self.workers() {
            keys.extend(self.row_tokens(self.halo_out(w + 1).0.expect("upper halo")));
        }
        keys
    }

    /// Fails if some image query of some worker may attend to a key that is
    /// neither local nor in its halo.
    pub fn check_coverage(&self, allows: impl Fn(usize, usize) -> bool) -> Result<()> {
        let g = &self.grid;
        for w in 0..self.workers() {
            let keys = self.key_tokens(w);
            let mut local = vec![false; g.n_tokens()];
            keys.iter().for_each(|&k| local[k] = true);
            for i in self.image_tokens(w) {
                if let Some(j) = (g.n_text..g.n_tokens()).find(|&j| !local[j] && allows(i, j)) {
                    return Err(LabError::Protocol(format!(
                        "missing halo: worker {w} query {i} needs key {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    HaloKv,
    TextPartial,
    Barrier,
}

impl MsgKind {
    pub fn name(self) -> &'static str {
        match self {
            MsgKind::HaloKv => "halo_kv",
            MsgKind::TextPartial => "text_partial",
            MsgKind::Barrier => "barrier",
        }
    }
}

/// Per-head attention partial of the text queries over one key subset.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPartial {
    /// `n_text × c'`, heads side by side.
    pub out: Matrix,
    /// `n_text × heads` log partition masses.
    pub lse: Matrix,
}

#[derive(Debug, Clone)]
pub enum WorkerMsg {
    HaloKv {
        step: usize,
        layer: usize,
        sender: usize,
        rows: Range<usize>,
        k: Matrix,
        v: Matrix,
    },
    TextPartial {
        step: usize,
        layer: usize,
        sender: usize,
        partial: TextPartial,
    },
    Barrier {
        step: usize,
        layer: usize,
        sender: usize,
    },
}

impl WorkerMsg {
    fn tag(&self) -> (usize, usize, MsgKind, usize) {
        match self {
            WorkerMsg::HaloKv { step, layer, sender, .. } => (*step, *layer, MsgKind::HaloKv, *sender),
            WorkerMsg::TextPartial { step, layer, sender, .. } => {
                (*step, *layer, MsgKind::TextPartial, *sender)
            }
            WorkerMsg::Barrier { step, layer, sender } => (*step, *layer, MsgKind::Barrier, *sender),
        }
    }

    fn token_count(&self, width: usize) -> usize {
        match self {
            WorkerMsg::HaloKv { rows, .. } => rows.len() * width,
            WorkerMsg::TextPartial { partial, .. } => partial.out.rows(),
            WorkerMsg::Barrier { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub step: usize,
    pub layer: usize,
    pub kind: MsgKind,
    pub sender: usize,
    pub receiver: usize,
    pub token_count: usize,
    /// `false` for the send record, `true` for the matching receive.
    pub received: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ledger {
    events: Vec<LedgerEvent>,
}

impl Ledger {
    fn merge(parts: Vec<Vec<LedgerEvent>>) -> Self {
        let mut events: Vec<LedgerEvent> = parts.into_iter().flatten().collect();
        events.sort();
        Ledger { events }
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn sends(&self) -> impl Iterator<Item = &LedgerEvent> {
        self.events.iter().filter(|e| !e.received)
    }

    /// Tokens of `kind` sent from `sender` to `receiver`, summed over steps
    /// and layers.
    pub fn tokens(&self, kind: MsgKind, sender: usize, receiver: usize) -> usize {
        self.sends()
            .filter(|e| e.kind == kind && e.sender == sender && e.receiver == receiver)
            .map(|e| e.token_count)
            .sum()
    }

    pub fn total_tokens(&self, kind: MsgKind) -> usize {
        self.sends().filter(|e| e.kind == kind).map(|e| e.token_count).sum()
    }

    /// Every send has exactly one matching receive and vice versa.
    pub fn is_conserved(&self) -> bool {
        let key = |e: &LedgerEvent| (e.step, e.layer, e.kind, e.sender, e.receiver, e.token_count);
        let mut sent: Vec<_> = self.events.iter().filter(|e| !e.received).map(key).collect();
        let mut got: Vec<_> = self.events.iter().filter(|e| e.received).map(key).collect();
        sent.sort();
        got.sort();
        sent == got
    }

    /// Send records as a `step,layer,sender,receiver,kind,token_count` table.
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["step", "layer", "sender", "receiver", "kind", "token_count"], 5);
        for e in self.sends() {
            t.push(vec![
                e.step.into(),
                e.layer.into(),
                e.sender.into(),
                e.receiver.into(),
                e.kind.name().into(),
                e.token_count.into(),
            ])
            .expect("fixed width");
        }
        t
    }
}

/// One worker's view of the message fabric.
struct Port {
    id: usize,
    width: usize,
    inbox: Receiver<WorkerMsg>,
    peers: Vec<Sender<WorkerMsg>>,
    pending: VecDeque<WorkerMsg>,
    log: Vec<LedgerEvent>,
}

impl Port {
    fn fabric(n: usize, width: usize) -> Vec<Port> {
        let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| channel()).unzip();
        rxs.into_iter()
            .enumerate()
            .map(|(id, inbox)| Port {
                id,
                width,
                inbox,
                peers: txs.clone(),
                pending: VecDeque::new(),
                log: Vec::new(),
            })
            .collect()
    }

    fn record(&mut self, msg: &WorkerMsg, other: usize, received: bool) {
        let (step, layer, kind, sender) = msg.tag();
        let (sender, receiver) = if received { (sender, self.id) } else { (self.id, other) };
        self.log.push(LedgerEvent {
            step,
            layer,
            kind,
            sender,
            receiver,
            token_count: msg.token_count(self.width),
            received,
        });
    }

    fn send(&mut self, to: usize, msg: WorkerMsg) -> Result<()> {
        self.record(&msg, to, false);
        self.peers[to]
            .send(msg)
            .map_err(|_| LabError::Protocol(format!("worker {to} hung up")))
    }

    /// Waits for the message with the given tag, buffering any other
    /// message that belongs to the current or a later phase.
    fn expect(&mut self, step: usize, layer: usize, kind: MsgKind, sender: usize) -> Result<WorkerMsg> {
        let want = (step, layer, kind, sender);
        if let Some(pos) = self.pending.iter().position(|m| m.tag() == want) {
            let msg = self.pending.remove(pos).expect("position is valid");
            self.record(&msg, sender, true);
            return Ok(msg);
        }
        loop {
            let msg = match self.inbox.recv_timeout(RECV_TIMEOUT) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(LabError::Protocol(format!(
                        "deadlock: worker {} waiting for {} from {sender} at step {step} layer {layer}",
                        self.id,
                        kind.name()
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(LabError::Protocol(format!("worker {} lost its peers", self.id)))
                }
            };
            let tag = msg.tag();
            if tag == want {
                self.record(&msg, sender, true);
                return Ok(msg);
            }
            if (tag.0, tag.1) < (step, layer) {
                return Err(LabError::Protocol(format!(
                    "stale {} from worker {} for step {} layer {} at step {step} layer {layer}",
                    tag.2.name(),
                    tag.3,
                    tag.0,
                    tag.1
                )));
            }
            self.pending.push_back(msg);
        }
    }

    fn barrier(&mut self, step: usize, layer: usize) -> Result<()> {
        let (n, me) = (self.peers.len(), self.id);
        for to in (0..n).filter(|&p| p != me) {
            self.send(to, WorkerMsg::Barrier { step, layer, sender: me })?;
        }
        for from in (0..n).filter(|&p| p != me) {
            self.expect(step, layer, MsgKind::Barrier, from)?;
        }
        Ok(())
    }

    /// Swaps boundary K/V rows with both neighbours and returns the full local
    /// key set in [`PatchPlan::key_tokens`] order. `k_img`/`v_img` hold the
    /// worker's own image rows.
    fn exchange_halo(
        &mut self,
        plan: &PatchPlan,
        step: usize,
        layer: usize,
        (k_text, v_text): (&Matrix, &Matrix),
        (k_img, v_img): (&Matrix, &Matrix),
    ) -> Result<(Matrix, Matrix)> {
        let w = self.id;
        let own = plan.rows(w);
        let width = plan.grid.width;
        let local = |rows: &Range<usize>, m: &Matrix| {
            m.slice_rows((rows.start - own.start) * width, (rows.end - own.start) * width)
        };
        let (up, down) = plan.halo_out(w);
        for (to, rows) in [(w.wrapping_sub(1), up), (w + 1, down)] {
            if let Some(rows) = rows {
                let msg = WorkerMsg::HaloKv {
                    step,
                    layer,
                    sender: w,
                    k: local(&rows, k_img),
                    v: local(&rows, v_img),
                    rows,
                };
                self.send(to, msg)?;
            }
        }
        let mut ks = vec![k_text.clone()];
        let mut vs = vec![v_text.clone()];
        let mut below = None;
        if w > 0 {
            let (k, v) = halo_payload(self.expect(step, layer, MsgKind::HaloKv, w - 1)?, plan.halo_out(w - 1).1)?;
            ks.push(k);
            vs.push(v);
        }
        ks.push(k_img.clone());
        vs.push(v_img.clone());
        if w + 1 < plan.workers() {
            below = Some(halo_payload(self.expect(step, layer, MsgKind::HaloKv, w + 1)?, plan.halo_out(w + 1).0)?);
        }
        if let Some((k, v)) = below {
            ks.push(k);
            vs.push(v);
        }
        Ok((
            Matrix::vstack(&ks.iter().collect::<Vec<_>>())?,
            Matrix::vstack(&vs.iter().collect::<Vec<_>>())?,
        ))
    }

    /// Sends this worker's text partial to every peer and returns all
    /// partials in worker order.
    fn exchange_text(&mut self, step: usize, layer: usize, mine: TextPartial) -> Result<Vec<TextPartial>> {
        let (n, me) = (self.peers.len(), self.id);
        for to in (0..n).filter(|&p| p != me) {
            let msg = WorkerMsg::TextPartial {
                step,
                layer,
                sender: me,
                partial: mine.clone(),
            };
            self.send(to, msg)?;
        }
        let mut all = Vec::with_capacity(n);
        for from in 0..n {
            if from == self.id {
                all.push(mine.clone());
            } else {
                match self.expect(step, layer, MsgKind::TextPartial, from)? {
                    WorkerMsg::TextPartial { partial, .. } => all.push(partial),
                    _ => unreachable!("expect matched the kind"),
                }
            }
        }
        Ok(all)
    }
}

fn halo_payload(msg: WorkerMsg, expected: Option<Range<usize>>) -> Result<(Matrix, Matrix)> {
    match msg {
        WorkerMsg::HaloKv { rows, k, v, sender, .. } => {
            if Some(rows.clone()) != expected {
                return Err(LabError::Protocol(format!(
                    "halo from worker {sender} covers rows {rows:?}, expected {expected:?}"
                )));
            }
            Ok((k, v))
        }
        _ => unreachable!("expect matched the kind"),
    }
}

/// How text-query partials are combined across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// Uniform `1/N` average of the per-patch softmax outputs.
    PatchAverage,
    /// Log-sum-exp weighting, equal to dense attention.
    Exact,
}

/// Text-query partials over `[text keys; patch p image keys]`, one per
/// worker of `plan`. `k_img`/`v_img` hold all image tokens in raster order.
#[allow(clippy::too_many_arguments)]
pub fn text_partials(
    plan: &PatchPlan,
    q_text: &Matrix,
    (k_text, v_text): (&Matrix, &Matrix),
    (k_img, v_img): (&Matrix, &Matrix),
    heads: usize,
    scale: f64,
) -> Result<Vec<TextPartial>> {
    let w = plan.grid.width;
    if k_img.rows() != plan.grid.n_image() || v_img.rows() != k_img.rows() {
        return Err(LabError::Shape(format!(
            "{} image keys for {} image tokens",
            k_img.rows(),
            plan.grid.n_image()
        )));
    }
    (0..plan.workers())
        .map(|p| {
            let r = plan.rows(p);
            let k = Matrix::vstack(&[k_text, &k_img.slice_rows(r.start * w, r.end * w)])?;
            let v = Matrix::vstack(&[v_text, &v_img.slice_rows(r.start * w, r.end * w)])?;
            let (out, lse) = multihead_with_lse(q_text, &k, &v, heads, scale, |_, _| true)?;
            Ok(TextPartial { out, lse })
        })
        .collect()
}

/// Uniform average of the partials.
pub fn text_patch_average(partials: &[TextPartial]) -> Result<Matrix> {
    let first = partials
        .first()
        .ok_or_else(|| LabError::Config("no partials to average".into()))?;
    if partials.len() == 1 {
        return Ok(first.out.clone());
    }
    let mut acc = first.out.clone();
    for p in &partials[1..] {
        acc.add_assign(&p.out)?;
    }
    Ok(acc.scale(1.0 / partials.len() as f64))
}

/// Dense text attention rebuilt from the partials.
///
/// Each partial includes the text keys, so their mass is counted `N` times;
/// `text_only` (the partial over text keys alone) removes the `N − 1`
/// duplicates. Pass `None` when there are no text keys.
pub fn exact_text_recombination(partials: &[TextPartial], text_only: Option<&TextPartial>) -> Result<Matrix> {
    let first = partials
        .first()
        .ok_or_else(|| LabError::Config("no partials to combine".into()))?;
    if partials.len() == 1 {
        return Ok(first.out.clone());
    }
    let (rows, cols) = first.out.shape();
    let heads = first.lse.cols();
    let d = cols / heads;
    let dup = (partials.len() - 1) as f64;
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for h in 0..heads {
            let mut m = partials.iter().map(|p| p.lse[(r, h)]).fold(f64::NEG_INFINITY, f64::max);
            if let Some(t) = text_only {
                m = m.max(t.lse[(r, h)]);
            }
            let mut den = 0.0;
            let mut num = vec![0.0; d];
            for p in partials {
                let z = (p.lse[(r, h)] - m).exp();
                den += z;
                for (c, acc) in num.iter_mut().enumerate() {
                    *acc += z * p.out[(r, h * d + c)];
                }
            }
            if let Some(t) = text_only {
                let z = dup * (t.lse[(r, h)] - m).exp();
                den -= z;
                for (c, acc) in num.iter_mut().enumerate() {
                    *acc -= z * t.out[(r, h * d + c)];
                }
            }
            for (c, acc) in num.iter().enumerate() {
                out[(r, h * d + c)] = acc / den;
            }
        }
    }
    Ok(out)
}

fn combine_text(
    mode: TextMode,
    partials: &[TextPartial],
    text_only: impl FnOnce() -> Result<Option<TextPartial>>,
) -> Result<Matrix> {
    match mode {
        TextMode::PatchAverage => text_patch_average(partials),
        TextMode::Exact if partials.len() == 1 => Ok(partials[0].out.clone()),
        TextMode::Exact => exact_text_recombination(partials, text_only()?.as_ref()),
    }
}

fn text_only_partial(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, scale: f64) -> Result<Option<TextPartial>> {
    if k.rows() == 0 {
        return Ok(None);
    }
    let (out, lse) = multihead_with_lse(q, k, v, heads, scale, |_, _| true)?;
    Ok(Some(TextPartial { out, lse }))
}

/// Worker id, image rows out, text partial, ledger events.
type AttnWorkerOut = (usize, Matrix, Matrix, Vec<LedgerEvent>);
/// Worker id, latent rows per step, ledger events.
type SamplerWorkerOut = (usize, Vec<Matrix>, Vec<LedgerEvent>);

/// Output of a distributed single-layer attention call.
#[derive(Debug, Clone)]
pub struct DistributedAttention {
    pub out: Matrix,
    pub ledger: Ledger,
}

/// CLEAR attention of radius `plan.radius()` computed by `plan.workers()`
/// threads. Image rows use halo exchange; text rows use exact
/// recombination of per-worker partials.
pub fn distributed_clear_attention(plan: &PatchPlan, inputs: &AttentionInputs) -> Result<DistributedAttention> {
    let g = plan.grid;
    if inputs.grid != g {
        return Err(LabError::Shape("inputs and plan use different grids".into()));
    }
    if inputs.q.rows() != g.n_tokens() || inputs.k.rows() != g.n_tokens() || inputs.v.rows() != g.n_tokens() {
        return Err(LabError::Shape("distributed attention needs one q/k/v row per token".into()));
    }
    let pattern = MaskPattern::Clear { radius: plan.radius };
    pattern.validate(&g)?;
    plan.check_coverage(|i, j| pattern.allows(&g, i, j))?;
    let nt = g.n_text;
    let ports = Port::fabric(plan.workers(), g.width);
    let results: Vec<Result<AttnWorkerOut>> = std::thread::scope(|s| {
        let handles: Vec<_> = ports
            .into_iter()
            .map(|mut port| {
                let pattern = &pattern;
                s.spawn(move || {
                    let w = port.id;
                    let own = plan.image_tokens(w);
                    let (a, b) = (own[0], own[own.len() - 1] + 1);
                    let q_img = inputs.q.slice_rows(a, b);
                    let k_text = inputs.k.slice_rows(0, nt);
                    let v_text = inputs.v.slice_rows(0, nt);
                    let k_img = inputs.k.slice_rows(a, b);
                    let v_img = inputs.v.slice_rows(a, b);
                    let (k, v) = port.exchange_halo(plan, 0, 0, (&k_text, &v_text), (&k_img, &v_img))?;
                    let keys = plan.key_tokens(w);
                    let img_out = multihead(&q_img, &k, &v, 1, inputs.scale, |i, j| {
                        pattern.allows(&g, own[i], keys[j])
                    })?;
                    let q_text = inputs.q.slice_rows(0, nt);
                    let text_out = if nt == 0 {
                        Matrix::zeros(0, inputs.v.cols())
                    } else {
                        let kk = Matrix::vstack(&[&k_text, &k_img])?;
                        let vv = Matrix::vstack(&[&v_text, &v_img])?;
                        let (out, lse) = multihead_with_lse(&q_text, &kk, &vv, 1, inputs.scale, |_, _| true)?;
                        let all = port.exchange_text(0, 0, TextPartial { out, lse })?;
                        combine_text(TextMode::Exact, &all, || {
                            text_only_partial(&q_text, &k_text, &v_text, 1, inputs.scale)
                        })?
                    };
                    port.barrier(0, 0)?;
                    Ok((w, text_out, img_out, port.log))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
    });
    let mut out = Matrix::zeros(g.n_tokens(), inputs.v.cols());
    let mut logs = Vec::new();
    for r in results {
        let (w, text, img, log) = r?;
        if w == 0 {
            for i in 0..nt {
                out.row_mut(i).copy_from_slice(text.row(i));
            }
        }
        for (li, tok) in plan.image_tokens(w).into_iter().enumerate() {
            out.row_mut(tok).copy_from_slice(img.row(li));
        }
        logs.push(log);
    }
    Ok(DistributedAttention {
        out,
        ledger: Ledger::merge(logs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    /// Halo rows only.
    Clear,
    /// Every worker replicates every image K/V row.
    FullSync,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    /// Image tokens per adjacent directed pair and layer under the chosen mode.
    pub tokens_per_pair: usize,
    /// CLEAR traffic over full-sync traffic, capped at 1.
    pub ratio: f64,
}

/// Image K/V traffic per adjacent directed pair for a radius-`r` window.
pub fn comm_cost(grid: &TokenGrid, r: f64, mode: CommMode) -> CommReport {
    let full = grid.height * grid.width;
    let clear = (r.ceil() as usize).min(grid.height) * grid.width;
    let ratio = if full == 0 { 0.0 } else { (clear as f64 / full as f64).min(1.0) };
    let tokens_per_pair = match mode {
        CommMode::Clear => clear,
        CommMode::FullSync => full,
    };
    CommReport { tokens_per_pair, ratio }
}

pub fn comm_report(plan: &PatchPlan, mode: CommMode) -> CommReport {
    comm_cost(&plan.grid, plan.radius, mode)
}

/// Latent trajectory of a (possibly distributed) Euler sampler.
#[derive(Debug, Clone)]
pub struct InferenceRun {
    /// Image latents after each sampler step.
    pub trajectory: Vec<Matrix>,
    pub ledger: Ledger,
}

impl InferenceRun {
    pub fn final_latent(&self) -> &Matrix {
        self.trajectory.last().expect("at least one step")
    }
}

/// Single-worker Euler sampling from `t = 1` to `t = 0`, keeping every step.
pub fn reference_inference(model: &ToyDit, z_1: &Matrix, y: &Matrix, steps: usize) -> Result<Vec<Matrix>> {
    if steps == 0 {
        return Err(LabError::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_1.clone();
    let mut traj = Vec::with_capacity(steps);
    for s in 0..steps {
        let t = 1.0 - s as f64 * dt;
        let v = model.forward(&z, t, y)?.pred;
        z = z.zip_map(&v, |a, b| a - dt * b)?;
        traj.push(z.clone());
    }
    Ok(traj)
}

/// Runs the sampler with the student split across `plan.workers()` threads.
///
/// Every layer exchanges halos, then text partials, then a barrier. With
/// [`TextMode::Exact`] the result matches [`reference_inference`] up to
/// rounding; with `N = 1` it is bit-identical.
pub fn simulate_inference(
    plan: &PatchPlan,
    model: &ToyDit,
    z_1: &Matrix,
    y: &Matrix,
    steps: usize,
    mode: TextMode,
) -> Result<InferenceRun> {
    let g = model.grid();
    if *plan.grid() != g {
        return Err(LabError::Shape("plan and model use different grids".into()));
    }
    if steps == 0 {
        return Err(LabError::Config("sampler needs at least one step".into()));
    }
    model.embed(z_1, y)?;
    for (b, p) in model.mask_patterns().iter().enumerate() {
        if !matches!(p, MaskPattern::Clear { .. }) {
            return Err(LabError::Config(format!(
                "layer {b} uses {} attention; patch-parallel inference needs CLEAR masks",
                p.name()
            )));
        }
        plan.check_coverage(|i, j| model.allows(b, i, j))?;
    }
    let cfg = model.config();
    let (nt, heads, scale) = (g.n_text, cfg.heads, model.attn_scale());
    let ports = Port::fabric(plan.workers(), g.width);
    let results: Vec<Result<SamplerWorkerOut>> = std::thread::scope(|s| {
        let handles: Vec<_> = ports
            .into_iter()
            .map(|mut port| {
                s.spawn(move || {
                    let w = port.id;
                    let own = plan.image_tokens(w);
                    let local: Vec<usize> = (0..nt).chain(own.iter().copied()).collect();
                    let rope = model.rope_table().select_rows(&local);
                    let keys = plan.key_tokens(w);
                    let mut z = z_1.slice_rows(own[0] - nt, own[own.len() - 1] + 1 - nt);
                    let dt = 1.0 / steps as f64;
                    let mut traj = Vec::with_capacity(steps);
                    for step in 0..steps {
                        let t = 1.0 - step as f64 * dt;
                        let temb = model.time_embedding(t)?;
                        let mut x = model.embed_rows(&z, y)?;
                        for b in 0..cfg.blocks {
                            let qkv = model.block_qkv(b, &x, &temb, &rope)?;
                            let split = |m: &Matrix| (m.slice_rows(0, nt), m.slice_rows(nt, m.rows()));
                            let (q_text, q_img) = split(&qkv.q);
                            let (k_text, k_img) = split(&qkv.k);
                            let (v_text, v_img) = split(&qkv.v);
                            let (k, v) = port.exchange_halo(plan, step, b, (&k_text, &v_text), (&k_img, &v_img))?;
                            let img_out = multihead(&q_img, &k, &v, heads, scale, |i, j| {
                                model.allows(b, own[i], keys[j])
                            })?;
                            let text_out = if nt == 0 {
                                Matrix::zeros(0, cfg.dim)
                            } else {
                                let kk = Matrix::vstack(&[&k_text, &k_img])?;
                                let vv = Matrix::vstack(&[&v_text, &v_img])?;
                                let (out, lse) = multihead_with_lse(&q_text, &kk, &vv, heads, scale, |_, _| true)?;
                                let all = port.exchange_text(step, b, TextPartial { out, lse })?;
                                combine_text(mode, &all, || text_only_partial(&q_text, &k_text, &v_text, heads, scale))?
                            };
                            let o = Matrix::vstack(&[&text_out, &img_out])?;
                            x = model.block_finish(b, &qkv.u, &o)?.0;
                            port.barrier(step, b)?;
                        }
                        let v = model.project_out(&x.slice_rows(nt, x.rows()))?;
                        z = z.zip_map(&v, |a, b| a - dt * b)?;
                        traj.push(z.clone());
                    }
                    Ok((w, traj, port.log))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
    });
    let mut trajectory = vec![Matrix::zeros(g.n_image(), cfg.in_dim); steps];
    let mut logs = Vec::new();
    for r in results {
        let (w, traj, log) = r?;
        let start = plan.rows(w).start * g.width;
        for (s, z) in traj.iter().enumerate() {
            for i in 0..z.rows() {
                trajectory[s].row_mut(start + i).copy_from_slice(z.row(i));
            }
        }
        logs.push(log);
    }
    Ok(InferenceRun {
        trajectory,
        ledger: Ledger::merge(logs),
    })
}

/// Per-step `step,max_abs_gap,mean_abs_gap` between two trajectories.
pub fn divergence_table(reference: &[Matrix], run: &[Matrix]) -> Result<Table> {
    if reference.len() != run.len() {
        return Err(LabError::Shape(format!(
            "trajectories of {} and {} steps",
            reference.len(),
            run.len()
        )));
    }
    let mut t = Table::new(&["step", "max_abs_gap", "mean_abs_gap"], 1);
    for (s, (a, b)) in reference.iter().zip(run).enumerate() {
        let d = a.sub(b)?;
        let mean = d.as_slice().iter().map(|v| v.abs()).sum::<f64>() / d.as_slice().len().max(1) as f64;
        t.push(vec![s.into(), d.max_abs().into(), Cell::Float(mean)])?;
    }
    Ok(t)
}
