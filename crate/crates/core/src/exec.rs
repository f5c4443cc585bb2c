//! Tiled execution against simulated L1/L2 scratchpads.
//!
//! The executor walks each node's tile plan, moving data between a byte
//! addressed L2 image and typed L1 buffers. Every access is checked against
//! the live allocation maps, so a plan that reads freed or foreign memory
//! traps instead of producing a plausible answer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use crate::fxp::{Acc32, Q412};
use crate::kernels::{Fixed, Prediction, RawOutputs, Tensor3};
use crate::l2plan::{self, l2_program, Action, BufKind, L2AllocPlan, L2Config};
use crate::net::{NetworkGraph, WeightStore, ELEM_BYTES};
use crate::tiler::{self, build_nodes, Direction, NodeKernel, NodeOp, Step, Stream, TilePlan, TileSchedule};
use crate::{Error, Result};

/// Shared L1 scratchpad size.
pub const L1_BYTES: usize = 64 * 1024;
pub const L2_BYTES: usize = l2plan::L2_BYTES;

/// What a transfer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransferTag {
    Frame,
    Weights,
    Input(usize),
    Output,
}

impl TransferTag {
    pub fn name(self) -> &'static str {
        match self {
            TransferTag::Frame => "frame",
            TransferTag::Weights => "weights",
            TransferTag::Input(0) => "in0",
            TransferTag::Input(_) => "in1",
            TransferTag::Output => "out",
        }
    }
}

impl From<Stream> for TransferTag {
    fn from(s: Stream) -> Self {
        match s {
            Stream::Input(i) => TransferTag::Input(i),
            Stream::Weights => TransferTag::Weights,
            Stream::Output => TransferTag::Output,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferRecord {
    pub dir: Direction,
    pub tag: TransferTag,
    pub bytes: usize,
}

#[derive(Clone, Debug)]
struct L2Region {
    addr: usize,
    bytes: usize,
    name: String,
}

#[derive(Clone, Debug)]
enum L1Data {
    Elems(Vec<Q412>),
    Acc(Vec<Acc32>),
}

#[derive(Clone, Debug)]
struct L1Region {
    name: String,
    bytes: usize,
    live: bool,
    data: Option<L1Data>,
}

/// Simulated L1 and L2 with allocation maps and a transfer log. L3 is
/// unbounded and never materialized: weights are read from the store.
#[derive(Clone, Debug)]
pub struct MemSim {
    pub l1_capacity: usize,
    pub l2_capacity: usize,
    l2: Vec<Q412>,
    l2_regions: Vec<L2Region>,
    l2_used: usize,
    l2_peak: usize,
    l1: Vec<L1Region>,
    l1_used: usize,
    l1_peak: usize,
    log: Vec<TransferRecord>,
}

impl Default for MemSim {
    fn default() -> Self {
        Self::new(L1_BYTES, L2_BYTES)
    }
}

impl MemSim {
    pub fn new(l1_capacity: usize, l2_capacity: usize) -> Self {
        MemSim {
            l1_capacity,
            l2_capacity,
            l2: vec![Q412::ZERO; l2_capacity / ELEM_BYTES],
            l2_regions: Vec::new(),
            l2_used: 0,
            l2_peak: 0,
            l1: Vec::new(),
            l1_used: 0,
            l1_peak: 0,
            log: Vec::new(),
        }
    }

    /// Drops every allocation, the log and the peaks; capacities are kept.
    pub fn reset(&mut self) {
        *self = Self::new(self.l1_capacity, self.l2_capacity);
    }

    pub fn l1_used(&self) -> usize {
        self.l1_used
    }

    pub fn l2_used(&self) -> usize {
        self.l2_used
    }

    pub fn l1_peak(&self) -> usize {
        self.l1_peak
    }

    pub fn l2_peak(&self) -> usize {
        self.l2_peak
    }

    pub fn transfers(&self) -> &[TransferRecord] {
        &self.log
    }

    /// Names and extents of the live L2 allocations, by address.
    pub fn l2_live(&self) -> Vec<(String, Range<usize>)> {
        let mut v: Vec<_> = self.l2_regions.iter().map(|r| (r.name.clone(), r.addr..r.addr + r.bytes)).collect();
        v.sort_by_key(|(_, r)| r.start);
        v
    }

    pub fn log_transfer(&mut self, dir: Direction, tag: TransferTag, bytes: usize) {
        self.log.push(TransferRecord { dir, tag, bytes });
    }

    pub fn l2_alloc(&mut self, addr: usize, bytes: usize, name: &str) -> Result<()> {
        if bytes == 0 || addr % ELEM_BYTES != 0 || bytes % ELEM_BYTES != 0 {
            return Err(Error::Access(format!("{name}: unaligned or empty L2 allocation at {addr} ({bytes} B)")));
        }
        if addr + bytes > self.l2_capacity {
            return Err(Error::Capacity {
                region: "L2",
                detail: format!("{name} at [{addr}, {}) exceeds {} B", addr + bytes, self.l2_capacity),
            });
        }
        if let Some(r) = self.l2_regions.iter().find(|r| addr < r.addr + r.bytes && r.addr < addr + bytes) {
            return Err(Error::Access(format!("{name} at {addr} overlaps live L2 buffer {}", r.name)));
        }
        self.l2_regions.push(L2Region { addr, bytes, name: name.to_string() });
        self.l2_used += bytes;
        self.l2_peak = self.l2_peak.max(self.l2_used);
        Ok(())
    }

    pub fn l2_free(&mut self, addr: usize) -> Result<()> {
        let i = self
            .l2_regions
            .iter()
            .position(|r| r.addr == addr)
            .ok_or_else(|| Error::Access(format!("free of unallocated L2 address {addr}")))?;
        let r = self.l2_regions.swap_remove(i);
        self.l2_used -= r.bytes;
        Ok(())
    }

    fn l2_check(&self, addr: usize, elems: usize, what: &str) -> Result<usize> {
        let end = addr + elems * ELEM_BYTES;
        let inside = addr % ELEM_BYTES == 0 && self.l2_regions.iter().any(|r| r.addr <= addr && end <= r.addr + r.bytes);
        if !inside {
            return Err(Error::Access(format!("{what} of L2 [{addr}, {end}) outside any live allocation")));
        }
        Ok(addr / ELEM_BYTES)
    }

    pub fn l2_read(&self, addr: usize, elems: usize) -> Result<&[Q412]> {
        let i = self.l2_check(addr, elems, "read")?;
        Ok(&self.l2[i..i + elems])
    }

    pub fn l2_write(&mut self, addr: usize, data: &[Q412]) -> Result<()> {
        let i = self.l2_check(addr, data.len(), "write")?;
        self.l2[i..i + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn l1_alloc(&mut self, name: String, bytes: usize, data: L1Data) -> Result<usize> {
        if self.l1_used + bytes > self.l1_capacity {
            return Err(Error::Capacity {
                region: "L1",
                detail: format!("{name}: {} B in use, {bytes} B more exceeds {} B", self.l1_used, self.l1_capacity),
            });
        }
        self.l1_used += bytes;
        self.l1_peak = self.l1_peak.max(self.l1_used);
        self.l1.push(L1Region { name, bytes, live: true, data: Some(data) });
        Ok(self.l1.len() - 1)
    }

    /// Allocates an L1 buffer of `elems` Q4.12 values and returns its handle.
    pub fn l1_alloc_elems(&mut self, name: &str, elems: usize) -> Result<usize> {
        self.l1_alloc(name.into(), elems * ELEM_BYTES, L1Data::Elems(vec![Q412::ZERO; elems]))
    }

    /// Allocates an L1 buffer of `elems` 32-bit accumulators.
    pub fn l1_alloc_acc(&mut self, name: &str, elems: usize) -> Result<usize> {
        self.l1_alloc(name.into(), elems * tiler::ACC_BYTES, L1Data::Acc(vec![Acc32::default(); elems]))
    }

    pub fn l1_free(&mut self, id: usize) -> Result<()> {
        let r = self.l1.get_mut(id).filter(|r| r.live).ok_or_else(|| Error::Access(format!("free of dead L1 handle {id}")))?;
        r.live = false;
        r.data = None;
        self.l1_used -= r.bytes;
        Ok(())
    }

    fn l1_region(&mut self, id: usize) -> Result<&mut L1Region> {
        match self.l1.get_mut(id) {
            Some(r) if r.live => Ok(r),
            Some(r) => Err(Error::Access(format!("use of freed L1 buffer {}", r.name))),
            None => Err(Error::Access(format!("unknown L1 handle {id}"))),
        }
    }

    fn take_elems(&mut self, id: usize) -> Result<Vec<Q412>> {
        let r = self.l1_region(id)?;
        match r.data.take() {
            Some(L1Data::Elems(v)) => Ok(v),
            other => {
                r.data = other;
                Err(Error::Access(format!("L1 buffer {} is not an element buffer", r.name)))
            }
        }
    }

    fn take_acc(&mut self, id: usize) -> Result<Vec<Acc32>> {
        let r = self.l1_region(id)?;
        match r.data.take() {
            Some(L1Data::Acc(v)) => Ok(v),
            other => {
                r.data = other;
                Err(Error::Access(format!("L1 buffer {} is not an accumulator buffer", r.name)))
            }
        }
    }

    fn put(&mut self, id: usize, data: L1Data) {
        self.l1[id].data = Some(data);
    }

    /// Copy of a live L1 element buffer.
    pub fn l1_read(&mut self, id: usize) -> Result<Vec<Q412>> {
        let v = self.take_elems(id)?;
        let out = v.clone();
        self.put(id, L1Data::Elems(v));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Camera frame landing in L2.
    FrameIn,
    Dma { dir: Direction, tag: TransferTag },
    Compute,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub node: usize,
    /// Compute tile the event belongs to.
    pub tile: Option<usize>,
    pub bytes: usize,
    pub macs: u64,
    /// Per-core ranges of a compute span.
    pub workers: Vec<Range<usize>>,
    pub double_buffered: bool,
    /// Compute tile this transfer hides under.
    pub overlaps: Option<usize>,
    pub l1_used: usize,
    pub l2_used: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceLog {
    pub node_names: Vec<String>,
    pub l1_budget: usize,
    pub events: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn macs(&self) -> u64 {
        self.events.iter().map(|e| e.macs).sum()
    }

    /// Bytes moved in `dir`, optionally only for node `node`.
    pub fn bytes(&self, dir: Direction, node: Option<usize>) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Dma { dir: d, .. } if d == dir) && node.map_or(true, |n| e.node == n))
            .map(|e| e.bytes)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("event,node,tile,bytes,macs,stream,workers,overlaps,l1_used,l2_used\n");
        for e in &self.events {
            let (event, stream) = match &e.kind {
                EventKind::FrameIn => ("frame", "frame"),
                EventKind::Dma { dir, tag } => (dir.name(), tag.name()),
                EventKind::Compute => ("compute", ""),
            };
            let workers: Vec<String> = e.workers.iter().map(|r| r.len().to_string()).collect();
            let opt = |o: Option<usize>| o.map(|v| v.to_string()).unwrap_or_default();
            let node = self.node_names.get(e.node).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                s,
                "{event},{node},{},{},{},{stream},{},{},{},{}",
                opt(e.tile),
                e.bytes,
                e.macs,
                workers.join(";"),
                opt(e.overlaps),
                e.l1_used,
                e.l2_used
            );
        }
        s
    }
}

pub struct ExecOutput {
    pub raw: RawOutputs<Q412>,
    pub prediction: Prediction,
    pub trace: TraceLog,
}

#[derive(Clone, Debug)]
struct TileMeta {
    ch: Range<usize>,
    rows: Range<i64>,
    cols: Range<i64>,
}

fn span(r: &Range<i64>) -> usize {
    (r.end - r.start).max(0) as usize
}

fn mismatch(node: &NodeKernel, what: impl std::fmt::Display) -> Error {
    Error::ScheduleMismatch(format!("{}: {what}", node.name))
}

/// L1 handles of one node's buffers.
struct NodeBufs {
    input: Vec<Vec<(usize, Option<TileMeta>)>>,
    weights: Vec<(usize, Option<Range<usize>>)>,
    output: Vec<usize>,
    acc: Option<usize>,
    scratch: Option<usize>,
}

impl NodeBufs {
    fn alloc(mem: &mut MemSim, node: &NodeKernel, plan: &TilePlan) -> Result<Self> {
        let slots = |db: bool| if db { 2 } else { 1 };
        let e = ELEM_BYTES;
        let mut input = Vec::new();
        for op in 0..plan.operands {
            let mut v = Vec::new();
            for s in 0..slots(plan.db.input) {
                v.push((mem.l1_alloc_elems(&format!("{}:in{op}.{s}", node.name), plan.bufs.input / e)?, None));
            }
            input.push(v);
        }
        let mut weights = Vec::new();
        if plan.bufs.weights > 0 {
            for s in 0..slots(plan.db.weights) {
                weights.push((mem.l1_alloc_elems(&format!("{}:w.{s}", node.name), plan.bufs.weights / e)?, None));
            }
        }
        let mut output = Vec::new();
        for s in 0..slots(plan.db.output) {
            output.push(mem.l1_alloc_elems(&format!("{}:out.{s}", node.name), plan.bufs.output / e)?);
        }
        let acc = (plan.bufs.acc > 0)
            .then(|| mem.l1_alloc_acc(&format!("{}:acc", node.name), plan.bufs.acc / tiler::ACC_BYTES))
            .transpose()?;
        let scratch = (plan.bufs.scratch > 0)
            .then(|| mem.l1_alloc_acc(&format!("{}:scratch", node.name), plan.bufs.scratch / tiler::ACC_BYTES))
            .transpose()?;
        Ok(NodeBufs { input, weights, output, acc, scratch })
    }

    fn free(self, mem: &mut MemSim) -> Result<()> {
        let ids = self.input.iter().flatten().map(|(id, _)| *id).chain(self.weights.iter().map(|(id, _)| *id)).chain(self.output);
        for id in ids.chain(self.acc).chain(self.scratch) {
            mem.l1_free(id)?;
        }
        Ok(())
    }
}

/// L2 placement of one node's operands.
struct NodeAddrs {
    inputs: Vec<usize>,
    output: usize,
    weights: Option<usize>,
}

struct NodeRun<'a> {
    idx: usize,
    node: &'a NodeKernel,
    plan: &'a TilePlan,
    addrs: NodeAddrs,
    bufs: NodeBufs,
    last_tile: Option<usize>,
    pending_stores: Vec<usize>,
    next_tile: usize,
}

impl NodeRun<'_> {
    fn event(&self, mem: &MemSim, kind: EventKind, bytes: usize) -> TraceEvent {
        TraceEvent {
            kind,
            node: self.idx,
            tile: None,
            bytes,
            macs: 0,
            workers: Vec::new(),
            double_buffered: false,
            overlaps: None,
            l1_used: mem.l1_used(),
            l2_used: mem.l2_used(),
        }
    }

    fn dma(&mut self, mem: &mut MemSim, trace: &mut TraceLog, dir: Direction, stream: Stream, bytes: usize, db: bool) {
        mem.log_transfer(dir, stream.into(), bytes);
        let mut ev = self.event(mem, EventKind::Dma { dir, tag: stream.into() }, bytes);
        ev.double_buffered = db;
        if dir == Direction::L1ToL2 {
            ev.tile = self.last_tile;
            if db {
                self.pending_stores.push(trace.events.len());
            }
        } else {
            ev.tile = Some(self.next_tile);
            if db {
                ev.overlaps = self.last_tile;
            }
        }
        trace.events.push(ev);
    }

    fn step(&mut self, mem: &mut MemSim, trace: &mut TraceLog, step: &Step) -> Result<()> {
        let node = self.node;
        let g = &node.geom;
        match step {
            Step::LoadWeights { slot, kout, bytes } => {
                let w_addr = self.addrs.weights.ok_or_else(|| mismatch(node, "weight load without an L2 weight buffer"))?;
                let id = self.bufs.weights.get(*slot).ok_or_else(|| mismatch(node, "weight slot out of range"))?.0;
                let we = g.weight_elems();
                let mut buf = mem.take_elems(id)?;
                let need = kout.len() * (we + 1);
                if need > buf.len() {
                    mem.put(id, L1Data::Elems(buf));
                    return Err(Error::Access(format!("{}: weight tile of {need} elements overflows its L1 buffer", node.name)));
                }
                let res: Result<()> = (|| {
                    buf[..kout.len() * we].copy_from_slice(mem.l2_read(w_addr + kout.start * we * ELEM_BYTES, kout.len() * we)?);
                    let b_addr = w_addr + (g.k_out * we + kout.start) * ELEM_BYTES;
                    buf[kout.len() * we..need].copy_from_slice(mem.l2_read(b_addr, kout.len())?);
                    Ok(())
                })();
                mem.put(id, L1Data::Elems(buf));
                res?;
                if need * ELEM_BYTES != *bytes {
                    return Err(mismatch(node, format!("weight tile moved {} B, plan declares {bytes}", need * ELEM_BYTES)));
                }
                self.bufs.weights[*slot].1 = Some(kout.clone());
                self.dma(mem, trace, Direction::L2ToL1, Stream::Weights, *bytes, self.plan.db.weights);
            }
            Step::LoadInput { operand, slot, ch, rows, cols, bytes } => {
                let (h_in, w_in) = if node.op == NodeOp::Fc { (1, 1) } else { (g.h_in, g.w_in) };
                let base = *self.addrs.inputs.get(*operand).ok_or_else(|| mismatch(node, "operand out of range"))?;
                let id = self.bufs.input.get(*operand).and_then(|v| v.get(*slot)).ok_or_else(|| mismatch(node, "input slot out of range"))?.0;
                let (nr, nc) = (span(rows), span(cols));
                let need = ch.len() * nr * nc;
                let mut buf = mem.take_elems(id)?;
                if need > buf.len() || ch.end > g.k_in {
                    mem.put(id, L1Data::Elems(buf));
                    return Err(Error::Access(format!("{}: input tile of {need} elements overflows its L1 buffer", node.name)));
                }
                // Halo positions outside the image stay zero.
                buf[..need].fill(Q412::ZERO);
                let x0 = cols.start.max(0) as usize;
                let x1 = (cols.end.min(w_in as i64)).max(0) as usize;
                let mut moved = 0;
                let res: Result<()> = (|| {
                    for (ci, c) in ch.clone().enumerate() {
                        for (ri, y) in rows.clone().enumerate() {
                            if y < 0 || y >= h_in as i64 || x1 <= x0 {
                                continue;
                            }
                            let src = mem.l2_read(base + ((c * h_in + y as usize) * w_in + x0) * ELEM_BYTES, x1 - x0)?;
                            let dst = (ci * nr + ri) * nc + (x0 as i64 - cols.start) as usize;
                            buf[dst..dst + src.len()].copy_from_slice(src);
                            moved += src.len() * ELEM_BYTES;
                        }
                    }
                    Ok(())
                })();
                mem.put(id, L1Data::Elems(buf));
                res?;
                if moved != *bytes {
                    return Err(mismatch(node, format!("input tile moved {moved} B, plan declares {bytes}")));
                }
                self.bufs.input[*operand][*slot].1 = Some(TileMeta { ch: ch.clone(), rows: rows.clone(), cols: cols.clone() });
                self.dma(mem, trace, Direction::L2ToL1, Stream::Input(*operand), moved, self.plan.db.input);
            }
            Step::Compute { tile, kout, kin, out_rows, first, last, in_slot, w_slot, out_slot, macs } => {
                let done = match node.op {
                    NodeOp::Conv => self.conv(mem, kout, kin, out_rows, *first, *last, *in_slot, *w_slot, *out_slot)?,
                    NodeOp::Fc => self.fc(mem, kout, kin, *first, *last, *in_slot, *w_slot, *out_slot)?,
                    NodeOp::Relu | NodeOp::Add => self.elementwise(mem, kout, out_rows, *in_slot, *out_slot)?,
                };
                if done != *macs {
                    return Err(mismatch(node, format!("tile {tile} did {done} MACs, plan declares {macs}")));
                }
                for i in self.pending_stores.drain(..) {
                    trace.events[i].overlaps = Some(*tile);
                }
                let mut ev = self.event(mem, EventKind::Compute, 0);
                ev.tile = Some(*tile);
                ev.macs = *macs;
                ev.workers = self.plan.workers(node, kout, kin);
                trace.events.push(ev);
                self.last_tile = Some(*tile);
                self.next_tile = tile + 1;
            }
            Step::Store { slot, kout, rows, bytes } => {
                let id = *self.bufs.output.get(*slot).ok_or_else(|| mismatch(node, "output slot out of range"))?;
                let buf = mem.take_elems(id)?;
                let w = g.w_out;
                let res: Result<()> = (|| {
                    if kout.len() * rows.len() * w > buf.len() {
                        return Err(Error::Access(format!("{}: store reads past its L1 output buffer", node.name)));
                    }
                    for (kl, k) in kout.clone().enumerate() {
                        for (rl, r) in rows.clone().enumerate() {
                            let src = &buf[(kl * rows.len() + rl) * w..][..w];
                            mem.l2_write(self.addrs.output + (k * g.h_out + r) * w * ELEM_BYTES, src)?;
                        }
                    }
                    Ok(())
                })();
                mem.put(id, L1Data::Elems(buf));
                res?;
                let moved = kout.len() * rows.len() * w * ELEM_BYTES;
                if moved != *bytes {
                    return Err(mismatch(node, format!("store moved {moved} B, plan declares {bytes}")));
                }
                self.dma(mem, trace, Direction::L1ToL2, Stream::Output, moved, self.plan.db.output);
            }
        }
        Ok(())
    }

    fn input_meta(&self, operand: usize, slot: usize) -> Result<TileMeta> {
        self.bufs
            .input
            .get(operand)
            .and_then(|v| v.get(slot))
            .and_then(|(_, m)| m.clone())
            .ok_or_else(|| mismatch(self.node, format!("compute reads unloaded input slot {slot}")))
    }

    fn weight_slot(&self, slot: usize, kout: &Range<usize>) -> Result<(usize, Range<usize>)> {
        match self.bufs.weights.get(slot) {
            Some((id, Some(k))) if k.start <= kout.start && kout.end <= k.end => Ok((*id, k.clone())),
            _ => Err(mismatch(self.node, format!("compute needs weights {kout:?} not resident in slot {slot}"))),
        }
    }

    /// Takes the L1 buffers of a compute step, runs `f`, and returns them
    /// even when `f` fails.
    #[allow(clippy::too_many_arguments)]
    fn with_bufs<R>(
        mem: &mut MemSim,
        ins: &[usize],
        w: Option<usize>,
        out: usize,
        acc: Option<usize>,
        scratch: Option<usize>,
        f: impl FnOnce(&[Vec<Q412>], &[Q412], &mut [Q412], &mut [Acc32], &mut [Acc32]) -> Result<R>,
    ) -> Result<R> {
        let mut xs = Vec::new();
        for &id in ins {
            xs.push((id, mem.take_elems(id)?));
        }
        let wv = w.map(|id| mem.take_elems(id)).transpose()?;
        let mut ov = mem.take_elems(out)?;
        let mut av = acc.map(|id| mem.take_acc(id)).transpose()?;
        let mut sv = scratch.map(|id| mem.take_acc(id)).transpose()?;
        let x_refs: Vec<Vec<Q412>> = xs.iter_mut().map(|(_, v)| std::mem::take(v)).collect();
        let r = f(
            &x_refs,
            wv.as_deref().unwrap_or(&[]),
            &mut ov,
            av.as_deref_mut().unwrap_or(&mut []),
            sv.as_deref_mut().unwrap_or(&mut []),
        );
        for ((id, _), v) in xs.into_iter().zip(x_refs) {
            mem.put(id, L1Data::Elems(v));
        }
        if let (Some(id), Some(v)) = (w, wv) {
            mem.put(id, L1Data::Elems(v));
        }
        mem.put(out, L1Data::Elems(ov));
        if let (Some(id), Some(v)) = (acc, av) {
            mem.put(id, L1Data::Acc(v));
        }
        if let (Some(id), Some(v)) = (scratch, sv) {
            mem.put(id, L1Data::Acc(v));
        }
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        mem: &mut MemSim,
        kout: &Range<usize>,
        kin: &Range<usize>,
        out_rows: &Range<usize>,
        first: bool,
        last: bool,
        in_slot: usize,
        w_slot: usize,
        out_slot: usize,
    ) -> Result<u64> {
        let node = self.node;
        let g = node.geom;
        let meta = self.input_meta(0, in_slot)?;
        let body = g.body_rows(out_rows);
        if meta.ch != *kin || meta.rows != g.in_rows(&body) || meta.cols != g.in_cols() {
            return Err(mismatch(node, format!("input tile {:?}/{:?} does not feed body rows {body:?}", meta.ch, meta.rows)));
        }
        let (w_id, wk) = self.weight_slot(w_slot, kout)?;
        let out_id = self.bufs.output[out_slot];
        let (nr, nc) = (span(&meta.rows), span(&meta.cols));
        let we = g.weight_elems();
        let (kh, kw, s) = (g.kh, g.kw, g.stride);
        let bw = g.body_w;
        let plane = body.len() * bw;
        let partial = !(first && last);
        let need_acc = if partial { kout.len() * plane } else { 0 };
        let pool_buf = if g.pool && !partial { self.bufs.scratch } else { None };
        let nw = wk.len();
        Self::with_bufs(mem, &[self.bufs.input[0][in_slot].0], Some(w_id), out_id, self.bufs.acc, pool_buf, |xs, w, out, acc, scratch| {
            let x = &xs[0];
            if acc.len() < need_acc || (g.pool && !partial && scratch.len() < plane) {
                return Err(Error::Access(format!("{}: accumulator tile overflows its L1 buffer", node.name)));
            }
            if out.len() < kout.len() * out_rows.len() * g.w_out {
                return Err(Error::Access(format!("{}: output tile overflows its L1 buffer", node.name)));
            }
            let mut macs = 0u64;
            for (kl, k) in kout.clone().enumerate() {
                let wl = k - wk.start;
                let wrow = &w[wl * we..(wl + 1) * we];
                let bias = w[nw * we + wl];
                for (yl, _) in body.clone().enumerate() {
                    for xo in 0..bw {
                        let ai = (kl * body.len() + yl) * bw + xo;
                        let mut a = if first { Acc32::from_bias(bias) } else { acc[ai] };
                        for c in 0..kin.len() {
                            let ci = kin.start + c;
                            for dy in 0..kh {
                                let row = &x[(c * nr + yl * s + dy) * nc..][..nc];
                                let wr = &wrow[(ci * kh + dy) * kw..][..kw];
                                for (dx, &wv) in wr.iter().enumerate() {
                                    a = a.mac(wv, row[xo * s + dx]);
                                }
                            }
                        }
                        macs += (kin.len() * kh * kw) as u64;
                        if !last {
                            acc[ai] = a;
                            continue;
                        }
                        let mut v = a.renorm();
                        if g.relu {
                            v = v.relu();
                        }
                        if g.pool {
                            // Stage the body plane, in the accumulator when it
                            // exists and in scratch otherwise.
                            let stage = if partial { &mut acc[..] } else { &mut scratch[..] };
                            let si = if partial { ai } else { yl * bw + xo };
                            stage[si] = Acc32(v.0 as i32);
                        } else {
                            out[(kl * out_rows.len() + yl) * g.w_out + xo] = v;
                        }
                    }
                }
                if last && g.pool {
                    let (stage, off) = if partial { (&acc[..], kl * plane) } else { (&scratch[..], 0) };
                    for (rl, r) in out_rows.clone().enumerate() {
                        for xo in 0..g.w_out {
                            let mut m: Option<i32> = None;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (by, bx) = (2 * r + dy, 2 * xo + dx);
                                    if by < body.end && bx < bw {
                                        let v = stage[off + (by - body.start) * bw + bx].0;
                                        m = Some(m.map_or(v, |m: i32| m.max(v)));
                                    }
                                }
                            }
                            let v = m.expect("every pool window has a sample");
                            out[(kl * out_rows.len() + rl) * g.w_out + xo] = Q412(v as i16);
                        }
                    }
                }
            }
            Ok(macs)
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn fc(
        &self,
        mem: &mut MemSim,
        kout: &Range<usize>,
        kin: &Range<usize>,
        first: bool,
        last: bool,
        in_slot: usize,
        w_slot: usize,
        out_slot: usize,
    ) -> Result<u64> {
        let node = self.node;
        let g = node.geom;
        let meta = self.input_meta(0, in_slot)?;
        if meta.ch != *kin {
            return Err(mismatch(node, format!("input tile {:?} is not {kin:?}", meta.ch)));
        }
        let (w_id, wk) = self.weight_slot(w_slot, kout)?;
        let out_id = self.bufs.output[out_slot];
        let k_in = g.k_in;
        let nw = wk.len();
        let need_acc = if first && last { 0 } else { kout.len() };
        Self::with_bufs(mem, &[self.bufs.input[0][in_slot].0], Some(w_id), out_id, self.bufs.acc, None, |xs, w, out, acc, _| {
            if acc.len() < need_acc || out.len() < kout.len() {
                return Err(Error::Access(format!("{}: tile overflows its L1 buffer", node.name)));
            }
            for (kl, k) in kout.clone().enumerate() {
                let wl = k - wk.start;
                let mut a = if first { Acc32::from_bias(w[nw * k_in + wl]) } else { acc[kl] };
                for (c, &xv) in xs[0][..kin.len()].iter().enumerate() {
                    a = a.mac(w[wl * k_in + kin.start + c], xv);
                }
                if last {
                    let v = a.renorm();
                    out[kl] = if g.relu { v.relu() } else { v };
                } else {
                    acc[kl] = a;
                }
            }
            Ok((kout.len() * kin.len()) as u64)
        })
    }

    fn elementwise(&self, mem: &mut MemSim, ch: &Range<usize>, rows: &Range<usize>, in_slot: usize, out_slot: usize) -> Result<u64> {
        let node = self.node;
        let g = node.geom;
        let want = TileMeta { ch: ch.clone(), rows: rows.start as i64..rows.end as i64, cols: 0..g.w_in as i64 };
        let mut ids = Vec::new();
        for op in 0..node.operands() {
            let m = self.input_meta(op, in_slot)?;
            if m.ch != want.ch || m.rows != want.rows || m.cols != want.cols {
                return Err(mismatch(node, format!("operand {op} tile does not match output tile")));
            }
            ids.push(self.bufs.input[op][in_slot].0);
        }
        let n = ch.len() * rows.len() * g.w_out;
        let op = node.op;
        Self::with_bufs(mem, &ids, None, self.bufs.output[out_slot], None, None, |xs, _, out, _, _| {
            if out.len() < n || xs.iter().any(|x| x.len() < n) {
                return Err(Error::Access(format!("{}: tile overflows its L1 buffer", node.name)));
            }
            for i in 0..n {
                out[i] = match op {
                    NodeOp::Add => {
                        let s = xs[0][i].saturating_add(xs[1][i]);
                        if g.relu {
                            s.relu()
                        } else {
                            s
                        }
                    }
                    _ => xs[0][i].relu(),
                };
            }
            Ok(0)
        })
    }
}

/// Runs `sched` on `mem` with the L2 layout of `l2`. The memory simulator is
/// reset first; buffers still live at the end (frame slots, network outputs)
/// remain allocated for inspection.
pub fn execute_schedule(
    g: &NetworkGraph,
    sched: &TileSchedule,
    l2: &L2AllocPlan,
    weights: &WeightStore,
    input: &Tensor3<Q412>,
    mem: &mut MemSim,
) -> Result<ExecOutput> {
    let nodes = build_nodes(g)?;
    if nodes != sched.nodes {
        return Err(Error::ScheduleMismatch("schedule nodes differ from the graph's node kernels".into()));
    }
    if sched.plans.len() != nodes.len() || sched.plans.iter().enumerate().any(|(i, p)| p.node != i) {
        return Err(Error::ScheduleMismatch(format!("{} plans for {} nodes", sched.plans.len(), nodes.len())));
    }
    let prog = l2_program(g, &l2.config)?;
    let names_match = prog.buffers.len() == l2.buffers.len() && prog.buffers.iter().zip(&l2.buffers).all(|(a, b)| a == b);
    if !names_match || l2.occupancy.len() != nodes.len() {
        return Err(Error::ScheduleMismatch("L2 plan was made for a different graph or configuration".into()));
    }
    weights.check_against(g)?;
    let shape = g.shape(g.input);
    if input.dims() != (shape.c, shape.h, shape.w) {
        return Err(Error::ShapeMismatch(format!("input {:?}, graph expects {}x{}x{}", input.dims(), shape.c, shape.h, shape.w)));
    }
    if sched.l1_budget > mem.l1_capacity {
        return Err(Error::Capacity {
            region: "L1",
            detail: format!("schedule budget {} B exceeds {} B", sched.l1_budget, mem.l1_capacity),
        });
    }
    if l2.config.capacity > mem.l2_capacity {
        return Err(Error::Capacity {
            region: "L2",
            detail: format!("plan assumes {} B, simulator has {} B", l2.config.capacity, mem.l2_capacity),
        });
    }
    mem.reset();
    let mut trace = TraceLog { node_names: nodes.iter().map(|n| n.name.clone()).collect(), l1_budget: sched.l1_budget, events: Vec::new() };
    let mut addr: Vec<Option<usize>> = vec![None; prog.buffers.len()];

    let write_frame = |mem: &mut MemSim, trace: &mut TraceLog, at: usize| -> Result<()> {
        mem.l2_write(at, &input.data)?;
        let ev = TraceEvent {
            kind: EventKind::FrameIn,
            node: 0,
            tile: None,
            bytes: input.data.len() * ELEM_BYTES,
            macs: 0,
            workers: Vec::new(),
            double_buffered: false,
            overlaps: None,
            l1_used: mem.l1_used(),
            l2_used: mem.l2_used(),
        };
        trace.events.push(ev);
        Ok(())
    };

    if l2.config.frame_outside {
        let slots = l2.config.frame_slots.max(1);
        let slot_bytes = l2.frame_bytes / slots;
        for s in 0..slots {
            mem.l2_alloc(s * slot_bytes, slot_bytes, &format!("frame{s}"))?;
        }
        addr[prog.frame] = Some(0);
        write_frame(mem, &mut trace, 0)?;
    }

    for (i, (node, plan)) in nodes.iter().zip(&sched.plans).enumerate() {
        if plan.footprint() > sched.l1_budget {
            return Err(Error::Capacity {
                region: "L1",
                detail: format!("{}: plan footprint {} B exceeds budget {} B", node.name, plan.footprint(), sched.l1_budget),
            });
        }
        for e in l2.events.iter().filter(|e| e.step == i && e.action == Action::Alloc) {
            mem.l2_alloc(e.addr, e.bytes, &e.name)?;
            addr[e.buffer] = Some(e.addr);
            match prog.buffers[e.buffer].kind {
                BufKind::Frame => write_frame(mem, &mut trace, e.addr)?,
                BufKind::Weights => {
                    let layer = node.param_layer.ok_or_else(|| mismatch(node, "weight buffer for a weightless node"))?;
                    let lw = weights.for_layer(layer).ok_or_else(|| mismatch(node, "missing weights"))?;
                    mem.l2_write(e.addr, &lw.w)?;
                    mem.l2_write(e.addr + lw.w.len() * ELEM_BYTES, &lw.b)?;
                    let bytes = lw.bytes();
                    mem.log_transfer(Direction::L3ToL2, TransferTag::Weights, bytes);
                    let ev = TraceEvent {
                        kind: EventKind::Dma { dir: Direction::L3ToL2, tag: TransferTag::Weights },
                        node: i,
                        tile: None,
                        bytes,
                        macs: 0,
                        workers: Vec::new(),
                        double_buffered: false,
                        overlaps: None,
                        l1_used: mem.l1_used(),
                        l2_used: mem.l2_used(),
                    };
                    trace.events.push(ev);
                }
                BufKind::Activation => {}
            }
        }
        let buf_addr = |t: usize| -> Result<usize> {
            prog.tensor_buffer[t].and_then(|b| addr[b]).ok_or_else(|| mismatch(node, format!("tensor {t} has no live L2 buffer")))
        };
        let addrs = NodeAddrs {
            inputs: node.inputs.iter().map(|&t| buf_addr(t)).collect::<Result<_>>()?,
            output: buf_addr(node.output)?,
            weights: prog.steps[i].weights.map(|b| addr[b].ok_or_else(|| mismatch(node, "weights not in L2"))).transpose()?,
        };
        let bufs = NodeBufs::alloc(mem, node, plan)?;
        let mut run = NodeRun { idx: i, node, plan, addrs, bufs, last_tile: None, pending_stores: Vec::new(), next_tile: 0 };
        for step in plan.steps(node) {
            run.step(mem, &mut trace, &step)?;
        }
        run.bufs.free(mem)?;
        for e in l2.events.iter().filter(|e| e.step == i && e.action == Action::Free) {
            mem.l2_free(e.addr)?;
            addr[e.buffer] = None;
        }
    }

    let outs = g.outputs();
    if outs.len() != 2 {
        return Err(Error::Graph(format!("expected two heads, found {}", outs.len())));
    }
    let head = |k: usize| -> Result<Q412> {
        let a = prog.tensor_buffer[outs[k]]
            .and_then(|b| addr[b])
            .ok_or_else(|| Error::ScheduleMismatch("network output was freed".into()))?;
        Ok(mem.l2_read(a, 1)?[0])
    };
    let raw = RawOutputs { steering: head(0)?, collision_logit: head(1)? };
    Ok(ExecOutput { raw, prediction: raw.prediction::<Fixed>(), trace })
}

/// Plans with the default two-stack L2 layout and runs on a default simulator.
pub fn run_tiled(g: &NetworkGraph, weights: &WeightStore, input: &Tensor3<Q412>, l1_budget: usize) -> Result<(ExecOutput, MemSim)> {
    let sched = tiler::plan_network(g, l1_budget)?;
    let l2 = l2plan::plan_two_stack(g, &L2Config::default())?;
    let mut mem = MemSim::default();
    let out = execute_schedule(g, &sched, &l2, weights, input, &mut mem)?;
    Ok((out, mem))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub events: usize,
    pub peak_l1: usize,
    pub peak_l2: usize,
    pub macs: u64,
    /// Bytes per direction, keyed by direction name.
    pub by_direction: BTreeMap<String, usize>,
    /// Bytes per direction and stream, keyed "dir stream".
    pub by_stream: BTreeMap<String, usize>,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn bytes(&self, dir: Direction) -> usize {
        self.by_direction.get(dir.name()).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("events {}\npeak L1 {} B\npeak L2 {} B\nMACs {}\n", self.events, self.peak_l1, self.peak_l2, self.macs);
        for (k, v) in &self.by_stream {
            let _ = writeln!(s, "{k}: {v} B");
        }
        if self.violations.is_empty() {
            s.push_str("no violations\n");
        }
        for v in &self.violations {
            let _ = writeln!(s, "VIOLATION {v}");
        }
        s
    }
}

/// Re-derives occupancy peaks and byte totals from the trace alone and
/// cross-checks them against the simulator's transfer log.
pub fn audit_trace(trace: &TraceLog, mem: &MemSim) -> AuditReport {
    let mut r = AuditReport { events: trace.events.len(), ..Default::default() };
    for (i, e) in trace.events.iter().enumerate() {
        r.peak_l1 = r.peak_l1.max(e.l1_used);
        r.peak_l2 = r.peak_l2.max(e.l2_used);
        r.macs += e.macs;
        if e.l1_used > mem.l1_capacity || (trace.l1_budget > 0 && e.l1_used > trace.l1_budget) {
            r.violations.push(format!("event {i}: L1 holds {} B", e.l1_used));
        }
        if e.l2_used > mem.l2_capacity {
            r.violations.push(format!("event {i}: L2 holds {} B", e.l2_used));
        }
        if let EventKind::Dma { dir, tag } = &e.kind {
            *r.by_direction.entry(dir.name().to_string()).or_default() += e.bytes;
            *r.by_stream.entry(format!("{} {}", dir.name(), tag.name())).or_default() += e.bytes;
            if let Some(t) = e.overlaps {
                let compute_at = |j: usize| {
                    let c = &trace.events[j];
                    c.kind == EventKind::Compute && c.node == e.node && c.tile == Some(t)
                };
                let ordered = if *dir == Direction::L1ToL2 { (i + 1..trace.events.len()).any(compute_at) } else { (0..i).any(compute_at) };
                if !ordered {
                    r.violations.push(format!("event {i}: overlap with tile {t} is out of order"));
                }
            }
        }
    }
    if mem.l1_peak() > mem.l1_capacity || mem.l2_peak() > mem.l2_capacity {
        r.violations.push("simulator peak exceeds capacity".into());
    }
    let mut logged: BTreeMap<String, usize> = BTreeMap::new();
    for t in mem.transfers() {
        *logged.entry(t.dir.name().to_string()).or_default() += t.bytes;
    }
    if !trace.events.is_empty() && logged != r.by_direction {
        r.violations.push(format!("trace bytes {:?} differ from transfer log {:?}", r.by_direction, logged));
    }
    r
}
