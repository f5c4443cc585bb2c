//! L2 allocation planning with two LIFO stacks.
//!
//! Every node kernel allocates its output, then its weights, runs, then frees
//! its weights and any input that has no later reader. Both stacks are strict
//! LIFO, so a plan is feasible only if every buffer due for release sits on top
//! of its stack. The planner searches all stack assignments (branch and bound)
//! for the one with the smallest simultaneous occupancy. Stack 0 grows up from
//! the end of the frame region, stack 1 grows down from the top of L2.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::net::NetworkGraph;
use crate::tiler::{build_nodes, NodeOp};

/// On-chip L2 size.
pub const L2_BYTES: usize = 512 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct L2Config {
    /// Keep the input frame in a dedicated region instead of a stack.
    pub frame_outside: bool,
    /// Frames held in that region (the offload pipeline keeps two).
    pub frame_slots: usize,
    /// A ReLU that is the sole reader of its input overwrites it.
    pub inplace_relu: bool,
    pub align: usize,
    pub capacity: usize,
}

impl Default for L2Config {
    fn default() -> Self {
        L2Config { frame_outside: true, frame_slots: 2, inplace_relu: true, align: 4, capacity: L2_BYTES }
    }
}

impl L2Config {
    /// Everything in the stacks, no aliasing: the plain lifetime analysis.
    pub fn plain() -> Self {
        L2Config { frame_outside: false, frame_slots: 0, inplace_relu: false, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufKind {
    Frame,
    Activation,
    Weights,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L2Buffer {
    pub name: String,
    pub kind: BufKind,
    pub bytes: usize,
}

/// One node kernel as seen by the allocator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L2Step {
    pub name: String,
    /// Buffers read, deduplicated.
    pub inputs: Vec<usize>,
    /// Freshly allocated output buffer; `None` when the node writes in place.
    pub output: Option<usize>,
    pub weights: Option<usize>,
}

/// Buffers and steps derived from a graph under a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L2Program {
    pub buffers: Vec<L2Buffer>,
    pub steps: Vec<L2Step>,
    /// Buffer holding each graph tensor, if it is materialized.
    pub tensor_buffer: Vec<Option<usize>>,
    pub frame: usize,
    /// Buffers alive until the end (network outputs).
    pub keep: Vec<usize>,
    /// Last step reading each buffer.
    pub last_read: Vec<Option<usize>>,
}

impl L2Program {
    /// Buffers released after step `i`: its weights and inputs read for the last time.
    pub fn releases(&self, i: usize, cfg: &L2Config) -> Vec<usize> {
        let s = &self.steps[i];
        let mut out: Vec<usize> = s.weights.into_iter().collect();
        for &b in &s.inputs {
            let outside = b == self.frame && cfg.frame_outside;
            if self.last_read[b] == Some(i) && !outside && !self.keep.contains(&b) {
                out.push(b);
            }
        }
        out
    }

    fn in_stack(&self, b: usize, cfg: &L2Config) -> bool {
        !(b == self.frame && cfg.frame_outside)
    }
}

fn align(n: usize, a: usize) -> usize {
    n.div_ceil(a.max(1)) * a.max(1)
}

/// Builds the allocator's view of `g`'s node kernels.
pub fn l2_program(g: &NetworkGraph, cfg: &L2Config) -> Result<L2Program> {
    let nodes = build_nodes(g)?;
    let bytes_of = |t: usize| align(g.shape(t).bytes(), cfg.align);
    let mut buffers = vec![L2Buffer { name: "frame".into(), kind: BufKind::Frame, bytes: bytes_of(g.input) }];
    let mut tensor_buffer = vec![None; g.tensors.len()];
    tensor_buffer[g.input] = Some(0);
    let readers = |t: usize| nodes.iter().filter(|n| n.inputs.contains(&t)).count();
    let mut steps = Vec::with_capacity(nodes.len());
    for n in &nodes {
        let mut inputs = Vec::new();
        for &t in &n.inputs {
            let b = tensor_buffer[t].ok_or_else(|| Error::Graph(format!("{}: input {t} is not materialized", n.name)))?;
            if !inputs.contains(&b) {
                inputs.push(b);
            }
        }
        let inplace = cfg.inplace_relu && n.op == NodeOp::Relu && readers(n.inputs[0]) == 1 && inputs[0] != 0;
        let output = if inplace {
            tensor_buffer[n.output] = Some(inputs[0]);
            None
        } else {
            buffers.push(L2Buffer { name: n.name.clone(), kind: BufKind::Activation, bytes: bytes_of(n.output) });
            tensor_buffer[n.output] = Some(buffers.len() - 1);
            Some(buffers.len() - 1)
        };
        let weights = (n.weight_bytes() > 0).then(|| {
            buffers.push(L2Buffer { name: format!("w:{}", n.name), kind: BufKind::Weights, bytes: align(n.weight_bytes(), cfg.align) });
            buffers.len() - 1
        });
        steps.push(L2Step { name: n.name.clone(), inputs, output, weights });
    }
    let mut last_read = vec![None; buffers.len()];
    for (i, s) in steps.iter().enumerate() {
        for &b in &s.inputs {
            last_read[b] = Some(i);
        }
    }
    let keep = g.outputs().iter().filter_map(|&t| tensor_buffer[t]).collect();
    Ok(L2Program { buffers, steps, tensor_buffer, frame: 0, keep, last_read })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Alloc,
    Free,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocEvent {
    pub step: usize,
    pub buffer: usize,
    pub name: String,
    pub stack: usize,
    pub action: Action,
    pub bytes: usize,
    /// L2 byte address of the buffer.
    pub addr: usize,
}

/// Live buffers and bytes per stack while a step computes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOccupancy {
    pub step: usize,
    pub name: String,
    pub live: Vec<Vec<usize>>,
    pub bytes: Vec<usize>,
}

impl StepOccupancy {
    pub fn total(&self) -> usize {
        self.bytes.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L2AllocPlan {
    pub config: L2Config,
    pub stacks: usize,
    pub buffers: Vec<L2Buffer>,
    pub events: Vec<AllocEvent>,
    pub occupancy: Vec<StepOccupancy>,
    pub stack_peaks: Vec<usize>,
    /// Largest simultaneous stack occupancy.
    pub peak: usize,
    /// Bytes reserved for frames outside the stacks.
    pub frame_bytes: usize,
}

impl L2AllocPlan {
    /// L2 bytes needed: frame region plus stack peak.
    pub fn total_bytes(&self) -> usize {
        self.frame_bytes + self.peak
    }

    /// Free L2 left by the stacks alone.
    pub fn headroom(&self) -> isize {
        self.config.capacity as isize - self.peak as isize
    }

    /// Free L2 left once the frame region is reserved too.
    pub fn headroom_with_frames(&self) -> isize {
        self.config.capacity as isize - self.total_bytes() as isize
    }

    pub fn fits(&self) -> bool {
        self.total_bytes() <= self.config.capacity
    }

    /// Address of a buffer while it is live during `step`.
    pub fn address(&self, buffer: usize, step: usize) -> Option<usize> {
        self.events
            .iter()
            .filter(|e| e.buffer == buffer && e.step <= step && e.action == Action::Alloc)
            .last()
            .map(|e| e.addr)
    }

    pub fn stack_of(&self, buffer: usize) -> Option<usize> {
        self.events.iter().find(|e| e.buffer == buffer).map(|e| e.stack)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,node");
        for k in 0..self.stacks {
            let _ = write!(s, ",stack{k}_buffers,stack{k}_bytes");
        }
        s.push_str(",total_bytes\n");
        for o in &self.occupancy {
            let _ = write!(s, "{},{}", o.step, o.name);
            for k in 0..self.stacks {
                let names: Vec<&str> = o.live[k].iter().map(|&b| self.buffers[b].name.as_str()).collect();
                let _ = write!(s, ",{},{}", names.join(" "), o.bytes[k]);
            }
            let _ = writeln!(s, ",{}", o.total());
        }
        s
    }

    pub fn events_csv(&self) -> String {
        let mut s = String::from("step,action,buffer,stack,bytes,addr\n");
        for e in &self.events {
            let a = if e.action == Action::Alloc { "alloc" } else { "free" };
            let _ = writeln!(s, "{},{a},{},{},{},{}", e.step, e.name, e.stack, e.bytes, e.addr);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for o in &self.occupancy {
            let _ = write!(s, "{:>3} {:<14}", o.step, o.name);
            for k in 0..self.stacks {
                let names: Vec<&str> = o.live[k].iter().map(|&b| self.buffers[b].name.as_str()).collect();
                let _ = write!(s, " | S{k} {:>7} B [{}]", o.bytes[k], names.join(", "));
            }
            s.push('\n');
        }
        let kib = |b: usize| b as f64 / 1024.0;
        let _ = writeln!(s, "peak {} B ({:.1} KiB) over {} stack(s)", self.peak, kib(self.peak), self.stacks);
        let _ = writeln!(s, "frame region {} B, total {} B ({:.1} KiB)", self.frame_bytes, self.total_bytes(), kib(self.total_bytes()));
        let _ = writeln!(s, "headroom {} B without frames, {} B with frames", self.headroom(), self.headroom_with_frames());
        s
    }
}

/// Stack choice for one step's output and weights.
type Choice = (Option<usize>, Option<usize>);

#[derive(Clone)]
struct State {
    stacks: Vec<Vec<usize>>,
    occ: Vec<usize>,
    peaks: Vec<usize>,
    peak: usize,
}

impl State {
    fn new(n: usize) -> Self {
        State { stacks: vec![Vec::new(); n], occ: vec![0; n], peaks: vec![0; n], peak: 0 }
    }

    fn push(&mut self, k: usize, b: usize, bytes: usize) {
        self.stacks[k].push(b);
        self.occ[k] += bytes;
        self.peaks[k] = self.peaks[k].max(self.occ[k]);
    }

    fn mark_peak(&mut self) {
        self.peak = self.peak.max(self.occ.iter().sum());
    }

    /// Pops every buffer in `due` that is (or becomes) a stack top.
    fn pop_due(&mut self, due: &mut Vec<usize>, prog: &L2Program, popped: &mut Vec<(usize, usize)>) {
        loop {
            let mut progressed = false;
            for k in 0..self.stacks.len() {
                while let Some(&top) = self.stacks[k].last() {
                    let Some(pos) = due.iter().position(|&d| d == top) else { break };
                    due.swap_remove(pos);
                    self.stacks[k].pop();
                    self.occ[k] -= prog.buffers[top].bytes;
                    popped.push((k, top));
                    progressed = true;
                }
            }
            if !progressed {
                return;
            }
        }
    }
}

fn choices(step: &L2Step, stacks: usize) -> Vec<Choice> {
    let opts = |x: Option<usize>| -> Vec<Option<usize>> {
        match x {
            Some(_) => (0..stacks).map(Some).collect(),
            None => vec![None],
        }
    };
    let mut v = Vec::new();
    for o in opts(step.output) {
        for w in opts(step.weights) {
            v.push((o, w));
        }
    }
    v
}

struct Search<'a> {
    prog: &'a L2Program,
    cfg: &'a L2Config,
    best: Option<((usize, usize), Vec<Choice>, usize)>,
    path: Vec<Choice>,
}

impl Search<'_> {
    fn score(st: &State) -> (usize, usize) {
        (st.peak, st.peaks.iter().sum())
    }

    fn rec(&mut self, i: usize, st: State, frame_stack: usize) {
        if let Some((b, _, _)) = &self.best {
            if Self::score(&st) >= *b {
                return;
            }
        }
        if i == self.prog.steps.len() {
            self.best = Some((Self::score(&st), self.path.clone(), frame_stack));
            return;
        }
        let step = &self.prog.steps[i];
        for (o, w) in choices(step, st.stacks.len()) {
            let mut s = st.clone();
            if let (Some(k), Some(b)) = (o, step.output) {
                s.push(k, b, self.prog.buffers[b].bytes);
            }
            if let (Some(k), Some(b)) = (w, step.weights) {
                s.push(k, b, self.prog.buffers[b].bytes);
            }
            s.mark_peak();
            let mut due = self.prog.releases(i, self.cfg);
            s.pop_due(&mut due, self.prog, &mut Vec::new());
            if !due.is_empty() {
                continue;
            }
            self.path.push((o, w));
            self.rec(i + 1, s, frame_stack);
            self.path.pop();
        }
    }
}

/// Replays an assignment, emitting events with addresses. With `lazy` set,
/// buffers that are due but buried stay until they surface.
fn replay(prog: &L2Program, cfg: &L2Config, nstacks: usize, frame_stack: usize, assign: &[Choice], lazy: bool) -> Result<L2AllocPlan> {
    let frame_bytes = if cfg.frame_outside { cfg.frame_slots * prog.buffers[prog.frame].bytes } else { 0 };
    let mut st = State::new(nstacks);
    let mut events = Vec::new();
    let mut occupancy = Vec::new();
    let addr = |k: usize, occ_after: usize, bytes: usize| -> usize {
        if k == 0 {
            frame_bytes + occ_after - bytes
        } else {
            cfg.capacity.saturating_sub(occ_after)
        }
    };
    let alloc = |st: &mut State, events: &mut Vec<AllocEvent>, i: usize, k: usize, b: usize| {
        let bytes = prog.buffers[b].bytes;
        st.push(k, b, bytes);
        events.push(AllocEvent { step: i, buffer: b, name: prog.buffers[b].name.clone(), stack: k, action: Action::Alloc, bytes, addr: addr(k, st.occ[k], bytes) });
    };
    let mut pending: Vec<usize> = Vec::new();
    let mut addrs = vec![0usize; prog.buffers.len()];
    for (i, step) in prog.steps.iter().enumerate() {
        if i == 0 && prog.in_stack(prog.frame, cfg) {
            alloc(&mut st, &mut events, 0, frame_stack, prog.frame);
        }
        let (o, w) = assign[i];
        if let (Some(k), Some(b)) = (o, step.output) {
            alloc(&mut st, &mut events, i, k, b);
        }
        if let (Some(k), Some(b)) = (w, step.weights) {
            alloc(&mut st, &mut events, i, k, b);
        }
        for e in events.iter().filter(|e| e.step == i && e.action == Action::Alloc) {
            addrs[e.buffer] = e.addr;
        }
        st.mark_peak();
        occupancy.push(StepOccupancy { step: i, name: step.name.clone(), live: st.stacks.clone(), bytes: st.occ.clone() });
        pending.extend(prog.releases(i, cfg));
        let mut popped = Vec::new();
        st.pop_due(&mut pending, prog, &mut popped);
        for (k, b) in popped {
            events.push(AllocEvent { step: i, buffer: b, name: prog.buffers[b].name.clone(), stack: k, action: Action::Free, bytes: prog.buffers[b].bytes, addr: addrs[b] });
        }
        if !lazy && !pending.is_empty() {
            let names: Vec<&str> = pending.iter().map(|&b| prog.buffers[b].name.as_str()).collect();
            return Err(Error::NoAssignment(format!("step {}: cannot release {} (not on top)", step.name, names.join(", "))));
        }
    }
    Ok(L2AllocPlan {
        config: *cfg,
        stacks: nstacks,
        buffers: prog.buffers.clone(),
        events,
        occupancy,
        stack_peaks: st.peaks,
        peak: st.peak,
        frame_bytes,
    })
}

/// Two-stack plan minimizing peak simultaneous occupancy (ties: smaller sum of
/// per-stack peaks, then stack 0 first).
pub fn plan_two_stack(g: &NetworkGraph, cfg: &L2Config) -> Result<L2AllocPlan> {
    plan_program(&l2_program(g, cfg)?, cfg)
}

pub fn plan_program(prog: &L2Program, cfg: &L2Config) -> Result<L2AllocPlan> {
    let mut search = Search { prog, cfg, best: None, path: Vec::new() };
    let frame_in = prog.in_stack(prog.frame, cfg) && !prog.steps.is_empty();
    for frame_stack in if frame_in { vec![0, 1] } else { vec![0] } {
        let mut st = State::new(2);
        if frame_in {
            st.push(frame_stack, prog.frame, prog.buffers[prog.frame].bytes);
            st.mark_peak();
        }
        search.rec(0, st, frame_stack);
    }
    let (_, assign, frame_stack) = search
        .best
        .ok_or_else(|| Error::NoAssignment("no two-stack assignment keeps both stacks LIFO".into()))?;
    replay(prog, cfg, 2, frame_stack, &assign, false)
}

/// Everything on one stack; a dead buffer is reclaimed once it reaches the top.
pub fn plan_single_stack(g: &NetworkGraph, cfg: &L2Config) -> Result<L2AllocPlan> {
    let prog = l2_program(g, cfg)?;
    let assign: Vec<Choice> = prog.steps.iter().map(|s| (s.output.map(|_| 0), s.weights.map(|_| 0))).collect();
    replay(&prog, cfg, 1, 0, &assign, true)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// A free that does not name its stack's top.
    Lifo { step: usize, buffer: String, top: Option<String> },
    /// A buffer a step needs is not live while it runs.
    NotLive { step: usize, buffer: String },
    DoubleAlloc { step: usize, buffer: String },
    UnknownFree { step: usize, buffer: String },
    /// A weight buffer alive outside its own step.
    WeightLifetime { step: usize, buffer: String },
    Capacity { step: usize, bytes: usize, capacity: usize },
    /// Recorded occupancy or peak disagrees with the events.
    Bookkeeping(String),
    BadStack { step: usize, buffer: String },
}

/// Replays a plan's events against the graph and reports every violated rule.
pub fn validate_plan(plan: &L2AllocPlan, g: &NetworkGraph) -> Result<Vec<Violation>> {
    let prog = l2_program(g, &plan.config)?;
    let cfg = &plan.config;
    let mut v = Vec::new();
    if prog.buffers.len() != plan.buffers.len() {
        v.push(Violation::Bookkeeping("buffer table does not match graph".into()));
        return Ok(v);
    }
    let name = |b: usize| prog.buffers[b].name.clone();
    let mut stacks: Vec<Vec<usize>> = vec![Vec::new(); plan.stacks];
    let mut occ = vec![0usize; plan.stacks];
    let mut peaks = vec![0usize; plan.stacks];
    let mut peak = 0usize;
    let mut live = vec![false; prog.buffers.len()];
    if cfg.frame_outside {
        live[prog.frame] = true;
    }
    let mut ev = plan.events.iter().peekable();
    for (i, step) in prog.steps.iter().enumerate() {
        // allocation phase of step i
        while let Some(e) = ev.peek() {
            if e.step != i || e.action != Action::Alloc {
                break;
            }
            let e = ev.next().unwrap();
            if e.stack >= plan.stacks || e.buffer >= prog.buffers.len() {
                v.push(Violation::BadStack { step: i, buffer: e.name.clone() });
                continue;
            }
            if live[e.buffer] {
                v.push(Violation::DoubleAlloc { step: i, buffer: name(e.buffer) });
                continue;
            }
            live[e.buffer] = true;
            stacks[e.stack].push(e.buffer);
            occ[e.stack] += prog.buffers[e.buffer].bytes;
            peaks[e.stack] = peaks[e.stack].max(occ[e.stack]);
        }
        let total: usize = occ.iter().sum();
        peak = peak.max(total);
        if total + plan.frame_bytes > cfg.capacity {
            v.push(Violation::Capacity { step: i, bytes: total + plan.frame_bytes, capacity: cfg.capacity });
        }
        for b in step.inputs.iter().chain(&step.output).chain(&step.weights) {
            if !live[*b] {
                v.push(Violation::NotLive { step: i, buffer: name(*b) });
            }
        }
        for (b, buf) in prog.buffers.iter().enumerate() {
            if buf.kind == BufKind::Weights && live[b] && step.weights != Some(b) {
                v.push(Violation::WeightLifetime { step: i, buffer: name(b) });
            }
        }
        if let Some(o) = plan.occupancy.get(i) {
            if o.bytes != occ {
                v.push(Violation::Bookkeeping(format!("step {i}: recorded {:?}, replayed {:?}", o.bytes, occ)));
            }
        }
        // release phase
        while let Some(e) = ev.peek() {
            if e.step != i || e.action != Action::Free {
                break;
            }
            let e = ev.next().unwrap();
            if e.stack >= plan.stacks || e.buffer >= prog.buffers.len() {
                v.push(Violation::BadStack { step: i, buffer: e.name.clone() });
                continue;
            }
            if !live[e.buffer] {
                v.push(Violation::UnknownFree { step: i, buffer: name(e.buffer) });
                continue;
            }
            let top = stacks[e.stack].last().copied();
            if top != Some(e.buffer) {
                v.push(Violation::Lifo { step: i, buffer: name(e.buffer), top: top.map(name) });
                if let Some(pos) = stacks[e.stack].iter().position(|&b| b == e.buffer) {
                    stacks[e.stack].remove(pos);
                } else {
                    continue;
                }
            } else {
                stacks[e.stack].pop();
            }
            live[e.buffer] = false;
            occ[e.stack] -= prog.buffers[e.buffer].bytes;
            // a freed buffer must not be read later
            if prog.last_read[e.buffer].is_some_and(|l| l > i) || prog.keep.contains(&e.buffer) {
                let later = prog.last_read[e.buffer].unwrap_or(prog.steps.len());
                v.push(Violation::NotLive { step: later, buffer: name(e.buffer) });
            }
        }
    }
    if let Some(e) = ev.next() {
        v.push(Violation::Bookkeeping(format!("event out of order: {} at step {}", e.name, e.step)));
    }
    if peak != plan.peak || peaks != plan.stack_peaks {
        v.push(Violation::Bookkeeping(format!("peak {} / {:?} recorded, {} / {:?} replayed", plan.peak, plan.stack_peaks, peak, peaks)));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_dronet, GraphBuilder, Shape};

    fn dronet_two() -> (NetworkGraph, L2AllocPlan) {
        let g = build_dronet();
        let p = plan_two_stack(&g, &L2Config::default()).unwrap();
        (g, p)
    }

    #[test]
    fn dronet_two_stack_peak() {
        let (g, p) = dronet_two();
        assert_eq!(p.peak, 341_888);
        assert_eq!(p.frame_bytes, 160_000);
        assert!(p.fits());
        assert!(validate_plan(&p, &g).unwrap().is_empty());
    }

    #[test]
    fn peak_does_not_depend_on_frame_or_aliasing() {
        let g = build_dronet();
        assert_eq!(plan_two_stack(&g, &L2Config::plain()).unwrap().peak, 341_888);
    }

    #[test]
    fn dronet_single_stack_peak() {
        let g = build_dronet();
        let s = plan_single_stack(&g, &L2Config::default()).unwrap();
        assert_eq!(s.peak, 726_784);
        assert!(s.peak > L2_BYTES);
        let plain = plan_single_stack(&g, &L2Config::plain()).unwrap();
        assert!(plain.peak >= s.peak);
    }

    #[test]
    fn single_layer_peak_is_in_out_weights() {
        let mut b = GraphBuilder::new(Shape::new(3, 10, 10));
        let x = b.input();
        b.conv("c", x, 4, 3, 1, false);
        let g = b.finish().unwrap();
        let cfg = L2Config { frame_outside: false, ..L2Config::default() };
        let p = plan_two_stack(&g, &cfg).unwrap();
        let w = (4 * (3 * 9 + 1) * 2usize).div_ceil(4) * 4;
        assert_eq!(p.peak, 300 * 2 + 400 * 2 + w);
    }

    #[test]
    fn planner_is_deterministic() {
        let (_, a) = dronet_two();
        let (_, b) = dronet_two();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_live_only_around_their_step() {
        let (_, p) = dronet_two();
        for e in p.events.iter().filter(|e| e.name.starts_with("w:")) {
            let pair: Vec<_> = p.events.iter().filter(|x| x.buffer == e.buffer).collect();
            assert_eq!(pair.len(), 2);
            assert_eq!(pair[0].step, pair[1].step);
        }
    }

    #[test]
    fn bypass_tensors_coexist_in_res_blocks() {
        let (_, p) = dronet_two();
        let add = p.occupancy.iter().find(|o| o.name == "add_1").unwrap();
        let live: Vec<&str> = add.live.iter().flatten().map(|&b| p.buffers[b].name.as_str()).collect();
        for n in ["conv_3", "conv_4", "add_1"] {
            assert!(live.contains(&n), "{live:?}");
        }
    }

    #[test]
    fn addresses_do_not_overlap() {
        let (_, p) = dronet_two();
        for o in &p.occupancy {
            let mut spans: Vec<(usize, usize)> = o
                .live
                .iter()
                .flatten()
                .map(|&b| {
                    let a = p.address(b, o.step).unwrap();
                    (a, a + p.buffers[b].bytes)
                })
                .collect();
            spans.sort();
            assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0), "{spans:?}");
            assert!(spans.iter().all(|s| s.0 >= p.frame_bytes && s.1 <= L2_BYTES));
        }
    }

    #[test]
    fn detects_lifo_violation() {
        let (g, mut p) = dronet_two();
        // free a buffer that is buried under another on the same stack
        let i = p.events.iter().position(|e| e.action == Action::Free && e.name == "w:conv_3").unwrap();
        let stack = p.events[i].stack;
        let victim = p
            .events
            .iter()
            .position(|e| e.action == Action::Alloc && e.stack == stack && e.step < p.events[i].step && !e.name.starts_with("w:"))
            .unwrap();
        let mut bogus = p.events[victim].clone();
        bogus.action = Action::Free;
        bogus.step = p.events[i].step;
        p.events.insert(i, bogus);
        let v = validate_plan(&p, &g).unwrap();
        assert!(v.iter().any(|x| matches!(x, Violation::Lifo { .. })), "{v:?}");
    }

    #[test]
    fn detects_early_bypass_free() {
        let (g, mut p) = dronet_two();
        // release conv_4's output right after it is produced, before add_1 reads it
        let c4 = p.buffers.iter().position(|b| b.name == "conv_4").unwrap();
        let step = p.occupancy.iter().position(|o| o.name == "conv_4").unwrap();
        let free = p.events.iter().position(|e| e.buffer == c4 && e.action == Action::Free).unwrap();
        let mut e = p.events.remove(free);
        e.step = step;
        let at = p.events.iter().position(|x| x.step > step).unwrap();
        p.events.insert(at, e);
        let v = validate_plan(&p, &g).unwrap();
        assert!(v.iter().any(|x| matches!(x, Violation::NotLive { buffer, .. } if buffer == "conv_4")), "{v:?}");
    }

    #[test]
    fn detects_capacity_overflow() {
        let g = build_dronet();
        let s = plan_single_stack(&g, &L2Config::default()).unwrap();
        let v = validate_plan(&s, &g).unwrap();
        assert!(v.iter().any(|x| matches!(x, Violation::Capacity { .. })));
        assert!(!v.iter().any(|x| matches!(x, Violation::Lifo { .. } | Violation::NotLive { .. })), "{v:?}");
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let (_, p) = dronet_two();
        let csv = p.to_csv();
        assert_eq!(csv.lines().count(), 1 + p.occupancy.len());
        assert!(csv.starts_with("step,node,stack0_buffers,stack0_bytes,stack1_buffers,stack1_bytes,total_bytes"));
    }
}
