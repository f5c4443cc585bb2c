//! Tiling of node kernels into L1-sized pieces.
//!
//! A node kernel is one or more fused graph layers executed as a unit. For each
//! node the planner enumerates every tiling of the (H, K_in, K_out) iteration
//! space under an L1 budget, under two loop orders:
//!
//! * spatial: weights resident, input striped along H (and optionally K_in),
//!   cores split the output width;
//! * feature-wise: full feature maps, output channels tiled and split across
//!   cores.
//!
//! [`TilePlan::walk`] expands a plan into its ordered DMA and compute steps. The
//! cost model and the executor both consume that single step sequence.

use std::fmt::Write as _;
use std::ops::Range;

use crate::cost::{self, CycleParams};
use crate::error::{Error, Result};
use crate::net::{LayerKind, NetworkGraph, ELEM_BYTES};

/// Cluster cores sharing L1.
pub const CORES: usize = 8;
/// L1 bytes available to tiles by default (64 KiB minus 4 KiB runtime state).
pub const DEFAULT_L1_BUDGET: usize = 60 * 1024;
/// Accumulator element size.
pub const ACC_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BasicKernel {
    SetBias,
    PadMarshal,
    Conv,
    FullyConnected,
    MaxPool2,
    Relu,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeOp {
    Conv,
    Fc,
    Relu,
    Add,
}

/// Extents of a node's iteration space. For elementwise nodes `k_in == k_out`
/// and the kernel is 1x1/s1. A fully connected node is a 1x1 convolution over a
/// `K_in x 1 x 1` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeGeom {
    pub k_in: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_in: usize,
    pub w_in: usize,
    /// Body (convolution) output extents, before an optional pool epilogue.
    pub body_h: usize,
    pub body_w: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pool: bool,
    pub relu: bool,
}

impl NodeGeom {
    /// Body rows producing node-output rows `r`.
    pub fn body_rows(&self, r: &Range<usize>) -> Range<usize> {
        if self.pool {
            2 * r.start..(2 * r.end).min(self.body_h)
        } else {
            r.clone()
        }
    }

    /// Input rows (may start above the image or end below it) feeding body rows `b`.
    pub fn in_rows(&self, b: &Range<usize>) -> Range<i64> {
        let start = (b.start * self.stride) as i64 - self.pad_top as i64;
        let end = ((b.end - 1) * self.stride + self.kh) as i64 - self.pad_top as i64;
        start..end
    }

    /// Input columns, halo included, feeding the full body width.
    pub fn in_cols(&self) -> Range<i64> {
        let start = -(self.pad_left as i64);
        let end = ((self.body_w - 1) * self.stride + self.kw) as i64 - self.pad_left as i64;
        start..end
    }

    pub fn padded(&self) -> bool {
        let rows = self.in_rows(&(0..self.body_h));
        let cols = self.in_cols();
        rows.start < 0 || rows.end > self.h_in as i64 || cols.start < 0 || cols.end > self.w_in as i64
    }

    pub fn weight_elems(&self) -> usize {
        self.k_in * self.kh * self.kw
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeKernel {
    pub name: String,
    /// Graph layers fused into this node, in execution order.
    pub layers: Vec<usize>,
    pub op: NodeOp,
    pub prologue: Vec<BasicKernel>,
    pub body: BasicKernel,
    pub epilogue: Vec<BasicKernel>,
    /// Graph tensors read (one, or two for add).
    pub inputs: Vec<usize>,
    pub output: usize,
    /// Layer whose weights this node consumes.
    pub param_layer: Option<usize>,
    pub geom: NodeGeom,
}

impl NodeKernel {
    pub fn macs(&self) -> u64 {
        let g = &self.geom;
        match self.op {
            NodeOp::Conv => (g.k_out * g.k_in * g.kh * g.kw * g.body_h * g.body_w) as u64,
            NodeOp::Fc => (g.k_in * g.k_out) as u64,
            _ => 0,
        }
    }

    pub fn weight_bytes(&self) -> usize {
        match self.op {
            NodeOp::Conv | NodeOp::Fc => (self.geom.k_out * (self.geom.weight_elems() + 1)) * ELEM_BYTES,
            _ => 0,
        }
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self.op, NodeOp::Relu | NodeOp::Add)
    }

    pub fn operands(&self) -> usize {
        self.inputs.len()
    }
}

/// Groups graph layers into node kernels: a pool consuming a conv is fused
/// into it, fused ReLUs become epilogues, everything else stands alone.
pub fn build_nodes(g: &NetworkGraph) -> Result<Vec<NodeKernel>> {
    let consumers = |t: usize| g.layers.iter().filter(|l| l.inputs.contains(&t)).count();
    let mut nodes = Vec::new();
    let mut i = 0;
    while i < g.layers.len() {
        let l = &g.layers[i];
        let mut layers = vec![i];
        let mut epilogue = Vec::new();
        let mut prologue = Vec::new();
        let mut name = l.id.clone();
        let (op, body) = match l.kind {
            LayerKind::Conv => (NodeOp::Conv, BasicKernel::Conv),
            LayerKind::FullyConnected => (NodeOp::Fc, BasicKernel::FullyConnected),
            LayerKind::Relu => (NodeOp::Relu, BasicKernel::Relu),
            LayerKind::Add => (NodeOp::Add, BasicKernel::Add),
            LayerKind::MaxPool => {
                return Err(Error::Graph(format!("{}: standalone pooling has no node kernel", l.id)));
            }
        };
        let mut geom = NodeGeom {
            k_in: l.k_in,
            k_out: l.k_out,
            kh: l.kh,
            kw: l.kw,
            stride: l.stride,
            pad_top: l.pad_top(),
            pad_left: l.pad_left(),
            h_in: l.h_in,
            w_in: l.w_in,
            body_h: l.h_out,
            body_w: l.w_out,
            h_out: l.h_out,
            w_out: l.w_out,
            pool: false,
            relu: l.fused_relu,
        };
        if matches!(op, NodeOp::Conv | NodeOp::Fc) {
            prologue.push(BasicKernel::SetBias);
        }
        let mut output = l.output;
        if op == NodeOp::Conv {
            if let Some(next) = g.layers.get(i + 1) {
                if next.kind == LayerKind::MaxPool && next.inputs == [l.output] && consumers(l.output) == 1 && !l.fused_relu {
                    layers.push(i + 1);
                    epilogue.push(BasicKernel::MaxPool2);
                    geom.pool = true;
                    geom.h_out = next.h_out;
                    geom.w_out = next.w_out;
                    output = next.output;
                    name = format!("{}+pool", l.id);
                }
            }
            if geom.padded() {
                prologue.insert(0, BasicKernel::PadMarshal);
            }
        }
        if l.fused_relu {
            epilogue.push(BasicKernel::Relu);
            name = format!("{}+relu", name);
        }
        let param_layer = l.kind.has_params().then_some(i);
        nodes.push(NodeKernel {
            name,
            op,
            prologue,
            body,
            epilogue,
            inputs: l.inputs.clone(),
            output,
            param_layer,
            geom,
            layers: layers.clone(),
        });
        i += layers.len();
    }
    Ok(nodes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Spatial,
    FeatureWise,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Spatial => "spatial",
            Scheme::FeatureWise => "feature-wise",
        }
    }
}

/// Bytes of one L1 buffer per stream. `input` is per operand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct L1Buffers {
    pub input: usize,
    pub weights: usize,
    pub output: usize,
    pub acc: usize,
    pub scratch: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DoubleBuffer {
    pub input: bool,
    pub weights: bool,
    pub output: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub node: usize,
    pub scheme: Scheme,
    /// Node-output rows per H tile.
    pub h_tile: usize,
    pub n_h: usize,
    pub kin_tile: usize,
    pub n_kin: usize,
    pub kout_tile: usize,
    pub n_kout: usize,
    pub operands: usize,
    pub bufs: L1Buffers,
    pub db: DoubleBuffer,
    pub est_cycles: f64,
}

/// One step of a plan's loop nest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    LoadWeights {
        slot: usize,
        kout: Range<usize>,
        bytes: usize,
    },
    LoadInput {
        operand: usize,
        slot: usize,
        ch: Range<usize>,
        rows: Range<i64>,
        cols: Range<i64>,
        bytes: usize,
    },
    Compute {
        tile: usize,
        kout: Range<usize>,
        kin: Range<usize>,
        out_rows: Range<usize>,
        first: bool,
        last: bool,
        in_slot: usize,
        w_slot: usize,
        out_slot: usize,
        macs: u64,
    },
    Store {
        slot: usize,
        kout: Range<usize>,
        rows: Range<usize>,
        bytes: usize,
    },
}

fn tile(i: usize, size: usize, n: usize) -> Range<usize> {
    i * size..((i + 1) * size).min(n)
}

fn clip(r: &Range<i64>, n: usize) -> usize {
    (r.end.min(n as i64) - r.start.max(0)).max(0) as usize
}

/// Split `n` items across the cores in contiguous chunks of `ceil(n / CORES)`.
pub fn worker_ranges(n: usize) -> Vec<Range<usize>> {
    let chunk = n.div_ceil(CORES).max(1);
    (0..CORES).map(|i| (i * chunk).min(n)..((i + 1) * chunk).min(n)).collect()
}

/// Fraction of core-slots doing useful work when `n` items are split.
pub fn utilization(n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    n as f64 / (CORES * n.div_ceil(CORES)) as f64
}

impl TilePlan {
    /// Total L1 bytes with every double buffer counted twice.
    pub fn footprint(&self) -> usize {
        let twice = |b: bool| if b { 2 } else { 1 };
        self.operands * self.bufs.input * twice(self.db.input)
            + self.bufs.weights * twice(self.db.weights)
            + self.bufs.output * twice(self.db.output)
            + self.bufs.acc
            + self.bufs.scratch
    }

    pub fn tile_count(&self) -> usize {
        self.n_h * self.n_kin * self.n_kout
    }

    /// Extent along which cores split the work of a compute step.
    pub fn split_extent(&self, node: &NodeKernel, kout: &Range<usize>, kin: &Range<usize>) -> usize {
        match (node.op, self.scheme) {
            (NodeOp::Fc, _) => kin.len(),
            (_, Scheme::Spatial) => node.geom.w_out,
            (_, Scheme::FeatureWise) => kout.len(),
        }
    }

    /// Per-core index ranges of a compute step: output columns (spatial),
    /// output channels (feature-wise) or input channels (fully connected).
    pub fn workers(&self, node: &NodeKernel, kout: &Range<usize>, kin: &Range<usize>) -> Vec<Range<usize>> {
        let n = self.split_extent(node, kout, kin);
        let base = match (node.op, self.scheme) {
            (NodeOp::Fc, _) => kin.start,
            (_, Scheme::Spatial) => 0,
            (_, Scheme::FeatureWise) => kout.start,
        };
        worker_ranges(n).into_iter().map(|r| r.start + base..r.end + base).collect()
    }

    /// Emits the plan's steps in execution order.
    pub fn walk(&self, node: &NodeKernel, mut f: impl FnMut(&Step)) {
        let g = &node.geom;
        let slot = |db: bool, i: usize| if db { i % 2 } else { 0 };
        let cols = if node.op == NodeOp::Fc { 0..1 } else { g.in_cols() };
        let col_count = clip(&cols, if node.op == NodeOp::Fc { 1 } else { g.w_in });
        let h_in = if node.op == NodeOp::Fc { 1 } else { g.h_in };
        let load = |operand: usize, slot: usize, ch: Range<usize>, rows: Range<i64>| {
            let bytes = ch.len() * clip(&rows, h_in) * col_count * ELEM_BYTES;
            Step::LoadInput { operand, slot, ch, rows, cols: cols.clone(), bytes }
        };
        let wbytes = |k: &Range<usize>| k.len() * (g.weight_elems() + 1) * ELEM_BYTES;
        let store = |slot: usize, kout: Range<usize>, rows: Range<usize>| {
            let bytes = kout.len() * rows.len() * g.w_out * ELEM_BYTES;
            Step::Store { slot, kout, rows, bytes }
        };
        let macs = |kout: &Range<usize>, kin: &Range<usize>, body: &Range<usize>| -> u64 {
            match node.op {
                NodeOp::Conv => (kout.len() * kin.len() * g.kh * g.kw * body.len() * g.body_w) as u64,
                NodeOp::Fc => (kout.len() * kin.len()) as u64,
                _ => 0,
            }
        };
        let mut tile_idx = 0;
        let mut in_xfer = 0;

        if node.is_elementwise() {
            let (n_outer, outer_tile) = match self.scheme {
                Scheme::Spatial => (self.n_h, self.h_tile),
                Scheme::FeatureWise => (self.n_kout, self.kout_tile),
            };
            for t in 0..n_outer {
                let (ch, rows) = match self.scheme {
                    Scheme::Spatial => (0..g.k_out, tile(t, outer_tile, g.h_out)),
                    Scheme::FeatureWise => (tile(t, outer_tile, g.k_out), 0..g.h_out),
                };
                let s_in = slot(self.db.input, t);
                for op in 0..node.operands() {
                    f(&load(op, s_in, ch.clone(), g.in_rows(&rows)));
                }
                f(&Step::Compute {
                    tile: t,
                    kout: ch.clone(),
                    kin: ch.clone(),
                    out_rows: rows.clone(),
                    first: true,
                    last: true,
                    in_slot: s_in,
                    w_slot: 0,
                    out_slot: slot(self.db.output, t),
                    macs: 0,
                });
                f(&store(slot(self.db.output, t), ch, rows));
            }
            return;
        }

        match self.scheme {
            Scheme::Spatial => {
                let all = 0..g.k_out;
                f(&Step::LoadWeights { slot: 0, kout: all.clone(), bytes: wbytes(&all) });
                for t in 0..self.n_h {
                    let rows = tile(t, self.h_tile, g.h_out);
                    let body = g.body_rows(&rows);
                    let out_slot = slot(self.db.output, t);
                    for j in 0..self.n_kin {
                        let kin = tile(j, self.kin_tile, g.k_in);
                        let s_in = slot(self.db.input, in_xfer);
                        in_xfer += 1;
                        f(&load(0, s_in, kin.clone(), g.in_rows(&body)));
                        f(&Step::Compute {
                            tile: tile_idx,
                            kout: all.clone(),
                            kin: kin.clone(),
                            out_rows: rows.clone(),
                            first: j == 0,
                            last: j + 1 == self.n_kin,
                            in_slot: s_in,
                            w_slot: 0,
                            out_slot,
                            macs: macs(&all, &kin, &body),
                        });
                        tile_idx += 1;
                    }
                    f(&store(out_slot, all.clone(), rows));
                }
            }
            Scheme::FeatureWise => {
                let rows = 0..g.h_out;
                let body = g.body_rows(&rows);
                let in_rows = if node.op == NodeOp::Fc { 0..1 } else { g.in_rows(&body) };
                let mut in_slot = 0;
                for i in 0..self.n_kout {
                    let kout = tile(i, self.kout_tile, g.k_out);
                    let w_slot = slot(self.db.weights, i);
                    let out_slot = slot(self.db.output, i);
                    f(&Step::LoadWeights { slot: w_slot, kout: kout.clone(), bytes: wbytes(&kout) });
                    for j in 0..self.n_kin {
                        let kin = tile(j, self.kin_tile, g.k_in);
                        if self.n_kin > 1 || i == 0 {
                            in_slot = slot(self.db.input, in_xfer);
                            in_xfer += 1;
                            f(&load(0, in_slot, kin.clone(), in_rows.clone()));
                        }
                        f(&Step::Compute {
                            tile: tile_idx,
                            kout: kout.clone(),
                            kin: kin.clone(),
                            out_rows: rows.clone(),
                            first: j == 0,
                            last: j + 1 == self.n_kin,
                            in_slot,
                            w_slot,
                            out_slot,
                            macs: macs(&kout, &kin, &body),
                        });
                        tile_idx += 1;
                    }
                    f(&store(out_slot, kout, rows.clone()));
                }
            }
        }
    }

    pub fn steps(&self, node: &NodeKernel) -> Vec<Step> {
        let mut v = Vec::new();
        self.walk(node, |s| v.push(s.clone()));
        v
    }

    /// Ordered DMA transfers with offsets relative to the L2 tensor they touch.
    pub fn transfers(&self, node: &NodeKernel) -> Vec<Transfer> {
        let g = &node.geom;
        let (h_in, w_in) = if node.op == NodeOp::Fc { (1, 1) } else { (g.h_in, g.w_in) };
        let mut out = Vec::new();
        self.walk(node, |s| match s {
            Step::LoadWeights { kout, bytes, .. } => out.push(Transfer {
                dir: Direction::L2ToL1,
                stream: Stream::Weights,
                bytes: *bytes,
                l2_offset: kout.start * g.weight_elems() * ELEM_BYTES,
            }),
            Step::LoadInput { operand, ch, rows, cols, bytes, .. } => out.push(Transfer {
                dir: Direction::L2ToL1,
                stream: Stream::Input(*operand),
                bytes: *bytes,
                l2_offset: ((ch.start * h_in + rows.start.max(0) as usize) * w_in + cols.start.max(0) as usize) * ELEM_BYTES,
            }),
            Step::Store { kout, rows, bytes, .. } => out.push(Transfer {
                dir: Direction::L1ToL2,
                stream: Stream::Output,
                bytes: *bytes,
                l2_offset: (kout.start * g.h_out + rows.start) * g.w_out * ELEM_BYTES,
            }),
            Step::Compute { .. } => {}
        });
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    L3ToL2,
    L2ToL1,
    L1ToL2,
    L2ToL3,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::L3ToL2 => "L3->L2",
            Direction::L2ToL1 => "L2->L1",
            Direction::L1ToL2 => "L1->L2",
            Direction::L2ToL3 => "L2->L3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Input(usize),
    Weights,
    Output,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Input(0) => "in0",
            Stream::Input(_) => "in1",
            Stream::Weights => "weights",
            Stream::Output => "out",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub dir: Direction,
    pub stream: Stream,
    pub bytes: usize,
    pub l2_offset: usize,
}

/// Builds the candidate plan for the given tile extents, or `None` when the
/// extents make no sense for this node and scheme.
pub fn make_plan(node_idx: usize, node: &NodeKernel, scheme: Scheme, h_tile: usize, kin_tile: usize, kout_tile: usize) -> Option<TilePlan> {
    let g = &node.geom;
    if h_tile == 0 || kin_tile == 0 || kout_tile == 0 || h_tile > g.h_out || kin_tile > g.k_in || kout_tile > g.k_out {
        return None;
    }
    let n_h = g.h_out.div_ceil(h_tile);
    let n_kin = g.k_in.div_ceil(kin_tile);
    let n_kout = g.k_out.div_ceil(kout_tile);
    let e = ELEM_BYTES;
    let mut bufs = L1Buffers::default();
    let mut db = DoubleBuffer::default();
    let operands = node.operands();

    if node.is_elementwise() {
        match scheme {
            Scheme::Spatial if kin_tile == g.k_in && kout_tile == g.k_out => {
                bufs.input = g.k_in * h_tile * g.w_in * e;
                bufs.output = g.k_out * h_tile * g.w_out * e;
                db.input = n_h > 1;
                db.output = n_h > 1;
            }
            Scheme::FeatureWise if h_tile == g.h_out && kin_tile == kout_tile => {
                bufs.input = kin_tile * g.h_in * g.w_in * e;
                bufs.output = kout_tile * g.h_out * g.w_out * e;
                db.input = n_kout > 1;
                db.output = n_kout > 1;
            }
            _ => return None,
        }
        let n_kin = if scheme == Scheme::FeatureWise { 1 } else { n_kin };
        return Some(TilePlan {
            node: node_idx,
            scheme,
            h_tile,
            n_h,
            kin_tile,
            n_kin,
            kout_tile,
            n_kout,
            operands,
            bufs,
            db,
            est_cycles: 0.0,
        });
    }

    let wp = if node.op == NodeOp::Fc { 1 } else { (g.in_cols().end - g.in_cols().start) as usize };
    match scheme {
        Scheme::Spatial => {
            if node.op == NodeOp::Fc || kout_tile != g.k_out {
                return None;
            }
            let body = g.body_rows(&(0..h_tile));
            let in_rows = g.in_rows(&body);
            bufs.input = kin_tile * (in_rows.end - in_rows.start) as usize * wp * e;
            bufs.weights = node.weight_bytes();
            bufs.output = g.k_out * h_tile * g.w_out * e;
            if n_kin > 1 {
                bufs.acc = ACC_BYTES * g.k_out * body.len() * g.body_w;
            } else if g.pool {
                bufs.scratch = ACC_BYTES * body.len() * g.body_w;
            }
            db.input = n_h * n_kin > 1;
            db.output = n_h > 1;
        }
        Scheme::FeatureWise => {
            if h_tile != g.h_out {
                return None;
            }
            let body = g.body_rows(&(0..g.h_out));
            let rows = if node.op == NodeOp::Fc { 1 } else { (g.in_rows(&body).end - g.in_rows(&body).start) as usize };
            bufs.input = kin_tile * rows * wp * e;
            bufs.weights = kout_tile * (g.weight_elems() + 1) * e;
            bufs.output = kout_tile * g.h_out * g.w_out * e;
            if n_kin > 1 {
                bufs.acc = ACC_BYTES * kout_tile * body.len() * g.body_w;
            } else if g.pool {
                bufs.scratch = ACC_BYTES * body.len() * g.body_w;
            }
            db.input = n_kin > 1;
            db.weights = n_kout > 1;
            db.output = n_kout > 1;
        }
    }
    Some(TilePlan { node: node_idx, scheme, h_tile, n_h, kin_tile, n_kin, kout_tile, n_kout, operands, bufs, db, est_cycles: 0.0 })
}

/// Every feasible plan of one scheme, each with its estimated cycles filled in.
pub fn enumerate_tilings(
    node_idx: usize,
    node: &NodeKernel,
    l1_budget: usize,
    scheme: Scheme,
    params: &CycleParams,
) -> Result<Vec<TilePlan>> {
    let g = &node.geom;
    let mut out = Vec::new();
    let mut consider = |h: usize, kin: usize, kout: usize| {
        if let Some(mut p) = make_plan(node_idx, node, scheme, h, kin, kout) {
            if p.footprint() <= l1_budget {
                p.est_cycles = cost::node_cycles(node, &p, params).cluster_cycles();
                out.push(p);
            }
        }
    };
    match (node.is_elementwise(), scheme) {
        (true, Scheme::Spatial) => (1..=g.h_out).for_each(|h| consider(h, g.k_in, g.k_out)),
        // channel groups keep all cores busy
        (true, Scheme::FeatureWise) => (1..=g.k_out)
            .filter(|k| k % CORES == 0 || *k == g.k_out)
            .for_each(|k| consider(g.h_out, k, k)),
        (false, Scheme::Spatial) => {
            for h in 1..=g.h_out {
                for kin in 1..=g.k_in {
                    consider(h, kin, g.k_out);
                }
            }
        }
        (false, Scheme::FeatureWise) => {
            for kout in 1..=g.k_out {
                for kin in 1..=g.k_in {
                    consider(g.h_out, kin, kout);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Infeasible { node: node.name.clone(), budget: l1_budget });
    }
    Ok(out)
}

/// Total order used to pick among plans: cost, then fewer tiles, then taller
/// H tiles, then spatial before feature-wise.
pub fn plan_order(a: &TilePlan, b: &TilePlan) -> std::cmp::Ordering {
    a.est_cycles
        .total_cmp(&b.est_cycles)
        .then(a.tile_count().cmp(&b.tile_count()))
        .then(b.h_tile.cmp(&a.h_tile))
        .then(a.scheme.cmp(&b.scheme))
        .then(b.kout_tile.cmp(&a.kout_tile))
        .then(b.kin_tile.cmp(&a.kin_tile))
}

/// Drops every double buffer, halving the streamed buffers.
pub fn single_buffered(mut p: TilePlan, node: &NodeKernel, params: &CycleParams) -> TilePlan {
    p.db = DoubleBuffer::default();
    p.est_cycles = cost::node_cycles(node, &p, params).cluster_cycles();
    p
}

/// The plans `plan_layer` chooses from: double-buffered plans of both
/// schemes, or single-buffered ones when no double-buffered plan fits.
pub fn enumerate_candidates(node_idx: usize, node: &NodeKernel, l1_budget: usize, params: &CycleParams) -> Result<Vec<TilePlan>> {
    let mut out = Vec::new();
    for scheme in [Scheme::Spatial, Scheme::FeatureWise] {
        out.extend(enumerate_tilings(node_idx, node, l1_budget, scheme, params).unwrap_or_default());
    }
    if out.is_empty() {
        for scheme in [Scheme::Spatial, Scheme::FeatureWise] {
            let all = enumerate_tilings(node_idx, node, usize::MAX, scheme, params).unwrap_or_default();
            out.extend(all.into_iter().map(|p| single_buffered(p, node, params)).filter(|p| p.footprint() <= l1_budget));
        }
    }
    if out.is_empty() {
        return Err(Error::Infeasible { node: node.name.clone(), budget: l1_budget });
    }
    Ok(out)
}

/// Cheapest candidate plan.
pub fn plan_layer(node_idx: usize, node: &NodeKernel, l1_budget: usize, params: &CycleParams) -> Result<TilePlan> {
    let plans = enumerate_candidates(node_idx, node, l1_budget, params)?;
    Ok(plans.into_iter().min_by(plan_order).expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileSchedule {
    pub l1_budget: usize,
    pub nodes: Vec<NodeKernel>,
    pub plans: Vec<TilePlan>,
}

impl TileSchedule {
    pub fn transfer_bytes(&self, i: usize) -> usize {
        self.plans[i].transfers(&self.nodes[i]).iter().map(|t| t.bytes).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "node,scheme,h_tile,n_h,kin_tile,n_kin,kout_tile,n_kout,in_bytes,w_bytes,out_bytes,acc_bytes,scratch_bytes,db_in,db_w,db_out,l1_bytes,transfer_bytes,est_cycles\n",
        );
        for (i, (n, p)) in self.nodes.iter().zip(&self.plans).enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.0}",
                n.name,
                p.scheme.name(),
                p.h_tile,
                p.n_h,
                p.kin_tile,
                p.n_kin,
                p.kout_tile,
                p.n_kout,
                p.bufs.input,
                p.bufs.weights,
                p.bufs.output,
                p.bufs.acc,
                p.bufs.scratch,
                p.db.input as u8,
                p.db.weights as u8,
                p.db.output as u8,
                p.footprint(),
                self.transfer_bytes(i),
                p.est_cycles
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("L1 budget {} bytes, {} node kernels\n", self.l1_budget, self.nodes.len());
        for (i, (n, p)) in self.nodes.iter().zip(&self.plans).enumerate() {
            let _ = writeln!(
                s,
                "{:<14} {:<12} H {:>3}x{:<3} Kin {:>4}x{:<4} Kout {:>3}x{:<3} L1 {:>6} B  DMA {:>7} B  ~{:>9.0} cyc",
                n.name,
                p.scheme.name(),
                p.h_tile,
                p.n_h,
                p.kin_tile,
                p.n_kin,
                p.kout_tile,
                p.n_kout,
                p.footprint(),
                self.transfer_bytes(i),
                p.est_cycles
            );
        }
        s
    }
}

pub fn plan_network_with(g: &NetworkGraph, l1_budget: usize, params: &CycleParams) -> Result<TileSchedule> {
    let nodes = build_nodes(g)?;
    let plans = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| plan_layer(i, n, l1_budget, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(TileSchedule { l1_budget, nodes, plans })
}

/// Plans every node with the calibrated cycle model.
pub fn plan_network(g: &NetworkGraph, l1_budget: usize) -> Result<TileSchedule> {
    plan_network_with(g, l1_budget, &cost::calibrated()?.cycle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_dronet;

    fn nodes() -> Vec<NodeKernel> {
        build_nodes(&build_dronet()).unwrap()
    }

    fn params() -> CycleParams {
        CycleParams::prior()
    }

    #[test]
    fn eighteen_node_kernels() {
        let n = nodes();
        let names: Vec<_> = n.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv_1+pool", "relu_1", "conv_2+relu", "conv_3", "conv_4", "add_1", "relu_2", "conv_5+relu", "conv_6",
                "conv_7", "add_2", "relu_3", "conv_8+relu", "conv_9", "conv_10", "add_3+relu", "fully_1", "fully_2"
            ]
        );
        assert_eq!(n[0].epilogue, [BasicKernel::MaxPool2]);
        assert_eq!(n[0].prologue, [BasicKernel::PadMarshal, BasicKernel::SetBias]);
        assert_eq!(n[4].prologue, [BasicKernel::SetBias]);
        assert_eq!(n[2].epilogue, [BasicKernel::Relu]);
    }

    #[test]
    fn worker_split_covers_extent() {
        for n in [1, 7, 8, 25, 50, 100, 6272] {
            let r = worker_ranges(n);
            assert_eq!(r.len(), CORES);
            let mut next = 0;
            for w in &r {
                assert_eq!(w.start, next.min(n));
                next = w.end.max(next);
            }
            assert_eq!(next, n);
        }
        assert_eq!(utilization(8), 1.0);
        assert_eq!(utilization(50), 50.0 / 56.0);
    }

    #[test]
    fn conv9_full_maps_fit_64k() {
        let n = nodes();
        let plans = enumerate_tilings(13, &n[13], 64 * 1024, Scheme::FeatureWise, &params()).unwrap();
        assert!(plans.iter().any(|p| p.n_h == 1 && p.n_kin == 1 && p.n_kout > 1));
    }

    #[test]
    fn conv1_must_tile_h() {
        let n = nodes();
        assert!(enumerate_tilings(0, &n[0], 64 * 1024, Scheme::FeatureWise, &params()).is_err());
        let plans = enumerate_tilings(0, &n[0], 64 * 1024, Scheme::Spatial, &params()).unwrap();
        assert!(plans.iter().all(|p| p.n_h > 1));
        assert!(matches!(
            enumerate_tilings(0, &n[0], 1024, Scheme::Spatial, &params()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn conv1_minimal_stripe() {
        let n = nodes();
        let p = make_plan(0, &n[0], Scheme::Spatial, 1, 1, 32).unwrap();
        // 7 input rows of 203 padded columns, 32x1x50 output, all 800 weights+biases
        assert_eq!(p.bufs.input, 7 * 203 * 2);
        assert_eq!(p.bufs.output, 32 * 50 * 2);
        assert_eq!(p.bufs.weights, 32 * 26 * 2);
        assert_eq!(p.bufs.scratch, 2 * 100 * 4);
        assert!(p.footprint() <= 16 * 1024);
        assert!(p.footprint() > 8 * 1024);
    }

    #[test]
    fn stripes_overlap_by_kh_minus_stride() {
        let n = nodes();
        for (i, node) in n.iter().enumerate().filter(|(_, n)| n.op == NodeOp::Conv) {
            let Some(p) = make_plan(i, node, Scheme::Spatial, 2, node.geom.k_in, node.geom.k_out) else { continue };
            let rows: Vec<_> = p
                .steps(node)
                .into_iter()
                .filter_map(|s| if let Step::LoadInput { rows, .. } = s { Some(rows) } else { None })
                .collect();
            for w in rows.windows(2) {
                let overlap = w[0].end - w[1].start;
                assert_eq!(overlap, node.geom.kh as i64 - node.geom.stride as i64, "{}", node.name);
            }
        }
    }

    #[test]
    fn stores_cover_output_once() {
        let n = nodes();
        for (i, node) in n.iter().enumerate() {
            for scheme in [Scheme::Spatial, Scheme::FeatureWise] {
                let Ok(plans) = enumerate_tilings(i, node, 32 * 1024, scheme, &params()) else { continue };
                for p in plans.iter().step_by(7) {
                    let g = &node.geom;
                    let mut seen = vec![0u8; g.k_out * g.h_out];
                    p.walk(node, |s| {
                        if let Step::Store { kout, rows, .. } = s {
                            for k in kout.clone() {
                                for r in rows.clone() {
                                    seen[k * g.h_out + r] += 1;
                                }
                            }
                        }
                    });
                    assert!(seen.iter().all(|&c| c == 1), "{} {:?}", node.name, p);
                }
            }
        }
    }

    #[test]
    fn plan_is_enumeration_minimum() {
        let n = nodes();
        for (i, node) in n.iter().enumerate() {
            let best = plan_layer(i, node, DEFAULT_L1_BUDGET, &params()).unwrap();
            for scheme in [Scheme::Spatial, Scheme::FeatureWise] {
                if let Ok(all) = enumerate_tilings(i, node, DEFAULT_L1_BUDGET, scheme, &params()) {
                    assert!(all.iter().all(|p| p.est_cycles >= best.est_cycles));
                }
            }
        }
    }

    #[test]
    fn whole_network_budgets() {
        let g = build_dronet();
        let s = plan_network_with(&g, 64 * 1024, &params()).unwrap();
        assert_eq!(s.plans.len(), 18);
        assert!(s.plans.iter().all(|p| p.footprint() <= 64 * 1024));
        match plan_network_with(&g, 8 * 1024, &params()) {
            Err(Error::Infeasible { node, .. }) => assert_eq!(node, "conv_1+pool"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn double_buffering_follows_tile_counts() {
        let g = build_dronet();
        let s = plan_network_with(&g, 32 * 1024, &params()).unwrap();
        for p in &s.plans {
            match p.scheme {
                Scheme::Spatial => {
                    assert_eq!(p.db.output, p.n_h > 1, "{p:?}");
                    assert!(!p.db.weights);
                }
                Scheme::FeatureWise => {
                    assert_eq!(p.n_h, 1);
                    assert_eq!(p.db.weights, p.n_kout > 1 && p.bufs.weights > 0, "{p:?}");
                }
            }
        }
    }
}
