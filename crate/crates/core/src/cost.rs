//! Calibrated cycle, time, power and energy model.
//!
//! Cluster compute per step is
//! `MACs / (cores * eta * u) + c_row * rowops + c_plane * planes`, where `u` is
//! the fraction of cores kept busy by the work split and the overhead counts are
//! per core. Elementwise nodes add a fixed `c_ew`. Every L2/L1 transfer costs
//! `c_dma` cycles of programming on the cluster; its payload moves at a fixed
//! bandwidth and hides behind the neighbouring compute step whenever its stream
//! is double-buffered. Weights stream from L3 with the cluster clock-gated.
//!
//! The free parameters are fitted to reference measurements shipped as CSV
//! files (see [`Targets`]).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::net::{build_dronet, NetworkGraph};
use crate::tiler::{
    plan_network_with, utilization, NodeKernel, NodeOp, Scheme, Step, TilePlan, TileSchedule, CORES,
    DEFAULT_L1_BUDGET,
};

/// Peak per-core MAC/cycle of the 3x3 convolution kernel.
pub const ETA_CONV: f64 = 0.64;
/// Cluster DMA bandwidth between L2 and L1.
pub const L2L1_BYTES_PER_CYCLE: f64 = 8.0;
/// Image sensor power.
pub const CAMERA_MW: f64 = 4.5;
/// External DRAM power while transferring.
pub const DRAM_MW: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleParams {
    pub cores: usize,
    /// MAC/cycle/core of 3x3 (and larger) convolutions. Fixed.
    pub eta_conv: f64,
    /// MAC/cycle/core of pointwise convolutions and dense layers. Fitted.
    pub eta_pw: f64,
    /// Cycles per convolution row segment per core. Fitted.
    pub c_row: f64,
    /// Cycles per output plane per core per step. Fitted.
    pub c_plane: f64,
    /// Fixed cycles per elementwise node. Fitted.
    pub c_ew: f64,
    /// Exposed cycles to program one L2/L1 transfer. Fitted.
    pub c_dma: f64,
    pub l2l1_bytes_per_cycle: f64,
    /// L3 to L2 bandwidth in bytes per fabric-controller cycle. Fitted.
    pub l3_bytes_per_fc_cycle: f64,
    /// Fraction of L3 traffic hidden under compute.
    pub l3_overlap: f64,
}

impl CycleParams {
    /// Starting point of the calibration loop.
    pub fn prior() -> Self {
        CycleParams {
            cores: CORES,
            eta_conv: ETA_CONV,
            eta_pw: 0.5,
            c_row: 2.0,
            c_plane: 100.0,
            c_ew: 10000.0,
            c_dma: 50.0,
            l2l1_bytes_per_cycle: L2L1_BYTES_PER_CYCLE,
            l3_bytes_per_fc_cycle: 0.6,
            l3_overlap: 0.0,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = self.eta_conv > 0.0
            && self.eta_conv <= 1.0
            && self.eta_pw > 0.0
            && self.eta_pw <= 1.0
            && [self.c_row, self.c_plane, self.c_ew, self.c_dma].iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.l2l1_bytes_per_cycle > 0.0
            && self.l3_bytes_per_fc_cycle > 0.0
            && (0.0..=1.0).contains(&self.l3_overlap);
        if ok {
            Ok(())
        } else {
            Err(Error::Uncalibrated(format!("{self:?}")))
        }
    }
}

/// `P = loss * V^2 * (k_fc * f_fc + (k1 * f_cl + k2 * f_cl^2) * duty)` in mW with
/// frequencies in MHz. `duty` is the share of frame time the cluster computes;
/// it is clock-gated during L3 transfers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerParams {
    pub k_fc: f64,
    pub k1_cl: f64,
    pub k2_cl: f64,
    /// DC/DC conversion loss multiplier.
    pub loss: f64,
    pub camera_mw: f64,
    pub dram_mw: f64,
}

impl PowerParams {
    fn check(&self) -> Result<()> {
        if [self.k_fc, self.k1_cl, self.k2_cl].iter().all(|v| *v >= 0.0 && v.is_finite()) && self.loss >= 1.0 {
            Ok(())
        } else {
            Err(Error::Uncalibrated(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpPoint {
    pub vdd: f64,
    pub f_fc_mhz: f64,
    pub f_cl_mhz: f64,
}

impl OpPoint {
    pub const fn new(vdd: f64, f_fc_mhz: f64, f_cl_mhz: f64) -> Self {
        OpPoint { vdd, f_fc_mhz, f_cl_mhz }
    }
}

/// Per-node cycle breakdown. Cluster quantities are in cluster cycles, L3 in
/// fabric-controller cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NodeCycles {
    pub compute: f64,
    pub l2l1_total: f64,
    pub l2l1_exposed: f64,
    pub l3_fc: f64,
    pub macs: u64,
}

impl NodeCycles {
    /// Cycles the cluster is busy or stalled for this node.
    pub fn cluster_cycles(&self) -> f64 {
        self.compute + self.l2l1_exposed
    }
}

/// Linear features of a node's compute cycles:
/// `[3x3 MACs per core, pointwise MACs per core, rowops, planes, elementwise nodes]`.
pub type Features = [f64; 5];

fn step_features(node: &NodeKernel, plan: &TilePlan, step: &Step) -> Features {
    let Step::Compute { kout, kin, out_rows, macs, .. } = step else {
        return [0.0; 5];
    };
    let g = &node.geom;
    let lanes = match plan.scheme {
        Scheme::Spatial => kout.len() as f64,
        Scheme::FeatureWise => kout.len().div_ceil(CORES) as f64,
    };
    let mut f = [0.0; 5];
    match node.op {
        NodeOp::Conv | NodeOp::Fc => {
            let m = *macs as f64 / (CORES as f64 * utilization(plan.split_extent(node, kout, kin)));
            if node.op == NodeOp::Conv && g.kh * g.kw > 1 {
                f[0] = m;
            } else {
                f[1] = m;
            }
            if node.op == NodeOp::Conv {
                f[2] = lanes * (kin.len() * g.kh * g.body_rows(out_rows).len()) as f64;
                f[3] = lanes;
            } else {
                f[3] = 1.0;
            }
        }
        NodeOp::Relu | NodeOp::Add => f[3] = lanes,
    }
    f
}

fn dot(f: &Features, p: &CycleParams) -> f64 {
    f[0] / p.eta_conv + f[1] / p.eta_pw + f[2] * p.c_row + f[3] * p.c_plane + f[4] * p.c_ew
}

/// Summed compute features of one node.
pub fn node_features(node: &NodeKernel, plan: &TilePlan) -> Features {
    let mut total = [0.0; 5];
    plan.walk(node, |s| {
        for (t, v) in total.iter_mut().zip(step_features(node, plan, s)) {
            *t += v;
        }
    });
    if node.is_elementwise() {
        total[4] = 1.0;
    }
    total
}

/// Number of L2/L1 transfers a plan issues.
pub fn transfer_count(node: &NodeKernel, plan: &TilePlan) -> usize {
    let mut n = 0;
    plan.walk(node, |s| n += usize::from(!matches!(s, Step::Compute { .. })));
    n
}

/// Cycles of one node under `plan`.
pub fn node_cycles(node: &NodeKernel, plan: &TilePlan, p: &CycleParams) -> NodeCycles {
    let mut out = NodeCycles { macs: node.macs(), ..Default::default() };
    let mut slack = 0.0f64;
    let mut pending_store = 0.0f64;
    let mut seen_compute = false;
    plan.walk(node, |s| match s {
        Step::LoadWeights { bytes, .. } | Step::LoadInput { bytes, .. } => {
            let dma = *bytes as f64 / p.l2l1_bytes_per_cycle;
            out.l2l1_total += dma + p.c_dma;
            out.l2l1_exposed += p.c_dma;
            let db = if matches!(s, Step::LoadWeights { .. }) { plan.db.weights } else { plan.db.input };
            if db && seen_compute {
                let hidden = dma.min(slack);
                slack -= hidden;
                out.l2l1_exposed += dma - hidden;
            } else {
                out.l2l1_exposed += dma;
            }
        }
        Step::Compute { .. } => {
            let c = dot(&step_features(node, plan, s), p);
            out.compute += c;
            let hidden = pending_store.min(c);
            out.l2l1_exposed += pending_store - hidden;
            pending_store = 0.0;
            slack = c - hidden;
            seen_compute = true;
        }
        Step::Store { bytes, .. } => {
            let dma = *bytes as f64 / p.l2l1_bytes_per_cycle;
            out.l2l1_total += dma + p.c_dma;
            out.l2l1_exposed += p.c_dma;
            if plan.db.output {
                pending_store += dma;
            } else {
                out.l2l1_exposed += dma;
            }
        }
    });
    out.l2l1_exposed += pending_store;
    if node.is_elementwise() {
        out.compute += p.c_ew;
    }
    out.l3_fc = node.weight_bytes() as f64 / p.l3_bytes_per_fc_cycle;
    out
}

/// Exposed payload DMA of a node, which the fit treats as a known offset.
fn node_offset(node: &NodeKernel, plan: &TilePlan, p: &CycleParams) -> f64 {
    node_cycles(node, plan, &CycleParams { c_dma: 0.0, ..*p }).l2l1_exposed
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub cycles: NodeCycles,
    /// Cluster time including exposed L2/L1 DMA.
    pub exec_ms: f64,
    pub l3_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub op: OpPoint,
    pub layers: Vec<LayerCost>,
    pub macs: u64,
    pub compute_cycles: f64,
    pub l2l1_total_cycles: f64,
    pub l2l1_exposed_cycles: f64,
    /// L3 transfer time expressed in cluster cycles at this operating point.
    pub l3_cl_cycles: f64,
    pub l3_fc_cycles: f64,
    pub total_cl_cycles: f64,
    pub frame_s: f64,
    pub fps: f64,
    /// Share of the frame during which the cluster computes.
    pub cluster_duty: f64,
    pub soc_mw: f64,
    pub board_mw: f64,
    pub energy_mj: f64,
}

impl CostReport {
    /// Aggregate MAC per cluster cycle.
    pub fn mac_per_cycle(&self) -> f64 {
        self.macs as f64 / self.total_cl_cycles
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,compute_cycles,l2l1_cycles,l2l1_exposed_cycles,l3_fc_cycles,exec_ms,l3_ms\n");
        for l in &self.layers {
            let c = &l.cycles;
            let _ = writeln!(
                s,
                "{},{:.0},{:.0},{:.0},{:.0},{:.3},{:.3}",
                l.name, c.compute, c.l2l1_total, c.l2l1_exposed, c.l3_fc, l.exec_ms, l.l3_ms
            );
        }
        let _ = writeln!(
            s,
            "total,{:.0},{:.0},{:.0},{:.0},{:.3},{:.3}",
            self.compute_cycles,
            self.l2l1_total_cycles,
            self.l2l1_exposed_cycles,
            self.l3_fc_cycles,
            (self.compute_cycles + self.l2l1_exposed_cycles) / (self.op.f_cl_mhz * 1e3),
            self.l3_fc_cycles / (self.op.f_fc_mhz * 1e3)
        );
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "operating point: VDD {:.2} V, FC {} MHz, CL {} MHz\n",
            self.op.vdd, self.op.f_fc_mhz, self.op.f_cl_mhz
        );
        for l in &self.layers {
            let _ = writeln!(s, "  {:<14} exec {:>7.2} ms   L3 {:>6.2} ms", l.name, l.exec_ms, l.l3_ms);
        }
        let m = 1e6;
        let _ = writeln!(s, "cycles: L3/L2 {:.2} M, L2/L1 {:.2} M, compute {:.2} M, total {:.2} M",
            self.l3_cl_cycles / m, self.l2l1_exposed_cycles / m, self.compute_cycles / m, self.total_cl_cycles / m);
        let _ = writeln!(s, "throughput {:.2} MAC/cycle", self.mac_per_cycle());
        let _ = writeln!(s, "frame {:.1} ms, {:.2} fps", self.frame_s * 1e3, self.fps);
        let _ = writeln!(s, "power {:.1} mW (board {:.1} mW), energy {:.2} mJ/frame", self.soc_mw, self.board_mw, self.energy_mj);
        s
    }
}

/// Average SoC power at `op` given the cluster's share of frame time.
pub fn soc_power_mw(pw: &PowerParams, op: &OpPoint, cluster_duty: f64) -> f64 {
    let v2 = op.vdd * op.vdd;
    pw.loss * v2 * (pw.k_fc * op.f_fc_mhz + (pw.k1_cl * op.f_cl_mhz + pw.k2_cl * op.f_cl_mhz * op.f_cl_mhz) * cluster_duty)
}

pub fn frame_report(s: &TileSchedule, op: OpPoint, cal: &Calibration) -> Result<CostReport> {
    cal.cycle.check()?;
    cal.power.check()?;
    if op.vdd <= 0.0 || op.f_fc_mhz <= 0.0 || op.f_cl_mhz <= 0.0 {
        return Err(Error::Domain(format!("operating point {op:?}")));
    }
    let p = &cal.cycle;
    let mut layers = Vec::with_capacity(s.nodes.len());
    for (n, plan) in s.nodes.iter().zip(&s.plans) {
        let c = node_cycles(n, plan, p);
        layers.push(LayerCost {
            name: n.name.clone(),
            cycles: c,
            exec_ms: c.cluster_cycles() / (op.f_cl_mhz * 1e3),
            l3_ms: c.l3_fc * (1.0 - p.l3_overlap) / (op.f_fc_mhz * 1e3),
        });
    }
    let sum = |f: &dyn Fn(&NodeCycles) -> f64| layers.iter().map(|l| f(&l.cycles)).sum::<f64>();
    let compute = sum(&|c| c.compute);
    let l2l1_total = sum(&|c| c.l2l1_total);
    let l2l1_exposed = sum(&|c| c.l2l1_exposed);
    let l3_fc = sum(&|c| c.l3_fc) * (1.0 - p.l3_overlap);
    let t_cl = (compute + l2l1_exposed) / (op.f_cl_mhz * 1e6);
    let t_l3 = l3_fc / (op.f_fc_mhz * 1e6);
    let frame_s = t_cl + t_l3;
    let duty = t_cl / frame_s;
    let soc_mw = soc_power_mw(&cal.power, &op, duty);
    let board_mw = soc_mw + cal.power.camera_mw + cal.power.dram_mw * (t_l3 / frame_s);
    let l3_cl = l3_fc * op.f_cl_mhz / op.f_fc_mhz;
    Ok(CostReport {
        op,
        macs: layers.iter().map(|l| l.cycles.macs).sum(),
        layers,
        compute_cycles: compute,
        l2l1_total_cycles: l2l1_total,
        l2l1_exposed_cycles: l2l1_exposed,
        l3_cl_cycles: l3_cl,
        l3_fc_cycles: l3_fc,
        total_cl_cycles: compute + l2l1_exposed + l3_cl,
        frame_s,
        fps: 1.0 / frame_s,
        cluster_duty: duty,
        soc_mw,
        board_mw,
        energy_mj: soc_mw * frame_s,
    })
}

/// Cycles of one node, the model's per-layer entry point.
pub fn layer_cycles(node: &NodeKernel, plan: &TilePlan, cal: &Calibration) -> Result<NodeCycles> {
    cal.cycle.check()?;
    Ok(node_cycles(node, plan, &cal.cycle))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTarget {
    pub node: String,
    pub avg_power_mw: f64,
    pub exec_ms: f64,
    pub l3_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpTarget {
    pub role: String,
    pub op: OpPoint,
    pub avg_power_mw: f64,
    pub pre_loss_mw: Option<f64>,
    pub fps: f64,
}

/// Reference measurements the model is fitted to.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Per-node execution times at `layer_op`.
    pub layers: Vec<LayerTarget>,
    pub layer_op: OpPoint,
    /// Cycle breakdown at FC = CL = 50 MHz: L3/L2, L2/L1, compute, total.
    pub breakdown: [f64; 4],
    pub points: Vec<OpTarget>,
}

const LAYER_CSV: &str = include_str!("../data/layer_times.csv");
const BREAKDOWN_CSV: &str = include_str!("../data/cycle_breakdown.csv");
const POINTS_CSV: &str = include_str!("../data/operating_points.csv");

fn csv_rows(text: &str, name: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Data(format!("{name}: missing header")))?;
    let cols = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if row.len() != cols {
                return Err(Error::Data(format!("{name}: row {} has {} fields, expected {cols}", i + 1, row.len())));
            }
            Ok(row)
        })
        .collect()
}

fn num(s: &str, name: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("{name}: not a number: {s:?}")))
}

fn opt_num(s: &str, name: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(s, name).map(Some)
    }
}

impl Targets {
    pub fn parse(layers: &str, breakdown: &str, points: &str) -> Result<Self> {
        let layers: Vec<LayerTarget> = csv_rows(layers, "layer_times.csv")?
            .into_iter()
            .map(|r| {
                Ok(LayerTarget {
                    node: r[0].clone(),
                    avg_power_mw: num(&r[1], "layer_times.csv")?,
                    exec_ms: num(&r[2], "layer_times.csv")?,
                    l3_ms: opt_num(&r[3], "layer_times.csv")?,
                })
            })
            .collect::<Result<_>>()?;
        let b = csv_rows(breakdown, "cycle_breakdown.csv")?;
        let b = b.first().ok_or_else(|| Error::Data("cycle_breakdown.csv: no data row".into()))?;
        let breakdown = [0, 1, 2, 3].map(|i| num(&b[i], "cycle_breakdown.csv"));
        let breakdown = [breakdown[0].as_ref(), breakdown[1].as_ref(), breakdown[2].as_ref(), breakdown[3].as_ref()];
        let breakdown = {
            let mut out = [0.0; 4];
            for (o, v) in out.iter_mut().zip(breakdown) {
                *o = *v.map_err(|e| Error::Data(e.to_string()))?;
            }
            out
        };
        let points: Vec<OpTarget> = csv_rows(points, "operating_points.csv")?
            .into_iter()
            .map(|r| {
                let n = |i: usize| num(&r[i], "operating_points.csv");
                Ok(OpTarget {
                    role: r[0].clone(),
                    op: OpPoint::new(n(1)?, n(2)?, n(3)?),
                    avg_power_mw: n(4)?,
                    pre_loss_mw: opt_num(&r[5], "operating_points.csv")?,
                    fps: n(6)?,
                })
            })
            .collect::<Result<_>>()?;
        let layer_op = points
            .iter()
            .find(|p| p.role == "efficient")
            .map(|p| p.op)
            .ok_or_else(|| Error::Data("operating_points.csv: no efficient row".into()))?;
        Ok(Targets { layers, layer_op, breakdown, points })
    }

    /// The shipped reference data.
    pub fn embedded() -> Self {
        Self::parse(LAYER_CSV, BREAKDOWN_CSV, POINTS_CSV).expect("embedded data is valid")
    }

    /// Reads the three files from `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let d = dir.as_ref();
        let read = |f: &str| std::fs::read_to_string(d.join(f)).map_err(|e| Error::Data(format!("{}: {e}", d.join(f).display())));
        Self::parse(&read("layer_times.csv")?, &read("cycle_breakdown.csv")?, &read("operating_points.csv")?)
    }

    /// `NANOTILE_DATA_DIR` if set, otherwise the embedded data.
    pub fn load() -> Result<Self> {
        match std::env::var_os("NANOTILE_DATA_DIR") {
            Some(d) => Self::from_dir(d),
            None => Ok(Self::embedded()),
        }
    }

    pub fn point(&self, role: &str) -> Option<&OpTarget> {
        self.points.iter().find(|p| p.role == role)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    pub name: String,
    pub target: f64,
    pub predicted: f64,
    pub tolerance: f64,
}

impl FitRow {
    pub fn rel_err(&self) -> f64 {
        (self.predicted - self.target) / self.target
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub rows: Vec<FitRow>,
    pub free_parameters: usize,
    pub iterations: usize,
    /// Largest |relative error| divided by its tolerance.
    pub worst_normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub cycle: CycleParams,
    pub power: PowerParams,
    pub fit: FitReport,
}

/// Relative tolerance on per-node execution-time targets.
pub const LAYER_TOL: f64 = 0.30;
/// Relative tolerance on the frame-level cycle total.
pub const TOTAL_TOL: f64 = 0.10;

/// Non-negative least squares by exhaustive support search; exact for the
/// handful of columns used here.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut best = (f64::INFINITY, DVector::zeros(n));
    for mask in 0u32..(1 << n) {
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let mut x = DVector::zeros(n);
        if !cols.is_empty() {
            let sub = a.select_columns(&cols);
            let Ok(sol) = sub.clone().svd(true, true).solve(b, 1e-12) else { continue };
            if sol.iter().any(|v| *v < 0.0) {
                continue;
            }
            for (k, &j) in cols.iter().enumerate() {
                x[j] = sol[k];
            }
        }
        let r = (a * &x - b).norm_squared();
        if !best.0.is_finite() || r < best.0 - 1e-9 * best.0.max(1.0) {
            best = (r, x);
        }
    }
    best.1
}

/// Minimax (L-infinity) non-negative fit of `a x ~ b` by Lawson's iteratively
/// reweighted least squares.
pub fn minimax_nnls(a: &DMatrix<f64>, b: &DVector<f64>, iterations: usize) -> DVector<f64> {
    let m = a.nrows();
    let mut w = DVector::from_element(m, 1.0 / m as f64);
    let mut best = (f64::INFINITY, DVector::zeros(a.ncols()));
    for _ in 0..iterations {
        let sw = w.map(f64::sqrt);
        let aw = DMatrix::from_fn(m, a.ncols(), |i, j| a[(i, j)] * sw[i]);
        let bw = b.component_mul(&sw);
        let x = nnls(&aw, &bw);
        let r = a * &x - b;
        let worst = r.amax();
        if worst < best.0 {
            best = (worst, x);
        }
        let scaled: DVector<f64> = w.component_mul(&r.abs());
        let total = scaled.sum();
        if total <= 0.0 {
            break;
        }
        w = scaled / total;
    }
    best.1
}

struct FitRow0 {
    name: String,
    target: f64,
    tol: f64,
    feats: Features,
    xfers: f64,
    /// Exposed payload DMA.
    offset: f64,
}

impl FitRow0 {
    fn predict(&self, p: &CycleParams) -> f64 {
        self.offset + dot(&self.feats, p) + self.xfers * p.c_dma
    }
}

/// Per-node rows, then the frame's compute row and its exposed L2/L1 row.
fn build_problem(sched: &TileSchedule, t: &Targets, p: &CycleParams) -> Result<Vec<FitRow0>> {
    let mut rows = Vec::new();
    let cycles_per_ms = t.layer_op.f_cl_mhz * 1e3;
    let mut compute = FitRow0 { name: "compute".into(), target: t.breakdown[2], tol: TOTAL_TOL, feats: [0.0; 5], xfers: 0.0, offset: 0.0 };
    let mut dma = FitRow0 { name: "L2/L1 DMA".into(), target: t.breakdown[1], tol: TOTAL_TOL, feats: [0.0; 5], xfers: 0.0, offset: 0.0 };
    for (n, plan) in sched.nodes.iter().zip(&sched.plans) {
        let f = node_features(n, plan);
        let xf = transfer_count(n, plan) as f64;
        let o = node_offset(n, plan, p);
        for (a, b) in compute.feats.iter_mut().zip(f) {
            *a += b;
        }
        dma.xfers += xf;
        dma.offset += o;
        let Some(lt) = t.layers.iter().find(|l| l.node == n.name) else {
            continue;
        };
        rows.push(FitRow0 { name: n.name.clone(), target: lt.exec_ms * cycles_per_ms, tol: LAYER_TOL, feats: f, xfers: xf, offset: o });
    }
    rows.push(compute);
    rows.push(dma);
    if rows.len() < 7 || rows.iter().any(|r| r.target <= 0.0) {
        return Err(Error::Underdetermined(format!("{} usable targets for 5 cycle parameters", rows.len())));
    }
    Ok(rows)
}

/// Fits `eta_pw, c_row, c_plane, c_ew, c_dma` with plans held fixed.
fn fit_cycles(rows: &[FitRow0], p: &CycleParams) -> CycleParams {
    // unknowns: [1/eta_pw - 1, c_row, c_plane, c_ew, c_dma], all >= 0
    let m = rows.len();
    let a = DMatrix::from_fn(m, 5, |i, j| {
        let r = &rows[i];
        let v = if j == 4 { r.xfers } else { r.feats[j + 1] };
        v / (r.target * r.tol)
    });
    let b = DVector::from_fn(m, |i, _| {
        let r = &rows[i];
        let known = r.offset + r.feats[0] / p.eta_conv + r.feats[1];
        (r.target - known) / (r.target * r.tol)
    });
    let x = minimax_nnls(&a, &b, 300);
    CycleParams { eta_pw: 1.0 / (1.0 + x[0]), c_row: x[1], c_plane: x[2], c_ew: x[3], c_dma: x[4], ..*p }
}

fn fit_power(t: &Targets, cycle: &CycleParams, sched: &TileSchedule) -> Result<PowerParams> {
    let eff = t.point("efficient").ok_or_else(|| Error::Data("no efficient operating point".into()))?;
    let peak = t.point("peak").ok_or_else(|| Error::Data("no peak operating point".into()))?;
    let loss = match eff.pre_loss_mw {
        Some(pre) if pre > 0.0 => eff.avg_power_mw / pre,
        _ => 1.0,
    };
    let (mut cl, mut l3) = (0.0, 0.0);
    for (n, plan) in sched.nodes.iter().zip(&sched.plans) {
        let c = node_cycles(n, plan, cycle);
        cl += c.cluster_cycles();
        l3 += c.l3_fc * (1.0 - cycle.l3_overlap);
    }
    let duty = |op: &OpPoint| {
        let tc = cl / op.f_cl_mhz;
        tc / (tc + l3 / op.f_fc_mhz)
    };
    let row = |o: &OpTarget| {
        let v2 = o.op.vdd * o.op.vdd * loss;
        let d = duty(&o.op);
        [v2 * o.op.f_fc_mhz, v2 * o.op.f_cl_mhz * d, v2 * o.op.f_cl_mhz * o.op.f_cl_mhz * d]
    };
    let (r1, r2) = (row(eff), row(peak));
    // energy per frame is minimised over f_cl where f_cl^2 = k_fc * f_fc / k2
    let f = &eff.op;
    let m = Matrix3::new(
        r1[0], r1[1], r1[2],
        r2[0], r2[1], r2[2],
        f.f_fc_mhz, 0.0, -f.f_cl_mhz * f.f_cl_mhz,
    );
    let rhs = Vector3::new(eff.avg_power_mw, peak.avg_power_mw, 0.0);
    let k = m.lu().solve(&rhs).ok_or_else(|| Error::Underdetermined("singular power system".into()))?;
    let pw = PowerParams { k_fc: k[0], k1_cl: k[1], k2_cl: k[2], loss, camera_mw: CAMERA_MW, dram_mw: DRAM_MW };
    pw.check()?;
    Ok(pw)
}

/// Fits cycle and power parameters, re-planning with each new cycle model
/// until the chosen plans stop changing.
pub fn calibrate(t: &Targets) -> Result<Calibration> {
    let g = build_dronet();
    calibrate_graph(&g, t)
}

pub fn calibrate_graph(g: &NetworkGraph, t: &Targets) -> Result<Calibration> {
    if t.layers.is_empty() {
        return Err(Error::Underdetermined("no per-layer targets".into()));
    }
    let mut p = CycleParams::prior();
    let weight_bytes: f64 = crate::tiler::build_nodes(g)?.iter().map(|n| n.weight_bytes() as f64).sum();
    if t.breakdown[0] <= 0.0 {
        return Err(Error::Data("L3 cycle target must be positive".into()));
    }
    // the breakdown is taken with both clocks equal, so its L3 entry is in FC cycles too
    p.l3_bytes_per_fc_cycle = weight_bytes / t.breakdown[0];
    let mut prev_plans: Option<Vec<TilePlan>> = None;
    let mut iterations = 0;
    let mut sched = plan_network_with(g, DEFAULT_L1_BUDGET, &p)?;
    for _ in 0..12 {
        iterations += 1;
        // exposed DMA depends on compute, so refit a few times per plan set
        for _ in 0..4 {
            p = fit_cycles(&build_problem(&sched, t, &p)?, &p);
        }
        sched = plan_network_with(g, DEFAULT_L1_BUDGET, &p)?;
        let same = prev_plans.as_ref().is_some_and(|prev| {
            prev.iter().zip(&sched.plans).all(|(a, b)| {
                (a.scheme, a.h_tile, a.kin_tile, a.kout_tile) == (b.scheme, b.h_tile, b.kin_tile, b.kout_tile)
            })
        });
        prev_plans = Some(sched.plans.clone());
        if same {
            break;
        }
    }
    let rows: Vec<FitRow> = build_problem(&sched, t, &p)?
        .iter()
        .map(|r| FitRow { name: r.name.clone(), target: r.target, predicted: r.predict(&p), tolerance: r.tol })
        .collect();
    let worst_normalized = rows.iter().map(|r| r.rel_err().abs() / r.tolerance).fold(0.0, f64::max);
    let power = fit_power(t, &p, &sched)?;
    p.check()?;
    Ok(Calibration {
        cycle: p,
        power,
        fit: FitReport { rows, free_parameters: 6, iterations, worst_normalized },
    })
}

static CALIBRATION: OnceLock<std::result::Result<Calibration, String>> = OnceLock::new();

/// Calibration against [`Targets::load`], computed once per process.
pub fn calibrated() -> Result<&'static Calibration> {
    CALIBRATION
        .get_or_init(|| Targets::load().and_then(|t| calibrate(&t)).map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::Uncalibrated(e.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub op: OpPoint,
    pub fps: f64,
    pub soc_mw: f64,
    pub energy_mj: f64,
}

/// The measured grid: up to 150 MHz at 1.0 V and up to 250 MHz at 1.2 V, in 50 MHz steps.
pub fn default_grid() -> Vec<OpPoint> {
    let mut v = Vec::new();
    for (vdd, fmax) in [(1.0, 150), (1.2, 250)] {
        for fc in (50..=fmax).step_by(50) {
            for cl in (50..=fmax).step_by(50) {
                v.push(OpPoint::new(vdd, fc as f64, cl as f64));
            }
        }
    }
    v
}

pub fn sweep(s: &TileSchedule, grid: &[OpPoint], cal: &Calibration) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&op| {
            let r = frame_report(s, op, cal)?;
            Ok(SweepPoint { op, fps: r.fps, soc_mw: r.soc_mw, energy_mj: r.energy_mj })
        })
        .collect()
}

pub fn min_energy(points: &[SweepPoint]) -> Option<SweepPoint> {
    points.iter().copied().min_by(|a, b| a.energy_mj.total_cmp(&b.energy_mj))
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("vdd,f_fc,f_cl,fps,mW,mJ_per_frame\n");
    for p in points {
        let _ = writeln!(s, "{:.1},{},{},{:.3},{:.2},{:.4}", p.op.vdd, p.op.f_fc_mhz, p.op.f_cl_mhz, p.fps, p.soc_mw, p.energy_mj);
    }
    s
}
