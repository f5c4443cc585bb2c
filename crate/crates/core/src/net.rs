//! The DroNet graph, MAC and parameter accounting, and the binary formats for
//! weights (PDRN) and input frames (PGM).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fxp::{self, Q412};
use crate::kernels::Tensor3;

/// Bytes per stored element (Q4.12).
pub const ELEM_BYTES: usize = 2;
/// Side of the square network input.
pub const INPUT_SIDE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Relu,
    Add,
    FullyConnected,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::FullyConnected => "fc",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::FullyConnected)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn elems(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn bytes(&self) -> usize {
        self.elems() * ELEM_BYTES
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub k_in: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub fused_relu: bool,
    /// Tensor ids read by this layer. `add` has two, everything else one.
    pub inputs: Vec<usize>,
    pub output: usize,
    /// For `add`: the layer that produced the bypass operand.
    pub bypass_source: Option<String>,
}

impl LayerSpec {
    /// Zero rows inserted above the input (TF-style "same" padding).
    pub fn pad_top(&self) -> usize {
        same_pad_before(self.h_in, self.h_out, self.kh, self.stride)
    }

    pub fn pad_left(&self) -> usize {
        same_pad_before(self.w_in, self.w_out, self.kw, self.stride)
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv => (self.k_in * self.k_out * self.kh * self.kw * self.h_out * self.w_out) as u64,
            LayerKind::FullyConnected => (self.k_in * self.k_out) as u64,
            _ => 0,
        }
    }

    pub fn weight_count(&self) -> usize {
        if self.kind.has_params() {
            self.k_in * self.k_out * self.kh * self.kw
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        if self.kind.has_params() {
            self.weight_count() + self.k_out
        } else {
            0
        }
    }

    /// Length of one output's reduction.
    pub fn dot_len(&self) -> usize {
        self.k_in * self.kh * self.kw
    }
}

/// Total padding split TF-style: the smaller half goes before.
pub fn same_pad_before(n_in: usize, n_out: usize, k: usize, s: usize) -> usize {
    let needed = (n_out.saturating_sub(1)) * s + k;
    needed.saturating_sub(n_in) / 2
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Shape,
    /// Producing layer, `None` for the graph input.
    pub producer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorInfo>,
    pub input: usize,
}

impl NetworkGraph {
    pub fn layer(&self, id: &str) -> Option<(usize, &LayerSpec)> {
        self.layers.iter().enumerate().find(|(_, l)| l.id == id)
    }

    pub fn shape(&self, tensor: usize) -> Shape {
        self.tensors[tensor].shape
    }

    /// The graph outputs: tensors nobody consumes, in layer order.
    pub fn outputs(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.output)
            .filter(|&t| !self.layers.iter().any(|l| l.inputs.contains(&t)))
            .collect()
    }

    /// Index of the last layer reading each tensor.
    pub fn last_use(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.tensors.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for &t in &l.inputs {
                last[t] = Some(i);
            }
        }
        last
    }

    /// For every `add`: (main path conv layers, bypass conv layer).
    pub fn res_blocks(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        for l in self.layers.iter().filter(|l| l.kind == LayerKind::Add) {
            let Some(src) = &l.bypass_source else { continue };
            let Some((bypass, bl)) = self.layer(src) else { continue };
            let main_operand = l.inputs.iter().copied().find(|&t| t != bl.output);
            let mut main = Vec::new();
            let mut cur = main_operand.and_then(|t| self.tensors[t].producer);
            while let Some(p) = cur {
                let pl = &self.layers[p];
                if pl.kind == LayerKind::Conv {
                    main.push(p);
                }
                if pl.inputs.first() == bl.inputs.first() {
                    break;
                }
                cur = pl.inputs.first().and_then(|&t| self.tensors[t].producer);
            }
            main.reverse();
            out.push((main, bypass));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("id,kind,k_in,k_out,kh,kw,stride,h_in,w_in,h_out,w_out,fused_relu,macs,params\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                l.id,
                l.kind.name(),
                l.k_in,
                l.k_out,
                l.kh,
                l.kw,
                l.stride,
                l.h_in,
                l.w_in,
                l.h_out,
                l.w_out,
                l.fused_relu,
                l.macs(),
                l.param_count()
            );
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<8} {:<7} {:>4}x{:<3}x{:<3} -> {:>4}x{:<3}x{:<3} k{}x{} s{}{}  {:>10} MAC",
                l.id,
                l.kind.name(),
                l.k_in,
                l.h_in,
                l.w_in,
                l.k_out,
                l.h_out,
                l.w_out,
                l.kh,
                l.kw,
                l.stride,
                if l.fused_relu { " +relu" } else { "" },
                l.macs()
            );
        }
        s
    }
}

/// Incremental graph construction with shape inference.
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorInfo>,
}

impl GraphBuilder {
    pub fn new(input: Shape) -> Self {
        GraphBuilder {
            layers: Vec::new(),
            tensors: vec![TensorInfo { name: "input".into(), shape: input, producer: None }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    fn push(&mut self, mut l: LayerSpec) -> usize {
        let t = self.tensors.len();
        self.tensors.push(TensorInfo {
            name: l.id.clone(),
            shape: Shape::new(l.k_out, l.h_out, l.w_out),
            producer: Some(self.layers.len()),
        });
        l.output = t;
        self.layers.push(l);
        t
    }

    fn base(&self, id: &str, kind: LayerKind, src: usize) -> LayerSpec {
        let s = self.tensors[src].shape;
        LayerSpec {
            id: id.into(),
            kind,
            k_in: s.c,
            k_out: s.c,
            kh: 1,
            kw: 1,
            stride: 1,
            h_in: s.h,
            w_in: s.w,
            h_out: s.h,
            w_out: s.w,
            fused_relu: false,
            inputs: vec![src],
            output: usize::MAX,
            bypass_source: None,
        }
    }

    pub fn conv(&mut self, id: &str, src: usize, k_out: usize, k: usize, stride: usize, relu: bool) -> usize {
        let mut l = self.base(id, LayerKind::Conv, src);
        l.k_out = k_out;
        l.kh = k;
        l.kw = k;
        l.stride = stride;
        l.h_out = l.h_in.div_ceil(stride);
        l.w_out = l.w_in.div_ceil(stride);
        l.fused_relu = relu;
        self.push(l)
    }

    pub fn maxpool2(&mut self, id: &str, src: usize) -> usize {
        let mut l = self.base(id, LayerKind::MaxPool, src);
        l.kh = 2;
        l.kw = 2;
        l.stride = 2;
        l.h_out = l.h_in.div_ceil(2);
        l.w_out = l.w_in.div_ceil(2);
        self.push(l)
    }

    pub fn relu(&mut self, id: &str, src: usize) -> usize {
        let l = self.base(id, LayerKind::Relu, src);
        self.push(l)
    }

    pub fn add(&mut self, id: &str, main: usize, bypass: usize, relu: bool) -> usize {
        let mut l = self.base(id, LayerKind::Add, main);
        l.inputs.push(bypass);
        l.fused_relu = relu;
        l.bypass_source = self.tensors[bypass].producer.map(|p| self.layers[p].id.clone());
        self.push(l)
    }

    pub fn fc(&mut self, id: &str, src: usize, out: usize) -> usize {
        let s = self.tensors[src].shape;
        let mut l = self.base(id, LayerKind::FullyConnected, src);
        l.k_in = s.elems();
        l.k_out = out;
        l.h_in = 1;
        l.w_in = 1;
        l.h_out = 1;
        l.w_out = 1;
        self.push(l)
    }

    pub fn finish(self) -> Result<NetworkGraph> {
        let g = NetworkGraph { layers: self.layers, tensors: self.tensors, input: 0 };
        validate_graph(&g)?;
        Ok(g)
    }
}

/// Shape propagation, producer uniqueness, topological order and headroom.
pub fn validate_graph(g: &NetworkGraph) -> Result<()> {
    let mut produced = vec![false; g.tensors.len()];
    produced[g.input] = true;
    for (i, l) in g.layers.iter().enumerate() {
        for &t in &l.inputs {
            if t >= g.tensors.len() || !produced[t] {
                return Err(Error::Graph(format!("{} reads tensor {t} before it is produced", l.id)));
            }
        }
        if l.output >= g.tensors.len() || produced[l.output] {
            return Err(Error::Graph(format!("{} output tensor has several producers", l.id)));
        }
        if g.tensors[l.output].producer != Some(i) {
            return Err(Error::Graph(format!("{} output producer mismatch", l.id)));
        }
        produced[l.output] = true;
        let s_in = g.tensors[l.inputs[0]].shape;
        let s_out = g.tensors[l.output].shape;
        let expect_in = match l.kind {
            LayerKind::FullyConnected => Shape::new(s_in.elems(), 1, 1),
            _ => s_in,
        };
        if (l.k_in, l.h_in, l.w_in) != (expect_in.c, expect_in.h, expect_in.w) {
            return Err(Error::Graph(format!("{} declared input extents disagree with tensor", l.id)));
        }
        let (eh, ew) = match l.kind {
            LayerKind::Conv | LayerKind::MaxPool => (l.h_in.div_ceil(l.stride), l.w_in.div_ceil(l.stride)),
            LayerKind::FullyConnected => (1, 1),
            _ => (l.h_in, l.w_in),
        };
        if (l.h_out, l.w_out) != (eh, ew) || (s_out.h, s_out.w, s_out.c) != (eh, ew, l.k_out) {
            return Err(Error::Graph(format!("{} output extents violate same-padding sizing", l.id)));
        }
        match l.kind {
            LayerKind::Add => {
                if l.inputs.len() != 2 || g.tensors[l.inputs[1]].shape != s_in || s_in != s_out {
                    return Err(Error::Graph(format!("{} operands differ in shape", l.id)));
                }
            }
            _ if l.inputs.len() != 1 => {
                return Err(Error::Graph(format!("{} expects one input", l.id)));
            }
            LayerKind::Relu | LayerKind::MaxPool if l.k_in != l.k_out => {
                return Err(Error::Graph(format!("{} changes channel count", l.id)));
            }
            _ => {}
        }
        if l.kind.has_params() {
            fxp::check_headroom(l.dot_len())?;
        }
    }
    Ok(())
}

/// The fixed DroNet topology with 2x2 max-pooling and folded batch norm.
pub fn build_dronet() -> NetworkGraph {
    let mut b = GraphBuilder::new(Shape::new(1, INPUT_SIDE, INPUT_SIDE));
    let x = b.input();
    let c1 = b.conv("conv_1", x, 32, 5, 2, false);
    let p1 = b.maxpool2("pool_1", c1);
    let r1 = b.relu("relu_1", p1);

    let c2 = b.conv("conv_2", r1, 32, 3, 2, true);
    let c3 = b.conv("conv_3", c2, 32, 3, 1, false);
    let c4 = b.conv("conv_4", r1, 32, 1, 2, false);
    let a1 = b.add("add_1", c3, c4, false);
    let r2 = b.relu("relu_2", a1);

    let c5 = b.conv("conv_5", r2, 64, 3, 2, true);
    let c6 = b.conv("conv_6", c5, 64, 3, 1, false);
    let c7 = b.conv("conv_7", r2, 64, 1, 2, false);
    let a2 = b.add("add_2", c6, c7, false);
    let r3 = b.relu("relu_3", a2);

    let c8 = b.conv("conv_8", r3, 128, 3, 2, true);
    let c9 = b.conv("conv_9", c8, 128, 3, 1, false);
    let c10 = b.conv("conv_10", r3, 128, 1, 2, false);
    let a3 = b.add("add_3", c9, c10, true);

    b.fc("fully_1", a3, 1);
    b.fc("fully_2", a3, 1);
    b.finish().expect("DroNet topology is statically valid")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub per_layer: Vec<(String, u64)>,
    pub conv_total: u64,
    pub total: u64,
}

pub fn mac_count(g: &NetworkGraph) -> MacReport {
    let per_layer: Vec<_> = g.layers.iter().map(|l| (l.id.clone(), l.macs())).collect();
    let conv_total = g.layers.iter().filter(|l| l.kind == LayerKind::Conv).map(|l| l.macs()).sum();
    let total = per_layer.iter().map(|(_, m)| m).sum();
    MacReport { per_layer, conv_total, total }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub params: usize,
    pub bytes_2: usize,
    pub bytes_4: usize,
}

pub fn param_count(g: &NetworkGraph) -> ParamReport {
    let params = g.layers.iter().map(LayerSpec::param_count).sum();
    ParamReport { params, bytes_2: params * 2, bytes_4: params * 4 }
}

/// Weights of one parameterized layer, `[K_out][K_in][kh][kw]` plus `[K_out]` biases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerWeights {
    pub layer: usize,
    pub kind: LayerKind,
    pub k_in: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub w: Vec<Q412>,
    pub b: Vec<Q412>,
}

impl LayerWeights {
    /// Bytes this layer occupies once loaded (weights then biases).
    pub fn bytes(&self) -> usize {
        (self.w.len() + self.b.len()) * ELEM_BYTES
    }

    pub fn dequantized(&self) -> (Vec<f64>, Vec<f64>) {
        (self.w.iter().map(|q| q.dequantize()).collect(), self.b.iter().map(|q| q.dequantize()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightStore {
    pub layers: Vec<LayerWeights>,
}

const MAGIC: &[u8; 4] = b"PDRN";
const VERSION: u16 = 1;

impl WeightStore {
    fn from_fn(g: &NetworkGraph, mut gen: impl FnMut(&LayerSpec, bool) -> Q412) -> Self {
        let layers = g
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.has_params())
            .map(|(i, l)| LayerWeights {
                layer: i,
                kind: l.kind,
                k_in: l.k_in,
                k_out: l.k_out,
                kh: l.kh,
                kw: l.kw,
                stride: l.stride,
                w: (0..l.weight_count()).map(|_| gen(l, false)).collect(),
                b: (0..l.k_out).map(|_| gen(l, true)).collect(),
            })
            .collect();
        WeightStore { layers }
    }

    pub fn zeros(g: &NetworkGraph) -> Self {
        Self::from_fn(g, |_, _| Q412::ZERO)
    }

    /// Seeded uniform weights in `[-b, b]` with `b = min(1, sqrt(6 / fan_in))`.
    /// The fan-in scaling keeps activations in the Q4.12 range through the whole
    /// network, so accumulators never approach 32-bit overflow.
    pub fn random(g: &NetworkGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(g, |l, _| {
            let bound = (6.0 / l.dot_len() as f64).sqrt().min(1.0);
            fxp::quantize(rng.gen_range(-bound..=bound)).expect("finite")
        })
    }

    /// Seeded uniform weights in `[-bound, bound]` without fan-in scaling.
    pub fn uniform(g: &NetworkGraph, seed: u64, bound: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(g, |_, _| fxp::quantize(rng.gen_range(-bound..=bound)).expect("finite"))
    }

    pub fn for_layer(&self, layer: usize) -> Option<&LayerWeights> {
        self.layers.iter().find(|w| w.layer == layer)
    }

    pub fn total_bytes(&self) -> usize {
        self.layers.iter().map(LayerWeights::bytes).sum()
    }

    /// Fails unless every parameterized layer of `g` has weights of matching shape.
    pub fn check_against(&self, g: &NetworkGraph) -> Result<()> {
        let expected: Vec<_> = g.layers.iter().enumerate().filter(|(_, l)| l.kind.has_params()).collect();
        if expected.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameterized layers in file, {} in graph",
                self.layers.len(),
                expected.len()
            )));
        }
        for ((i, l), w) in expected.into_iter().zip(&self.layers) {
            let ok = w.layer == i
                && w.kind == l.kind
                && (w.k_in, w.k_out, w.kh, w.kw, w.stride) == (l.k_in, l.k_out, l.kh, l.kw, l.stride)
                && w.w.len() == l.weight_count()
                && w.b.len() == l.k_out;
            if !ok {
                return Err(Error::ShapeMismatch(format!("layer {}", l.id)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.total_bytes() + 9 * self.layers.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for l in &self.layers {
            out.push(if l.kind == LayerKind::FullyConnected { 1 } else { 0 });
            out.extend_from_slice(&(l.k_in as u16).to_le_bytes());
            out.extend_from_slice(&(l.k_out as u16).to_le_bytes());
            out.push(l.kh as u8);
            out.push(l.kw as u8);
            out.push(l.stride as u8);
            for q in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&q.raw().to_le_bytes());
            }
        }
        out
    }

    /// Parses a PDRN image and checks it against `g`.
    pub fn from_bytes(bytes: &[u8], g: &NetworkGraph) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u16()? as usize;
        let param_layers: Vec<_> = g.layers.iter().enumerate().filter(|(_, l)| l.kind.has_params()).collect();
        if count != param_layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{count} parameterized layers in file, {} in graph",
                param_layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, spec) in param_layers {
            let kind = match r.u8()? {
                0 => LayerKind::Conv,
                1 => LayerKind::FullyConnected,
                k => return Err(Error::ShapeMismatch(format!("unknown layer kind {k}"))),
            };
            let (k_in, k_out) = (r.u16()? as usize, r.u16()? as usize);
            let (kh, kw, stride) = (r.u8()? as usize, r.u8()? as usize, r.u8()? as usize);
            if kind != spec.kind || (k_in, k_out, kh, kw, stride) != (spec.k_in, spec.k_out, spec.kh, spec.kw, spec.stride)
            {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: file has {k_in}->{k_out} {kh}x{kw}/s{stride}",
                    spec.id
                )));
            }
            let w = r.q412s(k_in * k_out * kh * kw)?;
            let b = r.q412s(k_out)?;
            layers.push(LayerWeights { layer: i, kind, k_in, k_out, kh, kw, stride, w, b });
        }
        if r.pos != bytes.len() {
            return Err(Error::ShapeMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(WeightStore { layers })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn q412s(&mut self, n: usize) -> Result<Vec<Q412>> {
        let b = self.take(n * 2)?;
        Ok(b.chunks_exact(2).map(|c| Q412::from_raw(i16::from_le_bytes([c[0], c[1]]))).collect())
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>, g: &NetworkGraph) -> Result<WeightStore> {
    WeightStore::from_bytes(&std::fs::read(path)?, g)
}

/// A decoded 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses binary PGM (P5) with maxval 255. Comments are allowed in the header.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = [0u32; 3];
    let magic = bytes.get(..2).ok_or_else(|| Error::PgmHeader("file too short".into()))?;
    if magic != b"P5" {
        return Err(Error::PgmHeader("missing P5 magic".into()));
    }
    pos += 2;
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::PgmHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *f = text.parse().map_err(|_| Error::PgmHeader(format!("bad number at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::PgmHeader("missing separator before raster".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields.map(|v| v as usize);
    if width == 0 || height == 0 {
        return Err(Error::PgmHeader("zero extent".into()));
    }
    if maxval != 255 {
        return Err(Error::BitDepth(maxval as u32));
    }
    let raster = bytes.get(pos..pos + width * height).ok_or(Error::Truncated)?;
    Ok(GrayImage { width, height, pixels: raster.to_vec() })
}

/// Center-crops to a square, resizes to 200x200 by nearest neighbour and maps
/// pixel `p` to `quantize(p / 255)`.
pub fn image_to_tensor(img: &GrayImage) -> Tensor3<Q412> {
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let n = INPUT_SIDE;
    let mut t = Tensor3::zeros(1, n, n);
    for y in 0..n {
        // centre of output pixel mapped back into the crop
        let sy = y0 + (2 * y + 1) * side / (2 * n);
        for x in 0..n {
            let sx = x0 + (2 * x + 1) * side / (2 * n);
            let p = img.pixels[sy * img.width + sx];
            *t.at_mut(0, y, x) = fxp::quantize(f64::from(p) / 255.0).expect("finite");
        }
    }
    t
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor3<Q412>> {
    Ok(image_to_tensor(&parse_pgm(&std::fs::read(path)?)?))
}
