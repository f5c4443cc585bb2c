//! Untiled reference kernels in fixed-point and real arithmetic.
//!
//! These are the golden models: the tiled executor must reproduce the
//! fixed-point variant bit for bit.

use crate::error::{Error, Result};
use crate::fxp::{Acc32, Q412};
use crate::net::{LayerKind, LayerSpec, NetworkGraph, WeightStore};

/// Channel-major, then row-major 3-D tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Tensor3<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 { c, h, w, data: vec![T::default(); c * h * w] }
    }
}

impl<T: Copy> Tensor3<T> {
    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!("buffer of {} for {c}x{h}x{w}", data.len())));
        }
        Ok(Tensor3 { c, h, w, data })
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.idx(c, y, x);
        &mut self.data[i]
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// The arithmetic a kernel is evaluated in.
pub trait Arith {
    type Elem: Copy + Default + PartialOrd + std::fmt::Debug;
    type Acc: Copy;
    fn bias(b: Self::Elem) -> Self::Acc;
    fn mac(acc: Self::Acc, a: Self::Elem, b: Self::Elem) -> Self::Acc;
    fn finish(acc: Self::Acc) -> Self::Elem;
    fn add(a: Self::Elem, b: Self::Elem) -> Self::Elem;
    fn relu(a: Self::Elem) -> Self::Elem;
    fn to_real(a: Self::Elem) -> f64;
}

/// Q4.12 with 32-bit accumulation.
pub struct Fixed;
/// Double precision, no rounding.
pub struct Real;

impl Arith for Fixed {
    type Elem = Q412;
    type Acc = Acc32;
    #[inline]
    fn bias(b: Q412) -> Acc32 {
        Acc32::from_bias(b)
    }
    #[inline]
    fn mac(acc: Acc32, a: Q412, b: Q412) -> Acc32 {
        acc.mac(a, b)
    }
    #[inline]
    fn finish(acc: Acc32) -> Q412 {
        acc.renorm()
    }
    #[inline]
    fn add(a: Q412, b: Q412) -> Q412 {
        a.saturating_add(b)
    }
    #[inline]
    fn relu(a: Q412) -> Q412 {
        a.relu()
    }
    fn to_real(a: Q412) -> f64 {
        a.dequantize()
    }
}

impl Arith for Real {
    type Elem = f64;
    type Acc = f64;
    #[inline]
    fn bias(b: f64) -> f64 {
        b
    }
    #[inline]
    fn mac(acc: f64, a: f64, b: f64) -> f64 {
        acc + a * b
    }
    #[inline]
    fn finish(acc: f64) -> f64 {
        acc
    }
    #[inline]
    fn add(a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn relu(a: f64) -> f64 {
        a.max(0.0)
    }
    fn to_real(a: f64) -> f64 {
        a
    }
}

/// Convolution geometry shared by the untiled and tiled paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k_in: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn of(l: &LayerSpec) -> Self {
        ConvGeom {
            k_in: l.k_in,
            k_out: l.k_out,
            kh: l.kh,
            kw: l.kw,
            stride: l.stride,
            pad_top: l.pad_top(),
            pad_left: l.pad_left(),
        }
    }

    #[inline]
    pub fn widx(&self, k: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((k * self.k_in + c) * self.kh + dy) * self.kw + dx
    }
}

/// Same-zero padded convolution: one renorm per output, ReLU after renorm when fused.
pub fn conv2d<A: Arith>(
    input: &Tensor3<A::Elem>,
    w: &[A::Elem],
    b: &[A::Elem],
    geom: &ConvGeom,
    fused_relu: bool,
) -> Result<Tensor3<A::Elem>> {
    let g = geom;
    if input.c != g.k_in || w.len() != g.k_out * g.k_in * g.kh * g.kw || b.len() != g.k_out {
        return Err(Error::ShapeMismatch(format!(
            "conv {}->{} {}x{} with input {}x{}x{}, {} weights, {} biases",
            g.k_in, g.k_out, g.kh, g.kw, input.c, input.h, input.w, w.len(), b.len()
        )));
    }
    let ho = input.h.div_ceil(g.stride);
    let wo = input.w.div_ceil(g.stride);
    let mut out = Tensor3::zeros(g.k_out, ho, wo);
    for k in 0..g.k_out {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = A::bias(b[k]);
                for c in 0..g.k_in {
                    for dy in 0..g.kh {
                        let iy = (y * g.stride + dy) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        for dx in 0..g.kw {
                            let ix = (x * g.stride + dx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            acc = A::mac(acc, w[g.widx(k, c, dy, dx)], input.at(c, iy as usize, ix as usize));
                        }
                    }
                }
                let v = A::finish(acc);
                *out.at_mut(k, y, x) = if fused_relu { A::relu(v) } else { v };
            }
        }
    }
    Ok(out)
}

/// 2x2 stride-2 max pooling; windows hanging off the edge ignore missing samples.
pub fn maxpool2<T: Copy + Default + PartialOrd>(input: &Tensor3<T>) -> Tensor3<T> {
    let (ho, wo) = (input.h.div_ceil(2), input.w.div_ceil(2));
    let mut out = Tensor3::zeros(input.c, ho, wo);
    for c in 0..input.c {
        for y in 0..ho {
            for x in 0..wo {
                let mut m = input.at(c, 2 * y, 2 * x);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (iy, ix) = (2 * y + dy, 2 * x + dx);
                    if iy < input.h && ix < input.w {
                        let v = input.at(c, iy, ix);
                        if v > m {
                            m = v;
                        }
                    }
                }
                *out.at_mut(c, y, x) = m;
            }
        }
    }
    out
}

pub fn relu<A: Arith>(input: &Tensor3<A::Elem>) -> Tensor3<A::Elem> {
    input.map(A::relu)
}

/// Elementwise (saturating, in fixed point) addition.
pub fn add<A: Arith>(a: &Tensor3<A::Elem>, b: &Tensor3<A::Elem>, fused_relu: bool) -> Result<Tensor3<A::Elem>> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("add {:?} vs {:?}", a.dims(), b.dims())));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let s = A::add(x, y);
            if fused_relu {
                A::relu(s)
            } else {
                s
            }
        })
        .collect();
    Ok(Tensor3 { c: a.c, h: a.h, w: a.w, data })
}

/// Single-output dense layer over a flattened input.
pub fn fully_connected<A: Arith>(input: &[A::Elem], w: &[A::Elem], b: A::Elem) -> Result<A::Elem> {
    if input.len() != w.len() {
        return Err(Error::ShapeMismatch(format!("fc input {} vs {} weights", input.len(), w.len())));
    }
    let acc = input.iter().zip(w).fold(A::bias(b), |acc, (&x, &wv)| A::mac(acc, wv, x));
    Ok(A::finish(acc))
}

/// Weights converted to the element type of `A`.
pub trait WeightsFor<A: Arith> {
    fn layer_params(&self, layer: usize) -> Result<(Vec<A::Elem>, Vec<A::Elem>)>;
}

impl WeightsFor<Fixed> for WeightStore {
    fn layer_params(&self, layer: usize) -> Result<(Vec<Q412>, Vec<Q412>)> {
        let lw = self.for_layer(layer).ok_or_else(|| Error::ShapeMismatch(format!("no weights for layer {layer}")))?;
        Ok((lw.w.clone(), lw.b.clone()))
    }
}

impl WeightsFor<Real> for WeightStore {
    fn layer_params(&self, layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let lw = self.for_layer(layer).ok_or_else(|| Error::ShapeMismatch(format!("no weights for layer {layer}")))?;
        Ok(lw.dequantized())
    }
}

/// Runs the graph layer by layer and returns every tensor.
pub fn forward_all<A: Arith>(
    g: &NetworkGraph,
    weights: &impl WeightsFor<A>,
    input: Tensor3<A::Elem>,
) -> Result<Vec<Option<Tensor3<A::Elem>>>> {
    if (input.c, input.h, input.w) != (g.shape(g.input).c, g.shape(g.input).h, g.shape(g.input).w) {
        return Err(Error::ShapeMismatch(format!("input {:?}", input.dims())));
    }
    let mut tensors: Vec<Option<Tensor3<A::Elem>>> = vec![None; g.tensors.len()];
    tensors[g.input] = Some(input);
    for (i, l) in g.layers.iter().enumerate() {
        let src = |k: usize| tensors[l.inputs[k]].as_ref().expect("topological order");
        let out = match l.kind {
            LayerKind::Conv => {
                let (w, b) = weights.layer_params(i)?;
                conv2d::<A>(src(0), &w, &b, &ConvGeom::of(l), l.fused_relu)?
            }
            LayerKind::MaxPool => maxpool2(src(0)),
            LayerKind::Relu => relu::<A>(src(0)),
            LayerKind::Add => add::<A>(src(0), src(1), l.fused_relu)?,
            LayerKind::FullyConnected => {
                let (w, b) = weights.layer_params(i)?;
                let x = &src(0).data;
                let mut out = Tensor3::zeros(l.k_out, 1, 1);
                for k in 0..l.k_out {
                    let v = fully_connected::<A>(x, &w[k * l.k_in..(k + 1) * l.k_in], b[k])?;
                    out.data[k] = if l.fused_relu { A::relu(v) } else { v };
                }
                out
            }
        };
        tensors[l.output] = Some(out);
    }
    Ok(tensors)
}

/// The two raw network outputs before any non-linearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawOutputs<E> {
    pub steering: E,
    pub collision_logit: E,
}

/// Dequantized steering angle and sigmoid collision probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub steering: f64,
    pub collision: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<E> RawOutputs<E> {
    pub fn prediction<A: Arith<Elem = E>>(self) -> Prediction
    where
        E: Copy,
    {
        Prediction { steering: A::to_real(self.steering), collision: sigmoid(A::to_real(self.collision_logit)) }
    }
}

pub fn infer_raw<A: Arith>(
    g: &NetworkGraph,
    weights: &impl WeightsFor<A>,
    input: Tensor3<A::Elem>,
) -> Result<RawOutputs<A::Elem>> {
    let t = forward_all::<A>(g, weights, input)?;
    let outs = g.outputs();
    if outs.len() != 2 {
        return Err(Error::Graph(format!("expected two heads, found {}", outs.len())));
    }
    let head = |i: usize| t[outs[i]].as_ref().expect("computed").data[0];
    Ok(RawOutputs { steering: head(0), collision_logit: head(1) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arithmetic {
    Real,
    Q412,
}

/// End-to-end untiled inference from a Q4.12 frame.
pub fn infer_untiled(
    g: &NetworkGraph,
    weights: &WeightStore,
    input: &Tensor3<Q412>,
    arithmetic: Arithmetic,
) -> Result<Prediction> {
    Ok(match arithmetic {
        Arithmetic::Q412 => infer_raw::<Fixed>(g, weights, input.clone())?.prediction::<Fixed>(),
        Arithmetic::Real => infer_raw::<Real>(g, weights, input.map(|q| q.dequantize()))?.prediction::<Real>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::quantize;
    use crate::net::build_dronet;
    use num_bigint::BigInt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(x: f64) -> Q412 {
        quantize(x).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, r: f64) -> Tensor3<Q412> {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| q(rng.gen_range(-r..r))).collect()).unwrap()
    }

    fn geom(k_in: usize, k_out: usize, k: usize, s: usize, n: usize) -> ConvGeom {
        let no = n.div_ceil(s);
        let p = crate::net::same_pad_before(n, no, k, s);
        ConvGeom { k_in, k_out, kh: k, kw: k, stride: s, pad_top: p, pad_left: p }
    }

    #[test]
    fn identity_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 5, 5, 4.0);
        let mut w = vec![Q412::ZERO; 9];
        for c in 0..3 {
            w[c * 3 + c] = Q412::ONE;
        }
        let out = conv2d::<Fixed>(&x, &w, &[Q412::ZERO; 3], &geom(3, 3, 1, 1, 5), false).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn bias_only_conv() {
        let x = Tensor3::from_vec(2, 4, 4, vec![q(1.0); 32]).unwrap();
        let out = conv2d::<Fixed>(&x, &[Q412::ZERO; 2 * 2 * 9], &[q(0.5); 2], &geom(2, 2, 3, 1, 4), false).unwrap();
        assert!(out.data.iter().all(|&v| v == q(0.5)));
    }

    fn bigint_conv(x: &Tensor3<Q412>, w: &[Q412], b: &[Q412], g: &ConvGeom) -> Vec<BigInt> {
        let ho = x.h.div_ceil(g.stride);
        let wo = x.w.div_ceil(g.stride);
        let mut out = Vec::new();
        for k in 0..g.k_out {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = BigInt::from(b[k].raw()) << 12;
                    for c in 0..g.k_in {
                        for dy in 0..g.kh {
                            for dx in 0..g.kw {
                                let iy = (y * g.stride + dy) as i64 - g.pad_top as i64;
                                let ix = (xx * g.stride + dx) as i64 - g.pad_left as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += BigInt::from(w[g.widx(k, c, dy, dx)].raw())
                                        * BigInt::from(x.at(c, iy as usize, ix as usize).raw());
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn big_renorm(v: &BigInt) -> i16 {
        let shifted: BigInt = v >> 12; // floor for BigInt
        let lo = BigInt::from(i16::MIN);
        let hi = BigInt::from(i16::MAX);
        let c = if shifted < lo { lo } else if shifted > hi { hi } else { shifted };
        i16::try_from(c).unwrap()
    }

    #[test]
    fn strided_conv_matches_bigint_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = geom(32, 8, 3, 2, 50);
        let x = rand_tensor(&mut rng, 32, 50, 50, 2.0);
        let w: Vec<_> = (0..8 * 32 * 9).map(|_| q(rng.gen_range(-0.25..0.25))).collect();
        let b: Vec<_> = (0..8).map(|_| q(rng.gen_range(-1.0..1.0))).collect();
        let out = conv2d::<Fixed>(&x, &w, &b, &g, false).unwrap();
        let oracle = bigint_conv(&x, &w, &b, &g);
        assert_eq!(out.dims(), (8, 25, 25));
        for (o, r) in out.data.iter().zip(&oracle) {
            assert_eq!(o.raw(), big_renorm(r));
        }
    }

    #[test]
    fn padding_visible_at_borders() {
        let x = Tensor3::from_vec(1, 5, 5, vec![q(1.0); 25]).unwrap();
        let out = conv2d::<Fixed>(&x, &[q(1.0); 9], &[Q412::ZERO], &geom(1, 1, 3, 1, 5), false).unwrap();
        assert_eq!(out.at(0, 2, 2), q(8.0 - 1.0 / 4096.0)); // 9 saturates
        assert_eq!(out.at(0, 0, 0), q(4.0));
        assert!(out.at(0, 2, 2) > out.at(0, 0, 0));
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor3::<Q412>::zeros(2, 4, 4);
        assert!(conv2d::<Fixed>(&x, &[Q412::ZERO; 9], &[Q412::ZERO], &geom(1, 1, 3, 1, 4), false).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = Tensor3::from_vec(1, 2, 2, vec![Q412(1), Q412(2), Q412(3), Q412(4)]).unwrap();
        assert_eq!(maxpool2(&x).data, vec![Q412(4)]);
        let c = Tensor3::from_vec(2, 100, 100, vec![q(0.25); 20000]).unwrap();
        let p = maxpool2(&c);
        assert_eq!(p.dims(), (2, 50, 50));
        assert!(p.data.iter().all(|&v| v == q(0.25)));
        let odd = Tensor3::from_vec(1, 3, 3, (0..9).map(|i| Q412(-i)).collect()).unwrap();
        assert_eq!(maxpool2(&odd).data, vec![Q412(0), Q412(-2), Q412(-6), Q412(-8)]);
    }

    #[test]
    fn relu_and_add_examples() {
        let x = Tensor3::from_vec(1, 1, 3, vec![q(-0.5), q(7.5), Q412::ZERO]).unwrap();
        assert_eq!(relu::<Fixed>(&x).data, vec![Q412::ZERO, q(7.5), Q412::ZERO]);
        assert_eq!(relu::<Fixed>(&relu::<Fixed>(&x)), relu::<Fixed>(&x));
        let s = add::<Fixed>(&x, &x, false).unwrap();
        assert_eq!(s.data[1], Q412::MAX);
        assert_eq!(add::<Fixed>(&x, &Tensor3::zeros(1, 1, 3), false).unwrap(), x);
        assert!(add::<Fixed>(&x, &Tensor3::zeros(1, 3, 1), false).is_err());
    }

    #[test]
    fn fc_examples() {
        let w: Vec<_> = (0..6272).map(|i| Q412((i % 97) as i16 - 48)).collect();
        let zero = vec![Q412::ZERO; 6272];
        assert_eq!(fully_connected::<Fixed>(&zero, &w, q(0.75)).unwrap(), q(0.75));
        let mut one_hot = zero.clone();
        one_hot[1234] = Q412::ONE;
        assert_eq!(
            fully_connected::<Fixed>(&one_hot, &w, q(0.75)).unwrap(),
            w[1234].saturating_add(q(0.75))
        );
        assert!(fully_connected::<Fixed>(&zero[..10], &w, Q412::ZERO).is_err());
    }

    #[test]
    fn fc_matches_bigint_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<_> = (0..6272).map(|_| q(rng.gen_range(-8.0..8.0))).collect();
        let w: Vec<_> = (0..6272).map(|_| q(rng.gen_range(-0.03..0.03))).collect();
        let b = q(0.1);
        let mut acc = BigInt::from(b.raw()) << 12;
        for (a, c) in x.iter().zip(&w) {
            acc += BigInt::from(a.raw()) * BigInt::from(c.raw());
        }
        assert_eq!(fully_connected::<Fixed>(&x, &w, b).unwrap().raw(), big_renorm(&acc));
    }

    #[test]
    fn zero_network_outputs() {
        let g = build_dronet();
        let w = WeightStore::zeros(&g);
        let x = Tensor3::from_vec(1, 200, 200, vec![q(0.5); 40000]).unwrap();
        for a in [Arithmetic::Q412, Arithmetic::Real] {
            let p = infer_untiled(&g, &w, &x, a).unwrap();
            assert_eq!(p.steering, 0.0);
            assert_eq!(p.collision, 0.5);
        }
    }

    #[test]
    fn real_and_fixed_agree_roughly() {
        let g = build_dronet();
        let w = WeightStore::random(&g, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor3::from_vec(1, 200, 200, (0..40000).map(|_| q(rng.gen_range(0.0..1.0))).collect()).unwrap();
        let a = infer_untiled(&g, &w, &x, Arithmetic::Q412).unwrap();
        let b = infer_untiled(&g, &w, &x, Arithmetic::Real).unwrap();
        assert!((a.steering - b.steering).abs() < 0.1, "{a:?} {b:?}");
        assert!((a.collision - b.collision).abs() < 0.05, "{a:?} {b:?}");
    }
}
