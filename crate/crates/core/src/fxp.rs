//! Q4.12 fixed-point arithmetic.
//!
//! Every weight and activation is a 16-bit two's-complement value with 12
//! fractional bits. Products of two Q4.12 values land at scale 2^-24 in a
//! 32-bit accumulator and are brought back to Q4.12 by one arithmetic shift
//! followed by saturation.

use std::fmt;

use crate::error::{Error, Result};

/// Number of fractional bits.
pub const FRAC_BITS: u32 = 12;
/// 2^12, the scale of one unit.
pub const ONE_RAW: i16 = 1 << FRAC_BITS;

/// Longest dot product that cannot overflow the accumulator in the worst case
/// the network can produce. Graph construction checks every reduction against it.
pub const MAX_DOT_LEN: usize = 1 << 15;

/// A Q4.12 sample. `value = raw * 2^-12`.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Q412(pub i16);

/// 32-bit accumulator holding a sum of Q4.12 products at scale 2^-24.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Acc32(pub i32);

impl Q412 {
    pub const ZERO: Q412 = Q412(0);
    pub const ONE: Q412 = Q412(ONE_RAW);
    pub const MIN: Q412 = Q412(i16::MIN);
    pub const MAX: Q412 = Q412(i16::MAX);

    #[inline]
    pub const fn from_raw(raw: i16) -> Self {
        Q412(raw)
    }

    #[inline]
    pub const fn raw(self) -> i16 {
        self.0
    }

    /// Saturating conversion from a real number, rounding toward negative infinity.
    pub fn quantize(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        let scaled = (x * f64::from(1u32 << FRAC_BITS)).floor();
        Ok(Q412(scaled.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16))
    }

    #[inline]
    pub fn dequantize(self) -> f64 {
        f64::from(self.0) / f64::from(1u32 << FRAC_BITS)
    }

    #[inline]
    pub fn relu(self) -> Self {
        if self.0 < 0 {
            Q412::ZERO
        } else {
            self
        }
    }

    #[inline]
    pub fn saturating_add(self, other: Self) -> Self {
        Q412(self.0.saturating_add(other.0))
    }
}

impl fmt::Debug for Q412 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q412({} = {})", self.0, self.dequantize())
    }
}

impl fmt::Display for Q412 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.dequantize())
    }
}

impl Acc32 {
    pub const ZERO: Acc32 = Acc32(0);

    /// Accumulator preloaded with a Q4.12 bias, shifted up to product scale.
    #[inline]
    pub fn from_bias(bias: Q412) -> Self {
        Acc32(i32::from(bias.0) << FRAC_BITS)
    }

    /// `acc + a * b`, exact. Overflow panics in debug builds: it means the
    /// headroom assumption checked at graph-build time was violated.
    #[inline]
    pub fn mac(self, a: Q412, b: Q412) -> Self {
        Acc32(self.0 + i32::from(a.0) * i32::from(b.0))
    }

    /// Back to Q4.12: arithmetic shift right by 12 (floor), then saturate.
    #[inline]
    pub fn renorm(self) -> Q412 {
        let shifted = self.0 >> FRAC_BITS;
        Q412(shifted.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16)
    }
}

#[inline]
pub fn quantize(x: f64) -> Result<Q412> {
    Q412::quantize(x)
}

#[inline]
pub fn dequantize(q: Q412) -> f64 {
    q.dequantize()
}

#[inline]
pub fn mac(acc: Acc32, a: Q412, b: Q412) -> Acc32 {
    acc.mac(a, b)
}

#[inline]
pub fn renorm(acc: Acc32) -> Q412 {
    acc.renorm()
}

/// Fails when a reduction of `len` terms could overflow the accumulator.
pub fn check_headroom(len: usize) -> Result<()> {
    if len > MAX_DOT_LEN {
        return Err(Error::Headroom { len, max: MAX_DOT_LEN });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(1.0).unwrap().raw(), 4096);
        assert_eq!(quantize(0.0).unwrap().raw(), 0);
        assert_eq!(quantize(10.0).unwrap().raw(), 32767);
        assert_eq!(quantize(-10.0).unwrap().raw(), -32768);
        // floor(-0.4096) = -1
        assert_eq!(quantize(-0.0001).unwrap().raw(), -1);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(matches!(quantize(f64::NAN), Err(Error::NonFinite)));
        assert!(matches!(quantize(f64::INFINITY), Err(Error::NonFinite)));
        let msg = quantize(f64::NEG_INFINITY).unwrap_err().to_string();
        assert!(msg.contains("non-finite value"));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(Q412(4096).dequantize(), 1.0);
        assert_eq!(Q412(-32768).dequantize(), -8.0);
        assert_eq!(Q412(1).dequantize(), 2f64.powi(-12));
    }

    #[test]
    fn mac_examples() {
        let one = quantize(1.0).unwrap();
        let half = quantize(0.5).unwrap();
        let m_one = quantize(-1.0).unwrap();
        assert_eq!(mac(Acc32::ZERO, one, one).0, 16_777_216);
        let quarter = mac(Acc32::ZERO, half, half);
        assert_eq!(quarter.0, 4_194_304);
        assert_eq!(renorm(quarter).dequantize(), 0.25);
        assert_eq!(mac(Acc32::ZERO, m_one, one).0, -16_777_216);
    }

    #[test]
    fn renorm_examples() {
        assert_eq!(renorm(Acc32(16_777_216)).raw(), 4096);
        assert_eq!(renorm(Acc32(i32::MAX)).raw(), 32767);
        assert_eq!(renorm(Acc32(i32::MIN)).raw(), -32768);
        // -1 >> 12 == -1: toward negative infinity, not zero
        assert_eq!(renorm(Acc32(-1)).raw(), -1);
    }

    #[test]
    fn bias_preload_is_exact() {
        for raw in [-32768i16, -1, 0, 1, 4096, 32767] {
            assert_eq!(Acc32::from_bias(Q412(raw)).renorm(), Q412(raw));
        }
    }

    #[test]
    fn headroom_bound() {
        assert!(check_headroom(6272).is_ok());
        assert!(check_headroom(MAX_DOT_LEN).is_ok());
        assert!(check_headroom(MAX_DOT_LEN + 1).is_err());
    }

    #[test]
    fn saturating_add_and_relu() {
        let a = quantize(7.5).unwrap();
        assert_eq!(a.saturating_add(a), Q412::MAX);
        assert_eq!(quantize(-0.5).unwrap().relu(), Q412::ZERO);
        assert_eq!(a.relu(), a);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic]
    fn mac_overflow_traps_in_debug() {
        let mut acc = Acc32(i32::MAX - 10);
        acc = acc.mac(Q412::MAX, Q412::MAX);
        let _ = acc;
    }

    mod props {
        use super::super::*;
        use num_bigint::BigInt;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantize_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(quantize(lo).unwrap() <= quantize(hi).unwrap());
            }

            #[test]
            fn renorm_monotone(a in any::<i32>(), b in any::<i32>()) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(Acc32(lo).renorm() <= Acc32(hi).renorm());
            }

            #[test]
            fn round_trip(raw in any::<i16>()) {
                prop_assert_eq!(quantize(Q412(raw).dequantize()).unwrap(), Q412(raw));
            }

            #[test]
            fn quantize_error_below_one_lsb(x in -7.99f64..7.99) {
                let e = x - quantize(x).unwrap().dequantize();
                prop_assert!((0.0..1.0 / 4096.0).contains(&e));
            }

            #[test]
            fn saturates(x in 8.0f64..1e9) {
                prop_assert_eq!(quantize(x).unwrap(), Q412::MAX);
                prop_assert_eq!(quantize(-x - 1.0).unwrap(), Q412::MIN);
            }

            #[test]
            fn dot_matches_bigint(v in proptest::collection::vec((-4096i16..=4096, -4096i16..=4096), 0..64), b in any::<i16>()) {
                let acc = v.iter().fold(Acc32::from_bias(Q412(b)), |a, &(x, y)| a.mac(Q412(x), Q412(y)));
                let exact: BigInt = v.iter().fold(BigInt::from(b) << 12usize, |a, &(x, y)| a + BigInt::from(x) * BigInt::from(y));
                prop_assert_eq!(BigInt::from(acc.0), exact.clone());
                let floor: BigInt = exact >> 12usize;
                let want = floor.clamp(BigInt::from(i16::MIN), BigInt::from(i16::MAX));
                prop_assert_eq!(BigInt::from(acc.renorm().0), want);
            }
        }
    }
}
