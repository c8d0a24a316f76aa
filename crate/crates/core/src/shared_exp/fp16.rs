//! IEEE binary16 emulation. Conversion rounds to nearest even, keeps
//! subnormals and saturates overflow to the largest finite value.

use std::fmt;

use serde::{Deserialize, Serialize};

/// An IEEE 754 binary16 bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Fp16(u16);

pub const FP16_MAX: f64 = 65504.0;
/// Smallest magnitude that rounds past `FP16_MAX`.
const OVERFLOW: f64 = 65520.0;

/// `2^k`, built from bits; underflows to 0 and overflows to infinity.
#[inline(always)]
pub(crate) fn pow2(k: i32) -> f64 {
    if k > 1023 {
        f64::INFINITY
    } else if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else if k >= -1074 {
        f64::from_bits(1u64 << (k + 1074))
    } else {
        0.0
    }
}

/// `floor(log2 |v|)` for finite non-zero `v`.
#[inline(always)]
pub(crate) fn exponent_of(v: f64) -> i32 {
    let biased = ((v.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal
        v.abs().log2().floor() as i32
    } else {
        biased - 1023
    }
}

impl Fp16 {
    pub const ONE: Fp16 = Fp16(0x3c00);
    pub const MAX: Fp16 = Fp16(0x7bff);

    pub const fn from_bits(bits: u16) -> Self {
        Fp16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        let sign = if self.0 & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((self.0 >> 10) & 0x1f) as i32;
        let man = (self.0 & 0x3ff) as f64;
        let mag = match exp {
            0 => man * pow2(-24),
            31 if man == 0.0 => f64::INFINITY,
            31 => f64::NAN,
            _ => (1024.0 + man) * pow2(exp - 25),
        };
        sign * mag
    }

    pub fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }
}

impl fmt::Debug for Fp16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp16({:#06x} = {})", self.0, self.to_f64())
    }
}

/// Rounds `v` to binary16.
pub fn to_fp16(v: f64) -> Fp16 {
    if v.is_nan() {
        return Fp16(0x7e00);
    }
    let sign: u16 = if v.is_sign_negative() { 0x8000 } else { 0 };
    let a = v.abs();
    if a >= OVERFLOW {
        return Fp16(sign | Fp16::MAX.0);
    }
    if a < pow2(-14) {
        // Subnormal range: quantum 2^-24. A result of 1024 is the smallest
        // normal, whose bit pattern is the same integer.
        let m = (a * pow2(24)).round_ties_even() as u16;
        return Fp16(sign | m);
    }
    let mut e = exponent_of(a);
    let mut m = (a * pow2(10 - e)).round_ties_even() as u16;
    if m == 2048 {
        m = 1024;
        e += 1;
    }
    Fp16(sign | (((e + 15) as u16) << 10) | (m - 1024))
}

/// `v` rounded to the nearest binary16 value, as `f64`.
#[inline]
pub fn round_fp16(v: f64) -> f64 {
    to_fp16(v).to_f64()
}
