//! Shared-exponent ("block floating point") arithmetic.
//!
//! A group of values is stored as one exponent `e_max` plus signed
//! fixed-point mantissas, so dot products run on integer multipliers. With
//! the default 18-bit mantissas, slot `j` decodes to `m_j * 2^(e_max - 16)`:
//! the largest magnitude occupies bit 16 and bit 17 is headroom.

mod fp16;

pub use fp16::{round_fp16, to_fp16, Fp16, FP16_MAX};
pub(crate) use fp16::{exponent_of, pow2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the integer multiplier operands.
pub const MANTISSA_BITS: u32 = 18;

/// Exponent recorded for an all-zero group.
pub const ZERO_GROUP_EXP: i32 = i32::MIN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedExpGroup {
    e_max: i32,
    bits: u32,
    mantissas: Vec<i32>,
}

/// Fraction bits below the leading bit of the largest value.
#[inline(always)]
const fn frac_bits(bits: u32) -> i32 {
    bits as i32 - 2
}

/// Encodes `values` into `out` and returns the shared exponent.
///
/// `e_max` is the exponent of the largest magnitude after rounding to the
/// mantissa grid; values rounding up to the next power of two bump it by one.
#[inline]
pub(crate) fn encode_into(values: &[f64], bits: u32, out: &mut [i32]) -> i32 {
    debug_assert_eq!(values.len(), out.len());
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        out.fill(0);
        return ZERO_GROUP_EXP;
    }
    let limit = 1i64 << (bits - 1);
    let mut e = exponent_of(max);
    loop {
        let scale = pow2(frac_bits(bits) - e);
        let mut overflow = false;
        for (m, &v) in out.iter_mut().zip(values) {
            let r = (v * scale).round_ties_even() as i64;
            overflow |= r.abs() >= limit;
            *m = r as i32;
        }
        if !overflow {
            return e;
        }
        e += 1;
    }
}

/// `sum a_j * b_j` in exact integer arithmetic.
#[inline(always)]
pub(crate) fn int_dot(a: &[i32], b: &[i32]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
}

/// Value of an integer dot product of two groups with exponents `ea`, `eb`.
#[inline(always)]
pub(crate) fn dot_value(sum: i64, ea: i32, eb: i32, bits: u32) -> f64 {
    if ea == ZERO_GROUP_EXP || eb == ZERO_GROUP_EXP {
        0.0
    } else {
        sum as f64 * pow2(ea.saturating_add(eb) - 2 * frac_bits(bits))
    }
}

impl SharedExpGroup {
    /// Encodes with 18-bit mantissas.
    pub fn encode(values: &[f64]) -> Result<Self> {
        Self::encode_with_bits(values, MANTISSA_BITS)
    }

    /// Encodes with `bits`-wide signed mantissas (`3..=31`).
    pub fn encode_with_bits(values: &[f64], bits: u32) -> Result<Self> {
        if !(3..=31).contains(&bits) {
            return Err(Error::InvalidConfig(format!("mantissa width {bits} out of range")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut mantissas = vec![0; values.len()];
        let e_max = encode_into(values, bits, &mut mantissas);
        Ok(SharedExpGroup {
            e_max,
            bits,
            mantissas,
        })
    }

    /// Shared exponent; `None` for an all-zero group.
    pub fn e_max(&self) -> Option<i32> {
        (self.e_max != ZERO_GROUP_EXP).then_some(self.e_max)
    }

    pub fn mantissas(&self) -> &[i32] {
        &self.mantissas
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    /// Value of slot `j`: `m_j * 2^(e_max - (bits - 2))`.
    pub fn decode(&self, j: usize) -> f64 {
        match self.e_max() {
            None => 0.0,
            Some(e) => self.mantissas[j] as f64 * pow2(e - frac_bits(self.bits)),
        }
    }

    pub fn decode_all(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.decode(j)).collect()
    }
}

/// Exact value of the group dot product, before any output rounding.
pub fn dot_exact(a: &SharedExpGroup, b: &SharedExpGroup) -> Result<f64> {
    check_pair(a, b)?;
    Ok(dot_value(int_dot(&a.mantissas, &b.mantissas), a.e_max, b.e_max, a.bits))
}

/// Integer dot product of two groups plus `init`, aligned to the product's
/// fixed-point scale, rounded to FP16.
pub fn dot(a: &SharedExpGroup, b: &SharedExpGroup, init: f64) -> Result<Fp16> {
    check_pair(a, b)?;
    if !init.is_finite() {
        return Err(Error::NonFinite(0));
    }
    if a.e_max == ZERO_GROUP_EXP || b.e_max == ZERO_GROUP_EXP {
        return Ok(to_fp16(init));
    }
    let shift = a.e_max + b.e_max - 2 * frac_bits(a.bits);
    let sum = int_dot(&a.mantissas, &b.mantissas) as i128;
    let aligned = init * pow2(-shift);
    if aligned.abs() >= 2f64.powi(100) {
        // The products sit far below FP16 resolution of `init`.
        return Ok(to_fp16(init));
    }
    let total = sum + aligned.round_ties_even() as i128;
    Ok(to_fp16(total as f64 * pow2(shift)))
}

fn check_pair(a: &SharedExpGroup, b: &SharedExpGroup) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch(a.len(), b.len()));
    }
    if a.bits != b.bits {
        return Err(Error::InvalidConfig(format!(
            "mantissa widths differ: {} vs {}",
            a.bits, b.bits
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_small_values() {
        let v = [1.5, -2.25, 0.5, 3.0];
        let g = SharedExpGroup::encode(&v).unwrap();
        assert_eq!(g.e_max(), Some(1));
        assert_eq!(g.decode_all(), v);
        assert!(g.mantissas().iter().all(|m| (-(1 << 17)..(1 << 17)).contains(m)));
    }

    #[test]
    fn all_zero_group() {
        let g = SharedExpGroup::encode(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.e_max(), None);
        assert_eq!(g.mantissas(), &[0, 0, 0]);
        assert_eq!(g.decode(1), 0.0);
    }

    #[test]
    fn wide_spread_flushes() {
        let g = SharedExpGroup::encode(&[2f64.powi(20), 2f64.powi(-10)]).unwrap();
        assert_eq!(g.decode_all(), vec![2f64.powi(20), 0.0]);
    }

    #[test]
    fn rounding_carry_bumps_exponent() {
        // 2 - 2^-20 rounds up to 2 on an 18-bit grid anchored at 2^0.
        let g = SharedExpGroup::encode(&[2.0 - 2f64.powi(-20), 0.5]).unwrap();
        assert_eq!(g.e_max(), Some(1));
        assert_eq!(g.mantissas()[0], 1 << 16);
        assert_eq!(g.decode_all(), vec![2.0, 0.5]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            SharedExpGroup::encode(&[1.0, f64::INFINITY]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn small_integer_dot() {
        let a = SharedExpGroup::encode(&[1.0, 2.0]).unwrap();
        let b = SharedExpGroup::encode(&[3.0, 4.0]).unwrap();
        assert_eq!(dot(&a, &b, 0.0).unwrap().to_f64(), 11.0);
        assert_eq!(dot(&a, &b, 5.0).unwrap().to_f64(), 16.0);
        assert_eq!(dot_exact(&a, &b).unwrap(), 11.0);
    }

    #[test]
    fn zero_group_returns_init() {
        let a = SharedExpGroup::encode(&[0.0; 4]).unwrap();
        let b = SharedExpGroup::encode(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dot(&a, &b, 0.1).unwrap(), to_fp16(0.1));
    }

    #[test]
    fn width_mismatch() {
        let a = SharedExpGroup::encode(&[1.0]).unwrap();
        let b = SharedExpGroup::encode(&[1.0, 2.0]).unwrap();
        assert!(matches!(dot(&a, &b, 0.0), Err(Error::WidthMismatch(1, 2))));
    }

    #[test]
    fn huge_init_dominates() {
        let a = SharedExpGroup::encode(&[2f64.powi(-60)]).unwrap();
        let b = SharedExpGroup::encode(&[2f64.powi(-60)]).unwrap();
        assert_eq!(dot(&a, &b, 1000.0).unwrap().to_f64(), 1000.0);
    }
}
