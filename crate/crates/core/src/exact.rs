//! Order-independent reductions.
//!
//! Cross-worker sums are computed in integer fixed point, where addition is
//! associative. This makes the result of a reduction independent of how the
//! terms were split across workers or in which order partial sums arrive,
//! which is what lets an n-worker synchronous run reproduce a single-worker
//! run on the full batch bit for bit.

use crate::error::{Error, Result};

/// Binary exponent of the fixed-point unit used for gradient and loss
/// payloads: one unit is `2^-PAYLOAD_FRACTION_BITS`.
pub const PAYLOAD_FRACTION_BITS: i32 = 90;

/// Largest magnitude (in units) a single quantized term may have. Leaves
/// 2^16 terms of headroom before an `i128` sum can overflow.
const MAX_TERM_UNITS: f64 = 1.298_074_214_633_707e33; // 2^110

/// Upper bound on the number of terms merged into one payload.
pub const MAX_PAYLOAD_TERMS: u64 = 1 << 16;

/// `x * 2^exp` without intermediate overflow or underflow for the ranges used
/// here.
pub fn ldexp(mut x: f64, mut exp: i32) -> f64 {
    while exp > 1000 {
        x *= 2f64.powi(1000);
        exp -= 1000;
    }
    while exp < -1000 {
        x *= 2f64.powi(-1000);
        exp += 1000;
    }
    x * 2f64.powi(exp)
}

/// Exponent `e` with `2^e <= |x| < 2^(e+1)` for finite nonzero `x`.
fn exponent_of(x: f64) -> i32 {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal: value = mantissa * 2^-1074
        let mantissa = bits & ((1u64 << 52) - 1);
        (63 - mantissa.leading_zeros() as i32) - 1074
    } else {
        biased - 1023
    }
}

/// Integer division rounded to nearest, ties to even. The result depends only
/// on the rational value `num / den`.
pub fn round_div(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    let twice = 2 * r;
    if twice > den || (twice == den && q % 2 != 0) {
        q + 1
    } else {
        q
    }
}

/// Fixed-point accumulator for a vector of sums.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedVec {
    sums: Vec<i128>,
}

impl FixedVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            sums: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    #[inline]
    fn quantize(index: usize, value: f64) -> Result<i128> {
        let scaled = (value * 2f64.powi(PAYLOAD_FRACTION_BITS)).round();
        if !scaled.is_finite() {
            return Err(Error::NonFinite {
                what: "reduction term".into(),
                index,
                value,
            });
        }
        if scaled.abs() >= MAX_TERM_UNITS {
            return Err(Error::ReductionOverflow { index, value });
        }
        Ok(scaled as i128)
    }

    #[inline]
    pub fn add(&mut self, index: usize, value: f64) -> Result<()> {
        self.sums[index] += Self::quantize(index, value)?;
        Ok(())
    }

    pub fn add_slice(&mut self, offset: usize, values: &[f64]) -> Result<()> {
        for (i, &v) in values.iter().enumerate() {
            self.add(offset + i, v)?;
        }
        Ok(())
    }

    /// Adds `scale * values[i]` for every `i`, quantizing each product.
    pub fn add_scaled(&mut self, offset: usize, scale: f64, values: &[f64]) -> Result<()> {
        for (i, &v) in values.iter().enumerate() {
            self.add(offset + i, scale * v)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &FixedVec) -> Result<()> {
        if self.sums.len() != other.sums.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge sums of length {} and {}",
                self.sums.len(),
                other.sums.len()
            )));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += *b;
        }
        Ok(())
    }

    /// Sum divided by `count`, rounded once to the fixed-point grid and then
    /// converted to `f64`.
    pub fn mean(&self, count: u64) -> Vec<f64> {
        assert!(count > 0, "mean of zero terms");
        let den = count as i128;
        self.sums
            .iter()
            .map(|&s| ldexp(round_div(s, den) as f64, -PAYLOAD_FRACTION_BITS))
            .collect()
    }
}

/// Exact elementwise mean of equal-length vectors.
///
/// Each coordinate is reduced on its own fixed-point grid, chosen from the
/// largest magnitude present in that coordinate, so the result does not
/// depend on the order of the inputs. A coordinate whose inputs are all equal
/// returns that value unchanged.
pub fn exact_mean(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("mean of an empty list".into()))?;
    let len = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            len,
            bad.len()
        )));
    }
    if vectors.len() as u64 > MAX_PAYLOAD_TERMS {
        return Err(Error::InvalidConfig(format!(
            "cannot average more than {MAX_PAYLOAD_TERMS} vectors"
        )));
    }
    let count = vectors.len() as i128;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let x0 = first[j];
        let mut all_equal = true;
        let mut max_exp = i32::MIN;
        for v in vectors {
            let x = v[j];
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: "averaged vector".into(),
                    index: j,
                    value: x,
                });
            }
            if x.to_bits() != x0.to_bits() {
                all_equal = false;
            }
            if x != 0.0 {
                max_exp = max_exp.max(exponent_of(x));
            }
        }
        if all_equal {
            out.push(x0);
            continue;
        }
        if max_exp == i32::MIN {
            out.push(0.0);
            continue;
        }
        // unit = 2^(max_exp - 100); every term is below 2^101 units
        let unit_exp = max_exp - 100;
        let mut sum: i128 = 0;
        for v in vectors {
            sum += ldexp(v[j], -unit_exp).round() as i128;
        }
        out.push(ldexp(round_div(sum, count) as f64, unit_exp));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_div_ties_to_even() {
        assert_eq!(round_div(5, 2), 2);
        assert_eq!(round_div(7, 2), 4);
        assert_eq!(round_div(-5, 2), -2);
        assert_eq!(round_div(10, 4), 2);
        assert_eq!(round_div(11, 4), 3);
        assert_eq!(round_div(9, 3), 3);
    }

    #[test]
    fn exponent_matches_log2() {
        for &x in &[1.0, 1.5, 0.75, 1024.0, 3.0e-7, -12.5, 2f64.powi(-1030)] {
            let e = exponent_of(x);
            assert!(2f64.powi(e) <= x.abs(), "{x}");
            assert!(x.abs() < 2f64.powi(e + 1), "{x}");
        }
    }

    #[test]
    fn mean_is_idempotent_on_copies() {
        let v = [0.1, -3.7e-9, 12345.678, 1e-200];
        let copies: Vec<&[f64]> = vec![&v; 3];
        assert_eq!(exact_mean(&copies).unwrap(), v.to_vec());
    }

    #[test]
    fn mean_of_two() {
        let a = [1.0, 3.0];
        let b = [3.0, 5.0];
        assert_eq!(exact_mean(&[&a, &b]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn mean_rejects_ragged_and_empty() {
        assert!(exact_mean(&[]).is_err());
        assert!(exact_mean(&[&[1.0][..], &[1.0, 2.0][..]]).is_err());
        assert!(exact_mean(&[&[f64::NAN][..]]).is_err());
    }

    #[test]
    fn fixed_sum_is_split_invariant() {
        let terms: Vec<f64> = (0..97).map(|i| ((i * 37 % 11) as f64 - 5.3) / 7.1).collect();
        let mut whole = FixedVec::zeros(1);
        for &t in &terms {
            whole.add(0, t).unwrap();
        }
        let mut parts: Vec<FixedVec> = Vec::new();
        for chunk in terms.chunks(13).rev() {
            let mut p = FixedVec::zeros(1);
            for &t in chunk {
                p.add(0, t).unwrap();
            }
            parts.push(p);
        }
        let mut merged = FixedVec::zeros(1);
        for p in &parts {
            merged.merge(p).unwrap();
        }
        assert_eq!(whole, merged);
        assert_eq!(whole.mean(97), merged.mean(97));
    }

    #[test]
    fn fixed_sum_rejects_non_finite_and_huge() {
        let mut acc = FixedVec::zeros(1);
        assert!(matches!(acc.add(0, f64::NAN), Err(Error::NonFinite { .. })));
        assert!(matches!(acc.add(0, 1e12), Err(Error::ReductionOverflow { .. })));
    }
}
