//! Dynamic fixed-point representation shared by both cascade stages.
//!
//! A tensor is stored as signed integer codes together with a scaling
//! factor: `value = code * 2^(-frac_bits)`. The wordlength is uniform
//! across a network while every layer picks its own scaling for weights
//! and activations, so one hardware datapath can be time-shared across
//! all layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported wordlength.
pub const MIN_WORDLENGTH: u8 = 2;
/// Largest supported wordlength.
pub const MAX_WORDLENGTH: u8 = 16;

/// Exact power of two as `f64`.
#[inline]
fn pow2(exp: i32) -> f64 {
    2.0f64.powi(exp)
}

/// Wordlength plus binary-point position for one tensor.
///
/// `frac_bits` is a free scaling parameter, not a bit-field split: it may
/// be negative (the value grid is coarser than integers) or exceed
/// `wordlength - 1` (pure fractions). The representable values are
/// exactly `[-2^(wordlength-1), 2^(wordlength-1) - 1] * 2^(-frac_bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedSpec {
    pub wordlength: u8,
    pub frac_bits: i32,
}

impl FixedSpec {
    pub fn new(wordlength: u8, frac_bits: i32) -> Result<Self> {
        if !(MIN_WORDLENGTH..=MAX_WORDLENGTH).contains(&wordlength) {
            return Err(Error::InvalidWordlength(wordlength));
        }
        Ok(Self {
            wordlength,
            frac_bits,
        })
    }

    /// Most negative representable code, `-2^(wordlength-1)`.
    #[inline]
    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.wordlength - 1))
    }

    /// Most positive representable code, `2^(wordlength-1) - 1`.
    #[inline]
    pub fn max_code(&self) -> i64 {
        (1i64 << (self.wordlength - 1)) - 1
    }

    /// Spacing between adjacent representable values.
    #[inline]
    pub fn step(&self) -> f64 {
        pow2(-self.frac_bits)
    }

    /// Smallest representable value.
    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    /// Largest representable value.
    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    /// Finest scaling that still represents `max_abs` without saturating.
    ///
    /// Returns the spec with the largest `frac_bits` such that
    /// `max_abs <= max_value()`. For `max_abs == 0` the scaling is
    /// arbitrary; `wordlength - 1` is returned.
    pub fn fit(wordlength: u8, max_abs: f64) -> Result<Self> {
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(Error::NonFinite(max_abs));
        }
        let mut spec = Self::new(wordlength, i32::from(wordlength) - 1)?;
        if max_abs == 0.0 {
            return Ok(spec);
        }
        let max_code = spec.max_code() as f64;
        let mut frac = (max_code / max_abs).log2().floor() as i32;
        // log2 rounding can be off by one either way; settle it exactly.
        while max_abs * pow2(frac) > max_code {
            frac -= 1;
        }
        while max_abs * pow2(frac + 1) <= max_code {
            frac += 1;
        }
        spec.frac_bits = frac;
        Ok(spec)
    }
}

/// Nearest representable code for `x`, round half away from zero,
/// saturating at the ends of the representable range.
pub fn quantize(x: f64, spec: &FixedSpec) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(x));
    }
    if x == 0.0 {
        return Ok(0);
    }
    let scaled = x * pow2(spec.frac_bits);
    let min = spec.min_code();
    let max = spec.max_code();
    let code = if scaled <= min as f64 {
        min
    } else if scaled >= max as f64 {
        max
    } else {
        // f64::round is round-half-away-from-zero.
        scaled.round() as i64
    };
    Ok(code)
}

/// Real value of `code` under `spec`, `code * 2^(-frac_bits)`.
pub fn dequantize(code: i64, spec: &FixedSpec) -> Result<f64> {
    if code < spec.min_code() || code > spec.max_code() {
        return Err(Error::CodeOutOfRange {
            code,
            wordlength: spec.wordlength,
        });
    }
    Ok(code as f64 * spec.step())
}

/// One multiply-accumulate step on integer codes.
///
/// The `i64` accumulator leaves 64 - 2*16 = 32 bits of headroom above the
/// widest code product, enough for inner dimensions up to 2^32; no layer
/// in scope comes near that, so the operation cannot overflow.
#[inline]
pub fn macc_exact(acc: i64, a_code: i64, w_code: i64) -> i64 {
    acc + a_code * w_code
}

/// Weight/activation scaling for one layer under the network wordlength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub frac_weights: i32,
    pub frac_activations: i32,
}

/// Weight and activation specs for one layer, ready for the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpecs {
    pub weights: FixedSpec,
    pub activations: FixedSpec,
}

/// Network-wide quantisation scheme: a uniform wordlength plus one
/// (weight, activation) scaling pair per CONV/FC layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub wordlength: u8,
    pub per_layer: Vec<LayerQuant>,
}

impl QuantScheme {
    pub fn new(wordlength: u8, per_layer: Vec<LayerQuant>) -> Result<Self> {
        if !(MIN_WORDLENGTH..=MAX_WORDLENGTH).contains(&wordlength) {
            return Err(Error::InvalidWordlength(wordlength));
        }
        Ok(Self {
            wordlength,
            per_layer,
        })
    }

    /// Specs for the `idx`-th CONV/FC layer.
    pub fn layer_specs(&self, idx: usize) -> Result<LayerSpecs> {
        let lq = self.per_layer.get(idx).ok_or_else(|| {
            Error::SchemeMismatch(format!(
                "scheme has {} layer entries, index {idx} requested",
                self.per_layer.len()
            ))
        })?;
        Ok(LayerSpecs {
            weights: FixedSpec::new(self.wordlength, lq.frac_weights)?,
            activations: FixedSpec::new(self.wordlength, lq.frac_activations)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn spec(wl: u8, frac: i32) -> FixedSpec {
        FixedSpec::new(wl, frac).unwrap()
    }

    /// Independent oracle: enumerate every representable value and pick
    /// the nearest, breaking ties away from zero.
    fn nearest_by_enumeration(x: f64, s: &FixedSpec) -> i64 {
        let mut best = s.min_code();
        let mut best_dist = f64::INFINITY;
        for code in s.min_code()..=s.max_code() {
            let v = code as f64 * s.step();
            let d = (x - v).abs();
            if d < best_dist || (d == best_dist && code.abs() > best.abs()) {
                best = code;
                best_dist = d;
            }
        }
        best
    }

    #[test]
    fn zero_is_always_code_zero() {
        for wl in MIN_WORDLENGTH..=MAX_WORDLENGTH {
            for frac in [-4, 0, 3, 20] {
                assert_eq!(quantize(0.0, &spec(wl, frac)).unwrap(), 0);
            }
        }
    }

    #[test]
    fn nearest_value_matches_enumeration() {
        let s = spec(4, 2);
        assert_eq!(quantize(1.3, &s).unwrap(), 5);
        assert_eq!(nearest_by_enumeration(1.3, &s), 5);
        assert_eq!(dequantize(5, &s).unwrap(), 1.25);
    }

    #[test]
    fn saturates_to_max_code() {
        let s = spec(4, 2);
        assert_eq!(quantize(10.0, &s).unwrap(), 7);
        assert_eq!(dequantize(7, &s).unwrap(), 1.75);
        assert_eq!(quantize(-10.0, &s).unwrap(), -8);
    }

    #[test]
    fn dequantize_examples() {
        let s = spec(4, 2);
        assert_eq!(dequantize(0, &s).unwrap(), 0.0);
        assert_eq!(dequantize(-8, &s).unwrap(), -2.0);
        assert!(matches!(
            dequantize(8, &s),
            Err(Error::CodeOutOfRange { code: 8, .. })
        ));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let s = spec(8, 4);
        assert!(quantize(f64::NAN, &s).is_err());
        assert!(quantize(f64::INFINITY, &s).is_err());
    }

    #[test]
    fn macc_examples() {
        assert_eq!(macc_exact(0, 0, 12345), 0);
        assert_eq!(macc_exact(10, 3, -4), -2);
        let mut acc = 0;
        for _ in 0..9 {
            acc = macc_exact(acc, 7, 7);
        }
        assert_eq!(acc, 441);
    }

    #[test]
    fn fit_picks_finest_non_saturating_scaling() {
        let s = FixedSpec::fit(8, 1.0).unwrap();
        // 127 * 2^-6 = 1.984 >= 1.0, 127 * 2^-7 = 0.992 < 1.0.
        assert_eq!(s.frac_bits, 6);
        assert!(s.max_value() >= 1.0);
        let finer = spec(8, s.frac_bits + 1);
        assert!(finer.max_value() < 1.0);
    }

    #[test]
    fn extreme_scalings_behave() {
        // Gigantic frac: every representable value is tiny, positive x
        // saturates to max code.
        assert_eq!(quantize(1.0, &spec(4, 500)).unwrap(), 7);
        // Gigantic negative frac: the grid is coarse beyond x, nearest is 0.
        assert_eq!(quantize(1.0, &spec(4, -500)).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(
            x in -1e6f64..1e6,
            wl in MIN_WORDLENGTH..=MAX_WORDLENGTH,
            frac in -8i32..24,
        ) {
            let s = spec(wl, frac);
            let c = quantize(x, &s).unwrap();
            let v = dequantize(c, &s).unwrap();
            prop_assert_eq!(quantize(v, &s).unwrap(), c);
        }

        #[test]
        fn error_is_bounded_inside_range(
            unit in -1.0f64..1.0,
            wl in MIN_WORDLENGTH..=MAX_WORDLENGTH,
            frac in -8i32..24,
        ) {
            let s = spec(wl, frac);
            // Map the unit draw onto the representable range.
            let x = if unit >= 0.0 {
                unit * s.max_value()
            } else {
                -unit * s.min_value()
            };
            let c = quantize(x, &s).unwrap();
            let v = dequantize(c, &s).unwrap();
            prop_assert!((v - x).abs() <= s.step() / 2.0 * (1.0 + 1e-12));
        }

        #[test]
        fn saturation_outside_range(
            above in 1.0f64..1e6,
            wl in MIN_WORDLENGTH..=MAX_WORDLENGTH,
            frac in -8i32..24,
        ) {
            let s = spec(wl, frac);
            let hi = s.max_value() * (1.0 + 1e-9) + above;
            let lo = s.min_value() * (1.0 + 1e-9) - above;
            prop_assert_eq!(quantize(hi, &s).unwrap(), s.max_code());
            prop_assert_eq!(quantize(lo, &s).unwrap(), s.min_code());
        }

        #[test]
        fn macc_matches_bigint_oracle(seq in prop::collection::vec((-32768i64..32768, -32768i64..32768), 0..200)) {
            let mut acc = 0i64;
            let mut oracle = BigInt::from(0);
            for &(a, w) in &seq {
                acc = macc_exact(acc, a, w);
                oracle += BigInt::from(a) * BigInt::from(w);
            }
            prop_assert_eq!(BigInt::from(acc), oracle);
        }
    }
}
