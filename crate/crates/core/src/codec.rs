//! Bit-exact software emulation of 8-bit floating-point formats.
//!
//! Three format variants are supported, all with a 1-bit sign and a total
//! width of 8 bits:
//!
//! - [`Fp8Format::E4M3`]: 4 exponent / 3 mantissa bits, OCP layout. No
//!   infinities; the single all-ones code per sign is NaN, which frees the
//!   top exponent for normal numbers and extends the range to ±448.
//! - [`Fp8Format::E4M3Gaudi2`]: same bit split, IEEE-style layout. The top
//!   exponent is reserved for Inf/NaN, which limits the range to ±240.
//! - [`Fp8Format::E5M2`]: 5 exponent / 2 mantissa bits, IEEE-style layout
//!   with Inf/NaN, range ±57344.
//!
//! Subnormals are supported in every variant. Conversions are exact: every
//! code decodes to an `f64` without rounding, and [`encode`] selects codes by
//! comparing against the exact decoded values, so results are reproducible
//! bit for bit on any platform.
//!
//! Encoding supports round-to-nearest-even and stochastic rounding. The
//! stochastic variant draws its randomness from a counter-based generator
//! keyed by `(seed, element index)`, so a given element always rounds the
//! same way no matter how the surrounding buffer is traversed or partitioned
//! across threads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// FP8 format variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fp8Format {
    /// E4M3, OCP layout: max finite ±448, no Inf, NaN = all bits set (per sign).
    E4M3,
    /// E4M3, IEEE-style layout: max finite ±240, top exponent is Inf/NaN.
    E4M3Gaudi2,
    /// E5M2, IEEE-style layout: max finite ±57344, top exponent is Inf/NaN.
    E5M2,
}

impl Fp8Format {
    /// All supported variants, in CLI listing order.
    pub const ALL: [Fp8Format; 3] = [Fp8Format::E4M3, Fp8Format::E4M3Gaudi2, Fp8Format::E5M2];

    /// Number of exponent bits.
    pub const fn exp_bits(self) -> u32 {
        match self {
            Fp8Format::E4M3 | Fp8Format::E4M3Gaudi2 => 4,
            Fp8Format::E5M2 => 5,
        }
    }

    /// Number of mantissa bits.
    pub const fn mant_bits(self) -> u32 {
        match self {
            Fp8Format::E4M3 | Fp8Format::E4M3Gaudi2 => 3,
            Fp8Format::E5M2 => 2,
        }
    }

    /// Exponent bias (IEEE convention: `2^(exp_bits-1) - 1`).
    pub const fn exp_bias(self) -> i32 {
        match self {
            Fp8Format::E4M3 | Fp8Format::E4M3Gaudi2 => 7,
            Fp8Format::E5M2 => 15,
        }
    }

    /// Whether the format has dedicated ±Inf codes.
    pub const fn has_inf(self) -> bool {
        !matches!(self, Fp8Format::E4M3)
    }

    /// Magnitude of the largest finite value.
    pub fn max_finite(self) -> f64 {
        match self {
            Fp8Format::E4M3 => 448.0,
            Fp8Format::E4M3Gaudi2 => 240.0,
            Fp8Format::E5M2 => 57344.0,
        }
    }

    /// Code (sign bit clear) of the largest finite value.
    pub const fn max_finite_code(self) -> u8 {
        match self {
            // S=0 E=1111 M=110
            Fp8Format::E4M3 => 0x7e,
            // S=0 E=1110 M=111
            Fp8Format::E4M3Gaudi2 => 0x77,
            // S=0 E=11110 M=11
            Fp8Format::E5M2 => 0x7b,
        }
    }

    /// Canonical (positive, quiet) NaN code.
    pub const fn nan_code(self) -> u8 {
        match self {
            Fp8Format::E4M3 => 0x7f,
            // top exponent, mantissa MSB set
            Fp8Format::E4M3Gaudi2 => 0x7c,
            Fp8Format::E5M2 => 0x7e,
        }
    }

    /// Positive infinity code; `None` for formats without Inf.
    pub const fn inf_code(self) -> Option<u8> {
        match self {
            Fp8Format::E4M3 => None,
            Fp8Format::E4M3Gaudi2 => Some(0x78),
            Fp8Format::E5M2 => Some(0x7c),
        }
    }

    /// Name used in CLIs and config files.
    pub const fn name(self) -> &'static str {
        match self {
            Fp8Format::E4M3 => "e4m3",
            Fp8Format::E4M3Gaudi2 => "e4m3_gaudi2",
            Fp8Format::E5M2 => "e5m2",
        }
    }

    fn magnitude_table(self) -> &'static [f64] {
        fn build(fmt: Fp8Format) -> Vec<f64> {
            (0..=fmt.max_finite_code()).map(|c| decode(c, fmt)).collect()
        }
        use std::sync::OnceLock;
        static E4M3: OnceLock<Vec<f64>> = OnceLock::new();
        static E4M3_G2: OnceLock<Vec<f64>> = OnceLock::new();
        static E5M2: OnceLock<Vec<f64>> = OnceLock::new();
        match self {
            Fp8Format::E4M3 => E4M3.get_or_init(|| build(self)),
            Fp8Format::E4M3Gaudi2 => E4M3_G2.get_or_init(|| build(self)),
            Fp8Format::E5M2 => E5M2.get_or_init(|| build(self)),
        }
    }
}

impl fmt::Display for Fp8Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fp8Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "e4m3" => Ok(Fp8Format::E4M3),
            "e4m3_gaudi2" => Ok(Fp8Format::E4M3Gaudi2),
            "e5m2" => Ok(Fp8Format::E5M2),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// Rounding mode used when casting to FP8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    /// Round to the nearest representable value, ties to even mantissa.
    NearestEven,
    /// Unbiased stochastic rounding. The draw for element `i` depends only on
    /// `(seed, i)`, never on traversal order.
    Stochastic { seed: u64 },
}

/// What to do with finite magnitudes above the format maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// Clamp to ±max finite.
    #[default]
    Saturate,
    /// Produce ±Inf where the format has one, otherwise NaN.
    ToSpecial,
}

/// Decode one FP8 code to its exact real value.
///
/// Total over all 256 bit patterns. Special codes map to `f64::NAN` and
/// `±f64::INFINITY`; the negative-zero code decodes to `-0.0`.
pub fn decode(code: u8, fmt: Fp8Format) -> f64 {
    let m_bits = fmt.mant_bits();
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp_field = ((code & 0x7f) >> m_bits) as i32;
    let mant = (code & ((1u8 << m_bits) - 1)) as i32;
    let top_exp = (1i32 << fmt.exp_bits()) - 1;

    if exp_field == top_exp {
        match fmt {
            Fp8Format::E4M3 => {
                if mant == (1 << m_bits) - 1 {
                    return f64::NAN;
                }
                // OCP: the top exponent still holds normal numbers.
            }
            Fp8Format::E4M3Gaudi2 | Fp8Format::E5M2 => {
                return if mant == 0 { sign * f64::INFINITY } else { f64::NAN };
            }
        }
    }

    let scale = |e: i32| -> f64 { (2.0f64).powi(e) };
    if exp_field == 0 {
        // Subnormal: (-1)^S * 2^(1-bias) * (M / 2^m)
        sign * mant as f64 * scale(1 - fmt.exp_bias() - m_bits as i32)
    } else {
        // Normal: (-1)^S * 2^(E-bias) * (1 + M / 2^m)
        sign * ((1 << m_bits) + mant) as f64 * scale(exp_field - fmt.exp_bias() - m_bits as i32)
    }
}

/// Encode one real value to an FP8 code.
///
/// `index` identifies the element within its buffer and only affects
/// stochastic rounding; pass 0 for scalar use.
///
/// - NaN encodes to the canonical NaN code.
/// - `±0.0` both encode to the positive zero code.
/// - `±Inf` encodes to the matching Inf code where the format has one
///   (so special codes round-trip); otherwise it follows `ovf`.
/// - Finite magnitudes above the format maximum follow `ovf`.
/// - In-range values round to one of the two bracketing codes: nearest with
///   ties to even mantissa, or stochastically with probability proportional
///   to the distance from the lower neighbour.
pub fn encode(value: f64, fmt: Fp8Format, rnd: RoundingMode, ovf: OverflowPolicy, index: u64) -> u8 {
    if value.is_nan() {
        return fmt.nan_code();
    }
    let sign_bit = if value.is_sign_negative() { 0x80u8 } else { 0 };
    if value.is_infinite() {
        if let Some(inf) = fmt.inf_code() {
            return sign_bit | inf;
        }
    }
    let a = value.abs();
    if a == 0.0 {
        return 0x00;
    }
    if a > fmt.max_finite() {
        return match ovf {
            OverflowPolicy::Saturate => sign_bit | fmt.max_finite_code(),
            OverflowPolicy::ToSpecial => match fmt.inf_code() {
                Some(inf) => sign_bit | inf,
                None => fmt.nan_code(),
            },
        };
    }

    let mags = fmt.magnitude_table();
    // First code whose magnitude is >= a; a is in (0, max_finite] so
    // hi lands in 1..=max_finite_code.
    let hi = mags.partition_point(|&m| m < a);
    if mags[hi] == a {
        return sign_bit | hi as u8;
    }
    let lo = hi - 1;
    let chosen = match rnd {
        RoundingMode::NearestEven => {
            // Adjacent code values share at most one extra significand bit,
            // so the midpoint is exact in f64.
            let mid = 0.5 * (mags[lo] + mags[hi]);
            if a < mid {
                lo
            } else if a > mid {
                hi
            } else if lo & 1 == 0 {
                lo
            } else {
                hi
            }
        }
        RoundingMode::Stochastic { seed } => {
            let p = (a - mags[lo]) / (mags[hi] - mags[lo]);
            if unit_uniform(seed, index) < p {
                hi
            } else {
                lo
            }
        }
    };
    sign_bit | chosen as u8
}

/// Quantize a value through the format: `decode(encode(value))`.
pub fn round_trip(
    value: f64,
    fmt: Fp8Format,
    rnd: RoundingMode,
    ovf: OverflowPolicy,
    index: u64,
) -> f64 {
    decode(encode(value, fmt, rnd, ovf, index), fmt)
}

/// Counter-based uniform draw in [0, 1), fully determined by `(seed, index)`.
pub(crate) fn unit_uniform(seed: u64, index: u64) -> f64 {
    (mix64(seed, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// SplitMix64 finalizer over a per-element counter stream.
fn mix64(seed: u64, index: u64) -> u64 {
    const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One row of the code table produced by [`enumerate_codes`].
#[derive(Debug, Clone, Copy)]
pub struct CodeEntry {
    pub code: u8,
    pub value: f64,
    pub is_nan: bool,
    pub is_inf: bool,
    pub is_subnormal: bool,
}

/// Decode all 256 codes of a format, in code order.
pub fn enumerate_codes(fmt: Fp8Format) -> Vec<CodeEntry> {
    (0u16..256)
        .map(|c| {
            let code = c as u8;
            let value = decode(code, fmt);
            let exp_field = (code & 0x7f) >> fmt.mant_bits();
            CodeEntry {
                code,
                value,
                is_nan: value.is_nan(),
                is_inf: value.is_infinite(),
                is_subnormal: exp_field == 0 && code & 0x7f != 0,
            }
        })
        .collect()
}
