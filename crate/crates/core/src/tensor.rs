//! Dense row-major tensors and the mixed-precision matrix multiply.
//!
//! Only what the quantization pipeline needs: 2-D matrices in `f64`, `f32`
//! or FP8 code form, elementwise row/column scaling, and two matrix
//! products. [`matmul_mixed`] multiplies FP8 operands with accumulation in
//! `f32`; [`matmul_reference`] is the `f64` product used as an oracle and
//! for real-precision baselines.
//!
//! The `f32` accumulation order is part of the contract: each output element
//! sums its K products in 64-wide blocks, ascending within a block, blocks
//! combined in ascending order. Parallelism only ever splits work across
//! output elements, so results are identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Fp8Format, OverflowPolicy, RoundingMode};
use crate::error::{Error, Result};

/// Width of one accumulation block in [`matmul_mixed`].
const ACC_BLOCK: usize = 64;

/// Element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    Fp8(Fp8Format),
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F64 => write!(f, "f64"),
            DType::F32 => write!(f, "f32"),
            DType::Fp8(fmt) => write!(f, "fp8[{fmt}]"),
        }
    }
}

#[derive(Debug, Clone)]
enum Data {
    F64(Vec<f64>),
    F32(Vec<f32>),
    Fp8 { codes: Vec<u8>, fmt: Fp8Format },
}

/// Dense row-major matrix.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Data,
}

impl Tensor {
    pub fn from_f64(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_len(rows, cols, values.len())?;
        Ok(Tensor { rows, cols, data: Data::F64(values) })
    }

    pub fn from_f32(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        Self::check_len(rows, cols, values.len())?;
        Ok(Tensor { rows, cols, data: Data::F32(values) })
    }

    pub fn from_codes(rows: usize, cols: usize, codes: Vec<u8>, fmt: Fp8Format) -> Result<Self> {
        Self::check_len(rows, cols, codes.len())?;
        Ok(Tensor { rows, cols, data: Data::Fp8 { codes, fmt } })
    }

    fn check_len(rows: usize, cols: usize, len: usize) -> Result<()> {
        if rows * cols != len {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {len} elements does not fill a {rows}x{cols} tensor"
            )));
        }
        Ok(())
    }

    pub fn zeros_f64(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: Data::F64(vec![0.0; rows * cols]) }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match &self.data {
            Data::F64(_) => DType::F64,
            Data::F32(_) => DType::F32,
            Data::Fp8 { fmt, .. } => DType::Fp8(*fmt),
        }
    }

    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match &self.data {
            Data::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_slice(&self) -> Option<&[f32]> {
        match &self.data {
            Data::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_codes(&self) -> Option<(&[u8], Fp8Format)> {
        match &self.data {
            Data::Fp8 { codes, fmt } => Some((codes, *fmt)),
            _ => None,
        }
    }

    /// Materialize the contents as `f64`, decoding FP8 codes exactly.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F64(v) => v.clone(),
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::Fp8 { codes, fmt } => {
                let lut = decode_lut(*fmt);
                codes.iter().map(|&c| lut[c as usize] as f64).collect()
            }
        }
    }

    /// Widen or decode to a fresh `f64` tensor.
    pub fn to_f64_tensor(&self) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: Data::F64(self.to_f64_vec()) }
    }

    /// Element at `(r, c)` as `f64`.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let i = r * self.cols + c;
        match &self.data {
            Data::F64(v) => v[i],
            Data::F32(v) => v[i] as f64,
            Data::Fp8 { codes, fmt } => codec::decode(codes[i], *fmt),
        }
    }

    /// Transpose, preserving dtype.
    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows, self.cols);
        let t = |src_idx: &dyn Fn(usize, usize) -> usize| -> Vec<usize> {
            let mut order = Vec::with_capacity(r * c);
            for j in 0..c {
                for i in 0..r {
                    order.push(src_idx(i, j));
                }
            }
            order
        };
        let order = t(&|i, j| i * c + j);
        let data = match &self.data {
            Data::F64(v) => Data::F64(order.iter().map(|&k| v[k]).collect()),
            Data::F32(v) => Data::F32(order.iter().map(|&k| v[k]).collect()),
            Data::Fp8 { codes, fmt } => {
                Data::Fp8 { codes: order.iter().map(|&k| codes[k]).collect(), fmt: *fmt }
            }
        };
        Tensor { rows: c, cols: r, data }
    }

    /// Largest absolute value; 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        match &self.data {
            Data::F64(v) => v.iter().fold(0.0f64, |m, &x| m.max(x.abs())),
            Data::F32(v) => v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())),
            Data::Fp8 { codes, fmt } => {
                let lut = decode_lut(*fmt);
                codes.iter().fold(0.0f64, |m, &c| m.max((lut[c as usize] as f64).abs()))
            }
        }
    }
}

/// Axis a [`ScaleVector`] applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleAxis {
    /// One scale for the whole tensor.
    PerTensor,
    /// One scale per activation row.
    PerSample,
    /// One scale per weight output channel.
    PerOutChannel,
    /// One scale per input channel (the GEMM common dimension).
    PerInChannel,
}

/// Positive scale factors tagged with the axis they apply to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    values: Vec<f64>,
    axis: ScaleAxis,
}

impl ScaleVector {
    pub fn new(values: Vec<f64>, axis: ScaleAxis) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyTensor("scale vector".into()));
        }
        if axis == ScaleAxis::PerTensor && values.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "per-tensor scale must have length 1, got {}",
                values.len()
            )));
        }
        for &v in &values {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NonPositiveScale(v));
            }
        }
        Ok(ScaleVector { values, axis })
    }

    pub fn per_tensor(s: f64) -> Result<Self> {
        Self::new(vec![s], ScaleAxis::PerTensor)
    }

    pub fn ones(len: usize, axis: ScaleAxis) -> Self {
        ScaleVector { values: vec![1.0; len.max(1)], axis }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn axis(&self) -> ScaleAxis {
        self.axis
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scale for position `i` along the tagged axis (broadcasting length 1).
    pub fn at(&self, i: usize) -> f64 {
        if self.values.len() == 1 {
            self.values[0]
        } else {
            self.values[i]
        }
    }

    pub fn is_unit(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}

fn scale_factor_len_check(len: usize, extent: usize, what: &str) -> Result<()> {
    if len != 1 && len != extent {
        return Err(Error::ShapeMismatch(format!(
            "{what} scale of length {len} does not match extent {extent}"
        )));
    }
    Ok(())
}

/// Multiply (or divide, when `invert`) each row by its scale.
pub fn scale_rows(t: &Tensor, s: &ScaleVector, invert: bool) -> Result<Tensor> {
    scale_factor_len_check(s.len(), t.rows(), "row")?;
    apply_scale(t, s, invert, true)
}

/// Multiply (or divide, when `invert`) each column by its scale.
pub fn scale_cols(t: &Tensor, s: &ScaleVector, invert: bool) -> Result<Tensor> {
    scale_factor_len_check(s.len(), t.cols(), "column")?;
    apply_scale(t, s, invert, false)
}

fn apply_scale(t: &Tensor, s: &ScaleVector, invert: bool, by_row: bool) -> Result<Tensor> {
    let cols = t.cols();
    let pick = |i: usize, j: usize| if by_row { s.at(i) } else { s.at(j) };
    match &t.data {
        Data::F64(v) => {
            let mut out = Vec::with_capacity(v.len());
            for (idx, &x) in v.iter().enumerate() {
                let f = pick(idx / cols, idx % cols);
                out.push(if invert { x / f } else { x * f });
            }
            Tensor::from_f64(t.rows(), cols, out)
        }
        Data::F32(v) => {
            let mut out = Vec::with_capacity(v.len());
            for (idx, &x) in v.iter().enumerate() {
                let f = pick(idx / cols, idx % cols) as f32;
                out.push(if invert { x / f } else { x * f });
            }
            Tensor::from_f32(t.rows(), cols, out)
        }
        Data::Fp8 { .. } => Err(Error::UnsupportedDtype {
            op: "scale",
            dtype: t.dtype().to_string(),
        }),
    }
}

fn decode_lut(fmt: Fp8Format) -> [f32; 256] {
    let mut lut = [0.0f32; 256];
    for (c, slot) in lut.iter_mut().enumerate() {
        *slot = codec::decode(c as u8, fmt) as f32;
    }
    lut
}

/// FP8 x FP8 matrix product with `f32` accumulation.
///
/// Operand formats may differ. Every output element is
/// `sum_k decode(a[i,k]) * decode(b[k,j])` accumulated in `f32` under the
/// fixed block schedule described in the module docs.
pub fn matmul_mixed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (a_codes, a_fmt) = a.as_codes().ok_or(Error::UnsupportedDtype {
        op: "matmul_mixed lhs",
        dtype: a.dtype().to_string(),
    })?;
    let (b_codes, b_fmt) = b.as_codes().ok_or(Error::UnsupportedDtype {
        op: "matmul_mixed rhs",
        dtype: b.dtype().to_string(),
    })?;
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "matmul_mixed: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());

    let a_lut = decode_lut(a_fmt);
    let b_lut = decode_lut(b_fmt);
    let av: Vec<f32> = a_codes.iter().map(|&c| a_lut[c as usize]).collect();
    let bv: Vec<f32> = b_codes.iter().map(|&c| b_lut[c as usize]).collect();

    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        let a_row = &av[i * k..(i + 1) * k];
        for (j, out_elem) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            let mut kk = 0;
            while kk < k {
                let end = (kk + ACC_BLOCK).min(k);
                let mut part = 0.0f32;
                for (off, &a_val) in a_row[kk..end].iter().enumerate() {
                    part += a_val * bv[(kk + off) * n + j];
                }
                acc += part;
                kk = end;
            }
            *out_elem = acc;
        }
    });
    Tensor::from_f32(m, n, out)
}

/// `f64` matrix product. The high-precision oracle and baseline path.
pub fn matmul_reference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let av = a.as_f64_slice().ok_or(Error::UnsupportedDtype {
        op: "matmul_reference lhs",
        dtype: a.dtype().to_string(),
    })?;
    let bv = b.as_f64_slice().ok_or(Error::UnsupportedDtype {
        op: "matmul_reference rhs",
        dtype: b.dtype().to_string(),
    })?;
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "matmul_reference: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        let a_row = &av[i * k..(i + 1) * k];
        for (j, out_elem) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (kk, &a_val) in a_row.iter().enumerate() {
                acc += a_val * bv[kk * n + j];
            }
            *out_elem = acc;
        }
    });
    Tensor::from_f64(m, n, out)
}

/// Cast every element of a real tensor to FP8 codes.
///
/// The stochastic-rounding draw for an element uses its row-major linear
/// index, so the result does not depend on traversal order.
pub fn encode_tensor(
    t: &Tensor,
    fmt: Fp8Format,
    rnd: RoundingMode,
    ovf: OverflowPolicy,
) -> Result<Tensor> {
    let vals = match &t.data {
        Data::F64(v) => v.clone(),
        Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
        Data::Fp8 { .. } => {
            return Err(Error::UnsupportedDtype { op: "encode_tensor", dtype: t.dtype().to_string() })
        }
    };
    let codes = vals
        .iter()
        .enumerate()
        .map(|(i, &v)| codec::encode(v, fmt, rnd, ovf, i as u64))
        .collect();
    Tensor::from_codes(t.rows(), t.cols(), codes, fmt)
}

/// Truncate an `f32` to the bfloat16 grid (8 mantissa bits, ties to even).
///
/// Used only to emulate 16-bit baseline outputs; everything else in the
/// pipeline stays in `f32`/`f64`.
pub fn bf16_round(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let rounded = bits.wrapping_add(0x7fff + ((bits >> 16) & 1)) & 0xffff_0000;
    f32::from_bits(rounded)
}

/// Frobenius norm of the elementwise difference of two tensors, in `f64`.
pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "frobenius_distance: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let av = a.to_f64_vec();
    let bv = b.to_f64_vec();
    Ok(av
        .iter()
        .zip(&bv)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Frobenius norm of a tensor, in `f64`.
pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.to_f64_vec().iter().map(|&x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_f64(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::from_f64(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::from_f32(1, 4, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn scale_rows_basic() {
        let t = t64(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = ScaleVector::new(vec![2.0, 4.0], ScaleAxis::PerSample).unwrap();
        let out = scale_rows(&t, &s, false).unwrap();
        assert_eq!(out.to_f64_vec(), vec![2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn scale_cols_basic() {
        let t = t64(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = ScaleVector::new(vec![2.0, 4.0], ScaleAxis::PerInChannel).unwrap();
        let out = scale_cols(&t, &s, false).unwrap();
        assert_eq!(out.to_f64_vec(), vec![2.0, 4.0, 2.0, 4.0]);
        let div = scale_cols(&t, &s, true).unwrap();
        assert_eq!(div.to_f64_vec(), vec![0.5, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn scale_identity() {
        let t = t64(2, 3, &[1.0, -2.0, 3.0, 4.0, -5.0, 6.0]);
        let ones = ScaleVector::ones(2, ScaleAxis::PerSample);
        let out = scale_rows(&t, &ones, false).unwrap();
        assert_eq!(out.to_f64_vec(), t.to_f64_vec());
        let ones = ScaleVector::ones(3, ScaleAxis::PerInChannel);
        let out = scale_cols(&t, &ones, true).unwrap();
        assert_eq!(out.to_f64_vec(), t.to_f64_vec());
    }

    #[test]
    fn scale_round_trip_within_one_ulp() {
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 - 31.5) * 0.137).collect();
        let t = t64(8, 8, &vals);
        let s = ScaleVector::new((1..=8).map(|i| 0.31 * i as f64).collect(), ScaleAxis::PerSample)
            .unwrap();
        let back = scale_rows(&scale_rows(&t, &s, true).unwrap(), &s, false).unwrap();
        for (a, b) in t.to_f64_vec().iter().zip(back.to_f64_vec()) {
            let ulp = a.abs() * f64::EPSILON;
            assert!((a - b).abs() <= ulp, "{a} vs {b}");
        }
    }

    #[test]
    fn scale_errors() {
        let t = t64(2, 2, &[0.0; 4]);
        let wrong_len = ScaleVector::new(vec![1.0, 1.0, 1.0], ScaleAxis::PerSample).unwrap();
        assert!(scale_rows(&t, &wrong_len, false).is_err());
        assert!(ScaleVector::new(vec![0.0], ScaleAxis::PerTensor).is_err());
        assert!(ScaleVector::new(vec![-1.0], ScaleAxis::PerTensor).is_err());
        assert!(ScaleVector::new(vec![f64::INFINITY], ScaleAxis::PerTensor).is_err());
    }

    #[test]
    fn matmul_reference_small() {
        let a = t64(1, 1, &[2.0]);
        let b = t64(1, 1, &[3.0]);
        assert_eq!(matmul_reference(&a, &b).unwrap().to_f64_vec(), vec![6.0]);

        let a = t64(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            matmul_reference(&a, &b).unwrap().to_f64_vec(),
            vec![19.0, 22.0, 43.0, 50.0]
        );
    }

    #[test]
    fn matmul_mixed_identity_passthrough() {
        let fmt = Fp8Format::E4M3;
        let rnd = RoundingMode::NearestEven;
        let ovf = OverflowPolicy::Saturate;
        let eye = encode_tensor(&t64(2, 2, &[1.0, 0.0, 0.0, 1.0]), fmt, rnd, ovf).unwrap();
        let b = encode_tensor(&t64(2, 2, &[1.5, -2.0, 0.25, 3.0]), fmt, rnd, ovf).unwrap();
        let out = matmul_mixed(&eye, &b).unwrap();
        assert_eq!(out.to_f64_vec(), b.to_f64_vec());
    }

    #[test]
    fn matmul_mixed_scalar() {
        let fmt = Fp8Format::E5M2;
        let a = Tensor::from_codes(1, 1, vec![codec::encode(2.0, fmt, RoundingMode::NearestEven, OverflowPolicy::Saturate, 0)], fmt).unwrap();
        let b = Tensor::from_codes(1, 1, vec![codec::encode(3.0, fmt, RoundingMode::NearestEven, OverflowPolicy::Saturate, 0)], fmt).unwrap();
        assert_eq!(matmul_mixed(&a, &b).unwrap().to_f64_vec(), vec![6.0]);
    }

    #[test]
    fn matmul_mixed_exact_on_small_integers() {
        // Small integers survive e4m3 encoding exactly and their products
        // accumulate exactly in f32 for K <= 16, so the mixed product must
        // equal the f64 reference bit for bit.
        let k = 16;
        let mut a_vals = Vec::new();
        let mut b_vals = Vec::new();
        for i in 0..4 * k {
            a_vals.push(((i * 7 + 3) % 17) as f64 - 8.0);
            b_vals.push(((i * 11 + 5) % 17) as f64 - 8.0);
        }
        let a = t64(4, k, &a_vals);
        let b = t64(k, 4, &b_vals);
        let fmt = Fp8Format::E4M3;
        let aq = encode_tensor(&a, fmt, RoundingMode::NearestEven, OverflowPolicy::Saturate).unwrap();
        let bq = encode_tensor(&b, fmt, RoundingMode::NearestEven, OverflowPolicy::Saturate).unwrap();
        let got = matmul_mixed(&aq, &bq).unwrap();
        let want = matmul_reference(&a, &b).unwrap();
        assert_eq!(got.to_f64_vec(), want.to_f64_vec());
    }

    #[test]
    fn matmul_mixed_tracks_f64_oracle_on_random_codes() {
        // Random 8x8 code tensors: the f32-accumulated product must track
        // the f64 product of the decoded values to f32 accumulation
        // accuracy (Frobenius-relative 1e-6 at K = 8).
        let fmt = Fp8Format::E4M3;
        let codes_a: Vec<u8> = (0..64u32).map(|i| (i.wrapping_mul(37).wrapping_add(11) % 251) as u8).collect();
        let codes_b: Vec<u8> = (0..64u32).map(|i| (i.wrapping_mul(73).wrapping_add(5) % 251) as u8).collect();
        let clean = |v: Vec<u8>| -> Vec<u8> {
            v.into_iter().map(|c| if codec::decode(c, fmt).is_finite() { c } else { 0 }).collect()
        };
        let a = Tensor::from_codes(8, 8, clean(codes_a), fmt).unwrap();
        let b = Tensor::from_codes(8, 8, clean(codes_b), fmt).unwrap();
        let got = matmul_mixed(&a, &b).unwrap();
        let want = matmul_reference(&a.to_f64_tensor(), &b.to_f64_tensor()).unwrap();
        let num = frobenius_distance(&got, &want).unwrap();
        let den = frobenius_norm(&want);
        assert!(num <= 1e-6 * den, "rel err {}", num / den);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let fmt = Fp8Format::E4M3;
        let a = Tensor::from_codes(2, 3, vec![0; 6], fmt).unwrap();
        let b = Tensor::from_codes(2, 2, vec![0; 4], fmt).unwrap();
        assert!(matmul_mixed(&a, &b).is_err());
        let a = t64(2, 3, &[0.0; 6]);
        let b = t64(2, 2, &[0.0; 4]);
        assert!(matmul_reference(&a, &b).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let t = t64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tt = t.transposed();
        assert_eq!(tt.rows(), 3);
        assert_eq!(tt.get(0, 1), 4.0);
        assert_eq!(tt.transposed().to_f64_vec(), t.to_f64_vec());
    }

    #[test]
    fn bf16_truncation() {
        // 1 + 2^-9 is below the bf16 half-ulp at 1.0, so it rounds back to 1.
        assert_eq!(bf16_round(1.0 + 1.0 / 512.0), 1.0);
        // 1 + 2^-7 is representable: bf16 keeps 8 semantic mantissa bits.
        assert_eq!(bf16_round(1.0 + 1.0 / 128.0), 1.0 + 1.0 / 128.0);
        assert_eq!(bf16_round(-3.0), -3.0);
        assert!(bf16_round(f32::NAN).is_nan());
    }
}
