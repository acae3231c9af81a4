//! The deployable quantized linear layer.
//!
//! Weights are quantized offline into FP8 codes together with their scale
//! set; activations are quantized online at forward time, statically or
//! dynamically. The forward pass runs the FP8 x FP8 product with `f32`
//! accumulation and then descales rows by the activation scales and columns
//! by the weight scales.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::measure_dynamic;
use crate::codec::{Fp8Format, OverflowPolicy, RoundingMode};
use crate::error::{Error, Result};
use crate::scaling::{
    act_scale_per_sample, act_scale_per_tensor, apply_scale_rounding, ActScaleMode, ScaleRounding,
    ScaleSet,
};
use crate::tensor::{
    bf16_round, frobenius_distance, frobenius_norm, matmul_mixed, matmul_reference, scale_cols,
    scale_rows, encode_tensor, ScaleAxis, ScaleVector, Tensor,
};

/// A linear layer quantized for FP8 execution.
///
/// `w_q` holds `Q(S_c W^T S_w^-1)` stored in the weight's own
/// (out x in) layout; the transpose needed by the GEMM is precomputed.
#[derive(Debug, Clone)]
pub struct QuantizedLinear {
    w_q: Tensor,
    w_q_t: Tensor,
    scales: ScaleSet,
    act_mode: ActScaleMode,
    backoff: f64,
    scale_rounding: ScaleRounding,
    rnd: RoundingMode,
    ovf: OverflowPolicy,
    emit_bf16: bool,
}

/// Error and clipping summary for one quantized layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    /// Squared Frobenius norm of the dequantized-weight error.
    pub weight_err_fro: f64,
    /// Relative Frobenius error of the layer output on the probe batch.
    pub output_err_rel: f64,
    /// Scaled elements (weights plus probe activations) beyond the format
    /// maximum, i.e. saturated encodes.
    pub clip_count: u64,
    pub scales_used: ScaleSummary,
}

impl LayerReport {
    /// Report for a layer kept in high precision.
    pub fn passthrough() -> Self {
        LayerReport {
            weight_err_fro: 0.0,
            output_err_rel: 0.0,
            clip_count: 0,
            scales_used: ScaleSummary {
                s_x: "none".into(),
                s_w: "none".into(),
                s_c: "none".into(),
            },
        }
    }
}

/// Human-readable digest of a scale set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub s_x: String,
    pub s_w: String,
    pub s_c: String,
}

fn summarize_vector(v: &ScaleVector) -> String {
    if v.is_unit() {
        return "unit".into();
    }
    if v.len() == 1 {
        return format!("{:.6}", v.values()[0]);
    }
    let min = v.values().iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.values().iter().copied().fold(0.0f64, f64::max);
    format!("[{}] in {:.6}..{:.6}", v.len(), min, max)
}

impl ScaleSummary {
    fn new(scales: &ScaleSet, act_mode: ActScaleMode) -> Self {
        let s_x = match act_mode {
            ActScaleMode::PerTensorStatic => summarize_vector(&scales.s_x),
            ActScaleMode::PerTensorDynamic => "dynamic per-tensor".into(),
            ActScaleMode::PerSampleDynamic => "dynamic per-sample".into(),
        };
        ScaleSummary { s_x, s_w: summarize_vector(&scales.s_w), s_c: summarize_vector(&scales.s_c) }
    }
}

/// Quantize a weight matrix under a scale set: encode `s_c[c] * w[k,c] / s_w[k]`.
pub fn quantize_weights(
    w: &Tensor,
    scales: &ScaleSet,
    rnd: RoundingMode,
    ovf: OverflowPolicy,
) -> Result<Tensor> {
    let scaled = scale_weights(w, scales)?;
    encode_tensor(&scaled, scales.fmt, rnd, ovf)
}

/// The real-valued scaled weights `S_c W^T S_w^-1`, in (out x in) layout.
fn scale_weights(w: &Tensor, scales: &ScaleSet) -> Result<Tensor> {
    let smoothed = if scales.s_c.is_unit() { w.clone() } else { scale_cols(w, &scales.s_c, false)? };
    scale_rows(&smoothed, &scales.s_w, true)
}

/// Quantize an activation batch and return the codes plus the row scales
/// actually applied.
///
/// Static mode requires a precomputed per-tensor scale; the dynamic modes
/// measure the live input, convert maxima to scales with the backoff factor
/// and constrain them per `scale_rounding`.
#[allow(clippy::too_many_arguments)]
pub fn quantize_activation(
    x: &Tensor,
    mode: ActScaleMode,
    static_s_x: Option<f64>,
    backoff: f64,
    scale_rounding: &ScaleRounding,
    fmt: Fp8Format,
    rnd: RoundingMode,
    ovf: OverflowPolicy,
) -> Result<(Tensor, ScaleVector)> {
    let r_q = fmt.max_finite();
    let s_x = match mode {
        ActScaleMode::PerTensorStatic => {
            let s = static_s_x.ok_or_else(|| {
                Error::InvalidConfig(
                    "static activation scaling requires a calibrated scale".into(),
                )
            })?;
            ScaleVector::per_tensor(s)?
        }
        ActScaleMode::PerTensorDynamic => {
            let stats = measure_dynamic(x)?;
            let s = act_scale_per_tensor(stats.r_x_batch, backoff, r_q);
            ScaleVector::per_tensor(apply_scale_rounding(s, scale_rounding)?.value)?
        }
        ActScaleMode::PerSampleDynamic => {
            let raw = act_scale_per_sample(&measure_dynamic(x)?.r_x_per_sample, backoff, r_q)?;
            let mut rounded = Vec::with_capacity(raw.len());
            for &s in raw.values() {
                rounded.push(apply_scale_rounding(s, scale_rounding)?.value);
            }
            ScaleVector::new(rounded, ScaleAxis::PerSample)?
        }
    };
    let scaled = scale_rows(x, &s_x, true)?;
    let codes = encode_tensor(&scaled, fmt, rnd, ovf)?;
    Ok((codes, s_x))
}

impl QuantizedLinear {
    /// Quantize a real (out x in) weight matrix into a deployable layer.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w: &Tensor,
        scales: ScaleSet,
        act_mode: ActScaleMode,
        backoff: f64,
        scale_rounding: ScaleRounding,
        rnd: RoundingMode,
        ovf: OverflowPolicy,
    ) -> Result<Self> {
        if act_mode == ActScaleMode::PerTensorStatic && scales.s_x.len() != 1 {
            return Err(Error::InvalidConfig("static activation scale must be per-tensor".into()));
        }
        if scales.s_c.len() != w.cols() {
            return Err(Error::ChannelMismatch { expected: w.cols(), got: scales.s_c.len() });
        }
        if scales.s_w.len() != 1 && scales.s_w.len() != w.rows() {
            return Err(Error::ShapeMismatch(format!(
                "weight scale length {} does not match {} output channels",
                scales.s_w.len(),
                w.rows()
            )));
        }
        let w_q = quantize_weights(w, &scales, rnd, ovf)?;
        let w_q_t = w_q.transposed();
        Ok(QuantizedLinear {
            w_q,
            w_q_t,
            scales,
            act_mode,
            backoff,
            scale_rounding,
            rnd,
            ovf,
            emit_bf16: false,
        })
    }

    /// Rebuild a layer from already-quantized parts (e.g. loaded from disk).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w_q: Tensor,
        scales: ScaleSet,
        act_mode: ActScaleMode,
        backoff: f64,
        scale_rounding: ScaleRounding,
        rnd: RoundingMode,
        ovf: OverflowPolicy,
        emit_bf16: bool,
    ) -> Result<Self> {
        if w_q.as_codes().is_none() {
            return Err(Error::UnsupportedDtype { op: "from_parts", dtype: w_q.dtype().to_string() });
        }
        let w_q_t = w_q.transposed();
        Ok(QuantizedLinear { w_q, w_q_t, scales, act_mode, backoff, scale_rounding, rnd, ovf, emit_bf16 })
    }

    /// Emulate a 16-bit output by truncating forward results to the
    /// bfloat16 grid. Off by default to keep error attribution clean.
    pub fn set_emit_bf16(&mut self, on: bool) {
        self.emit_bf16 = on;
    }

    pub fn w_q(&self) -> &Tensor {
        &self.w_q
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn act_mode(&self) -> ActScaleMode {
        self.act_mode
    }

    pub fn out_channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn in_channels(&self) -> usize {
        self.w_q.cols()
    }

    /// Run the quantized layer on a real-valued batch.
    ///
    /// Applies the common-dimension scale, quantizes the activation, runs
    /// the mixed-precision GEMM and descales. The descale factor for output
    /// element `(i, j)` is `s_x[i] * s_w[j]`, multiplied together first and
    /// applied to the `f32` result.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_channels() {
            return Err(Error::ChannelMismatch { expected: self.in_channels(), got: x.cols() });
        }
        let smoothed =
            if self.scales.s_c.is_unit() { x.clone() } else { scale_cols(x, &self.scales.s_c, true)? };
        let static_s_x = match self.act_mode {
            ActScaleMode::PerTensorStatic => Some(self.scales.s_x.values()[0]),
            _ => None,
        };
        let (x_q, s_x) = quantize_activation(
            &smoothed,
            self.act_mode,
            static_s_x,
            self.backoff,
            &self.scale_rounding,
            self.scales.fmt,
            self.rnd,
            self.ovf,
        )?;
        let raw = matmul_mixed(&x_q, &self.w_q_t)?;

        let (rows, cols) = (raw.rows(), raw.cols());
        let vals = raw.as_f32_slice().expect("matmul_mixed returns f32");
        let mut out = Vec::with_capacity(vals.len());
        for (idx, &v) in vals.iter().enumerate() {
            let factor = (s_x.at(idx / cols) * self.scales.s_w.at(idx % cols)) as f32;
            let y = v * factor;
            out.push(if self.emit_bf16 { bf16_round(y) } else { y });
        }
        Tensor::from_f32(rows, cols, out)
    }

    /// Dequantized weights `S_c^-1 W_q S_w` in (out x in) layout.
    pub fn dequantized_weights(&self) -> Tensor {
        let vals = self.w_q.to_f64_vec();
        let cols = self.w_q.cols();
        let out: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(idx, &q)| q * self.scales.s_w.at(idx / cols) / self.scales.s_c.at(idx % cols))
            .collect();
        Tensor::from_f64(self.w_q.rows(), cols, out).expect("same shape")
    }

    /// Count scaled weight elements that exceed the format maximum.
    fn weight_clip_count(&self, w_ref: &Tensor) -> u64 {
        let r_max = self.scales.fmt.max_finite();
        let cols = w_ref.cols();
        w_ref
            .to_f64_vec()
            .iter()
            .enumerate()
            .filter(|(idx, &v)| {
                let scaled = v * self.scales.s_c.at(idx % cols) / self.scales.s_w.at(idx / cols);
                scaled.abs() > r_max
            })
            .count() as u64
    }

    /// Count scaled probe activations that exceed the format maximum.
    fn activation_clip_count(&self, x: &Tensor) -> Result<u64> {
        let r_max = self.scales.fmt.max_finite();
        let smoothed =
            if self.scales.s_c.is_unit() { x.clone() } else { scale_cols(x, &self.scales.s_c, true)? };
        let s_x = match self.act_mode {
            ActScaleMode::PerTensorStatic => self.scales.s_x.clone(),
            ActScaleMode::PerTensorDynamic => {
                let stats = measure_dynamic(&smoothed)?;
                let s = act_scale_per_tensor(stats.r_x_batch, self.backoff, r_max);
                ScaleVector::per_tensor(apply_scale_rounding(s, &self.scale_rounding)?.value)?
            }
            ActScaleMode::PerSampleDynamic => {
                let stats = measure_dynamic(&smoothed)?;
                let raw = act_scale_per_sample(&stats.r_x_per_sample, self.backoff, r_max)?;
                let mut vals = Vec::with_capacity(raw.len());
                for &s in raw.values() {
                    vals.push(apply_scale_rounding(s, &self.scale_rounding)?.value);
                }
                ScaleVector::new(vals, ScaleAxis::PerSample)?
            }
        };
        let cols = smoothed.cols();
        Ok(smoothed
            .to_f64_vec()
            .iter()
            .enumerate()
            .filter(|(idx, &v)| (v / s_x.at(idx / cols)).abs() > r_max)
            .count() as u64)
    }

    /// Measure quantization error against the reference weights on a probe
    /// batch: squared Frobenius weight error, relative output error and the
    /// number of saturated encodes.
    pub fn layer_report(&self, w_ref: &Tensor, x_probe: &Tensor) -> Result<LayerReport> {
        if w_ref.rows() != self.out_channels() || w_ref.cols() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "reference weights {}x{} vs layer {}x{}",
                w_ref.rows(),
                w_ref.cols(),
                self.out_channels(),
                self.in_channels()
            )));
        }
        let deq = self.dequantized_weights();
        let weight_err_fro = {
            let d = frobenius_distance(&deq, &w_ref.to_f64_tensor())?;
            d * d
        };

        let x64 = x_probe.to_f64_tensor();
        let y_ref = matmul_reference(&x64, &w_ref.to_f64_tensor().transposed())?;
        let y_q = self.forward(x_probe)?.to_f64_tensor();
        let num = frobenius_distance(&y_q, &y_ref)?;
        let den = frobenius_norm(&y_ref);
        let output_err_rel = if den == 0.0 {
            if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            num / den
        };

        let clip_count = self.weight_clip_count(w_ref) + self.activation_clip_count(x_probe)?;
        Ok(LayerReport {
            weight_err_fro,
            output_err_rel,
            clip_count,
            scales_used: ScaleSummary::new(&self.scales, self.act_mode),
        })
    }
}

// ---------------------------------------------------------------------------
// Persistence: raw code bytes + JSON sidecar
// ---------------------------------------------------------------------------

/// Sidecar describing a persisted quantized layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSidecar {
    pub version: u32,
    pub format: Fp8Format,
    pub rows: usize,
    pub cols: usize,
    pub act_mode: ActScaleMode,
    /// Static per-tensor activation scale; absent for dynamic modes.
    pub s_x: Option<f64>,
    pub s_w: ScaleVector,
    pub s_c: ScaleVector,
    pub backoff: f64,
    pub rounding: RoundingMode,
    pub overflow: OverflowPolicy,
    pub scale_rounding: ScaleRounding,
    pub emit_bf16: bool,
}

pub const LAYER_SIDECAR_VERSION: u32 = 1;

impl QuantizedLinear {
    /// Write `<stem>.fp8` (raw row-major code bytes) and `<stem>.scale.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let codes_path = dir.join(format!("{stem}.fp8"));
        let (codes, _) = self.w_q.as_codes().expect("w_q is always fp8");
        std::fs::write(&codes_path, codes)
            .map_err(|e| Error::io(codes_path.display().to_string(), e))?;

        let sidecar = LayerSidecar {
            version: LAYER_SIDECAR_VERSION,
            format: self.scales.fmt,
            rows: self.w_q.rows(),
            cols: self.w_q.cols(),
            act_mode: self.act_mode,
            s_x: match self.act_mode {
                ActScaleMode::PerTensorStatic => Some(self.scales.s_x.values()[0]),
                _ => None,
            },
            s_w: self.scales.s_w.clone(),
            s_c: self.scales.s_c.clone(),
            backoff: self.backoff,
            rounding: self.rnd,
            overflow: self.ovf,
            scale_rounding: self.scale_rounding.clone(),
            emit_bf16: self.emit_bf16,
        };
        let sidecar_path = dir.join(format!("{stem}.scale.json"));
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::json(sidecar_path.display().to_string(), e))?;
        std::fs::write(&sidecar_path, text)
            .map_err(|e| Error::io(sidecar_path.display().to_string(), e))
    }

    /// Load a layer persisted by [`QuantizedLinear::save`].
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let sidecar_path = dir.join(format!("{stem}.scale.json"));
        let text = std::fs::read_to_string(&sidecar_path)
            .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
        let sc: LayerSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::json(sidecar_path.display().to_string(), e))?;
        if sc.version != LAYER_SIDECAR_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported layer sidecar version {}", sc.version)));
        }
        let codes_path = dir.join(format!("{stem}.fp8"));
        let codes =
            std::fs::read(&codes_path).map_err(|e| Error::io(codes_path.display().to_string(), e))?;
        let w_q = Tensor::from_codes(sc.rows, sc.cols, codes, sc.format)?;
        let s_x = match sc.s_x {
            Some(s) => ScaleVector::per_tensor(s)?,
            None => ScaleVector::ones(1, ScaleAxis::PerTensor),
        };
        let scales = ScaleSet { s_x, s_w: sc.s_w, s_c: sc.s_c, fmt: sc.format };
        QuantizedLinear::from_parts(
            w_q,
            scales,
            sc.act_mode,
            sc.backoff,
            sc.scale_rounding,
            sc.rounding,
            sc.overflow,
            sc.emit_bf16,
        )
    }
}
