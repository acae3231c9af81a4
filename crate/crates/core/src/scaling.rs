//! Scale computation for the quantized linear layer.
//!
//! Produces the three scale vectors of a layer: the input scale `s_x`, the
//! weight scale `s_w`, and the common-dimension scale `s_c` shared between
//! activations and weights. Supported strategies:
//!
//! - unit scales (all ones)
//! - maxabs per-tensor and per-sample activation scales, with a backoff
//!   factor leaving headroom above the calibrated maximum
//! - maxabs per-tensor and per-output-channel weight scales
//! - reconstruction-error-minimizing weight scales (per-tensor and
//!   per-output-channel argmin over a candidate set)
//! - joint activation/weight smoothing over the common dimension, trading
//!   quantization difficulty between the two via an exponent `alpha`
//!
//! Scales can optionally be rounded up to powers of two or snapped to a
//! hardware-accelerated scale set.

use serde::{Deserialize, Serialize};

use crate::calib::measure_weight;
use crate::codec::{Fp8Format, OverflowPolicy, RoundingMode, round_trip};
use crate::error::{Error, Result};
use crate::tensor::{ScaleAxis, ScaleVector, Tensor};

/// Zero statistics are clamped to this before exponentiation in
/// [`smoothquant_scales`]; plain maxabs scales fall back to 1 instead.
const SMOOTHQUANT_EPS: f64 = 1.0 / (1u64 << 24) as f64;

/// How activation scales are obtained at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActScaleMode {
    /// One scale for the whole tensor, precomputed from calibration.
    PerTensorStatic,
    /// One scale for the whole tensor, measured from the live input.
    PerTensorDynamic,
    /// One scale per input row, measured from the live input.
    PerSampleDynamic,
}

/// How weight scales are computed offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScaleMode {
    /// All scale factors set to 1 regardless of statistics.
    Unit,
    MaxabsPerTensor,
    MaxabsPerOutChannel,
    OptPerTensor,
    OptPerOutChannel,
    /// Smoothing with per-tensor final weight statistics.
    SmoothquantPt,
    /// Smoothing with per-output-channel final weight statistics.
    SmoothquantPoc,
}

/// Optional constraint applied to computed scales.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRounding {
    #[default]
    None,
    /// Round each scale up to the next power of two.
    Pow2,
    /// Snap each scale to a member of the listed power-of-two set.
    HwSet(Vec<f64>),
}

/// Candidate scales searched by the opt weight-scale methods.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSearchSpace {
    candidates: Vec<f64>,
}

impl ScaleSearchSpace {
    /// Build from an explicit candidate list; must be positive, finite and
    /// strictly increasing.
    pub fn new(candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidConfig("scale search space must not be empty".into()));
        }
        for &c in &candidates {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::NonPositiveScale(c));
            }
        }
        for pair in candidates.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidConfig(
                    "scale search space must be strictly increasing".into(),
                ));
            }
        }
        Ok(ScaleSearchSpace { candidates })
    }

    /// Powers of two `2^min_exp ..= 2^max_exp`.
    pub fn pow2(min_exp: i32, max_exp: i32) -> Result<Self> {
        if min_exp > max_exp {
            return Err(Error::InvalidConfig("empty power-of-two exponent range".into()));
        }
        Self::new((min_exp..=max_exp).map(|e| (2.0f64).powi(e)).collect())
    }

    /// Default search grid: powers of two from 2^-16 to 2^16.
    pub fn pow2_default() -> Self {
        Self::pow2(-16, 16).expect("static range is valid")
    }

    pub fn candidates(&self) -> &[f64] {
        &self.candidates
    }
}

/// The Gaudi-2 hardware-accelerated scale set.
pub fn gaudi2_scale_set() -> Vec<f64> {
    vec![(2.0f64).powi(-8), (2.0f64).powi(-4), 1.0, (2.0f64).powi(4)]
}

/// The Gaudi-3 hardware-accelerated scale range: every power of two in
/// `[2^-32, 2^31]`.
pub fn gaudi3_scale_set() -> Vec<f64> {
    (-32..=31).map(|e| (2.0f64).powi(e)).collect()
}

/// Declarative form of [`ScaleSearchSpace`] for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpaceSpec {
    Pow2 { min_exp: i32, max_exp: i32 },
    HwGaudi2,
    HwGaudi3,
    Explicit { candidates: Vec<f64> },
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        SearchSpaceSpec::Pow2 { min_exp: -16, max_exp: 16 }
    }
}

impl SearchSpaceSpec {
    pub fn build(&self) -> Result<ScaleSearchSpace> {
        match self {
            SearchSpaceSpec::Pow2 { min_exp, max_exp } => ScaleSearchSpace::pow2(*min_exp, *max_exp),
            SearchSpaceSpec::HwGaudi2 => ScaleSearchSpace::new(gaudi2_scale_set()),
            SearchSpaceSpec::HwGaudi3 => ScaleSearchSpace::new(gaudi3_scale_set()),
            SearchSpaceSpec::Explicit { candidates } => ScaleSearchSpace::new(candidates.clone()),
        }
    }
}

/// Full per-layer scaling strategy, as read from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub act_mode: ActScaleMode,
    pub weight_mode: WeightScaleMode,
    /// Backoff factor in (0, 1]; the usable quantized range is `backoff * r_q`.
    #[serde(default = "default_backoff")]
    pub backoff: f64,
    /// Smoothing exponent in [0, 1]; only used by the smoothquant modes.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub scale_rounding: ScaleRounding,
    /// Candidate grid for the opt weight-scale modes.
    #[serde(default)]
    pub search_space: SearchSpaceSpec,
}

fn default_backoff() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.5
}

impl ScalingConfig {
    pub fn new(act_mode: ActScaleMode, weight_mode: WeightScaleMode) -> Self {
        ScalingConfig {
            act_mode,
            weight_mode,
            backoff: default_backoff(),
            alpha: default_alpha(),
            scale_rounding: ScaleRounding::default(),
            search_space: SearchSpaceSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.backoff > 0.0 && self.backoff <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "backoff must be in (0, 1], got {}",
                self.backoff
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if let ScaleRounding::HwSet(set) = &self.scale_rounding {
            validate_hw_set(set)?;
        }
        if matches!(self.weight_mode, WeightScaleMode::SmoothquantPt | WeightScaleMode::SmoothquantPoc)
            && self.act_mode != ActScaleMode::PerTensorStatic
        {
            return Err(Error::InvalidConfig(
                "smoothquant weight modes require act_mode = per_tensor_static".into(),
            ));
        }
        Ok(())
    }

    /// Short label used in reports and tables.
    pub fn label(&self) -> String {
        let weight = match self.weight_mode {
            WeightScaleMode::Unit => "unit",
            WeightScaleMode::MaxabsPerTensor => "maxabs_pt",
            WeightScaleMode::MaxabsPerOutChannel => "maxabs_poc",
            WeightScaleMode::OptPerTensor => "opt_pt",
            WeightScaleMode::OptPerOutChannel => "opt_poc",
            WeightScaleMode::SmoothquantPt => "smoothquant_pt",
            WeightScaleMode::SmoothquantPoc => "smoothquant_poc",
        };
        if self.weight_mode == WeightScaleMode::Unit {
            return weight.to_string();
        }
        let act = match self.act_mode {
            ActScaleMode::PerTensorStatic => "static_pt",
            ActScaleMode::PerTensorDynamic => "dynamic_pt",
            ActScaleMode::PerSampleDynamic => "dynamic_ps",
        };
        let mut label = format!("{weight}+{act}");
        match &self.scale_rounding {
            ScaleRounding::None => {}
            ScaleRounding::Pow2 => label.push_str("+pow2"),
            ScaleRounding::HwSet(_) => label.push_str("+hw"),
        }
        label
    }
}

fn validate_hw_set(set: &[f64]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidConfig("hw scale set must not be empty".into()));
    }
    for &v in set {
        if !is_power_of_two(v) {
            return Err(Error::InvalidConfig(format!("hw scale set entry {v} is not a power of two")));
        }
    }
    for pair in set.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::InvalidConfig("hw scale set must be strictly increasing".into()));
        }
    }
    Ok(())
}

fn is_power_of_two(v: f64) -> bool {
    v.is_finite() && v > 0.0 && floor_pow2_exp(v).1 == v
}

/// Largest power-of-two exponent `e` with `2^e <= v`, and `2^e` itself.
/// Exact over the full finite positive range, including subnormals.
fn floor_pow2_exp(v: f64) -> (i32, f64) {
    debug_assert!(v.is_finite() && v > 0.0);
    let bits = v.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    if raw_exp == 0 {
        // Subnormal: locate the mantissa's leading bit.
        let mant = bits & 0x000f_ffff_ffff_ffff;
        let p = 63 - mant.leading_zeros() as i32;
        (p - 1074, f64::from_bits(1u64 << p))
    } else {
        (raw_exp - 1023, f64::from_bits((raw_exp as u64) << 52))
    }
}

/// Exact `2^e` by bit construction; saturates to 0 / infinity outside the
/// representable exponent range.
fn exact_pow2(e: i32) -> f64 {
    if e < -1074 {
        0.0
    } else if e < -1022 {
        f64::from_bits(1u64 << (e + 1074))
    } else if e <= 1023 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::INFINITY
    }
}

/// The complete scale assignment for one linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub s_x: ScaleVector,
    pub s_w: ScaleVector,
    pub s_c: ScaleVector,
    pub fmt: Fp8Format,
}

impl ScaleSet {
    /// All-ones scales for a layer with `in_channels` inputs.
    pub fn unit(in_channels: usize, fmt: Fp8Format) -> Self {
        ScaleSet {
            s_x: ScaleVector::ones(1, ScaleAxis::PerTensor),
            s_w: ScaleVector::ones(1, ScaleAxis::PerTensor),
            s_c: ScaleVector::ones(in_channels, ScaleAxis::PerInChannel),
            fmt,
        }
    }

    pub fn is_unit(&self) -> bool {
        self.s_x.is_unit() && self.s_w.is_unit() && self.s_c.is_unit()
    }
}

/// All-ones scale set; quantization then uses the raw tensor values.
pub fn unit_scales(in_channels: usize, fmt: Fp8Format) -> ScaleSet {
    ScaleSet::unit(in_channels, fmt)
}

// ---------------------------------------------------------------------------
// Individual scale formulas
// ---------------------------------------------------------------------------

/// Per-tensor activation scale `r_x / (backoff * r_q)`; 1 when `r_x` is 0.
pub fn act_scale_per_tensor(r_x: f64, backoff: f64, r_q: f64) -> f64 {
    if r_x == 0.0 {
        return 1.0;
    }
    r_x / (backoff * r_q)
}

/// Per-sample activation scales; zero rows fall back to scale 1.
pub fn act_scale_per_sample(r_x_per_sample: &[f64], backoff: f64, r_q: f64) -> Result<ScaleVector> {
    let values = r_x_per_sample
        .iter()
        .map(|&r| act_scale_per_tensor(r, backoff, r_q))
        .collect();
    ScaleVector::new(values, ScaleAxis::PerSample)
}

/// Per-tensor weight scale `r_w / r_q`; 1 when `r_w` is 0.
pub fn weight_scale_maxabs_pt(r_w: f64, r_q: f64) -> f64 {
    if r_w == 0.0 {
        return 1.0;
    }
    r_w / r_q
}

/// Per-output-channel weight scales; zero channels fall back to scale 1.
pub fn weight_scale_maxabs_poc(r_w_per_out_channel: &[f64], r_q: f64) -> Result<ScaleVector> {
    let values = r_w_per_out_channel
        .iter()
        .map(|&r| weight_scale_maxabs_pt(r, r_q))
        .collect();
    ScaleVector::new(values, ScaleAxis::PerOutChannel)
}

/// Squared reconstruction error of `values` quantized at scale `s`.
fn reconstruction_error_sq(
    values: &[f64],
    base_index: u64,
    s: f64,
    fmt: Fp8Format,
    rnd: RoundingMode,
) -> f64 {
    let ovf = OverflowPolicy::Saturate;
    values
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let q = s * round_trip(w / s, fmt, rnd, ovf, base_index + i as u64);
            let d = w - q;
            d * d
        })
        .sum()
}

/// Per-tensor weight scale minimizing the squared Frobenius reconstruction
/// error over the candidate set. Ties break toward the smaller scale.
pub fn weight_scale_opt_pt(
    w: &Tensor,
    space: &ScaleSearchSpace,
    fmt: Fp8Format,
    rnd: RoundingMode,
) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::EmptyTensor("weight tensor".into()));
    }
    let vals = w.to_f64_vec();
    Ok(argmin_scale(&vals, 0, space, fmt, rnd))
}

/// Per-output-channel variant of [`weight_scale_opt_pt`]: an independent
/// argmin over each row of the (out x in) weight matrix.
pub fn weight_scale_opt_poc(
    w: &Tensor,
    space: &ScaleSearchSpace,
    fmt: Fp8Format,
    rnd: RoundingMode,
) -> Result<ScaleVector> {
    if w.is_empty() {
        return Err(Error::EmptyTensor("weight tensor".into()));
    }
    let vals = w.to_f64_vec();
    let cols = w.cols();
    let values: Vec<f64> = (0..w.rows())
        .map(|k| {
            let row = &vals[k * cols..(k + 1) * cols];
            argmin_scale(row, (k * cols) as u64, space, fmt, rnd)
        })
        .collect();
    ScaleVector::new(values, ScaleAxis::PerOutChannel)
}

fn argmin_scale(
    values: &[f64],
    base_index: u64,
    space: &ScaleSearchSpace,
    fmt: Fp8Format,
    rnd: RoundingMode,
) -> f64 {
    let mut best = space.candidates()[0];
    let mut best_err = f64::INFINITY;
    for &s in space.candidates() {
        let err = reconstruction_error_sq(values, base_index, s, fmt, rnd);
        if err < best_err {
            best_err = err;
            best = s;
        }
    }
    best
}

/// Which final weight statistic the smoothing method recomputes after the
/// common-dimension rescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothWeightStatMode {
    PerOutChannel,
    PerTensor,
}

/// Joint common-dimension smoothing of activations and weights.
///
/// Builds `s_c[c] = r_x_pc[c]^alpha / r_w_pic[c]^(1-alpha)` (statistics
/// clamped away from zero first), derives the per-tensor activation scale
/// from the smoothed activation maxima, rescales the weights by `s_c` along
/// the input dimension and finally recomputes the weight scales from the
/// rescaled weights, per-output-channel or per-tensor.
pub fn smoothquant_scales(
    r_x_per_channel: &[f64],
    r_w_per_in_channel: &[f64],
    alpha: f64,
    backoff: f64,
    w: &Tensor,
    fmt: Fp8Format,
    weight_stat_mode: SmoothWeightStatMode,
) -> Result<ScaleSet> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let c_l = w.cols();
    if r_x_per_channel.len() != c_l {
        return Err(Error::ChannelMismatch { expected: c_l, got: r_x_per_channel.len() });
    }
    if r_w_per_in_channel.len() != c_l {
        return Err(Error::ChannelMismatch { expected: c_l, got: r_w_per_in_channel.len() });
    }
    let r_q = fmt.max_finite();

    let s_c_values: Vec<f64> = r_x_per_channel
        .iter()
        .zip(r_w_per_in_channel)
        .map(|(&rx, &rw)| {
            let rx = rx.max(SMOOTHQUANT_EPS);
            let rw = rw.max(SMOOTHQUANT_EPS);
            rx.powf(alpha) / rw.powf(1.0 - alpha)
        })
        .collect();
    let s_c = ScaleVector::new(s_c_values.clone(), ScaleAxis::PerInChannel)?;

    // Activation scale from the smoothed per-channel maxima.
    let smoothed_max = r_x_per_channel
        .iter()
        .zip(&s_c_values)
        .map(|(&rx, &sc)| rx / sc)
        .fold(0.0f64, f64::max);
    let s_x = ScaleVector::per_tensor(act_scale_per_tensor(smoothed_max, backoff, r_q))?;

    // Rescale the weights along the input dimension and re-measure.
    let rescaled = crate::tensor::scale_cols(w, &s_c, false)?;
    let stats = measure_weight(&rescaled)?;
    let s_w = match weight_stat_mode {
        SmoothWeightStatMode::PerOutChannel => weight_scale_maxabs_poc(&stats.per_out_channel, r_q)?,
        SmoothWeightStatMode::PerTensor => ScaleVector::per_tensor(weight_scale_maxabs_pt(stats.r_w, r_q))?,
    };

    Ok(ScaleSet { s_x, s_w, s_c, fmt })
}

/// Smallest power of two >= `s` (`2^ceil(log2 s)`), exact for any positive
/// finite input.
pub fn round_scale_pow2(s: f64) -> Result<f64> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::NonPositiveScale(s));
    }
    let (e, below) = floor_pow2_exp(s);
    if below == s {
        Ok(s)
    } else {
        Ok(exact_pow2(e + 1))
    }
}

/// Result of snapping a scale to a hardware set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnappedScale {
    pub value: f64,
    /// True when the scale exceeded the whole set and was clamped down to
    /// its largest member, which can cause clipping at quantization time.
    pub clipped: bool,
}

/// Snap to the smallest member of `allowed` that is >= `s`; if the set is
/// exhausted, clamp to its largest member and flag it.
pub fn snap_to_hw_set(s: f64, allowed: &[f64]) -> Result<SnappedScale> {
    validate_hw_set(allowed)?;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::NonPositiveScale(s));
    }
    for &a in allowed {
        if a >= s {
            return Ok(SnappedScale { value: a, clipped: false });
        }
    }
    Ok(SnappedScale { value: *allowed.last().expect("validated nonempty"), clipped: true })
}

/// Apply a [`ScaleRounding`] to a single scale value.
///
/// Returns the constrained scale and whether a hw-set clamp occurred.
pub fn apply_scale_rounding(s: f64, rounding: &ScaleRounding) -> Result<SnappedScale> {
    match rounding {
        ScaleRounding::None => Ok(SnappedScale { value: s, clipped: false }),
        ScaleRounding::Pow2 => Ok(SnappedScale { value: round_scale_pow2(s)?, clipped: false }),
        ScaleRounding::HwSet(set) => snap_to_hw_set(s, set),
    }
}

fn round_scale_vector(v: &ScaleVector, rounding: &ScaleRounding) -> Result<(ScaleVector, usize)> {
    let mut clipped = 0;
    let mut out = Vec::with_capacity(v.len());
    for &s in v.values() {
        let snapped = apply_scale_rounding(s, rounding)?;
        if snapped.clipped {
            clipped += 1;
        }
        out.push(snapped.value);
    }
    Ok((ScaleVector::new(out, v.axis())?, clipped))
}

/// A computed scale set plus bookkeeping from scale rounding.
#[derive(Debug, Clone)]
pub struct ComputedScales {
    pub scales: ScaleSet,
    /// Number of scale entries clamped down by a hardware-set snap.
    pub hw_clipped: usize,
}

/// Compute the full scale set for one layer under a [`ScalingConfig`].
///
/// Activation statistics come from `r_x` / `r_x_per_channel`; weight scales
/// are always derived from the weight tensor itself. Dynamic activation
/// modes leave `s_x` at 1 in the returned set; the runtime layer computes
/// the live value. Scale rounding is applied to `s_x` and `s_w` (the GEMM
/// scales); `s_c` is folded elementwise into tensors and stays unrounded.
pub fn compute_scale_set(
    cfg: &ScalingConfig,
    r_x: f64,
    r_x_per_channel: &[f64],
    w: &Tensor,
    fmt: Fp8Format,
) -> Result<ComputedScales> {
    cfg.validate()?;
    let r_q = fmt.max_finite();
    let c_l = w.cols();

    if cfg.weight_mode == WeightScaleMode::Unit {
        return Ok(ComputedScales { scales: ScaleSet::unit(c_l, fmt), hw_clipped: 0 });
    }

    let rnd = RoundingMode::NearestEven;
    let mut set = match cfg.weight_mode {
        WeightScaleMode::Unit => unreachable!(),
        WeightScaleMode::MaxabsPerTensor => {
            let stats = measure_weight(w)?;
            ScaleSet {
                s_x: ScaleVector::ones(1, ScaleAxis::PerTensor),
                s_w: ScaleVector::per_tensor(weight_scale_maxabs_pt(stats.r_w, r_q))?,
                s_c: ScaleVector::ones(c_l, ScaleAxis::PerInChannel),
                fmt,
            }
        }
        WeightScaleMode::MaxabsPerOutChannel => {
            let stats = measure_weight(w)?;
            ScaleSet {
                s_x: ScaleVector::ones(1, ScaleAxis::PerTensor),
                s_w: weight_scale_maxabs_poc(&stats.per_out_channel, r_q)?,
                s_c: ScaleVector::ones(c_l, ScaleAxis::PerInChannel),
                fmt,
            }
        }
        WeightScaleMode::OptPerTensor => {
            let space = cfg.search_space.build()?;
            ScaleSet {
                s_x: ScaleVector::ones(1, ScaleAxis::PerTensor),
                s_w: ScaleVector::per_tensor(weight_scale_opt_pt(w, &space, fmt, rnd)?)?,
                s_c: ScaleVector::ones(c_l, ScaleAxis::PerInChannel),
                fmt,
            }
        }
        WeightScaleMode::OptPerOutChannel => {
            let space = cfg.search_space.build()?;
            ScaleSet {
                s_x: ScaleVector::ones(1, ScaleAxis::PerTensor),
                s_w: weight_scale_opt_poc(w, &space, fmt, rnd)?,
                s_c: ScaleVector::ones(c_l, ScaleAxis::PerInChannel),
                fmt,
            }
        }
        WeightScaleMode::SmoothquantPt | WeightScaleMode::SmoothquantPoc => {
            if r_x_per_channel.len() != c_l {
                return Err(Error::MissingStats(format!(
                    "smoothquant needs per-channel activation statistics for {c_l} channels, have {}",
                    r_x_per_channel.len()
                )));
            }
            let weight_stats = measure_weight(w)?;
            let mode = if cfg.weight_mode == WeightScaleMode::SmoothquantPt {
                SmoothWeightStatMode::PerTensor
            } else {
                SmoothWeightStatMode::PerOutChannel
            };
            smoothquant_scales(
                r_x_per_channel,
                &weight_stats.per_in_channel,
                cfg.alpha,
                cfg.backoff,
                w,
                fmt,
                mode,
            )?
        }
    };

    // Static per-tensor activation scale. Smoothquant already set it from the
    // smoothed statistics; the plain modes use the raw per-tensor maximum.
    if cfg.act_mode == ActScaleMode::PerTensorStatic
        && !matches!(cfg.weight_mode, WeightScaleMode::SmoothquantPt | WeightScaleMode::SmoothquantPoc)
    {
        set.s_x = ScaleVector::per_tensor(act_scale_per_tensor(r_x, cfg.backoff, r_q))?;
    }

    let mut hw_clipped = 0;
    if cfg.scale_rounding != ScaleRounding::None {
        let (s_w, c1) = round_scale_vector(&set.s_w, &cfg.scale_rounding)?;
        set.s_w = s_w;
        hw_clipped += c1;
        if cfg.act_mode == ActScaleMode::PerTensorStatic {
            let (s_x, c2) = round_scale_vector(&set.s_x, &cfg.scale_rounding)?;
            set.s_x = s_x;
            hw_clipped += c2;
        }
    }

    Ok(ComputedScales { scales: set, hw_clipped })
}
