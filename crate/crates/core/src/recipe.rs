//! The end-to-end quantization recipe.
//!
//! Calibrate once, then try candidate scaling configurations in the given
//! order (simplest and fastest first), measure the accuracy degradation of
//! each end-to-end quantized model against the high-precision baseline, and
//! pick the first candidate inside the degradation budget. If nothing
//! qualifies, the best-scoring candidate is reported with a failure flag.
//!
//! Candidate ordering stands in for a throughput ranking: emulation timing
//! says nothing about accelerator timing, so the caller lists candidates
//! from cheapest to most expensive and the recipe honors that priority.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calib::{measure_weight, CalibStats};
use crate::codec::{Fp8Format, OverflowPolicy, RoundingMode};
use crate::error::{Error, Result};
use crate::model::{forward_quantized, Dataset, Model, QuantLayer};
use crate::qlinear::{LayerReport, QuantizedLinear};
use crate::scaling::{compute_scale_set, ScalingConfig};
use crate::tensor::{matmul_reference, Tensor};

/// How candidate quality is measured at desk scale.
///
/// `RelOutputError` reports the relative Frobenius distance between the
/// quantized and baseline model outputs; its degradation is `-100 * error`
/// (accuracy-like, negative is worse). `ProxyLoss` treats the final layer
/// output as logits, takes the baseline argmax per sample as the label and
/// compares mean cross-entropy (loss-like, positive delta is worse).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    #[default]
    RelOutputError,
    ProxyLoss,
}

/// Rounding mode requested by a config file; the seed is injected at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingSpec {
    #[default]
    NearestEven,
    Stochastic,
}

impl RoundingSpec {
    pub fn to_mode(self, seed: u64) -> RoundingMode {
        match self {
            RoundingSpec::NearestEven => RoundingMode::NearestEven,
            RoundingSpec::Stochastic => RoundingMode::Stochastic { seed },
        }
    }
}

/// Recipe driver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeConfig {
    /// Candidate scaling configs, cheapest first.
    pub candidates: Vec<ScalingConfig>,
    /// Acceptable degradation in percent, zero or negative (e.g. -1.0).
    pub degradation_threshold: f64,
    #[serde(default)]
    pub skip_first_last: bool,
    #[serde(default)]
    pub metric: EvalMetric,
    #[serde(default)]
    pub rounding: RoundingSpec,
    #[serde(default)]
    pub overflow: OverflowPolicy,
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::InvalidConfig("candidate list must not be empty".into()));
        }
        if self.degradation_threshold > 0.0 {
            return Err(Error::InvalidConfig(format!(
                "degradation threshold must be zero or negative, got {}",
                self.degradation_threshold
            )));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        Ok(())
    }
}

/// Outcome of evaluating one candidate end to end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub label: String,
    pub metric: f64,
    pub degradation_pct: f64,
    pub passed: bool,
}

/// Per-layer outcome under the selected candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub name: String,
    /// Label of the applied config; `None` for layers kept in high precision.
    pub config: Option<String>,
    pub report: LayerReport,
}

/// Result of [`run_recipe`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeResult {
    pub metric: EvalMetric,
    pub baseline_metric: f64,
    pub degradation_threshold: f64,
    pub candidates: Vec<CandidateOutcome>,
    /// Index into `candidates` of the selected config.
    pub selected: usize,
    /// True when the selected candidate meets the threshold.
    pub passed: bool,
    pub final_metric: f64,
    pub layers: Vec<LayerOutcome>,
}

impl RecipeResult {
    pub fn selected_label(&self) -> &str {
        &self.candidates[self.selected].label
    }

    /// Aligned-text table, one line per candidate.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let metric_name = match self.metric {
            EvalMetric::RelOutputError => "rel_output_error",
            EvalMetric::ProxyLoss => "proxy_loss",
        };
        out.push_str(&format!(
            "{:<28} {:>14} {:>9} {:>6}\n",
            "config", metric_name, "delta(%)", "pass"
        ));
        out.push_str(&format!("{:<28} {:>14.6} {:>9} {:>6}\n", "baseline", self.baseline_metric, "--", "--"));
        for (i, c) in self.candidates.iter().enumerate() {
            let marker = if i == self.selected { "*" } else { " " };
            out.push_str(&format!(
                "{marker}{:<27} {:>14.6} {:>+9.2} {:>6}\n",
                c.label,
                c.metric,
                c.degradation_pct,
                if c.passed { "yes" } else { "no" }
            ));
        }
        out.push_str(
            "note: candidate order is a static throughput priority (cheapest first), not a measurement\n",
        );
        out
    }
}

/// Relative delta in percent: `(quant - base) / |base| * 100`.
///
/// The sign follows the metric's own direction: loss-like metrics degrade
/// upward (positive delta is worse), accuracy-like metrics degrade downward
/// (negative delta is worse).
pub fn evaluate_degradation(baseline: f64, quantized: f64) -> f64 {
    if baseline == 0.0 {
        return if quantized == 0.0 {
            0.0
        } else if quantized > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
    }
    (quantized - baseline) / baseline.abs() * 100.0
}

/// Propagate the calibration set through the real-precision model, recording
/// activation statistics at every layer input plus the static weight maxima.
pub fn run_calibration(model: &Model, dataset: &Dataset) -> Result<BTreeMap<String, CalibStats>> {
    if dataset.is_empty() {
        return Err(Error::EmptyTensor("calibration dataset".into()));
    }
    let mut stats: Vec<CalibStats> = model
        .weights
        .iter()
        .map(|w| {
            let mut s = CalibStats::new();
            s.set_weight_stats(&measure_weight(w)?);
            Ok(s)
        })
        .collect::<Result<_>>()?;

    for batch in &dataset.batches {
        if batch.cols() != model.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: model.in_channels(),
                got: batch.cols(),
            });
        }
        let mut x = batch.to_f64_tensor();
        for (i, w) in model.weights.iter().enumerate() {
            stats[i].observe_activation(&x)?;
            x = matmul_reference(&x, &w.transposed())?;
        }
    }

    Ok(model
        .manifest
        .layers
        .iter()
        .map(|l| l.name.clone())
        .zip(stats)
        .collect())
}

/// Quantize every eligible layer of a model under one scaling config.
pub fn quantize_model(
    model: &Model,
    stats: &BTreeMap<String, CalibStats>,
    cfg: &ScalingConfig,
    fmt: Fp8Format,
    skip_first_last: bool,
    rnd: RoundingMode,
    ovf: OverflowPolicy,
) -> Result<Vec<QuantLayer>> {
    let mut layers = Vec::with_capacity(model.weights.len());
    for (spec, w) in model.manifest.layers.iter().zip(&model.weights) {
        let skip = skip_first_last && (spec.is_first || spec.is_last);
        if skip {
            layers.push(QuantLayer::Real { name: spec.name.clone(), weights: w.clone() });
            continue;
        }
        let layer_stats = stats
            .get(&spec.name)
            .ok_or_else(|| Error::MissingStats(spec.name.clone()))?;
        let computed =
            compute_scale_set(cfg, layer_stats.r_x, &layer_stats.r_x_per_channel, w, fmt)?;
        // Unit scaling keeps every factor at 1, including the runtime
        // activation scale.
        let act_mode = if cfg.weight_mode == crate::scaling::WeightScaleMode::Unit {
            crate::scaling::ActScaleMode::PerTensorStatic
        } else {
            cfg.act_mode
        };
        let layer = QuantizedLinear::new(
            w,
            computed.scales,
            act_mode,
            cfg.backoff,
            cfg.scale_rounding.clone(),
            rnd,
            ovf,
        )?;
        layers.push(QuantLayer::Fp8 { name: spec.name.clone(), layer });
    }
    Ok(layers)
}

struct BaselineEval {
    /// Final-layer outputs per batch, real precision.
    outputs: Vec<Tensor>,
    /// Argmax labels per batch (for the proxy-loss metric).
    labels: Vec<Vec<usize>>,
    /// Layer inputs of the first batch, for per-layer probe reports.
    first_batch_inputs: Vec<Tensor>,
}

fn baseline_forward(model: &Model, dataset: &Dataset) -> Result<BaselineEval> {
    let mut outputs = Vec::with_capacity(dataset.batches.len());
    let mut labels = Vec::with_capacity(dataset.batches.len());
    let mut first_batch_inputs = Vec::new();
    for (bi, batch) in dataset.batches.iter().enumerate() {
        if batch.cols() != model.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: model.in_channels(),
                got: batch.cols(),
            });
        }
        let mut x = batch.to_f64_tensor();
        for w in &model.weights {
            if bi == 0 {
                first_batch_inputs.push(x.clone());
            }
            x = matmul_reference(&x, &w.transposed())?;
        }
        labels.push(argmax_rows(&x));
        outputs.push(x);
    }
    Ok(BaselineEval { outputs, labels, first_batch_inputs })
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let vals = t.to_f64_vec();
    let cols = t.cols();
    (0..t.rows())
        .map(|r| {
            let row = &vals[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of rows of `t` (as logits) against `labels`.
fn proxy_loss(t: &Tensor, labels: &[usize]) -> f64 {
    let vals = t.to_f64_vec();
    let cols = t.cols();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &vals[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_z - row[label];
    }
    total / labels.len().max(1) as f64
}

struct MetricValue {
    metric: f64,
    degradation_pct: f64,
    passed: bool,
}

fn evaluate_candidate(
    layers: &[QuantLayer],
    dataset: &Dataset,
    baseline: &BaselineEval,
    metric: EvalMetric,
    threshold: f64,
    baseline_metric: f64,
) -> Result<MetricValue> {
    match metric {
        EvalMetric::RelOutputError => {
            let mut num_sq = 0.0;
            let mut den_sq = 0.0;
            for (batch, base) in dataset.batches.iter().zip(&baseline.outputs) {
                let y = forward_quantized(layers, batch)?;
                let yv = y.to_f64_vec();
                let bv = base.to_f64_vec();
                for (a, b) in yv.iter().zip(&bv) {
                    let d = a - b;
                    num_sq += d * d;
                    den_sq += b * b;
                }
            }
            let err = if den_sq == 0.0 {
                if num_sq == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (num_sq / den_sq).sqrt()
            };
            // Accuracy-like: a 2% relative output error reads as -2%.
            let degradation_pct = -100.0 * err;
            Ok(MetricValue { metric: err, degradation_pct, passed: degradation_pct >= threshold })
        }
        EvalMetric::ProxyLoss => {
            let mut total = 0.0;
            let mut count = 0usize;
            for ((batch, labels), _) in
                dataset.batches.iter().zip(&baseline.labels).zip(&baseline.outputs)
            {
                let y = forward_quantized(layers, batch)?;
                total += proxy_loss(&y, labels) * labels.len() as f64;
                count += labels.len();
            }
            let loss = total / count.max(1) as f64;
            let degradation_pct = evaluate_degradation(baseline_metric, loss);
            // Loss-like: a +1% delta exhausts a -1% budget.
            Ok(MetricValue { metric: loss, degradation_pct, passed: degradation_pct <= -threshold })
        }
    }
}

/// Run the full recipe: baseline, candidates in order, selection.
///
/// Returns the first candidate meeting the degradation threshold, or the
/// best-scoring one flagged as failed. Also returns per-layer reports for
/// the selected candidate, probed with the first evaluation batch.
/// Candidates after the winner are not evaluated.
pub fn run_recipe(
    model: &Model,
    recipe: &RecipeConfig,
    stats: &BTreeMap<String, CalibStats>,
    eval_dataset: &Dataset,
    fmt: Fp8Format,
    seed: u64,
) -> Result<RecipeResult> {
    run_candidates(model, recipe, stats, eval_dataset, fmt, seed, true)
}

/// Like [`run_recipe`] but evaluates every candidate, for side-by-side
/// comparison tables. Selection follows the same rule.
pub fn run_comparison(
    model: &Model,
    recipe: &RecipeConfig,
    stats: &BTreeMap<String, CalibStats>,
    eval_dataset: &Dataset,
    fmt: Fp8Format,
    seed: u64,
) -> Result<RecipeResult> {
    run_candidates(model, recipe, stats, eval_dataset, fmt, seed, false)
}

#[allow(clippy::too_many_arguments)]
fn run_candidates(
    model: &Model,
    recipe: &RecipeConfig,
    stats: &BTreeMap<String, CalibStats>,
    eval_dataset: &Dataset,
    fmt: Fp8Format,
    seed: u64,
    stop_at_first_pass: bool,
) -> Result<RecipeResult> {
    recipe.validate()?;
    if eval_dataset.is_empty() {
        return Err(Error::EmptyTensor("evaluation dataset".into()));
    }
    let rnd = recipe.rounding.to_mode(seed);
    let baseline = baseline_forward(model, eval_dataset)?;
    let baseline_metric = match recipe.metric {
        EvalMetric::RelOutputError => 0.0,
        EvalMetric::ProxyLoss => {
            let mut total = 0.0;
            let mut count = 0usize;
            for (out, labels) in baseline.outputs.iter().zip(&baseline.labels) {
                total += proxy_loss(out, labels) * labels.len() as f64;
                count += labels.len();
            }
            total / count.max(1) as f64
        }
    };

    let mut outcomes = Vec::with_capacity(recipe.candidates.len());
    let mut built: Vec<Vec<QuantLayer>> = Vec::with_capacity(recipe.candidates.len());
    let mut selected = None;
    for cfg in &recipe.candidates {
        let layers = quantize_model(
            model,
            stats,
            cfg,
            fmt,
            recipe.skip_first_last,
            rnd,
            recipe.overflow,
        )?;
        let value = evaluate_candidate(
            &layers,
            eval_dataset,
            &baseline,
            recipe.metric,
            recipe.degradation_threshold,
            baseline_metric,
        )?;
        outcomes.push(CandidateOutcome {
            label: cfg.label(),
            metric: value.metric,
            degradation_pct: value.degradation_pct,
            passed: value.passed,
        });
        built.push(layers);
        if value.passed && selected.is_none() {
            selected = Some(outcomes.len() - 1);
            if stop_at_first_pass {
                break;
            }
        }
    }

    // Nothing qualified: fall back to the least-bad candidate.
    let (selected, passed) = match selected {
        Some(i) => (i, true),
        None => {
            let best = outcomes
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    severity(a.degradation_pct)
                        .partial_cmp(&severity(b.degradation_pct))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(i, _)| i)
                .expect("candidates validated nonempty");
            (best, false)
        }
    };

    let layers = &built[selected];
    let mut layer_outcomes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let probe = &baseline.first_batch_inputs[i];
        match layer {
            QuantLayer::Fp8 { name, layer } => {
                let report = layer.layer_report(&model.weights[i], probe)?;
                layer_outcomes.push(LayerOutcome {
                    name: name.clone(),
                    config: Some(recipe.candidates[selected].label()),
                    report,
                });
            }
            QuantLayer::Real { name, .. } => layer_outcomes.push(LayerOutcome {
                name: name.clone(),
                config: None,
                report: LayerReport::passthrough(),
            }),
        }
    }

    Ok(RecipeResult {
        metric: recipe.metric,
        baseline_metric,
        degradation_threshold: recipe.degradation_threshold,
        final_metric: outcomes[selected].metric,
        candidates: outcomes,
        selected,
        passed,
        layers: layer_outcomes,
    })
}

/// Distance from "no degradation", direction-agnostic.
fn severity(degradation_pct: f64) -> f64 {
    degradation_pct.abs()
}

/// Build the quantized layers for the candidate a recipe result selected.
pub fn build_selected(
    model: &Model,
    recipe: &RecipeConfig,
    stats: &BTreeMap<String, CalibStats>,
    result: &RecipeResult,
    fmt: Fp8Format,
    seed: u64,
) -> Result<Vec<QuantLayer>> {
    quantize_model(
        model,
        stats,
        &recipe.candidates[result.selected],
        fmt,
        recipe.skip_first_last,
        recipe.rounding.to_mode(seed),
        recipe.overflow,
    )
}
