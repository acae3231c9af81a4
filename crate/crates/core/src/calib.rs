//! Maximum-absolute-value calibration statistics.
//!
//! Static scaling needs per-tensor and per-channel activation maxima
//! measured over a calibration set, plus weight maxima which are known
//! offline. Accumulators stream over batches and can be merged, so
//! calibration may be split across workers and recombined without changing
//! the result.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Streaming per-layer calibration record.
///
/// `r_x` is the running per-tensor activation maxabs, `r_x_per_channel` its
/// per-input-channel refinement. The weight fields hold the per-tensor,
/// per-output-channel and per-input-channel weight maxima.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibStats {
    pub r_x: f64,
    pub r_x_per_channel: Vec<f64>,
    pub r_w: f64,
    pub r_w_per_out_channel: Vec<f64>,
    pub r_w_per_in_channel: Vec<f64>,
    pub batches_seen: u64,
}

/// Weight maxima measured by [`measure_weight`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    pub r_w: f64,
    pub per_out_channel: Vec<f64>,
    pub per_in_channel: Vec<f64>,
}

/// Per-batch activation maxima for dynamic scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicStats {
    pub r_x_batch: f64,
    pub r_x_per_sample: Vec<f64>,
}

impl CalibStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one activation batch (samples x channels) into the running maxima.
    pub fn observe_activation(&mut self, x: &Tensor) -> Result<()> {
        if x.is_empty() {
            return Err(Error::EmptyTensor("activation batch".into()));
        }
        let cols = x.cols();
        if self.r_x_per_channel.is_empty() {
            self.r_x_per_channel = vec![0.0; cols];
        } else if self.r_x_per_channel.len() != cols {
            return Err(Error::ChannelMismatch { expected: self.r_x_per_channel.len(), got: cols });
        }
        let vals = x.to_f64_vec();
        for (idx, &v) in vals.iter().enumerate() {
            let c = idx % cols;
            let a = v.abs();
            if a > self.r_x_per_channel[c] {
                self.r_x_per_channel[c] = a;
            }
            if a > self.r_x {
                self.r_x = a;
            }
        }
        self.batches_seen += 1;
        Ok(())
    }

    /// Record weight maxima (weights are static, one measurement suffices).
    pub fn set_weight_stats(&mut self, ws: &WeightStats) {
        self.r_w = ws.r_w;
        self.r_w_per_out_channel = ws.per_out_channel.clone();
        self.r_w_per_in_channel = ws.per_in_channel.clone();
    }

    /// Combine two accumulators: elementwise max, batch counts summed.
    ///
    /// Merging stats from a split stream gives exactly the stats of the
    /// whole stream. Empty fields act as identity elements.
    pub fn merge(&self, other: &CalibStats) -> Result<CalibStats> {
        let r_x_per_channel = merge_max_vec(&self.r_x_per_channel, &other.r_x_per_channel)?;
        let r_w_per_out_channel =
            merge_max_vec(&self.r_w_per_out_channel, &other.r_w_per_out_channel)?;
        let r_w_per_in_channel =
            merge_max_vec(&self.r_w_per_in_channel, &other.r_w_per_in_channel)?;
        Ok(CalibStats {
            r_x: self.r_x.max(other.r_x),
            r_x_per_channel,
            r_w: self.r_w.max(other.r_w),
            r_w_per_out_channel,
            r_w_per_in_channel,
            batches_seen: self.batches_seen + other.batches_seen,
        })
    }
}

fn merge_max_vec(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => Ok(b.to_vec()),
        (_, true) => Ok(a.to_vec()),
        _ => {
            if a.len() != b.len() {
                return Err(Error::ChannelMismatch { expected: a.len(), got: b.len() });
            }
            Ok(a.iter().zip(b).map(|(&x, &y)| x.max(y)).collect())
        }
    }
}

/// Measure the three weight maxabs reductions of a (out x in) weight matrix.
pub fn measure_weight(w: &Tensor) -> Result<WeightStats> {
    if w.is_empty() {
        return Err(Error::EmptyTensor("weight tensor".into()));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let vals = w.to_f64_vec();
    let mut per_out = vec![0.0f64; rows];
    let mut per_in = vec![0.0f64; cols];
    for (idx, &v) in vals.iter().enumerate() {
        let a = v.abs();
        let (r, c) = (idx / cols, idx % cols);
        if a > per_out[r] {
            per_out[r] = a;
        }
        if a > per_in[c] {
            per_in[c] = a;
        }
    }
    let r_w = per_out.iter().copied().fold(0.0f64, f64::max);
    Ok(WeightStats { r_w, per_out_channel: per_out, per_in_channel: per_in })
}

/// Measure per-batch and per-sample activation maxima from a live input.
pub fn measure_dynamic(x: &Tensor) -> Result<DynamicStats> {
    if x.is_empty() {
        return Err(Error::EmptyTensor("activation batch".into()));
    }
    let cols = x.cols();
    let vals = x.to_f64_vec();
    let mut per_sample = vec![0.0f64; x.rows()];
    for (idx, &v) in vals.iter().enumerate() {
        let a = v.abs();
        let r = idx / cols;
        if a > per_sample[r] {
            per_sample[r] = a;
        }
    }
    let r_x_batch = per_sample.iter().copied().fold(0.0f64, f64::max);
    Ok(DynamicStats { r_x_batch, r_x_per_sample: per_sample })
}

// ---------------------------------------------------------------------------
// Stats file
// ---------------------------------------------------------------------------

/// One layer's entry in the stats file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerStatsRecord {
    pub r_x: f64,
    pub r_x_pc: Vec<f64>,
    pub r_w: f64,
    pub r_w_poc: Vec<f64>,
    pub r_w_pic: Vec<f64>,
}

/// On-disk calibration statistics, keyed by layer name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatsFile {
    pub version: u32,
    pub layers: BTreeMap<String, LayerStatsRecord>,
}

pub const STATS_FILE_VERSION: u32 = 1;

impl From<&CalibStats> for LayerStatsRecord {
    fn from(s: &CalibStats) -> Self {
        LayerStatsRecord {
            r_x: s.r_x,
            r_x_pc: s.r_x_per_channel.clone(),
            r_w: s.r_w,
            r_w_poc: s.r_w_per_out_channel.clone(),
            r_w_pic: s.r_w_per_in_channel.clone(),
        }
    }
}

impl From<&LayerStatsRecord> for CalibStats {
    fn from(r: &LayerStatsRecord) -> Self {
        CalibStats {
            r_x: r.r_x,
            r_x_per_channel: r.r_x_pc.clone(),
            r_w: r.r_w,
            r_w_per_out_channel: r.r_w_poc.clone(),
            r_w_per_in_channel: r.r_w_pic.clone(),
            batches_seen: 0,
        }
    }
}

impl StatsFile {
    pub fn from_stats<'a>(stats: impl IntoIterator<Item = (&'a str, &'a CalibStats)>) -> Self {
        StatsFile {
            version: STATS_FILE_VERSION,
            layers: stats
                .into_iter()
                .map(|(name, s)| (name.to_string(), LayerStatsRecord::from(s)))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: StatsFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if file.version != STATS_FILE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported stats file version {}",
                file.version
            )));
        }
        Ok(file)
    }

    pub fn layer(&self, name: &str) -> Result<CalibStats> {
        self.layers
            .get(name)
            .map(CalibStats::from)
            .ok_or_else(|| Error::MissingStats(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_f64(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn observe_basic() {
        let mut s = CalibStats::new();
        s.observe_activation(&t(2, 2, &[1.0, -3.0, 2.0, 0.5])).unwrap();
        assert_eq!(s.r_x, 3.0);
        assert_eq!(s.r_x_per_channel, vec![2.0, 3.0]);
        assert_eq!(s.batches_seen, 1);
    }

    #[test]
    fn observe_is_monotone() {
        let mut s = CalibStats::new();
        s.observe_activation(&t(1, 2, &[5.0, 1.0])).unwrap();
        s.observe_activation(&t(1, 2, &[3.0, -3.0])).unwrap();
        assert_eq!(s.r_x, 5.0);
        assert_eq!(s.r_x_per_channel, vec![5.0, 3.0]);
    }

    #[test]
    fn observe_channel_mismatch() {
        let mut s = CalibStats::new();
        s.observe_activation(&t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(s.observe_activation(&t(1, 3, &[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn two_batches_equal_concatenation() {
        let a = t(2, 3, &[0.1, -4.0, 2.0, 1.5, 0.0, -0.5]);
        let b = t(1, 3, &[-2.5, 3.5, 1.0]);
        let cat = t(3, 3, &[0.1, -4.0, 2.0, 1.5, 0.0, -0.5, -2.5, 3.5, 1.0]);

        let mut split = CalibStats::new();
        split.observe_activation(&a).unwrap();
        split.observe_activation(&b).unwrap();

        let mut whole = CalibStats::new();
        whole.observe_activation(&cat).unwrap();

        assert_eq!(split.r_x, whole.r_x);
        assert_eq!(split.r_x_per_channel, whole.r_x_per_channel);
    }

    #[test]
    fn weight_stats_by_hand() {
        let ws = measure_weight(&t(2, 2, &[1.0, -2.0, 3.0, 4.0])).unwrap();
        assert_eq!(ws.r_w, 4.0);
        assert_eq!(ws.per_out_channel, vec![2.0, 4.0]);
        assert_eq!(ws.per_in_channel, vec![3.0, 4.0]);

        let zeros = measure_weight(&t(2, 2, &[0.0; 4])).unwrap();
        assert_eq!(zeros.r_w, 0.0);
        assert_eq!(zeros.per_out_channel, vec![0.0, 0.0]);

        assert!(measure_weight(&Tensor::zeros_f64(0, 4)).is_err());
    }

    #[test]
    fn weight_stats_match_brute_force() {
        let mut vals = Vec::new();
        for i in 0..256 {
            vals.push(((i * 37 + 11) % 101) as f64 / 10.0 - 5.0);
        }
        let w = t(16, 16, &vals);
        let ws = measure_weight(&w).unwrap();
        for r in 0..16 {
            let mut m = 0.0f64;
            for c in 0..16 {
                m = m.max(w.get(r, c).abs());
            }
            assert_eq!(ws.per_out_channel[r], m);
        }
        for c in 0..16 {
            let mut m = 0.0f64;
            for r in 0..16 {
                m = m.max(w.get(r, c).abs());
            }
            assert_eq!(ws.per_in_channel[c], m);
        }
        let flat = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert_eq!(ws.r_w, flat);
    }

    #[test]
    fn dynamic_stats() {
        let x = t(2, 3, &[1.0, -2.0, 0.5, -4.0, 0.0, 3.0]);
        let d = measure_dynamic(&x).unwrap();
        assert_eq!(d.r_x_per_sample, vec![2.0, 4.0]);
        assert_eq!(d.r_x_batch, 4.0);
        assert!(measure_dynamic(&Tensor::zeros_f64(0, 3)).is_err());
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let mut a = CalibStats::new();
        a.observe_activation(&t(1, 2, &[1.0, -6.0])).unwrap();
        a.set_weight_stats(&measure_weight(&t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap());

        let fresh = CalibStats::new();
        assert_eq!(a.merge(&fresh).unwrap(), a);

        let mut b = CalibStats::new();
        b.observe_activation(&t(1, 2, &[9.0, 0.5])).unwrap();
        let ab = a.merge(&b).unwrap();
        let ba = b.merge(&a).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.r_x_per_channel, vec![9.0, 6.0]);
        assert_eq!(ab.batches_seen, 2);
    }

    #[test]
    fn merge_of_split_stream_equals_whole_stream() {
        let batches: Vec<Tensor> = (0..6)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|j| ((i * 13 + j * 7) % 23) as f64 - 11.0).collect();
                t(2, 4, &v)
            })
            .collect();

        let mut whole = CalibStats::new();
        for b in &batches {
            whole.observe_activation(b).unwrap();
        }
        let mut left = CalibStats::new();
        let mut right = CalibStats::new();
        for b in &batches[..3] {
            left.observe_activation(b).unwrap();
        }
        for b in &batches[3..] {
            right.observe_activation(b).unwrap();
        }
        assert_eq!(left.merge(&right).unwrap(), whole);
    }

    #[test]
    fn per_tensor_equals_max_of_per_channel() {
        let mut s = CalibStats::new();
        for i in 0..5 {
            let v: Vec<f64> = (0..12).map(|j| ((i * 31 + j * 17) % 19) as f64 - 9.0).collect();
            s.observe_activation(&t(3, 4, &v)).unwrap();
        }
        let max_pc = s.r_x_per_channel.iter().copied().fold(0.0f64, f64::max);
        assert_eq!(s.r_x, max_pc);
    }

    #[test]
    fn stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let mut s = CalibStats::new();
        s.observe_activation(&t(1, 2, &[1.0, -2.0])).unwrap();
        s.set_weight_stats(&measure_weight(&t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap());
        let file = StatsFile::from_stats([("fc0", &s)]);
        file.save(&path).unwrap();
        let loaded = StatsFile::load(&path).unwrap();
        assert_eq!(loaded, file);
        let back = loaded.layer("fc0").unwrap();
        assert_eq!(back.r_x, 2.0);
        assert!(loaded.layer("missing").is_err());
    }
}
