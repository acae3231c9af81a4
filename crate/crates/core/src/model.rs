//! On-disk containers: source models, calibration datasets and quantized
//! model directories.
//!
//! A source model is a directory holding `manifest.json` plus one raw
//! little-endian `f32` binary per weight tensor, row-major in
//! (out-channels x in-channels) layout. A dataset is a directory with
//! `index.json` listing raw `f32` batch files. A quantized model directory
//! holds `manifest.json`, per-layer FP8 code files with JSON scale sidecars
//! (see [`crate::qlinear`]), and real weight copies for layers left in high
//! precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlinear::QuantizedLinear;
use crate::tensor::Tensor;

pub const MODEL_MANIFEST_VERSION: u32 = 1;

/// One layer entry in a source-model manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub weight_file: String,
    pub out_channels: usize,
    pub in_channels: usize,
    #[serde(default)]
    pub is_first: bool,
    #[serde(default)]
    pub is_last: bool,
}

/// Source-model manifest: an ordered chain of linear layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub version: u32,
    pub layers: Vec<LayerSpec>,
}

/// A source model loaded into memory; weights widened to `f64`.
#[derive(Debug, Clone)]
pub struct Model {
    pub manifest: ModelManifest,
    pub weights: Vec<Tensor>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a raw little-endian `f32` file into an (rows x cols) tensor.
pub fn read_f32_bin(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes cannot hold {rows}x{cols} f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_f64(rows, cols, vals)
}

/// Write a tensor as raw little-endian `f32`.
pub fn write_f32_bin(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.to_f64_vec() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

impl Model {
    /// Load a source model directory and validate the layer chain.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != MODEL_MANIFEST_VERSION {
            return Err(Error::InvalidManifest(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        if manifest.layers.is_empty() {
            return Err(Error::InvalidManifest("model has no layers".into()));
        }
        for pair in manifest.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::InvalidManifest(format!(
                    "layer {:?} outputs {} channels but layer {:?} expects {}",
                    pair[0].name, pair[0].out_channels, pair[1].name, pair[1].in_channels
                )));
            }
        }
        // Positional defaults when the manifest marks nothing.
        if !manifest.layers.iter().any(|l| l.is_first) {
            manifest.layers.first_mut().expect("nonempty").is_first = true;
        }
        if !manifest.layers.iter().any(|l| l.is_last) {
            manifest.layers.last_mut().expect("nonempty").is_last = true;
        }
        let mut weights = Vec::with_capacity(manifest.layers.len());
        for layer in &manifest.layers {
            weights.push(read_f32_bin(
                &dir.join(&layer.weight_file),
                layer.out_channels,
                layer.in_channels,
            )?);
        }
        Ok(Model { manifest, weights })
    }

    /// Write a model directory from named weight tensors, flagging the first
    /// and last layers.
    pub fn save(dir: &Path, layers: &[(String, Tensor)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let n = layers.len();
        let manifest = ModelManifest {
            version: MODEL_MANIFEST_VERSION,
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, (name, w))| LayerSpec {
                    name: name.clone(),
                    weight_file: format!("{name}.bin"),
                    out_channels: w.rows(),
                    in_channels: w.cols(),
                    is_first: i == 0,
                    is_last: i + 1 == n,
                })
                .collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        for (name, w) in layers {
            write_f32_bin(&dir.join(format!("{name}.bin")), w)?;
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.manifest.layers[0].in_channels
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchEntry {
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetIndex {
    version: u32,
    batches: Vec<BatchEntry>,
}

/// An ordered list of activation batches.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub batches: Vec<Tensor>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&dir.join("index.json"))?;
        if index.version != MODEL_MANIFEST_VERSION {
            return Err(Error::InvalidManifest(format!(
                "unsupported dataset index version {}",
                index.version
            )));
        }
        let mut batches = Vec::with_capacity(index.batches.len());
        for b in &index.batches {
            batches.push(read_f32_bin(&dir.join(&b.file), b.rows, b.cols)?);
        }
        Ok(Dataset { batches })
    }

    pub fn save(dir: &Path, batches: &[Tensor]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let index = DatasetIndex {
            version: MODEL_MANIFEST_VERSION,
            batches: batches
                .iter()
                .enumerate()
                .map(|(i, b)| BatchEntry {
                    file: format!("batch_{i}.bin"),
                    rows: b.rows(),
                    cols: b.cols(),
                })
                .collect(),
        };
        write_json(&dir.join("index.json"), &index)?;
        for (i, b) in batches.iter().enumerate() {
            write_f32_bin(&dir.join(format!("batch_{i}.bin")), b)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Quantized model directories
// ---------------------------------------------------------------------------

/// One layer of a deployable quantized model: FP8 or kept in high precision.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum QuantLayer {
    Fp8 { name: String, layer: QuantizedLinear },
    /// Layer left unquantized (e.g. first/last); weights in high precision.
    Real { name: String, weights: Tensor },
}

impl QuantLayer {
    pub fn name(&self) -> &str {
        match self {
            QuantLayer::Fp8 { name, .. } => name,
            QuantLayer::Real { name, .. } => name,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            QuantLayer::Fp8 { layer, .. } => layer.in_channels(),
            QuantLayer::Real { weights, .. } => weights.cols(),
        }
    }

    /// Run the layer on a real-valued batch; output widened to `f64`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            QuantLayer::Fp8 { layer, .. } => Ok(layer.forward(x)?.to_f64_tensor()),
            QuantLayer::Real { weights, .. } => {
                crate::tensor::matmul_reference(&x.to_f64_tensor(), &weights.transposed())
            }
        }
    }
}

/// Run a batch through a whole quantized layer chain.
pub fn forward_quantized(layers: &[QuantLayer], x: &Tensor) -> Result<Tensor> {
    let mut cur = x.to_f64_tensor();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantizedLayerSpec {
    name: String,
    out_channels: usize,
    in_channels: usize,
    quantized: bool,
    /// File stem of `<stem>.fp8` / `<stem>.scale.json` for quantized layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stem: Option<String>,
    /// Raw f32 weight file for passthrough layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantizedManifest {
    version: u32,
    quantized: bool,
    layers: Vec<QuantizedLayerSpec>,
}

/// Persist a quantized model chain into `dir`.
pub fn save_quantized_model(dir: &Path, layers: &[QuantLayer]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut specs = Vec::with_capacity(layers.len());
    for l in layers {
        match l {
            QuantLayer::Fp8 { name, layer } => {
                layer.save(dir, name)?;
                specs.push(QuantizedLayerSpec {
                    name: name.clone(),
                    out_channels: layer.out_channels(),
                    in_channels: layer.in_channels(),
                    quantized: true,
                    stem: Some(name.clone()),
                    weight_file: None,
                });
            }
            QuantLayer::Real { name, weights } => {
                let file = format!("{name}.bin");
                write_f32_bin(&dir.join(&file), weights)?;
                specs.push(QuantizedLayerSpec {
                    name: name.clone(),
                    out_channels: weights.rows(),
                    in_channels: weights.cols(),
                    quantized: false,
                    stem: None,
                    weight_file: Some(file),
                });
            }
        }
    }
    let manifest =
        QuantizedManifest { version: MODEL_MANIFEST_VERSION, quantized: true, layers: specs };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Load a quantized model directory written by [`save_quantized_model`].
pub fn load_quantized_model(dir: &Path) -> Result<Vec<QuantLayer>> {
    let manifest: QuantizedManifest = read_json(&dir.join("manifest.json"))?;
    if !manifest.quantized {
        return Err(Error::InvalidManifest(
            "directory holds a source model, not a quantized model".into(),
        ));
    }
    if manifest.version != MODEL_MANIFEST_VERSION {
        return Err(Error::InvalidManifest(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        if spec.quantized {
            let stem = spec.stem.as_deref().ok_or_else(|| {
                Error::InvalidManifest(format!("quantized layer {:?} missing stem", spec.name))
            })?;
            layers.push(QuantLayer::Fp8 {
                name: spec.name.clone(),
                layer: QuantizedLinear::load(dir, stem)?,
            });
        } else {
            let file = spec.weight_file.as_deref().ok_or_else(|| {
                Error::InvalidManifest(format!("passthrough layer {:?} missing weight file", spec.name))
            })?;
            layers.push(QuantLayer::Real {
                name: spec.name.clone(),
                weights: read_f32_bin(&dir.join(file), spec.out_channels, spec.in_channels)?,
            });
        }
    }
    Ok(layers)
}
