//! Model container (`*.mpipe`) with embedded metadata and labels, uint8
//! weight quantization and quantized inference.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MPIPE001" | meta_len u32 | header JSON | label_count u32 | labels
//! | tensor_count u32 | tensors
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Each tensor is its
//! name, a dtype tag (0 = f32, 1 = u8), `ndim u32`, the dims as `u32`, the
//! payload, and for u8 tensors a trailing `scale f32` and `zero_point u8`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image_ops::ImageBuffer;
use crate::nn::{predict_proba, ArchitectureSpec, NnError, Normalization, TrainedModel};
use crate::tensor::{argmax, Tensor};

pub const MAGIC: &[u8; 8] = b"MPIPE001";
/// Lower bound on the quantization step.
pub const SCALE_EPSILON: f32 = 1e-8;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error("tensor contains non-finite values")]
    NonFiniteInput,
    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),
    #[error("not an mpipe container (bad magic)")]
    BadMagic,
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("model tensors are not quantized")]
    NotQuantized,
    #[error("no probe for class {0:?}")]
    InsufficientProbes(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DeployError + '_ {
    move |source| DeployError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Descriptive metadata, serialized with the field names of the mobile
/// metadata table (`"image width"`, `"num_classes"`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    pub version: String,
    #[serde(rename = "image width")]
    pub image_width: usize,
    #[serde(rename = "image height")]
    pub image_height: usize,
    #[serde(rename = "image min")]
    pub image_min: f64,
    #[serde(rename = "image max")]
    pub image_max: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub num_classes: usize,
    pub author: String,
}

impl ModelMetadata {
    /// Metadata for `model`: input size, class count and normalization are
    /// taken from the model. `image min`/`image max` give the normalized
    /// range of 8-bit pixels.
    pub fn for_model(model: &TrainedModel, name: &str, version: &str, author: &str) -> Self {
        let norm = &model.normalization;
        let channels = norm.mean.len().max(norm.std.len());
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..channels {
            let m = norm.mean[c.min(norm.mean.len() - 1)] as f64;
            let s = norm.std[c.min(norm.std.len() - 1)] as f64;
            for v in [(0.0 - m) / s, (255.0 - m) / s] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Self {
            name: name.to_string(),
            version: version.to_string(),
            image_width: model.arch.input_size,
            image_height: model.arch.input_size,
            image_min: lo,
            image_max: hi,
            mean: norm.mean.iter().map(|&v| v as f64).collect(),
            std: norm.std.iter().map(|&v| v as f64).collect(),
            num_classes: model.labels.len(),
            author: author.to_string(),
        }
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.mean.iter().map(|&v| v as f32).collect(),
            std: self.std.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String, DeployError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DeployError> {
        Ok(serde_json::from_str(text)?)
    }

    fn check(&self, arch: &ArchitectureSpec, labels: &[String]) -> Result<(), DeployError> {
        let fail = |m: String| Err(DeployError::MetadataMismatch(m));
        if self.image_width != arch.input_size || self.image_height != arch.input_size {
            return fail(format!(
                "image {}x{} but architecture input is {}",
                self.image_width, self.image_height, arch.input_size
            ));
        }
        if self.num_classes != labels.len() || self.num_classes != arch.num_classes {
            return fail(format!(
                "num_classes {} but {} labels and {} outputs",
                self.num_classes,
                labels.len(),
                arch.num_classes
            ));
        }
        if self.std.is_empty() || self.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return fail("std entries must be finite and nonzero".into());
        }
        let ok_len = |n: usize| n == 1 || n == arch.channels;
        if !ok_len(self.mean.len()) || !ok_len(self.std.len()) {
            return fail(format!("mean/std length must be 1 or {}", arch.channels));
        }
        Ok(())
    }
}

/// Per-tensor affine uint8 quantization: `x ~ scale * (q - zero_point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
    pub scale: f32,
    pub zero_point: u8,
}

fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Quantizes over the range `[min(x, 0), max(x, 0)]` so that zero is
/// representable and every zero point fits in `0..=255`. A constant
/// nonzero tensor is stored as one exact step (`scale = |c|`).
pub fn quantize_tensor(t: &Tensor) -> Result<QuantizedTensor, DeployError> {
    if t.check_finite().is_err() {
        return Err(DeployError::NonFiniteInput);
    }
    let data = t.data();
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !data.is_empty() && min == max && min != 0.0 {
        let (scale, zero_point, q) = if min > 0.0 { (min, 0, 1) } else { (-min, 1, 0) };
        return Ok(QuantizedTensor {
            shape: t.shape().to_vec(),
            data: vec![q; data.len()],
            scale,
            zero_point,
        });
    }
    let lo = if data.is_empty() { 0.0 } else { min.min(0.0) as f64 };
    let hi = if data.is_empty() { 0.0 } else { max.max(0.0) as f64 };
    let exact = ((hi - lo) / 255.0).max(SCALE_EPSILON as f64);
    let mut scale = exact as f32;
    if (scale as f64) < exact {
        scale = f32::from_bits(scale.to_bits() + 1);
    }
    let s = scale as f64;
    let offset = if hi - lo > 255.0 * SCALE_EPSILON as f64 { -lo * 255.0 / (hi - lo) } else { -lo / s };
    let zero_point = round_half_away(offset).clamp(0.0, 255.0);
    let q = data
        .iter()
        .map(|&x| round_half_away(x as f64 / s + zero_point).clamp(0.0, 255.0) as u8)
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        data: q,
        scale,
        zero_point: zero_point as u8,
    })
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Tensor {
    let s = q.scale as f64;
    let zp = q.zero_point as f64;
    let data = q.data.iter().map(|&v| (s * (v as f64 - zp)) as f32).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized shape matches data")
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Float(Tensor),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Float(t) => t.shape(),
            StoredTensor::Quantized(q) => &q.shape,
        }
    }

    pub fn to_float(&self) -> Tensor {
        match self {
            StoredTensor::Float(t) => t.clone(),
            StoredTensor::Quantized(q) => dequantize_tensor(q),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, StoredTensor::Quantized(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: StoredTensor,
}

/// Seed and config hash of the run that produced a container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: ModelMetadata,
    architecture: ArchitectureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployableModel {
    pub metadata: ModelMetadata,
    pub architecture: ArchitectureSpec,
    pub provenance: Option<Provenance>,
    /// Line `i` names output index `i`.
    pub labels: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

/// Bundles a trained model with its metadata, optionally quantizing every
/// weight tensor.
pub fn package(
    model: &TrainedModel,
    metadata: ModelMetadata,
    quantize: bool,
    provenance: Option<Provenance>,
) -> Result<DeployableModel, DeployError> {
    metadata.check(&model.arch, &model.labels)?;
    if metadata.normalization() != model.normalization {
        return Err(DeployError::MetadataMismatch(
            "mean/std differ from the model's normalization".into(),
        ));
    }
    let names = model.arch.weight_names();
    let tensors = names
        .into_iter()
        .zip(&model.weights)
        .map(|(name, w)| {
            let tensor = if quantize {
                StoredTensor::Quantized(quantize_tensor(w)?)
            } else {
                StoredTensor::Float(w.clone())
            };
            Ok(NamedTensor { name, tensor })
        })
        .collect::<Result<Vec<_>, DeployError>>()?;
    Ok(DeployableModel {
        metadata,
        architecture: model.arch.clone(),
        provenance,
        labels: model.labels.clone(),
        tensors,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DeployError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(DeployError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DeployError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, DeployError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32, DeployError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, DeployError> {
        let n = self.u32()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DeployError::Malformed("invalid UTF-8".into()))
    }
}

impl DeployableModel {
    pub fn is_quantized(&self) -> bool {
        !self.tensors.is_empty() && self.tensors.iter().all(|t| t.tensor.is_quantized())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DeployError> {
        let header = Header {
            metadata: self.metadata.clone(),
            architecture: self.architecture.clone(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(64 + json.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        put_u32(&mut out, self.labels.len());
        for label in &self.labels {
            put_str(&mut out, label);
        }
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            let shape = t.tensor.shape();
            match &t.tensor {
                StoredTensor::Float(_) => out.push(DTYPE_F32),
                StoredTensor::Quantized(_) => out.push(DTYPE_U8),
            }
            put_u32(&mut out, shape.len());
            for &d in shape {
                put_u32(&mut out, d);
            }
            match &t.tensor {
                StoredTensor::Float(f) => {
                    for v in f.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredTensor::Quantized(q) => {
                    out.extend_from_slice(&q.data);
                    out.extend_from_slice(&q.scale.to_le_bytes());
                    out.push(q.zero_point);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DeployError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(DeployError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let meta_len = r.u32()?;
        let header: Header = serde_json::from_slice(r.take(meta_len)?)?;
        let n_labels = r.u32()?;
        let labels = (0..n_labels).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let dtype = r.u8()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| DeployError::Malformed(format!("tensor {name} too large")))?;
            let tensor = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(len.checked_mul(4).ok_or(DeployError::Truncated(r.pos))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    StoredTensor::Float(Tensor::new(shape, data).expect("length checked"))
                }
                DTYPE_U8 => {
                    let data = r.take(len)?.to_vec();
                    let scale = r.f32()?;
                    let zero_point = r.u8()?;
                    StoredTensor::Quantized(QuantizedTensor {
                        shape,
                        data,
                        scale,
                        zero_point,
                    })
                }
                other => return Err(DeployError::Malformed(format!("unknown dtype tag {other}"))),
            };
            tensors.push(NamedTensor { name, tensor });
        }
        if r.pos != bytes.len() {
            return Err(DeployError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = DeployableModel {
            metadata: header.metadata,
            architecture: header.architecture,
            provenance: header.provenance,
            labels,
            tensors,
        };
        model.check_structure()?;
        Ok(model)
    }

    fn check_structure(&self) -> Result<(), DeployError> {
        self.metadata.check(&self.architecture, &self.labels)?;
        let shapes = self.architecture.weight_shapes()?;
        let names = self.architecture.weight_names();
        if shapes.len() != self.tensors.len() {
            return Err(DeployError::Malformed(format!(
                "{} tensors for an architecture with {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for ((t, shape), name) in self.tensors.iter().zip(&shapes).zip(&names) {
            if t.tensor.shape() != shape.as_slice() || &t.name != name {
                return Err(DeployError::Malformed(format!(
                    "tensor {} {:?} where {name} {shape:?} expected",
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Float model with dequantized weights and the metadata's normalization.
    pub fn to_trained_model(&self) -> TrainedModel {
        TrainedModel {
            arch: self.architecture.clone(),
            weights: self.tensors.iter().map(|t| t.tensor.to_float()).collect(),
            labels: self.labels.clone(),
            normalization: self.metadata.normalization(),
            log: Vec::new(),
        }
    }

    /// Writes the container and a `labels.txt` next to it.
    pub fn save(&self, path: &Path) -> Result<(), DeployError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_bytes()?).map_err(io_err(path))?;
        let labels_path = labels_path_for(path);
        fs::write(&labels_path, labels_text(&self.labels)).map_err(io_err(&labels_path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DeployError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// The sidecar labels file of a container path.
pub fn labels_path_for(container: &Path) -> PathBuf {
    container.with_file_name("labels.txt")
}

pub fn labels_text(labels: &[String]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<String>, DeployError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Class probabilities from the quantized weights (dequantized once, then
/// the float forward path). Shapes as for [`TrainedModel::forward`].
pub fn quantized_forward(model: &DeployableModel, input: &Tensor) -> Result<Tensor, DeployError> {
    if !model.is_quantized() {
        return Err(DeployError::NotQuantized);
    }
    Ok(model.to_trained_model().forward(input)?)
}

/// Outcome of [`verify_label_order`]. `permutation[i]` is the output index
/// the model assigns to probes of `labels[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOrderReport {
    pub labels: Vec<String>,
    pub permutation: Vec<usize>,
    pub mismatches: Vec<LabelMismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMismatch {
    pub label: String,
    pub expected_index: usize,
    pub predicted_index: usize,
}

impl LabelOrderReport {
    pub fn is_identity(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// For each label, takes its most confidently classified probe and checks
/// that the predicted output index equals the label's position. Probes are
/// identified by class name, independently of the model's label list.
pub fn verify_label_order(
    model: &DeployableModel,
    probes: &[(ImageBuffer, String)],
) -> Result<LabelOrderReport, DeployError> {
    let float = model.to_trained_model();
    let mut permutation = Vec::with_capacity(model.labels.len());
    let mut mismatches = Vec::new();
    for (i, label) in model.labels.iter().enumerate() {
        let mut best: Option<(f32, usize)> = None;
        for (img, _) in probes.iter().filter(|(_, name)| name == label) {
            let probs = predict_proba(&float, img)?;
            let top = argmax(&probs);
            if best.is_none_or(|(p, _)| probs[top] > p) {
                best = Some((probs[top], top));
            }
        }
        let (_, predicted) = best.ok_or_else(|| DeployError::InsufficientProbes(label.clone()))?;
        if predicted != i {
            mismatches.push(LabelMismatch {
                label: label.clone(),
                expected_index: i,
                predicted_index: predicted,
            });
        }
        permutation.push(predicted);
    }
    Ok(LabelOrderReport {
        labels: model.labels.clone(),
        permutation,
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, preset};
    use proptest::prelude::*;

    fn table_metadata() -> ModelMetadata {
        ModelMetadata {
            name: "name".into(),
            version: "v1".into(),
            image_width: 50,
            image_height: 50,
            image_min: 0.0,
            image_max: 1.0,
            mean: vec![0.0],
            std: vec![255.0],
            num_classes: 2,
            author: "X".into(),
        }
    }

    fn toy_model(seed: u64) -> TrainedModel {
        let arch = preset("d1m1@2x4", 8, 3, 2).unwrap();
        let mut m = init_weights(&arch, seed).unwrap();
        m.labels = vec!["CT_COVID".into(), "CT_nonCOVID".into()];
        m
    }

    #[test]
    fn range_minus_one_to_one() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let q = quantize_tensor(&t).unwrap();
        assert!((q.scale - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(q.zero_point, 128);
        assert_eq!(q.data[1], 128);
        assert_eq!(dequantize_tensor(&q).data()[1], 0.0);
    }

    #[test]
    fn constant_tensors_are_exact() {
        for c in [0.0f32, 0.37, -2.5, 1e-12] {
            let t = Tensor::new(vec![3], vec![c; 3]).unwrap();
            let q = quantize_tensor(&t).unwrap();
            assert!(q.data.iter().all(|&v| v == q.data[0]));
            assert_eq!(dequantize_tensor(&q).data(), &[c, c, c]);
        }
        let q = quantize_tensor(&Tensor::new(vec![2], vec![0.0; 2]).unwrap()).unwrap();
        assert_eq!(q.scale, SCALE_EPSILON);
        assert!(q.data.iter().all(|&v| v == q.zero_point));
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(quantize_tensor(&t), Err(DeployError::NonFiniteInput)));
    }

    #[test]
    fn metadata_json_uses_table_names() {
        let meta = table_metadata();
        let json = meta.to_json().unwrap();
        assert!(json.contains("\"image width\": 50"));
        assert!(json.contains("\"num_classes\": 2"));
        assert_eq!(ModelMetadata::from_json(&json).unwrap(), meta);
        let model = toy_model(0);
        let derived = ModelMetadata::for_model(&model, "name", "v1", "X");
        assert_eq!((derived.image_min, derived.image_max), (0.0, 1.0));
        assert_eq!((derived.mean.clone(), derived.std.clone()), (vec![0.0], vec![255.0]));
    }

    #[test]
    fn container_round_trip_and_labels_file() {
        let model = toy_model(3);
        let meta = ModelMetadata::for_model(&model, "toy", "v1", "X");
        let prov = Some(Provenance {
            seed: 3,
            config_hash: "abc".into(),
        });
        for quantize in [false, true] {
            let d = package(&model, meta.clone(), quantize, prov.clone()).unwrap();
            assert_eq!(d.is_quantized(), quantize);
            let bytes = d.to_bytes().unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = DeployableModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mpipe");
        package(&model, meta, false, None).unwrap().save(&path).unwrap();
        let labels = read_labels(&labels_path_for(&path)).unwrap();
        assert_eq!(labels[0], "CT_COVID");
        assert_eq!(DeployableModel::load(&path).unwrap().to_trained_model().weights, model.weights);
    }

    #[test]
    fn metadata_mismatch_rejected() {
        let model = toy_model(0);
        let mut meta = ModelMetadata::for_model(&model, "toy", "v1", "X");
        meta.image_width = 9;
        assert!(matches!(package(&model, meta, false, None), Err(DeployError::MetadataMismatch(_))));
        let mut meta = ModelMetadata::for_model(&model, "toy", "v1", "X");
        meta.std = vec![0.0];
        assert!(matches!(package(&model, meta, false, None), Err(DeployError::MetadataMismatch(_))));
    }

    #[test]
    fn corrupted_containers_rejected() {
        let model = toy_model(1);
        let meta = ModelMetadata::for_model(&model, "toy", "v1", "X");
        let bytes = package(&model, meta, true, None).unwrap().to_bytes().unwrap();
        assert!(matches!(DeployableModel::from_bytes(b"NOTMPIPE"), Err(DeployError::BadMagic)));
        assert!(matches!(
            DeployableModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(DeployError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(DeployableModel::from_bytes(&extra).is_err());
    }

    #[test]
    fn zero_model_quantized_matches_float() {
        let mut model = toy_model(0);
        for w in &mut model.weights {
            w.data_mut().fill(0.0);
        }
        let meta = ModelMetadata::for_model(&model, "z", "v1", "X");
        let q = package(&model, meta.clone(), true, None).unwrap();
        let input = Tensor::new(vec![1, 8, 8, 3], vec![0.3; 192]).unwrap();
        let out = quantized_forward(&q, &input).unwrap();
        assert_eq!(out, model.forward(&input).unwrap());
        assert_eq!(out.data(), &[0.5, 0.5]);
        let f = package(&model, meta, false, None).unwrap();
        assert!(matches!(quantized_forward(&f, &input), Err(DeployError::NotQuantized)));
    }

    #[test]
    fn label_order_detects_reversal() {
        // Output 0 fires on bright images, output 1 on dark ones.
        let arch = preset("d1m1@1x1", 8, 1, 2).unwrap();
        let mut model = init_weights(&arch, 0).unwrap();
        model.weights[0].data_mut().fill(1.0 / 9.0);
        model.weights[2].data_mut().fill(1.0 / 9.0);
        model.weights[4].data_mut().copy_from_slice(&[5.0, -5.0]);
        model.weights[5].data_mut().copy_from_slice(&[-2.5, 2.5]);
        model.labels = vec!["bright".into(), "dark".into()];
        let probes = vec![
            (ImageBuffer::filled(8, 8, 1, 255.0), "bright".to_string()),
            (ImageBuffer::filled(8, 8, 1, 0.0), "dark".to_string()),
        ];
        let meta = ModelMetadata::for_model(&model, "m", "v1", "X");
        let d = package(&model, meta, false, None).unwrap();
        let report = verify_label_order(&d, &probes).unwrap();
        assert!(report.is_identity());
        assert_eq!(report.permutation, vec![0, 1]);

        let mut reversed = d.clone();
        reversed.labels.reverse();
        let report = verify_label_order(&reversed, &probes).unwrap();
        assert_eq!(report.permutation, vec![1, 0]);
        assert_eq!(report.mismatches.len(), 2);

        assert!(matches!(
            verify_label_order(&d, &probes[..1]),
            Err(DeployError::InsufficientProbes(l)) if l == "dark"
        ));
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded(
            values in proptest::collection::vec(-1.0f32..1.0, 1..64),
            gain in 1e-3f32..1.0,
        ) {
            let data: Vec<f32> = values.iter().map(|v| v * gain).collect();
            let t = Tensor::new(vec![data.len()], data.clone()).unwrap();
            let q = quantize_tensor(&t).unwrap();
            let back = dequantize_tensor(&q);
            for (x, y) in data.iter().zip(back.data()) {
                prop_assert!(((x - y).abs() as f64) <= q.scale as f64 / 2.0 + 1e-7);
            }
        }
    }
}
