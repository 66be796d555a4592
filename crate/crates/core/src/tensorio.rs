//! Self-describing binary tensors, anchor banks and JSON manifests.
//!
//! Tensor layout (little-endian throughout):
//!
//! ```text
//! magic    4 bytes  "SCNM"
//! version  u16      1
//! dtype    u8       0 = float32
//! ndim     u8
//! dims     ndim × u64
//! payload  product(dims) × f32, row-major
//! ```
//!
//! Anchor bank layout:
//!
//! ```text
//! magic    4 bytes  "SCNB"
//! version  u16      1
//! J        u64
//! C_I      u64
//! C_A      u64
//! labels   J × (u32 byte length, UTF-8 bytes)
//! image    J × C_I × f32, row-major
//! audio    J × C_A × f32, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::AnchorBank;

pub const TENSOR_MAGIC: &[u8; 4] = b"SCNM";
pub const BANK_MAGIC: &[u8; 4] = b"SCNB";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

/// A dense float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Tensor {
            dims: m.shape().to_vec(),
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Widens to f64. Every f32 is exactly representable, so no value changes.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        }
        let values = self.data.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((self.dims[0], self.dims[1]), values)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::CorruptFile(format!("dims {dims:?} overflow")))
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile(format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_usize(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::CorruptFile(format!("{what} = {v} too large")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::CorruptFile(format!("{what} length overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn check_header(cur: &mut ByteCursor<'_>, magic: &[u8; 4]) -> Result<()> {
    let found = cur
        .take(4, "magic")
        .map_err(|_| Error::Format("file shorter than the magic number".into()))?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur
        .u16("version")
        .map_err(|_| Error::Format("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = ByteCursor::new(bytes);
    check_header(&mut cur, TENSOR_MAGIC)?;
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let ndim = cur.u8("ndim")? as usize;
    let dims = (0..ndim)
        .map(|_| cur.u64_usize("dim"))
        .collect::<Result<Vec<_>>>()?;
    let count = element_count(&dims)?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::CorruptFile("payload size overflows".into()))?;
    if cur.remaining() != expected {
        return Err(Error::CorruptFile(format!(
            "dims {dims:?} need {expected} payload bytes, found {}",
            cur.remaining()
        )));
    }
    let data = cur.f32s(count, "payload")?;
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

/// Elementwise `max(v, 0)`. Rejects NaN; infinities are rejected too since
/// every downstream loss would be non-finite.
pub fn clamp_nonneg(m: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite entry at flat index {pos}"
        )));
    }
    Ok(m.mapv(|v| if v > 0.0 { v } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Image => "image",
        }
    }
}

/// Observations × channels, finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    modality: Modality,
    values: Array2<f64>,
}

impl FeatureMatrix {
    /// Wraps an already non-negative matrix.
    pub fn new(modality: Modality, values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "{} features must be finite and non-negative, found {v}",
                modality.as_str()
            )));
        }
        Self::check_shape(modality, &values)?;
        Ok(FeatureMatrix { modality, values })
    }

    /// Clamps negative entries to zero.
    pub fn from_raw(modality: Modality, raw: &Array2<f64>) -> Result<Self> {
        Self::check_shape(modality, raw)?;
        Ok(FeatureMatrix {
            modality,
            values: clamp_nonneg(raw)?,
        })
    }

    fn check_shape(modality: Modality, values: &Array2<f64>) -> Result<()> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "{} features are empty ({:?})",
                modality.as_str(),
                values.shape()
            )));
        }
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Reads a 2-D tensor and clamps it.
pub fn read_features(path: impl AsRef<Path>, modality: Modality) -> Result<FeatureMatrix> {
    let m = read_tensor(path)?.to_matrix()?;
    FeatureMatrix::from_raw(modality, &m)
}

pub fn encode_anchor_bank(
    labels: &[String],
    image: &Array2<f64>,
    audio: &Array2<f64>,
) -> Result<Vec<u8>> {
    let j = labels.len();
    if image.nrows() != j || audio.nrows() != j {
        return Err(Error::DimensionMismatch(format!(
            "{j} labels but {} image / {} audio anchors",
            image.nrows(),
            audio.nrows()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for n in [j, image.ncols(), audio.ncols()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for label in labels {
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
    }
    for &v in image.iter().chain(audio.iter()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_anchor_bank(bytes: &[u8]) -> Result<AnchorBank> {
    let mut cur = ByteCursor::new(bytes);
    check_header(&mut cur, BANK_MAGIC)?;
    let j = cur.u64_usize("J")?;
    let c_image = cur.u64_usize("C_I")?;
    let c_audio = cur.u64_usize("C_A")?;
    if j == 0 {
        return Err(Error::EmptyBank);
    }
    let mut labels = Vec::with_capacity(j.min(1 << 16));
    for _ in 0..j {
        let len = cur.u32("label length")? as usize;
        let raw = cur.take(len, "label")?;
        let label = std::str::from_utf8(raw)
            .map_err(|e| Error::CorruptFile(format!("label is not UTF-8: {e}")))?;
        labels.push(label.to_owned());
    }
    let expected = j
        .checked_mul(c_image)
        .and_then(|a| j.checked_mul(c_audio).and_then(|b| a.checked_add(b)))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptFile("anchor payload size overflows".into()))?;
    if cur.remaining() != expected {
        return Err(Error::CorruptFile(format!(
            "declared J={j}, C_I={c_image}, C_A={c_audio} needs {expected} anchor bytes, found {}",
            cur.remaining()
        )));
    }
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    let image =
        Array2::from_shape_vec((j, c_image), widen(cur.f32s(j * c_image, "image anchors")?))
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
    let audio =
        Array2::from_shape_vec((j, c_audio), widen(cur.f32s(j * c_audio, "audio anchors")?))
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
    AnchorBank::from_raw(labels, &image, &audio)
}

/// Loads a bank; anchors are clamped non-negative like features.
pub fn read_anchor_bank(path: impl AsRef<Path>) -> Result<AnchorBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_anchor_bank(&bytes)
}

pub fn write_anchor_bank(path: impl AsRef<Path>, bank: &AnchorBank) -> Result<()> {
    write_raw_anchor_bank(
        path,
        bank.labels(),
        bank.image_anchors(),
        bank.audio_anchors(),
    )
}

/// Writes anchors as given, without clamping (used for unclamped dumps).
pub fn write_raw_anchor_bank(
    path: impl AsRef<Path>,
    labels: &[String],
    image: &Array2<f64>,
    audio: &Array2<f64>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_anchor_bank(labels, image, audio)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePaths {
    pub image_features_path: PathBuf,
    pub audio_features_path: PathBuf,
}

/// One entry of a manifest. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub sample_id: String,
    /// Key frame: the frame whose masks are reported and scored.
    pub image_features_path: PathBuf,
    pub audio_features_path: PathBuf,
    pub anchor_bank_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_class_label: Option<String>,
    /// Ordered frame sequence. Empty means the key frame alone. When
    /// non-empty it must contain the key frame pair.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<FramePaths>,
    /// Patch grid `[H, W]` of the image features.
    pub spatial_dims: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestSample>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(samples: Vec<ManifestSample>) -> Self {
        Manifest {
            samples,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidManifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if s.sample_id.is_empty()
                || s.sample_id.contains(['/', '\\'])
                || s.sample_id.starts_with('.')
            {
                return Err(Error::InvalidManifest(format!(
                    "sample id {:?} is not a plain file name",
                    s.sample_id
                )));
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate sample id {:?}",
                    s.sample_id
                )));
            }
            if s.spatial_dims[0] == 0 || s.spatial_dims[1] == 0 {
                return Err(Error::InvalidManifest(format!(
                    "{}: spatial dims must be positive",
                    s.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn sample(&self, id: &str) -> Option<&ManifestSample> {
        self.samples.iter().find(|s| s.sample_id == id)
    }

    /// Reads and validates every file a sample refers to, except the ground
    /// truth (see [`Manifest::load_ground_truth`]).
    pub fn load_inputs(&self, sample: &ManifestSample) -> Result<SampleInputs> {
        let key = FramePaths {
            image_features_path: sample.image_features_path.clone(),
            audio_features_path: sample.audio_features_path.clone(),
        };
        let (paths, key_frame) = if sample.frames.is_empty() {
            (vec![key], 0)
        } else {
            let idx = sample
                .frames
                .iter()
                .position(|f| *f == key)
                .ok_or_else(|| {
                    Error::InvalidManifest(format!(
                        "{}: key frame pair is not listed in frames",
                        sample.sample_id
                    ))
                })?;
            (sample.frames.clone(), idx)
        };
        let [h, w] = sample.spatial_dims;
        let mut frames = Vec::with_capacity(paths.len());
        for p in &paths {
            let audio = read_features(self.resolve(&p.audio_features_path), Modality::Audio)?;
            let image = read_features(self.resolve(&p.image_features_path), Modality::Image)?;
            if image.rows() != h * w {
                return Err(Error::DimensionMismatch(format!(
                    "{}: image features have {} rows, spatial dims {h}x{w}",
                    sample.sample_id,
                    image.rows()
                )));
            }
            frames.push(FramePair { audio, image });
        }
        let bank = read_anchor_bank(self.resolve(&sample.anchor_bank_path))?;
        Ok(SampleInputs {
            frames,
            key_frame,
            bank,
        })
    }

    pub fn load_ground_truth(&self, sample: &ManifestSample) -> Result<Option<Array2<bool>>> {
        sample
            .ground_truth_mask_path
            .as_ref()
            .map(|p| {
                read_tensor(self.resolve(p))?
                    .to_matrix()
                    .map(|m| m.mapv(|v| v >= 0.5))
            })
            .transpose()
    }
}

#[derive(Debug, Clone)]
pub struct FramePair {
    pub audio: FeatureMatrix,
    pub image: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub frames: Vec<FramePair>,
    pub key_frame: usize,
    pub bank: AnchorBank,
}
