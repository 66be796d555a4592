//! Results directory layout and the records stored in it.
//!
//! ```text
//! <out>/run.json
//! <out>/summary.json
//! <out>/samples/<sample_id>/seed_<S>/result.json
//!                                   /activation_mask.{tensor,png}
//!                                   /segmenter_mask.{tensor,png}
//!                                   /activations_image.tensor
//!                                   /activations_audio.tensor
//!                                   /factors_image.tensor
//!                                   /factors_audio.tensor
//!                                   /loss_trace.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use semconmf::segment::Classification;
use semconmf::{LossBreakdown, SolverConfig};

pub const RESULT_FILE: &str = "result.json";
pub const ACTIVATION_MASK: &str = "activation_mask";
pub const SEGMENTER_MASK: &str = "segmenter_mask";
pub const IMAGE_ACTIVATIONS: &str = "activations_image.tensor";
pub const AUDIO_ACTIVATIONS: &str = "activations_audio.tensor";
pub const IMAGE_FACTORS: &str = "factors_image.tensor";
pub const AUDIO_FACTORS: &str = "factors_audio.tensor";
pub const LOSS_TRACE: &str = "loss_trace.csv";

pub fn samples_dir(results: &Path) -> PathBuf {
    results.join("samples")
}

pub fn sample_dir(results: &Path, sample_id: &str) -> PathBuf {
    samples_dir(results).join(sample_id)
}

pub fn seed_dir(results: &Path, sample_id: &str, seed: u64) -> PathBuf {
    sample_dir(results, sample_id).join(format!("seed_{seed}"))
}

/// Seeds with a directory under the sample, ascending.
pub fn seeds_present(results: &Path, sample_id: &str) -> Result<Vec<u64>> {
    let dir = sample_dir(results, sample_id);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut seeds = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(seed) = name
            .to_str()
            .and_then(|n| n.strip_prefix("seed_"))
            .and_then(|s| s.parse().ok())
        {
            seeds.push(seed);
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorTable {
    pub labels: Vec<String>,
    /// K × J cosines of the image components with the image anchors.
    pub image: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    /// Per-factor divergence between the two descriptors.
    pub divergence: Vec<f64>,
    pub degenerate_image: Vec<bool>,
    pub degenerate_audio: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub seed: u64,
    pub k_star: usize,
    pub final_loss: LossBreakdown,
}

/// Everything about one (sample, seed) run except the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub sample_id: String,
    pub seed: u64,
    pub config: SolverConfig,
    pub segmenter: String,
    pub spatial_dims: [usize; 2],
    /// Frames decomposed jointly; 1 unless the temporal term is active.
    pub frames: Vec<FrameRecord>,
    pub key_frame: usize,
    pub k_star: usize,
    pub classification: Classification,
    pub descriptors: DescriptorTable,
    pub final_loss: LossBreakdown,
    /// `[H', W']` of the segmenter mask.
    pub segmenter_mask_dims: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStatus {
    pub sample_id: String,
    pub ok: bool,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub samples: Vec<SampleStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: SolverConfig,
    pub seeds: Vec<u64>,
    pub segmenter: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Grayscale PNG of values in [0, 1], each cell drawn as a `scale`² block.
pub fn write_png(path: &Path, values: &Array2<f64>, scale: u32) -> Result<()> {
    let (h, w) = values.dim();
    let scale = scale.max(1);
    let img = image::GrayImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = values[[(y / scale) as usize, (x / scale) as usize]];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn png_has_scaled_dims_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_png(&path, &array![[0.0, 1.0], [0.5, 0.25]], 3).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(5, 0)[0], 255);
        assert_eq!(img.get_pixel(0, 5)[0], 128);
        assert_eq!(img.get_pixel(4, 4)[0], 64);
    }

    #[test]
    fn seeds_are_listed_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for s in [10, 2, 7] {
            fs::create_dir_all(seed_dir(dir.path(), "a", s)).unwrap();
        }
        fs::create_dir_all(sample_dir(dir.path(), "a").join("inspect")).unwrap();
        assert_eq!(seeds_present(dir.path(), "a").unwrap(), vec![2, 7, 10]);
        assert!(seeds_present(dir.path(), "b").unwrap().is_empty());
    }
}
