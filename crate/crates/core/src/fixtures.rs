//! Seeded synthetic problems with known ground truth.
//!
//! A planted problem draws `J` concepts with well-separated anchors in both
//! modalities. The image grid contains two rectangular blobs: one of the
//! shared (sounding) concept and one of a visible but silent concept, over a
//! background concept. The audio tokens mix the shared concept with an
//! audio-only concept. Features are the concept's anchor scaled by a random
//! gain plus small non-negative noise.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::semantics::AnchorBank;
use crate::tensorio::{
    write_anchor_bank, write_matrix, FeatureMatrix, FramePair, Manifest, ManifestSample, Modality,
};

pub const PLANTED_LABELS: [&str; 6] = ["dog", "piano", "grass", "wind", "car", "bird"];
/// Indices into [`PLANTED_LABELS`].
pub const SHARED_CONCEPT: usize = 0;
pub const SILENT_CONCEPT: usize = 1;
pub const BACKGROUND_CONCEPT: usize = 2;
pub const AUDIO_ONLY_CONCEPT: usize = 3;

#[derive(Debug, Clone)]
pub struct Problem {
    pub audio: FeatureMatrix,
    pub image: FeatureMatrix,
    pub bank: AnchorBank,
}

/// Uniform random features and anchors, for gradient checks and smoke tests.
pub fn random_problem(
    seed: u64,
    n_tokens: usize,
    n_patches: usize,
    audio_channels: usize,
    image_channels: usize,
    j: usize,
) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, c: usize, lo: f64| -> Array2<f64> {
        Array::from_shape_simple_fn((r, c), || rng.gen_range(lo..1.0))
    };
    let audio = uniform(n_tokens, audio_channels, 0.0);
    let image = uniform(n_patches, image_channels, 0.0);
    let bank_image = uniform(j, image_channels, 0.05);
    let bank_audio = uniform(j, audio_channels, 0.05);
    Problem {
        audio: FeatureMatrix::new(Modality::Audio, audio).unwrap(),
        image: FeatureMatrix::new(Modality::Image, image).unwrap(),
        bank: AnchorBank::new(
            (0..j).map(|i| format!("word{i}")).collect(),
            bank_image,
            bank_audio,
        )
        .unwrap(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSpec {
    pub height: usize,
    pub width: usize,
    pub image_channels: usize,
    pub audio_channels: usize,
    pub n_tokens: usize,
    /// Standard deviation of the (absolute-valued) additive noise.
    pub noise: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            height: 8,
            width: 8,
            image_channels: 18,
            audio_channels: 12,
            n_tokens: 10,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedProblem {
    pub problem: Problem,
    pub spatial_dims: (usize, usize),
    /// H × W mask of the sounding blob.
    pub sounding_mask: Array2<bool>,
    /// H × W mask of the silent blob.
    pub silent_mask: Array2<bool>,
    /// Audio tokens carrying the shared concept.
    pub sounding_tokens: Vec<bool>,
}

/// One-hot-ish anchors: concept `j` owns a block of channels, plus a small
/// positive floor so no anchor is orthogonal to everything.
fn planted_anchors(rng: &mut ChaCha8Rng, j: usize, channels: usize) -> Array2<f64> {
    let block = (channels / j).max(1);
    Array::from_shape_fn((j, channels), |(r, c)| {
        let owned = c / block == r;
        if owned {
            rng.gen_range(0.7..1.0)
        } else {
            rng.gen_range(0.0..0.08)
        }
    })
}

fn rect(rng: &mut ChaCha8Rng, h: usize, w: usize, taken: Option<&Array2<bool>>) -> Array2<bool> {
    loop {
        let bh = rng.gen_range(3..=4.min(h));
        let bw = rng.gen_range(3..=4.min(w));
        let top = rng.gen_range(0..=h - bh);
        let left = rng.gen_range(0..=w - bw);
        let m = Array::from_shape_fn((h, w), |(r, c)| {
            r >= top && r < top + bh && c >= left && c < left + bw
        });
        let clash = taken.is_some_and(|t| t.iter().zip(m.iter()).any(|(&a, &b)| a && b));
        if !clash {
            return m;
        }
    }
}

fn noisy_row(
    rng: &mut ChaCha8Rng,
    anchor: ndarray::ArrayView1<'_, f64>,
    noise: &Normal<f64>,
) -> Array1<f64> {
    let gain = rng.gen_range(0.8..1.2);
    anchor.mapv(|a| a * gain + noise.sample(rng).abs())
}

fn image_features(
    rng: &mut ChaCha8Rng,
    anchors: &Array2<f64>,
    sounding: &Array2<bool>,
    silent: &Array2<bool>,
    noise: &Normal<f64>,
) -> Array2<f64> {
    let (h, w) = sounding.dim();
    let mut x = Array2::zeros((h * w, anchors.ncols()));
    for r in 0..h {
        for c in 0..w {
            let concept = if sounding[[r, c]] {
                SHARED_CONCEPT
            } else if silent[[r, c]] {
                SILENT_CONCEPT
            } else {
                BACKGROUND_CONCEPT
            };
            x.row_mut(r * w + c)
                .assign(&noisy_row(rng, anchors.row(concept), noise));
        }
    }
    x
}

fn audio_features(
    rng: &mut ChaCha8Rng,
    anchors: &Array2<f64>,
    n_tokens: usize,
    noise: &Normal<f64>,
) -> (Array2<f64>, Vec<bool>) {
    let n_sounding = (n_tokens * 3).div_ceil(5).max(1);
    let mut tokens: Vec<bool> = (0..n_tokens).map(|t| t < n_sounding).collect();
    // shuffle token order
    for i in (1..tokens.len()).rev() {
        let j = rng.gen_range(0..=i);
        tokens.swap(i, j);
    }
    let mut x = Array2::zeros((n_tokens, anchors.ncols()));
    for (t, &s) in tokens.iter().enumerate() {
        let concept = if s {
            SHARED_CONCEPT
        } else {
            AUDIO_ONLY_CONCEPT
        };
        x.row_mut(t)
            .assign(&noisy_row(rng, anchors.row(concept), noise));
    }
    (x, tokens)
}

fn planted_bank(rng: &mut ChaCha8Rng, spec: &PlantedSpec) -> AnchorBank {
    let j = PLANTED_LABELS.len();
    let image = planted_anchors(rng, j, spec.image_channels);
    let audio = planted_anchors(rng, j, spec.audio_channels);
    AnchorBank::new(
        PLANTED_LABELS.iter().map(|s| s.to_string()).collect(),
        image,
        audio,
    )
    .unwrap()
}

pub fn planted_problem(seed: u64, spec: &PlantedSpec) -> PlantedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).unwrap();
    let bank = planted_bank(&mut rng, spec);
    let sounding = rect(&mut rng, spec.height, spec.width, None);
    let silent = rect(&mut rng, spec.height, spec.width, Some(&sounding));
    let image = image_features(&mut rng, bank.image_anchors(), &sounding, &silent, &noise);
    let (audio, tokens) = audio_features(&mut rng, bank.audio_anchors(), spec.n_tokens, &noise);
    PlantedProblem {
        problem: Problem {
            audio: FeatureMatrix::new(Modality::Audio, audio).unwrap(),
            image: FeatureMatrix::new(Modality::Image, image).unwrap(),
            bank,
        },
        spatial_dims: (spec.height, spec.width),
        sounding_mask: sounding,
        silent_mask: silent,
        sounding_tokens: tokens,
    }
}

#[derive(Debug, Clone)]
pub struct PlantedSequence {
    pub frames: Vec<FramePair>,
    pub bank: AnchorBank,
    pub spatial_dims: (usize, usize),
    pub sounding_masks: Vec<Array2<bool>>,
}

/// `T` frames sharing one bank and a persistent sounding concept; blob
/// positions and noise are redrawn per frame.
pub fn planted_sequence(seed: u64, frames: usize, spec: &PlantedSpec) -> PlantedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).unwrap();
    let bank = planted_bank(&mut rng, spec);
    let mut out = Vec::with_capacity(frames);
    let mut masks = Vec::with_capacity(frames);
    for _ in 0..frames {
        let sounding = rect(&mut rng, spec.height, spec.width, None);
        let silent = rect(&mut rng, spec.height, spec.width, Some(&sounding));
        let image = image_features(&mut rng, bank.image_anchors(), &sounding, &silent, &noise);
        let (audio, _) = audio_features(&mut rng, bank.audio_anchors(), spec.n_tokens, &noise);
        out.push(FramePair {
            audio: FeatureMatrix::new(Modality::Audio, audio).unwrap(),
            image: FeatureMatrix::new(Modality::Image, image).unwrap(),
        });
        masks.push(sounding);
    }
    PlantedSequence {
        frames: out,
        bank,
        spatial_dims: (spec.height, spec.width),
        sounding_masks: masks,
    }
}

/// Rank-1 non-negative matrix `a bᵀ` with `a ∈ [0.2, 0.8]^rows` (reachable by
/// a sigmoid activation) and `b ∈ [0.5, 1.5]^cols`.
pub fn rank_one(seed: u64, rows: usize, cols: usize, modality: Modality) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Array1<f64> = (0..rows).map(|_| rng.gen_range(0.2..0.8)).collect();
    let b: Array1<f64> = (0..cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    let x = Array::from_shape_fn((rows, cols), |(r, c)| a[r] * b[c]);
    FeatureMatrix::new(modality, x).unwrap()
}

/// Writes planted problems as an on-disk dataset, one directory per sample
/// (`planted-<seed>/`), and returns the manifest path. Paths in the manifest
/// are relative to `dir`.
pub fn write_planted_dataset(dir: &Path, seeds: &[u64], spec: &PlantedSpec) -> Result<PathBuf> {
    let mut samples = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let p = planted_problem(seed, spec);
        let id = format!("planted-{seed}");
        let sub = dir.join(&id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_matrix(sub.join("image.tensor"), p.problem.image.values())?;
        write_matrix(sub.join("audio.tensor"), p.problem.audio.values())?;
        write_anchor_bank(sub.join("anchors.bank"), &p.problem.bank)?;
        write_matrix(
            sub.join("gt.tensor"),
            &p.sounding_mask.mapv(|b| f64::from(u8::from(b))),
        )?;
        let rel = PathBuf::from(&id);
        samples.push(ManifestSample {
            sample_id: id,
            image_features_path: rel.join("image.tensor"),
            audio_features_path: rel.join("audio.tensor"),
            anchor_bank_path: rel.join("anchors.bank"),
            ground_truth_mask_path: Some(rel.join("gt.tensor")),
            gt_class_label: Some(PLANTED_LABELS[SHARED_CONCEPT].to_owned()),
            frames: Vec::new(),
            spatial_dims: [spec.height, spec.width],
        });
    }
    let path = dir.join("manifest.json");
    Manifest::new(samples).save(&path)?;
    Ok(path)
}
