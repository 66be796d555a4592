use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use semconmf::segment::{
    classify_sounding_factor, result_activation_mask, ExternalSegmenter, Segmenter, SegmenterInput,
    SegmenterPrompt, SoftMask, StubSegmenter,
};
use semconmf::tensorio::{write_matrix, SampleInputs};
use semconmf::{
    decompose, decompose_sequence, DecompositionResult, Manifest, ManifestSample, SolverConfig,
};

use crate::output::{
    self, DescriptorTable, FrameRecord, ResultRecord, RunRecord, RunSummary, SampleStatus,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmenterSpec {
    Stub,
    External(String),
}

impl SegmenterSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SegmenterSpec::Stub => "stub",
            SegmenterSpec::External(_) => "external",
        }
    }
}

impl FromStr for SegmenterSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            _ if s == "stub" => Ok(SegmenterSpec::Stub),
            Some(("external", cmd)) if !cmd.trim().is_empty() => {
                Ok(SegmenterSpec::External(cmd.to_owned()))
            }
            _ => Err(format!(
                "expected `stub` or `external:<command>`, got {s:?}"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecomposeJob {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub config: SolverConfig,
    pub seeds: Vec<u64>,
    pub segmenter: SegmenterSpec,
    pub workers: usize,
    /// Pixel size of each mask cell in the PNG previews.
    pub png_scale: u32,
}

enum SegmenterHandle {
    Stub,
    External(Mutex<ExternalSegmenter>),
}

impl SegmenterHandle {
    fn open(spec: &SegmenterSpec) -> Result<Self> {
        Ok(match spec {
            SegmenterSpec::Stub => SegmenterHandle::Stub,
            SegmenterSpec::External(cmd) => {
                SegmenterHandle::External(Mutex::new(ExternalSegmenter::spawn(cmd)?))
            }
        })
    }

    fn prompt(
        &self,
        prompt: &SegmenterPrompt,
        input: &SegmenterInput<'_>,
    ) -> semconmf::Result<Vec<SoftMask>> {
        match self {
            SegmenterHandle::Stub => StubSegmenter.prompt(prompt, input),
            SegmenterHandle::External(m) => m
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .prompt(prompt, input),
        }
    }
}

/// Returns the number of samples that failed.
pub fn run(job: &DecomposeJob) -> Result<usize> {
    job.config.validate()?;
    if job.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    if job.workers == 0 {
        bail!("worker count must be at least 1");
    }
    let manifest = Manifest::load(&job.manifest)?;
    fs::create_dir_all(output::samples_dir(&job.out))
        .with_context(|| format!("creating {}", job.out.display()))?;
    output::write_json(
        &job.out.join("run.json"),
        &RunRecord {
            config: SolverConfig {
                seed: 0,
                ..job.config
            },
            seeds: job.seeds.clone(),
            segmenter: job.segmenter.name().to_owned(),
        },
    )?;
    let segmenter = SegmenterHandle::open(&job.segmenter)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.workers)
        .build()
        .context("building worker pool")?;
    let statuses: Vec<SampleStatus> = pool.install(|| {
        manifest
            .samples
            .par_iter()
            .map(
                |sample| match run_sample(job, &manifest, sample, &segmenter) {
                    Ok(()) => SampleStatus {
                        sample_id: sample.sample_id.clone(),
                        ok: true,
                        seeds: job.seeds.clone(),
                        error: None,
                    },
                    Err(e) => {
                        log::error!("{}: {e:#}", sample.sample_id);
                        SampleStatus {
                            sample_id: sample.sample_id.clone(),
                            ok: false,
                            seeds: Vec::new(),
                            error: Some(format!("{e:#}")),
                        }
                    }
                },
            )
            .collect()
    });
    let failed = statuses.iter().filter(|s| !s.ok).count();
    log::info!(
        "decomposed {}/{} samples",
        statuses.len() - failed,
        statuses.len()
    );
    output::write_json(
        &job.out.join("summary.json"),
        &RunSummary { samples: statuses },
    )?;
    Ok(failed)
}

fn run_sample(
    job: &DecomposeJob,
    manifest: &Manifest,
    sample: &ManifestSample,
    segmenter: &SegmenterHandle,
) -> Result<()> {
    let inputs = manifest.load_inputs(sample)?;
    let image_path = manifest.resolve(&sample.image_features_path);
    let mut outputs = Vec::with_capacity(job.seeds.len());
    // compute every seed before writing anything, so a failure leaves no
    // partial sample behind
    for &seed in &job.seeds {
        let config = SolverConfig { seed, ..job.config };
        outputs.push(run_seed(
            &config,
            sample,
            &inputs,
            &image_path,
            segmenter,
            job.segmenter.name(),
        )?);
    }
    for out in outputs {
        out.write(
            &output::seed_dir(&job.out, &sample.sample_id, out.record.seed),
            job.png_scale,
        )?;
    }
    Ok(())
}

struct SeedOutput {
    record: ResultRecord,
    key: DecompositionResult,
    activation_mask: SoftMask,
    segmenter_mask: SoftMask,
    traces: Vec<Vec<semconmf::LossBreakdown>>,
}

fn run_seed(
    config: &SolverConfig,
    sample: &ManifestSample,
    inputs: &SampleInputs,
    image_path: &Path,
    segmenter: &SegmenterHandle,
    segmenter_name: &str,
) -> Result<SeedOutput> {
    let joint = inputs.frames.len() > 1 && config.beta_temp > 0.0;
    let (results, key_frame) = if joint {
        (
            decompose_sequence(&inputs.frames, &inputs.bank, config)?,
            inputs.key_frame,
        )
    } else {
        let f = &inputs.frames[inputs.key_frame];
        (
            vec![decompose(&f.audio, &f.image, &inputs.bank, config)?],
            0,
        )
    };
    let key = &results[key_frame];
    let [h, w] = sample.spatial_dims;
    let activation_mask = result_activation_mask(key, (h, w))?;
    let prompt = SegmenterPrompt::from_result(key)?;
    let input = SegmenterInput {
        sample_id: &sample.sample_id,
        image_features: &inputs.frames[inputs.key_frame].image,
        spatial_dims: (h, w),
        image_path: Some(image_path),
    };
    let mut masks = segmenter.prompt(&prompt, &input)?;
    if masks.len() <= key.k_star {
        return Err(anyhow!(
            "segmenter returned {} masks for k* = {}",
            masks.len(),
            key.k_star
        ));
    }
    let segmenter_mask = masks.swap_remove(key.k_star);
    let classification =
        classify_sounding_factor(key.state.image.factors.row(key.k_star), &inputs.bank)?;
    let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let d = &key.descriptors;
    let (sh, sw) = segmenter_mask.dims();
    let record = ResultRecord {
        sample_id: sample.sample_id.clone(),
        seed: config.seed,
        config: *config,
        segmenter: segmenter_name.to_owned(),
        spatial_dims: sample.spatial_dims,
        frames: results
            .iter()
            .map(|r| FrameRecord {
                seed: r.seed,
                k_star: r.k_star,
                final_loss: *r.final_loss().expect("at least one iteration"),
            })
            .collect(),
        key_frame,
        k_star: key.k_star,
        classification,
        descriptors: DescriptorTable {
            labels: inputs.bank.labels().to_vec(),
            image: rows(&d.image),
            audio: rows(&d.audio),
            divergence: d.per_factor.clone(),
            degenerate_image: d.degenerate_image.clone(),
            degenerate_audio: d.degenerate_audio.clone(),
        },
        final_loss: *key.final_loss().expect("at least one iteration"),
        segmenter_mask_dims: [sh, sw],
    };
    let traces = results.iter().map(|r| r.loss_trace.clone()).collect();
    Ok(SeedOutput {
        record,
        key: results
            .into_iter()
            .nth(key_frame)
            .expect("key frame in range"),
        activation_mask,
        segmenter_mask,
        traces,
    })
}

#[derive(Serialize)]
struct TraceRow {
    frame: usize,
    iteration: usize,
    recon_audio: f64,
    recon_image: f64,
    penalty: f64,
    temporal: f64,
    total: f64,
}

impl SeedOutput {
    fn write(&self, dir: &Path, png_scale: u32) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        output::write_json(&dir.join(output::RESULT_FILE), &self.record)?;
        for (name, mask) in [
            (output::ACTIVATION_MASK, &self.activation_mask),
            (output::SEGMENTER_MASK, &self.segmenter_mask),
        ] {
            write_matrix(dir.join(format!("{name}.tensor")), mask.values())?;
            output::write_png(&dir.join(format!("{name}.png")), mask.values(), png_scale)?;
        }
        let state = &self.key.state;
        write_matrix(
            dir.join(output::IMAGE_ACTIVATIONS),
            &state.image.activations(),
        )?;
        write_matrix(
            dir.join(output::AUDIO_ACTIVATIONS),
            &state.audio.activations(),
        )?;
        write_matrix(dir.join(output::IMAGE_FACTORS), &state.image.factors)?;
        write_matrix(dir.join(output::AUDIO_FACTORS), &state.audio.factors)?;
        let path = dir.join(output::LOSS_TRACE);
        let mut csv =
            csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        for (frame, trace) in self.traces.iter().enumerate() {
            for (iteration, l) in trace.iter().enumerate() {
                csv.serialize(TraceRow {
                    frame,
                    iteration,
                    recon_audio: l.recon_audio,
                    recon_image: l.recon_image,
                    penalty: l.penalty,
                    temporal: l.temporal,
                    total: l.total,
                })?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmenter_spec_parsing() {
        assert_eq!("stub".parse::<SegmenterSpec>(), Ok(SegmenterSpec::Stub));
        assert_eq!(
            "external:python serve.py --port 0".parse::<SegmenterSpec>(),
            Ok(SegmenterSpec::External("python serve.py --port 0".into()))
        );
        assert!("external:".parse::<SegmenterSpec>().is_err());
        assert!("fcclip".parse::<SegmenterSpec>().is_err());
    }
}
