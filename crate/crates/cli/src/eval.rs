use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::Serialize;

use semconmf::metrics::{MetricReport, SampleMetrics, SemanticAccumulator, Summary};
use semconmf::segment::{binarize, MaskSource, SoftMask};
use semconmf::tensorio::read_tensor;
use semconmf::Manifest;

use crate::output::{self, ResultRecord};

#[derive(Debug, Clone)]
pub struct EvalJob {
    pub results: PathBuf,
    pub manifest: PathBuf,
    pub beta_sq: f64,
    pub threshold: f64,
    /// Defaults to `<results>/eval`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Excluded {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: MetricReport,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mask_iou: Option<Summary>,
    pub mean_iou: Option<Summary>,
    pub f_score: Option<Summary>,
    pub m_ap: Option<Summary>,
    pub semantic_miou: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceReport {
    pub source: MaskSource,
    pub per_seed: Vec<SeedReport>,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub beta_sq: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub excluded: Vec<Excluded>,
    pub sources: Vec<SourceReport>,
}

struct Scored {
    metrics: SampleMetrics,
    pred: Array2<bool>,
    pred_label: Option<String>,
}

struct Truth {
    sample_id: String,
    mask: Array2<bool>,
    label: Option<String>,
}

const SOURCES: [(MaskSource, &str); 2] = [
    (MaskSource::ActivationRow, output::ACTIVATION_MASK),
    (MaskSource::SegmenterOutput, output::SEGMENTER_MASK),
];

fn load_mask(path: &Path, source: MaskSource) -> Result<SoftMask> {
    let m = read_tensor(path)?.to_matrix()?;
    Ok(SoftMask::new(m.mapv(|v| v.clamp(0.0, 1.0)), source)?)
}

fn score(
    dir: &Path,
    truth: &Truth,
    source: MaskSource,
    stem: &str,
    job: &EvalJob,
) -> Result<Scored> {
    let mask = load_mask(&dir.join(format!("{stem}.tensor")), source)?;
    let (h, w) = truth.mask.dim();
    let mask = mask.upsample_bilinear(h, w);
    let pred = binarize(&mask, job.threshold)?;
    let metrics = SampleMetrics::compute(
        truth.sample_id.clone(),
        mask.values(),
        &pred,
        &truth.mask,
        job.beta_sq,
    )?;
    let record = dir.join(output::RESULT_FILE);
    let pred_label = if record.is_file() {
        Some(
            output::read_json::<ResultRecord>(&record)?
                .classification
                .label,
        )
    } else {
        None
    };
    Ok(Scored {
        metrics,
        pred,
        pred_label,
    })
}

pub fn run(job: &EvalJob) -> Result<EvalReport> {
    if !(job.beta_sq.is_finite() && job.beta_sq > 0.0) {
        bail!("--beta-sq must be positive");
    }
    if !(job.threshold > 0.0 && job.threshold < 1.0) {
        bail!("--threshold must lie in (0, 1)");
    }
    let manifest = Manifest::load(&job.manifest)?;
    let mut excluded = Vec::new();
    let mut truths = Vec::new();
    let mut seeds = BTreeSet::new();
    for sample in &manifest.samples {
        let reason = match manifest.load_ground_truth(sample) {
            Ok(None) => Some("no ground truth".to_owned()),
            Err(e) => Some(format!("ground truth unreadable: {e}")),
            Ok(Some(mask)) => {
                let present = output::seeds_present(&job.results, &sample.sample_id)?;
                if present.is_empty() {
                    Some("no results".to_owned())
                } else {
                    seeds.extend(present.iter().copied());
                    truths.push((
                        Truth {
                            sample_id: sample.sample_id.clone(),
                            mask,
                            label: sample.gt_class_label.clone(),
                        },
                        present,
                    ));
                    None
                }
            }
        };
        if let Some(reason) = reason {
            log::warn!("{}: excluded ({reason})", sample.sample_id);
            excluded.push(Excluded {
                sample_id: sample.sample_id.clone(),
                reason,
            });
        }
    }
    let seeds: Vec<u64> = seeds.into_iter().collect();

    let mut sources = Vec::new();
    for (source, stem) in SOURCES {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let mut scored = Vec::new();
            for (truth, present) in &truths {
                if !present.contains(&seed) {
                    continue;
                }
                let dir = output::seed_dir(&job.results, &truth.sample_id, seed);
                match score(&dir, truth, source, stem, job) {
                    Ok(s) => scored.push((truth, s)),
                    Err(e) => log::warn!("{} seed {seed}: skipped ({e:#})", truth.sample_id),
                }
            }
            if scored.is_empty() {
                continue;
            }
            let semantic = semantic(&scored)?;
            let samples = scored.into_iter().map(|(_, s)| s.metrics).collect();
            per_seed.push(SeedReport {
                seed,
                report: MetricReport::from_samples(samples, semantic)?,
            });
        }
        let over = |f: fn(&MetricReport) -> Option<f64>| {
            Summary::of(
                &per_seed
                    .iter()
                    .filter_map(|r| f(&r.report))
                    .collect::<Vec<_>>(),
            )
        };
        let summary = MetricSummary {
            mask_iou: over(|r| Some(r.mask_iou)),
            mean_iou: over(|r| Some(r.mean_iou)),
            f_score: over(|r| Some(r.f_score)),
            m_ap: over(|r| r.m_ap),
            semantic_miou: over(|r| r.semantic.as_ref().and_then(|s| s.mean_iou)),
        };
        sources.push(SourceReport {
            source,
            per_seed,
            summary,
        });
    }

    let report = EvalReport {
        beta_sq: job.beta_sq,
        threshold: job.threshold,
        seeds,
        excluded,
        sources,
    };
    let out = job.out.clone().unwrap_or_else(|| job.results.join("eval"));
    write_report(&out, &report)?;
    Ok(report)
}

fn semantic(scored: &[(&Truth, Scored)]) -> Result<Option<semconmf::metrics::SemanticReport>> {
    let labelled: Vec<_> = scored
        .iter()
        .filter_map(|(t, s)| Some((t, s, t.label.as_ref()?, s.pred_label.as_ref()?)))
        .collect();
    if labelled.is_empty() {
        return Ok(None);
    }
    let classes: BTreeSet<String> = labelled
        .iter()
        .flat_map(|(_, _, g, p)| [(*g).clone(), (*p).clone()])
        .collect();
    let classes: Vec<String> = classes.into_iter().collect();
    let mut acc = SemanticAccumulator::new(&classes);
    for (t, s, g, p) in labelled {
        acc.add(&s.pred, p, &t.mask, g)?;
    }
    Ok(Some(acc.report()))
}

fn source_name(s: MaskSource) -> &'static str {
    match s {
        MaskSource::ActivationRow => "activation",
        MaskSource::SegmenterOutput => "segmenter",
    }
}

#[derive(Serialize)]
struct SampleRow<'a> {
    source: &'a str,
    seed: u64,
    sample_id: &'a str,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
    mask_iou: f64,
    mean_iou: f64,
    f_score: f64,
    ap: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    source: &'a str,
    metric: &'a str,
    mean: f64,
    std: f64,
    n: usize,
}

fn summary_rows(s: &MetricSummary) -> Vec<(&'static str, Summary)> {
    [
        ("mask_iou", s.mask_iou),
        ("mean_iou", s.mean_iou),
        ("f_score", s.f_score),
        ("m_ap", s.m_ap),
        ("semantic_miou", s.semantic_miou),
    ]
    .into_iter()
    .filter_map(|(n, v)| Some((n, v?)))
    .collect()
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    output::write_json(&out.join("report.json"), report)?;
    // headers written by hand so they appear even with no rows
    let writer = |name: &str| {
        csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(out.join(name))
    };
    let mut samples = writer("per_sample.csv")?;
    let mut summary = writer("summary.csv")?;
    samples.write_record([
        "source",
        "seed",
        "sample_id",
        "tp",
        "fp",
        "fn",
        "tn",
        "mask_iou",
        "mean_iou",
        "f_score",
        "ap",
    ])?;
    summary.write_record(["source", "metric", "mean", "std", "n"])?;
    for src in &report.sources {
        let source = source_name(src.source);
        for sr in &src.per_seed {
            for m in &sr.report.per_sample {
                samples.serialize(SampleRow {
                    source,
                    seed: sr.seed,
                    sample_id: &m.sample_id,
                    tp: m.counts.tp,
                    fp: m.counts.fp,
                    fn_: m.counts.fn_,
                    tn: m.counts.tn,
                    mask_iou: m.mask_iou,
                    mean_iou: m.mean_iou,
                    f_score: m.f_score,
                    ap: m.ap,
                })?;
            }
        }
        for (metric, s) in summary_rows(&src.summary) {
            summary.serialize(SummaryRow {
                source,
                metric,
                mean: s.mean,
                std: s.std,
                n: s.n,
            })?;
        }
    }
    samples.flush()?;
    summary.flush()?;
    Ok(())
}

/// Human-readable summary, one line per source.
pub fn render(report: &EvalReport) -> String {
    let mut text = String::new();
    let fmt = |s: Option<Summary>| {
        s.map_or("n/a".to_owned(), |s| {
            format!("{:.4} ± {:.4}", s.mean, s.std)
        })
    };
    for src in &report.sources {
        let s = &src.summary;
        text += &format!(
            "{:<10} mask-IoU {}  mIoU {}  F {}  mAP {}",
            source_name(src.source),
            fmt(s.mask_iou),
            fmt(s.mean_iou),
            fmt(s.f_score),
            fmt(s.m_ap)
        );
        if s.semantic_miou.is_some() {
            text += &format!("  class-mIoU {}", fmt(s.semantic_miou));
        }
        text += &format!("  (seeds: {})\n", src.per_seed.len());
    }
    if !report.excluded.is_empty() {
        text += &format!("excluded samples: {}\n", report.excluded.len());
    }
    text
}
