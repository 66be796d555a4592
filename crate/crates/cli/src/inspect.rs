use std::fmt;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use semconmf::tensorio::read_tensor;

use crate::output::{self, ResultRecord};

/// The requested result does not exist.
#[derive(Debug)]
pub struct NotFound(pub String);

impl fmt::Display for NotFound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not found: {}", self.0)
    }
}

impl std::error::Error for NotFound {}

#[derive(Debug, Clone)]
pub struct InspectJob {
    pub results: PathBuf,
    pub sample: String,
    /// Lowest seed present when absent.
    pub seed: Option<u64>,
    /// Defaults to `<seed dir>/inspect`.
    pub out: Option<PathBuf>,
    pub png_scale: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectOutput {
    pub dir: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub table: PathBuf,
}

/// Per-factor heatmaps of `U_I` and the factor × anchor cosine table.
pub fn run(job: &InspectJob) -> Result<InspectOutput> {
    let seeds = output::seeds_present(&job.results, &job.sample)?;
    let seed = match job.seed {
        Some(s) if seeds.contains(&s) => s,
        Some(s) => bail!(NotFound(format!(
            "sample {:?} seed {s} in {}",
            job.sample,
            job.results.display()
        ))),
        None => *seeds.first().ok_or_else(|| {
            NotFound(format!(
                "sample {:?} in {}",
                job.sample,
                job.results.display()
            ))
        })?,
    };
    let dir = output::seed_dir(&job.results, &job.sample, seed);
    let record_path = dir.join(output::RESULT_FILE);
    let activations_path = dir.join(output::IMAGE_ACTIVATIONS);
    for p in [&record_path, &activations_path] {
        if !p.is_file() {
            bail!(
                "incomplete result in {}: {} is missing",
                dir.display(),
                p.display()
            );
        }
    }
    let record: ResultRecord = output::read_json(&record_path)?;
    let u = read_tensor(&activations_path)?.to_matrix()?;
    let [h, w] = record.spatial_dims;
    if u.nrows() != h * w {
        bail!(
            "incomplete result in {}: activations do not match {h}x{w}",
            dir.display()
        );
    }

    let out = job.out.clone().unwrap_or_else(|| dir.join("inspect"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut heatmaps = Vec::with_capacity(u.ncols());
    for k in 0..u.ncols() {
        let map = u
            .column(k)
            .to_owned()
            .into_shape_with_order((h, w))
            .context("reshaping activations")?;
        let path = out.join(format!("factor_{k}.png"));
        output::write_png(&path, &map, job.png_scale)?;
        heatmaps.push(path);
    }

    let table = out.join("descriptors.csv");
    let mut csv =
        csv::Writer::from_path(&table).with_context(|| format!("writing {}", table.display()))?;
    let d = &record.descriptors;
    let mut header = vec![
        "modality".to_owned(),
        "factor".to_owned(),
        "is_k_star".to_owned(),
        "divergence".to_owned(),
    ];
    header.extend(d.labels.iter().cloned());
    csv.write_record(&header)?;
    for (modality, rows) in [("image", &d.image), ("audio", &d.audio)] {
        for (k, row) in rows.iter().enumerate() {
            let mut line = vec![
                modality.to_owned(),
                k.to_string(),
                (k == record.k_star).to_string(),
                d.divergence[k].to_string(),
            ];
            line.extend(row.iter().map(f64::to_string));
            csv.write_record(&line)?;
        }
    }
    csv.flush()?;
    Ok(InspectOutput {
        dir: out,
        heatmaps,
        table,
    })
}
