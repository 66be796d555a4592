//! The stub segmenter behind the JSON-lines protocol, for exercising the
//! external adapter path without a model.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::Result;
use ndarray::Array2;

use semconmf::segment::{
    Segmenter, SegmenterInput, SegmenterPrompt, SegmenterRequest, SegmenterResponse, StubSegmenter,
};
use semconmf::tensorio::read_features;
use semconmf::{Manifest, Modality};

fn answer(manifest: &Manifest, line: &str) -> std::result::Result<Vec<Vec<Vec<f64>>>, String> {
    let req: SegmenterRequest =
        serde_json::from_str(line).map_err(|e| format!("bad request: {e}"))?;
    let sample = manifest
        .sample(&req.sample_id)
        .ok_or_else(|| format!("unknown sample {:?}", req.sample_id))?;
    let rows = req.factors.len();
    if rows != req.k || req.factors.iter().any(|r| r.len() != req.c_i) {
        return Err(format!("factors are not {}x{}", req.k, req.c_i));
    }
    let factors =
        Array2::from_shape_vec((rows, req.c_i), req.factors.concat()).map_err(|e| e.to_string())?;
    let path = PathBuf::from(&req.image_path);
    let path = if req.image_path.is_empty() {
        manifest.resolve(&sample.image_features_path)
    } else {
        path
    };
    let image = read_features(&path, Modality::Image).map_err(|e| e.to_string())?;
    let prompt = SegmenterPrompt::new(factors, 0).map_err(|e| e.to_string())?;
    let [h, w] = sample.spatial_dims;
    let input = SegmenterInput {
        sample_id: &req.sample_id,
        image_features: &image,
        spatial_dims: (h, w),
        image_path: Some(&path),
    };
    let masks = StubSegmenter
        .prompt(&prompt, &input)
        .map_err(|e| e.to_string())?;
    Ok(masks
        .into_iter()
        .map(|m| m.values().outer_iter().map(|r| r.to_vec()).collect())
        .collect())
}

/// Serves requests until the input closes. Per-request failures are
/// answered with an error line.
pub fn serve(manifest: &Manifest, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match answer(manifest, &line) {
            Ok(masks) => SegmenterResponse {
                masks: Some(masks),
                error: None,
            },
            Err(e) => SegmenterResponse {
                masks: None,
                error: Some(e),
            },
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
