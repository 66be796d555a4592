//! Masks from decompositions and the open-vocabulary segmenter boundary.
//!
//! A [`Segmenter`] receives the image factors `V_I` (one row per factor) and
//! returns one soft mask per factor; the pipeline keeps mask `k*`. The
//! built-in [`StubSegmenter`] assigns each patch to its nearest factor. Real
//! segmenters run out of process and speak a line-delimited JSON protocol,
//! see [`JsonLinesSegmenter`].

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::semantics::{cosine, AnchorBank};
use crate::solver::DecompositionResult;
use crate::tensorio::{FeatureMatrix, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    ActivationRow,
    SegmenterOutput,
}

/// H × W scores in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    values: Array2<f64>,
    source: MaskSource,
}

impl SoftMask {
    pub fn new(values: Array2<f64>, source: MaskSource) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(SoftMask { values, source })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Bilinear resampling with corner alignment: output corners take the
    /// input corner values exactly.
    pub fn upsample_bilinear(&self, height: usize, width: usize) -> SoftMask {
        let (h, w) = self.dims();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            if n_out <= 1 || n_in <= 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        };
        let src = &self.values;
        let out = Array2::from_shape_fn((height, width), |(r, c)| {
            let (r0, r1, fy) = coord(r, height, h);
            let (c0, c1, fx) = coord(c, width, w);
            let top = src[[r0, c0]] * (1.0 - fx) + src[[r0, c1]] * fx;
            let bottom = src[[r1, c0]] * (1.0 - fx) + src[[r1, c1]] * fx;
            (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
        });
        SoftMask {
            values: out,
            source: self.source,
        }
    }
}

/// Column `k_star` of the image activations, reshaped row-major to H × W.
pub fn activation_mask(
    image_activations: &Array2<f64>,
    k_star: usize,
    spatial_dims: (usize, usize),
) -> Result<SoftMask> {
    let (h, w) = spatial_dims;
    ensure_dims!(
        image_activations.nrows() == h * w,
        "{} activation rows cannot be shaped {h}x{w}",
        image_activations.nrows()
    );
    ensure_dims!(
        k_star < image_activations.ncols(),
        "k* = {k_star} but only {} factors",
        image_activations.ncols()
    );
    let col = image_activations.column(k_star).to_owned();
    let values = col
        .into_shape_with_order((h, w))
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    SoftMask::new(values, MaskSource::ActivationRow)
}

pub fn result_activation_mask(
    result: &DecompositionResult,
    spatial_dims: (usize, usize),
) -> Result<SoftMask> {
    activation_mask(
        &result.state.image.activations(),
        result.k_star,
        spatial_dims,
    )
}

/// `value ≥ threshold` is foreground.
pub fn binarize(mask: &SoftMask, threshold: f64) -> Result<Array2<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold {threshold} not in (0, 1)"
        )));
    }
    Ok(mask.values.mapv(|v| v >= threshold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterPrompt {
    /// K × C_I, rows of `V_I`.
    pub factors: Array2<f64>,
    pub k_star: usize,
}

impl SegmenterPrompt {
    pub fn new(factors: Array2<f64>, k_star: usize) -> Result<Self> {
        if factors.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(
                "prompt factors must be non-negative".into(),
            ));
        }
        ensure_dims!(
            k_star < factors.nrows(),
            "k* = {k_star} but {} factors",
            factors.nrows()
        );
        Ok(SegmenterPrompt { factors, k_star })
    }

    pub fn from_result(result: &DecompositionResult) -> Result<Self> {
        Self::new(result.state.image.factors.clone(), result.k_star)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegmenterInput<'a> {
    pub sample_id: &'a str,
    pub image_features: &'a FeatureMatrix,
    pub spatial_dims: (usize, usize),
    /// Path forwarded to external segmenters, which read the image themselves.
    pub image_path: Option<&'a Path>,
}

pub trait Segmenter {
    /// One mask per factor, in factor order.
    fn prompt(
        &mut self,
        prompt: &SegmenterPrompt,
        input: &SegmenterInput<'_>,
    ) -> Result<Vec<SoftMask>>;
}

/// Index of the factor with the highest cosine to each token. Ties, and
/// tokens or factors of zero norm, resolve to the lowest index.
pub fn nearest_factor(features: &Array2<f64>, factors: &Array2<f64>) -> Result<Vec<usize>> {
    ensure_dims!(
        features.ncols() == factors.ncols(),
        "features have {} channels, factors {}",
        features.ncols(),
        factors.ncols()
    );
    ensure_dims!(factors.nrows() >= 1, "no factors");
    Ok(features
        .axis_iter(Axis(0))
        .map(|x| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (k, v) in factors.axis_iter(Axis(0)).enumerate() {
                let score = cosine(x, v).unwrap_or(0.0);
                if score > best_score {
                    best = k;
                    best_score = score;
                }
            }
            best
        })
        .collect())
}

/// Deterministic in-process stand-in: one-hot nearest-factor masks at the
/// patch-grid resolution. The K masks partition the grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSegmenter;

impl Segmenter for StubSegmenter {
    fn prompt(
        &mut self,
        prompt: &SegmenterPrompt,
        input: &SegmenterInput<'_>,
    ) -> Result<Vec<SoftMask>> {
        let (h, w) = input.spatial_dims;
        let x = input.image_features.values();
        ensure_dims!(
            x.nrows() == h * w,
            "{} patches cannot be shaped {h}x{w}",
            x.nrows()
        );
        let assign = nearest_factor(x, &prompt.factors)?;
        (0..prompt.factors.nrows())
            .map(|k| {
                let values =
                    Array2::from_shape_fn(
                        (h, w),
                        |(r, c)| {
                            if assign[r * w + c] == k {
                                1.0
                            } else {
                                0.0
                            }
                        },
                    );
                SoftMask::new(values, MaskSource::SegmenterOutput)
            })
            .collect()
    }
}

/// Request line of the segmenter protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterRequest {
    pub sample_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C_I")]
    pub c_i: usize,
    pub factors: Vec<Vec<f64>>,
    pub image_path: String,
}

/// Response line: `{"masks": [...]}` or `{"error": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SegmenterRequest {
    pub fn new(prompt: &SegmenterPrompt, input: &SegmenterInput<'_>) -> Self {
        SegmenterRequest {
            sample_id: input.sample_id.to_owned(),
            k: prompt.factors.nrows(),
            c_i: prompt.factors.ncols(),
            factors: prompt.factors.outer_iter().map(|r| r.to_vec()).collect(),
            image_path: input
                .image_path
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }
}

fn masks_from_wire(k: usize, masks: Vec<Vec<Vec<f64>>>) -> Result<Vec<SoftMask>> {
    if masks.len() != k {
        return Err(Error::Segmenter(format!(
            "expected {k} masks, got {}",
            masks.len()
        )));
    }
    masks
        .into_iter()
        .map(|rows| {
            let h = rows.len();
            let w = rows.first().map_or(0, Vec::len);
            if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
                return Err(Error::Segmenter("mask is empty or ragged".into()));
            }
            let values = Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
                .map_err(|e| Error::Segmenter(e.to_string()))?;
            SoftMask::new(values, MaskSource::SegmenterOutput)
                .map_err(|e| Error::Segmenter(e.to_string()))
        })
        .collect()
}

/// Client side of the JSON-lines protocol over any reader/writer pair. One
/// request is in flight at a time.
pub struct JsonLinesSegmenter<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> JsonLinesSegmenter<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        JsonLinesSegmenter { reader, writer }
    }

    pub fn into_parts(self) -> (R, W) {
        (self.reader, self.writer)
    }

    pub fn call(&mut self, request: &SegmenterRequest) -> Result<Vec<SoftMask>> {
        let line = serde_json::to_string(request).map_err(|e| Error::Segmenter(e.to_string()))?;
        let io = |e: std::io::Error| Error::Segmenter(format!("protocol I/O: {e}"));
        self.writer.write_all(line.as_bytes()).map_err(io)?;
        self.writer.write_all(b"\n").map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply).map_err(io)? == 0 {
            return Err(Error::Segmenter("segmenter closed its output".into()));
        }
        let response: SegmenterResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Segmenter(format!("malformed response: {e}")))?;
        match (response.masks, response.error) {
            (_, Some(err)) => Err(Error::Segmenter(err)),
            (Some(masks), None) => masks_from_wire(request.k, masks),
            (None, None) => Err(Error::Segmenter(
                "response has neither masks nor error".into(),
            )),
        }
    }
}

impl<R: BufRead, W: Write> Segmenter for JsonLinesSegmenter<R, W> {
    fn prompt(
        &mut self,
        prompt: &SegmenterPrompt,
        input: &SegmenterInput<'_>,
    ) -> Result<Vec<SoftMask>> {
        self.call(&SegmenterRequest::new(prompt, input))
    }
}

/// A child process speaking the protocol on stdin/stdout. The command line
/// is run through `sh -c`.
pub struct ExternalSegmenter {
    child: Child,
    client: Option<JsonLinesSegmenter<BufReader<ChildStdout>, ChildStdin>>,
}

impl ExternalSegmenter {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Segmenter(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(ExternalSegmenter {
            child,
            client: Some(JsonLinesSegmenter::new(BufReader::new(stdout), stdin)),
        })
    }
}

impl Segmenter for ExternalSegmenter {
    fn prompt(
        &mut self,
        prompt: &SegmenterPrompt,
        input: &SegmenterInput<'_>,
    ) -> Result<Vec<SoftMask>> {
        self.client
            .as_mut()
            .expect("client lives until drop")
            .prompt(prompt, input)
    }
}

impl Drop for ExternalSegmenter {
    fn drop(&mut self) {
        // closing stdin asks the server to exit
        drop(self.client.take());
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub index: usize,
    pub label: String,
    pub score: f64,
}

/// Label of the image anchor closest (by cosine) to the sounding factor.
pub fn classify_sounding_factor(
    v_star: ArrayView1<'_, f64>,
    bank: &AnchorBank,
) -> Result<Classification> {
    let anchors = bank.unit_anchors(Modality::Image);
    ensure_dims!(
        v_star.len() == anchors.ncols(),
        "factor has {} channels, image anchors {}",
        v_star.len(),
        anchors.ncols()
    );
    let norm = v_star.dot(&v_star).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate("sounding factor has zero norm".into()));
    }
    let scores = anchors.dot(&v_star) / norm;
    let mut index = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = j;
        }
    }
    Ok(Classification {
        index,
        label: bank.labels()[index].clone(),
        score: scores[index],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    #[test]
    fn reshape_column() {
        let u = array![[0.3, 0.9], [0.3, 0.1], [0.3, 0.1], [0.3, 0.9]];
        let m = activation_mask(&u, 1, (2, 2)).unwrap();
        assert_eq!(m.values(), &array![[0.9, 0.1], [0.1, 0.9]]);
        assert_eq!(m.source(), MaskSource::ActivationRow);
        let c = activation_mask(&u, 0, (2, 2)).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.3));
        assert!(activation_mask(&u, 0, (3, 2)).is_err());
        assert!(activation_mask(&u, 2, (2, 2)).is_err());
    }

    #[test]
    fn bilinear_matches_closed_form() {
        let src = array![[0.1, 0.7], [0.4, 0.9]];
        let m = SoftMask::new(src.clone(), MaskSource::ActivationRow).unwrap();
        let up = m.upsample_bilinear(4, 4);
        assert_eq!(up.values()[[0, 0]], 0.1);
        assert_eq!(up.values()[[0, 3]], 0.7);
        assert_eq!(up.values()[[3, 0]], 0.4);
        assert_eq!(up.values()[[3, 3]], 0.9);
        for r in 0..4 {
            for c in 0..4 {
                let (y, x) = (r as f64 / 3.0, c as f64 / 3.0);
                let f = src[[0, 0]] * (1.0 - y) * (1.0 - x)
                    + src[[0, 1]] * (1.0 - y) * x
                    + src[[1, 0]] * y * (1.0 - x)
                    + src[[1, 1]] * y * x;
                assert_relative_eq!(up.values()[[r, c]], f, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn binarize_threshold_rule() {
        let m = SoftMask::new(array![[0.2, 0.5], [0.35, 0.9]], MaskSource::ActivationRow).unwrap();
        assert_eq!(
            binarize(&m, 0.5).unwrap(),
            array![[false, true], [false, true]]
        );
        assert_eq!(
            binarize(&m, 0.3).unwrap(),
            array![[false, true], [true, true]]
        );
        assert!(binarize(&m, 0.0).is_err());
        assert!(binarize(&m, 1.0).is_err());
    }

    fn features(rows: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(Modality::Image, rows).unwrap()
    }

    #[test]
    fn stub_single_factor_is_all_ones() {
        let x = features(Array2::ones((6, 3)));
        let prompt = SegmenterPrompt::new(array![[1.0, 0.0, 2.0]], 0).unwrap();
        let input = SegmenterInput {
            sample_id: "s",
            image_features: &x,
            spatial_dims: (2, 3),
            image_path: None,
        };
        let masks = StubSegmenter.prompt(&prompt, &input).unwrap();
        assert_eq!(masks.len(), 1);
        assert!(masks[0].values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stub_assigns_nearest_factor() {
        let x = features(array![[1.0, 0.0], [0.0, 1.0], [0.9, 0.1], [0.0, 0.0]]);
        let prompt = SegmenterPrompt::new(array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        let input = SegmenterInput {
            sample_id: "s",
            image_features: &x,
            spatial_dims: (2, 2),
            image_path: None,
        };
        let masks = StubSegmenter.prompt(&prompt, &input).unwrap();
        // the zero token ties at cosine 0 and goes to factor 0
        assert_eq!(masks[0].values(), &array![[1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(masks[1].values(), &array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn json_lines_client_round_trips_bit_exactly() {
        let masks = vec![
            vec![vec![0.1f64, 0.2], vec![1.0 / 3.0, 0.0]],
            vec![
                vec![f64::MIN_POSITIVE, 1.0],
                vec![0.7, 0.123_456_789_012_345_68],
            ],
        ];
        let reply = serde_json::to_string(&SegmenterResponse {
            masks: Some(masks.clone()),
            error: None,
        })
        .unwrap()
            + "\n";
        let x = features(Array2::ones((4, 3)));
        let prompt = SegmenterPrompt::new(array![[1.0, 0.5, 0.25], [0.0, 2.0, 0.1]], 0).unwrap();
        let input = SegmenterInput {
            sample_id: "clip-7",
            image_features: &x,
            spatial_dims: (2, 2),
            image_path: Some(Path::new("img/clip-7.tensor")),
        };
        let mut client = JsonLinesSegmenter::new(Cursor::new(reply.into_bytes()), Vec::new());
        let got = client.prompt(&prompt, &input).unwrap();
        for (m, want) in got.iter().zip(&masks) {
            let flat: Vec<u64> = m.values().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = want.iter().flatten().map(|v| v.to_bits()).collect();
            assert_eq!(flat, want);
        }
        let (_, written) = client.into_parts();
        let text = String::from_utf8(written).unwrap();
        assert!(text.ends_with('\n') && text.matches('\n').count() == 1);
        let req: serde_json::Value = serde_json::from_str(text.trim_end()).unwrap();
        assert_eq!(req["sample_id"], "clip-7");
        assert_eq!(req["K"], 2);
        assert_eq!(req["C_I"], 3);
        assert_eq!(req["factors"][1][1], 2.0);
        assert_eq!(req["image_path"], "img/clip-7.tensor");
    }

    #[test]
    fn json_lines_client_errors() {
        let x = features(Array2::ones((4, 1)));
        let prompt = SegmenterPrompt::new(array![[1.0], [2.0]], 0).unwrap();
        let input = SegmenterInput {
            sample_id: "s",
            image_features: &x,
            spatial_dims: (2, 2),
            image_path: None,
        };
        for reply in [
            "{\"error\":\"model not loaded\"}\n",
            "not json\n",
            "{\"masks\":[[[0.5]]]}\n",
            "{\"masks\":[[[0.5]],[[1.5]]]}\n",
            "{\"masks\":[[[0.5,0.1],[0.2]],[[0.5]]]}\n",
            "",
        ] {
            let mut client =
                JsonLinesSegmenter::new(Cursor::new(reply.as_bytes().to_vec()), Vec::new());
            assert!(
                matches!(client.prompt(&prompt, &input), Err(Error::Segmenter(_))),
                "reply {reply:?}"
            );
        }
    }

    fn bank() -> AnchorBank {
        AnchorBank::new(
            vec!["dog".into(), "piano".into(), "car".into()],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            array![[1.0], [1.0], [1.0]],
        )
        .unwrap()
    }

    #[test]
    fn classify_cases() {
        let b = bank();
        let c = classify_sounding_factor(array![1.0, 0.0, 0.0].view(), &b).unwrap();
        assert_eq!(c.label, "dog");
        assert_eq!(c.score, 1.0);
        let orth = AnchorBank::new(
            vec!["a".into(), "b".into()],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            array![[1.0], [1.0]],
        )
        .unwrap();
        let c = classify_sounding_factor(array![0.0, 0.0, 3.0].view(), &orth).unwrap();
        assert_eq!((c.index, c.score), (0, 0.0));
        assert!(matches!(
            classify_sounding_factor(array![0.0, 0.0, 0.0].view(), &b),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn classify_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let anchors = Array::from_shape_simple_fn((7, 5), || rng.gen_range(0.0..1.0));
        let b = AnchorBank::new(
            (0..7).map(|i| format!("w{i}")).collect(),
            anchors.clone(),
            Array2::ones((7, 1)),
        )
        .unwrap();
        for _ in 0..20 {
            let v: ndarray::Array1<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..7 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for c in 0..5 {
                    dot += v[c] * anchors[[j, c]];
                    na += v[c] * v[c];
                    nb += anchors[[j, c]] * anchors[[j, c]];
                }
                let s = dot / (na.sqrt() * nb.sqrt());
                if s > best.1 {
                    best = (j, s);
                }
            }
            let c = classify_sounding_factor(v.view(), &b).unwrap();
            assert_eq!(c.index, best.0);
            assert_relative_eq!(c.score, best.1, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn stub_masks_partition_grid(
            vals in prop::collection::vec(0.0f64..1.0, 12 * 3),
            facs in prop::collection::vec(0.0f64..1.0, 4 * 3),
        ) {
            let x = features(Array2::from_shape_vec((12, 3), vals).unwrap());
            let prompt = SegmenterPrompt::new(Array2::from_shape_vec((4, 3), facs).unwrap(), 0).unwrap();
            let input = SegmenterInput { sample_id: "p", image_features: &x, spatial_dims: (3, 4), image_path: None };
            let masks = StubSegmenter.prompt(&prompt, &input).unwrap();
            for r in 0..3 {
                for c in 0..4 {
                    let total: f64 = masks.iter().map(|m| m.values()[[r, c]]).sum();
                    prop_assert_eq!(total, 1.0);
                }
            }
        }

        #[test]
        fn classification_scale_invariant(
            v in prop::collection::vec(0.01f64..1.0, 3),
            lambda in 0.01f64..100.0,
        ) {
            let b = bank();
            let v = ndarray::Array1::from(v);
            let a = classify_sounding_factor(v.view(), &b).unwrap();
            let s = classify_sounding_factor((&v * lambda).view(), &b).unwrap();
            prop_assert_eq!(a.index, s.index);
            prop_assert!((a.score - s.score).abs() < 1e-12);
        }
    }
}
