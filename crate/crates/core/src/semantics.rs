//! Semantic components, anchor descriptors and the cross-modal penalty.
//!
//! For factor `k` of a modality with features `X` (N × C) and activations
//! `U` (N × K), the semantic component is the activation-weighted average
//! `C^k = (1/N) Σ_n U[n,k] X[n,:]`. Its descriptor is the vector of cosine
//! similarities with the J anchors of that modality. Image and audio
//! descriptors live in the same J-dimensional space, so they can be compared
//! directly: the penalty is the divergence between `softmax(D_I^k / τ)` and
//! `softmax(D_A^k / τ)`, minimised over `k`. The minimising index is the
//! sounding factor `k*`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::tensorio::{clamp_nonneg, Modality};

/// Paired per-modality anchors: row `j` of both matrices embeds `labels[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    labels: Vec<String>,
    image: Array2<f64>,
    audio: Array2<f64>,
    image_unit: Array2<f64>,
    audio_unit: Array2<f64>,
}

impl AnchorBank {
    /// Anchors must be finite, non-negative and have non-zero rows.
    pub fn new(labels: Vec<String>, image: Array2<f64>, audio: Array2<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBank);
        }
        ensure_dims!(
            image.nrows() == labels.len() && audio.nrows() == labels.len(),
            "{} labels but {} image / {} audio anchors",
            labels.len(),
            image.nrows(),
            audio.nrows()
        );
        for (m, modality) in [(&image, Modality::Image), (&audio, Modality::Audio)] {
            if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{} anchors must be finite and non-negative",
                    modality.as_str()
                )));
            }
        }
        let image_unit = unit_rows(&image, Modality::Image)?;
        let audio_unit = unit_rows(&audio, Modality::Audio)?;
        Ok(AnchorBank {
            labels,
            image,
            audio,
            image_unit,
            audio_unit,
        })
    }

    /// Clamps negative entries first, the same rule applied to features.
    pub fn from_raw(labels: Vec<String>, image: &Array2<f64>, audio: &Array2<f64>) -> Result<Self> {
        Self::new(labels, clamp_nonneg(image)?, clamp_nonneg(audio)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn image_anchors(&self) -> &Array2<f64> {
        &self.image
    }

    pub fn audio_anchors(&self) -> &Array2<f64> {
        &self.audio
    }

    pub fn anchors(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Image => &self.image,
            Modality::Audio => &self.audio,
        }
    }

    /// L2-normalised anchor rows.
    pub fn unit_anchors(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Image => &self.image_unit,
            Modality::Audio => &self.audio_unit,
        }
    }

    pub fn channels(&self, modality: Modality) -> usize {
        self.anchors(modality).ncols()
    }
}

fn unit_rows(m: &Array2<f64>, modality: Modality) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (index, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateAnchor {
                modality: modality.as_str(),
                index,
            });
        }
        row /= norm;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    #[default]
    #[serde(alias = "crossentropy")]
    Ce,
    Kl,
}

/// How per-factor divergences are reduced into the penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinMode {
    /// Only the closest factor pair is penalised.
    #[default]
    Min,
    /// Every factor pair is penalised equally (the "no-min" ablation).
    Mean,
}

/// What plays the role of a factor's semantic component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentMode {
    /// Activation-weighted average of the input features.
    #[default]
    SoftMask,
    /// The factor row `V^k` itself (the "w/o component" ablation).
    FactorRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySettings {
    pub kind: PenaltyKind,
    pub min_mode: MinMode,
    pub component_mode: ComponentMode,
    /// Softmax temperature applied to descriptors before the divergence.
    pub temperature: f64,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        PenaltySettings {
            kind: PenaltyKind::Ce,
            min_mode: MinMode::Min,
            component_mode: ComponentMode::SoftMask,
            temperature: 1.0,
        }
    }
}

/// `C^k[c] = (1/N) Σ_n X[n,c] u_k[n]`.
pub fn semantic_component(x: ArrayView2<'_, f64>, u_k: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    ensure_dims!(
        u_k.len() == x.nrows(),
        "activation column has {} entries, features have {} rows",
        u_k.len(),
        x.nrows()
    );
    Ok(x.t().dot(&u_k) / x.nrows() as f64)
}

/// All K components at once: `Uᵀ X / N`, K × C.
pub fn semantic_components(x: &Array2<f64>, u: &Array2<f64>) -> Result<Array2<f64>> {
    ensure_dims!(
        u.nrows() == x.nrows(),
        "activations have {} rows, features have {}",
        u.nrows(),
        x.nrows()
    );
    Ok(u.t().dot(x) / x.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Array1<f64>,
    /// Set when the component had zero norm; `values` is then all zeros.
    pub degenerate: bool,
}

/// Cosine of `component` with every row of `anchors`.
pub fn semantic_descriptor(
    component: ArrayView1<'_, f64>,
    anchors: &Array2<f64>,
) -> Result<Descriptor> {
    ensure_dims!(
        component.len() == anchors.ncols(),
        "component has {} channels, anchors have {}",
        component.len(),
        anchors.ncols()
    );
    let unit = unit_rows(anchors, Modality::Image)
        .map_err(|_| Error::Degenerate("anchor with zero norm".into()))?;
    Ok(descriptor_with_unit(component, &unit))
}

fn descriptor_with_unit(component: ArrayView1<'_, f64>, unit_anchors: &Array2<f64>) -> Descriptor {
    let norm = component.dot(&component).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Descriptor {
            values: Array1::zeros(unit_anchors.nrows()),
            degenerate: true,
        };
    }
    Descriptor {
        values: unit_anchors.dot(&component) / norm,
        degenerate: false,
    }
}

fn log_softmax(v: ArrayView1<'_, f64>, temperature: f64) -> Array1<f64> {
    let scaled = v.mapv(|x| x / temperature);
    let max = scaled.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.mapv(|x| x - lse)
}

/// A divergence value and its gradients with respect to both raw descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceEval {
    pub value: f64,
    pub grad_image: Array1<f64>,
    pub grad_audio: Array1<f64>,
}

/// Divergence between `p = softmax(d_image/τ)` and `q = softmax(d_audio/τ)`.
///
/// CE: `−Σ p log q`, gradients `−p(log q + CE)/τ` and `(q − p)/τ`.
/// KL: `Σ p (log p − log q)`, gradients `p(log p − log q − KL)/τ` and `(q − p)/τ`.
pub fn divergence(
    kind: PenaltyKind,
    d_image: ArrayView1<'_, f64>,
    d_audio: ArrayView1<'_, f64>,
    temperature: f64,
) -> DivergenceEval {
    assert_eq!(d_image.len(), d_audio.len(), "descriptor lengths differ");
    let log_p = log_softmax(d_image, temperature);
    let log_q = log_softmax(d_audio, temperature);
    let p = log_p.mapv(f64::exp);
    let q = log_q.mapv(f64::exp);
    let grad_audio = (&q - &p) / temperature;
    match kind {
        PenaltyKind::Ce => {
            let ce = -p.dot(&log_q);
            let grad_image = -(&p * &(&log_q + ce)) / temperature;
            DivergenceEval {
                value: ce,
                grad_image,
                grad_audio,
            }
        }
        PenaltyKind::Kl => {
            let diff = &log_p - &log_q;
            let kl = p.dot(&diff);
            let grad_image = (&p * &(&diff - kl)) / temperature;
            DivergenceEval {
                value: kl,
                grad_image,
                grad_audio,
            }
        }
    }
}

/// `CE(softmax(d_image), softmax(d_audio))`.
pub fn descriptor_cross_entropy(d_image: ArrayView1<'_, f64>, d_audio: ArrayView1<'_, f64>) -> f64 {
    divergence(PenaltyKind::Ce, d_image, d_audio, 1.0).value
}

/// `KL(softmax(d_image) ‖ softmax(d_audio))`.
pub fn descriptor_kl(d_image: ArrayView1<'_, f64>, d_audio: ArrayView1<'_, f64>) -> f64 {
    divergence(PenaltyKind::Kl, d_image, d_audio, 1.0).value
}

/// Index of the smallest value; ties go to the lowest index. NaN never wins.
pub fn select_kstar(per_factor: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in per_factor.iter().enumerate() {
        if v < per_factor[best] || per_factor[best].is_nan() && !v.is_nan() {
            best = k;
        }
    }
    best
}

/// Descriptors of every factor in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    /// K × J image descriptors.
    pub image: Array2<f64>,
    /// K × J audio descriptors.
    pub audio: Array2<f64>,
    /// Per-factor divergence (CE or KL, depending on the penalty kind).
    pub per_factor: Vec<f64>,
    pub k_star: usize,
    pub degenerate_image: Vec<bool>,
    pub degenerate_audio: Vec<bool>,
}

impl DescriptorSet {
    pub fn factors(&self) -> usize {
        self.per_factor.len()
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate_image
            .iter()
            .chain(&self.degenerate_audio)
            .any(|&d| d)
    }
}

/// Borrowed view of one modality's inputs and decision variables.
#[derive(Debug, Clone, Copy)]
pub struct ModalityView<'a> {
    pub features: &'a Array2<f64>,
    /// Activations `U = σ(Ũ)`, N × K.
    pub activations: &'a Array2<f64>,
    /// Factors `V`, K × C.
    pub factors: &'a Array2<f64>,
}

impl ModalityView<'_> {
    fn components(&self, mode: ComponentMode) -> Result<Array2<f64>> {
        match mode {
            ComponentMode::SoftMask => semantic_components(self.features, self.activations),
            ComponentMode::FactorRow => Ok(self.factors.clone()),
        }
    }
}

/// Penalty value plus what the gradient pass needs.
#[derive(Debug, Clone)]
pub struct PenaltyEval {
    /// Unweighted penalty (min or mean of the per-factor divergences).
    pub value: f64,
    pub k_star: usize,
    pub descriptors: DescriptorSet,
    image_components: Array2<f64>,
    audio_components: Array2<f64>,
}

fn descriptor_matrix(
    components: &Array2<f64>,
    unit_anchors: &Array2<f64>,
) -> (Array2<f64>, Vec<bool>) {
    let mut out = Array2::zeros((components.nrows(), unit_anchors.nrows()));
    let mut degenerate = Vec::with_capacity(components.nrows());
    for (k, c) in components.axis_iter(Axis(0)).enumerate() {
        let d = descriptor_with_unit(c, unit_anchors);
        out.row_mut(k).assign(&d.values);
        degenerate.push(d.degenerate);
    }
    (out, degenerate)
}

fn check_views(
    audio: &ModalityView<'_>,
    image: &ModalityView<'_>,
    bank: &AnchorBank,
) -> Result<()> {
    for (view, modality) in [(audio, Modality::Audio), (image, Modality::Image)] {
        let name = modality.as_str();
        ensure_dims!(
            view.activations.nrows() == view.features.nrows(),
            "{name}: activations have {} rows, features {}",
            view.activations.nrows(),
            view.features.nrows()
        );
        ensure_dims!(
            view.factors.ncols() == view.features.ncols(),
            "{name}: factors have {} channels, features {}",
            view.factors.ncols(),
            view.features.ncols()
        );
        ensure_dims!(
            view.activations.ncols() == view.factors.nrows(),
            "{name}: {} activation columns vs {} factor rows",
            view.activations.ncols(),
            view.factors.nrows()
        );
        ensure_dims!(
            bank.channels(modality) == view.features.ncols(),
            "{name}: anchors have {} channels, features {}",
            bank.channels(modality),
            view.features.ncols()
        );
    }
    ensure_dims!(
        audio.factors.nrows() == image.factors.nrows(),
        "audio has {} factors, image {}",
        audio.factors.nrows(),
        image.factors.nrows()
    );
    ensure_dims!(audio.factors.nrows() >= 1, "need at least one factor");
    Ok(())
}

/// Computes every factor's descriptors and divergence, and the reduced
/// penalty. `k_star` is always the argmin, whatever the reduction.
pub fn penalty_term(
    audio: ModalityView<'_>,
    image: ModalityView<'_>,
    bank: &AnchorBank,
    settings: &PenaltySettings,
) -> Result<PenaltyEval> {
    check_views(&audio, &image, bank)?;
    let image_components = image.components(settings.component_mode)?;
    let audio_components = audio.components(settings.component_mode)?;
    let (image_desc, degenerate_image) =
        descriptor_matrix(&image_components, bank.unit_anchors(Modality::Image));
    let (audio_desc, degenerate_audio) =
        descriptor_matrix(&audio_components, bank.unit_anchors(Modality::Audio));
    let per_factor: Vec<f64> = image_desc
        .axis_iter(Axis(0))
        .zip(audio_desc.axis_iter(Axis(0)))
        .map(|(di, da)| divergence(settings.kind, di, da, settings.temperature).value)
        .collect();
    let k_star = select_kstar(&per_factor);
    let value = match settings.min_mode {
        MinMode::Min => per_factor[k_star],
        MinMode::Mean => per_factor.iter().sum::<f64>() / per_factor.len() as f64,
    };
    Ok(PenaltyEval {
        value,
        k_star,
        descriptors: DescriptorSet {
            image: image_desc,
            audio: audio_desc,
            per_factor,
            k_star,
            degenerate_image,
            degenerate_audio,
        },
        image_components,
        audio_components,
    })
}

/// Gradients of the unweighted penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGradients {
    /// With respect to `U_A` (activations, not logits).
    pub audio_activations: Array2<f64>,
    pub image_activations: Array2<f64>,
    pub audio_factors: Array2<f64>,
    pub image_factors: Array2<f64>,
}

/// `∂cos(c, b_j)/∂c` contracted with `g`: `(B̂ᵀg)/‖c‖ − (g·d) c/‖c‖²`.
fn component_grad(
    component: ArrayView1<'_, f64>,
    descriptor: ArrayView1<'_, f64>,
    g: &Array1<f64>,
    unit_anchors: &Array2<f64>,
) -> Array1<f64> {
    let norm_sq = component.dot(&component);
    let norm = norm_sq.sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Array1::zeros(component.len());
    }
    unit_anchors.t().dot(g) / norm - &component * (g.dot(&descriptor) / norm_sq)
}

/// Backpropagates the penalty through descriptors and components. Under
/// [`MinMode::Min`] only the `k*` branch carries gradient (subgradient of the
/// min); under [`MinMode::Mean`] each factor carries weight `1/K`.
pub fn penalty_gradients(
    eval: &PenaltyEval,
    audio: ModalityView<'_>,
    image: ModalityView<'_>,
    bank: &AnchorBank,
    settings: &PenaltySettings,
) -> PenaltyGradients {
    let k_total = eval.descriptors.factors();
    let weights: Vec<f64> = match settings.min_mode {
        MinMode::Min => (0..k_total)
            .map(|k| if k == eval.k_star { 1.0 } else { 0.0 })
            .collect(),
        MinMode::Mean => vec![1.0 / k_total as f64; k_total],
    };
    let d = &eval.descriptors;
    let mut g_image_comp = Array2::zeros(eval.image_components.raw_dim());
    let mut g_audio_comp = Array2::zeros(eval.audio_components.raw_dim());
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let div = divergence(
            settings.kind,
            d.image.row(k),
            d.audio.row(k),
            settings.temperature,
        );
        g_image_comp.row_mut(k).assign(&component_grad(
            eval.image_components.row(k),
            d.image.row(k),
            &(div.grad_image * w),
            bank.unit_anchors(Modality::Image),
        ));
        g_audio_comp.row_mut(k).assign(&component_grad(
            eval.audio_components.row(k),
            d.audio.row(k),
            &(div.grad_audio * w),
            bank.unit_anchors(Modality::Audio),
        ));
    }
    match settings.component_mode {
        // C = Uᵀ X / N  ⇒  ∂L/∂U = X G_Cᵀ / N
        ComponentMode::SoftMask => PenaltyGradients {
            audio_activations: audio.features.dot(&g_audio_comp.t())
                / audio.features.nrows() as f64,
            image_activations: image.features.dot(&g_image_comp.t())
                / image.features.nrows() as f64,
            audio_factors: Array2::zeros(audio.factors.raw_dim()),
            image_factors: Array2::zeros(image.factors.raw_dim()),
        },
        ComponentMode::FactorRow => PenaltyGradients {
            audio_activations: Array2::zeros(audio.activations.raw_dim()),
            image_activations: Array2::zeros(image.activations.raw_dim()),
            audio_factors: g_audio_comp,
            image_factors: g_image_comp,
        },
    }
}

/// Cosine similarity; `None` if either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(a.dot(&b) / (na * nb))
    }
}
