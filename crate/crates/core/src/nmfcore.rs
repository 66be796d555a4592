//! Factorization state, the joint objective and its analytic gradients.
//!
//! Activations are parameterised through logits, `U = σ(Ũ)`, so they stay in
//! (0, 1) without a constraint. Factors `V` are optimised directly and kept
//! non-negative by projection in the solver.

use ndarray::{Array, Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Result};
use crate::semantics::{self, AnchorBank, ModalityView, PenaltyEval, PenaltySettings};
use crate::tensorio::{FeatureMatrix, Modality};

/// Standard deviation of the Gaussian used to initialise logits and factors.
pub const INIT_STD: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decision variables of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityState {
    /// Ũ, N × K.
    pub logits: Array2<f64>,
    /// V, K × C, non-negative.
    pub factors: Array2<f64>,
}

impl ModalityState {
    /// Seeded Gaussian draw. Each modality uses its own ChaCha stream so a
    /// single-modality run reproduces the same initial values as a joint run.
    pub fn init(rows: usize, channels: usize, k: usize, seed: u64, modality: Modality) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match modality {
            Modality::Audio => 0,
            Modality::Image => 1,
        });
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let logits = Array::from_shape_simple_fn((rows, k), || normal.sample(&mut rng));
        let factors =
            Array::from_shape_simple_fn((k, channels), || normal.sample(&mut rng).max(0.0));
        ModalityState { logits, factors }
    }

    pub fn k(&self) -> usize {
        self.factors.nrows()
    }

    pub fn activations(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionState {
    pub audio: ModalityState,
    pub image: ModalityState,
}

impl DecompositionState {
    pub fn k(&self) -> usize {
        self.image.k()
    }

    pub fn modality(&self, m: Modality) -> &ModalityState {
        match m {
            Modality::Audio => &self.audio,
            Modality::Image => &self.image,
        }
    }
}

pub fn init_state(
    n_tokens: usize,
    n_patches: usize,
    audio_channels: usize,
    image_channels: usize,
    k: usize,
    seed: u64,
) -> Result<DecompositionState> {
    for (name, v) in [
        ("N_T", n_tokens),
        ("HW", n_patches),
        ("C_A", audio_channels),
        ("C_I", image_channels),
        ("K", k),
    ] {
        ensure_dims!(v >= 1, "{name} must be at least 1");
    }
    if k > n_tokens.min(n_patches) {
        log::warn!(
            "K={k} exceeds min(N_T={n_tokens}, HW={n_patches}): over-complete factorization"
        );
    }
    Ok(DecompositionState {
        audio: ModalityState::init(n_tokens, audio_channels, k, seed, Modality::Audio),
        image: ModalityState::init(n_patches, image_channels, k, seed, Modality::Image),
    })
}

/// How the squared reconstruction error is reduced inside the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconReduction {
    /// `Σ (X − UV)²`.
    Sum,
    /// `Σ (X − UV)² / (N·C)`.
    #[default]
    Mean,
}

impl ReconReduction {
    fn scale(self, x: &Array2<f64>) -> f64 {
        match self {
            ReconReduction::Sum => 1.0,
            ReconReduction::Mean => 1.0 / x.len() as f64,
        }
    }
}

/// `Σ_ij (X − UV)²_ij`.
pub fn reconstruction_loss(x: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>) -> Result<f64> {
    check_recon_shapes(x, u, v)?;
    let approx = u.dot(v);
    Ok(Zip::from(x)
        .and(&approx)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)))
}

fn check_recon_shapes(x: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    ensure_dims!(
        u.nrows() == x.nrows() && v.ncols() == x.ncols() && u.ncols() == v.nrows(),
        "X is {:?}, U is {:?}, V is {:?}",
        x.shape(),
        u.shape(),
        v.shape()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGradients {
    /// ∂L/∂Ũ.
    pub logits: Array2<f64>,
    /// ∂L/∂V.
    pub factors: Array2<f64>,
}

impl ModalityGradients {
    pub fn zeros_like(state: &ModalityState) -> Self {
        ModalityGradients {
            logits: Array2::zeros(state.logits.raw_dim()),
            factors: Array2::zeros(state.factors.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub audio: ModalityGradients,
    pub image: ModalityGradients,
}

impl Gradients {
    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalityGradients {
        match m {
            Modality::Audio => &mut self.audio,
            Modality::Image => &mut self.image,
        }
    }
}

/// Reduced reconstruction loss of one modality with gradients
/// `∂/∂U = 2s(UV − X)Vᵀ` (then ⊙ U(1 − U) for the logits) and
/// `∂/∂V = 2s Uᵀ(UV − X)`, where `s` is the reduction scale.
pub fn reconstruction_gradients(
    x: &Array2<f64>,
    state: &ModalityState,
    reduction: ReconReduction,
) -> Result<(f64, ModalityGradients)> {
    let u = state.activations();
    check_recon_shapes(x, &u, &state.factors)?;
    let scale = reduction.scale(x);
    let residual = u.dot(&state.factors) - x;
    let loss = scale * residual.iter().map(|r| r * r).sum::<f64>();
    let grad_u = residual.dot(&state.factors.t()) * (2.0 * scale);
    let grad_v = u.t().dot(&residual) * (2.0 * scale);
    Ok((
        loss,
        ModalityGradients {
            logits: chain_sigmoid(grad_u, &u),
            factors: grad_v,
        },
    ))
}

/// Converts a gradient w.r.t. `U = σ(Ũ)` into one w.r.t. `Ũ`.
pub fn chain_sigmoid(mut grad_u: Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    Zip::from(&mut grad_u)
        .and(u)
        .for_each(|g, &s| *g *= s * (1.0 - s));
    grad_u
}

/// Components of the objective at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_audio: f64,
    pub recon_image: f64,
    /// Unweighted penalty; the objective adds `β_p · penalty`.
    pub penalty: f64,
    /// Already-weighted temporal term (may be negative).
    pub temporal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        recon_audio: f64,
        recon_image: f64,
        beta_p: f64,
        penalty: f64,
        temporal: f64,
    ) -> Self {
        LossBreakdown {
            recon_audio,
            recon_image,
            penalty,
            temporal,
            total: recon_audio + recon_image + beta_p * penalty + temporal,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_audio,
            self.recon_image,
            self.penalty,
            self.temporal,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSettings {
    pub beta_p: f64,
    pub reduction: ReconReduction,
    pub penalty: PenaltySettings,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            beta_p: 125.0,
            reduction: ReconReduction::Mean,
            penalty: PenaltySettings::default(),
        }
    }
}

/// Loss, gradients and penalty diagnostics at one iterate.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub gradients: Gradients,
    pub penalty: PenaltyEval,
}

fn views<'a>(
    x: &'a FeatureMatrix,
    state: &'a ModalityState,
    activations: &'a Array2<f64>,
) -> ModalityView<'a> {
    ModalityView {
        features: x.values(),
        activations,
        factors: &state.factors,
    }
}

/// Objective value and exact gradients for one frame (no temporal term).
pub fn loss_gradients(
    state: &DecompositionState,
    audio: &FeatureMatrix,
    image: &FeatureMatrix,
    bank: &AnchorBank,
    settings: &ObjectiveSettings,
) -> Result<Evaluation> {
    let (recon_audio, mut grad_audio) =
        reconstruction_gradients(audio.values(), &state.audio, settings.reduction)?;
    let (recon_image, mut grad_image) =
        reconstruction_gradients(image.values(), &state.image, settings.reduction)?;
    let u_audio = state.audio.activations();
    let u_image = state.image.activations();
    let audio_view = views(audio, &state.audio, &u_audio);
    let image_view = views(image, &state.image, &u_image);
    let penalty = semantics::penalty_term(audio_view, image_view, bank, &settings.penalty)?;
    if settings.beta_p != 0.0 {
        let pg =
            semantics::penalty_gradients(&penalty, audio_view, image_view, bank, &settings.penalty);
        let b = settings.beta_p;
        grad_audio
            .logits
            .scaled_add(b, &chain_sigmoid(pg.audio_activations, &u_audio));
        grad_image
            .logits
            .scaled_add(b, &chain_sigmoid(pg.image_activations, &u_image));
        grad_audio.factors.scaled_add(b, &pg.audio_factors);
        grad_image.factors.scaled_add(b, &pg.image_factors);
    }
    Ok(Evaluation {
        loss: LossBreakdown::new(
            recon_audio,
            recon_image,
            settings.beta_p,
            penalty.value,
            0.0,
        ),
        gradients: Gradients {
            audio: grad_audio,
            image: grad_image,
        },
        penalty,
    })
}

/// Objective value only.
pub fn objective(
    state: &DecompositionState,
    audio: &FeatureMatrix,
    image: &FeatureMatrix,
    bank: &AnchorBank,
    settings: &ObjectiveSettings,
) -> Result<LossBreakdown> {
    let ua = state.audio.activations();
    let ui = state.image.activations();
    let scale_a = settings.reduction.scale(audio.values());
    let scale_i = settings.reduction.scale(image.values());
    let recon_audio = scale_a * reconstruction_loss(audio.values(), &ua, &state.audio.factors)?;
    let recon_image = scale_i * reconstruction_loss(image.values(), &ui, &state.image.factors)?;
    let penalty = semantics::penalty_term(
        views(audio, &state.audio, &ua),
        views(image, &state.image, &ui),
        bank,
        &settings.penalty,
    )?;
    Ok(LossBreakdown::new(
        recon_audio,
        recon_image,
        settings.beta_p,
        penalty.value,
        0.0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn init_is_deterministic_and_nonnegative() {
        let a = init_state(4, 6, 3, 5, 2, 42).unwrap();
        let b = init_state(4, 6, 3, 5, 2, 42).unwrap();
        assert_eq!(a, b);
        let c = init_state(4, 6, 3, 5, 2, 43).unwrap();
        assert_ne!(a, c);
        assert!(a.audio.factors.iter().all(|&v| v >= 0.0));
        assert!(a.image.factors.iter().all(|&v| v >= 0.0));
        assert_eq!(a.audio.logits.shape(), &[4, 2]);
        assert_eq!(a.image.factors.shape(), &[2, 5]);
        // over-complete K is allowed
        assert!(init_state(2, 2, 1, 1, 8, 0).is_ok());
        assert!(init_state(0, 2, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn init_scale_is_small() {
        let s = init_state(50, 50, 20, 20, 8, 7).unwrap();
        let n = s.image.logits.len() as f64;
        let var = s.image.logits.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var.sqrt() - INIT_STD).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn reconstruction_hand_cases() {
        assert_eq!(
            reconstruction_loss(&array![[1.0]], &array![[1.0]], &array![[0.0]]).unwrap(),
            1.0
        );
        let u = array![[0.2, 0.7], [0.5, 0.1]];
        let v = array![[1.0, 2.0, 0.0], [0.5, 0.0, 3.0]];
        assert_eq!(reconstruction_loss(&u.dot(&v), &u, &v).unwrap(), 0.0);
        assert!(reconstruction_loss(&array![[1.0, 2.0]], &u, &v).is_err());
    }

    #[test]
    fn reconstruction_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array::from_shape_simple_fn((5, 4), || rng.gen_range(0.0..2.0));
        let u = Array::from_shape_simple_fn((5, 2), || rng.gen_range(0.0..1.0));
        let v = Array::from_shape_simple_fn((2, 4), || rng.gen_range(0.0..1.0));
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                let mut uv = 0.0f64;
                for k in 0..2 {
                    uv += u[[i, k]] * v[[k, j]];
                }
                oracle += (x[[i, j]] - uv).powi(2);
            }
        }
        assert_relative_eq!(
            reconstruction_loss(&x, &u, &v).unwrap(),
            oracle,
            max_relative = 1e-12
        );
    }

    #[test]
    fn factor_gradient_hand_derivation_3x3() {
        // U = σ(0) = 0.5 everywhere, V = I, X = diag(1, 0, 2).
        // R = UV − X = 0.5·1 − X; ∂/∂V = 2 Uᵀ R with Uᵀ = 0.5·1.
        let state = ModalityState {
            logits: Array2::zeros((3, 3)),
            factors: Array2::eye(3),
        };
        let x = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        let (_, g) = reconstruction_gradients(&x, &state, ReconReduction::Sum).unwrap();
        // column sums of R: col0 = 1.5 − 1 = 0.5, col1 = 1.5, col2 = 1.5 − 2 = −0.5
        let expected_row = array![0.5, 1.5, -0.5];
        for k in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(
                    g.factors[[k, c]],
                    2.0 * 0.5 * expected_row[c],
                    max_relative = 1e-14
                );
            }
        }
        let u = state.activations();
        let residual = u.dot(&state.factors) - &x;
        let direct = u.t().dot(&residual) * 2.0;
        assert_eq!(g.factors, direct);
    }

    #[test]
    fn exact_fit_without_penalty_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = DecompositionState {
            audio: ModalityState::init(4, 3, 2, 1, Modality::Audio),
            image: ModalityState::init(5, 4, 2, 1, Modality::Image),
        };
        let xa = FeatureMatrix::new(
            Modality::Audio,
            state.audio.activations().dot(&state.audio.factors),
        )
        .unwrap();
        let xi = FeatureMatrix::new(
            Modality::Image,
            state.image.activations().dot(&state.image.factors),
        )
        .unwrap();
        let bank = AnchorBank::new(
            vec!["a".into(), "b".into()],
            Array::from_shape_simple_fn((2, 4), || rng.gen_range(0.1..1.0)),
            Array::from_shape_simple_fn((2, 3), || rng.gen_range(0.1..1.0)),
        )
        .unwrap();
        let settings = ObjectiveSettings {
            beta_p: 0.0,
            ..Default::default()
        };
        let eval = loss_gradients(&state, &xa, &xi, &bank, &settings).unwrap();
        for g in [
            &eval.gradients.audio.logits,
            &eval.gradients.audio.factors,
            &eval.gradients.image.logits,
            &eval.gradients.image.factors,
        ] {
            assert!(g.iter().all(|v| v.abs() < 1e-15));
        }
        assert!(eval.loss.recon_audio < 1e-30 && eval.loss.recon_image < 1e-30);
    }

    #[test]
    fn breakdown_total_composition() {
        let b = LossBreakdown::new(1.0, 2.0, 10.0, 0.5, -0.25);
        assert_eq!(b.total, 1.0 + 2.0 + 5.0 - 0.25);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert_relative_eq!(sigmoid(2.0) + sigmoid(-2.0), 1.0, max_relative = 1e-15);
    }
}
