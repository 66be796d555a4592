//! Full-batch gradient descent over the joint objective.
//!
//! Each iteration evaluates the objective once at the current iterate and
//! updates all four variables from that single evaluation:
//!
//! ```text
//! Ũ_A ← Ũ_A − η ∂L/∂Ũ_A        V_A ← max(0, V_A − η ∂L/∂V_A)
//! Ũ_I ← Ũ_I − η ∂L/∂Ũ_I        V_I ← max(0, V_I − η ∂L/∂V_I)
//! ```
//!
//! Frame sequences are optimised jointly; consecutive frames are coupled by
//! `R = −β_temp Σ_t [cos(V_{I,t}^{k*_t}, V_{I,t+1}^{k*_{t+1}}) + cos(V_{A,t}^{k*_t}, V_{A,t+1}^{k*_{t+1}})]`
//! with each `k*_t` re-selected every iteration.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::nmfcore::{
    self, DecompositionState, Evaluation, Gradients, LossBreakdown, ModalityGradients,
    ModalityState, ObjectiveSettings, ReconReduction,
};
use crate::semantics::{
    AnchorBank, ComponentMode, DescriptorSet, MinMode, PenaltyKind, PenaltySettings,
};
use crate::tensorio::{FeatureMatrix, FramePair, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub k: usize,
    pub beta_p: f64,
    pub beta_temp: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub penalty_kind: PenaltyKind,
    pub min_mode: MinMode,
    pub component_mode: ComponentMode,
    pub temperature: f64,
    pub recon_reduction: ReconReduction,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            k: 8,
            beta_p: 125.0,
            beta_temp: 1.0,
            learning_rate: 0.25,
            iterations: 1800,
            seed: 0,
            penalty_kind: PenaltyKind::Ce,
            min_mode: MinMode::Min,
            component_mode: ComponentMode::SoftMask,
            temperature: 1.0,
            recon_reduction: ReconReduction::Mean,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.beta_p >= 0.0 && self.beta_p.is_finite()) {
            return bad("beta_p must be non-negative");
        }
        if !(self.beta_temp >= 0.0 && self.beta_temp.is_finite()) {
            return bad("beta_temp must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            beta_p: self.beta_p,
            reduction: self.recon_reduction,
            penalty: PenaltySettings {
                kind: self.penalty_kind,
                min_mode: self.min_mode,
                component_mode: self.component_mode,
                temperature: self.temperature,
            },
        }
    }
}

/// Seed of frame `t` in a sequence; frame 0 uses the base seed.
pub fn frame_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub state: DecompositionState,
    /// Sounding factor at the final iterate.
    pub k_star: usize,
    /// `loss_trace[i]` is the objective at the iterate that step `i` updates.
    /// For sequences, frame `t` carries the temporal term of pair `(t, t+1)`,
    /// so frame totals sum to the joint objective.
    pub loss_trace: Vec<LossBreakdown>,
    /// Descriptors at the final iterate.
    pub descriptors: DescriptorSet,
    /// Seed this frame was initialised from.
    pub seed: u64,
}

impl DecompositionResult {
    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.loss_trace.last()
    }
}

fn check_frame(audio: &FeatureMatrix, image: &FeatureMatrix, bank: &AnchorBank) -> Result<()> {
    ensure_dims!(
        audio.modality() == Modality::Audio && image.modality() == Modality::Image,
        "frame inputs must be (audio, image)"
    );
    ensure_dims!(
        bank.channels(Modality::Audio) == audio.channels(),
        "audio anchors have {} channels, audio features {}",
        bank.channels(Modality::Audio),
        audio.channels()
    );
    ensure_dims!(
        bank.channels(Modality::Image) == image.channels(),
        "image anchors have {} channels, image features {}",
        bank.channels(Modality::Image),
        image.channels()
    );
    Ok(())
}

fn descend(state: &mut ModalityState, grad: &ModalityGradients, lr: f64) {
    state.logits.scaled_add(-lr, &grad.logits);
    Zip::from(&mut state.factors)
        .and(&grad.factors)
        .for_each(|v, &g| *v = (*v - lr * g).max(0.0));
}

fn step(state: &mut DecompositionState, grads: &Gradients, lr: f64) {
    descend(&mut state.audio, &grads.audio, lr);
    descend(&mut state.image, &grads.image, lr);
}

/// Temporal regulariser over consecutive frames: per-frame share of its value
/// (frame `t` holds pair `(t, t+1)`) and its gradients added into `grads`.
pub fn temporal_term(
    states: &[DecompositionState],
    k_stars: &[usize],
    beta_temp: f64,
    grads: Option<&mut [Gradients]>,
) -> Vec<f64> {
    assert_eq!(states.len(), k_stars.len());
    let mut shares = vec![0.0; states.len()];
    let mut grads = grads;
    for t in 0..states.len().saturating_sub(1) {
        for m in [Modality::Image, Modality::Audio] {
            let a = states[t].modality(m).factors.row(k_stars[t]);
            let b = states[t + 1].modality(m).factors.row(k_stars[t + 1]);
            let (c, ga, gb) = cosine_with_grads(a, b);
            shares[t] -= beta_temp * c;
            if let Some(g) = grads.as_deref_mut() {
                g[t].modality_mut(m)
                    .factors
                    .row_mut(k_stars[t])
                    .scaled_add(-beta_temp, &ga);
                g[t + 1]
                    .modality_mut(m)
                    .factors
                    .row_mut(k_stars[t + 1])
                    .scaled_add(-beta_temp, &gb);
            }
        }
    }
    shares
}

/// `cos(a, b)` and its gradients; zero (with zero gradients) if either
/// vector vanishes.
fn cosine_with_grads(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> (f64, Array1<f64>, Array1<f64>) {
    let na2 = a.dot(&a);
    let nb2 = b.dot(&b);
    if na2 == 0.0 || nb2 == 0.0 {
        return (0.0, Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let c = a.dot(&b) / (na * nb);
    let ga = &b / (na * nb) - &a * (c / na2);
    let gb = &a / (na * nb) - &b * (c / nb2);
    (c, ga, gb)
}

/// Joint objective of a frame sequence with all gradients. Per-frame
/// breakdowns include that frame's temporal share.
pub fn sequence_loss_gradients(
    states: &[DecompositionState],
    frames: &[FramePair],
    bank: &AnchorBank,
    config: &SolverConfig,
) -> Result<Vec<Evaluation>> {
    ensure_dims!(
        states.len() == frames.len(),
        "{} states for {} frames",
        states.len(),
        frames.len()
    );
    let settings = config.objective();
    let mut evals = states
        .iter()
        .zip(frames)
        .map(|(s, f)| nmfcore::loss_gradients(s, &f.audio, &f.image, bank, &settings))
        .collect::<Result<Vec<_>>>()?;
    if states.len() > 1 && config.beta_temp != 0.0 {
        let k_stars: Vec<usize> = evals.iter().map(|e| e.penalty.k_star).collect();
        let mut grads: Vec<Gradients> = evals.iter().map(|e| e.gradients.clone()).collect();
        let shares = temporal_term(states, &k_stars, config.beta_temp, Some(&mut grads));
        for ((e, g), share) in evals.iter_mut().zip(grads).zip(shares) {
            e.gradients = g;
            e.loss = LossBreakdown::new(
                e.loss.recon_audio,
                e.loss.recon_image,
                config.beta_p,
                e.loss.penalty,
                share,
            );
        }
    }
    Ok(evals)
}

/// Decomposes one audio/image pair.
pub fn decompose(
    audio: &FeatureMatrix,
    image: &FeatureMatrix,
    bank: &AnchorBank,
    config: &SolverConfig,
) -> Result<DecompositionResult> {
    let frame = FramePair {
        audio: audio.clone(),
        image: image.clone(),
    };
    let mut results = decompose_sequence(std::slice::from_ref(&frame), bank, config)?;
    Ok(results.remove(0))
}

/// Jointly decomposes `T` frames. Frame `t` is initialised from
/// [`frame_seed`]`(config.seed, t)`; with `β_temp = 0` this is exactly `T`
/// independent [`decompose`] calls with those seeds.
pub fn decompose_sequence(
    frames: &[FramePair],
    bank: &AnchorBank,
    config: &SolverConfig,
) -> Result<Vec<DecompositionResult>> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty frame sequence".into()));
    }
    for f in frames {
        check_frame(&f.audio, &f.image, bank)?;
    }
    let seeds: Vec<u64> = (0..frames.len())
        .map(|t| frame_seed(config.seed, t))
        .collect();
    let mut states = frames
        .iter()
        .zip(&seeds)
        .map(|(f, &seed)| {
            nmfcore::init_state(
                f.audio.rows(),
                f.image.rows(),
                f.audio.channels(),
                f.image.channels(),
                config.k,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut traces = vec![Vec::with_capacity(config.iterations); frames.len()];

    for iteration in 0..config.iterations {
        let evals = sequence_loss_gradients(&states, frames, bank, config)?;
        check_finite(&evals, iteration)?;
        for ((state, eval), trace) in states.iter_mut().zip(&evals).zip(traces.iter_mut()) {
            trace.push(eval.loss);
            step(state, &eval.gradients, config.learning_rate);
        }
    }

    let finals = sequence_loss_gradients(&states, frames, bank, config)?;
    check_finite(&finals, config.iterations)?;
    Ok(states
        .into_iter()
        .zip(finals)
        .zip(traces)
        .zip(seeds)
        .map(|(((state, eval), loss_trace), seed)| DecompositionResult {
            state,
            k_star: eval.penalty.k_star,
            loss_trace,
            descriptors: eval.penalty.descriptors,
            seed,
        })
        .collect())
}

fn check_finite(evals: &[Evaluation], iteration: usize) -> Result<()> {
    for (t, e) in evals.iter().enumerate() {
        if !e.loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                detail: format!("frame {t}: {:?}", e.loss),
            });
        }
    }
    Ok(())
}

/// Plain single-modality NMF with the same parameterisation, initialisation
/// and update rule as the joint solver.
#[derive(Debug, Clone)]
pub struct SingleModalityResult {
    pub state: ModalityState,
    pub loss_trace: Vec<f64>,
}

pub fn decompose_single(x: &FeatureMatrix, config: &SolverConfig) -> Result<SingleModalityResult> {
    config.validate()?;
    let mut state =
        ModalityState::init(x.rows(), x.channels(), config.k, config.seed, x.modality());
    let mut loss_trace = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let (loss, grads) =
            nmfcore::reconstruction_gradients(x.values(), &state, config.recon_reduction)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                detail: format!("{} reconstruction loss {loss}", x.modality().as_str()),
            });
        }
        loss_trace.push(loss);
        descend(&mut state, &grads, config.learning_rate);
    }
    Ok(SingleModalityResult { state, loss_trace })
}
