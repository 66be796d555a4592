//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semconmf::fixtures::{
    planted_problem, random_problem, rank_one, write_planted_dataset, PlantedSpec, Problem,
    SHARED_CONCEPT,
};
use semconmf::metrics::{average_precision, f_score, mask_iou, mean_iou_binary};
use semconmf::nmfcore::{
    loss_gradients, objective, DecompositionState, Gradients, ModalityState, ObjectiveSettings,
};
use semconmf::segment::{activation_mask, binarize};
use semconmf::semantics::{cosine, ComponentMode, MinMode, PenaltyKind};
use semconmf::solver::{decompose_single, sequence_loss_gradients};
use semconmf::{
    decompose, decompose_sequence, AnchorBank, DecompositionResult, FramePair, Modality,
    ReconReduction, SolverConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- gradients

const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn random_state(seed: u64, p: &Problem, k: usize) -> DecompositionState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modality = |n: usize, c: usize| ModalityState {
        logits: Array::from_shape_simple_fn((n, k), || rng.gen_range(-2.0..2.0)),
        factors: Array::from_shape_simple_fn((k, c), || rng.gen_range(0.1..1.0)),
    };
    let audio = modality(p.audio.rows(), p.audio.channels());
    let image = modality(p.image.rows(), p.image.channels());
    DecompositionState { audio, image }
}

fn params(s: &mut DecompositionState) -> [&mut Array2<f64>; 4] {
    [
        &mut s.audio.logits,
        &mut s.audio.factors,
        &mut s.image.logits,
        &mut s.image.factors,
    ]
}

fn grad_arrays(g: &Gradients) -> [&Array2<f64>; 4] {
    [
        &g.audio.logits,
        &g.audio.factors,
        &g.image.logits,
        &g.image.factors,
    ]
}

fn worst_fd_error(
    states: &[DecompositionState],
    analytic: &[Gradients],
    f: impl Fn(&[DecompositionState]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..states.len() {
        for p in 0..4 {
            for idx in ndarray::indices(grad_arrays(&analytic[t])[p].dim()) {
                let mut plus = states.to_vec();
                params(&mut plus[t])[p][idx] += FD_H;
                let mut minus = states.to_vec();
                params(&mut minus[t])[p][idx] -= FD_H;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_H);
                let a = grad_arrays(&analytic[t])[p][idx];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            }
        }
    }
    worst
}

fn gradient_fixture(seed: u64) -> Problem {
    random_problem(seed, 6, 9, 5, 7, 3)
}

fn cos(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..5 {
        let p = gradient_fixture(seed);
        let s = random_state(seed + 1000, &p, 2);
        let base = SolverConfig {
            k: 2,
            ..SolverConfig::default()
        };
        let mut variants = vec![ObjectiveSettings {
            beta_p: 0.0,
            ..base.objective()
        }];
        for kind in [PenaltyKind::Ce, PenaltyKind::Kl] {
            for min_mode in [MinMode::Min, MinMode::Mean] {
                for component_mode in [ComponentMode::SoftMask, ComponentMode::FactorRow] {
                    let c = SolverConfig {
                        penalty_kind: kind,
                        min_mode,
                        component_mode,
                        ..base
                    };
                    variants.push(c.objective());
                }
            }
        }
        for set in &variants {
            let eval = loss_gradients(&s, &p.audio, &p.image, &p.bank, set).unwrap();
            worst = worst.max(worst_fd_error(
                std::slice::from_ref(&s),
                &[eval.gradients],
                |st| {
                    objective(&st[0], &p.audio, &p.image, &p.bank, set)
                        .unwrap()
                        .total
                },
            ));
            checks += 1;
        }

        // temporal term over a two-frame sequence
        let q = gradient_fixture(seed + 500);
        let frames = vec![
            FramePair {
                audio: p.audio.clone(),
                image: p.image.clone(),
            },
            FramePair {
                audio: q.audio.clone(),
                image: q.image.clone(),
            },
        ];
        let states = vec![s.clone(), random_state(seed + 2000, &q, 2)];
        let evals = sequence_loss_gradients(&states, &frames, &p.bank, &base).unwrap();
        let ks: Vec<usize> = evals.iter().map(|e| e.penalty.k_star).collect();
        let grads: Vec<Gradients> = evals.into_iter().map(|e| e.gradients).collect();
        let set = base.objective();
        worst = worst.max(worst_fd_error(&states, &grads, |st| {
            let mut total: f64 = st
                .iter()
                .zip(&frames)
                .map(|(s, f)| {
                    objective(s, &f.audio, &f.image, &p.bank, &set)
                        .unwrap()
                        .total
                })
                .sum();
            total -= base.beta_temp
                * (cos(
                    st[0].image.factors.row(ks[0]),
                    st[1].image.factors.row(ks[1]),
                ) + cos(
                    st[0].audio.factors.row(ks[0]),
                    st[1].audio.factors.row(ks[1]),
                ));
            total
        }));
        checks += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= FD_TOL && elapsed < Duration::from_secs(10),
        format!(
            "{checks} checks, worst relative error {worst:.2e} (≤ 1e-4), {elapsed:.2?} (< 10s)"
        ),
    )
}

// --------------------------------------------------------------- decoupling

fn decoupling() -> Outcome {
    let mut mismatches = 0;
    let runs = 3;
    for seed in 0..runs {
        let p = planted_problem(seed + 40, &PlantedSpec::default());
        let config = SolverConfig {
            beta_p: 0.0,
            beta_temp: 0.0,
            seed,
            ..SolverConfig::default()
        };
        let joint =
            decompose(&p.problem.audio, &p.problem.image, &p.problem.bank, &config).unwrap();
        let audio = decompose_single(&p.problem.audio, &config).unwrap();
        let image = decompose_single(&p.problem.image, &config).unwrap();
        let traces_equal = joint.loss_trace.len() == audio.loss_trace.len()
            && joint
                .loss_trace
                .iter()
                .zip(&audio.loss_trace)
                .zip(&image.loss_trace)
                .all(|((j, a), i)| {
                    j.recon_audio.to_bits() == a.to_bits() && j.recon_image.to_bits() == i.to_bits()
                });
        if !(traces_equal && joint.state.audio == audio.state && joint.state.image == image.state) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!(
            "{} of {runs} runs bit-identical over {} iterations",
            runs - mismatches,
            SolverConfig::default().iterations
        ),
    )
}

// ------------------------------------------------------------------ planted

fn argmax(v: ArrayView1<'_, f64>) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn pixel_iou(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let (mut concept, mut blob) = (0, 0);
    for seed in 0..20 {
        let p = planted_problem(seed, &PlantedSpec::default());
        let config = SolverConfig {
            seed,
            ..SolverConfig::default()
        };
        let r: DecompositionResult =
            decompose(&p.problem.audio, &p.problem.image, &p.problem.bank, &config).unwrap();
        let k = r.k_star;
        if argmax(r.descriptors.image.row(k)) == SHARED_CONCEPT
            && argmax(r.descriptors.audio.row(k)) == SHARED_CONCEPT
        {
            concept += 1;
        }
        let mask = activation_mask(&r.state.image.activations(), k, p.spatial_dims).unwrap();
        if pixel_iou(&binarize(&mask, 0.5).unwrap(), &p.sounding_mask) >= 0.8 {
            blob += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        concept >= 18 && blob >= 16 && elapsed < Duration::from_secs(120),
        format!("k* on shared concept {concept}/20 (≥ 18), blob IoU ≥ 0.8 {blob}/20 (≥ 16), {elapsed:.2?} (< 2 min)"),
    )
}

// ------------------------------------------------------------------- rank-1

fn rank_one_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let audio = rank_one(seed, 6, 5, Modality::Audio);
        let image = rank_one(seed + 50, 9, 7, Modality::Image);
        let bank = AnchorBank::new(
            vec!["a".into(), "b".into()],
            Array2::from_shape_fn((2, 7), |(j, c)| ((j + c) % 3) as f64 + 0.1),
            Array2::from_shape_fn((2, 5), |(j, c)| ((j * 2 + c) % 4) as f64 + 0.1),
        )
        .unwrap();
        let config = SolverConfig {
            k: 1,
            seed,
            ..SolverConfig::default()
        };
        let r = decompose(&audio, &image, &bank, &config).unwrap();
        let (first, last) = (r.loss_trace[0], *r.final_loss().unwrap());
        worst = worst
            .max(last.recon_audio / first.recon_audio)
            .max(last.recon_image / first.recon_image);
    }
    outcome(
        worst < 1e-3,
        format!("worst final/initial reconstruction ratio {worst:.2e} (< 1e-3) over 5 seeds"),
    )
}

// ------------------------------------------------------------------ metrics

struct Counts {
    tp: f64,
    fp: f64,
    fn_: f64,
    tn: f64,
}

fn count(pred: &Array2<bool>, gt: &Array2<bool>) -> Counts {
    let mut c = Counts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
        tn: 0.0,
    };
    for r in 0..gt.nrows() {
        for col in 0..gt.ncols() {
            match (pred[[r, col]], gt[[r, col]]) {
                (true, true) => c.tp += 1.0,
                (true, false) => c.fp += 1.0,
                (false, true) => c.fn_ += 1.0,
                (false, false) => c.tn += 1.0,
            }
        }
    }
    c
}

fn ratio_or(num: f64, den: f64, empty: f64) -> f64 {
    if den == 0.0 {
        empty
    } else {
        num / den
    }
}

/// Threshold sweep: predict `score ≥ t` for every distinct score `t`.
fn oracle_ap(scores: &Array2<f64>, gt: &Array2<bool>) -> Option<f64> {
    let positives = gt.iter().filter(|&&g| g).count() as f64;
    if positives == 0.0 {
        return None;
    }
    let mut levels: Vec<f64> = scores.iter().copied().collect();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in levels {
        let c = count(&scores.mapv(|s| s >= t), gt);
        let recall = c.tp / positives;
        ap += (recall - prev_recall) * (c.tp / (c.tp + c.fp));
        prev_recall = recall;
    }
    Some(ap)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let density = rng.gen_range(0.05..0.95);
        let gt = Array::from_shape_simple_fn((8, 8), || rng.gen_bool(density));
        let pred = Array::from_shape_simple_fn((8, 8), || rng.gen_bool(density));
        // coarse levels force tied scores in some masks
        let levels = if i % 2 == 0 { 5 } else { 1000 };
        let scores =
            Array::from_shape_simple_fn((8, 8), || rng.gen_range(0..levels) as f64 / levels as f64);
        let c = count(&pred, &gt);
        let iou = ratio_or(c.tp, c.tp + c.fp + c.fn_, 1.0);
        let biou = ratio_or(c.tn, c.tn + c.fp + c.fn_, 1.0);
        let (p, r) = (
            ratio_or(c.tp, c.tp + c.fp, 0.0),
            ratio_or(c.tp, c.tp + c.fn_, 0.0),
        );
        let f = if c.tp + c.fp + c.fn_ == 0.0 {
            1.0
        } else {
            ratio_or(1.3 * p * r, 0.3 * p + r, 0.0)
        };
        let diffs = [
            (mask_iou(&pred, &gt).unwrap() - iou).abs(),
            (mean_iou_binary(&pred, &gt).unwrap() - (iou + biou) / 2.0).abs(),
            (f_score(&pred, &gt, 0.3).unwrap() - f).abs(),
            match (
                average_precision(&scores, &gt).unwrap(),
                oracle_ap(&scores, &gt),
            ) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            },
        ];
        worst = diffs.iter().fold(worst, |w, &d| w.max(d));
    }
    let reversed = average_precision(
        &ndarray::array![[0.1, 0.4], [0.3, 0.2]],
        &ndarray::array![[true, false], [false, false]],
    )
    .unwrap();
    outcome(
        worst <= 1e-12 && reversed == Some(0.25),
        format!("100 random 8x8 masks, worst deviation {worst:.1e} (≤ 1e-12); reversed-ranking AP {reversed:?} (= 0.25)"),
    )
}

// -------------------------------------------------------------- determinism

fn run_decompose(manifest: &Path, out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_semconmf"))
        .env("RUST_LOG", "error")
        .args(["decompose", "--manifest"])
        .arg(manifest)
        .arg("--out")
        .arg(out)
        .args(["--seed", "17", "--workers", "2"])
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_planted_dataset(dir.path(), &[1, 2, 3], &PlantedSpec::default()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !(run_decompose(&manifest, &a) && run_decompose(&manifest, &b)) {
        return outcome(false, "decompose run failed".into());
    }
    let mut identical = 0;
    for id in 1..=3 {
        let rel = format!("samples/planted-{id}/seed_17/result.json");
        match (fs::read(a.join(&rel)), fs::read(b.join(&rel))) {
            (Ok(x), Ok(y)) if x == y => identical += 1,
            _ => {}
        }
    }
    outcome(
        identical == 3,
        format!("{identical}/3 result JSON files byte-identical across two full runs"),
    )
}

// ----------------------------------------------------------------- temporal

fn temporal_effect() -> Outcome {
    let mut wins = 0;
    for seed in 0..10 {
        let p = planted_problem(200 + seed, &PlantedSpec::default());
        let frame = FramePair {
            audio: p.problem.audio.clone(),
            image: p.problem.image.clone(),
        };
        let frames = vec![frame.clone(), frame];
        let pair_cos = |beta_temp: f64| {
            let config = SolverConfig {
                seed,
                beta_temp,
                ..SolverConfig::default()
            };
            let r = decompose_sequence(&frames, &p.problem.bank, &config).unwrap();
            cosine(
                r[0].state.image.factors.row(r[0].k_star),
                r[1].state.image.factors.row(r[1].k_star),
            )
            .unwrap_or(0.0)
        };
        if pair_cos(1.0) >= pair_cos(0.0) {
            wins += 1;
        }
    }
    outcome(
        wins >= 9,
        format!("β_temp = 1 at least as aligned as β_temp = 0 in {wins}/10 paired seeds (≥ 9)"),
    )
}

// ----------------------------------------------------------------- ablation

fn ablation_inequality() -> Outcome {
    let mut distinct = 0;
    for seed in 0..10 {
        let p = gradient_fixture(seed + 300);
        let s = random_state(seed + 3000, &p, 2);
        let value = |component_mode| {
            let c = SolverConfig {
                k: 2,
                component_mode,
                recon_reduction: ReconReduction::Mean,
                ..SolverConfig::default()
            };
            objective(&s, &p.audio, &p.image, &p.bank, &c.objective())
                .unwrap()
                .penalty
        };
        if value(ComponentMode::SoftMask) != value(ComponentMode::FactorRow) {
            distinct += 1;
        }
    }
    outcome(
        distinct == 10,
        format!("soft-mask and factor-row penalties differ on {distinct}/10 random fixtures"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("decoupling oracle", decoupling),
        ("planted recovery", planted_recovery),
        ("rank-1 exactness", rank_one_exactness),
        ("metric oracle equivalence", metric_oracle),
        ("determinism", determinism),
        ("temporal regulariser effect", temporal_effect),
        ("ablation inequality", ablation_inequality),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
