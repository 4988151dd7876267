//! Procedural walking-gait generator for desk-scale experiments.
//!
//! Each sample is a sinusoidal walk cycle on the canonical skeleton whose
//! parameters depend on the emotion mix: high arm swing with straight
//! elbows for happy, long fast strides with bent elbows for angry, short
//! slow strides with a collapsed (slouched) upper body for sad, moderate
//! everything for neutral. Multi-label samples blend the prototypes.
//! Labeled class marginals approximate 58/32/23/14 percent with
//! overlapping labels allowed and at least one class per sample.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, GaitSample};
use crate::metrics::CLASS_COUNT;
use crate::skeleton::{joint, JOINT_COUNT};

/// Fraction of labeled samples carrying each class bit, matching the
/// imbalance the model is expected to cope with.
pub const TARGET_MARGINALS: [f64; CLASS_COUNT] = [0.58, 0.32, 0.23, 0.14];

/// Primary-class distribution (sums to 1).
const PRIMARY_WEIGHTS: [f64; CLASS_COUNT] = [0.457, 0.252, 0.181, 0.110];

/// Probability of adding class `l` on top of a different primary class,
/// tuned so the total marginals hit `TARGET_MARGINALS`:
/// `primary + (1 - primary) * add_on = marginal`.
const ADD_ON_WEIGHTS: [f64; CLASS_COUNT] = [0.226, 0.091, 0.060, 0.034];

#[derive(Clone, Copy, Debug)]
struct MotionParams {
    arm_amp: f64,
    elbow_bend: f64,
    leg_amp: f64,
    knee_bend: f64,
    slouch: f64,
    freq: f64,
    bounce: f64,
    phase0: f64,
    speed: f64,
}

/// Prototype motion per class: happy, sad, angry, neutral.
/// Frequencies are cycles per raw frame; the stride-5 downsample keeps
/// them well below the aliasing limit of 0.04.
const PROTOTYPES: [MotionParams; CLASS_COUNT] = [
    MotionParams {
        arm_amp: 1.0,
        elbow_bend: 0.2,
        leg_amp: 0.55,
        knee_bend: 0.5,
        slouch: 0.05,
        freq: 0.030,
        bounce: 0.04,
        phase0: 0.0,
        speed: 0.014,
    },
    MotionParams {
        arm_amp: 0.15,
        elbow_bend: 0.35,
        leg_amp: 0.25,
        knee_bend: 0.3,
        slouch: 0.85,
        freq: 0.015,
        bounce: 0.01,
        phase0: 0.0,
        speed: 0.007,
    },
    MotionParams {
        arm_amp: 0.8,
        elbow_bend: 1.1,
        leg_amp: 0.8,
        knee_bend: 0.6,
        slouch: 0.2,
        freq: 0.038,
        bounce: 0.05,
        phase0: 0.0,
        speed: 0.02,
    },
    MotionParams {
        arm_amp: 0.45,
        elbow_bend: 0.3,
        leg_amp: 0.45,
        knee_bend: 0.4,
        slouch: 0.2,
        freq: 0.024,
        bounce: 0.02,
        phase0: 0.0,
        speed: 0.012,
    },
];

/// Multi-hot class mix: one primary draw plus independent add-ons.
fn sample_labels(rng: &mut ChaCha8Rng) -> [bool; CLASS_COUNT] {
    let mut bits = [false; CLASS_COUNT];
    let roll: f64 = rng.gen();
    let mut acc = 0.0;
    let mut primary = CLASS_COUNT - 1;
    for (l, &w) in PRIMARY_WEIGHTS.iter().enumerate() {
        acc += w;
        if roll < acc {
            primary = l;
            break;
        }
    }
    bits[primary] = true;
    for (l, bit) in bits.iter_mut().enumerate() {
        if l != primary && rng.gen::<f64>() < ADD_ON_WEIGHTS[l] {
            *bit = true;
        }
    }
    bits
}

/// Annotator fractions consistent with the class bits under the strict
/// `> 1/C` reporting threshold: 0.4..0.9 for active classes, 0.0..0.2
/// otherwise.
fn sample_probs(bits: &[bool; CLASS_COUNT], rng: &mut ChaCha8Rng) -> [f64; CLASS_COUNT] {
    let mut probs = [0.0; CLASS_COUNT];
    for (p, &bit) in probs.iter_mut().zip(bits) {
        let tenths = if bit { rng.gen_range(4..=9) } else { rng.gen_range(0..=2) };
        *p = tenths as f64 / 10.0;
    }
    probs
}

/// Blend the prototypes of the active classes and jitter every scalar so
/// classes overlap instead of separating into point clusters.
fn sample_params(bits: &[bool; CLASS_COUNT], rng: &mut ChaCha8Rng) -> MotionParams {
    let active: Vec<usize> = (0..CLASS_COUNT).filter(|&l| bits[l]).collect();
    let n = active.len() as f64;
    let mean = |get: fn(&MotionParams) -> f64| -> f64 {
        active.iter().map(|&l| get(&PROTOTYPES[l])).sum::<f64>() / n
    };
    let mut jitter = |v: f64| v * rng.gen_range(0.85..1.15);
    MotionParams {
        arm_amp: jitter(mean(|p| p.arm_amp)),
        elbow_bend: jitter(mean(|p| p.elbow_bend)),
        leg_amp: jitter(mean(|p| p.leg_amp)),
        knee_bend: jitter(mean(|p| p.knee_bend)),
        slouch: jitter(mean(|p| p.slouch)),
        freq: jitter(mean(|p| p.freq)),
        bounce: jitter(mean(|p| p.bounce)),
        phase0: rng.gen_range(0.0..2.0 * PI),
        speed: rng.gen_range(0.008..0.02),
    }
}

/// Rotate `v` about the x axis by `a` radians.
fn pitch_x(v: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [v[0], v[1] * c - v[2] * s, v[1] * s + v[2] * c]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

/// One frame of the walk. Walking direction is +z, up is +y, left is +x.
fn build_frame(p: &MotionParams, t_raw: usize) -> Vec<[f64; 3]> {
    let t = t_raw as f64;
    let phi = 2.0 * PI * p.freq * t + p.phase0;
    let mut f = vec![[0.0; 3]; JOINT_COUNT];

    let root = [0.0, 0.95 + p.bounce * (2.0 * phi).sin(), p.speed * t];
    f[joint::ROOT] = root;

    // torso pitches forward by the slouch angle; the slouch also rolls the
    // shoulders inward, narrowing their lateral separation
    let pitch = 0.55 * p.slouch;
    let shoulder_sep = 1.0 - 0.45 * p.slouch;
    for (j, h) in [
        (joint::LOWER_BACK, 0.10),
        (joint::SPINE, 0.20),
        (joint::CHEST, 0.30),
        (joint::NECK, 0.45),
        (joint::HEAD, 0.55),
        (joint::HEAD_TOP, 0.65),
    ] {
        f[j] = add(root, pitch_x([0.0, h, 0.0], pitch));
    }

    for (side, sx, shoulder_j, elbow_j, hand_j, index_j) in [
        (0.0, 1.0, joint::LEFT_SHOULDER, joint::LEFT_ELBOW, joint::LEFT_HAND, joint::LEFT_HAND_INDEX),
        (PI, -1.0, joint::RIGHT_SHOULDER, joint::RIGHT_ELBOW, joint::RIGHT_HAND, joint::RIGHT_HAND_INDEX),
    ] {
        // arms swing in antiphase with the same-side leg
        let phi_arm = phi + PI + side;
        let swing = p.arm_amp * 0.45 * phi_arm.sin();
        let bend = p.elbow_bend * (0.75 + 0.25 * phi_arm.sin());
        let shoulder = add(root, pitch_x([sx * 0.20 * shoulder_sep, 0.43, 0.0], pitch));
        let upper_dir = pitch_x([0.0, -1.0, 0.0], pitch - swing);
        let fore_dir = pitch_x([0.0, -1.0, 0.0], pitch - swing - bend);
        let elbow = add(shoulder, scale(upper_dir, 0.26));
        let hand = add(elbow, scale(fore_dir, 0.25));
        f[shoulder_j] = shoulder;
        f[elbow_j] = elbow;
        f[hand_j] = hand;
        f[index_j] = add(hand, scale(fore_dir, 0.09));
    }

    for (side, sx, hip_j, knee_j, toe_j) in [
        (0.0, 1.0, joint::LEFT_HIP, joint::LEFT_KNEE, joint::LEFT_TOE),
        (PI, -1.0, joint::RIGHT_HIP, joint::RIGHT_KNEE, joint::RIGHT_TOE),
    ] {
        let phi_leg = phi + side;
        let swing = p.leg_amp * 0.5 * phi_leg.sin();
        let flex = p.knee_bend * 0.4 * (1.0 - phi_leg.sin());
        let hip = add(root, [sx * 0.11, -0.05, 0.0]);
        let knee = add(hip, scale(pitch_x([0.0, -1.0, 0.0], -swing), 0.43));
        let toe = add(
            add(knee, scale(pitch_x([0.0, -1.0, 0.0], -swing + flex), 0.45)),
            [0.0, 0.02, 0.12],
        );
        f[hip_j] = hip;
        f[knee_j] = knee;
        f[toe_j] = toe;
    }
    f
}

fn build_gait(p: &MotionParams, n_frames: usize) -> Vec<Vec<[f64; 3]>> {
    (0..n_frames).map(|t| build_frame(p, t)).collect()
}

/// Generate a synthetic corpus: `n_labeled` samples with annotator
/// fractions plus `n_unlabeled` without. Deterministic in `seed`.
pub fn generate_synthetic(n_labeled: usize, n_unlabeled: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_labeled + n_unlabeled);
    for i in 0..n_labeled + n_unlabeled {
        let labeled = i < n_labeled;
        let bits = sample_labels(&mut rng);
        let params = sample_params(&bits, &mut rng);
        let n_frames = rng.gen_range(200..=280);
        let label_probs = labeled.then(|| sample_probs(&bits, &mut rng));
        let id = if labeled {
            format!("l{i:04}")
        } else {
            format!("u{:04}", i - n_labeled)
        };
        samples.push(GaitSample {
            id,
            positions: build_gait(&params, n_frames),
            label_probs,
            source: None,
        });
    }
    Dataset::from_samples(samples)
}
