//! Hand-designed affective features: 18 per-time-step posture quantities
//! with known correlations to perceived emotion (slouching, arm swing,
//! stride spread, ...). Eleven joint angles, four distance ratios, and
//! three area ratios, in a fixed row order that the model's embedding
//! slice is trained against.
//!
//! All features are scale-free and rigid-motion invariant, and are scaled
//! into [0,1]: angles divided by π, ratios mapped `r -> r / (1 + r)`.

use thiserror::Error;

use crate::dataset::{preprocess_temporal, Dataset};
use crate::metrics::{to_multihot, Emotion};
use crate::skeleton::Skeleton;

/// Number of affective features (rows of [`AffectiveMatrix`]).
pub const FEATURE_COUNT: usize = 18;

/// Geometric definition of one feature, in canonical joint names.
#[derive(Clone, Copy, Debug)]
pub enum FeatureDef {
    /// Angle subtended by joints `a` and `b` at `apex`, scaled by 1/π.
    Angle {
        a: &'static str,
        b: &'static str,
        apex: &'static str,
    },
    /// |p1−p2| / |p3−p4|, scaled r ↦ r/(1+r).
    DistanceRatio {
        p1: &'static str,
        p2: &'static str,
        p3: &'static str,
        p4: &'static str,
    },
    /// area(t1) / area(t2), scaled r ↦ r/(1+r).
    AreaRatio {
        t1: [&'static str; 3],
        t2: [&'static str; 3],
    },
}

/// One named feature row.
#[derive(Clone, Copy, Debug)]
pub struct Feature {
    pub name: &'static str,
    pub def: FeatureDef,
}

/// The 18 features in matrix row order: 11 angles, 4 distance ratios,
/// 3 area ratios.
pub const FEATURES: [Feature; FEATURE_COUNT] = [
    Feature {
        name: "angle_shoulders_at_lower_back",
        def: FeatureDef::Angle { a: "left_shoulder", b: "right_shoulder", apex: "lower_back" },
    },
    Feature {
        name: "angle_hands_at_root",
        def: FeatureDef::Angle { a: "left_hand", b: "right_hand", apex: "root" },
    },
    Feature {
        name: "angle_left_shoulder_hand_at_elbow",
        def: FeatureDef::Angle { a: "left_shoulder", b: "left_hand", apex: "left_elbow" },
    },
    Feature {
        name: "angle_right_shoulder_hand_at_elbow",
        def: FeatureDef::Angle { a: "right_shoulder", b: "right_hand", apex: "right_elbow" },
    },
    Feature {
        name: "angle_head_left_shoulder_at_neck",
        def: FeatureDef::Angle { a: "head", b: "left_shoulder", apex: "neck" },
    },
    Feature {
        name: "angle_head_right_shoulder_at_neck",
        def: FeatureDef::Angle { a: "head", b: "right_shoulder", apex: "neck" },
    },
    Feature {
        name: "angle_head_left_knee_at_root",
        def: FeatureDef::Angle { a: "head", b: "left_knee", apex: "root" },
    },
    Feature {
        name: "angle_head_right_knee_at_root",
        def: FeatureDef::Angle { a: "head", b: "right_knee", apex: "root" },
    },
    Feature {
        name: "angle_toes_at_root",
        def: FeatureDef::Angle { a: "left_toe", b: "right_toe", apex: "root" },
    },
    Feature {
        name: "angle_left_hip_toe_at_knee",
        def: FeatureDef::Angle { a: "left_hip", b: "left_toe", apex: "left_knee" },
    },
    Feature {
        name: "angle_right_hip_toe_at_knee",
        def: FeatureDef::Angle { a: "right_hip", b: "right_toe", apex: "right_knee" },
    },
    Feature {
        name: "dist_ratio_lhi_neck_over_lhi_root",
        def: FeatureDef::DistanceRatio {
            p1: "left_hand_index", p2: "neck", p3: "left_hand_index", p4: "root",
        },
    },
    Feature {
        name: "dist_ratio_rhi_neck_over_rhi_root",
        def: FeatureDef::DistanceRatio {
            p1: "right_hand_index", p2: "neck", p3: "right_hand_index", p4: "root",
        },
    },
    Feature {
        name: "dist_ratio_lhi_rhi_over_neck_root",
        def: FeatureDef::DistanceRatio {
            p1: "left_hand_index", p2: "right_hand_index", p3: "neck", p4: "root",
        },
    },
    Feature {
        name: "dist_ratio_toes_over_neck_root",
        def: FeatureDef::DistanceRatio { p1: "left_toe", p2: "right_toe", p3: "neck", p4: "root" },
    },
    Feature {
        name: "area_ratio_shoulders_lower_back_over_shoulders_root",
        def: FeatureDef::AreaRatio {
            t1: ["left_shoulder", "right_shoulder", "lower_back"],
            t2: ["left_shoulder", "right_shoulder", "root"],
        },
    },
    Feature {
        name: "area_ratio_hands_lower_back_over_hands_root",
        def: FeatureDef::AreaRatio {
            t1: ["left_hand", "right_hand", "lower_back"],
            t2: ["left_hand", "right_hand", "root"],
        },
    },
    Feature {
        name: "area_ratio_hand_indices_neck_over_toes_root",
        def: FeatureDef::AreaRatio {
            t1: ["left_hand_index", "right_hand_index", "neck"],
            t2: ["left_toe", "right_toe", "root"],
        },
    },
];

/// Feature values per time step: `FEATURE_COUNT x T`, entries in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct AffectiveMatrix {
    steps: usize,
    /// Indexed `[feature * steps + t]`.
    values: Vec<f64>,
}

impl AffectiveMatrix {
    pub(crate) fn from_values(steps: usize, values: Vec<f64>) -> AffectiveMatrix {
        assert_eq!(values.len() % steps.max(1), 0);
        AffectiveMatrix { steps, values }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, feature: usize, t: usize) -> f64 {
        self.values[feature * self.steps + t]
    }

    /// Mean of one feature row across time.
    pub fn time_mean(&self, feature: usize) -> f64 {
        let row = &self.values[feature * self.steps..(feature + 1) * self.steps];
        row.iter().sum::<f64>() / self.steps as f64
    }
}

/// Angle in [0, π] subtended by `a` and `b` at `apex`; 0 when either arm
/// of the angle is degenerate (norm < 1e-8).
pub fn angle_at(a: [f64; 3], b: [f64; 3], apex: [f64; 3]) -> f64 {
    let u = sub(a, apex);
    let v = sub(b, apex);
    let nu = norm(u);
    let nv = norm(v);
    if nu < 1e-8 || nv < 1e-8 {
        return 0.0;
    }
    let c = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    c.acos()
}

/// |p1−p2| / |p3−p4|; 0 when the denominator segment is shorter than 1e-8.
pub fn distance_ratio(p1: [f64; 3], p2: [f64; 3], p3: [f64; 3], p4: [f64; 3]) -> f64 {
    let den = norm(sub(p3, p4));
    if den < 1e-8 {
        return 0.0;
    }
    norm(sub(p1, p2)) / den
}

/// Triangle area via half cross-product magnitude.
pub fn triangle_area(t: [[f64; 3]; 3]) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

/// area(t1) / area(t2); 0 when the denominator triangle is degenerate
/// (area < 1e-12).
pub fn area_ratio(t1: [[f64; 3]; 3], t2: [[f64; 3]; 3]) -> f64 {
    let den = triangle_area(t2);
    if den < 1e-12 {
        return 0.0;
    }
    triangle_area(t1) / den
}

fn squash_ratio(r: f64) -> f64 {
    r / (1.0 + r)
}

/// Compute all 18 features for every frame, scaled into [0,1].
///
/// Joints are resolved by name through `skel`, which must contain the
/// canonical joint names.
pub fn extract_affective(positions: &[Vec<[f64; 3]>], skel: &Skeleton) -> AffectiveMatrix {
    let resolve = |name: &str| -> usize {
        skel.joint_names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("skeleton lacks canonical joint `{name}`"))
    };
    let steps = positions.len();
    let mut values = vec![0.0; FEATURE_COUNT * steps];
    for (fi, feature) in FEATURES.iter().enumerate() {
        for (t, frame) in positions.iter().enumerate() {
            let raw = match feature.def {
                FeatureDef::Angle { a, b, apex } => {
                    angle_at(frame[resolve(a)], frame[resolve(b)], frame[resolve(apex)])
                        / std::f64::consts::PI
                }
                FeatureDef::DistanceRatio { p1, p2, p3, p4 } => squash_ratio(distance_ratio(
                    frame[resolve(p1)],
                    frame[resolve(p2)],
                    frame[resolve(p3)],
                    frame[resolve(p4)],
                )),
                FeatureDef::AreaRatio { t1, t2 } => squash_ratio(area_ratio(
                    [frame[resolve(t1[0])], frame[resolve(t1[1])], frame[resolve(t1[2])]],
                    [frame[resolve(t2[0])], frame[resolve(t2[1])], frame[resolve(t2[2])]],
                )),
            };
            values[fi * steps + t] = raw;
        }
    }
    AffectiveMatrix { steps, values }
}

#[derive(Debug, Error)]
#[error("dataset has no labeled samples")]
pub struct EmptyError;

/// Class-conditional histograms of time-mean feature values.
///
/// `counts[feature][class][bin]`; bins uniformly tile [0,1]. A sample with
/// several labels contributes one count to each of its classes.
#[derive(Clone, Debug)]
pub struct HistogramTable {
    pub bins: usize,
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl HistogramTable {
    pub fn class_total(&self, feature: usize, class: Emotion) -> u64 {
        self.counts[feature][class as usize].iter().sum()
    }

    /// Bin-center weighted mean; `None` for an empty histogram.
    pub fn mean(&self, feature: usize, class: Emotion) -> Option<f64> {
        let row = &self.counts[feature][class as usize];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return None;
        }
        let width = 1.0 / self.bins as f64;
        let acc: f64 = row
            .iter()
            .enumerate()
            .map(|(b, &c)| c as f64 * (b as f64 + 0.5) * width)
            .sum();
        Some(acc / total as f64)
    }

    /// CSV rows `feature,class,bin_left,bin_right,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,class,bin_left,bin_right,count\n");
        let width = 1.0 / self.bins as f64;
        for (fi, feature) in FEATURES.iter().enumerate() {
            for class in Emotion::ALL {
                for b in 0..self.bins {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        feature.name,
                        class.name(),
                        b as f64 * width,
                        (b + 1) as f64 * width,
                        self.counts[fi][class as usize][b]
                    ));
                }
            }
        }
        out
    }
}

/// Histogram the time-mean of every feature, per emotion class, over all
/// labeled samples of `ds`.
pub fn mean_feature_histograms(
    ds: &Dataset,
    skel: &Skeleton,
    bins: usize,
) -> Result<HistogramTable, EmptyError> {
    assert!(bins > 0, "bins must be positive");
    let mut counts = vec![vec![vec![0u64; bins]; Emotion::ALL.len()]; FEATURE_COUNT];
    let mut any = false;
    for sample in &ds.samples {
        let Some(probs) = sample.label_probs else { continue };
        any = true;
        let bits = to_multihot(&probs);
        if !bits.any() {
            continue;
        }
        let frames = preprocess_temporal(sample).expect("labeled sample has frames");
        let aff = extract_affective(&frames, skel);
        for fi in 0..FEATURE_COUNT {
            let mean = aff.time_mean(fi).clamp(0.0, 1.0);
            let bin = ((mean * bins as f64) as usize).min(bins - 1);
            for class in Emotion::ALL {
                if bits.bits[class as usize] {
                    counts[fi][class as usize][bin] += 1;
                }
            }
        }
    }
    if !any {
        return Err(EmptyError);
    }
    Ok(HistogramTable { bins, counts })
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
