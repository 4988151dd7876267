//! Label handling and ranking metrics: annotation probabilities to
//! multi-hot labels, frequency-based class weights, and per-class average
//! precision with its mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of emotion classes.
pub const CLASS_COUNT: usize = 4;

/// The four perceived-emotion classes, in label-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Happy = 0,
    Sad = 1,
    Angry = 2,
    Neutral = 3,
}

impl Emotion {
    pub const ALL: [Emotion; CLASS_COUNT] =
        [Emotion::Happy, Emotion::Sad, Emotion::Angry, Emotion::Neutral];

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
            Emotion::Neutral => "neutral",
        }
    }
}

/// Multi-hot emotion label: one bit per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHotLabel {
    pub bits: [bool; CLASS_COUNT],
}

impl MultiHotLabel {
    pub fn is_set(self, class: Emotion) -> bool {
        self.bits[class as usize]
    }

    pub fn any(self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

/// A class is reported when more than a uniform-chance fraction of
/// annotators picked it: bit `l` set iff `probs[l] > 1/C` (strict).
pub fn to_multihot(probs: &[f64; CLASS_COUNT]) -> MultiHotLabel {
    let chance = 1.0 / CLASS_COUNT as f64;
    let mut bits = [false; CLASS_COUNT];
    for (bit, &p) in bits.iter_mut().zip(probs) {
        *bit = p > chance;
    }
    MultiHotLabel { bits }
}

/// Per-class loss weights `w_l = exp(-p_l)`, where `p_l` is the fraction
/// of labeled training samples carrying bit `l`. Rare classes weigh close
/// to 1, ubiquitous ones close to `e^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; CLASS_COUNT],
}

#[derive(Debug, Error)]
#[error("cannot compute class weights from an empty label list")]
pub struct EmptyError;

pub fn class_weights(train_labels: &[MultiHotLabel]) -> Result<ClassWeights, EmptyError> {
    if train_labels.is_empty() {
        return Err(EmptyError);
    }
    let n = train_labels.len() as f64;
    let mut w = [0.0; CLASS_COUNT];
    for (l, out) in w.iter_mut().enumerate() {
        let count = train_labels.iter().filter(|lab| lab.bits[l]).count() as f64;
        *out = (-count / n).exp();
    }
    Ok(ClassWeights { w })
}

#[derive(Debug, Error)]
#[error("average precision is undefined without a relevant item")]
pub struct UndefinedApError;

/// Non-interpolated average precision over a scored ranking.
///
/// Items are ranked by descending score; ties keep their original order
/// (stable sort). AP sums precision at each relevant item weighted by the
/// recall increment.
pub fn average_precision(scored: &[(f64, bool)]) -> Result<f64, UndefinedApError> {
    let total_pos = scored.iter().filter(|(_, rel)| *rel).count();
    if total_pos == 0 {
        return Err(UndefinedApError);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if scored[idx].1 {
            hits += 1;
            ap += (1.0 / total_pos as f64) * (hits as f64 / (rank0 + 1) as f64);
        }
    }
    Ok(ap)
}

/// Per-class AP and their unweighted mean.
///
/// Classes without a positive ground-truth item cannot be scored; they are
/// listed in `skipped_classes` and excluded from the mean. `map` is NaN if
/// no class could be evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP keyed by class name; evaluated classes only.
    pub ap: BTreeMap<String, f64>,
    pub map: f64,
    pub skipped_classes: Vec<String>,
}

impl EvalReport {
    pub fn ap_of(&self, class: Emotion) -> Option<f64> {
        self.ap.get(class.name()).copied()
    }
}

pub fn evaluate(pred_probs: &[[f64; CLASS_COUNT]], truths: &[MultiHotLabel]) -> EvalReport {
    assert_eq!(pred_probs.len(), truths.len(), "prediction/truth length mismatch");
    let mut ap = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    for class in Emotion::ALL {
        let scored: Vec<(f64, bool)> = pred_probs
            .iter()
            .zip(truths)
            .map(|(p, t)| (p[class as usize], t.bits[class as usize]))
            .collect();
        match average_precision(&scored) {
            Ok(v) => {
                sum += v;
                ap.insert(class.name().to_string(), v);
            }
            Err(_) => skipped.push(class.name().to_string()),
        }
    }
    let evaluated = ap.len();
    EvalReport {
        ap,
        map: if evaluated > 0 { sum / evaluated as f64 } else { f64::NAN },
        skipped_classes: skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multihot_uses_strict_chance_threshold() {
        assert_eq!(
            to_multihot(&[0.5, 0.0, 0.3, 0.2]).bits,
            [true, false, true, false]
        );
        assert_eq!(to_multihot(&[0.25; 4]).bits, [false; 4]);
        assert_eq!(to_multihot(&[1.0; 4]).bits, [true; 4]);
    }

    #[test]
    fn multihot_is_monotone_in_each_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut probs = [0.0; 4];
            for p in probs.iter_mut() {
                *p = rng.gen_range(0.0..1.0);
            }
            let before = to_multihot(&probs);
            let idx = rng.gen_range(0..4);
            let mut raised = probs;
            raised[idx] = (raised[idx] + rng.gen_range(0.0..1.0)).min(1.0);
            let after = to_multihot(&raised);
            for l in 0..4 {
                assert!(!before.bits[l] || after.bits[l], "raising a prob cleared a bit");
            }
        }
    }

    #[test]
    fn class_weights_match_frequency_rule() {
        let l = |bits| MultiHotLabel { bits };
        let labels = vec![
            l([true, false, false, false]),
            l([true, true, false, false]),
            l([false, true, false, false]),
            l([true, false, false, false]),
        ];
        let w = class_weights(&labels).unwrap().w;
        assert!((w[0] - (-0.75f64).exp()).abs() < 1e-15);
        assert!((w[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(w[2], 1.0); // absent class
        assert_eq!(w[3], 1.0);
        assert!(class_weights(&[]).is_err());

        // frequency 0.58 gives weight exp(-0.58)
        let mut labels = vec![l([true, false, false, false]); 58];
        labels.extend(vec![l([false, true, false, false]); 42]);
        let w = class_weights(&labels).unwrap().w;
        assert!((w[0] - 0.5599).abs() < 5e-5);
        // all samples carry the class -> e^{-1}
        let labels = vec![l([true, false, false, false]); 7];
        let w = class_weights(&labels).unwrap().w;
        assert!((w[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn ap_basic_rankings() {
        // all positives above all negatives
        let scored = vec![(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(average_precision(&scored).unwrap(), 1.0);
        // single positive ranked second of two
        let scored = vec![(0.9, false), (0.8, true)];
        assert_eq!(average_precision(&scored).unwrap(), 0.5);
        // no relevant items
        assert!(average_precision(&[(0.3, false)]).is_err());
    }

    #[test]
    fn ap_ties_break_by_original_order() {
        // same score: the earlier item ranks first
        let scored = vec![(0.5, false), (0.5, true)];
        assert_eq!(average_precision(&scored).unwrap(), 0.5);
        let scored = vec![(0.5, true), (0.5, false)];
        assert_eq!(average_precision(&scored).unwrap(), 1.0);
    }

    /// Independent oracle: build the full precision/recall curve at every
    /// cutoff of the (stable) descending ranking, then sum ΔR·P.
    fn ap_oracle(scored: &[(f64, bool)]) -> f64 {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
        let total_pos = scored.iter().filter(|(_, r)| *r).count() as f64;
        let mut curve = vec![(0.0f64, 1.0f64)]; // (recall, precision) at cutoff 0
        let mut tp = 0.0;
        for (k, &idx) in order.iter().enumerate() {
            if scored[idx].1 {
                tp += 1.0;
            }
            curve.push((tp / total_pos, tp / (k + 1) as f64));
        }
        let mut ap = 0.0;
        for w in curve.windows(2) {
            ap += (w[1].0 - w[0].0) * w[1].1;
        }
        ap
    }

    #[test]
    fn ap_matches_cutoff_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let n = rng.gen_range(1..30);
            let scored: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // coarse scores provoke ties
                    let s = (rng.gen_range(0..6) as f64) / 5.0;
                    (s, rng.gen_bool(0.4))
                })
                .collect();
            if !scored.iter().any(|(_, r)| *r) {
                continue;
            }
            let got = average_precision(&scored).unwrap();
            let want = ap_oracle(&scored);
            assert!((got - want).abs() < 1e-12, "{got} vs {want} on {scored:?}");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn ap_invariant_under_increasing_score_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..20);
            let scored: Vec<(f64, bool)> =
                (0..n).map(|_| (rng.gen_range(-3.0..3.0), rng.gen_bool(0.5))).collect();
            if !scored.iter().any(|(_, r)| *r) {
                continue;
            }
            let mapped: Vec<(f64, bool)> = scored.iter().map(|&(s, r)| (s.exp(), r)).collect();
            assert_eq!(
                average_precision(&scored).unwrap(),
                average_precision(&mapped).unwrap()
            );
        }
    }

    #[test]
    fn evaluate_perfect_predictions_scores_one() {
        let truths = vec![
            MultiHotLabel { bits: [true, false, true, false] },
            MultiHotLabel { bits: [false, true, false, true] },
            MultiHotLabel { bits: [true, true, false, false] },
        ];
        let probs: Vec<[f64; 4]> = truths
            .iter()
            .map(|t| {
                let mut p = [0.0; 4];
                for l in 0..4 {
                    p[l] = if t.bits[l] { 1.0 } else { 0.0 };
                }
                p
            })
            .collect();
        let report = evaluate(&probs, &truths);
        assert_eq!(report.map, 1.0);
        assert!(report.skipped_classes.is_empty());
    }

    #[test]
    fn evaluate_skips_and_flags_empty_classes() {
        let truths = vec![
            MultiHotLabel { bits: [true, false, false, false] },
            MultiHotLabel { bits: [false, true, false, false] },
        ];
        let probs = vec![[0.9, 0.1, 0.5, 0.5], [0.2, 0.8, 0.5, 0.5]];
        let report = evaluate(&probs, &truths);
        assert_eq!(report.skipped_classes, vec!["angry", "neutral"]);
        assert_eq!(report.ap.len(), 2);
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn map_is_mean_of_class_aps() {
        // mean of the published per-class APs, checking only the averaging
        let aps = [0.98, 0.89, 0.81, 0.71];
        let mean: f64 = aps.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.8475).abs() < 1e-12);
        assert_eq!((mean * 100.0).floor() / 100.0, 0.84);

        // identical APs: the mean equals the common value
        let truths = vec![
            MultiHotLabel { bits: [true, true, true, true] },
            MultiHotLabel { bits: [false, false, false, false] },
        ];
        let probs = vec![[0.2; 4], [0.9; 4]];
        let report = evaluate(&probs, &truths);
        for class in Emotion::ALL {
            assert_eq!(report.ap_of(class), Some(0.5));
        }
        assert_eq!(report.map, 0.5);
    }

    #[test]
    fn report_serializes_with_stable_shape() {
        let truths = vec![
            MultiHotLabel { bits: [true, false, false, false] },
            MultiHotLabel { bits: [false, true, false, false] },
        ];
        let probs = vec![[0.9, 0.1, 0.0, 0.0], [0.2, 0.8, 0.0, 0.0]];
        let report = evaluate(&probs, &truths);
        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        assert!(json["ap"]["happy"].is_number());
        assert!(json["map"].is_number());
        assert_eq!(json["skipped_classes"][0], "angry");
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.map, report.map);
    }
}
