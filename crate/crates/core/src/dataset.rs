//! Dataset ingestion and temporal preprocessing.
//!
//! On-disk format: UTF-8 JSON lines, one sample per line:
//! `{"id": "...", "frames": [[[x,y,z]; 21]; T_raw], "label_probs": [h,s,a,n] | null, "source": "..."}`.
//! `source` is optional. A line whose object contains an `"_meta"` key is
//! ignored by the loader (writers use it for provenance headers).
//!
//! Preprocessing clips or zero-pads each gait to 240 frames and keeps
//! every 5th frame (indices 0, 5, ..., 235), yielding exactly 48 frames.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::CLASS_COUNT;
use crate::skeleton::JOINT_COUNT;

/// Frames after clip/zero-pad, before downsampling.
pub const PAD_FRAMES: usize = 240;
/// Downsampling stride.
pub const FRAME_STRIDE: usize = 5;
/// Frames fed to the model.
pub const MODEL_FRAMES: usize = PAD_FRAMES / FRAME_STRIDE;

/// One recorded gait: raw frames of 21 joint positions, and optionally the
/// fraction of annotators reporting each emotion.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSample {
    pub id: String,
    /// `T_raw x 21 x 3`, arbitrary consistent length units.
    pub positions: Vec<Vec<[f64; 3]>>,
    /// Per-class annotator fractions in [0,1]; entries need not sum to 1.
    pub label_probs: Option<[f64; CLASS_COUNT]>,
    /// Recording origin, used to keep test sources out of training.
    pub source: Option<String>,
}

impl GaitSample {
    pub fn is_labeled(&self) -> bool {
        self.label_probs.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GaitSample>,
    pub split_assignment: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<GaitSample>) -> Dataset {
        Dataset {
            samples,
            split_assignment: BTreeMap::new(),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_labeled()).count()
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &GaitSample> {
        self.samples
            .iter()
            .filter(move |s| self.split_assignment.get(&s.id) == Some(&split))
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split_assignment.get(id).copied()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    frames: Vec<Vec<[f64; 3]>>,
    label_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// Load a JSON-lines dataset, validating sample invariants.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        if value.get("_meta").is_some() {
            continue;
        }
        let record: Record = serde_json::from_value(value).map_err(|e| DatasetError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let schema_err = |message: String| DatasetError::Schema { line: lineno, message };
        for (t, frame) in record.frames.iter().enumerate() {
            if frame.len() != JOINT_COUNT {
                return Err(schema_err(format!(
                    "frame {t} has {} joints, expected {JOINT_COUNT}",
                    frame.len()
                )));
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(schema_err(format!("frame {t} has non-finite coordinates")));
            }
        }
        let label_probs = match record.label_probs {
            None => None,
            Some(probs) => {
                if probs.len() != CLASS_COUNT {
                    return Err(schema_err(format!(
                        "label_probs has {} entries, expected {CLASS_COUNT}",
                        probs.len()
                    )));
                }
                if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
                    return Err(schema_err("label_probs entries must lie in [0,1]".into()));
                }
                let mut arr = [0.0; CLASS_COUNT];
                arr.copy_from_slice(&probs);
                Some(arr)
            }
        };
        samples.push(GaitSample {
            id: record.id,
            positions: record.frames,
            label_probs,
            source: record.source,
        });
    }
    Ok(Dataset::from_samples(samples))
}

/// Write a dataset in the JSON-lines format, with an optional leading
/// `_meta` header line.
pub fn save_dataset(
    path: impl AsRef<Path>,
    ds: &Dataset,
    meta: Option<&serde_json::Value>,
) -> Result<(), DatasetError> {
    let mut out = fs::File::create(path)?;
    if let Some(meta) = meta {
        writeln!(out, "{}", serde_json::json!({ "_meta": meta }))?;
    }
    for s in &ds.samples {
        let record = Record {
            id: s.id.clone(),
            frames: s.positions.clone(),
            label_probs: s.label_probs.map(|p| p.to_vec()),
            source: s.source.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    Ok(())
}

#[derive(Debug, Error)]
#[error("gait `{0}` has no frames")]
pub struct EmptyGaitError(pub String);

/// Clip or zero-pad to 240 frames, then keep indices 0, 5, ..., 235.
/// Output is always `MODEL_FRAMES x 21 x 3`.
pub fn preprocess_temporal(sample: &GaitSample) -> Result<Vec<Vec<[f64; 3]>>, EmptyGaitError> {
    if sample.positions.is_empty() {
        return Err(EmptyGaitError(sample.id.clone()));
    }
    let joints = sample.positions[0].len();
    let zero = vec![[0.0; 3]; joints];
    Ok((0..PAD_FRAMES)
        .step_by(FRAME_STRIDE)
        .map(|i| sample.positions.get(i).cloned().unwrap_or_else(|| zero.clone()))
        .collect())
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need at least 10 labeled samples to split 8:1:1, have {0}")]
    TooFewLabeled(usize),
}

/// Assign labeled samples 8:1:1 to train/val/test (deterministic in
/// `seed`) and every unlabeled sample to train.
///
/// When samples carry `source` metadata, whole sources go to test
/// together, so no test source ever appears in train or val; sizes then
/// track 8:1:1 only approximately.
pub fn split_dataset(mut ds: Dataset, seed: u64) -> Result<Dataset, SplitError> {
    let labeled: Vec<usize> = (0..ds.samples.len())
        .filter(|&i| ds.samples[i].is_labeled())
        .collect();
    let l = labeled.len();
    if l < 10 {
        return Err(SplitError::TooFewLabeled(l));
    }
    let n_train = l * 8 / 10;
    let n_val = (l - n_train) / 2;
    let n_test = l - n_train - n_val;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sample-index groups that must stay together in test: one group per
    // named source, one singleton per sourceless sample.
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in &labeled {
        let key = match &ds.samples[i].source {
            Some(s) => format!("s:{s}"),
            None => format!("i:{}", ds.samples[i].id),
        };
        groups.entry(key).or_default().push(i);
    }
    let mut group_list: Vec<Vec<usize>> = groups.into_values().collect();
    group_list.shuffle(&mut rng);

    let mut assignment = BTreeMap::new();
    let mut test_count = 0;
    let mut rest: Vec<usize> = Vec::new();
    for group in group_list {
        if test_count < n_test {
            test_count += group.len();
            for i in group {
                assignment.insert(ds.samples[i].id.clone(), Split::Test);
            }
        } else {
            rest.extend(group);
        }
    }
    rest.shuffle(&mut rng);
    for (k, &i) in rest.iter().enumerate() {
        let split = if k < n_val { Split::Val } else { Split::Train };
        assignment.insert(ds.samples[i].id.clone(), split);
    }
    for s in &ds.samples {
        if !s.is_labeled() {
            assignment.insert(s.id.clone(), Split::Train);
        }
    }
    ds.split_assignment = assignment;
    Ok(ds)
}

/// Write preprocessed 48-frame position tensors keyed by sample id.
pub fn save_preprocessed_cache(
    path: impl AsRef<Path>,
    entries: &BTreeMap<String, Vec<Vec<[f64; 3]>>>,
) -> Result<(), DatasetError> {
    let mut out = fs::File::create(path)?;
    for (id, frames) in entries {
        writeln!(
            out,
            "{}",
            serde_json::json!({ "id": id, "frames": frames })
        )?;
    }
    Ok(())
}

pub fn load_preprocessed_cache(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, Vec<Vec<[f64; 3]>>>, DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Entry {
            id: String,
            frames: Vec<Vec<[f64; 3]>>,
        }
        let entry: Entry = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(entry.id, entry.frames);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(v: f64) -> Vec<[f64; 3]> {
        vec![[v, v, v]; JOINT_COUNT]
    }

    fn sample(id: &str, n_frames: usize, labeled: bool) -> GaitSample {
        GaitSample {
            id: id.to_string(),
            positions: (0..n_frames).map(|t| frame(t as f64 + 1.0)).collect(),
            label_probs: labeled.then_some([0.6, 0.1, 0.2, 0.1]),
            source: None,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut s2 = sample("b", 3, false);
        s2.source = Some("labA".into());
        let ds = Dataset::from_samples(vec![sample("a", 5, true), s2, sample("c", 2, true)]);
        save_dataset(&path, &ds, Some(&serde_json::json!({"origin": "test"}))).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.samples, ds.samples);
    }

    #[test]
    fn loader_rejects_wrong_joint_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let frames: Vec<Vec<[f64; 3]>> = vec![vec![[0.0; 3]; 20]];
        fs::write(
            &path,
            format!(
                "{}\n",
                serde_json::json!({"id": "x", "frames": frames, "label_probs": null})
            ),
        )
        .unwrap();
        match load_dataset(&path) {
            Err(DatasetError::Schema { line: 1, message }) => {
                assert!(message.contains("20 joints"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn loader_rejects_out_of_range_probs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let frames: Vec<Vec<[f64; 3]>> = vec![vec![[0.0; 3]; 21]];
        fs::write(
            &path,
            format!(
                "{}\n",
                serde_json::json!({"id": "x", "frames": frames, "label_probs": [1.2, 0.0, 0.0, 0.0]})
            ),
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DatasetError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn loader_reports_parse_errors_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\": \"ok\", \"frames\": [], \"label_probs\": null}\nnot json\n").unwrap();
        match load_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn meta_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let frames: Vec<Vec<[f64; 3]>> = vec![vec![[0.0; 3]; 21]];
        fs::write(
            &path,
            format!(
                "{}\n{}\n",
                serde_json::json!({"_meta": {"tool": "t"}}),
                serde_json::json!({"id": "x", "frames": frames, "label_probs": null})
            ),
        )
        .unwrap();
        assert_eq!(load_dataset(&path).unwrap().samples.len(), 1);
    }

    #[test]
    fn preprocess_keeps_every_fifth_of_240() {
        let s = sample("a", 240, true);
        let out = preprocess_temporal(&s).unwrap();
        assert_eq!(out.len(), MODEL_FRAMES);
        for (k, f) in out.iter().enumerate() {
            assert_eq!(f[0][0], (5 * k) as f64 + 1.0);
        }
    }

    #[test]
    fn preprocess_zero_pads_short_gaits() {
        let s = sample("a", 10, true);
        let out = preprocess_temporal(&s).unwrap();
        assert_eq!(out.len(), 48);
        assert_eq!(out[0][0][0], 1.0);
        assert_eq!(out[1][0][0], 6.0); // frame index 5
        for f in &out[2..] {
            assert!(f.iter().all(|p| *p == [0.0; 3]));
        }
    }

    #[test]
    fn preprocess_clips_long_gaits() {
        let long = sample("a", 600, true);
        let mut clipped = long.clone();
        clipped.positions.truncate(240);
        assert_eq!(
            preprocess_temporal(&long).unwrap(),
            preprocess_temporal(&clipped).unwrap()
        );
    }

    #[test]
    fn preprocess_shape_is_fixed_for_any_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.gen_range(1..600);
            let out = preprocess_temporal(&sample("a", n, false)).unwrap();
            assert_eq!(out.len(), 48);
            assert!(out.iter().all(|f| f.len() == JOINT_COUNT));
        }
    }

    #[test]
    fn preprocess_empty_gait_is_an_error() {
        let s = GaitSample {
            id: "e".into(),
            positions: vec![],
            label_probs: None,
            source: None,
        };
        assert!(preprocess_temporal(&s).is_err());
    }

    #[test]
    fn split_is_8_1_1_with_unlabeled_in_train() {
        let mut samples: Vec<GaitSample> =
            (0..100).map(|i| sample(&format!("l{i}"), 3, true)).collect();
        samples.extend((0..50).map(|i| sample(&format!("u{i}"), 3, false)));
        let ds = split_dataset(Dataset::from_samples(samples), 7).unwrap();
        let count = |split| {
            ds.samples_in(split)
                .filter(|s| s.is_labeled())
                .count()
        };
        assert_eq!(count(Split::Train), 80);
        assert_eq!(count(Split::Val), 10);
        assert_eq!(count(Split::Test), 10);
        assert!(ds
            .samples
            .iter()
            .filter(|s| !s.is_labeled())
            .all(|s| ds.split_of(&s.id) == Some(Split::Train)));
        // every sample assigned exactly once
        assert_eq!(ds.split_assignment.len(), 150);
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let make = || {
            let samples: Vec<GaitSample> =
                (0..40).map(|i| sample(&format!("l{i}"), 3, true)).collect();
            Dataset::from_samples(samples)
        };
        let a = split_dataset(make(), 42).unwrap();
        let b = split_dataset(make(), 42).unwrap();
        assert_eq!(a.split_assignment, b.split_assignment);
        let c = split_dataset(make(), 43).unwrap();
        assert_ne!(a.split_assignment, c.split_assignment);
    }

    #[test]
    fn split_rejects_tiny_labeled_sets() {
        let samples: Vec<GaitSample> = (0..9).map(|i| sample(&format!("l{i}"), 3, true)).collect();
        assert!(matches!(
            split_dataset(Dataset::from_samples(samples), 1),
            Err(SplitError::TooFewLabeled(9))
        ));
    }

    #[test]
    fn test_sources_never_leak_into_train_or_val() {
        let mut samples = Vec::new();
        for i in 0..60 {
            let mut s = sample(&format!("l{i}"), 3, true);
            s.source = Some(format!("src{}", i % 12));
            samples.push(s);
        }
        let ds = split_dataset(Dataset::from_samples(samples), 5).unwrap();
        let sources_of = |split| -> std::collections::BTreeSet<String> {
            ds.samples_in(split)
                .filter_map(|s| s.source.clone())
                .collect()
        };
        let test_sources = sources_of(Split::Test);
        assert!(!test_sources.is_empty());
        assert!(test_sources.is_disjoint(&sources_of(Split::Train)));
        assert!(test_sources.is_disjoint(&sources_of(Split::Val)));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut entries = BTreeMap::new();
        entries.insert("a".to_string(), preprocess_temporal(&sample("a", 30, true)).unwrap());
        entries.insert("b".to_string(), preprocess_temporal(&sample("b", 300, true)).unwrap());
        save_preprocessed_cache(&path, &entries).unwrap();
        let back = load_preprocessed_cache(&path).unwrap();
        assert_eq!(back, entries);
    }
}
