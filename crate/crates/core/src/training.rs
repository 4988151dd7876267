//! Semi-supervised training: weighted multi-label classification on labeled
//! samples plus reconstruction and affective-embedding regression on all
//! samples.
//!
//! The per-sample objective is
//!   `indicator(labeled) · L_cl + L_ang + λ_quat · L_quat + λ_aff · L_aff`
//! averaged over the batch. Every loss term here exists twice: as a plain
//! `f64` scalar function (the reference definition, used by tests and
//! reporting) and as graph nodes assembled onto the training tape. A unit
//! test pins the two routes together.

use crate::affective::{extract_affective, AffectiveMatrix, FEATURE_COUNT};
use crate::autodiff::{Grads, NodeId, Real, Tape, Tensor};
use crate::dataset::{Dataset, EmptyGaitError, GaitSample, Split};
use crate::metrics::{
    class_weights, evaluate, to_multihot, ClassWeights, EvalReport, MultiHotLabel, CLASS_COUNT,
};
use crate::model::{BuiltGraph, ConfigError, GaitModel, GraphOptions, ModelConfig, ShapeError};
use crate::rotation::{extract_rotations, quat_to_euler, EulerError, RotationTensor};
use crate::skeleton::canonical_skeleton;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mixing weights of the autoencoder loss terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_quat: f64,
    pub lambda_aff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_quat: 2.0,
            lambda_aff: 2.0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INITIAL_LR: f64 = 1e-3;
const LR_DECAY: f64 = 0.999;
const TF_DECAY: f64 = 0.995;

/// `0.001 · 0.999^epoch`, computed with an exact integer power.
pub fn learning_rate(epoch: usize) -> f64 {
    INITIAL_LR * LR_DECAY.powi(epoch as i32)
}

/// Probability that a decoder step is teacher-forced: `0.995^epoch`.
pub fn teacher_forcing_prob(epoch: usize) -> f64 {
    TF_DECAY.powi(epoch as i32)
}

// ---------------------------------------------------------------------------
// Scalar reference losses
// ---------------------------------------------------------------------------

/// Weighted multi-label cross-entropy for one sample:
/// `-Σ_l w_l · y_l · ln(max(p_l, 1e-12))`. All-zero labels give 0.
pub fn loss_classifier(probs: &[f64; CLASS_COUNT], label: MultiHotLabel, weights: &ClassWeights) -> f64 {
    let mut sum = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        if label.bits[c] {
            sum -= weights.w[c] * p.max(1e-12).ln();
        }
    }
    sum
}

/// Mean squared deviation of reconstructed quaternion norms from 1.
pub fn loss_quat(recon: &RotationTensor) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..recon.joints() {
        for t in 0..recon.steps() {
            let d = recon.get(j, t).norm() - 1.0;
            sum += d * d;
            n += 1;
        }
    }
    sum / n as f64
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    x - two_pi * ((x - std::f64::consts::PI) / two_pi).ceil()
}

/// Mean squared wrapped Euler-angle difference between a raw reconstruction
/// and its target, over all `3 · J · T` angle components. Both tensors are
/// normalized before conversion; an exactly zero quaternion is an error.
pub fn loss_angle(recon: &RotationTensor, target: &RotationTensor) -> Result<f64, EulerError> {
    assert_eq!(recon.joints(), target.joints());
    assert_eq!(recon.steps(), target.steps());
    let mut sum = 0.0;
    for j in 0..recon.joints() {
        for t in 0..recon.steps() {
            let (rx, ry, rz) = quat_to_euler(recon.get(j, t))?;
            let (tx, ty, tz) = quat_to_euler(target.get(j, t))?;
            for d in [rx - tx, ry - ty, rz - tz] {
                let w = wrap_angle(d);
                sum += w * w;
            }
        }
    }
    Ok(sum / (3 * recon.joints() * recon.steps()) as f64)
}

/// Mean squared error between the embedding's affective columns (`[T][A]`)
/// and the first `A` hand-designed features.
pub fn loss_affective(affective_slice: &[Vec<f64>], features: &AffectiveMatrix) -> f64 {
    let steps = affective_slice.len();
    assert_eq!(steps, features.steps());
    let width = affective_slice[0].len();
    assert!(width <= FEATURE_COUNT);
    let mut sum = 0.0;
    for (t, row) in affective_slice.iter().enumerate() {
        for (a, &v) in row.iter().enumerate() {
            let d = v - features.get(a, t);
            sum += d * d;
        }
    }
    sum / (steps * width) as f64
}

/// Combines the autoencoder terms: `ang + λ_quat·quat + λ_aff·aff`.
/// `aff` is `None` when the affective constraint is disabled.
pub fn compose_autoencoder(ang: f64, quat: f64, aff: Option<f64>, weights: &LossWeights) -> f64 {
    ang + weights.lambda_quat * quat + aff.map_or(0.0, |a| weights.lambda_aff * a)
}

/// Full autoencoder loss for one sample.
pub fn loss_autoencoder(
    recon: &RotationTensor,
    target: &RotationTensor,
    affective_slice: Option<&[Vec<f64>]>,
    features: &AffectiveMatrix,
    weights: &LossWeights,
) -> Result<f64, EulerError> {
    let ang = loss_angle(recon, target)?;
    let quat = loss_quat(recon);
    let aff = affective_slice.map(|s| loss_affective(s, features));
    Ok(compose_autoencoder(ang, quat, aff, weights))
}

/// Batch objective: mean over samples of classifier loss (where labeled)
/// plus autoencoder loss. `classifier[i]` is `None` for unlabeled samples.
pub fn loss_total(classifier: &[Option<f64>], autoencoder: &[f64]) -> f64 {
    assert_eq!(classifier.len(), autoencoder.len());
    assert!(!classifier.is_empty());
    let sum: f64 = classifier
        .iter()
        .zip(autoencoder.iter())
        .map(|(cl, ae)| cl.unwrap_or(0.0) + ae)
        .sum();
    sum / classifier.len() as f64
}

// ---------------------------------------------------------------------------
// Sample preparation
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("sample {id}: {source}")]
    EmptySample {
        id: String,
        source: EmptyGaitError,
    },
    #[error("sample {id}: degenerate rotation target")]
    DegenerateSample { id: String },
    #[error("no labeled samples in the training split")]
    NoLabeledTrainSamples,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

/// A sample converted to model inputs once, reused every epoch.
pub(crate) struct Pack {
    pub rot: RotationTensor,
    /// `[T × 4J]` row-major quaternion rows.
    rows: Vec<f64>,
    /// Euler-angle planes of the target, each `[T × J]`.
    euler: [Vec<f64>; 3],
    /// `[T × A]` affective feature targets.
    aff: Vec<f64>,
    /// Multi-hot label as 0/1 values, `None` for unlabeled samples.
    pub label: Option<[f64; CLASS_COUNT]>,
}

/// Preprocesses one sample to its rotation sequence (canonical skeleton,
/// fixed-length resampling).
pub fn sample_rotation(sample: &GaitSample) -> Result<RotationTensor, TrainError> {
    let frames = preprocessed(sample)?;
    Ok(extract_rotations(&frames, &canonical_skeleton()))
}

fn preprocessed(sample: &GaitSample) -> Result<Vec<Vec<[f64; 3]>>, TrainError> {
    crate::dataset::preprocess_temporal(sample).map_err(|source| TrainError::EmptySample {
        id: sample.id.clone(),
        source,
    })
}

fn prepare(sample: &GaitSample, config: &ModelConfig) -> Result<Pack, TrainError> {
    let frames = preprocessed(sample)?;
    let skel = canonical_skeleton();
    let rot = extract_rotations(&frames, &skel);
    let features = extract_affective(&frames, &skel);
    let steps = rot.steps();
    let joints = rot.joints();
    let a = config.affective_dim;

    let mut rows = vec![0.0; steps * 4 * joints];
    let mut euler = [
        vec![0.0; steps * joints],
        vec![0.0; steps * joints],
        vec![0.0; steps * joints],
    ];
    for t in 0..steps {
        for j in 0..joints {
            let q = rot.get(j, t);
            let base = t * 4 * joints + 4 * j;
            rows[base] = q.w;
            rows[base + 1] = q.x;
            rows[base + 2] = q.y;
            rows[base + 3] = q.z;
            let (ex, ey, ez) =
                quat_to_euler(q).map_err(|_| TrainError::DegenerateSample {
                    id: sample.id.clone(),
                })?;
            euler[0][t * joints + j] = ex;
            euler[1][t * joints + j] = ey;
            euler[2][t * joints + j] = ez;
        }
    }
    let mut aff = vec![0.0; steps * a];
    for t in 0..steps {
        for f in 0..a {
            aff[t * a + f] = features.get(f, t);
        }
    }
    let label = sample.label_probs.map(|p| {
        let hot = to_multihot(&p);
        let mut y = [0.0; CLASS_COUNT];
        for (c, slot) in y.iter_mut().enumerate() {
            *slot = if hot.bits[c] { 1.0 } else { 0.0 };
        }
        y
    });
    Ok(Pack {
        rot,
        rows,
        euler,
        aff,
        label,
    })
}

/// Time-major batch tensors assembled from packs.
struct BatchData<F: Real> {
    input: Tensor<F>,
    euler: [Tensor<F>; 3],
    aff: Tensor<F>,
    labels: Tensor<F>,
}

fn assemble<F: Real>(packs: &[&Pack], config: &ModelConfig) -> BatchData<F> {
    let b = packs.len();
    let t_steps = config.time_steps;
    let frame = config.frame_dim();
    let joints = config.joints;
    let a = config.affective_dim;

    let mut input = Tensor::zeros(t_steps * b, frame);
    let mut euler = [
        Tensor::zeros(t_steps * b, joints),
        Tensor::zeros(t_steps * b, joints),
        Tensor::zeros(t_steps * b, joints),
    ];
    let mut aff = Tensor::zeros(t_steps * b, a);
    let mut labels = Tensor::zeros(b, CLASS_COUNT);
    for (i, pack) in packs.iter().enumerate() {
        for t in 0..t_steps {
            let row = t * b + i;
            for c in 0..frame {
                input.set(row, c, F::from_f64(pack.rows[t * frame + c]));
            }
            for (plane, source) in euler.iter_mut().zip(pack.euler.iter()) {
                for j in 0..joints {
                    plane.set(row, j, F::from_f64(source[t * joints + j]));
                }
            }
            for f in 0..a {
                aff.set(row, f, F::from_f64(pack.aff[t * a + f]));
            }
        }
        if let Some(y) = pack.label {
            for (c, &v) in y.iter().enumerate() {
                labels.set(i, c, F::from_f64(v));
            }
        }
    }
    BatchData {
        input,
        euler,
        aff,
        labels,
    }
}

// ---------------------------------------------------------------------------
// Graph-side loss assembly
// ---------------------------------------------------------------------------

pub(crate) struct LossNodes {
    pub total: NodeId,
    pub classifier: Option<NodeId>,
    pub angle: Option<NodeId>,
    pub quat: Option<NodeId>,
    pub affective: Option<NodeId>,
}

/// Builds the Euler angles of each reconstructed quaternion as three
/// `[T·B, J]` planes (rotation order x·y·z, matching the scalar converter).
fn euler_planes<F: Real>(
    tape: &mut Tape<F>,
    recon: NodeId,
    joints: usize,
) -> ([NodeId; 3], NodeId) {
    let comp = |tape: &mut Tape<F>, k: usize| {
        let idx: Vec<usize> = (0..joints).map(|j| 4 * j + k).collect();
        tape.gather_cols(recon, &idx)
    };
    let w = comp(tape, 0);
    let x = comp(tape, 1);
    let y = comp(tape, 2);
    let z = comp(tape, 3);

    let sq = |tape: &mut Tape<F>, id: NodeId| tape.square(id);
    let w2 = sq(tape, w);
    let x2 = sq(tape, x);
    let y2 = sq(tape, y);
    let z2 = sq(tape, z);
    let sum = tape.add_n(&[w2, x2, y2, z2]);
    let norm = tape.sqrt(sum);

    let safe = tape.max_scalar(norm, F::from_f64(1e-12));
    let uw = tape.div(w, safe);
    let ux = tape.div(x, safe);
    let uy = tape.div(y, safe);
    let uz = tape.div(z, safe);

    let two = F::from_f64(2.0);
    let neg_two = F::from_f64(-2.0);
    let one = F::one();

    let ux2 = sq(tape, ux);
    let uy2 = sq(tape, uy);
    let uz2 = sq(tape, uz);
    // Rotation-matrix entries of a unit quaternion.
    let yz_sum = tape.add(uy2, uz2);
    let r00_s = tape.scale(yz_sum, neg_two);
    let r00 = tape.add_scalar(r00_s, one);
    let xy_sum = tape.add(ux2, uy2);
    let r22_s = tape.scale(xy_sum, neg_two);
    let r22 = tape.add_scalar(r22_s, one);

    let xy = tape.mul(ux, uy);
    let wz = tape.mul(uw, uz);
    let r01_h = tape.sub(xy, wz);
    let r01 = tape.scale(r01_h, two);

    let xz = tape.mul(ux, uz);
    let wy = tape.mul(uw, uy);
    let r02_h = tape.add(xz, wy);
    let r02 = tape.scale(r02_h, two);

    let yz = tape.mul(uy, uz);
    let wx = tape.mul(uw, ux);
    let r12_h = tape.sub(yz, wx);
    let r12 = tape.scale(r12_h, two);

    // ry = asin(R02) with the argument clamped clear of the poles; rx and rz
    // from the adjacent matrix entries.
    let clamped = tape.clamp_sym(r02, F::from_f64(1.0 - 1e-7));
    let ry = tape.asin(clamped);
    let neg_r12 = tape.scale(r12, F::from_f64(-1.0));
    let rx = tape.atan2(neg_r12, r22);
    let neg_r01 = tape.scale(r01, F::from_f64(-1.0));
    let rz = tape.atan2(neg_r01, r00);

    ([rx, ry, rz], norm)
}

/// Appends all loss nodes to a built graph. `targets` supplies the constant
/// tensors; weights follow `LossWeights` and the config's affective flag.
pub(crate) fn add_losses<F: Real>(
    graph: &mut BuiltGraph<F>,
    config: &ModelConfig,
    weights: &LossWeights,
    class_wts: &ClassWeights,
    data: &BatchData<F>,
) -> LossNodes {
    let tape = &mut graph.tape;
    let batch = data.labels.rows();
    let mut terms: Vec<NodeId> = Vec::new();

    let classifier = graph.probs.map(|probs| {
        let y = tape.leaf(data.labels.clone());
        let w = tape.leaf(Tensor::from_f64s(1, CLASS_COUNT, &class_wts.w));
        let ln = tape.ln_clamped(probs);
        let picked = tape.mul(y, ln);
        let weighted = tape.mul_row(picked, w);
        let sum = tape.sum_all(weighted);
        let cl = tape.scale(sum, F::from_f64(-1.0 / batch as f64));
        terms.push(cl);
        cl
    });

    let (angle, quat, affective) = if let Some(recon) = graph.recon {
        let ([rx, ry, rz], norm) = euler_planes(tape, recon, config.joints);
        let mut plane_means = Vec::new();
        for (angle_node, target) in [rx, ry, rz].into_iter().zip(data.euler.iter()) {
            let t = tape.leaf(target.clone());
            let d = tape.sub(angle_node, t);
            let wrapped = tape.wrap_pi(d);
            let sq = tape.square(wrapped);
            plane_means.push(tape.mean_all(sq));
        }
        let plane_sum = tape.add_n(&plane_means);
        let ang = tape.scale(plane_sum, F::from_f64(1.0 / 3.0));
        terms.push(ang);

        let nd = tape.add_scalar(norm, F::from_f64(-1.0));
        let nd2 = tape.square(nd);
        let quat_mean = tape.mean_all(nd2);
        let quat_term = tape.scale(quat_mean, F::from_f64(weights.lambda_quat));
        terms.push(quat_term);

        let affective = if config.use_affective_loss {
            let slice = tape.slice_cols(graph.embedding, 0, config.affective_dim);
            let target = tape.leaf(data.aff.clone());
            let d = tape.sub(slice, target);
            let sq = tape.square(d);
            let aff = tape.mean_all(sq);
            let aff_term = tape.scale(aff, F::from_f64(weights.lambda_aff));
            terms.push(aff_term);
            Some(aff)
        } else {
            None
        };
        (Some(ang), Some(quat_mean), affective)
    } else {
        (None, None, None)
    };

    let total = tape.add_n(&terms);
    LossNodes {
        total,
        classifier,
        angle,
        quat,
        affective,
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct Adam<F: Real> {
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
    steps: i32,
}

impl<F: Real> Adam<F> {
    fn new(n: usize) -> Self {
        Adam {
            m: (0..n).map(|_| None).collect(),
            v: (0..n).map(|_| None).collect(),
            steps: 0,
        }
    }

    fn step(&mut self, model: &mut GaitModel<F>, graph: &BuiltGraph<F>, grads: &Grads<F>, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.steps);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.steps);
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let one_m_b1 = F::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = F::from_f64(1.0 - ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPS);
        let lr_c1 = F::from_f64(lr / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());

        for (i, entry) in model.params.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let Some(g) = grads.get(graph.param_nodes[i]) else {
                continue;
            };
            let m = self.m[i]
                .get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v[i]
                .get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let theta = entry.value.data_mut();
            for ((t, gv), (mv, vv)) in theta
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + one_m_b1 * *gv;
                *vv = b2 * *vv + one_m_b2 * *gv * *gv;
                *t = *t - lr_c1 * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 500,
            batch_size: 32,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

/// One epoch's log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub total_loss: f64,
    pub cl_loss: f64,
    pub ang_loss: f64,
    pub quat_loss: f64,
    pub aff_loss: f64,
    pub lr: f64,
    pub tf_prob: f64,
    /// Validation mAP; NaN when there is no evaluable validation split.
    pub val_map: f64,
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// Renders the epoch log as CSV with a fixed column set.
pub fn epoch_log_csv(rows: &[EpochRow]) -> String {
    let mut out =
        String::from("epoch,total_loss,cl_loss,ang_loss,quat_loss,aff_loss,lr,tf_prob,val_map\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            fmt_float(r.total_loss),
            fmt_float(r.cl_loss),
            fmt_float(r.ang_loss),
            fmt_float(r.quat_loss),
            fmt_float(r.aff_loss),
            fmt_float(r.lr),
            fmt_float(r.tf_prob),
            fmt_float(r.val_map),
        ));
    }
    out
}

pub struct TrainResult<F: Real> {
    /// Parameters after the final epoch.
    pub model: GaitModel<F>,
    /// Snapshot at the best validation mAP (the final model if validation
    /// never produced a comparable score).
    pub best_model: GaitModel<F>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub log: Vec<EpochRow>,
}

fn finite_or_diverged(loss: f64, epoch: usize, step: usize) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::Diverged { epoch, step })
    }
}

/// Trains a fresh model on the dataset's train split, validating per epoch
/// on the validation split.
///
/// The decoder (and with it the whole autoencoder objective) is built unless
/// the configuration disables both hierarchical pooling and the affective
/// constraint *and* the training split has no unlabeled samples — that
/// classifier-only baseline removes the decoder entirely.
pub fn train<F: Real>(
    ds: &Dataset,
    config: ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<F>, TrainError> {
    config.validate()?;

    let train_samples: Vec<&GaitSample> = ds.samples_in(Split::Train).collect();
    let val_samples: Vec<&GaitSample> = ds
        .samples_in(Split::Val)
        .filter(|s| s.is_labeled())
        .collect();

    let mut packs = Vec::with_capacity(train_samples.len());
    for s in &train_samples {
        packs.push(prepare(s, &config)?);
    }
    let labeled: Vec<MultiHotLabel> = train_samples
        .iter()
        .filter_map(|s| s.label_probs.as_ref().map(to_multihot))
        .collect();
    if labeled.is_empty() {
        return Err(TrainError::NoLabeledTrainSamples);
    }
    let class_wts = class_weights(&labeled).expect("non-empty label set");

    let has_unlabeled = packs.iter().any(|p| p.label.is_none());
    let use_decoder =
        config.use_hierarchical_pooling || config.use_affective_loss || has_unlabeled;

    let mut val_packs = Vec::with_capacity(val_samples.len());
    for s in &val_samples {
        val_packs.push(prepare(s, &config)?);
    }
    let val_truths: Vec<MultiHotLabel> = val_samples
        .iter()
        .map(|s| to_multihot(s.label_probs.as_ref().unwrap()))
        .collect();

    let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
    let init_seed = master.gen::<u64>();
    let mut model = GaitModel::<F>::new(config.clone(), init_seed)?;
    let mut adam = Adam::new(model.params.entries.len());

    let mut best: Option<(GaitModel<F>, usize, f64)> = None;
    let mut log = Vec::with_capacity(opts.epochs);
    let mut indices: Vec<usize> = (0..packs.len()).collect();

    for epoch in 0..opts.epochs {
        let lr = learning_rate(epoch);
        let tf_prob = teacher_forcing_prob(epoch);
        indices.shuffle(&mut master);

        let mut sums = [0.0f64; 5]; // total, cl, ang, quat, aff
        let mut seen = 0usize;
        for (step, chunk) in indices.chunks(opts.batch_size.max(1)).enumerate() {
            let batch: Vec<&Pack> = chunk.iter().map(|&i| &packs[i]).collect();
            let data = assemble::<F>(&batch, &config);
            let forced: Vec<bool> = if use_decoder {
                (1..config.time_steps)
                    .map(|_| master.gen::<f64>() < tf_prob)
                    .collect()
            } else {
                Vec::new()
            };
            let mut graph = model.build_graph(
                data.input.clone(),
                GraphOptions {
                    batch: batch.len(),
                    train: true,
                    with_classifier: true,
                    with_decoder: use_decoder,
                    forced,
                    dropout_rng: Some(&mut master),
                },
            );
            let losses = add_losses(&mut graph, &config, &opts.loss_weights, &class_wts, &data);
            let value = |id: Option<NodeId>| -> f64 {
                id.map_or(0.0, |n| graph.tape.value(n).get(0, 0).as_f64())
            };
            let total = finite_or_diverged(value(Some(losses.total)), epoch, step)?;
            let b = batch.len() as f64;
            sums[0] += total * b;
            sums[1] += value(losses.classifier) * b;
            sums[2] += value(losses.angle) * b;
            sums[3] += value(losses.quat) * b;
            sums[4] += value(losses.affective) * b;
            seen += batch.len();

            let grads = graph.tape.backward(losses.total);
            adam.step(&mut model, &graph, &grads, lr);
            model.update_bn_stats(&graph);
        }

        let val_map = if val_packs.is_empty() {
            f64::NAN
        } else {
            let rots: Vec<&RotationTensor> = val_packs.iter().map(|p| &p.rot).collect();
            let probs = model.classify_batch(&rots)?;
            evaluate(&probs, &val_truths).map
        };
        if val_map.is_finite()
            && best.as_ref().map_or(true, |(_, _, b)| val_map > *b)
        {
            best = Some((model.clone(), epoch, val_map));
        }

        let n = seen as f64;
        log.push(EpochRow {
            epoch,
            total_loss: sums[0] / n,
            cl_loss: sums[1] / n,
            ang_loss: sums[2] / n,
            quat_loss: sums[3] / n,
            aff_loss: sums[4] / n,
            lr,
            tf_prob,
            val_map,
        });
    }

    let (best_model, best_epoch, best_val_map) = match best {
        Some((m, e, v)) => (m, e, v),
        None => (model.clone(), opts.epochs.saturating_sub(1), f64::NAN),
    };
    Ok(TrainResult {
        model,
        best_model,
        best_epoch,
        best_val_map,
        log,
    })
}

/// Evaluates a model's per-class AP and mAP on one dataset split
/// (labeled samples only).
pub fn evaluate_split<F: Real>(
    model: &GaitModel<F>,
    ds: &Dataset,
    split: Split,
) -> Result<EvalReport, TrainError> {
    let mut rots = Vec::new();
    let mut truths = Vec::new();
    for s in ds.samples_in(split) {
        let Some(probs) = &s.label_probs else { continue };
        rots.push(sample_rotation(s)?);
        truths.push(to_multihot(probs));
    }
    let mut preds = Vec::with_capacity(rots.len());
    // Chunked batches keep eval memory bounded on large splits.
    for chunk in rots.chunks(128) {
        let refs: Vec<&RotationTensor> = chunk.iter().collect();
        preds.extend(model.classify_batch(&refs)?);
    }
    Ok(evaluate(&preds, &truths))
}

/// Class probabilities for every sample in a split (unlabeled included),
/// in dataset order.
pub fn predict_split<F: Real>(
    model: &GaitModel<F>,
    ds: &Dataset,
    split: Option<Split>,
) -> Result<Vec<(String, [f64; CLASS_COUNT])>, TrainError> {
    let samples: Vec<&GaitSample> = match split {
        Some(sp) => ds.samples_in(sp).collect(),
        None => ds.samples.iter().collect(),
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(128) {
        let mut rots = Vec::with_capacity(chunk.len());
        for s in chunk {
            rots.push(sample_rotation(s)?);
        }
        let refs: Vec<&RotationTensor> = rots.iter().collect();
        let probs = model.classify_batch(&refs)?;
        for (s, p) in chunk.iter().zip(probs) {
            out.push((s.id.clone(), p));
        }
    }
    Ok(out)
}
