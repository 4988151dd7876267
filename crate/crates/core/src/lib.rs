//! Classify perceived emotion (happy, sad, angry, neutral) from 3D gait
//! sequences.
//!
//! The pipeline: raw per-frame joint positions are resampled to a fixed
//! length, converted to per-joint rotation quaternions, and fed to a
//! recurrent autoencoder whose encoder pools joint features hierarchically
//! (joints -> body parts -> whole body) into a fixed-width embedding.
//! A lightweight classifier head reads the embedding per time step; the
//! decoder reconstructs the rotation sequence. Training mixes a weighted
//! multi-label classification loss on labeled samples with reconstruction
//! and embedding-regression losses on all samples, so unlabeled gaits still
//! shape the representation. The leading rows of the embedding are trained
//! to match hand-designed posture/movement features with known affective
//! correlates.

pub mod affective;
pub mod autodiff;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod rotation;
pub mod skeleton;
pub mod synth;
pub mod training;

pub use affective::{extract_affective, AffectiveMatrix};
pub use dataset::{load_dataset, preprocess_temporal, save_dataset, split_dataset, Dataset, GaitSample};
pub use metrics::{average_precision, class_weights, evaluate, to_multihot, Emotion, EvalReport};
pub use rotation::{extract_rotations, quat_to_euler, shortest_arc, Quat, RotationTensor};
pub use skeleton::{canonical_skeleton, remap_pose, JointMap, Skeleton};
pub use synth::generate_synthetic;
