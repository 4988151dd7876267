//! Canonical 21-joint body model: names, parent links, and the five
//! kinematic part groups (arms, legs, torso) used for hierarchical pooling.
//!
//! The canonical numbering is a fixed convention of this crate (documented
//! in the README); capture rigs with other joint sets are converted with a
//! [`JointMap`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical joint indices. The ordering is part of the on-disk contract:
/// dataset frames, rotation tensors, and model inputs all use it.
pub mod joint {
    pub const ROOT: usize = 0;
    pub const LOWER_BACK: usize = 1;
    pub const SPINE: usize = 2;
    pub const CHEST: usize = 3;
    pub const NECK: usize = 4;
    pub const HEAD: usize = 5;
    pub const HEAD_TOP: usize = 6;
    pub const LEFT_SHOULDER: usize = 7;
    pub const LEFT_ELBOW: usize = 8;
    pub const LEFT_HAND: usize = 9;
    pub const LEFT_HAND_INDEX: usize = 10;
    pub const RIGHT_SHOULDER: usize = 11;
    pub const RIGHT_ELBOW: usize = 12;
    pub const RIGHT_HAND: usize = 13;
    pub const RIGHT_HAND_INDEX: usize = 14;
    pub const LEFT_HIP: usize = 15;
    pub const LEFT_KNEE: usize = 16;
    pub const LEFT_TOE: usize = 17;
    pub const RIGHT_HIP: usize = 18;
    pub const RIGHT_KNEE: usize = 19;
    pub const RIGHT_TOE: usize = 20;
}

/// Number of joints in the canonical skeleton.
pub const JOINT_COUNT: usize = 21;

const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "root",
    "lower_back",
    "spine",
    "chest",
    "neck",
    "head",
    "head_top",
    "left_shoulder",
    "left_elbow",
    "left_hand",
    "left_hand_index",
    "right_shoulder",
    "right_elbow",
    "right_hand",
    "right_hand_index",
    "left_hip",
    "left_knee",
    "left_toe",
    "right_hip",
    "right_knee",
    "right_toe",
];

/// Parent of each canonical joint (`None` for the root).
const PARENTS: [Option<usize>; JOINT_COUNT] = [
    None,                        // root
    Some(joint::ROOT),           // lower_back
    Some(joint::LOWER_BACK),     // spine
    Some(joint::SPINE),          // chest
    Some(joint::CHEST),          // neck
    Some(joint::NECK),           // head
    Some(joint::HEAD),           // head_top
    Some(joint::CHEST),          // left_shoulder
    Some(joint::LEFT_SHOULDER),  // left_elbow
    Some(joint::LEFT_ELBOW),     // left_hand
    Some(joint::LEFT_HAND),      // left_hand_index
    Some(joint::CHEST),          // right_shoulder
    Some(joint::RIGHT_SHOULDER), // right_elbow
    Some(joint::RIGHT_ELBOW),    // right_hand
    Some(joint::RIGHT_HAND),     // right_hand_index
    Some(joint::ROOT),           // left_hip
    Some(joint::LEFT_HIP),       // left_knee
    Some(joint::LEFT_KNEE),      // left_toe
    Some(joint::ROOT),           // right_hip
    Some(joint::RIGHT_HIP),      // right_knee
    Some(joint::RIGHT_KNEE),     // right_toe
];

/// The five kinematic part groups, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartId {
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
    Torso,
}

impl PartId {
    pub const ALL: [PartId; 5] = [
        PartId::LeftArm,
        PartId::RightArm,
        PartId::LeftLeg,
        PartId::RightLeg,
        PartId::Torso,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartId::LeftArm => "left_arm",
            PartId::RightArm => "right_arm",
            PartId::LeftLeg => "left_leg",
            PartId::RightLeg => "right_leg",
            PartId::Torso => "torso",
        }
    }
}

/// A body model: joint names, tree structure, and part grouping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// Parent index per joint; `None` exactly for the root.
    pub parent: Vec<Option<usize>>,
    pub part_groups: BTreeMap<PartId, Vec<usize>>,
}

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("expected {JOINT_COUNT} joints, found {0}")]
    JointCount(usize),
    #[error("joint {0} has parent index {1} out of range")]
    ParentRange(usize, usize),
    #[error("expected exactly one root joint, found {0}")]
    RootCount(usize),
    #[error("joint {0} does not reach the root by parent links")]
    NotATree(usize),
    #[error("part groups do not partition the joint set (joint {0} appears {1} times)")]
    NotAPartition(usize, usize),
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    /// Part group containing joint `j`.
    pub fn part_of(&self, j: usize) -> PartId {
        for (&part, members) in &self.part_groups {
            if members.contains(&j) {
                return part;
            }
        }
        unreachable!("validated skeletons partition the joint set")
    }

    /// Per-joint part index into [`PartId::ALL`] order.
    pub fn part_assignment(&self) -> Vec<usize> {
        (0..self.joint_count())
            .map(|j| PartId::ALL.iter().position(|&p| p == self.part_of(j)).unwrap())
            .collect()
    }

    /// Endpoints `(tail, head)` of the bone attached to joint `j`, so the
    /// bone vector is `pos[head] - pos[tail]`. Non-root joints use their
    /// parent link; the root uses the edge to its spine-side child.
    pub fn bone_endpoints(&self, j: usize) -> (usize, usize) {
        match self.parent[j] {
            Some(p) => (p, j),
            None => {
                let child = self
                    .parent
                    .iter()
                    .position(|&p| p == Some(j))
                    .expect("root has at least one child");
                (j, child)
            }
        }
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        let n = self.joint_names.len();
        if n != JOINT_COUNT || self.parent.len() != n {
            return Err(SkeletonError::JointCount(n.max(self.parent.len())));
        }
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(SkeletonError::RootCount(roots));
        }
        for (j, &p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                if p >= n {
                    return Err(SkeletonError::ParentRange(j, p));
                }
            }
        }
        for j in 0..n {
            let mut cur = j;
            let mut steps = 0;
            while let Some(p) = self.parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(SkeletonError::NotATree(j));
                }
            }
        }
        let mut hits = vec![0usize; n];
        for members in self.part_groups.values() {
            for &j in members {
                if j >= n {
                    return Err(SkeletonError::NotAPartition(j, 0));
                }
                hits[j] += 1;
            }
        }
        if let Some(j) = hits.iter().position(|&c| c != 1) {
            return Err(SkeletonError::NotAPartition(j, hits[j]));
        }
        Ok(())
    }
}

/// The fixed 21-joint skeleton used throughout the crate.
pub fn canonical_skeleton() -> Skeleton {
    use joint::*;
    let mut part_groups = BTreeMap::new();
    part_groups.insert(
        PartId::LeftArm,
        vec![LEFT_SHOULDER, LEFT_ELBOW, LEFT_HAND, LEFT_HAND_INDEX],
    );
    part_groups.insert(
        PartId::RightArm,
        vec![RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_HAND, RIGHT_HAND_INDEX],
    );
    part_groups.insert(PartId::LeftLeg, vec![LEFT_HIP, LEFT_KNEE, LEFT_TOE]);
    part_groups.insert(PartId::RightLeg, vec![RIGHT_HIP, RIGHT_KNEE, RIGHT_TOE]);
    part_groups.insert(
        PartId::Torso,
        vec![ROOT, LOWER_BACK, SPINE, CHEST, NECK, HEAD, HEAD_TOP],
    );
    Skeleton {
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        parent: PARENTS.to_vec(),
        part_groups,
    }
}

/// Conversion table from a foreign capture rig onto the canonical joints.
///
/// `source_names` fixes the joint order of the foreign rig's frames;
/// `target_index` maps each source joint to a canonical index, or to
/// `null`/`None` to drop it. Every canonical joint must be covered by
/// exactly one retained source joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMap {
    pub source_names: Vec<String>,
    pub target_index: BTreeMap<String, Option<usize>>,
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("frame has {got} joints but the joint map lists {expected} source joints")]
    FrameLength { expected: usize, got: usize },
    #[error("source joint `{0}` has no mapping entry")]
    MissingEntry(String),
    #[error("canonical joint index {0} out of range (must be < {JOINT_COUNT})")]
    IndexOutOfRange(usize),
    #[error("canonical joint `{0}` is not covered by any source joint")]
    MissingCanonical(&'static str),
    #[error("canonical joint `{0}` is covered by more than one source joint")]
    DuplicateCanonical(&'static str),
}

impl JointMap {
    /// Identity map for data already in canonical order.
    pub fn identity() -> JointMap {
        let source_names: Vec<String> = JOINT_NAMES.iter().map(|s| s.to_string()).collect();
        let target_index = source_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), Some(i)))
            .collect();
        JointMap {
            source_names,
            target_index,
        }
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let mut hits = [0usize; JOINT_COUNT];
        for name in &self.source_names {
            match self.target_index.get(name) {
                None => return Err(MappingError::MissingEntry(name.clone())),
                Some(None) => {}
                Some(Some(idx)) => {
                    if *idx >= JOINT_COUNT {
                        return Err(MappingError::IndexOutOfRange(*idx));
                    }
                    hits[*idx] += 1;
                }
            }
        }
        for (idx, &count) in hits.iter().enumerate() {
            if count == 0 {
                return Err(MappingError::MissingCanonical(JOINT_NAMES[idx]));
            }
            if count > 1 {
                return Err(MappingError::DuplicateCanonical(JOINT_NAMES[idx]));
            }
        }
        Ok(())
    }
}

/// Reorder one frame of foreign-rig positions into canonical joint order,
/// dropping unmapped source joints.
pub fn remap_pose(
    frame: &[[f64; 3]],
    map: &JointMap,
) -> Result<[[f64; 3]; JOINT_COUNT], MappingError> {
    if frame.len() != map.source_names.len() {
        return Err(MappingError::FrameLength {
            expected: map.source_names.len(),
            got: frame.len(),
        });
    }
    map.validate()?;
    let mut out = [[0.0; 3]; JOINT_COUNT];
    for (i, name) in map.source_names.iter().enumerate() {
        if let Some(Some(idx)) = map.target_index.get(name) {
            out[*idx] = frame[i];
        }
    }
    Ok(out)
}
