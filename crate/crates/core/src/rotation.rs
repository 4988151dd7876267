//! Quaternion algebra and rotation extraction from position data.
//!
//! Each joint's pose change from the first frame to frame `t` is encoded as
//! the shortest-arc rotation between the joint's bone vector (joint minus
//! parent) in the two frames. Rotations are kept as hemisphere-normalized
//! unit quaternions (scalar part `w >= 0`); the quaternion-to-Euler
//! conversion backs the angle reconstruction loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::Skeleton;

/// Vector norms below this count as degenerate (zero-padding artifacts).
pub const DEGENERACY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit quaternion with the same direction; `None` for the zero quaternion.
    pub fn normalized(self) -> Option<Quat> {
        let n = self.norm();
        if n < 1e-12 {
            return None;
        }
        Some(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Quat) -> Quat {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quat::new(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )
    }

    /// Rotate a 3-vector by this (unit) quaternion.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let p = Quat::new(0.0, v[0], v[1], v[2]);
        let r = self.mul(p).mul(self.conjugate());
        [r.x, r.y, r.z]
    }

    /// Rotation angle in [0, π] of a unit quaternion.
    pub fn angle(self) -> f64 {
        2.0 * self.w.clamp(-1.0, 1.0).acos()
    }
}

/// Euclidean 4-norm of a quaternion.
pub fn quat_norm(q: Quat) -> f64 {
    q.norm()
}

/// Minimal rotation taking `u` onto `v` (directions; lengths are ignored).
///
/// Total by construction: a degenerate input (norm < 1e-8) yields the
/// identity, and the antipodal case rotates π about a deterministic axis
/// orthogonal to `u` (the cross with global up `(0,1,0)`, or `(1,0,0)` when
/// `u` is parallel to up). The result always has `w >= 0`.
pub fn shortest_arc(u: [f64; 3], v: [f64; 3]) -> Quat {
    let nu = norm3(u);
    let nv = norm3(v);
    if nu < DEGENERACY_EPS || nv < DEGENERACY_EPS {
        return Quat::IDENTITY;
    }
    let un = [u[0] / nu, u[1] / nu, u[2] / nu];
    let vn = [v[0] / nv, v[1] / nv, v[2] / nv];
    let c = dot3(un, vn);
    if 1.0 + c < 1e-12 {
        // Antipodal: any axis orthogonal to u rotates u onto -u by π.
        let mut axis = cross3(un, [0.0, 1.0, 0.0]);
        if norm3(axis) < DEGENERACY_EPS {
            axis = [1.0, 0.0, 0.0];
        }
        let n = norm3(axis);
        return Quat::new(0.0, axis[0] / n, axis[1] / n, axis[2] / n);
    }
    let cr = cross3(un, vn);
    Quat::new(1.0 + c, cr[0], cr[1], cr[2])
        .normalized()
        .expect("1 + c bounded away from zero")
}

/// Per-joint rotations from the first frame to every frame: `J x T`
/// quaternions, unit norm, hemisphere-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationTensor {
    joints: usize,
    steps: usize,
    /// Indexed `[joint * steps + t]`.
    quats: Vec<Quat>,
}

impl RotationTensor {
    pub fn identity(joints: usize, steps: usize) -> RotationTensor {
        RotationTensor {
            joints,
            steps,
            quats: vec![Quat::IDENTITY; joints * steps],
        }
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, joint: usize, t: usize) -> Quat {
        self.quats[joint * self.steps + t]
    }

    pub fn set(&mut self, joint: usize, t: usize, q: Quat) {
        self.quats[joint * self.steps + t] = q;
    }
}

/// Bone vector of joint `j` in one frame: head minus tail of the joint's
/// parent edge (root uses the edge to its spine-side child).
fn bone(frame: &[[f64; 3]], skel: &Skeleton, j: usize) -> [f64; 3] {
    let (tail, head) = skel.bone_endpoints(j);
    [
        frame[head][0] - frame[tail][0],
        frame[head][1] - frame[tail][1],
        frame[head][2] - frame[tail][2],
    ]
}

/// Rotation of every joint's bone from frame 0 to each frame `t`.
///
/// Frame 0 maps to the identity for every joint; degenerate bones (for
/// example from zero-padded frames) also yield the identity.
pub fn extract_rotations(positions: &[Vec<[f64; 3]>], skel: &Skeleton) -> RotationTensor {
    let steps = positions.len();
    let joints = skel.joint_count();
    let mut out = RotationTensor::identity(joints, steps);
    for j in 0..joints {
        let base = bone(&positions[0], skel, j);
        for (t, frame) in positions.iter().enumerate() {
            out.set(j, t, shortest_arc(base, bone(frame, skel, j)));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum EulerError {
    #[error("cannot convert a zero quaternion to Euler angles")]
    DegenerateQuat,
}

/// Intrinsic X-Y-Z Euler angles of a rotation, each mapped into [0, 2π).
///
/// The rotation matrix convention is `R = Rx(rx) * Ry(ry) * Rz(rz)` acting
/// on column vectors. At gimbal lock (`|sin ry| = 1`) the split between
/// `rx` and `rz` is fixed by the convention `rz = 0`.
pub fn quat_to_euler(q: Quat) -> Result<(f64, f64, f64), EulerError> {
    let q = q.normalized().ok_or(EulerError::DegenerateQuat)?;
    let m = unit_quat_to_matrix(q);
    let sy = m[0][2].clamp(-1.0, 1.0);
    let (rx, ry, rz);
    if sy.abs() >= 1.0 - 1e-9 {
        ry = sy.asin();
        rx = (sy * m[1][0]).atan2(m[1][1]);
        rz = 0.0;
    } else {
        ry = sy.asin();
        rx = (-m[1][2]).atan2(m[2][2]);
        rz = (-m[0][1]).atan2(m[0][0]);
    }
    Ok((wrap_2pi(rx), wrap_2pi(ry), wrap_2pi(rz)))
}

/// Map an angle into [0, 2π).
pub fn wrap_2pi(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r >= two_pi {
        0.0
    } else {
        r
    }
}

/// Rotation matrix of a unit quaternion (row-major).
pub(crate) fn unit_quat_to_matrix(q: Quat) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}
