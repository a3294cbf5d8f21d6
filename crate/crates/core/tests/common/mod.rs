//! Independent reference implementations shared by the integration tests.
//! The oracles use only the skeleton accessors from the library; the data
//! helpers may use anything.

#![allow(dead_code)]

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsemo_core::dataio::MotionClip;
use sparsemo_core::kinematics::{Rot6D, SkeletonModel, NUM_JOINTS};
use sparsemo_core::signals::{extract_sparse_signals, SparseSignalFrame};

/// Uniformly distributed unit quaternion `(w, x, y, z)` (Shoemake's method).
pub fn random_quaternion<R: Rng>(rng: &mut R) -> [f64; 4] {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * TAU;
    let u3: f64 = rng.gen::<f64>() * TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    [b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin()]
}

/// Rotation matrix of a unit quaternion, written out by hand.
pub fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn random_matrix<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    quat_matrix(random_quaternion(rng))
}

pub fn six_d(m: &Matrix3<f64>) -> Rot6D {
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Global joint positions by chaining explicit 4×4 homogeneous transforms
/// `T_j = T_parent · [R_j | offset_j]`, with the root at `translation + offset_0`.
pub fn homogeneous_fk(skeleton: &SkeletonModel, locals: &[Matrix3<f64>], translation: Vector3<f64>) -> Vec<Vector3<f64>> {
    let mut transforms: Vec<Matrix4<f64>> = Vec::new();
    for j in 0..skeleton.num_joints() {
        let mut local = Matrix4::identity();
        for r in 0..3 {
            for c in 0..3 {
                local[(r, c)] = locals[j][(r, c)];
            }
        }
        let off = skeleton.offsets()[j];
        let t = match skeleton.parent(j) {
            None => off + translation,
            Some(_) => off,
        };
        for r in 0..3 {
            local[(r, 3)] = t[r];
        }
        let global = match skeleton.parent(j) {
            None => local,
            Some(p) => transforms[p] * local,
        };
        transforms.push(global);
    }
    transforms.iter().map(|m| Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])).collect()
}

/// A clip of uniformly random local rotations and translations.
pub fn random_clip<R: Rng>(rng: &mut R, n_frames: usize, joints: usize) -> MotionClip {
    MotionClip {
        fps: 30.0,
        local_rot: (0..n_frames)
            .map(|_| (0..joints).map(|_| six_d(&random_matrix(rng))).collect())
            .collect(),
        root_translation: (0..n_frames)
            .map(|_| Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0)))
            .collect(),
        action_label: None,
        text_embedding: None,
        image_embedding: None,
    }
}

pub const GRID: f64 = 1.0 / (1u64 << 30) as f64;

/// Signals snapped to a 2^-30 m grid, so that shifting by any grid multiple
/// of moderate size is exact in floating point.
pub fn gridded_signals(seed: u64, frames: usize) -> Vec<SparseSignalFrame> {
    let skel = SkeletonModel::smpl_neutral();
    let clip = random_clip(&mut ChaCha8Rng::seed_from_u64(seed), frames, NUM_JOINTS);
    let mut raw = extract_sparse_signals(&skel, &clip).unwrap();
    for f in &mut raw {
        for p in &mut f.positions {
            p.iter_mut().for_each(|v| *v = (*v / GRID).round() * GRID);
        }
    }
    raw
}
