//! Sparse tracking signals: extraction from full-body motion, velocity
//! augmentation, and horizontal normalisation.
//!
//! An augmented frame is 54 values laid out as
//! `[positions (9) | position deltas (9) | rotations 6D (18) | rotation deltas 6D (18)]`,
//! each block ordered head, left hand, right hand. Velocities are per-frame
//! deltas (meters per frame), not per-second rates.

use nalgebra::Vector3;

use crate::dataio::MotionClip;
use crate::error::{Error, Result};
use crate::kinematics::{angular_delta_6d, forward_kinematics, Rot6D, SkeletonModel};

pub const SIGNAL_DIM: usize = 54;
pub const POS: usize = 0;
pub const VEL: usize = 9;
pub const ROT: usize = 18;
pub const ANG_VEL: usize = 36;

/// Raw device signal for one frame: global positions and rotations of the
/// head and both hands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseSignalFrame {
    pub positions: [Vector3<f64>; 3],
    pub rotations: [Rot6D; 3],
}

impl SparseSignalFrame {
    pub fn shifted(&self, dx: f64, dz: f64) -> Self {
        let mut s = *self;
        for p in &mut s.positions {
            p.x += dx;
            p.z += dz;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedSignalFrame(pub [f64; SIGNAL_DIM]);

impl AugmentedSignalFrame {
    pub fn position(&self, j: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[POS + 3 * j..POS + 3 * j + 3])
    }

    pub fn velocity(&self, j: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[VEL + 3 * j..VEL + 3 * j + 3])
    }

    pub fn rotation(&self, j: usize) -> Rot6D {
        Rot6D::from_slice(&self.0[ROT + 6 * j..])
    }

    pub fn angular_velocity(&self, j: usize) -> Rot6D {
        Rot6D::from_slice(&self.0[ANG_VEL + 6 * j..])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMotionSequence {
    pub frames: Vec<AugmentedSignalFrame>,
    pub fps: f64,
}

impl SparseMotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `end + 1 - len ..= end`, left-padded by repeating frame 0
    /// where the window reaches before the start of the sequence.
    pub fn padded_window(&self, end: usize, len: usize) -> Vec<&AugmentedSignalFrame> {
        (0..len)
            .map(|i| {
                let t = (end + i + 1).saturating_sub(len);
                &self.frames[t]
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.0).collect()
    }
}

fn write_delta_block(out: &mut [f64; SIGNAL_DIM], cur: &SparseSignalFrame, prev: &SparseSignalFrame) -> Result<()> {
    for j in 0..3 {
        let dv = cur.positions[j] - prev.positions[j];
        out[VEL + 3 * j..VEL + 3 * j + 3].copy_from_slice(dv.as_slice());
        let dr = angular_delta_6d(&prev.rotations[j], &cur.rotations[j])?;
        out[ANG_VEL + 6 * j..ANG_VEL + 6 * j + 6].copy_from_slice(&dr.0);
    }
    Ok(())
}

/// Adds per-frame positional and angular velocities. Frame 0 reuses frame
/// 1's velocities; a single-frame input gets zero motion.
pub fn augment(raw: &[SparseSignalFrame], fps: f64) -> Result<SparseMotionSequence> {
    if raw.is_empty() {
        return Err(Error::InsufficientFrames("augment needs at least one frame".into()));
    }
    let mut frames = Vec::with_capacity(raw.len());
    for (t, cur) in raw.iter().enumerate() {
        let mut x = [0.0; SIGNAL_DIM];
        for j in 0..3 {
            x[POS + 3 * j..POS + 3 * j + 3].copy_from_slice(cur.positions[j].as_slice());
            cur.rotations[j].decode()?;
            x[ROT + 6 * j..ROT + 6 * j + 6].copy_from_slice(&cur.rotations[j].0);
        }
        match t {
            0 if raw.len() == 1 => {
                for j in 0..3 {
                    x[ANG_VEL + 6 * j..ANG_VEL + 6 * j + 6].copy_from_slice(&Rot6D::IDENTITY.0);
                }
            }
            0 => write_delta_block(&mut x, &raw[1], &raw[0])?,
            _ => write_delta_block(&mut x, cur, &raw[t - 1])?,
        }
        frames.push(AugmentedSignalFrame(x));
    }
    Ok(SparseMotionSequence { frames, fps })
}

/// Subtracts the mean horizontal (x, z) position of the three tracked
/// joints from each of them; heights and all other blocks are untouched.
///
/// The centred coordinate of joint `j` is computed as
/// `((g_j - g_0) + (g_j - g_1) + (g_j - g_2)) / 3`, i.e. only from
/// differences of inputs. Shifting every input by the same amount therefore
/// gives bitwise-identical output whenever the shifted inputs are exact.
pub fn normalize_frame(frame: &AugmentedSignalFrame) -> AugmentedSignalFrame {
    let mut out = *frame;
    for axis in [0, 2] {
        let v = [frame.0[POS + axis], frame.0[POS + 3 + axis], frame.0[POS + 6 + axis]];
        for j in 0..3 {
            out.0[POS + 3 * j + axis] = ((v[j] - v[0]) + (v[j] - v[1]) + (v[j] - v[2])) / 3.0;
        }
    }
    out
}

pub fn normalize_horizontal(seq: &SparseMotionSequence) -> SparseMotionSequence {
    SparseMotionSequence {
        frames: seq.frames.iter().map(normalize_frame).collect(),
        fps: seq.fps,
    }
}

/// Global positions and rotations of the tracked joints, frame by frame,
/// including the root translation.
pub fn extract_sparse_signals(skeleton: &SkeletonModel, motion: &MotionClip) -> Result<Vec<SparseSignalFrame>> {
    if motion.n_frames() == 0 {
        return Err(Error::InsufficientFrames("motion has no frames".into()));
    }
    let tracked = skeleton.tracked_joints();
    (0..motion.n_frames())
        .map(|t| {
            let g = forward_kinematics(skeleton, &motion.pose(t))?;
            Ok(SparseSignalFrame {
                positions: tracked.map(|j| g.positions[j]),
                rotations: tracked.map(|j| Rot6D::encode(&g.rotations[j])),
            })
        })
        .collect()
}

pub fn shift_horizontal(raw: &[SparseSignalFrame], dx: f64, dz: f64) -> Vec<SparseSignalFrame> {
    raw.iter().map(|f| f.shifted(dx, dz)).collect()
}
