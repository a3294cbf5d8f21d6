//! Rotation representations and forward kinematics over the body skeleton.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsemo_nn::KinematicTree;

use crate::error::{Error, Result};

/// Number of body joints predicted and animated.
pub const NUM_JOINTS: usize = 22;
pub const HEAD: usize = 15;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;

const ORTHO_TOL: f64 = 1e-6;
const DEGENERATE_EPS: f64 = 1e-9;

/// A proper rotation stored as a 3×3 orthonormal matrix with det +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality (Frobenius error of `RᵀR - I`) and the
    /// determinant, both within 1e-6.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !(ortho <= ORTHO_TOL) || !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::InvalidRotation(format!(
                "orthonormality error {ortho:e}, determinant {det}"
            )));
        }
        Ok(Self(m))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self(*Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    /// From a rotation vector (axis scaled by angle in radians).
    pub fn from_scaled_axis(v: Vector3<f64>) -> Self {
        Self(*Rotation3::from_scaled_axis(v).matrix())
    }

    pub fn to_scaled_axis(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Frobenius distance between the two matrices.
    pub fn distance(&self, other: &Rotation) -> f64 {
        (self.0 - other.0).norm()
    }
}

/// Continuous 6D rotation encoding: the first two COLUMNS of the rotation
/// matrix, concatenated. `v = [R00, R10, R20, R01, R11, R21]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(v: &[f64]) -> Self {
        let mut a = [0.0; 6];
        a.copy_from_slice(&v[..6]);
        Self(a)
    }

    pub fn as_array(&self) -> &[f64; 6] {
        &self.0
    }

    pub fn decode(&self) -> Result<Rotation> {
        rot6d_decode(self)
    }

    pub fn encode(r: &Rotation) -> Self {
        rot6d_encode(r)
    }
}

/// Gram–Schmidt decoding. The third column is the cross product of the
/// first two orthonormalised columns.
pub fn rot6d_decode(v: &Rot6D) -> Result<Rotation> {
    let a1 = Vector3::new(v.0[0], v.0[1], v.0[2]);
    let a2 = Vector3::new(v.0[3], v.0[4], v.0[5]);
    if !v.0.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateInput(format!("non-finite 6D rotation {:?}", v.0)));
    }
    let n1 = a1.norm();
    if n1 <= DEGENERATE_EPS {
        return Err(Error::DegenerateInput(format!("first column has norm {n1:e}")));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 <= DEGENERATE_EPS {
        return Err(Error::DegenerateInput(format!(
            "columns are parallel (orthogonal residual {n2:e})"
        )));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation(Matrix3::from_columns(&[b1, b2, b3])))
}

pub fn rot6d_encode(r: &Rotation) -> Rot6D {
    let m = &r.0;
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Per-frame relative rotation `R_curr · R_prevᵀ`, in 6D form.
pub fn angular_delta_6d(prev: &Rot6D, curr: &Rot6D) -> Result<Rot6D> {
    let p = prev.decode()?;
    let c = curr.decode()?;
    Ok(rot6d_encode(&c.compose(&p.inverse())))
}

/// Tracked joint indices, in `[head, left hand, right hand]` order.
pub type TrackedJoints = [usize; 3];

#[derive(Debug, Serialize, Deserialize)]
struct SkeletonFile {
    format_version: u32,
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
    leg_joints: Vec<usize>,
    tracked_joints: TrackedJoints,
}

/// Fixed kinematic tree with rest-pose bone offsets in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonModel {
    parents: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
    leg_joints: Vec<usize>,
    tracked: TrackedJoints,
}

const CANONICAL_SKELETON: &str = include_str!("../data/smpl_neutral_skeleton.toml");

impl SkeletonModel {
    /// General constructor. Joint 0 must be the only root and every parent
    /// index must be smaller than its child's. Leg joints may not include a
    /// tracked joint.
    pub fn new(parents: Vec<Option<usize>>, offsets: Vec<Vector3<f64>>, leg_joints: Vec<usize>, tracked: TrackedJoints) -> Result<Self> {
        let n = parents.len();
        if n == 0 || offsets.len() != n {
            return Err(Error::InvalidSkeleton(format!("{n} parents vs {} offsets", offsets.len())));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {j} has parent {p}; parents must precede their children"
                    )))
                }
                None => return Err(Error::InvalidSkeleton(format!("joint {j} has no parent; only joint 0 may be a root"))),
            }
        }
        if let Some(t) = tracked.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidSkeleton(format!("tracked joint {t} out of range")));
        }
        if let Some(l) = leg_joints.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidSkeleton(format!("leg joint {l} out of range")));
        }
        if let Some(l) = leg_joints.iter().find(|l| tracked.contains(l)) {
            return Err(Error::InvalidSkeleton(format!("leg joint {l} is also a tracked joint")));
        }
        if offsets.iter().any(|o| !o.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidSkeleton("non-finite offset".into()));
        }
        Ok(Self {
            parents,
            offsets,
            leg_joints,
            tracked,
        })
    }

    /// The shipped 22-joint neutral body.
    pub fn smpl_neutral() -> Self {
        Self::from_toml_str(CANONICAL_SKELETON).expect("bundled skeleton is valid")
    }

    /// Parses a skeleton document. Files describe the 22-joint body and must
    /// list at least six leg joints.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let skel = Self::from_toml_str_generic(s)?;
        if skel.num_joints() != NUM_JOINTS {
            return Err(Error::InvalidSkeleton(format!("expected {NUM_JOINTS} joints, found {}", skel.num_joints())));
        }
        if skel.leg_joints.len() < 6 {
            return Err(Error::InvalidSkeleton(format!("need at least 6 leg joints, found {}", skel.leg_joints.len())));
        }
        Ok(skel)
    }

    /// Parses a skeleton document of any size, applying only the structural
    /// checks of [`SkeletonModel::new`].
    pub fn from_toml_str_generic(s: &str) -> Result<Self> {
        let f: SkeletonFile = toml::from_str(s).map_err(|e| Error::Parse {
            location: e.span().map(|r| format!("byte {}", r.start)).unwrap_or_else(|| "skeleton".into()),
            message: e.message().to_string(),
        })?;
        if f.format_version != 1 {
            return Err(Error::Version {
                found: f.format_version.to_string(),
                supported: 1,
            });
        }
        let parents = f
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let offsets = f.offsets.iter().map(|o| Vector3::new(o[0], o[1], o[2])).collect();
        Self::new(parents, offsets, f.leg_joints, f.tracked_joints)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        let f = SkeletonFile {
            format_version: 1,
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            offsets: self.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
            leg_joints: self.leg_joints.clone(),
            tracked_joints: self.tracked,
        };
        toml::to_string(&f).expect("skeleton serialises")
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn leg_joints(&self) -> &[usize] {
        &self.leg_joints
    }

    pub fn tracked_joints(&self) -> TrackedJoints {
        self.tracked
    }

    pub fn with_leg_joints(mut self, legs: Vec<usize>) -> Result<Self> {
        let parents = std::mem::take(&mut self.parents);
        let offsets = std::mem::take(&mut self.offsets);
        Self::new(parents, offsets, legs, self.tracked)
    }

    /// Short content hash of the tree and offsets.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (p, o) in self.parents.iter().zip(&self.offsets) {
            h.update(p.map_or(-1i64, |p| p as i64).to_le_bytes());
            for x in o.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// The same tree in the form the autodiff engine consumes.
    pub fn kinematic_tree(&self) -> Arc<KinematicTree> {
        let parents = self.parents.iter().map(|p| p.unwrap_or(0)).collect();
        let offsets = self.offsets.iter().map(|o| [o.x, o.y, o.z]).collect();
        Arc::new(KinematicTree::new(parents, offsets).expect("validated skeleton"))
    }
}

/// Local joint rotations plus root translation for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FullPose {
    pub local_rot: Vec<Rot6D>,
    pub root_translation: Vector3<f64>,
}

impl FullPose {
    pub fn rest(num_joints: usize) -> Self {
        Self {
            local_rot: vec![Rot6D::IDENTITY; num_joints],
            root_translation: Vector3::zeros(),
        }
    }
}

/// Global joint positions and rotations of one frame.
#[derive(Clone, Debug)]
pub struct GlobalPose {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Rotation>,
}

/// `global_rot[j] = global_rot[parent] · local_rot[j]`,
/// `global_pos[j] = global_pos[parent] + global_rot[parent] · offset[j]`;
/// the root sits at `root_translation + offset[0]`.
pub fn forward_kinematics(skeleton: &SkeletonModel, pose: &FullPose) -> Result<GlobalPose> {
    let n = skeleton.num_joints();
    if pose.local_rot.len() != n {
        return Err(Error::Shape(format!("pose has {} rotations for {n} joints", pose.local_rot.len())));
    }
    let locals = pose.local_rot.iter().map(Rot6D::decode).collect::<Result<Vec<_>>>()?;
    Ok(forward_kinematics_decoded(skeleton, &locals, &pose.root_translation))
}

pub fn forward_kinematics_decoded(skeleton: &SkeletonModel, locals: &[Rotation], root_translation: &Vector3<f64>) -> GlobalPose {
    let n = skeleton.num_joints();
    let mut positions = Vec::with_capacity(n);
    let mut rotations: Vec<Rotation> = Vec::with_capacity(n);
    for j in 0..n {
        match skeleton.parent(j) {
            None => {
                rotations.push(locals[j]);
                positions.push(root_translation + skeleton.offsets[j]);
            }
            Some(p) => {
                let gp = rotations[p];
                rotations.push(gp.compose(&locals[j]));
                positions.push(positions[p] + gp.apply(&skeleton.offsets[j]));
            }
        }
    }
    GlobalPose { positions, rotations }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    #[test]
    fn identity_and_scaled_identity_decode() {
        let id = Rotation::identity();
        assert_eq!(Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).decode().unwrap(), id);
        assert_eq!(Rot6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).decode().unwrap(), id);
        assert_eq!(rot6d_encode(&id), Rot6D::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z_encodes_its_columns() {
        let r = Rotation::from_axis_angle(&Vector3::z(), FRAC_PI_2);
        let v = rot6d_encode(&r).0;
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        for v in [
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 2.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, -3.0, -3.0, 0.0],
            [f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0],
        ] {
            assert!(matches!(Rot6D(v).decode(), Err(Error::DegenerateInput(_))), "{v:?}");
        }
    }

    #[test]
    fn from_matrix_rejects_reflections_and_shears() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Rotation::from_matrix(reflect).is_err());
        let mut shear = Matrix3::identity();
        shear[(0, 1)] = 0.01;
        assert!(Rotation::from_matrix(shear).is_err());
        assert!(Rotation::from_matrix(*Rotation::from_scaled_axis(Vector3::new(0.3, -1.0, 2.0)).matrix()).is_ok());
    }

    #[test]
    fn angular_delta_of_equal_rotations_is_identity() {
        let r = Rot6D::encode(&Rotation::from_scaled_axis(Vector3::new(0.2, 0.5, -0.1)));
        let d = angular_delta_6d(&r, &r).unwrap();
        for (a, b) in d.0.iter().zip(Rot6D::IDENTITY.0) {
            assert!((a - b).abs() < 1e-12);
        }
        let z90 = Rot6D::encode(&Rotation::from_axis_angle(&Vector3::z(), FRAC_PI_2));
        let d = angular_delta_6d(&Rot6D::IDENTITY, &z90).unwrap();
        for (a, b) in d.0.iter().zip(z90.0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn canonical_skeleton_is_valid() {
        let s = SkeletonModel::smpl_neutral();
        assert_eq!(s.num_joints(), NUM_JOINTS);
        assert_eq!(s.tracked_joints(), [HEAD, LEFT_WRIST, RIGHT_WRIST]);
        assert_eq!(s.leg_joints(), &[1, 2, 4, 5, 7, 8, 10, 11]);
        let again = SkeletonModel::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.hash(), s.hash());
    }

    #[test]
    fn skeleton_file_errors() {
        let good = SkeletonModel::smpl_neutral().to_toml_string();
        let cyclic = good.replacen("parents = [-1, 0, 0,", "parents = [-1, 2, 0,", 1);
        assert!(matches!(SkeletonModel::from_toml_str(&cyclic), Err(Error::InvalidSkeleton(_))));
        let bad_legs = good.replace("leg_joints = [1, 2, 4, 5, 7, 8, 10, 11]", "leg_joints = [1, 2, 4, 5, 7, 15]");
        assert!(matches!(SkeletonModel::from_toml_str(&bad_legs), Err(Error::InvalidSkeleton(_))));
        let few_legs = good.replace("leg_joints = [1, 2, 4, 5, 7, 8, 10, 11]", "leg_joints = [1, 2]");
        assert!(matches!(SkeletonModel::from_toml_str(&few_legs), Err(Error::InvalidSkeleton(_))));
        assert!(matches!(SkeletonModel::from_toml_str("parents = ["), Err(Error::Parse { .. })));
        let v2 = good.replace("format_version = 1", "format_version = 2");
        assert!(matches!(SkeletonModel::from_toml_str(&v2), Err(Error::Version { .. })));
    }

    #[test]
    fn rest_pose_positions_are_cumulative_offsets() {
        let s = SkeletonModel::smpl_neutral();
        let g = forward_kinematics(&s, &FullPose::rest(NUM_JOINTS)).unwrap();
        for j in 0..NUM_JOINTS {
            let mut expected = Vector3::zeros();
            let mut k = Some(j);
            while let Some(i) = k {
                expected += s.offsets()[i];
                k = s.parent(i);
            }
            assert!((g.positions[j] - expected).norm() < 1e-12);
        }
        assert!(g.positions[10].y.abs() < 0.01, "left foot should rest near the ground");
    }

    #[test]
    fn root_translation_shifts_everything() {
        let s = SkeletonModel::smpl_neutral();
        let rest = forward_kinematics(&s, &FullPose::rest(NUM_JOINTS)).unwrap();
        let mut pose = FullPose::rest(NUM_JOINTS);
        pose.root_translation = Vector3::new(0.5, -1.0, 2.0);
        let moved = forward_kinematics(&s, &pose).unwrap();
        for (a, b) in rest.positions.iter().zip(&moved.positions) {
            assert!((b - a - pose.root_translation).norm() < 1e-12);
        }
    }

    #[test]
    fn two_joint_chain_hand_computed() {
        let s = SkeletonModel::new(
            vec![None, Some(0)],
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec![],
            [0, 1, 1],
        )
        .unwrap();
        let pose = FullPose {
            local_rot: vec![Rot6D::encode(&Rotation::from_axis_angle(&Vector3::z(), FRAC_PI_2)), Rot6D::IDENTITY],
            root_translation: Vector3::zeros(),
        };
        let g = forward_kinematics(&s, &pose).unwrap();
        assert!((g.positions[1] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }
}
