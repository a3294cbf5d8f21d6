//! Procedural motion generator with five action classes.
//!
//! Every class drives a distinct set of joints with periodic trajectories;
//! amplitude, frequency, phase, heading and start position vary per clip.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_embedding_table, EmbeddingTable, MotionClip};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics_decoded, Rot6D, Rotation, SkeletonModel, NUM_JOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionClass {
    Walk,
    Squat,
    Wave,
    Kick,
    Idle,
}

impl ActionClass {
    pub const ALL: [ActionClass; 5] = [Self::Walk, Self::Squat, Self::Wave, Self::Kick, Self::Idle];

    pub fn label(self) -> &'static str {
        match self {
            Self::Walk => "walk",
            Self::Squat => "squat",
            Self::Wave => "wave",
            Self::Kick => "kick",
            Self::Idle => "idle",
        }
    }
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ActionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown action class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<ActionClass>,
    pub clips_per_class: usize,
    pub n_frames: usize,
    pub fps: f64,
    /// Seed of the label-embedding table, independent of the motion seed so
    /// that differently seeded datasets share embeddings.
    pub embedding_seed: u64,
    /// Maximum absolute heading (yaw) of a clip, radians.
    pub max_heading: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: ActionClass::ALL.to_vec(),
            clips_per_class: 10,
            n_frames: 120,
            fps: 30.0,
            embedding_seed: 0,
            max_heading: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.clips_per_class == 0 || self.n_frames == 0 {
            return Err(Error::Config("clips_per_class and n_frames must be positive".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, found {}", self.fps)));
        }
        if !(self.max_heading.is_finite() && self.max_heading >= 0.0) {
            return Err(Error::Config("max_heading must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub clips: Vec<MotionClip>,
    pub table: EmbeddingTable,
}

/// Per-clip random parameters.
struct Variation {
    amp: f64,
    freq: f64,
    phase: f64,
    heading: f64,
    start: (f64, f64),
    arm_drop: f64,
    lean: f64,
}

fn rx(a: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::x(), a)
}

fn ry(a: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::y(), a)
}

fn rz(a: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::z(), a)
}

const ARMS_DOWN: f64 = 1.25;

/// Local rotations for `class` at time `t` seconds, plus a forward root
/// displacement and a vertical offset.
fn pose(class: ActionClass, v: &Variation, t: f64) -> (Vec<Rotation>, f64, f64) {
    let mut r = vec![Rotation::identity(); NUM_JOINTS];
    let w = TAU * v.freq;
    let s = v.amp;
    let arm_l = rz(-(ARMS_DOWN + v.arm_drop));
    let arm_r = rz(ARMS_DOWN + v.arm_drop);
    r[16] = arm_l;
    r[17] = arm_r;
    r[3] = rx(v.lean);
    // Breathing and small head motion shared by every class.
    r[9] = rx(0.01 * (TAU * 0.25 * t + v.phase).sin());
    r[15] = ry(0.02 * (TAU * 0.12 * t + v.phase).sin());
    let mut forward = 0.0;
    let mut lift = 0.0;
    match class {
        ActionClass::Idle => {}
        ActionClass::Walk => {
            let p = w * t + v.phase;
            r[1] = rx(-0.45 * s * p.sin());
            r[2] = rx(0.45 * s * p.sin());
            r[4] = rx(0.6 * s * (p + PI / 2.0).sin().max(0.0));
            r[5] = rx(0.6 * s * (p - PI / 2.0).sin().max(0.0));
            r[16] = rx(0.3 * s * p.sin()).compose(&arm_l);
            r[17] = rx(-0.3 * s * p.sin()).compose(&arm_r);
            forward = 1.1 * s * t;
            lift = 0.02 * (2.0 * p).cos();
        }
        ActionClass::Squat => {
            let d = 0.5 * s * (1.0 - (w * t + v.phase).cos());
            for hip in [1, 2] {
                r[hip] = rx(-1.3 * d);
            }
            for knee in [4, 5] {
                r[knee] = rx(2.2 * d);
            }
            for ankle in [7, 8] {
                r[ankle] = rx(-0.9 * d);
            }
            r[3] = rx(v.lean + 0.5 * d);
        }
        ActionClass::Wave => {
            let p = w * 1.5 * t + v.phase;
            r[17] = rz(-0.5 * s);
            r[19] = rz(-(1.0 + 0.4 * s * p.sin()));
        }
        ActionClass::Kick => {
            let p = (w * 0.6 * t + v.phase).sin().max(0.0).powi(2);
            r[2] = rx(-1.2 * s * p);
            r[5] = rx(0.5 * s * p);
            r[16] = rx(-0.4 * s * p).compose(&arm_l);
            r[3] = rx(v.lean - 0.15 * p);
        }
    }
    (r, forward, lift)
}

fn generate_clip(skeleton: &SkeletonModel, class: ActionClass, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> MotionClip {
    let v = Variation {
        amp: rng.gen_range(0.8..1.2),
        freq: match class {
            ActionClass::Walk => 1.0,
            ActionClass::Squat => 0.4,
            ActionClass::Wave => 1.0,
            ActionClass::Kick => 1.0,
            ActionClass::Idle => 1.0,
        } * rng.gen_range(0.9..1.1),
        phase: rng.gen_range(0.0..TAU),
        heading: if cfg.max_heading > 0.0 {
            rng.gen_range(-cfg.max_heading..cfg.max_heading)
        } else {
            0.0
        },
        start: (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        arm_drop: rng.gen_range(-0.05..0.05),
        lean: rng.gen_range(-0.03..0.03),
    };
    let heading = ry(v.heading);
    let dir = heading.apply(&Vector3::z());
    let rest_ankle = forward_kinematics_decoded(skeleton, &vec![Rotation::identity(); NUM_JOINTS], &Vector3::zeros()).positions[7].y;
    let mut local_rot = Vec::with_capacity(cfg.n_frames);
    let mut root_translation = Vec::with_capacity(cfg.n_frames);
    for f in 0..cfg.n_frames {
        let t = f as f64 / cfg.fps;
        let (mut rots, forward, lift) = pose(class, &v, t);
        rots[0] = heading.compose(&rots[0]);
        // Keep the standing foot on the ground when the legs bend.
        let ankle = forward_kinematics_decoded(skeleton, &rots, &Vector3::zeros()).positions[7].y;
        let drop = if class == ActionClass::Squat { rest_ankle - ankle } else { 0.0 };
        let root = Vector3::new(v.start.0, lift + drop, v.start.1) + dir * forward;
        local_rot.push(rots.iter().map(Rot6D::encode).collect());
        root_translation.push(root);
    }
    MotionClip {
        fps: cfg.fps,
        local_rot,
        root_translation,
        action_label: Some(class.label().to_string()),
        text_embedding: None,
        image_embedding: None,
    }
}

/// Generates `clips_per_class` clips of every class, interleaved by class,
/// each tagged with its label and embeddings. Each clip draws from its own
/// RNG stream, so the output is a pure function of `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let skeleton = SkeletonModel::smpl_neutral();
    let labels: Vec<&str> = cfg.classes.iter().map(|c| c.label()).collect();
    let table = build_embedding_table(&labels, cfg.embedding_seed);
    let mut clips = Vec::with_capacity(cfg.classes.len() * cfg.clips_per_class);
    for _ in 0..cfg.clips_per_class {
        for &class in &cfg.classes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(clips.len() as u64);
            let mut clip = generate_clip(&skeleton, class, cfg, &mut rng);
            let e = table.get(class.label()).expect("table covers every class");
            clip.text_embedding = Some(e.text.clone());
            clip.image_embedding = Some(e.image.clone());
            clips.push(clip);
        }
    }
    Ok(SynthOutput { clips, table })
}
