//! Motion clips, the on-disk motion format, windowing, downsampling,
//! label-embedding tables, and the synthetic motion generator.

mod embedding;
mod format;
mod synth;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use embedding::{build_embedding_table, EmbeddingTable, LabelEmbedding};
pub use format::{export_positions_csv, load_motion, load_motion_dir, read_motion, save_motion, write_motion, FORMAT_VERSION, MOTION_EXTENSION};
pub use synth::{synth_generate, ActionClass, SynthConfig, SynthOutput};

use crate::error::{Error, Result};
use crate::kinematics::{FullPose, Rot6D};

/// Dimension of the motion latent space and of label embeddings.
pub const LATENT_DIM: usize = 512;
const UNIT_NORM_TOL: f64 = 1e-6;

/// Full-body motion: per-frame local joint rotations and root translation,
/// optionally tagged with an action label and its embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub fps: f64,
    pub local_rot: Vec<Vec<Rot6D>>,
    pub root_translation: Vec<Vector3<f64>>,
    pub action_label: Option<String>,
    pub text_embedding: Option<Vec<f64>>,
    pub image_embedding: Option<Vec<f64>>,
}

impl MotionClip {
    pub fn n_frames(&self) -> usize {
        self.local_rot.len()
    }

    pub fn num_joints(&self) -> usize {
        self.local_rot.first().map_or(0, Vec::len)
    }

    pub fn pose(&self, t: usize) -> FullPose {
        FullPose {
            local_rot: self.local_rot[t].clone(),
            root_translation: self.root_translation[t],
        }
    }

    pub fn has_embeddings(&self) -> bool {
        self.text_embedding.is_some() && self.image_embedding.is_some()
    }

    /// Frames `start..start + len`, keeping label and embeddings.
    pub fn slice(&self, start: usize, len: usize) -> MotionClip {
        MotionClip {
            fps: self.fps,
            local_rot: self.local_rot[start..start + len].to_vec(),
            root_translation: self.root_translation[start..start + len].to_vec(),
            action_label: self.action_label.clone(),
            text_embedding: self.text_embedding.clone(),
            image_embedding: self.image_embedding.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames() == 0 {
            return Err(Error::Data("clip has no frames".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidFps(format!("{}", self.fps)));
        }
        if self.root_translation.len() != self.n_frames() {
            return Err(Error::Data(format!(
                "{} root translations for {} frames",
                self.root_translation.len(),
                self.n_frames()
            )));
        }
        let j = self.num_joints();
        for (t, frame) in self.local_rot.iter().enumerate() {
            if frame.len() != j {
                return Err(Error::Data(format!("frame {t} has {} joints, expected {j}", frame.len())));
            }
            for r in frame {
                r.decode()?;
            }
            if !self.root_translation[t].iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("frame {t} has a non-finite root translation")));
            }
        }
        for (name, e) in [("text", &self.text_embedding), ("image", &self.image_embedding)] {
            if let Some(e) = e {
                check_unit(name, e)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_unit(name: &str, e: &[f64]) -> Result<()> {
    if e.len() != LATENT_DIM {
        return Err(Error::Data(format!("{name} embedding has {} values, expected {LATENT_DIM}", e.len())));
    }
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Data(format!("{name} embedding norm {n} is not 1")));
    }
    Ok(())
}

/// Integer-stride decimation towards `target_fps` without interpolation.
pub fn downsample(clip: &MotionClip, target_fps: f64) -> Result<MotionClip> {
    if !(target_fps > 0.0) || clip.fps < target_fps {
        return Err(Error::InvalidFps(format!("cannot downsample {} fps to {target_fps} fps", clip.fps)));
    }
    let stride = (clip.fps / target_fps).round().max(1.0) as usize;
    let keep: Vec<usize> = (0..clip.n_frames()).step_by(stride).collect();
    Ok(MotionClip {
        fps: clip.fps / stride as f64,
        local_rot: keep.iter().map(|&t| clip.local_rot[t].clone()).collect(),
        root_translation: keep.iter().map(|&t| clip.root_translation[t]).collect(),
        ..clip.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub source: usize,
    pub start: usize,
}

/// Fixed-length windows over a set of clips. Windows are stored as
/// references into the owned clips and materialised on demand.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub clips: Vec<MotionClip>,
    pub windows: Vec<WindowRef>,
    pub window_len: usize,
    pub skipped: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, i: usize) -> MotionClip {
        let w = self.windows[i];
        self.clips[w.source].slice(w.start, self.window_len)
    }
}

/// Every length-`window_len` slice starting at a multiple of `stride`.
/// Clips shorter than a window are skipped and counted.
pub fn make_windows(clips: Vec<MotionClip>, window_len: usize, stride: usize) -> WindowedDataset {
    assert!(window_len >= 1 && stride >= 1, "window length and stride must be positive");
    let mut windows = Vec::new();
    let mut skipped = 0;
    for (source, c) in clips.iter().enumerate() {
        if c.n_frames() < window_len {
            skipped += 1;
            continue;
        }
        windows.extend((0..=c.n_frames() - window_len).step_by(stride).map(|start| WindowRef { source, start }));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} clips shorter than {window_len} frames");
    }
    WindowedDataset {
        clips,
        windows,
        window_len,
        skipped,
    }
}
