//! Motion file format, version 1.
//!
//! A text header of `key value` lines terminated by `end_header`, followed
//! by a little-endian `f32` block:
//!
//! ```text
//! SPMO-MOTION 1
//! fps 30
//! n_frames 90
//! n_joints 22
//! label squat            (optional, rest of line)
//! skeleton 3f2a...       (optional skeleton hash)
//! text_embedding 512     (0 when absent)
//! image_embedding 512    (0 when absent)
//! end_header
//! ```
//!
//! The block holds, for each frame, `n_joints × 6` rotation values (joint
//! major, 6D column order) then 3 root translation values; after all
//! frames come the text embedding and then the image embedding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::{MotionClip, LATENT_DIM};
use crate::error::{Error, Result};
use crate::kinematics::Rot6D;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "SPMO-MOTION";
const END: &str = "end_header";

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

pub fn write_motion(clip: &MotionClip, skeleton_hash: Option<&str>, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(out, "fps {}", clip.fps)?;
    writeln!(out, "n_frames {}", clip.n_frames())?;
    writeln!(out, "n_joints {}", clip.num_joints())?;
    if let Some(label) = &clip.action_label {
        writeln!(out, "label {}", label.replace(['\n', '\r'], " "))?;
    }
    if let Some(h) = skeleton_hash {
        writeln!(out, "skeleton {h}")?;
    }
    writeln!(out, "text_embedding {}", clip.text_embedding.as_ref().map_or(0, Vec::len))?;
    writeln!(out, "image_embedding {}", clip.image_embedding.as_ref().map_or(0, Vec::len))?;
    writeln!(out, "{END}")?;
    let mut buf = Vec::with_capacity(4 * (clip.n_frames() * (clip.num_joints() * 6 + 3) + 2 * LATENT_DIM));
    let mut push = |v: f64| buf.extend_from_slice(&(v as f32).to_le_bytes());
    for (rots, root) in clip.local_rot.iter().zip(&clip.root_translation) {
        rots.iter().flat_map(|r| r.0).for_each(&mut push);
        root.iter().copied().for_each(&mut push);
    }
    for e in [&clip.text_embedding, &clip.image_embedding].into_iter().flatten() {
        e.iter().copied().for_each(&mut push);
    }
    out.write_all(&buf)
}

pub fn save_motion(clip: &MotionClip, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_motion(clip, None, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Header {
    fps: Option<f64>,
    n_frames: Option<usize>,
    n_joints: Option<usize>,
    label: Option<String>,
    skeleton: Option<String>,
    text: usize,
    image: usize,
}

fn parse_count(v: &str, line: usize) -> Result<usize> {
    v.parse().map_err(|_| parse_err(format!("line {line}"), format!("expected a count, found `{v}`")))
}

/// Parses a motion file from bytes, returning the clip and the skeleton
/// hash recorded in its header, if any.
pub fn read_motion(bytes: &[u8]) -> Result<(MotionClip, Option<String>)> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut header = Header::default();
    let mut next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(format!("byte {}", *pos), "unterminated header"))?;
        let text = std::str::from_utf8(&rest[..nl]).map_err(|_| parse_err(format!("byte {}", *pos), "header is not UTF-8"))?;
        *pos += nl + 1;
        line_no += 1;
        Ok((line_no, text.trim_end_matches('\r').to_string()))
    };

    let (ln, first) = next_line(&mut pos)?;
    let version = match first.split_once(' ') {
        Some((MAGIC, v)) => v.trim(),
        _ => return Err(parse_err(format!("line {ln}"), format!("expected `{MAGIC} <version>`"))),
    };
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            supported: FORMAT_VERSION,
        });
    }
    loop {
        let (ln, line) = next_line(&mut pos)?;
        if line == END {
            break;
        }
        let (key, value) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        match key {
            "fps" => {
                let fps: f64 = value
                    .parse()
                    .map_err(|_| parse_err(format!("line {ln}"), format!("bad fps `{value}`")))?;
                if !(fps.is_finite() && fps > 0.0) {
                    return Err(parse_err(format!("line {ln}"), format!("fps must be positive, found {value}")));
                }
                header.fps = Some(fps);
            }
            "n_frames" => header.n_frames = Some(parse_count(value, ln)?),
            "n_joints" => header.n_joints = Some(parse_count(value, ln)?),
            "label" => header.label = Some(value.to_string()),
            "skeleton" => header.skeleton = Some(value.to_string()),
            "text_embedding" => header.text = parse_count(value, ln)?,
            "image_embedding" => header.image = parse_count(value, ln)?,
            _ => return Err(parse_err(format!("line {ln}"), format!("unknown header key `{key}`"))),
        }
    }
    let missing = |k: &str| parse_err(format!("line {line_no}"), format!("header lacks `{k}`"));
    let fps = header.fps.ok_or_else(|| missing("fps"))?;
    let n_frames = header.n_frames.ok_or_else(|| missing("n_frames"))?;
    let n_joints = header.n_joints.ok_or_else(|| missing("n_joints"))?;
    if n_frames == 0 {
        return Err(parse_err(format!("line {line_no}"), "clip must have at least one frame"));
    }
    if n_joints == 0 {
        return Err(parse_err(format!("line {line_no}"), "clip must have at least one joint"));
    }
    for (k, n) in [("text_embedding", header.text), ("image_embedding", header.image)] {
        if n != 0 && n != LATENT_DIM {
            return Err(parse_err(format!("line {line_no}"), format!("{k} must be 0 or {LATENT_DIM}, found {n}")));
        }
    }

    let per_frame = n_joints * 6 + 3;
    let n_values = n_frames * per_frame + header.text + header.image;
    let body = &bytes[pos..];
    if body.len() != 4 * n_values {
        return Err(parse_err(
            format!("byte {}", pos + body.len().min(4 * n_values)),
            format!("expected {} bytes of frame data, found {}", 4 * n_values, body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(parse_err(format!("byte {}", pos + 4 * i), "non-finite value"));
    }

    let mut local_rot = Vec::with_capacity(n_frames);
    let mut root_translation = Vec::with_capacity(n_frames);
    for frame in values[..n_frames * per_frame].chunks_exact(per_frame) {
        local_rot.push(frame[..6 * n_joints].chunks_exact(6).map(Rot6D::from_slice).collect());
        root_translation.push(Vector3::from_column_slice(&frame[6 * n_joints..]));
    }
    let mut rest = &values[n_frames * per_frame..];
    let mut take = |n: usize| {
        (n > 0).then(|| {
            let (a, b) = rest.split_at(n);
            rest = b;
            renormalize(a)
        })
    };
    let clip = MotionClip {
        fps,
        local_rot,
        root_translation,
        action_label: header.label,
        text_embedding: take(header.text),
        image_embedding: take(header.image),
    };
    clip.validate().map_err(|e| parse_err(format!("byte {pos}"), e.to_string()))?;
    Ok((clip, header.skeleton))
}

/// Embeddings are stored as f32; renormalising in f64 keeps the unit-norm
/// invariant exact to f64 precision after a round trip.
fn renormalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn load_motion(path: &Path) -> Result<MotionClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_motion(&bytes).map(|(c, _)| c).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        e => e,
    })
}

/// File extension used for motion files.
pub const MOTION_EXTENSION: &str = "spmo";

/// Loads every motion file in `dir`, ordered by file name.
pub fn load_motion_dir(dir: &Path) -> Result<Vec<(PathBuf, MotionClip)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == MOTION_EXTENSION) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .{MOTION_EXTENSION} files", dir.display())));
    }
    paths.sort();
    paths.into_iter().map(|p| load_motion(&p).map(|c| (p, c))).collect()
}

/// Writes per-frame global joint positions as CSV (`frame,joint,x,y,z`).
pub fn export_positions_csv(positions: &[Vec<Vector3<f64>>], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "frame,joint,x,y,z")?;
    for (t, frame) in positions.iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            writeln!(out, "{t},{j},{},{},{}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}
