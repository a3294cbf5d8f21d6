//! Reconstruction metrics and dataset evaluation.
//!
//! Positions are meters internally; every reported metric is in
//! centimeters (or cm/s). MPJPE and Legs MPJPE compare pelvis-relative
//! positions; Global MPJPE and MPJVE compare head-aligned global positions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataio::MotionClip;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, Rot6D, SkeletonModel};
use crate::prior::FullMotionPrior;
use crate::sequence::{head_aligned_pose, PredictedMotion, Reconstructor};
use crate::signals::extract_sparse_signals;

pub type Positions = [Vec<Vector3<f64>>];

fn check_shapes(pred: &Positions, gt: &Positions) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len())));
    }
    if let Some((t, _)) = pred.iter().zip(gt).enumerate().find(|(_, (p, g))| p.len() != g.len()) {
        return Err(Error::Shape(format!("frame {t}: joint counts differ")));
    }
    Ok(())
}

fn joint_list(n: usize, joints: Option<&[usize]>) -> Result<Vec<usize>> {
    let list = joints.map_or_else(|| (0..n).collect(), <[usize]>::to_vec);
    if list.iter().any(|&j| j >= n) {
        return Err(Error::Shape(format!("joint set {list:?} exceeds {n} joints")));
    }
    Ok(list)
}

/// Sum of per-joint distances and the number of terms.
fn distance_sum(pred: &Positions, gt: &Positions, joints: Option<&[usize]>) -> Result<(f64, usize)> {
    check_shapes(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (p, g) in pred.iter().zip(gt) {
        for j in joint_list(p.len(), joints)? {
            sum += (p[j] - g[j]).norm();
            n += 1;
        }
    }
    Ok((sum, n))
}

/// Subtracts joint 0 (the pelvis) from every joint, frame by frame.
pub fn pelvis_relative(positions: &Positions) -> Vec<Vec<Vector3<f64>>> {
    positions
        .iter()
        .map(|f| f.iter().map(|p| p - f[0]).collect())
        .collect()
}

/// Mean per-joint position error in cm, optionally restricted to `joints`.
/// Positions are compared as given; pass pelvis-relative positions for the
/// standard metric.
pub fn mpjpe(pred: &Positions, gt: &Positions, joints: Option<&[usize]>) -> Result<f64> {
    let (sum, n) = distance_sum(pred, gt, joints)?;
    if n == 0 {
        return Err(Error::Shape("no frames or joints to compare".into()));
    }
    Ok(100.0 * sum / n as f64)
}

fn global_positions(skeleton: &SkeletonModel, clip: &MotionClip) -> Result<Vec<Vec<Vector3<f64>>>> {
    (0..clip.n_frames()).map(|t| Ok(forward_kinematics(skeleton, &clip.pose(t))?.positions)).collect()
}

/// Global MPJPE in cm: predicted rotations placed at the tracked head
/// positions, compared with the ground-truth global joints.
pub fn global_mpjpe(skeleton: &SkeletonModel, pred_rot: &[Vec<Rot6D>], gt: &MotionClip, head: &[Vector3<f64>]) -> Result<f64> {
    if pred_rot.len() != gt.n_frames() || head.len() != gt.n_frames() {
        return Err(Error::Shape(format!(
            "{} predicted frames, {} head positions, {} ground-truth frames",
            pred_rot.len(),
            head.len(),
            gt.n_frames()
        )));
    }
    let placed = pred_rot
        .iter()
        .zip(head)
        .map(|(r, h)| Ok(head_aligned_pose(skeleton, r, *h)?.1))
        .collect::<Result<Vec<_>>>()?;
    mpjpe(&placed, &global_positions(skeleton, gt)?, None)
}

fn velocity_sum(pred: &Positions, gt: &Positions, fps: f64) -> Result<(f64, usize)> {
    check_shapes(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::InsufficientFrames(format!("velocity error needs 2 frames, got {}", pred.len())));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for t in 1..pred.len() {
        for j in 0..pred[t].len() {
            let vp = (pred[t][j] - pred[t - 1][j]) * fps;
            let vg = (gt[t][j] - gt[t - 1][j]) * fps;
            sum += (vp - vg).norm();
            n += 1;
        }
    }
    Ok((sum, n))
}

/// Mean per-joint velocity error in cm/s, velocities being frame deltas
/// times `fps`.
pub fn mpjve(pred: &Positions, gt: &Positions, fps: f64) -> Result<f64> {
    let (sum, n) = velocity_sum(pred, gt, fps)?;
    Ok(100.0 * sum / n as f64)
}

/// Rejects an evaluation prior that is the prior the model was trained
/// with.
pub fn check_eval_prior(eval_prior: &FullMotionPrior, training_prior_hash: &str) -> Result<()> {
    if eval_prior.hash() == training_prior_hash {
        return Err(Error::SamePrior(format!(
            "evaluation prior {} is the training prior",
            &training_prior_hash[..12.min(training_prior_hash.len())]
        )));
    }
    Ok(())
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb).max(f64::MIN_POSITIVE)).clamp(0.0, 2.0)
}

/// `1 − cos` between the eval prior's latents of two windows.
pub fn motion_distance(pred: &MotionClip, gt: &MotionClip, eval_prior: &FullMotionPrior, training_prior_hash: &str) -> Result<f64> {
    check_eval_prior(eval_prior, training_prior_hash)?;
    let l = eval_prior.encode_full(&[pred.clone(), gt.clone()])?;
    Ok(cosine_distance(&l[0], &l[1]))
}

fn mean_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in x {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut centred = DMatrix::zeros(d, x.len());
    for (i, v) in x.iter().enumerate() {
        centred.set_column(i, &(DVector::from_column_slice(v) - &mu));
    }
    let cov = &centred * centred.transpose() / (n - 1.0);
    (mu, cov)
}

/// Fréchet distance between Gaussians fitted to two latent sets.
///
/// `Tr((Σ₁Σ₂)^½)` is the sum of square roots of the eigenvalues of
/// `Σ₁^½ Σ₂ Σ₁^½`; eigenvalues that come out negative through round-off are
/// clamped to zero and the largest clamp is logged. With fewer samples than
/// dimensions the covariances are rank-deficient and the estimate is biased
/// upward.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples(format!("FID needs at least 2 samples per set, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("FID sets have inconsistent dimensions".into()));
    }
    let (mu1, s1) = mean_cov(a);
    let (mu2, s2) = mean_cov(b);
    let mut clamp: f64 = 0.0;
    let mut sqrt_psd = |m: DMatrix<f64>| {
        let eig = SymmetricEigen::new(m);
        let vals = eig.eigenvalues.map(|v| {
            clamp = clamp.max(-v);
            v.max(0.0).sqrt()
        });
        (eig.eigenvectors, vals)
    };
    let (q, r) = sqrt_psd(s1.clone());
    let s1_half = &q * DMatrix::from_diagonal(&r) * q.transpose();
    let inner = &s1_half * &s2 * &s1_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let (_, roots) = sqrt_psd(inner);
    if clamp > 0.0 {
        log::debug!("FID clamped negative eigenvalues of magnitude up to {clamp:.3e}");
    }
    let value = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * roots.sum();
    Ok(value.max(0.0))
}

/// Something that reconstructs a clip's motion from its tracking signals.
pub trait MotionReconstructor: Sync {
    fn reconstruct(&self, skeleton: &SkeletonModel, clip: &MotionClip) -> Result<PredictedMotion>;

    /// Hash of the full prior the reconstructor was trained with, if any.
    fn training_prior_hash(&self) -> Option<&str>;
}

impl MotionReconstructor for Reconstructor {
    fn reconstruct(&self, skeleton: &SkeletonModel, clip: &MotionClip) -> Result<PredictedMotion> {
        self.infer_motion(&extract_sparse_signals(skeleton, clip)?, clip.fps)
    }

    fn training_prior_hash(&self) -> Option<&str> {
        Some(self.model.prior_hash())
    }
}

/// Returns the ground-truth rotations placed at the tracked head: the
/// perfect model.
pub struct GroundTruthOracle;

impl MotionReconstructor for GroundTruthOracle {
    fn reconstruct(&self, skeleton: &SkeletonModel, clip: &MotionClip) -> Result<PredictedMotion> {
        let head = extract_sparse_signals(skeleton, clip)?;
        let mut root_translation = Vec::new();
        let mut positions = Vec::new();
        for (r, s) in clip.local_rot.iter().zip(&head) {
            let (root, pos) = head_aligned_pose(skeleton, r, s.positions[0])?;
            root_translation.push(root);
            positions.push(pos);
        }
        Ok(PredictedMotion {
            fps: clip.fps,
            local_rot: clip.local_rot.clone(),
            root_translation,
            positions,
        })
    }

    fn training_prior_hash(&self) -> Option<&str> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Step between the 60-frame windows used for motion distance and FID.
    pub window_stride: usize,
    /// Worker threads; results are reduced in clip order regardless.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { window_stride: 10, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub mpjpe_cm: f64,
    pub legs_mpjpe_cm: f64,
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionComparison {
    pub label: String,
    pub mpjpe_cm: f64,
    pub legs_mpjpe_cm: f64,
    pub baseline_mpjpe_cm: f64,
    pub baseline_legs_mpjpe_cm: f64,
    /// Baseline MPJPE minus this model's; positive means this model is better.
    pub improvement_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub root_alignment: String,
    pub leg_joints: Vec<usize>,
    pub fps: f64,
    pub eval_prior_hash: String,
    pub training_prior_hash: Option<String>,
    pub clips: usize,
    pub windows: usize,
    pub window_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_cm: f64,
    pub legs_mpjpe_cm: f64,
    pub global_mpjpe_cm: f64,
    pub mpjve_cm_per_s: f64,
    pub motion_distance: f64,
    pub fid: f64,
    pub per_action: BTreeMap<String, ActionMetrics>,
    pub config: ReportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Vec<ActionComparison>>,
}

const CSV_HEADER: &str = "model,mpjpe_cm,legs_mpjpe_cm,global_mpjpe_cm,mpjve_cm_per_s,motion_distance,fid";

impl EvalReport {
    /// Structured text (TOML) with a comment header stating the alignment
    /// conventions.
    pub fn to_text(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(format!("serialising report: {e}")))?;
        Ok(format!(
            "# MPJPE and Legs MPJPE: pelvis-relative positions, cm.\n\
             # Global MPJPE and MPJVE: head-aligned global positions, cm and cm/s.\n\
             # Motion distance and FID: latents of the evaluation prior.\n{body}"
        ))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            location: "report".into(),
            message: e.to_string(),
        })
    }

    /// Table-1 style CSV: a header and one row per named report.
    pub fn csv(rows: &[(&str, &EvalReport)]) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (name, r) in rows {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                r.mpjpe_cm, r.legs_mpjpe_cm, r.global_mpjpe_cm, r.mpjve_cm_per_s, r.motion_distance, r.fid
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        Self::csv(&[("model", self)])
    }

    /// Per-action CSV, in comparison order when a comparison is present.
    pub fn per_action_csv(&self) -> String {
        let mut out = String::from("label,mpjpe_cm,legs_mpjpe_cm,baseline_mpjpe_cm,baseline_legs_mpjpe_cm,improvement_cm\n");
        match &self.comparison {
            Some(rows) => {
                for c in rows {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        c.label, c.mpjpe_cm, c.legs_mpjpe_cm, c.baseline_mpjpe_cm, c.baseline_legs_mpjpe_cm, c.improvement_cm
                    );
                }
            }
            None => {
                for (label, m) in &self.per_action {
                    let _ = writeln!(out, "{label},{},{},,,", m.mpjpe_cm, m.legs_mpjpe_cm);
                }
            }
        }
        out
    }

    /// Attaches a per-action comparison against `baseline`, sorted by
    /// MPJPE improvement, largest first.
    pub fn compare_with(&mut self, baseline: &EvalReport) {
        let mut rows: Vec<ActionComparison> = self
            .per_action
            .iter()
            .filter_map(|(label, m)| {
                let b = baseline.per_action.get(label)?;
                Some(ActionComparison {
                    label: label.clone(),
                    mpjpe_cm: m.mpjpe_cm,
                    legs_mpjpe_cm: m.legs_mpjpe_cm,
                    baseline_mpjpe_cm: b.mpjpe_cm,
                    baseline_legs_mpjpe_cm: b.legs_mpjpe_cm,
                    improvement_cm: b.mpjpe_cm - m.mpjpe_cm,
                })
            })
            .collect();
        rows.sort_by(|a, b| b.improvement_cm.total_cmp(&a.improvement_cm).then_with(|| a.label.cmp(&b.label)));
        self.comparison = Some(rows);
    }
}

/// Per-clip sums, reduced in clip order.
#[derive(Default)]
struct ClipStats {
    local: (f64, usize),
    legs: (f64, usize),
    global: (f64, usize),
    vel: (f64, usize),
    distances: Vec<f64>,
    pred_latents: Vec<Vec<f64>>,
    gt_latents: Vec<Vec<f64>>,
}

fn clip_stats(chain: &dyn MotionReconstructor, skeleton: &SkeletonModel, clip: &MotionClip, eval_prior: &FullMotionPrior, stride: usize) -> Result<ClipStats> {
    let pred = chain.reconstruct(skeleton, clip)?;
    if pred.n_frames() != clip.n_frames() {
        return Err(Error::Shape(format!("reconstruction has {} frames for a {}-frame clip", pred.n_frames(), clip.n_frames())));
    }
    let gt = global_positions(skeleton, clip)?;
    let (pl, gl) = (pelvis_relative(&pred.positions), pelvis_relative(&gt));
    let mut s = ClipStats {
        local: distance_sum(&pl, &gl, None)?,
        legs: distance_sum(&pl, &gl, Some(skeleton.leg_joints()))?,
        global: distance_sum(&pred.positions, &gt, None)?,
        vel: if clip.n_frames() >= 2 {
            velocity_sum(&pred.positions, &gt, clip.fps)?
        } else {
            (0.0, 0)
        },
        ..ClipStats::default()
    };
    let window = eval_prior.config().window;
    if clip.n_frames() >= window {
        let pred_clip = pred.to_clip();
        let starts: Vec<usize> = (0..=clip.n_frames() - window).step_by(stride).collect();
        let pw: Vec<MotionClip> = starts.iter().map(|&t| pred_clip.slice(t, window)).collect();
        let gw: Vec<MotionClip> = starts.iter().map(|&t| clip.slice(t, window)).collect();
        s.pred_latents = eval_prior.encode_full(&pw)?;
        s.gt_latents = eval_prior.encode_full(&gw)?;
        s.distances = s.pred_latents.iter().zip(&s.gt_latents).map(|(a, b)| cosine_distance(a, b)).collect();
    }
    Ok(s)
}

fn ratio((sum, n): (f64, usize)) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        100.0 * sum / n as f64
    }
}

/// All six metrics over `clips`, plus per-action MPJPE and Legs MPJPE.
pub fn evaluate_dataset(
    chain: &dyn MotionReconstructor,
    skeleton: &SkeletonModel,
    clips: &[MotionClip],
    eval_prior: &FullMotionPrior,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(h) = chain.training_prior_hash() {
        check_eval_prior(eval_prior, h)?;
    }
    if clips.is_empty() {
        return Err(Error::InsufficientSamples("no clips to evaluate".into()));
    }
    if opts.window_stride == 0 {
        return Err(Error::Config("window_stride must be positive".into()));
    }
    let threads = opts.threads.clamp(1, clips.len());
    let per_thread = clips.len().div_ceil(threads);
    let results: Vec<Result<ClipStats>> = std::thread::scope(|scope| {
        let handles: Vec<_> = clips
            .chunks(per_thread)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|c| clip_stats(chain, skeleton, c, eval_prior, opts.window_stride))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let stats = results.into_iter().collect::<Result<Vec<_>>>()?;

    let add = |a: (f64, usize), b: (f64, usize)| (a.0 + b.0, a.1 + b.1);
    let mut tot = ClipStats::default();
    let mut actions: BTreeMap<String, ((f64, usize), (f64, usize), usize)> = BTreeMap::new();
    for (clip, s) in clips.iter().zip(stats) {
        tot.local = add(tot.local, s.local);
        tot.legs = add(tot.legs, s.legs);
        tot.global = add(tot.global, s.global);
        tot.vel = add(tot.vel, s.vel);
        let label = clip.action_label.clone().unwrap_or_else(|| "unlabelled".into());
        let e = actions.entry(label).or_default();
        e.0 = add(e.0, s.local);
        e.1 = add(e.1, s.legs);
        e.2 += 1;
        tot.distances.extend(s.distances);
        tot.pred_latents.extend(s.pred_latents);
        tot.gt_latents.extend(s.gt_latents);
    }
    if tot.vel.1 == 0 {
        return Err(Error::InsufficientFrames("velocity error needs clips with at least 2 frames".into()));
    }
    let windows = tot.distances.len();
    let motion_distance = if windows == 0 {
        return Err(Error::InsufficientFrames(format!("no clip reaches the {}-frame evaluation window", eval_prior.config().window)));
    } else {
        tot.distances.iter().sum::<f64>() / windows as f64
    };
    let fid = fid(&tot.pred_latents, &tot.gt_latents)?;
    Ok(EvalReport {
        mpjpe_cm: ratio(tot.local),
        legs_mpjpe_cm: ratio(tot.legs),
        global_mpjpe_cm: ratio(tot.global),
        mpjve_cm_per_s: ratio(tot.vel),
        motion_distance,
        fid,
        per_action: actions
            .into_iter()
            .map(|(label, (l, g, clips))| {
                (
                    label,
                    ActionMetrics {
                        mpjpe_cm: ratio(l),
                        legs_mpjpe_cm: ratio(g),
                        clips,
                    },
                )
            })
            .collect(),
        config: ReportConfig {
            root_alignment: "pelvis".into(),
            leg_joints: skeleton.leg_joints().to_vec(),
            fps: clips[0].fps,
            eval_prior_hash: eval_prior.hash(),
            training_prior_hash: chain.training_prior_hash().map(str::to_string),
            clips: clips.len(),
            windows,
            window_stride: opts.window_stride,
        },
        comparison: None,
    })
}
