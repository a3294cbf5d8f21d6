//! LSTM sequence model that turns normalised tracking signals plus motion
//! embeddings into full-body poses, its training loop, and inference.
//!
//! Each prediction looks at the last `S` frames. Frame `u` of the LSTM
//! input is `[normalised augmented signals (54) | E_u (64)]` where
//! `E_u = embed(M*_u / |M*_u|)` and `M*_u` is the sparse encoder's latent of
//! the unnormalised 60-frame window ending at `u`. Windows reaching before
//! the first frame repeat it. Latents are compared by cosine everywhere
//! else, so only their direction reaches the LSTM.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use sparsemo_nn::{load_checkpoint, save_checkpoint, AdamConfig, Graph, KinematicTree, Linear, LstmStack, ParamStore, Tensor, Var};

use crate::dataio::{MotionClip, LATENT_DIM};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics_decoded, Rot6D, Rotation, SkeletonModel};
use crate::prior::{clip_signals, pose_features, FullMotionPrior, LossTerms, SparseMotionEncoder};
use crate::signals::{augment, normalize_frame, AugmentedSignalFrame, SparseSignalFrame, SIGNAL_DIM};
use crate::train::{step_rng, TrainLog};

pub const EMBED_DIM: usize = 64;
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    /// Number of input frames per prediction (`S`).
    pub context: usize,
    pub hidden: usize,
    pub layers: usize,
    /// When false the embedding input is all zeros and the projection is
    /// frozen: the model sees tracking signals only.
    pub use_motion_prior: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            context: 40,
            hidden: 512,
            layers: 3,
            use_motion_prior: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityTerm {
    /// Frame-to-frame differences of FK joint positions.
    #[default]
    Position,
    /// Frame-to-frame differences of the raw 6D rotation outputs.
    Rotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqLossWeights {
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub mo: f64,
    pub velocity: VelocityTerm,
}

impl Default for SeqLossWeights {
    fn default() -> Self {
        Self {
            rot: 1.0,
            pos: 1.0,
            vel: 1.0,
            mo: 0.1,
            velocity: VelocityTerm::Position,
        }
    }
}

/// Ground truth for `windows` runs of `frames` consecutive predictions.
pub struct SeqTargets<'a> {
    pub windows: usize,
    pub frames: usize,
    /// `windows·frames × 6J` local 6D rotations.
    pub rot: &'a [f64],
    /// `windows·frames × 3J` FK positions with zero root translation.
    pub pos: &'a [f64],
    /// `windows·frames × 3` root translation relative to each run's start.
    pub root: &'a [f64],
    /// `windows × 512` full-encoder latents of the ground-truth windows.
    pub latents: &'a [f64],
}

/// Sequence-model loss on `pred` (`windows·frames × 6J` raw 6D). The motion
/// term encodes the predicted rotations, with the ground-truth root path,
/// through `prior`'s encoder and compares against the ground-truth latent.
pub fn sequence_loss(g: &mut Graph, tree: &Arc<KinematicTree>, pred: Var, t: &SeqTargets, prior: Option<&FullMotionPrior>, w: &SeqLossWeights) -> Result<LossTerms> {
    let joints = tree.len();
    let (rows, cols) = g.dims(pred);
    let n = t.windows * t.frames;
    if cols != 6 * joints || rows != n || t.rot.len() != n * 6 * joints || t.pos.len() != n * 3 * joints {
        return Err(Error::Shape(format!(
            "prediction {rows}x{cols} for {} windows of {} frames and {joints} joints",
            t.windows, t.frames
        )));
    }
    let gt_rot = g.input(n, 6 * joints, t.rot.to_vec())?;
    let gt_pos = g.input(n, 3 * joints, t.pos.to_vec())?;
    let l_rot = g.mse(pred, gt_rot)?;
    let mats = g.rot6d_to_mat(pred)?;
    let pos = g.forward_kinematics(mats, None, tree.clone())?;
    let l_pos = g.mse(pos, gt_pos)?;

    let mut weighted = vec![(w.rot, l_rot), (w.pos, l_pos)];
    let mut terms = vec![("rot", l_rot), ("pos", l_pos)];
    if t.frames >= 2 {
        let next: Vec<usize> = (0..t.windows).flat_map(|k| (1..t.frames).map(move |i| k * t.frames + i)).collect();
        let prev: Vec<usize> = next.iter().map(|i| i - 1).collect();
        let (p, q) = match w.velocity {
            VelocityTerm::Position => (pos, gt_pos),
            VelocityTerm::Rotation => (pred, gt_rot),
        };
        let pn = g.gather_rows(p, &next)?;
        let pp = g.gather_rows(p, &prev)?;
        let dp = g.sub(pn, pp)?;
        let qn = g.gather_rows(q, &next)?;
        let qp = g.gather_rows(q, &prev)?;
        let dq = g.sub(qn, qp)?;
        let l_vel = g.mse(dp, dq)?;
        weighted.push((w.vel, l_vel));
        terms.push(("vel", l_vel));
    }
    if w.mo != 0.0 {
        let prior = prior.ok_or_else(|| Error::Config("motion term needs the full motion prior".into()))?;
        if t.frames < prior.config().window {
            return Err(Error::InsufficientContext(format!(
                "motion term needs {} consecutive predictions, got {}",
                prior.config().window,
                t.frames
            )));
        }
        if t.frames != prior.config().window || t.root.len() != n * 3 || t.latents.len() != t.windows * LATENT_DIM {
            return Err(Error::Shape("motion term targets do not match the prior window".into()));
        }
        let root = g.input(n, 3, t.root.to_vec())?;
        let feats = g.concat_cols(&[pred, root])?;
        let m_hat = prior.encode_graph(g, feats, t.windows)?;
        let m = g.input(t.windows, LATENT_DIM, t.latents.to_vec())?;
        let l_mo = g.cosine_distance(m_hat, m)?;
        weighted.push((w.mo, l_mo));
        terms.push(("mo", l_mo));
    }
    let total = g.weighted_sum(&weighted)?;
    Ok(LossTerms { total, terms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqTrainConfig {
    pub steps: u64,
    /// Each window contributes one run of prior-window-length consecutive
    /// predictions.
    pub windows_per_batch: usize,
    pub window_stride: usize,
    pub lr: f64,
    /// When set, the learning rate follows a cosine from `lr` at step 0
    /// down to this value at the last step.
    pub lr_final: Option<f64>,
    pub seed: u64,
    pub weights: SeqLossWeights,
    pub grad_clip: Option<f64>,
    /// Directory for the motion-latent cache; latents stay in memory when
    /// unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SeqTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            windows_per_batch: 1,
            window_stride: 1,
            lr: 1e-4,
            lr_final: None,
            seed: 0,
            weights: SeqLossWeights::default(),
            grad_clip: None,
            cache_dir: None,
        }
    }
}

fn scheduled_lr(cfg: &SeqTrainConfig, step: u64) -> f64 {
    match cfg.lr_final {
        None => cfg.lr,
        Some(end) => {
            let progress = step as f64 / cfg.steps.saturating_sub(1).max(1) as f64;
            end + 0.5 * (cfg.lr - end) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Scales each 512-value row to unit length; zero rows stay zero.
fn unit_rows(latents: &[f64]) -> Vec<f64> {
    let mut out = latents.to_vec();
    for row in out.chunks_mut(LATENT_DIM) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Motion embedding projection, stacked LSTM and pose head.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    config: SequenceConfig,
    skeleton: SkeletonModel,
    tree: Arc<KinematicTree>,
    store: ParamStore,
    embed: Linear,
    lstm: LstmStack,
    head: Linear,
    sparse_hash: String,
    prior_hash: String,
    steps_done: u64,
}

impl SequenceModel {
    pub fn new(config: SequenceConfig, skeleton: SkeletonModel, sparse: &SparseMotionEncoder, seed: u64) -> Result<Self> {
        if config.context == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config("sequence model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, &mut rng, "seq.embed", LATENT_DIM, EMBED_DIM, true)?;
        let lstm = LstmStack::new(&mut store, &mut rng, "seq.lstm", SIGNAL_DIM + EMBED_DIM, config.hidden, config.layers)?;
        let joints = skeleton.num_joints();
        let head = Linear::new(&mut store, &mut rng, "seq.head", config.hidden, 6 * joints, true)?;
        let bias: Vec<f64> = (0..joints).flat_map(|_| Rot6D::IDENTITY.0).collect();
        store.get_mut(head.bias.as_ref().expect("head bias"))?.value = Tensor::new(vec![6 * joints], bias)?;
        if !config.use_motion_prior {
            store.freeze(&embed.param_names())?;
        }
        Ok(Self {
            tree: skeleton.kinematic_tree(),
            config,
            skeleton,
            store,
            embed,
            lstm,
            head,
            sparse_hash: sparse.hash(),
            prior_hash: sparse.prior_hash().to_string(),
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &SkeletonModel {
        &self.skeleton
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }

    /// Hash of the sparse encoder this model was trained with.
    pub fn sparse_hash(&self) -> &str {
        &self.sparse_hash
    }

    /// Hash of the full prior behind that sparse encoder.
    pub fn prior_hash(&self) -> &str {
        &self.prior_hash
    }

    /// `E = W·M/|M| + b`, the 64-dimensional motion embedding of a latent.
    pub fn motion_embedding(&self, m: &[f64]) -> Result<Vec<f64>> {
        if m.len() != LATENT_DIM {
            return Err(Error::Shape(format!("latent has {} values, expected {LATENT_DIM}", m.len())));
        }
        let mut g = Graph::new();
        let x = g.input(1, LATENT_DIM, unit_rows(m))?;
        let e = self.embed.forward(&mut g, &self.store, x)?;
        Ok(g.value(e).to_vec())
    }

    /// Raw `batch × 6J` outputs for `batch` sequences of `S` frames.
    ///
    /// `signals` holds `u_rows × 54` normalised frames and `latents`
    /// `u_rows × 512` matching latents; `order` lists, time-major, which of
    /// those rows feeds step `s` of sequence `b` (index `s·batch + b`).
    fn forward(&self, g: &mut Graph, signals: &[f64], latents: &[f64], order: &[usize], batch: usize) -> Result<Var> {
        let s = self.config.context;
        let u_rows = signals.len() / SIGNAL_DIM;
        let x = g.input(u_rows, SIGNAL_DIM, signals.to_vec())?;
        let e = if self.config.use_motion_prior {
            let m = g.input(u_rows, LATENT_DIM, unit_rows(latents))?;
            self.embed.forward(g, &self.store, m)?
        } else {
            g.zeros(u_rows, EMBED_DIM)
        };
        let frames = g.concat_cols(&[x, e])?;
        let seq = g.gather_rows(frames, order)?;
        let out = self.lstm.forward(g, &self.store, seq, batch, s)?;
        Ok(self.head.forward(g, &self.store, out.last_hidden)?)
    }

    /// Local rotations from `S` normalised frames and their embeddings.
    pub fn predict_pose(&self, x_norm: &[AugmentedSignalFrame], embeddings: &[Vec<f64>]) -> Result<Vec<Rot6D>> {
        let s = self.config.context;
        if x_norm.len() != s || embeddings.len() != s {
            return Err(Error::Shape(format!(
                "{} frames and {} embeddings for context {s}",
                x_norm.len(),
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|e| e.len() != EMBED_DIM) {
            return Err(Error::Shape(format!("embeddings must have {EMBED_DIM} values")));
        }
        let mut g = Graph::new();
        let x: Vec<f64> = x_norm.iter().flat_map(|f| f.0).collect();
        let x = g.input(s, SIGNAL_DIM, x)?;
        let e = if self.config.use_motion_prior {
            g.input(s, EMBED_DIM, embeddings.concat())?
        } else {
            g.zeros(s, EMBED_DIM)
        };
        let seq = g.concat_cols(&[x, e])?;
        let out = self.lstm.forward(&mut g, &self.store, seq, 1, s)?;
        let y = self.head.forward(&mut g, &self.store, out.last_hidden)?;
        clean_rotations(g.value(y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "sequence_model",
            "config": self.config,
            "skeleton": self.skeleton.to_toml_string(),
            "sparse_hash": self.sparse_hash,
            "prior_hash": self.prior_hash,
            "steps_done": self.steps_done,
        });
        Ok(save_checkpoint(path, &self.store, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let (store, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("sequence_model") {
            return Err(Error::Config(format!("{} is not a sequence_model checkpoint", path.display())));
        }
        let field = |k: &str| meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let parse_err = |k: &str, e: serde_json::Error| Error::Config(format!("checkpoint field `{k}`: {e}"));
        let config: SequenceConfig = serde_json::from_value(field("config")).map_err(|e| parse_err("config", e))?;
        let skel: String = serde_json::from_value(field("skeleton")).map_err(|e| parse_err("skeleton", e))?;
        let skeleton = SkeletonModel::from_toml_str_generic(&skel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = ParamStore::new();
        let embed = Linear::new(&mut fresh, &mut rng, "seq.embed", LATENT_DIM, EMBED_DIM, true)?;
        let lstm = LstmStack::new(&mut fresh, &mut rng, "seq.lstm", SIGNAL_DIM + EMBED_DIM, config.hidden, config.layers)?;
        let head = Linear::new(&mut fresh, &mut rng, "seq.head", config.hidden, 6 * skeleton.num_joints(), true)?;
        fresh.restore_from(&store)?;
        Ok(Self {
            tree: skeleton.kinematic_tree(),
            config,
            skeleton,
            store: fresh,
            embed,
            lstm,
            head,
            sparse_hash: serde_json::from_value(field("sparse_hash")).map_err(|e| parse_err("sparse_hash", e))?,
            prior_hash: serde_json::from_value(field("prior_hash")).map_err(|e| parse_err("prior_hash", e))?,
            steps_done: serde_json::from_value(field("steps_done")).map_err(|e| parse_err("steps_done", e))?,
        })
    }
}

/// Gram–Schmidt every 6D block and re-encode it.
fn clean_rotations(raw: &[f64]) -> Result<Vec<Rot6D>> {
    raw.chunks(6).map(|c| Ok(Rot6D::encode(&Rot6D::from_slice(c).decode()?))).collect()
}

/// Content identifier of a clip, used as a cache key.
pub fn clip_id(clip: &MotionClip) -> String {
    let mut h = Sha256::new();
    h.update(clip.fps.to_le_bytes());
    for (rots, r) in clip.local_rot.iter().zip(&clip.root_translation) {
        for q in rots {
            for x in q.0 {
                h.update(x.to_le_bytes());
            }
        }
        for x in r.iter() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..12])
}

/// Sparse-encoder latents of every frame of a stream, frame `t` using the
/// window ending at `t`.
pub fn stream_latents(enc: &SparseMotionEncoder, frames: &[AugmentedSignalFrame]) -> Result<Vec<Vec<f64>>> {
    let t = enc.window();
    let mut out = Vec::with_capacity(frames.len());
    for chunk_start in (0..frames.len()).step_by(PREDICT_CHUNK) {
        let end = (chunk_start + PREDICT_CHUNK).min(frames.len());
        let mut flat = Vec::with_capacity((end - chunk_start) * t * SIGNAL_DIM);
        for u in chunk_start..end {
            for i in 0..t {
                flat.extend_from_slice(&frames[(u + i + 1).saturating_sub(t)].0);
            }
        }
        out.extend(enc.encode_rows(&flat, end - chunk_start)?);
    }
    Ok(out)
}

/// Per-frame motion latents keyed by (encoder hash, clip id, frame),
/// optionally persisted as one file per encoder and clip.
pub struct LatentCache {
    dir: Option<PathBuf>,
    pub hits: usize,
    pub misses: usize,
}

const CACHE_MAGIC: &str = "SPMO-LATENTS 1";

impl LatentCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, hits: 0, misses: 0 }
    }

    fn path(&self, encoder_hash: &str, clip_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&encoder_hash[..16.min(encoder_hash.len())]).join(format!("{clip_id}.lat")))
    }

    fn read(path: &Path, frames: usize) -> Option<Vec<Vec<f64>>> {
        let bytes = fs::read(path).ok()?;
        let header = format!("{CACHE_MAGIC} {frames} {LATENT_DIM}\n");
        let body = bytes.strip_prefix(header.as_bytes())?;
        if body.len() != frames * LATENT_DIM * 8 {
            return None;
        }
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Some(vals.chunks(LATENT_DIM).map(<[f64]>::to_vec).collect())
    }

    /// Latents for `frames` (the augmented signals of `clip`), from the cache
    /// when present.
    pub fn get_or_compute(&mut self, enc: &SparseMotionEncoder, clip: &MotionClip, frames: &[AugmentedSignalFrame]) -> Result<Vec<Vec<f64>>> {
        let path = self.path(&enc.hash(), &clip_id(clip));
        if let Some(p) = &path {
            if let Some(v) = Self::read(p, frames.len()) {
                self.hits += 1;
                return Ok(v);
            }
        }
        self.misses += 1;
        let latents = stream_latents(enc, frames)?;
        if let Some(p) = path {
            let parent = p.parent().expect("cache path has a parent");
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            let mut buf = format!("{CACHE_MAGIC} {} {LATENT_DIM}\n", frames.len()).into_bytes();
            for x in latents.iter().flatten() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            // Write then rename so a concurrent reader never sees a partial file.
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(latents)
    }
}

/// Training view of one clip.
struct ClipData {
    signals: Vec<f64>,
    latents: Vec<f64>,
    rot: Vec<f64>,
    pos: Vec<f64>,
    clip: usize,
}

fn clip_targets(skeleton: &SkeletonModel, clip: &MotionClip) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rot = Vec::with_capacity(clip.n_frames() * 6 * skeleton.num_joints());
    let mut pos = Vec::with_capacity(clip.n_frames() * 3 * skeleton.num_joints());
    for frame in &clip.local_rot {
        frame.iter().for_each(|q| rot.extend_from_slice(&q.0));
        let locals = frame.iter().map(Rot6D::decode).collect::<Result<Vec<Rotation>>>()?;
        let g = forward_kinematics_decoded(skeleton, &locals, &Vector3::zeros());
        g.positions.iter().for_each(|p| pos.extend(p.iter()));
    }
    Ok((rot, pos))
}

/// Rows of the unique frames a run of `frames` predictions ending at
/// `start..start + frames` needs, and the time-major gather order into them.
fn run_layout(start: usize, frames: usize, context: usize, row_offset: usize, batch: usize, batch_offset: usize, order: &mut [usize]) -> Vec<usize> {
    let first = (start + 1).saturating_sub(context);
    let needed: Vec<usize> = (first..start + frames).collect();
    for i in 0..frames {
        let u = start + i;
        for s in 0..context {
            let f = (u + s + 1).saturating_sub(context);
            order[s * batch + batch_offset + i] = row_offset + (f - first);
        }
    }
    needed
}

/// Trains the sequence model until it has taken `cfg.steps` steps. The
/// sparse encoder and full prior are only read; motion latents are
/// computed once per clip frame (through the cache) before training.
pub fn train_sequence_model(
    model: &mut SequenceModel,
    enc: &SparseMotionEncoder,
    prior: &FullMotionPrior,
    clips: &[MotionClip],
    cfg: &SeqTrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    if model.sparse_hash != enc.hash() {
        return Err(Error::Config("sequence model was created for a different sparse encoder".into()));
    }
    if enc.prior_hash() != prior.hash() {
        return Err(Error::Config("sparse encoder belongs to a different full prior".into()));
    }
    if cfg.windows_per_batch == 0 || cfg.window_stride == 0 {
        return Err(Error::Config("windows_per_batch and window_stride must be positive".into()));
    }
    let run = prior.config().window;
    let context = model.config.context;
    let mut frozen_prior = prior.clone();
    frozen_prior.freeze();

    let signals = clip_signals(prior.skeleton(), clips)?;
    let mut cache = LatentCache::new(cfg.cache_dir.clone());
    let mut data = Vec::new();
    let mut runs = Vec::new();
    for (ci, (clip, sig)) in clips.iter().zip(&signals).enumerate() {
        if clip.n_frames() < run {
            continue;
        }
        let latents = if model.config.use_motion_prior {
            cache.get_or_compute(enc, clip, sig)?.concat()
        } else {
            Vec::new()
        };
        let (rot, pos) = clip_targets(&model.skeleton, clip)?;
        let normalised = sig.iter().flat_map(|f| normalize_frame(f).0).collect();
        let idx = data.len();
        data.push(ClipData {
            signals: normalised,
            latents,
            rot,
            pos,
            clip: ci,
        });
        runs.extend((0..=clip.n_frames() - run).step_by(cfg.window_stride).map(|s| (idx, s)));
    }
    if runs.is_empty() {
        return Err(Error::InsufficientContext(format!("no clip has {run} frames")));
    }
    log::info!("latent cache: {} hits, {} misses", cache.hits, cache.misses);

    let joints = model.skeleton.num_joints();
    while model.steps_done < cfg.steps {
        let step = model.steps_done;
        let adam = AdamConfig {
            lr: scheduled_lr(cfg, step),
            ..AdamConfig::default()
        };
        let mut rng = step_rng(cfg.seed, step);
        let chosen: Vec<(usize, usize)> = if cfg.windows_per_batch >= runs.len() {
            runs.clone()
        } else {
            sample(&mut rng, runs.len(), cfg.windows_per_batch).into_iter().map(|i| runs[i]).collect()
        };
        let k = chosen.len();
        let batch = k * run;
        let mut order = vec![0; batch * context];
        let (mut sig_rows, mut lat_rows) = (Vec::new(), Vec::new());
        let (mut rot, mut pos, mut root, mut windows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut rows = 0;
        for (w, &(ci, start)) in chosen.iter().enumerate() {
            let d = &data[ci];
            let needed = run_layout(start, run, context, rows, batch, w * run, &mut order);
            for &f in &needed {
                sig_rows.extend_from_slice(&d.signals[f * SIGNAL_DIM..(f + 1) * SIGNAL_DIM]);
                if model.config.use_motion_prior {
                    lat_rows.extend_from_slice(&d.latents[f * LATENT_DIM..(f + 1) * LATENT_DIM]);
                }
            }
            rows += needed.len();
            rot.extend_from_slice(&d.rot[start * 6 * joints..(start + run) * 6 * joints]);
            pos.extend_from_slice(&d.pos[start * 3 * joints..(start + run) * 3 * joints]);
            let clip = &clips[d.clip];
            let origin = clip.root_translation[start];
            for r in &clip.root_translation[start..start + run] {
                root.extend((r - origin).iter());
            }
            if cfg.weights.mo != 0.0 {
                windows.push(clip.slice(start, run));
            }
        }
        let latents: Vec<f64> = if cfg.weights.mo != 0.0 {
            prior.encode_full(&windows)?.concat()
        } else {
            Vec::new()
        };
        let mut g = Graph::new();
        let pred = model.forward(&mut g, &sig_rows, &lat_rows, &order, batch)?;
        let targets = SeqTargets {
            windows: k,
            frames: run,
            rot: &rot,
            pos: &pos,
            root: &root,
            latents: &latents,
        };
        let loss = sequence_loss(&mut g, &model.tree, pred, &targets, Some(&frozen_prior), &cfg.weights)?;
        let value = g.scalar(loss.total);
        let terms = loss.values(&g);
        let grads = g.backward(loss.total)?;
        model.store.zero_grad();
        g.accumulate_param_grads(&grads, &mut model.store);
        let norm = match cfg.grad_clip {
            Some(c) => model.store.clip_grad_norm(c),
            None => model.store.grad_norm(),
        };
        model.store.adam_step(&adam)?;
        log.record("sequence_model", step, value, terms, norm)?;
        model.steps_done += 1;
    }
    Ok(())
}

/// Reconstructed motion: cleaned local rotations, head-aligned root
/// translation, and global joint positions per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedMotion {
    pub fps: f64,
    pub local_rot: Vec<Vec<Rot6D>>,
    pub root_translation: Vec<Vector3<f64>>,
    pub positions: Vec<Vec<Vector3<f64>>>,
}

impl PredictedMotion {
    pub fn n_frames(&self) -> usize {
        self.local_rot.len()
    }

    pub fn to_clip(&self) -> MotionClip {
        MotionClip {
            fps: self.fps,
            local_rot: self.local_rot.clone(),
            root_translation: self.root_translation.clone(),
            action_label: None,
            text_embedding: None,
            image_embedding: None,
        }
    }
}

/// Places a pose so that its head joint sits exactly at the tracked head
/// position; returns the root translation and global joint positions.
pub fn head_aligned_pose(skeleton: &SkeletonModel, rots: &[Rot6D], head: Vector3<f64>) -> Result<(Vector3<f64>, Vec<Vector3<f64>>)> {
    let locals = rots.iter().map(Rot6D::decode).collect::<Result<Vec<Rotation>>>()?;
    let fk = forward_kinematics_decoded(skeleton, &locals, &Vector3::zeros());
    let h = fk.positions[skeleton.tracked_joints()[0]];
    let positions = fk.positions.iter().map(|p| head + (p - h)).collect();
    Ok((head - h, positions))
}

/// Full reconstruction chain: sparse encoder followed by the sequence
/// model.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub model: SequenceModel,
    pub encoder: SparseMotionEncoder,
}

impl Reconstructor {
    pub fn new(model: SequenceModel, encoder: SparseMotionEncoder) -> Result<Self> {
        if model.sparse_hash != encoder.hash() {
            return Err(Error::Config("sequence model was trained with a different sparse encoder".into()));
        }
        Ok(Self { model, encoder })
    }

    /// Poses for frames `from..frames.len()` of an augmented stream.
    fn predict_range(&self, frames: &[AugmentedSignalFrame], from: usize) -> Result<Vec<Vec<Rot6D>>> {
        let context = self.model.config.context;
        let window = self.encoder.window();
        let use_prior = self.model.config.use_motion_prior;
        let mut out = Vec::with_capacity(frames.len() - from);
        for chunk_start in (from..frames.len()).step_by(PREDICT_CHUNK) {
            let end = (chunk_start + PREDICT_CHUNK).min(frames.len());
            let batch = end - chunk_start;
            let mut order = vec![0; batch * context];
            let needed = run_layout(chunk_start, batch, context, 0, batch, 0, &mut order);
            let signals: Vec<f64> = needed.iter().flat_map(|&f| normalize_frame(&frames[f]).0).collect();
            let latents = if use_prior {
                // Latent of the window ending at each needed frame, computed
                // one window at a time as the streaming path does.
                let mut l = Vec::with_capacity(needed.len() * LATENT_DIM);
                for &f in &needed {
                    let mut flat = Vec::with_capacity(window * SIGNAL_DIM);
                    for i in 0..window {
                        flat.extend_from_slice(&frames[(f + i + 1).saturating_sub(window)].0);
                    }
                    l.extend(self.encoder.encode_rows(&flat, 1)?.remove(0));
                }
                l
            } else {
                Vec::new()
            };
            let mut g = Graph::new();
            let y = self.model.forward(&mut g, &signals, &latents, &order, batch)?;
            for row in g.value(y).chunks(6 * self.model.skeleton.num_joints()) {
                out.push(clean_rotations(row)?);
            }
        }
        Ok(out)
    }

    fn assemble(&self, raw: &[SparseSignalFrame], rots: Vec<Vec<Rot6D>>, fps: f64) -> Result<PredictedMotion> {
        let mut root_translation = Vec::with_capacity(rots.len());
        let mut positions = Vec::with_capacity(rots.len());
        for (r, s) in rots.iter().zip(raw) {
            let (root, pos) = head_aligned_pose(&self.model.skeleton, r, s.positions[0])?;
            root_translation.push(root);
            positions.push(pos);
        }
        Ok(PredictedMotion {
            fps,
            local_rot: rots,
            root_translation,
            positions,
        })
    }

    /// Offline reconstruction of a whole stream.
    pub fn infer_motion(&self, raw: &[SparseSignalFrame], fps: f64) -> Result<PredictedMotion> {
        let seq = augment(raw, fps)?;
        let rots = self.predict_range(&seq.frames, 0)?;
        self.assemble(raw, rots, fps)
    }

    pub fn stream(&self, fps: f64) -> StreamingSession<'_> {
        StreamingSession {
            chain: self,
            fps,
            raw: Vec::new(),
            frames: Vec::new(),
        }
    }
}

/// Frame-at-a-time reconstruction. The first frame's velocities are only
/// known once the second frame arrives, so frame 0 is emitted together
/// with frame 1 (or by [`StreamingSession::finish`] for a one-frame stream).
pub struct StreamingSession<'a> {
    chain: &'a Reconstructor,
    fps: f64,
    raw: Vec<SparseSignalFrame>,
    frames: Vec<AugmentedSignalFrame>,
}

impl StreamingSession<'_> {
    /// Feeds one frame and returns the poses that became available.
    pub fn push(&mut self, frame: SparseSignalFrame) -> Result<PredictedMotion> {
        self.raw.push(frame);
        let n = self.raw.len();
        let from = match n {
            1 => return self.chain.assemble(&[], Vec::new(), self.fps),
            2 => {
                self.frames = augment(&self.raw, self.fps)?.frames;
                0
            }
            _ => {
                let pair = augment(&self.raw[n - 2..], self.fps)?;
                self.frames.push(pair.frames[1]);
                n - 1
            }
        };
        let rots = self.predict_from(from)?;
        self.chain.assemble(&self.raw[from..], rots, self.fps)
    }

    /// Flushes a pending first frame of a one-frame stream.
    pub fn finish(mut self) -> Result<PredictedMotion> {
        if self.raw.len() == 1 {
            self.frames = augment(&self.raw, self.fps)?.frames;
            let rots = self.predict_from(0)?;
            return self.chain.assemble(&self.raw, rots, self.fps);
        }
        self.chain.assemble(&[], Vec::new(), self.fps)
    }

    fn predict_from(&self, from: usize) -> Result<Vec<Vec<Rot6D>>> {
        // Each frame is predicted on its own, exactly as a live session would.
        let mut out = Vec::new();
        for t in from..self.frames.len() {
            out.extend(self.chain.predict_range(&self.frames[..=t], t)?);
        }
        Ok(out)
    }
}

/// Loss components evaluated without training, for diagnostics.
pub fn evaluate_sequence_loss(
    model: &SequenceModel,
    enc: &SparseMotionEncoder,
    prior: &FullMotionPrior,
    clip: &MotionClip,
    start: usize,
    w: &SeqLossWeights,
) -> Result<BTreeMap<String, f64>> {
    let run = prior.config().window;
    if clip.n_frames() < start + run {
        return Err(Error::InsufficientContext(format!("clip has {} frames, need {}", clip.n_frames(), start + run)));
    }
    let sig = clip_signals(prior.skeleton(), std::slice::from_ref(clip))?.remove(0);
    let latents = if model.config.use_motion_prior { stream_latents(enc, &sig)?.concat() } else { Vec::new() };
    let normalised: Vec<f64> = sig.iter().flat_map(|f| normalize_frame(f).0).collect();
    let context = model.config.context;
    let mut order = vec![0; run * context];
    let needed = run_layout(start, run, context, 0, run, 0, &mut order);
    let sig_rows: Vec<f64> = needed.iter().flat_map(|&f| normalised[f * SIGNAL_DIM..(f + 1) * SIGNAL_DIM].to_vec()).collect();
    let lat_rows: Vec<f64> = if model.config.use_motion_prior {
        needed.iter().flat_map(|&f| latents[f * LATENT_DIM..(f + 1) * LATENT_DIM].to_vec()).collect()
    } else {
        Vec::new()
    };
    let (rot, pos) = clip_targets(&model.skeleton, &clip.slice(start, run))?;
    let window = clip.slice(start, run);
    let feats = pose_features(&window.local_rot, &window.root_translation);
    let root: Vec<f64> = feats.chunks(prior.feature_dim()).flat_map(|f| f[f.len() - 3..].to_vec()).collect();
    let gt_latent = prior.encode_full(std::slice::from_ref(&window))?.concat();
    let mut g = Graph::new();
    let pred = model.forward(&mut g, &sig_rows, &lat_rows, &order, run)?;
    let targets = SeqTargets {
        windows: 1,
        frames: run,
        rot: &rot,
        pos: &pos,
        root: &root,
        latents: &gt_latent,
    };
    let loss = sequence_loss(&mut g, &model.tree, pred, &targets, Some(prior), w)?;
    let mut terms = loss.values(&g);
    terms.insert("total".into(), g.scalar(loss.total));
    Ok(terms)
}
