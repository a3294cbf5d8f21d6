//! Full motion prior (transformer encoder/decoder over fixed-length
//! full-body windows) and the sparse motion encoder that maps tracking
//! signals into the same latent space.
//!
//! Full-pose window features are `T × (6J + 3)`: every joint's local 6D
//! rotation followed by the root translation relative to the window's
//! first frame. Decoded windows use the same layout.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsemo_nn::{
    init, load_checkpoint, positional_encoding, save_checkpoint, AdamConfig, Graph, KinematicTree, Linear, ParamStore, Tensor,
    TransformerConfig, TransformerDecoderStack, TransformerEncoderStack, Var,
};

use crate::dataio::{MotionClip, WindowedDataset, LATENT_DIM};
use crate::error::{Error, Result};
use crate::kinematics::{Rot6D, SkeletonModel};
use crate::signals::{augment, extract_sparse_signals, AugmentedSignalFrame, SIGNAL_DIM};
use crate::train::{step_rng, TrainLog};

pub const WINDOW: usize = 60;
const ENCODE_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub window: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of memory tokens the latent is expanded into for the
    /// decoder's cross attention.
    pub memory_tokens: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            window: WINDOW,
            d_model: 256,
            heads: 4,
            ff_dim: 1024,
            encoder_layers: 4,
            decoder_layers: 4,
            memory_tokens: 4,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.d_model == 0 || self.heads == 0 || self.memory_tokens == 0 {
            return Err(Error::Config("prior dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    fn stack(&self, layers: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers,
        }
    }
}

/// Positional table for `len` positions repeated for `batch` sequences.
fn tiled_positions(len: usize, d: usize, batch: usize) -> Vec<f64> {
    let pe = positional_encoding(len, d);
    let mut out = Vec::with_capacity(pe.len() * batch);
    for _ in 0..batch {
        out.extend_from_slice(&pe);
    }
    out
}

/// Transformer encoder with a learned summary token whose output is
/// projected to the latent.
#[derive(Clone, Debug)]
struct EncoderNet {
    input: Linear,
    token: String,
    stack: TransformerEncoderStack,
    to_latent: Linear,
    window: usize,
    d_model: usize,
}

impl EncoderNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, cfg: &PriorConfig) -> Result<Self> {
        let d = cfg.d_model;
        let input = Linear::new(store, rng, &format!("{prefix}.input"), in_dim, d, true)?;
        let token = format!("{prefix}.token");
        store.insert(&token, init::normal(rng, 0.1, vec![1, d]))?;
        let stack = TransformerEncoderStack::new(store, rng, &format!("{prefix}.stack"), &cfg.stack(cfg.encoder_layers))?;
        let to_latent = Linear::new(store, rng, &format!("{prefix}.to_latent"), d, LATENT_DIM, true)?;
        Ok(Self {
            input,
            token,
            stack,
            to_latent,
            window: cfg.window,
            d_model: d,
        })
    }

    /// `x` holds `batch` windows of `window` rows each; returns `batch × 512`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let t = self.window;
        let h = self.input.forward(g, store, x)?;
        let tok = g.param(store, &self.token)?;
        let all = g.concat_rows(&[tok, h])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..t).map(move |i| 1 + b * t + i)))
            .collect();
        let seq = g.gather_rows(all, &order)?;
        let pe = g.input(batch * (t + 1), self.d_model, tiled_positions(t + 1, self.d_model, batch))?;
        let seq = g.add(seq, pe)?;
        let out = self.stack.forward(g, store, seq, t + 1)?;
        let first: Vec<usize> = (0..batch).map(|b| b * (t + 1)).collect();
        let summary = g.gather_rows(out, &first)?;
        Ok(self.to_latent.forward(g, store, summary)?)
    }
}

/// Transformer decoder: learned query per output frame, cross attention
/// over memory tokens projected from the latent.
#[derive(Clone, Debug)]
struct DecoderNet {
    memory: Vec<Linear>,
    queries: String,
    stack: TransformerDecoderStack,
    output: Linear,
    window: usize,
    d_model: usize,
}

impl DecoderNet {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, joints: usize, cfg: &PriorConfig) -> Result<Self> {
        let d = cfg.d_model;
        let memory = (0..cfg.memory_tokens)
            .map(|k| Linear::new(store, rng, &format!("decoder.memory{k}"), LATENT_DIM, d, true))
            .collect::<sparsemo_nn::Result<Vec<_>>>()?;
        let queries = "decoder.queries".to_string();
        store.insert(&queries, init::normal(rng, 0.1, vec![cfg.window, d]))?;
        let stack = TransformerDecoderStack::new(store, rng, "decoder.stack", &cfg.stack(cfg.decoder_layers))?;
        let out_dim = 6 * joints + 3;
        let output = Linear::new(store, rng, "decoder.output", d, out_dim, true)?;
        let mut bias = vec![0.0; out_dim];
        for j in 0..joints {
            bias[6 * j..6 * j + 6].copy_from_slice(&Rot6D::IDENTITY.0);
        }
        store.get_mut(output.bias.as_ref().expect("output bias"))?.value = Tensor::new(vec![out_dim], bias)?;
        Ok(Self {
            memory,
            queries,
            stack,
            output,
            window: cfg.window,
            d_model: d,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, batch: usize) -> Result<Var> {
        let k = self.memory.len();
        let t = self.window;
        let mems = self
            .memory
            .iter()
            .map(|m| m.forward(g, store, latent))
            .collect::<sparsemo_nn::Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&mems)?;
        let order: Vec<usize> = (0..batch).flat_map(|b| (0..k).map(move |i| i * batch + b)).collect();
        let memory = g.gather_rows(stacked, &order)?;
        let q = g.param(store, &self.queries)?;
        let tile: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let q = g.gather_rows(q, &tile)?;
        let pe = g.input(batch * t, self.d_model, tiled_positions(t, self.d_model, batch))?;
        let q = g.add(q, pe)?;
        let y = self.stack.forward(g, store, q, t, memory, k)?;
        Ok(self.output.forward(g, store, y)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullLossWeights {
    pub text: f64,
    pub image: f64,
    pub pos: f64,
}

impl Default for FullLossWeights {
    fn default() -> Self {
        Self {
            text: 0.01,
            image: 0.01,
            pos: 1.0,
        }
    }
}

/// A scalar loss node with its named components (unweighted).
#[derive(Debug)]
pub struct LossTerms {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> BTreeMap<String, f64> {
        self.terms.iter().map(|(k, v)| (k.to_string(), g.scalar(*v))).collect()
    }
}

/// Reconstruction and embedding-alignment loss of the full prior.
///
/// `pred` and `target` are `rows × (6J + 3)`; `latent` is `B × 512` and
/// `text`/`image` hold `B` matching embedding rows. Reconstruction is the
/// 6D rotation MSE plus `w.pos` times the MSE of FK joint positions.
#[allow(clippy::too_many_arguments)]
pub fn full_prior_loss(
    g: &mut Graph,
    tree: &Arc<KinematicTree>,
    pred: Var,
    target: &[f64],
    latent: Var,
    text: &[f64],
    image: &[f64],
    w: &FullLossWeights,
) -> Result<LossTerms> {
    let (rows, cols) = g.dims(pred);
    let joints = tree.len();
    if cols != 6 * joints + 3 || target.len() != rows * cols {
        return Err(Error::Shape(format!(
            "prediction {rows}x{cols} and target of {} values for {joints} joints",
            target.len()
        )));
    }
    let (b, _) = g.dims(latent);
    let target = g.input(rows, cols, target.to_vec())?;
    let positions = |g: &mut Graph, x: Var| -> Result<Var> {
        let rot = g.slice_cols(x, 0, 6 * joints)?;
        let trans = g.slice_cols(x, 6 * joints, 3)?;
        let mats = g.rot6d_to_mat(rot)?;
        Ok(g.forward_kinematics(mats, Some(trans), tree.clone())?)
    };
    let pred_rot = g.slice_cols(pred, 0, 6 * joints)?;
    let target_rot = g.slice_cols(target, 0, 6 * joints)?;
    let rot = g.mse(pred_rot, target_rot)?;
    let pp = positions(g, pred)?;
    let tp = positions(g, target)?;
    let pos = g.mse(pp, tp)?;
    let text = g.input(b, LATENT_DIM, text.to_vec())?;
    let image = g.input(b, LATENT_DIM, image.to_vec())?;
    let l_text = g.cosine_distance(latent, text)?;
    let l_image = g.cosine_distance(latent, image)?;
    let total = g.weighted_sum(&[(1.0, rot), (w.pos, pos), (w.text, l_text), (w.image, l_image)])?;
    Ok(LossTerms {
        total,
        terms: vec![("rot", rot), ("pos", pos), ("text", l_text), ("image", l_image)],
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Embedding alignment only.
    #[default]
    Paper,
    /// Adds a term pulling the sparse latent towards the full encoder's.
    Extended,
}

impl LossMode {
    pub fn lambda_latent(self) -> f64 {
        match self {
            LossMode::Paper => 0.0,
            LossMode::Extended => 1.0,
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "extended" => Ok(Self::Extended),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected paper or extended)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseLossWeights {
    pub text: f64,
    pub image: f64,
    pub latent: f64,
}

impl SparseLossWeights {
    pub fn for_mode(mode: LossMode) -> Self {
        Self {
            text: 0.01,
            image: 0.01,
            latent: mode.lambda_latent(),
        }
    }
}

/// Sparse-encoder loss on `B × 512` latents. `target` (the full encoder's
/// latents) is only consulted when `w.latent` is nonzero.
pub fn sparse_loss(g: &mut Graph, m_star: Var, text: &[f64], image: &[f64], target: Option<&[f64]>, w: &SparseLossWeights) -> Result<LossTerms> {
    let (b, _) = g.dims(m_star);
    let text = g.input(b, LATENT_DIM, text.to_vec())?;
    let image = g.input(b, LATENT_DIM, image.to_vec())?;
    let l_text = g.cosine_distance(m_star, text)?;
    let l_image = g.cosine_distance(m_star, image)?;
    let mut weighted = vec![(w.text, l_text), (w.image, l_image)];
    let mut terms = vec![("text", l_text), ("image", l_image)];
    if w.latent != 0.0 {
        let target = target.ok_or_else(|| Error::Config("latent-matching term needs full-encoder targets".into()))?;
        let t = g.input(b, LATENT_DIM, target.to_vec())?;
        let l = g.cosine_distance(m_star, t)?;
        weighted.push((w.latent, l));
        terms.push(("latent", l));
    }
    let total = g.weighted_sum(&weighted)?;
    Ok(LossTerms { total, terms })
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

fn latents_from(g: &Graph, v: Var) -> Vec<Vec<f64>> {
    g.value(v).chunks(LATENT_DIM).map(<[f64]>::to_vec).collect()
}

fn checkpoint_meta(path: &Path, kind: &str) -> Result<(ParamStore, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let (store, meta) = load_checkpoint(path)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::Config(format!("{} is not a {kind} checkpoint", path.display())));
    }
    Ok((store, meta))
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    serde_json::from_value(meta.get(key).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| Error::Config(format!("checkpoint field `{key}`: {e}")))
}

/// The largest batch drawn each step: every eligible window when there are
/// few of them, otherwise a sample without replacement.
fn draw_batch(rng: &mut ChaCha8Rng, eligible: &[usize], batch: usize) -> Vec<usize> {
    if batch >= eligible.len() {
        eligible.to_vec()
    } else {
        sample(rng, eligible.len(), batch).into_iter().map(|i| eligible[i]).collect()
    }
}

fn optimizer_step(g: &Graph, loss: Var, store: &mut ParamStore, adam: &AdamConfig, clip: Option<f64>) -> Result<f64> {
    let grads = g.backward(loss)?;
    store.zero_grad();
    g.accumulate_param_grads(&grads, store);
    let norm = match clip {
        Some(c) => store.clip_grad_norm(c),
        None => store.grad_norm(),
    };
    store.adam_step(adam)?;
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub window_stride: usize,
    pub weights: FullLossWeights,
    pub grad_clip: Option<f64>,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            window_stride: 1,
            weights: FullLossWeights::default(),
            grad_clip: None,
        }
    }
}

/// Full motion prior: encoder from full-body windows to the latent and a
/// decoder back to full-body windows.
#[derive(Clone, Debug)]
pub struct FullMotionPrior {
    config: PriorConfig,
    skeleton: SkeletonModel,
    tree: Arc<KinematicTree>,
    store: ParamStore,
    encoder: EncoderNet,
    decoder: DecoderNet,
    steps_done: u64,
}

impl FullMotionPrior {
    pub fn new(config: PriorConfig, skeleton: SkeletonModel, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let joints = skeleton.num_joints();
        let encoder = EncoderNet::new(&mut store, &mut rng, "encoder", 6 * joints + 3, &config)?;
        let decoder = DecoderNet::new(&mut store, &mut rng, joints, &config)?;
        Ok(Self {
            tree: skeleton.kinematic_tree(),
            config,
            skeleton,
            store,
            encoder,
            decoder,
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &PriorConfig {
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

    pub fn feature_dim(&self) -> usize {
        6 * self.skeleton.num_joints() + 3
    }

    pub fn encoder_hash(&self) -> String {
        self.store.hash_prefix("encoder.")
    }

    pub fn decoder_hash(&self) -> String {
        self.store.hash_prefix("decoder.")
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }

    pub fn tree(&self) -> &Arc<KinematicTree> {
        &self.tree
    }

    /// Flattened `T × (6J + 3)` features of a window.
    pub fn window_features(&self, window: &MotionClip) -> Result<Vec<f64>> {
        let t = self.config.window;
        if window.n_frames() != t {
            return Err(Error::Shape(format!("window has {} frames, expected {t}", window.n_frames())));
        }
        if window.num_joints() != self.skeleton.num_joints() {
            return Err(Error::Shape(format!(
                "window has {} joints, skeleton has {}",
                window.num_joints(),
                self.skeleton.num_joints()
            )));
        }
        Ok(pose_features(&window.local_rot, &window.root_translation))
    }

    /// Encoder on the tape: `batch` windows of `T` feature rows to `batch × 512`.
    pub fn encode_graph(&self, g: &mut Graph, feats: Var, batch: usize) -> Result<Var> {
        self.encoder.forward(g, &self.store, feats, batch)
    }

    /// Decoder on the tape: `batch × 512` latents to `batch·T` feature rows.
    pub fn decode_graph(&self, g: &mut Graph, latent: Var, batch: usize) -> Result<Var> {
        self.decoder.forward(g, &self.store, latent, batch)
    }

    /// [`Self::encode_graph`] reading parameters from `store`, which must
    /// have this prior's layout.
    pub fn encode_graph_with(&self, g: &mut Graph, store: &ParamStore, feats: Var, batch: usize) -> Result<Var> {
        self.encoder.forward(g, store, feats, batch)
    }

    pub fn decode_graph_with(&self, g: &mut Graph, store: &ParamStore, latent: Var, batch: usize) -> Result<Var> {
        self.decoder.forward(g, store, latent, batch)
    }

    /// Latents of windows given as flattened features, `batch` windows.
    pub fn encode_features(&self, feats: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        let per = self.config.window * self.feature_dim();
        if feats.len() != per * batch {
            return Err(Error::Shape(format!("{} feature values for {batch} windows of {per}", feats.len())));
        }
        let mut out = Vec::with_capacity(batch);
        for chunk in feats.chunks(per * ENCODE_CHUNK) {
            let n = chunk.len() / per;
            let mut g = Graph::new();
            let x = g.input(n * self.config.window, self.feature_dim(), chunk.to_vec())?;
            let m = self.encode_graph(&mut g, x, n)?;
            out.extend(latents_from(&g, m));
        }
        Ok(out)
    }

    pub fn encode_full(&self, windows: &[MotionClip]) -> Result<Vec<Vec<f64>>> {
        let mut feats = Vec::new();
        for w in windows {
            feats.extend(self.window_features(w)?);
        }
        self.encode_features(&feats, windows.len())
    }

    /// Decoded windows; root translations are relative to the window start
    /// and rotations are raw network outputs (decode applies Gram–Schmidt).
    pub fn decode_full(&self, latents: &[Vec<f64>]) -> Result<Vec<MotionClip>> {
        let joints = self.skeleton.num_joints();
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new();
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            if flat.len() != chunk.len() * LATENT_DIM {
                return Err(Error::Shape("latents must have 512 values".into()));
            }
            let m = g.input(chunk.len(), LATENT_DIM, flat)?;
            let y = self.decode_graph(&mut g, m, chunk.len())?;
            for w in g.value(y).chunks(self.config.window * self.feature_dim()) {
                let frames = w.chunks(self.feature_dim());
                out.push(MotionClip {
                    fps: 30.0,
                    local_rot: frames.clone().map(|f| f[..6 * joints].chunks(6).map(Rot6D::from_slice).collect()).collect(),
                    root_translation: frames.map(|f| Vector3::from_column_slice(&f[6 * joints..])).collect(),
                    action_label: None,
                    text_embedding: None,
                    image_embedding: None,
                });
            }
        }
        Ok(out)
    }

    pub fn loss_fm(&self, window: &MotionClip, text: &[f64], image: &[f64], w: &FullLossWeights) -> Result<LossBreakdown> {
        let feats = self.window_features(window)?;
        let mut g = Graph::new();
        let x = g.input(self.config.window, self.feature_dim(), feats.clone())?;
        let m = self.encode_graph(&mut g, x, 1)?;
        let y = self.decode_graph(&mut g, m, 1)?;
        let l = full_prior_loss(&mut g, &self.tree, y, &feats, m, text, image, w)?;
        Ok(LossBreakdown {
            total: g.scalar(l.total),
            terms: l.values(&g),
        })
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "full_prior",
            "config": self.config,
            "skeleton": self.skeleton.to_toml_string(),
            "steps_done": self.steps_done,
        });
        Ok(save_checkpoint(path, &self.store, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint_meta(path, "full_prior")?;
        let config: PriorConfig = meta_field(&meta, "config")?;
        let skeleton = SkeletonModel::from_toml_str_generic(&meta_field::<String>(&meta, "skeleton")?)?;
        let mut prior = Self::new(config, skeleton, 0)?;
        prior.store.restore_from(&store)?;
        prior.steps_done = meta_field(&meta, "steps_done")?;
        Ok(prior)
    }
}

pub(crate) fn pose_features(local_rot: &[Vec<Rot6D>], root: &[Vector3<f64>]) -> Vec<f64> {
    let origin = root[0];
    let mut out = Vec::with_capacity(local_rot.len() * (local_rot[0].len() * 6 + 3));
    for (rots, r) in local_rot.iter().zip(root) {
        rots.iter().for_each(|q| out.extend_from_slice(&q.0));
        out.extend((r - origin).iter());
    }
    out
}

/// Trains `prior` until it has taken `cfg.steps` optimizer steps. Windows
/// from clips without embeddings are skipped with a logged count.
pub fn train_full_prior(prior: &mut FullMotionPrior, data: &WindowedDataset, cfg: &PriorTrainConfig, log: &mut TrainLog) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.window_len != prior.config.window {
        return Err(Error::Config(format!(
            "dataset windows have {} frames, prior expects {}",
            data.window_len, prior.config.window
        )));
    }
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.clips[data.windows[i].source].has_embeddings()).collect();
    let excluded = data.clips.iter().filter(|c| !c.has_embeddings()).count();
    if excluded > 0 {
        log::warn!("excluded {excluded} clips without embeddings from prior training");
    }
    if eligible.is_empty() {
        return Err(Error::Data("no windows with text and image embeddings".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let t = prior.config.window;
    let f = prior.feature_dim();
    while prior.steps_done < cfg.steps {
        let step = prior.steps_done;
        let mut rng = step_rng(cfg.seed, step);
        let batch = draw_batch(&mut rng, &eligible, cfg.batch_size);
        let mut feats = Vec::with_capacity(batch.len() * t * f);
        let mut text = Vec::with_capacity(batch.len() * LATENT_DIM);
        let mut image = Vec::with_capacity(batch.len() * LATENT_DIM);
        for &i in &batch {
            let w = data.window(i);
            feats.extend(prior.window_features(&w)?);
            text.extend(w.text_embedding.as_ref().expect("eligible"));
            image.extend(w.image_embedding.as_ref().expect("eligible"));
        }
        let mut g = Graph::new();
        let x = g.input(batch.len() * t, f, feats.clone())?;
        let m = prior.encode_graph(&mut g, x, batch.len())?;
        let y = prior.decode_graph(&mut g, m, batch.len())?;
        let loss = full_prior_loss(&mut g, &prior.tree, y, &feats, m, &text, &image, &cfg.weights)?;
        let value = g.scalar(loss.total);
        let terms = loss.values(&g);
        let norm = optimizer_step(&g, loss.total, &mut prior.store, &adam, cfg.grad_clip)?;
        log.record("full_prior", step, value, terms, norm)?;
        prior.steps_done += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub window_stride: usize,
    pub mode: LossMode,
    pub lambda_text: f64,
    pub lambda_image: f64,
    /// Overrides the mode's latent-matching weight when set.
    pub lambda_latent: Option<f64>,
    /// Half-width in meters of a random horizontal offset added to each
    /// training window's positions; 0 disables it.
    pub random_offset: f64,
    /// Initialise the transformer stack from the full encoder.
    pub warm_start: bool,
    pub grad_clip: Option<f64>,
}

impl Default for SparseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            window_stride: 1,
            mode: LossMode::Paper,
            lambda_text: 0.01,
            lambda_image: 0.01,
            lambda_latent: None,
            random_offset: 0.0,
            warm_start: true,
            grad_clip: None,
        }
    }
}

impl SparseTrainConfig {
    pub fn weights(&self) -> SparseLossWeights {
        SparseLossWeights {
            text: self.lambda_text,
            image: self.lambda_image,
            latent: self.lambda_latent.unwrap_or_else(|| self.mode.lambda_latent()),
        }
    }
}

/// Encoder from unnormalised augmented tracking windows (`T × 54`) to the
/// motion latent. Same transformer shape as the full encoder.
#[derive(Clone, Debug)]
pub struct SparseMotionEncoder {
    config: PriorConfig,
    prior_hash: String,
    store: ParamStore,
    net: EncoderNet,
    steps_done: u64,
}

impl SparseMotionEncoder {
    /// A fresh encoder bound to `prior`. With `warm_start`, every parameter
    /// except the input projection is copied from the full encoder.
    pub fn new(prior: &FullMotionPrior, seed: u64, warm_start: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = EncoderNet::new(&mut store, &mut rng, "sparse", SIGNAL_DIM, &prior.config)?;
        if warm_start {
            store.copy_values_from(&prior.store, |name| {
                (!name.starts_with("sparse.input.")).then(|| name.replacen("sparse.", "encoder.", 1))
            })?;
        }
        Ok(Self {
            config: prior.config.clone(),
            prior_hash: prior.hash(),
            store,
            net,
            steps_done: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.config.window
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

    /// Hash of the full prior this encoder was trained against.
    pub fn prior_hash(&self) -> &str {
        &self.prior_hash
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn encode_graph(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        self.net.forward(g, &self.store, x, batch)
    }

    pub fn encode_graph_with(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        self.net.forward(g, store, x, batch)
    }

    /// Latents of `batch` windows of flattened augmented frames.
    pub fn encode_rows(&self, flat: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        let per = self.config.window * SIGNAL_DIM;
        if flat.len() != per * batch {
            return Err(Error::Shape(format!("{} signal values for {batch} windows of {per}", flat.len())));
        }
        let mut out = Vec::with_capacity(batch);
        for chunk in flat.chunks(per * ENCODE_CHUNK) {
            let n = chunk.len() / per;
            let mut g = Graph::new();
            let x = g.input(n * self.config.window, SIGNAL_DIM, chunk.to_vec())?;
            let m = self.encode_graph(&mut g, x, n)?;
            out.extend(latents_from(&g, m));
        }
        Ok(out)
    }

    /// Latents of windows of exactly `T` augmented (not normalised) frames.
    pub fn encode_sparse(&self, windows: &[Vec<AugmentedSignalFrame>]) -> Result<Vec<Vec<f64>>> {
        let mut flat = Vec::with_capacity(windows.len() * self.config.window * SIGNAL_DIM);
        for w in windows {
            if w.len() != self.config.window {
                return Err(Error::Shape(format!("window has {} frames, expected {}", w.len(), self.config.window)));
            }
            w.iter().for_each(|f| flat.extend_from_slice(&f.0));
        }
        self.encode_rows(&flat, windows.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "sparse_encoder",
            "config": self.config,
            "prior_hash": self.prior_hash,
            "steps_done": self.steps_done,
        });
        Ok(save_checkpoint(path, &self.store, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint_meta(path, "sparse_encoder")?;
        let config: PriorConfig = meta_field(&meta, "config")?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = ParamStore::new();
        let net = EncoderNet::new(&mut fresh, &mut rng, "sparse", SIGNAL_DIM, &config)?;
        fresh.restore_from(&store)?;
        Ok(Self {
            config,
            prior_hash: meta_field(&meta, "prior_hash")?,
            store: fresh,
            net,
            steps_done: meta_field(&meta, "steps_done")?,
        })
    }
}

/// Augmented signals of every clip, computed over the whole clip so that
/// window velocities match those seen when streaming.
pub(crate) fn clip_signals(skeleton: &SkeletonModel, clips: &[MotionClip]) -> Result<Vec<Vec<AugmentedSignalFrame>>> {
    clips
        .iter()
        .map(|c| Ok(augment(&extract_sparse_signals(skeleton, c)?, c.fps)?.frames))
        .collect()
}

/// Trains the sparse encoder against a frozen full prior until it has
/// taken `cfg.steps` steps. The prior is only read.
pub fn train_sparse_encoder(
    enc: &mut SparseMotionEncoder,
    prior: &FullMotionPrior,
    data: &WindowedDataset,
    cfg: &SparseTrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    if enc.prior_hash != prior.hash() {
        return Err(Error::Config("sparse encoder was created for a different full prior".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let t = enc.config.window;
    if data.window_len != t {
        return Err(Error::Config(format!("dataset windows have {} frames, encoder expects {t}", data.window_len)));
    }
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.clips[data.windows[i].source].has_embeddings()).collect();
    if eligible.is_empty() {
        return Err(Error::Data("no windows with text and image embeddings".into()));
    }
    let weights = cfg.weights();
    let signals = clip_signals(prior.skeleton(), &data.clips)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    while enc.steps_done < cfg.steps {
        let step = enc.steps_done;
        let mut rng = step_rng(cfg.seed, step);
        let batch = draw_batch(&mut rng, &eligible, cfg.batch_size);
        let mut x = Vec::with_capacity(batch.len() * t * SIGNAL_DIM);
        let mut text = Vec::new();
        let mut image = Vec::new();
        let mut windows = Vec::new();
        for &i in &batch {
            let wr = data.windows[i];
            let (dx, dz) = if cfg.random_offset > 0.0 {
                (rng.gen_range(-cfg.random_offset..cfg.random_offset), rng.gen_range(-cfg.random_offset..cfg.random_offset))
            } else {
                (0.0, 0.0)
            };
            for f in &signals[wr.source][wr.start..wr.start + t] {
                let mut v = f.0;
                for j in 0..3 {
                    v[3 * j] += dx;
                    v[3 * j + 2] += dz;
                }
                x.extend_from_slice(&v);
            }
            let clip = &data.clips[wr.source];
            text.extend(clip.text_embedding.as_ref().expect("eligible"));
            image.extend(clip.image_embedding.as_ref().expect("eligible"));
            if weights.latent != 0.0 {
                windows.push(data.window(i));
            }
        }
        let target: Option<Vec<f64>> = if weights.latent != 0.0 {
            Some(prior.encode_full(&windows)?.concat())
        } else {
            None
        };
        let mut g = Graph::new();
        let xv = g.input(batch.len() * t, SIGNAL_DIM, x)?;
        let m = enc.encode_graph(&mut g, xv, batch.len())?;
        let loss = sparse_loss(&mut g, m, &text, &image, target.as_deref(), &weights)?;
        let value = g.scalar(loss.total);
        let terms = loss.values(&g);
        let norm = optimizer_step(&g, loss.total, &mut enc.store, &adam, cfg.grad_clip)?;
        log.record("sparse_encoder", step, value, terms, norm)?;
        enc.steps_done += 1;
    }
    Ok(())
}
