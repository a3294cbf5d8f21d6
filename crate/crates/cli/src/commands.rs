//! The six pipeline stages. Each writes its outputs, a resolved-config
//! snapshot and an append-only JSONL log under its own directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use sparsemo_core::dataio::{
    build_embedding_table, export_positions_csv, load_motion_dir, make_windows, synth_generate, write_motion, MotionClip, MOTION_EXTENSION,
};
use sparsemo_core::eval::{evaluate_dataset, EvalReport};
use sparsemo_core::kinematics::SkeletonModel;
use sparsemo_core::prior::{train_full_prior, train_sparse_encoder, FullMotionPrior, SparseMotionEncoder};
use sparsemo_core::sequence::{train_sequence_model, Reconstructor, SequenceModel};
use sparsemo_core::signals::extract_sparse_signals;
use sparsemo_core::train::TrainLog;
use sparsemo_core::{Error, Result};

use crate::config::RunConfig;

/// Locations of every artifact of a run.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub out: PathBuf,
    pub data: PathBuf,
    ablation: Option<&'static str>,
}

impl RunLayout {
    pub fn new(cfg: &RunConfig, out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            data: cfg.data_root(out),
            ablation: cfg.sequence.ablation.map(|a| a.name()),
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data.join("test")
    }

    pub fn skeleton(&self) -> PathBuf {
        self.data.join("skeleton.toml")
    }

    pub fn prior_dir(&self) -> PathBuf {
        self.out.join("prior")
    }

    pub fn prior_ckpt(&self) -> PathBuf {
        self.prior_dir().join("prior.ckpt")
    }

    pub fn sparse_dir(&self) -> PathBuf {
        self.out.join("sparse")
    }

    pub fn sparse_ckpt(&self) -> PathBuf {
        self.sparse_dir().join("sparse.ckpt")
    }

    /// Sequence models of ablation runs live next to the full model.
    pub fn sequence_dir(&self) -> PathBuf {
        match self.ablation {
            Some(a) => self.out.join(format!("sequence-{a}")),
            None => self.out.join("sequence"),
        }
    }

    pub fn sequence_ckpt(&self) -> PathBuf {
        self.sequence_dir().join("sequence.ckpt")
    }

    pub fn infer_dir(&self) -> PathBuf {
        self.suffixed("infer")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.suffixed("eval")
    }

    pub fn latent_cache(&self) -> PathBuf {
        self.out.join("cache").join("latents")
    }

    pub fn eval_prior_ckpt(&self) -> PathBuf {
        self.out.join("eval_prior").join("prior.ckpt")
    }

    fn suffixed(&self, name: &str) -> PathBuf {
        match self.ablation {
            Some(a) => self.out.join(format!("{name}-{a}")),
            None => self.out.join(name),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Creates `dir` and writes the resolved config snapshot into it.
fn stage_dir(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    create_dir(dir)?;
    let snapshot = format!("# resolved configuration of `{command}`\n{}", cfg.to_toml_string()?);
    write_file(&dir.join("config.toml"), snapshot)
}

fn append_log(dir: &Path, line: &serde_json::Value) -> Result<()> {
    let path = dir.join("log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writeln!(log, "{line}").map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint(path.to_path_buf()))
    }
}

fn load_skeleton(layout: &RunLayout) -> Result<SkeletonModel> {
    let path = layout.skeleton();
    if path.exists() {
        SkeletonModel::load(&path)
    } else {
        Ok(SkeletonModel::smpl_neutral())
    }
}

fn load_clips(dir: &Path) -> Result<Vec<MotionClip>> {
    Ok(load_motion_dir(dir)?.into_iter().map(|(_, c)| c).collect())
}

fn save_clip(clip: &MotionClip, skeleton_hash: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_motion(clip, Some(skeleton_hash), &mut buf).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    write_file(path, buf)
}

/// Generates the synthetic training and test sets.
pub fn synth(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let skeleton = SkeletonModel::smpl_neutral();
    let hash = skeleton.hash();
    stage_dir(&layout.data, cfg, "synth")?;
    write_file(&layout.skeleton(), skeleton.to_toml_string())?;
    let train = synth_generate(&cfg.synth, cfg.seed)?;
    let test_cfg = sparsemo_core::dataio::SynthConfig {
        clips_per_class: cfg.data.test_clips_per_class,
        ..cfg.synth.clone()
    };
    // Test clips come from a separate stream but share the embedding table.
    let test = synth_generate(&test_cfg, cfg.seed.wrapping_add(1 << 32))?;
    train.table.save(&layout.data.join("embeddings.json"))?;
    for (dir, clips) in [(layout.train_dir(), &train.clips), (layout.test_dir(), &test.clips)] {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        }
        create_dir(&dir)?;
        for (i, clip) in clips.iter().enumerate() {
            let label = clip.action_label.as_deref().unwrap_or("clip");
            save_clip(clip, &hash, &dir.join(format!("{i:04}_{label}.{MOTION_EXTENSION}")))?;
        }
    }
    let line = json!({"stage": "synth", "seed": cfg.seed, "train_clips": train.clips.len(), "test_clips": test.clips.len()});
    write_file(&layout.data.join("log.jsonl"), format!("{line}\n"))?;
    log::info!("wrote {} training and {} test clips to {}", train.clips.len(), test.clips.len(), layout.data.display());
    Ok(())
}

fn fit_prior(cfg: &RunConfig, skeleton: SkeletonModel, clips: Vec<MotionClip>, seed: u64, log_path: &Path) -> Result<FullMotionPrior> {
    let data = make_windows(clips, cfg.prior.model.window, cfg.prior.train.window_stride);
    if data.is_empty() {
        return Err(Error::Data(format!("no training clip has {} frames", cfg.prior.model.window)));
    }
    let mut prior = FullMotionPrior::new(cfg.prior.model.clone(), skeleton, seed)?;
    let train = sparsemo_core::prior::PriorTrainConfig {
        seed,
        ..cfg.prior.train.clone()
    };
    train_full_prior(&mut prior, &data, &train, &mut TrainLog::append_to(log_path)?)?;
    Ok(prior)
}

pub fn train_prior(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let skeleton = load_skeleton(layout)?;
    let clips = load_clips(&layout.train_dir())?;
    let dir = layout.prior_dir();
    stage_dir(&dir, cfg, "train-prior")?;
    let prior = fit_prior(cfg, skeleton, clips, cfg.seed, &dir.join("log.jsonl"))?;
    prior.save(&layout.prior_ckpt())?;
    log::info!("full prior {} saved to {}", &prior.hash()[..12], layout.prior_ckpt().display());
    Ok(())
}

pub fn train_sparse(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    require(&layout.prior_ckpt())?;
    let prior = FullMotionPrior::load(&layout.prior_ckpt())?;
    let clips = load_clips(&layout.train_dir())?;
    let dir = layout.sparse_dir();
    stage_dir(&dir, cfg, "train-sparse")?;
    let data = make_windows(clips, prior.config().window, cfg.sparse.window_stride);
    let mut enc = SparseMotionEncoder::new(&prior, cfg.sparse.seed, cfg.sparse.warm_start)?;
    train_sparse_encoder(&mut enc, &prior, &data, &cfg.sparse, &mut TrainLog::append_to(&dir.join("log.jsonl"))?)?;
    enc.save(&layout.sparse_ckpt())?;
    log::info!("sparse encoder {} saved to {}", &enc.hash()[..12], layout.sparse_ckpt().display());
    Ok(())
}

pub fn train_seq(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    require(&layout.prior_ckpt())?;
    require(&layout.sparse_ckpt())?;
    let prior = FullMotionPrior::load(&layout.prior_ckpt())?;
    let enc = SparseMotionEncoder::load(&layout.sparse_ckpt())?;
    let clips = load_clips(&layout.train_dir())?;
    let dir = layout.sequence_dir();
    stage_dir(&dir, cfg, "train-seq")?;
    let mut model = SequenceModel::new(cfg.sequence.model.clone(), prior.skeleton().clone(), &enc, cfg.sequence.train.seed)?;
    let mut train = cfg.sequence.train.clone();
    train.cache_dir.get_or_insert_with(|| layout.latent_cache());
    let log_path = dir.join("log.jsonl");
    train_sequence_model(&mut model, &enc, &prior, &clips, &train, &mut TrainLog::append_to(&log_path)?)?;
    model.save(&layout.sequence_ckpt())?;
    log::info!("sequence model {} saved to {}", &model.hash()[..12], layout.sequence_ckpt().display());
    Ok(())
}

fn load_chain(layout: &RunLayout, sequence: &Path) -> Result<Reconstructor> {
    require(&layout.sparse_ckpt())?;
    require(sequence)?;
    let model = SequenceModel::load(sequence)?;
    let enc = SparseMotionEncoder::load(&layout.sparse_ckpt())?;
    Reconstructor::new(model, enc)
}

/// Reconstructs every clip of `input` (a motion file or a directory of
/// them; the test split by default) from its tracking signals.
pub fn infer(cfg: &RunConfig, layout: &RunLayout, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let chain = load_chain(layout, &layout.sequence_ckpt())?;
    let input = input.map_or_else(|| layout.test_dir(), Path::to_path_buf);
    let clips = if input.is_dir() {
        load_motion_dir(&input)?
    } else {
        vec![(input.clone(), sparsemo_core::dataio::load_motion(&input)?)]
    };
    let dir = layout.infer_dir();
    stage_dir(&dir, cfg, "infer")?;
    let skeleton = chain.model.skeleton().clone();
    let hash = skeleton.hash();
    let mut written = Vec::new();
    for (path, clip) in clips {
        let raw = extract_sparse_signals(&skeleton, &clip)?;
        let pred = chain.infer_motion(&raw, clip.fps)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
        let mut out = pred.to_clip();
        out.action_label = clip.action_label.clone();
        let motion_path = dir.join(format!("{stem}.{MOTION_EXTENSION}"));
        save_clip(&out, &hash, &motion_path)?;
        let mut csv = Vec::new();
        export_positions_csv(&pred.positions, &mut csv).map_err(|e| Error::Data(e.to_string()))?;
        write_file(&dir.join(format!("{stem}.positions.csv")), csv)?;
        written.push(motion_path);
    }
    append_log(&dir, &json!({"stage": "infer", "clips": written.len(), "sequence_hash": chain.model.hash()}))?;
    Ok(written)
}

/// Loads the configured evaluation prior, or trains one with a different
/// seed and embedding table on the training split.
fn eval_prior(cfg: &RunConfig, layout: &RunLayout) -> Result<FullMotionPrior> {
    if let Some(p) = &cfg.eval.prior_checkpoint {
        require(p)?;
        return FullMotionPrior::load(p);
    }
    let path = layout.eval_prior_ckpt();
    if path.exists() {
        return FullMotionPrior::load(&path);
    }
    let dir = path.parent().expect("checkpoint has a parent");
    stage_dir(dir, cfg, "eval")?;
    let mut clips = load_clips(&layout.train_dir())?;
    let labels: Vec<String> = clips.iter().filter_map(|c| c.action_label.clone()).collect();
    let table = build_embedding_table(&labels, cfg.synth.embedding_seed + cfg.eval.embedding_seed_offset);
    for clip in &mut clips {
        if let Some(e) = clip.action_label.as_deref().and_then(|l| table.get(l)) {
            clip.text_embedding = Some(e.text.clone());
            clip.image_embedding = Some(e.image.clone());
        }
    }
    let seed = cfg.seed + cfg.eval.prior_seed_offset;
    let prior = fit_prior(cfg, load_skeleton(layout)?, clips, seed, &dir.join("log.jsonl"))?;
    prior.save(&path)?;
    Ok(prior)
}

/// Evaluates the run's model chain on the test split; with `baseline`, a
/// second sequence checkpoint, adds the per-action comparison.
pub fn eval(cfg: &RunConfig, layout: &RunLayout, baseline: Option<&Path>) -> Result<EvalReport> {
    let chain = load_chain(layout, &layout.sequence_ckpt())?;
    let base = baseline.map(|b| load_chain(layout, b)).transpose()?;
    let clips = load_clips(&layout.test_dir())?;
    let prior = eval_prior(cfg, layout)?;
    let dir = layout.eval_dir();
    stage_dir(&dir, cfg, "eval")?;
    let skeleton = chain.model.skeleton().clone();
    let mut report = evaluate_dataset(&chain, &skeleton, &clips, &prior, &cfg.eval.options)?;
    let mut rows = vec![("model".to_string(), report.clone())];
    if let Some(b) = &base {
        let b_report = evaluate_dataset(b, &skeleton, &clips, &prior, &cfg.eval.options)?;
        report.compare_with(&b_report);
        rows.push(("baseline".to_string(), b_report));
    }
    write_file(&dir.join("report.toml"), report.to_text()?)?;
    let refs: Vec<(&str, &EvalReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_file(&dir.join("report.csv"), EvalReport::csv(&refs))?;
    write_file(&dir.join("per_action.csv"), report.per_action_csv())?;
    append_log(&dir, &json!({"stage": "eval", "report": &report}))?;
    Ok(report)
}
