mod common;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsemo_core::dataio::{load_motion, save_motion, synth_generate, ActionClass, MotionClip, SynthConfig};
use sparsemo_core::kinematics::{forward_kinematics, SkeletonModel};
use sparsemo_core::Error;

fn positions(skel: &SkeletonModel, clip: &MotionClip) -> Vec<Vec<Vector3<f64>>> {
    (0..clip.n_frames())
        .map(|t| forward_kinematics(skel, &clip.pose(t)).unwrap().positions)
        .collect()
}

fn one_class(class: ActionClass, clips: usize) -> Vec<MotionClip> {
    let cfg = SynthConfig {
        classes: vec![class],
        clips_per_class: clips,
        ..SynthConfig::default()
    };
    synth_generate(&cfg, 5).unwrap().clips
}

#[test]
fn synth_is_deterministic() {
    let cfg = SynthConfig {
        clips_per_class: 2,
        ..SynthConfig::default()
    };
    let a = synth_generate(&cfg, 7).unwrap();
    let b = synth_generate(&cfg, 7).unwrap();
    assert_eq!(a.clips, b.clips);
    assert_eq!(a.table, b.table);
    let c = synth_generate(&cfg, 8).unwrap();
    assert_ne!(a.clips, c.clips);
    for clip in &a.clips {
        clip.validate().unwrap();
        let label = clip.action_label.as_deref().unwrap();
        assert_eq!(clip.text_embedding.as_ref(), Some(&a.table.get(label).unwrap().text));
    }
}

#[test]
fn idle_moves_less_than_a_centimetre_per_frame() {
    let skel = SkeletonModel::smpl_neutral();
    for clip in one_class(ActionClass::Idle, 4) {
        let p = positions(&skel, &clip);
        for w in p.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!((a - b).norm() < 0.01);
            }
        }
    }
}

/// Peak-to-peak excursion of the knee joints relative to the pelvis.
fn knee_amplitude(skel: &SkeletonModel, clip: &MotionClip) -> f64 {
    let p = positions(skel, clip);
    [4usize, 5]
        .iter()
        .map(|&k| {
            let rel: Vec<Vector3<f64>> = p.iter().map(|f| f[k] - f[0]).collect();
            let mut best: f64 = 0.0;
            for a in &rel {
                for b in &rel {
                    best = best.max((a - b).norm());
                }
            }
            best
        })
        .fold(0.0, f64::max)
}

#[test]
fn squat_knees_move_far_more_than_idle() {
    let skel = SkeletonModel::smpl_neutral();
    let squat = one_class(ActionClass::Squat, 3).iter().map(|c| knee_amplitude(&skel, c)).fold(f64::INFINITY, f64::min);
    let idle = one_class(ActionClass::Idle, 3).iter().map(|c| knee_amplitude(&skel, c)).fold(0.0, f64::max);
    assert!(squat > 10.0 * idle.max(1e-6), "squat {squat} idle {idle}");
}

#[test]
fn squat_keeps_feet_on_the_ground() {
    let skel = SkeletonModel::smpl_neutral();
    for clip in one_class(ActionClass::Squat, 2) {
        let p = positions(&skel, &clip);
        let y0 = p[0][7].y;
        assert!(p.iter().all(|f| (f[7].y - y0).abs() < 1e-9));
    }
}

#[test]
fn classes_are_separable_by_nearest_centroid() {
    let skel = SkeletonModel::smpl_neutral();
    let features = |clip: &MotionClip| -> Vec<f64> {
        let p = positions(&skel, clip);
        let n = p.len() as f64;
        let mut f = vec![0.0; 3 * p[0].len()];
        for frame in &p {
            for (j, x) in frame.iter().enumerate() {
                let r = x - frame[0];
                for a in 0..3 {
                    f[3 * j + a] += r[a] / n;
                }
            }
        }
        f
    };
    let cfg = SynthConfig {
        clips_per_class: 20,
        ..SynthConfig::default()
    };
    let train = synth_generate(&cfg, 1).unwrap().clips;
    let test = synth_generate(&cfg, 2).unwrap().clips;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for c in &train {
        let f = features(c);
        let e = sums.entry(c.action_label.clone().unwrap()).or_insert((vec![0.0; f.len()], 0));
        e.0.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let centroids: Vec<(String, Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|c| {
            let f = features(c);
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.1.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            Some(&best.0) == c.action_label.as_ref()
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
}

#[test]
fn file_roundtrip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut clip = synth_generate(&SynthConfig { clips_per_class: 1, ..SynthConfig::default() }, 3).unwrap().clips.remove(1);
    clip.root_translation.iter_mut().for_each(|r| r.x += rng.gen_range(-1.0..1.0));
    let path = dir.path().join("clip.spmo");
    save_motion(&clip, &path).unwrap();
    let back = load_motion(&path).unwrap();
    assert_eq!(back.n_frames(), clip.n_frames());
    assert_eq!(back.action_label, clip.action_label);
    for (a, b) in clip.local_rot.iter().flatten().zip(back.local_rot.iter().flatten()) {
        for (x, y) in a.0.iter().zip(b.0) {
            assert!((x - y).abs() <= 1e-7 * x.abs().max(1.0));
        }
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_motion(&path), Err(Error::Parse { .. })));
    assert!(matches!(load_motion(&dir.path().join("missing.spmo")), Err(Error::Io { .. })));
}

#[test]
fn synth_config_errors() {
    assert!(matches!(SynthConfig::from_toml_str("classes = [\"dance\"]"), Err(Error::Config(_))));
    assert!(matches!(SynthConfig::from_toml_str("clips_per_class = 0"), Err(Error::Config(_))));
    let cfg = SynthConfig::from_toml_str("classes = [\"squat\", \"idle\"]\nn_frames = 61").unwrap();
    assert_eq!(cfg.classes, vec![ActionClass::Squat, ActionClass::Idle]);
    assert_eq!(cfg.n_frames, 61);
}
