mod common;

use common::{gridded_signals, random_clip, GRID};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsemo_core::kinematics::{SkeletonModel, NUM_JOINTS};
use sparsemo_core::signals::{augment, extract_sparse_signals, normalize_horizontal, shift_horizontal};

proptest! {
    #[test]
    fn normalisation_ignores_horizontal_shifts(seed in any::<u64>(), kx in -(1i64 << 36)..(1i64 << 36), kz in -(1i64 << 36)..(1i64 << 36)) {
        let raw = gridded_signals(seed, 6);
        let (dx, dz) = (kx as f64 * GRID, kz as f64 * GRID);
        let shifted = shift_horizontal(&raw, dx, dz);
        let a = normalize_horizontal(&augment(&raw, 30.0).unwrap());
        let b = normalize_horizontal(&augment(&shifted, 30.0).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalised_positions_are_centred_and_idempotent(seed in any::<u64>()) {
        let skel = SkeletonModel::smpl_neutral();
        let clip = random_clip(&mut ChaCha8Rng::seed_from_u64(seed), 4, NUM_JOINTS);
        let seq = augment(&extract_sparse_signals(&skel, &clip).unwrap(), 30.0).unwrap();
        let n = normalize_horizontal(&seq);
        for (orig, f) in seq.frames.iter().zip(&n.frames) {
            let sx: f64 = (0..3).map(|j| f.position(j).x).sum();
            let sz: f64 = (0..3).map(|j| f.position(j).z).sum();
            prop_assert!(sx.abs() < 1e-12 && sz.abs() < 1e-12);
            for j in 0..3 {
                prop_assert_eq!(f.position(j).y, orig.position(j).y);
            }
            prop_assert_eq!(&f.0[9..], &orig.0[9..]);
        }
        let nn = normalize_horizontal(&n);
        for (a, b) in nn.frames.iter().zip(&n.frames) {
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn velocities_are_frame_deltas() {
    let raw = gridded_signals(3, 5);
    let seq = augment(&raw, 30.0).unwrap();
    for t in 1..5 {
        for j in 0..3 {
            assert_eq!(seq.frames[t].velocity(j), raw[t].positions[j] - raw[t - 1].positions[j]);
        }
    }
    assert_eq!(seq.frames[0].velocity(1), seq.frames[1].velocity(1));
}
