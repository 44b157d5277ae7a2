use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volta_core::augment::*;
use volta_core::volio::{Grid3, Orientation, Volume};

fn random_volume(extent: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = extent.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    Volume::new(Grid3::new(extent, data).unwrap(), [1.0; 3], Orientation::RAS, "test").unwrap()
}

#[test]
fn same_seed_same_views() {
    let v = random_volume([20, 20, 20], 0);
    let cfg = AugmentConfig::default();
    assert_eq!(make_views(&v, &cfg, 5).unwrap(), make_views(&v, &cfg, 5).unwrap());
    assert_ne!(make_views(&v, &cfg, 5).unwrap(), make_views(&v, &cfg, 6).unwrap());
}

#[test]
fn four_locals_make_six_views() {
    let v = random_volume([16, 16, 16], 1);
    let views = make_views(&v, &AugmentConfig::default(), 0).unwrap();
    assert_eq!(views.n_views(), 6);
    assert_eq!(views.student_inputs().len(), 6);
    for l in &views.locals {
        assert_eq!(l.view.extent, [8, 8, 8]);
    }
}

#[test]
fn identity_augmentation_cuts_exact_sub_boxes() {
    let v = random_volume([20, 20, 20], 2);
    let cfg = AugmentConfig {
        global_fraction: [0.8, 0.8],
        flip_prob: 0.0,
        teacher_intensity: IntensityRange::identity(),
        student_intensity: IntensityRange::identity(),
        ..AugmentConfig::default()
    };
    let views = make_views(&v, &cfg, 9).unwrap();
    for g in &views.globals {
        assert_eq!(g.crop.size, [16, 16, 16]);
        let o = g.crop.origin;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let want = v.grid.get(o[0] + x, o[1] + y, o[2] + z);
                    assert_eq!(g.teacher.get(x, y, z), want);
                    assert_eq!(g.student.get(x, y, z), want);
                }
            }
        }
    }
}

#[test]
fn crop_larger_than_volume_is_rejected() {
    let v = random_volume([12, 20, 20], 3);
    assert!(matches!(make_views(&v, &AugmentConfig::default(), 0), Err(AugmentError::CropTooLarge { .. })));
}

#[test]
fn half_of_sixty_four_patches_are_masked() {
    let m = sample_mask([4, 4, 4], 0.5, 17).unwrap();
    assert_eq!(m.indices.len(), 32);
    let mut sorted = m.indices.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 32);
    assert!(sorted.iter().all(|&i| i < 64));

    let view = random_volume([16, 16, 16], 4).grid;
    let (_, voxel_mask) = apply_mask(&view, &m, 4).unwrap();
    assert_eq!(voxel_mask.iter().filter(|&&b| b).count(), 2048);
}

#[test]
fn degenerate_and_invalid_masks() {
    assert!(sample_mask([1, 1, 1], 0.5, 0).unwrap().indices.is_empty());
    assert!(matches!(sample_mask([0, 4, 4], 0.5, 0), Err(AugmentError::EmptyPatchGrid(_))));
    assert!(sample_mask([4, 4, 4], 1.0, 0).is_err());
    let m = sample_mask([4, 4, 4], 0.5, 0).unwrap();
    let view = random_volume([16, 16, 12], 0).grid;
    assert!(matches!(apply_mask(&view, &m, 4), Err(AugmentError::GridMismatch { .. })));
}

#[test]
fn zero_fill_leaves_unmasked_voxels_untouched() {
    let view = random_volume([16, 16, 16], 5).grid;
    let mut m = sample_mask([4, 4, 4], 0.5, 3).unwrap();
    m.fills.iter_mut().for_each(|f| *f = Fill::Zero);
    let (masked, voxel_mask) = apply_mask(&view, &m, 4).unwrap();
    for i in 0..view.len() {
        if voxel_mask[i] {
            assert_eq!(masked.data[i], 0.0);
        } else {
            assert_eq!(masked.data[i].to_bits(), view.data[i].to_bits());
        }
    }
}

#[test]
fn patch_inclusion_frequency_is_one_half() {
    let mut hits = [0usize; 64];
    let trials = 10_000;
    for seed in 0..trials {
        let m = sample_mask([4, 4, 4], 0.5, seed).unwrap();
        assert_eq!(m.indices.len(), 32);
        for &i in &m.indices {
            hits[i] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / trials as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_voxels_are_exactly_the_patch_boxes(seed in any::<u64>(), g in 1usize..5, patch in 1usize..4) {
        let grid = [g, g + 1, 2];
        let m = sample_mask(grid, 0.5, seed).unwrap();
        let view = random_volume(grid.map(|n| n * patch), seed).grid;
        let (_, voxel_mask) = apply_mask(&view, &m, patch).unwrap();
        let tokens = m.token_mask();
        for z in 0..view.extent[2] {
            for y in 0..view.extent[1] {
                for x in 0..view.extent[0] {
                    let t = x / patch + grid[0] * (y / patch + grid[1] * (z / patch));
                    prop_assert_eq!(voxel_mask[view.index(x, y, z)], tokens[t]);
                }
            }
        }
    }

    #[test]
    fn views_stay_in_unit_interval_and_teachers_are_unmasked(seed in any::<u64>()) {
        let v = random_volume([18, 16, 20], seed);
        let views = make_views(&v, &AugmentConfig::default(), seed).unwrap();
        for g in &views.globals {
            prop_assert_eq!(&g.teacher, &g.teacher_aug.apply(&v.grid.crop(g.crop.origin, g.crop.size).unwrap().resized([16; 3]).flipped(g.crop.flips)));
            prop_assert_eq!(g.mask.indices.len(), 32);
            for grid in [&g.teacher, &g.student, &g.masked] {
                prop_assert!(grid.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
        for l in &views.locals {
            prop_assert!(l.view.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(l.crop.size.iter().zip(v.extent()).all(|(&s, n)| s as f64 <= 0.5 * n as f64 + 0.5));
        }
    }
}
