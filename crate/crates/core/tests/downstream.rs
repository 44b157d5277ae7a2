use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volta_core::downstream::*;
use volta_core::numcore::NdArray;
use volta_core::vit3d::{ModelConfig, ModelParams};
use volta_core::volio::{generate_phantom, Grid3, LabelGrid, PhantomSpec, Volume};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Oracle: count positive/negative pairs, ties scoring one half.
fn pair_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Oracle: every pair of boundary voxels, both directions pooled.
fn brute_hd95(pred: &LabelGrid, truth: &LabelGrid, class: u8, spacing: [f64; 3]) -> f64 {
    let bp = boundary(pred, class);
    let bt = boundary(truth, class);
    let dist = |a: &[usize; 3], b: &[usize; 3]| {
        (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
    };
    let nearest = |v: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|w| dist(v, w)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = bp.iter().map(|v| nearest(v, &bt)).chain(bt.iter().map(|v| nearest(v, &bp))).collect();
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    all[lo] + (rank - lo as f64) * (all[hi] - all[lo])
}

fn random_mask(rng: &mut ChaCha8Rng, extent: [usize; 3], p: f64) -> LabelGrid {
    let n = extent.iter().product();
    let mut data: Vec<u8> = (0..n).map(|_| rng.random_bool(p) as u8).collect();
    data[rng.random_range(0..n)] = 1;
    Grid3::new(extent, data).unwrap()
}

#[test]
fn auroc_examples() {
    let l = [true, true, false, false];
    assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
    assert_eq!(auroc(&[0.8, 0.1, 0.9, 0.7], &[true, true, false, false]).unwrap(), 0.25);
    assert_eq!(auroc(&[0.8, 0.9, 0.7, 0.1], &[true, false, true, false]).unwrap(), 0.5);
    assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(DownstreamError::SingleClass { .. })));
    assert!(matches!(auroc(&[0.1], &[true, false]), Err(DownstreamError::Length { .. })));
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        assert_eq!(auroc(&scores, &labels).unwrap(), pair_auroc(&scores, &labels));
    }
}

#[test]
fn threshold_and_youden_examples() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    let m = threshold_metrics(&scores, &labels, 0.5).unwrap();
    assert_eq!((m.sensitivity, m.specificity), (0.5, 1.0));
    let y = youden(&scores, &labels).unwrap();
    assert_eq!(y.youden_j(), 0.5);
    assert!(close(y.threshold, 0.225, 1e-15));
    // Single unique score: the score itself is the only candidate.
    let y = youden(&[0.3, 0.3], &[true, false]).unwrap();
    assert_eq!((y.threshold, y.sensitivity, y.specificity), (0.3, 1.0, 0.0));
}

#[test]
fn youden_matches_exhaustive_scan() {
    // Oracle: cutting at each unique score above the minimum realises the
    // same partition as the midpoint just below it.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(2..=30);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let mut scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        scores[1] = 0.0;
        scores[0] = 1.0;
        let mut unique = scores.clone();
        unique.sort_by(f64::total_cmp);
        unique.dedup();
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 1..unique.len() {
            let j = threshold_metrics(&scores, &labels, unique[k]).unwrap().youden_j();
            if j > best.0 {
                best = (j, k);
            }
        }
        let y = youden(&scores, &labels).unwrap();
        let k = best.1;
        assert_eq!(y.youden_j(), best.0);
        assert_eq!(y.threshold, (unique[k - 1] + unique[k]) / 2.0);
        let at = threshold_metrics(&scores, &labels, unique[k]).unwrap();
        assert_eq!((y.sensitivity, y.specificity), (at.sensitivity, at.specificity));
    }
}

#[test]
fn dice_examples_and_symmetry() {
    assert_eq!(dice(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap(), 0.5);
    assert_eq!(dice(&[1, 1], &[1, 1], 1).unwrap(), 1.0);
    assert_eq!(dice(&[0, 0], &[0, 0], 1).unwrap(), 1.0);
    assert_eq!(dice(&[1, 0], &[0, 1], 1).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        assert_eq!(dice(&a, &b, 2).unwrap(), dice(&b, &a, 2).unwrap());
    }
}

#[test]
fn hd95_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_mask(&mut rng, [6, 6, 6], 0.3);
    assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), 0.0);
    let empty = Grid3::filled([6, 6, 6], 0u8);
    assert!(matches!(
        hd95(&empty, &a, 1, [1.0; 3]),
        Err(DownstreamError::EmptyMask { class: 1, prediction_empty: true })
    ));
}

#[test]
fn hd95_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..50 {
        let extent = if i % 2 == 0 { [6, 6, 6] } else { [5, 6, 4] };
        let p = rng.random_range(0.05..0.6);
        let a = random_mask(&mut rng, extent, p);
        let b = random_mask(&mut rng, extent, p);
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let fast = hd95(&a, &b, 1, spacing).unwrap();
        assert!(close(fast, brute_hd95(&a, &b, 1, spacing), 1e-9));
        assert!(close(fast, hd95(&b, &a, 1, spacing).unwrap(), 1e-12));
    }
}

#[test]
fn kfold_pairs_partition_and_stratify() {
    let labels = [0u8, 1, 0, 1, 0, 1, 0, 1, 0, 1];
    let folds = kfold_split(&labels, 5, 7).unwrap();
    let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    for f in &folds {
        assert_eq!(f.len(), 2);
        assert_eq!(f.iter().map(|&i| labels[i] as usize).sum::<usize>(), 1);
    }
    assert_eq!(folds, kfold_split(&labels, 5, 7).unwrap());
    assert_eq!(train_indices(&folds, 0).len(), 8);
    assert!(matches!(kfold_split(&[0, 0, 0, 1], 2, 0), Err(DownstreamError::SmallClass { class: 1, .. })));
    assert!(matches!(kfold_split(&[0, 1], 3, 0), Err(DownstreamError::Folds { .. })));
}

#[test]
fn subsample_fractions() {
    let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
    let idx: Vec<usize> = (0..100).collect();
    let s = subsample(&idx, &labels, 0.2, 1).unwrap();
    assert_eq!(s.len(), 20);
    assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 10);
    assert_eq!(subsample(&idx, &labels, 1.0, 1).unwrap(), idx);
    assert_eq!(subsample(&idx[..7], &labels, 0.5, 1).unwrap().len(), 4);
    assert!(matches!(subsample(&idx, &labels, 0.0, 1), Err(DownstreamError::Fraction(_))));
}

#[test]
fn random_scores_give_chance_auroc() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
    let scores: Vec<f64> = (0..400).map(|_| rng.random()).collect();
    let a = auroc(&scores, &labels).unwrap();
    assert!((0.35..=0.65).contains(&a), "{a}");
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        patch: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        out_dim: 16,
        summariser_heads: 8,
        pos_grid: [4, 4, 4],
        init_std: 0.02,
    }
}

#[test]
fn probe_separates_large_delta() {
    let spec = |i: usize| PhantomSpec {
        class: (i % 2) as u8,
        seed: i as u64,
        radius_min: [3.5, 4.5, 4.5],
        radius_max: [3.5, 5.5, 5.5],
        delta: 3.0,
        ..PhantomSpec::default()
    };
    let vols: Vec<Volume> = (0..20).map(|i| generate_phantom(&spec(i)).unwrap().volume).collect();
    let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
    let model = tiny_model();
    let enc = ModelParams::init(&model, 0).unwrap();
    let cfg = ProbeConfig { epochs: 50, lr: 1e-2, fractions: vec![1.0], ..ProbeConfig::default() };
    let r = run_probe(&vols, &labels, &enc, &model, &cfg).unwrap();
    assert_eq!(r.folds.len(), 5);
    assert!(r.summary[0].auroc_mean >= 0.95, "{}", r.to_table());
    for f in &r.folds {
        assert!((0.0..=1.0).contains(&f.auroc));
    }
}

#[test]
fn probe_rejects_bad_inputs() {
    let model = tiny_model();
    let enc = ModelParams::init(&model, 0).unwrap();
    let v = generate_phantom(&PhantomSpec::default()).unwrap().volume;
    let r = run_probe(&[v.clone(), v], &[0], &enc, &model, &ProbeConfig::default());
    assert!(matches!(r, Err(DownstreamError::Length { .. })));
    let bad = ProbeConfig { fractions: vec![1.5], ..ProbeConfig::default() };
    assert!(matches!(bad.validate(), Err(DownstreamError::Fraction(_))));
}

fn oracle_logits<'a>(
    labels: &'a LabelGrid,
    origin_of: impl Fn(&Grid3) -> [usize; 3] + 'a,
) -> impl Fn(&Grid3) -> Result<NdArray, DownstreamError> + 'a {
    move |w: &Grid3| {
        let o = origin_of(w);
        let crop = labels.crop(o, w.extent).unwrap();
        Ok(NdArray::from_fn(&[crop.len(), SEG_CHANNELS], |e| {
            (crop.data[e / SEG_CHANNELS] as usize == e % SEG_CHANNELS) as u8 as f64
        }))
    }
}

#[test]
fn perfect_oracle_segmentation() {
    let p = generate_phantom(&PhantomSpec::default()).unwrap();
    let logits = sliding_window(&p.volume.grid, [16; 3], SEG_CHANNELS, oracle_logits(&p.labels, |_| [0; 3])).unwrap();
    let pred = argmax_labels(&logits, p.labels.extent);
    for c in SEG_CLASSES {
        assert_eq!(dice(&pred.data, &p.labels.data, c).unwrap(), 1.0);
        assert_eq!(hd95(&pred, &p.labels, c, p.volume.spacing).unwrap(), 0.0);
    }
}

#[test]
fn overlapping_windows_average_consistent_logits() {
    // Windows carry their origin in the voxel values, so the oracle can
    // locate each crop; consistent tiles must stitch back exactly.
    let extent = [10, 7, 9];
    let grid = Grid3::new(extent, (0..630).map(|i| i as f64).collect()).unwrap();
    let labels = Grid3::new(extent, (0..630).map(|i| (i % 3) as u8).collect()).unwrap();
    let locate = |w: &Grid3| {
        let i = w.data[0] as usize;
        [i % 10, (i / 10) % 7, i / 70]
    };
    let logits = sliding_window(&grid, [4, 4, 4], SEG_CHANNELS, oracle_logits(&labels, locate)).unwrap();
    assert_eq!(argmax_labels(&logits, extent), labels);
    assert_eq!(window_starts(10, 4), vec![0, 2, 4, 6]);
    assert_eq!(window_starts(7, 4), vec![0, 2, 3]);
    assert_eq!(window_starts(4, 4), vec![0]);
    assert!(matches!(sliding_window(&grid, [12, 4, 4], 3, |_| unreachable!()), Err(DownstreamError::Window { .. })));
}

#[test]
fn sliding_window_equals_single_window() {
    let model = tiny_model();
    let m = SegModel {
        encoder: ModelParams::init(&model, 3).unwrap(),
        head: SegHead {
            weight: NdArray::from_fn(&[16, SEG_CHANNELS], |i| ((i * 7) % 5) as f64 - 2.0),
            bias: NdArray::from_vec(&[SEG_CHANNELS], vec![0.1, -0.2, 0.3]).unwrap(),
        },
        config: model,
    };
    let v = generate_phantom(&PhantomSpec::default()).unwrap().volume.grid;
    assert_eq!(m.logits(&v).unwrap(), m.window_logits(&v).unwrap());
}

#[test]
fn segmentation_report_shapes() {
    let ph: Vec<_> =
        (0..4).map(|i| generate_phantom(&PhantomSpec { seed: i, ..PhantomSpec::default() }).unwrap()).collect();
    let vols: Vec<Volume> = ph.iter().map(|p| p.volume.clone()).collect();
    let labs: Vec<LabelGrid> = ph.iter().map(|p| p.labels.clone()).collect();
    let model = tiny_model();
    let enc = ModelParams::init(&model, 0).unwrap();
    let cfg = SegConfig { epochs: 2, folds: 2, lr: 1e-3, ..SegConfig::default() };
    let r = run_segmentation(&vols, &labs, &enc, &model, &cfg).unwrap();
    assert_eq!(r.classes, vec![1, 2]);
    assert_eq!(r.folds.len(), 2);
    for f in &r.folds {
        assert!(f.dice.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(f.hd95.iter().flatten().all(|h| *h >= 0.0));
        assert!((1..=2).contains(&f.best_epoch));
    }
    assert!(r.to_table().contains("class 2: Dice"));
}

proptest! {
    #[test]
    fn auroc_is_invariant_to_monotone_transforms(raw in prop::collection::vec(-5.0f64..5.0, 4..40)) {
        let labels: Vec<bool> = (0..raw.len()).map(|i| i % 2 == 0).collect();
        let squashed: Vec<f64> = raw.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        prop_assert_eq!(auroc(&raw, &labels).unwrap(), auroc(&squashed, &labels).unwrap());
        let a = auroc(&raw, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn youden_beats_fixed_threshold(raw in prop::collection::vec(0.0f64..1.0, 4..40)) {
        let labels: Vec<bool> = (0..raw.len()).map(|i| i % 2 == 0).collect();
        let y = youden(&raw, &labels).unwrap();
        let lo = raw.iter().cloned().fold(f64::MAX, f64::min);
        let hi = raw.iter().cloned().fold(f64::MIN, f64::max);
        // 0.5 outside the score range is a trivial all-or-nothing rule with J = 0.
        if lo < 0.5 && 0.5 <= hi {
            prop_assert!(y.youden_j() >= threshold_metrics(&raw, &labels, 0.5).unwrap().youden_j());
        } else {
            prop_assert!(y.youden_j() >= 0.0 || lo == hi);
        }
    }

    #[test]
    fn dice_stays_in_unit_interval(a in prop::collection::vec(0u8..3, 1..64), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<u8> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let d = dice(&a, &b, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
