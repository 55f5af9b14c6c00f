//! Property tests for persistence, normalization, splitting and the
//! truncated transform.

use std::collections::{BTreeMap, BTreeSet};

use porofno_core::fno_model::{adaptive_region, canonical_factorization, ModelConfig, ModelParams};
use porofno_core::io::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use porofno_core::porous_gen::LabeledSample;
use porofno_core::spectral::{rfft3_channels, ModeSet, TruncatedDft};
use porofno_core::train_engine::{r2_score, schedule_batches, split_by_size, SizeNormalizer};
use porofno_core::VoxelGrid;
use proptest::prelude::*;

fn grid(n: usize, bits: &[bool]) -> VoxelGrid {
    VoxelGrid::from_fn(n, |x, y, z| bits[(x + n * (y + n * z)) % bits.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips_bit_exactly(
        specs in prop::collection::vec((1usize..9, prop::collection::vec(any::<bool>(), 1..64), any::<u64>(), prop::option::of(0.0f64..1e4)), 0..6)
    ) {
        let samples: Vec<LabeledSample> = specs
            .iter()
            .map(|(n, bits, seed, k)| {
                let voxels = grid(*n, bits);
                LabeledSample { porosity: voxels.porosity(), voxels, permeability: k.unwrap_or(f64::NAN), seed: *seed }
            })
            .collect();
        let bytes = encode_dataset(&samples);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            prop_assert_eq!(&a.voxels, &b.voxels);
            prop_assert_eq!(a.permeability.to_bits(), b.permeability.to_bits());
            prop_assert_eq!(a.porosity.to_bits(), b.porosity.to_bits());
            prop_assert_eq!(a.seed, b.seed);
        }
        prop_assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn truncated_dataset_never_decodes(n in 1usize..6, cut in 1usize..40) {
        let voxels = VoxelGrid::filled(n, true);
        let bytes = encode_dataset(&[LabeledSample { porosity: 1.0, voxels, permeability: 1.0, seed: 0 }]);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_dataset(&bytes[..keep]).is_err());
    }

    #[test]
    fn normalization_round_trips(
        labels in prop::collection::vec((prop::sample::select(vec![8usize, 12, 16]), 0.0f64..500.0), 6..30),
        probe in 0.0f64..500.0,
    ) {
        let mut labels = labels;
        for n in [8, 12, 16] {
            labels.push((n, 0.0));
            labels.push((n, 600.0));
        }
        let norm = SizeNormalizer::fit(labels.iter().copied()).unwrap();
        for n in [8, 12, 16] {
            let back = norm.denormalize(norm.normalize(probe, n).unwrap(), n).unwrap();
            prop_assert!((back - probe).abs() <= 1e-12 * probe.abs().max(1.0));
        }
    }

    #[test]
    fn perfect_predictions_score_one(truths in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        prop_assume!(truths.iter().any(|&t| t != truths[0]));
        prop_assert_eq!(r2_score(&truths, &truths).unwrap(), 1.0);
    }

    #[test]
    fn splits_partition_every_size(edges in prop::collection::vec(prop::sample::select(vec![16usize, 20, 24]), 0..120), seed in any::<u64>()) {
        let s = split_by_size(&edges, seed);
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), edges.len());
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), edges.len());
        for n in [16, 20, 24] {
            let count = edges.iter().filter(|&&e| e == n).count();
            let of = |idx: &[usize]| idx.iter().filter(|&&i| edges[i] == n).count();
            prop_assert_eq!(of(&s.val), count / 10);
            prop_assert_eq!(of(&s.test), count / 10);
        }
    }

    #[test]
    fn batches_cover_each_example_once(sizes in prop::collection::vec(1usize..30, 1..4), batch in 1usize..8, epoch in 1usize..50) {
        let mut groups = BTreeMap::new();
        let mut next = 0;
        for (g, &count) in sizes.iter().enumerate() {
            groups.insert(10 + g, (next..next + count).collect::<Vec<usize>>());
            next += count;
        }
        let order: Vec<usize> = groups.keys().copied().collect();
        let result = schedule_batches(&groups, &order, batch, 5, epoch);
        if batch > *sizes.iter().min().unwrap() {
            prop_assert!(result.is_err());
        } else {
            let batches = result.unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..next).collect::<Vec<_>>());
            for b in &batches {
                let size = groups.iter().find(|(_, m)| m.contains(&b[0])).unwrap().0;
                prop_assert!(b.iter().all(|i| groups[size].contains(i)));
                prop_assert!(b.len() <= batch);
            }
        }
    }

    #[test]
    fn factorization_has_minimal_spread(width in 1usize..400) {
        let f = canonical_factorization(width);
        prop_assert_eq!(f[0] * f[1] * f[2], width);
        let spread = |t: [usize; 3]| t.iter().max().unwrap() - t.iter().min().unwrap();
        for a in 1..=width {
            for b in 1..=width / a {
                if width % (a * b) == 0 {
                    prop_assert!(spread(f) <= spread([a, b, width / (a * b)]));
                }
            }
        }
    }

    #[test]
    fn adaptive_regions_cover_the_axis(n in 1usize..64, w in 1usize..64) {
        prop_assume!(w <= n);
        let mut covered = vec![false; n];
        for i in 0..w {
            let (lo, hi) = adaptive_region(i, n, w);
            prop_assert!(lo < hi && hi <= n);
            covered[lo..hi].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.into_iter().all(|c| c));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn truncated_transform_matches_full_fft(
        n in 4usize..11,
        modes in (1usize..3, 1usize..3, 1usize..3),
        channels in 1usize..3,
        values in prop::collection::vec(-1.0f64..1.0, 8..64),
    ) {
        let modes = [modes.0, modes.1, modes.2];
        let vol = n * n * n;
        let data: Vec<f64> = (0..channels * vol).map(|i| values[i % values.len()] * (1.0 + (i % 7) as f64)).collect();
        let dft = TruncatedDft::new(ModeSet::new(n, modes).unwrap());
        let coeffs = dft.forward(&data, channels);
        let full = rfft3_channels(&data, channels, n).unwrap();
        let set = ModeSet::new(n, modes).unwrap();
        let mut slot = 0;
        for c in 0..channels {
            for &kz in set.kz() {
                for &ky in set.ky() {
                    for kx in 0..modes[2] {
                        let want = full.get(c, kz, ky, kx);
                        prop_assert!((coeffs[slot] - want.re).abs() <= 1e-9);
                        prop_assert!((coeffs[slot + 1] - want.im).abs() <= 1e-9);
                        slot += 2;
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(width in 1usize..6, seed in any::<u64>()) {
        let cfg = ModelConfig { width, num_units: 2, classifier_sizes: vec![5, 1], ..ModelConfig::default() };
        let params = ModelParams::init(&cfg, seed).unwrap();
        let norm = SizeNormalizer::fit([(16, 0.5), (16, 2.0), (20, 1.0), (20, 9.0)]).unwrap();
        let bytes = encode_checkpoint(&params, &norm).unwrap();
        let (p, m) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&p, &params);
        prop_assert_eq!(&m, &norm);
        prop_assert_eq!(encode_checkpoint(&p, &m).unwrap(), bytes);
    }
}
