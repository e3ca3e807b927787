use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpc_core::memory::{
    build_bank, coreset_size, coreset_subsample, load_bank, read_bank, save_bank, write_bank, BankOptions,
    BuildStrategy, MemoryBank,
};
use vpc_core::partition::{PatchKind, PatchSet, Provenance};
use vpc_core::Error;

fn points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn patch_set(kind: PatchKind, dim: usize, data: &[f64], video: &str) -> PatchSet<f64> {
    let mut s = PatchSet::empty(kind, dim);
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let p = Provenance { video_id: video.into(), anchor_frame: i as u64, object_index: 0, frame_index: None };
        s.push(row, p);
    }
    s
}

fn opts(ratio: f64, strategy: BuildStrategy, seed: u64) -> BankOptions {
    BankOptions { ratio, strategy, seed, projection_dim: None, fingerprint: "abc".into() }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn radius(data: &[f64], dim: usize, picks: &[usize]) -> f64 {
    data.chunks_exact(dim)
        .map(|x| picks.iter().map(|&p| dist(x, &data[p * dim..(p + 1) * dim])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

#[test]
fn covering_radius_shrinks_as_ratio_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 5;
    let data = points(&mut rng, 400, dim);
    let mut last = f64::INFINITY;
    for ratio in [0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0] {
        let picks = coreset_subsample(&data, dim, ratio, 3).unwrap();
        assert_eq!(picks.len(), coreset_size(400, ratio));
        let r = radius(&data, dim, &picks);
        assert!(r <= last + 1e-12, "ratio {ratio}: {r} > {last}");
        last = r;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn smaller_selection_is_a_prefix_of_larger() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = points(&mut rng, 300, 3);
    let small = coreset_subsample(&data, 3, 0.1, 7).unwrap();
    let large = coreset_subsample(&data, 3, 0.4, 7).unwrap();
    assert_eq!(small[..], large[..small.len()]);
    assert_eq!(small[0], 7);
}

#[test]
fn two_picks_cover_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dim = 4;
    let mut data = Vec::new();
    for centre in [-50.0, 50.0] {
        for _ in 0..100 {
            data.extend((0..dim).map(|_| centre + rng.random_range(-1.0..1.0)));
        }
    }
    let picks = coreset_subsample(&data, dim, 0.01, 0).unwrap();
    assert_eq!(picks.len(), 2);
    assert!(picks[0] < 100 && picks[1] >= 100, "{picks:?}");
    // Each cluster has diameter below 2 * sqrt(dim).
    assert!(radius(&data, dim, &picks) < 4.0);
}

#[test]
fn greedy_radius_is_within_twice_the_optimum_on_small_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let n = 10;
        let data = points(&mut rng, n, 2);
        let picks = coreset_subsample(&data, 2, 0.3, rng.random()).unwrap();
        let k = picks.len();
        // Exhaustive optimum over all k-subsets.
        let mut best = f64::INFINITY;
        for mask in 0u32..1 << n {
            if mask.count_ones() as usize == k {
                let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
                best = best.min(radius(&data, 2, &subset));
            }
        }
        assert!(radius(&data, 2, &picks) <= 2.0 * best + 1e-12);
    }
}

#[test]
fn strategies_differ_only_in_where_selection_happens() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let dim = 3;
    let a = points(&mut rng, 40, dim);
    let b = points(&mut rng, 60, dim);
    let sets = [patch_set(PatchKind::Spatial, dim, &a, "a"), patch_set(PatchKind::Spatial, dim, &b, "b")];

    let per = build_bank(&sets, &opts(0.25, BuildStrategy::PerVideoThenConcat, 2)).unwrap();
    assert_eq!(per.len(), coreset_size(40, 0.25) + coreset_size(60, 0.25));
    assert_eq!(per.source_patches, 100);
    let pa = coreset_subsample(&a, dim, 0.25, 2).unwrap();
    let pb = coreset_subsample(&b, dim, 0.25, 2).unwrap();
    let want: Vec<f64> = pa
        .iter()
        .map(|&i| &a[i * dim..(i + 1) * dim])
        .chain(pb.iter().map(|&i| &b[i * dim..(i + 1) * dim]))
        .flatten()
        .copied()
        .collect();
    assert_eq!(per.items, want);

    let all: Vec<f64> = a.iter().chain(&b).copied().collect();
    let concat = build_bank(&sets, &opts(0.25, BuildStrategy::ConcatThenSubsample, 2)).unwrap();
    assert_eq!(concat.len(), coreset_size(100, 0.25));
    let picks = coreset_subsample(&all, dim, 0.25, 2).unwrap();
    for (j, &i) in picks.iter().enumerate() {
        assert_eq!(concat.item(j), &all[i * dim..(i + 1) * dim]);
    }
}

#[test]
fn bank_file_roundtrip_in_both_precisions() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let data = points(&mut rng, 50, 6);
    let bank = build_bank(&[patch_set(PatchKind::Temporal, 6, &data, "v")], &opts(0.2, BuildStrategy::PerVideoThenConcat, 1)).unwrap();
    let mut buf = Vec::new();
    let n = write_bank(&bank, &mut buf).unwrap();
    assert_eq!(n as usize, buf.len());
    assert_eq!(&buf[..4], b"VPCB");
    let header_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    assert_eq!(buf.len(), 10 + header_len + 8 * bank.items.len());
    assert_eq!(read_bank::<f64, _>(&buf[..]).unwrap(), bank);

    let bank32 = MemoryBank {
        kind: bank.kind,
        dim: bank.dim,
        items: bank.items.iter().map(|&v| v as f32).collect(),
        ratio: bank.ratio,
        strategy: bank.strategy,
        seed: bank.seed,
        fingerprint: bank.fingerprint.clone(),
        source_patches: bank.source_patches,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.vpcb");
    save_bank(&bank32, &path).unwrap();
    assert_eq!(load_bank::<f32>(&path, Some("abc")).unwrap(), bank32);
    assert!(matches!(load_bank::<f32>(&path, Some("other")), Err(Error::ConfigDrift { .. })));
    // Loading at the wrong precision is refused rather than reinterpreted.
    assert!(load_bank::<f64>(&path, None).is_err());

    buf.truncate(buf.len() - 3);
    assert!(read_bank::<f64, _>(&buf[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_matches_linear_oracle(seed in any::<u64>(), m in 1usize..40, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = points(&mut rng, m, dim);
        let bank = build_bank(&[patch_set(PatchKind::Highlevel, dim, &data, "v")], &opts(1.0, BuildStrategy::PerVideoThenConcat, 0)).unwrap();
        for _ in 0..10 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = bank.nearest(&q).unwrap();
            let (want_i, want_d) = (0..bank.len())
                .map(|i| (i, dist(bank.item(i), &q)))
                .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            prop_assert!((got.distance - want_d).abs() < 1e-12);
            prop_assert!((dist(bank.item(got.index), &q) - dist(bank.item(want_i), &q)).abs() < 1e-12);
        }
        // Every bank item is its own nearest neighbour at distance zero.
        for i in 0..bank.len() {
            prop_assert_eq!(bank.nearest(bank.item(i)).unwrap().distance, 0.0);
        }
    }

    #[test]
    fn coreset_picks_are_distinct_and_sized(seed in any::<u64>(), n in 1usize..80, ratio in 0.001f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = points(&mut rng, n, 2);
        let picks = coreset_subsample(&data, 2, ratio, seed).unwrap();
        prop_assert_eq!(picks.len(), ((ratio * n as f64).round() as usize).max(1));
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picks.len());
        prop_assert_eq!(picks[0], (seed % n as u64) as usize);
    }
}
