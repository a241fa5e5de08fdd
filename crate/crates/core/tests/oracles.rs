mod support;

use proptest::prelude::*;
use support::*;
use transreid_core::embed::{extract_patches, patch_count, PatchifyConfig};
use transreid_core::eval::{distance_histograms, evaluate_dist, FeatureSet, GroupBy, Metric};
use transreid_core::jpm::{jpm_permutation, patch_shuffle, shift_tokens, JpmConfig};
use transreid_core::losses::{soft_triplet, total_loss, StreamLoss};
use transreid_core::numcore::{Graph, SeededRng, Tensor};
use transreid_core::synthdata::{SampleMeta, Split};

#[test]
fn patch_count_matches_window_walk() {
    let n = patch_grid_suite().unwrap();
    assert!(n > 100_000);
}

#[test]
fn batch_hard_matches_exhaustive_triplets() {
    let worst = triplet_suite(300).unwrap();
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn retrieval_matches_brute_force_ranking() {
    assert_eq!(retrieval_suite(200).unwrap(), 200);
}

#[test]
fn retrieval_oracle_sees_ties_and_junk() {
    let mut ties = 0;
    let mut junk = 0;
    for seed in 0..200 {
        let (dist, q, g) = random_retrieval_instance(&mut SeededRng::named(seed, "retrieval-suite"));
        let ng = g.len();
        for (qi, qm) in q.iter().enumerate() {
            let row = &dist[qi * ng..(qi + 1) * ng];
            ties += (0..ng).filter(|&j| (0..j).any(|k| row[k] == row[j])).count();
            junk += g.iter().filter(|gm| gm.identity == qm.identity && gm.camera == qm.camera).count();
        }
    }
    assert!(ties > 1000 && junk > 100, "ties {ties} junk {junk}");
}

#[test]
fn permutations_are_shifted_transposes() {
    assert_eq!(permutation_suite().unwrap(), (4..=64).map(|n| 8 * (n + 1)).sum::<usize>());
}

#[test]
fn patches_match_pixel_lookup() {
    let cfg = PatchifyConfig { height: 11, width: 9, channels: 2, patch: 4, stride: 3, dim: 4 };
    let mut rng = SeededRng::new(7);
    let img = Tensor::from_fn(&[11, 9, 2], |_| rng.uniform());
    let out = extract_patches(&img, &cfg).unwrap();
    let (nh, nw, n) = patch_count(&cfg).unwrap();
    assert_eq!((nh, nw, n, out.shape()), (3, 2, 6, &[6usize, 32][..]));
    for i in 0..n {
        let (r, c) = (i / nw, i % nw);
        let mut j = 0;
        for dy in 0..4 {
            for dx in 0..4 {
                for ch in 0..2 {
                    assert_eq!(out.row(i)[j].to_bits(), img.at(&[r * 3 + dy, c * 3 + dx, ch]).to_bits());
                    j += 1;
                }
            }
        }
    }
}

#[test]
fn soft_triplet_closed_forms() {
    let value = |rows: &[[f32; 2]]| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap());
        let l = soft_triplet(&mut g, x, &[0, 0, 1, 1]).unwrap();
        g.scalar_value(l)
    };
    // Every positive and negative at squared distance 1.
    let zero_margin = value(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    assert!((zero_margin - 2f64.ln()).abs() < 1e-6, "{zero_margin}");
    // Positives coincide; negatives sit at squared distance 2.
    let gap = value(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
    assert!((gap - (1.0 + (-2f64).exp()).ln()).abs() < 1e-6, "{gap}");
}

#[test]
fn overall_loss_weights_locals_by_one_over_k() {
    let mut g = Graph::new();
    let mut unit = |v: f32| g.constant(Tensor::scalar(v));
    let streams: Vec<StreamLoss> = [(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)].iter().map(|&(a, b)| StreamLoss { id: unit(a), triplet: unit(b) }).collect();
    let t = total_loss(&mut g, streams[0], &streams[1..]).unwrap();
    assert!((g.value(t).item() - 4.0).abs() < 1e-6);
    let parts = [(0.5, 0.25), (2.0, 0.0), (1.0, 3.0), (0.0, 0.5), (4.0, 1.0)];
    let streams: Vec<StreamLoss> = parts.iter().map(|&(a, b)| StreamLoss { id: g.constant(Tensor::scalar(a)), triplet: g.constant(Tensor::scalar(b)) }).collect();
    let t = total_loss(&mut g, streams[0], &streams[1..]).unwrap();
    assert!((g.value(t).item() - (0.75 + (2.0 + 4.0 + 0.5 + 5.0) / 4.0)).abs() < 1e-6);
}

#[test]
fn wrong_custom_vjp_is_caught() {
    for seed in 0..5 {
        assert!(check_custom_square(false, seed).unwrap().passed());
        assert!(!check_custom_square(true, seed).unwrap().passed());
    }
}

fn metas_strategy(max: usize, split: Split) -> impl Strategy<Value = Vec<SampleMeta>> {
    prop::collection::vec((0usize..4, 0usize..3), 1..max).prop_map(move |v| v.into_iter().map(|(identity, camera)| SampleMeta { identity, camera, view: None, split }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shift_and_shuffle_are_bijections(n in 1usize..200, m in 0usize..400, k in 1usize..16) {
        let ids: Vec<usize> = (0..n).collect();
        let mut s = shift_tokens(&ids, m);
        prop_assert_eq!(s[0], m % n);
        s.sort_unstable();
        prop_assert_eq!(&s, &ids);
        match patch_shuffle(&ids, k) {
            Ok(mut p) => {
                prop_assert!(k <= n);
                p.sort_unstable();
                prop_assert_eq!(p, ids);
            }
            Err(_) => prop_assert!(k > n),
        }
    }

    #[test]
    fn contiguous_split_without_rearrange(n in 4usize..64, m in 0usize..64, k in 1usize..5) {
        let cfg = JpmConfig { m, k, rearrange: false, ..Default::default() };
        prop_assert_eq!(jpm_permutation(n, &cfg, &mut SeededRng::new(0)).unwrap(), (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn map_and_cmc_are_well_formed(seed in any::<u64>(), q in metas_strategy(8, Split::Query), g in metas_strategy(30, Split::Gallery)) {
        let mut rng = SeededRng::new(seed);
        let dist: Vec<f64> = (0..q.len() * g.len()).map(|_| rng.uniform() as f64).collect();
        let r = evaluate_dist(&dist, &q, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.map));
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        if r.skipped < q.len() {
            prop_assert!((r.cmc.last().unwrap() - 1.0).abs() < 1e-12);
        }
        let b = brute_retrieval(&dist, &q, &g);
        prop_assert_eq!(r.map, b.map);
    }

    #[test]
    fn soft_triplet_is_translation_invariant(seed in any::<u64>(), shift in -3.0f32..3.0) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::from_fn(&[6, 3], |_| rng.normal());
        let moved = Tensor::from_fn(&[6, 3], |i| x.data()[i] + shift);
        let labels = [0, 1, 2, 0, 1, 2];
        let value = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = soft_triplet(&mut g, v, &labels).unwrap();
            g.scalar_value(l)
        };
        let (a, b) = (value(&x), value(&moved));
        prop_assert!(a > 0.0);
        prop_assert!((a - b).abs() < 1e-4 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn histograms_count_same_identity_pairs(seed in any::<u64>(), metas in metas_strategy(20, Split::Gallery)) {
        let mut rng = SeededRng::new(seed);
        let n = metas.len();
        let feats = FeatureSet::new(Tensor::from_fn(&[n, 4], |_| rng.normal()), metas.clone()).unwrap();
        let h = distance_histograms(&feats, GroupBy::Camera, 7, Metric::Euclidean).unwrap();
        let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| metas[i].identity == metas[j].identity).count();
        prop_assert_eq!(h.intra.total() + h.inter.total(), pairs);
    }
}
