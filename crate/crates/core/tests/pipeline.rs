//! Cross-module checks: synthesis through manifests and training data
//! loading, inference on trained-shape parameters, and search invariants on
//! grids that do not tile evenly.

use mvlle::alignment::{brute_force_oracle, topk_search, PatchGrid};
use mvlle::image_io::{
    quantize_u8, save_image, write_manifest, ManifestEntry, Split, TripletManifest,
};
use mvlle::network::{enhance, ModelConfig, ModelParams};
use mvlle::synthesis::{procedural_triplet, synth_triplet, NoiseModel};
use mvlle::trainer::load_triplets;
use mvlle::ImageRGB;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eight_bit(img: &ImageRGB) -> ImageRGB {
    img.map(|v| quantize_u8(v) as f32 / 255.0)
}

#[test]
fn synthesized_triplets_survive_the_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["low", "gt"] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut entries = Vec::new();
    let mut expected = Vec::new();
    for s in 0..2 {
        let gt = procedural_triplet(24, 20, 2, &mut rng).map(|v| eight_bit(&v));
        let (low, params) = synth_triplet(&gt, &mut rng, &NoiseModel::default()).unwrap();
        let low = low.map(|v| eight_bit(&v));
        let name = |kind: &str, v: usize| format!("{kind}/s{s}_{v}.png").into();
        let entry = ManifestEntry {
            scene: format!("s{s}"),
            low: [name("low", 0), name("low", 1), name("low", 2)],
            gt: [name("gt", 0), name("gt", 1), name("gt", 2)],
            params,
        };
        for v in 0..3 {
            save_image(&low[v], dir.path().join(&entry.low[v])).unwrap();
            save_image(&gt[v], dir.path().join(&entry.gt[v])).unwrap();
        }
        entries.push(entry);
        expected.push((low, gt));
    }
    let path = dir.path().join("train.jsonl");
    write_manifest(
        &TripletManifest {
            split: Split::Train,
            entries,
        },
        &path,
    )
    .unwrap();

    let loaded = load_triplets(&path).unwrap();
    assert_eq!(loaded.len(), 2);
    for (t, (low, gt)) in loaded.iter().zip(&expected) {
        assert_eq!(&t.low, low);
        assert_eq!(&t.gt, gt);
    }
}

#[test]
fn enhance_is_deterministic_and_bounded() {
    let cfg = ModelConfig {
        channels: 8,
        units: 2,
        se_reduction: 2,
        encoder_depth: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::<f32>::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let views = procedural_triplet(30, 37, 2, &mut rng).map(|v| v.map(|x| 0.2 * x));
    let a = enhance(&params, &views, 0).unwrap();
    let b = enhance(&params, &views, 0).unwrap();
    assert_eq!(a.restored, b.restored);
    assert_eq!(a.restored.dims(), (30, 37));
    assert_eq!(a.stages.len(), 2);
    assert!(a.restored.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // a checkpoint written and read back gives the same output
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rctn");
    params.save(&path).unwrap();
    let reloaded = ModelParams::load(&path).unwrap();
    assert_eq!(enhance(&reloaded, &views, 0).unwrap().restored, a.restored);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, rng_seed: proptest::test_runner::RngSeed::Fixed(21), ..ProptestConfig::default() })]

    /// Ragged edges, any patch size and any feasible K and radius.
    #[test]
    fn search_matches_the_oracle_on_ragged_grids(
        h in 5usize..23,
        w in 5usize..23,
        c in 1usize..4,
        patch in 2usize..6,
        radius in 0usize..3,
        k_pick in 0usize..25,
        seed in any::<u64>(),
    ) {
        let k = 1 + k_pick % (2 * radius + 1).pow(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || -> Vec<f32> {
            (0..c * h * w).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()
        };
        let (a, b) = (plane(), plane());
        let p = PatchGrid::partition(&a, c, h, w, patch).unwrap();
        let s = PatchGrid::partition(&b, c, h, w, patch).unwrap();
        let fast = topk_search(&p, &s, k, radius).unwrap();
        let oracle = brute_force_oracle(&p, &s, k, radius).unwrap();
        for (x, y) in fast.matches.iter().zip(&oracle.matches) {
            prop_assert_eq!(x.len(), y.len());
            prop_assert!(x.len() <= k);
            for (m, o) in x.iter().zip(y) {
                prop_assert_eq!((m.row, m.col), (o.row, o.col));
                prop_assert!((m.rho - o.rho).abs() <= 1e-6);
                prop_assert!(m.rho.abs() <= 1.0 + 1e-9);
            }
            // sorted by decreasing correlation
            prop_assert!(x.windows(2).all(|p| p[0].rho >= p[1].rho));
        }
    }

    /// Self-search always finds the patch itself first unless another patch
    /// is just as well correlated.
    #[test]
    fn self_search_ranks_each_patch_first(
        h in 8usize..20,
        w in 8usize..20,
        patch in 2usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let g = PatchGrid::partition(&data, 3, h, w, patch).unwrap();
        let found = topk_search(&g, &g, 1, 1).unwrap();
        for r in 0..found.rows {
            for col in 0..found.cols {
                let best = found.slot(r, col, 0);
                prop_assert!((best.rho - 1.0).abs() <= 1e-9);
            }
        }
    }
}
