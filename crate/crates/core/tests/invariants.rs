use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatsem::clustering::{build_graph, connected_components, ClusterStats, MaskGraph};
use splatsem::injection::{filter_masks, MaskGaussianSets};
use splatsem::rasterizer::{project_gaussians, rasterize_view, TiledView};
use splatsem::scene_io::{encode_scene, encode_u16_field, parse_scene, FeatureTable, SPIX_MAGIC};
use splatsem::Error;
use splatsem::synth::{oracle_components, oracle_graph, oracle_rasterize, random_camera, random_scene};

fn mask_sets(seed: u64) -> (MaskGaussianSets, FeatureTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..200);
    let k = rng.random_range(2..40);
    let mut triples = Vec::new();
    for mask in 0..k {
        let len = rng.random_range(1..=n / 2);
        let start = rng.random_range(0..n - len);
        for g in start..start + len {
            if g == start || rng.random_bool(0.7) {
                triples.push((g as u32, mask as u32, rng.random_range(0.05..2.0)));
            }
        }
    }
    let data = (0..k * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    (
        MaskGaussianSets::from_triples(n, k, triples),
        FeatureTable::new(4, data).unwrap(),
    )
}

fn edges(sets: &MaskGaussianSets, f: &FeatureTable, noise: u32, iou: f64, feat: f64) -> Vec<(u32, u32)> {
    let surviving = filter_masks(sets, noise).unwrap();
    build_graph(sets, f, &surviving, iou, feat, &mut ClusterStats::default())
        .unwrap()
        .edges
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn transmittance_is_monotone_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=40);
        let scene = random_scene(&mut rng, n);
        let cam = random_camera(&mut rng, 0, 48, 48);
        let p = project_gaussians(&scene, &cam);
        let view = TiledView::new(&p.gaussians, cam.width, cam.height);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let (mut prev, mut sum) = (1.0f64, 0.0f64);
                let t = view.blend_pixel(u, v, |s| {
                    assert!(s.transmittance <= prev && s.transmittance >= 0.0);
                    prev = s.transmittance;
                    sum += s.weight();
                });
                prop_assert!((0.0..=prev).contains(&t));
                prop_assert!(sum <= 1.0 + 1e-5);
            }
        }
    }

    #[test]
    fn tiled_records_match_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=30);
        let scene = random_scene(&mut rng, n);
        let cam = random_camera(&mut rng, 0, 40, 40);
        let oracle = oracle_rasterize(&scene, &cam).unwrap();
        let stream = rasterize_view(&scene, &cam);
        for (p, recs) in stream.iter_pixels() {
            prop_assert_eq!(recs.len(), oracle[p].len());
            for (r, &(g, w)) in recs.iter().zip(&oracle[p]) {
                prop_assert_eq!(r.gaussian, g);
                prop_assert!((r.weight as f64 - w).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn union_find_matches_bfs(n in 1usize..300, pairs in proptest::collection::vec((0usize..300, 0usize..300), 0..400)) {
        let nodes: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
        let mut edges: Vec<(u32, u32)> = nodes.iter().map(|&k| (k, k)).collect();
        edges.extend(pairs.iter().map(|&(a, b)| {
            let (a, b) = (nodes[a % n], nodes[b % n]);
            (a.min(b), a.max(b))
        }));
        edges.sort_unstable();
        edges.dedup();
        let graph = MaskGraph { nodes: nodes.clone(), edges };
        prop_assert_eq!(connected_components(&graph).members(), oracle_components(&graph.nodes, &graph.edges));
    }

    #[test]
    fn inverted_index_matches_enumeration(seed in any::<u64>(), noise in 1u32..10, iou in 0.0f64..0.9, feat in -1.0f64..0.9) {
        let (sets, f) = mask_sets(seed);
        let surviving = filter_masks(&sets, noise);
        prop_assume!(surviving.is_ok());
        let surviving = surviving.unwrap();
        let got = edges(&sets, &f, noise, iou, feat);
        prop_assert_eq!(got, oracle_graph(&sets.sets, &f, surviving.ids(), iou, feat));
    }

    #[test]
    fn raising_noise_shrinks_survivors(seed in any::<u64>(), lo in 1u32..20, step in 0u32..20) {
        let (sets, _) = mask_sets(seed);
        // An empty survivor set is reported as an error.
        let survivors = |t| match filter_masks(&sets, t) {
            Ok(s) => s.ids().to_vec(),
            Err(Error::EmptySemantics { .. }) => Vec::new(),
            Err(e) => panic!("{e}"),
        };
        let (a, b) = (survivors(lo), survivors(lo + step));
        prop_assert!(b.iter().all(|k| a.contains(k)));
    }

    #[test]
    fn loosening_gates_only_adds_edges(seed in any::<u64>(), iou in 0.0f64..0.9, feat in -1.0f64..0.9, d_iou in 0.0f64..0.5, d_feat in 0.0f64..0.5) {
        let (sets, f) = mask_sets(seed);
        let strict = edges(&sets, &f, 1, iou, feat);
        let loose = edges(&sets, &f, 1, iou - d_iou, feat - d_feat);
        prop_assert!(strict.iter().all(|e| loose.binary_search(e).is_ok()));
    }

    #[test]
    fn spix_is_two_bytes_per_gaussian(values in proptest::collection::vec(any::<u16>(), 0..2000)) {
        prop_assert_eq!(encode_u16_field(SPIX_MAGIC, &values).len(), 2 * values.len() + 8);
    }

    #[test]
    fn ply_round_trips_bytes(seed in any::<u64>(), n in 0usize..60) {
        let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let bytes = encode_scene(&scene);
        let back = parse_scene(&bytes).unwrap();
        prop_assert_eq!(encode_scene(&back), bytes);
    }
}
