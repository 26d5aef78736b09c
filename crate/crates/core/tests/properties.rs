mod common;

use common::*;
use proptest::prelude::*;

use aspp_scope::data::{derive_labels, generate_scene, sample_patches, IcePolygonAttrs, PartialEntry, SamplerConfig, SyntheticConfig};
use aspp_scope::gradcam::cam_from_activation;
use aspp_scope::metrics::{combined_score, f1_score, r2_score, F1Average};
use aspp_scope::rf::{rf_compare, rf_theoretical, LayerSpec};
use aspp_scope::tensor::IGNORE_INDEX;

fn attrs_strategy() -> impl Strategy<Value = IcePolygonAttrs> {
    (0u8..=10, prop::collection::vec((0u8..=10, 0u8..=5, 0u8..=6), 0..=3)).prop_map(|(total, raw)| {
        let mut left = total;
        let partials = raw
            .into_iter()
            .map(|(c, sod, floe)| {
                let concentration = c.min(left);
                left -= concentration;
                PartialEntry { concentration, sod, floe }
            })
            .collect();
        IcePolygonAttrs { region: 0, total, partials }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dominant_rule_matches_oracle(a in attrs_strategy()) {
        prop_assert!(a.validate().is_ok());
        prop_assert_eq!(a.classes(), rule_oracle(&a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rasterized_labels_follow_oracle(
        attrs in prop::collection::vec(attrs_strategy(), 1..6),
        pixels in prop::collection::vec((0u32..8, prop::bool::weighted(0.2)), 1..200),
    ) {
        let attrs: Vec<IcePolygonAttrs> =
            attrs.into_iter().enumerate().map(|(i, a)| IcePolygonAttrs { region: i as u32, ..a }).collect();
        let regions: Vec<u32> = pixels.iter().map(|p| p.0).collect();
        let mask: Vec<u8> = pixels.iter().map(|p| p.1 as u8).collect();
        let got = derive_labels(&regions, &mask, &attrs).unwrap();
        for i in 0..regions.len() {
            let want = match attrs.iter().find(|a| a.region == regions[i]) {
                _ if mask[i] != 0 => (IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX),
                Some(a) => rule_oracle(a),
                None => (IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX),
            };
            prop_assert_eq!((got.sic[i], got.sod[i], got.floe[i]), want);
        }
    }

    #[test]
    fn sampled_patches_respect_mask_limit(
        seed in any::<u64>(),
        land in 0.0f64..0.7,
        patch in 8usize..48,
        limit in 0.05f64..0.6,
    ) {
        let cfg = SyntheticConfig { scenes: 1, height: 96, width: 112, region_scale: 24, land_fraction: land, seed, ..Default::default() };
        let scene = generate_scene(&cfg, 0).unwrap().bundle;
        let sc = SamplerConfig { patch_size: patch, patches_per_scene: 20, max_masked_fraction: limit, max_redraws: 50, seed };
        let report = sample_patches(&scene, &sc).unwrap();
        prop_assert_eq!(report.patches.len() + report.shortfall, 20);
        for p in &report.patches {
            let mut masked = 0;
            for y in p.y..p.y + patch {
                for x in p.x..p.x + patch {
                    masked += scene.mask[y * scene.width + x] as usize;
                }
            }
            prop_assert_eq!(masked, p.masked);
            prop_assert!(masked as f64 <= limit * (patch * patch) as f64);
        }
    }

    #[test]
    fn theoretical_rf_matches_gradient_support(
        layers in prop::collection::vec((prop::sample::select(vec![1usize, 3, 5]), 1usize..=3, 1usize..=3), 1..4),
    ) {
        let stack: Vec<LayerSpec> = layers
            .iter()
            .map(|&(k, s, d)| LayerSpec::conv(k, s, d, (k / 2) * d))
            .collect();
        let rf = rf_theoretical(&stack).unwrap().final_rf();
        let jump: usize = layers.iter().map(|l| l.1).product();
        let cmp = rf_compare(&stack, 2 * rf + 2 * jump + 1).unwrap();
        prop_assert!(cmp.passed(), "{}", cmp);
    }

    #[test]
    fn cam_is_invariant_to_activation_scaling(
        seed in any::<u64>(),
        alpha in 0.01f64..100.0,
        c in 1usize..5,
    ) {
        let mut r = rng(seed);
        let (h, w) = (3, 4);
        let a = uniform(&mut r, c * h * w, 0.0, 2.0);
        let g = uniform(&mut r, c * h * w, -1.0, 1.0);
        let scaled: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let m1 = cam_from_activation(&a, &g, c, (h, w), (12, 16)).unwrap();
        let m2 = cam_from_activation(&scaled, &g, c, (h, w), (12, 16)).unwrap();
        prop_assert_eq!(m1.len(), 12 * 16);
        for (x, y) in m1.iter().zip(&m2) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_f1_matches_brute_force(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..300),
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let (got, per) = f1_score(&pred, &truth, 4, F1Average::Weighted).unwrap();
        let mut num = 0.0;
        let mut support_total = 0usize;
        for c in 0..4u8 {
            let tp = pairs.iter().filter(|p| p.0 == c && p.1 == c).count() as f64;
            let fp = pairs.iter().filter(|p| p.0 == c && p.1 != c).count() as f64;
            let fne = pairs.iter().filter(|p| p.0 != c && p.1 == c).count() as f64;
            let support = pairs.iter().filter(|p| p.1 == c).count();
            if support == 0 {
                continue;
            }
            let f1 = 2.0 * tp / (2.0 * tp + fp + fne);
            prop_assert!((per[c as usize] - f1).abs() < 1e-12);
            num += f1 * support as f64;
            support_total += support;
        }
        let want = 100.0 * num / support_total as f64;
        prop_assert!((got.unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn r2_matches_definition(pairs in prop::collection::vec((0u8..=10, 0u8..=10), 2..200)) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let n = truth.len() as f64;
        let mean = truth.iter().map(|&t| t as f64).sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|&t| (t as f64 - mean).powi(2)).sum();
        let ss_res: f64 = pairs.iter().map(|p| (p.1 as f64 - p.0 as f64).powi(2)).sum();
        match r2_score(&pred, &truth) {
            None => prop_assert_eq!(ss_tot, 0.0),
            Some(r2) => prop_assert!((r2 - 100.0 * (1.0 - ss_res / ss_tot)).abs() < 1e-9),
        }
    }

    #[test]
    fn combined_is_a_convex_mix(sic in 0.0f64..100.0, sod in 0.0f64..100.0, floe in 0.0f64..100.0) {
        let c = combined_score(sic, sod, floe);
        prop_assert!(c >= sic.min(sod).min(floe) - 1e-9 && c <= sic.max(sod).max(floe) + 1e-9);
        prop_assert!((combined_score(sic, sod, sod) - (0.4 * sic + 0.6 * sod)).abs() < 1e-9);
    }
}

#[test]
fn ten_thousand_sampler_draws_stay_under_limit() {
    let cfg = SyntheticConfig { scenes: 1, height: 320, width: 320, region_scale: 40, land_fraction: 0.45, seed: 3, ..Default::default() };
    let scene = generate_scene(&cfg, 0).unwrap().bundle;
    let sc = SamplerConfig { patch_size: 48, patches_per_scene: 10_000, seed: 11, ..Default::default() };
    let report = sample_patches(&scene, &sc).unwrap();
    assert_eq!(report.patches.len(), 10_000);
    assert!(report.rejections > 0, "mask too sparse to exercise redraws");
    for p in &report.patches {
        let masked: usize = (p.y..p.y + 48).map(|y| scene.mask[y * 320 + p.x..y * 320 + p.x + 48].iter().map(|&m| m as usize).sum::<usize>()).sum();
        assert!(masked as f64 <= 0.30 * 48.0 * 48.0);
    }
}
