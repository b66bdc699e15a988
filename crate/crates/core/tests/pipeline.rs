//! Cross-module properties exercised through the public API only.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iad_core::decoder::{localize, DecoderParams};
use iad_core::eval::synthetic::normal_texture;
use iad_core::features::{load_features, save_features, FeatureBackendConfig, ToyEncoder};
use iad_core::fewshot::{build_memory_bank, localize_fewshot};
use iad_core::judge::{render_verdict, CalibratedThreshold};
use iad_core::prompts::toy_text_features;
use iad_core::simulation::{simulate_anomaly, SimulationConfig};

fn texture(seed: u64, stripes: bool) -> iad_core::image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_texture(if stripes { "stripes" } else { "dots" }, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_only_touches_masked_pixels(seed in any::<u64>(), stripes in any::<bool>()) {
        let normal = texture(seed, stripes);
        let donor = texture(seed ^ 0x5eed, !stripes);
        let cfg = SimulationConfig::default();
        let s = simulate_anomaly(&normal, &donor, seed, "t", &cfg).unwrap();
        prop_assert_eq!(&s, &simulate_anomaly(&normal, &donor, seed, "t", &cfg).unwrap());
        prop_assert!(s.mask.is_binary());
        prop_assert!(s.mask.values().iter().any(|&v| v == 1.0));
        let (h, w) = normal.dims();
        for r in 0..h {
            for c in 0..w {
                if s.mask.get(r, c) == 0.0 {
                    prop_assert_eq!(s.image.pixel(r, c), normal.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn stored_features_reproduce_fewshot_maps(seed in any::<u64>(), stripes in any::<bool>()) {
        let enc = ToyEncoder::new(&FeatureBackendConfig::default()).unwrap();
        let shot = enc.extract(&texture(seed, stripes)).unwrap();
        let query = enc.extract(&texture(seed.wrapping_add(1), stripes)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shot.pfs1");
        save_features(&shot, &path).unwrap();
        let reloaded = load_features(&path).unwrap();
        let bank = build_memory_bank(std::slice::from_ref(&shot), 1.0).unwrap();
        let bank2 = build_memory_bank(std::slice::from_ref(&reloaded), 1.0).unwrap();
        let m = localize_fewshot(&query, &bank).unwrap();
        prop_assert_eq!(&m, &localize_fewshot(&query, &bank2).unwrap());
        prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(localize_fewshot(&shot, &bank).unwrap().max() <= 1e-6);
    }

    #[test]
    fn decoder_verdicts_are_monotone_in_threshold(seed in any::<u64>(), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
        let cfg = FeatureBackendConfig::default();
        let stack = ToyEncoder::new(&cfg).unwrap().extract(&texture(seed, true)).unwrap();
        let text = toy_text_features("stripes", 16, seed).unwrap();
        let dims = std::array::from_fn(|i| stack.stages[i].channels);
        let params = DecoderParams::init(dims, 16, 0.07, seed).unwrap();
        let map = localize(&stack, &text, &params).unwrap();
        prop_assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = render_verdict(&map, &CalibratedThreshold::fixed(t));
        let hi = render_verdict(&map, &CalibratedThreshold::fixed(t + dt));
        prop_assert!(!hi.is_anomalous || lo.is_anomalous);
        prop_assert_eq!(lo.is_anomalous, lo.image_score > t);
    }
}
