use fia_core::edit::{run_backbone, run_edit, run_edit_with, EditRequest, FiaEstimator};
use fia_core::fia::{FiaConfig, FriMode};
use fia_core::model::{AttnKind, GuidanceConfig, ModelConfig, Override, ToyDit, VelocityField};
use fia_core::prompt::embed_prompt;
use fia_core::schedule::{make_linear_schedule, NoiseMode};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 8] = ["a", "red", "blue", "ball", "cube", "on", "grass", "cat"];

fn model(seed: u64) -> ToyDit {
    ToyDit::new(ModelConfig {
        latent_channels: 3,
        patch_size: 1,
        n_blocks_dual: 2,
        n_blocks_cross_only: 2,
        d_model: 8,
        n_heads: 2,
        text_dim: 8,
        seed,
    })
    .unwrap()
}

fn prompt(idx: &[usize]) -> String {
    idx.iter().map(|&i| WORDS[i % WORDS.len()]).collect::<Vec<_>>().join(" ")
}

fn request(seed: u64, src: &str, tar: &str, steps: usize, fia: FiaConfig, mode: NoiseMode) -> EditRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EditRequest {
        source_latent: Array3::from_shape_simple_fn((3, 4, 6), || rng.random_range(0.0..1.0)),
        p_src: embed_prompt(src, 8, 0).unwrap(),
        p_tar: embed_prompt(tar, 8, 0).unwrap(),
        schedule: make_linear_schedule(steps, 0.0).unwrap(),
        guidance: GuidanceConfig::new(3.5, 3.5).unwrap(),
        fia,
        seed,
        noise_mode: mode,
        snapshot_stride: None,
    }
}

fn fia_variants() -> impl Strategy<Value = FiaConfig> {
    (any::<bool>(), any::<bool>(), any::<bool>(), 0.1f64..5.0).prop_map(|(fri, add, fij, sigma)| FiaConfig {
        fri_enabled: fri,
        fri_mode: if add { FriMode::Add } else { FriMode::Freq },
        fij_enabled: fij,
        filter_sigma: sigma,
        fij_block_range: Some((1, 3)),
        ..FiaConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equal_prompts_are_a_fixed_point(
        words in prop::collection::vec(0usize..8, 1..5),
        seed in 0u64..500,
        steps in 1usize..8,
        fia in fia_variants(),
    ) {
        let p = prompt(&words);
        let req = request(seed, &p, &p, steps, fia, NoiseMode::None);
        let trace = run_edit(&model(seed), &req).unwrap();
        prop_assert_eq!(&trace.final_latent, &req.source_latent);
        prop_assert_eq!(trace.records.len(), steps);
    }

    #[test]
    fn injected_sites_carry_source_packets(seed in 0u64..500, steps in 2usize..8, fia in fia_variants()) {
        let m = model(seed);
        let req = request(seed, "a red ball", "a blue cube on grass", steps, fia, NoiseMode::ReusedEpsilon);
        let cutoff = fia.fij_cutoff(steps).unwrap();
        let est = FiaEstimator { field: &m, cfg: fia };
        let mut checked = 0usize;
        run_edit_with(&est, &req, |step, pair| {
            let injected: Vec<_> = pair
                .overrides
                .overrides
                .iter()
                .filter(|(_, o)| matches!(o, Override::ReplaceQKVE(_)))
                .collect();
            assert_eq!(!injected.is_empty(), fia.fij_enabled && step < cutoff);
            for (site, _) in injected {
                assert_eq!(site.kind, AttnKind::CrossAttn);
                let src = pair.src_packets.iter().find(|p| p.site == *site).unwrap();
                let got = pair.constrained_packets.iter().find(|p| p.site == *site).unwrap();
                assert_eq!(src.q, got.q);
                assert_eq!(src.k, got.k);
                assert_eq!(src.v, got.v);
                assert_eq!(src.text_embedding, got.text_embedding);
                checked += 1;
            }
        }).unwrap();
        if fia.fij_enabled {
            prop_assert_eq!(checked, cutoff * 3);
        }
    }

    #[test]
    fn disabled_fia_is_transparent(seed in 0u64..500, steps in 1usize..6) {
        let m = model(seed);
        let mut req = request(seed, "a cat", "a red cube", steps, FiaConfig::disabled(), NoiseMode::ReusedEpsilon);
        req.guidance = GuidanceConfig::default();
        prop_assert_eq!(run_edit(&m, &req).unwrap(), run_backbone(&m, &req).unwrap());
    }
}

#[test]
fn bad_block_range_is_rejected_before_running() {
    let m = model(1);
    let fia = FiaConfig {
        fij_block_range: Some((2, 9)),
        ..FiaConfig::default()
    };
    let req = request(1, "a", "b", 3, fia, NoiseMode::None);
    assert!(run_edit(&m, &req).is_err());
    assert_eq!(m.topology().n_blocks(), 4);
}
