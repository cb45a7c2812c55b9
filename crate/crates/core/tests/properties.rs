//! Seeded property tests over the public pipeline.

use proptest::prelude::*;
use rand::SeedableRng;

use sketchloop::microworld::{layout, placement_realizes, render, derender, canvas_of, Placement, WorkingState};
use sketchloop::orchestrator::{run_trajectory, single_pass, RunConfig};
use sketchloop::planner::{augment_program_capped, subsample_chain, synthesize_program};
use sketchloop::scene_graph::{parse_scene, print_scene, random_scene, SceneGraph};
use sketchloop::seqcodec::{decode, encode, loss_mask, dataset::sample_prompt};
use sketchloop::FaultModel;

fn scene(seed: u64, objects: usize, relations: usize) -> SceneGraph {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    random_scene(&mut r, objects, relations)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn print_then_parse_is_identity(seed in any::<u64>(), n in 1usize..=8, m in 0usize..8) {
        let g = scene(seed, n, m);
        prop_assert!(g.structural_violations().is_empty());
        prop_assert_eq!(parse_scene(&print_scene(&g)).unwrap(), g);
    }

    #[test]
    fn layouts_realize_and_render_round_trips(seed in any::<u64>(), n in 1usize..=8, m in 0usize..6) {
        let g = scene(seed, n, m);
        if let Ok(p) = layout(&g, &Placement::new()) {
            prop_assert!(placement_realizes(&p, &g));
            prop_assert_eq!(derender(&render(&p)).unwrap(), canvas_of(&p));
        }
    }

    #[test]
    fn chains_grow_to_the_target(seed in any::<u64>(), n in 2usize..=7, m in 0usize..6) {
        let full = scene(seed, n, m);
        if let Ok(chain) = subsample_chain(&full, seed, None) {
            prop_assert!(chain.check(&SceneGraph::new()).is_ok());
            prop_assert_eq!(chain.full(), &full);
            let p = synthesize_program(&chain);
            prop_assert!(p.check(&SceneGraph::new(), &full).is_ok());
            let aug = augment_program_capped(&p, &WorkingState::default(), seed, 1.0, Some(5));
            prop_assert!(aug.steps.len() <= 5.max(p.steps.len()));
            prop_assert!(aug.check(&SceneGraph::new(), &full).is_ok());
        }
    }

    #[test]
    fn trajectories_encode_and_decode(seed in any::<u64>(), rate in 0.0f64..=0.6, plan in 0.0f64..=1.0) {
        let prompt = sample_prompt(seed, 2, 6);
        let cfg = RunConfig {
            sketch_faults: FaultModel::with_rate(rate),
            plan_faults: FaultModel::with_rate(plan),
            seed,
            ..RunConfig::default()
        };
        if let Ok(t) = run_trajectory(&prompt, &cfg, None) {
            prop_assert!(t.meta.success);
            let s = encode(&t).unwrap();
            prop_assert_eq!(decode(&s).unwrap(), t.clone());
            let m = loss_mask(&s);
            prop_assert_eq!(m.mse.len(), t.count('V'));
            prop_assert!(!m.ce[s.tokens.len() - 1]);
        }
    }

    #[test]
    fn no_refinement_is_single_pass(seed in any::<u64>(), rate in 0.0f64..=0.6) {
        let prompt = sample_prompt(seed, 2, 6);
        let cfg = RunConfig::with_fault_rate(seed, rate, 0);
        if let (Ok(t), Ok(img)) = (run_trajectory(&prompt, &cfg, None), single_pass(&prompt, &cfg)) {
            prop_assert_eq!(t.final_image, img);
        }
    }
}
