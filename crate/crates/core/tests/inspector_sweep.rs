//! Single-fault sweeps over random programs: every realized fault is
//! detected with its own kind and repaired in one round.

use sketchloop::inspector::{align, apply_corrective};
use sketchloop::microworld::{canvas_of, sketch_step, Canvas, FaultKind, FaultSource, WorkingState};
use sketchloop::planner::{augment_program_capped, subsample_chain, synthesize_program};
use sketchloop::rng;
use sketchloop::scene_graph::random_scene;

#[test]
fn every_single_fault_is_detected_and_repaired() {
    let mut realized = std::collections::BTreeMap::<FaultKind, usize>::new();
    for seed in 0..300u64 {
        let mut r = rng::rng_for(seed, &[99]);
        let objects = 2 + (seed % 5) as usize;
        let full = random_scene(&mut r, objects, objects);
        let Ok(chain) = subsample_chain(&full, seed, None) else { continue };
        let p = synthesize_program(&chain);
        let p = augment_program_capped(&p, &WorkingState::default(), seed, 0.7, None);
        let mut belief = WorkingState::default();
        let mut canvas = Canvas::new();
        for step in &p.steps {
            for at in 0..step.ops.len() {
                for kind in FaultKind::ALL {
                    let mut forced = vec![None; step.ops.len()];
                    forced[at] = Some(kind);
                    let out = sketch_step(&belief, &canvas, &step.ops, &FaultSource::Forced(&forced)).unwrap();
                    if out.faults.is_empty() {
                        continue;
                    }
                    assert_eq!(out.faults.len(), 1);
                    *realized.entry(kind).or_default() += 1;
                    let a = align(&belief, &out.canvas, &step.ops).unwrap();
                    let c = a.verdict.critique.clone().unwrap_or_else(|| {
                        panic!("seed {seed}: {kind:?} on {:?} not detected", step.ops[at])
                    });
                    assert_eq!(c.kind(), Some(kind), "seed {seed}: {:?} {:?}", step.ops[at], c);
                    let fixed = apply_corrective(&a.observed, &c.corrective, &a.expected).unwrap();
                    let again = align(&belief, &canvas_of(&fixed), &step.ops).unwrap();
                    assert!(again.verdict.is_clean(), "seed {seed}: {c:?}");
                }
            }
            let clean = sketch_step(&belief, &canvas, &step.ops, &FaultSource::Clean).unwrap();
            let a = align(&belief, &clean.canvas, &step.ops).unwrap();
            assert!(a.verdict.is_clean());
            belief = clean.expected;
            canvas = clean.canvas;
        }
    }
    eprintln!("{realized:?}");
    assert_eq!(realized.len(), 5);
}
