//! The plan → sketch → inspect → refine cycle and the single-pass baseline.
//!
//! Every random draw is keyed by the run seed and a stable ordinal (step
//! index for plan faults, global op index for sketch faults), so the process
//! mode and the baseline see identical fault draws for the same seed.

use serde::{Deserialize, Serialize};

use crate::inspector::{align, apply_corrective, check_text_conflict, Critique, InspectError};
use crate::microworld::{
    bind, canvas_of, derender, matches_scene, render_canvas, sketch_step, Canvas, FaultKind,
    FaultLabel, FaultModel, FaultSource, FaultStage, MicroError, Placement, RasterImage,
    WorkingState,
};
use crate::planner::{
    apply_script, augment_program_capped, canonical_ops, render_ops, subsample_chain_from,
    synthesize_program_from, EditOp, EditProgram, PlanError, Step,
};
use crate::rng::{self, stream};
use crate::scene_graph::{parse_scene, print_scene, Color, ObjKey, SceneError, SceneGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Segment {
    Plan { ins: String, des: String },
    Inspect { text: String },
    Refine { text: String },
    Vision { image: RasterImage },
}

impl Segment {
    pub fn letter(&self) -> char {
        match self {
            Segment::Plan { .. } => 'P',
            Segment::Inspect { .. } => 'I',
            Segment::Refine { .. } => 'R',
            Segment::Vision { .. } => 'V',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sketch_faults: FaultModel,
    pub plan_faults: FaultModel,
    pub max_refine: u32,
    pub k_hint: Option<usize>,
    pub augmentation_ratio: f64,
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub inspect_plan_before_sketch: bool,
    pub emit_clean_inspections: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sketch_faults: FaultModel::clean(),
            plan_faults: FaultModel::clean(),
            max_refine: 3,
            k_hint: None,
            augmentation_ratio: 0.0,
            max_steps: None,
            seed: 0,
            inspect_plan_before_sketch: true,
            emit_clean_inspections: false,
        }
    }
}

impl RunConfig {
    pub fn with_fault_rate(seed: u64, rate: f64, max_refine: u32) -> Self {
        RunConfig {
            sketch_faults: FaultModel::with_rate(rate),
            max_refine,
            seed,
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub steps: usize,
    pub refine_rounds: usize,
    pub faults: Vec<FaultLabel>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: String,
    pub initial: Option<RasterImage>,
    pub segments: Vec<Segment>,
    pub final_image: RasterImage,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn count(&self, letter: char) -> usize {
        self.segments.iter().filter(|s| s.letter() == letter).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunError {
    #[error("prompt: {0}")]
    Prompt(#[from] SceneError),
    #[error("plan: {0}")]
    Plan(#[from] PlanError),
    #[error("sketch: {0}")]
    Sketch(#[from] MicroError),
    #[error("inspect: {0}")]
    Inspect(#[from] InspectError),
    #[error("initial image is not a sub-scene of the prompt")]
    InvalidInitial,
    #[error("refine requires a non-empty corrective script")]
    EmptyCorrective,
    #[error("segment grammar violated: {0}")]
    Grammar(String),
}

/// A parsed prompt with its starting state and lowered program.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub full: SceneGraph,
    pub start: WorkingState,
    pub start_canvas: Canvas,
    pub program: EditProgram,
}

/// Recovers the sub-scene an initial image shows: each glyph is read as the
/// lowest-index prompt objects of that appearance.
pub fn initial_state(img: &RasterImage, full: &SceneGraph) -> Result<(WorkingState, Canvas), RunError> {
    let canvas = derender(img)?;
    let mut keys = std::collections::BTreeSet::new();
    for g in canvas.values() {
        let k = full
            .objects
            .iter()
            .find(|k| k.shape == g.shape && k.color == g.color && !keys.contains(*k))
            .ok_or(RunError::InvalidInitial)?;
        keys.insert(*k);
    }
    let graph = full.restricted_to(&keys);
    let placement = bind(&canvas, &graph, None).ok_or(RunError::InvalidInitial)?;
    Ok((WorkingState { graph, placement }, canvas))
}

pub fn prepare(prompt: &str, cfg: &RunConfig, initial: Option<&RasterImage>) -> Result<Prepared, RunError> {
    let full = parse_scene(prompt)?;
    let (start, start_canvas) = match initial {
        Some(img) => initial_state(img, &full)?,
        None => (WorkingState::default(), Canvas::new()),
    };
    let chain = subsample_chain_from(&full, &start, cfg.seed, cfg.k_hint)?;
    let program = synthesize_program_from(&chain, &start.graph);
    let program = augment_program_capped(
        &program,
        &start,
        cfg.seed,
        cfg.augmentation_ratio,
        cfg.max_steps,
    );
    Ok(Prepared {
        full,
        start,
        start_canvas,
        program,
    })
}

/// A plan step as corrupted by a plan fault, with the sketch fault it
/// becomes if left uncorrected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanFault {
    pub kind: FaultKind,
    pub target: ObjKey,
    pub ins: String,
    pub des: String,
    /// Index into the true step's ops of the op the fault corrupts.
    pub op_index: usize,
}

/// Draws a plan fault for an additive step. The corrupted text is kept only
/// if the text judge flags it with the same kind and its repair restores
/// the true description.
pub fn draw_plan_fault(
    model: &FaultModel,
    seed: u64,
    step_index: usize,
    step: &Step,
    before: &SceneGraph,
    full: &SceneGraph,
) -> Option<PlanFault> {
    if model.rate() <= 0.0 || !step.ops.iter().all(EditOp::is_additive) {
        return None;
    }
    let truth = apply_script(before, &step.ops).ok()?;
    let mut r = rng::rng_for(seed, &[stream::PLAN_FAULT, step_index as u64]);
    let first_add = step.ops.iter().position(|op| matches!(op, EditOp::AddObject(_)));
    let first_rel = step.ops.iter().position(|op| matches!(op, EditOp::AddRelation(_)));
    let mut applicable = Vec::new();
    if first_add.is_some() {
        applicable.push(FaultKind::WrongColor);
        if full.objects.len() < crate::scene_graph::MAX_OBJECTS {
            applicable.push(FaultKind::Duplicate);
        }
    }
    if first_rel.is_some() {
        applicable.push(FaultKind::RelationViolation);
    }
    let kind = model.draw(&mut r, &applicable)?;
    let (ops, op_index, target) = match kind {
        FaultKind::WrongColor => {
            let i = first_add?;
            let EditOp::AddObject(x) = step.ops[i] else { return None };
            let colors: Vec<Color> = Color::ALL
                .into_iter()
                .filter(|c| *c != x.color && !full.contains(&x.with_color(*c)))
                .collect();
            let c = *rand::seq::SliceRandom::choose(&colors[..], &mut r)?;
            let x2 = x.with_color(c);
            let ops = step
                .ops
                .iter()
                .map(|op| match op {
                    EditOp::AddObject(k) if *k == x => EditOp::AddObject(x2),
                    EditOp::AddRelation(e) => {
                        let mut e = *e;
                        if e.subject == x {
                            e.subject = x2;
                        }
                        if e.object == x {
                            e.object = x2;
                        }
                        EditOp::AddRelation(e)
                    }
                    other => other.clone(),
                })
                .collect::<Vec<_>>();
            (ops, i, x)
        }
        FaultKind::RelationViolation => {
            let i = first_rel?;
            let EditOp::AddRelation(e) = step.ops[i] else { return None };
            let mut ops = step.ops.clone();
            let mut flipped = e;
            flipped.relation = e.relation.inverse();
            ops[i] = EditOp::AddRelation(flipped);
            (ops, i, e.subject)
        }
        FaultKind::Duplicate => {
            let i = first_add?;
            let EditOp::AddObject(x) = step.ops[i] else { return None };
            let index = (1..=crate::scene_graph::MAX_INDEX)
                .find(|&n| {
                    !full.objects.iter().any(|k| k.shape == x.shape && k.index == n)
                        && !before.objects.iter().any(|k| k.shape == x.shape && k.index == n)
                })?;
            let mut ops = step.ops.clone();
            ops.push(EditOp::AddObject(ObjKey::new(x.shape, x.color, index)));
            (canonical_ops(ops), i, x)
        }
        _ => return None,
    };
    let ops = canonical_ops(ops);
    let corrupted = apply_script(before, &ops).ok()?;
    if !corrupted.validate().is_empty() {
        return None;
    }
    let ins = render_ops(&ops, true);
    let des = print_scene(&corrupted);
    let v = check_text_conflict(&ins, &des, full).ok()?;
    let c = v.critique?;
    if c.kind() != Some(kind) || apply_script(&corrupted, &c.corrective).ok()? != truth {
        return None;
    }
    Some(PlanFault {
        kind,
        target,
        ins,
        des,
        op_index,
    })
}

fn op_offsets(program: &EditProgram) -> Vec<u64> {
    let mut at = 0u64;
    program
        .steps
        .iter()
        .map(|s| {
            let o = at;
            at += s.ops.len() as u64;
            o
        })
        .collect()
}

/// Whether a step's intended scene is part of the prompt (detour steps of
/// augmented programs are not text-inspected).
fn on_path(step: &Step, full: &SceneGraph) -> bool {
    step.scene().is_ok_and(|g| g.is_subgraph_of(full))
}

/// Applies a critique to the keyed draft and re-renders it without faults.
pub fn refine_round(
    observed: &Placement,
    critique: &Critique,
    expected: &WorkingState,
) -> Result<(Placement, RasterImage), RunError> {
    if critique.corrective.is_empty() {
        return Err(RunError::EmptyCorrective);
    }
    let fixed = apply_corrective(observed, &critique.corrective, expected)?;
    let img = crate::microworld::render(&fixed);
    Ok((fixed, img))
}

/// Runs the full cycle for one prompt.
pub fn run_trajectory(
    prompt: &str,
    cfg: &RunConfig,
    initial: Option<&RasterImage>,
) -> Result<Trajectory, RunError> {
    let prep = prepare(prompt, cfg, initial)?;
    run_prepared(prompt, &prep, cfg, initial.copied())
}

pub fn run_prepared(
    prompt: &str,
    prep: &Prepared,
    cfg: &RunConfig,
    initial: Option<RasterImage>,
) -> Result<Trajectory, RunError> {
    let full = &prep.full;
    let offsets = op_offsets(&prep.program);
    let mut belief = prep.start.clone();
    let mut canvas = prep.start_canvas.clone();
    let mut segments = Vec::new();
    let mut faults = Vec::new();
    let mut refines = 0usize;
    let inspecting = cfg.max_refine > 0;
    let mut abandoned = false;
    let n = prep.program.steps.len();

    for (i, step) in prep.program.steps.iter().enumerate() {
        let last = i + 1 == n;
        let live = inspecting && !abandoned;
        let plan_fault = if on_path(step, full) {
            draw_plan_fault(&cfg.plan_faults, cfg.seed, i, step, &belief.graph, full)
        } else {
            None
        };
        if let Some(pf) = &plan_fault {
            faults.push(FaultLabel {
                stage: FaultStage::Plan,
                step: i,
                ordinal: i as u64,
                kind: pf.kind,
                target: pf.target,
            });
        }
        let (ins, des) = plan_fault
            .as_ref()
            .map_or((step.ins_text.clone(), step.des_text.clone()), |pf| {
                (pf.ins.clone(), pf.des.clone())
            });
        segments.push(Segment::Plan {
            ins: ins.clone(),
            des: des.clone(),
        });

        let text_check = live && on_path(step, full);
        let plan_critique = if text_check {
            let v = check_text_conflict(&ins, &des, full)?;
            if v.is_clean() && cfg.emit_clean_inspections && cfg.inspect_plan_before_sketch {
                segments.push(Segment::Inspect {
                    text: v.status.name().to_string(),
                });
            }
            v.critique
        } else {
            None
        };
        let mut forced: Vec<Option<FaultKind>> = vec![None; step.ops.len()];
        if let (Some(pf), None) = (&plan_fault, &plan_critique) {
            forced[pf.op_index] = Some(pf.kind);
        }
        if let Some(c) = &plan_critique {
            if cfg.inspect_plan_before_sketch {
                segments.push(Segment::Inspect {
                    text: c.analysis_text(),
                });
                segments.push(Segment::Refine {
                    text: c.rendered_text.clone(),
                });
                refines += 1;
            } else if let Some(pf) = &plan_fault {
                // the corrupted plan is drawn first and caught afterwards
                forced[pf.op_index] = Some(pf.kind);
            }
        }

        let source = FaultSource::Mixed {
            model: &cfg.sketch_faults,
            seed: cfg.seed,
            first_ordinal: offsets[i],
            forced: &forced,
        };
        let out = sketch_step(&belief, &canvas, &step.ops, &source)?;
        for (j, kind, target) in &out.faults {
            let plan_made = plan_fault
                .as_ref()
                .is_some_and(|pf| forced[pf.op_index].is_some() && pf.op_index == *j);
            if !plan_made {
                faults.push(FaultLabel {
                    stage: FaultStage::Sketch,
                    step: i,
                    ordinal: offsets[i] + *j as u64,
                    kind: *kind,
                    target: *target,
                });
            }
        }
        let mut drawn = out.canvas;
        segments.push(Segment::Vision {
            image: render_canvas(&drawn),
        });

        if let (Some(c), false) = (&plan_critique, cfg.inspect_plan_before_sketch) {
            segments.push(Segment::Inspect {
                text: c.analysis_text(),
            });
            segments.push(Segment::Refine {
                text: c.rendered_text.clone(),
            });
            refines += 1;
            let clean = sketch_step(&belief, &canvas, &step.ops, &FaultSource::Clean)?;
            drawn = clean.canvas;
            segments.push(Segment::Vision {
                image: render_canvas(&drawn),
            });
        }

        if !live {
            belief = out.expected;
            canvas = drawn;
            continue;
        }
        let mut a = align(&belief, &drawn, &step.ops)?;
        let mut rounds = 0u32;
        while let Some(c) = a.verdict.critique.clone() {
            if rounds >= cfg.max_refine {
                break;
            }
            segments.push(Segment::Inspect {
                text: c.analysis_text(),
            });
            segments.push(Segment::Refine {
                text: c.rendered_text.clone(),
            });
            let (fixed, img) = refine_round(&a.observed, &c, &a.expected)?;
            refines += 1;
            rounds += 1;
            drawn = canvas_of(&fixed);
            segments.push(Segment::Vision { image: img });
            a = align(&belief, &drawn, &step.ops)?;
        }
        match a.accepted {
            Some(p) => {
                if a.verdict.is_clean() && cfg.emit_clean_inspections && !last {
                    segments.push(Segment::Inspect {
                        text: a.verdict.status.name().to_string(),
                    });
                }
                belief = WorkingState {
                    graph: a.expected.graph,
                    placement: p,
                };
            }
            None => {
                abandoned = true;
                belief = a.expected;
            }
        }
        canvas = drawn;
    }

    let final_image = render_canvas(&canvas);
    let traj = Trajectory {
        prompt: prompt.to_string(),
        initial,
        segments,
        final_image,
        meta: TrajectoryMeta {
            seed: cfg.seed,
            steps: n,
            refine_rounds: refines,
            faults,
            success: matches_scene(&final_image, full),
        },
    };
    validate_segments(&traj.segments).map_err(RunError::Grammar)?;
    Ok(traj)
}

/// Draws the program's steps with per-op faults and no feedback.
pub fn single_pass(prompt: &str, cfg: &RunConfig) -> Result<RasterImage, RunError> {
    let prep = prepare(prompt, cfg, None)?;
    single_pass_prepared(&prep, cfg)
}

pub fn single_pass_prepared(prep: &Prepared, cfg: &RunConfig) -> Result<RasterImage, RunError> {
    let offsets = op_offsets(&prep.program);
    let mut belief = prep.start.clone();
    let mut canvas = prep.start_canvas.clone();
    for (i, step) in prep.program.steps.iter().enumerate() {
        let source = FaultSource::Model {
            model: &cfg.sketch_faults,
            seed: cfg.seed,
            first_ordinal: offsets[i],
        };
        let out = sketch_step(&belief, &canvas, &step.ops, &source)?;
        belief = out.expected;
        canvas = out.canvas;
    }
    Ok(render_canvas(&canvas))
}

/// Checks the segment alternation `(P (I R?)? V (I (R V)?)*)+` with a
/// vision segment last.
pub fn validate_segments(segments: &[Segment]) -> Result<(), String> {
    #[derive(Clone, Copy, PartialEq, Debug)]
    enum S {
        Start,
        Plan,
        PlanInspect,
        PlanRefine,
        Vision,
        VisionInspect,
        VisionRefine,
    }
    let mut s = S::Start;
    for (i, seg) in segments.iter().enumerate() {
        match seg {
            Segment::Plan { ins, des } if ins.is_empty() || des.is_empty() => {
                return Err(format!("segment {i}: plan without ins or des"));
            }
            Segment::Refine { text } if text.is_empty() => {
                return Err(format!("segment {i}: empty refine"));
            }
            _ => {}
        }
        s = match (s, seg.letter()) {
            (S::Start | S::Vision | S::VisionInspect, 'P') => S::Plan,
            (S::Plan, 'I') => S::PlanInspect,
            (S::PlanInspect, 'R') => S::PlanRefine,
            (S::Plan | S::PlanInspect | S::PlanRefine | S::VisionRefine, 'V') => S::Vision,
            (S::Vision | S::VisionInspect, 'I') => S::VisionInspect,
            (S::VisionInspect, 'R') => S::VisionRefine,
            (state, l) => return Err(format!("segment {i}: {l} not allowed after {state:?}")),
        };
    }
    if s == S::Vision {
        Ok(())
    } else {
        Err(format!("trajectory must end with a vision segment (state {s:?})"))
    }
}
