//! Plan stage: subgraph chains, edit programs and instruction text.
//!
//! A chain `G_1 ⊂ … ⊂ G_k` is lowered into steps whose ops add
//! `G_i \ G_{i-1}`; each step carries its `<ins>` instruction and the `<des>`
//! description of the cumulative scene after the step. Augmentation rewrites
//! some steps into detours (decoy color, decoy object, swap-and-move) that
//! end at the same graph.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::microworld::{self, WorkingState};
use crate::rng::{self, stream};
use crate::scene_graph::{
    parse_scene, print_scene, Color, Cursor, ObjKey, ObjRef, Relation, RelationEdge, SceneError,
    SceneGraph, Shape, Violation,
};

pub const MAX_STEPS: usize = 5;
pub const MIN_STEPS: usize = 2;
pub const CHAIN_RETRIES: u64 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "kebab-case")]
pub enum EditOp {
    AddObject(ObjKey),
    AddRelation(RelationEdge),
    ModifyAttribute {
        target: ObjKey,
        color: Color,
    },
    RemoveObject(ObjKey),
    SwapPositions(ObjKey, ObjKey),
    MoveObject {
        target: ObjKey,
        relation: Relation,
        reference: ObjKey,
    },
}

impl EditOp {
    pub fn is_additive(&self) -> bool {
        matches!(self, EditOp::AddObject(_) | EditOp::AddRelation(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EditOp::AddObject(_) => "add-object",
            EditOp::AddRelation(_) => "add-relation",
            EditOp::ModifyAttribute { .. } => "modify-attribute",
            EditOp::RemoveObject(_) => "remove-object",
            EditOp::SwapPositions(..) => "swap-positions",
            EditOp::MoveObject { .. } => "move-object",
        }
    }
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_ops(std::slice::from_ref(self), false))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("unresolved key {0}")]
    UnresolvedKey(ObjKey),
    #[error("duplicate key {0}")]
    DuplicateKey(ObjKey),
    #[error("resulting graph is invalid: {0:?}")]
    InvalidResult(Vec<Violation>),
    #[error("reference at byte {0} matches no unique object")]
    UnresolvedRef(usize),
    #[error("step count hint {hint} outside 2..={max}")]
    BadHint { hint: usize, max: usize },
    #[error("graph cannot be decomposed into a placeable chain after {0} attempts")]
    Infeasible(u64),
    #[error("input graph is invalid: {0:?}")]
    InvalidInput(Vec<Violation>),
    #[error(transparent)]
    Parse(#[from] SceneError),
}

/// Graph-level semantics of one op. Swaps are placement-only; a move
/// rewrites the target/reference pair's edges on the relation's axis to the
/// stated relation (a no-op when that edge is already present).
pub fn apply_op(g: &SceneGraph, op: &EditOp) -> Result<SceneGraph, PlanError> {
    let need = |k: &ObjKey| {
        if g.contains(k) {
            Ok(())
        } else {
            Err(PlanError::UnresolvedKey(*k))
        }
    };
    let mut out = g.clone();
    match op {
        EditOp::AddObject(k) => {
            if g.contains(k) {
                return Err(PlanError::DuplicateKey(*k));
            }
            out.objects.insert(*k);
        }
        EditOp::AddRelation(e) => {
            need(&e.subject)?;
            need(&e.object)?;
            out.relations.insert(*e);
        }
        EditOp::ModifyAttribute { target, color } => {
            need(target)?;
            let to = target.with_color(*color);
            if to != *target {
                if g.contains(&to) {
                    return Err(PlanError::DuplicateKey(to));
                }
                out.rename_object(target, &to);
            }
        }
        EditOp::RemoveObject(k) => {
            need(k)?;
            out.remove_object(k);
        }
        EditOp::SwapPositions(a, b) => {
            need(a)?;
            need(b)?;
        }
        EditOp::MoveObject {
            target,
            relation,
            reference,
        } => {
            need(target)?;
            need(reference)?;
            let edge = RelationEdge::new(*target, *relation, *reference);
            if !g.relations.contains(&edge) {
                out.relations.retain(|w| !w.same_pair_axis(&edge));
                out.relations.insert(edge);
            }
        }
    }
    let v = out.structural_violations();
    if v.is_empty() {
        Ok(out)
    } else {
        Err(PlanError::InvalidResult(v))
    }
}

pub fn apply_script(g: &SceneGraph, ops: &[EditOp]) -> Result<SceneGraph, PlanError> {
    ops.iter().try_fold(g.clone(), |acc, op| apply_op(&acc, op))
}

// ---------------------------------------------------------------------------
// Instruction text

/// A parsed instruction before resolution against a working graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    Add {
        object: ObjRef,
        relation: Option<(Relation, ObjRef)>,
    },
    Make(ObjRef, Relation, ObjRef),
    Change(ObjRef, Color),
    Remove(ObjRef),
    Swap(ObjRef, ObjRef),
    Move(ObjRef, Relation, ObjRef),
}

fn parse_one(cur: &mut Cursor<'_>) -> Result<Instruction, SceneError> {
    let verb = cur.peek_word().map(str::to_string);
    match verb.as_deref() {
        Some("add") => {
            cur.bump();
            let object = cur.objref(false, true)?;
            let relation = match cur.relation() {
                Some(r) => Some((r, cur.objref(false, false)?)),
                None => None,
            };
            Ok(Instruction::Add { object, relation })
        }
        Some("make") => {
            cur.bump();
            let a = cur.objref(false, false)?;
            let r = cur.expect_relation()?;
            let b = cur.objref(false, false)?;
            Ok(Instruction::Make(a, r, b))
        }
        Some("change") => {
            cur.bump();
            let a = cur.objref(false, false)?;
            cur.expect_word("color")?;
            cur.expect_word("to")?;
            Ok(Instruction::Change(a, cur.expect_color()?))
        }
        Some("remove") => {
            cur.bump();
            Ok(Instruction::Remove(cur.objref(false, false)?))
        }
        Some("swap") => {
            cur.bump();
            cur.expect_word("positions")?;
            cur.expect_word("of")?;
            let a = cur.objref(false, false)?;
            cur.expect_word("and")?;
            Ok(Instruction::Swap(a, cur.objref(false, false)?))
        }
        Some("move") => {
            cur.bump();
            let a = cur.objref(false, false)?;
            cur.expect_word("to")?;
            cur.expect_word("be")?;
            let r = cur.expect_relation()?;
            Ok(Instruction::Move(a, r, cur.objref(false, false)?))
        }
        _ => Err(cur.error("an instruction verb (add, make, change, remove, swap, move)")),
    }
}

/// Parses `instruction { ";" instruction }`.
pub fn parse_instructions(text: &str) -> Result<Vec<Instruction>, SceneError> {
    let toks = crate::scene_graph::lex(text)?;
    let mut cur = Cursor::new(&toks, text.len());
    let mut out = vec![parse_one(&mut cur)?];
    while !cur.at_end() {
        if !cur.eat_semi() {
            return Err(cur.error("';'"));
        }
        out.push(parse_one(&mut cur)?);
    }
    Ok(out)
}

fn resolve(r: &ObjRef, context: Option<&SceneGraph>) -> Result<ObjKey, PlanError> {
    if let Some(k) = r.key() {
        return Ok(k);
    }
    let ctx = context.ok_or(PlanError::UnresolvedRef(r.pos))?;
    let mut hits = ctx.objects.iter().filter(|k| r.matches(k));
    match (hits.next(), hits.next()) {
        (Some(k), None) => Ok(*k),
        _ => Err(PlanError::UnresolvedRef(r.pos)),
    }
}

/// Lowers instructions to ops. References without a color resolve against
/// `context` by shape and index; they fail if absent or ambiguous.
pub fn instructions_to_ops(
    instrs: &[Instruction],
    context: Option<&SceneGraph>,
) -> Result<Vec<EditOp>, PlanError> {
    let mut ops = Vec::new();
    for ins in instrs {
        match ins {
            Instruction::Add { object, relation } => {
                let a = resolve(object, context)?;
                ops.push(EditOp::AddObject(a));
                if let Some((r, b)) = relation {
                    ops.push(EditOp::AddRelation(RelationEdge::new(a, *r, resolve(b, context)?)));
                }
            }
            Instruction::Make(a, r, b) => ops.push(EditOp::AddRelation(RelationEdge::new(
                resolve(a, context)?,
                *r,
                resolve(b, context)?,
            ))),
            Instruction::Change(a, c) => ops.push(EditOp::ModifyAttribute {
                target: resolve(a, context)?,
                color: *c,
            }),
            Instruction::Remove(a) => ops.push(EditOp::RemoveObject(resolve(a, context)?)),
            Instruction::Swap(a, b) => {
                ops.push(EditOp::SwapPositions(resolve(a, context)?, resolve(b, context)?))
            }
            Instruction::Move(a, r, b) => ops.push(EditOp::MoveObject {
                target: resolve(a, context)?,
                relation: *r,
                reference: resolve(b, context)?,
            }),
        }
    }
    Ok(ops)
}

pub fn parse_ops(text: &str, context: Option<&SceneGraph>) -> Result<Vec<EditOp>, PlanError> {
    instructions_to_ops(&parse_instructions(text)?, context)
}

/// Renders ops with the instruction templates. With `fuse`, an added object
/// and one relation it is the subject of share a single
/// `add {ref} {relation} {ref}` instruction.
pub fn render_ops(ops: &[EditOp], fuse: bool) -> String {
    let mut used = vec![false; ops.len()];
    let mut parts = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let text = match op {
            EditOp::AddObject(k) => {
                let partner = fuse
                    .then(|| {
                        ops.iter().enumerate().position(|(j, o)| {
                            !used[j]
                                && matches!(o, EditOp::AddRelation(e) if e.subject == *k
                                    && !ops[i + 1..].contains(&EditOp::AddObject(e.object)))
                        })
                    })
                    .flatten();
                match partner {
                    Some(j) => {
                        used[j] = true;
                        let EditOp::AddRelation(e) = &ops[j] else { unreachable!() };
                        format!(
                            "add {} {} {}",
                            k.short_ref(),
                            e.relation.name(),
                            e.object.short_ref()
                        )
                    }
                    None => format!("add {}", k.short_ref()),
                }
            }
            EditOp::AddRelation(e) => format!(
                "make {} {} {}",
                e.subject.short_ref(),
                e.relation.name(),
                e.object.short_ref()
            ),
            EditOp::ModifyAttribute { target, color } => {
                format!("change {} color to {}", target.short_ref(), color.name())
            }
            EditOp::RemoveObject(k) => format!("remove {}", k.short_ref()),
            EditOp::SwapPositions(a, b) => {
                format!("swap positions of {} and {}", a.short_ref(), b.short_ref())
            }
            EditOp::MoveObject {
                target,
                relation,
                reference,
            } => format!(
                "move {} to be {} {}",
                target.short_ref(),
                relation.name(),
                reference.short_ref()
            ),
        };
        parts.push(text);
    }
    parts.join(" ; ")
}

/// Additive ops in canonical order: objects first, then relations, each
/// sorted. Non-additive sequences are returned unchanged.
pub fn canonical_ops(mut ops: Vec<EditOp>) -> Vec<EditOp> {
    if ops.iter().all(EditOp::is_additive) {
        ops.sort_by(|a, b| match (a, b) {
            (EditOp::AddObject(x), EditOp::AddObject(y)) => x.cmp(y),
            (EditOp::AddRelation(x), EditOp::AddRelation(y)) => x.cmp(y),
            (EditOp::AddObject(_), _) => std::cmp::Ordering::Less,
            _ => std::cmp::Ordering::Greater,
        });
    }
    ops
}

// ---------------------------------------------------------------------------
// Chains and programs

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphChain {
    pub graphs: Vec<SceneGraph>,
}

impl SubgraphChain {
    pub fn k(&self) -> usize {
        self.graphs.len()
    }

    pub fn full(&self) -> &SceneGraph {
        self.graphs.last().expect("chains are non-empty")
    }

    /// Closure, strict growth and the step-count bound relative to `start`.
    pub fn check(&self, start: &SceneGraph) -> Result<(), String> {
        if self.graphs.is_empty() {
            return Err("empty chain".into());
        }
        let degenerate = self.graphs.len() == 1;
        if !degenerate && !(MIN_STEPS..=MAX_STEPS).contains(&self.graphs.len()) {
            return Err(format!("k = {} outside 2..=5", self.graphs.len()));
        }
        let mut prev = start;
        for (i, g) in self.graphs.iter().enumerate() {
            let v = g.structural_violations();
            if !v.is_empty() {
                return Err(format!("G_{} invalid: {v:?}", i + 1));
            }
            if !prev.is_subgraph_of(g) || prev == g {
                return Err(format!("G_{} does not strictly extend its predecessor", i + 1));
            }
            prev = g;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub ops: Vec<EditOp>,
    pub ins_text: String,
    pub des_text: String,
}

impl Step {
    fn from_ops(ops: Vec<EditOp>, after: &SceneGraph) -> Step {
        let ins_text = render_ops(&ops, true);
        Step {
            ops,
            ins_text,
            des_text: print_scene(after),
        }
    }

    /// The cumulative intended scene after this step.
    pub fn scene(&self) -> Result<SceneGraph, SceneError> {
        parse_scene(&self.des_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditProgram {
    pub steps: Vec<Step>,
}

impl EditProgram {
    pub fn op_count(&self) -> usize {
        self.steps.iter().map(|s| s.ops.len()).sum()
    }

    pub fn ops(&self) -> impl Iterator<Item = &EditOp> {
        self.steps.iter().flat_map(|s| s.ops.iter())
    }

    /// Working graphs after each step, starting from `start`.
    pub fn graphs_from(&self, start: &SceneGraph) -> Result<Vec<SceneGraph>, PlanError> {
        let mut g = start.clone();
        let mut out = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            g = apply_script(&g, &s.ops)?;
            out.push(g.clone());
        }
        Ok(out)
    }

    pub fn final_graph(&self, start: &SceneGraph) -> Result<SceneGraph, PlanError> {
        Ok(self
            .graphs_from(start)?
            .pop()
            .unwrap_or_else(|| start.clone()))
    }

    /// Soundness, description fidelity and dependency order.
    pub fn check(&self, start: &SceneGraph, full: &SceneGraph) -> Result<(), String> {
        let graphs = self.graphs_from(start).map_err(|e| e.to_string())?;
        let mut prev = start.clone();
        for (i, (s, g)) in self.steps.iter().zip(&graphs).enumerate() {
            let parsed = s.scene().map_err(|e| format!("step {i}: des does not parse: {e}"))?;
            if &parsed != g {
                return Err(format!("step {i}: des does not describe the working graph"));
            }
            let mut present = prev.objects.clone();
            for op in &s.ops {
                match op {
                    EditOp::AddObject(k) => {
                        present.insert(*k);
                    }
                    EditOp::AddRelation(e) => {
                        if !present.contains(&e.subject) || !present.contains(&e.object) {
                            return Err(format!("step {i}: relation {e} precedes its endpoints"));
                        }
                    }
                    _ => {}
                }
            }
            prev = g.clone();
        }
        if &prev != full {
            return Err("final graph differs from the target".into());
        }
        Ok(())
    }
}

/// Samples a chain from the empty scene. See [`subsample_chain_from`].
pub fn subsample_chain(
    full: &SceneGraph,
    seed: u64,
    k_hint: Option<usize>,
) -> Result<SubgraphChain, PlanError> {
    subsample_chain_from(full, &WorkingState::default(), seed, k_hint)
}

/// Samples a chain of closed subgraphs from `start.graph` up to `full`.
///
/// The element order is a random dependency order (objects shuffled or
/// topologically sorted by the axis constraints, each relation right after
/// its later endpoint), cut into `k` non-empty runs just before objects, so
/// a relation always arrives together with its later endpoint and `k` is
/// bounded by the number of new objects. Each candidate is kept only if
/// every step is placeable by the layout engine; up to 32 candidates are
/// tried.
pub fn subsample_chain_from(
    full: &SceneGraph,
    start: &WorkingState,
    seed: u64,
    k_hint: Option<usize>,
) -> Result<SubgraphChain, PlanError> {
    let v = full.validate();
    if !v.is_empty() {
        return Err(PlanError::InvalidInput(v));
    }
    if !start.graph.is_subgraph_of(full) {
        return Err(PlanError::InvalidInput(vec![]));
    }
    let objects: Vec<ObjKey> = full
        .objects
        .difference(&start.graph.objects)
        .copied()
        .collect();
    let relations: Vec<RelationEdge> = full
        .relations
        .difference(&start.graph.relations)
        .copied()
        .collect();
    let n = objects.len() + relations.len();
    if n == 0 {
        return Err(PlanError::InvalidInput(vec![]));
    }
    let units = objects.len().max(1);
    let max_k = MAX_STEPS.min(units);
    if units == 1 {
        if let Some(h) = k_hint.filter(|&h| h != 1) {
            return Err(PlanError::BadHint { hint: h, max: 1 });
        }
        let chain = SubgraphChain {
            graphs: vec![full.clone()],
        };
        return if placeable(&chain, start) {
            Ok(chain)
        } else {
            Err(PlanError::Infeasible(1))
        };
    }
    let k = match k_hint {
        Some(h) if (MIN_STEPS..=max_k).contains(&h) => h,
        Some(h) => return Err(PlanError::BadHint { hint: h, max: max_k }),
        None => rng::rng_for(seed, &[stream::K_SAMPLE]).gen_range(MIN_STEPS..=max_k),
    };

    for attempt in 0..CHAIN_RETRIES {
        let mut rng = rng::rng_for(seed, &[stream::CHAIN, attempt]);
        let order = if attempt % 2 == 0 {
            topological_objects(full, &objects, &mut rng).unwrap_or_else(|| {
                let mut o = objects.clone();
                o.shuffle(&mut rng);
                o
            })
        } else {
            let mut o = objects.clone();
            o.shuffle(&mut rng);
            o
        };
        let mut elements: Vec<Element> = Vec::with_capacity(n);
        let mut present: BTreeSet<ObjKey> = start.graph.objects.clone();
        let mut pending: Vec<RelationEdge> = relations.clone();
        // relations between already-present objects come first
        pending.retain(|e| {
            if present.contains(&e.subject) && present.contains(&e.object) {
                elements.push(Element::Relation(*e));
                false
            } else {
                true
            }
        });
        for o in order {
            elements.push(Element::Object(o));
            present.insert(o);
            pending.retain(|e| {
                if present.contains(&e.subject) && present.contains(&e.object) {
                    elements.push(Element::Relation(*e));
                    false
                } else {
                    true
                }
            });
        }
        debug_assert!(pending.is_empty());

        let mut gaps: Vec<usize> = (1..n)
            .filter(|&i| matches!(elements[i], Element::Object(_)))
            .filter(|&i| elements[..i].iter().any(|e| matches!(e, Element::Object(_))))
            .collect();
        gaps.shuffle(&mut rng);
        let mut cuts: Vec<usize> = gaps[..k - 1].to_vec();
        cuts.sort_unstable();
        cuts.push(n);

        let mut graphs = Vec::with_capacity(k);
        let mut g = start.graph.clone();
        let mut at = 0;
        for &cut in &cuts {
            for el in &elements[at..cut] {
                match el {
                    Element::Object(o) => {
                        g.objects.insert(*o);
                    }
                    Element::Relation(e) => {
                        g.relations.insert(*e);
                    }
                }
            }
            at = cut;
            graphs.push(g.clone());
        }
        let chain = SubgraphChain { graphs };
        if placeable(&chain, start) {
            return Ok(chain);
        }
    }
    Err(PlanError::Infeasible(CHAIN_RETRIES))
}

enum Element {
    Object(ObjKey),
    Relation(RelationEdge),
}

/// Random topological order of the union of both axis constraint graphs;
/// `None` when the union has a cycle.
fn topological_objects(
    full: &SceneGraph,
    objects: &[ObjKey],
    rng: &mut rng::Rng,
) -> Option<Vec<ObjKey>> {
    let wanted: BTreeSet<ObjKey> = objects.iter().copied().collect();
    let edges: Vec<(ObjKey, ObjKey)> = full
        .relations
        .iter()
        .map(|e| {
            let (a, b, _) = e.normalized();
            (a, b)
        })
        .filter(|(a, b)| wanted.contains(a) && wanted.contains(b))
        .collect();
    let mut remaining: Vec<ObjKey> = objects.to_vec();
    let mut out = Vec::with_capacity(objects.len());
    while !remaining.is_empty() {
        let ready: Vec<usize> = (0..remaining.len())
            .filter(|&i| {
                !edges
                    .iter()
                    .any(|(a, b)| *b == remaining[i] && remaining.contains(a))
            })
            .collect();
        let &pick = ready.choose(rng)?;
        out.push(remaining.remove(pick));
    }
    Some(out)
}

fn placeable(chain: &SubgraphChain, start: &WorkingState) -> bool {
    let program = synthesize_program_from(chain, &start.graph);
    simulate(&program, start).is_some()
}

/// Runs the clean sketcher over every step; `None` when any step is
/// unplaceable or the final placement does not realize the final graph.
pub fn simulate(program: &EditProgram, start: &WorkingState) -> Option<Vec<WorkingState>> {
    let mut state = start.clone();
    let mut out = Vec::with_capacity(program.steps.len());
    for s in &program.steps {
        state = microworld::execute_step(&state, &s.ops).ok()?;
        out.push(state.clone());
    }
    let last = out.last().unwrap_or(start);
    microworld::placement_realizes(&last.placement, &last.graph).then_some(out)
}

pub fn synthesize_program(chain: &SubgraphChain) -> EditProgram {
    synthesize_program_from(chain, &SceneGraph::new())
}

/// Lowers `G_i \ G_{i-1}` into canonical additive ops per step.
pub fn synthesize_program_from(chain: &SubgraphChain, start: &SceneGraph) -> EditProgram {
    let mut prev = start;
    let mut steps = Vec::with_capacity(chain.graphs.len());
    for g in &chain.graphs {
        let ops: Vec<EditOp> = g
            .objects
            .difference(&prev.objects)
            .map(|k| EditOp::AddObject(*k))
            .chain(
                g.relations
                    .difference(&prev.relations)
                    .map(|e| EditOp::AddRelation(*e)),
            )
            .collect();
        steps.push(Step::from_ops(ops, g));
        prev = g;
    }
    EditProgram { steps }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rewrite {
    DecoyColor,
    DecoyObject,
    SwapThenMove,
}

pub fn augment_program(p: &EditProgram, seed: u64, ratio: f64) -> EditProgram {
    augment_program_capped(p, &WorkingState::default(), seed, ratio, None)
}

/// Rewrites roughly `ratio` of the eligible steps (every step after the
/// first) into detours that preserve the final graph. Steps are visited in
/// ascending order; the rewrite kind is drawn per step and the remaining
/// kinds are tried if the draw is not placeable. `max_steps` bounds the
/// program length.
pub fn augment_program_capped(
    p: &EditProgram,
    start: &WorkingState,
    seed: u64,
    ratio: f64,
    max_steps: Option<usize>,
) -> EditProgram {
    if ratio <= 0.0 || p.steps.len() < 2 {
        return p.clone();
    }
    let Ok(final_graph) = p.final_graph(&start.graph) else {
        return p.clone();
    };
    let mut rng = rng::rng_for(seed, &[stream::AUGMENT]);
    let mut steps = p.steps.clone();
    // current position of the original step being visited
    let mut pos = 1;
    for _original in 1..p.steps.len() {
        let u: f64 = rng.gen();
        let mut kinds = [Rewrite::DecoyColor, Rewrite::DecoyObject, Rewrite::SwapThenMove];
        kinds.shuffle(&mut rng);
        let mut advance = 1;
        if u < ratio {
            for kind in kinds {
                let Some((candidate, inserted)) =
                    rewrite(&steps, pos, kind, start, &final_graph, &mut rng)
                else {
                    continue;
                };
                if max_steps.is_some_and(|m| candidate.len() > m) {
                    continue;
                }
                let prog = EditProgram { steps: candidate };
                if prog.check(&start.graph, &final_graph).is_ok() && simulate(&prog, start).is_some()
                {
                    steps = prog.steps;
                    advance = 1 + inserted;
                    break;
                }
            }
        }
        pos += advance;
    }
    EditProgram { steps }
}

/// Returns the rewritten step list and how many steps were inserted at or
/// after `pos`'s position (so the caller can find the next original step).
fn rewrite(
    steps: &[Step],
    pos: usize,
    kind: Rewrite,
    start: &WorkingState,
    full: &SceneGraph,
    rng: &mut rng::Rng,
) -> Option<(Vec<Step>, usize)> {
    let graphs = EditProgram {
        steps: steps.to_vec(),
    }
    .graphs_from(&start.graph)
    .ok()?;
    let before = if pos == 0 { &start.graph } else { &graphs[pos - 1] };
    let after = &graphs[pos];
    let used: BTreeSet<ObjKey> = graphs
        .iter()
        .flat_map(|g| g.objects.iter().copied())
        .chain(full.objects.iter().copied())
        .collect();

    match kind {
        Rewrite::DecoyColor => {
            let target = steps[pos].ops.iter().find_map(|op| match op {
                EditOp::AddObject(k) => Some(*k),
                _ => None,
            })?;
            let colors: Vec<Color> = Color::ALL
                .into_iter()
                .filter(|&c| c != target.color && !used.contains(&target.with_color(c)))
                .collect();
            let decoy = target.with_color(*colors.choose(rng)?);
            let mut detour = after.clone();
            detour.rename_object(&target, &decoy);
            let ops: Vec<EditOp> = steps[pos]
                .ops
                .iter()
                .map(|op| rename_in_op(op, &target, &decoy))
                .collect();
            let fix = vec![EditOp::ModifyAttribute {
                target: decoy,
                color: target.color,
            }];
            let mut out = steps[..pos].to_vec();
            out.push(Step::from_ops(canonical_ops(ops), &detour));
            out.push(Step::from_ops(fix, after));
            out.extend_from_slice(&steps[pos + 1..]);
            Some((out, 1))
        }
        Rewrite::DecoyObject => {
            let candidates: Vec<ObjKey> = Shape::ALL
                .into_iter()
                .flat_map(|s| Color::ALL.into_iter().map(move |c| ObjKey::new(s, c, 1)))
                .filter(|k| !used.contains(k))
                .collect();
            let decoy = *candidates.choose(rng)?;
            let mut with_decoy_before = before.clone();
            with_decoy_before.objects.insert(decoy);
            let mut with_decoy_after = after.clone();
            with_decoy_after.objects.insert(decoy);
            let mut out = steps[..pos].to_vec();
            out.push(Step::from_ops(vec![EditOp::AddObject(decoy)], &with_decoy_before));
            out.push(Step::from_ops(steps[pos].ops.clone(), &with_decoy_after));
            out.push(Step::from_ops(vec![EditOp::RemoveObject(decoy)], after));
            out.extend_from_slice(&steps[pos + 1..]);
            Some((out, 2))
        }
        Rewrite::SwapThenMove => {
            let objs: Vec<ObjKey> = after.objects.iter().copied().collect();
            let mut pairs = Vec::new();
            for (i, a) in objs.iter().enumerate() {
                for b in &objs[i + 1..] {
                    let distinct = (a.shape, a.color) != (b.shape, b.color);
                    let anchored = |k: &ObjKey| after.relations.iter().any(|e| e.subject == *k);
                    if distinct && (anchored(a) || anchored(b)) {
                        pairs.push((*a, *b));
                    }
                }
            }
            let &(a, b) = pairs.choose(rng)?;
            let moves: Vec<EditOp> = [a, b]
                .into_iter()
                .filter_map(|k| {
                    after.relations.iter().find(|e| e.subject == k).map(|e| EditOp::MoveObject {
                        target: k,
                        relation: e.relation,
                        reference: e.object,
                    })
                })
                .collect();
            let mut out = steps[..=pos].to_vec();
            out.push(Step::from_ops(vec![EditOp::SwapPositions(a, b)], after));
            out.push(Step::from_ops(moves, after));
            out.extend_from_slice(&steps[pos + 1..]);
            Some((out, 2))
        }
    }
}

fn rename_in_op(op: &EditOp, from: &ObjKey, to: &ObjKey) -> EditOp {
    let r = |k: &ObjKey| if k == from { *to } else { *k };
    match op {
        EditOp::AddObject(k) => EditOp::AddObject(r(k)),
        EditOp::AddRelation(e) => {
            EditOp::AddRelation(RelationEdge::new(r(&e.subject), e.relation, r(&e.object)))
        }
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_object_full() -> SceneGraph {
        parse_scene("red circle above blue square").unwrap()
    }

    #[test]
    fn apply_op_examples() {
        let rc = ObjKey::new(Shape::Circle, Color::Red, 1);
        let bs = ObjKey::new(Shape::Square, Color::Blue, 1);
        let g = apply_op(&SceneGraph::new(), &EditOp::AddObject(rc)).unwrap();
        assert_eq!(g.objects.len(), 1);

        let full = two_object_full();
        let removed = apply_op(&full, &EditOp::RemoveObject(bs)).unwrap();
        assert_eq!(removed, SceneGraph::from_parts([rc], []));

        let err = apply_op(&g, &EditOp::AddRelation(RelationEdge::new(rc, Relation::Above, bs)));
        assert_eq!(err, Err(PlanError::UnresolvedKey(bs)));

        assert_eq!(apply_op(&g, &EditOp::AddObject(rc)), Err(PlanError::DuplicateKey(rc)));
        let cyc = apply_op(
            &full,
            &EditOp::AddRelation(RelationEdge::new(bs, Relation::Above, rc)),
        );
        assert!(matches!(cyc, Err(PlanError::InvalidResult(_))));
        assert_eq!(apply_op(&full, &EditOp::SwapPositions(rc, bs)).unwrap(), full);
    }

    #[test]
    fn fused_text_never_references_a_later_object() {
        let rc = ObjKey::new(Shape::Circle, Color::Red, 1);
        let bs = ObjKey::new(Shape::Square, Color::Blue, 1);
        let ops = vec![
            EditOp::AddObject(rc),
            EditOp::AddObject(bs),
            EditOp::AddRelation(RelationEdge::new(rc, Relation::Above, bs)),
        ];
        let text = render_ops(&ops, true);
        assert_eq!(text, "add red circle ; add blue square ; make red circle above blue square");
        let back = parse_ops(&text, None).unwrap();
        assert_eq!(apply_script(&SceneGraph::new(), &back).unwrap(), two_object_full());
    }

    #[test]
    fn two_step_program_text() {
        let full = two_object_full();
        let chain = SubgraphChain {
            graphs: vec![parse_scene("blue square").unwrap(), full.clone()],
        };
        let p = synthesize_program(&chain);
        assert_eq!(p.steps[0].ins_text, "add blue square");
        assert_eq!(p.steps[1].ins_text, "add red circle above blue square");
        assert_eq!(p.steps[1].des_text, print_scene(&full));
        for (s, g) in p.steps.iter().zip(&chain.graphs) {
            assert_eq!(&s.scene().unwrap(), g);
        }
        p.check(&SceneGraph::new(), &full).unwrap();
    }

    #[test]
    fn two_chain_is_one_of_the_closed_chains() {
        let full = two_object_full();
        // every closed proper non-empty subgraph of {circle, square, above}
        let closed: Vec<SceneGraph> = ["red circle", "blue square", "red circle; blue square"]
            .iter()
            .map(|t| parse_scene(t).unwrap())
            .collect();
        for seed in 0..64 {
            let chain = subsample_chain(&full, seed, Some(2)).unwrap();
            assert_eq!(chain.k(), 2);
            assert_eq!(chain.full(), &full);
            assert!(closed.contains(&chain.graphs[0]), "{:?}", chain.graphs[0]);
        }
    }

    #[test]
    fn single_element_graph_gives_degenerate_chain() {
        let full = parse_scene("green star").unwrap();
        let chain = subsample_chain(&full, 3, None).unwrap();
        assert_eq!(chain.graphs, vec![full.clone()]);
        let p = synthesize_program(&chain);
        assert_eq!(p.steps.len(), 1);
        assert_eq!(p.steps[0].des_text, print_scene(&full));
        assert!(matches!(
            subsample_chain(&full, 3, Some(2)),
            Err(PlanError::BadHint { .. })
        ));
    }

    #[test]
    fn chain_sampling_is_deterministic() {
        let full = parse_scene("red circle above blue square; green star left-of blue square; 2 purple cross").unwrap();
        let a = subsample_chain(&full, 11, None).unwrap();
        let b = subsample_chain(&full, 11, None).unwrap();
        assert_eq!(a, b);
        a.check(&SceneGraph::new()).unwrap();
    }

    #[test]
    fn bad_hint_is_rejected() {
        let full = two_object_full();
        assert!(matches!(
            subsample_chain(&full, 0, Some(4)),
            Err(PlanError::BadHint { hint: 4, max: 2 })
        ));
    }

    #[test]
    fn instruction_round_trip() {
        let text = "add red circle above blue square ; make green star#2 left-of red circle ; change blue square color to orange ; remove purple cross ; swap positions of red circle and green star#2 ; move red circle to be below green star#2";
        let ops = parse_ops(text, None).unwrap();
        assert_eq!(ops.len(), 7);
        assert_eq!(render_ops(&ops, true), text);
        assert_eq!(parse_ops(&render_ops(&ops, false), None).unwrap(), ops);
    }

    #[test]
    fn unconstrained_color_resolves_against_context() {
        let ctx = parse_scene("red circle; blue square").unwrap();
        let ops = parse_ops("remove circle", Some(&ctx)).unwrap();
        assert_eq!(ops, vec![EditOp::RemoveObject(ObjKey::new(Shape::Circle, Color::Red, 1))]);
        assert!(parse_ops("remove circle", None).is_err());
        assert!(parse_ops("add circle", Some(&ctx)).is_err());
    }

    #[test]
    fn ratio_zero_is_identity() {
        let full = two_object_full();
        let chain = subsample_chain(&full, 1, Some(2)).unwrap();
        let p = synthesize_program(&chain);
        assert_eq!(augment_program(&p, 9, 0.0), p);
    }

    #[test]
    fn decoy_color_rewrite_on_second_step() {
        let full = two_object_full();
        let chain = SubgraphChain {
            graphs: vec![parse_scene("red circle").unwrap(), full.clone()],
        };
        let p = synthesize_program(&chain);
        assert!(simulate(&p, &WorkingState::default()).is_some());
        let mut seen = false;
        for seed in 0..200 {
            let a = augment_program(&p, seed, 1.0);
            assert_eq!(a.final_graph(&SceneGraph::new()).unwrap(), full);
            a.check(&SceneGraph::new(), &full).unwrap();
            assert_eq!(a.steps[0], p.steps[0]);
            if let [EditOp::ModifyAttribute { target, color }] = a.steps.get(2).map_or(&[][..], |s| &s.ops[..]) {
                assert_eq!(*color, Color::Blue);
                assert_ne!(target.color, Color::Blue);
                assert_eq!(
                    a.steps[1].ins_text,
                    format!("add {} square ; make red circle above {} square", target.color.name(), target.color.name())
                );
                assert_eq!(
                    a.steps[2].ins_text,
                    format!("change {} square color to blue", target.color.name())
                );
                seen = true;
            }
        }
        assert!(seen, "no seed drew the decoy-color rewrite");
    }
}
