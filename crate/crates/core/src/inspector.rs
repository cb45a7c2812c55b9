//! Inspect stage: exact judges for plan text and drafted images.
//!
//! The text judge compares a step's `<des>` (plus the facts its `<ins>`
//! asserts) with the full prompt graph, telling incomplete-but-correct
//! partial scenes apart from contradictions. The image judge compares a
//! drafted raster with the clean expectation of the step's ops.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::microworld::{
    self, bind_pinned, canvas_of, derender, execute_traced, Canvas, Cell, FaultKind, Glyph,
    MicroError, Placement, RasterImage, WorkingState,
};
use crate::planner::{parse_ops, render_ops, EditOp, PlanError, Step};
use crate::scene_graph::{
    diff, parse_scene, print_scene, ObjKey, RelationEdge, SceneError, SceneGraph,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictStatus {
    ConsistentIncomplete,
    ConsistentComplete,
    Conflict,
    Misaligned,
}

impl VerdictStatus {
    pub fn name(self) -> &'static str {
        match self {
            VerdictStatus::ConsistentIncomplete => "consistent-incomplete",
            VerdictStatus::ConsistentComplete => "consistent-complete",
            VerdictStatus::Conflict => "conflict",
            VerdictStatus::Misaligned => "misaligned",
        }
    }

    pub fn is_clean(self) -> bool {
        matches!(
            self,
            VerdictStatus::ConsistentComplete | VerdictStatus::ConsistentIncomplete
        )
    }
}

/// One detected discrepancy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FaultKind,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub analysis: Vec<Finding>,
    pub corrective: Vec<EditOp>,
    pub rendered_text: String,
}

impl Critique {
    fn new(analysis: Vec<Finding>, corrective: Vec<EditOp>) -> Critique {
        let rendered_text = render_ops(&corrective, false);
        Critique {
            analysis,
            corrective,
            rendered_text,
        }
    }

    /// The kind of the first finding.
    pub fn kind(&self) -> Option<FaultKind> {
        self.analysis.first().map(|f| f.kind)
    }

    /// Plain-text analysis carried by an inspect segment.
    pub fn analysis_text(&self) -> String {
        self.analysis
            .iter()
            .map(|f| format!("{}: expected {}, observed {}", f.kind.name(), f.expected, f.observed))
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub critique: Option<Critique>,
}

impl Verdict {
    fn clean(status: VerdictStatus) -> Verdict {
        Verdict {
            status,
            critique: None,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.status.is_clean()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InspectError {
    #[error("description does not parse: {0}")]
    Description(SceneError),
    #[error("instruction does not parse: {0}")]
    Instruction(PlanError),
    #[error("image: {0}")]
    Image(#[from] MicroError),
    #[error("the prior image does not show the prior state")]
    PriorMismatch,
    #[error("corrective op {0} cannot be applied to the observed state")]
    Unresolvable(String),
}

// ---------------------------------------------------------------------------
// Text

/// Judges a plan step against the full prompt graph.
pub fn check_text_conflict(
    ins_text: &str,
    des_text: &str,
    full: &SceneGraph,
) -> Result<Verdict, InspectError> {
    let described = parse_scene(des_text).map_err(InspectError::Description)?;
    let ins_ops = parse_ops(ins_text, Some(&described)).map_err(InspectError::Instruction)?;
    let mut merged = described;
    for op in &ins_ops {
        match op {
            EditOp::AddObject(k) => {
                merged.objects.insert(*k);
            }
            EditOp::AddRelation(e) => {
                merged.relations.insert(*e);
            }
            _ => {}
        }
    }
    Ok(judge_graph(&merged, full))
}

/// Judges a claimed graph against the full graph; the corrective script
/// rewrites the claim into its repaired form.
pub fn judge_graph(claimed: &SceneGraph, full: &SceneGraph) -> Verdict {
    let (repaired, findings) = repair(claimed, full);
    if findings.is_empty() {
        let complete = claimed.objects == full.objects && claimed.facts() == full.facts();
        return Verdict::clean(if complete {
            VerdictStatus::ConsistentComplete
        } else {
            VerdictStatus::ConsistentIncomplete
        });
    }
    let corrective = diff(&repaired, claimed);
    Verdict {
        status: VerdictStatus::Conflict,
        critique: Some(Critique::new(findings, corrective)),
    }
}

/// Keeps every fact of `claimed` that `full` supports and rewrites the
/// contradicted ones to the facts `full` requires.
pub fn repair(claimed: &SceneGraph, full: &SceneGraph) -> (SceneGraph, Vec<Finding>) {
    let mut findings = Vec::new();
    let mut rename: BTreeMap<ObjKey, ObjKey> = BTreeMap::new();
    let mut claimed_keys: BTreeSet<ObjKey> = BTreeSet::new();
    for o in &claimed.objects {
        if full.contains(o) {
            rename.insert(*o, *o);
            claimed_keys.insert(*o);
        }
    }
    for o in &claimed.objects {
        if full.contains(o) {
            continue;
        }
        let candidates: Vec<ObjKey> = full
            .objects
            .iter()
            .filter(|k| {
                k.shape == o.shape
                    && k.index == o.index
                    && !claimed.contains(k)
                    && !claimed_keys.contains(k)
            })
            .copied()
            .collect();
        if let [k] = candidates[..] {
            rename.insert(*o, k);
            claimed_keys.insert(k);
            findings.push(Finding {
                kind: FaultKind::WrongColor,
                expected: k.to_string(),
                observed: o.to_string(),
            });
        } else {
            findings.push(Finding {
                kind: FaultKind::Duplicate,
                expected: "no such object".into(),
                observed: o.to_string(),
            });
        }
    }
    let mut repaired = SceneGraph::from_parts(rename.values().copied(), []);
    let required = full.facts();
    for e in &claimed.relations {
        let (Some(s), Some(t)) = (rename.get(&e.subject), rename.get(&e.object)) else {
            continue;
        };
        let edge = RelationEdge::new(*s, e.relation, *t);
        let (a, b, axis) = edge.normalized();
        if required.contains(&(a, b, axis)) {
            repaired.relations.insert(edge);
        } else if required.contains(&(b, a, axis)) {
            for want in full.relations.iter().filter(|w| w.same_pair_axis(&edge)) {
                repaired.relations.insert(*want);
            }
            findings.push(Finding {
                kind: FaultKind::RelationViolation,
                expected: full
                    .relations
                    .iter()
                    .find(|w| w.same_pair_axis(&edge))
                    .map_or_else(String::new, |w| w.to_string()),
                observed: e.to_string(),
            });
        } else {
            findings.push(Finding {
                kind: FaultKind::RelationViolation,
                expected: "no constraint".into(),
                observed: e.to_string(),
            });
        }
    }
    (repaired, findings)
}

// ---------------------------------------------------------------------------
// Images

/// Everything the image judge worked out for one draft.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub verdict: Verdict,
    /// The clean expectation of the step.
    pub expected: WorkingState,
    /// The draft's glyphs keyed against the expectation.
    pub observed: Placement,
    /// On a clean verdict, where the draft put each object of the new graph.
    pub accepted: Option<Placement>,
}

/// Judges a draft against the step's ops. `prior` is the belief the
/// `before` image was drawn from.
pub fn check_image_alignment(
    before: &RasterImage,
    after: &RasterImage,
    step: &Step,
    prior: &WorkingState,
) -> Result<Verdict, InspectError> {
    let b = derender(before)?;
    if b != canvas_of(&prior.placement) {
        return Err(InspectError::PriorMismatch);
    }
    Ok(align(prior, &derender(after)?, &step.ops)?.verdict)
}

pub fn align(
    prior: &WorkingState,
    after: &Canvas,
    ops: &[EditOp],
) -> Result<Alignment, InspectError> {
    let (expected, _) = execute_traced(prior, ops, &BTreeSet::new())?;
    let expected_canvas = canvas_of(&expected.placement);
    if *after == expected_canvas {
        return Ok(Alignment {
            verdict: Verdict::clean(VerdictStatus::ConsistentComplete),
            observed: expected.placement.clone(),
            accepted: Some(expected.placement.clone()),
            expected,
        });
    }
    // Alternative drawings are accepted as long as untouched objects stay
    // put and swapped or recolored objects sit where the op puts them.
    let mut pinned = Placement::new();
    let mut free: BTreeSet<ObjKey> = BTreeSet::new();
    for op in ops {
        match op {
            EditOp::MoveObject { target, .. } => {
                free.insert(*target);
            }
            EditOp::AddObject(k) => {
                free.insert(*k);
            }
            _ => {}
        }
    }
    for (k, c) in &expected.placement {
        if !free.contains(k) {
            pinned.insert(*k, *c);
        }
    }
    if let Some(p) = bind_pinned(after, &expected.graph, Some(&expected.placement), &pinned) {
        return Ok(Alignment {
            verdict: Verdict::clean(VerdictStatus::ConsistentComplete),
            observed: p.clone(),
            accepted: Some(p),
            expected,
        });
    }
    let observed = key_observed(after, &expected.placement);
    let critique = image_critique(&observed, &expected, ops);
    Ok(Alignment {
        verdict: Verdict {
            status: VerdictStatus::Misaligned,
            critique: Some(critique),
        },
        expected,
        observed,
        accepted: None,
    })
}

/// Assigns a key to every drawn glyph: exact expected matches first, then
/// displaced copies of expected objects, then wrong glyphs on expected
/// cells (keeping the expected index), then fresh indices.
pub fn key_observed(canvas: &Canvas, expected: &Placement) -> Placement {
    let mut out = Placement::new();
    let at: BTreeMap<Cell, ObjKey> = expected.iter().map(|(k, c)| (*c, *k)).collect();
    let mut rest: Vec<(Cell, Glyph)> = Vec::new();
    for (cell, g) in canvas {
        match at.get(cell) {
            Some(k) if Glyph::of(k) == *g => {
                out.insert(*k, *cell);
            }
            _ => rest.push((*cell, *g)),
        }
    }
    let mut leftover = Vec::new();
    for (cell, g) in rest {
        let displaced = expected
            .keys()
            .find(|k| Glyph::of(k) == g && !out.contains_key(k))
            .copied();
        match displaced {
            Some(k) => {
                out.insert(k, cell);
            }
            None => leftover.push((cell, g)),
        }
    }
    for (cell, g) in leftover {
        let taken = |k: &ObjKey| out.contains_key(k) || expected.contains_key(k);
        let preferred = at
            .get(&cell)
            .map(|k| ObjKey::new(g.shape, g.color, k.index))
            .filter(|k| !taken(k));
        let key = preferred.unwrap_or_else(|| {
            (1..=u8::MAX)
                .map(|i| ObjKey::new(g.shape, g.color, i))
                .find(|k| !taken(k))
                .expect("fewer than 255 objects")
        });
        out.insert(key, cell);
    }
    out
}

fn at_cell(k: &ObjKey, c: Cell) -> String {
    format!("{k} at row {} col {}", c.row, c.col)
}

fn image_critique(observed: &Placement, expected: &WorkingState, ops: &[EditOp]) -> Critique {
    let e = &expected.placement;
    let graph = &expected.graph;
    let at: BTreeMap<Cell, ObjKey> = e.iter().map(|(k, c)| (*c, *k)).collect();
    let step_removes: BTreeSet<ObjKey> = ops
        .iter()
        .filter_map(|op| match op {
            EditOp::RemoveObject(k) => Some(*k),
            _ => None,
        })
        .collect();

    let mut removes = Vec::new();
    let mut modifies = Vec::new();
    let mut swaps = Vec::new();
    let mut moves = Vec::new();
    let mut adds: Vec<ObjKey> = Vec::new();
    let mut findings = Vec::new();
    let mut pair_cells: BTreeSet<Cell> = BTreeSet::new();

    // recolors and removals of glyphs the expectation does not account for
    let mut present: BTreeSet<ObjKey> = BTreeSet::new();
    for (o, c) in observed {
        if e.contains_key(o) {
            present.insert(*o);
            continue;
        }
        match at.get(c) {
            Some(k) if k.shape == o.shape && k.index == o.index && !observed.contains_key(k) => {
                modifies.push(EditOp::ModifyAttribute {
                    target: *o,
                    color: k.color,
                });
                present.insert(*k);
                let skipped = ops.iter().any(
                    |op| matches!(op, EditOp::ModifyAttribute { target, .. } if target == o),
                );
                findings.push(Finding {
                    kind: if skipped {
                        FaultKind::Omission
                    } else {
                        FaultKind::WrongColor
                    },
                    expected: at_cell(k, *c),
                    observed: at_cell(o, *c),
                });
            }
            Some(k) if !observed.contains_key(k) && !step_removes.contains(o) => {
                removes.push(EditOp::RemoveObject(*o));
                pair_cells.insert(*c);
                findings.push(Finding {
                    kind: FaultKind::WrongShape,
                    expected: at_cell(k, *c),
                    observed: at_cell(o, *c),
                });
            }
            _ => {
                removes.push(EditOp::RemoveObject(*o));
                findings.push(Finding {
                    kind: if step_removes.contains(o) {
                        FaultKind::Omission
                    } else {
                        FaultKind::Duplicate
                    },
                    expected: "no object".into(),
                    observed: at_cell(o, *c),
                });
            }
        }
    }

    // displaced objects: exchanged pairs first, then single moves
    let mut displaced: Vec<ObjKey> = observed
        .iter()
        .filter(|(k, c)| e.get(k).is_some_and(|want| want != *c))
        .map(|(k, _)| *k)
        .collect();
    let mut swapped: BTreeSet<ObjKey> = BTreeSet::new();
    for (i, a) in displaced.iter().enumerate() {
        for b in &displaced[i + 1..] {
            if swapped.contains(a) || swapped.contains(b) {
                continue;
            }
            if observed[a] == e[b] && observed[b] == e[a] {
                swapped.insert(*a);
                swapped.insert(*b);
                swaps.push(EditOp::SwapPositions(*a, *b));
                let skipped = ops.iter().any(|op| {
                    matches!(op, EditOp::SwapPositions(x, y) if (x, y) == (a, b) || (y, x) == (a, b))
                });
                findings.push(Finding {
                    kind: if skipped {
                        FaultKind::Omission
                    } else {
                        FaultKind::RelationViolation
                    },
                    expected: format!("{} and {} exchanged", at_cell(a, e[a]), at_cell(b, e[b])),
                    observed: format!("{} and {}", at_cell(a, observed[a]), at_cell(b, observed[b])),
                });
            }
        }
    }
    displaced.retain(|k| !swapped.contains(k));
    for k in displaced {
        let step_move = ops.iter().find_map(|op| match op {
            EditOp::MoveObject {
                target,
                relation,
                reference,
            } if *target == k => Some(EditOp::MoveObject {
                target: k,
                relation: *relation,
                reference: *reference,
            }),
            _ => None,
        });
        let anchor = graph
            .incident(&k)
            .find(|w| w.subject == k)
            .or_else(|| graph.incident(&k).next())
            .and_then(|w| w.oriented_from(&k));
        let op = step_move.clone().or_else(|| {
            anchor.map(|w| EditOp::MoveObject {
                target: k,
                relation: w.relation,
                reference: w.object,
            })
        });
        let kind = if step_move.is_some() {
            FaultKind::Omission
        } else {
            FaultKind::RelationViolation
        };
        findings.push(Finding {
            kind,
            expected: at_cell(&k, e[&k]),
            observed: at_cell(&k, observed[&k]),
        });
        match op {
            Some(op) => moves.push(op),
            None => {
                removes.push(EditOp::RemoveObject(k));
                adds.push(k);
            }
        }
    }

    for (k, c) in e {
        if !present.contains(k) && !observed.contains_key(k) {
            adds.push(*k);
            if !pair_cells.contains(c) {
                findings.push(Finding {
                    kind: FaultKind::Omission,
                    expected: at_cell(k, *c),
                    observed: "nothing".into(),
                });
            }
        }
    }
    adds.sort();
    adds.dedup();
    let mut add_ops: Vec<EditOp> = adds.iter().map(|k| EditOp::AddObject(*k)).collect();
    for op in ops {
        if let EditOp::AddRelation(w) = op {
            if adds.contains(&w.subject) || adds.contains(&w.object) {
                add_ops.push(op.clone());
            }
        }
    }

    let corrective: Vec<EditOp> = removes
        .into_iter()
        .chain(swaps)
        .chain(modifies)
        .chain(moves)
        .chain(add_ops)
        .collect();
    Critique::new(findings, corrective)
}

/// Applies a corrective script to keyed observed glyphs; moved and added
/// objects go where the expectation puts them.
pub fn apply_corrective(
    observed: &Placement,
    corrective: &[EditOp],
    expected: &WorkingState,
) -> Result<Placement, InspectError> {
    let mut p = observed.clone();
    let fail = |op: &EditOp| InspectError::Unresolvable(op.to_string());
    for op in corrective {
        match op {
            EditOp::RemoveObject(k) => {
                p.remove(k).ok_or_else(|| fail(op))?;
            }
            EditOp::ModifyAttribute { target, color } => {
                let c = p.remove(target).ok_or_else(|| fail(op))?;
                p.insert(target.with_color(*color), c);
            }
            EditOp::SwapPositions(a, b) => {
                let ca = *p.get(a).ok_or_else(|| fail(op))?;
                let cb = *p.get(b).ok_or_else(|| fail(op))?;
                p.insert(*a, cb);
                p.insert(*b, ca);
            }
            EditOp::MoveObject { target, .. } => {
                let to = *expected.placement.get(target).ok_or_else(|| fail(op))?;
                if !p.contains_key(target) {
                    return Err(fail(op));
                }
                p.insert(*target, to);
            }
            EditOp::AddObject(k) => {
                let to = *expected.placement.get(k).ok_or_else(|| fail(op))?;
                if p.insert(*k, to).is_some() {
                    return Err(fail(op));
                }
            }
            EditOp::AddRelation(w) => {
                if !p.contains_key(&w.subject) || !p.contains_key(&w.object) {
                    return Err(fail(op));
                }
            }
        }
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Remote judge adapter

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt_dsl: String,
    pub ins_text: String,
    pub des_text: String,
    pub before_image: Option<RasterImage>,
    pub after_image: Option<RasterImage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub status: VerdictStatus,
    pub analysis: String,
    pub corrective_ins: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JudgeError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("rejected request: {0}")]
    Rejected(String),
}

/// A judge reachable over some request/response transport. Calls must be
/// independent so that retries are idempotent.
pub trait RemoteJudge: Send + Sync {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePolicy {
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for JudgePolicy {
    fn default() -> Self {
        JudgePolicy {
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

/// Retries transport failures and timeouts; rejections are final.
pub fn judge_with_retries(
    judge: &dyn RemoteJudge,
    request: &JudgeRequest,
    policy: JudgePolicy,
) -> Result<JudgeResponse, JudgeError> {
    let mut last = None;
    for _ in 0..=policy.retries {
        match judge.judge(request) {
            Ok(r) => return Ok(r),
            Err(JudgeError::Rejected(m)) => return Err(JudgeError::Rejected(m)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(JudgeError::Timeout(Duration::from_millis(policy.timeout_ms))))
}

/// In-process stand-in for a remote judge, answering the text check of the
/// request with the exact judge.
#[derive(Debug, Default, Clone)]
pub struct MockJudge;

impl RemoteJudge for MockJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let full = parse_scene(&request.prompt_dsl).map_err(|e| JudgeError::Rejected(e.to_string()))?;
        let v = check_text_conflict(&request.ins_text, &request.des_text, &full)
            .map_err(|e| JudgeError::Rejected(e.to_string()))?;
        if let (Some(before), Some(after)) = (&request.before_image, &request.after_image) {
            microworld::derender(before).map_err(|e| JudgeError::Rejected(e.to_string()))?;
            microworld::derender(after).map_err(|e| JudgeError::Rejected(e.to_string()))?;
        }
        Ok(JudgeResponse {
            status: v.status,
            analysis: v.critique.as_ref().map(Critique::analysis_text).unwrap_or_default(),
            corrective_ins: v.critique.map(|c| c.rendered_text).unwrap_or_default(),
        })
    }
}

/// Description text of the repaired form of a claimed step, for tests and
/// plan-fault self-checks.
pub fn repaired_description(des_text: &str, full: &SceneGraph) -> Result<String, InspectError> {
    let d = parse_scene(des_text).map_err(InspectError::Description)?;
    Ok(print_scene(&repair(&d, full).0))
}
