//! The 6×6 sketch world: layout, rendering, binding, and the seeded sketcher.
//!
//! Every raster cell holds `[shape_code, color_code]`, with `[0, 0]` empty.
//! The clean sketcher is deterministic: new objects are laid out by a
//! depth-first search in canonical key order over row-major cells, keeping
//! earlier objects fixed. The faulty sketcher perturbs the clean drawing of
//! individual ops according to a [`FaultModel`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::planner::{apply_script, EditOp, PlanError};
use crate::rng::{self, stream};
use crate::scene_graph::{Color, ObjKey, Relation, RelationEdge, SceneGraph, Shape};

pub const GRID: u8 = 6;
const LAYOUT_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        Cell { row, col }
    }

    pub fn rc(self) -> (u8, u8) {
        (self.row, self.col)
    }

    /// All cells in row-major order.
    pub fn all() -> impl Iterator<Item = Cell> {
        (0..GRID).flat_map(|r| (0..GRID).map(move |c| Cell::new(r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: Shape,
    pub color: Color,
}

impl Glyph {
    pub fn of(key: &ObjKey) -> Glyph {
        Glyph {
            shape: key.shape,
            color: key.color,
        }
    }
}

pub type Placement = BTreeMap<ObjKey, Cell>;
pub type Canvas = BTreeMap<Cell, Glyph>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RasterImage {
    pub cells: [[[u8; 2]; GRID as usize]; GRID as usize],
}

impl Default for RasterImage {
    fn default() -> Self {
        RasterImage {
            cells: [[[0; 2]; GRID as usize]; GRID as usize],
        }
    }
}

impl RasterImage {
    pub fn is_blank(&self) -> bool {
        self.cells.iter().flatten().all(|c| *c == [0, 0])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MicroError {
    #[error("no placement satisfies the graph")]
    Unsatisfiable,
    #[error("malformed raster cell ({row}, {col}): {code:?}")]
    MalformedCell { row: u8, col: u8, code: [u8; 2] },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// The clean belief about the drawing: the intended graph and where each of
/// its objects sits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingState {
    pub graph: SceneGraph,
    pub placement: Placement,
}

pub fn render_canvas(canvas: &Canvas) -> RasterImage {
    let mut img = RasterImage::default();
    for (cell, g) in canvas {
        img.cells[cell.row as usize][cell.col as usize] = [g.shape.code(), g.color.code()];
    }
    img
}

pub fn canvas_of(placement: &Placement) -> Canvas {
    placement.iter().map(|(k, c)| (*c, Glyph::of(k))).collect()
}

pub fn render(placement: &Placement) -> RasterImage {
    render_canvas(&canvas_of(placement))
}

pub fn derender(img: &RasterImage) -> Result<Canvas, MicroError> {
    let mut out = Canvas::new();
    for cell in Cell::all() {
        let code = img.cells[cell.row as usize][cell.col as usize];
        if code == [0, 0] {
            continue;
        }
        match (Shape::from_code(code[0]), Color::from_code(code[1])) {
            (Some(shape), Some(color)) => {
                out.insert(cell, Glyph { shape, color });
            }
            _ => {
                return Err(MicroError::MalformedCell {
                    row: cell.row,
                    col: cell.col,
                    code,
                })
            }
        }
    }
    Ok(out)
}

fn edge_holds(e: &RelationEdge, p: &Placement) -> Option<bool> {
    Some(e.relation.holds(p.get(&e.subject)?.rc(), p.get(&e.object)?.rc()))
}

/// Every object placed on a distinct cell and every relation satisfied.
pub fn placement_realizes(p: &Placement, g: &SceneGraph) -> bool {
    let cells: BTreeSet<Cell> = g.objects.iter().filter_map(|k| p.get(k).copied()).collect();
    cells.len() == g.objects.len() && g.relations.iter().all(|e| edge_holds(e, p) == Some(true))
}

pub fn layout(g: &SceneGraph, fixed: &Placement) -> Result<Placement, MicroError> {
    layout_avoiding(g, fixed, &BTreeSet::new())
}

/// Places `g`'s objects missing from `fixed`, never using `blocked` cells.
/// Returns the first consistent assignment found by the search.
pub fn layout_avoiding(
    g: &SceneGraph,
    fixed: &Placement,
    blocked: &BTreeSet<Cell>,
) -> Result<Placement, MicroError> {
    let mut p: Placement = fixed
        .iter()
        .filter(|(k, _)| g.contains(k))
        .map(|(k, c)| (*k, *c))
        .collect();
    let fixed_edges_ok = g
        .relations
        .iter()
        .all(|e| edge_holds(e, &p).unwrap_or(true));
    if !fixed_edges_ok {
        return Err(MicroError::Unsatisfiable);
    }
    let Some(bounds) = axis_bounds(g) else {
        return Err(MicroError::Unsatisfiable);
    };
    let pending: Vec<ObjKey> = g.objects.iter().filter(|k| !p.contains_key(k)).copied().collect();
    let mut used: BTreeSet<Cell> = p.values().copied().chain(blocked.iter().copied()).collect();
    let mut budget = LAYOUT_BUDGET;
    if place_dfs(g, &bounds, &pending, &mut p, &mut used, &mut budget) {
        Ok(p)
    } else {
        Err(MicroError::Unsatisfiable)
    }
}

/// Row and column ranges implied by the longest strict chains through each
/// object; `None` when a chain cannot fit on the grid or the axis order is
/// cyclic. Only cells inside the ranges can appear in a solution.
type Bounds = BTreeMap<ObjKey, [(u8, u8); 2]>;

fn axis_bounds(g: &SceneGraph) -> Option<Bounds> {
    let keys: Vec<ObjKey> = g.objects.iter().copied().collect();
    let pos = |k: &ObjKey| keys.binary_search(k).ok();
    let mut less: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for e in &g.relations {
        let (Some(s), Some(o)) = (pos(&e.subject), pos(&e.object)) else { continue };
        match e.relation {
            Relation::Above => less[0].push((s, o)),
            Relation::Below => less[0].push((o, s)),
            Relation::LeftOf => less[1].push((s, o)),
            Relation::RightOf => less[1].push((o, s)),
        }
    }
    let n = keys.len();
    let mut out: Vec<[(u8, u8); 2]> = vec![[(0, 0); 2]; n];
    for (axis, edges) in less.iter().enumerate() {
        let mut before = vec![0usize; n];
        let mut after = vec![0usize; n];
        for round in 0..=n {
            let mut changed = false;
            for &(a, b) in edges {
                if before[b] < before[a] + 1 {
                    before[b] = before[a] + 1;
                    changed = true;
                }
                if after[a] < after[b] + 1 {
                    after[a] = after[b] + 1;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            if round == n {
                return None;
            }
        }
        for i in 0..n {
            if before[i] + after[i] >= GRID as usize {
                return None;
            }
            out[i][axis] = (before[i] as u8, GRID - 1 - after[i] as u8);
        }
    }
    Some(keys.into_iter().zip(out).collect())
}

fn consistent_at(g: &SceneGraph, key: &ObjKey, p: &Placement) -> bool {
    g.incident(key).all(|e| edge_holds(e, p).unwrap_or(true))
}

fn place_dfs(
    g: &SceneGraph,
    bounds: &Bounds,
    pending: &[ObjKey],
    p: &mut Placement,
    used: &mut BTreeSet<Cell>,
    budget: &mut usize,
) -> bool {
    let Some((key, rest)) = pending.split_first() else {
        return true;
    };
    let [(r0, r1), (c0, c1)] = bounds[key];
    for cell in Cell::all() {
        if used.contains(&cell) || !(r0..=r1).contains(&cell.row) || !(c0..=c1).contains(&cell.col) {
            continue;
        }
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        p.insert(*key, cell);
        if consistent_at(g, key, p) {
            used.insert(cell);
            if place_dfs(g, bounds, rest, p, used, budget) {
                return true;
            }
            used.remove(&cell);
        }
        p.remove(key);
    }
    false
}

/// Matches the graph's objects to same-appearance glyphs so that every
/// relation holds. The canvas must hold exactly the graph's glyph multiset.
/// Cells from `hint` are tried first.
pub fn bind(canvas: &Canvas, g: &SceneGraph, hint: Option<&Placement>) -> Option<Placement> {
    bind_pinned(canvas, g, hint, &Placement::new())
}

/// As [`bind`], with the objects in `pinned` restricted to their given cells.
pub fn bind_pinned(
    canvas: &Canvas,
    g: &SceneGraph,
    hint: Option<&Placement>,
    pinned: &Placement,
) -> Option<Placement> {
    if canvas.len() != g.objects.len() {
        return None;
    }
    let mut want: BTreeMap<Glyph, usize> = BTreeMap::new();
    for k in &g.objects {
        *want.entry(Glyph::of(k)).or_default() += 1;
    }
    let mut have: BTreeMap<Glyph, usize> = BTreeMap::new();
    for gl in canvas.values() {
        *have.entry(*gl).or_default() += 1;
    }
    if want != have {
        return None;
    }
    let keys: Vec<ObjKey> = g.objects.iter().copied().collect();
    let mut p = Placement::new();
    let mut used = BTreeSet::new();
    let mut budget = LAYOUT_BUDGET;
    bind_dfs(canvas, g, &keys, hint, pinned, &mut p, &mut used, &mut budget).then_some(p)
}

fn bind_dfs(
    canvas: &Canvas,
    g: &SceneGraph,
    keys: &[ObjKey],
    hint: Option<&Placement>,
    pinned: &Placement,
    p: &mut Placement,
    used: &mut BTreeSet<Cell>,
    budget: &mut usize,
) -> bool {
    let Some((key, rest)) = keys.split_first() else {
        return true;
    };
    let glyph = Glyph::of(key);
    let pin = pinned.get(key).copied();
    let preferred = hint.and_then(|h| h.get(key)).copied();
    let candidates = preferred
        .into_iter()
        .chain(canvas.keys().copied().filter(|c| Some(*c) != preferred));
    for cell in candidates {
        if used.contains(&cell) || canvas.get(&cell) != Some(&glyph) || pin.is_some_and(|c| c != cell) {
            continue;
        }
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        p.insert(*key, cell);
        if consistent_at(g, key, p) {
            used.insert(cell);
            if bind_dfs(canvas, g, rest, hint, pinned, p, used, budget) {
                return true;
            }
            used.remove(&cell);
        }
        p.remove(key);
    }
    false
}

/// The success criterion: the image realizes the scene graph.
pub fn matches_scene(img: &RasterImage, full: &SceneGraph) -> bool {
    derender(img).is_ok_and(|c| bind(&c, full, None).is_some())
}

/// Cells drawn on the canvas that the belief does not account for.
pub fn foreign_cells(prior: &WorkingState, canvas: &Canvas) -> BTreeSet<Cell> {
    let known: BTreeSet<Cell> = prior.placement.values().copied().collect();
    canvas.keys().filter(|c| !known.contains(c)).copied().collect()
}

/// Where each op acted, as seen by the clean sketcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trace {
    Add(Cell),
    Relation,
    Modify(Cell),
    Remove(Cell),
    Swap(Cell, Cell),
    Move { from: Cell, to: Cell },
}

pub fn execute_step(prior: &WorkingState, ops: &[EditOp]) -> Result<WorkingState, MicroError> {
    execute_traced(prior, ops, &BTreeSet::new()).map(|(s, _)| s)
}

/// The clean sketcher. Existing objects keep their cells unless an op
/// modifies, removes, swaps or moves them; a moved object stays put when its
/// cell already satisfies its relations and otherwise takes the first free
/// feasible cell. New objects are then laid out around everything else.
pub fn execute_traced(
    prior: &WorkingState,
    ops: &[EditOp],
    blocked: &BTreeSet<Cell>,
) -> Result<(WorkingState, Vec<Trace>), MicroError> {
    let graph = apply_script(&prior.graph, ops)?;
    let mut p = prior.placement.clone();
    let mut trace = vec![Trace::Relation; ops.len()];
    for (i, op) in ops.iter().enumerate() {
        match op {
            EditOp::ModifyAttribute { target, color } => {
                let cell = p.remove(target).ok_or(MicroError::Unsatisfiable)?;
                p.insert(target.with_color(*color), cell);
                trace[i] = Trace::Modify(cell);
            }
            EditOp::RemoveObject(k) => {
                let cell = p.remove(k).ok_or(MicroError::Unsatisfiable)?;
                trace[i] = Trace::Remove(cell);
            }
            EditOp::SwapPositions(a, b) => {
                let ca = *p.get(a).ok_or(MicroError::Unsatisfiable)?;
                let cb = *p.get(b).ok_or(MicroError::Unsatisfiable)?;
                p.insert(*a, cb);
                p.insert(*b, ca);
                trace[i] = Trace::Swap(ca, cb);
            }
            EditOp::MoveObject { target, .. } => {
                let from = *p.get(target).ok_or(MicroError::Unsatisfiable)?;
                let to = if consistent_at(&graph, target, &p) {
                    from
                } else {
                    p.remove(target);
                    let occupied: BTreeSet<Cell> = p.values().copied().collect();
                    let to = Cell::all()
                        .filter(|c| !occupied.contains(c) && !blocked.contains(c))
                        .find(|c| {
                            p.insert(*target, *c);
                            let ok = consistent_at(&graph, target, &p);
                            p.remove(target);
                            ok
                        })
                        .ok_or(MicroError::Unsatisfiable)?;
                    p.insert(*target, to);
                    to
                };
                trace[i] = Trace::Move { from, to };
            }
            EditOp::AddObject(_) | EditOp::AddRelation(_) => {}
        }
    }
    let p = layout_avoiding(&graph, &p, blocked)?;
    for (i, op) in ops.iter().enumerate() {
        if let EditOp::AddObject(k) = op {
            trace[i] = Trace::Add(p[k]);
        }
    }
    if !placement_realizes(&p, &graph) {
        return Err(MicroError::Unsatisfiable);
    }
    Ok((WorkingState { graph, placement: p }, trace))
}

// ---------------------------------------------------------------------------
// Faults

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    WrongColor,
    WrongShape,
    RelationViolation,
    Omission,
    Duplicate,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::WrongColor,
        FaultKind::WrongShape,
        FaultKind::RelationViolation,
        FaultKind::Omission,
        FaultKind::Duplicate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::WrongColor => "wrong-color",
            FaultKind::WrongShape => "wrong-shape",
            FaultKind::RelationViolation => "relation-violation",
            FaultKind::Omission => "omission",
            FaultKind::Duplicate => "duplicate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultStage {
    Plan,
    Sketch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLabel {
    pub stage: FaultStage,
    pub step: usize,
    pub ordinal: u64,
    pub kind: FaultKind,
    pub target: ObjKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultModel {
    pub none: f64,
    pub wrong_color: f64,
    pub wrong_shape: f64,
    pub relation_violation: f64,
    pub omission: f64,
    pub duplicate: f64,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel::with_rate(0.3)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaultModelError {
    #[error("fault probabilities must be in [0, 1] and sum to 1 (sum = {0})")]
    NotADistribution(f64),
}

impl FaultModel {
    /// `rate` spread evenly over the five fault kinds.
    pub fn with_rate(rate: f64) -> Self {
        let each = rate / 5.0;
        FaultModel {
            none: 1.0 - rate,
            wrong_color: each,
            wrong_shape: each,
            relation_violation: each,
            omission: each,
            duplicate: each,
        }
    }

    pub fn clean() -> Self {
        FaultModel::with_rate(0.0)
    }

    pub fn weight(&self, kind: FaultKind) -> f64 {
        match kind {
            FaultKind::WrongColor => self.wrong_color,
            FaultKind::WrongShape => self.wrong_shape,
            FaultKind::RelationViolation => self.relation_violation,
            FaultKind::Omission => self.omission,
            FaultKind::Duplicate => self.duplicate,
        }
    }

    pub fn rate(&self) -> f64 {
        1.0 - self.none
    }

    pub fn validate(&self) -> Result<(), FaultModelError> {
        let parts = [
            self.none,
            self.wrong_color,
            self.wrong_shape,
            self.relation_violation,
            self.omission,
            self.duplicate,
        ];
        let sum: f64 = parts.iter().sum();
        if parts.iter().all(|p| (0.0..=1.0).contains(p)) && (sum - 1.0).abs() < 1e-9 {
            Ok(())
        } else {
            Err(FaultModelError::NotADistribution(sum))
        }
    }

    /// Draws the fault for one op. With probability `none` the op is clean;
    /// otherwise a kind is chosen among `applicable` in proportion to its
    /// weight, so every op with an applicable kind faults with probability
    /// `1 - none`.
    pub fn draw(&self, rng: &mut rng::Rng, applicable: &[FaultKind]) -> Option<FaultKind> {
        let u: f64 = rng.gen();
        if u < self.none || applicable.is_empty() {
            return None;
        }
        let total: f64 = applicable.iter().map(|k| self.weight(*k)).sum();
        if total <= 0.0 {
            return None;
        }
        let mut x = rng.gen::<f64>() * total;
        for k in applicable {
            x -= self.weight(*k);
            if x < 0.0 {
                return Some(*k);
            }
        }
        applicable.last().copied()
    }
}

/// Per-op fault decisions for one sketch call.
pub enum FaultSource<'a> {
    /// No faults.
    Clean,
    /// Draws from the model; op `i` of the step uses the stream keyed by
    /// `first_ordinal + i`.
    Model {
        model: &'a FaultModel,
        seed: u64,
        first_ordinal: u64,
    },
    /// One forced decision per op (used by tests and the plan-fault path).
    Forced(&'a [Option<FaultKind>]),
    /// Forced decisions where given, model draws elsewhere.
    Mixed {
        model: &'a FaultModel,
        seed: u64,
        first_ordinal: u64,
        forced: &'a [Option<FaultKind>],
    },
}

pub fn fault_rng(seed: u64, ordinal: u64) -> rng::Rng {
    rng::rng_for(seed, &[stream::SKETCH_FAULT, ordinal])
}

impl FaultSource<'_> {
    fn decide(&self, op: usize, applicable: &[FaultKind]) -> (Option<FaultKind>, rng::Rng) {
        match self {
            FaultSource::Clean => (None, fault_rng(0, op as u64)),
            FaultSource::Model {
                model,
                seed,
                first_ordinal,
            } => {
                let mut r = fault_rng(*seed, first_ordinal + op as u64);
                let k = model.draw(&mut r, applicable);
                (k, r)
            }
            FaultSource::Forced(v) => {
                let k = v
                    .get(op)
                    .copied()
                    .flatten()
                    .filter(|k| applicable.contains(k));
                (k, fault_rng(1, op as u64))
            }
            FaultSource::Mixed {
                model,
                seed,
                first_ordinal,
                forced,
            } => {
                let mut r = fault_rng(*seed, first_ordinal + op as u64);
                let drawn = model.draw(&mut r, applicable);
                match forced.get(op).copied().flatten() {
                    Some(k) if applicable.contains(&k) => (Some(k), r),
                    _ => (drawn, r),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchOutcome {
    /// The clean expectation for this step.
    pub expected: WorkingState,
    /// What was actually drawn.
    pub canvas: Canvas,
    /// Faults realized in this step, with ordinals relative to the step.
    pub faults: Vec<(usize, FaultKind, ObjKey)>,
}

/// Draws one step on top of `canvas`, whose belief is `prior`.
///
/// Non-additive ops act first in op order, then objects are drawn, then
/// relation faults displace a freshly drawn endpoint to a cell that breaks
/// the relation. Faults replace the clean drawing of their op only.
pub fn sketch_step(
    prior: &WorkingState,
    canvas: &Canvas,
    ops: &[EditOp],
    source: &FaultSource<'_>,
) -> Result<SketchOutcome, MicroError> {
    let blocked = foreign_cells(prior, canvas);
    let (expected, trace) = execute_traced(prior, ops, &blocked)?;
    let mut out = canvas.clone();
    let mut faults = Vec::new();
    let expected_cells: BTreeSet<Cell> = expected.placement.values().copied().collect();

    for (i, op) in ops.iter().enumerate() {
        match (op, trace[i]) {
            (EditOp::ModifyAttribute { target, color }, Trace::Modify(cell)) => {
                let third: Vec<Color> = Color::ALL
                    .into_iter()
                    .filter(|c| *c != *color && *c != target.color)
                    .filter(|c| !expected.graph.contains(&target.with_color(*c)))
                    .collect();
                let applicable: &[FaultKind] = if third.is_empty() {
                    &[FaultKind::Omission]
                } else {
                    &[FaultKind::WrongColor, FaultKind::Omission]
                };
                let (fault, mut r) = source.decide(i, applicable);
                match fault {
                    Some(FaultKind::Omission) => {}
                    Some(FaultKind::WrongColor) => {
                        let c = *third.choose(&mut r).expect("non-empty");
                        out.insert(cell, Glyph { shape: target.shape, color: c });
                    }
                    _ => {
                        out.insert(cell, Glyph { shape: target.shape, color: *color });
                    }
                }
                if let Some(k) = fault {
                    faults.push((i, k, *target));
                }
            }
            (EditOp::RemoveObject(k), Trace::Remove(cell)) => {
                let (fault, _) = source.decide(i, &[FaultKind::Omission]);
                if fault.is_none() {
                    out.remove(&cell);
                } else {
                    faults.push((i, FaultKind::Omission, *k));
                }
            }
            (EditOp::SwapPositions(a, _), Trace::Swap(ca, cb)) => {
                let (fault, _) = source.decide(i, &[FaultKind::Omission]);
                if fault.is_none() {
                    let ga = out.remove(&ca);
                    let gb = out.remove(&cb);
                    if let Some(g) = ga {
                        out.insert(cb, g);
                    }
                    if let Some(g) = gb {
                        out.insert(ca, g);
                    }
                } else {
                    faults.push((i, FaultKind::Omission, *a));
                }
            }
            (EditOp::MoveObject { target, .. }, Trace::Move { from, to }) => {
                let applicable: &[FaultKind] = if from == to { &[] } else { &[FaultKind::Omission] };
                let (fault, _) = source.decide(i, applicable);
                if fault.is_none() {
                    if let Some(g) = out.remove(&from) {
                        out.insert(to, g);
                    }
                } else {
                    faults.push((i, FaultKind::Omission, *target));
                }
            }
            _ => {}
        }
    }

    let free_cell = |out: &Canvas| {
        Cell::all().find(|c| !out.contains_key(c) && !expected_cells.contains(c) && !blocked.contains(c))
    };
    let mut clean_adds: BTreeSet<ObjKey> = BTreeSet::new();
    for (i, op) in ops.iter().enumerate() {
        let (EditOp::AddObject(k), Trace::Add(cell)) = (op, trace[i]) else {
            continue;
        };
        let colors: Vec<Color> = Color::ALL
            .into_iter()
            .filter(|c| *c != k.color && !expected.graph.contains(&k.with_color(*c)))
            .collect();
        let shapes: Vec<Shape> = Shape::ALL
            .into_iter()
            .filter(|s| *s != k.shape && !expected.graph.contains(&ObjKey::new(*s, k.color, k.index)))
            .collect();
        let mut applicable = Vec::with_capacity(4);
        if !colors.is_empty() {
            applicable.push(FaultKind::WrongColor);
        }
        if !shapes.is_empty() {
            applicable.push(FaultKind::WrongShape);
        }
        applicable.push(FaultKind::Omission);
        if free_cell(&out).is_some() {
            applicable.push(FaultKind::Duplicate);
        }
        let (fault, mut r) = source.decide(i, &applicable);
        let glyph = Glyph::of(k);
        match fault {
            None => {
                out.insert(cell, glyph);
                clean_adds.insert(*k);
            }
            Some(FaultKind::WrongColor) => {
                let color = *colors.choose(&mut r).expect("non-empty");
                out.insert(cell, Glyph { color, ..glyph });
            }
            Some(FaultKind::WrongShape) => {
                let shape = *shapes.choose(&mut r).expect("non-empty");
                out.insert(cell, Glyph { shape, ..glyph });
            }
            Some(FaultKind::Duplicate) => {
                out.insert(cell, glyph);
                let extra = free_cell(&out).expect("checked above");
                out.insert(extra, glyph);
            }
            Some(_) => {}
        }
        if let Some(f) = fault {
            faults.push((i, f, *k));
        }
    }

    for (i, op) in ops.iter().enumerate() {
        let EditOp::AddRelation(e) = op else { continue };
        let mover = [e.subject, e.object].into_iter().find(|k| clean_adds.contains(k));
        let displaced = mover.and_then(|m| {
            let home = expected.placement[&m];
            let other = if m == e.subject { e.object } else { e.subject };
            let other_cell = *expected.placement.get(&other)?;
            let mut trial = out.clone();
            trial.remove(&home);
            Cell::all()
                .filter(|c| {
                    !trial.contains_key(c) && !expected_cells.contains(c) && !blocked.contains(c)
                })
                .find(|c| {
                    let holds = if m == e.subject {
                        e.relation.holds(c.rc(), other_cell.rc())
                    } else {
                        e.relation.holds(other_cell.rc(), c.rc())
                    };
                    if holds {
                        return false;
                    }
                    let mut t = trial.clone();
                    t.insert(*c, Glyph::of(&m));
                    bind(&t, &expected.graph, None).is_none()
                })
                .map(|c| (m, home, c))
        });
        let applicable: &[FaultKind] = if displaced.is_some() {
            &[FaultKind::RelationViolation]
        } else {
            &[]
        };
        let (fault, _) = source.decide(i, applicable);
        if let (Some(_), Some((m, home, to))) = (fault, displaced) {
            let g = out.remove(&home).expect("drawn above");
            out.insert(to, g);
            clean_adds.remove(&m);
            faults.push((i, FaultKind::RelationViolation, m));
        }
    }

    Ok(SketchOutcome {
        expected,
        canvas: out,
        faults,
    })
}
