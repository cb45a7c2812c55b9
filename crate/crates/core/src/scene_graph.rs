//! Scene-graph data model, prompt DSL, validation and graph diffing.
//!
//! Grammar (whitespace separated; `;` and `#` may also be attached):
//!
//! ```text
//! scene    := clause { ";" clause }
//! clause   := objref [ relation objref ]
//! objref   := [ count ] [ color ] shape [ "#" index ]
//! count    := "1" | "2" | "3" | "4"
//! relation := "above" | "below" | "left-of" | "right-of"
//! index    := nonzero digit
//! ```
//!
//! A bare reference means index 1. Counts expand to indices `1..=count` and
//! are only accepted in standalone clauses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::planner::{apply_op, EditOp};

pub const MAX_OBJECTS: usize = 8;
pub const MAX_COUNT: u32 = 4;
pub const MAX_INDEX: u8 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Star,
        Shape::Cross,
        Shape::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
        }
    }

    /// Raster code, 1..=6 (0 is reserved for an empty cell).
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Shape> {
        Shape::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Color> {
        Color::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }

    pub fn from_name(name: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    Vertical,
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Above,
        Relation::Below,
        Relation::LeftOf,
        Relation::RightOf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
        }
    }

    pub fn from_name(name: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.name() == name)
    }

    pub fn axis(self) -> Axis {
        match self {
            Relation::Above | Relation::Below => Axis::Vertical,
            Relation::LeftOf | Relation::RightOf => Axis::Horizontal,
        }
    }

    /// `r(a, b)` holds iff `r.inverse()(b, a)` holds.
    pub fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
        }
    }

    /// Whether the relation is stated in its normalized direction
    /// (above / left-of).
    pub fn is_forward(self) -> bool {
        matches!(self, Relation::Above | Relation::LeftOf)
    }

    /// Coordinate semantics on `(row, col)` cells; strict single-axis.
    pub fn holds(self, subject: (u8, u8), object: (u8, u8)) -> bool {
        match self {
            Relation::Above => subject.0 < object.0,
            Relation::Below => subject.0 > object.0,
            Relation::LeftOf => subject.1 < object.1,
            Relation::RightOf => subject.1 > object.1,
        }
    }
}

/// Unique object identity: (shape, color, index). Ordered lexicographically
/// in that field order, which is the canonical order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjKey {
    pub shape: Shape,
    pub color: Color,
    pub index: u8,
}

impl ObjKey {
    pub fn new(shape: Shape, color: Color, index: u8) -> Self {
        ObjKey {
            shape,
            color,
            index,
        }
    }

    pub fn with_color(self, color: Color) -> Self {
        ObjKey { color, ..self }
    }

    /// Reference text with the index always shown unless it is 1.
    pub fn short_ref(&self) -> String {
        if self.index == 1 {
            format!("{} {}", self.color.name(), self.shape.name())
        } else {
            format!("{} {}#{}", self.color.name(), self.shape.name(), self.index)
        }
    }
}

impl fmt::Display for ObjKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}#{}", self.color.name(), self.shape.name(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationEdge {
    pub subject: ObjKey,
    pub relation: Relation,
    pub object: ObjKey,
}

impl RelationEdge {
    pub fn new(subject: ObjKey, relation: Relation, object: ObjKey) -> Self {
        RelationEdge {
            subject,
            relation,
            object,
        }
    }

    /// The constraint this edge expresses, as `(first, second, axis)` with
    /// `first` above / left of `second`.
    pub fn normalized(&self) -> (ObjKey, ObjKey, Axis) {
        if self.relation.is_forward() {
            (self.subject, self.object, self.relation.axis())
        } else {
            (self.object, self.subject, self.relation.axis())
        }
    }

    pub fn touches(&self, key: &ObjKey) -> bool {
        self.subject == *key || self.object == *key
    }

    /// Same unordered endpoint pair and same axis.
    pub fn same_pair_axis(&self, other: &RelationEdge) -> bool {
        let (a, b, x) = self.normalized();
        let (c, d, y) = other.normalized();
        x == y && ((a == c && b == d) || (a == d && b == c))
    }

    /// The same edge stated from `key`'s point of view.
    pub fn oriented_from(&self, key: &ObjKey) -> Option<RelationEdge> {
        if self.subject == *key {
            Some(*self)
        } else if self.object == *key {
            Some(RelationEdge::new(
                self.object,
                self.relation.inverse(),
                self.subject,
            ))
        } else {
            None
        }
    }

    fn rename(&self, from: &ObjKey, to: &ObjKey) -> RelationEdge {
        let sub = |k: ObjKey| if k == *from { *to } else { k };
        RelationEdge::new(sub(self.subject), self.relation, sub(self.object))
    }
}

impl fmt::Display for RelationEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {})", self.relation.name(), self.subject, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: BTreeSet<ObjKey>,
    pub relations: BTreeSet<RelationEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    DanglingEndpoint(RelationEdge),
    SelfRelation(RelationEdge),
    AxisCycle(Axis),
    Empty,
    TooManyObjects(usize),
    IndexOutOfRange(ObjKey),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DanglingEndpoint(e) => write!(f, "dangling endpoint in {e}"),
            Violation::SelfRelation(e) => write!(f, "self relation {e}"),
            Violation::AxisCycle(a) => write!(f, "axis cycle on {a:?} axis"),
            Violation::Empty => write!(f, "scene has no objects"),
            Violation::TooManyObjects(n) => {
                write!(f, "{n} objects exceeds the limit of {MAX_OBJECTS}")
            }
            Violation::IndexOutOfRange(k) => write!(f, "index of {k} is not in 1..=9"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SceneError {
    #[error("syntax error at byte {pos}: expected {expected}, found {found}")]
    Syntax {
        pos: usize,
        expected: String,
        found: String,
    },
    #[error("count {count} at byte {pos} is outside 1..=4")]
    CountOutOfRange { pos: usize, count: u32 },
    #[error("count at byte {pos} is only allowed in a standalone clause")]
    CountInRelation { pos: usize },
    #[error("color required for object reference at byte {pos}")]
    MissingColor { pos: usize },
    #[error("relation endpoints both resolve to {0}; disambiguate with #index")]
    Collision(ObjKey),
    #[error("invalid scene: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(
        objects: impl IntoIterator<Item = ObjKey>,
        relations: impl IntoIterator<Item = RelationEdge>,
    ) -> Self {
        SceneGraph {
            objects: objects.into_iter().collect(),
            relations: relations.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Objects plus relations.
    pub fn element_count(&self) -> usize {
        self.objects.len() + self.relations.len()
    }

    pub fn contains(&self, key: &ObjKey) -> bool {
        self.objects.contains(key)
    }

    pub fn incident<'a>(&'a self, key: &'a ObjKey) -> impl Iterator<Item = &'a RelationEdge> + 'a {
        self.relations.iter().filter(move |e| e.touches(key))
    }

    /// Whether `self` is a subgraph of `other` (objects and edges as stated).
    pub fn is_subgraph_of(&self, other: &SceneGraph) -> bool {
        self.objects.is_subset(&other.objects) && self.relations.is_subset(&other.relations)
    }

    /// Closed subgraph on `keys`: the given objects plus every relation whose
    /// endpoints are both among them.
    pub fn restricted_to(&self, keys: &BTreeSet<ObjKey>) -> SceneGraph {
        SceneGraph {
            objects: self.objects.intersection(keys).copied().collect(),
            relations: self
                .relations
                .iter()
                .filter(|e| keys.contains(&e.subject) && keys.contains(&e.object))
                .copied()
                .collect(),
        }
    }

    /// Normalized constraint facts, independent of which direction an edge
    /// was stated in.
    pub fn facts(&self) -> BTreeSet<(ObjKey, ObjKey, Axis)> {
        self.relations.iter().map(|e| e.normalized()).collect()
    }

    pub(crate) fn remove_object(&mut self, key: &ObjKey) {
        self.objects.remove(key);
        self.relations.retain(|e| !e.touches(key));
    }

    pub(crate) fn rename_object(&mut self, from: &ObjKey, to: &ObjKey) {
        if self.objects.remove(from) {
            self.objects.insert(*to);
        }
        self.relations = self.relations.iter().map(|e| e.rename(from, to)).collect();
    }

    /// All violated invariants; empty iff `self` is a valid prompt graph.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.objects.is_empty() {
            out.push(Violation::Empty);
        }
        out.extend(self.structural_violations());
        out
    }

    /// Violations other than emptiness. Working states during planning
    /// and editing may legitimately be empty.
    pub fn structural_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.objects.len() > MAX_OBJECTS {
            out.push(Violation::TooManyObjects(self.objects.len()));
        }
        for k in &self.objects {
            if !(1..=MAX_INDEX).contains(&k.index) {
                out.push(Violation::IndexOutOfRange(*k));
            }
        }
        for e in &self.relations {
            if e.subject == e.object {
                out.push(Violation::SelfRelation(*e));
            } else if !self.contains(&e.subject) || !self.contains(&e.object) {
                out.push(Violation::DanglingEndpoint(*e));
            }
        }
        for axis in [Axis::Vertical, Axis::Horizontal] {
            if self.axis_has_cycle(axis) {
                out.push(Violation::AxisCycle(axis));
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    fn axis_has_cycle(&self, axis: Axis) -> bool {
        let mut adj: BTreeMap<ObjKey, Vec<ObjKey>> = BTreeMap::new();
        for e in &self.relations {
            let (a, b, x) = e.normalized();
            if x == axis && a != b {
                adj.entry(a).or_default().push(b);
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<ObjKey, u8> = BTreeMap::new();
        fn visit(
            n: ObjKey,
            adj: &BTreeMap<ObjKey, Vec<ObjKey>>,
            state: &mut BTreeMap<ObjKey, u8>,
        ) -> bool {
            match state.get(&n) {
                Some(1) => return true,
                Some(2) => return false,
                _ => {}
            }
            state.insert(n, 1);
            for &m in adj.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
                if visit(m, adj, state) {
                    return true;
                }
            }
            state.insert(n, 2);
            false
        }
        let nodes: Vec<ObjKey> = adj.keys().copied().collect();
        nodes.into_iter().any(|n| visit(n, &adj, &mut state))
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_scene(self))
    }
}

// ---------------------------------------------------------------------------
// Lexing and parsing

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum TokKind {
    Word(String),
    Number(u32),
    Semi,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Tok {
    pub kind: TokKind,
    pub pos: usize,
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Word(w) => write!(f, "'{w}'"),
            TokKind::Number(n) => write!(f, "'{n}'"),
            TokKind::Semi => f.write_str("';'"),
            TokKind::Hash => f.write_str("'#'"),
        }
    }
}

pub(crate) fn lex(text: &str) -> Result<Vec<Tok>, SceneError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b';' {
            out.push(Tok {
                kind: TokKind::Semi,
                pos: i,
            });
            i += 1;
        } else if c == b'#' {
            out.push(Tok {
                kind: TokKind::Hash,
                pos: i,
            });
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let n = text[start..i].parse::<u32>().unwrap_or(u32::MAX);
            out.push(Tok {
                kind: TokKind::Number(n),
                pos: start,
            });
        } else if c.is_ascii_lowercase() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_lowercase() || bytes[i] == b'-') {
                i += 1;
            }
            out.push(Tok {
                kind: TokKind::Word(text[start..i].to_string()),
                pos: start,
            });
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(SceneError::Syntax {
                pos: i,
                expected: "a word, digit, ';' or '#'".into(),
                found: format!("'{ch}'"),
            });
        }
    }
    Ok(out)
}

/// An object reference as written; `color` is optional only in step
/// instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjRef {
    pub count: Option<u32>,
    pub color: Option<Color>,
    pub shape: Shape,
    pub index: Option<u8>,
    pub pos: usize,
}

impl ObjRef {
    pub fn key(&self) -> Option<ObjKey> {
        Some(ObjKey::new(self.shape, self.color?, self.index.unwrap_or(1)))
    }

    /// Whether `key` is what this reference denotes (a missing color
    /// matches any color).
    pub fn matches(&self, key: &ObjKey) -> bool {
        self.shape == key.shape
            && self.index.unwrap_or(1) == key.index
            && self.color.is_none_or(|c| c == key.color)
    }
}

pub(crate) struct Cursor<'a> {
    toks: &'a [Tok],
    at: usize,
    end_pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(toks: &'a [Tok], text_len: usize) -> Self {
        Cursor {
            toks,
            at: 0,
            end_pos: text_len,
        }
    }

    pub fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.at)
    }

    pub fn peek_word(&self) -> Option<&'a str> {
        match self.peek() {
            Some(Tok {
                kind: TokKind::Word(w),
                ..
            }) => Some(w.as_str()),
            _ => None,
        }
    }

    pub fn pos(&self) -> usize {
        self.peek().map_or(self.end_pos, |t| t.pos)
    }

    pub fn at_end(&self) -> bool {
        self.at >= self.toks.len()
    }

    pub fn bump(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.at);
        self.at += 1;
        t
    }

    pub fn error(&self, expected: &str) -> SceneError {
        SceneError::Syntax {
            pos: self.pos(),
            expected: expected.to_string(),
            found: self
                .peek()
                .map_or_else(|| "end of input".to_string(), |t| t.kind.to_string()),
        }
    }

    pub fn eat_semi(&mut self) -> bool {
        if matches!(self.peek(), Some(Tok { kind: TokKind::Semi, .. })) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    pub fn expect_word(&mut self, word: &str) -> Result<(), SceneError> {
        if self.peek_word() == Some(word) {
            self.at += 1;
            Ok(())
        } else {
            Err(self.error(&format!("'{word}'")))
        }
    }

    pub fn relation(&mut self) -> Option<Relation> {
        let r = Relation::from_name(self.peek_word()?)?;
        self.at += 1;
        Some(r)
    }

    pub fn expect_relation(&mut self) -> Result<Relation, SceneError> {
        self.relation()
            .ok_or_else(|| self.error("a relation (above, below, left-of, right-of)"))
    }

    pub fn color(&mut self) -> Option<Color> {
        let c = Color::from_name(self.peek_word()?)?;
        self.at += 1;
        Some(c)
    }

    pub fn expect_color(&mut self) -> Result<Color, SceneError> {
        self.color().ok_or_else(|| self.error("a color"))
    }

    pub fn objref(&mut self, allow_count: bool, require_color: bool) -> Result<ObjRef, SceneError> {
        let pos = self.pos();
        let mut count = None;
        if let Some(Tok {
            kind: TokKind::Number(n),
            pos: npos,
        }) = self.peek()
        {
            if !allow_count {
                return Err(self.error("a color or shape"));
            }
            if !(1..=MAX_COUNT).contains(n) {
                return Err(SceneError::CountOutOfRange {
                    pos: *npos,
                    count: *n,
                });
            }
            count = Some(*n);
            self.at += 1;
        }
        let color_pos = self.pos();
        let color = self.color();
        let shape = match self.peek_word().and_then(Shape::from_name) {
            Some(s) => {
                self.at += 1;
                s
            }
            None => {
                return Err(self.error(if color.is_some() {
                    "a shape"
                } else {
                    "a color or shape"
                }))
            }
        };
        if require_color && color.is_none() {
            return Err(SceneError::MissingColor { pos: color_pos });
        }
        let mut index = None;
        if matches!(self.peek(), Some(Tok { kind: TokKind::Hash, .. })) {
            self.at += 1;
            match self.peek() {
                Some(Tok {
                    kind: TokKind::Number(n),
                    ..
                }) if (1..=9).contains(n) => {
                    index = Some(*n as u8);
                    self.at += 1;
                }
                _ => return Err(self.error("a nonzero digit index")),
            }
            if count.is_some() {
                return Err(SceneError::Syntax {
                    pos,
                    expected: "either a count or an index".into(),
                    found: "both".into(),
                });
            }
        }
        Ok(ObjRef {
            count,
            color,
            shape,
            index,
            pos,
        })
    }
}

/// Parses a full prompt. Colors are mandatory.
pub fn parse_scene(text: &str) -> Result<SceneGraph, SceneError> {
    let toks = lex(text)?;
    let mut cur = Cursor::new(&toks, text.len());
    let mut g = SceneGraph::new();
    loop {
        let first = cur.objref(true, true)?;
        if let Some(rel) = cur.relation() {
            if first.count.is_some() {
                return Err(SceneError::CountInRelation { pos: first.pos });
            }
            let second = cur.objref(true, true)?;
            if second.count.is_some() {
                return Err(SceneError::CountInRelation { pos: second.pos });
            }
            let (a, b) = (first.key().expect("color"), second.key().expect("color"));
            if a == b {
                return Err(SceneError::Collision(a));
            }
            g.objects.insert(a);
            g.objects.insert(b);
            g.relations.insert(RelationEdge::new(a, rel, b));
        } else {
            let base = first.key().expect("color");
            match first.count {
                Some(n) => {
                    for i in 1..=n as u8 {
                        g.objects.insert(ObjKey { index: i, ..base });
                    }
                }
                None => {
                    g.objects.insert(base);
                }
            }
        }
        if cur.at_end() {
            break;
        }
        if !cur.eat_semi() {
            return Err(cur.error("';' or a relation"));
        }
    }
    let violations = g.validate();
    if violations.is_empty() {
        Ok(g)
    } else {
        Err(SceneError::Invalid(violations))
    }
}

/// Canonical text: standalone clauses for objects without relations (in
/// canonical order, re-collapsed into counts when a color/shape group is
/// exactly `1..=n`), then one clause per relation edge in sorted order.
/// `#k` is printed whenever a group is not exactly `{1}`.
pub fn print_scene(g: &SceneGraph) -> String {
    let mut groups: BTreeMap<(Shape, Color), Vec<u8>> = BTreeMap::new();
    for k in &g.objects {
        groups.entry((k.shape, k.color)).or_default().push(k.index);
    }
    let in_relation: BTreeSet<ObjKey> = g
        .relations
        .iter()
        .flat_map(|e| [e.subject, e.object])
        .collect();
    let needs_index = |k: &ObjKey| groups.get(&(k.shape, k.color)).is_some_and(|v| v != &[1]);
    let reference = |k: &ObjKey| {
        if needs_index(k) {
            format!("{} {}#{}", k.color.name(), k.shape.name(), k.index)
        } else {
            format!("{} {}", k.color.name(), k.shape.name())
        }
    };

    let mut clauses = Vec::new();
    for (&(shape, color), indices) in &groups {
        let keys: Vec<ObjKey> = indices
            .iter()
            .map(|&i| ObjKey::new(shape, color, i))
            .collect();
        let isolated: Vec<&ObjKey> = keys.iter().filter(|k| !in_relation.contains(k)).collect();
        if isolated.is_empty() {
            continue;
        }
        let n = keys.len();
        let contiguous = indices.iter().enumerate().all(|(i, &x)| x as usize == i + 1);
        if n >= 2 && n <= MAX_COUNT as usize && contiguous && isolated.len() == n {
            clauses.push(format!("{} {} {}", n, color.name(), shape.name()));
        } else {
            clauses.extend(isolated.into_iter().map(|k| reference(k)));
        }
    }
    for e in &g.relations {
        clauses.push(format!(
            "{} {} {}",
            reference(&e.subject),
            e.relation.name(),
            reference(&e.object)
        ));
    }
    clauses.join("; ")
}

// ---------------------------------------------------------------------------
// Diff

/// Ordered edit operations turning one graph into another.
pub type EditScript = Vec<EditOp>;

/// Computes an edit script with `apply(observed, script) == expected`.
///
/// Objects are matched by exact key, then by shape and index (emitting a
/// color change), and the rest become removals and additions. Relation
/// edges are then reconciled per endpoint pair and axis: a wrong edge on a
/// pair that `expected` constrains on the same axis is rewritten with
/// `MoveObject`; edges with no counterpart are cleared by recreating their
/// subject; missing edges are added. Relation ops are ordered so that no
/// intermediate graph has an axis cycle.
pub fn diff(expected: &SceneGraph, observed: &SceneGraph) -> EditScript {
    let mut script = Vec::new();
    let mut work = observed.clone();

    let mut unmatched_obs: Vec<ObjKey> = observed
        .objects
        .difference(&expected.objects)
        .copied()
        .collect();
    let unmatched_exp: Vec<ObjKey> = expected
        .objects
        .difference(&observed.objects)
        .copied()
        .collect();

    let mut modifies = Vec::new();
    let mut adds = Vec::new();
    for e in unmatched_exp {
        if let Some(pos) = unmatched_obs
            .iter()
            .position(|o| o.shape == e.shape && o.index == e.index)
        {
            let o = unmatched_obs.remove(pos);
            modifies.push(EditOp::ModifyAttribute {
                target: o,
                color: e.color,
            });
        } else {
            adds.push(EditOp::AddObject(e));
        }
    }
    let removes: Vec<EditOp> = unmatched_obs.into_iter().map(EditOp::RemoveObject).collect();
    for op in removes.into_iter().chain(modifies).chain(adds) {
        work = apply_op(&work, &op).expect("object phase of diff is always applicable");
        script.push(op);
    }

    // Relation phase. Objects now coincide.
    let recreate: BTreeSet<ObjKey> = work
        .relations
        .iter()
        .filter(|w| {
            !expected.relations.contains(w)
                && !expected.relations.iter().any(|e| e.same_pair_axis(w))
        })
        .map(|w| w.subject)
        .collect();
    for k in recreate {
        recreate_object(&mut work, &mut script, k);
    }

    loop {
        let pending = pending_relation_ops(expected, &work);
        if pending.is_empty() {
            break;
        }
        let applied = pending.iter().find_map(|op| {
            apply_op(&work, op)
                .ok()
                .filter(|g| g.structural_violations().is_empty())
                .map(|g| (op.clone(), g))
        });
        match applied {
            Some((op, g)) => {
                work = g;
                script.push(op);
            }
            None => {
                // Every pending rewrite closes a cycle through a wrong edge;
                // clear the first offending subject and retry.
                let victim = match &pending[0] {
                    EditOp::MoveObject { target, .. } => *target,
                    EditOp::AddRelation(e) => work
                        .relations
                        .iter()
                        .find(|w| !expected.relations.contains(w))
                        .map_or(e.subject, |w| w.subject),
                    _ => unreachable!("relation phase only emits relation ops"),
                };
                recreate_object(&mut work, &mut script, victim);
            }
        }
    }
    debug_assert_eq!(&work, expected);
    script
}

fn recreate_object(work: &mut SceneGraph, script: &mut EditScript, key: ObjKey) {
    for op in [EditOp::RemoveObject(key), EditOp::AddObject(key)] {
        *work = apply_op(work, &op).expect("recreating an existing object");
        script.push(op);
    }
}

fn pending_relation_ops(expected: &SceneGraph, work: &SceneGraph) -> Vec<EditOp> {
    let mut ops = Vec::new();
    let mut seen_pairs: Vec<RelationEdge> = Vec::new();
    for e in &expected.relations {
        if work.relations.contains(e) {
            continue;
        }
        let wrong_on_pair: Vec<&RelationEdge> = work
            .relations
            .iter()
            .filter(|w| w.same_pair_axis(e) && !expected.relations.contains(w))
            .collect();
        if !wrong_on_pair.is_empty() && !seen_pairs.iter().any(|p| p.same_pair_axis(e)) {
            seen_pairs.push(*e);
            ops.push(EditOp::MoveObject {
                target: e.subject,
                relation: e.relation,
                reference: e.object,
            });
        } else if wrong_on_pair.is_empty() {
            ops.push(EditOp::AddRelation(*e));
        }
    }
    ops
}

/// Samples a valid scene: `objects` objects with uniform appearance (indices
/// assigned per appearance) and up to `relations` edges, each on a fresh
/// pair/axis and rejected if it would close an axis cycle.
pub fn random_scene<R: rand::Rng + ?Sized>(rng: &mut R, objects: usize, relations: usize) -> SceneGraph {
    let objects = objects.clamp(1, MAX_OBJECTS);
    let mut g = SceneGraph::new();
    while g.objects.len() < objects {
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let index = g
            .objects
            .iter()
            .filter(|k| k.shape == shape && k.color == color)
            .count() as u8
            + 1;
        g.objects.insert(ObjKey::new(shape, color, index));
    }
    let keys: Vec<ObjKey> = g.objects.iter().copied().collect();
    if keys.len() < 2 {
        return g;
    }
    let mut tries = 0;
    while g.relations.len() < relations && tries < 8 * relations.max(1) {
        tries += 1;
        let a = keys[rng.gen_range(0..keys.len())];
        let b = keys[rng.gen_range(0..keys.len())];
        if a == b {
            continue;
        }
        let e = RelationEdge::new(a, Relation::ALL[rng.gen_range(0..4)], b);
        if g.relations.iter().any(|w| w.same_pair_axis(&e)) {
            continue;
        }
        g.relations.insert(e);
        if !g.structural_violations().is_empty() {
            g.relations.remove(&e);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::apply_script;

    fn k(shape: Shape, color: Color, index: u8) -> ObjKey {
        ObjKey::new(shape, color, index)
    }

    #[test]
    fn parses_minimal_relation_clause() {
        let g = parse_scene("red circle above blue square").unwrap();
        let rc = k(Shape::Circle, Color::Red, 1);
        let bs = k(Shape::Square, Color::Blue, 1);
        assert_eq!(g.objects, [rc, bs].into_iter().collect());
        assert_eq!(
            g.relations,
            [RelationEdge::new(rc, Relation::Above, bs)].into_iter().collect()
        );
    }

    #[test]
    fn count_expands_to_indexed_objects() {
        let g = parse_scene("3 yellow triangle").unwrap();
        assert_eq!(g.objects.len(), 3);
        assert!(g.relations.is_empty());
        for i in 1..=3 {
            assert!(g.contains(&k(Shape::Triangle, Color::Yellow, i)));
        }
        assert_eq!(print_scene(&g), "3 yellow triangle");
    }

    #[test]
    fn identical_unindexed_refs_collide() {
        assert_eq!(
            parse_scene("red circle above red circle"),
            Err(SceneError::Collision(k(Shape::Circle, Color::Red, 1)))
        );
        assert!(parse_scene("red circle#1 above red circle#2").is_ok());
    }

    #[test]
    fn axis_cycle_is_rejected() {
        let err = parse_scene("green star left-of green star#2; green star right-of green star#2")
            .unwrap_err();
        assert_eq!(err, SceneError::Invalid(vec![Violation::AxisCycle(Axis::Horizontal)]));
    }

    #[test]
    fn syntax_errors_report_position() {
        match parse_scene("red circle beside blue square") {
            Err(SceneError::Syntax { pos, .. }) => assert_eq!(pos, 11),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_scene("5 red circle"),
            Err(SceneError::CountOutOfRange { count: 5, .. })
        ));
        assert!(matches!(
            parse_scene("circle"),
            Err(SceneError::MissingColor { .. })
        ));
        assert!(matches!(
            parse_scene("2 red circle above blue square"),
            Err(SceneError::CountInRelation { .. })
        ));
        assert!(matches!(parse_scene("red circle#0"), Err(SceneError::Syntax { .. })));
        assert!(matches!(parse_scene(""), Err(SceneError::Syntax { .. })));
    }

    #[test]
    fn too_many_objects_is_a_validation_error() {
        let err = parse_scene("4 red circle; 4 blue circle; green star").unwrap_err();
        assert_eq!(err, SceneError::Invalid(vec![Violation::TooManyObjects(9)]));
    }

    #[test]
    fn print_is_canonical_and_round_trips() {
        let g = parse_scene("red circle above blue square").unwrap();
        assert_eq!(print_scene(&g), "red circle above blue square");
        let g2 = parse_scene("blue square; red circle above blue square; purple star").unwrap();
        let text = print_scene(&g2);
        assert_eq!(text, "purple star; red circle above blue square");
        assert_eq!(parse_scene(&text).unwrap(), g2);

        let mixed = parse_scene("red circle#2 left-of blue square; red circle; red circle#4").unwrap();
        let text = print_scene(&mixed);
        assert_eq!(text, "red circle#1; red circle#4; red circle#2 left-of blue square");
        assert_eq!(parse_scene(&text).unwrap(), mixed);
    }

    #[test]
    fn validate_reports_each_invariant() {
        let a = k(Shape::Circle, Color::Red, 1);
        let b = k(Shape::Square, Color::Blue, 1);
        assert!(SceneGraph::from_parts([a, b], []).validate().is_empty());

        let dangling = SceneGraph::from_parts([a], [RelationEdge::new(a, Relation::Above, b)]);
        assert_eq!(
            dangling.validate(),
            vec![Violation::DanglingEndpoint(RelationEdge::new(a, Relation::Above, b))]
        );

        let two_cycle = SceneGraph::from_parts(
            [a, b],
            [
                RelationEdge::new(a, Relation::Above, b),
                RelationEdge::new(b, Relation::Above, a),
            ],
        );
        assert_eq!(two_cycle.validate(), vec![Violation::AxisCycle(Axis::Vertical)]);

        let selfrel = SceneGraph::from_parts([a], [RelationEdge::new(a, Relation::LeftOf, a)]);
        assert_eq!(
            selfrel.validate(),
            vec![Violation::SelfRelation(RelationEdge::new(a, Relation::LeftOf, a))]
        );
        assert_eq!(SceneGraph::new().validate(), vec![Violation::Empty]);
        let bad_index = SceneGraph::from_parts([k(Shape::Star, Color::Red, 0)], []);
        assert_eq!(
            bad_index.validate(),
            vec![Violation::IndexOutOfRange(k(Shape::Star, Color::Red, 0))]
        );
    }

    #[test]
    fn above_and_inverse_below_are_not_a_cycle() {
        let a = k(Shape::Circle, Color::Red, 1);
        let b = k(Shape::Square, Color::Blue, 1);
        let g = SceneGraph::from_parts(
            [a, b],
            [
                RelationEdge::new(a, Relation::Above, b),
                RelationEdge::new(b, Relation::Below, a),
            ],
        );
        assert!(g.is_valid());
    }

    #[test]
    fn diff_identity_is_empty() {
        let g = parse_scene("red circle above blue square; 2 green star").unwrap();
        assert!(diff(&g, &g).is_empty());
    }

    #[test]
    fn diff_single_color_change() {
        let e = parse_scene("red circle").unwrap();
        let o = parse_scene("blue circle").unwrap();
        assert_eq!(
            diff(&e, &o),
            vec![EditOp::ModifyAttribute {
                target: k(Shape::Circle, Color::Blue, 1),
                color: Color::Red
            }]
        );
    }

    #[test]
    fn diff_all_two_object_relation_mismatches() {
        let a = k(Shape::Circle, Color::Red, 1);
        let b = k(Shape::Square, Color::Blue, 1);
        for re in Relation::ALL {
            for ro in Relation::ALL {
                let e = SceneGraph::from_parts([a, b], [RelationEdge::new(a, re, b)]);
                let o = SceneGraph::from_parts([a, b], [RelationEdge::new(a, ro, b)]);
                let script = diff(&e, &o);
                assert_eq!(apply_script(&o, &script).unwrap(), e, "{re:?} vs {ro:?}");
                if re == ro {
                    assert!(script.is_empty());
                } else if re.axis() == ro.axis() {
                    assert_eq!(
                        script,
                        vec![EditOp::MoveObject {
                            target: a,
                            relation: re,
                            reference: b
                        }]
                    );
                }
            }
        }
    }
}
