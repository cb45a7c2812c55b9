//! Category suites, exact scorers and the process vs. single-pass comparison.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::microworld::{bind, derender, Canvas, Glyph, RasterImage};
use crate::orchestrator::{prepare, run_prepared, single_pass_prepared, RunConfig, RunError};
use crate::rng::{self, stream};
use crate::scene_graph::{parse_scene, print_scene, Color, ObjKey, Relation, RelationEdge, SceneGraph, Shape};

/// Mean reasoning steps per image reported for the full-scale model; shown
/// for context next to the measured refine rounds.
pub const REFERENCE_MEAN_STEPS: f64 = 2.62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    SingleObject,
    TwoObjects,
    Counting,
    Colors,
    Position,
    ColorAttributes,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::SingleObject,
        Category::TwoObjects,
        Category::Counting,
        Category::Colors,
        Category::Position,
        Category::ColorAttributes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::SingleObject => "single-object",
            Category::TwoObjects => "two-objects",
            Category::Counting => "counting",
            Category::Colors => "colors",
            Category::Position => "position",
            Category::ColorAttributes => "color-attributes",
        }
    }

    fn code(self) -> u64 {
        Category::ALL.iter().position(|c| *c == self).unwrap() as u64
    }

    /// Additive op count of the smallest prompt exercising the category.
    pub fn min_ops(self) -> usize {
        match self {
            Category::SingleObject | Category::Colors => 1,
            Category::TwoObjects | Category::Counting | Category::ColorAttributes => 2,
            Category::Position => 3,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitePrompt {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySuite {
    pub category: Category,
    pub seed: u64,
    pub prompts: Vec<SuitePrompt>,
}

fn distinct_shapes(r: &mut rng::Rng, n: usize) -> Vec<Shape> {
    let mut all = Shape::ALL.to_vec();
    all.shuffle(r);
    all.truncate(n);
    all
}

fn pick<T: Copy>(r: &mut rng::Rng, xs: &[T]) -> T {
    xs[r.gen_range(0..xs.len())]
}

/// The category construct for prompt `i`, before any padding.
fn construct(category: Category, r: &mut rng::Rng, i: usize) -> SceneGraph {
    let mut g = SceneGraph::new();
    match category {
        Category::SingleObject | Category::Colors => {
            g.objects.insert(ObjKey::new(pick(r, &Shape::ALL), pick(r, &Color::ALL), 1));
        }
        Category::TwoObjects => {
            for s in distinct_shapes(r, 2) {
                g.objects.insert(ObjKey::new(s, pick(r, &Color::ALL), 1));
            }
        }
        Category::Counting => {
            let (s, c) = (pick(r, &Shape::ALL), pick(r, &Color::ALL));
            for idx in 1..=r.gen_range(2..=4u8) {
                g.objects.insert(ObjKey::new(s, c, idx));
            }
        }
        Category::ColorAttributes => {
            let mut colors = Color::ALL.to_vec();
            colors.shuffle(r);
            for (s, c) in distinct_shapes(r, 2).into_iter().zip(colors) {
                g.objects.insert(ObjKey::new(s, c, 1));
            }
        }
        Category::Position => {
            let shapes = distinct_shapes(r, 2);
            let a = ObjKey::new(shapes[0], pick(r, &Color::ALL), 1);
            let b = ObjKey::new(shapes[1], pick(r, &Color::ALL), 1);
            g.objects.insert(a);
            g.objects.insert(b);
            g.relations.insert(RelationEdge::new(a, Relation::ALL[i % 4], b));
        }
    }
    g
}

/// Adds isolated objects of shapes unused by the construct until the
/// prompt lowers to `ops` additive ops.
fn pad(g: &mut SceneGraph, r: &mut rng::Rng, ops: usize) {
    let used: Vec<Shape> = g.objects.iter().map(|k| k.shape).collect();
    let mut free: Vec<Shape> = Shape::ALL.into_iter().filter(|s| !used.contains(s)).collect();
    free.shuffle(r);
    let mut free = free.into_iter().cycle();
    while g.objects.len() + g.relations.len() < ops {
        let s = free.next().expect("a spare shape");
        let c = pick(r, &Color::ALL);
        let idx = (1..).find(|&i| !g.objects.contains(&ObjKey::new(s, c, i))).unwrap();
        g.objects.insert(ObjKey::new(s, c, idx));
    }
}

fn prompt_seed(seed: u64, category: Category, i: usize) -> u64 {
    rng::derive(seed, &[stream::SUITE, category.code(), i as u64])
}

/// `n` deterministic prompts for the category.
pub fn build_suite(category: Category, n: usize, seed: u64) -> CategorySuite {
    build_sized_suite(category, n, seed, None)
}

/// Like [`build_suite`], padding every prompt with distractor objects to
/// exactly `ops` additive ops when `ops` exceeds the construct size.
pub fn build_sized_suite(category: Category, n: usize, seed: u64, ops: Option<usize>) -> CategorySuite {
    let prompts = (0..n)
        .map(|i| {
            let s = prompt_seed(seed, category, i);
            let mut r = rng::rng_for(s, &[stream::PROMPT]);
            let mut g = construct(category, &mut r, i);
            if let Some(ops) = ops {
                pad(&mut g, &mut r, ops);
            }
            SuitePrompt { prompt: print_scene(&g), seed: s }
        })
        .collect();
    CategorySuite { category, seed, prompts }
}

fn glyph_counts<'a>(keys: impl Iterator<Item = &'a ObjKey>) -> BTreeMap<Glyph, usize> {
    let mut m = BTreeMap::new();
    for k in keys {
        *m.entry(Glyph::of(k)).or_insert(0) += 1;
    }
    m
}

fn canvas_counts(c: &Canvas) -> BTreeMap<Glyph, usize> {
    let mut m = BTreeMap::new();
    for g in c.values() {
        *m.entry(*g).or_insert(0) += 1;
    }
    m
}

/// Exact category check of a final image. Every category requires the
/// prompt's object multiset (shape, color and count) with nothing extra;
/// position additionally requires every stated relation to hold under some
/// binding of prompt objects to drawn ones.
pub fn score(category: Category, prompt: &str, img: &RasterImage) -> bool {
    let (Ok(g), Ok(canvas)) = (parse_scene(prompt), derender(img)) else {
        return false;
    };
    if glyph_counts(g.objects.iter()) != canvas_counts(&canvas) {
        return false;
    }
    match category {
        Category::Position => bind(&canvas, &g, None).is_some(),
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_per_category: usize,
    pub fault_rate: f64,
    pub max_refine: u32,
    /// Pad prompts to this many additive ops.
    pub ops: Option<usize>,
    pub categories: Vec<Category>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            n_per_category: 200,
            fault_rate: 0.3,
            max_refine: 3,
            ops: None,
            categories: Category::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub prompt: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: Category,
    pub evaluated: usize,
    pub excluded: Vec<Excluded>,
    pub single_pass: f64,
    pub process: f64,
    /// Probability that every op draw is clean, averaged over prompts.
    pub closed_form: f64,
    pub mean_ops: f64,
    pub mean_segments: f64,
    pub mean_refines: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub fault_rate: f64,
    pub max_refine: u32,
    pub categories: Vec<CategoryReport>,
    pub overall_single_pass: f64,
    pub overall_process: f64,
    pub overall_closed_form: f64,
    pub mean_segments: f64,
    pub mean_refines: f64,
    pub reference_mean_steps: f64,
}

struct Outcome {
    single: bool,
    process: bool,
    clean_prob: f64,
    ops: usize,
    segments: usize,
    refines: usize,
}

fn evaluate(category: Category, p: &SuitePrompt, cfg: &EvalConfig) -> Result<Outcome, RunError> {
    let run = RunConfig::with_fault_rate(p.seed, cfg.fault_rate, cfg.max_refine);
    let prep = prepare(&p.prompt, &run, None)?;
    let single = single_pass_prepared(&prep, &run)?;
    let t = run_prepared(&p.prompt, &prep, &run, None)?;
    let ops = prep.program.op_count();
    Ok(Outcome {
        single: score(category, &p.prompt, &single),
        process: score(category, &p.prompt, &t.final_image),
        clean_prob: run.sketch_faults.none.powi(ops as i32),
        ops,
        segments: t.segments.len(),
        refines: t.meta.refine_rounds,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs both modes on identical suites and seeds.
pub fn compare_modes(cfg: &EvalConfig) -> ReportTable {
    let categories: Vec<CategoryReport> = cfg
        .categories
        .iter()
        .map(|&category| {
            let suite = build_sized_suite(category, cfg.n_per_category, cfg.seed, cfg.ops);
            let results: Vec<Result<Outcome, RunError>> =
                suite.prompts.par_iter().map(|p| evaluate(category, p, cfg)).collect();
            let mut ok = Vec::new();
            let mut excluded = Vec::new();
            for (p, r) in suite.prompts.iter().zip(results) {
                match r {
                    Ok(o) => ok.push(o),
                    Err(e) => excluded.push(Excluded { prompt: p.prompt.clone(), reason: e.to_string() }),
                }
            }
            let frac = |f: fn(&Outcome) -> bool| mean(ok.iter().map(|o| f(o) as u8 as f64));
            CategoryReport {
                category,
                evaluated: ok.len(),
                excluded,
                single_pass: frac(|o| o.single),
                process: frac(|o| o.process),
                closed_form: mean(ok.iter().map(|o| o.clean_prob)),
                mean_ops: mean(ok.iter().map(|o| o.ops as f64)),
                mean_segments: mean(ok.iter().map(|o| o.segments as f64)),
                mean_refines: mean(ok.iter().map(|o| o.refines as f64)),
            }
        })
        .collect();
    let over = |f: fn(&CategoryReport) -> f64| mean(categories.iter().map(f));
    ReportTable {
        fault_rate: cfg.fault_rate,
        max_refine: cfg.max_refine,
        overall_single_pass: over(|c| c.single_pass),
        overall_process: over(|c| c.process),
        overall_closed_form: over(|c| c.closed_form),
        mean_segments: over(|c| c.mean_segments),
        mean_refines: over(|c| c.mean_refines),
        reference_mean_steps: REFERENCE_MEAN_STEPS,
        categories,
    }
}

/// One report per fault rate, all other settings shared.
pub fn sweep(cfg: &EvalConfig, rates: &[f64]) -> Vec<ReportTable> {
    rates
        .iter()
        .map(|&fault_rate| compare_modes(&EvalConfig { fault_rate, ..cfg.clone() }))
        .collect()
}

pub fn validate_rates(rates: &[f64]) -> Result<(), String> {
    match rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        Some(r) => Err(format!("fault rate {r} outside [0, 1]")),
        None if rates.is_empty() => Err("no fault rates given".into()),
        None => Ok(()),
    }
}

pub fn render_report(t: &ReportTable) -> String {
    let mut s = format!(
        "fault rate {:.2}, max refine {}\n{:<18} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        t.fault_rate, t.max_refine, "category", "n", "single", "process", "closed", "segs", "refines"
    );
    for c in &t.categories {
        s.push_str(&format!(
            "{:<18} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.2} {:>8.3}\n",
            c.category.name(),
            c.evaluated,
            c.single_pass,
            c.process,
            c.closed_form,
            c.mean_segments,
            c.mean_refines
        ));
        if !c.excluded.is_empty() {
            s.push_str(&format!("  ({} prompts excluded as infeasible)\n", c.excluded.len()));
        }
    }
    s.push_str(&format!(
        "{:<18} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.2} {:>8.3}\n",
        "overall", "", t.overall_single_pass, t.overall_process, t.overall_closed_form, t.mean_segments, t.mean_refines
    ));
    s.push_str(&format!(
        "reference mean reasoning steps per image (full-scale model): {:.2}\n",
        t.reference_mean_steps
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{layout, render, Placement};

    fn clean_render(prompt: &str) -> RasterImage {
        let g = parse_scene(prompt).unwrap();
        render(&layout(&g, &Placement::new()).unwrap())
    }

    #[test]
    fn suites_satisfy_their_constructs() {
        for c in Category::ALL {
            let s = build_suite(c, 24, 3);
            assert_eq!(s, build_suite(c, 24, 3));
            for p in &s.prompts {
                let g = parse_scene(&p.prompt).unwrap();
                match c {
                    Category::SingleObject | Category::Colors => assert_eq!((g.objects.len(), g.relations.len()), (1, 0)),
                    Category::TwoObjects => assert_eq!(g.objects.len(), 2),
                    Category::Counting => {
                        assert!((2..=4).contains(&g.objects.len()));
                        assert_eq!(glyph_counts(g.objects.iter()).len(), 1);
                    }
                    Category::ColorAttributes => {
                        let colors: std::collections::BTreeSet<_> = g.objects.iter().map(|k| k.color).collect();
                        assert_eq!(colors.len(), 2);
                    }
                    Category::Position => assert!(!g.relations.is_empty()),
                }
            }
        }
        let rels: std::collections::BTreeSet<Relation> = build_suite(Category::Position, 4, 9)
            .prompts
            .iter()
            .flat_map(|p| parse_scene(&p.prompt).unwrap().relations.into_iter().map(|e| e.relation))
            .collect();
        assert_eq!(rels.len(), 4);
    }

    #[test]
    fn sized_suites_have_exact_op_counts() {
        for c in Category::ALL {
            for p in build_sized_suite(c, 10, 1, Some(4)).prompts {
                let g = parse_scene(&p.prompt).unwrap();
                assert_eq!(g.objects.len() + g.relations.len(), 4, "{}", p.prompt);
            }
        }
    }

    #[test]
    fn scorer_examples() {
        for c in Category::ALL {
            for p in build_suite(c, 8, 2).prompts {
                assert!(score(c, &p.prompt, &clean_render(&p.prompt)), "{}", p.prompt);
            }
        }
        assert!(!score(Category::Counting, "3 yellow triangle", &clean_render("2 yellow triangle")));
        let mut p = Placement::new();
        let a = ObjKey::new(Shape::Circle, Color::Red, 1);
        let b = ObjKey::new(Shape::Square, Color::Blue, 1);
        p.insert(a, crate::microworld::Cell::new(2, 0));
        p.insert(b, crate::microworld::Cell::new(2, 3));
        assert!(!score(Category::Position, "red circle above blue square", &render(&p)));
    }

    #[test]
    fn clean_modes_are_perfect() {
        let cfg = EvalConfig { n_per_category: 6, fault_rate: 0.0, ..EvalConfig::default() };
        let t = compare_modes(&cfg);
        assert_eq!(t.overall_single_pass, 1.0);
        assert_eq!(t.overall_process, 1.0);
        assert_eq!(t.mean_refines, 0.0);
        assert!(t.categories.iter().all(|c| c.excluded.is_empty()));
    }

    #[test]
    fn disabled_refinement_matches_single_pass() {
        let cfg = EvalConfig { n_per_category: 30, fault_rate: 0.3, max_refine: 0, ops: Some(4), ..EvalConfig::default() };
        let t = compare_modes(&cfg);
        for c in &t.categories {
            assert_eq!(c.single_pass, c.process, "{}", c.category);
        }
    }
}
