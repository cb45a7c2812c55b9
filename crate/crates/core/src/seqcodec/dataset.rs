//! Compiles the three training subsets and their manifest.
//!
//! Record `j` of a subset is generated from a seed derived from
//! `(seed, subset, j)` alone, so output bytes do not depend on the worker
//! count. Rows `j < positives` of the critique subsets are positive.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::microworld::{FaultModel, RasterImage};
use crate::orchestrator::{run_trajectory, RunConfig, RunError, Segment, Trajectory};
use crate::rng::{self, stream};
use crate::scene_graph::{print_scene, random_scene, Color, Shape};

use super::Tag;

pub const MULTITURN_FILE: &str = "multiturn.jsonl";
pub const CONFLICT_FILE: &str = "conflict.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Full-size subset targets; `scale` multiplies them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scale: f64,
    pub multiturn_total: usize,
    pub conflict_total: usize,
    pub conflict_negative: usize,
    pub alignment_total: usize,
    pub alignment_positive: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub augmentation_ratio: f64,
    pub max_steps: usize,
    /// Sketch fault rate used to sample misaligned drafts.
    pub alignment_fault_rate: f64,
    /// Plan fault rate used to sample conflicting plans.
    pub conflict_fault_rate: f64,
    /// Embed critique rounds inside multi-turn records instead of keeping
    /// the subsets disjoint.
    pub inline_critiques: bool,
    pub inline_fault_rate: f64,
    pub retries: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            scale: 1.0,
            multiturn_total: 32_012,
            conflict_total: 15_201,
            conflict_negative: 8_296,
            alignment_total: 15_000,
            alignment_positive: 5_000,
            min_objects: 4,
            max_objects: 7,
            augmentation_ratio: 0.2,
            max_steps: 5,
            alignment_fault_rate: 0.5,
            conflict_fault_rate: 1.0,
            inline_critiques: false,
            inline_fault_rate: 0.3,
            retries: 16,
        }
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    (n as f64 * scale).round() as usize
}

fn ratio_of(total: usize, part: usize, full_total: usize) -> usize {
    if full_total == 0 {
        0
    } else {
        (total as f64 * part as f64 / full_total as f64).round() as usize
    }
}

/// Resolved per-subset targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub multiturn: usize,
    pub conflict: usize,
    pub conflict_positive: usize,
    pub alignment: usize,
    pub alignment_positive: usize,
}

impl DatasetConfig {
    pub fn targets(&self) -> Targets {
        let conflict = scaled(self.conflict_total, self.scale);
        let alignment = scaled(self.alignment_total, self.scale);
        Targets {
            multiturn: scaled(self.multiturn_total, self.scale),
            conflict,
            conflict_positive: conflict
                - ratio_of(conflict, self.conflict_negative, self.conflict_total).min(conflict),
            alignment,
            alignment_positive: ratio_of(alignment, self.alignment_positive, self.alignment_total)
                .min(alignment),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let probs = [
            self.augmentation_ratio,
            self.alignment_fault_rate,
            self.conflict_fault_rate,
            self.inline_fault_rate,
        ];
        let ok = self.scale.is_finite()
            && self.scale >= 0.0
            && probs.iter().all(|p| (0.0..=1.0).contains(p))
            && self.conflict_negative <= self.conflict_total
            && self.alignment_positive <= self.alignment_total
            && (1..=crate::scene_graph::MAX_OBJECTS).contains(&self.min_objects)
            && (self.min_objects..=crate::scene_graph::MAX_OBJECTS).contains(&self.max_objects)
            && (1..=crate::planner::MAX_STEPS).contains(&self.max_steps);
        if ok {
            Ok(())
        } else {
            Err(DatasetError::Config("dataset parameters out of range".into()))
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("config: {0}")]
    Config(String),
    #[error("{subset} record {index}: no feasible sample after {retries} retries")]
    Infeasible {
        subset: &'static str,
        index: usize,
        retries: u64,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file} record {index}: {reason}")]
    Corrupt {
        file: String,
        index: usize,
        reason: String,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueTurn {
    pub analysis: String,
    pub refine: String,
    pub image: RasterImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub ins: String,
    pub des: String,
    pub image: RasterImage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub critiques: Vec<CritiqueTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiTurnRecord {
    pub prompt: String,
    pub steps: Vec<StepRecord>,
    pub final_image: RasterImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub prompt: String,
    pub ins: String,
    pub des: String,
    pub label: String,
    pub analysis: String,
    pub corrective_ins: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub ins: String,
    pub image_before: RasterImage,
    pub image_after: RasterImage,
    pub label: String,
    pub analysis: String,
    pub refine_ins: String,
}

pub const POSITIVE: &str = "positive";
pub const NEGATIVE: &str = "negative";

/// Table-style statistics of one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub name: String,
    pub records: usize,
    pub positive: Option<usize>,
    pub negative: Option<usize>,
    pub avg_prompt_len: Option<f64>,
    pub avg_images: Option<f64>,
    pub max_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeTables {
    pub shapes: BTreeMap<String, u8>,
    pub colors: BTreeMap<String, u8>,
    pub tags: Vec<String>,
    pub eos: String,
}

impl CodeTables {
    pub fn current() -> Self {
        CodeTables {
            shapes: Shape::ALL.iter().map(|s| (s.name().to_string(), s.code())).collect(),
            colors: Color::ALL.iter().map(|c| (c.name().to_string(), c.code())).collect(),
            tags: Tag::ALL.iter().map(|t| t.text().to_string()).collect(),
            eos: super::EOS.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub config_digest: String,
    pub subsets: Vec<SubsetStats>,
    pub code_tables: CodeTables,
}

/// A seeded prompt with `min..=max` objects and a relation budget of one
/// less than the object count.
pub fn sample_prompt(seed: u64, min_objects: usize, max_objects: usize) -> String {
    let mut r = rng::rng_for(seed, &[stream::PROMPT]);
    let n = r.gen_range(min_objects..=max_objects);
    let rels = r.gen_range(0..n);
    print_scene(&random_scene(&mut r, n, rels))
}

/// A trajectory regrouped by plan step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepBlock {
    pub ins: String,
    pub des: String,
    pub plan_critique: Option<(String, String)>,
    /// Each draft with the critique raised against it, if any.
    pub drafts: Vec<(RasterImage, Option<(String, String)>)>,
}

impl StepBlock {
    pub fn accepted(&self) -> RasterImage {
        self.drafts.last().map(|d| d.0).unwrap_or_default()
    }
}

pub fn step_blocks(t: &Trajectory) -> Vec<StepBlock> {
    let mut out: Vec<StepBlock> = Vec::new();
    let mut pending: Option<String> = None;
    for seg in &t.segments {
        match seg {
            Segment::Plan { ins, des } => out.push(StepBlock {
                ins: ins.clone(),
                des: des.clone(),
                ..StepBlock::default()
            }),
            Segment::Inspect { text } => pending = Some(text.clone()),
            Segment::Refine { text } => {
                let b = out.last_mut().expect("plan first");
                let analysis = pending.take().unwrap_or_default();
                match b.drafts.last_mut() {
                    Some(d) => d.1 = Some((analysis, text.clone())),
                    None => b.plan_critique = Some((analysis, text.clone())),
                }
            }
            Segment::Vision { image } => {
                pending = None;
                out.last_mut().expect("plan first").drafts.push((*image, None));
            }
        }
    }
    out
}

fn record_seed(seed: u64, subset: u64, j: usize, attempt: u64) -> u64 {
    rng::derive(seed, &[stream::DATASET, subset, j as u64, attempt])
}

fn retry<T>(
    cfg: &DatasetConfig,
    subset: &'static str,
    tag: u64,
    j: usize,
    mut f: impl FnMut(u64) -> Result<Option<T>, RunError>,
) -> Result<T, DatasetError> {
    for attempt in 0..cfg.retries {
        if let Ok(Some(v)) = f(record_seed(cfg.seed, tag, j, attempt)) {
            return Ok(v);
        }
    }
    Err(DatasetError::Infeasible {
        subset,
        index: j,
        retries: cfg.retries,
    })
}

fn base_run(cfg: &DatasetConfig, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        augmentation_ratio: cfg.augmentation_ratio,
        max_steps: Some(cfg.max_steps),
        ..RunConfig::default()
    }
}

pub fn multiturn_record(cfg: &DatasetConfig, j: usize) -> Result<MultiTurnRecord, DatasetError> {
    retry(cfg, "multiturn", 0, j, |seed| {
        let prompt = sample_prompt(seed, cfg.min_objects, cfg.max_objects);
        let mut run = base_run(cfg, seed);
        if cfg.inline_critiques {
            run.sketch_faults = FaultModel::with_rate(cfg.inline_fault_rate);
        }
        let t = run_trajectory(&prompt, &run, None)?;
        if !t.meta.success {
            return Ok(None);
        }
        let steps = step_blocks(&t)
            .into_iter()
            .map(|b| {
                let mut drafts = b.drafts.into_iter();
                let (first, mut crit) = drafts.next().expect("one draft per step");
                let mut critiques = Vec::new();
                for (img, next) in drafts {
                    let (analysis, refine) = crit.take().expect("refine precedes redraw");
                    critiques.push(CritiqueTurn { analysis, refine, image: img });
                    crit = next;
                }
                StepRecord {
                    ins: b.ins,
                    des: b.des,
                    image: first,
                    critiques,
                }
            })
            .collect();
        Ok(Some(MultiTurnRecord {
            prompt,
            steps,
            final_image: t.final_image,
        }))
    })
}

pub fn conflict_record(cfg: &DatasetConfig, j: usize, positive: bool) -> Result<ConflictRecord, DatasetError> {
    retry(cfg, "conflict", 1, j, |seed| {
        let prompt = sample_prompt(seed, cfg.min_objects, cfg.max_objects);
        let mut run = base_run(cfg, seed);
        run.augmentation_ratio = 0.0;
        if !positive {
            run.plan_faults = FaultModel::with_rate(cfg.conflict_fault_rate);
        }
        let t = run_trajectory(&prompt, &run, None)?;
        let blocks = step_blocks(&t);
        let mut r = rng::rng_for(seed, &[stream::DATASET, 1]);
        let start = r.gen_range(0..blocks.len());
        let pick = (0..blocks.len())
            .map(|o| &blocks[(start + o) % blocks.len()])
            .find(|b| b.plan_critique.is_some() != positive);
        Ok(pick.map(|b| {
            let (analysis, corrective_ins) = b.plan_critique.clone().unwrap_or_default();
            ConflictRecord {
                prompt: prompt.clone(),
                ins: b.ins.clone(),
                des: b.des.clone(),
                label: if positive { POSITIVE } else { NEGATIVE }.into(),
                analysis,
                corrective_ins,
            }
        }))
    })
}

pub fn alignment_record(cfg: &DatasetConfig, j: usize, positive: bool) -> Result<AlignmentRecord, DatasetError> {
    retry(cfg, "alignment", 2, j, |seed| {
        let prompt = sample_prompt(seed, cfg.min_objects, cfg.max_objects);
        let mut run = base_run(cfg, seed);
        if !positive {
            run.sketch_faults = FaultModel::with_rate(cfg.alignment_fault_rate);
        }
        let t = run_trajectory(&prompt, &run, None)?;
        let blocks = step_blocks(&t);
        let mut r = rng::rng_for(seed, &[stream::DATASET, 2]);
        let start = r.gen_range(0..blocks.len());
        for o in 0..blocks.len() {
            let i = (start + o) % blocks.len();
            let b = &blocks[i];
            let before = if i == 0 {
                t.initial.unwrap_or_default()
            } else {
                blocks[i - 1].accepted()
            };
            let (after, crit) = &b.drafts[0];
            if crit.is_some() != positive {
                let (analysis, refine_ins) = crit.clone().unwrap_or_default();
                return Ok(Some(AlignmentRecord {
                    ins: b.ins.clone(),
                    image_before: before,
                    image_after: *after,
                    label: if positive { POSITIVE } else { NEGATIVE }.into(),
                    analysis,
                    refine_ins,
                }));
            }
        }
        Ok(None)
    })
}

fn in_pool<T: Send>(
    workers: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, DatasetError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DatasetError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn generate<T: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<T, DatasetError> + Sync + Send,
) -> Result<Vec<T>, DatasetError> {
    (0..n).into_par_iter().map(f).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Generates all subsets into `out` and writes the manifest.
pub fn emit_dataset(cfg: &DatasetConfig, out: &Path, workers: usize) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    let t = cfg.targets();
    let (multi, conflict, align) = in_pool(workers, || -> Result<_, DatasetError> {
        let multi = generate(t.multiturn, |j| multiturn_record(cfg, j))?;
        let conflict = generate(t.conflict, |j| conflict_record(cfg, j, j < t.conflict_positive))?;
        let align = generate(t.alignment, |j| alignment_record(cfg, j, j < t.alignment_positive))?;
        Ok((multi, conflict, align))
    })??;
    fs::create_dir_all(out)?;
    write_jsonl(&out.join(MULTITURN_FILE), &multi)?;
    write_jsonl(&out.join(CONFLICT_FILE), &conflict)?;
    write_jsonl(&out.join(ALIGNMENT_FILE), &align)?;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        config_digest: cfg.digest(),
        subsets: vec![
            multiturn_stats(&multi),
            conflict_stats(&conflict),
            alignment_stats(&align),
        ],
        code_tables: CodeTables::current(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
    text.push('\n');
    fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

fn mean(xs: impl Iterator<Item = usize>) -> Option<f64> {
    let (sum, n) = xs.fold((0usize, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

fn labeled<'a>(labels: impl Iterator<Item = &'a str> + Clone) -> (usize, usize) {
    (
        labels.clone().filter(|l| *l == POSITIVE).count(),
        labels.filter(|l| *l == NEGATIVE).count(),
    )
}

pub fn multiturn_stats(rows: &[MultiTurnRecord]) -> SubsetStats {
    SubsetStats {
        name: "multiturn".into(),
        records: rows.len(),
        positive: None,
        negative: None,
        avg_prompt_len: mean(rows.iter().map(|r| r.prompt.chars().count())),
        avg_images: mean(rows.iter().map(|r| r.steps.len())),
        max_images: rows.iter().map(|r| r.steps.len()).max(),
    }
}

pub fn conflict_stats(rows: &[ConflictRecord]) -> SubsetStats {
    let (p, n) = labeled(rows.iter().map(|r| r.label.as_str()));
    SubsetStats {
        name: "conflict".into(),
        records: rows.len(),
        positive: Some(p),
        negative: Some(n),
        avg_prompt_len: mean(rows.iter().map(|r| r.prompt.chars().count())),
        avg_images: None,
        max_images: None,
    }
}

pub fn alignment_stats(rows: &[AlignmentRecord]) -> SubsetStats {
    let (p, n) = labeled(rows.iter().map(|r| r.label.as_str()));
    SubsetStats {
        name: "alignment".into(),
        records: rows.len(),
        positive: Some(p),
        negative: Some(n),
        avg_prompt_len: None,
        avg_images: mean(rows.iter().map(|_| 2)),
        max_images: (!rows.is_empty()).then_some(2),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let row = serde_json::from_str(&line).map_err(|e| DatasetError::Corrupt {
            file: path.display().to_string(),
            index,
            reason: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Recomputes the subset statistics from the record files in `dir`.
/// Missing files count as empty subsets.
pub fn stats(dir: &Path) -> Result<Vec<SubsetStats>, DatasetError> {
    let multi: Vec<MultiTurnRecord> = read_jsonl(&dir.join(MULTITURN_FILE))?;
    let conflict: Vec<ConflictRecord> = read_jsonl(&dir.join(CONFLICT_FILE))?;
    let align: Vec<AlignmentRecord> = read_jsonl(&dir.join(ALIGNMENT_FILE))?;
    Ok(vec![
        multiturn_stats(&multi),
        conflict_stats(&conflict),
        alignment_stats(&align),
    ])
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
        file: path.display().to_string(),
        index: 0,
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_targets() {
        let cfg = DatasetConfig { scale: 0.1, ..DatasetConfig::default() };
        let t = cfg.targets();
        assert_eq!(t.multiturn, 3201);
        assert_eq!(t.conflict, 1520);
        assert_eq!(t.conflict - t.conflict_positive, 830);
        assert_eq!(t.alignment, 1500);
        assert_eq!(t.alignment_positive, 500);
        let full = DatasetConfig::default().targets();
        assert_eq!(
            (full.multiturn, full.conflict, full.conflict_positive, full.alignment, full.alignment_positive),
            (32_012, 15_201, 6_905, 15_000, 5_000)
        );
    }

    #[test]
    fn stats_of_empty_and_hand_built() {
        let dir = tempfile::tempdir().unwrap();
        let s = stats(dir.path()).unwrap();
        assert!(s.iter().all(|x| x.records == 0 && x.avg_images.is_none() && x.avg_prompt_len.is_none()));
        let step = StepRecord { ins: "add red circle".into(), des: "red circle".into(), image: RasterImage::default(), critiques: vec![] };
        let rows = vec![
            MultiTurnRecord { prompt: "ab".into(), steps: vec![step.clone(); 3], final_image: RasterImage::default() },
            MultiTurnRecord { prompt: "abcd".into(), steps: vec![step; 5], final_image: RasterImage::default() },
        ];
        let st = multiturn_stats(&rows);
        assert_eq!(st.avg_images, Some(4.0));
        assert_eq!(st.max_images, Some(5));
        assert_eq!(st.avg_prompt_len, Some(3.0));
    }

    #[test]
    fn small_emit_matches_stats_and_is_worker_independent() {
        let cfg = DatasetConfig { scale: 0.002, seed: 5, ..DatasetConfig::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = emit_dataset(&cfg, a.path(), 1).unwrap();
        let mb = emit_dataset(&cfg, b.path(), 3).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(stats(a.path()).unwrap(), ma.subsets);
        for f in [MULTITURN_FILE, CONFLICT_FILE, ALIGNMENT_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let conflict: Vec<ConflictRecord> = read_jsonl(&a.path().join(CONFLICT_FILE)).unwrap();
        for r in conflict.iter().filter(|r| r.label == NEGATIVE) {
            assert!(!r.corrective_ins.is_empty());
        }
    }
}
