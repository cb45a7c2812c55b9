//! Command-line front end. `dispatch` returns the process exit code:
//! 0 ok, 1 usage, 2 config, 3 runtime.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::evalharness::{self, EvalConfig};
use crate::flowmath;
use crate::microworld::FaultModel;
use crate::orchestrator::{self, RunConfig, Segment, Trajectory};
use crate::seqcodec::{self, dataset};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SKETCHLOOP_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "sketchloop", version, about = "Plan, sketch, inspect and refine over a grid world")]
pub struct Cli {
    /// TOML config file; defaults to $SKETCHLOOP_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the multi-turn, conflict and alignment subsets.
    GenDataset(GenArgs),
    /// Run one trajectory and print it with its token stream.
    Run(RunArgs),
    /// Compare process-driven and single-pass generation.
    Eval(EvalArgs),
    /// Recompute subset statistics of a generated dataset.
    Stats(StatsArgs),
    /// Check the training-objective arithmetic numerically.
    VerifyMath(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Embed critique rounds in multi-turn records.
    #[arg(long)]
    pub inline_critiques: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total sketch fault probability, split evenly over the five kinds.
    #[arg(long)]
    pub fault_rate: Option<f64>,
    #[arg(long)]
    pub plan_fault_rate: Option<f64>,
    #[arg(long)]
    pub max_refine: Option<u32>,
    /// Requested number of plan steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub augmentation_ratio: Option<f64>,
    /// Write the full trajectory and token stream as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated sketch fault rates to sweep.
    #[arg(long, value_delimiter = ',')]
    pub fault_rates: Option<Vec<f64>>,
    /// Prompts per category.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_refine: Option<u32>,
    /// Pad prompts to this many additive ops.
    #[arg(long)]
    pub ops: Option<usize>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Resolved configuration; flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub fault_rates: Vec<f64>,
    pub dataset: dataset::DatasetConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            fault_rates: vec![0.0, 0.1, 0.3, 0.5],
            dataset: dataset::DatasetConfig::default(),
            run: RunConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.run.sketch_faults.validate().map_err(|e| CliError::Config(format!("run.sketch_faults: {e}")))?;
        self.run.plan_faults.validate().map_err(|e| CliError::Config(format!("run.plan_faults: {e}")))?;
        evalharness::validate_rates(&self.fault_rates).map_err(CliError::Config)?;
        if !(0.0..=1.0).contains(&self.run.augmentation_ratio) {
            return Err(CliError::Config("run.augmentation_ratio outside [0, 1]".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn load_config(explicit: Option<&Path>) -> Result<AppConfig, CliError> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
    };
    let Some(path) = path else {
        return Ok(AppConfig::default());
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn check_prob(name: &str, p: Option<f64>) -> Result<(), CliError> {
    match p {
        Some(p) if !(0.0..=1.0).contains(&p) => Err(CliError::Usage(format!("--{name} must lie in [0, 1]"))),
        _ => Ok(()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Errors go to stderr as one JSON object.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", CliError::Usage(e.to_string().trim().to_string()).to_json());
            return 1;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("{}", e.to_json());
            e.code()
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    cfg.validate()?;
    match cli.command {
        Command::GenDataset(a) => gen_dataset(&mut cfg, a, out),
        Command::Run(a) => run(&mut cfg, a, out),
        Command::Eval(a) => eval(&mut cfg, a, out),
        Command::Stats(a) => stats(a, out),
        Command::VerifyMath(a) => verify_math(a, out),
    }
}

fn gen_dataset(cfg: &mut AppConfig, a: GenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let d = &mut cfg.dataset;
    if let Some(s) = a.scale {
        if !(s.is_finite() && s >= 0.0) {
            return Err(CliError::Usage("--scale must be a nonnegative number".into()));
        }
        d.scale = s;
    }
    d.seed = a.seed.unwrap_or(if d.seed != 0 { d.seed } else { cfg.seed });
    d.inline_critiques |= a.inline_critiques;
    let workers = a.workers.unwrap_or(cfg.workers);
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let dir = a.out.unwrap_or_else(|| cfg.out.clone());
    let start = std::time::Instant::now();
    let m = dataset::emit_dataset(d, &dir, workers).map_err(runtime)?;
    writeln!(out, "wrote {} in {:.2}s with {} worker(s)", dir.display(), start.elapsed().as_secs_f64(), workers)
        .map_err(runtime)?;
    write_stats(&m.subsets, out)
}

fn write_stats(subsets: &[dataset::SubsetStats], out: &mut dyn Write) -> Result<(), CliError> {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
    let cnt = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
    writeln!(out, "{:<10} {:>8} {:>8} {:>8} {:>10} {:>8} {:>6}", "subset", "records", "pos", "neg", "prompt", "images", "max").map_err(runtime)?;
    for s in subsets {
        writeln!(
            out,
            "{:<10} {:>8} {:>8} {:>8} {:>10} {:>8} {:>6}",
            s.name,
            s.records,
            cnt(s.positive),
            cnt(s.negative),
            opt(s.avg_prompt_len),
            opt(s.avg_images),
            cnt(s.max_images)
        )
        .map_err(runtime)?;
    }
    Ok(())
}

pub fn render_trajectory(t: &Trajectory) -> String {
    let mut s = format!("prompt: {}\n", t.prompt);
    for seg in &t.segments {
        match seg {
            Segment::Plan { ins, des } => s.push_str(&format!("[plan]    ins: {ins}\n          des: {des}\n")),
            Segment::Inspect { text } => s.push_str(&format!("[inspect] {text}\n")),
            Segment::Refine { text } => s.push_str(&format!("[refine]  {text}\n")),
            Segment::Vision { image } => {
                s.push_str("[vision]\n");
                for row in image.cells {
                    let line: Vec<String> = row
                        .iter()
                        .map(|c| if c[0] == 0 { "..".into() } else { format!("{}{}", c[0], c[1]) })
                        .collect();
                    s.push_str(&format!("          {}\n", line.join(" ")));
                }
            }
        }
    }
    s.push_str(&format!(
        "success={} steps={} plan_segments={} vision_segments={} refines={} faults={}\n",
        t.meta.success,
        t.meta.steps,
        t.count('P'),
        t.count('V'),
        t.meta.refine_rounds,
        t.meta.faults.len()
    ));
    s
}

fn run(cfg: &mut AppConfig, a: RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_prob("fault-rate", a.fault_rate)?;
    check_prob("plan-fault-rate", a.plan_fault_rate)?;
    check_prob("augmentation-ratio", a.augmentation_ratio)?;
    let r = &mut cfg.run;
    if let Some(s) = a.seed {
        r.seed = s;
    }
    if let Some(p) = a.fault_rate {
        r.sketch_faults = FaultModel::with_rate(p);
    }
    if let Some(p) = a.plan_fault_rate {
        r.plan_faults = FaultModel::with_rate(p);
    }
    if let Some(m) = a.max_refine {
        r.max_refine = m;
    }
    if a.steps.is_some() {
        r.k_hint = a.steps;
    }
    if let Some(x) = a.augmentation_ratio {
        r.augmentation_ratio = x;
    }
    let t = orchestrator::run_trajectory(&a.prompt, r, None).map_err(runtime)?;
    let stream = seqcodec::encode(&t).map_err(runtime)?;
    write!(out, "{}", render_trajectory(&t)).map_err(runtime)?;
    writeln!(out, "stream: {}", stream.to_text()).map_err(runtime)?;
    if let Some(path) = a.json {
        let doc = serde_json::json!({ "trajectory": t, "stream": stream });
        let text = serde_json::to_string_pretty(&doc).map_err(runtime)?;
        fs::write(&path, text + "\n").map_err(runtime)?;
    }
    Ok(())
}

fn eval(cfg: &mut AppConfig, a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let e = &mut cfg.eval;
    if let Some(n) = a.n {
        e.n_per_category = n;
    }
    if let Some(s) = a.seed {
        e.seed = s;
    }
    if let Some(m) = a.max_refine {
        e.max_refine = m;
    }
    if a.ops.is_some() {
        e.ops = a.ops;
    }
    let rates = a.fault_rates.unwrap_or_else(|| cfg.fault_rates.clone());
    evalharness::validate_rates(&rates).map_err(CliError::Usage)?;
    let reports = evalharness::sweep(e, &rates);
    let mut text = String::new();
    for r in &reports {
        text.push_str(&evalharness::render_report(r));
        text.push('\n');
    }
    text.push_str("mean refine rounds by fault rate:");
    for r in &reports {
        text.push_str(&format!(" {:.2}:{:.3}", r.fault_rate, r.mean_refines));
    }
    text.push('\n');
    write!(out, "{text}").map_err(runtime)?;
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).map_err(runtime)?;
        let json = serde_json::to_string_pretty(&reports).map_err(runtime)?;
        fs::write(dir.join("report.json"), json + "\n").map_err(runtime)?;
        fs::write(dir.join("report.txt"), &text).map_err(runtime)?;
    }
    Ok(())
}

fn stats(a: StatsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !a.dir.is_dir() {
        return Err(CliError::Runtime(format!("{} is not a directory", a.dir.display())));
    }
    let subsets = dataset::stats(&a.dir).map_err(runtime)?;
    write_stats(&subsets, out)?;
    match dataset::read_manifest(&a.dir) {
        Ok(m) if m.subsets == subsets => writeln!(out, "manifest: consistent").map_err(runtime),
        Ok(_) => Err(CliError::Runtime("recomputed statistics differ from the manifest".into())),
        Err(dataset::DatasetError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            writeln!(out, "manifest: absent").map_err(runtime)
        }
        Err(e) => Err(runtime(e)),
    }
}

fn verify_math(a: VerifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let checks = flowmath::verify(a.seed);
    write!(out, "{}", flowmath::render_table(&checks)).map_err(runtime)?;
    match checks.iter().filter(|c| !c.pass).count() {
        0 => Ok(()),
        n => Err(CliError::Runtime(format!("{n} numerical check(s) failed"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec(args: &[&str]) -> Result<String, CliError> {
        let cli = Cli::try_parse_from(std::iter::once("sketchloop").chain(args.iter().copied()))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut buf = Vec::new();
        execute(cli, &mut buf)?;
        Ok(String::from_utf8(buf).unwrap())
    }

    #[test]
    fn run_example() {
        let s = exec(&["run", "--prompt", "red circle above blue square", "--seed", "7", "--fault-rate", "0"]).unwrap();
        assert!(s.contains("success=true"), "{s}");
        assert!(s.contains("plan_segments=2 vision_segments=2 refines=0"), "{s}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(["sketchloop", "bogus"]), 1);
        assert_eq!(dispatch(["sketchloop", "run", "--prompt", "x", "--fault-rate", "2"]), 1);
        assert_eq!(dispatch(["sketchloop", "run", "--prompt", "purple blob"]), 3);
        assert_eq!(dispatch(["sketchloop", "--config", "/nonexistent/cfg.toml", "verify-math"]), 2);
        assert_eq!(dispatch(["sketchloop", "verify-math"]), 0);
    }

    #[test]
    fn config_file_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 3\n[run]\nmax_refine = 1\n").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!((cfg.seed, cfg.run.max_refine), (3, 1));
        fs::write(&path, "sede = 3\n").unwrap();
        assert!(matches!(load_config(Some(&path)), Err(CliError::Config(_))));
        fs::write(&path, "[run.sketch_faults]\nnone = 0.5\nwrong_color = 0.1\nwrong_shape = 0.0\nrelation_violation = 0.0\nomission = 0.0\nduplicate = 0.0\n").unwrap();
        let bad = load_config(Some(&path)).unwrap();
        assert!(matches!(bad.validate(), Err(CliError::Config(_))));
    }
}
