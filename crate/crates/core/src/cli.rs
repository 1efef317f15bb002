// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration or
//! malformed input, 3 linearly dependent target concepts, 4 failed invariant
//! check.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::avde;
use crate::check::{self, Fault};
use crate::eraser::ShiftMode;
use crate::error::{Error, Result};
use crate::pipeline::{self, fmt_f64, Pipeline, PipelineConfig, SweepGrid};
use crate::viz;

pub const SEED_ENV: &str = "ORTHOERASE_SEED";

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DEPENDENT: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "orthoerase",
    version,
    about = "Concept erasure in cross-attention value space"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Erase target concepts from a prompt and write the report.
    Erase(EraseArgs),
    /// Render component dumps of a report directory as PGM heatmaps.
    Viz(VizArgs),
    /// Run the randomized invariant suite.
    Check(CheckArgs),
    /// Grid over shift hyperparameters on a related prompt pair.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, overrides_with = "no_adaptive")]
    pub adaptive: bool,
    #[arg(long = "no-adaptive")]
    pub no_adaptive: bool,
}

#[derive(Debug, Args)]
pub struct EraseArgs {
    pub prompt: String,
    /// Target concept; repeat for several.
    #[arg(long = "target")]
    pub targets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run without targets.
    #[arg(long, conflicts_with = "targets")]
    pub noop: bool,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    pub report_dir: PathBuf,
    /// Output directory; defaults to the report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render before/after feature maps as PPM.
    #[arg(long)]
    pub features: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = check::DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "snoopy")]
    pub target: String,
    /// Non-target prompt; its last word is made related to the target.
    #[arg(long, default_value = "mickey")]
    pub nontarget: String,
    /// Cosine between the related words' base embeddings.
    #[arg(long, default_value_t = 0.65)]
    pub related_cos: f64,
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    /// Comma-separated grid values.
    #[arg(long)]
    pub s: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Process environment seen by a command.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub env_seed: Option<String>,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Context {
    pub fn from_env() -> Self {
        Self {
            env_seed: std::env::var(SEED_ENV).ok(),
            fault: None,
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::LinearlyDependentConcepts { .. } => EXIT_DEPENDENT,
        Error::Io { .. } | Error::Invariant(_) | Error::NonFinite | Error::SingularGram { .. } => {
            EXIT_IO
        }
        _ => EXIT_CONFIG,
    }
}

pub const CONFIG_KEYS: [&str; 12] = [
    "s",
    "p",
    "epsilon",
    "token_length",
    "d",
    "d_c",
    "d_z",
    "hw",
    "layers",
    "steps",
    "seed",
    "adaptive",
];

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key '{k}'", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{k}'",
                i + 1
            )));
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: '{v}'")))
}

fn apply_file(cfg: &mut PipelineConfig, map: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in map {
        match k.as_str() {
            "s" => cfg.shift.s = parse_value(k, v)?,
            "p" => cfg.shift.p = parse_value(k, v)?,
            "epsilon" => cfg.shift.epsilon = parse_value(k, v)?,
            "token_length" => cfg.token_length = parse_value(k, v)?,
            "d" => cfg.head_dim = parse_value(k, v)?,
            "d_c" => cfg.embed_dim = parse_value(k, v)?,
            "d_z" => cfg.latent_dim = parse_value(k, v)?,
            "hw" => cfg.positions = parse_value(k, v)?,
            "layers" => cfg.layers = parse_value(k, v)?,
            "steps" => cfg.steps = parse_value(k, v)?,
            "seed" => cfg.seed = parse_value(k, v)?,
            "adaptive" => cfg.mode = ShiftMode::from(parse_value::<bool>(k, v)?),
            _ => unreachable!("keys validated on parse"),
        }
    }
    Ok(())
}

fn env_seed(ctx: &Context) -> Result<Option<u64>> {
    ctx.env_seed
        .as_deref()
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid {SEED_ENV}: '{s}'")))
        })
        .transpose()
}

/// Resolve the pipeline config: flag over file over environment over default.
pub fn resolve_config(
    model: &ModelArgs,
    shift: (Option<f64>, Option<f64>, Option<f64>),
    ctx: &Context,
) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    let mut file_seed = false;
    if let Some(path) = &model.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map = parse_config_text(&text)?;
        file_seed = map.contains_key("seed");
        apply_file(&mut cfg, &map)?;
    }
    match (model.seed, file_seed) {
        (Some(seed), _) => cfg.seed = seed,
        (None, true) => {}
        (None, false) => cfg.seed = env_seed(ctx)?.unwrap_or(cfg.seed),
    }
    if model.adaptive {
        cfg.mode = ShiftMode::Adaptive;
    }
    if model.no_adaptive {
        cfg.mode = ShiftMode::Off;
    }
    let (s, p, e) = shift;
    cfg.shift.s = s.unwrap_or(cfg.shift.s);
    cfg.shift.p = p.unwrap_or(cfg.shift.p);
    cfg.shift.epsilon = e.unwrap_or(cfg.shift.epsilon);
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn ensure_dir(path: &Path) -> Result<()> {
    match fs::create_dir(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && path.is_dir() => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn cmd_erase(args: &EraseArgs, ctx: &Context, out: &mut dyn Write) -> Result<()> {
    if args.targets.is_empty() && !args.noop {
        return Err(Error::Config(
            "at least one --target required unless --noop".into(),
        ));
    }
    let cfg = resolve_config(&args.model, (args.s, args.p, args.epsilon), ctx)?;
    let pipeline = Pipeline::new(cfg)?;
    let targets: Vec<&str> = args.targets.iter().map(String::as_str).collect();
    let run = pipeline.run(&args.prompt, &targets)?;
    ensure_dir(&args.out)?;
    run.write_dir(&args.out)?;
    let r = &run.report;
    writeln!(
        out,
        "n={} cs_drop={} fid={}",
        r.n_targets,
        fmt_f64(r.cs_drop()),
        fmt_f64(r.fid)
    )
    .map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

fn parse_dump_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("component_s")?.strip_suffix(".avde")?;
    let (s, l) = rest.split_once("_l")?;
    Some((s.parse().ok()?, l.parse().ok()?))
}

pub fn cmd_viz(args: &VizArgs, out: &mut dyn Write) -> Result<()> {
    let dir = &args.report_dir;
    let mut dumps = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if let Some(key) = entry.file_name().to_str().and_then(parse_dump_name) {
            dumps.push(key);
        }
    }
    if dumps.is_empty() {
        return Err(Error::Format(format!(
            "no component dumps in {}",
            dir.display()
        )));
    }
    dumps.sort_unstable();
    let dest = args.out.as_deref().unwrap_or(dir);
    ensure_dir(dest)?;
    for &(step, layer) in &dumps {
        let m = avde::read(&dir.join(pipeline::component_file_name(step, layer)))?;
        avde::write_atomic(
            &dest.join(format!("component_s{step}_l{layer}.pgm")),
            &viz::pgm(&m)?,
        )?;
    }
    let mut rendered_features = 0;
    if args.features {
        let steps = dumps.iter().map(|&(s, _)| s).max().unwrap_or(0) + 1;
        for step in 0..steps {
            let before = avde::read(&dir.join(pipeline::features_file_name("before", step)))?;
            let after = avde::read(&dir.join(pipeline::features_file_name("after", step)))?;
            avde::write_atomic(
                &dest.join(format!("features_s{step}.ppm")),
                &viz::ppm_side_by_side(&before, &after)?,
            )?;
            rendered_features += 1;
        }
    }
    writeln!(
        out,
        "pgm={} ppm={rendered_features} out={}",
        dumps.len(),
        dest.display()
    )
    .map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

/// Returns whether every property passed.
pub fn cmd_check(
    args: &CheckArgs,
    ctx: &Context,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<bool> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed(ctx)?.unwrap_or(0),
    };
    let stdout = Path::new("<stdout>");
    if args.trials == 0 {
        writeln!(err, "warning: --trials 0, no instances checked").map_err(io_err(stdout))?;
    }
    let report = check::run_suite_with_fault(args.trials, seed, ctx.fault);
    for o in &report.outcomes {
        writeln!(out, "{}", o.summary()).map_err(io_err(stdout))?;
    }
    Ok(report.passed())
}

/// Comma-separated floats; an empty string is an empty list.
pub fn parse_list(key: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse_value(key, t))
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs, ctx: &Context, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&args.model, (None, None, None), ctx)?;
    let defaults = SweepGrid::default();
    let list = |key: &str, v: &Option<String>, d: &Vec<f64>| match v {
        Some(t) => parse_list(key, t),
        None => Ok(d.clone()),
    };
    let grid = SweepGrid {
        s: list("s", &args.s, &defaults.s)?,
        p: list("p", &args.p, &defaults.p)?,
        epsilon: list("epsilon", &args.epsilon, &defaults.epsilon)?,
    };
    grid.points()?;
    let pipeline = Pipeline::new(cfg)?;
    let target = pipeline.concept(&args.target)?;
    let nontarget = pipeline.related_concept(&target, &args.nontarget, args.related_cos)?;
    let rows = pipeline.sweep(&target, &nontarget, &grid, args.samples)?;
    let mut csv = Vec::new();
    pipeline::write_sweep_csv(&rows, &mut csv)?;
    let stdout = Path::new("<stdout>");
    match &args.out {
        Some(path) => {
            avde::write_atomic(path, &csv)?;
            writeln!(out, "rows={} out={}", rows.len(), path.display()).map_err(io_err(stdout))?;
        }
        None => out.write_all(&csv).map_err(io_err(stdout))?,
    }
    Ok(())
}

/// Parse `args` (including the program name) and run the command.
pub fn run_with<I, T>(args: I, ctx: &Context, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Erase(a) => cmd_erase(a, ctx, out),
        Command::Viz(a) => cmd_viz(a, out),
        Command::Sweep(a) => cmd_sweep(a, ctx, out),
        Command::Check(a) => match cmd_check(a, ctx, out, err) {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_CHECK,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(
        args,
        &Context::from_env(),
        &mut stdout.lock(),
        &mut stderr.lock(),
    )
}
