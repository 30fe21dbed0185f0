//! Command-line front end.
//!
//! The world is regenerated from its config on every invocation, so the same
//! world config must be passed to every step of a run. Training consumes
//! samples from global index 0 upward; evaluation uses a disjoint range far
//! above it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::crosscoder::CrosscoderParams;
use crate::diffing::{self, DEFAULT_TWIN_THRESHOLD};
use crate::error::{Result, XdiffError};
use crate::io::{self, kv, reports};
use crate::patching::{self, PatchSpec, DEFAULT_SEQ_LEN};
use crate::scaling;
use crate::trainer::{self, TrainConfig, TrainStats};
use crate::world::{generate_world, PairedActivationBatch, PlantedWorld, WorldConfig};

/// First global sample index of the evaluation range.
pub const EVAL_OFFSET: u64 = 1 << 40;
const EVAL_BATCH: usize = 512;

#[derive(Debug, Parser)]
#[command(name = "xdiff", version, about = "Crosscoder model diffing on synthetic paired activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the effective world config and a sample batch.
    Generate(RunArgs),
    /// Train a crosscoder and save its weights.
    Train(RunArgs),
    /// Decoder-norm classification and twin pairs.
    Diff(RunArgs),
    /// Latent Scaling report.
    Scale(RunArgs),
    /// Causal patching through the chat readout.
    Patch(RunArgs),
    /// Every analysis report for saved weights.
    Report(RunArgs),
    /// Train, then report.
    All(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// World config file (key = value).
    #[arg(long = "config", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Training config file (key = value).
    #[arg(long, value_name = "PATH")]
    train_config: Option<PathBuf>,
    /// Crosscoder weights file.
    #[arg(long, value_name = "PATH")]
    weights: Option<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = "xdiff-out")]
    output_dir: PathBuf,
    /// Seed for both the world and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key; `world.` keys go to the world config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    k: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    mu: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    steps: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    batch_size: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    dict_size: Option<i64>,
    /// Samples used for evaluation and in generated batches.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Tokens per sequence for patch position windows.
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubcommandKind {
    Generate,
    Train,
    Diff,
    Scale,
    Patch,
    Report,
    All,
}

impl SubcommandKind {
    pub fn name(self) -> &'static str {
        match self {
            SubcommandKind::Generate => "generate",
            SubcommandKind::Train => "train",
            SubcommandKind::Diff => "diff",
            SubcommandKind::Scale => "scale",
            SubcommandKind::Patch => "patch",
            SubcommandKind::Report => "report",
            SubcommandKind::All => "all",
        }
    }

    fn needs_weights(self) -> bool {
        matches!(self, SubcommandKind::Diff | SubcommandKind::Scale | SubcommandKind::Patch | SubcommandKind::Report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub subcommand: SubcommandKind,
    pub world_config_path: Option<PathBuf>,
    pub train_config_path: Option<PathBuf>,
    pub weights_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    /// Applied in order after the config files.
    pub overrides: Vec<(String, String)>,
    pub samples: usize,
    pub seq_len: usize,
}

#[derive(Debug)]
pub enum CliError {
    /// Help or version text; not an error for the process.
    Help(String),
    Usage(String),
    Invalid(XdiffError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) => 2,
            CliError::Invalid(e) => e.exit_code(),
        }
    }
}

fn positive(name: &str, v: i64) -> std::result::Result<String, CliError> {
    if v < 1 {
        return Err(CliError::Invalid(XdiffError::Config(format!("--{name} must be at least 1, got {v}"))));
    }
    Ok(v.to_string())
}

pub fn parse_cli<I, T>(argv: I) -> std::result::Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Help(e.render().to_string()),
            _ => CliError::Usage(e.render().to_string()),
        }
    })?;
    let (kind, a) = match cli.command {
        Command::Generate(a) => (SubcommandKind::Generate, a),
        Command::Train(a) => (SubcommandKind::Train, a),
        Command::Diff(a) => (SubcommandKind::Diff, a),
        Command::Scale(a) => (SubcommandKind::Scale, a),
        Command::Patch(a) => (SubcommandKind::Patch, a),
        Command::Report(a) => (SubcommandKind::Report, a),
        Command::All(a) => (SubcommandKind::All, a),
    };
    if kind.needs_weights() && a.weights.is_none() {
        return Err(CliError::Usage(format!("`{}` requires --weights <PATH>\n", kind.name())));
    }
    if a.samples == 0 || a.seq_len == 0 {
        return Err(CliError::Invalid(XdiffError::Config("--samples and --seq-len must be at least 1".into())));
    }

    let mut overrides = Vec::new();
    if let Some(v) = a.variant {
        overrides.push(("variant".to_string(), v));
    }
    if let Some(v) = a.k {
        overrides.push(("k".to_string(), positive("k", v)?));
    }
    if let Some(v) = a.mu {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(CliError::Invalid(XdiffError::Config(format!("--mu must be nonnegative, got {v}"))));
        }
        overrides.push(("mu".to_string(), v.to_string()));
    }
    if let Some(v) = a.steps {
        overrides.push(("steps".to_string(), positive("steps", v)?));
    }
    if let Some(v) = a.lr {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Invalid(XdiffError::Config(format!("--lr must be positive, got {v}"))));
        }
        overrides.push(("lr".to_string(), v.to_string()));
    }
    if let Some(v) = a.batch_size {
        overrides.push(("batch_size".to_string(), positive("batch-size", v)?));
    }
    if let Some(v) = a.dict_size {
        overrides.push(("dict_size".to_string(), positive("dict-size", v)?));
    }
    for raw in &a.overrides {
        overrides.push(kv::split_override(raw).map_err(CliError::Invalid)?);
    }

    Ok(RunConfig {
        subcommand: kind,
        world_config_path: a.config,
        train_config_path: a.train_config,
        weights_path: a.weights,
        output_dir: a.output_dir,
        seed: a.seed,
        overrides,
        samples: a.samples,
        seq_len: a.seq_len,
    })
}

impl RunConfig {
    /// File configs, then `--seed`, then overrides in order.
    pub fn resolve_configs(&self) -> Result<(WorldConfig, TrainConfig)> {
        let mut world = match &self.world_config_path {
            Some(p) => WorldConfig::from_kv_text(&fs::read_to_string(p)?)?,
            None => WorldConfig::default(),
        };
        let mut train = match &self.train_config_path {
            Some(p) => TrainConfig::from_kv_text(&fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            world.seed = s;
            train.seed = s;
        }
        for (k, v) in &self.overrides {
            match k.strip_prefix("world.") {
                Some(wk) => world.set(wk, v)?,
                None => train.set(k, v)?,
            }
        }
        world.validate()?;
        train.validate()?;
        Ok((world, train))
    }
}

fn apply_thread_cap() {
    if let Some(n) = std::env::var("XDIFF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second call in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Consecutive evaluation batches covering `n` samples.
pub fn eval_batches(world: &PlantedWorld, first: u64, n: usize) -> Vec<PairedActivationBatch> {
    let mut out = Vec::new();
    let mut done = 0;
    while done < n {
        let size = EVAL_BATCH.min(n - done);
        out.push(world.sample_range(first + done as u64, size));
        done += size;
    }
    out
}

fn write_stats(path: &Path, label: &str, s: &TrainStats) -> Result<()> {
    let text = format!(
        "{label}.fve_base = {}\n{label}.fve_chat = {}\n{label}.fve_total = {}\n{label}.l0_mean = {}\n{label}.dead_fraction = {}\n",
        reports::fmt_f64(s.fve_base),
        reports::fmt_f64(s.fve_chat),
        reports::fmt_f64(s.fve_total),
        reports::fmt_f64(s.l0_mean),
        reports::fmt_f64(s.dead_fraction),
    );
    let mut existing = fs::read_to_string(path).unwrap_or_default();
    existing.push_str(&text);
    fs::write(path, existing)?;
    Ok(())
}

/// Which analyses a report run emits.
#[derive(Debug, Clone, Copy)]
struct Analyses {
    diff: bool,
    scale: bool,
    patch: bool,
}

fn analyze(
    cfg: &RunConfig,
    world: &PlantedWorld,
    params: &CrosscoderParams,
    which: Analyses,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let out = &cfg.output_dir;
    let val = eval_batches(world, EVAL_OFFSET, cfg.samples);
    let freq = diffing::frequency_stats(params, &val)?;
    let classes = diffing::classify(params, Some(&freq))?;

    if which.diff {
        let counts = diffing::class_counts(&classes);
        let mut pairs = diffing::twin_pairs(params, &classes, DEFAULT_TWIN_THRESHOLD);
        let train_like = eval_batches(world, 0, cfg.samples);
        diffing::annotate_divergence(params, &mut pairs, &train_like, &val)?;
        reports::write_latents(&out.join("latents.csv"), &classes)?;
        reports::write_twins(&out.join("twins.csv"), &pairs)?;
        reports::write_histogram(
            &out.join("delta_norm_hist.csv"),
            &diffing::delta_norm_histogram(&classes, reports::HISTOGRAM_BINS),
        )?;
        artifacts.extend(["latents.csv", "twins.csv", "delta_norm_hist.csv"].map(String::from));
        eprintln!(
            "classes: base-only {} chat-only {} shared {} other {} dead {}; twin pairs {}",
            counts.base_only,
            counts.chat_only,
            counts.shared,
            counts.other,
            counts.dead,
            pairs.len()
        );
    }

    let live: Vec<usize> = classes.iter().filter(|c| !c.dead).map(|c| c.latent).collect();
    let scaling_rows =
        if which.scale || which.patch { Some(scaling::latent_scaling_report(params, &val, &live)?) } else { None };

    if which.scale {
        let rows = scaling_rows.as_deref().unwrap_or_default();
        let order = scaling::rank_sum_order(rows);
        reports::write_scaling(&out.join("scaling.csv"), rows, &order)?;
        reports::write_nu_scatter(&out.join("nu_scatter.csv"), rows, &classes)?;
        artifacts.extend(["scaling.csv", "nu_scatter.csv"].map(String::from));
    }

    if which.patch {
        let by_norm = patching::order_by_delta_norm(&classes);
        let (best_n, worst_n) = patching::split_halves(&by_norm);
        let by_rank: Vec<usize> =
            scaling::rank_sum_order(scaling_rows.as_deref().unwrap_or_default()).into_iter().map(|(j, _)| j).collect();
        let (best_r, worst_r) = patching::split_halves(&by_rank);
        let specs = vec![
            PatchSpec::None,
            PatchSpec::All,
            PatchSpec::Error,
            PatchSpec::Template,
            PatchSpec::latent_set("best-half-delta-norm", best_n),
            PatchSpec::latent_set("worst-half-delta-norm", worst_n),
            PatchSpec::latent_set("best-half-rank-sum", best_r),
            PatchSpec::latent_set("worst-half-rank-sum", worst_r),
        ];
        let results = patching::run_patch_experiment(world, params, &val, &specs, cfg.seq_len)?;
        reports::write_patch(&out.join("patch.csv"), &results)?;
        artifacts.push("patch.csv".into());
    }
    Ok(())
}

/// Execute a parsed command line.
pub fn run(cfg: &RunConfig) -> Result<()> {
    apply_thread_cap();
    let (world_cfg, train_cfg) = cfg.resolve_configs()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let world_text = world_cfg.to_kv_text();
    let train_text = train_cfg.to_kv_text();
    let hash = reports::sha256_hex(format!("{world_text}\n{train_text}").as_bytes());
    let world = generate_world(&world_cfg)?;
    let out = &cfg.output_dir;
    let mut artifacts: Vec<String> = Vec::new();

    match cfg.subcommand {
        SubcommandKind::Generate => {
            fs::write(out.join("world.cfg"), &world_text)?;
            io::save_batch(&out.join("batch.xdiffact"), &world.sample_range(0, cfg.samples))?;
            artifacts.extend(["world.cfg", "batch.xdiffact"].map(String::from));
        }
        SubcommandKind::Train | SubcommandKind::All => {
            let (params, stats) = trainer::train(world.stream(0, train_cfg.batch_size), world_cfg.d, &train_cfg)?;
            let weights = cfg.weights_path.clone().unwrap_or_else(|| out.join("weights.xcoder"));
            io::save_params(&weights, &params)?;
            fs::write(out.join("world.cfg"), &world_text)?;
            fs::write(out.join("train.cfg"), &train_text)?;
            reports::write_train_log(&out.join("train_log.csv"), &stats.loss_history)?;
            let stats_path = out.join("train_stats.txt");
            let _ = fs::remove_file(&stats_path);
            write_stats(&stats_path, "train", &stats)?;
            let held = trainer::compute_stats(&params, &eval_batches(&world, EVAL_OFFSET, cfg.samples))?;
            write_stats(&stats_path, "heldout", &held)?;
            eprintln!(
                "trained {} steps: held-out FVE {:.4}, L0 {:.2}, dead {:.3}",
                train_cfg.steps, held.fve_total, held.l0_mean, held.dead_fraction
            );
            artifacts.extend(
                [weights.strip_prefix(out).unwrap_or(&weights).display().to_string()]
                    .into_iter()
                    .chain(["world.cfg", "train.cfg", "train_log.csv", "train_stats.txt"].map(String::from)),
            );
            if cfg.subcommand == SubcommandKind::All {
                analyze(cfg, &world, &params, Analyses { diff: true, scale: true, patch: true }, &mut artifacts)?;
            }
        }
        kind => {
            let path = cfg.weights_path.as_ref().ok_or_else(|| XdiffError::Config("--weights is required".into()))?;
            let params = io::load_params(path)?;
            if params.dim() != world_cfg.d {
                return Err(XdiffError::Dimension(format!(
                    "weights have dimension {}, world has {}",
                    params.dim(),
                    world_cfg.d
                )));
            }
            let which = match kind {
                SubcommandKind::Diff => Analyses { diff: true, scale: false, patch: false },
                SubcommandKind::Scale => Analyses { diff: false, scale: true, patch: false },
                SubcommandKind::Patch => Analyses { diff: false, scale: false, patch: true },
                _ => Analyses { diff: true, scale: true, patch: true },
            };
            analyze(cfg, &world, &params, which, &mut artifacts)?;
        }
    }

    let seed = cfg.seed.unwrap_or(train_cfg.seed);
    reports::Manifest { command: cfg.subcommand.name().into(), config_hash: hash, seed, artifacts }.write(out)?;
    Ok(())
}
