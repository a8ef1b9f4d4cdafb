//! Command-line surface: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure. Every run is a pure function of the config file, the flag
//! overrides and the seed, so repeated invocations produce byte-identical
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::augment::RngStream;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    cache_path_for, parse_manifest, read_cached, scan_classes, write_cached, ClipSource, Dataset,
};
use crate::dsp::{log_mel, LogMelSpec};
use crate::error::{Error, Result};
use crate::graph::BnMode;
use crate::model::{
    count_macs, count_params, forward, init_params, stage_output_sizes, ModelState, MEL_BINS,
};
use crate::runconfig::RunConfig;
use crate::train::{evaluate, fine_tune, train, TrainOutcome};
use crate::verify::{model_gradcheck, op_gradchecks, F32_TOL, F64_TOL};

/// Substream tag for model initialization (shared by train and bench so a
/// fixed seed always builds the same starting point).
const INIT_STREAM: u64 = 0x11;

#[derive(Parser)]
#[command(name = "erann", version, about = "Residual audio network pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config file + overrides shared by most subcommands. Precedence:
/// defaults, then the file, then --set pairs in order, then --seed.
#[derive(Args)]
struct ConfigArgs {
    /// Run config file (key=value lines)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for pair in &self.set {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got '{pair}'"))
            })?;
            cfg.apply(key.trim(), value)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Precompute the log-mel cache for every clip in a manifest
    Features {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest file (path,labels,fold,group)
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory for .lmsp cache files
        #[arg(long, value_name = "DIR")]
        cache_dir: PathBuf,
        /// Fixed class vocabulary, one name per line (default: scan manifest)
        #[arg(long, value_name = "FILE")]
        classes: Option<PathBuf>,
    },
    /// Train a model from scratch
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Output directory for checkpoints and the metric trace
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Hold out this fold for evaluation (default: evaluate on the train split)
        #[arg(long, value_name = "FOLD")]
        eval_fold: Option<i64>,
        #[arg(long, value_name = "FILE")]
        classes: Option<PathBuf>,
    },
    /// Transfer a trained body onto a new task and keep training
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Source checkpoint for the transferred body
        #[arg(long, value_name = "FILE")]
        from: PathBuf,
        /// Reinitialize the classifier head instead of copying it
        #[arg(long)]
        reinit_head: bool,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "FOLD")]
        eval_fold: Option<i64>,
        #[arg(long, value_name = "FILE")]
        classes: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest split
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Restrict to one fold (default: every clip)
        #[arg(long, value_name = "FOLD")]
        eval_fold: Option<i64>,
        #[arg(long, value_name = "FILE")]
        classes: Option<PathBuf>,
    },
    /// Report parameter count, MAC count and per-stage shapes
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input length in whole seconds
        #[arg(long, default_value_t = 10)]
        t: usize,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per parameter tensor in the full-model check
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
    /// Time eval-mode forward passes at batch sizes 1 and 32
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input length in whole seconds
        #[arg(long, default_value_t = 1)]
        t: usize,
    },
}

/// Run the CLI; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Features { config, manifest, cache_dir, classes } => {
            cmd_features(&config, &manifest, &cache_dir, classes.as_deref())
        }
        Cmd::Train { config, manifest, out_dir, eval_fold, classes } => {
            cmd_train(&config, &manifest, &out_dir, eval_fold, classes.as_deref(), None, false)
        }
        Cmd::Finetune { config, from, reinit_head, manifest, out_dir, eval_fold, classes } => {
            cmd_train(
                &config,
                &manifest,
                &out_dir,
                eval_fold,
                classes.as_deref(),
                Some(&from),
                reinit_head,
            )
        }
        Cmd::Eval { config, checkpoint, manifest, eval_fold, classes } => {
            cmd_eval(&config, &checkpoint, &manifest, eval_fold, classes.as_deref())
        }
        Cmd::Analyze { config, t } => cmd_analyze(&config, t),
        Cmd::Gradcheck { seed, coords } => cmd_gradcheck(seed, coords),
        Cmd::Bench { config, t } => cmd_bench(&config, t),
    }
}

/// Load a manifest plus its class vocabulary (explicit file or scanned).
fn load_dataset(manifest: &Path, classes: Option<&Path>) -> Result<Dataset> {
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", manifest.display())))?;
    let class_list = match classes {
        Some(path) => {
            let body = fs::read_to_string(path).map_err(|e| {
                Error::Manifest(format!("cannot read class list {}: {e}", path.display()))
            })?;
            let names: Vec<String> =
                body.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if names.is_empty() {
                return Err(Error::Manifest(format!("class list {} is empty", path.display())));
            }
            names
        }
        None => scan_classes(&text)?,
    };
    let base = manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, &class_list, base, true)
}

/// Train/eval index split for an optional held-out fold.
fn split_indices(dataset: &Dataset, eval_fold: Option<i64>) -> Result<(Vec<usize>, Vec<usize>)> {
    match eval_fold {
        None => {
            let all: Vec<usize> = (0..dataset.clips.len()).collect();
            Ok((all.clone(), all))
        }
        Some(fold) => {
            let mut train_idx = Vec::new();
            let mut eval_idx = Vec::new();
            for (i, clip) in dataset.clips.iter().enumerate() {
                if clip.fold == Some(fold) {
                    eval_idx.push(i);
                } else {
                    train_idx.push(i);
                }
            }
            if eval_idx.is_empty() {
                return Err(Error::Config(format!("no clips carry fold {fold}")));
            }
            if train_idx.is_empty() {
                return Err(Error::Config(format!("every clip carries fold {fold}")));
            }
            Ok((train_idx, eval_idx))
        }
    }
}

fn check_task_head(cfg: &RunConfig) -> Result<()> {
    if cfg.task.head() != cfg.model.head {
        return Err(Error::Config(format!(
            "task '{}' pairs with head '{}', but the config selects '{}'",
            cfg.task.name(),
            cfg.task.head().name(),
            cfg.model.head.name()
        )));
    }
    Ok(())
}

fn check_class_count(cfg_n: usize, dataset: &Dataset) -> Result<()> {
    if cfg_n != dataset.n_classes() {
        return Err(Error::Config(format!(
            "model.N={cfg_n} but the manifest defines {} classes",
            dataset.n_classes()
        )));
    }
    Ok(())
}

fn cmd_features(
    config: &ConfigArgs,
    manifest: &Path,
    cache_dir: &Path,
    classes: Option<&Path>,
) -> Result<()> {
    let cfg = config.load()?;
    let dataset = load_dataset(manifest, classes)?;
    fs::create_dir_all(cache_dir)?;
    let mel = &cfg.features;
    let (mut computed, mut reused) = (0usize, 0usize);
    for (i, clip) in dataset.clips.iter().enumerate() {
        let ClipSource::File(path) = &clip.source else { continue };
        let cache_path = cache_path_for(cache_dir, path);
        if read_cached(&cache_path, mel)?.is_some() {
            reused += 1;
            continue;
        }
        let audio = dataset.load_audio(i)?;
        let spec = log_mel(&audio, mel)?;
        write_cached(&cache_path, &spec, mel)?;
        computed += 1;
    }
    println!(
        "features: {computed} computed, {reused} reused ({} clips -> {})",
        dataset.clips.len(),
        cache_dir.display()
    );
    Ok(())
}

fn cmd_train(
    config: &ConfigArgs,
    manifest: &Path,
    out_dir: &Path,
    eval_fold: Option<i64>,
    classes: Option<&Path>,
    from: Option<&Path>,
    reinit_head: bool,
) -> Result<()> {
    let cfg = config.load()?;
    check_task_head(&cfg)?;
    let dataset = load_dataset(manifest, classes)?;
    check_class_count(cfg.model.n_classes, &dataset)?;
    let (train_idx, eval_idx) = split_indices(&dataset, eval_fold)?;
    let tc = cfg.train_config();

    let started = Instant::now();
    let outcome = match from {
        None => {
            let mut rng = RngStream::substream(cfg.seed, INIT_STREAM);
            let state = init_params::<f32>(cfg.model.clone(), &mut rng)?;
            train(state, &dataset, &train_idx, &eval_idx, &tc)?
        }
        Some(src_path) => {
            let src = load_checkpoint(src_path)?;
            fine_tune(&src.state, &cfg.model, reinit_head, &dataset, &train_idx, &eval_idx, &tc)?
        }
    };
    let elapsed = started.elapsed().as_secs_f64();

    write_outputs(out_dir, &outcome)?;
    let metric_name = cfg.task.metric_name();
    if let Some(last) = outcome.trace.last() {
        println!(
            "train: {} iterations in {elapsed:.1}s, final {metric_name}={:.6} (ema {:.6})",
            outcome.iterations_run, last.live_metric, last.metric
        );
    } else {
        println!("train: {} iterations in {elapsed:.1}s", outcome.iterations_run);
    }
    if let Some(best) = &outcome.best {
        println!("best: {metric_name}={:.6} at iteration {}", best.metric, best.iteration);
    }
    println!(
        "wrote {}, {}, {}",
        out_dir.join("final.ernn").display(),
        out_dir.join("best.ernn").display(),
        out_dir.join("trace.txt").display()
    );
    Ok(())
}

/// final.ernn (live params + EMA shadow), best.ernn (best EMA snapshot as a
/// plain model), trace.txt (one line per evaluation).
fn write_outputs(out_dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    save_checkpoint(&outcome.state, Some(&outcome.ema), &out_dir.join("final.ernn"))?;
    if let Some(best) = &outcome.best {
        let mut best_state = outcome.state.with_params(best.params.clone())?;
        best_state.bn = best.bn.clone();
        save_checkpoint(&best_state, None, &out_dir.join("best.ernn"))?;
    }
    let mut trace = String::new();
    for record in &outcome.trace {
        trace.push_str(&record.to_line());
        trace.push('\n');
    }
    fs::write(out_dir.join("trace.txt"), trace)?;
    Ok(())
}

fn cmd_eval(
    config: &ConfigArgs,
    checkpoint: &Path,
    manifest: &Path,
    eval_fold: Option<i64>,
    classes: Option<&Path>,
) -> Result<()> {
    let cfg = config.load()?;
    let ck = load_checkpoint(checkpoint)?;
    if cfg.task.head() != ck.state.config.head {
        return Err(Error::Config(format!(
            "task '{}' pairs with head '{}', but the checkpoint uses '{}'",
            cfg.task.name(),
            cfg.task.head().name(),
            ck.state.config.head.name()
        )));
    }
    let dataset = load_dataset(manifest, classes)?;
    check_class_count(ck.state.config.n_classes, &dataset)?;
    let idx: Vec<usize> = match eval_fold {
        None => (0..dataset.clips.len()).collect(),
        Some(fold) => {
            let v: Vec<usize> = (0..dataset.clips.len())
                .filter(|&i| dataset.clips[i].fold == Some(fold))
                .collect();
            if v.is_empty() {
                return Err(Error::Config(format!("no clips carry fold {fold}")));
            }
            v
        }
    };
    let metric_name = cfg.task.metric_name();
    println!("eval: {} of {} clips, model {}", idx.len(), dataset.clips.len(), ck.state.config.name());
    let live = evaluate(&ck.state, &dataset, &idx, cfg.task, &cfg.features)?;
    println!("live: {metric_name}={live:.6}");
    if let Some(shadow) = &ck.ema_shadow {
        let ema_state = ck.state.with_params(shadow.clone())?;
        let ema = evaluate(&ema_state, &dataset, &idx, cfg.task, &cfg.features)?;
        println!("ema:  {metric_name}={ema:.6}");
    }
    Ok(())
}

/// 24502863 -> "24.5M", 2461234567 -> "2.5G".
fn fmt_count(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.1}G", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}k", x / 1e3)
    } else {
        format!("{n}")
    }
}

fn cmd_analyze(config: &ConfigArgs, t: usize) -> Result<()> {
    let cfg = config.load()?;
    let model = &cfg.model;
    let params = count_params(model)?;
    let macs = count_macs(model, t)?;
    println!(
        "{} (W={} s_m={} N={} head={})",
        model.name(),
        model.w,
        model.s_m,
        model.n_classes,
        model.head.name()
    );
    println!("parameters: {} ({params})", fmt_count(params));
    println!("MACs at t={t}s: {} ({macs})", fmt_count(macs));
    println!("stage outputs at t={t}s (mel x frames x channels):");
    let rows = stage_output_sizes(model, t)?;
    let labels = ["extractor", "stage1", "stage2", "stage3", "stage4", "stage5"];
    for (label, (f, frames, ch)) in labels.iter().zip(&rows) {
        println!("  {label:<9} {f:>4} x {frames:>6} x {ch:>4}");
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, coords: usize) -> Result<()> {
    let mut failures = 0usize;
    for (tag, tol, checks) in
        [("f64", F64_TOL, op_gradchecks::<f64>(seed)?), ("f32", F32_TOL, op_gradchecks::<f32>(seed)?)]
    {
        println!("operator checks ({tag}, tol {tol:.0e}):");
        for c in checks {
            let ok = c.max_rel_err < tol;
            failures += usize::from(!ok);
            let status = if ok { "ok" } else { "FAIL" };
            println!("  {:<24} max rel err {:>10.3e}  {status}", c.name, c.max_rel_err);
        }
    }
    println!("full model ({coords} coords per tensor):");
    let report = model_gradcheck(seed, coords)?;
    for (tag, tol, check) in
        [("f64", F64_TOL, &report.f64_check), ("f32", F32_TOL, &report.f32_check)]
    {
        let ok = check.max_rel_err < tol;
        failures += usize::from(!ok);
        let status = if ok { "ok" } else { "FAIL" };
        println!(
            "  {tag} ({} coords) max rel err {:>10.3e} (tol {tol:.0e})  {status}",
            check.checks, check.max_rel_err
        );
        println!("    worst: {}", check.worst);
    }
    println!("  {} stencils re-centered off break points", report.nudged);
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} gradient check(s) out of tolerance")));
    }
    println!("gradient verification passed");
    Ok(())
}

fn cmd_bench(config: &ConfigArgs, t: usize) -> Result<()> {
    let cfg = config.load()?;
    let mut rng = RngStream::substream(cfg.seed, INIT_STREAM);
    let state: ModelState<f32> = init_params(cfg.model.clone(), &mut rng)?;
    let mut spec = LogMelSpec {
        n_mels: MEL_BINS,
        t_s: 128 * t,
        t_seconds: t,
        values: vec![0.0; MEL_BINS * 128 * t],
    };
    for v in &mut spec.values {
        *v = rng.uniform(-8.0, 2.0) as f32;
    }
    println!("bench: {} at t={t}s, eval-mode forward", cfg.model.name());
    for &batch in &[1usize, 32] {
        let specs = vec![spec.clone(); batch];
        let mut reps = 0usize;
        let started = Instant::now();
        loop {
            forward(&state, &specs, BnMode::Eval)?;
            reps += 1;
            if started.elapsed().as_secs_f64() >= 1.0 || reps >= 8 {
                break;
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        let clips_per_s = (batch * reps) as f64 / elapsed;
        println!("  batch {batch:>2}: {clips_per_s:>8.2} clips/s ({reps} passes, {elapsed:.2}s)");
    }
    Ok(())
}
