//! Command-line front end. Exit codes: 0 success, 1 internal failure,
//! 2 user or configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, SECTIONS};
use crate::dataset::io::load_split;
use crate::dataset::{build_protocol, SplitName, VideoClip};
use crate::error::{Error, Result};
use crate::evaluation::{
    embeddings_csv, evaluate_head, extract_embeddings, fit_finetune, fit_linear_probe, CvsProtocol, ProbeMode,
    ProbeResult,
};
use crate::trainer::{
    epoch_checkpoint, load_encoder, run_training, RunOptions, RunSummary, Variant, CODE_VERSION, FINAL_CHECKPOINT,
    METRICS_FILE,
};

pub const CONFIG_SNAPSHOT: &str = "config.ini";
pub const VERSION_FILE: &str = "VERSION";
pub const RESULTS_DIR: &str = "results";
pub const ABLATION_REPORT: &str = "ablation.csv";

#[derive(Parser, Debug)]
#[command(
    name = "viewgen",
    version,
    about = "Viewpoint-invariant self-supervised video representations",
    after_help = "Any config value can be overridden with --section.key=value, e.g. --train.stage2_epochs=0"
)]
pub struct Cli {
    /// Configuration file ([data], [encoder], [train], [eval] sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, training and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Disable the worker thread pool.
    #[arg(long, global = true)]
    pub single_threaded: bool,
    /// Suppress per-epoch progress.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the multi-view dataset and write its manifests.
    GenerateData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Self-supervised pretraining into a new run directory.
    Pretrain {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Parent of the run directory.
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Continue an interrupted run directory instead of starting one.
        #[arg(long, conflicts_with = "runs")]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a run's checkpoint on CVS1-3.
    Probe(EvalArgs),
    /// End-to-end finetuning of a run's checkpoint, evaluated on CVS1-3.
    Finetune(EvalArgs),
    /// Write per-clip embeddings of one split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// pretrain, probe_train, cvs1, cvs2 or cvs3.
        #[arg(long, default_value = "cvs3")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to results/embeddings_<split>.csv in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and probe every ablation variant with the same seed.
    Ablate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Subset of full, no_3d, no_adv, mixup_only, infonce.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Defaults to the run's final checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Separates `--section.key=value` (or `--section.key value`) overrides from
/// the arguments clap understands.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let is_override = a
            .strip_prefix("--")
            .and_then(|s| s.split('=').next()?.split_once('.'))
            .is_some_and(|(sec, _)| SECTIONS.contains(&sec));
        if !is_override {
            rest.push(a);
            continue;
        }
        let body = a[2..].to_string();
        if body.contains('=') {
            overrides.push(body);
        } else {
            let value = it.next().unwrap_or_default();
            overrides.push(format!("{body}={value}"));
        }
    }
    (rest, overrides)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I: IntoIterator<Item = String>>(args: I) -> Result<()> {
    let (rest, overrides) = split_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::invalid(e.to_string().trim_end().to_string())),
    };
    execute(&cli, &overrides)
}

/// Process exit code for a command result.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if e.is_user_error() => 2,
        Err(_) => 1,
    }
}

fn resolve_config(base: Option<&Path>, cli: &Cli, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match (cli.config.as_deref(), base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) if b.exists() => RunConfig::load(b)?,
        _ => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli, overrides: &[String]) -> Result<()> {
    let parallel = !cli.single_threaded;
    #[cfg(feature = "parallel")]
    if !parallel {
        // Only the first call can configure the global pool; later calls in
        // the same process keep whatever was set.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let verbose = !cli.quiet;
    match &cli.command {
        Command::GenerateData { out } => {
            let cfg = resolve_config(None, cli, overrides)?;
            let counts = generate_data(&cfg, out, cli.force)?;
            for (name, n) in counts {
                println!("{:<12} {n}", name.dir());
            }
            Ok(())
        }
        Command::Pretrain { data, runs, resume } => {
            let (cfg, run_dir, resume) = match resume {
                Some(dir) => {
                    require(dir)?;
                    let snap = dir.join(CONFIG_SNAPSHOT);
                    require(&snap)?;
                    (RunConfig::load(&snap)?, dir.clone(), true)
                }
                None => {
                    let cfg = resolve_config(None, cli, overrides)?;
                    let dir = create_run_dir(runs, cfg.train.seed, "")?;
                    write_snapshot(&dir, &cfg)?;
                    (cfg, dir, false)
                }
            };
            let clips = load_pretrain(data)?;
            let opts = RunOptions {
                resume,
                parallel,
                verbose,
                ..RunOptions::default()
            };
            let s = pretrain(&cfg, &clips, &run_dir, &opts)?;
            println!("run directory {}", run_dir.display());
            println!("epochs {} steps {} rejected {}", s.epochs_completed, s.steps, s.rejected_steps);
            Ok(())
        }
        Command::Probe(a) | Command::Finetune(a) => {
            let mode = if matches!(cli.command, Command::Probe(_)) {
                ProbeMode::Linear
            } else {
                ProbeMode::Finetune
            };
            require(&a.run)?;
            let cfg = resolve_config(Some(&a.run.join(CONFIG_SNAPSHOT)), cli, overrides)?;
            let ck = a.checkpoint.clone().unwrap_or_else(|| a.run.join(FINAL_CHECKPOINT));
            let results = evaluate(&cfg, &ck, &a.data, mode)?;
            let dir = a.run.join(RESULTS_DIR);
            for r in &results {
                let path = dir.join(result_file_name(mode, r.protocol));
                write_json(&path, r)?;
                println!("{} {:?} top1 {:.4}  -> {}", r.protocol.name(), mode, r.top1_accuracy, path.display());
            }
            Ok(())
        }
        Command::ExportEmbeddings {
            run,
            data,
            split,
            checkpoint,
            out,
        } => {
            require(run)?;
            let split = parse_split(split)?;
            let ck = checkpoint.clone().unwrap_or_else(|| run.join(FINAL_CHECKPOINT));
            let out = out
                .clone()
                .unwrap_or_else(|| run.join(RESULTS_DIR).join(format!("embeddings_{}.csv", split.dir())));
            let manifest = split.manifest_path(data);
            require(&ck)?;
            require(&manifest)?;
            let (enc, params) = load_encoder::<f32>(&ck)?;
            let (entries, clips) = load_split(&manifest)?;
            let emb = extract_embeddings(&enc, &params, &clips)?;
            let paths: Vec<String> = entries.into_iter().map(|e| e.clip_path).collect();
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&out, embeddings_csv(&paths, &clips, &emb)).map_err(|e| Error::io(&out, e))?;
            println!("{} rows -> {}", clips.len(), out.display());
            Ok(())
        }
        Command::Ablate { data, runs, variants } => {
            let cfg = resolve_config(None, cli, overrides)?;
            let variants = variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
            let dir = create_run_dir(runs, cfg.train.seed, "-ablate")?;
            write_snapshot(&dir, &cfg)?;
            let rows = ablate(&cfg, data, &dir, &variants, parallel, verbose)?;
            let report = dir.join(ABLATION_REPORT);
            print!("{}", fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?);
            println!("report {}", report.display());
            match rows.iter().find_map(|r| r.error.as_ref()) {
                Some(e) => Err(Error::invalid(format!("one or more variants failed; first error: {e}"))),
                None => Ok(()),
            }
        }
    }
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

fn parse_split(s: &str) -> Result<SplitName> {
    SplitName::ALL
        .into_iter()
        .find(|n| n.dir() == s)
        .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
}

pub fn result_file_name(mode: ProbeMode, p: CvsProtocol) -> String {
    let m = match mode {
        ProbeMode::Linear => "linear",
        ProbeMode::Finetune => "finetune",
    };
    format!("probe_{m}_{}.json", p.name().to_lowercase())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

/// Renders the dataset into `out`; refuses a non-empty directory unless
/// `force`.
pub fn generate_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<(SplitName, usize)>> {
    let protocol = build_protocol(&cfg.data)?;
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            for name in SplitName::ALL {
                let d = out.join(name.dir());
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                }
            }
        }
    }
    protocol.write(out)
}

/// `<parent>/<timestamp>-seed<seed><suffix>`, made unique with a counter.
pub fn create_run_dir(parent: &Path, seed: u64, suffix: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}{suffix}");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded counter")
}

pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let snap = dir.join(CONFIG_SNAPSHOT);
    let text = format!("# {CODE_VERSION}\n{}", cfg.to_ini());
    fs::write(&snap, text).map_err(|e| Error::io(&snap, e))?;
    let ver = dir.join(VERSION_FILE);
    fs::write(&ver, format!("{CODE_VERSION}\n")).map_err(|e| Error::io(&ver, e))
}

pub fn load_pretrain(data: &Path) -> Result<Vec<VideoClip>> {
    let manifest = SplitName::Pretrain.manifest_path(data);
    require(&manifest)?;
    Ok(load_split(&manifest)?.1)
}

pub fn pretrain(cfg: &RunConfig, clips: &[VideoClip], run_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    run_training::<f32>(&cfg.train, &cfg.encoder, clips, run_dir, opts)
}

/// Fits one head (linear or finetuned) on the probe-train split and scores
/// it on CVS1-3.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, mode: ProbeMode) -> Result<Vec<ProbeResult>> {
    require(checkpoint)?;
    let train_manifest = SplitName::ProbeTrain.manifest_path(data);
    require(&train_manifest)?;
    let (enc, params) = load_encoder::<f32>(checkpoint)?;
    let train = load_split(&train_manifest)?.1;
    let mut probe = cfg.eval.probe.clone();
    let (head, params) = match mode {
        ProbeMode::Linear => (fit_linear_probe(&enc, &params, &train, &probe)?, params),
        ProbeMode::Finetune => {
            probe.epochs = cfg.eval.finetune_epochs;
            fit_finetune(&enc, &params, &train, &probe)?
        }
    };
    let ten_crop = cfg.eval.multicrop.then_some(cfg.eval.crop_size);
    SplitName::test_protocols()
        .into_iter()
        .map(|(name, _)| {
            let manifest = name.manifest_path(data);
            require(&manifest)?;
            let test = load_split(&manifest)?.1;
            evaluate_head(&enc, &params, &head, &test, mode, probe.seed, ten_crop)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// CVS1, CVS2, CVS3 linear-probe accuracy.
    pub accuracy: Option<[f64; 3]>,
    pub error: Option<String>,
}

/// Text of the ablation CSV; failed variants have empty cells.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,CVS1,CVS2,CVS3,status\n");
    for r in rows {
        match (&r.accuracy, &r.error) {
            (Some([a, b, c]), _) => writeln!(s, "{},{a},{b},{c},ok", r.variant),
            (None, e) => writeln!(
                s,
                "{},,,,\"failed: {}\"",
                r.variant,
                e.as_deref().unwrap_or("unknown").replace('"', "'")
            ),
        }
        .expect("string write");
    }
    s
}

/// Trains and probes each variant under `dir/<variant>`. The InfoNCE run
/// goes first; the others start from its stage-1 checkpoint, which is the
/// same state they would reach on their own.
pub fn ablate(
    cfg: &RunConfig,
    data: &Path,
    dir: &Path,
    variants: &[Variant],
    parallel: bool,
    verbose: bool,
) -> Result<Vec<AblationRow>> {
    let clips = load_pretrain(data)?;
    let mut order: Vec<Variant> = variants.to_vec();
    order.sort_by_key(|v| *v != Variant::InfoNce);
    order.dedup();
    let mut shared: Option<PathBuf> = None;
    let mut rows = Vec::new();
    for v in order {
        let mut vcfg = cfg.clone();
        vcfg.train = v.apply(&cfg.train);
        let vdir = dir.join(v.to_string());
        let outcome = (|| -> Result<[f64; 3]> {
            fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            write_snapshot(&vdir, &vcfg)?;
            let init_from = match &shared {
                Some(src) if v != Variant::InfoNce && cfg.train.stage1_epochs > 0 => {
                    copy_stage1_metrics(&src.join(METRICS_FILE), &vdir.join(METRICS_FILE), cfg.train.stage1_epochs)?;
                    Some(epoch_checkpoint(src, cfg.train.stage1_epochs))
                }
                _ => None,
            };
            if verbose {
                eprintln!("variant {v}");
            }
            let opts = RunOptions {
                init_from,
                parallel,
                verbose,
                ..RunOptions::default()
            };
            pretrain(&vcfg, &clips, &vdir, &opts)?;
            if v == Variant::InfoNce {
                shared = Some(vdir.clone());
            }
            let results = evaluate(&vcfg, &vdir.join(FINAL_CHECKPOINT), data, ProbeMode::Linear)?;
            for r in &results {
                write_json(&vdir.join(RESULTS_DIR).join(result_file_name(ProbeMode::Linear, r.protocol)), r)?;
            }
            Ok([results[0].top1_accuracy, results[1].top1_accuracy, results[2].top1_accuracy])
        })();
        rows.push(match outcome {
            Ok(acc) => AblationRow {
                variant: v,
                accuracy: Some(acc),
                error: None,
            },
            Err(e) => {
                eprintln!("variant {v} failed: {e}");
                AblationRow {
                    variant: v,
                    accuracy: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    rows.sort_by_key(|r| Variant::ALL.iter().position(|v| *v == r.variant));
    let report = dir.join(ABLATION_REPORT);
    fs::write(&report, ablation_csv(&rows)).map_err(|e| Error::io(&report, e))?;
    Ok(rows)
}

fn copy_stage1_metrics(src: &Path, dst: &Path, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
    let mut out = String::new();
    for line in text.lines() {
        let rec: crate::trainer::MetricsRecord = serde_json::from_str(line)?;
        if rec.epoch < epochs {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(dst, out).map_err(|e| Error::io(dst, e))
}
