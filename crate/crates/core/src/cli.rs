//! Command-line front end: `synth`, `preprocess`, `train`, `eval`, `compare`, `explain`, `report`.
//!
//! Settings resolve as flag > `--config` TOML > built-in default. Exit codes:
//! 0 success, 1 usage, 2 invalid input, 3 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::cropper::{crop_clip, CropMode};
use crate::error::{Error, ErrorCategory, Result};
use crate::evaluator::{
    compare, metrics, read_predictions, roc_points, write_predictions, write_report, ComparisonReport, EvalReport,
    PredictionRow, DEFAULT_THRESHOLD,
};
use crate::explainer::{explain, overlay_export, write_attention_dump};
use crate::models::{clip_tensor, Architecture};
use crate::pipeline::{ensure_split, parse_split, split_name, split_windows, ClipStore, PipelineConfig};
use crate::sampler::ObservationWindow;
use crate::synthgen::{make_dataset_with, write_dataset};
use crate::trackdata::{load_manifest, write_atomic, DiskFrames, Manifest, SplitTag};
use crate::trainer::{
    build_examples, load_checkpoint, predict_all, save_checkpoint, train, write_metrics_log, Checkpoint, Example,
};

#[derive(Parser, Debug)]
#[command(name = "pedcross", version, about = "Pedestrian crossing anticipation toolkit")]
pub struct Cli {
    /// TOML file with run settings (flags take precedence).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        class_ratio: Option<f64>,
        /// Square frame side in pixels.
        #[arg(long)]
        image_size: Option<u32>,
        #[arg(long)]
        noise: Option<f64>,
        /// Also write figure/head/leg/marker masks.
        #[arg(long)]
        masks: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split tracks, sample windows and crop them into a clip store.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<CropMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long, required_unless_present = "store", conflicts_with = "store")]
        manifest: Option<PathBuf>,
        /// Clip store from `preprocess`.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<CropMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "store", conflicts_with = "store")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-model analyses over several eval reports.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heatmaps for one sample.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "store", conflicts_with = "store")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Table of every eval report under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<CropMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(cat: ErrorCategory) -> i32 {
    match cat {
        ErrorCategory::Usage => 1,
        ErrorCategory::Validation => 2,
        ErrorCategory::Runtime => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.category())
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    json: bool,
}

impl Ctx {
    fn workers(&self) -> usize {
        self.cfg.workers.max(1)
    }

    /// Prints `value` as JSON with `--json`, otherwise the human text.
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> Result<()> {
        let mut out = std::io::stdout().lock();
        let text = if self.json {
            serde_json::to_string_pretty(value)?
        } else {
            human()
        };
        let _ = writeln!(out, "{text}");
        Ok(())
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let mut ctx = Ctx { cfg, json: cli.json };
    match &cli.command {
        Command::Synth {
            n,
            rho,
            class_ratio,
            image_size,
            noise,
            masks,
            out,
        } => {
            let s = &mut ctx.cfg.synth;
            if let Some(v) = n {
                s.n = *v;
            }
            if let Some(v) = rho {
                s.rho = *v;
            }
            if let Some(v) = class_ratio {
                s.class_ratio = *v;
            }
            if let Some(v) = image_size {
                s.image_size = [*v, *v];
            }
            if let Some(v) = noise {
                s.noise = *v;
            }
            cmd_synth(&ctx, *masks, out)
        }
        Command::Preprocess { manifest, mode, out } => {
            if let Some(m) = mode {
                ctx.cfg.crop.mode = *m;
            }
            cmd_preprocess(&ctx, manifest, out)
        }
        Command::Train {
            manifest,
            store,
            arch,
            mode,
            epochs,
            lr,
            batch_size,
            out,
        } => {
            if let Some(m) = mode {
                ctx.cfg.crop.mode = *m;
            }
            let t = &mut ctx.cfg.train;
            if let Some(v) = epochs {
                t.epochs = *v;
            }
            if let Some(v) = lr {
                t.adam.lr = *v;
            }
            if let Some(v) = batch_size {
                t.batch_size = *v;
            }
            cmd_train(&ctx, source(manifest, store), *arch, mode.is_some(), out)
        }
        Command::Eval {
            ckpt,
            manifest,
            store,
            split,
            threshold,
            out,
        } => cmd_eval(
            &ctx,
            ckpt,
            source(manifest, store),
            parse_split(split)?,
            threshold.unwrap_or(DEFAULT_THRESHOLD),
            out,
        ),
        Command::Compare { reports, threshold, out } => cmd_compare(&ctx, reports, *threshold, out),
        Command::Explain {
            ckpt,
            manifest,
            store,
            sample,
            out,
        } => cmd_explain(&ctx, ckpt, source(manifest, store), sample, out),
        Command::Report { dir, out } => cmd_report(&ctx, dir, out.as_deref()),
    }
}

enum Source<'a> {
    Manifest(&'a Path),
    Store(&'a Path),
}

fn source<'a>(manifest: &'a Option<PathBuf>, store: &'a Option<PathBuf>) -> Source<'a> {
    match (manifest, store) {
        (_, Some(s)) => Source::Store(s),
        (Some(m), None) => Source::Manifest(m),
        (None, None) => unreachable!("clap requires one of --manifest/--store"),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    write_report(value, path)
}

fn cmd_synth(ctx: &Ctx, masks: bool, out: &Path) -> Result<()> {
    let spec = &ctx.cfg.synth;
    let ds = make_dataset_with(spec, ctx.workers())?;
    ensure_dir(out)?;
    write_dataset(&ds, out, masks, ctx.workers())?;
    let mut suggested = PipelineConfig::for_synthetic(spec);
    suggested.workers = ctx.cfg.workers;
    write_atomic(&out.join("pipeline.toml"), suggested.to_toml()?.as_bytes())?;
    write_json(&json!({ "synth": spec, "masks": masks }), &out.join("synth.json"))?;
    let crossing = ds
        .manifest
        .tracks
        .iter()
        .filter(|t| t.label == crate::trackdata::CrossingLabel::Crossing)
        .count();
    ctx.emit(
        &json!({ "tracks": ds.manifest.len(), "crossing": crossing, "out": display(out) }),
        || {
            format!(
                "wrote {} tracks ({crossing} crossing) to {}\nsuggested settings: {}",
                ds.manifest.len(),
                out.display(),
                out.join("pipeline.toml").display()
            )
        },
    )
}

fn cmd_preprocess(ctx: &Ctx, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let frames = DiskFrames::for_manifest(manifest_path);
    let c = &ctx.cfg;
    let store = ClipStore::create(
        out,
        &manifest,
        &frames,
        &c.crop,
        &c.sampling,
        &c.split,
        &display(manifest_path),
        ctx.workers(),
    )?;
    ctx.emit(&store.info, || {
        format!(
            "{} store at {}: {} train clips, {} test clips",
            store.info.mode.as_str(),
            out.display(),
            store.info.train_samples,
            store.info.test_samples
        )
    })
}

fn manifest_examples(ctx: &Ctx, path: &Path, ckpt: Option<&Checkpoint>, tag: SplitTag) -> Result<(Manifest, Vec<ObservationWindow>, Vec<Example>)> {
    let (crop, sampling, split) = match ckpt {
        Some(c) => (&c.crop, &c.sampling, &c.train.split),
        None => (&ctx.cfg.crop, &ctx.cfg.sampling, &ctx.cfg.split),
    };
    let manifest = ensure_split(&load_manifest(path)?, split)?;
    let windows = match (tag, ckpt) {
        // evaluation on the training tracks uses plain windows, no mirrored twins
        (SplitTag::Train, Some(_)) => {
            crate::sampler::sample_windows(manifest.tracks.iter().filter(|t| t.split == SplitTag::Train), sampling)
        }
        _ => split_windows(&manifest, sampling, tag)?,
    };
    let frames = DiskFrames::for_manifest(path);
    let examples = build_examples(&manifest, &windows, &frames, crop, ctx.workers())?;
    Ok((manifest, windows, examples))
}

fn cmd_train(ctx: &Ctx, src: Source, arch: Architecture, mode_flag: bool, out: &Path) -> Result<()> {
    let c = &ctx.cfg;
    let (crop, sampling, split, examples) = match src {
        Source::Manifest(p) => {
            let (_, _, ex) = manifest_examples(ctx, p, None, SplitTag::Train)?;
            (c.crop.clone(), c.sampling.clone(), c.split.clone(), ex)
        }
        Source::Store(dir) => {
            let store = ClipStore::open(dir)?;
            if mode_flag && store.info.mode != c.crop.mode {
                return Err(Error::ConfigMismatch(format!(
                    "--mode {} but the store holds {} crops",
                    c.crop.mode.as_str(),
                    store.info.mode.as_str()
                )));
            }
            let ex = store.examples(SplitTag::Train, ctx.workers())?;
            (store.info.crop, store.info.sampling, store.info.split, ex)
        }
    };
    let model = c
        .model
        .model_config(arch, crop.model_input_size as usize, sampling.clip_len(), c.train.seed)?;
    let mut tcfg = c.train.clone();
    tcfg.crop_mode = crop.mode;
    tcfg.split = split;
    let ckpt = train(model, tcfg, crop, sampling, &examples, &[], ctx.workers())?;
    ensure_parent(out)?;
    save_checkpoint(&ckpt, out)?;
    let log = sibling(out, "metrics.jsonl");
    write_metrics_log(&ckpt.history, &log)?;
    let last = ckpt.history.last();
    ctx.emit(
        &json!({
            "checkpoint": display(out),
            "architecture": arch.flag(),
            "mode": ckpt.crop.mode,
            "samples": examples.len(),
            "epochs": ckpt.epoch,
            "train_loss": last.map(|r| r.train_loss),
            "train_accuracy": last.map(|r| r.train_accuracy),
        }),
        || {
            format!(
                "{} ({}) trained {} epochs on {} clips, final loss {:.4}, train accuracy {:.3}\ncheckpoint {}",
                arch,
                ckpt.crop.mode.as_str(),
                ckpt.epoch,
                examples.len(),
                last.map_or(f64::NAN, |r| r.train_loss),
                last.map_or(f64::NAN, |r| r.train_accuracy),
                out.display()
            )
        },
    )
}

/// `report.json` → `report.<suffix>` next to it.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn checkpoint_echo(ckpt: &Checkpoint, path: &Path) -> serde_json::Value {
    json!({
        "checkpoint": display(path),
        "model": ckpt.model,
        "train": ckpt.train,
        "crop": ckpt.crop,
        "sampling": ckpt.sampling,
        "epoch": ckpt.epoch,
    })
}

fn store_for(ckpt: &Checkpoint, dir: &Path) -> Result<ClipStore> {
    let store = ClipStore::open(dir)?;
    if store.info.crop != ckpt.crop {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was trained on {} crops with different settings than the store at {}",
            ckpt.crop.mode.as_str(),
            dir.display()
        )));
    }
    Ok(store)
}

fn cmd_eval(ctx: &Ctx, ckpt_path: &Path, src: Source, tag: SplitTag, threshold: f64, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (examples, source) = match src {
        Source::Manifest(p) => (manifest_examples(ctx, p, Some(&ckpt), tag)?.2, json!({ "manifest": display(p) })),
        Source::Store(dir) => {
            let store = store_for(&ckpt, dir)?;
            let ex = match tag {
                SplitTag::Train => {
                    let plain: Vec<ObservationWindow> =
                        store.windows(SplitTag::Train)?.into_iter().filter(|w| !w.flipped).collect();
                    crate::trainer::parallel_map(&plain, ctx.workers(), |w| store.example(w))?
                }
                _ => store.examples(tag, ctx.workers())?,
            };
            (ex, json!({ "store": display(dir) }))
        }
    };
    let scores: Vec<f64> = predict_all(&ckpt.model, &ckpt.params, &examples, ctx.workers())?
        .into_iter()
        .map(f64::from)
        .collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label.as_target() as u8).collect();
    let m = metrics(&scores, &labels, threshold)?;
    let arch = ckpt.model.architecture;
    let rows: Vec<PredictionRow> = examples
        .iter()
        .zip(&scores)
        .map(|(e, s)| PredictionRow {
            sample_id: e.sample_id.clone(),
            label: e.label.as_target() as u8,
            model: arch.flag().to_string(),
            mode: ckpt.crop.mode,
            score: *s,
        })
        .collect();
    ensure_parent(out)?;
    let pred_path = sibling(out, "predictions.jsonl");
    write_predictions(&rows, &pred_path)?;
    let report = EvalReport {
        model: arch.flag().to_string(),
        mode: ckpt.crop.mode,
        split: split_name(tag).to_string(),
        threshold,
        metrics: m.clone(),
        roc: roc_points(&scores, &labels),
        predictions: pred_path.file_name().unwrap().to_string_lossy().into_owned(),
        config: json!({ "source": source, "run": checkpoint_echo(&ckpt, ckpt_path) }),
    };
    write_report(&report, out)?;
    ctx.emit(&report.metrics, || {
        format!(
            "{} ({}) on {} {}: acc {:.4}  auc {}  f1 {}",
            arch,
            ckpt.crop.mode.as_str(),
            m.samples,
            split_name(tag),
            m.accuracy,
            fmt_opt(m.auc),
            fmt_opt(m.f1)
        )
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn read_eval_report(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn cmd_compare(ctx: &Ctx, reports: &[PathBuf], threshold: Option<f64>, out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let mut first_threshold = None;
    for r in reports {
        let rep = read_eval_report(r)?;
        first_threshold.get_or_insert(rep.threshold);
        let dir = r.parent().unwrap_or(Path::new(""));
        rows.extend(read_predictions(dir.join(&rep.predictions))?);
    }
    let thr = threshold.or(first_threshold).unwrap_or(DEFAULT_THRESHOLD);
    let cmp = compare(&rows, thr)?;
    let sources: Vec<String> = reports.iter().map(|p| display(p)).collect();
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        report: &'a ComparisonReport,
        config: serde_json::Value,
    }
    write_json(
        &Out {
            report: &cmp,
            config: json!({ "reports": sources, "threshold": thr }),
        },
        out,
    )?;
    ctx.emit(&cmp, || human_comparison(&cmp))
}

fn human_comparison(cmp: &ComparisonReport) -> String {
    let mut s = String::new();
    for (mode, a) in &cmp.modes {
        s += &format!("[{mode}]\n");
        for (model, m) in &a.models {
            s += &format!("  {model:<16} acc {:.4}  auc {}  f1 {}\n", m.accuracy, fmt_opt(m.auc), fmt_opt(m.f1));
        }
        if let Some(aw) = &a.all_wrong {
            s += &format!(
                "  all models wrong on {}/{} samples ({:.1}%), {} non-crossing\n",
                aw.all_wrong,
                aw.samples,
                100.0 * aw.fraction_all_wrong,
                aw.non_crossing
            );
        }
        for e in &a.exclusive_correct {
            s += &format!(
                "  {:<16} right on {}/{} samples every other model misses\n",
                e.model, e.model_correct, e.others_wrong
            );
        }
    }
    for mc in &cmp.mode_complement {
        s += &format!(
            "{}: only dynamic right {:.1}%, only static right {:.1}%\n",
            mc.model, mc.dyn_only_correct_pct, mc.stat_only_correct_pct
        );
    }
    s.trim_end().to_string()
}

fn cmd_explain(ctx: &Ctx, ckpt_path: &Path, src: Source, sample: &str, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.assembly();
    let (frames, example) = match src {
        Source::Manifest(p) => {
            let manifest = ensure_split(&load_manifest(p)?, &ckpt.train.split)?;
            let mut windows = split_windows(&manifest, &ckpt.sampling, SplitTag::Test)?;
            windows.extend(split_windows(&manifest, &ckpt.sampling, SplitTag::Train)?);
            let w = find_window(&windows, sample)?;
            let track = manifest.track(&w.track_id).expect("window track exists");
            let clip = crop_clip(track, &w, &DiskFrames::for_manifest(p), &ckpt.crop)?;
            let ex = Example {
                sample_id: w.sample_id(),
                track_id: w.track_id.clone(),
                label: w.label,
                clip: clip_tensor(&clip)?,
            };
            (clip.frames, ex)
        }
        Source::Store(dir) => {
            let store = store_for(&ckpt, dir)?;
            let mut windows = store.windows(SplitTag::Test)?;
            windows.extend(store.windows(SplitTag::Train)?);
            let w = find_window(&windows, sample)?;
            let ex = store.example(&w)?;
            let clip = crate::cropper::read_clip(store.dir.join(format!("clips/{}.clip", w.sample_id())))?;
            (clip.frames, ex)
        }
    };
    let e = explain(&model, &example.clip)?;
    ensure_dir(out)?;
    overlay_export(&frames, &e.heatmaps, out.join("overlay.png"))?;
    write_attention_dump(&e.attention, out.join("attention.bin"))?;
    let summary = json!({
        "sample_id": example.sample_id,
        "label": example.label,
        "score": e.score,
        "frame_relevance": e.frame_relevance,
        "config": checkpoint_echo(&ckpt, ckpt_path),
    });
    write_json(&summary, &out.join("explanation.json"))?;
    ctx.emit(&summary, || {
        format!(
            "{}: score {:.4} (label {:?}); overlay and attention dump in {}",
            example.sample_id,
            e.score,
            example.label,
            out.display()
        )
    })
}

fn find_window(windows: &[ObservationWindow], sample: &str) -> Result<ObservationWindow> {
    windows
        .iter()
        .find(|w| w.sample_id() == sample)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("no sample {sample:?} in the train or test windows")))
}

#[derive(Serialize)]
struct ReportRow {
    report: String,
    model: String,
    mode: CropMode,
    split: String,
    samples: usize,
    accuracy: f64,
    auc: Option<f64>,
    f1: Option<f64>,
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut files = Vec::new();
    collect_reports(dir, &mut files)?;
    let mut rows: Vec<ReportRow> = files
        .iter()
        .filter_map(|p| read_eval_report(p).ok().map(|r| (p, r)))
        .map(|(p, r)| ReportRow {
            report: p.strip_prefix(dir).unwrap_or(p).display().to_string(),
            model: r.model,
            mode: r.mode,
            split: r.split,
            samples: r.metrics.samples,
            accuracy: r.metrics.accuracy,
            auc: r.metrics.auc,
            f1: r.metrics.f1,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no eval reports under {}", dir.display())));
    }
    let order = |m: &str| Architecture::ALL.iter().position(|a| a.flag() == m).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        (a.mode, order(&a.model), &a.split, &a.report).cmp(&(b.mode, order(&b.model), &b.split, &b.report))
    });
    let table = json!({ "rows": rows, "config": { "dir": display(dir) } });
    if let Some(o) = out {
        write_json(&table, o)?;
    }
    ctx.emit(&table, || {
        let mut s = format!(
            "{:<16} {:<8} {:<6} {:>7} {:>8} {:>8} {:>8}\n",
            "model", "mode", "split", "samples", "acc", "auc", "f1"
        );
        for r in &rows {
            s += &format!(
                "{:<16} {:<8} {:<6} {:>7} {:>8.4} {:>8} {:>8}\n",
                r.model,
                r.mode.as_str(),
                r.split,
                r.samples,
                r.accuracy,
                fmt_opt(r.auc),
                fmt_opt(r.f1)
            );
        }
        s.trim_end().to_string()
    })
}
