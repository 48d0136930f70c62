use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use ibfp::dataset::{load_dataset, load_gray_png, load_mask_png, load_rgb_png, make_splice_benchmark, synthesize, write_dataset, write_splices, Split};
use ibfp::localization::{localize, write_heatmap, LocalizeConfig, Localization};
use ibfp::metrics::{evaluate_dataset, EvalCase, SkippedCase};
use ibfp::model::{load_checkpoint, save_checkpoint, Checkpoint, FingerprintModel};
use ibfp::objective::LossRecord;
use ibfp::training::{beta_sweep, train_from_scratch, EpochReport, RdPoint, TrainObserver, TrainOutcome};
use serde::Serialize;

use crate::config::Config;
use crate::{Cli, CliError, Command};

#[derive(Serialize)]
struct Seeds {
    dataset: u64,
    splices: u64,
    training: u64,
    em: u64,
}

/// One per run, next to the run's outputs. The only file whose bytes vary
/// between identical reruns (it records wall-clock time).
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'static str,
    config: &'a Config,
    seeds: Seeds,
    artifacts: Vec<String>,
    single_thread: bool,
    started_unix_secs: u64,
    wall_clock_secs: f64,
}

struct Run<'a> {
    cli: &'a Cli,
    config: Config,
    started: Instant,
    started_unix: u64,
}

impl Run<'_> {
    /// Writes `config.toml` and `run_manifest.json` into `dir`.
    fn finish(&self, command: &str, dir: &Path, mut artifacts: Vec<String>) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, self.config.to_toml()?).with_context(|| format!("writing {}", cfg_path.display()))?;
        artifacts.push(rel(&self.cli.out, &cfg_path));
        let c = &self.config;
        let manifest = RunManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: c,
            seeds: Seeds {
                dataset: c.dataset.seed,
                splices: c.splices.seed,
                training: c.training.seed,
                em: c.localize.em.seed,
            },
            artifacts,
            single_thread: self.cli.single_thread,
            started_unix_secs: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("run_manifest.json"), &manifest)
    }
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    match &cli.command {
        Command::Train { beta: Some(b), .. } => config.training.loss.beta = *b,
        Command::Sweep { betas: Some(b), .. } => config.sweep.betas = b.clone(),
        _ => {}
    }
    config.validate()?;
    let run = Run {
        cli,
        config,
        started: Instant::now(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    match &cli.command {
        Command::Synth => synth(&run),
        Command::Train { dataset, .. } => train(&run, dataset.as_deref()),
        Command::Sweep { dataset, .. } => sweep(&run, dataset.as_deref()),
        Command::Localize { checkpoint, input } => localize_cmd(&run, checkpoint, input),
        Command::Evaluate { heatmaps, truth, label } => evaluate(&run, heatmaps.as_deref(), truth.as_deref(), label),
    }
}

fn synth(run: &Run) -> anyhow::Result<()> {
    let root = run.cli.out.join("dataset");
    let ds = synthesize(&run.config.dataset)?;
    write_dataset(&root, &ds)?;
    let bench = make_splice_benchmark(&ds.manifest.bank, &run.config.splices)?;
    write_splices(&root, &bench)?;
    log::info!(
        "wrote {} images over {} camera models and {} splice cases to {}",
        ds.manifest.images.len(),
        ds.num_classes(),
        bench.len(),
        root.display()
    );
    let mut artifacts = vec![rel(&run.cli.out, &root.join("manifest.json"))];
    artifacts.extend(Split::ALL.iter().map(|s| rel(&run.cli.out, &root.join(s.as_str()))));
    artifacts.push(rel(&run.cli.out, &root.join("splices")));
    run.finish("synth", &root, artifacts)
}

/// Streams per-step loss records and per-epoch reports as JSON lines, and
/// saves periodic checkpoints when `checkpoint_every` is set.
struct TraceWriter {
    dir: PathBuf,
    checkpoint_every: usize,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl TraceWriter {
    fn new(dir: &Path, checkpoint_every: usize) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            checkpoint_every,
            steps: create(&dir.join("trace.jsonl"))?,
            epochs: create(&dir.join("epochs.jsonl"))?,
        })
    }
}

fn line<T: Serialize>(out: &mut impl Write, value: &T) -> ibfp::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out).map_err(|e| ibfp::Error::Io {
        path: PathBuf::from("trace"),
        source: e,
    })
}

impl TrainObserver for TraceWriter {
    fn on_step(&mut self, record: &LossRecord) -> ibfp::Result<()> {
        line(&mut self.steps, record)
    }

    fn on_epoch(&mut self, report: &EpochReport, model: &FingerprintModel) -> ibfp::Result<()> {
        line(&mut self.epochs, report)?;
        if self.checkpoint_every > 0 && (report.epoch + 1) % self.checkpoint_every == 0 {
            let path = self.dir.join(format!("checkpoint-epoch{:04}.ibfp", report.epoch + 1));
            let meta = serde_json::json!({ "epoch": report.epoch + 1, "lr": report.lr });
            save_checkpoint(&path, &Checkpoint { model: model.clone(), rng: None, meta })?;
        }
        self.steps.flush().and_then(|_| self.epochs.flush()).map_err(|e| ibfp::Error::Io {
            path: PathBuf::from("trace"),
            source: e,
        })
    }
}

fn dataset_root(run: &Run, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| run.cli.out.join("dataset"))
}

fn save_outcome(dir: &Path, beta: f64, outcome: &TrainOutcome) -> anyhow::Result<PathBuf> {
    let path = dir.join("checkpoint.ibfp");
    let last = outcome.final_point(Split::Val);
    let meta = serde_json::json!({
        "beta": beta,
        "epochs": outcome.epochs.len(),
        "final_rate": last.map(|p| p.rate),
        "final_distortion": last.map(|p| p.distortion),
        "final_accuracy": outcome.accuracy_trace.last().map(|a| a.accuracy),
    });
    save_checkpoint(&path, &Checkpoint { model: outcome.model.clone(), rng: None, meta })?;
    Ok(path)
}

fn rd_trace_rows(out: &mut impl Write, trace: &[RdPoint]) -> anyhow::Result<()> {
    for p in trace {
        writeln!(out, "{},{},{},{},{}", p.beta, p.epoch, p.split.as_str(), p.rate, p.distortion)?;
    }
    Ok(())
}

const RD_HEADER: &str = "beta,R,D";
const RD_TRACE_HEADER: &str = "beta,epoch,split,R,D";

fn train(run: &Run, dataset: Option<&Path>) -> anyhow::Result<()> {
    let ds = load_dataset(&dataset_root(run, dataset)).context("loading dataset (run `synth` first?)")?;
    let dir = run.cli.out.join("train");
    let mut trace = TraceWriter::new(&dir, run.config.training.checkpoint_every)?;
    let cfg = &run.config;
    let outcome = train_from_scratch(cfg.model.clone(), &ds, &cfg.training, &mut trace)?;
    save_outcome(&dir, cfg.training.loss.beta, &outcome)?;
    let mut rd = create(&dir.join("rd.csv"))?;
    writeln!(rd, "{RD_HEADER}")?;
    if let Some(p) = outcome.final_point(Split::Val) {
        writeln!(rd, "{},{},{}", p.beta, p.rate, p.distortion)?;
    }
    rd.flush()?;
    let mut rt = create(&dir.join("rd_trace.csv"))?;
    writeln!(rt, "{RD_TRACE_HEADER}")?;
    rd_trace_rows(&mut rt, &outcome.rd_trace)?;
    rt.flush()?;
    if let Some(a) = outcome.accuracy_trace.last() {
        log::info!("final validation accuracy {:.4}", a.accuracy);
    }
    let artifacts = ["checkpoint.ibfp", "trace.jsonl", "epochs.jsonl", "rd.csv", "rd_trace.csv"]
        .iter()
        .map(|f| rel(&run.cli.out, &dir.join(f)))
        .collect();
    run.finish("train", &dir, artifacts)
}

fn sweep(run: &Run, dataset: Option<&Path>) -> anyhow::Result<()> {
    let ds = load_dataset(&dataset_root(run, dataset)).context("loading dataset (run `synth` first?)")?;
    let dir = run.cli.out.join("sweep");
    fs::create_dir_all(&dir)?;
    let cfg = &run.config;
    let run_dir = |i: usize| dir.join(format!("run-{i:02}"));
    let mut open_error = None;
    let mut factory = |i: usize, _beta: f64| -> Box<dyn TrainObserver> {
        match TraceWriter::new(&run_dir(i), cfg.training.checkpoint_every) {
            Ok(t) => Box::new(t),
            Err(e) => {
                open_error.get_or_insert(e);
                Box::new(())
            }
        }
    };
    let runs = beta_sweep(&ds, &cfg.sweep.betas, &cfg.model, &cfg.training, &mut factory)?;
    if let Some(e) = open_error {
        return Err(e);
    }
    let mut rd = create(&dir.join("rd.csv"))?;
    writeln!(rd, "{RD_HEADER}")?;
    let mut rt = create(&dir.join("rd_trace.csv"))?;
    writeln!(rt, "{RD_TRACE_HEADER}")?;
    let mut artifacts = vec![rel(&run.cli.out, &dir.join("rd.csv")), rel(&run.cli.out, &dir.join("rd_trace.csv"))];
    let mut failed = Vec::new();
    for r in &runs {
        match &r.result {
            Ok(outcome) => {
                let ckpt = save_outcome(&run_dir(r.run_index), r.beta, outcome)?;
                artifacts.push(rel(&run.cli.out, &ckpt));
                let p = outcome.final_point(Split::Val).expect("at least one epoch");
                writeln!(rd, "{},{},{}", r.beta, p.rate, p.distortion)?;
                rd_trace_rows(&mut rt, &outcome.rd_trace)?;
            }
            Err(e) => {
                writeln!(rd, "{},NaN,NaN", r.beta)?;
                failed.push(format!("beta {}: {e}", r.beta));
            }
        }
    }
    rd.flush()?;
    rt.flush()?;
    run.finish("sweep", &dir, artifacts)?;
    if !failed.is_empty() {
        bail!("{} sweep run(s) failed: {}", failed.len(), failed.join("; "));
    }
    Ok(())
}

/// Case id for an input image: the parent directory for `image.png`
/// (splice benchmark layout), otherwise the file stem.
fn case_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "image" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files under `dir`, recursively and in sorted order, skipping masks.
fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(&p, out)?;
        } else if is_png(&p) && p.file_name().is_some_and(|n| n != "mask.png") {
            out.push(p);
        }
    }
    Ok(())
}

fn localize_one(path: &Path, model: &FingerprintModel, config: &LocalizeConfig) -> ibfp::Result<Localization> {
    let image = load_rgb_png(path)?;
    localize(&image, model, config)
}

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
fn map_parallel<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut results: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads.min(items.len()))
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(item) = items.get(i) else { break };
                        local.push((i, f(item)));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

#[derive(Serialize)]
struct SkippedFile {
    path: String,
    reason: String,
}

fn localize_cmd(run: &Run, checkpoint: &Path, input: &Path) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut inputs = Vec::new();
    if input.is_dir() {
        collect_pngs(input, &mut inputs)?;
    } else if input.exists() {
        inputs.push(input.to_path_buf());
    } else {
        bail!("input {} does not exist", input.display());
    }
    if inputs.is_empty() {
        return Err(CliError::NoInputs(format!("no PNG files under {}", input.display())).into());
    }
    let dir = run.cli.out.join("heatmaps");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let threads = if run.cli.single_thread {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    };
    let results = map_parallel(&inputs, threads, |p| localize_one(p, &ckpt.model, &run.config.localize));
    let mut skipped = Vec::new();
    let mut artifacts = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (path, result) in inputs.iter().zip(results) {
        let id = case_id(path);
        let reason = match result {
            Ok(_) if !seen.insert(id.clone()) => format!("duplicate case id {id}"),
            Ok(loc) => {
                let png = dir.join(format!("{id}.png"));
                write_heatmap(&png, &dir.join(format!("{id}.json")), &loc.heatmap, &loc.sidecar())?;
                artifacts.push(rel(&run.cli.out, &png));
                continue;
            }
            Err(e) => e.to_string(),
        };
        log::warn!("skipped {}: {reason}", path.display());
        skipped.push(SkippedFile {
            path: path.display().to_string(),
            reason,
        });
    }
    write_json(&dir.join("skipped.json"), &skipped)?;
    log::info!("wrote {} heat maps, skipped {}", artifacts.len(), skipped.len());
    let done = artifacts.len();
    run.finish("localize", &dir, artifacts)?;
    if done == 0 {
        return Err(CliError::NoInputs("every input was skipped".into()).into());
    }
    Ok(())
}

fn truth_path(root: &Path, id: &str) -> Option<PathBuf> {
    [root.join(id).join("mask.png"), root.join(format!("{id}.png"))]
        .into_iter()
        .find(|p| p.is_file())
}

fn evaluate(run: &Run, heatmaps: Option<&Path>, truth: Option<&Path>, label: &str) -> anyhow::Result<()> {
    let maps_dir = heatmaps.map(Path::to_path_buf).unwrap_or_else(|| run.cli.out.join("heatmaps"));
    let truth_dir = truth.map(Path::to_path_buf).unwrap_or_else(|| run.cli.out.join("dataset").join("splices"));
    let mut maps: Vec<PathBuf> = fs::read_dir(&maps_dir)
        .with_context(|| format!("reading {}", maps_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    maps.sort();
    if maps.is_empty() {
        return Err(CliError::NoInputs(format!("no heat maps in {}", maps_dir.display())).into());
    }
    let mut loaded = Vec::new();
    let mut missing = Vec::new();
    for p in &maps {
        let id = case_id(p);
        let Some(t) = truth_path(&truth_dir, &id) else {
            log::warn!("no ground truth for {id}; skipped");
            missing.push(SkippedCase { id, reason: "no matching ground-truth mask".into() });
            continue;
        };
        loaded.push((id, load_gray_png(p)?, load_mask_png(&t)?));
    }
    let cases: Vec<EvalCase> = loaded
        .iter()
        .map(|(id, map, truth)| EvalCase { id: id.clone(), map: map.view(), truth: truth.view() })
        .collect();
    if cases.is_empty() {
        return Err(CliError::NoInputs("no heat map has a ground-truth mask".into()).into());
    }
    let mut report = evaluate_dataset(&cases)?;
    report.skipped.extend(missing);
    let dir = run.cli.out.join("eval");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    let table = report.table(label);
    fs::write(dir.join("report.txt"), &table)?;
    print!("{table}");
    let artifacts = vec![rel(&run.cli.out, &dir.join("report.json")), rel(&run.cli.out, &dir.join("report.txt"))];
    run.finish("evaluate", &dir, artifacts)
}
