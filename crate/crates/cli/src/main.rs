//! `autolut` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use autolut::eval::{degrade, list_pngs, measure_latency, pair_dirs, score, EvalSummary, Method};
use autolut::export::{export_pipeline, storage_size, Checkpoint};
use autolut::finetune::{finetune, Dataset, FinetuneConfig};
use autolut::image::{load_y, save_png, Kernel, Plane};
use autolut::par::Exec;
use autolut::pipeline::{super_resolve, PipelineConfig, Preset};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "autolut", version, about = "Look-up-table super-resolution")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Serialize)]
struct Global {
    /// Built-in pipeline topology (untrained weights).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Serialized pipeline container.
    #[arg(long, global = true)]
    pipeline: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 4)]
    scale: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the run manifest here instead of stdout.
    #[arg(long, global = true, value_name = "OUT")]
    json: Option<PathBuf>,
    /// Worker threads (overrides AUTOLUT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Bicubic-downscale every PNG in a directory.
    Downsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Super-resolve a PNG or every PNG in a directory.
    Sr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR/SSIM of a pipeline or classical baseline against HR images.
    Eval {
        /// LR images; when omitted they are generated from the HR images.
        #[arg(long)]
        lr: Option<PathBuf>,
        #[arg(long)]
        hr: PathBuf,
        /// nearest, bilinear or bicubic.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value = "eval")]
        dataset: String,
    },
    /// Convert a trainer checkpoint into a pipeline container.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "out", visible_alias = "output")]
        output: PathBuf,
    },
    /// LUT-aware fine-tuning on a directory of HR images.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 48)]
        patch: usize,
        /// Keep intermediate group outputs real-valued.
        #[arg(long)]
        no_quantize: bool,
    },
    /// Latency on a synthetic input.
    Bench {
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_ms: f64,
    metrics: Value,
    errors: Vec<String>,
}

struct Run {
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn new(command: &str, config: Value) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION"),
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_ms: 0.0,
                metrics: Value::Null,
                errors: Vec::new(),
            },
            start: Instant::now(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.display().to_string());
    }

    fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.display().to_string());
    }

    fn error(&mut self, context: &Path, e: impl std::fmt::Display) {
        let msg = format!("{}: {e}", context.display());
        eprintln!("error: {msg}");
        self.manifest.errors.push(msg);
    }

    fn finish(mut self, json: Option<&Path>) -> anyhow::Result<ExitCode> {
        self.manifest.wall_ms = self.start.elapsed().as_secs_f64() * 1e3;
        let text = serde_json::to_string_pretty(&self.manifest)?;
        match json {
            Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
            None => println!("{text}"),
        }
        Ok(if self.manifest.errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
    }
}

fn load_pipeline(g: &Global) -> anyhow::Result<PipelineConfig> {
    match (&g.pipeline, &g.preset) {
        (Some(_), Some(_)) => bail!("pass either --pipeline or --preset, not both"),
        (Some(p), None) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        (None, Some(name)) => Ok(PipelineConfig::from_preset(Preset::parse(name)?, g.scale)?),
        (None, None) => bail!("one of --pipeline or --preset is required"),
    }
}

/// PNGs of a directory, or the single file itself.
fn inputs_of(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_dir() {
        Ok(list_pngs(path)?)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn file_name(p: &Path) -> PathBuf {
    PathBuf::from(p.file_name().unwrap_or_default())
}

fn cmd_downsample(g: &Global, input: &Path, output: &Path) -> anyhow::Result<Run> {
    let mut run = Run::new("downsample", json!({ "scale": g.scale }));
    std::fs::create_dir_all(output)?;
    for path in list_pngs(input).with_context(|| format!("listing {}", input.display()))? {
        run.input(&path);
        let dst = output.join(file_name(&path));
        match load_y(&path).and_then(|hr| degrade(&hr, g.scale)).and_then(|(lr, _)| save_png(&lr, &dst)) {
            Ok(()) => run.output(&dst),
            Err(e) => run.error(&path, e),
        }
    }
    Ok(run)
}

fn cmd_sr(g: &Global, exec: Exec, input: &Path, output: &Path) -> anyhow::Result<Run> {
    let cfg = load_pipeline(g)?;
    let mut run = Run::new("sr", json!({ "scale": cfg.scale, "pipeline": g.pipeline, "preset": g.preset }));
    let files = inputs_of(input)?;
    let to_dir = input.is_dir();
    if to_dir {
        std::fs::create_dir_all(output)?;
    }
    for path in files {
        run.input(&path);
        let dst = if to_dir { output.join(file_name(&path)) } else { output.to_path_buf() };
        match load_y(&path).and_then(|x| super_resolve(&x, &cfg, exec)).and_then(|y| save_png(&y, &dst)) {
            Ok(()) => run.output(&dst),
            Err(e) => run.error(&path, e),
        }
    }
    Ok(run)
}

fn cmd_eval(g: &Global, exec: Exec, lr_dir: Option<&Path>, hr_dir: &Path, baseline: Option<&str>, dataset: &str) -> anyhow::Result<Run> {
    let cfg;
    let method = match baseline {
        Some(name) => {
            if g.pipeline.is_some() || g.preset.is_some() {
                bail!("--baseline cannot be combined with --pipeline or --preset");
            }
            Method::Baseline(name.parse::<Kernel>()?)
        }
        None => {
            cfg = load_pipeline(g)?;
            Method::Pipeline(&cfg)
        }
    };
    let scale = g.scale;
    let mut run = Run::new("eval", json!({ "scale": scale, "method": method.name(), "dataset": dataset, "pipeline": g.pipeline, "preset": g.preset }));
    let jobs: Vec<(String, Option<PathBuf>, PathBuf)> = match lr_dir {
        Some(lr) => pair_dirs(lr, hr_dir)?.into_iter().map(|(n, l, h)| (n, Some(l), h)).collect(),
        None => list_pngs(hr_dir)?
            .into_iter()
            .map(|h| (h.file_stem().unwrap_or_default().to_string_lossy().into_owned(), None, h))
            .collect(),
    };
    let results = exec.install(|| {
        exec.map_range(jobs.len(), |i| -> autolut::Result<_> {
            let (name, lr, hr) = &jobs[i];
            let hr = load_y(hr)?;
            let (lr, hr) = match lr {
                Some(p) => {
                    let lr = load_y(p)?;
                    let hr = hr.crop(lr.height() * scale, lr.width() * scale)?;
                    (lr, hr)
                }
                None => degrade(&hr, scale)?,
            };
            score(dataset, name, &method.upscale(&lr, scale, Exec::Sequential)?, &hr, scale)
        })
    })?;
    let mut records = Vec::new();
    for ((_, lr, hr), r) in jobs.iter().zip(results) {
        if let Some(lr) = lr {
            run.input(lr);
        }
        run.input(hr);
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => run.error(hr, e),
        }
    }
    let summary = EvalSummary::from_records(method.name(), scale, records);
    eprint!("{}", summary.table());
    run.manifest.metrics = serde_json::to_value(&summary)?;
    Ok(run)
}

fn cmd_export(exec: Exec, checkpoint: &Path, output: &Path) -> anyhow::Result<Run> {
    let ck = Checkpoint::read_dir(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let mut run = Run::new("export", json!({ "topology": ck.manifest.topology }));
    run.input(checkpoint);
    let cfg = export_pipeline(&ck, exec)?;
    cfg.save(output)?;
    run.output(output);
    let storage = storage_size(&cfg.topology());
    eprintln!("exported {} bytes of weights ({:.4} MiB)", storage.total, storage.megabytes());
    run.manifest.metrics = json!({ "storage": storage, "container_bytes": cfg.byte_len() });
    Ok(run)
}

fn cmd_finetune(g: &Global, exec: Exec, data: &Path, out: &Path, ft: FinetuneConfig) -> anyhow::Result<Run> {
    let cfg = load_pipeline(g)?;
    let mut run = Run::new("finetune", json!({ "finetune": ft, "pipeline": g.pipeline, "preset": g.preset, "scale": cfg.scale }));
    run.input(data);
    let dataset = Dataset::load_dir(data, cfg.scale).with_context(|| format!("loading {}", data.display()))?;
    let report = finetune(&cfg, &dataset, &ft, exec)?;
    report.pipeline.save(out)?;
    run.output(out);
    eprintln!("eval loss {:.4} -> {:.4}", report.initial_eval_loss, report.final_eval_loss);
    run.manifest.metrics = json!({
        "loss_curve": report.losses,
        "initial_eval_loss": report.initial_eval_loss,
        "final_eval_loss": report.final_eval_loss,
    });
    Ok(run)
}

fn cmd_bench(g: &Global, exec: Exec, size: usize, iterations: usize, warmup: usize) -> anyhow::Result<Run> {
    let cfg = load_pipeline(g)?;
    let mut run = Run::new("bench", json!({ "size": size, "iterations": iterations, "warmup": warmup, "scale": cfg.scale, "pipeline": g.pipeline, "preset": g.preset, "exec": format!("{exec:?}") }));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(g.seed);
    let input = Plane::from_fn(size, size, |_, _| rng.random());
    let stats = measure_latency(&cfg, &input, warmup, iterations, exec)?;
    eprintln!(
        "{}x{} -> {}x{}: mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms",
        stats.height, stats.width, stats.output_height, stats.output_width, stats.mean_ms, stats.p50_ms, stats.p95_ms
    );
    for (i, ms) in stats.stage_mean_ms.iter().enumerate() {
        eprintln!("  group {i}: {ms:.2} ms");
    }
    run.manifest.metrics = serde_json::to_value(&stats)?;
    Ok(run)
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let g = &cli.global;
    let exec = match g.threads {
        Some(0) | None => Exec::from_env(),
        Some(1) => Exec::Sequential,
        Some(n) => Exec::Threads(n),
    };
    let run = match &cli.command {
        Command::Downsample { input, output } => cmd_downsample(g, input, output)?,
        Command::Sr { input, output } => cmd_sr(g, exec, input, output)?,
        Command::Eval { lr, hr, baseline, dataset } => cmd_eval(g, exec, lr.as_deref(), hr, baseline.as_deref(), dataset)?,
        Command::Export { checkpoint, output } => cmd_export(exec, checkpoint, output)?,
        Command::Finetune { data, out, steps, lr, batch, patch, no_quantize } => {
            let ft = FinetuneConfig {
                learning_rate: *lr,
                batch_size: *batch,
                patch_size: *patch,
                steps: *steps,
                seed: g.seed,
                quantize_features: !no_quantize,
            };
            cmd_finetune(g, exec, data, out, ft)?
        }
        Command::Bench { size, iterations, warmup } => cmd_bench(g, exec, *size, *iterations, *warmup)?,
    };
    run.finish(g.json.as_deref())
}
