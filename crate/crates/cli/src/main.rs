use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fasterx::checkpoint;
use fasterx::config::RunConfig;
use fasterx::data::{images_to_tensor, letterbox, load_dataset, save_dataset, synth_dataset, Sample};
use fasterx::eval::{evaluate, tag_ground_truth, Detection, Metrics};
use fasterx::model::{Model, ModelConfig};
use fasterx::plot::{draw_detections, line_chart, Series};
use fasterx::train::{evaluate_model, parse_log, Trainer};

/// Environment variable overriding the default run directory.
const RUN_DIR_ENV: &str = "FASTERX_RUN_DIR";

#[derive(Parser, Debug)]
#[command(name = "fasterx", version, about = "Small-object detector: training, evaluation, profiling")]
struct Cli {
    /// Root directory for run outputs (default: $FASTERX_RUN_DIR or ./runs).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as key=value (also accepted as --key=value).
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        Ok(RunConfig::resolve(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes the log, checkpoints and resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint, or a detection dump, against annotations.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Detection dump (`image class score x1 y1 x2 y2` lines).
        #[arg(long, conflicts_with = "checkpoint")]
        dets: Option<PathBuf>,
        /// Dataset manifest; defaults to the synthetic validation split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Parameter and FLOP accounting, optionally with timing.
    Profile {
        /// Model preset such as fasterx-s or yolox-p4-tiny.
        #[arg(long)]
        preset: Option<String>,
        /// Second preset to compare against.
        #[arg(long)]
        compare: Option<String>,
        /// Breakdown depth (number of path components).
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Also time the forward pass.
        #[arg(long)]
        time: bool,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Detect objects in images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        score_thr: f64,
        #[arg(long, default_value_t = 0.65)]
        nms_thr: f64,
        /// Write box overlays next to the detection dump.
        #[arg(long)]
        draw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic small-object dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Generate the validation split instead of the training split.
        #[arg(long)]
        val: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Plot training curves from one or more logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// mAP, AP50, AP_S or loss.
        #[arg(long, default_value = "AP50")]
        metric: String,
    },
}

/// Rewrite `--section.key=value` and `--section.key value` into positional
/// `section.key=value` overrides.
fn normalise_args(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(rest) if rest.split('=').next().is_some_and(|k| k.contains('.')) => {
                if rest.contains('=') {
                    out.push(rest.to_string());
                } else if let Some(v) = it.next_if(|v| !v.starts_with("--")) {
                    out.push(format!("{}={}", rest, v));
                } else {
                    out.push(format!("{}=true", rest));
                }
            }
            _ => out.push(a),
        }
    }
    out
}

fn run_root(cli: &Cli) -> PathBuf {
    cli.run_dir
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_split(manifest: Option<&Path>, cfg: &RunConfig, val: bool) -> Result<Vec<Sample>> {
    match manifest {
        Some(m) => load_dataset(m, cfg.model.num_classes).with_context(|| format!("loading {}", m.display())),
        None if val => Ok(synth_dataset(&cfg.data.val_spec())),
        None => Ok(synth_dataset(&cfg.data.synth)),
    }
}

fn write_metrics(dir: &Path, m: &Metrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

fn cmd_train(root: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = root.join(&cfg.run_name);
    cfg.write_resolved(&dir)?;
    let train = load_split(cfg.data.train_manifest.as_deref(), &cfg, false)?;
    let val = load_split(cfg.data.val_manifest.as_deref(), &cfg, true)?;
    let model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    let log_path = dir.join("log.jsonl");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut best = f64::NEG_INFINITY;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let name = cfg.run_name.clone();
    let logs = trainer.fit(&train, &val, |rec, model| {
        let mut rec = rec.clone();
        rec.run = Some(name.clone());
        writeln!(log, "{}", rec.to_line())?;
        eprintln!(
            "epoch {:>3} {:>7} loss {:.4} fg {}{}",
            rec.epoch,
            format!("{:?}", rec.phase).to_lowercase(),
            rec.loss,
            rec.num_fg,
            rec.metrics.map(|m| format!("  {}", m.summary())).unwrap_or_default()
        );
        checkpoint::save_with_epoch(model, Some(rec.epoch), &dir.join("last.ckpt"))?;
        if let Some(m) = rec.metrics {
            if m.ap50 > best {
                best = m.ap50;
                checkpoint::save_with_epoch(&model.strip_aux(), Some(rec.epoch), &dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    })?;
    if let Some(m) = logs.last().and_then(|l| l.metrics) {
        write_metrics(&dir, &m)?;
        println!("{}", m.summary());
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_eval(
    root: &Path,
    checkpoint: Option<&Path>,
    dets: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let mut cfg = args.resolve()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| root.join("eval"));
    let metrics = match (checkpoint, dets) {
        (Some(ckpt), _) => {
            let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            cfg.model = model.config().clone();
            let data = load_split(manifest, &cfg, true)?;
            evaluate_model(&model, &data, &cfg.train)?
        }
        (None, Some(d)) => {
            let Some(m) = manifest else {
                bail!("--dets needs --manifest with the matching annotations");
            };
            let data = load_split(Some(m), &cfg, true)?;
            let text = fs::read_to_string(d)?;
            let dets = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(k, l)| Detection::parse_line(l, k + 1))
                .collect::<fasterx::Result<Vec<_>>>()?;
            let gts: Vec<_> = data.iter().map(|s| s.gts.clone()).collect();
            evaluate(&dets, &tag_ground_truth(&gts))
        }
        (None, None) => bail!("eval needs --checkpoint or --dets"),
    };
    cfg.write_resolved(&out)?;
    write_metrics(&out, &metrics)?;
    println!("{}", metrics.summary());
    Ok(())
}

fn profile_config(preset: Option<&str>, args: &ConfigArgs) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = preset {
        cfg.model = ModelConfig::preset(p)?;
    }
    if let Some(f) = &args.config {
        cfg.apply_file(f)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.model.validate()?;
    Ok(cfg.model)
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    root: &Path,
    preset: Option<&str>,
    compare: Option<&str>,
    depth: usize,
    time: bool,
    reps: usize,
    warmup: usize,
    out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let mcfg = profile_config(preset, args)?;
    let model = Model::<f32>::build(&mcfg, 0)?;
    let report = model.cost()?;
    let mut text = format!(
        "{} {}-head {} {} @ {}²\n",
        mcfg.profile,
        mcfg.heads,
        mcfg.neck.as_str(),
        mcfg.head.as_str(),
        mcfg.input_size
    );
    text.push_str(&report.to_table(depth));
    text.push_str(&format!(
        "total: {:.3}M params, {:.2} GFLOPs ({} MAC units)\n",
        report.params_m(),
        report.gflops(),
        report.flop_units
    ));
    if time {
        let lat = model.time_forward(reps, warmup)?;
        text.push_str(&format!(
            "latency: mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms over {} reps\n",
            lat.mean_ms, lat.p50_ms, lat.p95_ms, lat.reps
        ));
    }
    if let Some(other) = compare {
        let mut ocfg = ModelConfig::preset(other)?;
        ocfg.input_size = mcfg.input_size;
        ocfg.num_classes = mcfg.num_classes;
        let o = Model::<f32>::build(&ocfg, 0)?.cost()?;
        let dp = report.params_m() - o.params_m();
        let df = report.gflops() - o.gflops();
        text.push_str(&format!(
            "compare {}: {:.3}M params, {:.2} GFLOPs\ndelta: {:+.3}M params ({:+.1}%), {:+.2} GFLOPs ({:+.1}%)\n",
            other,
            o.params_m(),
            o.gflops(),
            dp,
            100.0 * dp / o.params_m(),
            df,
            100.0 * df / o.gflops()
        ));
    }
    print!("{}", text);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| root.join("profile"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("profile.txt"), &text)?;
    fs::write(dir.join("profile.lines"), report.to_lines())?;
    fs::write(dir.join("config.txt"), mcfg.canonical_text())?;
    Ok(())
}

fn cmd_predict(
    root: &Path,
    ckpt: &Path,
    images: &[PathBuf],
    score_thr: f64,
    nms_thr: f64,
    draw: bool,
    out: Option<&Path>,
) -> Result<()> {
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| root.join("predict"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), model.config().canonical_text())?;
    let size = model.config().input_size as u32;
    let mut dump = String::new();
    let mut index = String::new();
    for (i, path) in images.iter().enumerate() {
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_rgb32f();
        let (boxed, meta) = letterbox(&img, size);
        let x = images_to_tensor(&[&boxed])?;
        let mut dets = model.predict(&x, score_thr, nms_thr, 300)?.remove(0);
        for d in &mut dets {
            d.image = i;
            d.bbox = meta.inverse(&d.bbox);
            dump.push_str(&d.to_line());
            dump.push('\n');
        }
        index.push_str(&format!("{} {}\n", i, path.display()));
        if draw {
            let mut canvas = img.clone();
            draw_detections(&mut canvas, &dets);
            let rgb = image::DynamicImage::ImageRgb32F(canvas).to_rgb8();
            rgb.save(dir.join(format!("{:04}.png", i)))?;
        }
        println!("{}: {} detections", path.display(), dets.len());
    }
    fs::write(dir.join("detections.txt"), dump)?;
    fs::write(dir.join("images.txt"), index)?;
    Ok(())
}

fn cmd_synth(out: &Path, val: bool, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let spec = if val { cfg.data.val_spec() } else { cfg.data.synth.clone() };
    let manifest = save_dataset(out, &synth_dataset(&spec))?;
    cfg.write_resolved(out)?;
    println!("{} images, manifest {}", spec.num_images, manifest.display());
    Ok(())
}

fn cmd_plot(logs: &[PathBuf], out: &Path, metric: &str) -> Result<()> {
    let mut series = Vec::new();
    for path in logs {
        let recs = parse_log(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?;
        let mut by_run: Vec<Series> = Vec::new();
        for r in recs {
            let name = r.run.clone().unwrap_or_else(|| {
                path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
            });
            let value = match metric {
                "loss" => Some(r.loss),
                "mAP" => r.metrics.map(|m| m.map),
                "AP50" => r.metrics.map(|m| m.ap50),
                "AP_S" => r.metrics.and_then(|m| m.ap_s),
                other => bail!("unknown metric '{}'", other),
            };
            let Some(v) = value else { continue };
            let pos = match by_run.iter().position(|s| s.name == name) {
                Some(p) => p,
                None => {
                    by_run.push(Series {
                        name,
                        points: Vec::new(),
                    });
                    by_run.len() - 1
                }
            };
            by_run[pos].points.push(((r.epoch + 1) as f64, v));
        }
        series.extend(by_run);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, line_chart(&format!("{} vs epoch", metric), "epoch", metric, &series))?;
    println!("{} series -> {}", series.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = run_root(&cli);
    match &cli.command {
        Command::Train { cfg } => cmd_train(&root, cfg),
        Command::Eval {
            checkpoint,
            dets,
            manifest,
            out,
            cfg,
        } => cmd_eval(
            &root,
            checkpoint.as_deref(),
            dets.as_deref(),
            manifest.as_deref(),
            out.as_deref(),
            cfg,
        ),
        Command::Profile {
            preset,
            compare,
            depth,
            time,
            reps,
            warmup,
            out,
            cfg,
        } => cmd_profile(
            &root,
            preset.as_deref(),
            compare.as_deref(),
            *depth,
            *time,
            *reps,
            *warmup,
            out.as_deref(),
            cfg,
        ),
        Command::Predict {
            checkpoint,
            images,
            score_thr,
            nms_thr,
            draw,
            out,
        } => cmd_predict(&root, checkpoint, images, *score_thr, *nms_thr, *draw, out.as_deref()),
        Command::SynthData { out, val, cfg } => cmd_synth(out, *val, cfg),
        Command::Plot { logs, out, metric } => cmd_plot(logs, out, metric),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(normalise_args(std::env::args()));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
