use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gaplab::analysis::{self, Condition, FeatureRow, PathSample, SsimMode};
use gaplab::datapipe::{label_distribution, view_at, DatasetManifest, DatasetSplit, PipelineConfig, SessionEntry, Split};
use gaplab::demo::DemoConfig;
use gaplab::evalproto::{phase_two_config, run_campaign, NetworkDriver, Rules, TrialLabels};
use gaplab::gateway::server::serve;
use gaplab::gateway::Hub;
use gaplab::sim::{parse_trajectory_csv, World};
use gaplab::tensor::Checkpoint;
use gaplab::trainer::{self, parse_curve_csv, run_dir, tail_mean_val_loss, TrainConfig, ValidationSet};
use gaplab::zoo::{self, ArchitectureId, Family, InputClass};

#[derive(Parser)]
#[command(name = "gaplab", version, about = "Record, train, drive and analyze end-to-end driving minis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record a dataset with the scripted expert, or serve the teleop gateway.
    Record(RecordArgs),
    /// Train one run, or the whole family × input sweep.
    Train(TrainArgs),
    /// Validation loss of a checkpoint.
    Validate(ValidateArgs),
    /// Run a 40-trial campaign from a checkpoint.
    Drive(DriveArgs),
    /// Path matrix, bias audit, saliency, SSIM and forest importance.
    Analyze(AnalyzeArgs),
    /// Validation loss against driving success.
    Report(ReportArgs),
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 24)]
    height: usize,
}

#[derive(Args)]
struct RecordArgs {
    #[arg(long)]
    out: PathBuf,
    /// Serve the gateway on this address instead of scripting.
    #[arg(long)]
    serve: Option<String>,
    #[arg(long, default_value_t = 48)]
    episodes: usize,
    #[arg(long, default_value_t = 3)]
    validation: usize,
    #[arg(long, default_value_t = 300)]
    ticks: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[command(flatten)]
    world: WorldArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Runs land in `<out>/runs/<arch>-<input>/<seed>/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "fc3")]
    family: Family,
    #[arg(long, default_value = "gray")]
    input: InputClass,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4_000)]
    iterations: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Double every batch with a 10 dB noisy copy.
    #[arg(long)]
    noise: bool,
    /// All 21 family × input cells; `--seed` becomes the base seed.
    #[arg(long)]
    all: bool,
    /// Retrain cells that already have a final checkpoint.
    #[arg(long)]
    force: bool,
    /// Cells trained at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the input class in the run's run.json.
    #[arg(long)]
    input: Option<InputClass>,
}

#[derive(Args)]
struct DriveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `phase<N>/` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: u8,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    input: Option<InputClass>,
    #[command(flatten)]
    world: WorldArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    out: PathBuf,
    /// Campaign directories for the path matrix.
    #[arg(long = "campaign")]
    campaigns: Vec<PathBuf>,
    /// Checkpoint for the bias audit and saliency; needs `--data`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    input: Option<InputClass>,
    /// Validation frames flipped for saliency.
    #[arg(long, default_value_t = 4)]
    saliency_images: usize,
    /// Frames scored for color and framestack channel similarity.
    #[arg(long, default_value_t = 0)]
    ssim_frames: usize,
    /// Sweep root for forest importance.
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    forest_runs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep root holding `runs/`.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = match &cli.cmd {
        Cmd::Record(_) => "record",
        Cmd::Train(_) => "train",
        Cmd::Validate(_) => "validate",
        Cmd::Drive(_) => "drive",
        Cmd::Analyze(_) => "analyze",
        Cmd::Report(_) => "report",
    };
    let result = match cli.cmd {
        Cmd::Record(a) => record(a),
        Cmd::Train(a) => train(a),
        Cmd::Validate(a) => validate(a),
        Cmd::Drive(a) => drive(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "stage": stage, "error": chain.join(": ") }));
            ExitCode::FAILURE
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn record(a: RecordArgs) -> Result<()> {
    let cfg = DemoConfig {
        train_episodes: a.episodes,
        validation_episodes: a.validation,
        ticks: a.ticks,
        frame_width: a.world.width,
        frame_height: a.world.height,
        dataset_seed: a.seed,
        ..Default::default()
    };
    let sessions = a.out.join("sessions");
    fs::create_dir_all(&sessions).with_context(|| format!("creating {}", sessions.display()))?;
    let mut manifest = DatasetManifest::default();
    if let Some(addr) = a.serve {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let summary = rt.block_on(async {
            let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
            eprintln!("gateway on ws://{addr}/?role=driver; ctrl-c stops");
            let hub = Hub::new(cfg.world())?;
            let stop = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            anyhow::Ok(serve(hub, listener, Some(sessions.clone()), None, stop).await?)
        })?;
        let n = summary.episodes.len();
        for (k, dir) in summary.episodes.iter().enumerate() {
            let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let split = if k + a.validation >= n { Split::Validation } else { Split::Train };
            manifest.sessions.push(SessionEntry {
                path: Path::new("sessions").join(&id),
                id,
                split,
            });
        }
    } else {
        let split = cfg.record()?;
        for (eps, s) in [(&split.train, Split::Train), (&split.validation, Split::Validation)] {
            for ep in eps {
                let id = ep.meta.session_id.clone();
                ep.save(&sessions.join(&id))?;
                manifest.sessions.push(SessionEntry {
                    path: Path::new("sessions").join(&id),
                    id,
                    split: s,
                });
            }
        }
    }
    let path = a.out.join("manifest.json");
    manifest.save(&path)?;
    println!("{}", json!({ "manifest": path, "sessions": manifest.sessions.len() }));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    require(&a.data, "dataset manifest")?;
    let configure = |arch: ArchitectureId, seed: u64| TrainConfig {
        iterations: a.iterations,
        learning_rate: a.lr,
        batch_size: a.batch,
        noise: a.noise,
        ..TrainConfig::new(arch, seed)
    };
    let cells: Vec<TrainConfig> = if a.all {
        trainer::sweep(a.seed).into_iter().map(|c| configure(c.arch, c.seed)).collect()
    } else {
        vec![configure(ArchitectureId::new(a.family, a.input), a.seed)]
    };
    let todo: Vec<TrainConfig> = cells
        .into_iter()
        .filter(|c| a.force || !run_dir(&a.out, &c.arch, c.seed).join(trainer::FINAL_CHECKPOINT).exists())
        .collect();
    if a.parallel > 1 && todo.len() > 1 {
        return train_in_processes(&a, &todo);
    }
    let split = DatasetSplit::load(&a.data)?;
    for cfg in &todo {
        let dir = run_dir(&a.out, &cfg.arch, cfg.seed);
        let out = trainer::train(cfg, &split, |p| eprintln!("{} it {} val {:.5}", cfg.arch.label(), p.iteration, p.val_loss))?;
        trainer::save_outcome(&dir, cfg, &out)?;
        println!("{}", json!({ "run": dir, "best_val_loss": out.best_val_loss, "final_val_loss": out.curve.last().map(|p| p.val_loss) }));
    }
    Ok(())
}

fn train_in_processes(a: &TrainArgs, todo: &[TrainConfig]) -> Result<()> {
    let exe = std::env::current_exe()?;
    let mut pending = todo.iter();
    let mut live: Vec<std::process::Child> = Vec::new();
    loop {
        while live.len() < a.parallel {
            let Some(c) = pending.next() else { break };
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg("train")
                .args(["--data", &a.data.to_string_lossy(), "--out", &a.out.to_string_lossy()])
                .args(["--family", c.arch.family.name(), "--input", c.arch.input_class.name()])
                .args(["--seed", &c.seed.to_string(), "--iterations", &c.iterations.to_string()])
                .args(["--lr", &c.learning_rate.to_string(), "--batch", &c.batch_size.to_string()]);
            if c.noise {
                cmd.arg("--noise");
            }
            if a.force {
                cmd.arg("--force");
            }
            live.push(cmd.spawn()?);
        }
        if live.is_empty() {
            return Ok(());
        }
        let status = live.remove(0).wait()?;
        if !status.success() {
            bail!("a sweep cell failed with {status}");
        }
    }
}

/// Input class from `--input` or the run.json beside the checkpoint.
fn input_class(flag: Option<InputClass>, checkpoint: &Path) -> Result<InputClass> {
    require(checkpoint, "checkpoint")?;
    if let Some(c) = flag {
        return Ok(c);
    }
    let run = checkpoint.with_file_name(trainer::RUN_FILE);
    let text = fs::read_to_string(&run)
        .with_context(|| format!("no --input given and {} is unreadable", run.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", run.display()))?;
    Ok(cfg.arch.input_class)
}

fn load_network(path: &Path) -> Result<gaplab::tensor::Network> {
    require(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?.network()?)
}

fn validate(a: ValidateArgs) -> Result<()> {
    require(&a.data, "dataset manifest")?;
    let class = input_class(a.input, &a.checkpoint)?;
    let net = load_network(&a.checkpoint)?;
    let split = DatasetSplit::load(&a.data)?;
    let set = ValidationSet::from_split(&split, &PipelineConfig::new(class))?;
    let loss = trainer::validate(&net, &set)?;
    println!("{}", json!({ "checkpoint": a.checkpoint, "input_class": class.name(), "val_loss": loss }));
    Ok(())
}

fn drive(a: DriveArgs) -> Result<()> {
    let class = input_class(a.input, &a.checkpoint)?;
    let net = load_network(&a.checkpoint)?;
    let base = DemoConfig {
        frame_width: a.world.width,
        frame_height: a.world.height,
        ..Default::default()
    }
    .world();
    let config = if a.phase == 2 { phase_two_config(&base, a.seed)? } else { base };
    let world = World::new(config)?;
    let arch = net.spec().name.clone();
    let mut driver = NetworkDriver::new(net, class);
    let labels = TrialLabels {
        arch,
        input_class: class.name().into(),
        phase: a.phase,
    };
    let campaign = run_campaign(&world, &mut driver, a.seed, &Rules::default(), &labels);
    let out = a.out.unwrap_or_else(|| a.checkpoint.with_file_name(format!("phase{}", a.phase)));
    let summary = campaign.save(&out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut did = Vec::new();
    if !a.campaigns.is_empty() {
        let samples = campaign_paths(&a.campaigns)?;
        let m = analysis::path_matrix(&samples)?;
        fs::write(a.out.join("paths.json"), serde_json::to_string_pretty(&m)?)?;
        did.push("paths");
    }
    if let Some(ck) = &a.checkpoint {
        let data = a.data.as_ref().ok_or_else(|| anyhow!("--checkpoint needs --data"))?;
        let class = input_class(a.input, ck)?;
        let net = load_network(ck)?;
        let split = DatasetSplit::load(data)?;
        let labels = label_distribution(&split.train)?;
        match analysis::bias_audit(&net, &labels) {
            Ok(b) => {
                fs::write(a.out.join("bias.json"), serde_json::to_string_pretty(&b)?)?;
                did.push("bias");
            }
            Err(e) => eprintln!("bias audit skipped: {e}"),
        }
        let cfg = PipelineConfig::new(class);
        let mut views = Vec::new();
        for ep in &split.validation {
            for i in gaplab::datapipe::eligible(ep, &cfg) {
                views.push(view_at(ep, i, &cfg)?);
            }
        }
        if views.is_empty() {
            bail!("validation split has no usable frames");
        }
        let step = (views.len() / a.saliency_images.max(1)).max(1);
        let picked: Vec<_> = views.iter().step_by(step).take(a.saliency_images).cloned().collect();
        let (maps, summary) = analysis::saliency::saliency_batch(&net, &picked, &views, &net.spec().name)?;
        let dir = a.out.join("saliency");
        fs::create_dir_all(&dir)?;
        for (k, m) in maps.iter().enumerate() {
            fs::write(dir.join(format!("heatmap_{k:02}.csv")), m.csv())?;
            fs::write(dir.join(format!("heatmap_{k:02}.png")), m.to_frame().to_png()?)?;
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        did.push("saliency");
        if a.ssim_frames > 0 {
            let color = PipelineConfig::new(InputClass::Color);
            let stack = PipelineConfig::new(InputClass::Framestack);
            let (mut sc, mut sf, mut n) = (0.0, 0.0, 0);
            'outer: for ep in split.train.iter().chain(&split.validation) {
                for i in gaplab::datapipe::eligible(ep, &stack) {
                    if n == a.ssim_frames {
                        break 'outer;
                    }
                    sc += analysis::channel_ssim(&view_at(ep, i, &color)?, SsimMode::Window(7))?;
                    sf += analysis::channel_ssim(&view_at(ep, i, &stack)?, SsimMode::Window(7))?;
                    n += 1;
                }
            }
            let v = json!({ "frames": n, "color": sc / n.max(1) as f64, "framestack": sf / n.max(1) as f64 });
            fs::write(a.out.join("ssim.json"), serde_json::to_string_pretty(&v)?)?;
            did.push("ssim");
        }
    }
    if let Some(root) = &a.runs {
        let rows = feature_rows(root)?;
        if rows.len() < 2 {
            bail!("forest importance needs at least two finished runs under {}", root.display());
        }
        let x: Vec<Vec<f64>> = rows.iter().map(FeatureRow::predictors).collect();
        let names: Vec<String> = analysis::FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let mut out = serde_json::Map::new();
        for (phase, y) in [
            ("phase1", rows.iter().map(|r| r.success_phase1).collect::<Vec<_>>()),
            ("phase2", rows.iter().map(|r| r.success_phase2).collect()),
        ] {
            let rep = analysis::forest::forest_importance(&names, &x, &y, a.forest_runs, a.seed)?;
            out.insert(phase.into(), json!(names.iter().cloned().zip(rep.mean).collect::<Vec<_>>()));
        }
        fs::write(a.out.join("features.json"), serde_json::to_string_pretty(&rows)?)?;
        fs::write(a.out.join("forest.json"), serde_json::to_string_pretty(&out)?)?;
        did.push("forest");
    }
    if did.is_empty() {
        bail!("nothing to analyze: pass --campaign, --checkpoint with --data, or --runs");
    }
    println!("{}", json!({ "out": a.out, "analyses": did }));
    Ok(())
}

fn campaign_paths(dirs: &[PathBuf]) -> Result<Vec<PathSample>> {
    let mut out = Vec::new();
    for dir in dirs {
        let csv = dir.join("campaign.csv");
        require(&csv, "campaign file")?;
        let text = fs::read_to_string(&csv)?;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 8 {
                bail!("{}: short row `{line}`", csv.display());
            }
            let rows = parse_trajectory_csv(&fs::read_to_string(dir.join(f[7]))?).map_err(|e| anyhow!(e))?;
            out.push(PathSample {
                model: format!("{}-{}", f[0], f[1]),
                position: f[3].parse()?,
                points: rows.iter().map(|r| (r.x, r.y)).collect(),
            });
        }
    }
    Ok(out)
}

/// Finished runs under `root/runs/<arch>/<seed>/` with both campaigns.
fn finished_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let base = root.join("runs");
    require(&base, "sweep directory")?;
    let mut dirs = Vec::new();
    for arch in fs::read_dir(&base)? {
        for seed in fs::read_dir(arch?.path())? {
            let d = seed?.path();
            if d.join(trainer::CURVE_FILE).exists() && d.join("phase1/summary.json").exists() {
                dirs.push(d);
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn run_parts(dir: &Path) -> Result<(TrainConfig, Vec<trainer::CurvePoint>)> {
    let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join(trainer::RUN_FILE))?)?;
    let curve = parse_curve_csv(&fs::read_to_string(dir.join(trainer::CURVE_FILE))?).map_err(|e| anyhow!(e))?;
    Ok((cfg, curve))
}

fn success_of(dir: &Path, phase: u8) -> Result<Option<f64>> {
    let p = dir.join(format!("phase{phase}/summary.json"));
    if !p.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
    Ok(v["success_rate"].as_f64())
}

fn tail_of(cfg: &TrainConfig, curve: &[trainer::CurvePoint]) -> Result<f64> {
    Ok(tail_mean_val_loss(curve, cfg.iterations, (cfg.iterations / 5).max(1))?)
}

fn feature_rows(root: &Path) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for dir in finished_runs(root)? {
        let (cfg, curve) = run_parts(&dir)?;
        let net = Checkpoint::load(&dir.join(trainer::FINAL_CHECKPOINT))?;
        let cx = zoo::count_params_flops(&net.spec)?;
        let own = campaign_paths(&[dir.join("phase1")])?;
        let m = analysis::path_matrix(&own)?;
        rows.push(FeatureRow {
            condition: format!("{}/{}", cfg.arch.label(), cfg.seed),
            flops: cx.flops as f64,
            params: cx.params as f64,
            hidden_layers: zoo::hidden_layer_count(&net.spec) as f64,
            max_conv_filters: zoo::max_conv_filters(&net.spec) as f64,
            tail_val_loss: tail_of(&cfg, &curve)?,
            initial_val_loss: curve.first().map_or(f64::NAN, |p| p.val_loss),
            path_self_similarity: m.within.values().next().copied().unwrap_or(0.0),
            input_class: cfg.arch.input_class.code(),
            success_phase1: success_of(&dir, 1)?.unwrap_or(0.0),
            success_phase2: success_of(&dir, 2)?.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

fn report(a: ReportArgs) -> Result<()> {
    let dirs = finished_runs(&a.runs)?;
    let mut doc = String::from("# Deployment gap\n\n");
    let mut csv = String::new();
    for phase in [1u8, 2] {
        let mut points = Vec::new();
        for dir in &dirs {
            let Some(success) = success_of(dir, phase)? else { continue };
            let (cfg, curve) = run_parts(dir)?;
            points.push(Condition {
                label: format!("{}/{}", cfg.arch.label(), cfg.seed),
                tail_val_loss: tail_of(&cfg, &curve)?,
                success,
            });
        }
        if points.is_empty() {
            continue;
        }
        let r = analysis::deployment_gap_report(phase, &points);
        doc += &r.markdown();
        doc.push('\n');
        csv += &format!("# phase {phase}\n{}", r.scatter_csv());
    }
    if csv.is_empty() {
        bail!("no finished campaigns under {}", a.runs.display());
    }
    fs::write(&a.out, doc)?;
    let scatter = a.out.with_extension("csv");
    fs::write(&scatter, csv)?;
    println!("{}", json!({ "report": a.out, "scatter": scatter }));
    Ok(())
}
