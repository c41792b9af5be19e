use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use colf::checkpoint::Checkpoint;
use colf::editor::{EditOp, EditedScene};
use colf::model::{ColfModel, RenderedView};
use colf::scenegen::{generate_dataset, to_u8, Dataset, DatasetConfig, Profile, Split};
use colf::train::{ModelRenderer, TrainConfig, Trainer};
use colf::volbaseline::{bench, format_grid, BenchReport, BenchSettings, DecoderKind, TrackingAllocator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "colf", version, about = "Object-centric light field scene decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural multi-view dataset.
    Generate(GenerateArgs),
    /// Train through every stage of a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Encode one view of a scene and render all of its views.
    Render(RenderArgs),
    /// Apply an edits file to an encoded scene and render the result.
    Edit(EditArgs),
    /// Time light-field or volumetric rendering.
    Bench(BenchArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "toy-clevr")]
    profile: Profile,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the dataset of every stage.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Initializes the first stage from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: usize,
    /// Context view index.
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Evaluate only the first N scenes of the split.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// JSON list of edit operations.
    #[arg(long)]
    edits: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "lightfield")]
    decoder: DecoderKind,
    /// Foreground slot counts; repeat or comma-separate for a sweep.
    #[arg(long, value_delimiter = ',', default_value = "7")]
    slots: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    samples: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 3072)]
    memory_budget_mb: usize,
    /// Uses trained weights instead of random ones (light field only).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "bench_log.jsonl")]
    log: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 64)]
    max_sessions: usize,
    #[arg(long, default_value_t = 3600)]
    ttl_seconds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Edit(a) => edit(a),
        Command::Bench(a) => run_bench(a),
        Command::Serve(a) => serve(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let name = a.out.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
    let mut cfg = DatasetConfig::new(&name, a.profile, a.size, a.train, a.test, a.seed);
    cfg.views_per_scene = a.views;
    let manifest = generate_dataset(&cfg, &a.out)?;
    println!("wrote {} scenes to {}", manifest.num_train + manifest.num_test, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(data) = &a.data {
        cfg.stages.iter_mut().for_each(|s| s.dataset = data.clone());
    }
    if let Some(init) = a.init {
        cfg.stages[0].init_from = Some(init);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut trainer = Trainer::new(cfg, DType::F32)?;
    let last = trainer.fit(&a.out)?;
    println!("final checkpoint: {}", last.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ColfModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.build_model(DType::F32)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let mut scenes = data.load_split(a.split, data.manifest.image_size)?;
    if let Some(n) = a.scenes {
        scenes.truncate(n);
    }
    let renderer = ModelRenderer {
        model: &model,
        seed: a.seed,
    };
    let report = colf::metrics::evaluate(&renderer, &scenes, Some(serde_json::to_value(&model.config)?))?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(path) => fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    let m = &report.aggregate;
    eprintln!(
        "{} scenes: psnr {:?} ssim {:?} ari {:?} nv-ari {:?} fg-ari {:?}",
        report.num_scenes, m.psnr, m.ssim, m.ari, m.nv_ari, m.fg_ari
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

struct Encoded {
    model: ColfModel,
    scene: EditedScene,
    cameras: Vec<colf::raygeom::Camera>,
}

fn encode_scene(a: &SceneArgs) -> Result<Encoded> {
    let model = load_model(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let scene = data.load_scene(a.scene)?;
    let Some(ctx) = scene.views.get(a.view) else {
        bail!("scene {} has no view {}", a.scene, a.view);
    };
    let ctx = ctx.downsampled(model.config.image_size)?;
    let set = model.encode(&ctx.image, &ctx.camera, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    Ok(Encoded {
        scene: EditedScene::from_slot_set(&set)?,
        cameras: scene.views.iter().map(|v| v.camera).collect(),
        model,
    })
}

fn write_view(view: &RenderedView, ids: &[usize], dir: &Path, name: &str) -> Result<()> {
    let rgb: Vec<u8> = view.image.iter().map(|&v| to_u8(v)).collect();
    image::RgbImage::from_raw(view.width as u32, view.height as u32, rgb)
        .context("render buffer size")?
        .save(dir.join(format!("{name}.png")))?;
    let seg: Vec<u8> = view.segmentation().into_iter().map(|p| ids[p].min(255) as u8).collect();
    image::GrayImage::from_raw(view.width as u32, view.height as u32, seg)
        .context("segmentation buffer size")?
        .save(dir.join(format!("{name}_seg.png")))?;
    Ok(())
}

fn render_all(enc: &Encoded, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let ids: Vec<usize> = enc.scene.slots.iter().map(|s| s.id).collect();
    for (i, cam) in enc.cameras.iter().enumerate() {
        let view = enc.scene.render(&enc.model, cam)?;
        write_view(&view, &ids, out, &format!("view_{i}"))?;
    }
    fs::write(out.join("roster.json"), serde_json::to_vec_pretty(&enc.scene.roster())?)?;
    println!("wrote {} views to {}", enc.cameras.len(), out.display());
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let enc = encode_scene(&a.scene)?;
    render_all(&enc, &a.scene.out)
}

fn edit(a: EditArgs) -> Result<()> {
    let mut enc = encode_scene(&a.scene)?;
    let text = fs::read_to_string(&a.edits).with_context(|| format!("reading {}", a.edits.display()))?;
    let ops: Vec<EditOp> = serde_json::from_str(&text).context("parsing edits")?;
    enc.scene = enc.scene.apply_all(&ops)?;
    render_all(&enc, &a.scene.out)
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let model = a.ckpt.as_deref().map(load_model).transpose()?;
    let samples: Vec<usize> = if a.decoder == DecoderKind::Volumetric { a.samples.clone() } else { vec![0] };
    let mut reports: Vec<BenchReport> = Vec::new();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.log)
        .with_context(|| format!("opening {}", a.log.display()))?;
    for &s in &samples {
        for &k in &a.slots {
            let mut settings = BenchSettings::new(a.decoder, k, s, a.resolution);
            settings.frames = a.frames;
            settings.warmup = a.warmup;
            settings.memory_budget = a.memory_budget_mb << 20;
            settings.seed = a.seed;
            let r = bench(model.as_ref(), &settings)?;
            writeln!(log, "{}", serde_json::to_string(&r)?)?;
            reports.push(r);
        }
    }
    print!("{}", format_grid(&reports));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let max_resolution = colf::train::RESOLUTIONS
        .iter()
        .copied()
        .filter(|&r| r >= model.config.image_size)
        .max()
        .unwrap_or(model.config.image_size);
    let config = colf_service::ServiceConfig {
        max_sessions: a.max_sessions,
        ttl: Duration::from_secs(a.ttl_seconds),
        max_resolution,
        encode_seed: a.seed,
        checkpoint: a.ckpt.display().to_string(),
    };
    let state = colf_service::AppState::new(Some(model), config);
    let addr = SocketAddr::new(a.host, a.port);
    tokio::runtime::Runtime::new()?.block_on(colf_service::serve(state, addr))?;
    Ok(())
}
