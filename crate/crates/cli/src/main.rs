//! `colnerf` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use colnerf::metrics::{view_metrics, MetricsReport};
use colnerf::scene::{
    load_dataset, make_scene, read_png, save_dataset, write_depth_sidecar, write_png, AnalyticField, Image, SceneDataset,
    SceneSpec, Split,
};
use colnerf::trainer::{eval_views, Ablation, LogRow, TrainConfig, Trainer, LOG_HEADER};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const CONFIG_FILE: &str = "config.toml";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "colnerf", version, about = "Cross-view fused radiance fields on small synthetic scenes")]
struct Cli {
    /// Worker threads (falls back to COLF_THREADS).
    #[arg(long, global = true, env = "COLF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory
    MakeScene(MakeSceneArgs),
    /// Train a model on one or more scenes
    Train(TrainArgs),
    /// Render views of a scene with a trained model
    Render(RenderArgs),
    /// Render held-out views and report PSNR / SSIM / Average(2-term)
    Eval(EvalArgs),
    /// Train and evaluate every ablation row
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    TriSphere,
    Random,
}

#[derive(Args)]
struct MakeSceneArgs {
    #[arg(long, value_enum, default_value = "tri-sphere")]
    preset: Preset,
    /// Total number of views (at least 2).
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(2..=1024))]
    views: u64,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(4..=4096))]
    size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Training flags; each one overrides the matching key of `--config`.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source (conditioning) views per scene.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => read_config(p)?,
            None => base.unwrap_or_default(),
        };
        if let Some(v) = self.views {
            c.n_source_views = v;
        }
        if let Some(v) = self.iters {
            c.iterations = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.rays {
            let refs = v / 8;
            c.rays_per_iter = v;
            c.reference_rays = refs;
            c.neighbor_rays = refs;
            c.random_rays = v - refs;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directories to train on.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    scenes: Vec<PathBuf>,
    /// Scene used for periodic evaluation (default: the first training scene).
    #[arg(long)]
    eval_scene: Option<PathBuf>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Checkpoint to continue from; its sidecar config is the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// `held-out`, `target`, `test`, `source`, `all`, or a comma list of indices.
    #[arg(long, default_value = "held-out")]
    views: String,
    /// Also write depth maps (normalized PNG plus raw f64 sidecar).
    #[arg(long)]
    depth: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth scene.
    #[arg(long)]
    scene: PathBuf,
    /// Trained checkpoint to render with.
    #[arg(long, conflicts_with = "rendered", required_unless_present = "rendered")]
    checkpoint: Option<PathBuf>,
    /// Directory of `view_XXX.png` renders to score instead.
    #[arg(long)]
    rendered: Option<PathBuf>,
    /// Maximum number of held-out views.
    #[arg(long, default_value_t = usize::MAX)]
    max_views: usize,
    /// Where to write the per-view CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    scenes: Vec<PathBuf>,
    #[arg(long)]
    eval_scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sidecar_config(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(CONFIG_FILE)
}

fn load_scenes(dirs: &[PathBuf]) -> Result<Vec<SceneDataset>> {
    dirs.iter().map(|d| load_dataset(d).with_context(|| format!("loading scene {}", d.display()))).collect()
}

fn load_trainer(checkpoint: &Path) -> Result<Trainer> {
    if !checkpoint.is_file() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let config = read_config(&sidecar_config(checkpoint))?;
    Ok(Trainer::load(config, checkpoint)?)
}

fn cmd_make_scene(a: &MakeSceneArgs) -> Result<()> {
    let mut spec = SceneSpec::tri_sphere(a.views as usize, a.size as usize, a.seed);
    if let Preset::Random = a.preset {
        spec.field = AnalyticField::random(a.seed);
    }
    let ds = make_scene(&spec)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} views ({}x{}) to {}", ds.len(), a.size, a.size, a.out.display());
    Ok(())
}

/// Trains to completion, writing checkpoint, config sidecar and CSV log into `out`.
fn run_training(mut trainer: Trainer, scenes: &[SceneDataset], eval: Option<&SceneDataset>, out: &Path, append: bool) -> Result<Trainer> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), trainer.config.to_toml())?;
    let log_path = out.join(LOG_FILE);
    let mut log = if append && log_path.is_file() { fs::read_to_string(&log_path)? } else { format!("{LOG_HEADER}\n") };
    let total = trainer.config.iterations;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.train(scenes, eval, Some(&checkpoint), |row: &LogRow| {
        log.push_str(&row.to_csv());
        log.push('\n');
        if let Some(p) = row.psnr_eval {
            eprintln!("iter {:>6}/{total}  loss {:.5}  eval PSNR {p:.3}", row.iteration, row.losses.total);
        }
        Ok(())
    })?;
    fs::write(&log_path, log)?;
    Ok(trainer)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let eval = a.eval_scene.as_ref().map(|p| load_dataset(p).with_context(|| format!("loading scene {}", p.display()))).transpose()?;
    let trainer = match &a.resume {
        Some(ckpt) => {
            if !ckpt.is_file() {
                bail!("checkpoint {} not found", ckpt.display());
            }
            let mut config = a.flags.resolve(Some(read_config(&sidecar_config(ckpt))?))?;
            if let Some(ab) = a.ablation {
                config.ablation = ab;
            }
            let t = Trainer::load(config, ckpt)?;
            eprintln!("resuming at iteration {}", t.iteration);
            t
        }
        None => {
            let mut config = a.flags.resolve(None)?;
            if let Some(ab) = a.ablation {
                config.ablation = ab;
            }
            Trainer::new(config)?
        }
    };
    let start = Instant::now();
    let trainer = run_training(trainer, &scenes, eval.as_ref(), &a.out, a.resume.is_some())?;
    println!(
        "trained {} to iteration {} in {:.1}s; checkpoint {}",
        trainer.config.ablation,
        trainer.iteration,
        start.elapsed().as_secs_f64(),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn select_views(ds: &SceneDataset, spec: &str) -> Result<Vec<usize>> {
    let views = match spec {
        "held-out" => eval_views(ds, usize::MAX),
        "target" => ds.views_in(Split::Target),
        "test" => ds.views_in(Split::Test),
        "source" => ds.views_in(Split::Source),
        "all" => (0..ds.len()).collect(),
        list => list
            .split(',')
            .map(|s| {
                let k: usize = s.trim().parse().with_context(|| format!("bad view index {s:?}"))?;
                if k >= ds.len() {
                    bail!("view {k} out of range (scene has {})", ds.len());
                }
                Ok(k)
            })
            .collect::<Result<_>>()?,
    };
    if views.is_empty() {
        bail!("no views selected by {spec:?}");
    }
    Ok(views)
}

/// Depth normalized over its own range, near bright.
fn depth_image(width: usize, height: usize, depth: &[f64]) -> Result<Image> {
    let lo = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = depth.iter().flat_map(|d| [1.0 - (d - lo) / span; 3]).collect();
    Ok(Image::new(width, height, data)?)
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let ds = load_dataset(&a.scene).with_context(|| format!("loading scene {}", a.scene.display()))?;
    let views = select_views(&ds, &a.views)?;
    fs::create_dir_all(&a.out)?;
    for &k in &views {
        let r = trainer.render_view(&ds, &ds.cameras[k])?;
        write_png(&a.out.join(format!("view_{k:03}.png")), &r.image)?;
        if a.depth {
            let (w, h) = (r.image.width, r.image.height);
            write_png(&a.out.join(format!("depth_{k:03}.png")), &depth_image(w, h, &r.depth)?)?;
            write_depth_sidecar(&a.out.join(format!("depth_{k:03}.f64")), w, h, &r.depth)?;
        }
    }
    println!("rendered {} views to {}", views.len(), a.out.display());
    Ok(())
}

fn write_report(report: &MetricsReport, csv: Option<&Path>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(p) = csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.scene).with_context(|| format!("loading scene {}", a.scene.display()))?;
    let report = match (&a.checkpoint, &a.rendered) {
        (Some(ckpt), _) => load_trainer(ckpt)?.evaluate(&ds, a.max_views)?.0,
        (None, Some(dir)) => {
            let mut rows = Vec::new();
            for k in eval_views(&ds, a.max_views) {
                let img = read_png(&dir.join(format!("view_{k:03}.png")))?;
                rows.push(view_metrics(k, &img, &ds.images[k])?);
            }
            if rows.is_empty() {
                bail!("scene has no held-out views");
            }
            MetricsReport::new(rows)
        }
        (None, None) => bail!("either --checkpoint or --rendered is required"),
    };
    write_report(&report, a.csv.as_deref())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let eval = match &a.eval_scene {
        Some(p) => load_dataset(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => scenes[0].clone(),
    };
    let base = a.flags.resolve(None)?;
    let mut csv = String::from("ablation,psnr,ssim,average_2term,depth_mae,train_s\n");
    println!("{:>9} {:>9} {:>8} {:>16} {:>10}", "row", "PSNR", "SSIM", "Average(2-term)", "depth MAE");
    for ablation in Ablation::ALL {
        let config = TrainConfig { ablation, ..base.clone() };
        let start = Instant::now();
        let trainer = run_training(Trainer::new(config)?, &scenes, Some(&eval), &a.out.join(ablation.name()), false)?;
        let secs = start.elapsed().as_secs_f64();
        let (report, depth) = trainer.evaluate(&eval, usize::MAX)?;
        let depth_s = depth.map(|d| format!("{d:.6}")).unwrap_or_default();
        csv.push_str(&format!("{ablation},{:.6},{:.6},{:.6},{depth_s},{secs:.1}\n", report.psnr, report.ssim, report.average));
        println!("{ablation:>9} {:>9.3} {:>8.4} {:>16.5} {depth_s:>10}", report.psnr, report.ssim, report.average);
    }
    let path = a.out.join("ablation.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::MakeScene(a) => cmd_make_scene(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
