//! Command-line front end and local HTTP service.

pub mod server;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use splatfield::camera::CameraView;
use splatfield::error::Error;
use splatfield::gsplat::save_checkpoint;
use splatfield::oracle::{is_held_out, make_oracle_scene, Dataset};
use splatfield::prompt::{parse_edit_script, run_edit_command};
use splatfield::session::{feature_image, render_products, segmentation_images, view_from_pose, SelectRequest, Session};
use splatfield::tensor::{encode_gray_png, write_atomic};
use splatfield::trainer::{run_training_with, MetricsWriter, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
/// Bad arguments, config or input files.
pub const EXIT_USAGE: i32 = 2;
/// Training stopped on a non-finite loss or an emptied cloud.
pub const EXIT_TRAIN_ABORT: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.gsplat";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DEFAULT_TEACHER_DIM: usize = 32;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::usage(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: format!("{}: {e}", path.display()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "splatfield", version, about = "Gaussian splatting with distilled feature fields")]
pub struct Cli {
    /// Seed for scene generation and initialization.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset directory or a generated oracle scene.
    Train(TrainArgs),
    /// Render RGB, feature PCA and segmentation images for one pose.
    Render(RenderArgs),
    /// Apply an edit script to a checkpoint.
    Edit(EditArgs),
    /// Select Gaussians by labels or by a pixel prompt.
    Query(QueryArgs),
    /// Evaluate a checkpoint against a dataset and write per-view images.
    Viz(VizArgs),
    /// Generate an oracle dataset.
    MakeDataset(MakeDatasetArgs),
    /// Serve render, prompt and edit endpoints over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Gaussians per class in the generated scene.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (views.txt, imgs/, feats/, codebook.txt).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate an oracle scene with this many classes instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Decoder output (teacher feature) dimension. Generated scenes use
    /// it as their embedding size, default 32; datasets must match it.
    #[arg(long)]
    pub decoder_out: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Rendered feature dimension.
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    /// Render teacher-dimension features directly, without a decoder.
    #[arg(long)]
    pub no_decoder: bool,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub lambda_dssim: f64,
    /// Weight of the RGB loss; 0 trains features only.
    #[arg(long, default_value_t = 1.0)]
    pub photometric_weight: f64,
    #[arg(long, default_value_t = 2000)]
    pub init_count: usize,
    #[arg(long, default_value_t = 100_000)]
    pub max_gaussians: usize,
    /// Train on every view instead of holding out every fifth.
    #[arg(long)]
    pub all_views: bool,
    /// Output directory for the checkpoint, metrics and codebook.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// World-to-camera pose, 16 comma-separated row-major scalars.
    #[arg(long, conflicts_with = "orbit", allow_hyphen_values = true)]
    pub pose: Option<String>,
    /// Orbit camera `theta,phi,radius` (radians) around the origin.
    #[arg(long, allow_hyphen_values = true)]
    pub orbit: Option<String>,
    #[arg(long, short = 'W', default_value_t = 256)]
    pub width: usize,
    #[arg(long, short = 'H', default_value_t = 256)]
    pub height: usize,
}

impl ViewArgs {
    pub fn view(&self) -> CliResult<CameraView> {
        match (&self.pose, &self.orbit) {
            (Some(p), None) => Ok(view_from_pose(p, self.width, self.height)?),
            (None, Some(o)) => {
                let v = parse_floats::<3>(o, "orbit")?;
                Ok(CameraView::orbit(v[0], v[1], v[2], self.width, self.height)?)
            }
            _ => Err(CliError::usage("give --pose or --orbit")),
        }
    }

    pub fn pose_string(&self) -> CliResult<String> {
        Ok(pose_string(&self.view()?))
    }
}

pub fn pose_string(view: &CameraView) -> String {
    view.pose_row_major().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats<const K: usize>(s: &str, what: &str) -> CliResult<[f64; K]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("bad {what} {s:?}: {e}")))?;
    v.try_into()
        .map_err(|_| CliError::usage(format!("{what} needs {K} comma-separated numbers, got {s:?}")))
}

fn parse_usizes<const K: usize>(s: &str, what: &str) -> CliResult<[usize; K]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("bad {what} {s:?}: {e}")))?;
    v.try_into()
        .map_err(|_| CliError::usage(format!("{what} needs {K} comma-separated integers, got {s:?}")))
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Label codebook (default: codebook.txt next to the checkpoint).
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[command(flatten)]
    pub view: ViewArgs,
    /// Background color `r,g,b` in [0, 1].
    #[arg(long, default_value = "0,0,0")]
    pub bg: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Lines of `<op> <label[,label...]> [soft|hard|hybrid [th]]`.
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Comma-separated labels.
    #[arg(long, conflicts_with_all = ["point", "rect"])]
    pub labels: Option<String>,
    /// Pixel `x,y` in the view.
    #[arg(long, conflicts_with = "rect")]
    pub point: Option<String>,
    /// Pixel box `x0,y0,x1,y1` (upper corner exclusive).
    #[arg(long = "box")]
    pub rect: Option<String>,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, default_value = "hybrid")]
    pub mode: String,
    #[arg(long)]
    pub th: Option<f64>,
    /// Write the selection's image-space mask here.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate every view, not only the held-out ones.
    #[arg(long)]
    pub all_views: bool,
    /// Write rgb/features/segmentation PNGs per view here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Gaussian pixel noise added to the RGB images.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "0,0,0")]
    pub bg: String,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Render(a) => render(a),
        Command::Edit(a) => edit(a),
        Command::Query(a) => query(a),
        Command::Viz(a) => viz(a),
        Command::MakeDataset(a) => make_dataset(a, cli.seed),
        Command::Serve(a) => server::serve(a),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn parse_background(s: &str) -> CliResult<[f64; 3]> {
    let bg = parse_floats::<3>(s, "background")?;
    if bg.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CliError::usage(format!("background components must lie in [0, 1], got {s:?}")));
    }
    Ok(bg)
}

fn train(a: &TrainArgs, seed: u64) -> CliResult {
    let dataset = match (&a.data, a.synthetic) {
        (Some(dir), None) => Dataset::load(dir)?,
        (None, Some(k)) => {
            let dim = a.decoder_out.unwrap_or(DEFAULT_TEACHER_DIM);
            Dataset::from_scene(&make_oracle_scene(k, a.scene.per_class, dim, seed)?, None)
        }
        _ => return Err(CliError::usage("give --data or --synthetic")),
    };
    if let Some(m) = a.decoder_out.filter(|&m| m != dataset.codebook.dim()) {
        return Err(CliError::usage(format!(
            "--decoder-out {m} does not match the dataset feature dimension {}",
            dataset.codebook.dim()
        )));
    }
    let hold_out = !a.all_views && dataset.len() >= 5;
    let train_views = dataset.train_views(hold_out);
    let config = TrainConfig {
        iterations: a.iters,
        feature_dim: if a.no_decoder { dataset.codebook.dim() } else { a.feature_dim },
        use_decoder: !a.no_decoder,
        gamma: a.gamma,
        lambda_dssim: a.lambda_dssim,
        photometric_weight: a.photometric_weight,
        init_count: a.init_count,
        max_gaussians: a.max_gaussians,
        seed,
        ..TrainConfig::default()
    };
    config.validate()?;

    create_dir(&a.out)?;
    let metrics_path = a.out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = MetricsWriter::new(std::io::BufWriter::new(file)).map_err(|e| io_err(&metrics_path, e))?;
    let result = run_training_with(&train_views, &config, |m, _| {
        if m.iteration % 100 == 0 {
            log::info!(
                "iter {:5} loss {:.5} psnr {:.2} gaussians {}",
                m.iteration,
                m.total_loss,
                m.psnr,
                m.num_gaussians
            );
        }
        metrics.write(m).map_err(|e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        })
    })
    .map_err(|e| match e {
        Error::NonFiniteLoss { .. } | Error::AllPruned => CliError {
            code: EXIT_TRAIN_ABORT,
            message: format!("training aborted: {e}"),
        },
        other => other.into(),
    })?;
    use std::io::Write;
    metrics.into_inner().flush().map_err(|e| io_err(&metrics_path, e))?;

    save_checkpoint(&result.cloud, result.decoder.as_ref(), &a.out.join(CHECKPOINT_FILE))?;
    dataset.codebook.save(&a.out.join(splatfield::session::CODEBOOK_FILE))?;
    println!("gaussians {}", result.cloud.len());
    if let Some(last) = result.log.last() {
        println!("final train psnr {:.3}", last.psnr);
    }
    if hold_out {
        let eval = dataset.evaluate(&result.cloud, result.decoder.as_ref(), &dataset.held_out(), config.background)?;
        println!("held-out psnr {:.3}", eval.mean_psnr);
        println!("held-out miou {:.4}", eval.miou.mean);
    }
    Ok(())
}

fn render(a: &RenderArgs) -> CliResult {
    let mut session = Session::load(&a.checkpoint, a.codebook.as_deref())?;
    session.background = parse_background(&a.bg)?;
    let view = a.view.view()?;
    create_dir(&a.out)?;
    let products = session.render(&view)?;
    write_atomic(&a.out.join("rgb.png"), &products.output.image.encode_png()?)?;
    write_atomic(&a.out.join("features.png"), &feature_image(&products.features)?.encode_png()?)?;
    match &session.codebook {
        Some(cb) => {
            let (_, seg) = segmentation_images(&products, cb)?;
            write_atomic(&a.out.join("seg.png"), &seg.encode_png()?)?;
        }
        None => log::warn!("no codebook; seg.png skipped"),
    }
    Ok(())
}

fn edit(a: &EditArgs) -> CliResult {
    let session = Session::load(&a.checkpoint, a.codebook.as_deref())?;
    let text = fs::read_to_string(&a.script).map_err(|e| CliError::usage(format!("{}: {e}", a.script.display())))?;
    let commands = parse_edit_script(&text)?;
    let codebook = session
        .codebook
        .as_ref()
        .ok_or_else(|| CliError::usage("edit needs a codebook (--codebook)"))?;
    let mut cloud = session.working().clone();
    for cmd in &commands {
        let (edited, sel) = run_edit_command(&cloud, session.decoder.as_ref(), codebook, cmd)?;
        println!("{} {}: {} selected", cmd.op, cmd.labels.join(","), sel.count());
        cloud = edited;
    }
    let removed = cloud.compact_transparent();
    if cloud.is_empty() {
        return Err(CliError::usage("edit removed every Gaussian"));
    }
    save_checkpoint(&cloud, session.decoder.as_ref(), &a.out)?;
    println!("wrote {} gaussians ({removed} removed)", cloud.len());
    Ok(())
}

fn query(a: &QueryArgs) -> CliResult {
    let session = Session::load(&a.checkpoint, a.codebook.as_deref())?;
    let has_view = a.view.pose.is_some() || a.view.orbit.is_some();
    let req = SelectRequest {
        labels: a.labels.as_ref().map(|l| l.split(',').map(String::from).collect()),
        point: a
            .point
            .as_deref()
            .map(|p| parse_usizes::<2>(p, "point").map(|[x, y]| splatfield::session::Point { x, y }))
            .transpose()?,
        rect: a
            .rect
            .as_deref()
            .map(|r| {
                parse_usizes::<4>(r, "box").map(|[x0, y0, x1, y1]| splatfield::session::Rect { x0, y0, x1, y1 })
            })
            .transpose()?,
        pose: has_view.then(|| a.view.pose_string()).transpose()?,
        w: a.view.width,
        h: a.view.height,
        mode: Some(a.mode.clone()),
        th: a.th,
    };
    let count = match &a.mask {
        Some(path) => {
            let (sel, png) = session.prompt(&req)?;
            write_atomic(path, &png)?;
            sel.count()
        }
        None => session.select(&req)?.count(),
    };
    println!("selected {count} of {}", session.working().len());
    Ok(())
}

fn viz(a: &VizArgs) -> CliResult {
    let session = Session::load(&a.checkpoint, Some(&a.data.join(splatfield::session::CODEBOOK_FILE)))?;
    let dataset = Dataset::load(&a.data)?;
    let views: Vec<usize> = (0..dataset.len()).filter(|&i| a.all_views || is_held_out(i)).collect();
    let eval = dataset.evaluate(session.working(), session.decoder.as_ref(), &views, session.background)?;
    for (i, p) in eval.views.iter().zip(&eval.psnr) {
        println!("view {i:4} psnr {p:.3}");
    }
    println!("mean psnr {:.3}", eval.mean_psnr);
    println!("miou {:.4}", eval.miou.mean);
    if let Some(out) = &a.out {
        create_dir(out)?;
        for &i in &views {
            let products = render_products(session.working(), session.decoder.as_ref(), &dataset.views[i], session.background)?;
            products.output.image.save_png(&out.join(format!("{i:04}_rgb.png")))?;
            feature_image(&products.features)?.save_png(&out.join(format!("{i:04}_features.png")))?;
            let (classes, seg) = segmentation_images(&products, &dataset.codebook)?;
            seg.save_png(&out.join(format!("{i:04}_seg.png")))?;
            let v = &dataset.views[i];
            write_atomic(&out.join(format!("{i:04}_classes.png")), &encode_gray_png(v.width, v.height, &classes)?)?;
        }
    }
    Ok(())
}

fn make_dataset(a: &MakeDatasetArgs, seed: u64) -> CliResult {
    if !(a.noise >= 0.0) {
        return Err(CliError::usage("--noise must be >= 0"));
    }
    let scene = make_oracle_scene(a.classes, a.scene.per_class, a.dim, seed)?;
    let noise = (a.noise > 0.0).then_some((a.noise, seed));
    let dataset = Dataset::from_scene(&scene, noise);
    dataset.save(&a.out)?;
    println!("wrote {} views to {}", dataset.len(), a.out.display());
    Ok(())
}
