//! Command-line driver: argument parsing, config files and the subcommands.
//!
//! Every flag has a config-file key of the same name (dashes or underscores).
//! A config file is flat `key = value` text, `#` starts a comment, and flags on
//! the command line win over file values.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use conesplat_core::analysis::{
    blend_count_stats, perceived_size_histogram, perceived_sizes, psnr, scale_histogram, BinSpec, SceneStats,
};
use conesplat_core::camera::{Camera, Vec3};
use conesplat_core::dataset::Dataset;
use conesplat_core::densify::{write_merge_csv, DensifyConfig};
use conesplat_core::equivalence::{equivalence_render_options, probe_pixels, verify_equivalence};
use conesplat_core::field::{train_grid, Aabb, DenseGridField, GridTrainConfig, RadianceField, MIN_T_NEAR};
use conesplat_core::gradcheck::random_check;
use conesplat_core::init::{initialize_scene, InitConfig, InitScale};
use conesplat_core::optimize::{evaluate, train, write_metrics_csv, PenaltyKind, PenaltyReduction, TrainConfig};
use conesplat_core::ply::{load_ply, save_ply, PlyPrecision};
use conesplat_core::raster::{render, RenderOptions};
use conesplat_core::sh::ShOrder;
use conesplat_core::synthetic::{generate, standard_spec, SyntheticSceneSpec, SCENE_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_P_INIT: usize = 1_000_000;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable config or missing inputs; nothing was written.
    Usage(String),
    /// The command ran and failed.
    Failure(String),
}

impl From<conesplat_core::Error> for CliError {
    fn from(e: conesplat_core::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(format!("i/o error: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "conesplat", version, about = "Gaussian splatting reconstruction with proxy-guided densification")]
pub struct Cli {
    /// Flat key = value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleSource {
    Knn,
    Cone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Penalty {
    Signed,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(clap::Args, Debug, Clone)]
pub struct InitArgs {
    /// Number of primitives to place; the budget or one million when absent.
    #[arg(long)]
    pub p_init: Option<usize>,
    #[arg(long, value_enum, default_value_t = ScaleSource::Knn)]
    pub init_scale: ScaleSource,
    #[arg(long, default_value_t = 3)]
    pub knn_k: usize,
    /// Cone radius multiplier when `--init-scale cone`.
    #[arg(long, default_value_t = 2.0)]
    pub cone_lambda: f64,
    #[arg(long, default_value_t = 3)]
    pub sh_order: u8,
    /// March steps per ray for median depths.
    #[arg(long, default_value_t = 512)]
    pub n_steps: usize,
}

impl InitArgs {
    fn config(&self, seed: u64, budget: Option<usize>) -> CliResult<InitConfig> {
        let cap = budget.unwrap_or(usize::MAX);
        let p_init = self.p_init.unwrap_or(DEFAULT_P_INIT.min(cap));
        if p_init > cap {
            return Err(usage(format!("--p-init {p_init} exceeds the budget {cap}")));
        }
        let scale = match self.init_scale {
            ScaleSource::Knn => InitScale::Knn { k: self.knn_k },
            ScaleSource::Cone => InitScale::Cone { lambda: self.cone_lambda },
        };
        let sh_order = ShOrder::new(self.sh_order).map_err(|e| usage(e.to_string()))?;
        Ok(InitConfig { p_init, seed, n_steps: self.n_steps, scale, sh_order })
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a procedural scene into a posed image dataset.
    GenSynthetic {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Scene description JSON; the built-in three-shape scene otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Number of cameras on the ring.
        #[arg(long)]
        views: Option<usize>,
        /// Ray-march steps for the ground-truth images.
        #[arg(long)]
        gt_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a multi-resolution density grid to a dataset.
    TrainProxy {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Grid checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64])]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        grid_iters: usize,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1024)]
        batch_rays: usize,
        #[arg(long, default_value_t = 128)]
        n_steps: usize,
        /// `minx,miny,minz,maxx,maxy,maxz`; taken from the scene file or the camera frustums otherwise.
        #[arg(long, value_delimiter = ',', num_args = 6)]
        bounds: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seed a primitive scene from the proxy field.
    Init {
        #[arg(long)]
        data: PathBuf,
        /// Grid checkpoint or scene JSON; defaults to the scene file beside the manifest.
        #[arg(long)]
        field: Option<PathBuf>,
        /// PLY to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        init: InitArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Optimize a scene with error-guided densification.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        field: Option<PathBuf>,
        /// Starting PLY; initialized from the field when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Directory for `scene.ply`, `metrics.csv`, `merges.csv` and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        init: InitArgs,
        #[arg(long, alias = "total-iters", default_value_t = 30_000)]
        iters: u64,
        /// Hard cap on the primitive count; growth mode when absent.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0.02)]
        beta: f64,
        #[arg(long, default_value_t = 2.0)]
        lambda_scale: f64,
        #[arg(long, default_value_t = 0.005)]
        prune_threshold: f64,
        #[arg(long, default_value_t = 100)]
        interval: u64,
        /// Last densification iteration; five sixths of `--iters` when absent.
        #[arg(long)]
        densify_until: Option<u64>,
        #[arg(long, default_value_t = 0.2)]
        lambda_dssim: f64,
        #[arg(long, default_value_t = 2e-4)]
        lambda_opacity: f64,
        #[arg(long, value_enum, default_value_t = Penalty::Signed)]
        penalty: Penalty,
        #[arg(long, value_enum, default_value_t = Reduction::Mean)]
        penalty_reduction: Reduction,
        #[arg(long, default_value_t = 100)]
        metrics_every: u64,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Disable the screen-space low-pass filter.
        #[arg(long, action = ArgAction::SetTrue)]
        no_low_pass: bool,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Run single-threaded and record the run as reproducible.
        #[arg(long, action = ArgAction::SetTrue)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a scene from dataset cameras into PNGs.
    Render {
        /// Scene PLY.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated view indices; every view when absent.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, action = ArgAction::SetTrue)]
        no_low_pass: bool,
    },
    /// Print PSNR of a scene against dataset views.
    Metrics {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, action = ArgAction::SetTrue)]
        no_low_pass: bool,
    },
    /// Scale, perceived-size and blend-count statistics of a scene.
    Analyze {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for histograms and `stats.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Compare splatting of frustum primitives against volume rendering of the field.
    VerifyEquivalence {
        /// Grid checkpoint or scene JSON.
        #[arg(long)]
        field: PathBuf,
        /// Dataset supplying the camera; the scene file's ring otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = 64)]
        segments: usize,
        #[arg(long, default_value_t = 2.0)]
        lambda_scale: f64,
        #[arg(long)]
        t_near: Option<f64>,
        #[arg(long)]
        t_far: Option<f64>,
        /// Splat with the normalized low-pass enabled (expected to disagree).
        #[arg(long, action = ArgAction::SetTrue)]
        low_pass: bool,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the rasterizer gradients on random scenes.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        primitives: usize,
        #[arg(long, default_value_t = 3)]
        sh_order: u8,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn build_command() -> clap::Command {
    Cli::command().args_override_self(true).mut_subcommands(|c| c.args_override_self(true))
}

/// Reads `key = value` lines.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Splices config-file values in right after the subcommand so that later
/// command-line flags override them.
fn expand_config(args: Vec<String>) -> CliResult<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
    let entries = parse_config(&text)?;
    let cmd = build_command();
    let Some(pos) = args.iter().position(|a| cmd.find_subcommand(a).is_some()) else {
        return Ok(args);
    };
    let sub = cmd.find_subcommand(&args[pos]).expect("found above");
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| usage(format!("unknown config key '{key}' for {}", args[pos])))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => return Err(usage(format!("config key '{key}' expects true or false"))),
            }
        } else {
            injected.push(format!("--{key}={value}"));
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Runs the CLI on `argv` (including the program name), writing normal output
/// to `out` and diagnostics to `err`. Returns the exit code.
pub fn run_with<W: Write, E: Write>(argv: Vec<OsString>, out: &mut W, err: &mut E) -> i32 {
    let args: Vec<String> = match argv.into_iter().map(|a| a.into_string()).collect() {
        Ok(a) => a,
        Err(_) => {
            let _ = writeln!(err, "error: arguments must be valid UTF-8");
            return EXIT_USAGE;
        }
    };
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return report(e, err),
    };
    let matches = match build_command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => report(e, err),
    }
}

pub fn run(argv: Vec<OsString>) -> i32 {
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

fn report<E: Write>(e: CliError, err: &mut E) -> i32 {
    match e {
        CliError::Usage(m) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        CliError::Failure(m) => {
            let _ = writeln!(err, "error: {}", m.lines().next().unwrap_or(""));
            EXIT_FAILURE
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    require_file(path, "dataset manifest")?;
    Ok(Dataset::load(path)?)
}

fn is_scene_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn load_field(path: &Path) -> CliResult<Box<dyn RadianceField>> {
    require_file(path, "field")?;
    if is_scene_json(path) {
        Ok(Box::new(SyntheticSceneSpec::load(path)?.field()?))
    } else {
        Ok(Box::new(DenseGridField::load(path)?))
    }
}

/// `--field` or the scene file next to the manifest.
fn resolve_field(field: &Option<PathBuf>, data: &Path) -> CliResult<PathBuf> {
    match field {
        Some(p) => Ok(p.clone()),
        None => {
            let guess = data.parent().unwrap_or(Path::new(".")).join(SCENE_FILE);
            if guess.is_file() {
                Ok(guess)
            } else {
                Err(usage("no --field given and no scene file beside the dataset"))
            }
        }
    }
}

fn render_options(no_low_pass: bool) -> RenderOptions {
    RenderOptions { low_pass: !no_low_pass, ..RenderOptions::default() }
}

fn views_for(dataset: &Dataset, split: Split) -> Vec<usize> {
    match split {
        Split::Train => dataset.train_views(),
        Split::Test => dataset.test_views(),
        Split::All => (0..dataset.len()).collect(),
    }
}

fn execute<W: Write>(cli: Cli, out: &mut W) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        conesplat_core::par::set_threads(n);
    }
    match cli.command {
        Command::GenSynthetic { out: dir, spec, width, height, views, gt_steps, seed } => {
            let mut spec = match spec {
                Some(p) => {
                    require_file(&p, "scene spec")?;
                    SyntheticSceneSpec::load(&p)?
                }
                None => standard_spec(),
            };
            if let Some(w) = width {
                spec.width = w;
            }
            if let Some(h) = height {
                spec.height = h;
            }
            if let Some(v) = views {
                spec.ring.count = v;
            }
            if let Some(s) = gt_steps {
                spec.gt_steps = s;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let scene = generate(&spec)?;
            let manifest = scene.save(&dir)?;
            writeln!(out, "wrote {} views to {}", scene.dataset.len(), manifest.display())?;
        }
        Command::TrainProxy { data, out: path, resolutions, grid_iters, learning_rate, batch_rays, n_steps, bounds, seed } => {
            let dataset = load_dataset(&data)?;
            let bounds = match bounds {
                Some(b) => Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
                    .map_err(|e| usage(e.to_string()))?,
                None => {
                    let scene_file = data.parent().unwrap_or(Path::new(".")).join(SCENE_FILE);
                    if scene_file.is_file() {
                        SyntheticSceneSpec::load(&scene_file)?.bounds()?
                    } else {
                        Aabb::from_frustums(&dataset.cameras, 0.1, 2.0 * dataset.camera_extent())?
                    }
                }
            };
            let mut grid = DenseGridField::new(bounds, &resolutions).map_err(|e| usage(e.to_string()))?;
            let train_set = dataset.training_subset();
            let cfg = GridTrainConfig {
                iterations: grid_iters,
                learning_rate,
                batch_rays,
                n_steps,
                background: [0.0; 3],
                seed,
            };
            let rep = train_grid(&mut grid, &train_set.images, &train_set.cameras, &cfg)?;
            grid.save(&path)?;
            match rep.final_loss {
                Some(l) => writeln!(out, "final batch mse {l:.6e}")?,
                None => writeln!(out, "no iterations run")?,
            }
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Init { data, field, out: path, init, seed } => {
            let dataset = load_dataset(&data)?;
            let field_path = resolve_field(&field, &data)?;
            let field = load_field(&field_path)?;
            let cfg = init.config(seed, None)?;
            let (scene, stats) = initialize_scene(field.as_ref(), &dataset, &cfg)?;
            save_ply(&path, &scene, PlyPrecision::F32)?;
            writeln!(out, "accepted {} of {} ({} draws)", stats.accepted, stats.requested, stats.draws)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Train {
            data,
            field,
            scene,
            out: dir,
            init,
            iters,
            budget,
            beta,
            lambda_scale,
            prune_threshold,
            interval,
            densify_until,
            lambda_dssim,
            lambda_opacity,
            penalty,
            penalty_reduction,
            metrics_every,
            checkpoint_every,
            no_low_pass,
            precision,
            deterministic,
            seed,
        } => {
            let dataset = load_dataset(&data)?;
            let field_path = resolve_field(&field, &data)?;
            if let Some(s) = &scene {
                require_file(s, "scene")?;
            }
            let dc = DensifyConfig {
                budget,
                beta,
                lambda_scale,
                prune_threshold,
                interval,
                densify_until: densify_until.unwrap_or(iters * 5 / 6),
                n_steps: init.n_steps,
                seed,
            };
            let tc = TrainConfig {
                total_iters: iters,
                lambda_dssim,
                lambda_opacity,
                penalty: match penalty {
                    Penalty::Signed => PenaltyKind::Signed,
                    Penalty::Abs => PenaltyKind::Abs,
                },
                penalty_reduction: match penalty_reduction {
                    Reduction::Mean => PenaltyReduction::Mean,
                    Reduction::Sum => PenaltyReduction::Sum,
                },
                render: render_options(no_low_pass),
                metrics_every,
                checkpoint_every,
                checkpoint_dir: Some(dir.join("checkpoints")),
                deterministic,
                seed,
                ..TrainConfig::default()
            };
            tc.validate(&dc).map_err(|e| usage(e.to_string()))?;
            let init_cfg = init.config(seed, budget)?;
            if deterministic {
                conesplat_core::par::set_threads(1);
            }
            let field = load_field(&field_path)?;
            let mut gs = match &scene {
                Some(p) => load_ply(p)?,
                None => initialize_scene(field.as_ref(), &dataset, &init_cfg)?.0,
            };
            let rep = train(&mut gs, &dataset, field.as_ref(), &tc, &dc)?;
            fs::create_dir_all(&dir)?;
            let precision = match precision {
                Precision::F32 => PlyPrecision::F32,
                Precision::F64 => PlyPrecision::F64,
            };
            save_ply(&dir.join("scene.ply"), &gs, precision)?;
            write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &rep.metrics)?;
            write_merge_csv(fs::File::create(dir.join("merges.csv"))?, &rep.merges)?;
            writeln!(out, "primitives {}", gs.len())?;
            if !dataset.test_views().is_empty() {
                let p = evaluate(&gs, &dataset, &dataset.test_views(), &tc.render)?;
                writeln!(out, "test psnr {}", conesplat_core::analysis::format_psnr(p))?;
            }
            writeln!(out, "wrote {}", dir.join("scene.ply").display())?;
        }
        Command::Render { scene, data, out: dir, views, no_low_pass } => {
            let dataset = load_dataset(&data)?;
            require_file(&scene, "scene")?;
            let views = views.unwrap_or_else(|| (0..dataset.len()).collect());
            if let Some(&bad) = views.iter().find(|&&v| v >= dataset.len()) {
                return Err(usage(format!("view {bad} does not exist")));
            }
            let gs = load_ply(&scene)?;
            fs::create_dir_all(&dir)?;
            let opts = render_options(no_low_pass);
            for v in views {
                let img = render(&gs, &dataset.cameras[v], &opts)?.color;
                img.write_png(&dir.join(format!("render_{v:03}.png")))?;
            }
            writeln!(out, "wrote renders to {}", dir.display())?;
        }
        Command::Metrics { scene, data, split, no_low_pass } => {
            let dataset = load_dataset(&data)?;
            require_file(&scene, "scene")?;
            let gs = load_ply(&scene)?;
            let views = views_for(&dataset, split);
            if views.is_empty() {
                return Err(CliError::Failure("no views in the requested split".into()));
            }
            let opts = render_options(no_low_pass);
            let mut total = 0.0;
            for &v in &views {
                let img = render(&gs, &dataset.cameras[v], &opts)?.color;
                let p = psnr(&img, &dataset.images[v])?;
                total += p;
                writeln!(out, "view {v} psnr {}", conesplat_core::analysis::format_psnr(p))?;
            }
            writeln!(out, "mean psnr {}", conesplat_core::analysis::format_psnr(total / views.len() as f64))?;
            writeln!(out, "primitives {}", gs.len())?;
        }
        Command::Analyze { scene, data, out: dir, bins } => {
            let dataset = load_dataset(&data)?;
            require_file(&scene, "scene")?;
            if bins == 0 {
                return Err(usage("--bins must be >= 1"));
            }
            let gs = load_ply(&scene)?;
            fs::create_dir_all(&dir)?;
            let scales = scale_histogram(&gs, BinSpec::log(1e-4, 10.0, bins), &dataset.cameras)?;
            fs::write(dir.join("scale_histogram.csv"), scales.to_csv())?;
            fs::write(dir.join("scale_histogram.json"), scales.to_json())?;
            let sizes = perceived_size_histogram(&gs, &dataset.cameras, BinSpec::log(1e-2, 1e3, bins))?;
            fs::write(dir.join("perceived_size_histogram.csv"), sizes.to_csv())?;
            fs::write(dir.join("perceived_size_histogram.json"), sizes.to_json())?;
            let opts = RenderOptions::default();
            let stats = SceneStats {
                n_gaussians: gs.len(),
                mean_blend_count: blend_count_stats(&gs, &dataset.cameras, &opts)?,
                mean_psnr: if dataset.is_empty() {
                    None
                } else {
                    Some(evaluate(&gs, &dataset, &(0..dataset.len()).collect::<Vec<_>>(), &opts)?)
                },
                median_scale: median(gs.primitives.iter().flat_map(|p| p.scale().iter().copied().collect::<Vec<_>>()).collect()),
                median_perceived_size: median(perceived_sizes(&gs, &dataset.cameras)),
            };
            let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
            fs::write(dir.join("stats.json"), &json)?;
            writeln!(out, "{json}")?;
        }
        Command::VerifyEquivalence { field, data, view, segments, lambda_scale, t_near, t_far, low_pass, out: report_path } => {
            require_file(&field, "field")?;
            let camera = equivalence_camera(&field, data.as_deref(), view)?;
            if segments == 0 {
                return Err(usage("--segments must be >= 1"));
            }
            let f = load_field(&field)?;
            let (near, far) = match (t_near, t_far) {
                (Some(a), Some(b)) => (a, b),
                (a, b) => {
                    let (n0, f0) = depth_range(&camera, &f.bounds());
                    (a.unwrap_or(n0), b.unwrap_or(f0))
                }
            };
            let mut opts = equivalence_render_options();
            if low_pass {
                opts.low_pass = true;
                opts.normalize_low_pass = true;
            }
            let rep = verify_equivalence(f.as_ref(), &camera, &probe_pixels(&camera), near, far, segments, lambda_scale, &opts)?;
            let json = rep.to_json();
            if let Some(p) = report_path {
                fs::write(&p, &json)?;
            }
            writeln!(out, "{json}")?;
            if !rep.passed {
                return Err(CliError::Failure(format!(
                    "max abs diff {:.3e} exceeds tolerance {:.1e}",
                    rep.max_abs_diff, rep.tolerance
                )));
            }
        }
        Command::Gradcheck { trials, primitives, sh_order, tolerance, seed } => {
            let order = ShOrder::new(sh_order).map_err(|e| usage(e.to_string()))?;
            if primitives == 0 || trials == 0 {
                return Err(usage("--trials and --primitives must be >= 1"));
            }
            let mut worst = 0.0f64;
            for t in 0..trials {
                let errs = random_check(seed.wrapping_add(t as u64), primitives, order)?;
                worst = worst.max(errs.max());
                writeln!(out, "{}", serde_json::to_string(&errs).expect("errors serialize"))?;
            }
            writeln!(out, "max relative error {worst:.3e}")?;
            if !(worst < tolerance) {
                return Err(CliError::Failure(format!("gradient error {worst:.3e} above {tolerance:.1e}")));
            }
        }
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn equivalence_camera(field: &Path, data: Option<&Path>, view: usize) -> CliResult<Camera> {
    let cameras = match data {
        Some(d) => load_dataset(d)?.cameras,
        None if is_scene_json(field) => SyntheticSceneSpec::load(field)?.cameras()?,
        None => return Err(usage("a grid field needs --data for its camera")),
    };
    cameras.get(view).cloned().ok_or_else(|| usage(format!("view {view} does not exist")))
}

/// Distances from the camera center that bracket the whole box.
fn depth_range(camera: &Camera, bounds: &Aabb) -> (f64, f64) {
    let c = camera.center();
    let half = bounds.size().norm() / 2.0;
    let d = (bounds.center() - c).norm();
    ((d - half).max(MIN_T_NEAR), d + half)
}
