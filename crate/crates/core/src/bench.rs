//! Command implementations behind the `nerfpose` binary: scene and dataset
//! generation, field training, single-image inversion, the pose-recovery
//! benchmark and the loss ablation.
//!
//! Every command writes its results under an output directory. Report files
//! depend only on the configuration and seed; wall-clock times go to a
//! separate `timing.json`.

use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, SampleBounds, SampleSettings};
use crate::demo2d::{ascii_plot, run_demo, svg_plot, Demo2dConfig, Parameterization};
use crate::error::{Error, Result};
use crate::field::{load_checkpoint, save_checkpoint, Aabb, AnalyticScene, FieldSample, RadianceField, VoxelGridField};
use crate::image::Image;
use crate::lie::{geodesic_rotation_error, perturb_pose, translation_error, Pose, Vec3};
use crate::loss::{corrupt_image, CorruptionSpec, LossKind, PixelLoss};
use crate::render::render_image;
use crate::rng::RngStream;
use crate::search::{run_search, Objective, SearchConfig, SearchResult};
use crate::train::{
    checkpoint_path, grid_bounds, mean_psnr, orbit_poses, render_dataset, test_indices, train_field, PosedDataset,
    Split, TrainConfig,
};

const TRIAL_LABEL: u64 = 0x7121;
const CORRUPT_LABEL: u64 = 0xC022;

pub const SCENE_FILE: &str = "scene.json";
pub const DATASET_DIR: &str = "dataset";

/// Process exit code for an error.
///
/// | code | meaning |
/// |------|---------|
/// | 1 | other |
/// | 2 | invalid configuration or arguments |
/// | 3 | file system error |
/// | 4 | dataset not found |
/// | 5 | search or training diverged |
/// | 6 | image size does not match the intrinsics |
/// | 7 | malformed input file |
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidIntrinsics(_) | Error::PixelOutOfBounds { .. } => 2,
        Error::DimensionOverflow { .. } => 2,
        Error::Io { .. } => 3,
        Error::DatasetNotFound(_) => 4,
        Error::SearchDiverged | Error::TrainingDiverged { .. } => 5,
        Error::DimensionMismatch { .. } => 6,
        Error::BadMagic
        | Error::Truncated { .. }
        | Error::MalformedPose(_)
        | Error::MalformedImage(_)
        | Error::Json(_) => 7,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSpec {
    Reference,
    SingleSphere,
    Analytic(AnalyticScene),
    /// A trained voxel grid checkpoint.
    Checkpoint(PathBuf),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::Reference
    }
}

impl SceneSpec {
    pub fn analytic(&self) -> Result<AnalyticScene> {
        match self {
            SceneSpec::Reference => Ok(AnalyticScene::reference()),
            SceneSpec::SingleSphere => Ok(AnalyticScene::single_sphere()),
            SceneSpec::Analytic(s) => Ok(s.clone()),
            SceneSpec::Checkpoint(p) => Err(Error::InvalidConfig(format!(
                "an analytic scene is required, got checkpoint {}",
                p.display()
            ))),
        }
    }

    pub fn load(&self) -> Result<SceneField> {
        match self {
            SceneSpec::Checkpoint(p) => Ok(SceneField::Grid(load_checkpoint(p)?)),
            other => Ok(SceneField::Analytic(other.analytic()?)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SceneSpec::Reference => "reference".into(),
            SceneSpec::SingleSphere => "single_sphere".into(),
            SceneSpec::Analytic(s) => format!("analytic ({} primitives)", s.primitives.len()),
            SceneSpec::Checkpoint(p) => format!("checkpoint {}", p.display()),
        }
    }
}

/// Either kind of field a command can run against.
#[derive(Clone, Debug)]
pub enum SceneField {
    Analytic(AnalyticScene),
    Grid(VoxelGridField),
}

impl RadianceField for SceneField {
    fn query(&self, p: &Vec3) -> FieldSample {
        match self {
            SceneField::Analytic(s) => s.query(p),
            SceneField::Grid(g) => g.query(p),
        }
    }

    fn bounds(&self) -> Aabb {
        match self {
            SceneField::Analytic(s) => s.bounds(),
            SceneField::Grid(g) => g.bounds(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    /// Distance of benchmark and dataset cameras from the origin.
    pub radius: f64,
    /// Elevation band (radians) for random benchmark viewpoints.
    pub min_elevation: f64,
    pub max_elevation: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 40.0,
            radius: 3.0,
            min_elevation: -0.3,
            max_elevation: 0.8,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        if !(self.radius > 0.0 && self.min_elevation <= self.max_elevation) {
            return Err(Error::InvalidConfig(format!("invalid camera config {self:?}")));
        }
        Ok(())
    }

    /// Camera on the orbit sphere at a random azimuth and elevation, looking
    /// at the origin with +z up.
    pub fn random_view<R: Rng + ?Sized>(&self, rng: &mut R) -> Pose {
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.random_range(self.min_elevation..=self.max_elevation);
        let eye = Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * self.radius;
        Pose::look_at(&eye, &Vec3::zeros(), &Vec3::z())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub frames: usize,
    /// Fraction of frames held out for testing, rounded down.
    pub test_fraction: f64,
    pub samples_per_ray: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frames: 24,
            test_fraction: 0.2,
            samples_per_ray: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    #[default]
    Multiple,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Multiple => "multiple",
        }
    }

    pub fn search_config(&self, base: &SearchConfig) -> SearchConfig {
        match self {
            Mode::Single => base.single(),
            Mode::Multiple => *base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub trials: usize,
    /// Start-pose perturbation ranges.
    pub rot_deg: f64,
    pub trans: f64,
    pub rot_threshold_deg: f64,
    pub trans_threshold: f64,
    pub losses: Vec<LossKind>,
    pub modes: Vec<Mode>,
    pub corruption: CorruptionSpec,
    /// Run trials concurrently. Results are identical either way.
    pub parallel_trials: bool,
    /// Write one search trace CSV per trial and run.
    pub write_traces: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            rot_deg: 15.0,
            trans: 0.25,
            rot_threshold_deg: 5.0,
            trans_threshold: 0.05,
            losses: vec![LossKind::L2],
            modes: vec![Mode::Single, Mode::Multiple],
            corruption: CorruptionSpec::none(),
            parallel_trials: false,
            write_traces: true,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if !(self.rot_threshold_deg > 0.0 && self.trans_threshold > 0.0) {
            return bad("success thresholds must be > 0");
        }
        if !(self.rot_deg >= 0.0 && self.trans >= 0.0) {
            return bad("perturbation ranges must be >= 0");
        }
        if self.losses.is_empty() || self.modes.is_empty() {
            return bad("at least one loss and one mode are required");
        }
        self.corruption.validate()
    }
}

/// Everything the binary reads from `--config`. Missing fields take their
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub scene: SceneSpec,
    pub camera: CameraConfig,
    pub dataset: DatasetConfig,
    pub grid_resolution: u32,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub benchmark: BenchmarkConfig,
    pub demo2d: Demo2dConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            camera: CameraConfig::default(),
            dataset: DatasetConfig::default(),
            grid_resolution: 64,
            train: TrainConfig::default(),
            search: SearchConfig {
                trace_stride: 16,
                ..SearchConfig::default()
            },
            benchmark: BenchmarkConfig::default(),
            demo2d: Demo2dConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Context {
    pub seed: u64,
    pub config: CliConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(seed: u64, config: CliConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            config,
            out: out.into(),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }
}

fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDocument {
    pub scene: AnalyticScene,
    pub intrinsics: Intrinsics,
    /// Grid bounds for fields trained on this scene's datasets.
    pub grid_bounds: Aabb,
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct MakeSceneArgs {
    /// Number of rendered frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Fraction of frames held out as the test split.
    #[arg(long)]
    pub split_test: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MakeSceneReport {
    pub scene_file: PathBuf,
    pub dataset_dir: PathBuf,
    pub train_frames: usize,
    pub test_frames: usize,
}

/// Writes `scene.json` and a rendered dataset under `<out>/dataset`.
pub fn cmd_make_scene(ctx: &Context, args: &MakeSceneArgs) -> Result<MakeSceneReport> {
    let cfg = &ctx.config;
    let frames = args.frames.unwrap_or(cfg.dataset.frames);
    let fraction = args.split_test.unwrap_or(cfg.dataset.test_fraction);
    if frames == 0 || !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "need frames >= 1 and split-test in [0, 1), got {frames} and {fraction}"
        )));
    }
    cfg.camera.validate()?;
    let scene = cfg.scene.analytic()?;
    let intrinsics = cfg.camera.intrinsics()?;
    let poses = orbit_poses(frames, cfg.camera.radius, ctx.seed);
    let mut dataset = render_dataset(&scene, intrinsics, &poses, cfg.dataset.samples_per_ray)?;
    let test = test_indices(frames, fraction);
    for &i in &test {
        dataset.frames[i].split = Split::Test;
    }
    let out = ctx.out_dir()?;
    let dataset_dir = out.join(DATASET_DIR);
    dataset.save(&dataset_dir)?;
    let scene_file = out.join(SCENE_FILE);
    write_json(
        &scene_file,
        &SceneDocument {
            grid_bounds: grid_bounds(&scene),
            scene,
            intrinsics,
        },
    )?;
    Ok(MakeSceneReport {
        scene_file,
        dataset_dir,
        train_frames: frames - test.len(),
        test_frames: test.len(),
    })
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainArgs {
    /// Dataset directory [default: <out>/dataset].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Grid resolution per axis.
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCommandReport {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub resolution: u32,
    pub grid_bounds: Aabb,
    pub config: TrainConfig,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
    pub final_loss: f64,
    pub loss_log: Vec<(u64, f64)>,
}

/// Trains a voxel grid on a dataset and writes `field.nrfgrid` and
/// `train_report.json`. Grid bounds come from the `scene.json` next to the
/// dataset when present, otherwise from the configured scene.
pub fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<TrainCommandReport> {
    let cfg = &ctx.config;
    let dataset_dir = args.dataset.clone().unwrap_or_else(|| ctx.out.join(DATASET_DIR));
    let dataset = PosedDataset::load(&dataset_dir)?;
    let doc = dataset_dir.parent().map(|p| p.join(SCENE_FILE)).filter(|p| p.is_file());
    let bounds = match doc {
        Some(path) => read_json::<SceneDocument>(path)?.grid_bounds,
        None => grid_bounds(&cfg.scene.analytic()?),
    };
    let resolution = args.resolution.unwrap_or(cfg.grid_resolution);
    let mut train_cfg = cfg.train;
    if let Some(it) = args.iterations {
        train_cfg.iterations = it;
    }
    let (field, report) = train_field(&dataset, [resolution; 3], bounds, &train_cfg, ctx.seed)?;
    let out = ctx.out_dir()?;
    let checkpoint = checkpoint_path(out);
    save_checkpoint(&field, &checkpoint)?;
    let summary = TrainCommandReport {
        dataset: dataset_dir,
        checkpoint,
        resolution,
        grid_bounds: bounds,
        config: train_cfg,
        train_psnr: report.train_psnr,
        test_psnr: report.test_psnr,
        final_loss: report.final_loss,
        loss_log: report.loss_log,
    };
    write_json(out.join("train_report.json"), &summary)?;
    Ok(summary)
}

/// PSNR of a checkpoint against one split of a dataset, rendered with the
/// settings training uses for its report.
pub fn checkpoint_psnr(checkpoint: &Path, dataset: &PosedDataset, split: Split, samples: usize) -> Result<Option<f64>> {
    let field = load_checkpoint(checkpoint)?;
    let settings = SampleSettings {
        samples_per_ray: samples,
        bounds: SampleBounds::scene_box(field.bounds()),
    };
    mean_psnr(&field, dataset, split, &settings)
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct InvertArgs {
    /// Observed image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// File holding the start pose as 12 numbers.
    #[arg(long)]
    pub start: PathBuf,
    /// Optional ground-truth pose file for error reporting.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Scene document written by make-scene; supplies scene and intrinsics.
    #[arg(long)]
    pub scene_file: Option<PathBuf>,
    /// Trained field to invert instead of the analytic scene.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "l2")]
    pub loss: String,
    #[arg(long, value_enum, default_value = "multiple")]
    pub mode: Mode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rotation_deg: f64,
    pub translation: f64,
}

impl PoseErrors {
    pub fn between(a: &Pose, b: &Pose) -> Self {
        Self {
            rotation_deg: geodesic_rotation_error(&a.rotation, &b.rotation),
            translation: translation_error(a, b),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvertReport {
    pub loss: LossKind,
    pub mode: Mode,
    pub seed: u64,
    pub start_pose: [f64; 12],
    pub best_pose: [f64; 12],
    pub best_loss: f64,
    pub best_hypothesis: usize,
    pub start_errors: Option<PoseErrors>,
    pub final_errors: Option<PoseErrors>,
}

fn read_pose(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse()
}

/// Recovers the pose of one image. Writes `pose.txt`, `trace.csv`,
/// `overlay.ppm` (the render at the estimate blended over the grayscale
/// observation) and `invert.json`.
pub fn cmd_invert(ctx: &Context, args: &InvertArgs) -> Result<InvertReport> {
    let cfg = &ctx.config;
    let observed = Image::load_ppm(&args.image)?;
    let start = read_pose(&args.start)?;
    let truth = args.ground_truth.as_deref().map(read_pose).transpose()?;
    let loss: LossKind = args.loss.parse()?;
    let doc: Option<SceneDocument> = args.scene_file.as_ref().map(read_json).transpose()?;
    let intrinsics = match &doc {
        Some(d) => d.intrinsics,
        None => Intrinsics::from_fov(observed.width, observed.height, cfg.camera.fov_deg)?,
    };
    let field = match (&args.checkpoint, doc) {
        (Some(path), _) => SceneField::Grid(load_checkpoint(path)?),
        (None, Some(d)) => SceneField::Analytic(d.scene),
        (None, None) => cfg.scene.load()?,
    };
    let search = args.mode.search_config(&cfg.search);
    search.validate()?;
    let objective = Objective::new(&field, intrinsics, &observed, PixelLoss::new(loss), &search)?;
    let result = run_search(&objective, &start, &search, ctx.seed)?;

    let out = ctx.out_dir()?;
    write_file(out.join("pose.txt"), format!("{}\n", result.best))?;
    write_file(out.join("trace.csv"), result.trace.to_csv())?;
    let render = render_image(&field, &intrinsics, &result.best, &objective.settings)?;
    render.blend(&observed.grayscale(), 0.5).save_ppm(out.join("overlay.ppm"))?;
    let report = InvertReport {
        loss,
        mode: args.mode,
        seed: ctx.seed,
        start_pose: start.to_array(),
        best_pose: result.best.to_array(),
        best_loss: result.best_loss,
        best_hypothesis: result.best_hypothesis,
        start_errors: truth.as_ref().map(|t| PoseErrors::between(&start, t)),
        final_errors: truth.as_ref().map(|t| PoseErrors::between(&result.best, t)),
    };
    write_json(out.join("invert.json"), &report)?;
    Ok(report)
}

/// One search run inside a benchmark trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub loss: LossKind,
    pub mode: Mode,
    pub search_seed: u64,
    pub ground_truth: [f64; 12],
    pub start: [f64; 12],
    pub start_rotation_error_deg: f64,
    pub start_translation_error: f64,
    pub final_pose: Option<[f64; 12]>,
    pub final_loss: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
    pub rotation_success: bool,
    pub translation_success: bool,
    /// Set when the run failed; the trial then counts as unsuccessful.
    pub error: Option<String>,
}

/// Success counts for one (loss, mode) pair. Rates are successes / trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub loss: LossKind,
    pub mode: Mode,
    pub trials: usize,
    pub failed_runs: usize,
    pub rotation_successes: usize,
    pub translation_successes: usize,
    pub rotation_success_rate: f64,
    pub translation_success_rate: f64,
    pub median_rotation_error_deg: Option<f64>,
    pub median_translation_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub scene: String,
    pub camera: CameraConfig,
    pub search: SearchConfig,
    pub benchmark: BenchmarkConfig,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl BenchmarkReport {
    pub fn aggregate(&self, loss: LossKind, mode: Mode) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.loss == loss && a.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "trial,loss,mode,search_seed,start_rotation_error_deg,start_translation_error,\
             rotation_error_deg,translation_error,final_loss,rotation_success,translation_success,error\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for t in &self.trials {
            writeln!(
                out,
                "{},{},{},{},{:?},{:?},{},{},{},{},{},{}",
                t.trial,
                t.loss,
                t.mode.name(),
                t.search_seed,
                t.start_rotation_error_deg,
                t.start_translation_error,
                opt(t.rotation_error_deg),
                opt(t.translation_error),
                opt(t.final_loss),
                t.rotation_success,
                t.translation_success,
                t.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            )
            .unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTiming {
    pub trial: usize,
    pub loss: LossKind,
    pub mode: Mode,
    pub seconds: f64,
}

/// A finished benchmark: the deterministic report plus what is written
/// next to it.
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    /// `(file name, CSV)` per run when traces are enabled.
    pub traces: Vec<(String, String)>,
    pub timings: Vec<RunTiming>,
}

/// Ground truth, start pose and search seed of a trial.
pub fn trial_setup(camera: &CameraConfig, bench: &BenchmarkConfig, seed: u64, trial: usize) -> (Pose, Pose, u64) {
    let mut rng = RngStream::derive(seed, &[TRIAL_LABEL, trial as u64]);
    let truth = camera.random_view(&mut rng);
    let start = perturb_pose(&truth, bench.rot_deg, bench.trans, &mut rng);
    (truth, start, rng.next_u64())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn aggregate(records: &[TrialRecord], loss: LossKind, mode: Mode) -> Aggregate {
    let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.loss == loss && r.mode == mode).collect();
    let trials = rows.len();
    let rot = rows.iter().filter(|r| r.rotation_success).count();
    let trans = rows.iter().filter(|r| r.translation_success).count();
    let rate = |k: usize| if trials == 0 { 0.0 } else { k as f64 / trials as f64 };
    Aggregate {
        loss,
        mode,
        trials,
        failed_runs: rows.iter().filter(|r| r.error.is_some()).count(),
        rotation_successes: rot,
        translation_successes: trans,
        rotation_success_rate: rate(rot),
        translation_success_rate: rate(trans),
        median_rotation_error_deg: median(rows.iter().filter_map(|r| r.rotation_error_deg).collect()),
        median_translation_error: median(rows.iter().filter_map(|r| r.translation_error).collect()),
    }
}

struct TrialOutput {
    records: Vec<TrialRecord>,
    traces: Vec<(String, String)>,
    timings: Vec<RunTiming>,
}

fn run_trial<F: RadianceField + ?Sized>(
    field: &F,
    intrinsics: &Intrinsics,
    camera: &CameraConfig,
    search: &SearchConfig,
    bench: &BenchmarkConfig,
    seed: u64,
    trial: usize,
) -> Result<TrialOutput> {
    let (truth, start, search_seed) = trial_setup(camera, bench, seed, trial);
    let settings = SampleSettings {
        samples_per_ray: search.samples_per_ray,
        bounds: search.bounds.unwrap_or_else(|| SampleBounds::scene_box(field.bounds())),
    };
    let clean = render_image(field, intrinsics, &truth, &settings)?;
    let observed = if bench.corruption.is_identity() {
        clean
    } else {
        let mut rng = RngStream::derive(seed, &[CORRUPT_LABEL, trial as u64]);
        corrupt_image(&clean, &bench.corruption, &mut rng)?
    };
    let start_err = PoseErrors::between(&start, &truth);
    let mut out = TrialOutput {
        records: Vec::new(),
        traces: Vec::new(),
        timings: Vec::new(),
    };
    for &loss in &bench.losses {
        for &mode in &bench.modes {
            let cfg = mode.search_config(search);
            let t0 = Instant::now();
            let outcome: Result<SearchResult> = catch_unwind(AssertUnwindSafe(|| {
                let objective = Objective::new(field, *intrinsics, &observed, PixelLoss::new(loss), &cfg)?;
                run_search(&objective, &start, &cfg, search_seed)
            }))
            .unwrap_or_else(|_| Err(Error::SearchDiverged));
            out.timings.push(RunTiming {
                trial,
                loss,
                mode,
                seconds: t0.elapsed().as_secs_f64(),
            });
            let mut record = TrialRecord {
                trial,
                loss,
                mode,
                search_seed,
                ground_truth: truth.to_array(),
                start: start.to_array(),
                start_rotation_error_deg: start_err.rotation_deg,
                start_translation_error: start_err.translation,
                final_pose: None,
                final_loss: None,
                rotation_error_deg: None,
                translation_error: None,
                rotation_success: false,
                translation_success: false,
                error: None,
            };
            match outcome {
                Ok(result) => {
                    let err = PoseErrors::between(&result.best, &truth);
                    record.final_pose = Some(result.best.to_array());
                    record.final_loss = Some(result.best_loss);
                    record.rotation_error_deg = Some(err.rotation_deg);
                    record.translation_error = Some(err.translation);
                    record.rotation_success = err.rotation_deg < bench.rot_threshold_deg;
                    record.translation_success = err.translation < bench.trans_threshold;
                    if bench.write_traces {
                        let name = format!("trace_{trial:03}_{loss}_{}.csv", mode.name());
                        out.traces.push((name, result.trace.to_csv()));
                    }
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            out.records.push(record);
        }
    }
    Ok(out)
}

/// Runs every trial of the protocol against `field`: render the ground
/// truth view, perturb it, then search from the perturbed pose once per
/// configured loss and mode. A failing run is recorded and the benchmark
/// continues.
pub fn run_benchmark<F: RadianceField + ?Sized>(
    field: &F,
    scene: &str,
    camera: &CameraConfig,
    search: &SearchConfig,
    bench: &BenchmarkConfig,
    seed: u64,
) -> Result<BenchmarkRun> {
    camera.validate()?;
    search.validate()?;
    bench.validate()?;
    let intrinsics = camera.intrinsics()?;
    let one = |trial| run_trial(field, &intrinsics, camera, search, bench, seed, trial);
    let outputs: Vec<TrialOutput> = if bench.parallel_trials {
        (0..bench.trials).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..bench.trials).map(one).collect::<Result<_>>()?
    };
    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut timings = Vec::new();
    for o in outputs {
        records.extend(o.records);
        traces.extend(o.traces);
        timings.extend(o.timings);
    }
    let mut aggregates = Vec::new();
    for &loss in &bench.losses {
        for &mode in &bench.modes {
            aggregates.push(aggregate(&records, loss, mode));
        }
    }
    Ok(BenchmarkRun {
        report: BenchmarkReport {
            seed,
            scene: scene.to_string(),
            camera: *camera,
            search: *search,
            benchmark: bench.clone(),
            trials: records,
            aggregates,
        },
        traces,
        timings,
    })
}

/// Writes `report.json`, `report.csv`, trace files and `timing.json`.
pub fn write_benchmark(dir: &Path, run: &BenchmarkRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(dir.join("report.json"), &run.report)?;
    write_file(dir.join("report.csv"), run.report.to_csv())?;
    for (name, csv) in &run.traces {
        write_file(dir.join(name), csv)?;
    }
    write_json(dir.join("timing.json"), &run.timings)
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    /// Run trials concurrently.
    #[arg(long)]
    pub parallel_trials: bool,
    /// Benchmark a trained field instead of the configured scene.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn benchmark_inputs(ctx: &Context, args: &BenchmarkArgs, mut bench: BenchmarkConfig) -> Result<(SceneSpec, BenchmarkConfig)> {
    if let Some(t) = args.trials {
        bench.trials = t;
    }
    bench.parallel_trials |= args.parallel_trials;
    let scene = match &args.checkpoint {
        Some(p) => SceneSpec::Checkpoint(p.clone()),
        None => ctx.config.scene.clone(),
    };
    Ok((scene, bench))
}

pub fn cmd_benchmark(ctx: &Context, args: &BenchmarkArgs) -> Result<BenchmarkReport> {
    let (scene, bench) = benchmark_inputs(ctx, args, ctx.config.benchmark.clone())?;
    bench.validate()?;
    let field = scene.load()?;
    let run = run_benchmark(&field, &scene.describe(), &ctx.config.camera, &ctx.config.search, &bench, ctx.seed)?;
    write_benchmark(ctx.out_dir()?, &run)?;
    Ok(run.report)
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    /// Comma-separated losses [default: all seven].
    #[arg(long, value_delimiter = ',')]
    pub losses: Vec<String>,
    /// Use the configured corruption spec even when it is empty.
    #[arg(long)]
    pub keep_corruption: bool,
    #[arg(long)]
    pub parallel_trials: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: LossKind,
    pub trials: usize,
    pub rotation_success_rate: f64,
    pub translation_success_rate: f64,
    pub median_rotation_error_deg: Option<f64>,
    pub median_translation_error: Option<f64>,
}

/// Per-loss success table of a benchmark report, one row per loss in
/// configured order, multiple-hypothesis mode when present.
pub fn ablation_table(report: &BenchmarkReport) -> Vec<AblationRow> {
    let mode = if report.benchmark.modes.contains(&Mode::Multiple) {
        Mode::Multiple
    } else {
        Mode::Single
    };
    report
        .benchmark
        .losses
        .iter()
        .filter_map(|&loss| report.aggregate(loss, mode))
        .map(|a| AblationRow {
            loss: a.loss,
            trials: a.trials,
            rotation_success_rate: a.rotation_success_rate,
            translation_success_rate: a.translation_success_rate,
            median_rotation_error_deg: a.median_rotation_error_deg,
            median_translation_error: a.median_translation_error,
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("loss,trials,rotation_success_rate,translation_success_rate\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:?},{:?}",
            r.loss, r.trials, r.rotation_success_rate, r.translation_success_rate
        )
        .unwrap();
    }
    out
}

/// Benchmark in multiple-hypothesis mode against corrupted observations,
/// once per loss. Writes the benchmark files plus `ablation.json` and
/// `ablation.csv`.
pub fn cmd_ablate_losses(ctx: &Context, args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut base = ctx.config.benchmark.clone();
    base.modes = vec![Mode::Multiple];
    base.losses = if args.losses.is_empty() {
        LossKind::ALL.to_vec()
    } else {
        args.losses.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    if base.corruption.is_identity() && !args.keep_corruption {
        base.corruption = CorruptionSpec::ablation_default();
    }
    let bench_args = BenchmarkArgs {
        trials: args.trials,
        parallel_trials: args.parallel_trials,
        checkpoint: args.checkpoint.clone(),
    };
    let (scene, bench) = benchmark_inputs(ctx, &bench_args, base)?;
    bench.validate()?;
    let field = scene.load()?;
    let run = run_benchmark(&field, &scene.describe(), &ctx.config.camera, &ctx.config.search, &bench, ctx.seed)?;
    let out = ctx.out_dir()?;
    write_benchmark(out, &run)?;
    let rows = ablation_table(&run.report);
    write_json(out.join("ablation.json"), &rows)?;
    write_file(out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct Demo2dArgs {
    /// Print the ASCII plot to stdout.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Demo2dReport {
    pub config: Demo2dConfig,
    pub se2_steps: Option<usize>,
    pub so2xt2_steps: Option<usize>,
    /// Largest distance of the SO(2)×T(2) path from the start-target line,
    /// relative to its length.
    pub so2xt2_line_deviation: f64,
    pub plot: String,
}

/// Writes `demo2d_se2.csv`, `demo2d_so2xt2.csv`, `demo2d.svg` and
/// `demo2d.json`.
pub fn cmd_demo2d(ctx: &Context, _args: &Demo2dArgs) -> Result<Demo2dReport> {
    let cfg = ctx.config.demo2d;
    let se2 = run_demo(&cfg, Parameterization::Se2)?;
    let split = run_demo(&cfg, Parameterization::So2xT2)?;
    let from = crate::lie::Vec2::new(cfg.start.x, cfg.start.y);
    let to = crate::lie::Vec2::new(cfg.target.x, cfg.target.y);
    let deviation = if (to - from).norm() > 0.0 {
        split.max_line_deviation(from, to)
    } else {
        0.0
    };
    let out = ctx.out_dir()?;
    write_file(out.join("demo2d_se2.csv"), se2.to_csv())?;
    write_file(out.join("demo2d_so2xt2.csv"), split.to_csv())?;
    write_file(out.join("demo2d.svg"), svg_plot(&[&se2, &split]))?;
    let report = Demo2dReport {
        config: cfg,
        se2_steps: se2.steps_to_converge,
        so2xt2_steps: split.steps_to_converge,
        so2xt2_line_deviation: deviation,
        plot: ascii_plot(&[&se2, &split], 60, 20),
    };
    write_json(out.join("demo2d.json"), &report)?;
    Ok(report)
}
