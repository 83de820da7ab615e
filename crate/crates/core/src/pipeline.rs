//! End-to-end configuration and stages.
//!
//! Every stage reads a model file and writes one, so running the stages one
//! by one (as the CLI subcommands do) gives the same files as a full run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutplane::{
    default_slab_half_width, horizontal_stack_in, radial_fan_about, random_planes_in, CutError,
    CutMode, CutPlane, SliceSchedule,
};
use crate::eval::{
    image_oracle_error, oracle_error, render_slice, slice_consistency, surface_drift,
    ConsistencyReport, EvalError,
};
use crate::fill::{fill_interior, FillConfig, FillError, FillReport};
use crate::meta::{load_model, save_model, MetaError};
use crate::provider::{ProviderError, ProviderSpec};
use crate::render::ViewConfig;
use crate::smooth::{
    smooth_in_place, untrained_report, SmoothConfig, SmoothReport, UntrainedReport,
};
use crate::splat::{apply_opaque_atom, OpaqueAtomConfig, SplatModel, Vec3};
use crate::texture::{ProceduralSolid, TextureKind};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("model file {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: MetaError,
    },
    #[error(transparent)]
    Fill(#[from] FillError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Cut(#[from] CutError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Image(#[from] crate::imaging::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Seeds are required; nothing is ever seeded from the clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub fill: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    /// Schedule JSON file; overrides the generated families when set.
    pub path: Option<PathBuf>,
    pub radial: usize,
    pub horizontal: usize,
    pub random: usize,
    pub slab_half_width: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            path: None,
            radial: 30,
            horizontal: 40,
            random: 0,
            slab_half_width: None,
        }
    }
}

impl ScheduleSpec {
    pub fn slab_half_width(&self, model: &SplatModel) -> f64 {
        self.slab_half_width
            .unwrap_or_else(|| default_slab_half_width(model.extent()))
    }

    pub fn build(&self, model: &SplatModel, seed: u64) -> Result<SliceSchedule, PipelineError> {
        if let Some(p) = &self.path {
            return Ok(SliceSchedule::load(p)?);
        }
        let h = self.slab_half_width(model);
        let bbox = model.bbox();
        let c = bbox.center();
        let mut parts = Vec::new();
        if self.radial > 0 {
            parts.push(radial_fan_about(
                [c.x, c.y],
                self.radial,
                "vertical",
                h,
                0.0,
            )?);
        }
        if self.horizontal > 0 {
            parts.push(horizontal_stack_in(bbox, self.horizontal, "horizontal", h)?);
        }
        if self.random > 0 {
            parts.push(random_planes_in(bbox, self.random, seed, h)?);
        }
        if parts.is_empty() {
            return Err(PipelineError::Config("schedule has no planes".into()));
        }
        let name = parts
            .iter()
            .map(|p| p.name.as_str())
            .collect::<Vec<_>>()
            .join("+");
        Ok(SliceSchedule::concat(name, &parts)?)
    }

    /// Vertical plane through the fan axis halfway between two fan planes,
    /// always at the default slab width.
    pub fn holdout_plane(&self, model: &SplatModel) -> Result<Option<CutPlane>, PipelineError> {
        if self.radial == 0 {
            return Ok(None);
        }
        let c = model.bbox().center();
        let half_step = std::f64::consts::PI / self.radial as f64 / 2.0;
        let fan = radial_fan_about(
            [c.x, c.y],
            1,
            "vertical",
            default_slab_half_width(model.extent()),
            half_step,
        )?;
        Ok(fan.planes.into_iter().next())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub width: usize,
    pub height: usize,
    pub vertical_fov: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            vertical_fov: ViewConfig::default().vertical_fov,
        }
    }
}

impl RenderSpec {
    pub fn view(&self) -> ViewConfig {
        ViewConfig {
            width: self.width,
            height: self.height,
            vertical_fov: self.vertical_fov,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub consistency_views: usize,
    /// Ground-truth solid; taken from a procedural provider when unset.
    pub oracle: Option<TextureKind>,
    pub surface_views: usize,
    /// Also evaluate the filled, untrained model.
    pub baseline: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            consistency_views: 120,
            oracle: None,
            surface_views: 12,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input_ply: PathBuf,
    /// Output directory.
    pub output: PathBuf,
    pub seeds: Seeds,
    pub provider: String,
    #[serde(default)]
    pub fill: FillConfig,
    #[serde(default)]
    pub atom: OpaqueAtomConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub smooth: SmoothConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

/// Output file names inside the output directory.
pub mod files {
    pub const FILLED: &str = "filled.ply";
    pub const TRAINED: &str = "trained.ply";
    pub const FINAL: &str = "final.ply";
    pub const SCHEDULE: &str = "schedule.json";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const EVAL: &str = "eval.json";
    pub const EVAL_BASELINE: &str = "eval_baseline.json";
    pub const CHECKPOINTS: &str = "checkpoints";
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let c: Self = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        let c: Self = serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `.json` as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.input_ply == self.output {
            return bad("input and output paths must differ".into());
        }
        if self.render.width < 16 || self.render.height < 16 {
            return bad(format!(
                "render resolution {}x{} is below 16",
                self.render.width, self.render.height
            ));
        }
        self.provider_spec()?;
        self.fill.validate()?;
        self.atom.validate().map_err(PipelineError::Config)?;
        self.smooth.validate().map_err(PipelineError::Config)?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn provider_spec(&self) -> Result<ProviderSpec, PipelineError> {
        Ok(self.provider.parse()?)
    }

    pub fn fill_config(&self) -> FillConfig {
        FillConfig {
            rng_seed: self.seeds.fill,
            ..self.fill.clone()
        }
    }

    /// Training settings with the shared seed, smoothing, atom and view
    /// settings folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.rng_seed = self.seeds.train;
        t.smooth = self.smooth;
        t.atom = self.atom;
        t.view = self.render.view();
        if t.checkpoint_dir.is_none() {
            t.checkpoint_dir = Some(self.output.join(files::CHECKPOINTS));
        }
        t
    }

    pub fn oracle_kind(&self) -> Option<TextureKind> {
        self.eval.oracle.or(match self.provider_spec() {
            Ok(ProviderSpec::Procedural(k)) => Some(k),
            _ => None,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }
}

fn load(path: &Path) -> Result<SplatModel, PipelineError> {
    load_model(path).map_err(|source| PipelineError::Model {
        path: path.to_path_buf(),
        source,
    })
}

fn save(path: &Path, model: &SplatModel) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_model(path, model).map_err(|source| PipelineError::Model {
        path: path.to_path_buf(),
        source,
    })
}

/// Fills the interior and applies the opaque-atom constraint.
pub fn fill_stage(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
) -> Result<FillReport, PipelineError> {
    let model = load(input)?;
    let (filled, report) = fill_interior(&model, &cfg.fill_config())?;
    let atom = apply_opaque_atom(&filled, &cfg.atom);
    save(output, &atom)?;
    log::info!(
        "fill: {} enclosed voxels, {} particles appended, {} total",
        report.flagged_voxels,
        report.appended,
        atom.len()
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: std::collections::BTreeMap<String, f64>,
    pub provider_calls: usize,
}

/// Trains colors and writes the model, schedule and per-iteration log.
pub fn train_stage(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
) -> Result<TrainSummary, PipelineError> {
    // PLY stores opacity through a clamped logit; restore exact values
    let model = apply_opaque_atom(&load(input)?, &cfg.atom);
    let schedule = cfg.schedule.build(&model, cfg.seeds.train)?;
    let dir = output.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    schedule.save(&dir.join(files::SCHEDULE))?;
    let mut provider = cfg.provider_spec()?.build(model.bbox())?;
    let outcome = train(&model, &schedule, provider.as_mut(), &cfg.train_config())?;
    let mut log = BufWriter::new(File::create(dir.join(files::TRAIN_LOG))?);
    for rec in &outcome.log {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    save(output, &outcome.model)?;
    Ok(TrainSummary {
        iterations: outcome.log.len(),
        converged: outcome.converged,
        final_loss: outcome.final_loss,
        provider_calls: outcome.provider_calls,
    })
}

pub fn smooth_stage(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
) -> Result<SmoothReport, PipelineError> {
    let mut model = load(input)?;
    let report = smooth_in_place(&mut model, &cfg.smooth);
    save(output, &model)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub normal: [f64; 3],
    pub offset: f64,
    pub oracle_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub particles: usize,
    pub untrained: UntrainedReport,
    pub consistency: ConsistencyReport,
    /// Oracle error on each training plane.
    pub schedule_oracle_error: Option<Vec<f64>>,
    pub holdout: Option<HoldoutReport>,
    /// Mean absolute difference of surface renders against `reference`.
    pub surface_drift: Option<f64>,
}

/// Metrics for one model; `reference` enables the surface drift check.
pub fn evaluate(
    cfg: &PipelineConfig,
    model: &SplatModel,
    reference: Option<&SplatModel>,
) -> Result<EvalReport, PipelineError> {
    let view = cfg.render.view();
    let mut consistency =
        slice_consistency(model, cfg.eval.consistency_views, cfg.seeds.eval, &view)?;
    let kind = cfg.oracle_kind();
    let mut schedule_oracle_error = None;
    let mut holdout = None;
    if let Some(kind) = kind {
        let schedule = cfg.schedule.build(model, cfg.seeds.train)?;
        schedule_oracle_error = Some(oracle_error(model, kind, &schedule, &view)?);
        let random =
            crate::cutplane::random_planes(model, cfg.eval.consistency_views, cfg.seeds.eval)?;
        consistency.per_view_oracle_error = Some(oracle_error(model, kind, &random, &view)?);
        if let Some(p) = cfg.schedule.holdout_plane(model)? {
            let solid = ProceduralSolid::fitted(kind, model.bbox());
            let s = render_slice(model, &p, &view, Vec3::zeros())?;
            holdout = Some(HoldoutReport {
                normal: p.normal,
                offset: p.offset,
                oracle_error: image_oracle_error(&s, &p, &solid),
            });
        }
    }
    let surface_drift = match reference {
        Some(r) => Some(surface_drift(
            r,
            model,
            cfg.eval.surface_views,
            cfg.seeds.eval,
            &view,
        )?),
        None => None,
    };
    Ok(EvalReport {
        particles: model.len(),
        untrained: untrained_report(model, &cfg.smooth),
        consistency,
        schedule_oracle_error,
        holdout,
        surface_drift,
    })
}

pub fn eval_stage(
    cfg: &PipelineConfig,
    input: &Path,
    reference: Option<&Path>,
    output: &Path,
) -> Result<EvalReport, PipelineError> {
    let model = load(input)?;
    let reference = reference.map(load).transpose()?;
    let report = evaluate(cfg, &model, reference.as_ref())?;
    if let Some(dir) = output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(output, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub fill: FillReport,
    pub train: TrainSummary,
    pub smooth: SmoothReport,
    pub eval: EvalReport,
    pub baseline: Option<EvalReport>,
}

/// import → fill → train → smooth → eval, each stage through its file.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output)?;
    let filled = cfg.out(files::FILLED);
    let trained = cfg.out(files::TRAINED);
    let fin = cfg.out(files::FINAL);
    let fill = fill_stage(cfg, &cfg.input_ply, &filled)?;
    let train = train_stage(cfg, &filled, &trained)?;
    let smooth = smooth_stage(cfg, &trained, &fin)?;
    let eval = eval_stage(cfg, &fin, Some(&filled), &cfg.out(files::EVAL))?;
    let baseline = if cfg.eval.baseline {
        Some(eval_stage(
            cfg,
            &filled,
            None,
            &cfg.out(files::EVAL_BASELINE),
        )?)
    } else {
        None
    };
    Ok(PipelineSummary {
        fill,
        train,
        smooth,
        eval,
        baseline,
    })
}

#[derive(Debug, Clone)]
pub struct SliceOptions {
    /// Plane `a,b,c,d`.
    pub plane: String,
    /// Two atom caps when unset.
    pub slab_half_width: Option<f64>,
    pub mode: CutMode,
    pub view: ViewConfig,
    pub background: Vec3,
    /// Also write a 16-bit depth PNG scaled by the far plane.
    pub depth: Option<PathBuf>,
}

impl SliceOptions {
    pub fn new(plane: impl Into<String>, mode: CutMode, view: ViewConfig) -> Self {
        Self {
            plane: plane.into(),
            slab_half_width: None,
            mode,
            view,
            background: Vec3::zeros(),
            depth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSummary {
    pub plane: CutPlane,
    pub width: usize,
    pub height: usize,
    pub foreground_pixels: usize,
    pub elapsed_ms: u64,
}

/// Loads a model and writes one cut view as PNG. No provider is involved.
pub fn slice_stage(
    input: &Path,
    opts: &SliceOptions,
    output: &Path,
) -> Result<SliceSummary, PipelineError> {
    let t0 = std::time::Instant::now();
    let model = load(input)?;
    let w = opts
        .slab_half_width
        .unwrap_or_else(|| default_slab_half_width(model.extent()));
    let plane = parse_plane(&opts.plane, w, opts.mode, "slice")?;
    let camera = crate::render::slice_camera(&model, &plane, &opts.view);
    let settings = crate::render::RenderSettings {
        background: opts.background,
        record_contrib: false,
        ..Default::default()
    };
    let out = crate::render::render_with(
        &model,
        &camera,
        &crate::render::make_cut_mask(&plane)?,
        &settings,
    )
    .map_err(EvalError::from)?;
    for p in [Some(output), opts.depth.as_deref()].into_iter().flatten() {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    out.rgb.save_png(output)?;
    if let Some(d) = &opts.depth {
        std::fs::write(d, out.depth.to_png16(camera.far)?)?;
    }
    Ok(SliceSummary {
        foreground_pixels: out.foreground().iter().filter(|f| **f).count(),
        plane,
        width: opts.view.width,
        height: opts.view.height,
        elapsed_ms: t0.elapsed().as_millis() as u64,
    })
}

/// Parses `a,b,c,d` into a plane `a x + b y + c z + d = 0`.
pub fn parse_plane(
    s: &str,
    slab_half_width: f64,
    mode: CutMode,
    tag: &str,
) -> Result<CutPlane, PipelineError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Config(format!("plane {s:?}: {e}")))?;
    if v.len() != 4 || v.iter().any(|x| !x.is_finite()) {
        return Err(PipelineError::Config(format!(
            "plane {s:?}: expected four finite numbers a,b,c,d"
        )));
    }
    Ok(CutPlane::new(
        Vec3::new(v[0], v[1], v[2]),
        v[3],
        slab_half_width,
        mode,
        tag,
    )?)
}
