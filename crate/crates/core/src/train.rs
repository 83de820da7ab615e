//! Color training against cross-section references.
//!
//! Geometry and opacity are frozen, so each view's recorded blend weights
//! turn rendering into a fixed sparse linear map from particle colors to
//! pixels. Training re-composites those weights, takes a gradient step on
//! colors, and periodically asks the provider to refine its references.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutplane::SliceSchedule;
use crate::imaging::{ColorImage, ScalarImage};
use crate::loss::{recon_loss, recon_loss_grad, LossError};
use crate::meta::{save_model, MetaError};
use crate::par;
use crate::provider::{
    ProviderError, ReferenceProvider, ReferenceRequest, ReferenceView, RequestKind, ViewContext,
};
use crate::render::{
    bounding_radius, composite, make_cut_mask, random_direction, render_with, slice_camera, Camera,
    Contributions, RenderError, RenderSettings, ViewConfig, VisibilityMask,
};
use crate::smooth::{smooth_in_place, SmoothConfig, SmoothReport};
use crate::splat::{opaque_atom_violation, OpaqueAtomConfig, SplatModel, Vec3};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("iteration {iteration}, view {view_id}: {source}")]
    Provider {
        iteration: usize,
        view_id: String,
        #[source]
        source: ProviderError,
        /// Partial model written before aborting, if a directory was set.
        checkpoint: Option<PathBuf>,
    },
    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("particle {index} breaks the opaque-atom constraint at iteration {iteration}")]
    Atom { iteration: usize, index: usize },
    #[error("input particle {index} breaks the opaque-atom constraint; apply it before training")]
    NotOpaqueAtom { index: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] MetaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of MSE against the SSIM term.
    pub alpha: f64,
    pub learning_rate: f64,
    pub iterations_max: usize,
    pub surface_views_per_iter: usize,
    /// Surface views rendered from the input model before training.
    pub surface_pool_size: usize,
    pub init_steps: u32,
    pub refine_steps_per_iter: u32,
    pub smooth_interval: usize,
    pub convergence_epsilon: f64,
    pub rng_seed: u64,
    pub momentum: f64,
    /// Divide each particle's step by its squared blend-weight mass.
    pub precondition: bool,
    /// Added to the preconditioner, in units of squared blend weight.
    pub damping: f64,
    /// Halvings allowed per iteration when a step does not lower the
    /// objective; 0 takes every step as is.
    pub max_backtracks: u32,
    /// Original surface particles only learn from surface views.
    pub surface_lock: bool,
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub background: [f64; 3],
    pub view: ViewConfig,
    pub smooth: SmoothConfig,
    pub atom: OpaqueAtomConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            learning_rate: 0.05,
            iterations_max: 200,
            surface_views_per_iter: 20,
            surface_pool_size: 60,
            init_steps: crate::provider::INIT_STEPS,
            refine_steps_per_iter: crate::provider::REFINE_STEPS,
            smooth_interval: 35,
            convergence_epsilon: 0.005,
            rng_seed: 0,
            momentum: 0.0,
            precondition: true,
            damping: 0.05,
            max_backtracks: 12,
            surface_lock: true,
            checkpoint_interval: 25,
            checkpoint_dir: None,
            background: [0.0; 3],
            view: ViewConfig::default(),
            smooth: SmoothConfig::default(),
            atom: OpaqueAtomConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.smooth_interval < 1 {
            return bad("smooth_interval must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.init_steps < 1 || self.refine_steps_per_iter < 1 {
            return bad("provider steps must be >= 1");
        }
        if !(self.damping >= 0.0) {
            return bad("damping must be >= 0");
        }
        if self.surface_views_per_iter > self.surface_pool_size {
            return bad("surface_views_per_iter exceeds surface_pool_size");
        }
        if self.view.width < 11 || self.view.height < 11 {
            return bad("views must be at least 11 pixels on each side");
        }
        self.smooth.validate().map_err(TrainError::Config)?;
        self.atom.validate().map_err(TrainError::Config)
    }

    pub fn background(&self) -> Vec3 {
        Vec3::from(self.background)
    }
}

/// A slice view with its frozen blend weights.
#[derive(Debug, Clone)]
pub struct SliceView {
    pub reference: ReferenceView,
    pub contrib: Contributions,
    pub transmittance: Vec<f64>,
    pub coverage: ScalarImage,
    pub depth: ScalarImage,
}

/// A surface view rendered from the input model; its image is the target.
#[derive(Debug, Clone)]
pub struct SurfaceView {
    pub camera: Camera,
    pub contrib: Contributions,
    pub transmittance: Vec<f64>,
    pub target: ColorImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub per_view_loss: BTreeMap<String, f64>,
    pub mean_loss: f64,
    pub surface_loss: Option<f64>,
    /// Fraction of the learning rate actually applied.
    pub step_scale: f64,
    pub smoothed: bool,
    pub converged: bool,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smooth_report: Option<SmoothReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SplatModel,
    pub log: Vec<IterationRecord>,
    pub references: Vec<ReferenceView>,
    /// Per-view loss of the returned model against the final references.
    pub final_loss: BTreeMap<String, f64>,
    pub converged: bool,
    pub provider_calls: usize,
}

pub struct TrainState {
    pub model: SplatModel,
    pub slices: Vec<SliceView>,
    pub surface_views: Vec<SurfaceView>,
    pub iteration: usize,
    pub per_view_loss: BTreeMap<String, f64>,
    pub provider_calls: usize,
    locked: Vec<bool>,
    slice_touched: Vec<usize>,
    velocity: Vec<Vec3>,
    grad: Vec<Vec3>,
    hess: Vec<f64>,
    step_scale: f64,
    rng: ChaCha8Rng,
}

fn settings(bg: Vec3) -> RenderSettings {
    RenderSettings {
        background: bg,
        record_contrib: true,
        ..Default::default()
    }
}

fn view_id(schedule: &SliceSchedule, k: usize) -> String {
    format!("{}-{k:03}-{}", schedule.name, schedule.planes[k].prompt_tag)
}

struct ViewEval {
    loss: f64,
    pixel_grad: Option<Vec<f64>>,
}

fn eval_view(
    contrib: &Contributions,
    transmittance: &[f64],
    target: &ColorImage,
    model: &SplatModel,
    bg: &Vec3,
    alpha: f64,
    want_grad: bool,
) -> Result<ViewEval, LossError> {
    let img = composite(
        contrib,
        transmittance,
        target.width,
        target.height,
        bg,
        |i| model.gaussians[i].color,
    );
    if want_grad {
        let (loss, g) = recon_loss_grad(&img, target, alpha)?;
        Ok(ViewEval {
            loss,
            pixel_grad: Some(g),
        })
    } else {
        Ok(ViewEval {
            loss: recon_loss(&img, target, alpha)?,
            pixel_grad: None,
        })
    }
}

impl TrainState {
    /// Renders every slice, asks for initial references, and renders the
    /// surface pool from the input model.
    pub fn new(
        model: &SplatModel,
        schedule: &SliceSchedule,
        provider: &mut dyn ReferenceProvider,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if schedule.planes.is_empty() {
            return Err(TrainError::Config("slice schedule is empty".into()));
        }
        if let Some(index) = opaque_atom_violation(model, &cfg.atom) {
            return Err(TrainError::NotOpaqueAtom { index });
        }
        let bg = cfg.background();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

        let center = model.bbox().center();
        let radius = bounding_radius(model);
        let pool_cams: Vec<Camera> = (0..cfg.surface_pool_size)
            .map(|_| Camera::orbit(&center, radius, &random_direction(&mut rng), &cfg.view))
            .collect();
        let surface_views = par::map_slice(&pool_cams, |cam| {
            let out = render_with(model, cam, &VisibilityMask::All, &settings(bg))?;
            Ok::<_, RenderError>(SurfaceView {
                camera: cam.clone(),
                contrib: out.contrib.unwrap_or_default(),
                transmittance: out.transmittance,
                target: out.rgb,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

        let mut state = Self {
            model: model.clone(),
            slices: Vec::with_capacity(schedule.planes.len()),
            surface_views,
            iteration: 0,
            per_view_loss: BTreeMap::new(),
            provider_calls: 0,
            locked: model
                .gaussians
                .iter()
                .map(|g| cfg.surface_lock && g.trained)
                .collect(),
            slice_touched: Vec::new(),
            velocity: Vec::new(),
            grad: Vec::new(),
            hess: Vec::new(),
            step_scale: 1.0,
            rng,
        };

        let cams: Vec<Camera> = schedule
            .planes
            .iter()
            .map(|p| slice_camera(model, p, &cfg.view))
            .collect();
        let renders = par::map_range(schedule.planes.len(), |k| {
            let mask = make_cut_mask(&schedule.planes[k])?;
            render_with(model, &cams[k], &mask, &settings(bg))
        });
        let mut touched = Vec::new();
        for (k, out) in renders.into_iter().enumerate() {
            let out = out?;
            let plane = schedule.planes[k].clone();
            let id = view_id(schedule, k);
            let request = ReferenceRequest {
                kind: RequestKind::InitReference,
                view_id: id.clone(),
                rgb: out.rgb.clone(),
                depth: out.depth.clone(),
                depth_scale: cams[k].far,
                prompt_tag: plane.prompt_tag.clone(),
                steps: cfg.init_steps,
                context: Some(ViewContext {
                    camera: cams[k].clone(),
                    plane: plane.clone(),
                    coverage: Some(out.alpha.clone()),
                    background: bg,
                }),
            };
            state.provider_calls += 1;
            let image = match provider.provide(&request) {
                Ok(img) => img,
                Err(source) => return Err(state.abort(0, id, source, cfg)),
            };
            let contrib = out.contrib.unwrap_or_default();
            touched.extend(contrib.touched());
            state.slices.push(SliceView {
                reference: ReferenceView {
                    view_id: id,
                    camera: cams[k].clone(),
                    plane,
                    image,
                    version: 1,
                },
                contrib,
                transmittance: out.transmittance,
                coverage: out.alpha,
                depth: out.depth,
            });
        }
        touched.sort_unstable();
        touched.dedup();
        state.slice_touched = touched;
        Ok(state)
    }

    fn abort(
        &self,
        iteration: usize,
        view_id: String,
        source: ProviderError,
        cfg: &TrainConfig,
    ) -> TrainError {
        let checkpoint = cfg.checkpoint_dir.as_ref().and_then(|dir| {
            let path = dir.join("partial.ply");
            match std::fs::create_dir_all(dir)
                .map_err(MetaError::from)
                .and_then(|_| save_model(&path, &self.model))
            {
                Ok(()) => Some(path),
                Err(e) => {
                    log::error!("could not write partial checkpoint: {e}");
                    None
                }
            }
        });
        TrainError::Provider {
            iteration,
            view_id,
            source,
            checkpoint,
        }
    }

    pub fn references(&self) -> Vec<ReferenceView> {
        self.slices.iter().map(|s| s.reference.clone()).collect()
    }

    /// Current slice renders from the frozen weights.
    pub fn slice_render(&self, k: usize, bg: &Vec3) -> ColorImage {
        let s = &self.slices[k];
        let cam = &s.reference.camera;
        composite(
            &s.contrib,
            &s.transmittance,
            cam.width,
            cam.height,
            bg,
            |i| self.model.gaussians[i].color,
        )
    }

    /// Per-view loss against the current references.
    pub fn slice_losses(&self, cfg: &TrainConfig) -> Result<BTreeMap<String, f64>, TrainError> {
        let bg = cfg.background();
        let losses = par::map_slice(&self.slices, |s| {
            eval_view(
                &s.contrib,
                &s.transmittance,
                &s.reference.image,
                &self.model,
                &bg,
                cfg.alpha,
                false,
            )
            .map(|e| e.loss)
        });
        let mut out = BTreeMap::new();
        for (s, l) in self.slices.iter().zip(losses) {
            out.insert(s.reference.view_id.clone(), l?);
        }
        Ok(out)
    }

    /// Loss and gradients over all slices plus the given surface views.
    /// Gradients land in the internal buffers; returns slice losses and the
    /// mean surface loss.
    fn accumulate(
        &mut self,
        surface: &[usize],
        cfg: &TrainConfig,
    ) -> Result<(BTreeMap<String, f64>, Option<f64>), TrainError> {
        let n = self.model.len();
        self.grad.clear();
        self.grad.resize(n, Vec3::zeros());
        self.hess.clear();
        self.hess.resize(n, 0.0);
        let bg = cfg.background();
        let jobs: Vec<(bool, usize)> = (0..self.slices.len())
            .map(|k| (true, k))
            .chain(surface.iter().map(|&j| (false, j)))
            .collect();
        let evals = par::map_slice(&jobs, |&(is_slice, k)| {
            let (contrib, trans, target) = if is_slice {
                let s = &self.slices[k];
                (&s.contrib, &s.transmittance, &s.reference.image)
            } else {
                let s = &self.surface_views[k];
                (&s.contrib, &s.transmittance, &s.target)
            };
            eval_view(contrib, trans, target, &self.model, &bg, cfg.alpha, true)
        });

        let mut losses = BTreeMap::new();
        let mut surface_sum = 0.0;
        // ordered reduction: view order, then pixel order
        for (&(is_slice, k), ev) in jobs.iter().zip(evals) {
            let ev = ev?;
            if !ev.loss.is_finite() {
                return Err(TrainError::Diverged {
                    iteration: self.iteration,
                });
            }
            let (contrib, plane) = if is_slice {
                let s = &self.slices[k];
                losses.insert(s.reference.view_id.clone(), ev.loss);
                (&s.contrib, Some(&s.reference.plane))
            } else {
                surface_sum += ev.loss;
                (&self.surface_views[k].contrib, None)
            };
            // locked particles learn from a slice only inside its slab
            let blocked = |i: usize| {
                self.locked[i]
                    && plane.is_some_and(|c| {
                        c.signed_distance(&self.model.gaussians[i].position).abs()
                            > c.slab_half_width
                    })
            };
            let pg = ev.pixel_grad.expect("gradient requested");
            let scale = if cfg.precondition {
                pg.len() as f64 / 2.0
            } else {
                1.0
            };
            for p in 0..pg.len() / 3 {
                let d = Vec3::new(pg[3 * p], pg[3 * p + 1], pg[3 * p + 2]) * scale;
                for (i, w) in contrib.pixel(p) {
                    if blocked(i) {
                        continue;
                    }
                    self.grad[i] += d * w;
                    self.hess[i] += cfg.alpha * w * w;
                }
            }
        }
        let surface_loss = (!surface.is_empty()).then(|| surface_sum / surface.len() as f64);
        Ok((losses, surface_loss))
    }

    fn apply_update(&mut self, cfg: &TrainConfig, scale: f64) -> Result<(), TrainError> {
        let n = self.model.len();
        if self.velocity.len() != n {
            self.velocity = vec![Vec3::zeros(); n];
        }
        for i in 0..n {
            if self.hess[i] == 0.0
                && self.grad[i] == Vec3::zeros()
                && self.velocity[i] == Vec3::zeros()
            {
                continue;
            }
            let lr = cfg.learning_rate * scale;
            let step = if cfg.precondition {
                self.grad[i] * (lr / (self.hess[i] + cfg.damping))
            } else {
                self.grad[i] * lr
            };
            let v = self.velocity[i] * cfg.momentum + step;
            self.velocity[i] = v;
            let c = self.model.gaussians[i].color - v;
            if !c.iter().all(|x| x.is_finite()) {
                return Err(TrainError::Diverged {
                    iteration: self.iteration,
                });
            }
            self.model.gaussians[i].color = c.map(|x| x.clamp(0.0, 1.0));
        }
        Ok(())
    }

    /// Summed loss over every slice and the given surface views.
    fn objective(&self, surface: &[usize], cfg: &TrainConfig) -> Result<f64, TrainError> {
        let bg = cfg.background();
        let jobs: Vec<(bool, usize)> = (0..self.slices.len())
            .map(|k| (true, k))
            .chain(surface.iter().map(|&j| (false, j)))
            .collect();
        let losses = par::map_slice(&jobs, |&(is_slice, k)| {
            let (contrib, trans, target) = if is_slice {
                let s = &self.slices[k];
                (&s.contrib, &s.transmittance, &s.reference.image)
            } else {
                let s = &self.surface_views[k];
                (&s.contrib, &s.transmittance, &s.target)
            };
            eval_view(contrib, trans, target, &self.model, &bg, cfg.alpha, false).map(|e| e.loss)
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total)
    }

    /// Takes the step with backtracking; returns the applied scale, or 0 if
    /// no tried step lowered the objective.
    fn line_search(
        &mut self,
        surface: &[usize],
        start: f64,
        cfg: &TrainConfig,
    ) -> Result<f64, TrainError> {
        if cfg.max_backtracks == 0 {
            self.apply_update(cfg, self.step_scale)?;
            return Ok(self.step_scale);
        }
        let colors: Vec<Vec3> = self.model.gaussians.iter().map(|g| g.color).collect();
        let velocity = self.velocity.clone();
        let mut scale = self.step_scale;
        for attempt in 0..=cfg.max_backtracks {
            self.apply_update(cfg, scale)?;
            if self.objective(surface, cfg)? <= start {
                self.step_scale = if attempt == 0 {
                    (scale * 2.0).min(1.0)
                } else {
                    scale
                };
                return Ok(scale);
            }
            for (g, c) in self.model.gaussians.iter_mut().zip(&colors) {
                g.color = *c;
            }
            self.velocity.clone_from(&velocity);
            scale *= 0.5;
        }
        self.velocity.iter_mut().for_each(|v| *v = Vec3::zeros());
        Ok(0.0)
    }

    /// One gradient step against the current references and the given
    /// surface views, without touching references or flags.
    pub fn gradient_step(
        &mut self,
        surface: &[usize],
        cfg: &TrainConfig,
    ) -> Result<BTreeMap<String, f64>, TrainError> {
        let (losses, _) = self.accumulate(surface, cfg)?;
        self.apply_update(cfg, 1.0)?;
        Ok(losses)
    }

    fn mark_trained(&mut self) {
        for &i in &self.slice_touched {
            self.model.gaussians[i].trained = true;
        }
    }

    fn refine(
        &mut self,
        provider: &mut dyn ReferenceProvider,
        cfg: &TrainConfig,
    ) -> Result<(), TrainError> {
        let bg = cfg.background();
        for k in 0..self.slices.len() {
            let rgb = self.slice_render(k, &bg);
            let s = &self.slices[k];
            let request = ReferenceRequest {
                kind: RequestKind::RefineReference,
                view_id: s.reference.view_id.clone(),
                rgb,
                depth: s.depth.clone(),
                depth_scale: s.reference.camera.far,
                prompt_tag: s.reference.plane.prompt_tag.clone(),
                steps: cfg.refine_steps_per_iter,
                context: Some(ViewContext {
                    camera: s.reference.camera.clone(),
                    plane: s.reference.plane.clone(),
                    coverage: Some(s.coverage.clone()),
                    background: bg,
                }),
            };
            self.provider_calls += 1;
            match provider.provide(&request) {
                Ok(img) => {
                    let r = &mut self.slices[k].reference;
                    r.image = img;
                    r.version += 1;
                }
                Err(source) => {
                    let id = self.slices[k].reference.view_id.clone();
                    return Err(self.abort(self.iteration, id, source, cfg));
                }
            }
        }
        Ok(())
    }

    /// One outer iteration: gradient step, trained marking, smoothing on
    /// schedule, reference refinement, checkpoint. Stops early without
    /// stepping once every slice loss is below the convergence threshold.
    pub fn step(
        &mut self,
        provider: &mut dyn ReferenceProvider,
        cfg: &TrainConfig,
    ) -> Result<IterationRecord, TrainError> {
        let t0 = Instant::now();
        self.iteration += 1;
        let it = self.iteration;
        let k = cfg.surface_views_per_iter.min(self.surface_views.len());
        let mut surface: Vec<usize> = sample(&mut self.rng, self.surface_views.len(), k).into_vec();
        surface.sort_unstable();

        let (losses, surface_loss) = self.accumulate(&surface, cfg)?;
        let slice_sum = losses.values().sum::<f64>();
        let mean_loss = slice_sum / losses.len() as f64;
        let converged = losses.values().all(|&l| l < cfg.convergence_epsilon);
        self.per_view_loss = losses.clone();
        let mut record = IterationRecord {
            iteration: it,
            per_view_loss: losses,
            mean_loss,
            surface_loss,
            step_scale: 0.0,
            smoothed: false,
            converged,
            wall_ms: 0,
            smooth_report: None,
        };
        if converged {
            record.wall_ms = t0.elapsed().as_millis() as u64;
            return Ok(record);
        }

        let start = slice_sum + surface_loss.unwrap_or(0.0) * surface.len() as f64;
        record.step_scale = self.line_search(&surface, start, cfg)?;
        if let Some(index) = opaque_atom_violation(&self.model, &cfg.atom) {
            return Err(TrainError::Atom {
                iteration: it,
                index,
            });
        }
        self.mark_trained();
        if it.is_multiple_of(cfg.smooth_interval) {
            record.smooth_report = Some(smooth_in_place(&mut self.model, &cfg.smooth));
            record.smoothed = true;
        }
        self.refine(provider, cfg)?;
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && it.is_multiple_of(cfg.checkpoint_interval) {
                std::fs::create_dir_all(dir).map_err(MetaError::from)?;
                save_model(&dir.join(format!("checkpoint-{it:04}.ply")), &self.model)?;
            }
        }
        record.wall_ms = t0.elapsed().as_millis() as u64;
        Ok(record)
    }
}

/// Trains interior colors of `model` against references for `schedule`.
///
/// With a zero iteration budget the input comes back unchanged and the
/// provider is never called.
pub fn train(
    model: &SplatModel,
    schedule: &SliceSchedule,
    provider: &mut dyn ReferenceProvider,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.iterations_max == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            log: Vec::new(),
            references: Vec::new(),
            final_loss: BTreeMap::new(),
            converged: false,
            provider_calls: 0,
        });
    }
    let mut state = TrainState::new(model, schedule, provider, cfg)?;
    let mut log = Vec::new();
    let mut converged = false;
    while state.iteration < cfg.iterations_max {
        let rec = state.step(provider, cfg)?;
        if rec.iteration % 10 == 0 || rec.converged {
            log::info!(
                "iteration {} mean loss {:.5} max {:.5}",
                rec.iteration,
                rec.mean_loss,
                rec.per_view_loss.values().cloned().fold(0.0, f64::max)
            );
        }
        converged = rec.converged;
        log.push(rec);
        if converged {
            break;
        }
    }
    let final_loss = state.slice_losses(cfg)?;
    Ok(TrainOutcome {
        references: state.references(),
        provider_calls: state.provider_calls,
        model: state.model,
        log,
        final_loss,
        converged,
    })
}

/// Loss of one rendered view against `reference` and its gradient with
/// respect to every particle color.
pub fn color_gradients(
    model: &SplatModel,
    cam: &Camera,
    mask: &VisibilityMask,
    reference: &ColorImage,
    alpha: f64,
    background: Vec3,
) -> Result<(f64, Vec<Vec3>), TrainError> {
    let out = render_with(model, cam, mask, &settings(background))?;
    let (loss, pg) = recon_loss_grad(&out.rgb, reference, alpha)?;
    let contrib = out.contrib.unwrap_or_default();
    let mut grad = vec![Vec3::zeros(); model.len()];
    for p in 0..out.rgb.pixels() {
        let d = Vec3::new(pg[3 * p], pg[3 * p + 1], pg[3 * p + 2]);
        for (i, w) in contrib.pixel(p) {
            grad[i] += d * w;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutplane::horizontal_stack_in;
    use crate::splat::{Aabb, Gaussian};

    fn cam(size: usize) -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, 4.0),
            look_at: Vec3::zeros(),
            up: Vec3::y(),
            vertical_fov: 0.5,
            width: size,
            height: size,
            near: 0.1,
            far: 10.0,
        }
    }

    #[test]
    fn untouched_particle_has_zero_gradient() {
        let m = SplatModel::new(vec![
            Gaussian::isotropic(Vec3::zeros(), 0.2, Vec3::repeat(0.3), 0.8),
            Gaussian::isotropic(Vec3::new(50.0, 0.0, 0.0), 0.2, Vec3::repeat(0.3), 0.8),
        ]);
        let r = ColorImage::filled(12, 12, Vec3::repeat(0.9));
        let (_, g) =
            color_gradients(&m, &cam(12), &VisibilityMask::All, &r, 0.8, Vec3::zeros()).unwrap();
        assert!(g[0].norm() > 0.0);
        assert_eq!(g[1], Vec3::zeros());
    }

    #[test]
    fn single_pixel_mse_gradient() {
        // one opaque particle covering exactly one pixel of a 1x1 image
        let m = SplatModel::new(vec![Gaussian::isotropic(
            Vec3::zeros(),
            0.01,
            Vec3::new(0.7, 0.2, 0.1),
            1.0,
        )]);
        let mut c = cam(1);
        c.vertical_fov = 0.001;
        let reference = ColorImage::filled(1, 1, Vec3::new(0.5, 0.5, 0.5));
        let out = render_with(&m, &c, &VisibilityMask::All, &settings(Vec3::zeros())).unwrap();
        let w = out.contrib.as_ref().unwrap().weights[0];
        let (_, g) =
            color_gradients(&m, &c, &VisibilityMask::All, &reference, 1.0, Vec3::zeros()).unwrap();
        let rendered = out.rgb.pixel(0);
        let expect = (rendered - Vec3::repeat(0.5)) * (2.0 * w / 3.0);
        assert!((g[0] - expect).norm() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            surface_views_per_iter: 70,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_budget_returns_input() {
        struct Never;
        impl ReferenceProvider for Never {
            fn provide(&mut self, _: &ReferenceRequest) -> Result<ColorImage, ProviderError> {
                panic!("provider must not be called")
            }
            fn describe(&self) -> String {
                "never".into()
            }
        }
        let m = SplatModel::new(vec![Gaussian::isotropic(
            Vec3::zeros(),
            0.1,
            Vec3::repeat(0.5),
            1.0,
        )]);
        let bbox = Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let s = horizontal_stack_in(&bbox, 2, "horizontal", 0.01).unwrap();
        let cfg = TrainConfig {
            iterations_max: 0,
            ..Default::default()
        };
        let out = train(&m, &s, &mut Never, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.log.is_empty());
    }
}
