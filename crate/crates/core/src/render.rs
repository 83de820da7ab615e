//! CPU splat rasterizer.
//!
//! Particles are projected with the EWA Jacobian, sorted front to back by
//! camera depth (ties by index), binned into square tiles and composited
//! per pixel:
//!
//! ```text
//! C = Σ c_i σ_i Π_{j<i} (1 - σ_j) + T_final · background
//! ```
//!
//! Each pixel can also record its `(particle, weight)` list. With geometry
//! frozen those weights do not change, so a recorded list re-composites any
//! new set of colors bit-identically to a full render.

use nalgebra::{Matrix2x3, Matrix3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutplane::{CutError, CutPlane};
use crate::imaging::{ColorImage, ScalarImage};
use crate::par;
use crate::splat::{SplatModel, Vec3};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("projection of particle {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Cut(#[from] CutError),
}

/// Pinhole camera with square pixels. Camera space is x right, y down,
/// z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Output size and lens shared by generated cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub width: usize,
    pub height: usize,
    pub vertical_fov: f64,
    /// Extra margin around the framed region (1.0 = tight).
    pub framing: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            vertical_fov: 0.6,
            framing: 1.05,
        }
    }
}

impl ViewConfig {
    pub fn square(size: usize) -> Self {
        Self {
            width: size,
            height: size,
            ..Default::default()
        }
    }

    fn limiting_half_fov(&self) -> f64 {
        let v = 0.5 * self.vertical_fov;
        let h = (v.tan() * self.width as f64 / self.height as f64).atan();
        v.min(h)
    }
}

fn up_for(forward: &Vec3) -> Vec3 {
    if forward.z.abs() < 0.9 {
        Vec3::z()
    } else {
        Vec3::y()
    }
}

impl Camera {
    pub fn check(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::Camera(m));
        if self.width < 1 || self.height < 1 {
            return bad(format!("size {}x{}", self.width, self.height));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad(format!("near {} / far {}", self.near, self.far));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return bad(format!("fov {}", self.vertical_fov));
        }
        let f = self.look_at - self.position;
        if !(f.norm() > 0.0) || f.cross(&self.up).norm() < 1e-12 {
            return bad("look direction is zero or parallel to up".into());
        }
        Ok(())
    }

    /// Rows are the camera right, down and forward axes in world space.
    pub fn rotation(&self) -> Matrix3<f64> {
        let f = (self.look_at - self.position).normalize();
        let r = f.cross(&self.up).normalize();
        let d = f.cross(&r);
        Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()])
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.vertical_fov).tan()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * (p - self.position)
    }

    /// World-space unit direction through pixel coordinates `(u, v)`;
    /// pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let f = self.focal();
        let local = Vec3::new(
            (u - 0.5 * self.width as f64) / f,
            (v - 0.5 * self.height as f64) / f,
            1.0,
        );
        (self.rotation().transpose() * local).normalize()
    }

    /// Camera on the positive side of `plane`, looking straight at it.
    ///
    /// `radius` is the in-plane radius around the foot of the box center that
    /// must be visible.
    pub fn facing_plane(plane: &CutPlane, center: &Vec3, radius: f64, view: &ViewConfig) -> Self {
        let n = plane.normal();
        let foot = plane.project(center);
        let r = radius.max(1e-9) * view.framing;
        let dist = r / view.limiting_half_fov().tan();
        let h = plane.slab_half_width;
        Self {
            position: foot + n * dist,
            look_at: foot,
            up: up_for(&n),
            vertical_fov: view.vertical_fov,
            width: view.width,
            height: view.height,
            near: 0.5 * (dist - h).max(1e-6 * dist),
            far: dist + 4.0 * r + h,
        }
    }

    /// Camera looking at `center` from `direction`, framing a sphere.
    pub fn orbit(center: &Vec3, radius: f64, direction: &Vec3, view: &ViewConfig) -> Self {
        let d = direction.normalize();
        let r = radius.max(1e-9) * view.framing;
        let dist = r / view.limiting_half_fov().sin();
        Self {
            position: center + d * dist,
            look_at: *center,
            up: up_for(&d),
            vertical_fov: view.vertical_fov,
            width: view.width,
            height: view.height,
            near: (dist - r) * 0.5,
            far: dist + r,
        }
    }
}

/// Which particles take part in a render.
#[derive(Debug, Clone, PartialEq)]
pub enum VisibilityMask {
    All,
    Cut(CutPlane),
    /// Sorted particle indices.
    Indices(Vec<usize>),
}

impl VisibilityMask {
    pub fn selects(&self, index: usize, position: &Vec3) -> bool {
        match self {
            Self::All => true,
            Self::Cut(p) => p.keeps(position),
            Self::Indices(ix) => ix.binary_search(&index).is_ok(),
        }
    }
}

/// Validated mask for a cut plane.
pub fn make_cut_mask(plane: &CutPlane) -> Result<VisibilityMask, CutError> {
    let normalized = CutPlane::new(
        plane.normal(),
        plane.offset,
        plane.slab_half_width,
        plane.mode,
        plane.prompt_tag.clone(),
    )?;
    Ok(VisibilityMask::Cut(normalized))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: Vec3,
    /// Screen-space variance added to every projected covariance (pixels²).
    pub lowpass_variance: f64,
    pub tile_size: usize,
    pub transmittance_cutoff: f64,
    /// Footprint radius in standard deviations of the 2D Gaussian.
    pub footprint_sigmas: f64,
    pub record_contrib: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: Vec3::zeros(),
            lowpass_variance: 0.3,
            tile_size: 16,
            transmittance_cutoff: 1e-4,
            footprint_sigmas: 4.0,
            record_contrib: true,
        }
    }
}

/// Per-pixel blend weights in compressed row form, pixels in raster order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Contributions {
    pub offsets: Vec<usize>,
    pub particles: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Contributions {
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[p]..self.offsets[p + 1];
        self.particles[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Distinct particles with a positive weight anywhere, sorted.
    pub fn touched(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .particles
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&i, _)| i as usize)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: ColorImage,
    /// Weighted mean camera depth, 0 where nothing was drawn.
    pub depth: ScalarImage,
    /// Σ w_i per pixel.
    pub alpha: ScalarImage,
    /// Transmittance left for the background.
    pub transmittance: Vec<f64>,
    pub contrib: Option<Contributions>,
}

impl RenderOutput {
    /// Pixels that received any particle weight.
    pub fn foreground(&self) -> Vec<bool> {
        self.alpha.data.iter().map(|&a| a > 0.0).collect()
    }

    /// Color with the background removed: Σ w c / Σ w.
    pub fn unpremultiplied(&self, background: &Vec3) -> ColorImage {
        let mut out = self.rgb.clone();
        for p in 0..self.rgb.pixels() {
            let a = self.alpha.data[p];
            if a > 0.0 {
                let t = self.transmittance[p];
                for k in 0..3 {
                    out.data[3 * p + k] = (self.rgb.data[3 * p + k] - t * background[k]) / a;
                }
            }
        }
        out
    }
}

/// Re-composites recorded weights with new colors. Matches the renderer's
/// arithmetic exactly, so unchanged colors reproduce the original image.
pub fn composite(
    contrib: &Contributions,
    transmittance: &[f64],
    width: usize,
    height: usize,
    background: &Vec3,
    color_of: impl Fn(usize) -> Vec3,
) -> ColorImage {
    let mut img = ColorImage::new(width, height);
    for p in 0..width * height {
        let mut acc = [0.0f64; 3];
        for (i, w) in contrib.pixel(p) {
            let c = color_of(i);
            for k in 0..3 {
                acc[k] += w * c[k];
            }
        }
        let t = transmittance[p];
        for k in 0..3 {
            img.data[3 * p + k] = acc[k] + t * background[k];
        }
    }
    img
}

#[derive(Debug, Clone, Copy)]
struct Splat2D {
    index: u32,
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    /// Inclusive pixel rectangle x0, y0, x1, y1.
    rect: [usize; 4],
}

fn project_all(
    model: &SplatModel,
    cam: &Camera,
    mask: &VisibilityMask,
    settings: &RenderSettings,
) -> Result<Vec<Splat2D>, RenderError> {
    let rot = cam.rotation();
    let f = cam.focal();
    let (w, h) = (cam.width as f64, cam.height as f64);
    const CHUNK: usize = 8192;
    let n = model.len();
    let chunks = par::map_range(n.div_ceil(CHUNK), |c| {
        let mut out = Vec::new();
        for index in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let g = &model.gaussians[index];
            if !mask.selects(index, &g.position) {
                continue;
            }
            let t = rot * (g.position - cam.position);
            if !t.iter().all(|v| v.is_finite()) {
                return Err(RenderError::NonFinite { index });
            }
            if t.z <= cam.near || t.z >= cam.far {
                continue;
            }
            let iz = 1.0 / t.z;
            let jac = Matrix2x3::new(
                f * iz,
                0.0,
                -f * t.x * iz * iz,
                0.0,
                f * iz,
                -f * t.y * iz * iz,
            );
            let m = jac * rot;
            let cov = m * g.covariance() * m.transpose();
            let a = cov[(0, 0)] + settings.lowpass_variance;
            let b = cov[(0, 1)];
            let cc = cov[(1, 1)] + settings.lowpass_variance;
            let det = a * cc - b * b;
            if !(det.is_finite() && a.is_finite() && cc.is_finite()) {
                return Err(RenderError::NonFinite { index });
            }
            if det <= 0.0 {
                continue;
            }
            let mid = 0.5 * (a + cc);
            let lambda = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = settings.footprint_sigmas * lambda.sqrt();
            let mean = [f * t.x * iz + 0.5 * w, f * t.y * iz + 0.5 * h];
            // pixel centers sit at i + 0.5
            let x0 = (mean[0] - radius - 0.5).ceil();
            let x1 = (mean[0] + radius - 0.5).floor();
            let y0 = (mean[1] - radius - 0.5).ceil();
            let y1 = (mean[1] + radius - 0.5).floor();
            if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
                return Err(RenderError::NonFinite { index });
            }
            if x1 < 0.0 || y1 < 0.0 || x0 > w - 1.0 || y0 > h - 1.0 || x0 > x1 || y0 > y1 {
                continue;
            }
            out.push(Splat2D {
                index: index as u32,
                mean,
                conic: [cc / det, -b / det, a / det],
                depth: t.z,
                opacity: g.opacity,
                color: [g.color.x, g.color.y, g.color.z],
                rect: [
                    x0.max(0.0) as usize,
                    y0.max(0.0) as usize,
                    x1.min(w - 1.0) as usize,
                    y1.min(h - 1.0) as usize,
                ],
            });
        }
        Ok(out)
    });
    let mut splats = Vec::new();
    for c in chunks {
        splats.extend(c?);
    }
    splats.sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

struct TileOut {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    trans: Vec<f64>,
    counts: Vec<u32>,
    entries: Vec<(u32, f64)>,
}

pub fn render(
    model: &SplatModel,
    cam: &Camera,
    mask: &VisibilityMask,
    background: Vec3,
) -> Result<RenderOutput, RenderError> {
    let settings = RenderSettings {
        background,
        ..Default::default()
    };
    render_with(model, cam, mask, &settings)
}

pub fn render_with(
    model: &SplatModel,
    cam: &Camera,
    mask: &VisibilityMask,
    settings: &RenderSettings,
) -> Result<RenderOutput, RenderError> {
    cam.check()?;
    let splats = project_all(model, cam, mask, settings)?;
    let (w, h) = (cam.width, cam.height);
    let ts = settings.tile_size.max(1);
    let (tx, ty) = (w.div_ceil(ts), h.div_ceil(ts));

    // counting sort into tiles; each tile list stays depth ordered
    let mut starts = vec![0usize; tx * ty + 1];
    for s in &splats {
        for j in s.rect[1] / ts..=s.rect[3] / ts {
            for i in s.rect[0] / ts..=s.rect[2] / ts {
                starts[j * tx + i + 1] += 1;
            }
        }
    }
    for t in 0..tx * ty {
        starts[t + 1] += starts[t];
    }
    let mut fill = starts.clone();
    let mut lists = vec![0u32; starts[tx * ty]];
    for (k, s) in splats.iter().enumerate() {
        for j in s.rect[1] / ts..=s.rect[3] / ts {
            for i in s.rect[0] / ts..=s.rect[2] / ts {
                let t = j * tx + i;
                lists[fill[t]] = k as u32;
                fill[t] += 1;
            }
        }
    }

    let bg = settings.background;
    let cutoff_q = settings.footprint_sigmas * settings.footprint_sigmas;
    let tiles = par::map_range(tx * ty, |t| {
        let (ti, tj) = (t % tx, t / tx);
        let (px0, py0) = (ti * ts, tj * ts);
        let (px1, py1) = ((px0 + ts).min(w), (py0 + ts).min(h));
        let npx = (px1 - px0) * (py1 - py0);
        let mut out = TileOut {
            rgb: vec![0.0; npx * 3],
            depth: vec![0.0; npx],
            alpha: vec![0.0; npx],
            trans: vec![0.0; npx],
            counts: vec![0; if settings.record_contrib { npx } else { 0 }],
            entries: Vec::new(),
        };
        let list = &lists[starts[t]..starts[t + 1]];
        let mut local = 0;
        for py in py0..py1 {
            for px in px0..px1 {
                let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
                let mut trans = 1.0f64;
                let mut acc = [0.0f64; 3];
                let mut dsum = 0.0;
                let mut wsum = 0.0;
                let mut count = 0u32;
                for &k in list {
                    let s = &splats[k as usize];
                    if px < s.rect[0] || px > s.rect[2] || py < s.rect[1] || py > s.rect[3] {
                        continue;
                    }
                    let dx = u - s.mean[0];
                    let dy = v - s.mean[1];
                    let q =
                        s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                    if q > cutoff_q {
                        continue;
                    }
                    let sigma = s.opacity * (-0.5 * q).exp();
                    if sigma <= 0.0 {
                        continue;
                    }
                    let wgt = sigma * trans;
                    for c in 0..3 {
                        acc[c] += wgt * s.color[c];
                    }
                    dsum += wgt * s.depth;
                    wsum += wgt;
                    if settings.record_contrib {
                        out.entries.push((s.index, wgt));
                        count += 1;
                    }
                    trans *= 1.0 - sigma;
                    if trans < settings.transmittance_cutoff {
                        break;
                    }
                }
                for c in 0..3 {
                    out.rgb[3 * local + c] = acc[c] + trans * bg[c];
                }
                out.depth[local] = if wsum > 0.0 { dsum / wsum } else { 0.0 };
                out.alpha[local] = wsum;
                out.trans[local] = trans;
                if settings.record_contrib {
                    out.counts[local] = count;
                }
                local += 1;
            }
        }
        out
    });

    // stitch tiles back into raster order
    let mut rgb = ColorImage::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut alpha = ScalarImage::new(w, h);
    let mut transmittance = vec![0.0; w * h];
    let mut entry_starts: Vec<Vec<usize>> = Vec::new();
    if settings.record_contrib {
        entry_starts = tiles
            .iter()
            .map(|t| {
                let mut s = Vec::with_capacity(t.counts.len() + 1);
                s.push(0);
                for &c in &t.counts {
                    s.push(s.last().unwrap() + c as usize);
                }
                s
            })
            .collect();
    }
    let total: usize = tiles.iter().map(|t| t.entries.len()).sum();
    let mut contrib = settings.record_contrib.then(|| Contributions {
        offsets: Vec::with_capacity(w * h + 1),
        particles: Vec::with_capacity(total),
        weights: Vec::with_capacity(total),
    });
    if let Some(c) = contrib.as_mut() {
        c.offsets.push(0);
    }
    for py in 0..h {
        for px in 0..w {
            let t = (py / ts) * tx + px / ts;
            let tile = &tiles[t];
            let tw = (((px / ts) * ts + ts).min(w)) - (px / ts) * ts;
            let local = (py - (py / ts) * ts) * tw + (px - (px / ts) * ts);
            let p = py * w + px;
            rgb.data[3 * p..3 * p + 3].copy_from_slice(&tile.rgb[3 * local..3 * local + 3]);
            depth.data[p] = tile.depth[local];
            alpha.data[p] = tile.alpha[local];
            transmittance[p] = tile.trans[local];
            if let Some(c) = contrib.as_mut() {
                let r = entry_starts[t][local]..entry_starts[t][local + 1];
                for &(i, wgt) in &tile.entries[r] {
                    c.particles.push(i);
                    c.weights.push(wgt);
                }
                c.offsets.push(c.weights.len());
            }
        }
    }
    Ok(RenderOutput {
        rgb,
        depth,
        alpha,
        transmittance,
        contrib,
    })
}

/// In-plane radius needed to frame every particle kept by `plane`, measured
/// from the foot of the box center. Falls back to the box half-diagonal.
pub fn slice_radius(model: &SplatModel, plane: &CutPlane) -> f64 {
    let foot = plane.project(&model.bbox().center());
    let r = model
        .gaussians
        .iter()
        .filter(|g| plane.keeps(&g.position))
        .map(|g| (plane.project(&g.position) - foot).norm_squared())
        .fold(0.0, f64::max)
        .sqrt();
    if r > 0.0 {
        r
    } else {
        model.bbox().half_diagonal()
    }
}

/// Camera facing a cut plane and framing what the plane keeps.
pub fn slice_camera(model: &SplatModel, plane: &CutPlane, view: &ViewConfig) -> Camera {
    Camera::facing_plane(
        plane,
        &model.bbox().center(),
        slice_radius(model, plane),
        view,
    )
}

/// Uniform random unit vector.
pub fn random_direction(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Radius of the smallest sphere around the box center holding every
/// particle.
pub fn bounding_radius(model: &SplatModel) -> f64 {
    let c = model.bbox().center();
    model
        .gaussians
        .iter()
        .map(|g| (g.position - c).norm_squared())
        .fold(0.0, f64::max)
        .sqrt()
}
