//! Slice-consistency and ground-truth metrics.
//!
//! Consistency is the mean pairwise cosine similarity of 8×8×8 RGB
//! histograms over random slab views. Oracle error compares rendered slices
//! with the analytic texture on the same plane. Both look at foreground
//! pixels only, with the background divided out (Σ w c / Σ w).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cutplane::{random_planes, CutError, CutPlane, SliceSchedule};
use crate::imaging::ColorImage;
use crate::par;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::render::{
    bounding_radius, make_cut_mask, random_direction, render_with, slice_camera, Camera,
    RenderError, RenderSettings, ViewConfig, VisibilityMask,
};
use crate::splat::{SplatModel, Vec3};
use crate::texture::{pixel_on_plane, ProceduralSolid, TextureKind};

pub const HISTOGRAM_BINS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Cut(#[from] CutError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub num_views: usize,
    /// Indices of views with no foreground pixel.
    pub dropped_views: Vec<usize>,
    pub mean_pairwise_similarity: f64,
    pub per_view_oracle_error: Option<Vec<f64>>,
    pub runtime_ms: u64,
}

/// Bin of one channel value in `[0, 1]`.
pub fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

/// Counts per RGB bin, red-major, over pixels where `mask` is set.
pub fn color_histogram(img: &ColorImage, mask: &[bool]) -> Vec<f64> {
    let b = HISTOGRAM_BINS;
    let mut h = vec![0.0; b * b * b];
    for (p, &m) in mask.iter().enumerate() {
        if m {
            let c = img.pixel(p);
            h[(bin_of(c.x) * b + bin_of(c.y)) * b + bin_of(c.z)] += 1.0;
        }
    }
    h
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Symmetric cosine-similarity matrix with a unit diagonal.
pub fn similarity_matrix(hists: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = hists.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(&hists[i], &hists[j]);
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 1.0;
    }
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i < j {
                s += v;
            }
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// A slab view with the background divided out.
#[derive(Debug, Clone)]
pub struct SliceImage {
    pub color: ColorImage,
    pub foreground: Vec<bool>,
    pub camera: crate::render::Camera,
}

pub fn render_slice(
    model: &SplatModel,
    plane: &CutPlane,
    view: &ViewConfig,
    background: Vec3,
) -> Result<SliceImage, EvalError> {
    let camera = slice_camera(model, plane, view);
    let settings = RenderSettings {
        background,
        record_contrib: false,
        ..Default::default()
    };
    let out = render_with(model, &camera, &make_cut_mask(plane)?, &settings)?;
    Ok(SliceImage {
        color: out.unpremultiplied(&background),
        foreground: out.foreground(),
        camera,
    })
}

/// Mean pairwise histogram similarity over `count` random slab views.
pub fn slice_consistency(
    model: &SplatModel,
    count: usize,
    seed: u64,
    view: &ViewConfig,
) -> Result<ConsistencyReport, EvalError> {
    let t0 = Instant::now();
    let schedule = random_planes(model, count, seed)?;
    let hists = par::map_slice(&schedule.planes, |p| {
        render_slice(model, p, view, Vec3::zeros()).map(|s| {
            let any = s.foreground.iter().any(|&f| f);
            any.then(|| color_histogram(&s.color, &s.foreground))
        })
    });
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, h) in hists.into_iter().enumerate() {
        match h? {
            Some(h) => kept.push(h),
            None => dropped.push(k),
        }
    }
    if !dropped.is_empty() {
        log::warn!(
            "{} of {count} slices had no foreground and were dropped",
            dropped.len()
        );
    }
    Ok(ConsistencyReport {
        num_views: kept.len(),
        dropped_views: dropped,
        mean_pairwise_similarity: mean_off_diagonal(&similarity_matrix(&kept)),
        per_view_oracle_error: None,
        runtime_ms: t0.elapsed().as_millis() as u64,
    })
}

/// Mean absolute channel error over foreground pixels where the analytic
/// texture is defined; `None` if there is no such pixel.
pub fn image_oracle_error(
    slice: &SliceImage,
    plane: &CutPlane,
    solid: &ProceduralSolid,
) -> Option<f64> {
    let (w, h) = (slice.color.width, slice.color.height);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !slice.foreground[p] {
                continue;
            }
            let Some(truth) =
                pixel_on_plane(&slice.camera, plane, x, y).and_then(|q| solid.sample(&q))
            else {
                continue;
            };
            let c = slice.color.pixel(p).map(|v| v.clamp(0.0, 1.0));
            sum += (c - truth).abs().sum();
            n += 3;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-view oracle error on each plane; views with nothing to compare
/// report `NaN`.
pub fn oracle_error(
    model: &SplatModel,
    kind: TextureKind,
    planes: &SliceSchedule,
    view: &ViewConfig,
) -> Result<Vec<f64>, EvalError> {
    let solid = ProceduralSolid::fitted(kind, model.bbox());
    par::map_slice(&planes.planes, |p| {
        let s = render_slice(model, p, view, Vec3::zeros())?;
        Ok(image_oracle_error(&s, p, &solid).unwrap_or(f64::NAN))
    })
    .into_iter()
    .collect()
}

/// Mean absolute channel difference between full renders of two models
/// from `views` random orbit cameras around `before`.
pub fn surface_drift(
    before: &SplatModel,
    after: &SplatModel,
    views: usize,
    seed: u64,
    view: &ViewConfig,
) -> Result<f64, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = before.bbox().center();
    let radius = bounding_radius(before);
    let cams: Vec<Camera> = (0..views)
        .map(|_| Camera::orbit(&center, radius, &random_direction(&mut rng), view))
        .collect();
    let settings = RenderSettings {
        record_contrib: false,
        ..Default::default()
    };
    let diffs = par::map_slice(&cams, |cam| {
        let a = render_with(before, cam, &VisibilityMask::All, &settings)?;
        let b = render_with(after, cam, &VisibilityMask::All, &settings)?;
        let d: f64 = a
            .rgb
            .data
            .iter()
            .zip(&b.rgb.data)
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok::<_, EvalError>(d / a.rgb.data.len() as f64)
    });
    let mut sum = 0.0;
    for d in diffs {
        sum += d?;
    }
    Ok(if views == 0 { 0.0 } else { sum / views as f64 })
}
