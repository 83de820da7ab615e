//! Cut planes and the slice schedules built from them.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::splat::{Aabb, OpaqueAtomConfig, SplatModel, Vec3};

#[derive(Debug, Error)]
pub enum CutError {
    #[error("plane normal must be non-zero and finite")]
    ZeroNormal,
    #[error("slab half-width must be positive, got {0}")]
    SlabWidth(f64),
    #[error("bounding box is flat along {0}")]
    DegenerateBox(&'static str),
    #[error("count must be at least 1")]
    Count,
    #[error("schedule must contain at least one plane")]
    EmptySchedule,
    #[error("schedule json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMode {
    /// Keep only the thin band around the plane.
    Slab,
    /// Keep everything on the non-positive side, exposing the cut face.
    Half,
}

impl std::str::FromStr for CutMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "slab" => Ok(Self::Slab),
            "half" => Ok(Self::Half),
            other => Err(format!(
                "unknown cut mode `{other}` (expected slab or half)"
            )),
        }
    }
}

/// Plane `n·x + d = 0` with a unit normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutPlane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub slab_half_width: f64,
    pub mode: CutMode,
    pub prompt_tag: String,
}

impl CutPlane {
    /// Builds a plane from unnormalized coefficients `(a, b, c, d)`.
    pub fn new(
        normal: Vec3,
        offset: f64,
        slab_half_width: f64,
        mode: CutMode,
        prompt_tag: impl Into<String>,
    ) -> Result<Self, CutError> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() || !offset.is_finite() {
            return Err(CutError::ZeroNormal);
        }
        if !(slab_half_width > 0.0) {
            return Err(CutError::SlabWidth(slab_half_width));
        }
        let n = normal / len;
        Ok(Self {
            normal: [n.x, n.y, n.z],
            offset: offset / len,
            slab_half_width,
            mode,
            prompt_tag: prompt_tag.into(),
        })
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal)
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal().dot(p) + self.offset
    }

    /// Whether a particle at `p` survives the cut.
    pub fn keeps(&self, p: &Vec3) -> bool {
        let s = self.signed_distance(p);
        match self.mode {
            CutMode::Slab => s.abs() <= self.slab_half_width,
            CutMode::Half => s <= self.slab_half_width,
        }
    }

    /// Foot of the perpendicular from `p`.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.normal() * self.signed_distance(p)
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: self.normal.map(|v| -v),
            offset: -self.offset,
            ..self.clone()
        }
    }

    pub fn with_mode(&self, mode: CutMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn intersects(&self, bbox: &Aabb) -> bool {
        let n = self.normal();
        let half = bbox.size() * 0.5;
        let reach = n.x.abs() * half.x + n.y.abs() * half.y + n.z.abs() * half.z;
        self.signed_distance(&bbox.center()).abs() <= reach
    }

    /// Checks the stored invariants (unit normal, positive width).
    pub fn check(&self) -> Result<(), CutError> {
        if (self.normal().norm() - 1.0).abs() > 1e-9 {
            return Err(CutError::ZeroNormal);
        }
        if !(self.slab_half_width > 0.0) {
            return Err(CutError::SlabWidth(self.slab_half_width));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSchedule {
    pub name: String,
    pub planes: Vec<CutPlane>,
}

impl SliceSchedule {
    pub fn new(name: impl Into<String>, planes: Vec<CutPlane>) -> Result<Self, CutError> {
        if planes.is_empty() {
            return Err(CutError::EmptySchedule);
        }
        for p in &planes {
            p.check()?;
        }
        Ok(Self {
            name: name.into(),
            planes,
        })
    }

    /// Concatenates schedules, keeping plane order.
    pub fn concat(name: impl Into<String>, parts: &[SliceSchedule]) -> Result<Self, CutError> {
        Self::new(name, parts.iter().flat_map(|s| s.planes.clone()).collect())
    }

    pub fn with_slab_half_width(mut self, w: f64) -> Result<Self, CutError> {
        if !(w > 0.0) {
            return Err(CutError::SlabWidth(w));
        }
        for p in &mut self.planes {
            p.slab_half_width = w;
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String, CutError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CutError> {
        let raw: SliceSchedule = serde_json::from_str(s)?;
        // re-normalize in case the file was written by hand
        let planes = raw
            .planes
            .into_iter()
            .map(|p| {
                CutPlane::new(
                    p.normal(),
                    p.offset,
                    p.slab_half_width,
                    p.mode,
                    p.prompt_tag,
                )
            })
            .collect::<Result<_, _>>()?;
        Self::new(raw.name, planes)
    }

    pub fn load(path: &Path) -> Result<Self, CutError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CutError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Default slab half-width: two atom scale caps.
pub fn default_slab_half_width(extent: f64) -> f64 {
    2.0 * OpaqueAtomConfig::default().scale_cap(extent)
}

/// `count` planes with normal +z at evenly spaced heights. Levels sit at
/// the centers of `count` equal bands, so the faces of the box are never
/// used and a single plane lands at mid-height.
pub fn horizontal_stack(
    model: &SplatModel,
    count: usize,
    tag: &str,
) -> Result<SliceSchedule, CutError> {
    horizontal_stack_in(
        model.bbox(),
        count,
        tag,
        default_slab_half_width(model.extent()),
    )
}

pub fn horizontal_stack_in(
    bbox: &Aabb,
    count: usize,
    tag: &str,
    slab_half_width: f64,
) -> Result<SliceSchedule, CutError> {
    if count == 0 {
        return Err(CutError::Count);
    }
    let (lo, hi) = (bbox.min.z, bbox.max.z);
    let h = hi - lo;
    if !(h > 0.0) {
        return Err(CutError::DegenerateBox("z"));
    }
    let step = h / count as f64;
    let planes = (0..count)
        .map(|k| {
            let z =
                (lo + (k as f64 + 0.5) * step).clamp(lo + slab_half_width, hi - slab_half_width);
            CutPlane::new(Vec3::z(), -z, slab_half_width, CutMode::Slab, tag)
        })
        .collect::<Result<_, _>>()?;
    SliceSchedule::new(format!("horizontal-{count}"), planes)
}

/// Vertical planes through the vertical axis at the box center, normals at
/// `kπ/count`. Planes at θ and θ+π coincide, so a half turn covers a full
/// rotation.
pub fn radial_fan(model: &SplatModel, count: usize, tag: &str) -> Result<SliceSchedule, CutError> {
    let c = model.bbox().center();
    radial_fan_about(
        [c.x, c.y],
        count,
        tag,
        default_slab_half_width(model.extent()),
        0.0,
    )
}

/// Fan about the vertical line through `axis_xy`, rotated by `phase`
/// radians.
pub fn radial_fan_about(
    axis_xy: [f64; 2],
    count: usize,
    tag: &str,
    slab_half_width: f64,
    phase: f64,
) -> Result<SliceSchedule, CutError> {
    if count == 0 {
        return Err(CutError::Count);
    }
    let axis = Vec3::new(axis_xy[0], axis_xy[1], 0.0);
    let planes = (0..count)
        .map(|k| {
            let theta = phase + k as f64 * PI / count as f64;
            let n = Vec3::new(theta.cos(), theta.sin(), 0.0);
            CutPlane::new(n, -n.dot(&axis), slab_half_width, CutMode::Slab, tag)
        })
        .collect::<Result<_, _>>()?;
    SliceSchedule::new(format!("radial-{count}"), planes)
}

/// Uniformly random orientations, offsets within the middle 60% of the box
/// projected onto each normal.
pub fn random_planes(
    model: &SplatModel,
    count: usize,
    seed: u64,
) -> Result<SliceSchedule, CutError> {
    random_planes_in(
        model.bbox(),
        count,
        seed,
        default_slab_half_width(model.extent()),
    )
}

pub fn random_planes_in(
    bbox: &Aabb,
    count: usize,
    seed: u64,
    slab_half_width: f64,
) -> Result<SliceSchedule, CutError> {
    if count == 0 {
        return Err(CutError::Count);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = bbox.center();
    let half = bbox.size() * 0.5;
    let mut planes = Vec::with_capacity(count);
    for _ in 0..count {
        let z: f64 = rng.gen_range(-1.0..=1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).max(0.0).sqrt();
        let n = Vec3::new(r * phi.cos(), r * phi.sin(), z);
        let reach = n.x.abs() * half.x + n.y.abs() * half.y + n.z.abs() * half.z;
        let s = n.dot(&center) + rng.gen_range(-0.6..=0.6) * reach;
        planes.push(CutPlane::new(
            n,
            -s,
            slab_half_width,
            CutMode::Slab,
            "random",
        )?);
    }
    SliceSchedule::new(format!("random-{count}-{seed}"), planes)
}
