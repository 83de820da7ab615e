//! Analytic solid textures used as ground truth.
//!
//! Every texture is a pure function of 3D position, so any two cuts through
//! the same point agree on its color. The solid is stretched to the model's
//! bounding box: coordinates are normalized to `[-1, 1]` per axis.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cutplane::CutPlane;
use crate::imaging::ColorImage;
use crate::render::Camera;
use crate::splat::{Aabb, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Watermelon,
    Orange,
    Bread,
}

impl FromStr for TextureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "watermelon" => Ok(Self::Watermelon),
            "orange" => Ok(Self::Orange),
            "bread" => Ok(Self::Bread),
            other => Err(format!("unknown texture kind {other:?}")),
        }
    }
}

pub mod palette {
    use crate::splat::Vec3;

    pub const FLESH: [f64; 3] = [0.86, 0.2, 0.22];
    pub const PITH: [f64; 3] = [0.93, 0.95, 0.85];
    pub const RIND_LIGHT: [f64; 3] = [0.55, 0.78, 0.35];
    pub const RIND_DARK: [f64; 3] = [0.1, 0.35, 0.12];
    pub const SEED: [f64; 3] = [0.08, 0.06, 0.05];

    pub const PULP: [f64; 3] = [1.0, 0.6, 0.12];
    pub const PULP_ALT: [f64; 3] = [0.96, 0.52, 0.08];
    pub const MEMBRANE: [f64; 3] = [0.98, 0.85, 0.6];
    pub const ALBEDO: [f64; 3] = [0.98, 0.92, 0.75];
    pub const PEEL: [f64; 3] = [0.95, 0.55, 0.1];

    pub const CRUMB: [f64; 3] = [0.93, 0.85, 0.66];
    pub const PORE: [f64; 3] = [0.7, 0.6, 0.45];
    pub const CRUST: [f64; 3] = [0.55, 0.32, 0.12];

    pub fn v(c: [f64; 3]) -> Vec3 {
        Vec3::new(c[0], c[1], c[2])
    }
}

/// Band radii of the watermelon, in normalized units.
pub const FLESH_RADIUS: f64 = 0.86;
pub const PITH_RADIUS: f64 = 0.92;
pub const RIND_SPLIT_RADIUS: f64 = 0.96;
pub const ORANGE_WEDGES: usize = 10;

const SEED_CELL: f64 = 0.2;
const SEED_RADIUS: f64 = 0.035;
const PORE_CELL: f64 = 0.12;

/// A procedural solid fitted to a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProceduralSolid {
    pub kind: TextureKind,
    pub center: Vec3,
    pub half_size: Vec3,
}

fn mix(mut h: u64) -> u64 {
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn lattice_hash(cell: [i64; 3], salt: u64) -> u64 {
    let mut h = mix(salt);
    for c in cell {
        h = mix(h ^ c as u64);
    }
    h
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Jittered lattice point in `cell` plus a per-cell uniform value.
fn lattice_point(cell: [i64; 3], size: f64, salt: u64) -> (Vec3, f64) {
    let h0 = lattice_hash(cell, salt);
    let h1 = mix(h0);
    let h2 = mix(h1);
    let h3 = mix(h2);
    let j = |h: u64| 0.2 + 0.6 * unit(h);
    let p = Vec3::new(
        (cell[0] as f64 + j(h0)) * size,
        (cell[1] as f64 + j(h1)) * size,
        (cell[2] as f64 + j(h2)) * size,
    );
    (p, unit(h3))
}

fn cell_of(q: &Vec3, size: f64) -> [i64; 3] {
    [
        (q.x / size).floor() as i64,
        (q.y / size).floor() as i64,
        (q.z / size).floor() as i64,
    ]
}

/// Seed centers of the watermelon live on a jittered lattice with radius
/// in `[0.3, 0.75]`.
pub fn watermelon_seed_at(q: &Vec3) -> bool {
    let (c, u) = lattice_point(cell_of(q, SEED_CELL), SEED_CELL, 0x5eed);
    let rc = c.norm();
    u < 0.55 && (0.3..=0.75).contains(&rc) && (q - c).norm() <= SEED_RADIUS
}

fn watermelon(q: &Vec3) -> Option<Vec3> {
    let r = q.norm();
    let c = if r > 1.0 {
        return None;
    } else if r > RIND_SPLIT_RADIUS {
        palette::RIND_DARK
    } else if r > PITH_RADIUS {
        palette::RIND_LIGHT
    } else if r > FLESH_RADIUS {
        palette::PITH
    } else if watermelon_seed_at(q) {
        palette::SEED
    } else {
        palette::FLESH
    };
    Some(palette::v(c))
}

/// Wedge index around the z axis, `0..ORANGE_WEDGES`.
pub fn orange_wedge(q: &Vec3) -> usize {
    let phi = q.y.atan2(q.x).rem_euclid(std::f64::consts::TAU);
    ((phi / std::f64::consts::TAU * ORANGE_WEDGES as f64) as usize).min(ORANGE_WEDGES - 1)
}

fn orange(q: &Vec3) -> Option<Vec3> {
    let r = q.norm();
    if r > 1.0 {
        return None;
    }
    let c = if r > 0.95 {
        palette::PEEL
    } else if r > 0.9 {
        palette::ALBEDO
    } else {
        let rc = q.x.hypot(q.y);
        if rc < 0.08 {
            palette::ALBEDO
        } else {
            let step = std::f64::consts::TAU / ORANGE_WEDGES as f64;
            let phi = q.y.atan2(q.x).rem_euclid(std::f64::consts::TAU);
            let to_edge = (phi - (phi / step).round() * step).abs();
            if to_edge * rc < 0.02 {
                palette::MEMBRANE
            } else if orange_wedge(q).is_multiple_of(2) {
                palette::PULP
            } else {
                palette::PULP_ALT
            }
        }
    };
    Some(palette::v(c))
}

fn bread(q: &Vec3) -> Option<Vec3> {
    let inset = 1.0 - q.abs().max();
    if inset < 0.0 {
        return None;
    }
    if inset < 0.08 {
        return Some(palette::v(palette::CRUST));
    }
    let (c, u) = lattice_point(cell_of(q, PORE_CELL), PORE_CELL, 0xb7ead);
    let radius = 0.02 + 0.025 * u;
    Some(palette::v(if (q - c).norm() <= radius {
        palette::PORE
    } else {
        palette::CRUMB
    }))
}

impl ProceduralSolid {
    pub fn new(kind: TextureKind, center: Vec3, half_size: Vec3) -> Self {
        Self {
            kind,
            center,
            half_size,
        }
    }

    pub fn fitted(kind: TextureKind, bbox: &Aabb) -> Self {
        Self::new(kind, bbox.center(), bbox.size() * 0.5)
    }

    pub fn normalized(&self, p: &Vec3) -> Vec3 {
        (p - self.center).component_div(&self.half_size.map(|h| h.max(1e-300)))
    }

    /// Color at `p`, or `None` outside the solid.
    pub fn sample(&self, p: &Vec3) -> Option<Vec3> {
        let q = self.normalized(p);
        match self.kind {
            TextureKind::Watermelon => watermelon(&q),
            TextureKind::Orange => orange(&q),
            TextureKind::Bread => bread(&q),
        }
    }

    /// Color at `p`, `fallback` outside the solid.
    pub fn color_at(&self, p: &Vec3, fallback: Vec3) -> Vec3 {
        self.sample(p).unwrap_or(fallback)
    }
}

/// Point where the pixel-center ray meets `plane`, if in front of the camera.
pub fn pixel_on_plane(cam: &Camera, plane: &CutPlane, x: usize, y: usize) -> Option<Vec3> {
    let dir = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
    let n = plane.normal();
    let denom = n.dot(&dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = -plane.signed_distance(&cam.position) / denom;
    (t > 0.0).then(|| cam.position + dir * t)
}

/// Analytic cross-section image seen by `cam` on `plane`.
pub fn procedural_texture(
    solid: &ProceduralSolid,
    plane: &CutPlane,
    cam: &Camera,
    background: Vec3,
) -> ColorImage {
    ColorImage::from_fn(cam.width, cam.height, |x, y| {
        pixel_on_plane(cam, plane, x, y)
            .and_then(|p| solid.sample(&p))
            .unwrap_or(background)
    })
}
