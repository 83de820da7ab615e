//! Synthetic splat models for tests, benches and demos.

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::splat::{Gaussian, SplatModel, Vec3};
use crate::texture::{ProceduralSolid, TextureKind};

/// `n` nearly uniform points on the unit sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// The six unit axis points, which pin a unit sphere's bbox to `[-1, 1]³`.
fn axis_points() -> [Vec3; 6] {
    [
        Vec3::x(),
        -Vec3::x(),
        Vec3::y(),
        -Vec3::y(),
        Vec3::z(),
        -Vec3::z(),
    ]
}

fn facing(normal: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vec3::z(), normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SphereFixture {
    pub surface_count: usize,
    pub radius: f64,
    pub tangential_scale: f64,
    pub normal_scale: f64,
    pub opacity: f64,
    pub kind: TextureKind,
}

impl Default for SphereFixture {
    fn default() -> Self {
        Self {
            surface_count: 120_000,
            radius: 1.0,
            tangential_scale: 0.02,
            normal_scale: 0.012,
            opacity: 0.9,
            kind: TextureKind::Watermelon,
        }
    }
}

/// Hollow sphere of flat surface splats colored by the procedural texture,
/// all marked trained, centered at the origin.
pub fn synthetic_sphere(f: &SphereFixture) -> SplatModel {
    let solid = ProceduralSolid::new(f.kind, Vec3::zeros(), Vec3::repeat(f.radius));
    let dirs = fibonacci_sphere(f.surface_count.saturating_sub(6))
        .into_iter()
        .chain(axis_points());
    let gaussians = dirs
        .map(|n| {
            let p = n * f.radius;
            let color = solid.color_at(&(p * 0.999), Vec3::repeat(0.5));
            Gaussian {
                position: p,
                scale: Vec3::new(f.tangential_scale, f.tangential_scale, f.normal_scale),
                rotation: facing(&n),
                color,
                opacity: f.opacity,
                trained: true,
            }
        })
        .collect();
    SplatModel::new(gaussians)
}

fn wall_particle(p: Vec3, spacing: f64) -> Gaussian {
    Gaussian::isotropic(p, spacing, Vec3::repeat(0.6), 0.9)
}

/// Particles on the faces of the cube `[-half, half]³` with walls whose
/// normal axis is listed in `walls` (0 = x). Faint corner anchors widen the
/// bbox by `pad` so there is empty space outside the shell.
pub fn box_shell(half: f64, spacing: f64, walls: &[usize], pad: f64) -> SplatModel {
    let n = (2.0 * half / spacing).round() as usize;
    let coord = |i: usize| -half + 2.0 * half * i as f64 / n as f64;
    let mut g = Vec::new();
    for &axis in walls {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [-half, half] {
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = Vec3::zeros();
                    p[axis] = side;
                    p[u] = coord(i);
                    p[v] = coord(j);
                    g.push(wall_particle(p, spacing));
                }
            }
        }
    }
    add_anchors(&mut g, half + pad);
    SplatModel::new(g)
}

/// Closed cube shell.
pub fn hollow_box(half: f64, spacing: f64, pad: f64) -> SplatModel {
    box_shell(half, spacing, &[0, 1, 2], pad)
}

/// Cube shell missing both x walls, leaving a tube open along x.
pub fn open_tube(half: f64, spacing: f64, pad: f64) -> SplatModel {
    box_shell(half, spacing, &[1, 2], pad)
}

/// Sphere shell of isotropic particles roughly `spacing` apart.
pub fn hollow_sphere(radius: f64, spacing: f64, pad: f64) -> SplatModel {
    let count =
        (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).ceil() as usize;
    let mut g: Vec<Gaussian> = fibonacci_sphere(count)
        .into_iter()
        .map(|n| wall_particle(n * radius, spacing))
        .collect();
    add_anchors(&mut g, radius + pad);
    SplatModel::new(g)
}

/// Two nearly transparent specks at opposite corners.
fn add_anchors(g: &mut Vec<Gaussian>, reach: f64) {
    for s in [-reach, reach] {
        g.push(Gaussian::isotropic(
            Vec3::repeat(s),
            1e-4 * reach,
            Vec3::zeros(),
            1e-6,
        ));
    }
}

/// Random particles in `[-1, 1]³` with varied shapes, colors and opacity.
pub fn random_scene(n: usize, seed: u64) -> SplatModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let position = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let scale = Vec3::from_fn(|_, _| rng.gen_range(0.02..0.15));
            let axis = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let rotation = UnitQuaternion::from_scaled_axis(axis * 1.5);
            Gaussian {
                position,
                scale,
                rotation,
                color: Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
                opacity: rng.gen_range(0.05..0.99),
                trained: true,
            }
        })
        .collect();
    SplatModel::new(gaussians)
}
