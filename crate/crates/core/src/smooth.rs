//! Inverse-distance recoloring of untrained particles from trained particles
//! in the same voxel:
//!
//! ```text
//! C = Σ w_i C_i / Σ w_i,   w_i = 1 / max(d_i, δ)
//! ```
//!
//! Untrained particles never feed an average, so a second pass over an
//! unchanged trained set is a no-op.

use serde::{Deserialize, Serialize};

use crate::fill::VoxelGrid;
use crate::par;
use crate::splat::{SplatModel, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothConfig {
    pub grid_resolution: usize,
    /// Warn when one voxel holds more than this fraction of all particles.
    pub max_voxel_fraction: f64,
    /// Fall back to the 26 surrounding voxels when a particle's own voxel
    /// holds no trained particle.
    pub neighbor_fallback: bool,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 128,
            max_voxel_fraction: 0.01,
            neighbor_fallback: false,
        }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.grid_resolution < 2 {
            return Err(format!("grid_resolution {} < 2", self.grid_resolution));
        }
        if !(self.max_voxel_fraction > 0.0) {
            return Err("max_voxel_fraction must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothReport {
    pub recolored: usize,
    /// Recolored from neighboring voxels rather than their own.
    pub from_neighbors: usize,
    /// Untrained particles left as they were.
    pub isolated: usize,
    pub max_voxel_occupancy: usize,
    pub occupancy_ok: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UntrainedReport {
    pub trained: usize,
    pub untrained: usize,
    pub untrained_isolated: usize,
}

/// Particles bucketed by voxel, trained ones only, ascending index.
struct Buckets {
    grid: VoxelGrid,
    cell: Vec<u32>,
    offsets: Vec<usize>,
    trained: Vec<u32>,
    max_occupancy: usize,
}

impl Buckets {
    fn new(model: &SplatModel, resolution: usize) -> Self {
        let mut grid = VoxelGrid::covering(model.bbox(), [resolution; 3]);
        grid.values = Vec::new();
        let n = resolution.pow(3);
        let cell: Vec<u32> = par::map_slice(&model.gaussians, |g| {
            let c = grid.cell_of(&g.position).unwrap_or_else(|| {
                // outside a stale bbox: clamp to the nearest cell
                let q = Vec3::from_fn(|k, _| {
                    ((g.position[k] - grid.origin[k]) / grid.cell_size[k])
                        .clamp(0.0, (resolution - 1) as f64)
                });
                grid.index(q.x as usize, q.y as usize, q.z as usize)
            });
            c as u32
        });
        let mut all = vec![0usize; n];
        let mut offsets = vec![0usize; n + 1];
        for (c, g) in cell.iter().zip(&model.gaussians) {
            all[*c as usize] += 1;
            if g.trained {
                offsets[*c as usize + 1] += 1;
            }
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut trained = vec![0u32; offsets[n]];
        for (i, (c, g)) in cell.iter().zip(&model.gaussians).enumerate() {
            if g.trained {
                trained[fill[*c as usize]] = i as u32;
                fill[*c as usize] += 1;
            }
        }
        Self {
            grid,
            cell,
            offsets,
            trained,
            max_occupancy: all.into_iter().max().unwrap_or(0),
        }
    }

    fn trained_in(&self, cell: usize) -> &[u32] {
        &self.trained[self.offsets[cell]..self.offsets[cell + 1]]
    }

    /// The cell itself followed by its existing neighbors, z then y then x.
    fn neighborhood(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let [x, y, z] = self.grid.coords(cell);
        let r = self.grid.resolution;
        let near = move |c: usize, n: usize| c.saturating_sub(1)..=(c + 1).min(n - 1);
        std::iter::once(cell).chain(near(z, r[2]).flat_map(move |zz| {
            near(y, r[1]).flat_map(move |yy| {
                near(x, r[0])
                    .map(move |xx| self.grid.index(xx, yy, zz))
                    .filter(move |&c| c != cell)
            })
        }))
    }

    fn has_trained_near(&self, cell: usize, fallback: bool) -> bool {
        if fallback {
            self.neighborhood(cell)
                .any(|c| !self.trained_in(c).is_empty())
        } else {
            !self.trained_in(cell).is_empty()
        }
    }
}

fn idw(
    model: &SplatModel,
    p: &Vec3,
    sources: impl Iterator<Item = u32>,
    delta: f64,
) -> Option<Vec3> {
    let mut acc = Vec3::zeros();
    let mut wsum = 0.0;
    for j in sources {
        let g = &model.gaussians[j as usize];
        let w = 1.0 / (g.position - p).norm().max(delta);
        acc += g.color * w;
        wsum += w;
    }
    (wsum > 0.0).then(|| acc / wsum)
}

pub fn smooth(model: &SplatModel, cfg: &SmoothConfig) -> (SplatModel, SmoothReport) {
    let mut out = model.clone();
    let report = smooth_in_place(&mut out, cfg);
    (out, report)
}

pub fn smooth_in_place(model: &mut SplatModel, cfg: &SmoothConfig) -> SmoothReport {
    let mut report = SmoothReport {
        occupancy_ok: true,
        ..Default::default()
    };
    if model.is_empty() {
        return report;
    }
    let b = Buckets::new(model, cfg.grid_resolution.max(2));
    report.max_voxel_occupancy = b.max_occupancy;
    let frac = b.max_occupancy as f64 / model.len() as f64;
    if frac > cfg.max_voxel_fraction {
        report.occupancy_ok = false;
        log::warn!(
            "densest voxel holds {:.3}% of particles (limit {:.3}%); raise the smoothing resolution",
            100.0 * frac,
            100.0 * cfg.max_voxel_fraction
        );
    }
    let delta = 1e-9 * model.extent();
    let untrained: Vec<usize> = (0..model.len())
        .filter(|&i| !model.gaussians[i].trained)
        .collect();
    let shared: &SplatModel = model;
    let colors: Vec<(Option<Vec3>, bool)> = par::map_slice(&untrained, |&i| {
        let p = shared.gaussians[i].position;
        let cell = b.cell[i] as usize;
        if let Some(c) = idw(shared, &p, b.trained_in(cell).iter().copied(), delta) {
            return (Some(c), false);
        }
        if cfg.neighbor_fallback {
            let sources = b
                .neighborhood(cell)
                .flat_map(|c| b.trained_in(c).iter().copied());
            return (idw(shared, &p, sources, delta), true);
        }
        (None, false)
    });
    for (&i, (c, from_neighbors)) in untrained.iter().zip(colors) {
        match c {
            Some(c) => {
                model.gaussians[i].color = c;
                report.recolored += 1;
                report.from_neighbors += from_neighbors as usize;
            }
            None => report.isolated += 1,
        }
    }
    report
}

/// Counts trained and untrained particles; an untrained particle is isolated
/// when no trained particle shares its voxel (or, with the fallback enabled,
/// its 27-voxel neighborhood).
pub fn untrained_report(model: &SplatModel, cfg: &SmoothConfig) -> UntrainedReport {
    let trained = model.gaussians.iter().filter(|g| g.trained).count();
    let mut r = UntrainedReport {
        trained,
        untrained: model.len() - trained,
        untrained_isolated: 0,
    };
    if r.untrained == 0 {
        return r;
    }
    let b = Buckets::new(model, cfg.grid_resolution.max(2));
    r.untrained_isolated = model
        .gaussians
        .iter()
        .zip(&b.cell)
        .filter(|(g, &c)| !g.trained && !b.has_trained_near(c as usize, cfg.neighbor_fallback))
        .count();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;

    fn particle(x: f64, color: Vec3, trained: bool) -> Gaussian {
        let mut g = Gaussian::isotropic(Vec3::new(x, 0.0, 0.0), 0.01, color, 1.0);
        g.trained = trained;
        g
    }

    /// Corner particles pin the bbox to [0, 8]^3 so the voxels are unit
    /// cells at resolution 8.
    fn with_corners(mut v: Vec<Gaussian>) -> SplatModel {
        v.push(particle(0.0, Vec3::zeros(), true));
        let mut far = particle(8.0, Vec3::zeros(), true);
        far.position = Vec3::repeat(8.0);
        v.push(far);
        SplatModel::new(v)
    }

    fn cfg() -> SmoothConfig {
        SmoothConfig {
            grid_resolution: 8,
            max_voxel_fraction: 1.0,
            neighbor_fallback: false,
        }
    }

    #[test]
    fn equidistant_average() {
        let m = with_corners(vec![
            particle(4.5, Vec3::repeat(0.5), false),
            particle(4.2, Vec3::new(1.0, 0.0, 0.0), true),
            particle(4.8, Vec3::new(0.0, 0.0, 1.0), true),
        ]);
        let (out, rep) = smooth(&m, &cfg());
        assert!((out.gaussians[0].color - Vec3::new(0.5, 0.0, 0.5)).norm() < 1e-12);
        assert_eq!(rep.recolored, 1);
    }

    #[test]
    fn inverse_distance_weights() {
        let m = with_corners(vec![
            particle(4.1, Vec3::repeat(0.5), false),
            particle(4.2, Vec3::new(1.0, 0.0, 0.0), true),
            particle(4.3, Vec3::new(0.0, 0.0, 1.0), true),
        ]);
        let (out, _) = smooth(&m, &cfg());
        assert!((out.gaussians[0].color - Vec3::new(2.0 / 3.0, 0.0, 1.0 / 3.0)).norm() < 1e-9);
    }

    #[test]
    fn isolated_particles_need_the_fallback() {
        let m = with_corners(vec![
            particle(2.5, Vec3::repeat(0.5), false),
            particle(3.5, Vec3::new(1.0, 0.0, 0.0), true),
        ]);
        let (out, rep) = smooth(&m, &cfg());
        assert_eq!(rep.isolated, 1);
        assert_eq!(out.gaussians[0].color, Vec3::repeat(0.5));
        assert_eq!(untrained_report(&m, &cfg()).untrained_isolated, 1);

        let fb = SmoothConfig {
            neighbor_fallback: true,
            ..cfg()
        };
        let (out, rep) = smooth(&m, &fb);
        assert_eq!((rep.isolated, rep.from_neighbors), (0, 1));
        assert_eq!(out.gaussians[0].color, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(untrained_report(&m, &fb).untrained_isolated, 0);
    }

    #[test]
    fn counts_and_flags_survive() {
        let m = with_corners(vec![
            particle(4.5, Vec3::repeat(0.5), false),
            particle(4.6, Vec3::repeat(0.1), true),
        ]);
        let before = untrained_report(&m, &cfg());
        assert_eq!(
            before,
            UntrainedReport {
                trained: 3,
                untrained: 1,
                untrained_isolated: 0
            }
        );
        let (out, _) = smooth(&m, &cfg());
        assert_eq!(untrained_report(&out, &cfg()), before);
        assert_eq!(out.trained_flags(), m.trained_flags());
    }

    #[test]
    fn crowded_voxel_is_reported() {
        let m = with_corners(vec![particle(4.5, Vec3::zeros(), true); 10]);
        let rep = smooth(
            &m,
            &SmoothConfig {
                max_voxel_fraction: 0.01,
                ..cfg()
            },
        )
        .1;
        assert!(!rep.occupancy_ok);
        assert_eq!(rep.max_voxel_occupancy, 10);
    }
}
