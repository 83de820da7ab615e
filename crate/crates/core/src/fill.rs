//! Interior filling: discretize the summed Gaussian opacity field onto a
//! grid, find enclosed low-opacity cells with axis-aligned ray scans, and
//! seed them with small isotropic particles.

use std::io::{Read, Write};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::splat::{Aabb, Gaussian, SplatModel, Vec3};

/// Particles are ignored beyond this many standard deviations (measured with
/// the largest axis). `3√3` is the circumradius of the 3σ box, so the
/// truncation never exceeds `exp(-13.5)` per particle.
pub const CULL_SIGMAS: f64 = 5.196_152_422_706_632;

/// Scales below this fraction of the extent make the covariance singular.
const DEGENERATE_SCALE_FRACTION: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FillError {
    #[error("particle {index} has a degenerate covariance (scale {scale:e})")]
    DegenerateCovariance { index: usize, scale: f64 },
    #[error("model has no particles")]
    EmptyModel,
    #[error("invalid fill config: {0}")]
    Config(String),
    #[error("grid dump: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FillConfig {
    /// Cells per axis.
    pub grid_resolution: usize,
    /// Cells with opacity below this are candidates for filling.
    pub sigma_th: f64,
    pub particles_per_voxel: usize,
    pub init_color: [f64; 3],
    /// Upper bound on new particle scale as a fraction of the model extent.
    pub init_scale_cap_fraction: f64,
    pub rng_seed: u64,
    /// How many of the six axis rays must hit high opacity.
    pub ray_axes_required: usize,
    /// Leave flagged cells alone when they already hold a particle.
    pub skip_occupied: bool,
}

impl Default for FillConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 64,
            sigma_th: 0.1,
            particles_per_voxel: 8,
            init_color: [0.5, 0.5, 0.5],
            init_scale_cap_fraction: 1e-3,
            rng_seed: 0,
            ray_axes_required: 6,
            skip_occupied: true,
        }
    }
}

impl FillConfig {
    pub fn validate(&self) -> Result<(), FillError> {
        let bad = |m: &str| Err(FillError::Config(m.to_string()));
        if self.grid_resolution < 1 {
            return bad("grid_resolution must be at least 1");
        }
        if !(self.sigma_th > 0.0) {
            return bad("sigma_th must be positive");
        }
        if self.particles_per_voxel < 1 {
            return bad("particles_per_voxel must be at least 1");
        }
        if !(1..=6).contains(&self.ray_axes_required) {
            return bad("ray_axes_required must be between 1 and 6");
        }
        if !(self.init_scale_cap_fraction > 0.0) {
            return bad("init_scale_cap_fraction must be positive");
        }
        Ok(())
    }
}

/// Regular scalar grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: [usize; 3],
    pub origin: Vec3,
    pub cell_size: Vec3,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    /// Zero grid covering `bbox` exactly. Flat axes get the cell size of the
    /// longest axis so every cell has positive size.
    pub fn covering(bbox: &Aabb, resolution: [usize; 3]) -> Self {
        let size = bbox.size();
        let fallback = (bbox.extent() / resolution.iter().copied().max().unwrap_or(1) as f64)
            .max(f64::MIN_POSITIVE);
        let cell_size = Vec3::from_fn(|k, _| {
            let c = size[k] / resolution[k] as f64;
            if c > 0.0 {
                c
            } else {
                fallback
            }
        });
        let n = resolution.iter().product();
        Self {
            resolution,
            origin: bbox.min,
            cell_size,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn cell_center(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        Vec3::from_fn(|k, _| self.origin[k] + (c[k] as f64 + 0.5) * self.cell_size[k])
    }

    pub fn cell_min(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        Vec3::from_fn(|k, _| self.origin[k] + c[k] as f64 * self.cell_size[k])
    }

    /// Cell holding `p`; points on the far faces belong to the last cell.
    pub fn cell_of(&self, p: &Vec3) -> Option<usize> {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let t = (p[k] - self.origin[k]) / self.cell_size[k];
            if !(t >= 0.0) {
                return None;
            }
            let i = t.floor() as usize;
            c[k] = if i >= self.resolution[k] {
                // allow the max face itself
                if t <= self.resolution[k] as f64 {
                    self.resolution[k] - 1
                } else {
                    return None;
                }
            } else {
                i
            };
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Flat binary dump: nine little-endian `f64` (resolution, origin,
    /// cell size) followed by `f32` values in x-fastest order.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in self.resolution {
            w.write_all(&(r as f64).to_le_bytes())?;
        }
        for v in self.origin.iter().chain(self.cell_size.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> std::io::Result<Self> {
        let mut head = [0f64; 9];
        let mut b8 = [0u8; 8];
        for h in &mut head {
            r.read_exact(&mut b8)?;
            *h = f64::from_le_bytes(b8);
        }
        let resolution = [head[0] as usize, head[1] as usize, head[2] as usize];
        let n: usize = resolution.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b4 = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            values.push(f32::from_le_bytes(b4) as f64);
        }
        Ok(Self {
            resolution,
            origin: Vec3::new(head[3], head[4], head[5]),
            cell_size: Vec3::new(head[6], head[7], head[8]),
            values,
        })
    }
}

struct FieldTerm {
    center: Vec3,
    precision: Matrix3<f64>,
    opacity: f64,
    radius: f64,
}

impl FieldTerm {
    fn eval(&self, x: &Vec3) -> f64 {
        let d = x - self.center;
        self.opacity * (-0.5 * d.dot(&(self.precision * d))).exp()
    }
}

/// The summed opacity field of a model with a uniform bucket index over the
/// particles' cull spheres.
pub struct OpacityField {
    terms: Vec<FieldTerm>,
    bucket_origin: Vec3,
    bucket_size: f64,
    bucket_res: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl OpacityField {
    pub fn new(model: &SplatModel) -> Result<Self, FillError> {
        let floor = DEGENERATE_SCALE_FRACTION * model.extent();
        let mut terms = Vec::with_capacity(model.len());
        for (index, g) in model.gaussians.iter().enumerate() {
            let min = g.scale.min();
            if !(min > floor) || !(min > 0.0) {
                return Err(FillError::DegenerateCovariance { index, scale: min });
            }
            let r = g.rotation_matrix();
            let inv_s2 = Matrix3::from_diagonal(&g.scale.map(|s| 1.0 / (s * s)));
            terms.push(FieldTerm {
                center: g.position,
                precision: r * inv_s2 * r.transpose(),
                opacity: g.opacity,
                radius: CULL_SIGMAS * g.max_scale(),
            });
        }

        let bbox = *model.bbox();
        let max_r = terms.iter().map(|t| t.radius).fold(0.0, f64::max);
        let lo = bbox.min - Vec3::repeat(max_r);
        let span = bbox.size() + Vec3::repeat(2.0 * max_r);
        // a bucket at least as large as the widest cull sphere keeps each
        // particle in at most eight buckets; cap the count for tiny particles
        let bucket_size = max_r.max(span.max() / 64.0).max(f64::MIN_POSITIVE);
        let bucket_res = [0, 1, 2].map(|k| ((span[k] / bucket_size).ceil() as usize).max(1));
        let mut buckets = vec![Vec::new(); bucket_res.iter().product()];
        let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        for (i, t) in terms.iter().enumerate() {
            let a = [0, 1, 2].map(|k| {
                clampi(
                    (t.center[k] - t.radius - lo[k]) / bucket_size,
                    bucket_res[k],
                )
            });
            let b = [0, 1, 2].map(|k| {
                clampi(
                    (t.center[k] + t.radius - lo[k]) / bucket_size,
                    bucket_res[k],
                )
            });
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        buckets[x + bucket_res[0] * (y + bucket_res[1] * z)].push(i as u32);
                    }
                }
            }
        }
        Ok(Self {
            terms,
            bucket_origin: lo,
            bucket_size,
            bucket_res,
            buckets,
        })
    }

    /// Culled field value at `x`.
    pub fn eval(&self, x: &Vec3) -> f64 {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let t = ((x[k] - self.bucket_origin[k]) / self.bucket_size).floor();
            if !(t >= 0.0) || t as usize >= self.bucket_res[k] {
                // outside every cull sphere
                return 0.0;
            }
            c[k] = t as usize;
        }
        let bucket = &self.buckets[c[0] + self.bucket_res[0] * (c[1] + self.bucket_res[1] * c[2])];
        let mut sum = 0.0;
        for &i in bucket {
            let t = &self.terms[i as usize];
            if (x - t.center).norm_squared() <= t.radius * t.radius {
                sum += t.eval(x);
            }
        }
        sum
    }
}

/// Opacity field at a single point.
pub fn opacity_field_eval(model: &SplatModel, x: &Vec3) -> Result<f64, FillError> {
    Ok(OpacityField::new(model)?.eval(x))
}

/// Field value at every cell center of a grid covering the model bounds.
pub fn discretize_opacity(model: &SplatModel, cfg: &FillConfig) -> Result<VoxelGrid, FillError> {
    if model.is_empty() {
        return Err(FillError::EmptyModel);
    }
    cfg.validate()?;
    let field = OpacityField::new(model)?;
    let mut grid = VoxelGrid::covering(model.bbox(), [cfg.grid_resolution; 3]);
    let template = grid.clone();
    par::for_each_mut(&mut grid.values, |i, v| {
        *v = field.eval(&template.cell_center(i))
    });
    Ok(grid)
}

/// Low cells that see a high cell along at least `ray_axes_required` of the
/// six axis directions before leaving the grid. Sorted by cell index.
pub fn detect_interior_voxels(grid: &VoxelGrid, cfg: &FillConfig) -> Vec<usize> {
    let [nx, ny, nz] = grid.resolution;
    let high: Vec<bool> = grid.values.iter().map(|&v| v >= cfg.sigma_th).collect();
    let mut hits = vec![0u8; grid.len()];

    // one pass per axis: a forward and a backward sweep along every line
    let lines: [(usize, usize, [usize; 3]); 3] = [
        (nx, 1, [ny, nz, 0]),
        (ny, nx, [nx, nz, 1]),
        (nz, nx * ny, [nx, ny, 2]),
    ];
    for (len, stride, [a, b, axis]) in lines {
        for j in 0..b {
            for i in 0..a {
                let base = match axis {
                    0 => nx * (i + ny * j),
                    1 => i + nx * ny * j,
                    _ => i + nx * j,
                };
                let mut seen = false;
                for s in 0..len {
                    let idx = base + s * stride;
                    if seen {
                        hits[idx] += 1;
                    }
                    seen |= high[idx];
                }
                seen = false;
                for s in (0..len).rev() {
                    let idx = base + s * stride;
                    if seen {
                        hits[idx] += 1;
                    }
                    seen |= high[idx];
                }
            }
        }
    }
    let need = cfg.ray_axes_required as u8;
    (0..grid.len())
        .filter(|&i| !high[i] && hits[i] >= need)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FillReport {
    pub flagged_voxels: usize,
    pub occupied_voxels_skipped: usize,
    pub appended: usize,
}

/// Seeds enclosed cells with `particles_per_voxel` raw particles each.
///
/// Existing particles keep their order and values; new ones are appended and
/// their index range recorded in `filled_range`.
pub fn fill_interior(
    model: &SplatModel,
    cfg: &FillConfig,
) -> Result<(SplatModel, FillReport), FillError> {
    let grid = discretize_opacity(model, cfg)?;
    let flagged = detect_interior_voxels(&grid, cfg);
    let mut report = FillReport {
        flagged_voxels: flagged.len(),
        ..Default::default()
    };

    let mut occupied = vec![false; grid.len()];
    if cfg.skip_occupied {
        for g in &model.gaussians {
            if let Some(c) = grid.cell_of(&g.position) {
                occupied[c] = true;
            }
        }
    }

    let cap = cfg.init_scale_cap_fraction * model.extent();
    let color = Vec3::from(cfg.init_color);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut fresh = Vec::new();
    for &cell in &flagged {
        if occupied[cell] {
            report.occupied_voxels_skipped += 1;
            continue;
        }
        let lo = grid.cell_min(cell);
        for _ in 0..cfg.particles_per_voxel {
            let u = Vec3::from_fn(|_, _| open_unit(&mut rng));
            let position = lo + u.component_mul(&grid.cell_size);
            // uniform in (0.2, 1.0] of the cap
            let scale = cap * (1.0 - 0.8 * rng.gen::<f64>());
            fresh.push(Gaussian::isotropic(position, scale, color, 1.0));
        }
    }

    if fresh.is_empty() {
        log::info!(
            "no enclosed empty voxels found ({} flagged, {} already occupied); model unchanged",
            report.flagged_voxels,
            report.occupied_voxels_skipped
        );
        return Ok((model.clone(), report));
    }

    let mut out = model.clone();
    let start = out.len();
    report.appended = fresh.len();
    out.gaussians.extend(fresh);
    let end = out.len();
    out.filled_range = Some(match &model.filled_range {
        Some(r) if r.end == start => r.start..end,
        _ => start..end,
    });
    // new particles lie inside existing cells, so the bounds do not move
    Ok((out, report))
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from(res: usize, high: impl Fn(usize, usize, usize) -> bool) -> VoxelGrid {
        let mut g = VoxelGrid::covering(
            &Aabb::new(Vec3::zeros(), Vec3::repeat(res as f64)),
            [res; 3],
        );
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    let i = g.index(x, y, z);
                    g.values[i] = if high(x, y, z) { 1.0 } else { 0.0 };
                }
            }
        }
        g
    }

    #[test]
    fn single_particle_field_values() {
        let m = SplatModel::new(vec![Gaussian::isotropic(
            Vec3::zeros(),
            0.2,
            Vec3::zeros(),
            0.8,
        )]);
        let f = OpacityField::new(&m).unwrap();
        assert!((f.eval(&Vec3::zeros()) - 0.8).abs() < 1e-15);
        let v = f.eval(&Vec3::new(0.2, 0.0, 0.0));
        assert!((v - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.4852).abs() < 1e-4);
    }

    #[test]
    fn degenerate_scale_names_particle() {
        let mut bad = Gaussian::isotropic(Vec3::new(1.0, 1.0, 1.0), 0.1, Vec3::zeros(), 1.0);
        bad.scale.y = 1e-14;
        let m = SplatModel::new(vec![
            Gaussian::isotropic(Vec3::zeros(), 0.1, Vec3::zeros(), 1.0),
            bad,
        ]);
        assert!(matches!(
            OpacityField::new(&m),
            Err(FillError::DegenerateCovariance { index: 1, .. })
        ));
    }

    #[test]
    fn solid_block_has_no_interior() {
        let g = grid_from(8, |_, _, _| true);
        assert!(detect_interior_voxels(&g, &FillConfig::default()).is_empty());
    }

    #[test]
    fn open_tube_axis_is_not_flagged() {
        let n = 9;
        // walls at x = 0, n-1 and y = 0, n-1; open along z
        let g = grid_from(n, |x, y, _| x == 0 || y == 0 || x == n - 1 || y == n - 1);
        let found = detect_interior_voxels(&g, &FillConfig::default());
        assert!(found.is_empty());
        let four = FillConfig {
            ray_axes_required: 4,
            ..Default::default()
        };
        assert!(detect_interior_voxels(&g, &four).contains(&g.index(4, 4, 4)));
    }

    #[test]
    fn grid_corner_centers_lie_in_bbox() {
        let b = Aabb::new(Vec3::new(-1.0, 0.0, 2.0), Vec3::new(1.0, 0.5, 3.0));
        let g = VoxelGrid::covering(&b, [5, 5, 5]);
        assert!(b.contains(&g.cell_center(0)));
        assert!(b.contains(&g.cell_center(g.len() - 1)));
        assert_eq!(g.cell_of(&b.max), Some(g.len() - 1));
        assert_eq!(g.cell_of(&b.min), Some(0));
    }

    #[test]
    fn dump_round_trips() {
        let g = grid_from(4, |x, y, z| (x + y + z) % 2 == 0);
        let mut buf = Vec::new();
        g.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 9 * 8 + 64 * 4);
        assert_eq!(VoxelGrid::read_dump(&buf[..]).unwrap(), g);
    }
}
