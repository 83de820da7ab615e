//! Independent reference implementations used as test oracles.
//!
//! Apart from `fd`, nothing here calls into the code paths it checks:
//! projection, footprint, compositing, SSIM, voxel scans and smoothing are
//! all written out longhand.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod fd;

use splat_interior::imaging::ColorImage;
use splat_interior::render::Camera;
use splat_interior::splat::{SplatModel, Vec3};

type M3 = [[f64; 3]; 3];

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                r[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    r
}

fn transpose(a: &M3) -> M3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> M3 {
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// World covariance `R S Sᵀ Rᵀ` of particle `i`.
pub fn covariance(model: &SplatModel, i: usize) -> M3 {
    let g = &model.gaussians[i];
    let q = g.rotation.quaternion();
    let r = quat_matrix(q.w, q.i, q.j, q.k);
    let mut rs = r;
    for row in rs.iter_mut() {
        for k in 0..3 {
            row[k] *= g.scale[k];
        }
    }
    mat_mul(&rs, &transpose(&rs))
}

fn invert3(m: &M3) -> M3 {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            r[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    r
}

/// Unculled opacity field `Σ σ_p exp(−½ dᵀ Σ⁻¹ d)`.
pub fn field_sum(model: &SplatModel, x: &Vec3) -> f64 {
    (0..model.len())
        .map(|i| {
            let g = &model.gaussians[i];
            let inv = invert3(&covariance(model, i));
            let d = [x.x - g.position.x, x.y - g.position.y, x.z - g.position.z];
            let mut q = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    q += d[a] * inv[a][b] * d[b];
                }
            }
            g.opacity * (-0.5 * q).exp()
        })
        .sum()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Per-pixel compositor over every selected particle: no tiles, no
/// footprint cutoff, no early termination. Returns row-major RGB.
pub fn brute_render(
    model: &SplatModel,
    cam: &Camera,
    keep: impl Fn(usize) -> bool,
    background: [f64; 3],
    lowpass: f64,
) -> Vec<f64> {
    let v3 = |v: &Vec3| [v.x, v.y, v.z];
    let pos = v3(&cam.position);
    let fwd = unit([
        cam.look_at.x - pos[0],
        cam.look_at.y - pos[1],
        cam.look_at.z - pos[2],
    ]);
    let right = unit(cross(fwd, v3(&cam.up)));
    let down = cross(fwd, right);
    let view: M3 = [right, down, fwd];
    let f = 0.5 * cam.height as f64 / (0.5 * cam.vertical_fov).tan();
    let (w, h) = (cam.width, cam.height);

    struct Proj {
        index: usize,
        depth: f64,
        mean: [f64; 2],
        inv: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    }
    let mut projs = Vec::new();
    for i in 0..model.len() {
        if !keep(i) {
            continue;
        }
        let g = &model.gaussians[i];
        let d = [
            g.position.x - pos[0],
            g.position.y - pos[1],
            g.position.z - pos[2],
        ];
        let t = [dot(right, d), dot(down, d), dot(fwd, d)];
        if t[2] <= cam.near || t[2] >= cam.far {
            continue;
        }
        let j: [[f64; 3]; 2] = [
            [f / t[2], 0.0, -f * t[0] / (t[2] * t[2])],
            [0.0, f / t[2], -f * t[1] / (t[2] * t[2])],
        ];
        let cw = covariance(model, i);
        let cv = mat_mul(&mat_mul(&view, &cw), &transpose(&view));
        let mut c2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        c2[a][b] += j[a][k] * cv[k][l] * j[b][l];
                    }
                }
            }
        }
        c2[0][0] += lowpass;
        c2[1][1] += lowpass;
        let det = c2[0][0] * c2[1][1] - c2[0][1] * c2[1][0];
        if det <= 0.0 {
            continue;
        }
        projs.push(Proj {
            index: i,
            depth: t[2],
            mean: [
                f * t[0] / t[2] + 0.5 * w as f64,
                f * t[1] / t[2] + 0.5 * h as f64,
            ],
            inv: [c2[1][1] / det, -c2[0][1] / det, c2[0][0] / det],
            opacity: g.opacity,
            color: [g.color.x, g.color.y, g.color.z],
        });
    }
    projs.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });

    let mut out = vec![0.0; w * h * 3];
    for py in 0..h {
        for px in 0..w {
            let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for p in &projs {
                let dx = u - p.mean[0];
                let dy = v - p.mean[1];
                let q = p.inv[0] * dx * dx + 2.0 * p.inv[1] * dx * dy + p.inv[2] * dy * dy;
                let s = p.opacity * (-0.5 * q).exp();
                for k in 0..3 {
                    c[k] += s * t * p.color[k];
                }
                t *= 1.0 - s;
            }
            for k in 0..3 {
                out[(py * w + px) * 3 + k] = c[k] + t * background[k];
            }
        }
    }
    out
}

pub fn naive_mse(a: &ColorImage, b: &ColorImage) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height {
        for x in 0..a.width {
            for k in 0..3 {
                let d = a.get(x, y)[k] - b.get(x, y)[k];
                s += d * d;
            }
        }
    }
    s / (a.width * a.height * 3) as f64
}

/// Mean SSIM over every full 11×11 window and channel, with the window
/// statistics summed directly.
pub fn naive_ssim(a: &ColorImage, b: &ColorImage) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut win = [[0.0; N]; N];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..3 {
        for y0 in 0..=a.height - N {
            for x0 in 0..=a.width - N {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let wgt = win[i][j] / total;
                        ma += wgt * a.get(x0 + j, y0 + i)[k];
                        mb += wgt * b.get(x0 + j, y0 + i)[k];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let wgt = win[i][j] / total;
                        let da = a.get(x0 + j, y0 + i)[k] - ma;
                        let db = b.get(x0 + j, y0 + i)[k] - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Low cells with a high cell somewhere along each of the six axis rays.
pub fn six_ray_oracle(res: [usize; 3], values: &[f64], th: f64) -> Vec<usize> {
    let idx = |x: usize, y: usize, z: usize| x + res[0] * (y + res[1] * z);
    let mut out = Vec::new();
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                if values[idx(x, y, z)] >= th {
                    continue;
                }
                let hit = |dx: i64, dy: i64, dz: i64| {
                    let (mut cx, mut cy, mut cz) = (x as i64, y as i64, z as i64);
                    loop {
                        cx += dx;
                        cy += dy;
                        cz += dz;
                        if cx < 0
                            || cy < 0
                            || cz < 0
                            || cx >= res[0] as i64
                            || cy >= res[1] as i64
                            || cz >= res[2] as i64
                        {
                            return false;
                        }
                        if values[idx(cx as usize, cy as usize, cz as usize)] >= th {
                            return true;
                        }
                    }
                };
                if hit(1, 0, 0)
                    && hit(-1, 0, 0)
                    && hit(0, 1, 0)
                    && hit(0, -1, 0)
                    && hit(0, 0, 1)
                    && hit(0, 0, -1)
                {
                    out.push(idx(x, y, z));
                }
            }
        }
    }
    out
}

/// Low cells not 6-connected through low cells to the grid boundary.
pub fn enclosed_by_flood_fill(res: [usize; 3], values: &[f64], th: f64) -> Vec<usize> {
    let n = res[0] * res[1] * res[2];
    let idx = |x: usize, y: usize, z: usize| x + res[0] * (y + res[1] * z);
    let mut outside = vec![false; n];
    let mut stack = Vec::new();
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                let border = x == 0
                    || y == 0
                    || z == 0
                    || x == res[0] - 1
                    || y == res[1] - 1
                    || z == res[2] - 1;
                let i = idx(x, y, z);
                if border && values[i] < th {
                    outside[i] = true;
                    stack.push((x, y, z));
                }
            }
        }
    }
    while let Some((x, y, z)) = stack.pop() {
        let mut nb = Vec::new();
        if x > 0 {
            nb.push((x - 1, y, z));
        }
        if y > 0 {
            nb.push((x, y - 1, z));
        }
        if z > 0 {
            nb.push((x, y, z - 1));
        }
        if x + 1 < res[0] {
            nb.push((x + 1, y, z));
        }
        if y + 1 < res[1] {
            nb.push((x, y + 1, z));
        }
        if z + 1 < res[2] {
            nb.push((x, y, z + 1));
        }
        for (a, b, c) in nb {
            let i = idx(a, b, c);
            if !outside[i] && values[i] < th {
                outside[i] = true;
                stack.push((a, b, c));
            }
        }
    }
    (0..n).filter(|&i| values[i] < th && !outside[i]).collect()
}

/// Voxel coordinates of `p` in a `res³` grid spanning the model bbox.
fn voxel(model: &SplatModel, res: usize, p: &Vec3) -> [i64; 3] {
    let b = model.bbox();
    let mut c = [0i64; 3];
    for k in 0..3 {
        let cell = (b.max[k] - b.min[k]) / res as f64;
        c[k] = (((p[k] - b.min[k]) / cell).floor() as i64).clamp(0, res as i64 - 1);
    }
    c
}

/// Inverse-distance average of trained colors in the same voxel, or in the
/// 27-voxel block around it when `fallback` is set and the voxel has none.
/// Untrained particles with no source keep their color.
pub fn naive_smooth(model: &SplatModel, res: usize, fallback: bool) -> Vec<Vec3> {
    (0..model.len())
        .map(|i| naive_smooth_one(model, res, fallback, i))
        .collect()
}

/// The smoothed color of particle `i` alone.
pub fn naive_smooth_one(model: &SplatModel, res: usize, fallback: bool, i: usize) -> Vec3 {
    let g = &model.gaussians[i];
    if g.trained {
        return g.color;
    }
    let delta = 1e-9 * model.extent();
    let home = voxel(model, res, &g.position);
    let average = |reach: i64| {
        let mut num = Vec3::zeros();
        let mut den = 0.0;
        for h in &model.gaussians {
            if !h.trained {
                continue;
            }
            let c = voxel(model, res, &h.position);
            if (0..3).all(|k| (c[k] - home[k]).abs() <= reach) {
                let w = 1.0 / (h.position - g.position).norm().max(delta);
                num += h.color * w;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    };
    average(0)
        .or_else(|| if fallback { average(1) } else { None })
        .unwrap_or(g.color)
}

/// Largest absolute difference between two equally long slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
