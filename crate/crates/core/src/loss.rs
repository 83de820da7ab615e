//! Reconstruction loss `α·MSE + (1 − α)·(1 − SSIM)` and its gradient with
//! respect to the rendered image.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) over valid positions only,
//! with C1 = 0.01² and C2 = 0.03², averaged over channels.

use thiserror::Error;

use crate::imaging::ColorImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("image sizes differ: {a:?} vs {b:?}")]
    SizeMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("image {width}x{height} is smaller than the {SSIM_WINDOW}px SSIM window")]
    TooSmall { width: usize, height: usize },
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
}

fn check(a: &ColorImage, b: &ColorImage) -> Result<(), LossError> {
    if a.width != b.width || a.height != b.height {
        return Err(LossError::SizeMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    Ok(())
}

fn check_ssim(a: &ColorImage, b: &ColorImage) -> Result<(), LossError> {
    check(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(LossError::TooSmall {
            width: a.width,
            height: a.height,
        });
    }
    Ok(())
}

pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64, LossError> {
    check(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g
                .iter()
                .zip(&line[x..x + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let r = &rows[(y + k) * ow..(y + k + 1) * ow];
            for x in 0..ow {
                out[y * ow + x] += gk * r[x];
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `w × h`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            for x in 0..ow {
                rows[(y + k) * ow + x] += gk * map[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (k, gk) in g.iter().enumerate() {
                out[y * w + x + k] += gk * v;
            }
        }
    }
    out
}

struct SsimChannel {
    mean: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> SsimChannel {
    let g = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &g);
    let my = filter_valid(y, w, h, &g);
    let sxx = filter_valid(&xx, w, h, &g);
    let syy = filter_valid(&yy, w, h, &g);
    let sxy = filter_valid(&xy, w, h, &g);
    let n = mx.len();
    let mut total = 0.0;
    let (mut da, mut db, mut dc) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let vx = sxx[p] - ux * ux;
        let vy = syy[p] - uy * uy;
        let cxy = sxy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            da[p] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            db[p] = s * 2.0 / a2;
            dc[p] = -s / b2;
        }
    }
    let grad = want_grad.then(|| {
        let ta = filter_adjoint(&da, w, h, &g);
        let tb = filter_adjoint(&db, w, h, &g);
        let tc = filter_adjoint(&dc, w, h, &g);
        (0..w * h)
            .map(|q| (ta[q] + y[q] * tb[q] + 2.0 * x[q] * tc[q]) / n as f64)
            .collect()
    });
    SsimChannel {
        mean: total / n as f64,
        grad,
    }
}

fn ssim_impl(a: &ColorImage, b: &ColorImage, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let mut mean = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    for c in 0..3 {
        let r = ssim_channel(&a.channel(c), &b.channel(c), a.width, a.height, want_grad);
        mean += r.mean / 3.0;
        if let (Some(g), Some(gc)) = (grad.as_mut(), r.grad) {
            for (p, v) in gc.into_iter().enumerate() {
                g[3 * p + c] = v / 3.0;
            }
        }
    }
    (mean, grad)
}

pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64, LossError> {
    check_ssim(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// SSIM and its gradient with respect to `a` (interleaved RGB).
pub fn ssim_with_grad(a: &ColorImage, b: &ColorImage) -> Result<(f64, Vec<f64>), LossError> {
    check_ssim(a, b)?;
    let (s, g) = ssim_impl(a, b, true);
    Ok((s, g.unwrap_or_default()))
}

fn check_alpha(alpha: f64) -> Result<(), LossError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(LossError::Alpha(alpha))
    }
}

pub fn recon_loss(
    rendered: &ColorImage,
    reference: &ColorImage,
    alpha: f64,
) -> Result<f64, LossError> {
    check_alpha(alpha)?;
    let m = mse(rendered, reference)?;
    if alpha == 1.0 {
        return Ok(m);
    }
    Ok(alpha * m + (1.0 - alpha) * (1.0 - ssim(rendered, reference)?))
}

/// Loss value and its gradient with respect to every rendered pixel channel.
pub fn recon_loss_grad(
    rendered: &ColorImage,
    reference: &ColorImage,
    alpha: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    check_alpha(alpha)?;
    let m = mse(rendered, reference)?;
    let n = rendered.data.len().max(1) as f64;
    let mut grad: Vec<f64> = rendered
        .data
        .iter()
        .zip(&reference.data)
        .map(|(x, y)| alpha * 2.0 * (x - y) / n)
        .collect();
    if alpha == 1.0 {
        return Ok((m, grad));
    }
    let (s, gs) = ssim_with_grad(rendered, reference)?;
    for (g, v) in grad.iter_mut().zip(gs) {
        *g -= (1.0 - alpha) * v;
    }
    Ok((alpha * m + (1.0 - alpha) * (1.0 - s), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Vec3;

    fn noise(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut s = seed;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        ColorImage::from_fn(w, h, |_, _| Vec3::new(next(), next(), next()))
    }

    #[test]
    fn mse_extremes() {
        let black = ColorImage::filled(4, 4, Vec3::zeros());
        let white = ColorImage::filled(4, 4, Vec3::repeat(1.0));
        assert_eq!(mse(&black, &white).unwrap(), 1.0);
        assert_eq!(mse(&white, &white).unwrap(), 0.0);
    }

    #[test]
    fn ssim_identity_and_shift() {
        let a = noise(20, 16, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.5);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn recon_loss_limits() {
        let a = noise(12, 12, 2);
        let b = noise(12, 12, 3);
        assert_eq!(recon_loss(&a, &a, 0.3).unwrap(), 0.0);
        assert_eq!(recon_loss(&a, &b, 1.0).unwrap(), mse(&a, &b).unwrap());
        assert!((recon_loss(&a, &b, 0.0).unwrap() - (1.0 - ssim(&a, &b).unwrap())).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = noise(12, 12, 2);
        let b = noise(13, 12, 3);
        assert!(matches!(mse(&a, &b), Err(LossError::SizeMismatch { .. })));
        let s = noise(10, 30, 2);
        assert!(matches!(ssim(&s, &s), Err(LossError::TooSmall { .. })));
        assert!(matches!(recon_loss(&a, &a, 1.5), Err(LossError::Alpha(_))));
    }

    #[test]
    fn adjoint_identity() {
        // <F x, m> == <x, F^T m>
        let (w, h) = (17, 14);
        let x = noise(w, h, 5).channel(0);
        let m = noise(w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW, 6).channel(1);
        let g = gaussian_taps();
        let lhs: f64 = filter_valid(&x, w, h, &g)
            .iter()
            .zip(&m)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(filter_adjoint(&m, w, h, &g))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
