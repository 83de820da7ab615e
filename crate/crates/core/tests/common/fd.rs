//! Central finite differences of the reconstruction loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat_interior::fixtures::random_scene;
use splat_interior::imaging::ColorImage;
use splat_interior::loss::recon_loss;
use splat_interior::render::{
    bounding_radius, random_direction, render, Camera, ViewConfig, VisibilityMask,
};
use splat_interior::splat::{SplatModel, Vec3};
use splat_interior::train::color_gradients;

const H: f64 = 1e-4;

fn loss_at(model: &SplatModel, cam: &Camera, reference: &ColorImage, alpha: f64, bg: Vec3) -> f64 {
    let out = render(model, cam, &VisibilityMask::All, bg).unwrap();
    recon_loss(&out.rgb, reference, alpha).unwrap()
}

/// Worst relative error over components that are not zero. Panics when a
/// component with no blend weight has a nonzero difference quotient, or a
/// tiny component disagrees in absolute terms.
pub fn check_fixture(seed: u64, alpha: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = random_scene(20, seed);
    for g in &mut model.gaussians {
        g.scale *= 3.0;
        // keep every perturbed color away from any clamp
        g.color = g.color.map(|c| 0.1 + 0.8 * c);
    }
    let cam = Camera::orbit(
        &model.bbox().center(),
        bounding_radius(&model),
        &random_direction(&mut rng),
        &ViewConfig::square(16),
    );
    let reference =
        ColorImage::from_fn(16, 16, |_, _| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0)));
    let bg = Vec3::new(0.1, 0.2, 0.3);
    let (_, grad) =
        color_gradients(&model, &cam, &VisibilityMask::All, &reference, alpha, bg).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.len() {
        for k in 0..3 {
            let mut plus = model.clone();
            plus.gaussians[i].color[k] += H;
            let mut minus = model.clone();
            minus.gaussians[i].color[k] -= H;
            let fd = (loss_at(&plus, &cam, &reference, alpha, bg)
                - loss_at(&minus, &cam, &reference, alpha, bg))
                / (2.0 * H);
            let a = grad[i][k];
            if a == 0.0 {
                assert_eq!(
                    fd, 0.0,
                    "particle {i} channel {k} has no weight but fd {fd}"
                );
                continue;
            }
            if a.abs() < 1e-8 {
                assert!((a - fd).abs() < 1e-10, "tiny component {a} vs {fd}");
                continue;
            }
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
        }
    }
    worst
}
