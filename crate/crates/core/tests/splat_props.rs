use nalgebra::UnitQuaternion;
use proptest::prelude::*;
use splat_interior::fixtures::random_scene;
use splat_interior::meta::{load_model, save_model};
use splat_interior::ply::{export_ply, import_ply};
use splat_interior::splat::{
    apply_opaque_atom, opaque_atom_violation, Gaussian, OpaqueAtomConfig, SplatModel, Vec3,
};

fn arb_gaussian() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-50.0f32..50.0),
        prop::array::uniform3(-8.0f64..1.0),
        prop::array::uniform3(-3.0f64..3.0),
        prop::array::uniform3(0.0f64..=1.0),
        0.001f64..0.999,
    )
        .prop_map(|(p, ls, axis, c, o)| Gaussian {
            position: Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64),
            scale: Vec3::new(ls[0].exp(), ls[1].exp(), ls[2].exp()),
            rotation: UnitQuaternion::from_scaled_axis(Vec3::from(axis)),
            color: Vec3::from(c),
            opacity: o,
            trained: true,
        })
}

fn arb_model() -> impl Strategy<Value = SplatModel> {
    prop::collection::vec(arb_gaussian(), 1..60).prop_map(SplatModel::new)
}

fn assert_close(a: &SplatModel, b: &SplatModel, tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.gaussians.iter().zip(&b.gaussians) {
        assert!((x.scale - y.scale).amax() <= tol * x.scale.amax().max(1.0));
        assert!((x.opacity - y.opacity).abs() <= tol);
        assert!((x.color - y.color).amax() <= tol);
        // q and -q are the same rotation
        assert!(x.rotation.angle_to(&y.rotation) <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ply_round_trip(m in arb_model()) {
        let back = import_ply(&export_ply(&m)).unwrap();
        for (a, b) in m.gaussians.iter().zip(&back.gaussians) {
            prop_assert_eq!(a.position, b.position);
        }
        assert_close(&m, &back, 1e-6);
        let bytes = export_ply(&back);
        let again = import_ply(&bytes).unwrap();
        assert_close(&back, &again, 1e-5);
        prop_assert!(export_ply(&again) == bytes, "second export differs");
        prop_assert_eq!(back.bbox(), m.bbox());
    }

    #[test]
    fn opaque_atom_is_idempotent_and_exact(m in arb_model(), frac in 1e-5f64..0.5) {
        let cfg = OpaqueAtomConfig { atom_cap_fraction: frac, enforce_opacity: true };
        let once = apply_opaque_atom(&m, &cfg);
        let twice = apply_opaque_atom(&once, &cfg);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(opaque_atom_violation(&once, &cfg), None);
        let cap = frac * m.extent();
        for g in &once.gaussians {
            prop_assert!(cap == 0.0 || g.scale.max() <= cap);
            prop_assert_eq!(g.opacity, 1.0);
        }
    }

    #[test]
    fn opaque_atom_is_per_particle(m in arb_model(), k in 0usize..60) {
        let cfg = OpaqueAtomConfig::default();
        let k = k % m.len();
        let mut reversed = m.clone();
        reversed.gaussians.reverse();
        let a = apply_opaque_atom(&m, &cfg);
        let mut b = apply_opaque_atom(&reversed, &cfg);
        b.gaussians.reverse();
        prop_assert_eq!(&a.gaussians[k], &b.gaussians[k]);
    }
}

#[test]
fn large_random_round_trip() {
    let m = random_scene(1000, 42);
    let back = import_ply(&export_ply(&m)).unwrap();
    for (a, b) in m.gaussians.iter().zip(&back.gaussians) {
        assert!((a.position - b.position).amax() < 1e-5);
        assert!((a.scale - b.scale).amax() < 1e-5);
        assert!((a.color - b.color).amax() < 1e-5);
        assert!((a.opacity - b.opacity).abs() < 1e-5);
    }
}

#[test]
fn opaque_atom_examples() {
    let mut a = Gaussian::isotropic(Vec3::zeros(), 0.01, Vec3::repeat(0.5), 0.3);
    a.scale = Vec3::new(0.01, 0.0001, 0.002);
    let b = Gaussian::isotropic(Vec3::new(3.0, 0.0, 0.0), 0.0005, Vec3::repeat(0.5), 0.9);
    let m = SplatModel::new(vec![a, b]);
    assert_eq!(m.extent(), 3.0);
    let out = apply_opaque_atom(&m, &OpaqueAtomConfig::default());
    assert!((out.gaussians[0].scale - Vec3::new(0.001, 0.0001, 0.001)).amax() < 1e-15);
    assert_eq!(out.gaussians[0].opacity, 1.0);
    assert_eq!(out.gaussians[1].scale, Vec3::repeat(0.0005));
}

#[test]
fn metadata_keeps_flags_and_fill_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ply");
    let mut m = random_scene(37, 5);
    for (i, g) in m.gaussians.iter_mut().enumerate() {
        g.trained = i % 3 == 0;
    }
    m.filled_range = Some(10..37);
    save_model(&path, &m).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.trained_flags(), m.trained_flags());
    assert_eq!(back.filled_range, Some(10..37));
    assert!(dir.path().join("m.meta.json").exists());
}
