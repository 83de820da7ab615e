//! Particle data model and the opaque-atom constraint regime.

use std::ops::Range;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// One Gaussian particle.
///
/// The covariance is kept factored as `R S Sᵀ Rᵀ`, with `scale` holding the
/// per-axis standard deviations and `rotation` the orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub scale: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub color: Vec3,
    pub opacity: f64,
    /// Set once any slice (or, for imported particles, any capture) has
    /// constrained this particle's color.
    pub trained: bool,
}

impl Gaussian {
    pub fn isotropic(position: Vec3, scale: f64, color: Vec3, opacity: f64) -> Self {
        Self {
            position,
            scale: Vec3::repeat(scale),
            rotation: UnitQuaternion::identity(),
            color,
            opacity,
            trained: false,
        }
    }

    /// Builds a rotation from raw `(w, x, y, z)` components, normalizing them.
    pub fn rotation_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Option<UnitQuaternion<f64>> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        // unit at f32 precision: keep the stored values
        if (n - 1.0).abs() < 1e-6 {
            return Some(UnitQuaternion::new_unchecked(q));
        }
        Some(UnitQuaternion::from_quaternion(q))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }

    /// Checks the field invariants, returning a description of the first
    /// violation.
    pub fn check(&self) -> Result<(), String> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err("position is not finite".into());
        }
        if !self.scale.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(format!(
                "scale {:?} must be finite and positive",
                self.scale.as_slice()
            ));
        }
        let n = self.rotation.quaternion().norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(format!("rotation norm {n} is not 1"));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0,1]", self.color.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0,1]", self.opacity));
        }
        Ok(())
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Self { min, max })
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_diagonal(&self) -> f64 {
        self.size().norm() * 0.5
    }

    /// Largest side length.
    pub fn extent(&self) -> f64 {
        self.size().max()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn strictly_contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }
}

/// An ordered set of particles plus bounds and fill provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatModel {
    pub gaussians: Vec<Gaussian>,
    bbox: Aabb,
    /// Index range of particles appended by interior filling, if any.
    pub filled_range: Option<Range<usize>>,
}

impl SplatModel {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let mut model = Self {
            gaussians,
            bbox: Aabb::new(Vec3::zeros(), Vec3::zeros()),
            filled_range: None,
        };
        model.refresh_bounds();
        model
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn extent(&self) -> f64 {
        self.bbox.extent()
    }

    /// Recomputes the bounding box after positions have been edited.
    pub fn refresh_bounds(&mut self) {
        self.bbox = Aabb::from_points(self.gaussians.iter().map(|g| &g.position))
            .unwrap_or(Aabb::new(Vec3::zeros(), Vec3::zeros()));
    }

    /// Appends particles, growing the bounds as needed.
    pub fn extend(&mut self, more: impl IntoIterator<Item = Gaussian>) {
        self.gaussians.extend(more);
        self.refresh_bounds();
    }

    pub fn is_filled(&self, index: usize) -> bool {
        self.filled_range
            .as_ref()
            .is_some_and(|r| r.contains(&index))
    }

    pub fn trained_flags(&self) -> Vec<bool> {
        self.gaussians.iter().map(|g| g.trained).collect()
    }

    /// Validates every particle, naming the first offending index.
    pub fn check(&self) -> Result<(), String> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.check().map_err(|e| format!("particle {i}: {e}"))?;
        }
        if let Some(i) = self
            .gaussians
            .iter()
            .position(|g| !self.bbox.contains(&g.position))
        {
            return Err(format!("particle {i} lies outside the bounding box"));
        }
        Ok(())
    }
}

/// Scale cap and opacity regime applied to every particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpaqueAtomConfig {
    /// Maximum per-axis scale as a fraction of the model extent.
    pub atom_cap_fraction: f64,
    pub enforce_opacity: bool,
}

impl Default for OpaqueAtomConfig {
    fn default() -> Self {
        Self {
            atom_cap_fraction: 1.0 / 3000.0,
            enforce_opacity: true,
        }
    }
}

impl OpaqueAtomConfig {
    pub fn scale_cap(&self, extent: f64) -> f64 {
        self.atom_cap_fraction * extent
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.atom_cap_fraction > 0.0 && self.atom_cap_fraction < 1.0) {
            return Err(format!(
                "atom_cap_fraction {} must lie in (0, 1)",
                self.atom_cap_fraction
            ));
        }
        Ok(())
    }
}

/// Clamps scales and opacities in place. Returns the number of particles
/// that changed.
pub fn enforce_opaque_atom(model: &mut SplatModel, cfg: &OpaqueAtomConfig) -> usize {
    let cap = cfg.scale_cap(model.extent());
    let mut changed = 0;
    for g in &mut model.gaussians {
        let before = (g.scale, g.opacity);
        // an extent of zero (single point) leaves nothing sensible to cap against
        if cap > 0.0 {
            g.scale = g.scale.map(|s| s.min(cap));
        }
        if cfg.enforce_opacity {
            g.opacity = 1.0;
        }
        if (g.scale, g.opacity) != before {
            changed += 1;
        }
    }
    changed
}

pub fn apply_opaque_atom(model: &SplatModel, cfg: &OpaqueAtomConfig) -> SplatModel {
    let mut out = model.clone();
    enforce_opaque_atom(&mut out, cfg);
    out
}

/// Returns the index of the first particle breaking the constraint, if any.
pub fn opaque_atom_violation(model: &SplatModel, cfg: &OpaqueAtomConfig) -> Option<usize> {
    let cap = cfg.scale_cap(model.extent());
    model.gaussians.iter().position(|g| {
        (cap > 0.0 && g.scale.iter().any(|&s| s > cap)) || (cfg.enforce_opacity && g.opacity != 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with_extent_three() -> SplatModel {
        let mut a = Gaussian::isotropic(Vec3::zeros(), 0.01, Vec3::repeat(0.5), 0.3);
        a.scale = Vec3::new(0.01, 0.0001, 0.002);
        let b = Gaussian::isotropic(Vec3::new(3.0, 1.0, 1.0), 0.0005, Vec3::repeat(0.5), 0.9);
        SplatModel::new(vec![a, b])
    }

    #[test]
    fn cap_clamps_each_axis() {
        let m = model_with_extent_three();
        assert_eq!(m.extent(), 3.0);
        let out = apply_opaque_atom(&m, &OpaqueAtomConfig::default());
        let s = out.gaussians[0].scale;
        assert!((s.x - 0.001).abs() < 1e-15);
        assert_eq!(s.y, 0.0001);
        assert!((s.z - 0.001).abs() < 1e-15);
        assert_eq!(out.gaussians[0].opacity, 1.0);
        assert!(opaque_atom_violation(&out, &OpaqueAtomConfig::default()).is_none());
    }

    #[test]
    fn opaque_atom_is_idempotent() {
        let cfg = OpaqueAtomConfig::default();
        let once = apply_opaque_atom(&model_with_extent_three(), &cfg);
        let twice = apply_opaque_atom(&once, &cfg);
        assert_eq!(once, twice);
    }

    #[test]
    fn opacity_can_be_left_alone() {
        let cfg = OpaqueAtomConfig {
            enforce_opacity: false,
            ..Default::default()
        };
        let out = apply_opaque_atom(&model_with_extent_three(), &cfg);
        assert_eq!(out.gaussians[0].opacity, 0.3);
    }

    #[test]
    fn covariance_matches_factored_form() {
        let mut g = Gaussian::isotropic(Vec3::zeros(), 1.0, Vec3::zeros(), 1.0);
        g.scale = Vec3::new(2.0, 1.0, 0.5);
        g.rotation = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let c = g.covariance();
        let r = g.rotation_matrix();
        let expected = r * Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 0.25)) * r.transpose();
        assert!((c - expected).norm() < 1e-12);
    }

    #[test]
    fn bbox_encloses_points() {
        let m = model_with_extent_three();
        assert!(m.gaussians.iter().all(|g| m.bbox().contains(&g.position)));
    }
}
