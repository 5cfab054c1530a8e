//! Analytic editable scenes: soft solids carrying smooth feature fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::camera::{is_rotation, Camera, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::qfield::LayerSpec;
use crate::volrender::{self, PointSource};

/// Random Fourier features drawn per layer.
const FOURIER_FEATURES: usize = 16;
/// Samples per ray when rasterising silhouettes.
pub const SILHOUETTE_SAMPLES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

impl Shape {
    fn signed_distance(&self, local: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => local.norm() - radius,
            Shape::Box { half_extents } => {
                let q = local.abs() - half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
        }
    }
}

/// A solid in the scene. Geometry and features are defined in a rest frame;
/// the current placement is a rigid motion of that rest frame about the rest
/// centre, so features travel with the solid under edits.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub rest_center: Vec3,
    pub rest_rotation: Mat3,
    pub motion_rotation: Mat3,
    pub motion_translation: Vec3,
    /// Interior density (σ₀).
    pub density: f64,
    /// Half-width of the density ramp around the surface (ε).
    pub softness: f64,
    /// Static primitives (ground, backdrop) are excluded from object silhouettes.
    pub is_static: bool,
}

impl Primitive {
    pub fn new(shape: Shape, center: Vec3, rotation: Mat3, density: f64, softness: f64) -> Self {
        Primitive {
            shape,
            rest_center: center,
            rest_rotation: rotation,
            motion_rotation: Mat3::identity(),
            motion_translation: Vec3::zeros(),
            density,
            softness,
            is_static: false,
        }
    }

    pub fn sphere(center: Vec3, radius: f64, density: f64, softness: f64) -> Self {
        Self::new(Shape::Sphere { radius }, center, Mat3::identity(), density, softness)
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, rotation: Mat3, density: f64, softness: f64) -> Self {
        Self::new(Shape::Box { half_extents }, center, rotation, density, softness)
    }

    pub fn into_static(mut self) -> Self {
        self.is_static = true;
        self
    }

    pub fn center(&self) -> Vec3 {
        self.rest_center + self.motion_translation
    }

    /// World point to rest-frame point.
    fn to_rest(&self, x: &Vec3) -> Vec3 {
        self.rest_center + self.motion_rotation.transpose() * (x - self.center())
    }

    fn signed_distance_rest(&self, rest: &Vec3) -> f64 {
        let local = self.rest_rotation.transpose() * (rest - self.rest_center);
        self.shape.signed_distance(&local)
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.signed_distance_rest(&self.to_rest(x))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::domain("primitive density must be finite and >= 0"));
        }
        if !(self.softness > 0.0) {
            return Err(Error::domain("primitive softness must be > 0"));
        }
        match self.shape {
            Shape::Sphere { radius } if radius <= 0.0 => {
                return Err(Error::domain("sphere radius must be > 0"))
            }
            Shape::Box { half_extents } if half_extents.min() <= 0.0 => {
                return Err(Error::domain("box half extents must be > 0"))
            }
            _ => {}
        }
        if !is_rotation(&self.rest_rotation, 1e-9) {
            return Err(Error::domain("primitive rotation is not orthonormal"));
        }
        Ok(())
    }
}

/// 1 deep inside, 0 beyond `softness` outside, C¹ smoothstep in between.
pub fn density_profile(signed_distance: f64, softness: f64) -> f64 {
    let s = ((softness - signed_distance) / (2.0 * softness)).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Seeded random Fourier map from ℝ³ to `channels` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatures {
    frequencies: Vec<Vec3>,
    phases: Vec<f64>,
    /// channels × FOURIER_FEATURES, row-major
    amplitudes: Vec<f64>,
    channels: usize,
}

impl FourierFeatures {
    pub fn new(channels: usize, frequency_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let frequencies = (0..FOURIER_FEATURES)
            .map(|_| {
                Vec3::new(
                    normal.sample(rng),
                    normal.sample(rng),
                    normal.sample(rng),
                ) * frequency_scale
            })
            .collect();
        let phases = (0..FOURIER_FEATURES)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let amp = (2.0 / FOURIER_FEATURES as f64).sqrt();
        let amplitudes = (0..channels * FOURIER_FEATURES)
            .map(|_| normal.sample(rng) * amp)
            .collect();
        FourierFeatures {
            frequencies,
            phases,
            amplitudes,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eval_into(&self, x: &Vec3, weight: f64, out: &mut [f64]) {
        let mut basis = [0.0; FOURIER_FEATURES];
        for (b, (w, p)) in basis.iter_mut().zip(self.frequencies.iter().zip(&self.phases)) {
            *b = (w.dot(x) + p).cos() * weight;
        }
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.amplitudes[c * FOURIER_FEATURES..(c + 1) * FOURIER_FEATURES];
            *o += row.iter().zip(&basis).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Per-primitive rigid motion applied about the primitive's current centre.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub transforms: Vec<RigidTransform>,
}

impl EditSpec {
    pub fn identity(count: usize) -> Self {
        EditSpec {
            transforms: vec![RigidTransform::identity(); count],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub feature_seed: u64,
    pub layer_specs: Vec<LayerSpec>,
    pub feature_frequency: f64,
    features: Vec<FourierFeatures>,
}

impl SyntheticScene {
    pub fn new(
        primitives: Vec<Primitive>,
        feature_seed: u64,
        layer_specs: Vec<LayerSpec>,
        feature_frequency: f64,
    ) -> Result<Self> {
        for p in &primitives {
            p.validate()?;
        }
        if layer_specs.is_empty() {
            return Err(Error::domain("scene needs at least one layer spec"));
        }
        let features = layer_specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
                rng.set_stream(i as u64 + 1);
                FourierFeatures::new(spec.channels, feature_frequency, &mut rng)
            })
            .collect();
        Ok(SyntheticScene {
            primitives,
            feature_seed,
            layer_specs,
            feature_frequency,
            features,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layer_specs.len()
    }

    pub fn density(&self, x: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.density * density_profile(p.signed_distance(x), p.softness))
            .sum()
    }

    /// Feature of `layer` at `x`, blended over primitives by a soft-min of
    /// their signed distances and evaluated in each primitive's rest frame.
    pub fn feature_into(&self, x: &Vec3, layer: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let map = &self.features[layer];
        if self.primitives.is_empty() {
            map.eval_into(x, 1.0, out);
            return;
        }
        let rest: Vec<(Vec3, f64, f64)> = self
            .primitives
            .iter()
            .map(|p| {
                let r = p.to_rest(x);
                (r, p.signed_distance_rest(&r), p.softness)
            })
            .collect();
        let d_min = rest
            .iter()
            .map(|(_, d, s)| d / s)
            .fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = rest.iter().map(|(_, d, s)| (d_min - d / s).exp()).collect();
        let total: f64 = weights.iter().sum();
        for ((r, _, _), w) in rest.iter().zip(&weights) {
            map.eval_into(r, w / total, out);
        }
    }

    /// Density and feature of `layer` at `x`.
    pub fn eval(&self, x: &Vec3, layer: usize) -> Result<(f64, Vec<f64>)> {
        let spec = self.layer_specs.get(layer).ok_or_else(|| {
            Error::domain(format!("layer {layer} out of range ({} layers)", self.layer_count()))
        })?;
        let mut feature = vec![0.0; spec.channels];
        self.feature_into(x, layer, &mut feature);
        Ok((self.density(x), feature))
    }

    pub fn apply_edit(&self, edit: &EditSpec) -> Result<SyntheticScene> {
        if edit.transforms.len() != self.primitives.len() {
            return Err(Error::config(
                "edit.transforms",
                format!(
                    "{} transforms for {} primitives",
                    edit.transforms.len(),
                    self.primitives.len()
                ),
            ));
        }
        let mut out = self.clone();
        for (p, t) in out.primitives.iter_mut().zip(&edit.transforms) {
            if !is_rotation(&t.rotation, 1e-9) {
                return Err(Error::config("edit.transforms", "rotation is not orthonormal"));
            }
            p.motion_rotation = t.rotation * p.motion_rotation;
            p.motion_translation += t.translation;
        }
        Ok(out)
    }

    /// The same scene restricted to its movable (non-static) primitives.
    pub fn objects_only(&self) -> SyntheticScene {
        let mut out = self.clone();
        out.primitives.retain(|p| !p.is_static);
        out
    }

    pub fn max_density(&self) -> f64 {
        self.primitives.iter().map(|p| p.density).sum()
    }
}

impl PointSource for SyntheticScene {
    fn layer_channels(&self, layer: usize) -> usize {
        self.layer_specs[layer].channels
    }

    fn eval_point(&self, x: &Vec3, layer: usize, feature: &mut [f64]) -> f64 {
        self.feature_into(x, layer, feature);
        self.density(x)
    }

    fn density_at(&self, x: &Vec3) -> f64 {
        self.density(x)
    }
}

/// Row-major binary image at a square resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub resolution: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(resolution: usize, value: bool) -> Self {
        Mask {
            resolution,
            data: vec![value; resolution * resolution],
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.resolution, other.resolution, "mask resolutions differ");
        Mask {
            resolution: self.resolution,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            resolution: self.resolution,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Pixels whose rendered opacity exceeds `threshold`.
pub fn silhouette_mask(
    scene: &SyntheticScene,
    camera: &Camera,
    resolution: usize,
    threshold: f64,
) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::domain("silhouette threshold must lie in (0, 1)"));
    }
    let opacity = volrender::render_opacity(scene, camera, resolution, SILHOUETTE_SAMPLES)?;
    Ok(Mask {
        resolution,
        data: opacity.iter().map(|a| *a > threshold).collect(),
    })
}

/// Rotation by `angle` radians about unit `axis`.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let axis = nalgebra::Unit::new_normalize(axis);
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Points uniformly drawn in the axis-aligned box `[-half, half]³`.
pub fn random_points(count: usize, half: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Vec3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            )
        })
        .collect()
}
