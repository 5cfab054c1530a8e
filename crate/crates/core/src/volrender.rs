//! Stratified ray sampling and front-to-back compositing of density and
//! multi-channel features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray, Vec3};

/// Opacity floor used when normalising expected depth.
pub const DEPTH_OPACITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub feature: Vec<f64>,
    pub expected_depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

impl RenderOutput {
    pub fn transmittance(&self) -> f64 {
        1.0 - self.opacity
    }
}

/// Something that can be queried for density and per-layer features at a
/// world position. There is deliberately no direction argument.
pub trait PointSource: Sync {
    fn layer_channels(&self, layer: usize) -> usize;

    /// Writes the feature of `layer` at `x` into `feature` and returns density.
    fn eval_point(&self, x: &Vec3, layer: usize, feature: &mut [f64]) -> f64;

    fn density_at(&self, x: &Vec3) -> f64;

    /// Evaluates a batch of points. `features` is points × channels.
    fn eval_batch(&self, points: &[Vec3], layer: usize, densities: &mut [f64], features: &mut [f64]) {
        let c = self.layer_channels(layer);
        for (k, x) in points.iter().enumerate() {
            densities[k] = self.eval_point(x, layer, &mut features[k * c..(k + 1) * c]);
        }
    }
}

pub fn sample_stratified<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 samples per ray, got {n}")));
    }
    let span = ray.t_far - ray.t_near;
    let bin = span / n as f64;
    let t_values: Vec<f64> = match rng {
        None => (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * bin).collect(),
        Some(rng) => (0..n)
            .map(|i| ray.t_near + (i as f64 + rng.random::<f64>()) * bin)
            .collect(),
    };
    // each sample owns the span between the midpoints to its neighbours,
    // so the deltas tile [t_near, t_far] exactly
    let edge = |i: usize| match i {
        0 => ray.t_near,
        i if i == n => ray.t_far,
        i => 0.5 * (t_values[i - 1] + t_values[i]),
    };
    let deltas: Vec<f64> = (0..n).map(|i| edge(i + 1) - edge(i)).collect();
    let positions = t_values.iter().map(|t| ray.at(*t)).collect();
    Ok(RaySamples {
        positions,
        t_values,
        deltas,
    })
}

fn check_inputs(densities: &[f64], features: &[f64], channels: usize, samples: &RaySamples) -> Result<()> {
    let n = samples.len();
    if densities.len() != n || features.len() != n * channels {
        return Err(Error::domain(format!(
            "composite expects {n} densities and {n}x{channels} features, got {} and {}",
            densities.len(),
            features.len()
        )));
    }
    if densities.iter().any(|d| d.is_nan()) || features.iter().any(|f| !f.is_finite()) {
        return Err(Error::numeric("non-finite input to composite"));
    }
    if let Some(d) = densities.iter().find(|d| **d < 0.0) {
        return Err(Error::domain(format!("negative density {d}")));
    }
    Ok(())
}

/// Discrete volume rendering: α_i = 1 − exp(−σ_i δ_i), w_i = T_i α_i.
pub fn composite(densities: &[f64], features: &[f64], channels: usize, samples: &RaySamples) -> Result<RenderOutput> {
    check_inputs(densities, features, channels, samples)?;
    let n = samples.len();
    let mut weights = Vec::with_capacity(n);
    let mut feature = vec![0.0; channels];
    let mut transmittance = 1.0;
    let mut depth_sum = 0.0;
    for i in 0..n {
        let keep = (-densities[i] * samples.deltas[i]).exp();
        let w = transmittance * (1.0 - keep);
        weights.push(w);
        depth_sum += w * samples.t_values[i];
        for (acc, f) in feature.iter_mut().zip(&features[i * channels..(i + 1) * channels]) {
            *acc += w * f;
        }
        transmittance *= keep;
    }
    let opacity = 1.0 - transmittance;
    Ok(RenderOutput {
        feature,
        expected_depth: depth_sum / opacity.max(DEPTH_OPACITY_FLOOR),
        opacity,
        weights,
    })
}

/// Gradients of a loss through [`composite`].
///
/// Given dL/dfeature and dL/d(expected depth), returns dL/dσ (length N) and
/// writes dL/dfeatures (N × C) into `grad_features`.
pub fn composite_backward(
    densities: &[f64],
    features: &[f64],
    channels: usize,
    samples: &RaySamples,
    grad_feature: &[f64],
    grad_depth: f64,
    grad_features: &mut [f64],
) -> Vec<f64> {
    let n = samples.len();
    let mut trans = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut t = 1.0;
    trans.push(t);
    for i in 0..n {
        let keep = (-densities[i] * samples.deltas[i]).exp();
        weights.push(t * (1.0 - keep));
        t *= keep;
        trans.push(t);
    }
    let opacity = 1.0 - t;
    let depth_sum: f64 = weights.iter().zip(&samples.t_values).map(|(w, t)| w * t).sum();
    let normalised = opacity > DEPTH_OPACITY_FLOOR;
    let denom = opacity.max(DEPTH_OPACITY_FLOOR);

    // dL/dw_i for the parts of the loss that are linear in the weights.
    let g: Vec<f64> = (0..n)
        .map(|i| {
            let f = &features[i * channels..(i + 1) * channels];
            let feat: f64 = f.iter().zip(grad_feature).map(|(a, b)| a * b).sum();
            feat + grad_depth * samples.t_values[i] / denom
        })
        .collect();
    for i in 0..n {
        for c in 0..channels {
            grad_features[i * channels + c] = weights[i] * grad_feature[c];
        }
    }
    // dO/dσ_k = δ_k T_N; expected depth picks up −S/O² · dO/dσ_k.
    let opacity_coef = if normalised {
        -grad_depth * depth_sum / (denom * denom)
    } else {
        0.0
    };
    let mut grad_sigma = vec![0.0; n];
    let mut suffix = 0.0; // Σ_{i>k} w_i g_i
    for k in (0..n).rev() {
        let delta = samples.deltas[k];
        grad_sigma[k] = delta * (trans[k + 1] * g[k] - suffix) + opacity_coef * delta * t;
        suffix += weights[k] * g[k];
    }
    grad_sigma
}

/// Feature, depth and opacity images rendered at a square resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderMaps {
    pub resolution: usize,
    pub channels: usize,
    /// row-major pixels, channels innermost
    pub features: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderMaps {
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let k = j * self.resolution + i;
        &self.features[k * self.channels..(k + 1) * self.channels]
    }
}

/// Per-pixel sampling generator derived from a base seed.
pub fn pixel_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn render_row<S: PointSource + ?Sized>(
    source: &S,
    camera: &Camera,
    layer: usize,
    resolution: usize,
    n_samples: usize,
    seed: Option<u64>,
    j: usize,
) -> Result<Vec<RenderOutput>> {
    let c = source.layer_channels(layer);
    let mut all_samples = Vec::with_capacity(resolution);
    let mut points = Vec::with_capacity(resolution * n_samples);
    for i in 0..resolution {
        let ray = camera.ray_for_cell(i, j, resolution)?;
        let samples = match seed {
            None => sample_stratified::<ChaCha8Rng>(&ray, n_samples, None)?,
            Some(s) => {
                let mut rng = pixel_rng(s, (j * resolution + i) as u64);
                sample_stratified(&ray, n_samples, Some(&mut rng))?
            }
        };
        points.extend_from_slice(&samples.positions);
        all_samples.push(samples);
    }
    let mut dens = vec![0.0; points.len()];
    let mut feats = vec![0.0; points.len() * c];
    source.eval_batch(&points, layer, &mut dens, &mut feats);
    all_samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = i * n_samples;
            composite(
                &dens[a..a + n_samples],
                &feats[a * c..(a + n_samples) * c],
                c,
                s,
            )
        })
        .collect()
}

/// Renders `layer` of `source` from `camera` on a `resolution`² grid.
/// `seed = None` uses bin midpoints; otherwise each pixel jitters its samples
/// with a generator derived from `(seed, pixel index)`.
pub fn render_map<S: PointSource + ?Sized>(
    source: &S,
    camera: &Camera,
    layer: usize,
    resolution: usize,
    n_samples: usize,
    seed: Option<u64>,
) -> Result<RenderMaps> {
    if resolution == 0 {
        return Err(Error::domain("render resolution must be >= 1"));
    }
    let c = source.layer_channels(layer);
    let rows: Vec<Vec<RenderOutput>> = (0..resolution)
        .into_par_iter()
        .map(|j| render_row(source, camera, layer, resolution, n_samples, seed, j))
        .collect::<Result<_>>()?;
    let mut maps = RenderMaps {
        resolution,
        channels: c,
        features: Vec::with_capacity(resolution * resolution * c),
        depth: Vec::with_capacity(resolution * resolution),
        opacity: Vec::with_capacity(resolution * resolution),
    };
    for out in rows.into_iter().flatten() {
        maps.features.extend_from_slice(&out.feature);
        maps.depth.push(out.expected_depth);
        maps.opacity.push(out.opacity);
    }
    Ok(maps)
}

/// Opacity only, deterministic midpoint samples.
pub fn render_opacity<S: PointSource + ?Sized>(
    source: &S,
    camera: &Camera,
    resolution: usize,
    n_samples: usize,
) -> Result<Vec<f64>> {
    if resolution == 0 {
        return Err(Error::domain("render resolution must be >= 1"));
    }
    (0..resolution * resolution)
        .into_par_iter()
        .map(|k| {
            let ray = camera.ray_for_cell(k % resolution, k / resolution, resolution)?;
            Ok(1.0 - transmittance_along(source, &ray, n_samples)?)
        })
        .collect()
}

/// Transmittance from `ray.t_near` to `ray.t_far` with midpoint samples.
pub fn transmittance_along<S: PointSource + ?Sized>(source: &S, ray: &Ray, n_samples: usize) -> Result<f64> {
    let s = sample_stratified::<ChaCha8Rng>(ray, n_samples, None)?;
    let optical: f64 = s
        .positions
        .iter()
        .zip(&s.deltas)
        .map(|(x, d)| source.density_at(x) * d)
        .sum();
    Ok((-optical).exp())
}
