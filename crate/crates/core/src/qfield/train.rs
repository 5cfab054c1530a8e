//! Query-field training: q-loss plus masked expected-depth supervision,
//! minimised with Adam over random ray batches that mix views and layers.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FeatureField, LayerSpec, QNorm, QuerySet};
use crate::error::{Error, Result};
use crate::geometry::{silhouette_mask, Camera, Mask, SyntheticScene};
use crate::volrender::{self, composite, composite_backward, sample_stratified, RaySamples};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Rays per step.
    pub batch: usize,
    pub learning_rate: f64,
    /// Weight of the depth term (λ_depth).
    pub depth_weight: f64,
    pub n_samples: usize,
    pub norm: QNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            learning_rate: 5e-3,
            depth_weight: 1.0,
            n_samples: 32,
            norm: QNorm::SquaredL2,
        }
    }
}

/// Depth target and supervision mask for one view at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub resolution: usize,
    pub depth: Vec<f64>,
    pub mask: Mask,
}

impl DepthMap {
    pub fn target(&self, i: usize, j: usize) -> Option<f64> {
        let k = j * self.resolution + i;
        self.mask.data[k].then(|| self.depth[k])
    }
}

/// Depth maps of the unedited scene, supervised only away from the edited
/// object. Indexed `[view][layer]` so every query layer has a map at its
/// own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSupervision {
    pub views: Vec<Vec<DepthMap>>,
}

impl DepthSupervision {
    /// Supervises pixels outside the union of the object silhouettes before
    /// and after the edit, restricted to pixels where the original scene is
    /// opaque (so the target depth lies inside the ray bounds).
    pub fn from_scenes(
        original: &SyntheticScene,
        edited: &SyntheticScene,
        cameras: &[Camera],
        layers: &[LayerSpec],
        n_samples: usize,
    ) -> Result<Self> {
        let before = original.objects_only();
        let after = edited.objects_only();
        let views = cameras
            .iter()
            .map(|cam| {
                layers
                    .iter()
                    .map(|l| {
                        let r = l.resolution;
                        let maps = volrender::render_map(original, cam, 0, r, n_samples, None)?;
                        let union = silhouette_mask(&before, cam, r, 0.5)?
                            .union(&silhouette_mask(&after, cam, r, 0.5)?);
                        let data = union
                            .data
                            .iter()
                            .zip(&maps.opacity)
                            .map(|(inside, op)| !inside && *op > 0.5)
                            .collect();
                        Ok(DepthMap {
                            resolution: r,
                            depth: maps.depth,
                            mask: Mask {
                                resolution: r,
                                data,
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DepthSupervision { views })
    }

    pub fn supervised_count(&self) -> usize {
        self.views.iter().flatten().map(|m| m.mask.count()).sum()
    }
}

/// One training ray: its samples, layer, target query and optional depth.
#[derive(Debug, Clone)]
pub struct TrainRay {
    pub samples: RaySamples,
    pub layer: usize,
    pub target: Vec<f64>,
    pub depth_target: Option<f64>,
}

/// Mean loss over `rays` and its gradient with respect to the field
/// parameters. Rays are grouped by layer; groups are evaluated in parallel
/// and reduced in layer order so the result does not depend on threading.
pub fn batch_loss_and_grad(
    field: &FeatureField,
    rays: &[TrainRay],
    depth_weight: f64,
    norm: QNorm,
) -> Result<(f64, Vec<f64>)> {
    let n_layers = field.layers.len();
    let partials: Vec<(f64, Vec<f64>)> = (0..n_layers)
        .into_par_iter()
        .map(|layer| {
            let group: Vec<&TrainRay> = rays.iter().filter(|r| r.layer == layer).collect();
            let mut grad = vec![0.0; field.param_count()];
            if group.is_empty() {
                return Ok((0.0, grad));
            }
            let c = field.layers[layer].channels;
            let points: Vec<_> = group
                .iter()
                .flat_map(|r| r.samples.positions.iter().copied())
                .collect();
            let (dens, feats, acts) = field.forward_batch(&points, layer);
            let feats = feats.as_slice().expect("contiguous");
            let mut g_dens = vec![0.0; points.len()];
            let mut g_feats = Array2::zeros((points.len(), c));
            let mut loss = 0.0;
            let mut offset = 0;
            let scale = 1.0 / rays.len() as f64;
            let mut g_feature = vec![0.0; c];
            for ray in group {
                let n = ray.samples.len();
                let d = &dens[offset..offset + n];
                let f = &feats[offset * c..(offset + n) * c];
                let out = composite(d, f, c, &ray.samples)?;
                loss += norm.eval(&out.feature, &ray.target, Some(&mut g_feature));
                g_feature.iter_mut().for_each(|g| *g *= scale);
                let mut g_depth = 0.0;
                if let Some(target) = ray.depth_target {
                    let diff = out.expected_depth - target;
                    loss += depth_weight * diff * diff;
                    g_depth = 2.0 * depth_weight * diff * scale;
                }
                let gf = g_feats
                    .slice_mut(ndarray::s![offset..offset + n, ..])
                    .into_slice()
                    .expect("contiguous");
                let gs = composite_backward(d, f, c, &ray.samples, &g_feature, g_depth, gf);
                g_dens[offset..offset + n].copy_from_slice(&gs);
                offset += n;
            }
            field.backward_batch(&acts, &g_dens, &g_feats, &mut grad);
            Ok((loss * scale, grad))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; field.param_count()];
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Adam with bias correction and no schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / b1t;
            let vh = self.v[k] / b2t;
            params[k] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub field: FeatureField,
    pub optimizer: Adam,
    pub step: usize,
    pub seed: u64,
    pub history: Vec<f64>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(field: FeatureField, seed: u64, learning_rate: f64) -> Self {
        let n = field.param_count();
        TrainState {
            field,
            optimizer: Adam::new(n, learning_rate),
            step: 0,
            seed,
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws a random ray batch across all views and layers.
    pub fn sample_batch(
        &mut self,
        targets: &QuerySet,
        cameras: &[Camera],
        depth: Option<&DepthSupervision>,
        cfg: &TrainConfig,
    ) -> Result<Vec<TrainRay>> {
        let layers = &self.field.layers;
        (0..cfg.batch)
            .map(|_| {
                let view = self.rng.random_range(0..cameras.len());
                let layer = self.rng.random_range(0..layers.len());
                let r = layers[layer].resolution;
                let i = self.rng.random_range(0..r);
                let j = self.rng.random_range(0..r);
                let ray = cameras[view].ray_for_cell(i, j, r)?;
                let samples = sample_stratified(&ray, cfg.n_samples, Some(&mut self.rng))?;
                Ok(TrainRay {
                    samples,
                    layer,
                    target: targets.views[view][layer].at(i, j).to_vec(),
                    depth_target: depth.and_then(|d| d.views[view][layer].target(i, j)),
                })
            })
            .collect()
    }

    /// Runs `cfg.steps` Adam updates.
    pub fn run(
        &mut self,
        targets: &QuerySet,
        cameras: &[Camera],
        depth: Option<&DepthSupervision>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        check_data(&self.field, targets, cameras, depth)?;
        for _ in 0..cfg.steps {
            let rays = self.sample_batch(targets, cameras, depth, cfg)?;
            let (loss, grad) = batch_loss_and_grad(&self.field, &rays, cfg.depth_weight, cfg.norm)
                .map_err(|e| Error::Training {
                    step: self.step,
                    message: e.to_string(),
                })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step: self.step,
                    message: format!("loss became {loss}"),
                });
            }
            self.optimizer.step(&mut self.field.params, &grad);
            self.step += 1;
            self.history.push(loss);
        }
        Ok(())
    }
}

fn check_data(
    field: &FeatureField,
    targets: &QuerySet,
    cameras: &[Camera],
    depth: Option<&DepthSupervision>,
) -> Result<()> {
    if targets.view_count() < 2 {
        return Err(Error::domain("training needs targets for at least 2 views"));
    }
    if cameras.len() != targets.view_count() {
        return Err(Error::domain(format!(
            "{} cameras for {} target views",
            cameras.len(),
            targets.view_count()
        )));
    }
    if !targets.matches_layers(&field.layers) {
        return Err(Error::domain("target grids do not match the field's layer specs"));
    }
    if let Some(d) = depth {
        let ok = d.views.len() == cameras.len()
            && d.views.iter().all(|v| {
                v.len() == field.layers.len()
                    && v.iter().zip(&field.layers).all(|(m, l)| {
                        m.resolution == l.resolution && m.depth.len() == l.resolution * l.resolution
                    })
            });
        if !ok {
            return Err(Error::domain("depth supervision does not match views/layers"));
        }
    }
    Ok(())
}

/// Trains from `init` (a fresh field or the previous interval's) for
/// `cfg.steps` steps and returns the final state.
pub fn train_qnerf(
    init: FeatureField,
    targets: &QuerySet,
    cameras: &[Camera],
    depth: Option<&DepthSupervision>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainState> {
    if cfg.steps < 1 {
        return Err(Error::domain("training needs at least one step"));
    }
    let mut state = TrainState::new(init, seed, cfg.learning_rate);
    state.run(targets, cameras, depth, cfg)?;
    Ok(state)
}

/// Loss over every ray of every view and layer with midpoint samples.
pub fn full_loss(
    field: &FeatureField,
    targets: &QuerySet,
    cameras: &[Camera],
    depth: Option<&DepthSupervision>,
    cfg: &TrainConfig,
) -> Result<f64> {
    check_data(field, targets, cameras, depth)?;
    let mut rays = Vec::new();
    for (v, cam) in cameras.iter().enumerate() {
        for (layer, spec) in field.layers.iter().enumerate() {
            let r = spec.resolution;
            for j in 0..r {
                for i in 0..r {
                    let ray = cam.ray_for_cell(i, j, r)?;
                    rays.push(TrainRay {
                        samples: sample_stratified::<ChaCha8Rng>(&ray, cfg.n_samples, None)?,
                        layer,
                        target: targets.views[v][layer].at(i, j).to_vec(),
                        depth_target: depth.and_then(|d| d.views[v][layer].target(i, j)),
                    });
                }
            }
        }
    }
    let mut total = 0.0;
    for layer in 0..field.layers.len() {
        let group: Vec<TrainRay> = rays.iter().filter(|r| r.layer == layer).cloned().collect();
        let (l, _) = batch_loss_and_grad(field, &group, cfg.depth_weight, cfg.norm)?;
        total += l * group.len() as f64;
    }
    Ok(total / rays.len() as f64)
}
