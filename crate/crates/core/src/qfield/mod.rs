//! The query field ("QNeRF"): a view-independent neural field with a shared
//! density and one feature head per extracted query layer, plus its losses
//! and trainer.

mod field;
mod loss;
mod train;

use std::collections::HashSet;

pub use field::{sigmoid, softplus, Activations, FeatureField, FieldConfig};
pub use loss::{depth_loss, q_loss, QNorm};
pub use train::{
    batch_loss_and_grad, full_loss, train_qnerf, Adam, DepthMap, DepthSupervision, TrainConfig,
    TrainRay, TrainState,
};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::grid::Grid;
use crate::volrender;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub layer_id: usize,
    /// Side length of the layer's token grid.
    pub resolution: usize,
    pub channels: usize,
}

impl LayerSpec {
    pub fn new(layer_id: usize, resolution: usize, channels: usize) -> Self {
        LayerSpec {
            layer_id,
            resolution,
            channels,
        }
    }
}

pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::domain("at least one layer spec is required"));
    }
    let mut ids = HashSet::new();
    for l in layers {
        if l.resolution < 2 {
            return Err(Error::domain(format!("layer {} resolution must be >= 2", l.layer_id)));
        }
        if l.channels < 1 {
            return Err(Error::domain(format!("layer {} needs >= 1 channel", l.layer_id)));
        }
        if !ids.insert(l.layer_id) {
            return Err(Error::domain(format!("duplicate layer id {}", l.layer_id)));
        }
    }
    Ok(())
}

/// Query grids of every view and layer at one denoising timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub timestep: usize,
    /// `views[v][l]`
    pub views: Vec<Vec<Grid>>,
}

impl QuerySet {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.views
            .first()
            .map(|v| v.iter().map(|g| (g.resolution, g.channels)).collect())
            .unwrap_or_default()
    }

    pub fn matches_layers(&self, layers: &[LayerSpec]) -> bool {
        self.views.iter().all(|v| {
            v.len() == layers.len()
                && v
                    .iter()
                    .zip(layers)
                    .all(|(g, l)| g.resolution == l.resolution && g.channels == l.channels)
        })
    }
}

/// Volume-renders the queries of `layer` at that layer's token resolution.
pub fn render_field_queries(
    field: &FeatureField,
    camera: &Camera,
    layer: usize,
    n_samples: usize,
    seed: Option<u64>,
) -> Result<Grid> {
    let spec = field
        .layers
        .get(layer)
        .ok_or_else(|| Error::domain(format!("field has no layer {layer}")))?;
    let maps = volrender::render_map(field, camera, layer, spec.resolution, n_samples, seed)?;
    Grid::from_data(spec.resolution, spec.channels, maps.features)
}

/// Rendered queries of every layer for one camera.
pub fn render_all_layers(field: &FeatureField, camera: &Camera, n_samples: usize) -> Result<Vec<Grid>> {
    (0..field.layers.len())
        .map(|l| render_field_queries(field, camera, l, n_samples, None))
        .collect()
}
