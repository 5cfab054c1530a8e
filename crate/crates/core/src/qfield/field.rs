//! The query field network: sinusoidal encoding, a shared ReLU trunk, a
//! softplus density head and one two-layer head per query layer.
//!
//! Parameter layout (flat, in this order): trunk layers `0..depth`, the
//! density head, then for each layer spec its hidden and output layers. Each
//! linear layer stores its `out × in` weights row-major followed by `out`
//! biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LayerSpec;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volrender::PointSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldConfig {
    /// Number of octaves K in the positional encoding.
    pub frequencies: usize,
    /// Trunk width W (also used for head hidden layers).
    pub width: usize,
    /// Trunk depth D.
    pub depth: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            frequencies: 6,
            width: 64,
            depth: 3,
        }
    }
}

impl FieldConfig {
    pub fn encoded_dim(&self) -> usize {
        3 + 6 * self.frequencies
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    offset: usize,
    inputs: usize,
    outputs: usize,
}

impl Linear {
    fn size(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.outputs, self.inputs),
            &p[self.offset..self.offset + self.outputs * self.inputs],
        )
        .expect("layout")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        let a = self.offset + self.outputs * self.inputs;
        ArrayView1::from(&p[a..a + self.outputs])
    }

    fn grads<'a>(&self, g: &'a mut [f64]) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (w, b) = g[self.offset..self.offset + self.size()].split_at_mut(self.outputs * self.inputs);
        (
            ArrayViewMut2::from_shape((self.outputs, self.inputs), w).expect("layout"),
            ArrayViewMut1::from(b),
        )
    }

    /// x · Wᵀ + b
    fn forward(&self, p: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(p).t());
        y += &self.bias(p);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &Array2<f64>, gy: &Array2<f64>, need_input: bool) -> Option<Array2<f64>> {
        let (mut gw, mut gb) = self.grads(g);
        ndarray::linalg::general_mat_mul(1.0, &gy.t(), x, 1.0, &mut gw);
        gb += &gy.sum_axis(Axis(0));
        need_input.then(|| gy.dot(&self.weight(p)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    trunk: Vec<Linear>,
    density: Linear,
    heads: Vec<(Linear, Linear)>,
    total: usize,
}

impl Layout {
    fn new(cfg: &FieldConfig, layers: &[LayerSpec]) -> Self {
        let mut offset = 0;
        let mut make = |inputs, outputs| {
            let l = Linear {
                offset,
                inputs,
                outputs,
            };
            offset += l.size();
            l
        };
        let mut trunk = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            let inputs = if d == 0 { cfg.encoded_dim() } else { cfg.width };
            trunk.push(make(inputs, cfg.width));
        }
        let density = make(cfg.width, 1);
        let heads = layers
            .iter()
            .map(|l| (make(cfg.width, cfg.width), make(cfg.width, l.channels)))
            .collect();
        Layout {
            trunk,
            density,
            heads,
            total: offset,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

fn relu_backward(pre: &Array2<f64>, mut g: Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(&mut g).and(pre).for_each(|g, p| {
        if *p <= 0.0 {
            *g = 0.0
        }
    });
    g
}

/// Cached activations of one batched forward pass through a single head.
pub struct Activations {
    encoded: Array2<f64>,
    trunk_pre: Vec<Array2<f64>>,
    trunk_out: Vec<Array2<f64>>,
    density_raw: Array1<f64>,
    head_pre: Array2<f64>,
    head_hidden: Array2<f64>,
    layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub config: FieldConfig,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    layout: Layout,
}

impl FeatureField {
    /// He-initialised field; deterministic in `seed`.
    pub fn new(config: FieldConfig, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let layout = Self::check(&config, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut init = |l: &Linear| {
            let bound = (6.0 / l.inputs as f64).sqrt();
            for w in &mut params[l.offset..l.offset + l.inputs * l.outputs] {
                *w = rng.random_range(-bound..bound);
            }
        };
        layout.trunk.iter().for_each(&mut init);
        init(&layout.density);
        for (h, o) in &layout.heads {
            init(h);
            init(o);
        }
        Ok(FeatureField {
            config,
            layers,
            params,
            layout,
        })
    }

    /// Rebuilds a field from a flat parameter vector.
    pub fn from_params(config: FieldConfig, layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let layout = Self::check(&config, &layers)?;
        if params.len() != layout.total {
            return Err(Error::format(format!(
                "field expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(FeatureField {
            config,
            layers,
            params,
            layout,
        })
    }

    fn check(config: &FieldConfig, layers: &[LayerSpec]) -> Result<Layout> {
        if config.width == 0 || config.depth == 0 {
            return Err(Error::domain("field width and depth must be >= 1"));
        }
        super::validate_layers(layers)?;
        Ok(Layout::new(config, layers))
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Parameter count a field with this shape would have.
    pub fn param_count_for(config: &FieldConfig, layers: &[LayerSpec]) -> Result<usize> {
        Ok(Self::check(config, layers)?.total)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::numeric(format!("field parameter {k} is not finite")));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Vec3, out: &mut [f64]) {
        out[..3].copy_from_slice(x.as_slice());
        let mut k = 3;
        for f in 0..self.config.frequencies {
            let scale = (1u64 << f) as f64;
            for d in 0..3 {
                let a = x[d] * scale;
                out[k] = a.sin();
                out[k + 1] = a.cos();
                k += 2;
            }
        }
    }

    fn trunk(&self, points: &[Vec3]) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let e = self.config.encoded_dim();
        let mut encoded = Array2::zeros((points.len(), e));
        for (row, x) in encoded.rows_mut().into_iter().zip(points) {
            let mut row = row;
            self.encode(x, row.as_slice_mut().expect("contiguous"));
        }
        let mut pre = Vec::with_capacity(self.config.depth);
        let mut out: Vec<Array2<f64>> = Vec::with_capacity(self.config.depth);
        for (d, l) in self.layout.trunk.iter().enumerate() {
            let input = if d == 0 { &encoded } else { &out[d - 1] };
            let p = l.forward(&self.params, input);
            out.push(relu(p.clone()));
            pre.push(p);
        }
        (encoded, pre, out)
    }

    /// Batched evaluation of density and the features of one layer.
    /// Returns densities, features (points × C) and the cached activations.
    pub fn forward_batch(&self, points: &[Vec3], layer: usize) -> (Vec<f64>, Array2<f64>, Activations) {
        let (encoded, trunk_pre, trunk_out) = self.trunk(points);
        let hidden = trunk_out.last().expect("depth >= 1");
        let density_raw = self
            .layout
            .density
            .forward(&self.params, hidden)
            .index_axis_move(Axis(1), 0);
        let (h, o) = &self.layout.heads[layer];
        let head_pre = h.forward(&self.params, hidden);
        let head_hidden = relu(head_pre.clone());
        let features = o.forward(&self.params, &head_hidden);
        let densities = density_raw.iter().map(|r| softplus(*r)).collect();
        (
            densities,
            features,
            Activations {
                encoded,
                trunk_pre,
                trunk_out,
                density_raw,
                head_pre,
                head_hidden,
                layer,
            },
        )
    }

    /// Back-propagates dL/dσ and dL/dfeatures of one batch, accumulating
    /// into `grad` (same layout as `params`).
    pub fn backward_batch(&self, acts: &Activations, grad_density: &[f64], grad_features: &Array2<f64>, grad: &mut [f64]) {
        let p = &self.params;
        let hidden = acts.trunk_out.last().expect("depth >= 1");
        let (h, o) = &self.layout.heads[acts.layer];
        let g_head_hidden = o
            .backward(p, grad, &acts.head_hidden, grad_features, true)
            .expect("input grad");
        let g_head_pre = relu_backward(&acts.head_pre, g_head_hidden);
        let mut g_hidden = h.backward(p, grad, hidden, &g_head_pre, true).expect("input grad");

        let g_raw = Array2::from_shape_fn((grad_density.len(), 1), |(k, _)| {
            grad_density[k] * sigmoid(acts.density_raw[k])
        });
        g_hidden += &self
            .layout
            .density
            .backward(p, grad, hidden, &g_raw, true)
            .expect("input grad");

        let mut g = g_hidden;
        for d in (0..self.config.depth).rev() {
            let gp = relu_backward(&acts.trunk_pre[d], g);
            let input = if d == 0 { &acts.encoded } else { &acts.trunk_out[d - 1] };
            match self.layout.trunk[d].backward(p, grad, input, &gp, d > 0) {
                Some(gi) => g = gi,
                None => break,
            }
        }
    }

    /// Density and the features of every layer at one point.
    pub fn eval(&self, x: &Vec3) -> Result<(f64, Vec<Vec<f64>>)> {
        self.validate()?;
        let (_, _, trunk_out) = self.trunk(std::slice::from_ref(x));
        let hidden = trunk_out.last().expect("depth >= 1");
        let density = softplus(self.layout.density.forward(&self.params, hidden)[[0, 0]]);
        let features: Vec<Vec<f64>> = self
            .layout
            .heads
            .iter()
            .map(|(h, o)| {
                let hh = relu(h.forward(&self.params, hidden));
                o.forward(&self.params, &hh).row(0).to_vec()
            })
            .collect();
        if !density.is_finite() || features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("field produced a non-finite output"));
        }
        Ok((density, features))
    }

    /// Parameters rounded through 32-bit floats, as stored in checkpoints.
    pub fn rounded_to_f32(&self) -> FeatureField {
        let mut out = self.clone();
        out.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
        out
    }

}

impl PointSource for FeatureField {
    fn layer_channels(&self, layer: usize) -> usize {
        self.layers[layer].channels
    }

    fn eval_point(&self, x: &Vec3, layer: usize, feature: &mut [f64]) -> f64 {
        let (d, f, _) = self.forward_batch(std::slice::from_ref(x), layer);
        feature.copy_from_slice(f.row(0).as_slice().expect("contiguous"));
        d[0]
    }

    fn density_at(&self, x: &Vec3) -> f64 {
        let (_, _, trunk_out) = self.trunk(std::slice::from_ref(x));
        softplus(self.layout.density.forward(&self.params, &trunk_out[self.config.depth - 1])[[0, 0]])
    }

    fn eval_batch(&self, points: &[Vec3], layer: usize, densities: &mut [f64], features: &mut [f64]) {
        let (d, f, _) = self.forward_batch(points, layer);
        densities.copy_from_slice(&d);
        features.copy_from_slice(f.as_slice().expect("contiguous"));
    }
}
