//! Fixed-weight attention denoiser.
//!
//! Each stage (one per query layer, coarse to fine) builds tokens from the
//! resampled latent, a control map, a timestep embedding and the previous
//! stage's output, then runs one single-head self-attention block. The token
//! stream that feeds later stages always uses the stage's own keys and
//! values; the attention outputs that reach the denoised prediction can have
//! their keys and values substituted (see `inject_kv`) or their queries
//! overwritten (see `direct_replace`) without disturbing any query.
//!
//! The readout is the latent plus the attention residuals plus a structure
//! term: queries that differ from the ones the tokens imply pull the
//! prediction along a regularised inverse of the query projection. On an
//! unmodified trace that term is exactly zero.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::resample::Resampler;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::qfield::LayerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Latent side length R₀.
    pub latent_resolution: usize,
    /// Latent channels C₀.
    pub latent_channels: usize,
    /// Token width d; the first C₀ token channels carry the latent itself.
    pub token_dim: usize,
    pub time_embed_dim: usize,
    /// Nonlinearity amplitude A. Zero pins the prediction to the target.
    pub amplitude: f64,
    /// Prior spread around the target used by the posterior-mean readout.
    pub prior_std: f64,
    /// Scale of the query projection. Its latent rows are orthonormal times
    /// this gain, so one guidance step contracts the latent by roughly
    /// `2 α gain² Σ_ℓ (r_ℓ / R₀)²`.
    pub query_gain: f64,
    pub key_gain: f64,
    pub value_gain: f64,
    /// Scale of the attention output projection.
    pub mix_gain: f64,
    /// Weight of the query-structure path in the readout. Each stage adds
    /// its own implied shift; the shifts are not averaged over stages.
    pub structure_gain: f64,
    /// Scale of the embedding of previous-stage tokens.
    pub embed_gain: f64,
    pub control_gain: f64,
    pub time_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_resolution: 8,
            latent_channels: 8,
            token_dim: 16,
            time_embed_dim: 4,
            amplitude: 1.0,
            prior_std: 0.7,
            query_gain: 0.02,
            key_gain: 2.0,
            value_gain: 1.0,
            mix_gain: 0.05,
            structure_gain: 1.0,
            embed_gain: 0.3,
            control_gain: 0.1,
            time_gain: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("generator.{key}"), msg));
        if self.latent_resolution == 0 {
            return bad("latent_resolution", "must be positive");
        }
        if self.latent_channels == 0 {
            return bad("latent_channels", "must be positive");
        }
        if self.token_dim < self.latent_channels {
            return bad("token_dim", "must be at least latent_channels");
        }
        for (key, v) in [
            ("amplitude", self.amplitude),
            ("query_gain", self.query_gain),
            ("key_gain", self.key_gain),
            ("value_gain", self.value_gain),
            ("mix_gain", self.mix_gain),
            ("structure_gain", self.structure_gain),
            ("embed_gain", self.embed_gain),
            ("control_gain", self.control_gain),
            ("time_gain", self.time_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(key, "must be finite and non-negative");
            }
        }
        if !(self.prior_std.is_finite() && self.prior_std > 0.0) {
            return bad("prior_std", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageWeights {
    pub layer: LayerSpec,
    /// Rows: timestep embedding, then previous-stage tokens (absent on the
    /// first stage). Columns: the non-latent token channels.
    pub embed: Array2<f64>,
    pub control_embed: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// Attention output back to token width, C_ℓ × d.
    pub wo: Array2<f64>,
    /// Regularised inverse of the latent rows of `wq` (C_ℓ × C₀): reads
    /// latent structure back out of queries.
    pub structure: Array2<f64>,
    pub up: Resampler,
    pub down: Resampler,
    pub from_prev: Option<Resampler>,
}

#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub schedule: DiffusionSchedule,
    pub stages: Vec<StageWeights>,
    /// One row per timestep 0..=T.
    pub time_embed: Array2<f64>,
    /// Per-view clean-latent targets.
    pub targets: Vec<Grid>,
}

/// `Wᵀ (W Wᵀ + ρ I)⁻¹` with ρ a tenth of the mean eigenvalue.
fn structure_inverse(w: &Array2<f64>) -> Array2<f64> {
    let n = w.nrows();
    let g = w.dot(&w.t());
    let rho = 0.1 * g.diag().sum() / n as f64;
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| g[[i, j]] + if i == j { rho } else { 0.0 });
    let inv = m.try_inverse().unwrap_or_else(|| nalgebra::DMatrix::zeros(n, n));
    let inv = Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)]);
    w.t().dot(&inv)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let g: f64 = StandardNormal.sample(rng);
        g * std
    })
}

/// `rows × cols` with orthonormal rows (or columns, if fewer), times `gain`.
fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let tall = rows >= cols;
    let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
    let g = gaussian(rng, m, n, 1.0);
    let q = nalgebra::DMatrix::from_fn(m, n, |i, j| g[[i, j]]).qr().q();
    Array2::from_shape_fn((rows, cols), |(i, j)| gain * if tall { q[(i, j)] } else { q[(j, i)] })
}

impl GeneratorWeights {
    pub fn new(
        config: GeneratorConfig,
        layers: &[LayerSpec],
        schedule: DiffusionSchedule,
        seed: u64,
        targets: Vec<Grid>,
    ) -> Result<Self> {
        config.validate()?;
        crate::qfield::validate_layers(layers)?;
        let (r0, c0, d, e) = (
            config.latent_resolution,
            config.latent_channels,
            config.token_dim,
            config.time_embed_dim,
        );
        for (v, z) in targets.iter().enumerate() {
            if z.resolution != r0 || z.channels != c0 || !z.is_finite() {
                return Err(Error::domain(format!(
                    "target latent {v} must be finite {r0}x{r0}x{c0}, got {}x{}x{}",
                    z.resolution, z.resolution, z.channels
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extra = d - c0;
        let mut stages = Vec::with_capacity(layers.len());
        for (s, layer) in layers.iter().enumerate() {
            let r = layer.resolution;
            if !Resampler::compatible(r0, r) {
                return Err(Error::config(
                    "layers",
                    format!("layer resolution {r} incompatible with latent resolution {r0}"),
                ));
            }
            let prev_res = if s > 0 { Some(layers[s - 1].resolution) } else { None };
            if let Some(p) = prev_res {
                if !Resampler::compatible(p, r) {
                    return Err(Error::config(
                        "layers",
                        format!("consecutive layer resolutions {p} and {r} are incompatible"),
                    ));
                }
            }
            let c = layer.channels;
            let mut embed = Array2::zeros((e + if s > 0 { d } else { 0 }, extra));
            if extra > 0 {
                embed
                    .slice_mut(s![..e, ..])
                    .assign(&gaussian(&mut rng, e, extra, 1.0 / (e.max(1) as f64).sqrt()));
                if s > 0 {
                    embed
                        .slice_mut(s![e.., ..])
                        .assign(&gaussian(&mut rng, d, extra, config.embed_gain / (d as f64).sqrt()));
                }
            }
            let control_embed = gaussian(&mut rng, 1, extra, config.control_gain).row(0).to_owned();
            let inv_d = 1.0 / (d as f64).sqrt();
            let mut wq = gaussian(&mut rng, d, c, config.query_gain * inv_d);
            wq.slice_mut(s![..c0, ..])
                .assign(&orthonormal(&mut rng, c0, c, config.query_gain));
            let wk = gaussian(&mut rng, d, c, config.key_gain * inv_d);
            let wv = gaussian(&mut rng, d, c, config.value_gain * inv_d);
            let wo = gaussian(&mut rng, c, d, config.mix_gain / (c as f64).sqrt());
            let structure = structure_inverse(&wq.slice(s![..c0, ..]).to_owned());
            stages.push(StageWeights {
                layer: *layer,
                embed,
                control_embed,
                wq,
                wk,
                wv,
                wo,
                structure,
                up: Resampler::new(r0, r),
                down: Resampler::new(r, r0),
                from_prev: prev_res.map(|p| Resampler::new(p, r)),
            });
        }
        let steps = schedule.steps;
        let time_embed = Array2::from_shape_fn((steps + 1, e), |(t, i)| {
            let phase = std::f64::consts::PI * t as f64 / steps as f64 * (1 + i / 2) as f64;
            config.time_gain * if i % 2 == 0 { phase.sin() } else { phase.cos() }
        });
        Ok(GeneratorWeights {
            config,
            seed,
            schedule,
            stages,
            time_embed,
            targets,
        })
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.stages.iter().map(|s| s.layer).collect()
    }

    pub fn view_count(&self) -> usize {
        self.targets.len()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.config.latent_resolution, self.config.latent_channels)
    }

    fn check_latent(&self, z: &Grid) -> Result<()> {
        let (r0, c0) = self.latent_shape();
        if z.resolution != r0 || z.channels != c0 {
            return Err(Error::domain(format!(
                "latent must be {r0}x{r0}x{c0}, got {}x{}x{}",
                z.resolution, z.resolution, z.channels
            )));
        }
        Ok(())
    }
}

/// Per-view control maps, one single-channel grid per stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub maps: Vec<Grid>,
}

impl Control {
    pub fn zeros(layers: &[LayerSpec]) -> Self {
        Control {
            maps: layers.iter().map(|l| Grid::zeros(l.resolution, 1)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    /// Tokens X (r² × d).
    pub tokens: Array2<f64>,
    pub q: Grid,
    pub k: Grid,
    pub v: Grid,
    /// Attention output of the token stream, always from this trace's own K, V.
    pub own_attention: Array2<f64>,
    /// Attention output that reaches the prediction (after any substitution).
    pub attention: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrace {
    pub view: usize,
    pub t: usize,
    pub latent: Grid,
    pub stages: Vec<StageTrace>,
    pub z0_hat: Grid,
    pub eps_hat: Grid,
}

/// Keys and values of one trace, per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSnapshot {
    pub keys: Vec<Grid>,
    pub values: Vec<Grid>,
}

impl DenoiseTrace {
    pub fn kv(&self) -> KvSnapshot {
        KvSnapshot {
            keys: self.stages.iter().map(|s| s.k.clone()).collect(),
            values: self.stages.iter().map(|s| s.v.clone()).collect(),
        }
    }

    pub fn queries(&self) -> Vec<Grid> {
        self.stages.iter().map(|s| s.q.clone()).collect()
    }

    /// Softmax attention matrix of stage `s` from its current Q and K.
    pub fn attention_probs(&self, s: usize) -> Array2<f64> {
        let st = &self.stages[s];
        softmax_scores(view(&st.q), view(&st.k))
    }
}

pub(crate) fn view(g: &Grid) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((g.tokens(), g.channels), &g.data).expect("grid shape")
}

fn to_grid(resolution: usize, a: Array2<f64>) -> Grid {
    let channels = a.ncols();
    let data = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    };
    Grid {
        resolution,
        channels,
        data,
    }
}

fn softmax_scores(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut p = q.dot(&k.t());
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = ((x - m) * scale).exp();
            sum += e;
            e
        });
        row /= sum;
    }
    p
}

fn attend(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    softmax_scores(q, k).dot(&v)
}

fn non_finite(what: &str, stage: usize, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} in attention stage {stage}")))
    }
}

/// Runs every stage for view `view` at timestep `t`.
pub fn generator_forward(
    weights: &GeneratorWeights,
    view_index: usize,
    z: &Grid,
    t: usize,
    control: &Control,
) -> Result<DenoiseTrace> {
    weights.check_latent(z)?;
    if view_index >= weights.view_count() {
        return Err(Error::domain(format!(
            "view {view_index} out of range for {} targets",
            weights.view_count()
        )));
    }
    if t > weights.schedule.steps {
        return Err(Error::domain(format!("timestep {t} beyond {}", weights.schedule.steps)));
    }
    if control.maps.len() != weights.stages.len()
        || control
            .maps
            .iter()
            .zip(&weights.stages)
            .any(|(m, s)| m.resolution != s.layer.resolution || m.channels != 1)
    {
        return Err(Error::domain("control maps do not match the generator stages"));
    }
    if !z.is_finite() {
        return Err(Error::numeric("non-finite latent"));
    }
    let cfg = &weights.config;
    let (c0, d, e) = (cfg.latent_channels, cfg.token_dim, cfg.time_embed_dim);
    let zmat = view(z).to_owned();
    let temb = weights.time_embed.row(t);
    let mut prev: Option<Array2<f64>> = None;
    let mut stages = Vec::with_capacity(weights.stages.len());
    for (si, sw) in weights.stages.iter().enumerate() {
        let r = sw.layer.resolution;
        let n = r * r;
        let mut x = Array2::zeros((n, d));
        x.slice_mut(s![.., ..c0]).assign(&sw.up.apply(&zmat));
        if d > c0 {
            let mut extra = x.slice_mut(s![.., c0..]);
            let tvec = temb.dot(&sw.embed.slice(s![..e, ..]));
            extra += &tvec;
            for (mut row, &c) in extra.axis_iter_mut(Axis(0)).zip(&control.maps[si].data) {
                row.scaled_add(c, &sw.control_embed);
            }
            if let (Some(p), Some(rs)) = (&prev, &sw.from_prev) {
                extra += &rs.apply(p).dot(&sw.embed.slice(s![e.., ..]));
            }
        }
        let q = x.dot(&sw.wq);
        let k = x.dot(&sw.wk);
        let v = x.dot(&sw.wv);
        let o = attend(q.view(), k.view(), v.view());
        non_finite("attention output", si, &o)?;
        prev = Some(&x + &o.dot(&sw.wo));
        stages.push(StageTrace {
            tokens: x,
            q: to_grid(r, q),
            k: to_grid(r, k),
            v: to_grid(r, v),
            own_attention: o.clone(),
            attention: o,
        });
    }
    let mut trace = DenoiseTrace {
        view: view_index,
        t,
        latent: z.clone(),
        stages,
        z0_hat: Grid::zeros(z.resolution, c0),
        eps_hat: Grid::zeros(z.resolution, c0),
    };
    finalize(weights, &mut trace)?;
    Ok(trace)
}

/// Recomputes ẑ₀ and ε̂ from the trace's attention outputs.
fn finalize(weights: &GeneratorWeights, trace: &mut DenoiseTrace) -> Result<()> {
    let cfg = &weights.config;
    let c0 = cfg.latent_channels;
    let t = trace.t;
    let mut readout = view(&trace.latent).to_owned();
    let share = cfg.structure_gain;
    for (st, sw) in trace.stages.iter().zip(&weights.stages) {
        let mut mixed = st.attention.dot(&sw.wo.slice(s![.., ..c0]));
        // queries that differ from what the tokens imply move the structure
        let implied = st.tokens.dot(&sw.wq);
        let shift = &view(&st.q) - &implied;
        if shift.iter().any(|&x| x != 0.0) {
            mixed.scaled_add(share, &shift.dot(&sw.structure));
        }
        readout += &sw.down.apply(&mixed);
    }
    let a = weights.schedule.alpha_bar(t);
    let sqrt_a = a.sqrt();
    let gain = cfg.amplitude * weights.schedule.posterior_gain(t, cfg.prior_std);
    let target = &weights.targets[trace.view];
    let z0: Vec<f64> = target
        .data
        .iter()
        .zip(readout.iter())
        .map(|(&zs, &r)| zs + gain * (r / sqrt_a - zs))
        .collect();
    let eps: Vec<f64> = if t == 0 {
        vec![0.0; z0.len()]
    } else {
        let inv = 1.0 / (1.0 - a).sqrt();
        trace
            .latent
            .data
            .iter()
            .zip(&z0)
            .map(|(&z, &x0)| (z - sqrt_a * x0) * inv)
            .collect()
    };
    if z0.iter().chain(&eps).any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite prediction at t={t}")));
    }
    trace.z0_hat.data = z0;
    trace.eps_hat.data = eps;
    Ok(())
}

/// Key/value substitution settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvInjection {
    /// First 1-based denoising step at which substitution applies.
    pub start_step: usize,
    pub layers: Vec<usize>,
}

impl KvInjection {
    pub fn disabled() -> Self {
        KvInjection {
            start_step: 1,
            layers: Vec::new(),
        }
    }

    /// 1-based index of the denoising step that leaves timestep `t`.
    pub fn step_index(steps: usize, t: usize) -> usize {
        steps + 1 - t
    }

    pub fn active(&self, steps: usize, t: usize) -> bool {
        !self.layers.is_empty() && Self::step_index(steps, t) >= self.start_step
    }

    pub fn validate(&self, layers: &[LayerSpec]) -> Result<()> {
        for id in &self.layers {
            if !layers.iter().any(|l| l.layer_id == *id) {
                return Err(Error::config("kv_injection.layers", format!("unknown layer {id}")));
            }
        }
        Ok(())
    }
}

/// Substitutes keys and values from `source` at the configured layers when
/// the trace's step index has reached `start_step`.
pub fn inject_kv(
    weights: &GeneratorWeights,
    edit: &DenoiseTrace,
    source: &KvSnapshot,
    config: &KvInjection,
) -> Result<DenoiseTrace> {
    let layers = weights.layers();
    config.validate(&layers)?;
    let mut out = edit.clone();
    if !config.active(weights.schedule.steps, edit.t) {
        return Ok(out);
    }
    if source.keys.len() != out.stages.len() || source.values.len() != out.stages.len() {
        return Err(Error::domain("key/value snapshot has the wrong stage count"));
    }
    for (si, layer) in layers.iter().enumerate() {
        if !config.layers.contains(&layer.layer_id) {
            continue;
        }
        let st = &mut out.stages[si];
        if !st.k.same_shape(&source.keys[si]) || !st.v.same_shape(&source.values[si]) {
            return Err(Error::domain(format!("key/value shape mismatch at layer {}", layer.layer_id)));
        }
        st.k = source.keys[si].clone();
        st.v = source.values[si].clone();
        st.attention = attend(view(&st.q), view(&st.k), view(&st.v));
    }
    finalize(weights, &mut out)?;
    Ok(out)
}

/// Returns the query grids of every layer.
pub fn extract_queries(trace: &DenoiseTrace) -> Vec<Grid> {
    trace.queries()
}

/// Overwrites every layer's queries and recomputes the attention outputs
/// that reach the prediction.
pub fn direct_replace(weights: &GeneratorWeights, trace: &DenoiseTrace, rendered: &[Grid]) -> Result<DenoiseTrace> {
    check_rendered(trace, rendered)?;
    let mut out = trace.clone();
    for (st, q) in out.stages.iter_mut().zip(rendered) {
        if st.q == *q {
            continue;
        }
        st.q = q.clone();
        st.attention = attend(view(&st.q), view(&st.k), view(&st.v));
    }
    finalize(weights, &mut out)?;
    Ok(out)
}

fn check_rendered(trace: &DenoiseTrace, rendered: &[Grid]) -> Result<()> {
    if rendered.len() != trace.stages.len() {
        return Err(Error::domain(format!(
            "expected {} rendered query maps, got {}",
            trace.stages.len(),
            rendered.len()
        )));
    }
    for (l, (st, q)) in trace.stages.iter().zip(rendered).enumerate() {
        if !st.q.same_shape(q) {
            return Err(Error::domain(format!(
                "rendered map {l} is {}x{}x{}, expected {}x{}x{}",
                q.resolution, q.resolution, q.channels, st.q.resolution, st.q.resolution, st.q.channels
            )));
        }
    }
    Ok(())
}

/// `Σ_ℓ ‖Q_ℓ − rendered_ℓ‖²` and its gradient with respect to the trace's
/// latent, by reverse-mode differentiation through the token stream.
pub fn query_loss_gradient(weights: &GeneratorWeights, trace: &DenoiseTrace, rendered: &[Grid]) -> Result<(f64, Grid)> {
    check_rendered(trace, rendered)?;
    let cfg = &weights.config;
    let (c0, d, e) = (cfg.latent_channels, cfg.token_dim, cfg.time_embed_dim);
    let (r0, _) = weights.latent_shape();
    let mut gz = Array2::<f64>::zeros((r0 * r0, c0));
    let mut loss = 0.0;
    // gradient with respect to the previous stage's output tokens
    let mut g_out: Option<Array2<f64>> = None;
    let mut stage_norms = Vec::with_capacity(trace.stages.len());
    for si in (0..trace.stages.len()).rev() {
        let st = &trace.stages[si];
        let sw = &weights.stages[si];
        let (q, k, v) = (view(&st.q), view(&st.k), view(&st.v));
        let diff = &q - &view(&rendered[si]);
        loss += diff.iter().map(|x| x * x).sum::<f64>();
        let mut gq = diff * 2.0;
        let mut gx = Array2::<f64>::zeros((q.nrows(), d));
        if let Some(gg) = g_out.take() {
            gx += &gg;
            let go = gg.dot(&sw.wo.t());
            let p = softmax_scores(q, k);
            let mut gl = go.dot(&v.t());
            let gv = p.t().dot(&go);
            let scale = 1.0 / (q.ncols() as f64).sqrt();
            for (mut gr, pr) in gl.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot: f64 = gr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                gr.zip_mut_with(&pr, |g, &pv| *g = pv * (*g - dot) * scale);
            }
            gq += &gl.dot(&k);
            let gk = gl.t().dot(&q);
            gx += &gk.dot(&sw.wk.t());
            gx += &gv.dot(&sw.wv.t());
        }
        gx += &gq.dot(&sw.wq.t());
        stage_norms.push((sw.layer.layer_id, gx.iter().map(|x| x * x).sum::<f64>().sqrt()));
        gz += &sw.up.adjoint(&gx.slice(s![.., ..c0]).to_owned());
        if let Some(rs) = &sw.from_prev {
            if d > c0 {
                let g_prev = gx.slice(s![.., c0..]).dot(&sw.embed.slice(s![e.., ..]).t());
                g_out = Some(rs.adjoint(&g_prev));
            }
        }
    }
    if !loss.is_finite() || gz.iter().any(|x| !x.is_finite()) {
        let diag: Vec<String> = stage_norms
            .iter()
            .rev()
            .map(|(id, n)| format!("layer {id}: |grad|={n:e}"))
            .collect();
        return Err(Error::numeric(format!("non-finite guidance gradient ({})", diag.join(", "))));
    }
    Ok((loss, to_grid(r0, gz)))
}

/// One soft guidance step `z − α ∇_z Σ_ℓ ‖Q_ℓ(z) − Q̂_ℓ‖²`.
pub fn guidance_update(
    weights: &GeneratorWeights,
    view_index: usize,
    z: &Grid,
    t: usize,
    control: &Control,
    rendered: &[Grid],
    alpha: f64,
) -> Result<Grid> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::domain(format!("guidance strength must be non-negative, got {alpha}")));
    }
    let trace = generator_forward(weights, view_index, z, t, control)?;
    let (_, grad) = query_loss_gradient(weights, &trace, rendered)?;
    let data = z.data.iter().zip(&grad.data).map(|(a, g)| a - alpha * g).collect();
    Ok(Grid {
        resolution: z.resolution,
        channels: z.channels,
        data,
    })
}

/// Deterministic DDIM update from `t` to `t − 1`.
pub fn ddim_step(z: &Grid, trace: &DenoiseTrace, schedule: &DiffusionSchedule, t: usize) -> Result<Grid> {
    if t == 0 || t > schedule.steps {
        return Err(Error::domain(format!("cannot step from timestep {t}")));
    }
    if !z.same_shape(&trace.z0_hat) {
        return Err(Error::domain("latent and trace shapes differ"));
    }
    let a = schedule.alpha_bar(t - 1);
    let (ca, cn) = (a.sqrt(), (1.0 - a).sqrt());
    let data: Vec<f64> = trace
        .z0_hat
        .data
        .iter()
        .zip(&trace.eps_hat.data)
        .map(|(x0, e)| ca * x0 + cn * e)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite latent after step from {t}")));
    }
    Ok(Grid {
        resolution: z.resolution,
        channels: z.channels,
        data,
    })
}
