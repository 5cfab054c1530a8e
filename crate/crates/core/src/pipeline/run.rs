//! Scenario setup and event execution.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::schedule::{build_schedule, Event, IntervalSchedule};
use super::RunMode;
use crate::error::{Error, Result};
use crate::geometry::{Camera, FourierFeatures, SyntheticScene, Vec3};
use crate::grid::Grid;
use crate::metrics::{self, ConsistencyReport, ReportRow};
use crate::qfield::{render_all_layers, train_qnerf, DepthSupervision, FeatureField, LayerSpec, QuerySet};
use crate::store::{self, RunConfig};
use crate::toydiff::{
    ddim_step, direct_replace, generator_forward, guidance_update, inject_kv, make_schedule, Control,
    DenoiseTrace, GeneratorWeights, KvInjection, KvSnapshot,
};
use crate::volrender::{render_map, PointSource};

/// Fourier noise carried by the edited scene's density, so the initial
/// latents of different views agree where they see the same surface.
struct NoiseSource<'a> {
    scene: &'a SyntheticScene,
    noise: &'a FourierFeatures,
}

impl PointSource for NoiseSource<'_> {
    fn layer_channels(&self, _layer: usize) -> usize {
        self.noise.channels()
    }

    fn eval_point(&self, x: &Vec3, _layer: usize, feature: &mut [f64]) -> f64 {
        feature.iter_mut().for_each(|f| *f = 0.0);
        self.noise.eval_into(x, 1.0, feature);
        self.scene.density(x)
    }

    fn density_at(&self, x: &Vec3) -> f64 {
        self.scene.density(x)
    }
}

/// Everything a run needs that does not change while it executes.
pub struct Scenario {
    pub config: RunConfig,
    pub layers: Vec<LayerSpec>,
    pub cameras: Vec<Camera>,
    pub original: SyntheticScene,
    pub edited: SyntheticScene,
    pub schedule: IntervalSchedule,
    /// Generator anchored to the edited per-view targets.
    pub generator: GeneratorWeights,
    pub controls: Vec<Control>,
    /// Initial latents z_T, shared by the original and edited trajectories.
    pub noise: Vec<Grid>,
    /// Keys and values of the original trajectory, indexed `[t][view]`.
    pub source_kv: Vec<Vec<KvSnapshot>>,
    pub depth: DepthSupervision,
    pub kv: KvInjection,
}

fn gaussian_grid(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Grid {
    let data = (0..r * r * c).map(|_| StandardNormal.sample(rng)).collect();
    Grid::from_data(r, c, data).expect("shape")
}

impl Scenario {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_specs();
        let cameras = config.cameras()?;
        if cameras.len() < 2 {
            return Err(Error::config("cameras.count", "at least 2 views are required"));
        }
        let (original, edited) = config.scenes()?;
        let schedule = build_schedule(config.timesteps, config.tau)?;
        let n = config.sampling.n_samples;
        let g = &config.generator;
        let (r0, c0) = (g.latent_resolution, g.latent_channels);

        // fixed projection from layer-0 scene features to latent channels
        let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.generator);
        rng.set_stream(1);
        let c_in = layers[0].channels;
        let proj: Vec<f64> = (0..c_in * c0)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v / (c_in as f64).sqrt()
            })
            .collect();
        let project = |scene: &SyntheticScene| -> Result<Vec<Grid>> {
            cameras
                .iter()
                .map(|cam| {
                    let m = render_map(scene, cam, 0, r0, n, None)?;
                    let mut data = vec![0.0; r0 * r0 * c0];
                    for (k, out) in data.chunks_mut(c0).enumerate() {
                        let f = &m.features[k * c_in..(k + 1) * c_in];
                        for (o, val) in out.iter_mut().enumerate() {
                            *val = (0..c_in).map(|i| f[i] * proj[i * c0 + o]).sum();
                        }
                    }
                    Grid::from_data(r0, c0, data)
                })
                .collect()
        };
        let base_edit = project(&edited)?;
        let base_orig = project(&original)?;
        let rms = {
            let all: Vec<f64> = base_edit.iter().flat_map(|g| g.data.iter().copied()).collect();
            (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).sqrt().max(1e-12)
        };
        rng.set_stream(2);
        let perturb: Vec<Grid> = (0..cameras.len()).map(|_| gaussian_grid(&mut rng, r0, c0)).collect();
        let targets = |base: &[Grid]| -> Vec<Grid> {
            base.iter()
                .zip(&perturb)
                .map(|(b, d)| Grid {
                    resolution: r0,
                    channels: c0,
                    data: b.data.iter().zip(&d.data).map(|(x, e)| x / rms + config.eta * e).collect(),
                })
                .collect()
        };

        let steps = make_schedule(config.timesteps)?;
        let generator =
            GeneratorWeights::new(g.clone(), &layers, steps.clone(), config.seeds.generator, targets(&base_edit))?;
        let source_gen =
            GeneratorWeights::new(g.clone(), &layers, steps, config.seeds.generator, targets(&base_orig))?;

        let control_maps = |scene: &SyntheticScene| -> Result<Vec<Control>> {
            cameras
                .iter()
                .map(|cam| {
                    let maps = layers
                        .iter()
                        .map(|l| {
                            let m = render_map(scene, cam, 0, l.resolution, n, None)?;
                            let data = m
                                .depth
                                .iter()
                                .zip(&m.opacity)
                                .map(|(d, o)| o * (d - config.cameras.radius))
                                .collect();
                            Grid::from_data(l.resolution, 1, data)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Control { maps })
                })
                .collect()
        };
        let controls = control_maps(&edited)?;
        let source_controls = control_maps(&original)?;

        rng.set_stream(3);
        let field = FourierFeatures::new(c0, config.scene.feature_frequency, &mut rng);
        let noise = Self::initial_noise(&edited, &field, &cameras, r0, n)?;

        // original trajectory from the same noise, recording keys and values
        let t_max = config.timesteps;
        let per_view: Vec<Vec<KvSnapshot>> = (0..cameras.len())
            .into_par_iter()
            .map(|v| {
                let mut z = noise[v].clone();
                let mut kv = Vec::with_capacity(t_max + 1);
                for t in (0..=t_max).rev() {
                    let tr = generator_forward(&source_gen, v, &z, t, &source_controls[v])?;
                    kv.push(tr.kv());
                    if t > 0 {
                        z = ddim_step(&z, &tr, &source_gen.schedule, t)?;
                    }
                }
                kv.reverse();
                Ok(kv)
            })
            .collect::<Result<_>>()?;
        let source_kv = (0..=t_max)
            .map(|t| per_view.iter().map(|kv| kv[t].clone()).collect())
            .collect();

        let depth = DepthSupervision::from_scenes(&original, &edited, &cameras, &layers, n)?;
        let kv = config.kv();
        kv.validate(&layers)?;
        Ok(Scenario {
            config: config.clone(),
            layers,
            cameras,
            original,
            edited,
            schedule,
            generator,
            controls,
            noise,
            source_kv,
            depth,
            kv,
        })
    }

    /// Noise rendered through the edited scene with the far-plane value as
    /// background, standardised per channel over all views.
    fn initial_noise(
        scene: &SyntheticScene,
        field: &FourierFeatures,
        cameras: &[Camera],
        r: usize,
        n: usize,
    ) -> Result<Vec<Grid>> {
        let src = NoiseSource { scene, noise: field };
        let c = field.channels();
        let mut maps = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let m = render_map(&src, cam, 0, r, n, None)?;
            let mut data = m.features;
            for k in 0..r * r {
                let ray = cam.ray_for_cell(k % r, k / r, r)?;
                let mut bg = vec![0.0; c];
                field.eval_into(&ray.at(ray.t_far), 1.0 - m.opacity[k], &mut bg);
                for (d, b) in data[k * c..(k + 1) * c].iter_mut().zip(&bg) {
                    *d += b;
                }
            }
            maps.push(data);
        }
        let count = (maps.len() * r * r) as f64;
        for ch in 0..c {
            let vals = || maps.iter().flat_map(|m| m.iter().skip(ch).step_by(c));
            let mean = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let sd = var.sqrt().max(1e-12);
            for m in &mut maps {
                m.iter_mut().skip(ch).step_by(c).for_each(|v| *v = (*v - mean) / sd);
            }
        }
        maps.into_iter().map(|d| Grid::from_data(r, c, d)).collect()
    }

    pub fn view_count(&self) -> usize {
        self.cameras.len()
    }

    /// Forward pass at `t` with key/value injection applied.
    pub fn trace(&self, view: usize, z: &Grid, t: usize) -> Result<DenoiseTrace> {
        let tr = generator_forward(&self.generator, view, z, t, &self.controls[view])?;
        inject_kv(&self.generator, &tr, &self.source_kv[t][view], &self.kv)
    }

    fn step(&self, view: usize, z: &Grid, t: usize, guide: Guide) -> Result<Grid> {
        let sched = &self.generator.schedule;
        match guide {
            Guide::None => ddim_step(z, &self.trace(view, z, t)?, sched, t),
            Guide::Soft(rendered) => {
                let z = guidance_update(
                    &self.generator,
                    view,
                    z,
                    t,
                    &self.controls[view],
                    rendered,
                    self.config.alpha,
                )?;
                ddim_step(&z, &self.trace(view, &z, t)?, sched, t)
            }
            Guide::Direct(rendered) => {
                let tr = direct_replace(&self.generator, &self.trace(view, z, t)?, rendered)?;
                ddim_step(z, &tr, sched, t)
            }
        }
    }

    pub fn extract(&self, latents: &[Grid], t: usize) -> Result<QuerySet> {
        let views = latents
            .par_iter()
            .enumerate()
            .map(|(v, z)| Ok(self.trace(v, z, t)?.queries()))
            .collect::<Result<_>>()?;
        Ok(QuerySet { timestep: t, views })
    }

    fn fresh_field(&self) -> Result<FeatureField> {
        FeatureField::new(self.config.field_config(), self.layers.clone(), self.config.seeds.training)
    }

    fn train(&self, init: FeatureField, queries: &QuerySet, k: usize) -> Result<(FeatureField, Vec<f64>)> {
        let state = train_qnerf(
            init,
            queries,
            &self.cameras,
            Some(&self.depth),
            &self.config.train_config(),
            self.config.seeds.training.wrapping_add(k as u64),
        )?;
        // keep exactly what a checkpoint holds
        Ok((state.field.rounded_to_f32(), state.history))
    }

    fn render(&self, field: &FeatureField) -> Result<Vec<Vec<Grid>>> {
        self.cameras
            .iter()
            .map(|cam| render_all_layers(field, cam, self.config.sampling.n_samples))
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Guide<'a> {
    None,
    Soft(&'a [Grid]),
    Direct(&'a [Grid]),
}

/// Where `Train` events get their field from.
pub enum Trainer {
    /// Warm-start from the previous interval's field.
    Progressive,
    /// Fields fitted beforehand, indexed by training number − 1.
    Precomputed(Vec<FeatureField>),
    /// No field; guided steps are not allowed.
    Disabled,
}

#[derive(Debug, Clone)]
pub struct IntervalArtifacts {
    /// 1-based extraction index.
    pub index: usize,
    pub queries: QuerySet,
    pub field: Option<FeatureField>,
    pub history: Vec<f64>,
}

pub struct PipelineState {
    pub t: usize,
    pub latents: Vec<Grid>,
    pub snapshots: BTreeMap<usize, Vec<Grid>>,
    pub field: Option<FeatureField>,
    pub trainings: usize,
    pub interval: usize,
    pub artifacts: Vec<IntervalArtifacts>,
    rendered: Option<Vec<Vec<Grid>>>,
}

impl PipelineState {
    pub fn new(scn: &Scenario) -> Self {
        PipelineState {
            t: scn.config.timesteps,
            latents: scn.noise.clone(),
            snapshots: BTreeMap::new(),
            field: None,
            trainings: 0,
            interval: 0,
            artifacts: Vec::new(),
            rendered: None,
        }
    }

    fn expect_t(&self, t: usize, e: &Event) -> Result<()> {
        if self.t != t {
            return Err(Error::domain(format!("event `{e}` at timestep {}", self.t)));
        }
        Ok(())
    }
}

/// Executes one interval's events in order, appending each to `log` once
/// it has completed.
pub fn run_interval(
    scn: &Scenario,
    state: &mut PipelineState,
    segment: &[Event],
    mode: RunMode,
    trainer: &Trainer,
    log: &mut Vec<Event>,
) -> Result<()> {
    for e in segment {
        run_event(scn, state, e, mode, trainer).map_err(|err| err.in_interval(state.interval))?;
        log.push(*e);
    }
    state.interval += 1;
    Ok(())
}

fn run_event(scn: &Scenario, state: &mut PipelineState, e: &Event, mode: RunMode, trainer: &Trainer) -> Result<()> {
    match *e {
        Event::Guided(t) | Event::Free(t) => {
            state.expect_t(t, e)?;
            if let Event::Guided(_) = e {
                let field = state
                    .field
                    .as_ref()
                    .ok_or_else(|| Error::domain("guided step before any field was trained"))?;
                if state.rendered.is_none() {
                    state.rendered = Some(scn.render(field)?);
                }
            }
            let rendered = state.rendered.as_deref();
            let next = state
                .latents
                .par_iter()
                .enumerate()
                .map(|(v, z)| {
                    let guide = match (e, rendered) {
                        (Event::Guided(_), Some(r)) if mode == RunMode::DirectInjection => Guide::Direct(&r[v]),
                        (Event::Guided(_), Some(r)) => Guide::Soft(&r[v]),
                        _ => Guide::None,
                    };
                    scn.step(v, z, t, guide)
                })
                .collect::<Result<Vec<_>>>()?;
            state.latents = next;
            state.t = t - 1;
        }
        Event::Store(t) => {
            state.expect_t(t, e)?;
            state.snapshots.insert(t, state.latents.clone());
        }
        Event::Extract(t) => {
            state.expect_t(t, e)?;
            let queries = scn.extract(&state.latents, t)?;
            state.artifacts.push(IntervalArtifacts {
                index: state.artifacts.len() + 1,
                queries,
                field: None,
                history: Vec::new(),
            });
        }
        Event::Train(k) => {
            if k != state.trainings + 1 {
                return Err(Error::domain(format!("train {k} after {} trainings", state.trainings)));
            }
            let art = state
                .artifacts
                .last_mut()
                .filter(|a| a.field.is_none())
                .ok_or_else(|| Error::domain("train event without fresh queries"))?;
            let (field, history) = match trainer {
                Trainer::Progressive => {
                    let init = match state.field.take() {
                        Some(f) => f,
                        None => scn.fresh_field()?,
                    };
                    scn.train(init, &art.queries, k)?
                }
                Trainer::Precomputed(fields) => {
                    let f = fields
                        .get(k - 1)
                        .ok_or_else(|| Error::domain(format!("no precomputed field {k}")))?;
                    (f.clone(), Vec::new())
                }
                Trainer::Disabled => return Err(Error::domain("training is disabled in this mode")),
            };
            art.field = Some(field.clone());
            art.history = history;
            state.field = Some(field);
            state.trainings = k;
            state.rendered = None;
        }
        Event::Rewind(t) => {
            let snap = state
                .snapshots
                .get(&t)
                .ok_or_else(|| Error::domain(format!("rewind to {t} without a stored snapshot")))?;
            state.latents = snap.clone();
            state.t = t;
        }
        Event::Finish(t) => state.expect_t(t, e)?,
    }
    Ok(())
}

/// Free steps from T to 0 with extractions at the schedule's extraction
/// timesteps.
pub fn unguided_events(schedule: &IntervalSchedule) -> Vec<Event> {
    let extract = schedule.extraction_timesteps();
    let mut out = Vec::new();
    for t in (1..=schedule.steps).rev() {
        out.push(Event::Free(t));
        if extract.contains(&(t - 1)) {
            out.push(Event::Extract(t - 1));
        }
    }
    out.push(Event::Finish(0));
    out
}

pub struct RunArtifacts {
    pub mode: RunMode,
    pub events: Vec<Event>,
    /// Events of the offline unguided pass (non-progressive mode only).
    pub offline_events: Vec<Event>,
    pub intervals: Vec<IntervalArtifacts>,
    /// Offline fields, when the mode fits them ahead of the run.
    pub offline_fields: Vec<FeatureField>,
    /// Final per-view latents z₀.
    pub latents: Vec<Grid>,
    pub final_queries: QuerySet,
    pub targets: Vec<Grid>,
    pub report: ConsistencyReport,
}

impl RunArtifacts {
    /// Mean over views of ‖z₀ − z₀*‖.
    pub fn target_deviation(&self) -> f64 {
        let sum: f64 = self
            .latents
            .iter()
            .zip(&self.targets)
            .map(|(z, t)| z.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum();
        sum / self.latents.len() as f64
    }

    /// Final-row consistency averaged over layers.
    pub fn final_consistency(&self) -> f64 {
        let row = self.report.final_row().expect("report has a final row");
        row.consistency.iter().sum::<f64>() / row.consistency.len() as f64
    }

    /// Writes every artifact of the run below `dir`.
    pub fn write(&self, config: &RunConfig, dir: &Path) -> Result<()> {
        write_log(&dir.join("events.log"), &self.events)?;
        if !self.offline_events.is_empty() {
            write_log(&dir.join("offline.log"), &self.offline_events)?;
        }
        for art in &self.intervals {
            let sub = dir.join(format!("interval_{}", art.index));
            if let Some(f) = &art.field {
                store::save_checkpoint(f, &sub.join("qnerf.bin"))?;
            }
            store::dump_queries(&art.queries, &sub.join("queries.bin"))?;
        }
        store::dump_queries(&self.final_queries, &dir.join("final/queries.bin"))?;
        store::save_latents(&self.latents, &dir.join("final/latents.bin"))?;
        metrics::write_report(&self.report, &self.final_queries, dir)?;
        let mut resolved = config.clone();
        resolved.mode = self.mode;
        resolved.output = dir.display().to_string();
        store::write_bytes(&dir.join("run.json"), resolved.to_json().as_bytes())
    }
}

pub fn write_log(path: &Path, events: &[Event]) -> Result<()> {
    let text: String = events.iter().map(|e| format!("{e}\n")).collect();
    store::write_bytes(path, text.as_bytes())
}

/// Runs `mode` end to end. Executed events are appended to `log` as they
/// complete, so a failed run still leaves its partial log to the caller.
pub fn run_pipeline(scn: &Scenario, mode: RunMode, log: &mut Vec<Event>) -> Result<RunArtifacts> {
    let mut offline_events = Vec::new();
    let mut offline_fields = Vec::new();
    let mut state = PipelineState::new(scn);
    match mode {
        RunMode::UnguidedBaseline => {
            run_interval(scn, &mut state, &unguided_events(&scn.schedule), mode, &Trainer::Disabled, log)?;
        }
        RunMode::Full | RunMode::DirectInjection => {
            for seg in &scn.schedule.intervals {
                run_interval(scn, &mut state, seg, mode, &Trainer::Progressive, log)?;
            }
        }
        RunMode::NonProgressive => {
            let mut pre = PipelineState::new(scn);
            let events = unguided_events(&scn.schedule);
            run_interval(scn, &mut pre, &events, mode, &Trainer::Disabled, &mut offline_events)?;
            let fresh = scn.fresh_field()?;
            offline_fields = pre
                .artifacts
                .iter()
                .map(|a| scn.train(fresh.clone(), &a.queries, a.index).map(|(f, _)| f))
                .collect::<Result<_>>()?;
            let trainer = Trainer::Precomputed(offline_fields.clone());
            for seg in &scn.schedule.intervals {
                run_interval(scn, &mut state, seg, mode, &trainer, log)?;
            }
        }
    }
    let final_queries = scn.extract(&state.latents, 0)?;
    let report = build_report(scn, &state.artifacts, &final_queries, state.field.as_ref())?;
    Ok(RunArtifacts {
        mode,
        events: log.clone(),
        offline_events,
        intervals: state.artifacts,
        offline_fields,
        latents: state.latents,
        final_queries,
        targets: scn.generator.targets.clone(),
        report,
    })
}

/// Queries as they read back from a dump.
fn rounded(queries: &QuerySet) -> QuerySet {
    let mut q = queries.clone();
    q.views
        .iter_mut()
        .flatten()
        .for_each(|g| g.data.iter_mut().for_each(|v| *v = *v as f32 as f64));
    q
}

/// One report row. Queries are rounded to 32-bit floats first so a report
/// rebuilt from stored artifacts is identical to the one of the run.
pub fn report_row(
    config: &RunConfig,
    edited: &SyntheticScene,
    cameras: &[Camera],
    depth: &DepthSupervision,
    interval: Option<usize>,
    queries: &QuerySet,
    field: Option<&FeatureField>,
) -> Result<ReportRow> {
    let queries = rounded(queries);
    let n = config.sampling.n_samples;
    let consistency = metrics::cross_view_consistency(
        &queries,
        edited,
        cameras,
        config.sampling.metric_samples,
        config.seeds.sampling,
    )?;
    let (depth_rmse, feature_psnr) = match field {
        Some(f) => {
            let rmse = metrics::depth_rmse(f, depth, cameras, n)?;
            let rendered = cameras
                .iter()
                .map(|c| render_all_layers(f, c, n))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect::<Vec<_>>();
            let reference: Vec<Grid> = queries.views.iter().flatten().cloned().collect();
            (Some(rmse), Some(metrics::mean_psnr(&rendered, &reference)?))
        }
        None => (None, None),
    };
    Ok(ReportRow {
        interval,
        timestep: queries.timestep,
        consistency,
        depth_rmse,
        feature_psnr,
    })
}

fn build_report(
    scn: &Scenario,
    intervals: &[IntervalArtifacts],
    final_queries: &QuerySet,
    final_field: Option<&FeatureField>,
) -> Result<ConsistencyReport> {
    let row = |interval: Option<usize>, queries: &QuerySet, field: Option<&FeatureField>| {
        report_row(&scn.config, &scn.edited, &scn.cameras, &scn.depth, interval, queries, field)
    };
    let mut rows = intervals
        .iter()
        .map(|a| row(Some(a.index), &a.queries, a.field.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    rows.push(row(None, final_queries, final_field)?);
    Ok(ConsistencyReport {
        layer_ids: scn.layers.iter().map(|l| l.layer_id).collect(),
        rows,
    })
}
