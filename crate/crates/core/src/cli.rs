//! Command-line runner.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::{self, ConsistencyReport};
use crate::pipeline::{report_row, run_pipeline, write_log, RunArtifacts, RunMode, Scenario};
use crate::qfield::{render_all_layers, DepthSupervision, FeatureField, QuerySet};
use crate::store::{self, parse_config_with, parse_override, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "qnerf", version, about = "Multi-view query consolidation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; absent keys take profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run mode: full, unguided_baseline, direct_injection, non_progressive.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Dotted-key override, e.g. `--set qnerf.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (defaults to the config's `output`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 picks the core count. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline and write artifacts and metrics.
    Run,
    /// Run all four modes with shared seeds and compare them.
    Ablate,
    /// Print the interval schedule for the configured T and τ.
    Schedule,
    /// Render a checkpoint's queries from every configured camera.
    RenderField {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recompute `metrics.csv` from a finished run directory.
    Metrics {
        #[arg(long)]
        run: PathBuf,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => "{}".to_string(),
        };
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(m) = &self.mode {
            overrides.push(("mode".into(), m.clone()));
        }
        let cfg = parse_config_with(&text, &overrides)?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output))
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one cause line (plus the seeds when a config was
/// resolved) to `err`.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.common.threads > 0 {
        // an already-initialised pool is fine: results are thread-count independent
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build_global();
    }
    let cfg = match cli.common.load() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
    };
    match dispatch(&cli, &cfg, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            let _ = writeln!(err, "seeds: {}", cfg.seeds.describe());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = cli.common.out_dir(cfg);
    match &cli.command {
        Command::Run => {
            let arts = run_mode(cfg, cfg.mode, &dir)?;
            let _ = writeln!(out, "{}", summary_line(&arts));
            Ok(())
        }
        Command::Ablate => ablate(cfg, &dir, out),
        Command::Schedule => {
            let s = crate::pipeline::build_schedule(cfg.timesteps, cfg.tau)?;
            let _ = write!(out, "{}", s.lines());
            Ok(())
        }
        Command::RenderField { checkpoint } => render_field(cfg, checkpoint, &dir, out),
        Command::Metrics { run } => recompute_metrics(run, cli.common.out.as_deref(), out),
    }
}

/// Runs one mode into `dir`. On failure the partial event log is flushed.
pub fn run_mode(cfg: &RunConfig, mode: RunMode, dir: &Path) -> Result<RunArtifacts> {
    let scn = Scenario::new(cfg)?;
    let mut log = Vec::new();
    match run_pipeline(&scn, mode, &mut log) {
        Ok(arts) => {
            arts.write(cfg, dir)?;
            Ok(arts)
        }
        Err(e) => {
            let _ = write_log(&dir.join("events.log"), &log);
            Err(e)
        }
    }
}

fn summary_line(arts: &RunArtifacts) -> String {
    format!(
        "mode={} consistency={:.6} target_deviation={:.6} extractions={}",
        arts.mode,
        arts.final_consistency(),
        arts.target_deviation(),
        arts.intervals.len()
    )
}

fn blank(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ablate(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let scn = Scenario::new(cfg)?;
    let mut csv = String::from("mode,consistency,depth_rmse,feature_psnr,target_deviation\n");
    let mut manifest = serde_json::Map::new();
    for mode in RunMode::ALL {
        let mut log = Vec::new();
        let sub = dir.join(mode.name());
        let arts = run_pipeline(&scn, mode, &mut log).inspect_err(|_| {
            let _ = write_log(&sub.join("events.log"), &log);
        })?;
        arts.write(cfg, &sub)?;
        let row = arts.report.final_row().expect("final row");
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            mode,
            arts.final_consistency(),
            blank(row.depth_rmse),
            blank(row.feature_psnr),
            arts.target_deviation()
        ));
        manifest.insert(
            mode.name().into(),
            serde_json::to_value(cfg.seeds).expect("seeds serialise"),
        );
    }
    store::write_bytes(&dir.join("ablation.csv"), csv.as_bytes())?;
    let manifest = serde_json::to_string_pretty(&serde_json::json!({ "seeds": manifest })).expect("json");
    store::write_bytes(&dir.join("ablation.json"), manifest.as_bytes())?;
    let _ = write!(out, "{csv}");
    Ok(())
}

fn render_field(cfg: &RunConfig, checkpoint: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let field = store::load_checkpoint(checkpoint)?;
    let cameras = cfg.cameras()?;
    let views = cameras
        .iter()
        .map(|c| render_all_layers(&field, c, cfg.sampling.n_samples))
        .collect::<Result<Vec<_>>>()?;
    let set = QuerySet { timestep: 0, views };
    store::dump_queries(&set, &dir.join("queries.bin"))?;
    for (v, maps) in set.views.iter().enumerate() {
        for (map, l) in maps.iter().zip(&field.layers) {
            store::write_bytes(&dir.join(format!("view{v}_layer{}.pgm", l.layer_id)), &metrics::pgm_bytes(map))?;
        }
    }
    let _ = writeln!(out, "rendered {} views x {} layers", set.view_count(), field.layers.len());
    Ok(())
}

/// Rebuilds the report of a finished run from its stored artifacts.
fn recompute_metrics(run: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let path = run.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg = parse_config_with(&text, &[])?;
    let layers = cfg.layer_specs();
    let cameras = cfg.cameras()?;
    let (original, edited) = cfg.scenes()?;
    let depth =
        DepthSupervision::from_scenes(&original, &edited, &cameras, &layers, cfg.sampling.n_samples)?;
    let row = |interval: Option<usize>, queries: &QuerySet, field: Option<&FeatureField>| report_row(&cfg, &edited, &cameras, &depth, interval, queries, field);
    let mut rows = Vec::new();
    let mut last_field = None;
    for k in 1.. {
        let sub = run.join(format!("interval_{k}"));
        if !sub.join("queries.bin").exists() {
            break;
        }
        let queries = store::load_queries(&sub.join("queries.bin"), Some(&layers))?;
        let ckpt = sub.join("qnerf.bin");
        let field = if ckpt.exists() { Some(store::load_checkpoint(&ckpt)?) } else { None };
        rows.push(row(Some(k), &queries, field.as_ref())?);
        if field.is_some() {
            last_field = field;
        }
    }
    let final_queries = store::load_queries(&run.join("final/queries.bin"), Some(&layers))?;
    rows.push(row(None, &final_queries, last_field.as_ref())?);
    let report = ConsistencyReport {
        layer_ids: layers.iter().map(|l| l.layer_id).collect(),
        rows,
    };
    metrics::write_report(&report, &final_queries, out_dir.unwrap_or(run))?;
    let _ = write!(out, "{}", report.to_csv());
    Ok(())
}
