mod common;

use qnerf::cli::run_mode;
use qnerf::pipeline::{build_schedule, final_steps, run_pipeline, Event, RunMode, Scenario};
use qnerf::store;

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn runs_are_bit_identical_across_thread_counts() {
    let cfg = common::tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    in_pool(1, || run_mode(&cfg, RunMode::Full, a.path()).unwrap());
    in_pool(4, || run_mode(&cfg, RunMode::Full, b.path()).unwrap());
    let (sa, sb) = (common::snapshot(a.path()), common::snapshot(b.path()));
    assert!(sa.contains_key("metrics.csv"));
    assert!(sa.contains_key("interval_1/qnerf.bin"));
    assert!(sa.contains_key("final/queries.bin"));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    // run.json records the output directory, which differs by construction
    for (k, v) in sa.iter().filter(|(k, _)| *k != "run.json") {
        assert!(v == &sb[k], "{k} differs");
    }
}

#[test]
fn full_run_follows_its_schedule() {
    let cfg = common::tiny();
    let scn = Scenario::new(&cfg).unwrap();
    let mut log = Vec::new();
    let arts = run_pipeline(&scn, RunMode::Full, &mut log).unwrap();
    let sched = build_schedule(cfg.timesteps, cfg.tau).unwrap();
    assert_eq!(log, sched.events().copied().collect::<Vec<_>>());
    assert_eq!(arts.events, log);
    assert_eq!(final_steps(&log), (1..=cfg.timesteps).rev().collect::<Vec<_>>());
    assert_eq!(arts.intervals.len(), sched.training_count());
    assert!(arts.intervals.iter().all(|i| i.field.is_some()));
    // one report row per extraction plus the final state
    assert_eq!(arts.report.rows.len(), arts.intervals.len() + 1);
    assert_eq!(arts.final_queries.timestep, 0);
    assert!(arts.target_deviation().is_finite());
}

#[test]
fn baseline_has_no_fields_and_no_guided_steps() {
    let cfg = common::tiny();
    let scn = Scenario::new(&cfg).unwrap();
    let mut log = Vec::new();
    let arts = run_pipeline(&scn, RunMode::UnguidedBaseline, &mut log).unwrap();
    assert!(!log.iter().any(|e| matches!(e, Event::Guided(_) | Event::Train(_))));
    assert_eq!(final_steps(&log), (1..=cfg.timesteps).rev().collect::<Vec<_>>());
    assert!(arts.intervals.iter().all(|i| i.field.is_none()));
    let row = arts.report.final_row().unwrap();
    assert!(row.depth_rmse.is_none() && row.feature_psnr.is_none());
    let csv = arts.report.to_csv();
    assert!(csv.lines().nth(1).unwrap().ends_with(",,"), "{csv}");
}

#[test]
fn non_progressive_logs_its_offline_pass() {
    let cfg = common::tiny();
    let scn = Scenario::new(&cfg).unwrap();
    let mut log = Vec::new();
    let arts = run_pipeline(&scn, RunMode::NonProgressive, &mut log).unwrap();
    let trainings = build_schedule(cfg.timesteps, cfg.tau).unwrap().training_count();
    assert_eq!(arts.offline_fields.len(), trainings);
    assert!(!arts.offline_events.iter().any(|e| matches!(e, Event::Guided(_))));
    assert!(log.iter().any(|e| matches!(e, Event::Guided(_))));
    let dir = tempfile::tempdir().unwrap();
    arts.write(&cfg, dir.path()).unwrap();
    let offline = std::fs::read_to_string(dir.path().join("offline.log")).unwrap();
    assert_eq!(offline.lines().count(), arts.offline_events.len());
}

#[test]
fn modes_share_the_warm_up() {
    let cfg = common::tiny();
    let scn = Scenario::new(&cfg).unwrap();
    let series: Vec<f64> = RunMode::ALL
        .iter()
        .map(|&m| {
            let arts = run_pipeline(&scn, m, &mut Vec::new()).unwrap();
            arts.report.rows[0].consistency.iter().sum()
        })
        .collect();
    // the first extraction precedes any guidance, so every mode sees the same queries
    assert!(series.windows(2).all(|w| w[0] == w[1]), "{series:?}");
}

#[test]
fn stored_artifacts_reload_exactly() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let arts = run_mode(&cfg, RunMode::Full, dir.path()).unwrap();
    let layers = cfg.layer_specs();
    for iv in &arts.intervals {
        let sub = dir.path().join(format!("interval_{}", iv.index));
        let field = store::load_checkpoint(&sub.join("qnerf.bin")).unwrap();
        assert_eq!(Some(&field), iv.field.as_ref());
        let q = store::load_queries(&sub.join("queries.bin"), Some(&layers)).unwrap();
        assert_eq!(q.timestep, iv.queries.timestep);
        for (a, b) in q.views.iter().flatten().zip(iv.queries.views.iter().flatten()) {
            // dumps hold f32
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
    let latents = store::load_latents(&dir.path().join("final/latents.bin")).unwrap();
    assert_eq!(latents, arts.latents);
    let log = std::fs::read_to_string(dir.path().join("events.log")).unwrap();
    let parsed: Vec<Event> = log.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(parsed, arts.events);
}
