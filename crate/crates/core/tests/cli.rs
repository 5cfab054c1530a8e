mod common;

use qnerf::cli::main_with;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qnerf").chain(args.iter().copied()).map(String::from);
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn tiny_config(dir: &std::path::Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, common::TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn schedule_prints_the_event_list() {
    let (code, out, _) = run(&["--set", "timesteps=10", "--set", "tau=2", "schedule"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 35);
    assert!(out.starts_with("free 10\nfree 9\nstore 8\n"));
    assert!(out.ends_with("guided 2\nguided 1\nfinish 0\n"));
}

#[test]
fn bad_input_exit_codes() {
    let (code, _, err) = run(&["--set", "tau=0", "schedule"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.starts_with("error: "));

    let (code, _, _) = run(&["--config", "/nonexistent/cfg.json", "schedule"]);
    assert_eq!(code, 4);

    let (code, _, _) = run(&["--mode", "sideways", "schedule"]);
    assert_eq!(code, 2);

    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 2);

    let (code, _, _) = run(&["--set", "no_equals_sign", "schedule"]);
    assert_eq!(code, 2);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.bin");
    std::fs::write(&ckpt, b"QNRF\x07\x00\x00\x00").unwrap();
    let (code, _, err) = run(&["render-field", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 4);
    assert!(err.contains("unsupported version 7"), "{err}");
    assert!(err.contains("seeds: "), "{err}");
}

#[test]
fn run_then_recompute_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let (code, out, err) = run(&["--config", &cfg, "--out", out_dir.to_str().unwrap(), "--threads", "2", "run"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("mode=full consistency="), "{out}");
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();

    let again = dir.path().join("again");
    std::fs::create_dir_all(&again).unwrap();
    let (code, printed, err) = run(&["--out", again.to_str().unwrap(), "metrics", "--run", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(printed, csv);
    assert_eq!(std::fs::read_to_string(again.join("metrics.csv")).unwrap(), csv);

    // render the last checkpoint back out
    let ckpt = out_dir.join("interval_5/qnerf.bin");
    let rendered = dir.path().join("rendered");
    let (code, out, err) = run(&[
        "--config",
        &cfg,
        "--out",
        rendered.to_str().unwrap(),
        "render-field",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.trim(), "rendered 3 views x 2 layers");
    assert!(rendered.join("queries.bin").exists());
    assert!(rendered.join("view2_layer1.pgm").exists());
}

#[test]
fn mode_flag_selects_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("base");
    let (code, out, err) = run(&[
        "--config",
        &cfg,
        "--mode",
        "unguided_baseline",
        "--out",
        out_dir.to_str().unwrap(),
        "run",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("mode=unguided_baseline"));
    assert!(!out_dir.join("interval_1/qnerf.bin").exists());
    let log = std::fs::read_to_string(out_dir.join("events.log")).unwrap();
    assert!(!log.contains("guided "));
}
