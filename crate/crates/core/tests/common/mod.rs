#![allow(dead_code)]

use qnerf::store::{parse_config, RunConfig};

/// Small enough that a full run takes about a second.
pub const TINY: &str = r#"{
  "profile": "desk",
  "timesteps": 6, "tau": 1,
  "cameras": {"count": 3, "size": 16},
  "layers": [{"resolution": 8, "channels": 4}, {"resolution": 16, "channels": 3}],
  "kv_injection": {"layers": [1], "start_step": 2},
  "qnerf": {"steps": 20, "width": 16, "depth": 2, "frequencies": 3, "batch": 32},
  "sampling": {"n_samples": 12, "metric_samples": 64}
}"#;

pub fn tiny() -> RunConfig {
    parse_config(TINY).unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
