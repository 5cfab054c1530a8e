//! Interval scheduling and the progressive consolidation loop.

mod run;
mod schedule;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use run::{
    report_row, run_interval, run_pipeline, unguided_events, write_log, IntervalArtifacts, PipelineState, RunArtifacts, Scenario,
    Trainer,
};
pub use schedule::{build_schedule, final_steps, Event, IntervalSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Progressive consolidation with soft guidance.
    Full,
    /// Independent per-view denoising, key/value injection only.
    UnguidedBaseline,
    /// Rendered queries overwrite the generated ones instead of guiding.
    DirectInjection,
    /// Fields trained offline from one unguided run, then used for guidance.
    NonProgressive,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Full,
        RunMode::UnguidedBaseline,
        RunMode::DirectInjection,
        RunMode::NonProgressive,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Full => "full",
            RunMode::UnguidedBaseline => "unguided_baseline",
            RunMode::DirectInjection => "direct_injection",
            RunMode::NonProgressive => "non_progressive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
