use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Draft,
    Decompose,
    Ground,
    Mask,
    Baseline,
    Featurize,
    Refine,
    Recompute,
    Select,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stage: Stage,
    pub detail: String,
    pub vlm_calls: usize,
    pub elapsed_us: u64,
}

/// Per-sample log of stages and backend usage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub vlm_calls: usize,
    pub decomposer_calls: usize,
    pub grounder_calls: usize,
    pub expert_calls: usize,
}

impl Trace {
    pub fn push(&mut self, stage: Stage, detail: impl Into<String>, vlm_calls: usize, elapsed: Duration) {
        self.vlm_calls += vlm_calls;
        self.events.push(TraceEvent {
            stage,
            detail: detail.into(),
            vlm_calls,
            elapsed_us: elapsed.as_micros().min(u64::MAX as u128) as u64,
        });
    }

    pub fn calls_in(&self, stage: Stage) -> usize {
        self.events.iter().filter(|e| e.stage == stage).map(|e| e.vlm_calls).sum()
    }

    /// Trace without timings, for comparing runs.
    pub fn untimed(&self) -> Trace {
        let mut t = self.clone();
        for e in &mut t.events {
            e.elapsed_us = 0;
        }
        t
    }
}
