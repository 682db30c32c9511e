use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Stage, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub calls: u64,
    pub usage: Usage,
}

/// Token totals partitioned by pipeline stage. Stage subtotals always sum to
/// the grand total.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    stages: BTreeMap<Stage, StageUsage>,
}

impl UsageLedger {
    pub fn record(&mut self, stage: Stage, usage: &Usage) {
        let s = self.stages.entry(stage).or_default();
        s.calls += 1;
        s.usage.add(usage);
    }

    pub fn stage(&self, stage: Stage) -> StageUsage {
        self.stages.get(&stage).copied().unwrap_or_default()
    }

    pub fn total(&self) -> Usage {
        let mut t = Usage::default();
        for s in self.stages.values() {
            t.add(&s.usage);
        }
        t
    }

    /// Puzzle-solving tokens only (first attempts plus retries).
    pub fn solving_and_retry(&self) -> Usage {
        let mut t = self.stage(Stage::Solving).usage;
        t.add(&self.stage(Stage::Retry).usage);
        t
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        for (stage, s) in &other.stages {
            let mine = self.stages.entry(*stage).or_default();
            mine.calls += s.calls;
            mine.usage.add(&s.usage);
        }
    }

    /// `self - earlier`, for carving one run out of a shared gateway ledger.
    pub fn since(&self, earlier: &UsageLedger) -> UsageLedger {
        let mut out = UsageLedger::default();
        for (stage, s) in &self.stages {
            let e = earlier.stage(*stage);
            let diff = StageUsage {
                calls: s.calls - e.calls,
                usage: Usage {
                    prompt_tokens: s.usage.prompt_tokens - e.usage.prompt_tokens,
                    completion_tokens: s.usage.completion_tokens - e.usage.completion_tokens,
                    reasoning_tokens: s.usage.reasoning_tokens - e.usage.reasoning_tokens,
                },
            };
            if diff.calls > 0 {
                out.stages.insert(*stage, diff);
            }
        }
        out
    }

    pub fn stages(&self) -> impl Iterator<Item = (Stage, StageUsage)> + '_ {
        Stage::ALL.into_iter().map(|s| (s, self.stage(s)))
    }
}
