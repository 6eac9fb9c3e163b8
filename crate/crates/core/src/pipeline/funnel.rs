use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Stage names in pipeline order.
pub const STAGES: [&str; 6] = ["intake", "sandbox", "test_generation", "debug", "postprocess", "final_filter"];

/// What happened to one stage attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Failed(String),
    Regenerated(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub entered: usize,
    pub accepted: usize,
    pub failed: usize,
    pub regenerated: usize,
    pub failure_reasons: BTreeMap<String, usize>,
    pub regeneration_reasons: BTreeMap<String, usize>,
}

/// Per-stage counts plus the rows of examples whose target passes all
/// tests after each step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub total: usize,
    pub stages: Vec<StageCounts>,
    /// Entry 0: examples passing at the first execution (sandboxing and
    /// test generation only). Entry `i`: passing after at most `i` debug
    /// rewrites. Cumulative.
    pub passing_by_execution: Vec<usize>,
    pub emitted: usize,
}

impl FunnelReport {
    pub fn new(total: usize, debug_iterations: u32) -> Self {
        FunnelReport {
            total,
            stages: STAGES.iter().map(|s| StageCounts { stage: s.to_string(), ..Default::default() }).collect(),
            passing_by_execution: vec![0; debug_iterations as usize + 1],
            emitted: 0,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageCounts> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn record(&mut self, stage: &str, outcome: &Outcome) {
        let s = self.stages.iter_mut().find(|s| s.stage == stage).expect("known stage");
        s.entered += 1;
        match outcome {
            Outcome::Accepted => s.accepted += 1,
            Outcome::Failed(r) => {
                s.failed += 1;
                *s.failure_reasons.entry(r.clone()).or_default() += 1;
            }
            Outcome::Regenerated(r) => {
                s.regenerated += 1;
                *s.regeneration_reasons.entry(r.clone()).or_default() += 1;
            }
        }
    }

    /// Counts an example whose tests first passed after `iteration` debug
    /// rewrites.
    pub fn record_pass(&mut self, iteration: u32) {
        for slot in self.passing_by_execution.iter_mut().skip(iteration as usize) {
            *slot += 1;
        }
    }

    /// Checks that every stage's entries are accounted for and that
    /// emitted plus failed examples add up to the total.
    pub fn check_conservation(&self) -> Result<(), String> {
        for s in &self.stages {
            if s.entered != s.accepted + s.failed + s.regenerated {
                return Err(format!("stage {}: entered {} != accepted + failed + regenerated", s.stage, s.entered));
            }
        }
        let failed: usize = self.stages.iter().map(|s| s.failed).sum();
        if self.emitted + failed != self.total {
            return Err(format!("emitted {} + failed {} != total {}", self.emitted, failed, self.total));
        }
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18}{:>9}{:>10}{:>8}{:>13}", "stage", "entered", "accepted", "failed", "regenerated");
        for s in &self.stages {
            let _ = writeln!(out, "{:<18}{:>9}{:>10}{:>8}{:>13}", s.stage, s.entered, s.accepted, s.failed, s.regenerated);
        }
        out.push('\n');
        let _ = writeln!(out, "{:<36}{:>8}", "step", "examples");
        let _ = writeln!(out, "{:<36}{:>8}", "input fragments", self.total);
        for (i, n) in self.passing_by_execution.iter().enumerate() {
            let label = if i == 0 { "sandboxing & test generation".to_string() } else { format!("exec & debug iteration {i}") };
            let _ = writeln!(out, "{label:<36}{n:>8}");
        }
        let _ = writeln!(out, "{:<36}{:>8}", "post-processing (emitted)", self.emitted);
        if self.stages.iter().any(|s| !s.failure_reasons.is_empty()) {
            out.push('\n');
            let _ = writeln!(out, "failures");
            for s in &self.stages {
                for (r, n) in &s.failure_reasons {
                    let _ = writeln!(out, "  {}: {r} = {n}", s.stage);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conservation_and_cumulative_rows() {
        let mut f = FunnelReport::new(3, 3);
        for _ in 0..3 {
            f.record("intake", &Outcome::Accepted);
        }
        f.record("sandbox", &Outcome::Regenerated("target_absent".into()));
        f.record("sandbox", &Outcome::Accepted);
        f.record("sandbox", &Outcome::Accepted);
        f.record("sandbox", &Outcome::Failed("refusal".into()));
        f.record_pass(0);
        f.record_pass(2);
        f.emitted = 2;
        assert_eq!(f.passing_by_execution, [1, 1, 2, 2]);
        f.check_conservation().unwrap();
        f.emitted = 3;
        assert!(f.check_conservation().is_err());
        assert!(f.render_text().contains("sandbox: refusal = 1"));
    }
}
