use serde::Serialize;

use crate::mem_model::GB;

/// One modeled step of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub name: String,
    pub bytes: u64,
    pub seconds: f64,
    /// Phases reported for information only do not add to the total.
    pub counted: bool,
}

/// Modeled time of a run as a sequence of non-overlapping phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub phases: Vec<Phase>,
    /// Bytes the headline rate is computed over.
    pub principal_bytes: u64,
}

impl CostReport {
    pub fn new(principal_bytes: u64) -> Self {
        Self {
            phases: Vec::new(),
            principal_bytes,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, bytes: u64, seconds: f64) {
        self.phases.push(Phase {
            name: name.into(),
            bytes,
            seconds,
            counted: true,
        });
    }

    /// Records a phase that is shown but excluded from the total.
    pub fn push_separate(&mut self, name: impl Into<String>, bytes: u64, seconds: f64) {
        self.phases.push(Phase {
            name: name.into(),
            bytes,
            seconds,
            counted: false,
        });
    }

    pub fn phase(&self, name: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.name == name)
    }

    pub fn total_seconds(&self) -> f64 {
        self.phases.iter().filter(|p| p.counted).map(|p| p.seconds).sum()
    }

    pub fn gbps(&self) -> f64 {
        let total = self.total_seconds();
        if total > 0.0 {
            self.principal_bytes as f64 / total / GB
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separate_phases_do_not_count() {
        let mut r = CostReport::new(2_000_000_000);
        r.push("engine", 2_000_000_000, 0.5);
        r.push_separate("load", 10, 3.0);
        r.push("copy_out", 0, 0.5);
        assert_eq!(r.total_seconds(), 1.0);
        assert_eq!(r.gbps(), 2.0);
        assert!(r.phase("load").is_some_and(|p| !p.counted));
    }

    #[test]
    fn empty_report_has_zero_rate() {
        assert_eq!(CostReport::new(5).gbps(), 0.0);
    }
}
