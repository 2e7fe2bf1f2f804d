//! Pass/fail bookkeeping for the acceptance run in `tests/acceptance.rs`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    /// Reason the criterion is expected to fail, if it is.
    pub known_unmet: Option<&'static str>,
}

impl Outcome {
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {:<26} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        );
        if let (false, Some(why)) = (self.passed, self.known_unmet) {
            s.push_str(&format!(" [known unmet: {why}]"));
        }
        s
    }
}

/// Runs criteria one at a time, printing a line for each as it finishes.
#[derive(Debug, Default)]
pub struct Scorecard {
    known_unmet: Vec<(&'static str, &'static str)>,
    outcomes: Vec<Outcome>,
}

impl Scorecard {
    /// `known_unmet` lists `(criterion, reason)` pairs whose failure is
    /// reported but does not fail the run.
    pub fn new(known_unmet: &[(&'static str, &'static str)]) -> Self {
        Self {
            known_unmet: known_unmet.to_vec(),
            outcomes: Vec::new(),
        }
    }

    /// `check` returns `Ok(detail)` on success and `Err(detail)` on failure;
    /// a panic counts as a failure.
    pub fn run(&mut self, name: &'static str, check: impl FnOnce() -> Result<String, String>) -> bool {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let outcome = Outcome {
            name,
            passed,
            detail,
            elapsed: start.elapsed(),
            known_unmet: self.known_unmet.iter().find(|(n, _)| *n == name).map(|(_, r)| *r),
        };
        println!("{}", outcome.line());
        self.outcomes.push(outcome);
        passed
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    /// Failures not covered by the known-unmet list.
    pub fn unexpected_failures(&self) -> Vec<&Outcome> {
        self.outcomes
            .iter()
            .filter(|o| !o.passed && o.known_unmet.is_none())
            .collect()
    }
}
