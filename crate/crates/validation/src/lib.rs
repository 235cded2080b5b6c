//! Bookkeeping for the acceptance run: each criterion is timed, panics
//! are caught and reported as failures, and one line is printed per
//! criterion as soon as it finishes.

use std::fmt;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

/// What a criterion body reports: a detail line on success or the reason
/// it failed.
pub type Verdict = Result<String, String>;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: &'static str,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {}: {} [{:.1}s]",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.seconds
        )
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

/// Runs `f`, converting a panic into an error string.
pub fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!("panic: {}", panic_message(p.as_ref()))),
    }
}

#[derive(Default)]
pub struct Suite {
    pub outcomes: Vec<Outcome>,
}

impl Suite {
    pub fn run(&mut self, id: &'static str, title: &'static str, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let verdict = guarded(f);
        let outcome = Outcome {
            id,
            title,
            passed: verdict.is_ok(),
            detail: verdict.unwrap_or_else(|e| e),
            seconds: start.elapsed().as_secs_f64(),
        };
        println!("{outcome}");
        let _ = std::io::stdout().flush();
        self.outcomes.push(outcome);
    }

    pub fn passed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn summary(&self) -> String {
        let failed: Vec<&str> = self.outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
        let mut s = format!("acceptance: {}/{} criteria passed", self.passed(), self.outcomes.len());
        if !failed.is_empty() {
            s.push_str(&format!(" (failed: {})", failed.join(", ")));
        }
        s
    }
}
