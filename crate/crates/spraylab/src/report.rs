//! Named residual checks with tolerances and verdicts.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DiagnosticReport {
    pub checks: Vec<CheckRecord>,
    /// Informational flags that are not pass/fail checks
    /// (e.g. "weyl tensor identically zero in dimension 2").
    pub notes: Vec<String>,
}

impl DiagnosticReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: impl Into<String>, max_residual: f64, tolerance: f64) -> &mut Self {
        let pass = max_residual.is_finite() && max_residual < tolerance;
        self.checks.push(CheckRecord { name: name.into(), max_residual, tolerance, pass });
        self
    }

    pub fn note(&mut self, text: impl Into<String>) -> &mut Self {
        self.notes.push(text.into());
        self
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn worst(&self) -> Option<&CheckRecord> {
        self.checks
            .iter()
            .max_by(|a, b| (a.max_residual / a.tolerance).total_cmp(&(b.max_residual / b.tolerance)))
    }

    pub fn merge(&mut self, other: DiagnosticReport) -> &mut Self {
        self.checks.extend(other.checks);
        self.notes.extend(other.notes);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_requires_finite_residual() {
        let mut r = DiagnosticReport::new();
        r.record("a", f64::NAN, 1e-7);
        r.record("b", 1e-9, 1e-7);
        assert!(!r.check("a").unwrap().pass);
        assert!(r.check("b").unwrap().pass);
        assert!(!r.all_pass());
    }
}
