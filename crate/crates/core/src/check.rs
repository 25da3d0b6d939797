use alloc::string::String;
use alloc::vec::Vec;

/// Outcome of one numerical verification: `lhs` compared against `rhs`
/// under `tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Which identity or bound the comparison comes from.
    pub bound: String,
    pub detail: String,
}

impl CheckResult {
    /// `lhs ≤ rhs + tolerance`.
    pub fn at_most(name: &str, lhs: f64, rhs: f64, tolerance: f64, bound: &str) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            tolerance,
            pass: lhs <= rhs + tolerance,
            bound: bound.into(),
            detail: String::new(),
        }
    }

    /// `|lhs − rhs| ≤ tolerance`.
    pub fn close(name: &str, lhs: f64, rhs: f64, tolerance: f64, bound: &str) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            tolerance,
            pass: (lhs - rhs).abs() <= tolerance,
            bound: bound.into(),
            detail: String::new(),
        }
    }

    /// A residual that must not exceed `tolerance` (`rhs` is 0).
    pub fn residual(name: &str, residual: f64, tolerance: f64, bound: &str) -> Self {
        Self::at_most(name, residual, 0.0, tolerance, bound)
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn and(mut self, pass: bool) -> Self {
        self.pass &= pass;
        self
    }

    /// `lhs − rhs − tolerance`; positive when the check fails.
    pub fn margin(&self) -> f64 {
        if self.rhs.is_finite() && self.lhs.is_finite() {
            self.lhs - self.rhs - self.tolerance
        } else if self.pass {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    }

    /// Folds many instances of one check into the worst case. Passes only
    /// if every instance passes.
    pub fn combine(name: &str, results: Vec<CheckResult>) -> Option<CheckResult> {
        let count = results.len();
        let all_pass = results.iter().all(|r| r.pass);
        let failed = results.iter().filter(|r| !r.pass).count();
        let mut worst = results.into_iter().reduce(|a, b| {
            let key = |r: &CheckResult| (!r.pass, r.margin());
            let (ka, kb) = (key(&a), key(&b));
            if kb.0 & !ka.0 || (kb.0 == ka.0 && kb.1 > ka.1) {
                b
            } else {
                a
            }
        })?;
        worst.name = name.into();
        worst.pass = all_pass;
        let inner = core::mem::take(&mut worst.detail);
        worst.detail = if inner.is_empty() {
            alloc::format!("{count} cases, {failed} failed")
        } else {
            alloc::format!("{count} cases, {failed} failed; worst: {inner}")
        };
        Some(worst)
    }
}
