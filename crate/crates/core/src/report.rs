//! Shared verdict type for verification reports.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Combine verdicts: any failure fails, otherwise any inconclusive is inconclusive.
    pub fn combine(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::Fail, _) | (_, Verdict::Fail) => Verdict::Fail,
            (Verdict::Inconclusive, _) | (_, Verdict::Inconclusive) => Verdict::Inconclusive,
            _ => Verdict::Pass,
        }
    }

    pub fn all(iter: impl IntoIterator<Item = Verdict>) -> Verdict {
        iter.into_iter().fold(Verdict::Pass, Verdict::combine)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One identity or inequality checked over a batch of random trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

impl CheckRow {
    /// Passes when every error is at most `tolerance` (NaN fails).
    pub fn from_errors(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max_error = errors.iter().fold(0.0f64, |m, &e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) });
        CheckRow {
            name: name.to_string(),
            trials: errors.len(),
            max_error,
            tolerance,
            verdict: Verdict::from_bool(max_error <= tolerance),
        }
    }

    /// Passes when every value exceeds `threshold` (negative controls).
    pub fn from_lower(name: &str, values: &[f64], threshold: f64) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        CheckRow {
            name: name.to_string(),
            trials: values.len(),
            max_error: min,
            tolerance: threshold,
            verdict: Verdict::from_bool(min > threshold),
        }
    }
}

/// A named batch of [`CheckRow`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub rows: Vec<CheckRow>,
    pub verdict: Verdict,
}

impl SuiteReport {
    pub fn new(name: &str, rows: Vec<CheckRow>) -> Self {
        let verdict = Verdict::all(rows.iter().map(|r| r.verdict));
        SuiteReport { name: name.to_string(), rows, verdict }
    }

    pub fn row(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}
