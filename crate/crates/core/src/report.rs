//! Named inequality and identity checks with pass/fail flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How a [`Check`] turns its stored numbers into a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// `value <= bound * (1 + tolerance)`.
    OneSided,
    /// `|value| <= tolerance * bound`, where `bound` holds the scale.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub value: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standard_error: Option<f64>,
    /// Which estimate or identity this check certifies, or `"plumbing"`.
    pub provenance: String,
}

impl Check {
    pub fn one_sided(name: impl Into<String>, value: f64, bound: f64, tolerance: f64, provenance: &str) -> Self {
        let mut c = Self {
            name: name.into(),
            kind: CheckKind::OneSided,
            value,
            bound,
            tolerance,
            pass: false,
            standard_error: None,
            provenance: provenance.to_string(),
        };
        c.pass = c.evaluate();
        c
    }

    pub fn residual(name: impl Into<String>, value: f64, tolerance: f64, scale: f64, provenance: &str) -> Self {
        let mut c = Self {
            name: name.into(),
            kind: CheckKind::Residual,
            value,
            bound: scale,
            tolerance,
            pass: false,
            standard_error: None,
            provenance: provenance.to_string(),
        };
        c.pass = c.evaluate();
        c
    }

    /// Residual check against `n_se` Monte Carlo standard errors.
    pub fn within_se(name: impl Into<String>, value: f64, se: f64, n_se: f64, provenance: &str) -> Self {
        Self::residual(name, value, n_se, se, provenance).with_se(se)
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.standard_error = Some(se);
        self
    }

    /// Recomputes the verdict from the stored fields.
    pub fn evaluate(&self) -> bool {
        match self.kind {
            CheckKind::OneSided => self.value <= self.bound * (1.0 + self.tolerance),
            CheckKind::Residual => self.value.abs() <= self.tolerance * self.bound,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub title: String,
    pub checks: Vec<Check>,
    /// Informational quantities that carry no verdict.
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, check: Check) -> &mut Self {
        self.checks.push(check);
        self
    }

    pub fn diag(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.diagnostics.insert(key.into(), value);
        self
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn merge(&mut self, other: VerificationReport) {
        let prefix = other.title.clone();
        for mut c in other.checks {
            c.name = format!("{prefix}/{}", c.name);
            self.checks.push(c);
        }
        for (k, v) in other.diagnostics {
            self.diagnostics.insert(format!("{prefix}/{k}"), v);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdicts_follow_stored_fields() {
        let c = Check::one_sided("max", 1.0 + 5e-9, 1.0, 1e-8, "maximum-principle");
        assert!(c.pass && c.evaluate());
        let c = Check::one_sided("max", 1.0 + 2e-8, 1.0, 1e-8, "maximum-principle");
        assert!(!c.pass);
        let c = Check::within_se("mean", -0.029, 0.01, 3.0, "plumbing");
        assert!(c.pass);
        let c = Check::within_se("mean", 0.031, 0.01, 3.0, "plumbing");
        assert!(!c.pass);
        assert_eq!(c.standard_error, Some(0.01));
    }

    #[test]
    fn json_round_trip_keeps_verdicts() {
        let mut r = VerificationReport::new("demo");
        r.push(Check::residual("mass", 1e-9, 1e-6, 1.0, "plumbing"));
        r.diag("steps", 10.0);
        let back: VerificationReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(back.checks.iter().all(|c| c.pass == c.evaluate()));
    }
}
