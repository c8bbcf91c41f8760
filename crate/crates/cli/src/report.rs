use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one experiment. Everything except `wall_time_s` is a function
/// of `(id, seed)` and the inputs.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub id: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, Value>,
    pub artifacts: BTreeMap<String, Value>,
    pub assertions: Vec<Assertion>,
    pub residuals: BTreeMap<String, f64>,
    pub passed: bool,
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} {} (seed {}, {:.2}s)\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.seed,
            self.wall_time_s
        );
        for a in &self.assertions {
            out.push_str(&format!("  [{}] {}: {}\n", if a.passed { "ok" } else { "FAILED" }, a.name, a.detail));
        }
        for (name, r) in &self.residuals {
            out.push_str(&format!("  {name} = {r:.3e}\n"));
        }
        out
    }
}

pub struct ReportBuilder {
    report: ExperimentReport,
    start: Instant,
}

impl ReportBuilder {
    pub fn new(id: &str, seed: u64) -> Self {
        Self {
            report: ExperimentReport {
                id: id.to_string(),
                seed,
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                assertions: Vec::new(),
                residuals: BTreeMap::new(),
                passed: true,
                wall_time_s: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.report.inputs.insert(key.to_string(), value.into());
        self
    }

    pub fn artifact(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.report.artifacts.insert(key.to_string(), value.into());
        self
    }

    pub fn residual(&mut self, key: &str, value: f64) -> &mut Self {
        self.report.residuals.insert(key.to_string(), value);
        self
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> bool {
        self.report.passed &= passed;
        self.report.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
        passed
    }

    pub fn finish(mut self) -> ExperimentReport {
        self.report.wall_time_s = self.start.elapsed().as_secs_f64();
        self.report
    }
}
