//! Run report: one JSON document plus CSV tables for plotting.

use crate::conditions::{ConditionReport, EigenBound};
use crate::kamstep::KamStepReport;
use crate::measure::{MeasureEstimate, MeasureFit};
use crate::schedule::{ConvergenceSummary, ConvergenceTrace, RunFailure, ScheduleEntry};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// A closed-form identity checked numerically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

impl IdentityCheck {
    pub fn new(name: &str, value: f64, expected: f64, tol: f64) -> Self {
        let rel_error = if expected == 0.0 {
            value.abs()
        } else {
            ((value - expected) / expected).abs()
        };
        IdentityCheck {
            name: name.into(),
            value,
            expected,
            rel_error,
            tol,
            pass: rel_error <= tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub mandatory: bool,
    pub detail: String,
}

/// Frequency and energy before and after the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invariants {
    pub omega_initial: Vec<f64>,
    pub omega_final: Vec<f64>,
    pub omega_rel_change: Vec<f64>,
    pub e_initial: f64,
    pub e_final: f64,
    pub e_bit_identical: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub mode: String,
    pub seed: Option<u64>,
    pub annotations: Vec<String>,
    pub conditions: Vec<ConditionReport>,
    pub identities: Vec<IdentityCheck>,
    pub eigen_bound: Option<EigenBound>,
    pub schedule: Vec<ScheduleEntry>,
    pub steps: Vec<KamStepReport>,
    pub trace: ConvergenceTrace,
    pub convergence: Option<ConvergenceSummary>,
    pub failure: Option<RunFailure>,
    pub invariants: Option<Invariants>,
    pub measure: Option<MeasureFit>,
    pub measure_error: Option<String>,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
    /// Canonical text of the config that produced this report.
    pub config: String,
}

impl RunReport {
    pub fn verdict(&mut self, name: &str, pass: bool, mandatory: bool, detail: impl Into<String>) {
        self.verdicts.push(Verdict {
            name: name.into(),
            pass,
            mandatory,
            detail: detail.into(),
        });
    }

    /// Sets `pass` from the mandatory verdicts.
    pub fn settle(&mut self) -> bool {
        self.pass = self.verdicts.iter().filter(|v| v.mandatory).all(|v| v.pass);
        self.pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn trace_table(&self) -> String {
        let mut s = String::from(
            "nu,r,s,sigma,eta,K,gamma,error,new_error,contraction_ratio,eta_m,next_target,error_ok,deviation,margin_a,margin_b,margin_c,margin_d,margin_e\n",
        );
        for r in &self.trace.rows {
            let _ = write!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
                r.nu,
                r.r,
                r.s,
                r.sigma,
                r.eta,
                r.big_k,
                r.gamma,
                r.error,
                r.new_error,
                r.contraction_ratio,
                r.eta_m,
                r.next_target,
                r.error_ok,
                r.deviation
            );
            for m in r.gate_margins {
                let _ = write!(s, ",{m:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn conditions_table(&self) -> String {
        let mut s = String::from("condition,pass,margin,threshold\n");
        for c in &self.conditions {
            let _ = writeln!(s, "{},{},{:e},{:e}", c.condition_id, c.pass, c.margin, c.threshold);
        }
        for c in &self.identities {
            let _ = writeln!(s, "{},{},{:e},{:e}", c.name, c.pass, c.rel_error, c.tol);
        }
        s
    }

    pub fn measure_table(&self) -> Option<String> {
        self.measure.as_ref().map(|f| measure_table(&f.points))
    }

    /// Writes `report.json` and the CSV tables into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, body: &str| -> std::io::Result<()> {
            std::fs::write(dir.join(name), body)?;
            written.push(name.to_string());
            Ok(())
        };
        put("report.json", &self.to_json())?;
        put("conditions.csv", &self.conditions_table())?;
        if !self.trace.rows.is_empty() {
            put("trace.csv", &self.trace_table())?;
        }
        if let Some(t) = self.measure_table() {
            put("measure.csv", &t)?;
        }
        Ok(written)
    }

    /// Short human summary for the terminal.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for v in &self.verdicts {
            let tag = if v.pass { "PASS" } else { "FAIL" };
            let opt = if v.mandatory { "" } else { " (informational)" };
            let _ = writeln!(s, "{tag} {}{opt}: {}", v.name, v.detail);
        }
        let _ = write!(s, "overall: {}", if self.pass { "pass" } else { "fail" });
        s
    }
}

pub fn measure_table(points: &[MeasureEstimate]) -> String {
    let mut s = String::from("gamma,estimate,std_error,hits,samples\n");
    for p in points {
        let _ = writeln!(s, "{:e},{:e},{:e},{},{}", p.gamma, p.estimate, p.std_error, p.hits, p.samples);
    }
    s
}
