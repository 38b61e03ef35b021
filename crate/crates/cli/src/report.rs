//! JSON job reports written to standard output.

use std::path::Path;

use samerge_core::container::FINGERPRINT_KEY;
use samerge_core::{Checkpoint, Error};
use serde::Serialize;
use serde_json::Value;

/// Bumped whenever a field changes meaning or disappears.
pub const REPORT_VERSION: u32 = 1;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Incompatible(_)
        | Error::Schema(_)
        | Error::Detection(_)
        | Error::Provenance(_)
        | Error::Merge(_)
        | Error::Analysis(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        Error::Numerical(_) => 5,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::Format(_) => "format",
        Error::Incompatible(_) => "incompatible",
        Error::Schema(_) => "schema",
        Error::Detection(_) => "detection",
        Error::Provenance(_) => "provenance",
        Error::Merge(_) => "merge",
        Error::Numerical(_) => "numerical",
        Error::Analysis(_) => "analysis",
        Error::Config(_) => "config",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputInfo {
    pub role: String,
    pub path: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub tensors: usize,
    /// Output tensors whose bytes differ from the reference input.
    pub merged: usize,
    pub retained: usize,
    /// Mean `|out − reference|` over every element.
    pub mean_abs_delta: f64,
}

impl Stats {
    pub fn compare(out: &Checkpoint, reference: &Checkpoint) -> Self {
        let mut merged = 0;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (name, t) in out.iter() {
            let Some(r) = reference.get(name) else {
                merged += 1;
                continue;
            };
            if t == r {
                count += t.numel();
                continue;
            }
            merged += 1;
            for (a, b) in t.to_f64().iter().zip(r.to_f64()) {
                sum += (a - b).abs();
            }
            count += t.numel();
        }
        Stats {
            tensors: out.len(),
            merged,
            retained: out.len() - merged,
            mean_abs_delta: if count == 0 { 0.0 } else { sum / count as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorInfo {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobReport {
    pub report_version: u32,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub status: &'static str,
    pub wall_time_s: f64,
    pub inputs: Vec<InputInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<Stats>,
    /// Command-specific payload (merge report, similarity matrix, ...).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
    pub warnings: Vec<String>,
    pub error: Option<ErrorInfo>,
}

impl JobReport {
    pub fn new(command: &str) -> Self {
        Self {
            report_version: REPORT_VERSION,
            command: command.to_string(),
            method: None,
            status: "ok",
            wall_time_s: 0.0,
            inputs: Vec::new(),
            params: None,
            output: None,
            output_fingerprint: None,
            stats: None,
            details: None,
            warnings: Vec::new(),
            error: None,
        }
    }

    pub fn record_input(&mut self, role: impl Into<String>, path: &Path, ckpt: &Checkpoint) {
        let fingerprint = ckpt.metadata.get(FINGERPRINT_KEY).cloned().unwrap_or_else(|| ckpt.fingerprint_hex());
        self.inputs.push(InputInfo { role: role.into(), path: path.display().to_string(), fingerprint });
    }

    pub fn record_output(&mut self, path: &Path, ckpt: &Checkpoint) {
        self.output = Some(path.display().to_string());
        self.output_fingerprint = Some(ckpt.fingerprint_hex());
    }

    pub fn fail(&mut self, e: &Error) {
        self.status = "error";
        self.error = Some(ErrorInfo { kind: error_kind(e), exit_code: exit_code(e), message: e.to_string() });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use samerge_core::{Dtype, Tensor};

    #[test]
    fn every_error_kind_has_a_nonzero_code() {
        let errors = [
            Error::Config("x".into()),
            Error::Schema("x".into()),
            Error::Io(std::io::Error::other("x")),
            Error::Format("x".into()),
            Error::Numerical("x".into()),
            Error::Provenance("x".into()),
        ];
        let codes: Vec<i32> = errors.iter().map(exit_code).collect();
        assert_eq!(codes, [2, 3, 4, 4, 5, 3]);
    }

    #[test]
    fn stats_count_changed_tensors() {
        let mut a = Checkpoint::new();
        a.insert("same", Tensor::from_f32(Dtype::F32, vec![2], &[1.0, 2.0]));
        a.insert("diff", Tensor::from_f32(Dtype::F32, vec![2], &[1.0, 2.0]));
        let mut b = a.clone();
        b.insert("diff", Tensor::from_f32(Dtype::F32, vec![2], &[2.0, 4.0]));
        let s = Stats::compare(&b, &a);
        assert_eq!((s.tensors, s.merged, s.retained), (2, 1, 1));
        assert_eq!(s.mean_abs_delta, 0.75);
    }

    #[test]
    fn error_reports_carry_the_code() {
        let mut r = JobReport::new("merge");
        r.fail(&Error::Numerical("boom".into()));
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["status"], "error");
        assert_eq!(v["error"]["exit_code"], 5);
        assert_eq!(v["report_version"], REPORT_VERSION);
    }
}
