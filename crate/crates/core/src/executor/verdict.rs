use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ExecStatus, ExecutionReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShimStatus {
    Passed,
    FailedAssert,
    CompileError,
    RuntimeError,
    Timeout,
}

/// The shim's single-line verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub status: ShimStatus,
    pub asserts: Vec<u8>,
    pub coverage: Option<f64>,
    pub error: Option<String>,
}

impl VerdictRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("verdict record serializes")
    }
}

/// Parses the last non-empty stdout line as a verdict record.
pub fn parse_verdict_line(stdout: &str) -> Result<VerdictRecord, String> {
    let line = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| "no verdict line on stdout".to_string())?;
    let record: VerdictRecord = serde_json::from_str(line.trim()).map_err(|e| format!("malformed verdict line: {e}"))?;
    if record.asserts.iter().any(|a| *a > 1) {
        return Err("assert outcomes must be 0 or 1".into());
    }
    Ok(record)
}

/// Checks a record against the report invariants and converts it.
pub(super) fn to_report(
    record: VerdictRecord,
    collect_coverage: bool,
    duration: Duration,
    stderr_tail: String,
) -> Result<ExecutionReport, String> {
    let all_ok = record.asserts.iter().all(|a| *a == 1);
    let status = match record.status {
        ShimStatus::Passed if !all_ok => return Err("status passed with a failing assert".into()),
        ShimStatus::Passed => ExecStatus::Passed,
        ShimStatus::FailedAssert if all_ok => return Err("status failed_assert without a failing assert".into()),
        ShimStatus::FailedAssert => ExecStatus::FailedAssert,
        ShimStatus::CompileError => ExecStatus::CompileError,
        ShimStatus::RuntimeError => ExecStatus::RuntimeError,
        ShimStatus::Timeout => ExecStatus::Timeout,
    };
    if let Some(c) = record.coverage {
        if !(0.0..=1.0).contains(&c) || c.is_nan() {
            return Err(format!("coverage {c} outside [0, 1]"));
        }
    }
    let line_coverage = if collect_coverage && status != ExecStatus::CompileError { record.coverage } else { None };
    Ok(ExecutionReport {
        status,
        per_assert: record.asserts.iter().enumerate().map(|(i, a)| (i + 1, *a == 1)).collect(),
        stderr_tail,
        error: record.error,
        duration: duration.as_secs_f64(),
        line_coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(line: &str, cov: bool) -> Result<ExecutionReport, String> {
        to_report(parse_verdict_line(line)?, cov, Duration::from_millis(5), String::new())
    }

    #[test]
    fn last_line_wins_over_user_prints() {
        let out = "hello\n{\"status\": \"nonsense\"}\n{\"status\":\"passed\",\"asserts\":[1,1,1],\"coverage\":null,\"error\":null}\n\n";
        let r = conv(out, false).unwrap();
        assert_eq!(r.status, ExecStatus::Passed);
        assert_eq!(r.per_assert, [(1, true), (2, true), (3, true)]);
    }

    #[test]
    fn failed_assert_indexes() {
        let r = conv(r#"{"status":"failed_assert","asserts":[1,0],"coverage":0.5,"error":"AssertionError"}"#, true).unwrap();
        assert_eq!(r.per_assert, [(1, true), (2, false)]);
        assert_eq!(r.first_failed_assert(), Some(2));
        assert_eq!(r.line_coverage, Some(0.5));
    }

    #[test]
    fn coverage_dropped_when_not_requested_or_compile_error() {
        let r = conv(r#"{"status":"passed","asserts":[1],"coverage":1.0,"error":null}"#, false).unwrap();
        assert_eq!(r.line_coverage, None);
        let r = conv(r#"{"status":"compile_error","asserts":[],"coverage":0.0,"error":"SyntaxError"}"#, true).unwrap();
        assert_eq!(r.line_coverage, None);
    }

    #[test]
    fn protocol_violations() {
        assert!(conv("", false).is_err());
        assert!(conv("not json", false).is_err());
        assert!(conv(r#"{"status":"passed","asserts":[1,0],"coverage":null,"error":null}"#, false).is_err());
        assert!(conv(r#"{"status":"failed_assert","asserts":[1],"coverage":null,"error":null}"#, false).is_err());
        assert!(conv(r#"{"status":"passed","asserts":[2],"coverage":null,"error":null}"#, false).is_err());
        assert!(conv(r#"{"status":"passed","asserts":[],"coverage":1.5,"error":null}"#, true).is_err());
    }
}
