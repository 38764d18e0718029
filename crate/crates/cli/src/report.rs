use std::collections::BTreeMap;
use std::path::Path;

use pkguard::inspector::SafetyVerdict;
use pkguard::bytescan::Occurrence;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Input {
    pub path: String,
    pub sha256: String,
    pub size: usize,
}

impl Input {
    pub fn new(path: &Path, bytes: &[u8]) -> Input {
        Input { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)), size: bytes.len() }
    }
}

#[derive(Debug, Serialize)]
pub struct OccurrenceEntry {
    pub offset: String,
    pub kind: &'static str,
    pub page_span: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

impl OccurrenceEntry {
    pub fn bare(o: &Occurrence) -> Self {
        OccurrenceEntry {
            offset: format!("{:#x}", o.offset),
            kind: o.kind.name(),
            page_span: o.page_span,
            verdict: None,
            evidence: None,
        }
    }

    pub fn judged(v: &SafetyVerdict) -> Self {
        OccurrenceEntry { verdict: Some(v.class.name()), evidence: Some(v.evidence.to_string()), ..Self::bare(&v.occurrence) }
    }
}

#[derive(Debug, Default, Serialize)]
pub struct RewriteSummary {
    pub rules: BTreeMap<String, usize>,
    pub trampolines: usize,
    pub iterations: usize,
    pub flags_clobbered: bool,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub input: Input,
    pub occurrences: Vec<OccurrenceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<RewriteSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<Input>,
    pub pass: bool,
}

impl Report {
    pub fn new(command: &'static str, input: Input) -> Report {
        Report {
            tool: env!("CARGO_BIN_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            input,
            occurrences: Vec::new(),
            rewrite: None,
            output: None,
            pass: true,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub offsets: usize,
    pub runs: usize,
    pub budget: u64,
    pub budget_exhausted: usize,
    pub guarded_runs: usize,
    pub guarded_exits: usize,
    pub findings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct SimReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub input: Input,
    pub seed: u64,
    pub status: String,
    pub steps: u64,
    pub output: String,
    pub syscalls: usize,
    pub violations: Vec<String>,
    pub failures: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    pub pass: bool,
}
