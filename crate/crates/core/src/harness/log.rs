use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_answer, RunMode, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::pipeline::{DnRConfig, DnRResult, ExpertFailure, Selection};
use crate::utilization::UtilizationReport;

pub const LOG_FORMAT: &str = "dnr-result-log-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    pub fingerprint: String,
    pub dataset: String,
    pub mode: RunMode,
    pub seed: u64,
    pub config: DnRConfig,
    pub backend_versions: BTreeMap<String, String>,
    pub expert_names: Vec<String>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub vlm_calls: usize,
    pub decomposer_calls: usize,
    pub grounder_calls: usize,
    pub expert_calls: usize,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub index: usize,
    pub name: String,
    pub answer: String,
    pub no_op: bool,
    pub utilization: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub fingerprint: String,
    pub sample_id: String,
    pub task_kind: TaskKind,
    pub question: Option<String>,
    pub failure: Option<RecordFailure>,
    pub draft: Option<String>,
    pub final_answer: Option<String>,
    pub selected: Option<Selection>,
    pub predicted: Option<Selection>,
    pub alpha: Option<f64>,
    pub u_base: Option<f64>,
    /// Utilization of the selected expert's input, when an expert was selected.
    pub u_selected: Option<f64>,
    pub correct_draft: Option<bool>,
    pub correct_final: Option<bool>,
    pub branches: Vec<BranchRecord>,
    pub expert_failures: Vec<ExpertFailure>,
    pub reports: Vec<UtilizationReport>,
    pub trace: Option<TraceSummary>,
}

impl SampleRecord {
    pub fn failed(fingerprint: &str, s: &Sample, stage: &str, message: String) -> Self {
        Self {
            fingerprint: fingerprint.to_owned(),
            sample_id: s.id.clone(),
            task_kind: s.task_kind,
            question: s.question.clone(),
            failure: Some(RecordFailure {
                stage: stage.to_owned(),
                message,
            }),
            draft: None,
            final_answer: None,
            selected: None,
            predicted: None,
            alpha: None,
            u_base: None,
            u_selected: None,
            correct_draft: None,
            correct_final: None,
            branches: Vec::new(),
            expert_failures: Vec::new(),
            reports: Vec::new(),
            trace: None,
        }
    }

    pub fn from_result(fingerprint: &str, s: &Sample, r: &DnRResult) -> Self {
        let truth = s.ground_truth.as_deref();
        let judge = |a: &str| truth.map(|t| evaluate_answer(a, t));
        let mut reports: Vec<UtilizationReport> = r.u_base.iter().cloned().collect();
        reports.extend(r.per_expert.iter().filter_map(|b| b.report.clone()));
        let elapsed_us = r.trace.events.iter().map(|e| e.elapsed_us).sum();
        Self {
            fingerprint: fingerprint.to_owned(),
            sample_id: s.id.clone(),
            task_kind: s.task_kind,
            question: s.question.clone(),
            failure: None,
            draft: Some(r.draft.clone()),
            final_answer: Some(r.final_answer.clone()),
            selected: Some(r.selected),
            predicted: r.predicted,
            alpha: Some(r.alpha),
            u_base: r.u_base.as_ref().map(|u| u.u_q),
            u_selected: match r.selected {
                Selection::Draft => None,
                Selection::Expert(_) => r.selected_utilization(),
            },
            correct_draft: judge(&r.draft),
            correct_final: judge(&r.final_answer),
            branches: r
                .per_expert
                .iter()
                .map(|b| BranchRecord {
                    index: b.index,
                    name: b.name.clone(),
                    answer: b.refined_answer.clone(),
                    no_op: b.no_op,
                    utilization: b.report.as_ref().map(|u| u.u_q),
                    gain: b.gain,
                })
                .collect(),
            expert_failures: r.expert_failures.clone(),
            reports,
            trace: Some(TraceSummary {
                vlm_calls: r.trace.vlm_calls,
                decomposer_calls: r.trace.decomposer_calls,
                grounder_calls: r.trace.grounder_calls,
                expert_calls: r.trace.expert_calls,
                elapsed_us,
            }),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    /// Both correctness flags are known.
    pub fn is_evaluable(&self) -> bool {
        self.is_ok() && self.correct_draft.is_some() && self.correct_final.is_some()
    }

    pub fn revised(&self) -> bool {
        self.draft != self.final_answer
    }

    /// `U_selected − U_base`, zero when the draft was kept.
    pub fn delta_u(&self) -> Option<f64> {
        match self.selected? {
            Selection::Draft => Some(0.0),
            Selection::Expert(_) => Some(self.u_selected? - self.u_base?),
        }
    }

    /// Accuracy change in {−1, 0, +1}.
    pub fn delta_acc(&self) -> Option<f64> {
        Some(f64::from(u8::from(self.correct_final?)) - f64::from(u8::from(self.correct_draft?)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(RunHeader),
    Record(SampleRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultLog {
    pub header: RunHeader,
    pub records: Vec<SampleRecord>,
}

fn line(l: &LogLine) -> String {
    serde_json::to_string(l).expect("log line serializes")
}

impl ResultLog {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = line(&LogLine::Header(self.header.clone()));
        s.push('\n');
        for r in &self.records {
            s.push_str(&line(&LogLine::Record(r.clone())));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let l: LogLine =
                serde_json::from_str(raw).map_err(|e| Error::parse(format!("log line {}", i + 1), e.to_string()))?;
            match l {
                LogLine::Header(h) if header.is_none() => {
                    if h.format != LOG_FORMAT {
                        return Err(Error::parse("log", format!("unknown format `{}`", h.format)));
                    }
                    header = Some(h);
                }
                LogLine::Header(_) => return Err(Error::parse(format!("log line {}", i + 1), "second header")),
                LogLine::Record(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::parse("log", "missing header"))?;
        if let Some(r) = records.iter().find(|r| r.fingerprint != header.fingerprint) {
            return Err(Error::parse("log", format!("record {} has a foreign fingerprint", r.sample_id)));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for l in std::io::BufReader::new(file).lines() {
            text.push_str(&l.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    /// Copy with timing fields zeroed, for reproducibility comparisons.
    pub fn untimed(&self) -> Self {
        let mut l = self.clone();
        for r in &mut l.records {
            if let Some(t) = r.trace.as_mut() {
                t.elapsed_us = 0;
            }
        }
        l
    }
}

/// Append-only writer: header first, then one record per line, flushed as written.
pub(crate) struct LogWriter {
    out: BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl LogWriter {
    pub(crate) fn create(path: &Path, header: &RunHeader) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.write_line(&LogLine::Header(header.clone()))?;
        Ok(w)
    }

    fn write_line(&mut self, l: &LogLine) -> Result<()> {
        writeln!(self.out, "{}", line(l)).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub(crate) fn append(&mut self, r: &SampleRecord) -> Result<()> {
        self.write_line(&LogLine::Record(r.clone()))
    }
}
