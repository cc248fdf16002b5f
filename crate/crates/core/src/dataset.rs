//! Training-data rendering and export.
//!
//! Records are rendered with the Alpaca templates below. They are part of the
//! trainer contract: loss masking starts right after `### Response:\n`.
//!
//! With input:
//!
//! ```text
//! Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.
//!
//! ### Instruction:
//! {instruction}
//!
//! ### Input:
//! {input}
//!
//! ### Response:
//! ```
//!
//! Without input:
//!
//! ```text
//! Below is an instruction that describes a task. Write a response that appropriately completes the request.
//!
//! ### Instruction:
//! {instruction}
//!
//! ### Response:
//! ```
//!
//! Both rendered prompts end with a single newline after `### Response:`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::respond::SpecializationRecord;

pub const PREAMBLE_WITH_INPUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n";
pub const PREAMBLE_NO_INPUT: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n";
pub const INSTRUCTION_MARKER: &str = "### Instruction:\n";
pub const INPUT_MARKER: &str = "\n\n### Input:\n";
pub const RESPONSE_MARKER: &str = "### Response:";
const RESPONSE_TAIL: &str = "\n\n### Response:\n";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("refusing to write an empty training set ({skipped} records skipped)")]
    Empty { skipped: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub rendered_prompt: String,
    pub target: String,
    pub record_ref: usize,
}

impl TrainingExample {
    pub fn full_text(&self) -> String {
        format!("{}{}", self.rendered_prompt, self.target)
    }
}

/// Export line consumed by the fine-tuning component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingLine {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

pub fn render_prompt(instruction: &str, input: &str) -> String {
    if input.is_empty() {
        format!("{PREAMBLE_NO_INPUT}{INSTRUCTION_MARKER}{instruction}{RESPONSE_TAIL}")
    } else {
        format!("{PREAMBLE_WITH_INPUT}{INSTRUCTION_MARKER}{instruction}{INPUT_MARKER}{input}{RESPONSE_TAIL}")
    }
}

pub fn render_template(record: &SpecializationRecord, record_ref: usize) -> TrainingExample {
    TrainingExample {
        rendered_prompt: render_prompt(&record.instruction, &record.context),
        target: record.response.clone(),
        record_ref,
    }
}

/// Recovers `(instruction, input)` from a rendered prompt.
pub fn parse_prompt(rendered: &str) -> Option<(String, String)> {
    if let Some(body) = rendered.strip_prefix(PREAMBLE_WITH_INPUT) {
        let body = body.strip_prefix(INSTRUCTION_MARKER)?.strip_suffix(RESPONSE_TAIL)?;
        let (instruction, input) = body.split_once(INPUT_MARKER)?;
        Some((instruction.to_string(), input.to_string()))
    } else {
        let body = rendered.strip_prefix(PREAMBLE_NO_INPUT)?;
        let body = body.strip_prefix(INSTRUCTION_MARKER)?.strip_suffix(RESPONSE_TAIL)?;
        Some((body.to_string(), String::new()))
    }
}

/// Why a record cannot be exported, if it cannot.
pub fn export_problem(record: &SpecializationRecord) -> Option<String> {
    if let Err(e) = record.check() {
        return Some(e);
    }
    for (name, field) in [
        ("instruction", &record.instruction),
        ("input", &record.context),
    ] {
        if field.contains("### ") {
            return Some(format!("{name} contains a template marker"));
        }
    }
    let rendered = render_prompt(&record.instruction, &record.context);
    if rendered.matches(RESPONSE_MARKER).count() != 1 {
        return Some("rendered prompt does not contain exactly one response marker".into());
    }
    match parse_prompt(&rendered) {
        Some((i, c)) if i == record.instruction && c == record.context => None,
        _ => Some("template round-trip is not exact".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub written: usize,
    pub skipped: usize,
    #[serde(default)]
    pub holdout: usize,
}

fn write_lines(path: &Path, lines: &[TrainingLine]) -> Result<(), ExportError> {
    let io_err = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for line in lines {
        serde_json::to_writer(&mut out, line).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn valid_lines(records: &[SpecializationRecord]) -> (Vec<TrainingLine>, usize) {
    let mut lines = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (i, r) in records.iter().enumerate() {
        if let Some(problem) = export_problem(r) {
            log::warn!("skipping record {i}: {problem}");
            skipped += 1;
            continue;
        }
        lines.push(TrainingLine {
            instruction: r.instruction.clone(),
            input: r.context.clone(),
            output: r.response.clone(),
        });
    }
    (lines, skipped)
}

/// Writes `{instruction, input, output}` JSON-lines. Invalid records are
/// skipped and counted; an export with nothing to write is an error.
pub fn export_training_file(
    records: &[SpecializationRecord],
    path: impl AsRef<Path>,
) -> Result<ExportSummary, ExportError> {
    let (lines, skipped) = valid_lines(records);
    if lines.is_empty() {
        return Err(ExportError::Empty { skipped });
    }
    write_lines(path.as_ref(), &lines)?;
    Ok(ExportSummary {
        written: lines.len(),
        skipped,
        holdout: 0,
    })
}

/// Like [`export_training_file`], moving the last `ceil(fraction · n)` valid
/// records into `holdout_path`.
pub fn export_with_holdout(
    records: &[SpecializationRecord],
    train_path: impl AsRef<Path>,
    holdout_path: impl AsRef<Path>,
    fraction: f64,
) -> Result<ExportSummary, ExportError> {
    let (mut lines, skipped) = valid_lines(records);
    let n_holdout = ((lines.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
    let held = lines.split_off(lines.len() - n_holdout.min(lines.len()));
    if lines.is_empty() {
        return Err(ExportError::Empty { skipped });
    }
    write_lines(train_path.as_ref(), &lines)?;
    write_lines(holdout_path.as_ref(), &held)?;
    Ok(ExportSummary {
        written: lines.len(),
        skipped,
        holdout: held.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::respond::{DecodeMode, Provenance};

    pub(crate) fn record(instruction: &str, context: &str, response: &str) -> SpecializationRecord {
        SpecializationRecord {
            instruction: instruction.into(),
            context: context.into(),
            response: response.into(),
            retrieved_doc_ids: vec![1],
            retrieval_weights: vec![1.0],
            iteration: 1,
            decode_mode: DecodeMode::Marginalized,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn with_input_template() {
        let ex = render_template(&record("Name the disease.", "Asthma attack.", "asthma"), 0);
        assert_eq!(
            ex.rendered_prompt,
            "Below is an instruction that describes a task, paired with an input that provides further context. \
Write a response that appropriately completes the request.\n\n### Instruction:\nName the disease.\n\n\
### Input:\nAsthma attack.\n\n### Response:\n"
        );
        assert_eq!(ex.full_text(), format!("{}asthma", ex.rendered_prompt));
    }

    #[test]
    fn no_input_template() {
        let ex = render_template(&record("Define apoptosis.", "", "Programmed cell death."), 3);
        assert_eq!(
            ex.rendered_prompt,
            "Below is an instruction that describes a task. Write a response that appropriately completes the request.\
\n\n### Instruction:\nDefine apoptosis.\n\n### Response:\n"
        );
        assert_eq!(ex.record_ref, 3);
        assert!(!ex.rendered_prompt.contains("### Input:"));
    }

    #[test]
    fn parse_back_recovers_fields() {
        for (i, c) in [("Q one?", "ctx\n\nmore"), ("Q two", "")] {
            let ex = render_template(&record(i, c, "y"), 0);
            assert_eq!(parse_prompt(&ex.rendered_prompt), Some((i.to_string(), c.to_string())));
        }
    }

    #[test]
    fn export_counts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let records = vec![
            record("Name the disease.", "ctx", "asthma"),
            record("Bad ### Response: marker", "", "x"),
            record("Empty output", "", "  "),
            record("Define apoptosis.", "", "cell death"),
        ];
        let summary = export_training_file(&records, &path).unwrap();
        assert_eq!(summary.written, 2);
        assert_eq!(summary.skipped, 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"instruction\":\"Name the disease.\",\"input\":\"ctx\",\"output\":\"asthma\"}\n\
{\"instruction\":\"Define apoptosis.\",\"input\":\"\",\"output\":\"cell death\"}\n"
        );
    }

    #[test]
    fn empty_export_refused() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_training_file(&[], dir.path().join("t.jsonl")),
            Err(ExportError::Empty { skipped: 0 })
        ));
    }

    #[test]
    fn holdout_split() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..10)
            .map(|i| record(&format!("Instruction number {i}"), "", "out"))
            .collect();
        let s = export_with_holdout(&records, dir.path().join("t"), dir.path().join("h"), 0.25).unwrap();
        assert_eq!((s.written, s.holdout), (7, 3));
        let held = std::fs::read_to_string(dir.path().join("h")).unwrap();
        assert!(held.lines().next().unwrap().contains("number 7"));
    }
}
