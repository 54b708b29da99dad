//! ODIR-style label CSV parsing.
//!
//! One row per patient: paired left/right fundus filenames, per-eye
//! diagnostic keyword strings, and eight one-hot disease flags. Binary class
//! membership is decided per eye from the keywords, not from the per-patient
//! flags: an eye is a cataract sample when its keywords contain "cataract"
//! and a normal sample when they contain "normal fundus"; anything else is
//! outside the binary task.

use std::path::Path;

use crate::data::Label;
use crate::error::{Error, Result};

const REQUIRED_COLUMNS: &[&str] = &[
    "ID",
    "Left-Fundus",
    "Right-Fundus",
    "Left-Diagnostic Keywords",
    "Right-Diagnostic Keywords",
    "N",
    "D",
    "G",
    "C",
    "A",
    "H",
    "M",
    "O",
];

/// Per-patient one-hot flags in N,D,G,C,A,H,M,O order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiseaseFlags(pub [bool; 8]);

impl DiseaseFlags {
    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }
}

#[derive(Clone, Debug)]
pub struct LabelRecord {
    pub patient_id: String,
    pub left_file: String,
    pub right_file: String,
    pub left_keywords: String,
    pub right_keywords: String,
    pub flags: DiseaseFlags,
}

impl LabelRecord {
    /// `(filename, keyword string)` per eye, left first.
    pub fn eyes(&self) -> [(&str, &str); 2] {
        [
            (&self.left_file, &self.left_keywords),
            (&self.right_file, &self.right_keywords),
        ]
    }
}

/// A skipped row and why.
#[derive(Clone, Debug)]
pub struct RowSkip {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParseReport {
    pub records: Vec<LabelRecord>,
    pub skipped: Vec<RowSkip>,
}

/// Binary class of one eye from its diagnostic keywords, if it has one.
/// "cataract" wins over "normal fundus" if a keyword string somehow carries
/// both.
pub fn eye_label(keywords: &str) -> Option<Label> {
    let lower = keywords.to_lowercase();
    if lower.contains("cataract") {
        Some(Label::Cataract)
    } else if lower.contains("normal fundus") {
        Some(Label::Normal)
    } else {
        None
    }
}

/// Parse the label CSV. Structural problems (missing file, missing columns)
/// fail the call; malformed rows are skipped and reported with their line
/// numbers.
pub fn parse_labels(csv_path: &Path) -> Result<ParseReport> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(csv_path, std::io::Error::new(std::io::ErrorKind::NotFound, e))
            }
            _ => Error::Csv(e),
        })?;

    let headers = reader.headers()?.clone();
    let mut index = std::collections::HashMap::new();
    for (i, name) in headers.iter().enumerate() {
        index.insert(name.trim().to_string(), i);
    }
    let mut columns = [0usize; 13];
    for (slot, name) in columns.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = *index.get(*name).ok_or_else(|| Error::CsvSchema {
            column: (*name).to_string(),
        })?;
    }

    let mut report = ParseReport::default();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.skipped.push(RowSkip {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |slot: usize| row.get(columns[slot]).unwrap_or("").trim().to_string();

        let skip = |reason: String, report: &mut ParseReport| {
            report.skipped.push(RowSkip { line, reason });
        };

        let left_file = field(1);
        let right_file = field(2);
        if left_file.is_empty() || right_file.is_empty() {
            skip("empty fundus filename".into(), &mut report);
            continue;
        }

        let mut flags = [false; 8];
        let mut bad_flag = None;
        for (k, f) in flags.iter_mut().enumerate() {
            let raw = field(5 + k);
            match raw.as_str() {
                "0" => *f = false,
                "1" => *f = true,
                other => {
                    bad_flag = Some(format!(
                        "flag column {} has {:?}, expected 0 or 1",
                        REQUIRED_COLUMNS[5 + k], other
                    ));
                    break;
                }
            }
        }
        if let Some(reason) = bad_flag {
            skip(reason, &mut report);
            continue;
        }
        let flags = DiseaseFlags(flags);
        if !flags.any() {
            skip("no disease flag set".into(), &mut report);
            continue;
        }

        report.records.push(LabelRecord {
            patient_id: field(0),
            left_file,
            right_file,
            left_keywords: field(3),
            right_keywords: field(4),
            flags,
        });
    }
    Ok(report)
}
