//! Line-oriented dataset manifest.
//!
//! ```text
//! #fundusnet-manifest v1
//! #seed 42
//! #checksum 7f3a1c02
//! <filename>\t<aug>\t<label>\t<partition>
//! ...
//! ```
//!
//! Rows are written sorted by (filename, tag); the checksum is the CRC-32 of
//! the sorted rows joined by newlines, so two manifests describe the same
//! split exactly when their checksums agree.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugTag, DatasetSplit, Label, SampleRef};
use crate::error::{Error, Result};

fn row_line(r: &SampleRef, partition: &str) -> String {
    format!("{}\t{}\t{}\t{partition}", r.file, r.aug.as_str(), r.label.as_str())
}

fn checksum_rows(rows: &[String]) -> u32 {
    let mut sorted: Vec<&str> = rows.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    crc32fast::hash(sorted.join("\n").as_bytes())
}

/// Checksum of a split's canonical row set.
pub(crate) fn split_checksum(train: &[SampleRef], test: &[SampleRef]) -> u32 {
    let rows: Vec<String> = train
        .iter()
        .map(|r| row_line(r, "train"))
        .chain(test.iter().map(|r| row_line(r, "test")))
        .collect();
    checksum_rows(&rows)
}

pub fn write_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut rows: Vec<String> = split
        .train
        .iter()
        .map(|r| row_line(r, "train"))
        .chain(split.test.iter().map(|r| row_line(r, "test")))
        .collect();
    rows.sort_unstable();
    let mut out = String::new();
    out.push_str("#fundusnet-manifest v1\n");
    out.push_str(&format!("#seed {}\n", split.seed));
    out.push_str(&format!("#checksum {:08x}\n", split.checksum));
    for row in &rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetSplit> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines().enumerate();

    let mut header = |prefix: &str| -> Result<String> {
        let (idx, line) = lines.next().ok_or(Error::ManifestParse {
            line: 0,
            reason: "unexpected end of file in header".into(),
        })?;
        line.strip_prefix(prefix)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| Error::ManifestParse {
                line: idx + 1,
                reason: format!("expected header line starting with {prefix:?}"),
            })
    };
    let version = header("#fundusnet-manifest")?;
    if version != "v1" {
        return Err(Error::ManifestParse {
            line: 1,
            reason: format!("unsupported manifest version {version:?}"),
        });
    }
    let seed: u64 = header("#seed")?.parse().map_err(|_| Error::ManifestParse {
        line: 2,
        reason: "seed is not an integer".into(),
    })?;
    let expected_checksum =
        u32::from_str_radix(&header("#checksum")?, 16).map_err(|_| Error::ManifestParse {
            line: 3,
            reason: "checksum is not hexadecimal".into(),
        })?;

    let mut rows = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parse_err = |reason: String| Error::ManifestParse {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let aug = AugTag::from_str(fields[1]).map_err(parse_err)?;
        let label = Label::from_str(fields[2]).map_err(parse_err)?;
        let r = SampleRef {
            file: fields[0].to_string(),
            aug,
            label,
        };
        match fields[3] {
            "train" => train.push(r),
            "test" => test.push(r),
            other => return Err(parse_err(format!("unknown partition token {other:?}"))),
        }
        rows.push(line.to_string());
    }

    let actual = checksum_rows(&rows);
    if actual != expected_checksum {
        return Err(Error::ManifestIntegrity {
            expected: expected_checksum,
            actual,
        });
    }
    Ok(DatasetSplit {
        train,
        test,
        seed,
        checksum: actual,
    })
}
