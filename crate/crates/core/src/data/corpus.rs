//! Binary corpus construction: per-eye labeling and class balancing.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{eye_label, AugTag, Label, LabelRecord, SampleRef};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Balanced, unaugmented corpus plus bookkeeping from the selection.
#[derive(Clone, Debug)]
pub struct CorpusReport {
    /// Balanced samples, all `AugTag::Orig`, sorted by filename.
    pub refs: Vec<SampleRef>,
    /// Image files referenced by the CSV but absent from the image dir.
    pub missing: Vec<String>,
    /// Eye counts per class before balancing (existing files only).
    pub cataract_total: usize,
    pub normal_total: usize,
}

/// Collect every labeled eye whose image exists, then balance the classes:
/// the smaller class is kept whole and a seeded uniform subset of the larger
/// class matches its size.
pub fn build_binary_corpus(
    records: &[LabelRecord],
    image_dir: &Path,
    seed: u64,
) -> Result<CorpusReport> {
    if !image_dir.is_dir() {
        return Err(Error::io(
            image_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image directory not found"),
        ));
    }

    let mut cataract = Vec::new();
    let mut normal = Vec::new();
    let mut missing = Vec::new();
    for record in records {
        for (file, keywords) in record.eyes() {
            let Some(label) = eye_label(keywords) else {
                continue;
            };
            if !image_dir.join(file).is_file() {
                missing.push(file.to_string());
                continue;
            }
            let r = SampleRef {
                file: file.to_string(),
                aug: AugTag::Orig,
                label,
            };
            match label {
                Label::Cataract => cataract.push(r),
                Label::Normal => normal.push(r),
            }
        }
    }
    missing.sort();
    missing.dedup();

    if cataract.is_empty() || normal.is_empty() {
        return Err(Error::Corpus {
            reason: format!(
                "cannot balance: {} cataract vs {} normal eye images",
                cataract.len(),
                normal.len()
            ),
        });
    }
    let (cataract_total, normal_total) = (cataract.len(), normal.len());

    // deterministic subset: sort, shuffle with the derived stream, truncate
    let keep = cataract_total.min(normal_total);
    let mut rng = stream(seed, "corpus.balance");
    for class in [&mut cataract, &mut normal] {
        class.sort_by(|a, b| a.file.cmp(&b.file));
        if class.len() > keep {
            class.shuffle(&mut rng);
            class.truncate(keep);
        }
    }

    let mut refs = cataract;
    refs.append(&mut normal);
    refs.sort_by(|a, b| a.file.cmp(&b.file));
    Ok(CorpusReport {
        refs,
        missing,
        cataract_total,
        normal_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DiseaseFlags;
    use std::fs;

    fn record(id: usize, left_kw: &str, right_kw: &str) -> LabelRecord {
        LabelRecord {
            patient_id: id.to_string(),
            left_file: format!("{id}_left.png"),
            right_file: format!("{id}_right.png"),
            left_keywords: left_kw.to_string(),
            right_keywords: right_kw.to_string(),
            flags: DiseaseFlags([true, false, false, false, false, false, false, false]),
        }
    }

    fn touch_images(dir: &Path, records: &[LabelRecord]) {
        for r in records {
            fs::write(dir.join(&r.left_file), b"x").unwrap();
            fs::write(dir.join(&r.right_file), b"x").unwrap();
        }
    }

    /// 5 cataract eyes / 20 normal eyes -> 5 + 5.
    #[test]
    fn balances_to_twice_the_minority_class() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for id in 0..5 {
            records.push(record(id, "cataract", "macular hole"));
        }
        for id in 5..15 {
            records.push(record(id, "normal fundus", "normal fundus"));
        }
        touch_images(dir.path(), &records);
        let report = build_binary_corpus(&records, dir.path(), 9).unwrap();
        assert_eq!(report.cataract_total, 5);
        assert_eq!(report.normal_total, 20);
        assert_eq!(report.refs.len(), 10);
        let cataracts = report
            .refs
            .iter()
            .filter(|r| r.label == Label::Cataract)
            .count();
        assert_eq!(cataracts, 5);
    }

    #[test]
    fn same_seed_selects_the_same_subset() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = vec![record(0, "cataract", "cataract")];
        for id in 1..30 {
            records.push(record(id, "normal fundus", "normal fundus"));
        }
        touch_images(dir.path(), &records);
        let a = build_binary_corpus(&records, dir.path(), 42).unwrap();
        let b = build_binary_corpus(&records, dir.path(), 42).unwrap();
        assert_eq!(a.refs, b.refs);
        let c = build_binary_corpus(&records, dir.path(), 43).unwrap();
        assert_ne!(a.refs, c.refs, "different seed should select differently");
    }

    #[test]
    fn missing_files_are_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record(0, "cataract", "cataract"),
            record(1, "normal fundus", "normal fundus"),
        ];
        touch_images(dir.path(), &records);
        fs::remove_file(dir.path().join("0_right.png")).unwrap();
        let report = build_binary_corpus(&records, dir.path(), 1).unwrap();
        assert_eq!(report.missing, vec!["0_right.png".to_string()]);
        assert_eq!(report.cataract_total, 1);
    }

    #[test]
    fn one_empty_class_is_a_corpus_error() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(0, "normal fundus", "normal fundus")];
        touch_images(dir.path(), &records);
        assert!(matches!(
            build_binary_corpus(&records, dir.path(), 1),
            Err(Error::Corpus { .. })
        ));
    }

    #[test]
    fn excluded_keywords_contribute_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record(0, "cataract", "moderate non proliferative retinopathy"),
            record(1, "normal fundus", "glaucoma"),
        ];
        touch_images(dir.path(), &records);
        let report = build_binary_corpus(&records, dir.path(), 1).unwrap();
        // only 0_left (cataract) and 1_left (normal) qualify
        assert_eq!(report.refs.len(), 2);
        assert_eq!(report.cataract_total, 1);
        assert_eq!(report.normal_total, 1);
    }
}
