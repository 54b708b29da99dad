//! Group-aware stratified train/test split.
//!
//! Augmented variants of one source image must land in the same partition,
//! otherwise near-duplicates of training images leak into the test set. The
//! split therefore operates on source files (groups), stratified by label:
//! per label, `floor(ratio * source_count)` seeded-shuffled sources go to
//! train and their variants follow them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::{manifest, Label, SampleRef};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    pub seed: u64,
    /// CRC-32 over the sorted manifest rows; two splits agree iff their
    /// checksums do.
    pub checksum: u32,
}

pub fn split(samples: &[SampleRef], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::InvalidParameter {
            name: "split ratio",
            reason: format!("must lie in (0,1), got {ratio}"),
        });
    }

    // group samples by source file; a group must be single-label
    let mut groups: BTreeMap<&str, (Label, Vec<&SampleRef>)> = BTreeMap::new();
    for s in samples {
        let entry = groups
            .entry(s.file.as_str())
            .or_insert_with(|| (s.label, Vec::new()));
        if entry.0 != s.label {
            return Err(Error::Split {
                reason: format!("source {} appears with two different labels", s.file),
            });
        }
        entry.1.push(s);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [Label::Normal, Label::Cataract] {
        let mut files: Vec<&str> = groups
            .iter()
            .filter(|(_, (l, _))| *l == label)
            .map(|(f, _)| *f)
            .collect();
        if files.len() < 2 {
            return Err(Error::Split {
                reason: format!(
                    "label {} has {} source image(s); need at least 2 to split",
                    label.as_str(),
                    files.len()
                ),
            });
        }
        // files come out of the BTreeMap sorted; shuffle with a per-label stream
        let mut rng = stream(seed, &format!("split.{}", label.as_str()));
        files.shuffle(&mut rng);
        let train_sources = (ratio * files.len() as f64).floor() as usize;
        for (idx, file) in files.iter().enumerate() {
            let bucket = if idx < train_sources {
                &mut train
            } else {
                &mut test
            };
            for s in &groups[file].1 {
                bucket.push((*s).clone());
            }
        }
    }

    let order = |a: &SampleRef, b: &SampleRef| (&a.file, a.aug).cmp(&(&b.file, b.aug));
    train.sort_by(order);
    test.sort_by(order);

    let checksum = manifest::split_checksum(&train, &test);
    Ok(DatasetSplit {
        train,
        test,
        seed,
        checksum,
    })
}
