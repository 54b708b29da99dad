//! Dataset ingestion and preprocessing.
//!
//! The pipeline runs on lightweight sample descriptors ([`SampleRef`]) so
//! that balancing, augmentation, and splitting never hold pixel data; images
//! are materialized per batch by [`imageops::load_sample`]. The whole
//! pipeline is a deterministic function of `(csv, image_dir, seed)`.

mod archive;
mod corpus;
mod imageops;
mod labels;
mod manifest;
mod split;
pub mod synthetic;

pub use archive::{entry_name, write_archive, ArchiveReader, ARCHIVE_MAGIC};
pub use corpus::{build_binary_corpus, CorpusReport};
pub use imageops::{
    conform_channels, decode_image, load_sample, resize_bilinear, rotate_bilinear,
};
pub use labels::{eye_label, parse_labels, DiseaseFlags, LabelRecord, ParseReport, RowSkip};
pub use manifest::{read_manifest, write_manifest};
pub use split::{split, DatasetSplit};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Binary class; cataract is the positive class everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Cataract,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Normal => 0.0,
            Label::Cataract => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Cataract => "cataract",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Label::Normal),
            "cataract" => Ok(Label::Cataract),
            other => Err(format!("unknown label token {other:?}")),
        }
    }
}

/// Which geometric variant of the source image a sample is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AugTag {
    Orig,
    RotPlus30,
    RotMinus30,
}

impl AugTag {
    pub const ALL: [AugTag; 3] = [AugTag::Orig, AugTag::RotPlus30, AugTag::RotMinus30];

    pub fn as_str(self) -> &'static str {
        match self {
            AugTag::Orig => "orig",
            AugTag::RotPlus30 => "rot+30",
            AugTag::RotMinus30 => "rot-30",
        }
    }

    /// Rotation in degrees this tag applies.
    pub fn degrees(self) -> f64 {
        match self {
            AugTag::Orig => 0.0,
            AugTag::RotPlus30 => 30.0,
            AugTag::RotMinus30 => -30.0,
        }
    }
}

impl std::str::FromStr for AugTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orig" => Ok(AugTag::Orig),
            "rot+30" => Ok(AugTag::RotPlus30),
            "rot-30" => Ok(AugTag::RotMinus30),
            other => Err(format!("unknown augmentation tag {other:?}")),
        }
    }
}

/// A sample by reference: source file, augmentation variant, label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub file: String,
    pub aug: AugTag,
    pub label: Label,
}

/// A materialized sample: pixels in [0,1] plus label and provenance.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// `[H,W,C]` image, values in [0,1].
    pub image: Tensor,
    pub label: Label,
    pub source: String,
    pub aug: AugTag,
}

/// Expand each unaugmented sample into its three variants: the original and
/// the two 30-degree rotations. Count triples exactly; labels never change.
pub fn augment(samples: &[SampleRef]) -> Vec<SampleRef> {
    let mut out = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        debug_assert_eq!(s.aug, AugTag::Orig, "augment expects unaugmented inputs");
        for tag in AugTag::ALL {
            out.push(SampleRef {
                file: s.file.clone(),
                aug: tag,
                label: s.label,
            });
        }
    }
    out
}
