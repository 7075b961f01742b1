//! Candidate patch sources.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sampling::sample_boxes;
use super::PatchSource;
use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// A proposed box with an optional objectness score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Yields candidate boxes for an image.
pub trait ProposalSource {
    fn proposals(&self, image_id: &str, height: usize, width: usize) -> Result<Vec<Proposal>>;

    fn kind(&self) -> PatchSource;
}

/// Uniform random boxes, seeded per image id.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProposals {
    pub count: usize,
    pub size_range: (u32, u32),
    pub seed: u64,
}

impl ProposalSource for RandomProposals {
    fn proposals(&self, image_id: &str, height: usize, width: usize) -> Result<Vec<Proposal>> {
        let mut rng = rng_for(self.seed, &format!("selector/patches/{image_id}"));
        Ok(sample_boxes(height, width, self.count, self.size_range, &mut rng)?
            .into_iter()
            .map(|bbox| Proposal { bbox, score: None })
            .collect())
    }

    fn kind(&self) -> PatchSource {
        PatchSource::Random
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawProposal {
    Plain([u32; 4]),
    Scored(Proposal),
}

/// Proposals read from a JSON document mapping image id to a list of boxes,
/// each either `[x1, y1, x2, y2]` or `{"box": [...], "score": s}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileProposals {
    pub table: BTreeMap<String, Vec<Proposal>>,
}

impl FileProposals {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let raw: BTreeMap<String, Vec<RawProposal>> = serde_json::from_str(text)?;
        let mut table = BTreeMap::new();
        for (id, list) in raw {
            let mut out = Vec::with_capacity(list.len());
            for p in list {
                out.push(match p {
                    RawProposal::Plain(b) => Proposal {
                        bbox: BoundingBox::try_from(b).map_err(serde::de::Error::custom)?,
                        score: None,
                    },
                    RawProposal::Scored(p) => p,
                });
            }
            table.insert(id, out);
        }
        Ok(FileProposals { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }
}

impl ProposalSource for FileProposals {
    fn proposals(&self, image_id: &str, height: usize, width: usize) -> Result<Vec<Proposal>> {
        let list = self
            .table
            .get(image_id)
            .ok_or_else(|| Error::Validation(format!("no proposals for image {image_id}")))?;
        for p in list {
            p.bbox.check_in(height, width)?;
        }
        Ok(list.clone())
    }

    fn kind(&self) -> PatchSource {
        PatchSource::External
    }
}
