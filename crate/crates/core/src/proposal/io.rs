use super::{ImcvDiagnostics, Proposal};
use crate::denoiser::RefineStats;
use crate::error::{Error, Result};
use crate::scene::io::{check_version, read_json, typed, write_json};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const PROPOSALS_VERSION: u32 = 1;

/// Proposals of one scene, optionally refined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalsFile {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<Value>,
    /// Scene file the proposals were computed from, relative to this file.
    pub scene: String,
    pub scene_seed: u64,
    pub proposals: Vec<Proposal>,
    #[serde(default)]
    pub diagnostics: ImcvDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_stats: Option<RefineStats>,
}

impl ProposalsFile {
    pub fn new(
        scene: String,
        scene_seed: u64,
        proposals: Vec<Proposal>,
        diagnostics: ImcvDiagnostics,
    ) -> Self {
        Self {
            version: PROPOSALS_VERSION,
            header: None,
            scene,
            scene_seed,
            proposals,
            diagnostics,
            refine_stats: None,
        }
    }
}

pub fn save_proposals(path: impl AsRef<Path>, file: &ProposalsFile) -> Result<()> {
    write_json(path.as_ref(), file)
}

pub fn load_proposals(path: impl AsRef<Path>) -> Result<ProposalsFile> {
    let path = path.as_ref();
    let value = read_json(path)?;
    check_version(path, &value, "proposals", PROPOSALS_VERSION)?;
    let file: ProposalsFile = typed(path, value)?;
    for (i, p) in file.proposals.iter().enumerate() {
        let boxes = std::iter::once(&p.bbox).chain(p.refined_box.as_ref());
        for b in boxes {
            if !b.center.is_finite()
                || !b.yaw.is_finite()
                || !b.size.iter().all(|s| *s > 0.0 && s.is_finite())
            {
                return Err(Error::schema(
                    format!("{}: proposals[{i}].box", path.display()),
                    "box must be finite with positive size",
                ));
            }
        }
    }
    Ok(file)
}
