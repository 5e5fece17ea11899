//! Run configuration, effective-config hashing and output headers.

use ovlabel_core::denoiser::{FuseWeights, RefineConfig, SystematicBias, TrainConfig};
use ovlabel_core::eval::MatchCriterion;
use ovlabel_core::scene::{Category, SceneConfig, SeekerNoiseConfig};
use ovlabel_core::{Error, ImcvConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const TOOL_NAME: &str = "ovlabel";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every parameter block of the pipeline. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every block.
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub seeker: SeekerNoiseConfig,
    pub imcv: ImcvConfig,
    pub propose: ProposeConfig,
    pub train: TrainConfig,
    pub refine: RefineBlock,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposeConfig {
    /// Proposals outside this set are dropped.
    pub categories: CategorySet,
    /// Systematic corruption applied to the kept proposals.
    pub bias: Option<SystematicBias>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineBlock {
    pub sampler: RefineConfig,
    pub fuse: FuseWeights,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub criterion: MatchCriterion,
    /// Predictions and ground truth outside this set are ignored.
    pub categories: CategorySet,
    pub pr_csv: bool,
    /// Score the unrefined boxes ranked by the seeker score.
    pub initial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub states: usize,
    pub tolerance: f64,
    /// Check at most this many entries per parameter tensor.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            states: 20,
            tolerance: 1e-4,
            max_per_param: None,
            seed: 0,
        }
    }
}

/// A set of categories: `all`, `base`, `novel`, or a comma-separated list
/// of names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum CategorySet {
    #[default]
    All,
    Base,
    Novel,
    Named(Vec<String>),
}

impl CategorySet {
    pub fn contains(&self, c: &Category) -> bool {
        match self {
            Self::All => true,
            Self::Base => c.is_base,
            Self::Novel => !c.is_base,
            Self::Named(names) => names.contains(&c.name),
        }
    }

    pub fn contains_name(&self, name: &str) -> bool {
        Category::by_name(name).is_some_and(|c| self.contains(&c))
    }
}

impl FromStr for CategorySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "all" => Ok(Self::All),
            "base" => Ok(Self::Base),
            "novel" => Ok(Self::Novel),
            list => {
                let mut names = Vec::new();
                for part in list.split(',') {
                    let c = Category::by_name(part)
                        .ok_or_else(|| Error::UnknownCategory(part.trim().to_string()))?;
                    if !names.contains(&c.name) {
                        names.push(c.name);
                    }
                }
                Ok(Self::Named(names))
            }
        }
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Base => f.write_str("base"),
            Self::Novel => f.write_str("novel"),
            Self::Named(names) => f.write_str(&names.join(",")),
        }
    }
}

impl Serialize for CategorySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses `iou:<threshold>` or `center:<meters>`.
pub fn parse_criterion(s: &str) -> Result<MatchCriterion, Error> {
    let bad = || {
        Error::Config(format!(
            "criterion `{s}` is not of the form iou:<t> or center:<m>"
        ))
    };
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    let v: f64 = value.trim().parse().map_err(|_| bad())?;
    if !v.is_finite() || v < 0.0 {
        return Err(bad());
    }
    match kind.trim() {
        "iou" => Ok(MatchCriterion::Iou(v)),
        "center" => Ok(MatchCriterion::CenterDistance(v)),
        _ => Err(bad()),
    }
}

impl RunConfig {
    /// Reads a JSON config; errors carry the offending field path.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            Error::Schema {
                path: format!("{}: {field}", path.display()),
                message: inner.to_string(),
            }
        })
    }

    /// Pushes the global seed into every block that has one.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.train.model.init_seed = s;
            self.refine.sampler.seed = s;
            self.gradcheck.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.scene.validate()?;
        self.seeker.validate()?;
        self.imcv.validate()?;
        self.train.validate()?;
        ovlabel_core::denoiser::fuse_scores(
            0.0,
            0.0,
            self.refine.fuse.w_iou,
            self.refine.fuse.w_seeker,
        )?;
        if let Some(b) = &self.propose.bias {
            if !(b.size_scale > 0.0)
                || !b.radial_shift_per_m.is_finite()
                || !b.yaw_offset.is_finite()
            {
                return Err(Error::Config(
                    "bias must be finite with a positive size_scale".into(),
                ));
            }
        }
        if !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config("gradcheck tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Provenance block embedded in every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    /// The effective parameters the command used.
    pub config: Value,
}

impl Header {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        let bytes = serde_json::to_vec(&config).expect("config serializes");
        Self {
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            seed,
            config_hash: hex::encode(Sha256::digest(&bytes)),
            config,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("header serializes")
    }

    /// One-line form used as the leading comment of CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!(
            "# {}\n",
            serde_json::to_string(self).expect("header serializes")
        )
    }
}

/// The blocks each command depends on; hashed into its header.
pub fn command_config(cfg: &RunConfig, command: &str) -> Value {
    match command {
        "gen-scenes" => json!({ "seed": cfg.seed, "scene": cfg.scene }),
        "propose" => json!({ "seeker": cfg.seeker, "imcv": cfg.imcv, "propose": cfg.propose }),
        "train" => json!({ "train": cfg.train }),
        "refine" => json!({ "refine": cfg.refine }),
        "eval" => json!({ "eval": cfg.eval }),
        "gradcheck" => json!({ "gradcheck": cfg.gradcheck }),
        _ => Value::Null,
    }
}
