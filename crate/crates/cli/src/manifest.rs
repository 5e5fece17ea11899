//! Manifests listing the per-scene files a command wrote.

use anyhow::{bail, Context, Result};
use ovlabel_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Scenes,
    Proposals,
    Refined,
}

impl ManifestKind {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Scenes => "scenes_manifest.json",
            Self::Proposals => "proposals_manifest.json",
            Self::Refined => "refined_manifest.json",
        }
    }
}

/// One scene's files. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub scene: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub header: Value,
    pub kind: ManifestKind,
    pub entries: Vec<Entry>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub path: PathBuf,
    pub dir: PathBuf,
}

impl LoadedManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

pub fn write_manifest(
    dir: &Path,
    kind: ManifestKind,
    header: Value,
    entries: Vec<Entry>,
) -> Result<PathBuf> {
    let m = Manifest {
        version: MANIFEST_VERSION,
        header,
        kind,
        entries,
    };
    let path = dir.join(kind.file_name());
    write_json(&path, &m)?;
    Ok(path)
}

/// Loads a manifest from a file, or from a directory holding one of the
/// accepted kinds (tried in order).
pub fn load_manifest(path: &Path, accept: &[ManifestKind]) -> Result<LoadedManifest> {
    let file = if path.is_dir() {
        accept
            .iter()
            .map(|k| path.join(k.file_name()))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                let names: Vec<&str> = accept.iter().map(|k| k.file_name()).collect();
                Error::Config(format!(
                    "{} holds none of {}",
                    path.display(),
                    names.join(", ")
                ))
            })?
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: format!("{}: {}", file.display(), e.path()),
        message: e.into_inner().to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "manifest",
            found: manifest.version,
            expected: MANIFEST_VERSION,
        }
        .into());
    }
    if !accept.contains(&manifest.kind) {
        bail!(Error::Config(format!(
            "{} is a {:?} manifest, expected one of {:?}",
            file.display(),
            manifest.kind,
            accept
        )));
    }
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedManifest {
        manifest,
        path: file,
        dir,
    })
}

/// `target` expressed relative to directory `base`, with `/` separators.
pub fn relative_path(target: &Path, base: &Path) -> Result<String> {
    let t = target
        .canonicalize()
        .with_context(|| format!("resolving {}", target.display()))?;
    let b = base
        .canonicalize()
        .with_context(|| format!("resolving {}", base.display()))?;
    let rel = pathdiff::diff_paths(&t, &b).unwrap_or(t);
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    Ok(parts.join("/"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
