//! Versioned JSON persistence for scenes and detections.

use super::mask::MaskRle;
use super::{Category, Detection2D, GtObject, PixelMask, Scene};
use crate::error::{Error, Result};
use crate::geom::{Box2D, Box3D, CameraModel, Point3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const SCENE_VERSION: u32 = 1;
pub const DETECTIONS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<Value>,
    seed: u64,
    cameras: Vec<CameraModel>,
    /// Flat `x, y, z` triples.
    points: Vec<f64>,
    gt: Vec<GtRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRecord {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub view: usize,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub mask_rle: MaskRle,
    pub category: Category,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<Value>,
    detections: Vec<DetectionRecord>,
}

pub(crate) fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from_json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_version(
    path: &Path,
    value: &Value,
    kind: &'static str,
    expected: u32,
) -> Result<()> {
    let found = value
        .get("version")
        .ok_or_else(|| {
            Error::schema(
                format!("{}: version", path.display()),
                "missing field `version`",
            )
        })?
        .as_u64()
        .ok_or_else(|| {
            Error::schema(
                format!("{}: version", path.display()),
                "version must be an integer",
            )
        })?;
    if found != expected as u64 {
        return Err(Error::UnsupportedVersion {
            kind,
            found: found.min(u32::MAX as u64) as u32,
            expected,
        });
    }
    Ok(())
}

pub(crate) fn typed<T: for<'de> Deserialize<'de>>(path: &Path, value: Value) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene, header: Option<&Value>) -> Result<()> {
    let file = SceneFile {
        version: SCENE_VERSION,
        header: header.cloned(),
        seed: scene.seed,
        cameras: scene.cameras.clone(),
        points: scene.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        gt: scene
            .gt
            .iter()
            .map(|g| GtRecord {
                center: [g.bbox.center.x, g.bbox.center.y, g.bbox.center.z],
                size: g.bbox.size,
                yaw: g.bbox.yaw,
                category: g.category.clone(),
            })
            .collect(),
    };
    write_json(path.as_ref(), &file)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let value = read_json(path)?;
    check_version(path, &value, "scene", SCENE_VERSION)?;
    let file: SceneFile = typed(path, value)?;
    let at = |field: String| format!("{}: {field}", path.display());

    if !file.points.len().is_multiple_of(3) {
        return Err(Error::schema(
            at("points".into()),
            "length is not a multiple of 3",
        ));
    }
    if let Some(i) = file.points.iter().position(|v| !v.is_finite()) {
        return Err(Error::schema(
            at(format!("points[{i}]")),
            "non-finite coordinate",
        ));
    }
    for (i, cam) in file.cameras.iter().enumerate() {
        cam.validate()
            .map_err(|m| Error::schema(at(format!("cameras[{i}]")), m))?;
    }
    let mut gt = Vec::with_capacity(file.gt.len());
    for (i, g) in file.gt.into_iter().enumerate() {
        if !g.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::schema(
                at(format!("gt[{i}].size")),
                "size components must be positive",
            ));
        }
        gt.push(GtObject {
            bbox: Box3D::new(
                Point3::new(g.center[0], g.center[1], g.center[2]),
                g.size,
                g.yaw,
            ),
            category: g.category,
        });
    }
    Ok(Scene {
        seed: file.seed,
        points: file
            .points
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect(),
        gt,
        cameras: file.cameras,
    })
}

impl From<&Detection2D> for DetectionRecord {
    fn from(d: &Detection2D) -> Self {
        Self {
            view: d.view,
            bbox: d.bbox,
            mask_rle: d.mask.to_rle(),
            category: d.category.clone(),
            score: d.seeker_score,
        }
    }
}

impl DetectionRecord {
    pub fn into_detection(self) -> std::result::Result<Detection2D, String> {
        Ok(Detection2D {
            view: self.view,
            bbox: self.bbox,
            mask: PixelMask::from_rle(&self.mask_rle)?,
            category: self.category,
            seeker_score: self.score,
            source_gt: None,
        })
    }
}

pub fn save_detections(
    path: impl AsRef<Path>,
    dets: &[Detection2D],
    header: Option<&Value>,
) -> Result<()> {
    let file = DetectionsFile {
        version: DETECTIONS_VERSION,
        header: header.cloned(),
        detections: dets.iter().map(DetectionRecord::from).collect(),
    };
    write_json(path.as_ref(), &file)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection2D>> {
    let path = path.as_ref();
    let value = read_json(path)?;
    check_version(path, &value, "detections", DETECTIONS_VERSION)?;
    let file: DetectionsFile = typed(path, value)?;
    file.detections
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_detection().map_err(|m| {
                Error::schema(format!("{}: detections[{i}].mask_rle", path.display()), m)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, oracle_seek, SceneConfig, SeekerNoiseConfig};

    fn sample() -> Scene {
        let cfg = SceneConfig::default().with_counts([("car", 2), ("bus", 1), ("traffic_cone", 2)]);
        generate_scene(&cfg, 5).unwrap()
    }

    #[test]
    fn scene_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let s = sample();
        save_scene(&p, &s, Some(&serde_json::json!({"tool_version": "x"}))).unwrap();
        assert_eq!(load_scene(&p).unwrap(), s);
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_scene(&p, &sample(), None).unwrap();
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("gt");
        std::fs::write(&p, v.to_string()).unwrap();
        let err = load_scene(&p).unwrap_err().to_string();
        assert!(err.contains("missing field `gt`"), "{err}");
    }

    #[test]
    fn truncated_file_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_scene(&p, &sample(), None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() / 2]).unwrap();
        match load_scene(&p) {
            Err(Error::Schema { path, .. }) => assert!(path.contains(":1:"), "{path}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_scene(&p, &sample(), None).unwrap();
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        v["version"] = 99.into();
        std::fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(
            load_scene(&p),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_scene(&p, &sample(), None).unwrap();
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        v["colour"] = "red".into();
        std::fs::write(&p, v.to_string()).unwrap();
        assert!(load_scene(&p).unwrap_err().to_string().contains("colour"));
    }

    #[test]
    fn detections_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        let s = sample();
        let noise = SeekerNoiseConfig {
            mask_erode_dilate_px: 1,
            score_noise_std: 0.2,
            ..Default::default()
        };
        let dets = oracle_seek(&s, &noise);
        save_detections(&p, &dets, None).unwrap();
        let back = load_detections(&p).unwrap();
        assert_eq!(back.len(), dets.len());
        for (a, b) in back.iter().zip(&dets) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.seeker_score, b.seeker_score);
            assert_eq!(a.category, b.category);
        }
    }
}
