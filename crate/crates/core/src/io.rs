//! On-disk formats.
//!
//! Maps (pointmaps, confidences, masks) use one little-endian container:
//!
//! ```text
//! offset  size  field
//! 0       16    magic "LFPM0001" padded with NUL bytes
//! 16      4     u32 height
//! 20      4     u32 width
//! 24      4     u32 channels
//! 28      4     u32 reserved (0)
//! 32      ...   row-major samples, 4 bytes each, channels interleaved
//! ```
//!
//! Pointmaps and confidences hold `f32`; masks hold `i32`. A pointmap pixel
//! whose first channel is NaN is invalid.
//!
//! Scenes, layouts and reports are JSON documents that carry a `format`
//! string, the units and the plane sign convention.

use crate::align::AlignReport;
use crate::geom::{LabelMap, Plane, PoseSE3, Pointmap, ScalarMap, Vec3};
use crate::merge::{Layout, MergeWarning, ViewTransform};
use crate::scene::{Scene, SceneSpec, ViewBundle};
use crate::single_view::PartialLayout;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 16] = b"LFPM0001\0\0\0\0\0\0\0\0";
pub const HEADER_LEN: usize = 32;
pub const UNITS: &str = "meters";
pub const SIGN_CONVENTION: &str = "n.x + d = 0 with |n| = 1; normals point into the room";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {message}")]
    Format { path: PathBuf, offset: usize, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: expected format {expected}, found {found}")]
    WrongDocument { path: PathBuf, expected: String, found: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(io_err(path))
}

/// Raw container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Samples as raw 4-byte words.
    pub words: Vec<[u8; 4]>,
}

pub fn encode_map(height: usize, width: usize, channels: usize, words: impl Iterator<Item = [u8; 4]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * height * width * channels);
    out.extend_from_slice(MAGIC);
    for v in [height, width, channels, 0] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for w in words {
        out.extend_from_slice(&w);
    }
    out
}

pub fn decode_map(path: &Path, bytes: &[u8], channels: usize) -> Result<MapFile, IoError> {
    let fmt = |offset: usize, message: String| IoError::Format { path: path.to_path_buf(), offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if let Some(i) = (0..16).find(|&i| bytes[i] != MAGIC[i]) {
        return Err(fmt(i, "bad magic, expected LFPM0001".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (height, width, ch) = (word(16), word(20), word(24));
    if ch != channels {
        return Err(fmt(24, format!("expected {channels} channels, found {ch}")));
    }
    let n = height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(ch))
        .ok_or_else(|| fmt(16, "dimensions overflow".into()))?;
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(fmt(bytes.len().min(expected), format!("expected {expected} bytes for {height}x{width}x{ch}, found {}", bytes.len())));
    }
    let words = bytes[HEADER_LEN..].chunks_exact(4).map(|c| c.try_into().expect("4 bytes")).collect();
    Ok(MapFile { height, width, channels: ch, words })
}

pub fn encode_pointmap(pm: &Pointmap) -> Vec<u8> {
    let words = pm.points.iter().zip(&pm.valid).flat_map(|(p, &v)| {
        let p = if v { [p.x as f32, p.y as f32, p.z as f32] } else { [f32::NAN; 3] };
        p.map(f32::to_le_bytes)
    });
    encode_map(pm.height, pm.width, 3, words)
}

pub fn decode_pointmap(path: &Path, bytes: &[u8]) -> Result<Pointmap, IoError> {
    let m = decode_map(path, bytes, 3)?;
    let mut points = Vec::with_capacity(m.height * m.width);
    let mut valid = Vec::with_capacity(m.height * m.width);
    for (i, px) in m.words.chunks_exact(3).enumerate() {
        let [x, y, z] = [0, 1, 2].map(|c| f32::from_le_bytes(px[c]) as f64);
        if x.is_nan() {
            points.push(Vec3::zeros());
            valid.push(false);
        } else if x.is_finite() && y.is_finite() && z.is_finite() {
            points.push(Vec3::new(x, y, z));
            valid.push(true);
        } else {
            return Err(IoError::Format {
                path: path.to_path_buf(),
                offset: HEADER_LEN + 12 * i,
                message: "non-finite coordinate in a valid pixel".into(),
            });
        }
    }
    Ok(Pointmap::new(m.width, m.height, points, valid).expect("sized"))
}

pub fn encode_scalar_map(map: &ScalarMap) -> Vec<u8> {
    encode_map(map.height, map.width, 1, map.data.iter().map(|&v| (v as f32).to_le_bytes()))
}

pub fn decode_scalar_map(path: &Path, bytes: &[u8]) -> Result<ScalarMap, IoError> {
    let m = decode_map(path, bytes, 1)?;
    let data = m.words.iter().map(|w| f32::from_le_bytes(*w) as f64).collect();
    Ok(ScalarMap::new(m.width, m.height, data).expect("sized"))
}

pub fn encode_label_map(map: &LabelMap) -> Vec<u8> {
    encode_map(map.height, map.width, 1, map.data.iter().map(|v| v.to_le_bytes()))
}

pub fn decode_label_map(path: &Path, bytes: &[u8]) -> Result<LabelMap, IoError> {
    let m = decode_map(path, bytes, 1)?;
    let data = m.words.iter().map(|w| i32::from_le_bytes(*w)).collect();
    Ok(LabelMap::new(m.width, m.height, data).expect("sized"))
}

/// JSON document wrapper with a format tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub format: String,
    pub units: String,
    pub sign_convention: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Document<T> {
    pub fn new(format: &str, body: T) -> Self {
        Self { format: format.into(), units: UNITS.into(), sign_convention: SIGN_CONVENTION.into(), body }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serialisable");
    v.push(b'\n');
    v
}

pub fn write_document<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<(), IoError> {
    write_atomic(path, &to_json(&Document::new(format, body)))
}

pub fn read_document<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    #[derive(Deserialize)]
    struct Tag {
        format: String,
    }
    let json = |source| IoError::Json { path: path.to_path_buf(), source };
    let tag: Tag = serde_json::from_slice(&bytes).map_err(json)?;
    if tag.format != format {
        return Err(IoError::WrongDocument { path: path.to_path_buf(), expected: format.into(), found: tag.format });
    }
    let doc: Document<T> = serde_json::from_slice(&bytes).map_err(json)?;
    Ok(doc.body)
}

pub const SCENE_FORMAT: &str = "layoutfuse.scene/1";
pub const MANIFEST_FORMAT: &str = "layoutfuse.manifest/1";
pub const PARTIALS_FORMAT: &str = "layoutfuse.partials/1";
pub const ALIGNMENT_FORMAT: &str = "layoutfuse.alignment/1";
pub const LAYOUT_FORMAT: &str = "layoutfuse.layout/1";
pub const REPORT_FORMAT: &str = "layoutfuse.report/1";
pub const EVAL_FORMAT: &str = "layoutfuse.eval/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub spec: SceneSpec,
    pub scene: Scene,
}

/// One bundle's files, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub image_id: usize,
    pub partner_id: usize,
    pub pointmap_self: PathBuf,
    pub pointmap_other: PathBuf,
    pub confidence_self: PathBuf,
    pub confidence_other: PathBuf,
    pub plane_masks: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub bundles: Vec<BundleEntry>,
}

fn bundle_dir(image_id: usize, partner_id: usize) -> PathBuf {
    PathBuf::from(format!("bundles/{image_id:03}_{partner_id:03}"))
}

/// Writes every bundle's maps under `dir` and returns the manifest that
/// lists them. The manifest itself is written to `dir/manifest.json`.
pub fn write_bundles(dir: &Path, bundles: &[ViewBundle]) -> Result<Manifest, IoError> {
    let mut entries = Vec::new();
    for b in bundles {
        let sub = bundle_dir(b.image_id, b.partner_id);
        let entry = BundleEntry {
            image_id: b.image_id,
            partner_id: b.partner_id,
            pointmap_self: sub.join("pointmap_self.lfpm"),
            pointmap_other: sub.join("pointmap_other.lfpm"),
            confidence_self: sub.join("confidence_self.lfpm"),
            confidence_other: sub.join("confidence_other.lfpm"),
            plane_masks: sub.join("plane_masks.lfpm"),
        };
        write_atomic(&dir.join(&entry.pointmap_self), &encode_pointmap(&b.pointmap_self))?;
        write_atomic(&dir.join(&entry.pointmap_other), &encode_pointmap(&b.pointmap_other))?;
        write_atomic(&dir.join(&entry.confidence_self), &encode_scalar_map(&b.confidence_self))?;
        write_atomic(&dir.join(&entry.confidence_other), &encode_scalar_map(&b.confidence_other))?;
        write_atomic(&dir.join(&entry.plane_masks), &encode_label_map(&b.plane_masks))?;
        entries.push(entry);
    }
    let manifest = Manifest { bundles: entries };
    write_document(&dir.join("manifest.json"), MANIFEST_FORMAT, &manifest)?;
    Ok(manifest)
}

/// Loads every bundle a manifest lists. Relative paths resolve against the
/// manifest's directory.
pub fn read_bundles(manifest_path: &Path) -> Result<Vec<ViewBundle>, IoError> {
    let manifest: Manifest = read_document(manifest_path, MANIFEST_FORMAT)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .bundles
        .iter()
        .map(|e| {
            let load = |p: &Path| {
                let full = base.join(p);
                read_bytes(&full).map(|b| (full, b))
            };
            let (p, b) = load(&e.pointmap_self)?;
            let pointmap_self = decode_pointmap(&p, &b)?;
            let (p, b) = load(&e.pointmap_other)?;
            let pointmap_other = decode_pointmap(&p, &b)?;
            let (p, b) = load(&e.confidence_self)?;
            let confidence_self = decode_scalar_map(&p, &b)?;
            let (p, b) = load(&e.confidence_other)?;
            let confidence_other = decode_scalar_map(&p, &b)?;
            let (p, b) = load(&e.plane_masks)?;
            let plane_masks = decode_label_map(&p, &b)?;
            let (w, h) = (pointmap_self.width, pointmap_self.height);
            let shapes = [
                (&e.pointmap_other, pointmap_other.width, pointmap_other.height),
                (&e.confidence_self, confidence_self.width, confidence_self.height),
                (&e.confidence_other, confidence_other.width, confidence_other.height),
                (&e.plane_masks, plane_masks.width, plane_masks.height),
            ];
            for (path, sw, sh) in shapes {
                if (sw, sh) != (w, h) {
                    return Err(IoError::Invalid {
                        path: base.join(path),
                        message: format!("{sh}x{sw} map does not match the {h}x{w} pointmap"),
                    });
                }
            }
            Ok(ViewBundle {
                image_id: e.image_id,
                partner_id: e.partner_id,
                pointmap_self,
                pointmap_other,
                confidence_self,
                confidence_other,
                plane_masks,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub image_id: usize,
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDoc {
    /// Image whose camera frame is the world frame.
    pub anchor_image_id: usize,
    pub camera_poses: Vec<CameraPose>,
    pub transforms: Vec<ViewTransform>,
    pub report: AlignReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub anchor_image_id: usize,
    pub camera_poses: Vec<CameraPose>,
    pub layout: Layout,
}

impl LayoutDoc {
    pub fn pose_map(&self) -> BTreeMap<usize, PoseSE3> {
        self.camera_poses.iter().map(|c| (c.image_id, c.pose)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialsDoc {
    pub partials: Vec<PartialLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub views: usize,
    pub bundles: usize,
    pub align: AlignReport,
    /// Scene rotation about the up axis, degrees.
    pub scene_rotation_deg: f64,
    pub merged_planes: usize,
    pub merge_warnings: Vec<MergeWarning>,
    pub single_view_warnings: Vec<ViewWarnings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewWarnings {
    pub image_id: usize,
    pub warnings: Vec<crate::single_view::G1Warning>,
}

pub fn camera_poses(map: &BTreeMap<usize, PoseSE3>) -> Vec<CameraPose> {
    map.iter().map(|(&image_id, &pose)| CameraPose { image_id, pose }).collect()
}

/// Planes of a layout document in the ground-truth frame of `scene`.
pub fn planes_in_scene_frame(doc: &LayoutDoc, scene: &Scene) -> Option<Vec<Plane>> {
    let anchor = doc.pose_map().get(&doc.anchor_image_id).copied()?;
    let gt = scene.cameras.get(doc.anchor_image_id)?.pose;
    Some(doc.layout.transformed(&gt.compose(&anchor.inverse())).plain_planes())
}
