//! Scene representation and the SC3D / SPRD binary formats.
//!
//! SC3D layout (little-endian throughout): magic `SC3D`, version u32 = 1,
//! point count u32, then per point position 3xf32, color 3xu8, semantic u16
//! (0xFFFF = unlabeled), instance u32 (0xFFFFFFFF = none).
//!
//! SPRD layout: magic `SPRD`, version u32 = 1, point count u32, then one
//! semantic u16 per point, index-aligned with the companion scene file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Aabb;

/// Sentinel for a point without a semantic annotation.
pub const UNLABELED: u16 = u16::MAX;
/// Sentinel for a point that belongs to no instance.
pub const NO_INSTANCE: u32 = u32::MAX;

pub const SC3D_MAGIC: &[u8; 4] = b"SC3D";
pub const SPRD_MAGIC: &[u8; 4] = b"SPRD";
pub const FORMAT_VERSION: u32 = 1;

/// One annotated surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    /// Position in meters.
    pub position: [f32; 3],
    pub color: [u8; 3],
    /// Category id or [`UNLABELED`].
    pub semantic: u16,
    /// Instance id or [`NO_INSTANCE`].
    pub instance: u32,
}

impl PointRecord {
    pub fn is_labeled(&self) -> bool {
        self.semantic != UNLABELED
    }
}

/// A point-cloud scan: the unit of ingestion, augmentation, training and
/// evaluation. Immutable by convention after construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub points: Vec<PointRecord>,
}

impl Scene {
    pub fn new(points: Vec<PointRecord>) -> Result<Self> {
        let scene = Scene { points };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box; `None` for an empty scene.
    pub fn bounding_box(&self) -> Option<Aabb> {
        Aabb::from_points(self.points.iter().map(|p| {
            [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64]
        }))
    }

    /// Number of distinct instances (instance ids are dense 0..K-1).
    pub fn instance_count(&self) -> usize {
        self.points
            .iter()
            .filter(|p| p.instance != NO_INSTANCE)
            .map(|p| p.instance as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Check all scene invariants: finite coordinates, unlabeled points
    /// carry no instance, instances are semantically consistent and their
    /// ids dense.
    pub fn validate(&self) -> Result<()> {
        let mut instance_semantics: Vec<Option<u16>> = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            if p.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::SceneInvariant(format!("point {i} has non-finite coordinate")));
            }
            if p.semantic == UNLABELED && p.instance != NO_INSTANCE {
                return Err(Error::SceneInvariant(format!(
                    "point {i} is unlabeled but carries instance id {}",
                    p.instance
                )));
            }
            if p.instance != NO_INSTANCE {
                let idx = p.instance as usize;
                if idx >= instance_semantics.len() {
                    instance_semantics.resize(idx + 1, None);
                }
                match instance_semantics[idx] {
                    None => instance_semantics[idx] = Some(p.semantic),
                    Some(s) if s != p.semantic => {
                        return Err(Error::SceneInvariant(format!(
                            "instance {} spans semantic ids {} and {}",
                            p.instance, s, p.semantic
                        )))
                    }
                    _ => {}
                }
            }
        }
        if let Some(hole) = instance_semantics.iter().position(|s| s.is_none()) {
            return Err(Error::SceneInvariant(format!("instance ids not dense: id {hole} unused")));
        }
        Ok(())
    }
}

/// Bytes per serialized point: 3 x f32 + 3 x u8 + u16 + u32.
pub const POINT_RECORD_BYTES: usize = 21;

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated payload while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<u32> {
    let mut m = [0u8; 4];
    read_exact_or_format(r, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    read_u32(r, "point count")
}

/// Serialize a scene in the SC3D format. Returns the byte count written.
pub fn write_scene<W: Write>(scene: &Scene, mut w: W) -> Result<u64> {
    scene.validate()?;
    let mut buf = Vec::with_capacity(12 + scene.len() * POINT_RECORD_BYTES);
    buf.extend_from_slice(SC3D_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    for p in &scene.points {
        for c in p.position {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&p.color);
        buf.extend_from_slice(&p.semantic.to_le_bytes());
        buf.extend_from_slice(&p.instance.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Parse an SC3D payload and validate the scene invariants.
pub fn read_scene<R: Read>(mut r: R) -> Result<Scene> {
    let count = check_header(&mut r, SC3D_MAGIC)? as usize;
    let mut payload = vec![0u8; count * POINT_RECORD_BYTES];
    read_exact_or_format(&mut r, &mut payload, "point payload")?;
    let mut points = Vec::with_capacity(count);
    for rec in payload.chunks_exact(POINT_RECORD_BYTES) {
        let f32_at = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
        points.push(PointRecord {
            position: [f32_at(0), f32_at(4), f32_at(8)],
            color: [rec[12], rec[13], rec[14]],
            semantic: u16::from_le_bytes(rec[15..17].try_into().unwrap()),
            instance: u32::from_le_bytes(rec[17..21].try_into().unwrap()),
        });
    }
    Scene::new(points)
}

pub fn write_scene_file<P: AsRef<Path>>(scene: &Scene, path: P) -> Result<u64> {
    write_scene(scene, std::fs::File::create(path)?)
}

pub fn read_scene_file<P: AsRef<Path>>(path: P) -> Result<Scene> {
    read_scene(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Write per-point semantic predictions in the SPRD format.
pub fn write_predictions<W: Write>(labels: &[u16], mut w: W) -> Result<u64> {
    let mut buf = Vec::with_capacity(12 + labels.len() * 2);
    buf.extend_from_slice(SPRD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Read per-point semantic predictions from an SPRD payload.
pub fn read_predictions<R: Read>(mut r: R) -> Result<Vec<u16>> {
    let count = check_header(&mut r, SPRD_MAGIC)? as usize;
    let mut payload = vec![0u8; count * 2];
    read_exact_or_format(&mut r, &mut payload, "label payload")?;
    Ok(payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect())
}

pub fn write_predictions_file<P: AsRef<Path>>(labels: &[u16], path: P) -> Result<u64> {
    write_predictions(labels, std::fs::File::create(path)?)
}

pub fn read_predictions_file<P: AsRef<Path>>(path: P) -> Result<Vec<u16>> {
    read_predictions(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Exact per-category (instance_count, point_count) over a scene corpus.
pub fn scene_stats(scenes: &[Scene], n_categories: usize) -> Vec<(u64, u64)> {
    let mut stats = vec![(0u64, 0u64); n_categories];
    for scene in scenes {
        let mut seen_instances = std::collections::HashSet::new();
        for p in &scene.points {
            if !p.is_labeled() {
                continue;
            }
            let c = p.semantic as usize;
            if c >= stats.len() {
                continue;
            }
            stats[c].1 += 1;
            if p.instance != NO_INSTANCE && seen_instances.insert(p.instance) {
                stats[c].0 += 1;
            }
        }
    }
    stats
}
