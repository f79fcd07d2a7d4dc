//! Instance-sampling augmentation: extract rare-category instances from
//! train scenes, place them at physically supported, collision-free poses
//! via a scene height map, plus color jitter.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::catalog::LabelCatalog;
use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::scene::{PointRecord, Scene, NO_INSTANCE};

/// Proposals whose support cell is taller than this are treated as
/// non-placeable (wall interiors and similar).
pub const MAX_SUPPORT_HEIGHT: f64 = 1.5;

/// One extracted instance, re-centered so its centroid sits at x = y = 0
/// and its AABB minimum z at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub category: u16,
    /// Local-frame positions with colors.
    pub points: Vec<([f64; 3], [u8; 3])>,
    pub aabb: Aabb,
}

/// Instances available for insertion, indexed by category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceBank {
    pub entries: Vec<BankEntry>,
    by_category: HashMap<u16, Vec<usize>>,
}

impl InstanceBank {
    pub fn new(entries: Vec<BankEntry>) -> Self {
        let mut by_category: HashMap<u16, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_category.entry(e.category).or_default().push(i);
        }
        InstanceBank { entries, by_category }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Categories with at least one entry, ascending.
    pub fn categories(&self) -> Vec<u16> {
        let mut cats: Vec<u16> = self.by_category.keys().copied().collect();
        cats.sort_unstable();
        cats
    }

    pub fn entries_of(&self, category: u16) -> &[usize] {
        self.by_category.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn recenter(points: Vec<([f64; 3], [u8; 3])>) -> BankEntry {
    let n = points.len() as f64;
    let (mut cx, mut cy, mut min_z) = (0.0, 0.0, f64::INFINITY);
    for (p, _) in &points {
        cx += p[0];
        cy += p[1];
        min_z = min_z.min(p[2]);
    }
    cx /= n;
    cy /= n;
    let points: Vec<([f64; 3], [u8; 3])> = points
        .into_iter()
        .map(|(p, c)| ([p[0] - cx, p[1] - cy, p[2] - min_z], c))
        .collect();
    let aabb = Aabb::from_points(points.iter().map(|(p, _)| *p)).expect("nonempty entry");
    BankEntry {
        category: 0,
        points,
        aabb,
    }
}

/// Group same-semantic points into instances by union-find over a linking
/// radius, for scenes without instance annotations.
fn connected_components(points: &[(usize, [f64; 3])], radius: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let cell = radius;
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, (_, p)) in points.iter().enumerate() {
        let key = [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ];
        grid.entry(key).or_default().push(i);
    }
    let r2 = radius * radius;
    for (i, (_, p)) in points.iter().enumerate() {
        let key = [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ];
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let nk = [key[0] + dx, key[1] + dy, key[2] + dz];
                    if let Some(others) = grid.get(&nk) {
                        for &j in others {
                            if j <= i {
                                continue;
                            }
                            let q = points[j].1;
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                            if d2 <= r2 {
                                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                                if ri != rj {
                                    parent[ri] = rj;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..points.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(points[i].0);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g.iter().copied().min());
    out
}

/// Linking radius of the connected-component fallback, in meters.
pub const CC_LINK_RADIUS: f64 = 0.05;

/// Collect all instances of the given categories from the scenes,
/// re-centered to the bank's local frame. Scenes without instance ids fall
/// back to connected-component clustering per semantic id.
pub fn extract_instances(scenes: &[Scene], ids: &[u16]) -> InstanceBank {
    let wanted: std::collections::HashSet<u16> = ids.iter().copied().collect();
    let mut entries = Vec::new();
    for scene in scenes {
        let has_instances = scene.points.iter().any(|p| p.instance != NO_INSTANCE);
        if has_instances {
            let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
            for (i, p) in scene.points.iter().enumerate() {
                if p.instance != NO_INSTANCE && wanted.contains(&p.semantic) {
                    groups.entry(p.instance).or_default().push(i);
                }
            }
            let mut keys: Vec<u32> = groups.keys().copied().collect();
            keys.sort_unstable();
            for k in keys {
                let idxs = &groups[&k];
                let category = scene.points[idxs[0]].semantic;
                let pts: Vec<([f64; 3], [u8; 3])> = idxs
                    .iter()
                    .map(|&i| {
                        let p = &scene.points[i];
                        (
                            [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64],
                            p.color,
                        )
                    })
                    .collect();
                let mut entry = recenter(pts);
                entry.category = category;
                entries.push(entry);
            }
        } else {
            for &cat in ids {
                let pts: Vec<(usize, [f64; 3])> = scene
                    .points
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.semantic == cat)
                    .map(|(i, p)| {
                        (i, [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64])
                    })
                    .collect();
                if pts.is_empty() {
                    continue;
                }
                for group in connected_components(&pts, CC_LINK_RADIUS) {
                    let local: Vec<([f64; 3], [u8; 3])> = group
                        .iter()
                        .map(|&i| {
                            let p = &scene.points[i];
                            (
                                [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64],
                                p.color,
                            )
                        })
                        .collect();
                    let mut entry = recenter(local);
                    entry.category = cat;
                    entries.push(entry);
                }
            }
        }
    }
    InstanceBank::new(entries)
}

/// 2D grid of maximum scene height per cell; empty cells default to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub cell: f64,
    pub origin: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    grid: Vec<f64>,
}

impl HeightMap {
    fn cell_index(&self, x: f64, y: f64) -> (usize, usize) {
        let i = (((x - self.origin[0]) / self.cell).floor() as isize).clamp(0, self.nx as isize - 1) as usize;
        let j = (((y - self.origin[1]) / self.cell).floor() as isize).clamp(0, self.ny as isize - 1) as usize;
        (i, j)
    }

    /// Max height recorded for the cell containing (x, y).
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let (i, j) = self.cell_index(x, y);
        self.grid[j * self.nx + i]
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.nx as f64 * self.cell, self.ny as f64 * self.cell]
    }

    /// Raise cells to cover newly inserted points.
    pub fn update(&mut self, points: impl IntoIterator<Item = [f64; 3]>) {
        for p in points {
            let (i, j) = self.cell_index(p[0], p[1]);
            let v = &mut self.grid[j * self.nx + i];
            *v = v.max(p[2]);
        }
    }
}

/// Build the height map over the scene's xy bounding box.
pub fn build_height_map(scene: &Scene, cell: f64) -> Result<HeightMap> {
    if cell <= 0.0 {
        return Err(Error::Dimension(format!("invalid height-map cell size {cell}")));
    }
    let bb = scene
        .bounding_box()
        .ok_or_else(|| Error::SceneInvariant("cannot build a height map of an empty scene".into()))?;
    let nx = (((bb.max[0] - bb.min[0]) / cell).floor() as usize) + 1;
    let ny = (((bb.max[1] - bb.min[1]) / cell).floor() as usize) + 1;
    let mut hm = HeightMap {
        cell,
        origin: [bb.min[0], bb.min[1]],
        nx,
        ny,
        grid: vec![0.0; nx * ny],
    };
    hm.update(scene.points.iter().map(|p| {
        [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64]
    }));
    Ok(hm)
}

/// A candidate pose for an insertion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    /// Support height: the entry's min-z plane rests here.
    pub z: f64,
    /// Rotation around the up axis, radians in [0, 2pi).
    pub yaw: f64,
}

/// Sample a candidate pose: (x, y) uniform over the map extent, z from the
/// height map, yaw uniform.
pub fn propose_placement(hm: &HeightMap, rng: &mut impl Rng) -> Placement {
    let ext = hm.extent();
    let x = hm.origin[0] + rng.gen::<f64>() * ext[0];
    let y = hm.origin[1] + rng.gen::<f64>() * ext[1];
    Placement {
        x,
        y,
        z: hm.value_at(x, y),
        yaw: rng.gen::<f64>() * std::f64::consts::TAU,
    }
}

/// Rotate an entry's points by yaw around the up axis and translate to the
/// placement pose. Returns world-frame points and their AABB.
pub fn place_entry(entry: &BankEntry, pose: Placement) -> (Vec<[f64; 3]>, Aabb) {
    let (s, c) = pose.yaw.sin_cos();
    let points: Vec<[f64; 3]> = entry
        .points
        .iter()
        .map(|(p, _)| {
            [
                c * p[0] - s * p[1] + pose.x,
                s * p[0] + c * p[1] + pose.y,
                p[2] + pose.z,
            ]
        })
        .collect();
    let aabb = Aabb::from_points(points.iter().copied()).expect("nonempty entry");
    (points, aabb)
}

/// Reject iff the candidate AABB intersects any existing AABB with
/// positive volume. Boxes entirely at or below the support height (the
/// floor and whatever the object rests on) are excluded.
pub fn check_collision(candidate: &Aabb, existing: &[Aabb], support_z: f64) -> bool {
    !existing
        .iter()
        .filter(|b| b.max[2] > support_z + 1e-9)
        .any(|b| b.collides(candidate))
}

/// Configuration for instance-sampling augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Target insertions per scene.
    pub n_samples: usize,
    /// Total proposal budget; fewer insertions than requested is a valid
    /// outcome.
    pub max_attempts: usize,
    /// Height-map cell size in meters.
    pub height_map_cell: f64,
    /// Color jitter sigma, 0-255 scale; 0 disables jitter.
    pub jitter_sigma: f64,
}

impl AugmentConfig {
    pub fn with_samples(n_samples: usize) -> Self {
        AugmentConfig {
            n_samples,
            max_attempts: 10 * n_samples,
            height_map_cell: 0.05,
            jitter_sigma: 0.0,
        }
    }
}

/// Per-instance world AABBs of a scene, indexed by instance id.
pub fn instance_aabbs(scene: &Scene) -> Vec<Aabb> {
    let k = scene.instance_count();
    let mut boxes: Vec<Option<Aabb>> = vec![None; k];
    for p in &scene.points {
        if p.instance == NO_INSTANCE {
            continue;
        }
        let pos = [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64];
        match &mut boxes[p.instance as usize] {
            slot @ None => *slot = Some(Aabb::new(pos, pos)),
            Some(bb) => {
                for a in 0..3 {
                    bb.min[a] = bb.min[a].min(pos[a]);
                    bb.max[a] = bb.max[a].max(pos[a]);
                }
            }
        }
    }
    boxes.into_iter().map(|b| b.expect("dense instance ids")).collect()
}

/// Insert up to `cfg.n_samples` bank instances into the scene. Categories
/// are drawn by inverse log frequency; each accepted insertion updates the
/// height map before the next proposal. Never touches pre-existing points.
pub fn augment_scene(
    scene: &Scene,
    bank: &InstanceBank,
    catalog: &LabelCatalog,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Scene> {
    if cfg.n_samples == 0 {
        return Ok(scene.clone());
    }
    if bank.is_empty() {
        return Err(Error::NegativeSampling("instance bank is empty".into()));
    }
    let cats = bank.categories();
    let cat_ids: Vec<usize> = cats.iter().map(|&c| c as usize).collect();
    let weights = catalog.inverse_log_weights(&cat_ids)?;
    let cat_dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::NegativeSampling(format!("bad category weights: {e}")))?;

    let mut hm = build_height_map(scene, cfg.height_map_cell)?;
    let mut existing = instance_aabbs(scene);
    let mut out = scene.clone();
    let mut next_instance = scene.instance_count() as u32;
    let mut inserted = 0usize;
    let mut attempts = 0usize;
    while inserted < cfg.n_samples && attempts < cfg.max_attempts {
        attempts += 1;
        let cat = cats[cat_dist.sample(rng)];
        let slots = bank.entries_of(cat);
        let entry = &bank.entries[slots[rng.gen_range(0..slots.len())]];
        let pose = propose_placement(&hm, rng);
        if pose.z > MAX_SUPPORT_HEIGHT {
            continue;
        }
        let (world, aabb) = place_entry(entry, pose);
        if !check_collision(&aabb, &existing, pose.z) {
            continue;
        }
        let instance = next_instance;
        next_instance += 1;
        for (p, (_, color)) in world.iter().zip(&entry.points) {
            let mut c = *color;
            if cfg.jitter_sigma > 0.0 {
                for ch in &mut c {
                    let n: f64 = StandardNormal.sample(rng);
                    *ch = (*ch as f64 + cfg.jitter_sigma * n).round().clamp(0.0, 255.0) as u8;
                }
            }
            out.points.push(PointRecord {
                position: [p[0] as f32, p[1] as f32, p[2] as f32],
                color: c,
                semantic: cat,
                instance,
            });
        }
        hm.update(world.iter().copied());
        existing.push(aabb);
        inserted += 1;
    }
    out.validate()?;
    Ok(out)
}

/// Perturb every color channel by Gaussian(0, sigma), clamped to [0, 255].
/// Geometry and labels are untouched; sigma = 0 is the identity.
pub fn color_jitter(scene: &Scene, sigma: f64, rng: &mut impl Rng) -> Scene {
    if sigma == 0.0 {
        return scene.clone();
    }
    let points = scene
        .points
        .iter()
        .map(|p| {
            let mut c = p.color;
            for ch in &mut c {
                let n: f64 = StandardNormal.sample(rng);
                *ch = (*ch as f64 + sigma * n).round().clamp(0.0, 255.0) as u8;
            }
            PointRecord { color: c, ..*p }
        })
        .collect();
    Scene { points }
}
