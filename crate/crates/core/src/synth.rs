//! Deterministic synthetic long-tail scene generator.
//!
//! Stands in for real indoor scans: each scene has a floor at z = 0, four
//! walls, and object instances sampled from surface primitives whose
//! per-category frequencies follow a Zipf law. Category 0 is always the
//! floor and category 1 the walls; ids >= 2 are object categories ranked
//! by Zipf weight.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::catalog::{CategoryRecord, LabelCatalog};
use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::rng::substream;
use crate::scene::{PointRecord, Scene};

pub const FLOOR_ID: u16 = 0;
pub const WALL_ID: u16 = 1;
/// First object category id.
pub const FIRST_OBJECT_ID: u16 = 2;

const WALL_HEIGHT: f64 = 2.0;

/// Surface primitive used for synthetic objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Box,
    Cylinder,
    Sphere,
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub zipf_exponent: f64,
    /// Square room side length in meters.
    pub extent: f64,
    /// Surface point density in points per square meter.
    pub density: f64,
    /// Per-channel Gaussian color noise, 0-255 scale.
    pub color_noise_sigma: f64,
    pub primitives: Vec<Primitive>,
    /// Target number of object insertions per scene.
    pub objects_per_scene: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_categories: 20,
            zipf_exponent: 1.0,
            extent: 6.0,
            density: 2000.0,
            color_noise_sigma: 18.0,
            primitives: vec![Primitive::Box, Primitive::Cylinder, Primitive::Sphere],
            objects_per_scene: 20,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent <= 0.0 || self.density <= 0.0 {
            return Err(Error::Format("synthetic spec: extent and density must be positive".into()));
        }
        if self.zipf_exponent <= 0.0 {
            return Err(Error::Format("synthetic spec: zipf exponent must be positive".into()));
        }
        if self.n_categories < FIRST_OBJECT_ID as usize + 1 {
            return Err(Error::Format("synthetic spec: need at least 3 categories (floor, wall, objects)".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::Format("synthetic spec: empty primitive set".into()));
        }
        Ok(())
    }
}

/// Deterministic base color per category, spread over RGB space.
pub fn base_color(category: u16) -> [u8; 3] {
    let mut h: u64 = 0x9e3779b97f4a7c15u64.wrapping_mul(category as u64 + 1);
    h ^= h >> 29;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 32;
    [
        30 + ((h & 0xff) % 200) as u8,
        30 + (((h >> 8) & 0xff) % 200) as u8,
        30 + (((h >> 16) & 0xff) % 200) as u8,
    ]
}

/// A catalog of synthetic category names ("floor", "wall", "object_02"...)
/// with placeholder counts; counts are typically overwritten from
/// generated-corpus statistics.
pub fn synthetic_catalog(n_categories: usize) -> Result<LabelCatalog> {
    let records = (0..n_categories)
        .map(|i| CategoryRecord {
            id: i,
            name: match i {
                0 => "floor".to_string(),
                1 => "wall".to_string(),
                _ => format!("object_{i:02}"),
            },
            instance_count: 1,
            point_count: 2,
        })
        .collect();
    LabelCatalog::new(records)
}

struct ObjectDraw {
    category: u16,
    aabb: Aabb,
    points: Vec<[f64; 3]>,
}

fn jitter_color(base: [u8; 3], sigma: f64, rng: &mut impl Rng) -> [u8; 3] {
    let mut c = [0u8; 3];
    for (i, &b) in base.iter().enumerate() {
        let n: f64 = StandardNormal.sample(rng);
        c[i] = (b as f64 + sigma * n).round().clamp(0.0, 255.0) as u8;
    }
    c
}

fn sample_box_surface(dims: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let [dx, dy, dz] = dims;
    let areas = [dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy];
    let dist = WeightedIndex::new(areas).expect("positive face areas");
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * dx;
            let v: f64 = rng.gen::<f64>() * dy;
            let w: f64 = rng.gen::<f64>() * dz;
            match dist.sample(rng) {
                0 => [0.0, v, w],
                1 => [dx, v, w],
                2 => [u, 0.0, w],
                3 => [u, dy, w],
                4 => [u, v, 0.0],
                _ => [u, v, dz],
            }
        })
        .map(|p| [p[0] - dx / 2.0, p[1] - dy / 2.0, p[2]])
        .collect()
}

fn sample_cylinder_surface(radius: f64, height: f64, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let lateral = 2.0 * std::f64::consts::PI * radius * height;
    let cap = std::f64::consts::PI * radius * radius;
    let dist = WeightedIndex::new([lateral, cap, cap]).expect("positive areas");
    (0..n)
        .map(|_| {
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            match dist.sample(rng) {
                0 => [radius * theta.cos(), radius * theta.sin(), rng.gen::<f64>() * height],
                which => {
                    // uniform on a disk
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if which == 1 { 0.0 } else { height };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
        })
        .collect()
}

fn sample_sphere_surface(radius: f64, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let r = (1.0 - z * z).sqrt();
            // rest on the floor: center lifted by one radius
            [
                radius * r * theta.cos(),
                radius * r * theta.sin(),
                radius * (z + 1.0),
            ]
        })
        .collect()
}

fn draw_object(spec: &SyntheticSpec, weights: &WeightedIndex<f64>, rng: &mut impl Rng) -> ObjectDraw {
    let category = FIRST_OBJECT_ID + weights.sample(rng) as u16;
    let primitive = spec.primitives[rng.gen_range(0..spec.primitives.len())];
    let (points, half_xy, height, area) = match primitive {
        Primitive::Box => {
            let dims = [
                rng.gen_range(0.15..0.55),
                rng.gen_range(0.15..0.55),
                rng.gen_range(0.15..0.75),
            ];
            let area = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2]);
            let n = (area * spec.density).round().max(1.0) as usize;
            (
                sample_box_surface(dims, n, rng),
                [dims[0] / 2.0, dims[1] / 2.0],
                dims[2],
                area,
            )
        }
        Primitive::Cylinder => {
            let r = rng.gen_range(0.08..0.3);
            let h = rng.gen_range(0.15..0.8);
            let area = std::f64::consts::TAU * r * h + 2.0 * std::f64::consts::PI * r * r;
            let n = (area * spec.density).round().max(1.0) as usize;
            (sample_cylinder_surface(r, h, n, rng), [r, r], h, area)
        }
        Primitive::Sphere => {
            let r = rng.gen_range(0.08..0.3);
            let area = 4.0 * std::f64::consts::PI * r * r;
            let n = (area * spec.density).round().max(1.0) as usize;
            (sample_sphere_surface(r, n, rng), [r, r], 2.0 * r, area)
        }
    };
    let _ = area;
    ObjectDraw {
        category,
        aabb: Aabb::new([-half_xy[0], -half_xy[1], 0.0], [half_xy[0], half_xy[1], height]),
        points,
    }
}

/// Generate one deterministic synthetic scene, also returning the exact
/// per-category (instance_count, point_count) emission log.
pub fn generate_synthetic_scene_with_log(
    spec: &SyntheticSpec,
    catalog: &LabelCatalog,
    seed: u64,
) -> Result<(Scene, Vec<(u64, u64)>)> {
    spec.validate()?;
    if catalog.len() < spec.n_categories {
        return Err(Error::CatalogSize {
            requested: spec.n_categories,
            available: catalog.len(),
        });
    }
    let mut rng = substream(seed, "synth/scene");
    let mut points = Vec::new();
    let mut log = vec![(0u64, 0u64); catalog.len()];
    let mut next_instance: u32 = 0;

    let emit = |points: &mut Vec<PointRecord>, log: &mut Vec<(u64, u64)>, instance: u32, category: u16, pos: [f64; 3], color: [u8; 3]| {
        points.push(PointRecord {
            position: [pos[0] as f32, pos[1] as f32, pos[2] as f32],
            color,
            semantic: category,
            instance,
        });
        log[category as usize].1 += 1;
    };

    // floor
    {
        let inst = next_instance;
        next_instance += 1;
        log[FLOOR_ID as usize].0 += 1;
        let n = (spec.extent * spec.extent * spec.density).round() as usize;
        let base = base_color(FLOOR_ID);
        for _ in 0..n {
            let pos = [rng.gen::<f64>() * spec.extent, rng.gen::<f64>() * spec.extent, 0.0];
            let c = jitter_color(base, spec.color_noise_sigma, &mut rng);
            emit(&mut points, &mut log, inst, FLOOR_ID, pos, c);
        }
    }

    // four walls, thin vertical planes on the room perimeter
    let wall_base = base_color(WALL_ID);
    for wall in 0..4u32 {
        let inst = next_instance;
        next_instance += 1;
        log[WALL_ID as usize].0 += 1;
        let n = (spec.extent * WALL_HEIGHT * spec.density).round() as usize;
        for _ in 0..n {
            let u = rng.gen::<f64>() * spec.extent;
            let z = rng.gen::<f64>() * WALL_HEIGHT;
            let pos = match wall {
                0 => [u, 0.0, z],
                1 => [u, spec.extent, z],
                2 => [0.0, u, z],
                _ => [spec.extent, u, z],
            };
            let c = jitter_color(wall_base, spec.color_noise_sigma, &mut rng);
            emit(&mut points, &mut log, inst, WALL_ID, pos, c);
        }
    }

    // objects: Zipf-weighted categories, collision-free placement
    let n_obj_cats = spec.n_categories - FIRST_OBJECT_ID as usize;
    let zipf: Vec<f64> = (0..n_obj_cats)
        .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let weights = WeightedIndex::new(&zipf).expect("positive zipf weights");
    let margin = 0.2;
    let mut placed: Vec<Aabb> = Vec::new();
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    let max_attempts = spec.objects_per_scene * 10;
    while accepted < spec.objects_per_scene && attempts < max_attempts {
        attempts += 1;
        let draw = draw_object(spec, &weights, &mut rng);
        let ext = draw.aabb.extent();
        let lo_x = margin + ext[0] / 2.0;
        let hi_x = spec.extent - margin - ext[0] / 2.0;
        let lo_y = margin + ext[1] / 2.0;
        let hi_y = spec.extent - margin - ext[1] / 2.0;
        if hi_x <= lo_x || hi_y <= lo_y {
            continue;
        }
        let cx = rng.gen_range(lo_x..hi_x);
        let cy = rng.gen_range(lo_y..hi_y);
        let world = draw.aabb.translated([cx, cy, 0.0]);
        if placed.iter().any(|b| b.collides(&world)) {
            continue;
        }
        placed.push(world);
        accepted += 1;
        let inst = next_instance;
        next_instance += 1;
        log[draw.category as usize].0 += 1;
        let base = base_color(draw.category);
        for p in &draw.points {
            let pos = [p[0] + cx, p[1] + cy, p[2]];
            let c = jitter_color(base, spec.color_noise_sigma, &mut rng);
            emit(&mut points, &mut log, inst, draw.category, pos, c);
        }
    }

    Ok((Scene::new(points)?, log))
}

/// Generate one deterministic synthetic scene.
pub fn generate_synthetic_scene(spec: &SyntheticSpec, catalog: &LabelCatalog, seed: u64) -> Result<Scene> {
    generate_synthetic_scene_with_log(spec, catalog, seed).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::scene_stats;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_categories: 8,
            extent: 4.0,
            density: 120.0,
            objects_per_scene: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let catalog = synthetic_catalog(8).unwrap();
        let a = generate_synthetic_scene(&spec, &catalog, 42).unwrap();
        let b = generate_synthetic_scene(&spec, &catalog, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&spec, &catalog, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn floor_points_sit_at_zero() {
        let spec = small_spec();
        let catalog = synthetic_catalog(8).unwrap();
        let scene = generate_synthetic_scene(&spec, &catalog, 1).unwrap();
        let mut saw_floor = false;
        for p in &scene.points {
            if p.semantic == FLOOR_ID {
                saw_floor = true;
                assert_eq!(p.position[2], 0.0);
            }
        }
        assert!(saw_floor);
    }

    #[test]
    fn emission_log_matches_scene_stats() {
        let spec = small_spec();
        let catalog = synthetic_catalog(8).unwrap();
        let (scene, log) = generate_synthetic_scene_with_log(&spec, &catalog, 5).unwrap();
        let stats = scene_stats(std::slice::from_ref(&scene), 8);
        assert_eq!(stats, log);
    }

    #[test]
    fn zipf_head_dominates_in_expectation() {
        let spec = SyntheticSpec {
            zipf_exponent: 3.0,
            ..small_spec()
        };
        let catalog = synthetic_catalog(8).unwrap();
        let (mut first, mut sixth) = (0u64, 0u64);
        for seed in 0..20 {
            let (_, log) = generate_synthetic_scene_with_log(&spec, &catalog, seed).unwrap();
            first += log[FIRST_OBJECT_ID as usize].0;
            sixth += log[FIRST_OBJECT_ID as usize + 5].0;
        }
        assert!(first >= sixth, "rank-0 count {first} < rank-5 count {sixth}");
    }

    #[test]
    fn object_aabbs_are_pairwise_disjoint() {
        use crate::geom::Aabb;
        let spec = small_spec();
        let catalog = synthetic_catalog(8).unwrap();
        let scene = generate_synthetic_scene(&spec, &catalog, 9).unwrap();
        let k = scene.instance_count();
        let mut boxes: Vec<Option<(u16, Aabb)>> = vec![None; k];
        for p in &scene.points {
            if p.instance == crate::scene::NO_INSTANCE {
                continue;
            }
            let pos = [p.position[0] as f64, p.position[1] as f64, p.position[2] as f64];
            let entry = &mut boxes[p.instance as usize];
            match entry {
                None => *entry = Some((p.semantic, Aabb::new(pos, pos))),
                Some((_, bb)) => {
                    for a in 0..3 {
                        bb.min[a] = bb.min[a].min(pos[a]);
                        bb.max[a] = bb.max[a].max(pos[a]);
                    }
                }
            }
        }
        let objects: Vec<Aabb> = boxes
            .into_iter()
            .flatten()
            .filter(|(c, _)| *c >= FIRST_OBJECT_ID)
            .map(|(_, b)| b)
            .collect();
        assert!(objects.len() > 1);
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                assert_eq!(objects[i].intersection_volume(&objects[j]), 0.0);
            }
        }
    }
}
