//! Sparse voxelization at fixed resolution and the inverse mapping from
//! per-cell predictions back to points.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::{Scene, UNLABELED};

/// Integer voxel coordinate: floor(position / resolution) per axis.
pub type VoxelKey = [i64; 3];

/// Aggregated contents of one occupied voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    /// Mean color of member points, kept as reals.
    pub mean_color: [f64; 3],
    /// Majority semantic id among labeled members (tie broken by lowest
    /// id); [`UNLABELED`] only when every member is unlabeled.
    pub majority_semantic: u16,
    /// Indices of member points in the source scene.
    pub point_indices: Vec<u32>,
}

/// Sparse map from occupied voxel coordinates to aggregates. Cells are
/// stored in ascending key order, so iteration is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub resolution: f64,
    keys: Vec<VoxelKey>,
    cells: Vec<CellAggregate>,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn cells(&self) -> &[CellAggregate] {
        &self.cells
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &CellAggregate)> {
        self.keys.iter().zip(self.cells.iter())
    }
}

pub fn voxel_key(position: [f32; 3], resolution: f64) -> VoxelKey {
    [
        (position[0] as f64 / resolution).floor() as i64,
        (position[1] as f64 / resolution).floor() as i64,
        (position[2] as f64 / resolution).floor() as i64,
    ]
}

/// Bin every scene point into its voxel and aggregate colors and labels.
pub fn voxelize(scene: &Scene, resolution: f64) -> Result<SparseVoxelGrid> {
    if resolution <= 0.0 || !resolution.is_finite() {
        return Err(Error::Dimension(format!("invalid resolution {resolution}")));
    }
    let mut index: HashMap<VoxelKey, usize> = HashMap::new();
    let mut members: Vec<Vec<u32>> = Vec::new();
    for (i, p) in scene.points.iter().enumerate() {
        if p.position.iter().any(|c| !c.is_finite()) {
            return Err(Error::SceneInvariant(format!("point {i} has non-finite coordinate")));
        }
        let key = voxel_key(p.position, resolution);
        let slot = *index.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i as u32);
    }

    let mut keys: Vec<VoxelKey> = index.keys().copied().collect();
    keys.sort_unstable();
    let mut cells = Vec::with_capacity(keys.len());
    for key in &keys {
        let point_indices = std::mem::take(&mut members[index[key]]);
        let mut color = [0.0f64; 3];
        let mut votes: HashMap<u16, u32> = HashMap::new();
        for &pi in &point_indices {
            let p = &scene.points[pi as usize];
            for a in 0..3 {
                color[a] += p.color[a] as f64;
            }
            if p.semantic != UNLABELED {
                *votes.entry(p.semantic).or_insert(0) += 1;
            }
        }
        let n = point_indices.len() as f64;
        for c in &mut color {
            *c /= n;
        }
        let majority = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(&id, _)| id)
            .unwrap_or(UNLABELED);
        cells.push(CellAggregate {
            mean_color: color,
            majority_semantic: majority,
            point_indices,
        });
    }
    Ok(SparseVoxelGrid {
        resolution,
        keys,
        cells,
    })
}

/// Map per-cell labels (aligned with `grid.cells()`) back to per-point
/// labels for the source scene.
pub fn devoxelize(grid: &SparseVoxelGrid, cell_labels: &[u16], n_points: usize) -> Result<Vec<u16>> {
    if cell_labels.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} cell labels for {} cells",
            cell_labels.len(),
            grid.len()
        )));
    }
    let mut labels = vec![UNLABELED; n_points];
    for (cell, &label) in grid.cells.iter().zip(cell_labels) {
        for &pi in &cell.point_indices {
            labels[pi as usize] = label;
        }
    }
    Ok(labels)
}
