//! Voxel masks of nodule sets and the Dice overlap.
//!
//! All grids share one lattice per spacing: voxel `K` along an axis has its
//! center at `spacing * (K + 0.5)`, and a grid is a box of lattice indices.
//! A voxel belongs to a nodule iff its center is inside the ellipsoid, so the
//! same voxel gets the same value on any grid that contains it. That is what
//! lets Dice be computed on a tight bounding grid, or on sparse voxel sets,
//! with the same result as on the full image volume.

use crate::error::{Error, Result};
use crate::geometry::{Ellipsoid, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    /// Lattice index of the first voxel on each axis.
    offset: [i64; 3],
    spacing: Vec3,
    shape: [usize; 3],
}

impl VoxelGrid {
    pub fn new(offset: [i64; 3], spacing: Vec3, shape: [usize; 3]) -> Result<Self> {
        validate_spacing(spacing)?;
        if shape.contains(&0) {
            return Err(Error::Domain(format!("grid shape must be positive, got {shape:?}")));
        }
        Ok(VoxelGrid { offset, spacing, shape })
    }

    /// Grid covering `[0, volume_mm)` on every axis.
    pub fn covering_volume(volume_mm: Vec3, spacing: Vec3) -> Result<Self> {
        validate_spacing(spacing)?;
        let mut shape = [0usize; 3];
        for i in 0..3 {
            if !(volume_mm[i].is_finite() && volume_mm[i] > 0.0) {
                return Err(Error::Domain(format!("volume must be positive, got {volume_mm:?}")));
            }
            shape[i] = (volume_mm[i] / spacing[i]).ceil() as usize;
        }
        Self::new([0; 3], spacing, shape)
    }

    pub fn origin(&self) -> Vec3 {
        [0, 1, 2].map(|i| self.offset[i] as f64 * self.spacing[i])
    }

    pub fn offset(&self) -> [i64; 3] {
        self.offset
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Center of local voxel `(k, j, i)`.
    pub fn voxel_center(&self, k: usize, j: usize, i: usize) -> Vec3 {
        let local = [k, j, i];
        [0, 1, 2].map(|a| lattice_center(self.offset[a] + local[a] as i64, self.spacing[a]))
    }

    #[inline]
    fn linear(&self, k: usize, j: usize, i: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[2] + i
    }

    fn contains_index(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= self.offset[a] && idx[a] < self.offset[a] + self.shape[a] as i64)
    }
}

fn validate_spacing(spacing: Vec3) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

#[inline]
fn lattice_center(index: i64, spacing: f64) -> f64 {
    spacing * (index as f64 + 0.5)
}

/// Lattice indices whose centers may fall inside `e` along each axis
/// (one voxel of slack on both sides; the inside test decides).
fn candidate_range(e: &Ellipsoid, spacing: Vec3) -> [(i64, i64); 3] {
    [0, 1, 2].map(|a| {
        let lo = ((e.center[a] - e.radii[a]) / spacing[a] - 0.5).ceil() as i64 - 1;
        let hi = ((e.center[a] + e.radii[a]) / spacing[a] - 0.5).floor() as i64 + 1;
        (lo, hi)
    })
}

/// Dense scalar field over a grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    grid: VoxelGrid,
    values: Vec<f64>,
}

impl VoxelMask {
    pub fn zeros(grid: VoxelGrid) -> Self {
        let values = vec![0.0; grid.len()];
        VoxelMask { grid, values }
    }

    pub fn from_values(grid: VoxelGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Domain(format!(
                "{} values for a grid of {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("mask values must lie in [0, 1]".into()));
        }
        Ok(VoxelMask { grid, values })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, k: usize, j: usize, i: usize) -> f64 {
        self.values[self.grid.linear(k, j, i)]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Binary mask of the union of `nodules`: 1 where the voxel center is inside
/// some ellipsoid.
pub fn rasterize_nodules(nodules: &[Ellipsoid], grid: &VoxelGrid) -> VoxelMask {
    let mut mask = VoxelMask::zeros(grid.clone());
    for e in nodules {
        let range = candidate_range(e, grid.spacing);
        let clip = |a: usize| {
            let lo = range[a].0.max(grid.offset[a]);
            let hi = range[a].1.min(grid.offset[a] + grid.shape[a] as i64 - 1);
            (lo, hi)
        };
        let (z0, z1) = clip(0);
        let (y0, y1) = clip(1);
        let (x0, x1) = clip(2);
        for kz in z0..=z1 {
            for ky in y0..=y1 {
                for kx in x0..=x1 {
                    let p = [
                        lattice_center(kz, grid.spacing[0]),
                        lattice_center(ky, grid.spacing[1]),
                        lattice_center(kx, grid.spacing[2]),
                    ];
                    if e.contains(p) {
                        let idx = grid.linear(
                            (kz - grid.offset[0]) as usize,
                            (ky - grid.offset[1]) as usize,
                            (kx - grid.offset[2]) as usize,
                        );
                        mask.values[idx] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

/// Pointwise convex combination of masks on a common grid.
pub fn soft_combine(masks: &[&VoxelMask], weights: &[f64]) -> Result<VoxelMask> {
    if masks.is_empty() || masks.len() != weights.len() {
        return Err(Error::Domain(format!(
            "{} masks with {} weights",
            masks.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Weights(total));
    }
    let grid = masks[0].grid.clone();
    if masks.iter().any(|m| m.grid != grid) {
        return Err(Error::GridMismatch);
    }
    let mut values = vec![0.0; grid.len()];
    for (m, &w) in masks.iter().zip(weights) {
        for (out, v) in values.iter_mut().zip(&m.values) {
            *out += w * v;
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(VoxelMask { grid, values })
}

/// Dice coefficient `2 Σ(a·b) / (Σa + Σb)`; two all-zero masks score 1.
pub fn dice(a: &VoxelMask, b: &VoxelMask) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        inter += x * y;
        sa += x;
        sb += y;
    }
    Ok(dice_from_sums(inter, sa, sb))
}

#[inline]
pub(crate) fn dice_from_sums(intersection: f64, sum_a: f64, sum_b: f64) -> f64 {
    let denom = sum_a + sum_b;
    if denom == 0.0 {
        1.0
    } else {
        (2.0 * intersection / denom).clamp(0.0, 1.0)
    }
}

/// Smallest lattice-aligned grid covering the bounding boxes of `nodules`
/// expanded by `pad` millimetres on every side.
pub fn bounding_grid(nodules: &[Ellipsoid], spacing: Vec3, pad: f64) -> Result<VoxelGrid> {
    validate_spacing(spacing)?;
    if nodules.is_empty() {
        return Err(Error::Domain("bounding grid of an empty nodule list".into()));
    }
    if !(pad.is_finite() && pad >= 0.0) {
        return Err(Error::Domain(format!("pad must be non-negative, got {pad}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for e in nodules {
        let (a, b) = e.bounds();
        for i in 0..3 {
            lo[i] = lo[i].min(a[i]);
            hi[i] = hi[i].max(b[i]);
        }
    }
    let mut offset = [0i64; 3];
    let mut shape = [0usize; 3];
    for i in 0..3 {
        let start = ((lo[i] - pad) / spacing[i]).floor() as i64;
        let end = ((hi[i] + pad) / spacing[i]).ceil() as i64;
        offset[i] = start;
        shape[i] = (end - start).max(1) as usize;
    }
    VoxelGrid::new(offset, spacing, shape)
}

/// Sorted, deduplicated lattice indices covered by a union of ellipsoids.
///
/// Sparse stand-in for a binary mask: counts and intersections equal the
/// dense mask sums on any grid that contains the set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoxelSet {
    indices: Vec<[i64; 3]>,
}

impl VoxelSet {
    pub fn from_nodules(nodules: &[Ellipsoid], spacing: Vec3) -> Self {
        Self::build(nodules, spacing, None)
    }

    /// As [`VoxelSet::from_nodules`], keeping only voxels inside `grid`.
    pub fn from_nodules_clipped(nodules: &[Ellipsoid], grid: &VoxelGrid) -> Self {
        Self::build(nodules, grid.spacing, Some(grid))
    }

    fn build(nodules: &[Ellipsoid], spacing: Vec3, clip: Option<&VoxelGrid>) -> Self {
        let mut indices = Vec::new();
        for e in nodules {
            let [(z0, z1), (y0, y1), (x0, x1)] = candidate_range(e, spacing);
            for kz in z0..=z1 {
                let pz = lattice_center(kz, spacing[0]);
                for ky in y0..=y1 {
                    let py = lattice_center(ky, spacing[1]);
                    for kx in x0..=x1 {
                        if e.contains([pz, py, lattice_center(kx, spacing[2])]) {
                            indices.push([kz, ky, kx]);
                        }
                    }
                }
            }
        }
        if let Some(grid) = clip {
            indices.retain(|idx| grid.contains_index(*idx));
        }
        indices.sort_unstable();
        indices.dedup();
        VoxelSet { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn intersection_len(&self, other: &VoxelSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union_len(&self, other: &VoxelSet) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }
}
