//! Block decomposition with overlapping margins, orthogonal center cuts
//! (2.5D), neighbouring-slice stacks (2D3ch), directional patches, and
//! crop-to-core reassembly.
//!
//! Axis convention: axial = constant z, coronal = constant y, sagittal =
//! constant x. Multi-channel images are stored channels-last (`[row][col][ch]`).
//! Axial cuts have rows along y and columns along x; coronal cuts rows along z
//! and columns along x; sagittal cuts rows along z and columns along y.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{Unit, VoxelVolume};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_MARGIN: usize = 8;

/// Deterministic tiling of a zero-padded volume into overlapping cubes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub block_size: usize,
    pub core_size: usize,
    pub margin: usize,
    /// Extent of the original volume `(nx, ny, nz)`.
    pub shape: [usize; 3],
    pub padded_shape: [usize; 3],
    /// Offset of original voxel `(0, 0, 0)` inside the padded volume.
    pub origin_offset: [usize; 3],
    pub counts: [usize; 3],
}

impl BlockGrid {
    pub fn block_count(&self) -> usize {
        self.counts.iter().product()
    }

    /// All block coordinates in x-fastest order.
    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [cx, cy, cz] = self.counts;
        (0..cz).flat_map(move |k| (0..cy).flat_map(move |j| (0..cx).map(move |i| [i, j, k])))
    }

    fn linear(&self, c: [usize; 3]) -> usize {
        (c[2] * self.counts[1] + c[1]) * self.counts[0] + c[0]
    }

    /// Padded-volume coordinate of the first voxel of block `c` along each axis.
    pub fn block_origin(&self, c: [usize; 3]) -> [usize; 3] {
        [c[0] * self.core_size, c[1] * self.core_size, c[2] * self.core_size]
    }
}

/// Plans the block tiling for a volume of `shape`.
pub fn plan_grid(shape: [usize; 3], block_size: usize, margin: usize) -> Result<BlockGrid> {
    if block_size <= 2 * margin {
        return Err(invalid(format!(
            "block size {block_size} must exceed twice the margin {margin}"
        )));
    }
    if shape.contains(&0) {
        return Err(invalid("cannot tile an empty volume"));
    }
    let core = block_size - 2 * margin;
    let counts = shape.map(|n| n.div_ceil(core));
    Ok(BlockGrid {
        block_size,
        core_size: core,
        margin,
        shape,
        padded_shape: counts.map(|c| c * core + 2 * margin),
        origin_offset: [margin; 3],
        counts,
    })
}

/// One cube of `block_size^3` values stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub coords: [usize; 3],
    pub size: usize,
    pub values: Vec<f32>,
}

impl Block {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[(k * self.size + j) * self.size + i]
    }

    pub fn center(&self) -> usize {
        self.size / 2
    }
}

/// Cuts block `c` out of the padded volume; voxels outside the original volume are zero.
pub fn extract_block(vol: &VoxelVolume, grid: &BlockGrid, c: [usize; 3]) -> Block {
    let bs = grid.block_size;
    let origin = grid.block_origin(c);
    let [nx, ny, nz] = vol.shape();
    let m = grid.margin as isize;
    let mut values = vec![0.0f32; bs * bs * bs];
    for k in 0..bs {
        let z = (origin[2] + k) as isize - m;
        if z < 0 || z >= nz as isize {
            continue;
        }
        for j in 0..bs {
            let y = (origin[1] + j) as isize - m;
            if y < 0 || y >= ny as isize {
                continue;
            }
            let x0 = origin[0] as isize - m;
            let row = &mut values[(k * bs + j) * bs..(k * bs + j + 1) * bs];
            let src_lo = x0.max(0);
            let src_hi = (x0 + bs as isize).min(nx as isize);
            if src_lo >= src_hi {
                continue;
            }
            let src = vol.index(src_lo as usize, y as usize, z as usize);
            let dst = (src_lo - x0) as usize;
            let n = (src_hi - src_lo) as usize;
            row[dst..dst + n].copy_from_slice(&vol.values()[src..src + n]);
        }
    }
    Block {
        coords: c,
        size: bs,
        values,
    }
}

/// Streams every block of the grid.
pub fn decompose<'a>(vol: &'a VoxelVolume, grid: &'a BlockGrid) -> Result<impl Iterator<Item = Block> + 'a> {
    if vol.shape() != grid.shape {
        return Err(Error::ShapeMismatch {
            expected: grid.shape.to_vec(),
            found: vol.shape().to_vec(),
        });
    }
    Ok(grid.coords().map(move |c| extract_block(vol, grid, c)))
}

/// Stitches blocks back together, keeping only each block's core.
pub fn reassemble(
    blocks: impl IntoIterator<Item = Block>,
    grid: &BlockGrid,
    spacing: [f64; 3],
    unit: Unit,
) -> Result<VoxelVolume> {
    let [nx, ny, nz] = grid.shape;
    let (core, m, bs) = (grid.core_size, grid.margin, grid.block_size);
    let mut out = vec![0.0f32; nx * ny * nz];
    let mut seen = vec![false; grid.block_count()];
    for b in blocks {
        if b.size != bs || b.values.len() != bs * bs * bs {
            return Err(Error::ShapeMismatch {
                expected: vec![bs; 3],
                found: vec![b.size; 3],
            });
        }
        if (0..3).any(|a| b.coords[a] >= grid.counts[a]) {
            return Err(invalid(format!("block {:?} outside grid {:?}", b.coords, grid.counts)));
        }
        let li = grid.linear(b.coords);
        if std::mem::replace(&mut seen[li], true) {
            return Err(invalid(format!("block {:?} supplied twice", b.coords)));
        }
        // core of block c covers original voxels [c*core, (c+1)*core)
        let start = b.coords.map(|c| c * core);
        for dk in 0..core {
            let z = start[2] + dk;
            if z >= nz {
                break;
            }
            for dj in 0..core {
                let y = start[1] + dj;
                if y >= ny {
                    break;
                }
                let n = core.min(nx - start[0].min(nx));
                if n == 0 {
                    continue;
                }
                let src = ((dk + m) * bs + dj + m) * bs + m;
                let dst = (z * ny + y) * nx + start[0];
                out[dst..dst + n].copy_from_slice(&b.values[src..src + n]);
            }
        }
    }
    let missing = seen.iter().filter(|s| !**s).count();
    if missing > 0 {
        return Err(Error::IncompleteSet(format!(
            "{missing} of {} blocks missing",
            grid.block_count()
        )));
    }
    VoxelVolume::new(grid.shape, spacing, unit, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn channel(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        })
    }
}

impl FromStr for Plane {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(invalid(format!("unknown plane '{other}'"))),
        }
    }
}

/// The center cut of a block orthogonal to `plane`, as a `size x size` image
/// (row-major).
pub fn extract_directional_patch(block: &Block, plane: Plane) -> Vec<f32> {
    let n = block.size;
    let c = block.center();
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for col in 0..n {
            out.push(match plane {
                Plane::Axial => block.get(col, r, c),
                Plane::Coronal => block.get(col, c, r),
                Plane::Sagittal => block.get(c, col, r),
            });
        }
    }
    out
}

/// Axial, coronal and sagittal center cuts stacked as a `size x size x 3` image.
pub fn extract_25d(block: &Block) -> Vec<f32> {
    let cuts = Plane::ALL.map(|p| extract_directional_patch(block, p));
    let n = block.size * block.size;
    let mut out = Vec::with_capacity(3 * n);
    for px in 0..n {
        out.extend(cuts.iter().map(|c| c[px]));
    }
    out
}

/// Axial slices `(z-1, z, z+1)` stacked as a `ny x nx x 3` image, replicating
/// the edge slice at the volume boundaries.
pub fn extract_2d3ch(vol: &VoxelVolume, z: usize) -> Result<Vec<f32>> {
    let nz = vol.shape()[2];
    if z >= nz {
        return Err(invalid(format!("slice {z} outside volume depth {nz}")));
    }
    let idx = [z.saturating_sub(1), z, (z + 1).min(nz - 1)];
    let planes = idx.map(|k| vol.slice_values(k));
    let n = planes[0].len();
    let mut out = Vec::with_capacity(3 * n);
    for px in 0..n {
        out.extend(planes.iter().map(|p| p[px]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> VoxelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        VoxelVolume::new(shape, [1.0; 3], Unit::Hu, (0..n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = plan_grid([512, 512, 512], 64, 8).unwrap();
        assert_eq!(g.counts, [11; 3]);
        assert_eq!(g.padded_shape, [544; 3]);
        assert_eq!(g.block_count(), 1331);
        let g = plan_grid([48, 48, 48], 64, 8).unwrap();
        assert_eq!(g.counts, [1; 3]);
        assert_eq!(g.padded_shape, [64; 3]);
        let g = plan_grid([49, 48, 48], 64, 8).unwrap();
        assert_eq!(g.counts, [2, 1, 1]);
        assert_eq!(g.padded_shape[0], 112);
        assert!(plan_grid([8, 8, 8], 16, 8).is_err());
        assert!(plan_grid([0, 8, 8], 64, 8).is_err());
    }

    #[test]
    fn constant_volume_blocks() {
        let vol = VoxelVolume::filled([50, 40, 30], [1.0; 3], Unit::Hu, 2.5).unwrap();
        let grid = plan_grid(vol.shape(), 32, 4).unwrap();
        for b in decompose(&vol, &grid).unwrap() {
            let o = grid.block_origin(b.coords);
            for k in 0..32 {
                for j in 0..32 {
                    for i in 0..32 {
                        let p = [o[0] + i, o[1] + j, o[2] + k];
                        let inside = (0..3).all(|a| p[a] >= 4 && p[a] < 4 + vol.shape()[a]);
                        assert_eq!(b.get(i, j, k), if inside { 2.5 } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn origin_voxel_sits_at_margin() {
        let vol = random_volume([20, 20, 20], 1);
        let grid = plan_grid(vol.shape(), 16, 3).unwrap();
        let b = extract_block(&vol, &grid, [0, 0, 0]);
        assert_eq!(b.get(3, 3, 3), vol.get(0, 0, 0));
    }

    #[test]
    fn margin_perturbations_are_discarded() {
        let vol = random_volume([30, 25, 20], 2);
        let grid = plan_grid(vol.shape(), 16, 4).unwrap();
        let blocks = decompose(&vol, &grid).unwrap().map(|mut b| {
            for k in 0..16 {
                for j in 0..16 {
                    for i in 0..16 {
                        if [i, j, k].iter().any(|&x| !(4..12).contains(&x)) {
                            b.values[(k * 16 + j) * 16 + i] = -99.0;
                        }
                    }
                }
            }
            b
        });
        assert_eq!(reassemble(blocks, &grid, [1.0; 3], Unit::Hu).unwrap(), vol);
    }

    #[test]
    fn core_perturbation_changes_one_voxel() {
        let vol = random_volume([20, 20, 20], 3);
        let grid = plan_grid(vol.shape(), 16, 4).unwrap();
        let target = [1, 0, 1];
        let blocks = decompose(&vol, &grid).unwrap().map(|mut b| {
            if b.coords == target {
                b.values[(5 * 16 + 6) * 16 + 7] += 1.0;
            }
            b
        });
        let out = reassemble(blocks, &grid, [1.0; 3], Unit::Hu).unwrap();
        let changed: Vec<usize> = (0..out.len()).filter(|&i| out.values()[i] != vol.values()[i]).collect();
        assert_eq!(changed, vec![vol.index(8 + 3, 2, 8 + 1)]);
    }

    #[test]
    fn missing_block_is_an_error() {
        let vol = random_volume([20, 20, 20], 4);
        let grid = plan_grid(vol.shape(), 16, 4).unwrap();
        let blocks = decompose(&vol, &grid).unwrap().skip(1);
        assert!(matches!(
            reassemble(blocks, &grid, [1.0; 3], Unit::Hu),
            Err(Error::IncompleteSet(_))
        ));
        let twice = decompose(&vol, &grid)
            .unwrap()
            .chain(decompose(&vol, &grid).unwrap().take(1));
        assert!(reassemble(twice, &grid, [1.0; 3], Unit::Hu).is_err());
    }

    #[test]
    fn single_voxel_cuts() {
        let mut values = vec![0.0f32; 64 * 64 * 64];
        values[(32 * 64 + 32) * 64 + 32] = 7.0;
        let b = Block {
            coords: [0; 3],
            size: 64,
            values,
        };
        let img = extract_25d(&b);
        assert_eq!(img.len(), 64 * 64 * 3);
        for ch in 0..3 {
            let nz: Vec<usize> = (0..64 * 64).filter(|&p| img[p * 3 + ch] != 0.0).collect();
            assert_eq!(nz, vec![32 * 64 + 32]);
        }
        for plane in Plane::ALL {
            let p = extract_directional_patch(&b, plane);
            let nz: Vec<usize> = (0..p.len()).filter(|&i| p[i] != 0.0).collect();
            assert_eq!(nz, vec![32 * 64 + 32]);
        }
    }

    #[test]
    fn off_center_voxel_maps_per_axis_convention() {
        // voxel at (x=5, y=32, z=32): visible in axial (row y=32, col x=5) and
        // coronal (row z=32, col x=5); the sagittal cut at x=32 misses it
        let mut values = vec![0.0f32; 64 * 64 * 64];
        values[(32 * 64 + 32) * 64 + 5] = 1.0;
        let b = Block {
            coords: [0; 3],
            size: 64,
            values,
        };
        assert_eq!(extract_directional_patch(&b, Plane::Axial)[32 * 64 + 5], 1.0);
        assert_eq!(extract_directional_patch(&b, Plane::Coronal)[32 * 64 + 5], 1.0);
        assert!(extract_directional_patch(&b, Plane::Sagittal).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_block_cuts() {
        let b = Block {
            coords: [0; 3],
            size: 16,
            values: vec![0.25; 16 * 16 * 16],
        };
        assert!(extract_25d(&b).iter().all(|&v| v == 0.25));
        assert!(extract_directional_patch(&b, Plane::Coronal).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn neighbour_stacks() {
        let vol = random_volume([4, 3, 5], 5);
        let check = |z: usize, expect: [usize; 3]| {
            let img = extract_2d3ch(&vol, z).unwrap();
            for px in 0..12 {
                for ch in 0..3 {
                    assert_eq!(img[px * 3 + ch], vol.slice_values(expect[ch])[px]);
                }
            }
        };
        check(2, [1, 2, 3]);
        check(0, [0, 0, 1]);
        check(4, [3, 4, 4]);
        assert!(extract_2d3ch(&vol, 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn decompose_reassemble_round_trip(
            nx in 1usize..40, ny in 1usize..40, nz in 1usize..40,
            margin in 0usize..5, core in 1usize..20, seed in any::<u64>()
        ) {
            let vol = random_volume([nx, ny, nz], seed);
            let grid = plan_grid(vol.shape(), core + 2 * margin, margin).unwrap();
            let blocks: Vec<Block> = decompose(&vol, &grid).unwrap().collect();
            prop_assert_eq!(blocks.len(), grid.block_count());
            let out = reassemble(blocks.into_iter().rev(), &grid, [1.0; 3], Unit::Hu).unwrap();
            prop_assert_eq!(out, vol);
        }
    }
}
