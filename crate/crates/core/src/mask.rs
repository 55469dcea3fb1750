//! Junction masks and their bottom-up replication to every encoder scale.
//!
//! The mask is sampled once, at the junction between the CNN and the
//! transformer, and every finer scale is a nearest-neighbour replication of
//! it. Because of that, each pooling window at any scale is either entirely
//! active or entirely masked.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const AXES: [&str; 3] = ["D", "H", "W"];

/// Boolean grid at one resolution; `true` marks an active (unmasked) cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    shape: [usize; 3],
    bits: Vec<bool>,
    scale_id: usize,
}

impl MaskGrid {
    pub fn new(shape: [usize; 3], bits: Vec<bool>, scale_id: usize) -> Result<Self> {
        let cells: usize = shape.iter().product();
        if bits.len() != cells {
            return Err(Error::dim("MaskGrid::new", "bits", cells, bits.len()));
        }
        Ok(Self { shape, bits, scale_id })
    }

    pub fn full(shape: [usize; 3], active: bool, scale_id: usize) -> Self {
        Self {
            shape,
            bits: vec![active; shape.iter().product()],
            scale_id,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Stage index this grid belongs to (0 = input voxels, N = junction).
    pub fn scale_id(&self) -> usize {
        self.scale_id
    }

    pub fn with_scale_id(mut self, scale_id: usize) -> Self {
        self.scale_id = scale_id;
        self
    }

    pub fn cells(&self) -> usize {
        self.bits.len()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn keep_ratio(&self) -> f64 {
        self.active_count() as f64 / self.cells() as f64
    }

    pub fn linear(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn coord(&self, index: usize) -> [usize; 3] {
        let [_, h, w] = self.shape;
        [index / (h * w), (index / w) % h, index % w]
    }

    pub fn is_active(&self, coord: [usize; 3]) -> bool {
        self.bits[self.linear(coord)]
    }

    /// Linear indices of active cells in scan order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn inverted(&self) -> Self {
        Self {
            shape: self.shape,
            bits: self.bits.iter().map(|b| !b).collect(),
            scale_id: self.scale_id,
        }
    }
}

/// Number of cells masked for `ratio`, clamped so that a ratio strictly
/// between 0 and 1 always leaves at least one active and one masked cell.
pub fn masked_count(cells: usize, ratio: f64) -> usize {
    let n = (ratio * cells as f64).round() as usize;
    if ratio > 0.0 {
        n.clamp(1, cells.saturating_sub(1).max(1))
    } else {
        0
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Samples the junction mask: `masked_count` cells chosen uniformly without
/// replacement are masked, the rest stay active.
pub fn init_junction_mask(grid_shape: [usize; 3], mask_ratio: f64, seed: u64) -> Result<MaskGrid> {
    check_ratio(mask_ratio)?;
    let cells: usize = grid_shape.iter().product();
    if cells < 2 {
        return Err(Error::Config(format!(
            "junction grid {grid_shape:?} needs at least 2 cells"
        )));
    }
    let masked = masked_count(cells, mask_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![true; cells];
    for i in sample(&mut rng, cells, masked) {
        bits[i] = false;
    }
    MaskGrid::new(grid_shape, bits, 0)
}

/// Nearest-neighbour replication: every cell becomes a `factor³` block.
pub fn upsample_mask(mask: &MaskGrid, factor: usize) -> MaskGrid {
    assert!(factor >= 1, "upsample factor must be >= 1");
    let [d, h, w] = mask.shape;
    let shape = [d * factor, h * factor, w * factor];
    let mut bits = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let row = ((z / factor) * h + y / factor) * w;
            bits.extend((0..shape[2]).map(|x| mask.bits[row + x / factor]));
        }
    }
    MaskGrid {
        shape,
        bits,
        scale_id: mask.scale_id,
    }
}

/// Block downsampling: an output cell is active iff any cell of its block is.
pub fn downsample_mask(mask: &MaskGrid, factor: usize) -> Result<MaskGrid> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be >= 1".into()));
    }
    for (a, &n) in mask.shape.iter().enumerate() {
        if n % factor != 0 {
            return Err(Error::dim("downsample_mask", AXES[a], format!("multiple of {factor}"), n));
        }
    }
    let shape = mask.shape.map(|n| n / factor);
    let mut bits = vec![false; shape.iter().product()];
    let [_, h, w] = mask.shape;
    for (i, &b) in mask.bits.iter().enumerate() {
        if b {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            bits[((z / factor) * shape[1] + y / factor) * shape[2] + x / factor] = true;
        }
    }
    Ok(MaskGrid {
        shape,
        bits,
        scale_id: mask.scale_id,
    })
}

/// How the per-scale masks of a pyramid were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PyramidMode {
    /// Every scale replicates the junction mask.
    BottomUp,
    /// Every scale is sampled on its own (ablation arm; not consistent).
    Independent,
}

/// Masks for every encoder stage plus the input-resolution voxel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    /// `stages[i]` is M_{i+1}; the last entry is the junction mask.
    stages: Vec<MaskGrid>,
    voxel: MaskGrid,
    /// `strides[0]` maps input → stage 1, `strides[i]` maps stage i → i+1.
    strides: Vec<usize>,
    mode: PyramidMode,
}

fn cumulative(strides: &[usize]) -> usize {
    strides.iter().product()
}

fn check_geometry(strides: &[usize], input_shape: [usize; 3]) -> Result<[usize; 3]> {
    if strides.is_empty() || strides.contains(&0) {
        return Err(Error::Config(format!("invalid stage strides {strides:?}")));
    }
    let total = strides
        .iter()
        .try_fold(1usize, |t, &s| t.checked_mul(s))
        .ok_or_else(|| Error::Config(format!("stage strides {strides:?} overflow")))?;
    for (a, &n) in input_shape.iter().enumerate() {
        if n % total != 0 || n == 0 {
            return Err(Error::Config(format!(
                "input axis {} extent {n} is not divisible by the cumulative stride {total}",
                AXES[a]
            )));
        }
    }
    Ok(input_shape.map(|n| n / total))
}

/// Junction grid shape for an input volume and the encoder's stage strides.
pub fn junction_shape(strides: &[usize], input_shape: [usize; 3]) -> Result<[usize; 3]> {
    check_geometry(strides, input_shape)
}

/// Replicates the junction mask to every stage: `M_i` is the junction upsampled
/// by the product of strides between stage `i` and the junction.
pub fn build_pyramid(junction: &MaskGrid, stage_strides: &[usize], input_shape: [usize; 3]) -> Result<MaskPyramid> {
    let jshape = check_geometry(stage_strides, input_shape)?;
    if junction.shape != jshape {
        let axis = (0..3).find(|&a| junction.shape[a] != jshape[a]).unwrap_or(0);
        return Err(Error::Config(format!(
            "junction axis {} has extent {}, expected {} for input {input_shape:?} and strides {stage_strides:?}",
            AXES[axis], junction.shape[axis], jshape[axis]
        )));
    }
    let n = stage_strides.len();
    let stages = (1..=n)
        .map(|i| upsample_mask(junction, cumulative(&stage_strides[i..])).with_scale_id(i))
        .collect();
    let voxel = upsample_mask(junction, cumulative(stage_strides)).with_scale_id(0);
    Ok(MaskPyramid {
        stages,
        voxel,
        strides: stage_strides.to_vec(),
        mode: PyramidMode::BottomUp,
    })
}

/// The "without bottom-up masking" arm: every stage mask is sampled
/// independently at its own resolution with the same ratio. The voxel mask
/// replicates stage 1 so the stem still sees whole blocks.
pub fn independent_pyramid(
    stage_strides: &[usize],
    input_shape: [usize; 3],
    mask_ratio: f64,
    seed: u64,
) -> Result<MaskPyramid> {
    check_geometry(stage_strides, input_shape)?;
    let n = stage_strides.len();
    let mut stages = Vec::with_capacity(n);
    for i in 1..=n {
        let shape = input_shape.map(|e| e / cumulative(&stage_strides[..i]));
        let stage_seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64));
        stages.push(init_junction_mask(shape, mask_ratio, stage_seed)?.with_scale_id(i));
    }
    let voxel = upsample_mask(&stages[0], stage_strides[0]).with_scale_id(0);
    Ok(MaskPyramid {
        stages,
        voxel,
        strides: stage_strides.to_vec(),
        mode: PyramidMode::Independent,
    })
}

/// One failed cross-scale check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidViolation {
    /// Finer scale id of the offending pair (0 = voxel mask).
    pub scale: usize,
    pub mismatched_cells: usize,
}

impl MaskPyramid {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Mask of stage `i`, 1-based.
    pub fn stage(&self, i: usize) -> &MaskGrid {
        &self.stages[i - 1]
    }

    pub fn stages(&self) -> &[MaskGrid] {
        &self.stages
    }

    pub fn junction(&self) -> &MaskGrid {
        self.stages.last().expect("pyramid has at least one stage")
    }

    pub fn voxel(&self) -> &MaskGrid {
        &self.voxel
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn mode(&self) -> PyramidMode {
        self.mode
    }

    /// Voxel edge length of one junction cell.
    pub fn block_size(&self) -> usize {
        cumulative(&self.strides)
    }

    /// Checks that block-downsampling every scale reproduces the next coarser
    /// one exactly, from the voxel mask up to the junction. Returns every
    /// violating pair.
    pub fn consistency_violations(&self) -> Vec<PyramidViolation> {
        let mut out = Vec::new();
        let mut finer = &self.voxel;
        for (i, coarser) in self.stages.iter().enumerate() {
            let mismatched = match downsample_mask(finer, self.strides[i]) {
                Ok(down) if down.shape == coarser.shape => down
                    .bits
                    .iter()
                    .zip(&coarser.bits)
                    .filter(|(a, b)| a != b)
                    .count(),
                _ => coarser.cells(),
            };
            // Replication also requires each block to be uniform.
            let uniform = upsample_mask(coarser, self.strides[i]).bits == finer.bits;
            if mismatched > 0 || !uniform {
                out.push(PyramidViolation {
                    scale: finer.scale_id,
                    mismatched_cells: mismatched.max(usize::from(!uniform)),
                });
            }
            finer = coarser;
        }
        out
    }

    pub fn check_consistency(&self) -> Result<()> {
        match self.consistency_violations().first() {
            None => Ok(()),
            Some(v) => Err(Error::consistency(
                "MaskPyramid",
                format!(
                    "scale {} does not block-downsample onto scale {} ({} mismatched cells)",
                    v.scale,
                    v.scale + 1,
                    v.mismatched_cells
                ),
            )),
        }
    }
}

/// Header of a mask dump file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDumpHeader {
    pub shape: [usize; 3],
    pub scale_id: usize,
    pub ratio: f64,
    pub seed: u64,
}

/// Run-length encoded mask: runs alternate starting with the value `first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    pub header: MaskDumpHeader,
    pub first: bool,
    pub runs: Vec<usize>,
}

impl MaskDump {
    pub fn encode(mask: &MaskGrid, ratio: f64, seed: u64) -> Self {
        let first = mask.bits.first().copied().unwrap_or(false);
        let mut runs = Vec::new();
        let mut current = first;
        let mut len = 0;
        for &b in &mask.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        if len > 0 {
            runs.push(len);
        }
        Self {
            header: MaskDumpHeader {
                shape: mask.shape,
                scale_id: mask.scale_id,
                ratio,
                seed,
            },
            first,
            runs,
        }
    }

    pub fn decode(&self) -> Result<MaskGrid> {
        let cells = self.header.shape.iter().try_fold(1usize, |n, &d| n.checked_mul(d));
        let covered = self.runs.iter().try_fold(0usize, |n, &r| n.checked_add(r));
        let cells = match (cells, covered) {
            (Some(c), Some(r)) if c == r => c,
            _ => {
                return Err(Error::format(
                    "mask dump",
                    format!("runs cover {covered:?} cells, shape {:?} has {cells:?}", self.header.shape),
                ))
            }
        };
        let mut bits = Vec::with_capacity(cells);
        let mut value = self.first;
        for &run in &self.runs {
            bits.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        MaskGrid::new(self.header.shape, bits, self.header.scale_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask dump serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("mask dump", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn junction_mask_counts() {
        let m = init_junction_mask([6, 6, 6], 0.75, 3).unwrap();
        assert_eq!(m.cells(), 216);
        assert_eq!(m.active_count(), 54);
        let all = init_junction_mask([6, 6, 6], 0.0, 3).unwrap();
        assert_eq!(all.active_count(), 216);
        assert_eq!(m, init_junction_mask([6, 6, 6], 0.75, 3).unwrap());
    }

    #[test]
    fn ratio_out_of_range_is_config_error() {
        for r in [1.0, 1.5, -0.1, f64::NAN] {
            assert!(matches!(init_junction_mask([2, 2, 2], r, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn clamp_keeps_one_of_each() {
        // 0.99 of 8 rounds to 8 masked; the clamp leaves one active.
        let m = init_junction_mask([2, 2, 2], 0.99, 1).unwrap();
        assert_eq!(m.active_count(), 1);
        let m = init_junction_mask([2, 2, 2], 0.01, 1).unwrap();
        assert_eq!(m.active_count(), 7);
    }

    #[test]
    fn upsample_single_cell_is_aligned_block() {
        let mut bits = vec![false; 8];
        bits[5] = true; // (1, 0, 1)
        let m = MaskGrid::new([2, 2, 2], bits, 4).unwrap();
        let up = upsample_mask(&m, 2);
        assert_eq!(up.shape(), [4, 4, 4]);
        assert_eq!(up.active_count(), 8);
        for z in 2..4 {
            for y in 0..2 {
                for x in 2..4 {
                    assert!(up.is_active([z, y, x]));
                }
            }
        }
        assert_eq!(upsample_mask(&m, 1), m);
    }

    #[test]
    fn pyramid_shapes_for_paper_geometry() {
        let j = init_junction_mask([6, 6, 6], 0.75, 0).unwrap();
        let p = build_pyramid(&j, &[2, 2, 2, 2], [96, 96, 96]).unwrap();
        assert_eq!(p.stage(1).shape(), [48, 48, 48]);
        assert_eq!(p.stage(4).shape(), [6, 6, 6]);
        assert_eq!(p.voxel().shape(), [96, 96, 96]);
        assert!(p.check_consistency().is_ok());
    }

    #[test]
    fn pyramid_rejects_bad_geometry() {
        let j = init_junction_mask([2, 2, 2], 0.5, 0).unwrap();
        let err = build_pyramid(&j, &[2, 2, 2, 2], [32, 32, 30]).unwrap_err();
        assert!(err.to_string().contains("axis W"), "{err}");
        let err = build_pyramid(&j, &[2, 2, 2], [32, 32, 32]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn independent_pyramid_is_inconsistent() {
        let p = independent_pyramid(&[2, 2, 2, 2], [32, 32, 32], 0.75, 7).unwrap();
        assert_eq!(p.mode(), PyramidMode::Independent);
        assert!(p.check_consistency().is_err());
    }

    #[test]
    fn dump_round_trip() {
        let m = init_junction_mask([4, 3, 5], 0.5, 11).unwrap().with_scale_id(2);
        let dump = MaskDump::encode(&m, 0.5, 11);
        let back = MaskDump::from_json(&dump.to_json()).unwrap().decode().unwrap();
        assert_eq!(back, m);
        let mut bad = dump.clone();
        bad.runs.pop();
        assert!(matches!(bad.decode(), Err(Error::Format { .. })));
    }
}
