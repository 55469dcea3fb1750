//! Masked-image-modeling pretraining: per-block targets, masked MSE, and the
//! training loop.

use std::sync::mpsc::sync_channel;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mask::{build_pyramid, independent_pyramid, init_junction_mask, MaskGrid, MaskPyramid};
use crate::model::{reconstruct_forward, ReconstructionOutput};
use crate::optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::params::{HeadKind, ModelParams, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Backward, GradSink, Tape, Tensor, Var};
use crate::volume::{max_crop_offset, preprocess, CropMode, Volume3D};

/// Guards the division for constant blocks.
pub const TARGET_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-block normalized reconstruction targets.
///
/// Each masked junction cell owns one voxel block; its voxels are normalized
/// by that block's own mean and (population) standard deviation. Voxels of
/// unmasked blocks carry no target.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTargets {
    shape: [usize; 3],
    block: [usize; 3],
    values: Vec<f64>,
    defined: Vec<bool>,
    stats: Vec<Option<BlockStats>>,
}

impl NormalizedTargets {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Target per voxel; zero where undefined.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True for voxels of masked blocks.
    pub fn defined(&self) -> &[bool] {
        &self.defined
    }

    /// Statistics per junction cell, `None` for unmasked cells.
    pub fn stats(&self) -> &[Option<BlockStats>] {
        &self.stats
    }

    pub fn block(&self) -> [usize; 3] {
        self.block
    }

    fn cell_of(&self, voxel: usize) -> usize {
        let [_, h, w] = self.shape;
        let (z, y, x) = (voxel / (h * w), voxel / w % h, voxel % w);
        let g = [h / self.block[1], w / self.block[2]];
        ((z / self.block[0]) * g[0] + y / self.block[1]) * g[1] + x / self.block[2]
    }

    /// Maps normalized predictions back to intensities in masked blocks and
    /// keeps `visible` elsewhere.
    pub fn denormalize(&self, pred: &[f64], visible: &[f32]) -> Result<Vec<f32>> {
        let n = self.values.len();
        if pred.len() != n || visible.len() != n {
            return Err(Error::dim("denormalize", "voxels", n, format!("{} / {}", pred.len(), visible.len())));
        }
        Ok((0..n)
            .map(|i| match self.stats[self.cell_of(i)] {
                Some(s) if self.defined[i] => (pred[i] * (s.std + TARGET_EPS) + s.mean) as f32,
                _ => visible[i],
            })
            .collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        Tensor::new([1, 1, d, h, w], self.values.iter().map(|&v| T::from_f64(v)).collect()).expect("target shape")
    }
}

/// Normalizes the voxel block under every masked (false) cell of `junction`.
pub fn normalize_targets(volume: &Volume3D, junction: &MaskGrid) -> Result<NormalizedTargets> {
    let shape = volume.shape();
    let g = junction.shape();
    let mut block = [0; 3];
    for a in 0..3 {
        if g[a] == 0 || shape[a] % g[a] != 0 {
            return Err(Error::dim("normalize_targets", ["D", "H", "W"][a], format!("multiple of {}", g[a]), shape[a]));
        }
        block[a] = shape[a] / g[a];
    }
    let n = volume.len();
    let mut values = vec![0.0; n];
    let mut defined = vec![false; n];
    let mut stats = vec![None; junction.cells()];
    let src = volume.values();
    let mut idx = Vec::with_capacity(block.iter().product());
    for cell in 0..junction.cells() {
        if junction.bits()[cell] {
            continue;
        }
        let [cz, cy, cx] = junction.coord(cell);
        idx.clear();
        for z in cz * block[0]..(cz + 1) * block[0] {
            for y in cy * block[1]..(cy + 1) * block[1] {
                let row = (z * shape[1] + y) * shape[2];
                idx.extend(row + cx * block[2]..row + (cx + 1) * block[2]);
            }
        }
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| src[i] as f64).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (src[i] as f64 - mean).powi(2)).sum::<f64>() / m;
        let std = var.sqrt();
        for &i in &idx {
            values[i] = (src[i] as f64 - mean) / (std + TARGET_EPS);
            defined[i] = true;
        }
        stats[cell] = Some(BlockStats { mean, std });
    }
    Ok(NormalizedTargets { shape, block, values, defined, stats })
}

struct MaskedMseOp<T> {
    pred: Var,
    diff: Vec<(usize, T)>,
    scale: T,
}

impl<T: Scalar> Backward<T> for MaskedMseOp<T> {
    fn name(&self) -> &'static str {
        "masked_mse"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let c = dy[0] * self.scale;
        if let Some(g) = sink.slot(self.pred) {
            for &(i, d) in &self.diff {
                g[i] += c * d;
            }
        }
    }
}

/// Mean squared error over voxels where `loss_mask` is true. Other voxels are
/// never read, so they contribute exactly nothing to value or gradient.
pub fn masked_mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &Tensor<T>, loss_mask: &[bool]) -> Result<Var> {
    let p = tape.value(pred);
    if p.numel() != targets.numel() || p.numel() != loss_mask.len() {
        return Err(Error::dim(
            "masked_mse_loss",
            "numel",
            p.numel(),
            format!("targets {} / mask {}", targets.numel(), loss_mask.len()),
        ));
    }
    let diff: Vec<(usize, T)> = loss_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i, p.data()[i] - targets.data()[i]))
        .collect();
    if diff.is_empty() {
        return Err(Error::consistency("masked_mse_loss", "no masked voxels"));
    }
    let inv = T::ONE / T::from_f64(diff.len() as f64);
    let loss = diff.iter().map(|&(_, d)| d * d).sum::<T>() * inv;
    let scale = T::from_f64(2.0) * inv;
    Ok(tape.push(Tensor::scalar(loss), &[pred], MaskedMseOp { pred, diff, scale }))
}

/// Mask pyramid for one sample under the run's masking mode.
pub fn sample_pyramid(cfg: &RunConfig, mask_seed: u64) -> Result<MaskPyramid> {
    let m = &cfg.model;
    let ratio = cfg.pretrain.mask_ratio;
    if cfg.pretrain.bottom_up {
        let junction = init_junction_mask(m.junction_shape(), ratio, mask_seed)?;
        build_pyramid(&junction, &m.cnn.strides(), m.input_shape)
    } else {
        independent_pyramid(&m.cnn.strides(), m.input_shape, ratio, mask_seed)
    }
}

/// A preprocessed crop with its masks and targets, ready for the trainer.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub item: usize,
    pub mask_seed: u64,
    pub volume: Volume3D,
    pub pyramid: MaskPyramid,
    pub targets: NormalizedTargets,
    /// Voxels the loss is computed on: those the voxel mask hides.
    pub loss_mask: Vec<bool>,
}

impl PreparedSample {
    pub fn masked_voxels(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn prepare_sample(cfg: &RunConfig, raw: &Volume3D, item: usize, crop: CropMode, mask_seed: u64) -> Result<PreparedSample> {
    let volume = preprocess(raw, cfg.model.input_shape, crop)?;
    let pyramid = sample_pyramid(cfg, mask_seed)?;
    // Independent masks do not align with junction blocks, so every block is
    // normalized and the voxel mask alone selects the loss.
    let norm_grid = if cfg.pretrain.bottom_up {
        pyramid.junction().clone()
    } else {
        MaskGrid::full(cfg.model.junction_shape(), false, 0)
    };
    let targets = normalize_targets(&volume, &norm_grid)?;
    let loss_mask = pyramid.voxel().bits().iter().map(|&b| !b).collect();
    Ok(PreparedSample { item, mask_seed, volume, pyramid, targets, loss_mask })
}

/// Forward pass and loss for one sample.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &RunConfig,
    s: &PreparedSample,
) -> Result<(Var, ReconstructionOutput)> {
    let x = tape.constant(s.volume.to_tensor());
    let out = reconstruct_forward(tape, pv, &cfg.model, x, &s.pyramid)?;
    let loss = masked_mse_loss(tape, out.prediction, &s.targets.to_tensor(), &s.loss_mask)?;
    Ok((loss, out))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, step, slot)`.
pub fn stream_seed(seed: u64, step: usize, slot: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step as u64) ^ slot as u64)
}

/// Samples for one step. Depends only on the seed, step, batch size, crop
/// geometry and data count, so runs that differ in mask ratio or architecture
/// see identical data order.
pub fn batch_plan(cfg: &RunConfig, data: &[Volume3D], step: usize) -> Result<Vec<(usize, CropMode, u64)>> {
    let t = &cfg.pretrain;
    (0..t.batch_size)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(t.seed, step, b));
            let item = rng.random_range(0..data.len());
            let max = max_crop_offset(data[item].shape(), cfg.model.input_shape)?;
            let offset = max.map(|m| rng.random_range(0..=m));
            Ok((item, CropMode::At(offset), rng.next_u64()))
        })
        .collect()
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub masked_voxels: usize,
    pub seed: u64,
}

/// Work actually done for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    pub tokens: usize,
    pub junction_active: usize,
    /// Active sites per CNN stage.
    pub active_sites: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PretrainRun<T> {
    pub config: RunConfig,
    pub params: ModelParams<T>,
    pub state: AdamState<T>,
    pub log: Vec<LossRecord>,
    /// Per step, per sample.
    pub stats: Vec<Vec<SampleStats>>,
}

impl<T> PretrainRun<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Mean of the first and of the last `window` values.
pub fn smoothed_ends(values: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, values.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&values[..w.min(values.len())]), mean(&values[values.len().saturating_sub(w)..]))
}

pub fn adam_hyper(t: &crate::config::TrainConfig) -> AdamHyper {
    AdamHyper { betas: t.betas, eps: t.adam_eps, weight_decay: t.weight_decay }
}

/// Runs masked-image pretraining on raw (HU) volumes. `on_step` sees each
/// log record as soon as the step finishes.
pub fn run_pretrain<T: Scalar>(
    cfg: &RunConfig,
    data: &[Volume3D],
    mut on_step: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<PretrainRun<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pretraining needs at least one volume".into()));
    }
    let t = &cfg.pretrain;
    let mut params = ModelParams::<T>::init(&cfg.model, HeadKind::Reconstruct, t.init_seed)?;
    let mut state = AdamState::new(&params);
    let hp = adam_hyper(t);
    let mut log = Vec::with_capacity(t.steps);
    let mut stats = Vec::with_capacity(t.steps);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Vec<PreparedSample>>>(2);
        scope.spawn(move || {
            for step in 0..t.steps {
                let batch = batch_plan(cfg, data, step).and_then(|plan| {
                    plan.into_iter()
                        .map(|(item, crop, seed)| prepare_sample(cfg, &data[item], item, crop, seed))
                        .collect()
                });
                let failed = batch.is_err();
                if tx.send(batch.map_err(|e| e.at_step(step))).is_err() || failed {
                    break;
                }
            }
        });
        for step in 0..t.steps {
            let batch = rx.recv().map_err(|_| Error::Data("data producer stopped".into()).at_step(step))??;
            let lr = cosine_lr(step, t.steps, t.lr, t.lr_min);
            let (loss, grads, step_stats) = batch_gradients(cfg, &params, &batch).map_err(|e| e.at_step(step))?;
            adamw_step(&mut params, &grads, &mut state, lr, &hp, step)?;
            let record = LossRecord {
                step,
                lr,
                loss,
                masked_voxels: batch.iter().map(PreparedSample::masked_voxels).sum(),
                seed: t.seed,
            };
            on_step(&record)?;
            log.push(record);
            stats.push(step_stats);
        }
        Ok(())
    })?;
    Ok(PretrainRun { config: cfg.clone(), params, state, log, stats })
}

/// Batch-mean loss and gradient.
pub fn batch_gradients<T: Scalar>(
    cfg: &RunConfig,
    params: &ModelParams<T>,
    batch: &[PreparedSample],
) -> Result<(f64, ModelParams<T>, Vec<SampleStats>)> {
    let inv = T::ONE / T::from_f64(batch.len() as f64);
    let mut total: Option<ModelParams<T>> = None;
    let mut loss_sum = 0.0;
    let mut stats = Vec::with_capacity(batch.len());
    for s in batch {
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, true);
        let (loss, out) = sample_loss(&mut tape, &pv, cfg, s)?;
        loss_sum += tape.value(loss).item().to_f64();
        stats.push(SampleStats {
            tokens: out.encoder.tokens.len(),
            junction_active: s.pyramid.junction().active_count(),
            active_sites: out.encoder.active_sites(),
        });
        let scaled = tape.scale(loss, inv);
        let mut g = tape.backward(scaled)?;
        let g = pv.collect(&mut g)?;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (name, t) in acc.iter_mut() {
                    let src = g.require(name)?;
                    for (a, &b) in t.data_mut().iter_mut().zip(src.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok((loss_sum / batch.len() as f64, total.expect("batch is non-empty"), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: Vec<f32>, shape: [usize; 3]) -> Volume3D {
        Volume3D::new(shape, [1.0; 3], values, "t").unwrap()
    }

    #[test]
    fn constant_block_gives_zero_target() {
        let v = vol(vec![0.7; 64], [4, 4, 4]);
        let m = MaskGrid::new([2, 2, 2], vec![false, true, true, true, true, true, true, true], 0).unwrap();
        let t = normalize_targets(&v, &m).unwrap();
        assert_eq!(t.defined().iter().filter(|&&d| d).count(), 8);
        assert!(t.values().iter().all(|&x| x == 0.0));
        assert_eq!(t.stats()[0], Some(BlockStats { mean: 0.7f32 as f64, std: 0.0 }));
    }

    #[test]
    fn single_voxel_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new([4], vec![0.0, 2.0, 5.0, 9.0]).unwrap(), true);
        let t = Tensor::new([4], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let l = masked_mse_loss(&mut tape, p, &t, &[false, true, false, false]).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        let mut g = tape.backward(l).unwrap();
        assert_eq!(g.take(p).unwrap().data(), &[0.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros(vec![2]), true);
        let err = masked_mse_loss(&mut tape, p, &Tensor::zeros(vec![2]), &[false, false]).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }));
    }

    #[test]
    fn cosine_smoothing_ends() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(smoothed_ends(&v, 2), (0.5, 8.5));
    }
}
