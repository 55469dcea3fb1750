//! Segmentation fine-tuning on top of the pretrained encoder.

use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::segment_forward;
use crate::optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::params::{is_encoder_param, HeadKind, ModelParams};
use crate::pretrain::stream_seed;
use crate::scalar::Scalar;
use crate::tensor::{Backward, GradSink, Tape, Tensor, Var};
use crate::volume::{max_crop_offset, preprocess, CropMode, Volume3D};

/// Dice-loss smoothing constant.
pub const DICE_SMOOTH: f64 = 1e-5;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_binary<T: Scalar>(labels: &[T]) -> Result<()> {
    match labels.iter().position(|&g| g != T::ZERO && g != T::ONE) {
        Some(i) => Err(Error::Data(format!("label {} at index {i} is not binary", labels[i].to_f64()))),
        None => Ok(()),
    }
}

/// BCE (mean over voxels, on logits) and soft Dice loss, in that order.
pub fn seg_loss_parts(logits: &[f64], labels: &[f64]) -> (f64, f64) {
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for (&z, &g) in logits.iter().zip(labels) {
        bce += z.max(0.0) - z * g + (-z.abs()).exp().ln_1p();
        let p = sigmoid(z);
        inter += p * g;
        psum += p;
        gsum += g;
    }
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + gsum + DICE_SMOOTH);
    (bce / n, dice)
}

struct SegLossOp<T> {
    logits: Var,
    grad: Vec<T>,
}

impl<T: Scalar> Backward<T> for SegLossOp<T> {
    fn name(&self) -> &'static str {
        "seg_loss"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        if let Some(g) = sink.slot(self.logits) {
            for (g, &d) in g.iter_mut().zip(&self.grad) {
                *g += dy[0] * d;
            }
        }
    }
}

/// `L_BCE + L_Dice` on sigmoid probabilities of `logits`.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    let z = tape.value(logits);
    if z.shape() != labels.shape() {
        return Err(Error::dim("seg_loss", "shape", format!("{:?}", z.shape()), format!("{:?}", labels.shape())));
    }
    check_binary(labels.data())?;
    let zs: Vec<f64> = z.data().iter().map(|v| v.to_f64()).collect();
    let gs: Vec<f64> = labels.data().iter().map(|v| v.to_f64()).collect();
    let (bce, dice) = seg_loss_parts(&zs, &gs);
    let n = zs.len() as f64;
    let ps: Vec<f64> = zs.iter().map(|&v| sigmoid(v)).collect();
    let inter: f64 = ps.iter().zip(&gs).map(|(p, g)| p * g).sum();
    let denom = ps.iter().sum::<f64>() + gs.iter().sum::<f64>() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let grad = ps
        .iter()
        .zip(&gs)
        .map(|(&p, &g)| {
            let d_dice = -(2.0 * g * denom - num) / (denom * denom);
            T::from_f64((p - g) / n + d_dice * p * (1.0 - p))
        })
        .collect();
    Ok(tape.push(Tensor::scalar(T::from_f64(bce + dice)), &[logits], SegLossOp { logits, grad }))
}

/// `2|P∩G| / (|P|+|G|)`, with two empty masks scoring 1.
pub fn dice_metric(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("dice_metric", "voxels", gt.len(), pred.len()));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let total = pred.iter().filter(|&&p| p).count() + gt.iter().filter(|&&g| g).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Names moved from a pretraining checkpoint into a segmentation model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Pretraining parameters left behind (decoder, mask embeddings, head).
    pub dropped: Vec<String>,
}

/// Copies every encoder parameter of `pretrained` into `target`. The encoder
/// name sets must match one-to-one with equal shapes.
pub fn transfer_encoder<T: Scalar>(pretrained: &ModelParams<T>, target: &mut ModelParams<T>) -> Result<TransferReport> {
    let src: Vec<&str> = pretrained.names().filter(|n| is_encoder_param(n)).collect();
    let dst: Vec<&str> = target.names().filter(|n| is_encoder_param(n)).collect();
    if src != dst {
        let only_src: Vec<_> = src.iter().filter(|n| !dst.contains(n)).collect();
        let only_dst: Vec<_> = dst.iter().filter(|n| !src.contains(n)).collect();
        return Err(Error::Config(format!(
            "encoder parameters do not match: only in checkpoint {only_src:?}, only in model {only_dst:?}"
        )));
    }
    let copied: Vec<String> = src.iter().map(|s| s.to_string()).collect();
    for name in &copied {
        let t = pretrained.require(name)?;
        let slot = target.get_mut(name).expect("name present in both");
        if slot.shape() != t.shape() {
            return Err(Error::Config(format!(
                "encoder parameter {name} has shape {:?} in checkpoint, {:?} in model",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    let dropped = pretrained.names().filter(|n| !is_encoder_param(n)).map(String::from).collect();
    Ok(TransferReport { copied, dropped })
}

/// A cropped, windowed volume with its label.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub volume: Volume3D,
    pub label: Volume3D,
}

pub fn prepare_seg_sample(cfg: &RunConfig, s: &Sample, crop: CropMode) -> Result<SegSample> {
    let label = s
        .label
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} has no label", s.volume.provenance())))?;
    if label.shape() != s.volume.shape() {
        return Err(Error::Data(format!("label shape {:?} differs from volume {:?}", label.shape(), s.volume.shape())));
    }
    let volume = preprocess(&s.volume, cfg.model.input_shape, crop)?;
    let offset = match crop {
        CropMode::At(o) => o,
        CropMode::Center => [0, 1, 2].map(|a| (label.shape()[a] - cfg.model.input_shape[a]) / 2),
    };
    let label = label.crop(offset, cfg.model.input_shape)?;
    check_binary(label.values())?;
    Ok(SegSample { volume, label })
}

/// Loss value, gradient, and logits for one sample.
fn sample_step<T: Scalar>(cfg: &RunConfig, params: &ModelParams<T>, s: &SegSample, scale: T) -> Result<(f64, ModelParams<T>)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, true);
    let x = tape.constant(s.volume.to_tensor());
    let logits = segment_forward(&mut tape, &pv, &cfg.model, x)?;
    let loss = seg_loss(&mut tape, logits, &s.label.to_tensor())?;
    let value = tape.value(loss).item().to_f64();
    let scaled = tape.scale(loss, scale);
    let mut g = tape.backward(scaled)?;
    Ok((value, pv.collect(&mut g)?))
}

/// Logits of the segmentation model for one prepared sample.
pub fn predict<T: Scalar>(cfg: &RunConfig, params: &ModelParams<T>, volume: &Volume3D) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let x = tape.constant(volume.to_tensor());
    let logits = segment_forward(&mut tape, &pv, &cfg.model, x)?;
    Ok(tape.value(logits).clone())
}

/// Mean Dice and mean loss over samples, center-cropped.
pub fn evaluate<T: Scalar>(cfg: &RunConfig, params: &ModelParams<T>, samples: &[Sample]) -> Result<(f64, f64)> {
    let (mut dice, mut loss) = (0.0, 0.0);
    for s in samples {
        let s = prepare_seg_sample(cfg, s, CropMode::Center)?;
        let logits = predict(cfg, params, &s.volume)?;
        let z: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
        let g: Vec<f64> = s.label.values().iter().map(|&v| v as f64).collect();
        let (b, d) = seg_loss_parts(&z, &g);
        loss += b + d;
        let pred: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
        let gt: Vec<bool> = g.iter().map(|&v| v > 0.5).collect();
        dice += dice_metric(&pred, &gt)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((dice / n, loss / n))
}

/// One line of the Dice log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRecord {
    pub epoch: usize,
    pub split: String,
    pub dice: f64,
    pub loss: f64,
}

/// Where the encoder weights come from.
#[derive(Clone, Copy, Debug)]
pub enum FinetuneInit<'a, T> {
    Scratch,
    Pretrained(&'a ModelParams<T>),
}

#[derive(Clone, Debug)]
pub struct FinetuneRun<T> {
    pub config: RunConfig,
    pub params: ModelParams<T>,
    pub log: Vec<DiceRecord>,
    pub transfer: Option<TransferReport>,
    /// Optimizer steps actually taken.
    pub steps: usize,
}

impl<T> FinetuneRun<T> {
    /// Last logged Dice of `split`.
    pub fn final_dice(&self, split: &str) -> Option<f64> {
        self.log.iter().rev().find(|r| r.split == split).map(|r| r.dice)
    }
}

fn step_plan(cfg: &RunConfig, data: &[Sample], step: usize) -> Result<Vec<(usize, CropMode)>> {
    let f = &cfg.finetune;
    (0..f.batch_size)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(f.seed, step, b));
            let item = rng.random_range(0..data.len());
            let max = max_crop_offset(data[item].volume.shape(), cfg.model.input_shape)?;
            Ok((item, CropMode::At(max.map(|m| rng.random_range(0..=m)))))
        })
        .collect()
}

/// Trains the segmentation model. An "epoch" is `eval_every` steps; after
/// each one the train split (and `val`, when given) is evaluated and logged.
pub fn run_finetune<T: Scalar>(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    init: FinetuneInit<'_, T>,
    mut on_record: impl FnMut(&DiceRecord) -> Result<()>,
) -> Result<FinetuneRun<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one labeled volume".into()));
    }
    let f = &cfg.finetune;
    let mut params = ModelParams::<T>::init(&cfg.model, HeadKind::Segment, f.init_seed)?;
    let transfer = match init {
        FinetuneInit::Scratch => None,
        FinetuneInit::Pretrained(p) => Some(transfer_encoder(p, &mut params)?),
    };
    let mut state = AdamState::new(&params);
    let hp = AdamHyper { betas: f.betas, eps: f.adam_eps, weight_decay: f.weight_decay };
    let mut log = Vec::new();
    let scale = T::ONE / T::from_f64(f.batch_size as f64);
    let mut steps = 0;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Vec<SegSample>>>(2);
        scope.spawn(move || {
            for step in 0..f.steps {
                let batch = step_plan(cfg, train, step).and_then(|plan| {
                    plan.into_iter().map(|(i, crop)| prepare_seg_sample(cfg, &train[i], crop)).collect()
                });
                let failed = batch.is_err();
                if tx.send(batch.map_err(|e| e.at_step(step))).is_err() || failed {
                    break;
                }
            }
        });
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for step in 0..f.steps {
            let batch = rx.recv().map_err(|_| Error::Data("data producer stopped".into()).at_step(step))??;
            let mut total: Option<ModelParams<T>> = None;
            let mut loss = 0.0;
            for s in &batch {
                let (l, g) = sample_step(cfg, &params, s, scale).map_err(|e| e.at_step(step))?;
                loss += l;
                match &mut total {
                    None => total = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            for (a, &b) in t.data_mut().iter_mut().zip(g.require(name)?.data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let lr = cosine_lr(step, f.steps, f.lr, f.lr_min);
            adamw_step(&mut params, &total.expect("batch non-empty"), &mut state, lr, &hp, step)?;
            steps = step + 1;
            epoch_loss += loss / batch.len() as f64;
            epoch_steps += 1;
            if (step + 1) % f.eval_every == 0 || step + 1 == f.steps {
                let epoch = step / f.eval_every;
                let (dice, _) = evaluate(cfg, &params, train).map_err(|e| e.at_step(step))?;
                let rec = DiceRecord { epoch, split: "train".into(), dice, loss: epoch_loss / epoch_steps as f64 };
                on_record(&rec)?;
                log.push(rec);
                let stop = f.stop_at_dice.is_some_and(|t| dice > t);
                if !val.is_empty() {
                    let (dice, loss) = evaluate(cfg, &params, val).map_err(|e| e.at_step(step))?;
                    let rec = DiceRecord { epoch, split: "val".into(), dice, loss };
                    on_record(&rec)?;
                    log.push(rec);
                }
                epoch_loss = 0.0;
                epoch_steps = 0;
                if stop {
                    break;
                }
            }
        }
        Ok(())
    })?;
    Ok(FinetuneRun { config: cfg.clone(), params, log, transfer, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice_metric(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(dice_metric(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice_metric(&[true, true, false, false], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(dice_metric(&[false; 3], &[false; 3]).unwrap(), 1.0);
    }

    #[test]
    fn loss_limits() {
        let (bce, _) = seg_loss_parts(&[0.0; 4], &[1.0, 0.0, 1.0, 0.0]);
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-15);
        let (_, dice) = seg_loss_parts(&[40.0, -40.0], &[1.0, 0.0]);
        assert!(dice < 1e-9);
        let (_, dice) = seg_loss_parts(&[-40.0, 40.0], &[1.0, 0.0]);
        assert!(dice > 1.0 - 1e-5);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![2]), true);
        let g = Tensor::new([2], vec![0.0, 0.5]).unwrap();
        assert!(matches!(seg_loss(&mut tape, z, &g), Err(Error::Data(_))));
    }
}
