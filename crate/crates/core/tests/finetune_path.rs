use hyspark::config::{ModelConfig, RunConfig};
use hyspark::dataset::phantom_samples;
use hyspark::finetune::{evaluate, run_finetune, seg_loss, transfer_encoder, FinetuneInit};
use hyspark::mask::{build_pyramid, init_junction_mask};
use hyspark::model::{dense_encode, encode, segment_forward};
use hyspark::oracle::{finite_diff_grad, relative_error};
use hyspark::params::{HeadKind, ModelParams};
use hyspark::verify::{GRAD_FLOOR, GRAD_TOL};
use hyspark::{Tape, Tensor};

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.finetune.batch_size = 1;
    cfg.finetune.steps = 4;
    cfg.finetune.eval_every = 2;
    cfg
}

fn input(cfg: &ModelConfig) -> Tensor<f64> {
    let [d, h, w] = cfg.input_shape;
    Tensor::from_fn([1, 1, d, h, w], |i| ((i * 7919) % 101) as f64 / 101.0)
}

#[test]
fn dense_encode_is_the_ratio_zero_sparse_path() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, HeadKind::Segment, 2).unwrap();
    let junction = init_junction_mask(cfg.junction_shape(), 0.0, 5).unwrap();
    assert_eq!(junction.active_count(), junction.cells());
    let pyramid = build_pyramid(&junction, &cfg.cnn.strides(), cfg.input_shape).unwrap();

    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let x = tape.constant(input(&cfg));
    let dense = dense_encode(&mut tape, &pv, &cfg, x).unwrap();
    let sparse = encode(&mut tape, &pv, &cfg, x, &pyramid).unwrap();
    for (a, b) in dense.cnn.iter().zip(&sparse.cnn).chain([(&dense.junction, &sparse.junction)]) {
        let (a, b) = (a.to_dense(&tape), b.to_dense(&tape));
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    for (i, s) in dense.cnn.iter().enumerate() {
        assert_eq!(s.spatial(), cfg.stage_shape(i + 1));
        assert_eq!(s.channels(), cfg.cnn.channels[i]);
    }
}

#[test]
fn pretrained_encoder_changes_segmentation_output() {
    let cfg = ModelConfig::tiny();
    let fresh = ModelParams::<f64>::init(&cfg, HeadKind::Segment, 1).unwrap();
    let pretrained = ModelParams::<f64>::init(&cfg, HeadKind::Reconstruct, 99).unwrap();
    let mut loaded = fresh.clone();
    let report = transfer_encoder(&pretrained, &mut loaded).unwrap();
    assert!(!report.copied.is_empty());
    let run = |p: &ModelParams<f64>| {
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape, false);
        let x = tape.constant(input(&cfg));
        let y = segment_forward(&mut tape, &pv, &cfg, x).unwrap();
        tape.value(y).clone()
    };
    assert!(run(&fresh).max_abs_diff(&run(&loaded)) > 1e-6);
}

#[test]
fn zero_lr_keeps_the_transferred_baseline() {
    let mut cfg = tiny_run();
    cfg.finetune.lr = 0.0;
    cfg.finetune.lr_min = 0.0;
    let data = phantom_samples(2, [20; 3], 3).unwrap();
    let pretrained = ModelParams::<f32>::init(&cfg.model, HeadKind::Reconstruct, 8).unwrap();
    let run = run_finetune(&cfg, &data, &[], FinetuneInit::Pretrained(&pretrained), |_| Ok(())).unwrap();

    let mut baseline = ModelParams::<f32>::init(&cfg.model, HeadKind::Segment, cfg.finetune.init_seed).unwrap();
    transfer_encoder(&pretrained, &mut baseline).unwrap();
    let (dice, _) = evaluate(&cfg, &baseline, &data).unwrap();
    assert_eq!(run.log.len(), 2);
    assert!(run.log.iter().all(|r| r.dice == dice));
    assert_eq!(run.params, baseline);
}

#[test]
fn fixed_seed_gives_identical_dice_logs() {
    let cfg = tiny_run();
    let data = phantom_samples(2, [20; 3], 4).unwrap();
    let a = run_finetune::<f32>(&cfg, &data, &data, FinetuneInit::Scratch, |_| Ok(())).unwrap();
    let b = run_finetune::<f32>(&cfg, &data, &data, FinetuneInit::Scratch, |_| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
}

#[test]
fn seg_loss_gradient_on_8_cubed() {
    let n = 8 * 8 * 8;
    let logits = Tensor::from_fn([1, 1, 8, 8, 8], |i| ((i * 37) % 23) as f64 / 5.0 - 2.2);
    let labels = Tensor::from_fn([1, 1, 8, 8, 8], |i| ((i * 13) % 5 < 2) as u8 as f64);
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), true);
    let l = seg_loss(&mut tape, z, &labels).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic = grads.get(z).unwrap().clone();
    let coords: Vec<usize> = (0..n).step_by(3).collect();
    let numeric = finite_diff_grad(
        |v| {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::new([1, 1, 8, 8, 8], v.to_vec())?);
            let l = seg_loss(&mut tape, z, &labels)?;
            Ok(tape.value(l).item())
        },
        logits.data(),
        &coords,
        1e-5,
    )
    .unwrap();
    let worst = coords
        .iter()
        .zip(numeric)
        .map(|(&i, g)| relative_error(analytic.data()[i], g, GRAD_FLOOR))
        .fold(0.0, f64::max);
    assert!(worst < GRAD_TOL, "max rel err {worst:e}");
}
