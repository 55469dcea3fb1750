use hyspark::finetune::dice_metric;
use hyspark::mask::{build_pyramid, downsample_mask, init_junction_mask, masked_count, upsample_mask, MaskDump, MaskGrid};
use hyspark::optim::cosine_lr;
use hyspark::pretrain::masked_mse_loss;
use hyspark::sparse::{sparse_conv3d, sparsify};
use hyspark::volume::{hu_to_unit, load_volume, save_volume, Volume3D};
use hyspark::{Tape, Tensor};
use proptest::prelude::*;

fn grid_shape() -> impl Strategy<Value = [usize; 3]> {
    [1usize..6, 1usize..6, 1usize..6]
}

fn mask_grid() -> impl Strategy<Value = MaskGrid> {
    grid_shape().prop_flat_map(|s| {
        proptest::collection::vec(any::<bool>(), s.iter().product::<usize>())
            .prop_map(move |bits| MaskGrid::new(s, bits, 0).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn junction_mask_hides_exact_count(shape in grid_shape().prop_filter("two cells", |s| s.iter().product::<usize>() >= 2), ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let m = init_junction_mask(shape, ratio, seed).unwrap();
        let cells = shape.iter().product::<usize>();
        prop_assert_eq!(m.cells() - m.active_count(), masked_count(cells, ratio));
        prop_assert!(m.active_count() >= 1);
    }

    #[test]
    fn upsample_then_downsample_is_identity(m in mask_grid(), factor in 1usize..4) {
        let up = upsample_mask(&m, factor);
        prop_assert_eq!(up.active_count(), m.active_count() * factor.pow(3));
        let down = downsample_mask(&up, factor).unwrap();
        prop_assert_eq!(down.bits(), m.bits());
    }

    #[test]
    fn bottom_up_pyramid_is_consistent(
        junction in [1usize..4, 1usize..4, 1usize..4].prop_filter("two cells", |s| s.iter().product::<usize>() >= 2),
        stem in 1usize..3,
        stages in 2usize..4,
        ratio in 0.0f64..0.95,
        seed in any::<u64>(),
    ) {
        let strides: Vec<usize> = std::iter::once(stem).chain(std::iter::repeat_n(2, stages - 1)).collect();
        let total: usize = strides.iter().product();
        let j = init_junction_mask(junction, ratio, seed).unwrap();
        let p = build_pyramid(&j, &strides, junction.map(|e| e * total)).unwrap();
        prop_assert!(p.consistency_violations().is_empty());
        let r = j.keep_ratio();
        prop_assert!(p.stages().iter().chain([p.voxel()]).all(|m| m.keep_ratio() == r));
    }

    #[test]
    fn mask_dump_round_trips(m in mask_grid(), seed in any::<u64>()) {
        let dump = MaskDump::encode(&m, 0.5, seed);
        let back = MaskDump::from_json(&dump.to_json()).unwrap().decode().unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn cosine_schedule_stays_in_bounds(total in 1usize..500, lo in 0.0f64..1e-3, span in 0.0f64..1e-2) {
        let hi = lo + span;
        prop_assert_eq!(cosine_lr(0, total, hi, lo), hi);
        let mut prev = f64::INFINITY;
        for step in 0..total {
            let lr = cosine_lr(step, total, hi, lo);
            prop_assert!(lr >= lo - 1e-18 && lr <= hi + 1e-18);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn dice_is_bounded_and_symmetric(pairs in proptest::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let d = dice_metric(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice_metric(&b, &a).unwrap());
        prop_assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hu_window_is_monotone_into_unit(a in -2000.0f64..3000.0, b in -2000.0f64..3000.0) {
        let (ua, ub) = (hu_to_unit(a), hu_to_unit(b));
        prop_assert!((0.0..=1.0).contains(&ua));
        prop_assert!(a > b || ua <= ub);
    }

    #[test]
    fn masked_loss_ignores_unmasked(
        rows in proptest::collection::vec((any::<bool>(), -5.0f64..5.0, -5.0f64..5.0, -1e3f64..1e3), 1..64),
    ) {
        prop_assume!(rows.iter().any(|r| r.0));
        let mask: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let n = rows.len();
        let pred = Tensor::new([n], rows.iter().map(|r| r.1).collect()).unwrap();
        let target = Tensor::new([n], rows.iter().map(|r| r.2).collect()).unwrap();
        let perturbed = Tensor::new([n], rows.iter().map(|r| if r.0 { r.1 } else { r.1 + r.3 }).collect()).unwrap();
        let loss = |p: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(p);
            let l = masked_mse_loss(&mut tape, v, &target, &mask).unwrap();
            tape.value(l).item().to_bits()
        };
        prop_assert_eq!(loss(pred), loss(perturbed));
    }

    #[test]
    fn submanifold_conv_keeps_active_set(m in mask_grid(), seed in any::<u64>()) {
        prop_assume!(m.active_count() > 0);
        let s = m.shape();
        let mut tape = Tape::<f64>::new();
        let dense = tape.constant(Tensor::from_fn([2, s[0], s[1], s[2]], |i| ((i as u64 ^ seed) % 97) as f64 / 50.0 - 0.9));
        let input = sparsify(&mut tape, dense, &m).unwrap();
        let w = tape.constant(Tensor::from_fn([3, 2, 3, 3, 3], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0));
        let out = sparse_conv3d(&mut tape, &input, &m, w, None, 1, 1).unwrap();
        prop_assert!(out.active().matches(&m));
        let grid = out.to_dense(&tape);
        let plane = m.cells();
        for (i, &on) in m.bits().iter().enumerate() {
            if !on {
                prop_assert!((0..3).all(|c| grid.data()[c * plane + i] == 0.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn volume_files_round_trip(shape in [1usize..6, 1usize..6, 1usize..6], bits in any::<u32>(), spacing in 0.1f64..5.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let n = shape.iter().product::<usize>();
        let values: Vec<f32> = (0..n).map(|i| f32::from_bits(bits.rotate_left(i as u32) & 0x7f7f_ffff)).collect();
        let v = Volume3D::new(shape, [spacing, 1.0, 2.5], values, "prop").unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.shape(), shape);
        prop_assert_eq!(back.spacing_mm(), v.spacing_mm());
        prop_assert!(back.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(lr in 1e-7f64..1e-1, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        use hyspark::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
        use hyspark::config::{ModelConfig, RunConfig};
        use hyspark::params::{HeadKind, ModelParams};

        let mut config = RunConfig::desk();
        config.model = ModelConfig::tiny();
        config.pretrain.lr = lr;
        config.pretrain.mask_ratio = ratio;
        let params = ModelParams::<f64>::init(&config.model, HeadKind::Reconstruct, seed).unwrap();
        let ckpt = Checkpoint { step: seed % 1000, head: HeadKind::Reconstruct, config, params, optimizer: None };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint::<f64>(&bytes, "prop").unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }
}
