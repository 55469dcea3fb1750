use hyspark::config::ModelConfig;
use hyspark::encoder::encode_cnn;
use hyspark::mask::{build_pyramid, init_junction_mask, MaskPyramid};
use hyspark::oracle::{brute_force_conv3d, dense_masked_forward, nonzero_sites, Remask};
use hyspark::params::{HeadKind, ModelParams};
use hyspark::tensor::{Conv3dSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jitter(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

fn random_volume(shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 1, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0..1.0))
}

fn pyramid(cfg: &ModelConfig, ratio: f64, seed: u64) -> MaskPyramid {
    let j = init_junction_mask(cfg.junction_shape(), ratio, seed).unwrap();
    build_pyramid(&j, &cfg.cnn.strides(), cfg.input_shape).unwrap()
}

#[test]
fn sparse_encoder_matches_dense_reference() {
    let cfg = ModelConfig::tiny();
    for (i, ratio) in [0.25, 0.5, 0.75].into_iter().enumerate() {
        let mut params = ModelParams::<f64>::init(&cfg, HeadKind::Reconstruct, i as u64).unwrap();
        jitter(&mut params, 10 + i as u64);
        let vol = random_volume(cfg.input_shape, i as u64);
        let pyr = pyramid(&cfg, ratio, 100 + i as u64);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, false);
        let x = tape.constant(vol.clone());
        let maps = encode_cnn(&mut tape, &pv, &cfg, x, &pyr).unwrap();
        let trace = dense_masked_forward(&cfg, &params, &vol, &pyr, Remask::Masked).unwrap();
        for (s, (m, o)) in maps.iter().zip(&trace.stages).enumerate() {
            let dense = m.to_dense(&tape);
            let diff = dense.max_abs_diff(o);
            assert!(diff < 1e-12, "stage {} ratio {ratio}: {diff}", s + 1);
            assert_eq!(nonzero_sites(&dense), pyr.stage(s + 1).active_count());
        }
    }
}

#[test]
fn naive_dense_conv_erodes_the_mask() {
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::<f64>::init(&cfg, HeadKind::Reconstruct, 0).unwrap();
    jitter(&mut params, 1);
    let vol = random_volume(cfg.input_shape, 2);
    let pyr = pyramid(&cfg, 0.75, 3);
    let naive = dense_masked_forward(&cfg, &params, &vol, &pyr, Remask::Naive).unwrap();
    let masked = dense_masked_forward(&cfg, &params, &vol, &pyr, Remask::Masked).unwrap();
    let active = pyr.voxel().active_count();
    assert_eq!(nonzero_sites(&masked.stem), active);
    assert!(nonzero_sites(&naive.stem) > active);
}

#[test]
fn brute_force_matches_tape_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let shape: Vec<usize> = (0..3).map(|_| k - 2 * pad + stride * rng.random_range(1..4)).collect();
        let x = Tensor::from_fn([1, cin, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([cout, cin, k, k, k], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn([cout], |_| rng.random_range(-1.0..1.0));
        let want = brute_force_conv3d(&x, &w, Some(&b), stride, pad).unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let got = tape.conv3d(xv, wv, Some(bv), Conv3dSpec { stride, padding: pad }).unwrap();
        let got = tape.value(got);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}
