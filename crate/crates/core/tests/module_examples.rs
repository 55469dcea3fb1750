use hyspark::checkpoint::{decode_manifest, encode_checkpoint, Checkpoint};
use hyspark::config::{Fusion, ModelConfig, RunConfig};
use hyspark::encoder::{patchify, unpatchify};
use hyspark::mask::{build_pyramid, init_junction_mask, MaskGrid};
use hyspark::model::reconstruct_forward;
use hyspark::oracle::finite_diff_grad;
use hyspark::params::{param_shapes, HeadKind, ModelParams};
use hyspark::phantom::generate_phantom;
use hyspark::pretrain::normalize_targets;
use hyspark::sparse::{densify_with_mask_embedding, sparse_max_pool, sparse_norm, sparsify, PoolCheck};
use hyspark::volume::{preprocess, CropMode};
use hyspark::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn random_mask(shape: [usize; 3], p: f64, rng: &mut ChaCha8Rng) -> MaskGrid {
    let n = shape.iter().product();
    MaskGrid::new(shape, (0..n).map(|_| rng.random_bool(p)).collect(), 0).unwrap()
}

#[test]
fn max_pool_gradient_routes_to_argmax() {
    let x = Tensor::new([1, 1, 2, 2, 2], vec![0.1, 0.7, -0.3, 0.2, 0.5, 0.65, 0.0, -1.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x, true);
    let y = tape.max_pool3d(xv, 2, 2).unwrap();
    assert_eq!(tape.value(y).item(), 0.7);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(xv).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn linear_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[5, 3], &mut rng);
    let b = random(&[5], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    let got = tape.value(y);
    for i in 0..4 {
        for o in 0..5 {
            let mut acc = b.data()[o];
            for k in 0..3 {
                acc += x.get(&[i, k]) * w.get(&[o, k]);
            }
            assert!((got.get(&[i, o]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn sparse_pool_matches_dense_pool_on_active_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(210);
    for seed in 0..10 {
        let junction = init_junction_mask([3, 2, 4], rng.random_range(0.0..0.9), seed).unwrap();
        let pyramid = build_pyramid(&junction, &[1, 2], [6, 4, 8]).unwrap();
        let (fine, coarse) = (pyramid.stage(1), pyramid.stage(2));
        let x = random(&[2, 6, 4, 8], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = sparsify(&mut tape, xv, fine).unwrap();
        let pooled = sparse_max_pool(&mut tape, &s, fine, coarse, 2, PoolCheck::Strict).unwrap().to_dense(&tape);
        let zero_filled = densify_with_mask_embedding(&mut tape, &s, None).unwrap();
        let dense = tape.max_pool3d(zero_filled, 2, 2).unwrap();
        let dense = tape.value(dense);
        let plane = coarse.cells();
        for i in coarse.active_indices() {
            for c in 0..2 {
                assert!((pooled.data()[c * plane + i] - dense.data()[c * plane + i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sparse_norm_ignores_inactive_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(219);
    let mask = random_mask([4, 4, 4], 0.4, &mut rng);
    let x = random(&[4, 4, 4, 4], &mut rng);
    let mut fuzzed = x.clone();
    let plane = mask.cells();
    for c in 0..4 {
        for (i, &on) in mask.bits().iter().enumerate() {
            if !on {
                fuzzed.data_mut()[c * plane + i] = rng.random_range(-1e6..1e6);
            }
        }
    }
    let run = |input: Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(input);
        let s = sparsify(&mut tape, xv, &mask).unwrap();
        let gamma = tape.constant(Tensor::full([4], 1.3));
        let beta = tape.constant(Tensor::full([4], -0.2));
        sparse_norm(&mut tape, &s, gamma, beta, 2, 1e-5).unwrap().to_dense(&tape)
    };
    let (a, b) = (run(x), run(fuzzed));
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn densify_zero_is_input_times_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(237);
    let mask = random_mask([3, 5, 4], 0.5, &mut rng);
    let x = random(&[1, 3, 3, 5, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = sparsify(&mut tape, xv, &mask).unwrap();
    let d = densify_with_mask_embedding(&mut tape, &s, None).unwrap();
    let plane = mask.cells();
    for (j, (&got, &orig)) in tape.value(d).data().iter().zip(x.data()).enumerate() {
        let want = if mask.bits()[j % plane] { orig } else { 0.0 };
        assert_eq!(got.to_bits(), want.to_bits());
    }
}

#[test]
fn mask_embed_gradient_sums_inactive_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(228);
    let mask = random_mask([3, 3, 3], 0.5, &mut rng);
    let x = random(&[2, 3, 3, 3], &mut rng);
    let r = random(&[1, 2, 3, 3, 3], &mut rng);
    let e0 = random(&[2], &mut rng);
    let loss_of = |e: &[f64]| -> hyspark::Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = sparsify(&mut tape, xv, &mask)?;
        let ev = tape.leaf(Tensor::new([2], e.to_vec())?, true);
        let d = densify_with_mask_embedding(&mut tape, &s, Some(ev))?;
        let rv = tape.constant(r.clone());
        let prod = tape.mul(d, rv)?;
        let l = tape.sum(prod);
        let value = tape.value(l).item();
        let g = tape.backward(l)?;
        Ok((value, g.get(ev).unwrap().data().to_vec()))
    };
    let (_, analytic) = loss_of(e0.data()).unwrap();
    let plane = mask.cells();
    for (c, &g) in analytic.iter().enumerate() {
        let expect: f64 = (0..plane).filter(|&i| !mask.bits()[i]).map(|i| r.data()[c * plane + i]).sum();
        assert!((g - expect).abs() < 1e-12);
    }
    let numeric = finite_diff_grad(|e| Ok(loss_of(e)?.0), e0.data(), &[0, 1], 1e-5).unwrap();
    for (a, n) in analytic.iter().zip(numeric) {
        assert!((a - n).abs() < 1e-8);
    }
}

#[test]
fn tokens_follow_scan_order_and_round_trip_through_projections() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(338);
    let mut params = ModelParams::<f64>::init(&cfg, HeadKind::Reconstruct, 3).unwrap();
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let jshape = cfg.junction_shape();
    let m = init_junction_mask(jshape, 0.5, 7).unwrap().with_scale_id(cfg.cnn.num_stages);
    let c = *cfg.cnn.channels.last().unwrap();
    let x = random(&[c, jshape[0], jshape[1], jshape[2]], &mut rng);

    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let s = sparsify(&mut tape, xv, &m).unwrap();
    let tokens = patchify(&mut tape, &pv, &cfg, &s, &m).unwrap();
    let scan: Vec<[usize; 3]> = m.active_indices().into_iter().map(|i| m.coord(i)).collect();
    assert_eq!(tokens.coords(), scan);
    let back = unpatchify(&mut tape, &pv, &cfg, &tokens, &m).unwrap().to_dense(&tape);

    let p = |n: &str| params.require(n).unwrap();
    let (we, be, pos) = (p("vit.embed.weight"), p("vit.embed.bias"), p("vit.pos_embed"));
    let (wu, bu) = (p("vit.unembed.weight"), p("vit.unembed.bias"));
    let e = cfg.vit.embed_dim;
    let plane = m.cells();
    let mut worst = 0.0f64;
    for lin in 0..plane {
        let token: Vec<f64> = (0..e)
            .map(|k| be.data()[k] + pos.get(&[lin, k]) + (0..c).map(|j| we.get(&[k, j]) * x.data()[j * plane + lin]).sum::<f64>())
            .collect();
        for o in 0..c {
            let want = if m.bits()[lin] {
                bu.data()[o] + (0..e).map(|k| wu.get(&[o, k]) * token[k]).sum::<f64>()
            } else {
                0.0
            };
            worst = worst.max((back.data()[o * plane + lin] - want).abs());
        }
    }
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(328);
    let (t, e) = (6, 4);
    let (q, k, v) = (random(&[t, e], &mut rng), random(&[t, e], &mut rng), random(&[t, e], &mut rng));
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |x: &Tensor<f64>| Tensor::from_fn([t, e], |i| x.get(&[perm[i / e], i % e]));
    let attend = |q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>| {
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let y = tape.multi_head_attention(q, k, v, 2).unwrap();
        tape.value(y).clone()
    };
    let y = attend(q.clone(), k.clone(), v.clone());
    let yp = attend(permute(&q), permute(&k), permute(&v));
    assert!(permute(&y).max_abs_diff(&yp) < 1e-12);
}

#[test]
fn skip_addition_output_differs_from_concat() {
    let mut cfg = ModelConfig::tiny();
    let (raw, _) = generate_phantom(5, [16; 3]).unwrap();
    let vol = preprocess(&raw, cfg.input_shape, CropMode::Center).unwrap();
    let junction = init_junction_mask(cfg.junction_shape(), 0.5, 2).unwrap();
    let pyramid = build_pyramid(&junction, &cfg.cnn.strides(), cfg.input_shape).unwrap();
    let mut outputs = Vec::new();
    for fusion in [Fusion::Concat, Fusion::Add] {
        cfg.decoder.fusion = fusion;
        let params = ModelParams::<f64>::init(&cfg, HeadKind::Reconstruct, 4).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, false);
        let x = tape.constant(vol.to_tensor());
        let out = reconstruct_forward(&mut tape, &pv, &cfg, x, &pyramid).unwrap();
        outputs.push(tape.value(out.prediction).clone());
    }
    assert!(outputs[0].max_abs_diff(&outputs[1]) > 1e-6);
}

#[test]
fn target_normalization_inverts() {
    let (raw, _) = generate_phantom(11, [32; 3]).unwrap();
    let vol = preprocess(&raw, [32; 3], CropMode::Center).unwrap();
    let all_hidden = MaskGrid::full([4, 4, 4], false, 0);
    let t = normalize_targets(&vol, &all_hidden).unwrap();
    let back = t.denormalize(t.values(), vol.values()).unwrap();
    let worst = back.iter().zip(vol.values()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn manifest_names_equal_model_parameters() {
    for head in [HeadKind::Reconstruct, HeadKind::Segment] {
        let mut config = RunConfig::desk();
        config.model = ModelConfig::tiny();
        let params = ModelParams::<f32>::init(&config.model, head, 0).unwrap();
        let expected: Vec<String> = param_shapes(&config.model, head).into_keys().collect();
        let bytes = encode_checkpoint(&Checkpoint { step: 0, head, config, params, optimizer: None });
        let (manifest, _) = decode_manifest(&bytes, "memory").unwrap();
        let mut names: Vec<String> = manifest.tensors.into_iter().map(|t| t.name).collect();
        names.sort();
        assert_eq!(names, expected);
    }
}
