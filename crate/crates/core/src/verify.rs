//! Invariant suites behind `hyspark verify` and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use crate::config::{CnnConfig, DecoderConfig, ModelConfig, RunConfig, VitConfig};
use crate::encoder::encode_cnn;
use crate::error::{Error, Result};
use crate::finetune::seg_loss;
use crate::mask::{build_pyramid, downsample_mask, independent_pyramid, init_junction_mask, MaskGrid, MaskPyramid};
use crate::model::reconstruct_forward;
use crate::oracle::{dense_masked_forward, finite_diff_grad, finite_diff_params, nonzero_sites, relative_error, Remask};
use crate::params::{HeadKind, ModelParams};
use crate::pretrain::{masked_mse_loss, normalize_targets};
use crate::sparse::{self, ActiveSet, PoolCheck, SparseFeatureMap};
use crate::tensor::{Conv3dSpec, Tape, Tensor, Var};
use crate::volume::{load_volume, save_volume, Volume3D};

/// Floor on the relative-error denominator. Central differences at h = 1e-5
/// carry round-off near 1e-10 on these losses, and several gradients are
/// exactly zero (biases feeding a per-channel norm, attention key biases).
pub const GRAD_FLOOR: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const EQUIV_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Sparse,
    Grad,
    Mask,
    Pipeline,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Sparse, Suite::Grad, Suite::Mask, Suite::Pipeline];

    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Sparse => "sparse",
            Suite::Grad => "grad",
            Suite::Mask => "mask",
            Suite::Pipeline => "pipeline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Suite::All, Suite::Sparse, Suite::Grad, Suite::Mask, Suite::Pipeline]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown suite {s:?}; expected all|sparse|grad|mask|pipeline")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self { name: name.into(), passed, detail },
            Err(e) => Self { name: name.into(), passed: false, detail: format!("error: {e}") },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    /// `bottom-up` or `no-bottom-up`: which mask pyramids the suites use.
    pub fixtures: String,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// `false` swaps in independently sampled per-scale masks.
    pub bottom_up: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { bottom_up: true, seed: 0 }
    }
}

pub fn run_verify(suite: Suite, opts: VerifyOptions) -> VerifyReport {
    let suites: Vec<Suite> = if suite == Suite::All { Suite::ALL.to_vec() } else { vec![suite] };
    let reports: Vec<SuiteReport> = suites
        .into_iter()
        .map(|s| {
            let checks = match s {
                Suite::Sparse => sparse_suite(opts),
                Suite::Grad => grad_suite(opts),
                Suite::Mask => mask_suite(opts),
                Suite::Pipeline => pipeline_suite(opts),
                Suite::All => unreachable!("expanded above"),
            };
            SuiteReport { name: s.name().into(), passed: checks.iter().all(|c| c.passed), checks }
        })
        .collect();
    VerifyReport {
        suite: suite.name().into(),
        fixtures: if opts.bottom_up { "bottom-up" } else { "no-bottom-up" }.into(),
        passed: reports.iter().all(|r| r.passed),
        suites: reports,
    }
}

fn jitter(p: &mut ModelParams<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

fn random_volume(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn([1, 1, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0..1.0))
}

/// Bottom-up or independent pyramid for `cfg` at `ratio`.
pub fn fixture_pyramid(cfg: &ModelConfig, ratio: f64, seed: u64, bottom_up: bool) -> Result<MaskPyramid> {
    if bottom_up {
        let j = init_junction_mask(cfg.junction_shape(), ratio, seed)?;
        build_pyramid(&j, &cfg.cnn.strides(), cfg.input_shape)
    } else {
        independent_pyramid(&cfg.cnn.strides(), cfg.input_shape, ratio, seed)
    }
}

/// A random small encoder with input at most 32³.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_stages = rng.random_range(2..=3);
    let stem_stride = rng.random_range(1..=2);
    let total = stem_stride << (num_stages - 1);
    let input_shape = [0; 3].map(|_| {
        let max_cells = 32 / total;
        total * rng.random_range(2..=max_cells.clamp(2, 4))
    });
    let base = rng.random_range(2..=4);
    let channels: Vec<usize> = (0..num_stages).map(|i| base * (i + 1)).collect();
    let norm_groups = if rng.random_bool(0.5) { Some(base.min(2)) } else { None };
    let norm_groups = norm_groups.filter(|g| channels.iter().all(|c| c % g == 0));
    ModelConfig {
        input_shape,
        cnn: CnnConfig {
            num_stages,
            channels,
            blocks_per_stage: rng.random_range(1..=2),
            kernel_size: 3,
            expansion_ratio: 2,
            stem_stride,
            norm_groups,
        },
        vit: VitConfig { embed_dim: 4, depth: 1, heads: 2, mlp_ratio: 2 },
        decoder: DecoderConfig::default(),
        norm_eps: 1e-5,
        seg_hidden: 2,
    }
}

/// Largest |sparse − dense reference| over all stages and active sites.
pub fn equivalence_case(cfg: &ModelConfig, ratio: f64, seed: u64, bottom_up: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(cfg, HeadKind::Reconstruct, seed)?;
    jitter(&mut params, &mut rng, 0.2);
    let vol = random_volume(cfg.input_shape, &mut rng);
    let pyr = fixture_pyramid(cfg, ratio, rng.random(), bottom_up)?;
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let x = tape.constant(vol.clone());
    let maps = encode_cnn(&mut tape, &pv, cfg, x, &pyr)?;
    let trace = dense_masked_forward(cfg, &params, &vol, &pyr, Remask::Masked)?;
    let mut worst = 0.0f64;
    for (m, o) in maps.iter().zip(&trace.stages) {
        worst = worst.max(m.to_dense(&tape).max_abs_diff(o));
    }
    Ok(worst)
}

/// Encodes with random parameters and input; returns, per stage, whether the
/// nonzero-site set equals the stage mask exactly.
pub fn mask_preservation_case(cfg: &ModelConfig, ratio: f64, seed: u64, bottom_up: bool) -> Result<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(cfg, HeadKind::Reconstruct, seed)?;
    jitter(&mut params, &mut rng, 0.2);
    let vol = random_volume(cfg.input_shape, &mut rng);
    let pyr = fixture_pyramid(cfg, ratio, rng.random(), bottom_up)?;
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let x = tape.constant(vol);
    let maps = encode_cnn(&mut tape, &pv, cfg, x, &pyr)?;
    Ok(maps
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let dense = m.to_dense(&tape);
            let c = dense.shape()[0];
            let plane = dense.numel() / c;
            let nonzero: Vec<bool> = (0..plane).map(|p| (0..c).any(|ch| dense.data()[ch * plane + p] != 0.0)).collect();
            nonzero == pyr.stage(i + 1).bits()
        })
        .collect())
}

/// Sites with a nonzero value after one stem convolution, with and without
/// re-masking, versus the voxel mask's active count.
pub fn erosion_control(cfg: &ModelConfig, ratio: f64, seed: u64) -> Result<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(cfg, HeadKind::Reconstruct, seed)?;
    jitter(&mut params, &mut rng, 0.2);
    let vol = random_volume(cfg.input_shape, &mut rng);
    let pyr = fixture_pyramid(cfg, ratio, rng.random(), true)?;
    let naive = dense_masked_forward(cfg, &params, &vol, &pyr, Remask::Naive)?;
    let masked = dense_masked_forward(cfg, &params, &vol, &pyr, Remask::Masked)?;
    Ok((pyr.voxel().active_count(), nonzero_sites(&masked.stem), nonzero_sites(&naive.stem)))
}

/// Configuration for the end-to-end gradient check: 16³, two stages.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig::tiny()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckStats {
    pub coords: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as `name[index]`.
    pub worst: String,
}

/// Fixture for the pretraining-loss gradient check.
pub struct PipelineFixture {
    pub cfg: ModelConfig,
    pub params: ModelParams<f64>,
    pub volume: Tensor<f64>,
    pub pyramid: MaskPyramid,
    pub targets: Tensor<f64>,
    pub loss_mask: Vec<bool>,
}

impl PipelineFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = gradient_check_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(&cfg, HeadKind::Reconstruct, seed)?;
        jitter(&mut params, &mut rng, 0.05);
        let values: Vec<f32> = (0..cfg.input_shape.iter().product::<usize>()).map(|_| rng.random_range(0.0..1.0)).collect();
        let vol = Volume3D::new(cfg.input_shape, [1.0; 3], values, "gradcheck")?;
        let pyramid = fixture_pyramid(&cfg, 0.75, rng.random(), true)?;
        let targets = normalize_targets(&vol, pyramid.junction())?.to_tensor();
        let loss_mask = pyramid.voxel().bits().iter().map(|&b| !b).collect();
        Ok(Self { volume: vol.to_tensor(), cfg, params, pyramid, targets, loss_mask })
    }

    fn loss_on(&self, tape: &mut Tape<f64>, params: &ModelParams<f64>, trainable: bool) -> Result<(Var, crate::params::ParamVars)> {
        let pv = params.bind(tape, trainable);
        let x = tape.constant(self.volume.clone());
        let out = reconstruct_forward(tape, &pv, &self.cfg, x, &self.pyramid)?;
        Ok((masked_mse_loss(tape, out.prediction, &self.targets, &self.loss_mask)?, pv))
    }

    pub fn loss(&self, params: &ModelParams<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _) = self.loss_on(&mut tape, params, false)?;
        Ok(tape.value(l).item())
    }

    pub fn gradient(&self) -> Result<ModelParams<f64>> {
        let mut tape = Tape::new();
        let (l, pv) = self.loss_on(&mut tape, &self.params, true)?;
        let mut g = tape.backward(l)?;
        pv.collect(&mut g)
    }

    /// At least two coordinates from every tensor, then uniform draws up to `n`.
    pub fn sample_coords(&self, n: usize, seed: u64) -> Vec<(String, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let tensors: Vec<(String, usize)> = self.params.iter().map(|(k, t)| (k.clone(), t.numel())).collect();
        for (name, numel) in &tensors {
            for _ in 0..2.min(*numel) {
                out.push((name.clone(), rng.random_range(0..*numel)));
            }
        }
        while out.len() < n {
            let (name, numel) = &tensors[rng.random_range(0..tensors.len())];
            out.push((name.clone(), rng.random_range(0..*numel)));
        }
        out
    }

    pub fn check(&self, coords: &[(String, usize)], h: f64) -> Result<GradCheckStats> {
        let analytic = self.gradient()?;
        let numeric = finite_diff_params(|p| self.loss(p), &self.params, coords, h)?;
        let mut stats = GradCheckStats { coords: coords.len(), max_rel_err: 0.0, worst: String::new() };
        for ((name, i), n) in coords.iter().zip(numeric) {
            let a = analytic.require(name)?.data()[*i];
            let e = relative_error(a, n, GRAD_FLOOR);
            if e >= stats.max_rel_err {
                stats.max_rel_err = e;
                stats.worst = format!("{name}[{i}] analytic {a:e} numeric {n:e}");
            }
        }
        Ok(stats)
    }
}

/// Largest relative error of tape gradients against central differences for
/// `loss = Σ f(inputs) ⊙ R` with a fixed random `R`.
pub fn op_grad_check(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let weights = std::cell::RefCell::new(None::<Tensor<f64>>);
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grads)).collect();
        let out = f(&mut tape, &vars)?;
        let r = weights
            .borrow_mut()
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::from_fn(tape.shape(out).to_vec(), |_| rng.random_range(-1.0..1.0))
            })
            .clone();
        let rv = tape.constant(r);
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, vec![]));
        }
        let mut g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.take(v).expect("leaf gradient")).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = (0..x.numel()).collect();
        let numeric = finite_diff_grad(
            |v| {
                let mut xs = inputs.to_vec();
                xs[k] = Tensor::new(x.shape().to_vec(), v.to_vec())?;
                Ok(eval(&xs, false)?.0)
            },
            x.data(),
            &coords,
            1e-6,
        )?;
        for (a, n) in analytic[k].data().iter().zip(numeric) {
            worst = worst.max(relative_error(*a, n, GRAD_FLOOR));
        }
    }
    Ok(worst)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn sparse_suite(opts: VerifyOptions) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    checks.push(CheckResult::from(
        "sparse-dense equivalence (10 random configs)",
        (|| {
            let mut worst = 0.0f64;
            for i in 0..10 {
                let cfg = random_config(&mut rng);
                let ratio = [0.25, 0.5, 0.75][i % 3];
                worst = worst.max(equivalence_case(&cfg, ratio, rng.random(), opts.bottom_up)?);
            }
            Ok((worst < EQUIV_TOL, format!("max abs diff {worst:e}")))
        })(),
    ));
    checks.push(CheckResult::from(
        "nonzero sites equal stage masks (20 seeds)",
        (|| {
            let cfg = ModelConfig::tiny();
            let mut bad = 0;
            for s in 0..20 {
                bad += mask_preservation_case(&cfg, 0.75, opts.seed + s, opts.bottom_up)?.iter().filter(|ok| !**ok).count();
            }
            Ok((bad == 0, format!("{bad} stage mismatches")))
        })(),
    ));
    checks.push(CheckResult::from(
        "naive dense conv erodes the mask (positive control)",
        (|| {
            let (active, masked, naive) = erosion_control(&ModelConfig::tiny(), 0.75, opts.seed)?;
            Ok((masked == active && naive > active, format!("active {active}, re-masked {masked}, naive {naive}")))
        })(),
    ));
    checks
}

fn grad_suite(opts: VerifyOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6ead);
    let mut checks = Vec::new();
    let mut push = |name: &str, r: Result<f64>| {
        checks.push(CheckResult::from(name, r.map(|e| (e < GRAD_TOL, format!("max rel err {e:e}")))));
    };
    let x = rand_t(&[1, 2, 4, 4, 4], &mut rng);
    let w = rand_t(&[3, 2, 3, 3, 3], &mut rng);
    let b = rand_t(&[3], &mut rng);
    push(
        "conv3d",
        op_grad_check(&[x.clone(), w, b], 1, |t, v| t.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::same(3))),
    );
    push("max_pool3d", op_grad_check(&[x.clone()], 2, |t, v| t.max_pool3d(v[0], 2, 2)));
    let g = rand_t(&[2], &mut rng);
    let be = rand_t(&[2], &mut rng);
    push(
        "group_norm",
        op_grad_check(&[x.clone(), g, be], 3, |t, v| t.group_norm(v[0], v[1], v[2], 1, 1e-5)),
    );
    let rows = rand_t(&[5, 6], &mut rng);
    let lw = rand_t(&[4, 6], &mut rng);
    let lb = rand_t(&[4], &mut rng);
    push("linear", op_grad_check(&[rows.clone(), lw, lb], 4, |t, v| t.linear(v[0], v[1], Some(v[2]))));
    let (lg, lbeta) = (rand_t(&[6], &mut rng), rand_t(&[6], &mut rng));
    push("layer_norm", op_grad_check(&[rows.clone(), lg, lbeta], 5, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)));
    push("gelu", op_grad_check(&[rows.clone()], 6, |t, v| Ok(t.gelu(v[0]))));
    push("softmax", op_grad_check(&[rows.clone()], 7, |t, v| t.softmax(v[0])));
    let (q, k, vv) = (rand_t(&[5, 6], &mut rng), rand_t(&[5, 6], &mut rng), rand_t(&[5, 6], &mut rng));
    push("multi_head_attention", op_grad_check(&[q, k, vv], 8, |t, v| t.multi_head_attention(v[0], v[1], v[2], 2)));
    push("upsample_nearest", op_grad_check(&[x.clone()], 9, |t, v| t.upsample_nearest(v[0], 2)));

    // Sparse ops on a half-masked 4³ grid.
    let mask = MaskGrid::new([4, 4, 4], (0..64).map(|i| (i * 7 + i / 5) % 3 != 0).collect(), 0).unwrap_or_else(|_| MaskGrid::full([4, 4, 4], true, 0));
    let coarse = downsample_mask(&mask, 2).unwrap_or_else(|_| MaskGrid::full([2, 2, 2], true, 1)).with_scale_id(1);
    let act = ActiveSet::from_mask(&mask);
    let feats = rand_t(&[act.len(), 2], &mut rng);
    let sw = rand_t(&[2, 1, 3, 3, 3], &mut rng);
    let sb = rand_t(&[2], &mut rng);
    let m1 = mask.clone();
    push(
        "sparse_conv3d (depthwise)",
        op_grad_check(&[feats.clone(), sw, sb], 10, |t, v| {
            let s = SparseFeatureMap::new(t, ActiveSet::from_mask(&m1), v[0], 0)?;
            Ok(sparse::sparse_conv3d(t, &s, &m1, v[1], Some(v[2]), 1, 2)?.features())
        }),
    );
    let (m2, c2) = (mask.clone(), coarse.clone());
    push(
        "sparse_max_pool",
        op_grad_check(&[feats.clone()], 11, |t, v| {
            let s = SparseFeatureMap::new(t, ActiveSet::from_mask(&m2), v[0], 0)?;
            Ok(sparse::sparse_max_pool(t, &s, &m2, &c2, 2, PoolCheck::Lenient)?.features())
        }),
    );
    let (ng, nb) = (rand_t(&[2], &mut rng), rand_t(&[2], &mut rng));
    let m3 = mask.clone();
    push(
        "sparse_norm",
        op_grad_check(&[feats.clone(), ng, nb], 12, |t, v| {
            let s = SparseFeatureMap::new(t, ActiveSet::from_mask(&m3), v[0], 0)?;
            Ok(sparse::sparse_norm(t, &s, v[1], v[2], 1, 1e-5)?.features())
        }),
    );
    let emb = rand_t(&[2], &mut rng);
    let m4 = mask.clone();
    push(
        "densify with mask embedding",
        op_grad_check(&[feats, emb], 13, |t, v| {
            let s = SparseFeatureMap::new(t, ActiveSet::from_mask(&m4), v[0], 0)?;
            sparse::densify_with_mask_embedding(t, &s, Some(v[1]))
        }),
    );
    let logits = rand_t(&[1, 1, 8, 8, 8], &mut rng);
    let labels = Tensor::from_fn([1, 1, 8, 8, 8], |i| if (i / 3) % 4 == 0 { 1.0 } else { 0.0 });
    push(
        "seg_loss (8³)",
        (|| {
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(logits.clone(), true);
            let l = seg_loss(&mut tape, z, &labels)?;
            let mut g = tape.backward(l)?;
            let a = g.take(z).expect("leaf");
            let coords: Vec<usize> = (0..logits.numel()).collect();
            let n = finite_diff_grad(
                |v| {
                    let mut tape = Tape::<f64>::new();
                    let z = tape.constant(Tensor::new(logits.shape().to_vec(), v.to_vec())?);
                    let l = seg_loss(&mut tape, z, &labels)?;
                    Ok(tape.value(l).item())
                },
                logits.data(),
                &coords,
                1e-6,
            )?;
            Ok(a.data().iter().zip(n).map(|(a, n)| relative_error(*a, n, GRAD_FLOOR)).fold(0.0, f64::max))
        })(),
    );
    checks
}

/// Junction → finer-scale consistency over `seeds`; returns the number of
/// seeds whose pyramid violates it.
pub fn pyramid_consistency_failures(cfg: &ModelConfig, seeds: std::ops::Range<u64>, ratio: f64, bottom_up: bool) -> Result<usize> {
    let mut failures = 0;
    for s in seeds {
        let pyr = fixture_pyramid(cfg, ratio, s, bottom_up)?;
        if !pyr.consistency_violations().is_empty() {
            failures += 1;
        }
    }
    Ok(failures)
}

fn mask_suite(opts: VerifyOptions) -> Vec<CheckResult> {
    let cfg = ModelConfig::default();
    let mut checks = vec![CheckResult::from(
        "pyramid consistency downsample(M_i) == M_{i+1} (100 seeds)",
        pyramid_consistency_failures(&cfg, opts.seed..opts.seed + 100, 0.75, opts.bottom_up)
            .map(|f| (f == 0, format!("{f} of 100 pyramids inconsistent"))),
    )];
    checks.push(CheckResult::from(
        "keep ratio identical at every scale",
        (|| {
            let mut bad = 0;
            for s in 0..20 {
                let pyr = fixture_pyramid(&cfg, 0.5, opts.seed + s, opts.bottom_up)?;
                let r = pyr.junction().keep_ratio();
                bad += pyr.stages().iter().chain([pyr.voxel()]).filter(|m| m.keep_ratio() != r).count();
            }
            Ok((bad == 0, format!("{bad} scales with a different keep ratio")))
        })(),
    ));
    checks.push(CheckResult::from(
        "junction mask count and determinism",
        (|| {
            let a = init_junction_mask([6, 6, 6], 0.75, opts.seed)?;
            let b = init_junction_mask([6, 6, 6], 0.75, opts.seed)?;
            Ok((a == b && a.active_count() == 54, format!("{} of 216 active", a.active_count())))
        })(),
    ));
    checks
}

fn pipeline_suite(opts: VerifyOptions) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    checks.push(CheckResult::from(
        "end-to-end gradient (16³, N=2, 64-bit, 200 coords)",
        (|| {
            let fx = PipelineFixture::new(opts.seed)?;
            let coords = fx.sample_coords(200, opts.seed);
            let s = fx.check(&coords, 1e-5)?;
            Ok((s.max_rel_err < GRAD_TOL, format!("max rel err {:e} at {}", s.max_rel_err, s.worst)))
        })(),
    ));
    checks.push(CheckResult::from(
        "loss ignores unmasked voxels (20 trials)",
        loss_masking_trials(20, opts.seed).map(|c| (c == 0, format!("{c} trials changed the loss"))),
    ));
    checks.push(CheckResult::from(
        "volume save/load is bit-exact",
        (|| {
            let dir = std::env::temp_dir().join(format!("hyspark-verify-{}-{}", std::process::id(), opts.seed));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (v, _) = crate::phantom::generate_phantom(opts.seed, [16; 3])?;
            let path = dir.join("v.raw");
            save_volume(&v, &path)?;
            let back = load_volume(&path)?;
            let _ = std::fs::remove_dir_all(&dir);
            let same = back.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            Ok((same && back.shape() == v.shape(), "raw + sidecar round trip".into()))
        })(),
    ));
    checks.push(CheckResult::from(
        "checkpoint round trip and truncation",
        (|| {
            let mut cfg = RunConfig::desk();
            cfg.model = ModelConfig::tiny();
            let params = ModelParams::<f32>::init(&cfg.model, HeadKind::Reconstruct, opts.seed)?;
            let ckpt = Checkpoint { step: 0, head: HeadKind::Reconstruct, config: cfg, params, optimizer: None };
            let bytes = encode_checkpoint(&ckpt);
            let same = decode_checkpoint::<f32>(&bytes, "memory")? == ckpt;
            let truncated = matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3], "memory"), Err(Error::Format { .. }));
            Ok((same && truncated, format!("{} bytes", bytes.len())))
        })(),
    ));
    checks
}

/// Perturbs predictions at unmasked voxels and counts trials where the loss
/// bits changed.
pub fn loss_masking_trials(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut changed = 0;
    for _ in 0..trials {
        let n = 512;
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if !mask.contains(&true) {
            continue;
        }
        let pred = rand_t(&[n], &mut rng);
        let target = rand_t(&[n], &mut rng);
        let mut perturbed = pred.clone();
        for (v, &m) in perturbed.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v += rng.random_range(-1e3..1e3);
            }
        }
        let loss = |p: Tensor<f64>| -> Result<u64> {
            let mut tape = Tape::new();
            let pv = tape.constant(p);
            let l = masked_mse_loss(&mut tape, pv, &target, &mask)?;
            Ok(tape.value(l).item().to_bits())
        };
        if loss(pred)? != loss(perturbed)? {
            changed += 1;
        }
    }
    Ok(changed)
}
