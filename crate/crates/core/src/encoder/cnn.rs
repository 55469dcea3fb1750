//! Sparse hierarchical CNN encoder.
//!
//! Stem: submanifold conv at input resolution, then max-pool by the stem
//! stride. Each stage runs `blocks_per_stage` inverted-bottleneck blocks
//! (depthwise k³ conv → norm → pointwise expand → GELU → pointwise contract →
//! residual) and, except the last, max-pools by 2 and projects to the next
//! stage's width. All of it stays on the active sites of the stage mask.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::{MaskPyramid, PyramidMode};
use crate::params::{names, ParamVars};
use crate::scalar::Scalar;
use crate::sparse::{self, PoolCheck, SparseFeatureMap};
use crate::tensor::{Tape, Var};

fn pool_check(pyramid: &MaskPyramid) -> PoolCheck {
    match pyramid.mode() {
        PyramidMode::BottomUp => PoolCheck::Strict,
        PyramidMode::Independent => PoolCheck::Lenient,
    }
}

fn block<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: &SparseFeatureMap,
    mask: &crate::mask::MaskGrid,
    stage: usize,
    b: usize,
) -> Result<SparseFeatureMap> {
    let p = |part: &str| pv.get(&names::block(stage, b, part));
    let k = cfg.cnn.kernel_size;
    let c = x.channels();
    let h = sparse::sparse_conv3d(tape, x, mask, p("dw.weight")?, Some(p("dw.bias")?), k / 2, c)?;
    let eps = T::from_f64(cfg.norm_eps);
    let h = sparse::sparse_norm(tape, &h, p("norm.gamma")?, p("norm.beta")?, cfg.cnn.groups_for(c), eps)?;
    let f = tape.linear(h.features(), p("pw1.weight")?, Some(p("pw1.bias")?))?;
    let f = tape.gelu(f);
    let f = tape.linear(f, p("pw2.weight")?, Some(p("pw2.bias")?))?;
    let h = h.with_features(tape, f)?;
    sparse::sparse_add(tape, x, &h)
}

/// Runs the CNN over the masked volume `[1, 1, D, H, W]` and returns the
/// per-stage features `S_1..S_N`; `S_i` lives on exactly the active sites of
/// `M_i`.
pub fn encode_cnn<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    volume: Var,
    pyramid: &MaskPyramid,
) -> Result<Vec<SparseFeatureMap>> {
    let strides = cfg.cnn.strides();
    if pyramid.strides() != strides.as_slice() {
        return Err(Error::Config(format!(
            "mask pyramid strides {:?} do not match encoder strides {strides:?}",
            pyramid.strides()
        )));
    }
    let vs = tape.shape(volume);
    let expect = [1, 1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]];
    if vs != expect {
        return Err(Error::dim("encode_cnn", "volume", format!("{expect:?}"), format!("{vs:?}")));
    }
    let check = pool_check(pyramid);
    let k = cfg.cnn.kernel_size;
    let voxel = pyramid.voxel();
    let x = sparse::sparsify(tape, volume, voxel)?;
    let x = sparse::sparse_conv3d(
        tape,
        &x,
        voxel,
        pv.get(&names::stem("weight"))?,
        Some(pv.get(&names::stem("bias"))?),
        k / 2,
        1,
    )?;
    let mut x = if cfg.cnn.stem_stride > 1 {
        sparse::sparse_max_pool(tape, &x, voxel, pyramid.stage(1), cfg.cnn.stem_stride, check)?
    } else {
        x
    };
    let n = cfg.cnn.num_stages;
    let mut out = Vec::with_capacity(n);
    for stage in 1..=n {
        let mask = pyramid.stage(stage);
        for b in 0..cfg.cnn.blocks_per_stage {
            x = block(tape, pv, cfg, &x, mask, stage, b)?;
        }
        out.push(x.clone());
        if stage < n {
            let pooled = sparse::sparse_max_pool(tape, &x, mask, pyramid.stage(stage + 1), 2, check)?;
            let f = tape.linear(
                pooled.features(),
                pv.get(&names::down(stage, "weight"))?,
                Some(pv.get(&names::down(stage, "bias"))?),
            )?;
            x = pooled.with_features(tape, f)?;
        }
    }
    Ok(out)
}
