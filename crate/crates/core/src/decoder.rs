//! Hierarchical decoder with skip connections.
//!
//! `D_N = φ_N(S'_N)`, then for `i = N-1 .. 1`:
//! `D_i = B^f_i(concat(B^up_i(D_{i+1}), φ_i(S'_i)))`, where `φ_i` is a 1×1×1
//! projection, `B^up_i` is two (conv 3³ → norm → GELU) layers followed by a
//! nearest-neighbour upsample by 2, and `B^f_i` is two more such layers.

use crate::config::{Fusion, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{names, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{Conv3dSpec, Tape, Var};

fn conv_norm_gelu<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
    prefix: impl Fn(&str) -> String,
    layer: usize,
) -> Result<Var> {
    let w = pv.get(&prefix(&format!("conv{layer}.weight")))?;
    let b = pv.get(&prefix(&format!("conv{layer}.bias")))?;
    let y = tape.conv3d(x, w, Some(b), Conv3dSpec::same(3))?;
    let c = tape.shape(y)[1];
    let g = pv.get(&prefix(&format!("norm{layer}.gamma")))?;
    let beta = pv.get(&prefix(&format!("norm{layer}.beta")))?;
    let y = tape.group_norm(y, g, beta, c, T::from_f64(cfg.norm_eps))?;
    Ok(tape.gelu(y))
}

fn pointwise<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, x: Var, prefix: impl Fn(&str) -> String) -> Result<Var> {
    tape.conv3d(x, pv.get(&prefix("weight"))?, Some(pv.get(&prefix("bias"))?), Conv3dSpec::same(1))
}

/// Decodes densified features `S'_1..S'_N` (each `[1, C_i, D_i, H_i, W_i]`)
/// into `D_1` using the given fusion.
pub fn decode_with<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    dense: &[Var],
    fusion: Fusion,
) -> Result<Var> {
    let n = cfg.cnn.num_stages;
    if dense.len() != n {
        return Err(Error::dim("decode", "scales", n, dense.len()));
    }
    for (i, &s) in dense.iter().enumerate() {
        let sh = cfg.stage_shape(i + 1);
        let expect = [1, cfg.cnn.channels[i], sh[0], sh[1], sh[2]];
        if tape.shape(s) != expect {
            return Err(Error::dim(
                "decode",
                format!("scale {}", i + 1),
                format!("{expect:?}"),
                format!("{:?}", tape.shape(s)),
            ));
        }
    }
    let mut d = pointwise(tape, pv, dense[n - 1], |p| names::proj(n, p))?;
    for i in (1..n).rev() {
        let up = conv_norm_gelu(tape, pv, cfg, d, |p| names::up(i, p), 1)?;
        let up = conv_norm_gelu(tape, pv, cfg, up, |p| names::up(i, p), 2)?;
        let up = tape.upsample_nearest(up, crate::config::STAGE_POOL)?;
        d = match fusion {
            Fusion::Concat => {
                let skip = pointwise(tape, pv, dense[i - 1], |p| names::proj(i, p))?;
                let cat = tape.concat_channels(up, skip)?;
                let f = conv_norm_gelu(tape, pv, cfg, cat, |p| names::fuse(i, p), 1)?;
                conv_norm_gelu(tape, pv, cfg, f, |p| names::fuse(i, p), 2)?
            }
            Fusion::Add => {
                let skip = pointwise(tape, pv, dense[i - 1], |p| names::proj(i, p))?;
                tape.add(up, skip)?
            }
            Fusion::None => up,
        };
    }
    Ok(d)
}

/// Concatenation decoder.
pub fn decode<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, dense: &[Var]) -> Result<Var> {
    decode_with(tape, pv, cfg, dense, Fusion::Concat)
}

/// Skip-addition ablation: the projected skip is added instead of fused.
pub fn skip_addition_decode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    dense: &[Var],
) -> Result<Var> {
    decode_with(tape, pv, cfg, dense, Fusion::Add)
}

/// 1×1×1 projection of `D_1` to one channel, upsampled by the stem stride to
/// input resolution: `[1, 1, D, H, W]`.
pub fn reconstruct_head<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, d1: Var) -> Result<Var> {
    let y = pointwise(tape, pv, d1, names::recon)?;
    tape.upsample_nearest(y, cfg.cnn.stem_stride)
}

/// Segmentation logits `[1, 1, D, H, W]`: `D_1` is reduced, upsampled to input
/// resolution, concatenated with the input volume, and refined by a 3³ conv.
pub fn segmentation_head<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    d1: Var,
    volume: Var,
) -> Result<Var> {
    let r = pointwise(tape, pv, d1, |p| names::seg(&format!("reduce.{p}")))?;
    let r = tape.upsample_nearest(r, cfg.cnn.stem_stride)?;
    let cat = tape.concat_channels(r, volume)?;
    let h = tape.conv3d(
        cat,
        pv.get(&names::seg("conv.weight"))?,
        Some(pv.get(&names::seg("conv.bias"))?),
        Conv3dSpec::same(3),
    )?;
    let h = tape.gelu(h);
    pointwise(tape, pv, h, |p| names::seg(&format!("out.{p}")))
}
