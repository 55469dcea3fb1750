//! End-to-end forward passes of the hybrid model.

use crate::config::{Fusion, ModelConfig};
use crate::decoder;
use crate::encoder::{self, TokenSequence};
use crate::error::Result;
use crate::mask::{build_pyramid, MaskGrid, MaskPyramid};
use crate::params::{names, ParamVars};
use crate::scalar::Scalar;
use crate::sparse::{densify_with_mask_embedding, SparseFeatureMap};
use crate::tensor::{Tape, Var};

/// Encoder outputs for one volume.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// CNN stage features `S_1..S_N`.
    pub cnn: Vec<SparseFeatureMap>,
    /// Transformer output tokens.
    pub tokens: TokenSequence,
    /// Tokens scattered back onto the junction grid (replaces `S_N` for decoding).
    pub junction: SparseFeatureMap,
}

impl EncoderOutput {
    /// Active-site count per CNN stage.
    pub fn active_sites(&self) -> Vec<usize> {
        self.cnn.iter().map(|s| s.active().len()).collect()
    }

    /// Features the decoder consumes: `S_1..S_{N-1}` from the CNN and the
    /// unpatchified junction map.
    pub fn decoder_inputs(&self) -> Vec<&SparseFeatureMap> {
        let n = self.cnn.len();
        self.cnn[..n - 1].iter().chain(std::iter::once(&self.junction)).collect()
    }
}

/// CNN + transformer on a masked volume `[1, 1, D, H, W]`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    volume: Var,
    pyramid: &MaskPyramid,
) -> Result<EncoderOutput> {
    let cnn = encoder::encode_cnn(tape, pv, cfg, volume, pyramid)?;
    let m_n = pyramid.junction();
    let t = encoder::patchify(tape, pv, cfg, cnn.last().expect("N >= 2 stages"), m_n)?;
    let tokens = encoder::vit_encode(tape, pv, cfg, &t)?;
    let junction = encoder::unpatchify(tape, pv, cfg, &tokens, m_n)?;
    Ok(EncoderOutput { cnn, tokens, junction })
}

/// All-active pyramid for dense (unmasked) inputs.
pub fn full_pyramid(cfg: &ModelConfig) -> Result<MaskPyramid> {
    let junction = MaskGrid::full(cfg.junction_shape(), true, 0);
    build_pyramid(&junction, &cfg.cnn.strides(), cfg.input_shape)
}

/// Dense input is the all-active special case of the sparse path.
pub fn dense_encode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    volume: Var,
) -> Result<EncoderOutput> {
    encode(tape, pv, cfg, volume, &full_pyramid(cfg)?)
}

/// Densifies every decoder input; with `mask_embeddings` each inactive site is
/// filled with its scale's learned embedding, otherwise with zeros.
pub fn densify_all<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    enc: &EncoderOutput,
    mask_embeddings: bool,
) -> Result<Vec<Var>> {
    enc.decoder_inputs()
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let embed = if mask_embeddings {
                Some(pv.get(&names::mask_embed(i + 1))?)
            } else {
                None
            };
            densify_with_mask_embedding(tape, s, embed)
        })
        .collect()
}

/// Result of one pretraining forward pass.
#[derive(Clone, Debug)]
pub struct ReconstructionOutput {
    /// Prediction `[1, 1, D, H, W]` in normalized-target space.
    pub prediction: Var,
    pub encoder: EncoderOutput,
}

/// Masked volume → reconstruction.
pub fn reconstruct_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    volume: Var,
    pyramid: &MaskPyramid,
) -> Result<ReconstructionOutput> {
    let enc = encode(tape, pv, cfg, volume, pyramid)?;
    let dense = densify_all(tape, pv, &enc, true)?;
    let d1 = decoder::decode_with(tape, pv, cfg, &dense, cfg.decoder.fusion)?;
    let prediction = decoder::reconstruct_head(tape, pv, cfg, d1)?;
    Ok(ReconstructionOutput { prediction, encoder: enc })
}

/// Volume → segmentation logits, dense encoder and concat decoder.
pub fn segment_forward<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, volume: Var) -> Result<Var> {
    let enc = dense_encode(tape, pv, cfg, volume)?;
    let dense = densify_all(tape, pv, &enc, false)?;
    let d1 = decoder::decode_with(tape, pv, cfg, &dense, Fusion::Concat)?;
    decoder::segmentation_head(tape, pv, cfg, d1, volume)
}
