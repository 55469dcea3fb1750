//! Transformer over the unmasked junction cells.
//!
//! One token per active junction cell: the cell's channel vector projected to
//! the embedding width plus a learned positional embedding looked up by the
//! cell's grid index. Masked cells never become tokens.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::params::{names, ParamVars};
use crate::scalar::Scalar;
use crate::sparse::{ActiveSet, SparseFeatureMap};
use crate::tensor::{Tape, Var};

/// Kept tokens `[T, E]` and the junction cells they came from.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    tokens: Var,
    cells: Arc<ActiveSet>,
    pos_embed: Var,
}

impl TokenSequence {
    pub fn tokens(&self) -> Var {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Junction coordinate of every token, in token order (scan order).
    pub fn coords(&self) -> Vec<[usize; 3]> {
        (0..self.cells.len()).map(|r| self.cells.coord(r)).collect()
    }

    pub fn cells(&self) -> &Arc<ActiveSet> {
        &self.cells
    }

    pub fn pos_embed(&self) -> Var {
        self.pos_embed
    }
}

pub fn patchify<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    s_n: &SparseFeatureMap,
    m_n: &MaskGrid,
) -> Result<TokenSequence> {
    let n = cfg.cnn.num_stages;
    if s_n.scale_id() != n {
        return Err(Error::consistency(
            "patchify",
            format!("expected junction features (scale {n}), got scale {}", s_n.scale_id()),
        ));
    }
    if !s_n.active().matches(m_n) {
        return Err(Error::consistency("patchify", "junction features do not match the junction mask"));
    }
    let embedded = tape.linear(
        s_n.features(),
        pv.get(&names::vit("embed.weight"))?,
        Some(pv.get(&names::vit("embed.bias"))?),
    )?;
    let pos_embed = pv.get(&names::vit("pos_embed"))?;
    let pos = tape.gather_rows(pos_embed, s_n.active().indices())?;
    let tokens = tape.add(embedded, pos)?;
    Ok(TokenSequence {
        tokens,
        cells: s_n.active().clone(),
        pos_embed,
    })
}

/// Pre-norm transformer blocks; token order and coordinates pass through.
pub fn vit_encode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
) -> Result<TokenSequence> {
    if tokens.is_empty() {
        return Err(Error::consistency("vit_encode", "no unmasked tokens"));
    }
    let eps = T::from_f64(cfg.norm_eps);
    let mut x = tokens.tokens;
    for b in 0..cfg.vit.depth {
        let p = |part: &str| pv.get(&names::vit_block(b, part));
        let h = tape.layer_norm(x, p("ln1.gamma")?, p("ln1.beta")?, eps)?;
        let q = tape.linear(h, p("attn.q.weight")?, Some(p("attn.q.bias")?))?;
        let k = tape.linear(h, p("attn.k.weight")?, Some(p("attn.k.bias")?))?;
        let v = tape.linear(h, p("attn.v.weight")?, Some(p("attn.v.bias")?))?;
        let a = tape.multi_head_attention(q, k, v, cfg.vit.heads)?;
        let a = tape.linear(a, p("attn.proj.weight")?, Some(p("attn.proj.bias")?))?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p("ln2.gamma")?, p("ln2.beta")?, eps)?;
        let h = tape.linear(h, p("mlp.fc1.weight")?, Some(p("mlp.fc1.bias")?))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, p("mlp.fc2.weight")?, Some(p("mlp.fc2.bias")?))?;
        x = tape.add(x, h)?;
    }
    Ok(TokenSequence {
        tokens: x,
        cells: tokens.cells.clone(),
        pos_embed: tokens.pos_embed,
    })
}

/// Projects tokens back to the junction channel width and scatters them onto
/// their cells.
pub fn unpatchify<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
    m_n: &MaskGrid,
) -> Result<SparseFeatureMap> {
    if !tokens.cells.matches(m_n) {
        return Err(Error::consistency("unpatchify", "token coordinates differ from the junction mask"));
    }
    let rows = tape.linear(
        tokens.tokens,
        pv.get(&names::vit("unembed.weight"))?,
        Some(pv.get(&names::vit("unembed.bias"))?),
    )?;
    SparseFeatureMap::new(tape, tokens.cells.clone(), rows, cfg.cnn.num_stages)
}
