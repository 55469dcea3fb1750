//! Named parameter tensors for the whole model.
//!
//! Names are dotted paths (`cnn.stage2.block0.dw.weight`); the encoder lives
//! under `cnn.` and `vit.`, the decoder under `decoder.`, task heads under
//! `head.`. Iteration order is lexicographic, which fixes checkpoint layout.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Fusion, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Which task head a parameter set carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Masked-image reconstruction: per-scale mask embeddings + linear head.
    Reconstruct,
    /// Binary segmentation head; no mask embeddings.
    Segment,
}

pub(crate) mod names {
    pub fn stem(part: &str) -> String {
        format!("cnn.stem.{part}")
    }
    pub fn block(stage: usize, block: usize, part: &str) -> String {
        format!("cnn.stage{stage}.block{block}.{part}")
    }
    pub fn down(stage: usize, part: &str) -> String {
        format!("cnn.stage{stage}.down.{part}")
    }
    pub fn vit(part: &str) -> String {
        format!("vit.{part}")
    }
    pub fn vit_block(block: usize, part: &str) -> String {
        format!("vit.block{block}.{part}")
    }
    pub fn mask_embed(scale: usize) -> String {
        format!("decoder.mask_embed.{scale}")
    }
    pub fn proj(scale: usize, part: &str) -> String {
        format!("decoder.proj{scale}.{part}")
    }
    pub fn up(scale: usize, part: &str) -> String {
        format!("decoder.up{scale}.{part}")
    }
    pub fn fuse(scale: usize, part: &str) -> String {
        format!("decoder.fuse{scale}.{part}")
    }
    pub fn recon(part: &str) -> String {
        format!("head.recon.{part}")
    }
    pub fn seg(part: &str) -> String {
        format!("head.seg.{part}")
    }
}

/// Prefixes of parameters that transfer from pretraining to fine-tuning.
pub const ENCODER_PREFIXES: [&str; 2] = ["cnn.", "vit."];
/// Pretraining-only parameters dropped on transfer.
pub const PRETRAIN_ONLY_PREFIXES: [&str; 2] = ["decoder.mask_embed.", "head.recon."];

pub fn is_encoder_param(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv(specs: &mut Vec<ParamSpec>, prefix: impl Fn(&str) -> String, cout: usize, cin: usize, k: usize) {
    specs.push(ParamSpec {
        name: prefix("weight"),
        shape: vec![cout, cin, k, k, k],
        init: Init::FanIn(cin * k * k * k),
    });
    specs.push(ParamSpec { name: prefix("bias"), shape: vec![cout], init: Init::Zeros });
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: impl Fn(&str) -> String, fout: usize, fin: usize) {
    specs.push(ParamSpec { name: prefix("weight"), shape: vec![fout, fin], init: Init::FanIn(fin) });
    specs.push(ParamSpec { name: prefix("bias"), shape: vec![fout], init: Init::Zeros });
}

fn norm(specs: &mut Vec<ParamSpec>, prefix: impl Fn(&str) -> String, c: usize) {
    specs.push(ParamSpec { name: prefix("gamma"), shape: vec![c], init: Init::Ones });
    specs.push(ParamSpec { name: prefix("beta"), shape: vec![c], init: Init::Zeros });
}

/// Every parameter of the model for `head`, in no particular order.
pub(crate) fn param_specs(cfg: &ModelConfig, head: HeadKind) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let cnn = &cfg.cnn;
    let k = cnn.kernel_size;
    let ch = &cnn.channels;
    let n = cnn.num_stages;

    conv(&mut s, names::stem, ch[0], 1, k);
    for stage in 1..=n {
        let c = ch[stage - 1];
        let hidden = c * cnn.expansion_ratio;
        for b in 0..cnn.blocks_per_stage {
            conv(&mut s, |p| names::block(stage, b, &format!("dw.{p}")), c, 1, k);
            norm(&mut s, |p| names::block(stage, b, &format!("norm.{p}")), c);
            linear(&mut s, |p| names::block(stage, b, &format!("pw1.{p}")), hidden, c);
            linear(&mut s, |p| names::block(stage, b, &format!("pw2.{p}")), c, hidden);
        }
        if stage < n {
            linear(&mut s, |p| names::down(stage, p), ch[stage], c);
        }
    }

    let vit = &cfg.vit;
    let e = vit.embed_dim;
    linear(&mut s, |p| names::vit(&format!("embed.{p}")), e, ch[n - 1]);
    s.push(ParamSpec {
        name: names::vit("pos_embed"),
        shape: vec![cfg.junction_cells(), e],
        init: Init::Normal(0.02),
    });
    for b in 0..vit.depth {
        let blk = |p: &str| names::vit_block(b, p);
        norm(&mut s, |p| blk(&format!("ln1.{p}")), e);
        for qkv in ["q", "k", "v", "proj"] {
            linear(&mut s, |p| blk(&format!("attn.{qkv}.{p}")), e, e);
        }
        norm(&mut s, |p| blk(&format!("ln2.{p}")), e);
        linear(&mut s, |p| blk(&format!("mlp.fc1.{p}")), e * vit.mlp_ratio, e);
        linear(&mut s, |p| blk(&format!("mlp.fc2.{p}")), e, e * vit.mlp_ratio);
    }
    linear(&mut s, |p| names::vit(&format!("unembed.{p}")), ch[n - 1], e);

    let widths = cfg.decoder_widths();
    let fusion = match head {
        HeadKind::Reconstruct => cfg.decoder.fusion,
        HeadKind::Segment => Fusion::Concat,
    };
    for scale in 1..=n {
        let needs_proj = scale == n || fusion != Fusion::None;
        if needs_proj {
            conv(&mut s, |p| names::proj(scale, p), widths[scale - 1], ch[scale - 1], 1);
        }
        if head == HeadKind::Reconstruct {
            s.push(ParamSpec {
                name: names::mask_embed(scale),
                shape: vec![ch[scale - 1]],
                init: Init::Normal(0.02),
            });
        }
        if scale < n {
            let (w, wn) = (widths[scale - 1], widths[scale]);
            conv(&mut s, |p| names::up(scale, &format!("conv1.{p}")), w, wn, 3);
            norm(&mut s, |p| names::up(scale, &format!("norm1.{p}")), w);
            conv(&mut s, |p| names::up(scale, &format!("conv2.{p}")), w, w, 3);
            norm(&mut s, |p| names::up(scale, &format!("norm2.{p}")), w);
            if fusion == Fusion::Concat {
                conv(&mut s, |p| names::fuse(scale, &format!("conv1.{p}")), w, 2 * w, 3);
                norm(&mut s, |p| names::fuse(scale, &format!("norm1.{p}")), w);
                conv(&mut s, |p| names::fuse(scale, &format!("conv2.{p}")), w, w, 3);
                norm(&mut s, |p| names::fuse(scale, &format!("norm2.{p}")), w);
            }
        }
    }

    match head {
        HeadKind::Reconstruct => conv(&mut s, names::recon, 1, widths[0], 1),
        HeadKind::Segment => {
            let reduced = cfg.seg_hidden.div_ceil(2);
            conv(&mut s, |p| names::seg(&format!("reduce.{p}")), reduced, widths[0], 1);
            conv(&mut s, |p| names::seg(&format!("conv.{p}")), cfg.seg_hidden, reduced + 1, 3);
            conv(&mut s, |p| names::seg(&format!("out.{p}")), 1, cfg.seg_hidden, 1);
        }
    }
    s
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters for `cfg` with the given head, drawn from `seed`.
    pub fn init(cfg: &ModelConfig, head: HeadKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut specs = param_specs(cfg, head);
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::ZERO; numel],
                Init::Ones => vec![T::ONE; numel],
                Init::FanIn(fan) => sample_normal(&mut rng, numel, 1.0 / (fan as f64).sqrt()),
                Init::Normal(std) => sample_normal(&mut rng, numel, std),
            };
            let name = spec.name.clone();
            if tensors.insert(spec.name, Tensor::new(spec.shape, data)?).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

fn sample_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// Tape variables of a bound [`ModelParams`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Moves each parameter's gradient out of `grads`, keyed by name.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>) -> Result<ModelParams<T>> {
        let mut out = ModelParams::default();
        for (name, &var) in &self.vars {
            let g = grads
                .take(var)
                .ok_or_else(|| Error::Usage(format!("parameter {name} was bound without gradients")))?;
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Name → shape of every parameter a configuration declares.
pub fn param_shapes(cfg: &ModelConfig, head: HeadKind) -> BTreeMap<String, Vec<usize>> {
    param_specs(cfg, head).into_iter().map(|s| (s.name, s.shape)).collect()
}

/// Parameter count of a configuration without allocating it.
pub fn param_count(cfg: &ModelConfig, head: HeadKind) -> usize {
    param_specs(cfg, head)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}
