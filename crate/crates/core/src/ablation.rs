//! Ablation arms: mask ratio and decoder skip fusion.

use serde::{Deserialize, Serialize};

use crate::config::{Fusion, RunConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, DiceRecord, FinetuneInit};
use crate::params::{param_count, HeadKind};
use crate::pretrain::{batch_plan, run_pretrain, smoothed_ends, LossRecord};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Ratio25,
    Ratio50,
    Ratio75,
    NoSkip,
    SkipAdd,
    SkipConcat,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::Ratio25, Arm::Ratio50, Arm::Ratio75, Arm::NoSkip, Arm::SkipAdd, Arm::SkipConcat];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Ratio25 => "ratio25",
            Arm::Ratio50 => "ratio50",
            Arm::Ratio75 => "ratio75",
            Arm::NoSkip => "no-skip",
            Arm::SkipAdd => "skip-add",
            Arm::SkipConcat => "skip-concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm {s:?}; expected one of {}", Self::names())))
    }

    pub fn names() -> String {
        Self::ALL.map(Arm::name).join("|")
    }

    /// The base config with this arm's single change applied.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Ratio25 => cfg.pretrain.mask_ratio = 0.25,
            Arm::Ratio50 => cfg.pretrain.mask_ratio = 0.5,
            Arm::Ratio75 => cfg.pretrain.mask_ratio = 0.75,
            Arm::NoSkip => cfg.model.decoder.fusion = Fusion::None,
            Arm::SkipAdd => cfg.model.decoder.fusion = Fusion::Add,
            Arm::SkipConcat => cfg.model.decoder.fusion = Fusion::Concat,
        }
        cfg
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub mask_ratio: f64,
    pub fusion: Fusion,
    pub pretrain_params: usize,
    pub pretrain_steps: usize,
    /// Mean loss over the first and last tenth of pretraining.
    pub initial_pretrain_loss: f64,
    pub final_pretrain_loss: f64,
    pub final_dice: f64,
    pub junction_cells: usize,
    /// Transformer tokens per sample, averaged over the run.
    pub mean_tokens: f64,
    /// Every sample's token count equalled its junction active-cell count.
    pub tokens_equal_active_cells: bool,
    /// Mean active sites per CNN stage.
    pub mean_active_sites: Vec<f64>,
    /// FNV-1a digest of the (item, crop, mask seed) sequence the run consumed.
    pub data_order_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
}

fn fnv(digest: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *digest ^= b as u64;
        *digest = digest.wrapping_mul(0x0100_0000_01b3);
    }
}

/// Pretrains, then fine-tunes from the result, under one arm.
pub fn run_arm<T: Scalar>(
    base: &RunConfig,
    arm: Arm,
    data: &[Sample],
    on_loss: impl FnMut(&LossRecord) -> Result<()>,
    on_dice: impl FnMut(&DiceRecord) -> Result<()>,
) -> Result<AblationRow> {
    let cfg = arm.apply(base);
    let volumes: Vec<_> = data.iter().map(|s| s.volume.clone()).collect();
    let mut digest = 0xcbf2_9ce4_8422_2325u64;
    for step in 0..cfg.pretrain.steps {
        for (item, crop, seed) in batch_plan(&cfg, &volumes, step)? {
            fnv(&mut digest, format!("{item}:{crop:?}:{seed};").as_bytes());
        }
    }
    let pre = run_pretrain::<T>(&cfg, &volumes, on_loss)?;
    let losses = pre.losses();
    let (first, last) = smoothed_ends(&losses, (losses.len() / 10).max(1));
    let ft = run_finetune::<T>(&cfg, data, &[], FinetuneInit::Pretrained(&pre.params), on_dice)?;
    let samples: Vec<_> = pre.stats.iter().flatten().collect();
    let n = samples.len().max(1) as f64;
    let stages = samples.first().map_or(0, |s| s.active_sites.len());
    Ok(AblationRow {
        arm: arm.name().into(),
        mask_ratio: cfg.pretrain.mask_ratio,
        fusion: cfg.model.decoder.fusion,
        pretrain_params: param_count(&cfg.model, HeadKind::Reconstruct),
        pretrain_steps: cfg.pretrain.steps,
        initial_pretrain_loss: first,
        final_pretrain_loss: last,
        final_dice: ft.final_dice("train").unwrap_or(f64::NAN),
        junction_cells: cfg.model.junction_cells(),
        mean_tokens: samples.iter().map(|s| s.tokens as f64).sum::<f64>() / n,
        tokens_equal_active_cells: samples.iter().all(|s| s.tokens == s.junction_active),
        mean_active_sites: (0..stages)
            .map(|i| samples.iter().map(|s| s.active_sites[i] as f64).sum::<f64>() / n)
            .collect(),
        data_order_digest: format!("{digest:016x}"),
    })
}

/// Aligned plain-text rendering of the rows.
pub fn format_table(rows: &[AblationRow]) -> String {
    let header = [
        "arm", "ratio", "fusion", "params", "loss0", "loss_end", "dice", "tokens", "tok=act", "data_order",
    ];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.arm.clone(),
                format!("{:.2}", r.mask_ratio),
                format!("{:?}", r.fusion).to_lowercase(),
                r.pretrain_params.to_string(),
                format!("{:.4}", r.initial_pretrain_loss),
                format!("{:.4}", r.final_pretrain_loss),
                format!("{:.4}", r.final_dice),
                format!("{:.2}/{}", r.mean_tokens, r.junction_cells),
                if r.tokens_equal_active_cells { "yes" } else { "no" }.into(),
                r.data_order_digest.clone(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|row| row[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 || i == 2 || i == 9 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec()) + "\n";
    for row in &body {
        out += &line(row.iter().map(String::as_str).collect());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_parse_and_apply() {
        assert_eq!(Arm::parse("skip-add").unwrap(), Arm::SkipAdd);
        assert!(matches!(Arm::parse("ratio90"), Err(Error::Config(_))));
        let base = RunConfig::desk();
        assert_eq!(Arm::Ratio25.apply(&base).pretrain.mask_ratio, 0.25);
        assert_eq!(Arm::NoSkip.apply(&base).model.decoder.fusion, Fusion::None);
    }

    #[test]
    fn skip_variants_change_parameter_counts() {
        let base = RunConfig::desk();
        let count = |a: Arm| param_count(&a.apply(&base).model, HeadKind::Reconstruct);
        assert!(count(Arm::NoSkip) < count(Arm::SkipAdd));
        assert!(count(Arm::SkipAdd) < count(Arm::SkipConcat));
        assert_eq!(count(Arm::Ratio25), count(Arm::Ratio75));
    }
}
