use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hyspark::ablation::{format_table, run_arm, AblationReport, Arm};
use hyspark::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hyspark::config::{Fusion, Precision, RunConfig};
use hyspark::dataset::{load_samples, write_phantoms};
use hyspark::finetune::{run_finetune, FinetuneInit};
use hyspark::mask::{MaskDump, MaskGrid};
use hyspark::model::reconstruct_forward;
use hyspark::params::HeadKind;
use hyspark::pretrain::{normalize_targets, run_pretrain, sample_pyramid};
use hyspark::verify::{run_verify, Suite, VerifyOptions};
use hyspark::volume::{load_volume, preprocess, save_volume, CropMode};
use hyspark::{Error, Result, Scalar, Tape};

use crate::{AblateArgs, ConfigArgs, FinetuneArgs, GenDataArgs, PretrainArgs, ReconstructArgs, VerifyArgs};

fn base_config(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = match (&args.config, &args.profile) {
        (Some(_), Some(_)) => return Err(Error::Usage("--config and --profile are mutually exclusive".into())),
        (Some(path), None) => {
            if !path.exists() {
                return Err(Error::Usage(format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path)?
        }
        (None, Some(name)) => RunConfig::profile(name)?,
        (None, None) => RunConfig::desk(),
    };
    with_precision(cfg, args)
}

fn with_precision(mut cfg: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(p) = &args.precision {
        cfg.pretrain.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(Error::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        };
    }
    Ok(cfg)
}

fn parse_fusion(s: &str) -> Result<Fusion> {
    match s {
        "concat" => Ok(Fusion::Concat),
        "add" => Ok(Fusion::Add),
        "none" => Ok(Fusion::None),
        other => Err(Error::Config(format!("unknown fusion {other:?} (expected concat, add or none)"))),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Usage(format!("--shape {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Usage(format!("--shape {s:?} must be three comma-separated extents")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

/// NDJSON sink that flushes every record.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        Ok(Self { out: create(&path)?, path })
    }

    fn push<R: serde::Serialize>(&mut self, record: &R) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let shape = parse_shape(&a.shape)?;
    let index = write_phantoms(&a.out, a.count, shape, a.seed)?;
    println!("wrote {} phantoms of shape {:?} to {}", index.count, index.shape, a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn pretrain(a: PretrainArgs) -> Result<ExitCode> {
    let mut cfg = base_config(&a.cfg)?;
    let t = &mut cfg.pretrain;
    if let Some(r) = a.mask_ratio {
        t.mask_ratio = r;
    }
    if a.no_bottom_up {
        t.bottom_up = false;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(f) = &a.fusion {
        cfg.model.decoder.fusion = parse_fusion(f)?;
    }
    cfg.validate()?;
    let samples = load_samples(&a.data)?;
    let volumes: Vec<_> = samples.into_iter().map(|s| s.volume).collect();
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.ndjson"));
    write_text(&with_suffix(&log_path, ".config.toml"), &cfg.to_toml())?;
    let mut log = JsonLines::create(log_path)?;
    match cfg.pretrain.precision {
        Precision::F32 => pretrain_typed::<f32>(&cfg, &volumes, &mut log, &a.out),
        Precision::F64 => pretrain_typed::<f64>(&cfg, &volumes, &mut log, &a.out),
    }
}

fn pretrain_typed<T: Scalar>(cfg: &RunConfig, volumes: &[hyspark::volume::Volume3D], log: &mut JsonLines, out: &Path) -> Result<ExitCode> {
    let total = cfg.pretrain.steps;
    let run = run_pretrain::<T>(cfg, volumes, |r| {
        if r.step % 10 == 0 || r.step + 1 == total {
            eprintln!("step {:>5}/{total}  loss {:.5}  lr {:.3e}", r.step, r.loss, r.lr);
        }
        log.push(r)
    })?;
    let ckpt = Checkpoint {
        step: run.log.len() as u64,
        head: HeadKind::Reconstruct,
        config: run.config.clone(),
        params: run.params,
        optimizer: Some(run.state),
    };
    save_checkpoint(&ckpt, out)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn finetune(a: FinetuneArgs) -> Result<ExitCode> {
    let ckpt_path = match (&a.ckpt, a.from_scratch, &a.from_checkpoint) {
        (Some(s), _, _) if s == "none" => None,
        (Some(s), _, _) => Some(PathBuf::from(s)),
        (None, true, None) => None,
        (None, false, Some(p)) => Some(p.clone()),
        (None, true, Some(_)) => {
            return Err(Error::Usage("--from-scratch and --from-checkpoint are mutually exclusive".into()))
        }
        (None, false, None) => {
            return Err(Error::Usage("pass --ckpt FILE|none, --from-checkpoint FILE or --from-scratch".into()))
        }
    };
    if let Some(p) = &ckpt_path {
        require_file(p, "checkpoint")?;
    }
    let has_config = a.cfg.config.is_some() || a.cfg.profile.is_some();
    let mut cfg = base_config(&a.cfg)?;
    if let (Some(p), false) = (&ckpt_path, has_config) {
        // Without an explicit config the checkpoint's own architecture is reused.
        cfg = with_precision(load_checkpoint::<f64>(p)?.config, &a.cfg)?;
    }
    let f = &mut cfg.finetune;
    if let Some(v) = a.steps {
        f.steps = v;
    }
    if let Some(v) = a.lr {
        f.lr = v;
    }
    if let Some(v) = a.batch_size {
        f.batch_size = v;
    }
    if let Some(v) = a.seed {
        f.seed = v;
    }
    if let Some(v) = a.eval_every {
        f.eval_every = v;
    }
    if a.stop_at_dice.is_some() {
        f.stop_at_dice = a.stop_at_dice;
    }
    cfg.validate()?;
    let train = load_samples(&a.data)?;
    let val = match &a.val {
        Some(dir) => load_samples(dir)?,
        None => Vec::new(),
    };
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".dice.ndjson"));
    write_text(&with_suffix(&log_path, ".config.toml"), &cfg.to_toml())?;
    let mut log = JsonLines::create(log_path)?;
    match cfg.pretrain.precision {
        Precision::F32 => finetune_typed::<f32>(&cfg, ckpt_path.as_deref(), &train, &val, &mut log, &a.out),
        Precision::F64 => finetune_typed::<f64>(&cfg, ckpt_path.as_deref(), &train, &val, &mut log, &a.out),
    }
}

fn finetune_typed<T: Scalar>(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    train: &[hyspark::dataset::Sample],
    val: &[hyspark::dataset::Sample],
    log: &mut JsonLines,
    out: &Path,
) -> Result<ExitCode> {
    let pretrained = ckpt.map(load_checkpoint::<T>).transpose()?;
    let init = match &pretrained {
        Some(c) => FinetuneInit::Pretrained(&c.params),
        None => FinetuneInit::Scratch,
    };
    let run = run_finetune::<T>(cfg, train, val, init, |r| {
        eprintln!("epoch {:>4}  {:<5}  dice {:.4}  loss {:.5}", r.epoch, r.split, r.dice, r.loss);
        log.push(r)
    })?;
    if let Some(t) = &run.transfer {
        eprintln!("transferred {} encoder tensors, dropped {}", t.copied.len(), t.dropped.len());
    }
    let model = Checkpoint {
        step: run.steps as u64,
        head: HeadKind::Segment,
        config: run.config.clone(),
        params: run.params,
        optimizer: None,
    };
    save_checkpoint(&model, out)?;
    eprintln!("model written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn reconstruct(a: ReconstructArgs) -> Result<ExitCode> {
    require_file(&a.ckpt, "checkpoint")?;
    require_file(&a.volume, "volume")?;
    let manifest_cfg = load_checkpoint::<f64>(&a.ckpt)?;
    match manifest_cfg.config.pretrain.precision {
        Precision::F32 => reconstruct_typed::<f32>(&a),
        Precision::F64 => reconstruct_typed::<f64>(&a),
    }
}

fn reconstruct_typed<T: Scalar>(a: &ReconstructArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint::<T>(&a.ckpt)?;
    if ckpt.head != HeadKind::Reconstruct {
        return Err(Error::Usage(format!("{} is not a pretraining checkpoint", a.ckpt.display())));
    }
    let mut cfg = ckpt.config.clone();
    if let Some(r) = a.mask_ratio {
        cfg.pretrain.mask_ratio = r;
    }
    cfg.validate()?;
    let raw = load_volume(&a.volume)?;
    let input = preprocess(&raw, cfg.model.input_shape, CropMode::Center)?;
    let pyramid = sample_pyramid(&cfg, a.seed)?;
    let mut tape = Tape::<T>::new();
    let pv = ckpt.params.bind(&mut tape, false);
    let x = tape.constant(input.to_tensor());
    let out = reconstruct_forward(&mut tape, &pv, &cfg.model, x, &pyramid)?;
    let pred: Vec<f64> = tape.value(out.prediction).data().iter().map(|v| v.to_f64()).collect();
    // Every block is mapped back with its own input statistics, MAE-style.
    let all_blocks = MaskGrid::full(cfg.model.junction_shape(), false, 0);
    let stats = normalize_targets(&input, &all_blocks)?;
    let prediction = stats.denormalize(&pred, input.values())?;
    let voxel = pyramid.voxel().bits();
    let masked: Vec<f32> = input.values().iter().zip(voxel).map(|(&v, &on)| if on { v } else { 0.0 }).collect();
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let shape = input.shape();
    let spacing = input.spacing_mm();
    let tag = |name: &str| format!("{}:{name}", a.volume.display());
    save_volume(&input, &a.out.join("input.raw"))?;
    save_volume(&hyspark::volume::Volume3D::new(shape, spacing, masked, tag("masked"))?, &a.out.join("masked.raw"))?;
    save_volume(&hyspark::volume::Volume3D::new(shape, spacing, prediction, tag("prediction"))?, &a.out.join("prediction.raw"))?;
    let dump = MaskDump::encode(pyramid.junction(), cfg.pretrain.mask_ratio, a.seed);
    write_text(&a.out.join("mask.json"), &dump.to_json())?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    println!(
        "wrote input/masked/prediction volumes {:?} to {} ({} of {} junction cells visible)",
        shape,
        a.out.display(),
        pyramid.junction().active_count(),
        pyramid.junction().cells()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let suite = Suite::parse(&a.suite)?;
    let report = run_verify(suite, VerifyOptions { bottom_up: !a.no_bottom_up, seed: a.seed });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &a.out {
        write_text(path, &(text.clone() + "\n"))?;
    }
    println!("{text}");
    for s in &report.suites {
        for c in s.checks.iter().filter(|c| !c.passed) {
            eprintln!("FAIL {}: {} ({})", s.name, c.name, c.detail);
        }
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let mut arms = Vec::new();
    for name in &a.arm {
        if name == "all" {
            arms.extend(Arm::ALL);
        } else {
            arms.push(Arm::parse(name)?);
        }
    }
    let mut cfg = base_config(&a.cfg)?;
    if let Some(v) = a.steps {
        cfg.pretrain.steps = v;
    }
    if let Some(v) = a.finetune_steps {
        cfg.finetune.steps = v;
        cfg.finetune.eval_every = cfg.finetune.eval_every.min(v);
    }
    if let Some(v) = a.seed {
        cfg.pretrain.seed = v;
        cfg.finetune.seed = v;
    }
    cfg.validate()?;
    let data = load_samples(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = Vec::new();
    for arm in arms {
        eprintln!("arm {}", arm.name());
        let mut loss_log = JsonLines::create(a.out.join(format!("{}.loss.ndjson", arm.name())))?;
        let mut dice_log = JsonLines::create(a.out.join(format!("{}.dice.ndjson", arm.name())))?;
        let row = match cfg.pretrain.precision {
            Precision::F32 => run_arm::<f32>(&cfg, arm, &data, |r| loss_log.push(r), |r| dice_log.push(r)),
            Precision::F64 => run_arm::<f64>(&cfg, arm, &data, |r| loss_log.push(r), |r| dice_log.push(r)),
        }?;
        rows.push(row);
    }
    let table = format_table(&rows);
    let report = AblationReport { config: cfg, rows };
    write_text(&a.out.join("ablation.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    write_text(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}
