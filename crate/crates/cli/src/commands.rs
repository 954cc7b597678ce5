use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::info;

use diffmae::evalmetrics::{finetune as run_finetune, masked_mse, psnr_from_mse, textured_shapes, MetricsReport};
use diffmae::gradsuite::{run_suite, SuiteConfig};
use diffmae::model::DiffMae;
use diffmae::numerics::{tag, OpKind, RngStream, Tensor};
use diffmae::patching::MaskConfig;
use diffmae::sampling::{inpaint as run_inpaint, single_step_mode, SamplerConfig};
use diffmae::schedule::Schedule;
use diffmae::training::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};

use crate::config::{DataConfig, RunConfig};
use crate::io::{list_pngs, load_png, save_png};
use crate::Overrides;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSS_LOG: &str = "loss.log";

fn resolve(path: &Path, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    ov.apply(&mut cfg);
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = cfg.to_toml()?;
    info!("resolved config:\n{text}");
    fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn load_images(data: &DataConfig, cfg: &RunConfig) -> Result<Vec<Tensor<f32>>> {
    let m = &cfg.model;
    let images = match &data.image_dir {
        Some(dir) => {
            let paths = list_pngs(dir)?;
            if paths.is_empty() {
                bail!("no PNG files in {}", dir.display());
            }
            paths.iter().map(|p| load_png(p, m.channels)).collect::<Result<Vec<_>>>()?
        }
        None => {
            if m.image_h != m.image_w {
                bail!("the synthetic set is square; model expects {}x{}", m.image_h, m.image_w);
            }
            textured_shapes::<f32>(data.count, m.image_h, m.channels, data.seed).images
        }
    };
    let expect = m.grid().image_shape();
    if let Some(bad) = images.iter().find(|im| im.shape() != expect) {
        bail!("grid mismatch: image is {:?}, model expects {:?}", bad.shape(), expect);
    }
    Ok(images)
}

fn emit(report: &MetricsReport, out: &Path) -> Result<()> {
    for line in report.kv_lines() {
        println!("{line}");
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report.to_json())? + "\n")?;
    Ok(())
}

pub fn pretrain(config: &Path, out: &Path, resume: bool, stop_after: Option<usize>, ov: &Overrides) -> Result<ExitCode> {
    let mut cfg = resolve(config, ov)?;
    if let Some(s) = ov.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    write_resolved(&cfg, out)?;
    let data = load_images(&cfg.data, &cfg)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG);

    let mut trainer = if resume {
        let ck: Checkpoint<f32> = load_checkpoint(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
        if ck.model != cfg.model || ck.train != cfg.train {
            bail!("config differs from the one stored in {}", ck_path.display());
        }
        // drop log records written after the checkpoint
        let kept: String = fs::read_to_string(&log_path)
            .unwrap_or_default()
            .lines()
            .take(ck.step as usize)
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&log_path, kept)?;
        info!("resuming at step {}", ck.step);
        Trainer::from_checkpoint(ck)?
    } else {
        let model = DiffMae::<f32>::init(cfg.model.clone(), &mut RngStream::new(cfg.train.seed).derive(&[tag("init")]))?;
        fs::write(&log_path, "")?;
        Trainer::new(model, cfg.train.clone())?
    };

    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let total = cfg.train.steps;
    let every = cfg.checkpoint_every;
    info!("training {} images for {total} steps", data.len());
    let until = stop_after.map_or(total, |s| s.min(total));
    trainer
        .run(&data, until, |tr, s| {
            writeln!(log, "step={} t_mean={} loss={} lr={}", s.step, s.t_mean, s.loss, s.lr)?;
            if s.step % every == 0 || s.step == total {
                log.flush()?;
                save_checkpoint(&tr.checkpoint(), &ck_path)?;
                info!("step {} loss {:.5} checkpoint written", s.step, s.loss);
            }
            Ok(())
        })
        .with_context(|| format!("training stopped after step {}", trainer.step()))?;
    Ok(ExitCode::SUCCESS)
}

pub fn inpaint(checkpoint: &Path, image: &Path, out: &Path, config: Option<&Path>, ov: &Overrides) -> Result<ExitCode> {
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.build_model()?;
    let mut sampler = match config {
        Some(p) => RunConfig::load(p)?.sampler,
        None => SamplerConfig::default(),
    };
    if let Some(s) = ov.seed {
        sampler.seed = s;
    }
    if ov.steps.is_some() {
        sampler.steps = ov.steps;
    }
    let mask = MaskConfig { kind: ov.mask.unwrap_or(ck.train.mask.kind), ratio: ov.mask_ratio.unwrap_or(ck.train.mask.ratio) };
    let grid = model.grid();
    let img = load_png(image, grid.channels)?;
    if img.shape() != grid.image_shape() {
        bail!("grid mismatch: image is {:?}, checkpoint expects {:?}", img.shape(), grid.image_shape());
    }
    let partition = mask.draw(&grid, &mut RngStream::new(sampler.seed).derive(&[tag("mask")]))?;
    info!("masking {} of {} patches", partition.masked.len(), grid.num_patches());
    let schedule = Schedule::from_config(&ck.train.schedule)?;
    let result = run_inpaint(&model, &grid, &img, &partition, &schedule, &sampler, ck.train.target)?;

    fs::create_dir_all(out)?;
    let mut masked = img.clone();
    let gray = Tensor::zeros(&[partition.masked.len(), grid.patch_dim()]);
    grid.write_patches(&mut masked, &gray, &partition.masked)?;
    save_png(&out.join("masked_input.png"), &masked)?;
    for (t, snap) in &result.snapshots {
        save_png(&out.join(format!("snapshot_t{t}.png")), snap)?;
    }
    save_png(&out.join("final.png"), &result.image)?;

    let mse = masked_mse(&result.image, &img, &grid, &partition)?;
    let mut report = MetricsReport::default();
    report.insert("masked_patches", partition.masked.len() as f64);
    report.insert("masked_mse", mse);
    report.insert("masked_psnr", psnr_from_mse(mse));
    emit(&report, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn finetune(config: &Path, checkpoint: Option<&Path>, out: &Path, ov: &Overrides) -> Result<ExitCode> {
    let mut cfg = resolve(config, ov)?;
    if let Some(s) = ov.steps {
        cfg.finetune.steps = s;
    }
    cfg.model.validate()?;
    write_resolved(&cfg, out)?;
    let ck: Option<Checkpoint<f32>> = match checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let m = &cfg.model;
    if m.image_h != m.image_w {
        bail!("the labeled synthetic set is square; model expects {}x{}", m.image_h, m.image_w);
    }
    let l = &cfg.labeled;
    let train = textured_shapes::<f32>(l.train_count, m.image_h, m.channels, l.seed);
    let test = textured_shapes::<f32>(l.test_count, m.image_h, m.channels, l.seed.wrapping_add(1));
    let r = run_finetune(m, ck.as_ref(), &train, &test, &cfg.finetune)?;
    let mut report = MetricsReport::default();
    report.insert("pretrained", if ck.is_some() { 1.0 } else { 0.0 });
    report.insert("initial_accuracy", r.initial_accuracy);
    report.insert("accuracy", r.accuracy);
    report.insert("final_loss", r.final_loss);
    emit(&report, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn eval(config: &Path, checkpoint: &Path, out: &Path, ov: &Overrides) -> Result<ExitCode> {
    let mut cfg = resolve(config, ov)?;
    if ov.steps.is_some() {
        cfg.sampler.steps = ov.steps;
    }
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.build_model()?;
    cfg.model = ck.model.clone();
    write_resolved(&cfg, out)?;
    let images = load_images(&cfg.data, &cfg)?;
    let grid = model.grid();
    let schedule = Schedule::from_config(&ck.train.schedule)?;
    let sampler = SamplerConfig { snapshot_ts: vec![0], ..cfg.sampler.clone() };
    let root = RngStream::new(cfg.sampler.seed);
    let (mut full, mut single) = (0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let partition = cfg.train.mask.draw(&grid, &mut root.derive(&[tag("eval-mask"), i as u64]))?;
        let s = SamplerConfig { seed: root.derive(&[tag("eval-seed"), i as u64]).next_u64(), ..sampler.clone() };
        let r = run_inpaint(&model, &grid, img, &partition, &schedule, &s, ck.train.target)?;
        let one = single_step_mode(&model, &grid, img, &partition, &schedule, s.seed, ck.train.target)?;
        full += masked_mse(&r.image, img, &grid, &partition)?;
        single += masked_mse(&one, img, &grid, &partition)?;
    }
    let n = images.len() as f64;
    let mut report = MetricsReport::default();
    report.insert("images", n);
    report.insert("masked_mse", full / n);
    report.insert("masked_psnr", psnr_from_mse(full / n));
    report.insert("single_step_masked_mse", single / n);
    report.insert("single_step_masked_psnr", psnr_from_mse(single / n));
    emit(&report, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(seed: u64, max_coords: Option<usize>, fault: Option<OpKind>) -> Result<ExitCode> {
    let cfg = SuiteConfig { seed, max_coords, fault, ..SuiteConfig::default() };
    if let Some(k) = fault {
        info!("negating the backward rule of {}", k.name());
    }
    let report = run_suite(&cfg)?;
    for line in report.lines() {
        println!("{line}");
    }
    println!("max_rel_err={:e} tol={:e} passed={}", report.max_rel_err(), report.tol, report.passed());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
