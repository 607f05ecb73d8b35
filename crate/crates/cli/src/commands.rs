//! Implementations behind the subcommands.

use std::path::Path;
use std::time::Instant;

use voxtrans_core::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, SpecEcho, STAGE_AE, STAGE_LDM,
};
use voxtrans_core::config::RunConfig;
use voxtrans_core::gradcheck::run_battery;
use voxtrans_core::metrics::{nmse, psnr, ssim, MetricReport, MetricRow};
use voxtrans_core::phantom::{split_dataset, DatasetManifest};
use voxtrans_core::pipeline::TranslateModel;
use voxtrans_core::plot::svg_from_csv;
use voxtrans_core::train::{
    as_input, as_volume, export_pool, write_csv, DataPool, LossReport, Stage1Trainer,
    Stage2Report, Stage2Trainer,
};
use voxtrans_core::volume::{load_raw, save_pgm_mid_slice, save_raw, SliceAxis};
use voxtrans_core::{ModalityRegistry, Result, VoxError};

use crate::{
    CommonArgs, EvaluateArgs, GenDataArgs, GradcheckArgs, Preset, TrainAeArgs, TrainLdmArgs,
    TranslateArgs,
};

/// Peak signal value for PSNR; all volumes in this pipeline are [0,1].
const PEAK: f64 = 1.0;

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match (&common.config, common.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::PaperScale)) => RunConfig::paper_scale(),
        (None, Some(Preset::Desk)) | (None, None) => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_pool(cfg: &RunConfig) -> Result<DataPool> {
    match &cfg.dataset.data_dir {
        Some(dir) => DataPool::from_dir(dir),
        None => {
            let spec = cfg.phantom_spec();
            let mut manifest = DatasetManifest::new(&spec, cfg.dataset.subjects)?;
            split_dataset(&mut manifest, cfg.dataset.train_fraction, cfg.seed)?;
            DataPool::new(spec, manifest)
        }
    }
}

fn write_log(out: &Path, name: &str, title: &str, header: &str, rows: Vec<String>) -> Result<()> {
    let csv_path = out.join(format!("{name}.csv"));
    write_csv(&csv_path, header, &rows)?;
    let svg = svg_from_csv(title, &std::fs::read_to_string(&csv_path)?)?;
    std::fs::write(out.join(format!("{name}.svg")), svg)?;
    Ok(())
}

fn minutes(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() / 60.0
}

pub fn train_ae(args: TrainAeArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let pool = build_pool(&cfg)?;
    let mut tr = Stage1Trainer::new(&cfg, pool.modality_names())?;
    let steps = cfg.stage1.steps;
    println!(
        "stage-1: {} steps over {} train subjects at {}^3, seed {}",
        steps,
        pool.seeds(voxtrans_core::phantom::Split::Train).len(),
        cfg.dataset.extent,
        cfg.seed
    );
    let t0 = Instant::now();
    for s in 0..steps {
        tr.train(&pool, 1)?;
        let r = tr.log.last().expect("one report per step");
        if (s + 1) % cfg.stage1.log_every.max(1) == 0 || s + 1 == steps {
            println!(
                "  step {:>6}/{steps} total {:#.4} recon {:#.4} quant {:#.4} perc {:#.4} adv {:#.4} cyc {:#.4} disc {:#.4}",
                s + 1,
                r.total,
                r.recon,
                r.quant,
                r.perceptual,
                r.adversarial,
                r.cycle,
                r.disc
            );
        }
        if cfg.stage1.checkpoint_every > 0
            && (s + 1) % cfg.stage1.checkpoint_every == 0
            && s + 1 != steps
        {
            save_stage1(&out.join(format!("stage1_step{:06}.vxcp", s + 1)), &cfg, &tr)?;
        }
    }
    save_stage1(&out.join("stage1.vxcp"), &cfg, &tr)?;
    let rows = tr.log.iter().map(LossReport::csv_row).collect();
    write_log(out, "stage1_losses", "first-stage losses", LossReport::CSV_HEADER, rows)?;
    println!(
        "stage-1 done in {:.1} min; wrote {}",
        minutes(t0),
        out.join("stage1.vxcp").display()
    );
    Ok(())
}

fn save_stage1(path: &Path, cfg: &RunConfig, tr: &Stage1Trainer) -> Result<()> {
    let meta = CheckpointMeta {
        echo: SpecEcho::from_config(cfg, STAGE_AE, tr.registry.names()),
        latent_scale: 1.0,
        step: tr.step as u64,
        seed: cfg.seed,
    };
    save_checkpoint(path, &meta, &tr.ae)
}

pub fn train_ldm(args: TrainLdmArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    if !cfg.ablation.use_diffusion {
        return Err(VoxError::config(
            "this configuration disables the diffusion stage (use_diffusion = false); \
             there is no second stage to train",
        ));
    }
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let (meta1, ae) = load_checkpoint(&args.stage1)?;
    meta1.ensure_stage(STAGE_AE)?;
    let modalities = meta1.echo.modalities.clone();
    meta1.ensure_matches(&SpecEcho::from_config(&cfg, STAGE_AE, &modalities))?;
    let pool = build_pool(&cfg)?;
    if pool.modality_names() != modalities {
        return Err(VoxError::data(format!(
            "dataset modalities {:?} do not match the first-stage checkpoint {:?}",
            pool.modality_names(),
            modalities
        )));
    }
    let mut tr = Stage2Trainer::new(&cfg, &modalities, ae)?;
    println!("stage-2: encoding the train split through the frozen first stage");
    let t0 = Instant::now();
    tr.precompute(&pool)?;
    println!(
        "  cached {} latent pairs in {:.1} min, latent scale {:.6}",
        tr.pairs.len(),
        minutes(t0),
        tr.latent_scale
    );
    let steps = cfg.stage2.steps;
    println!("stage-2: {} steps, seed {}", steps, cfg.seed);
    for s in 0..steps {
        let r = tr.train_step()?;
        tr.log.push(r);
        if (s + 1) % cfg.stage2.log_every.max(1) == 0 || s + 1 == steps {
            let r = tr.log.last().expect("one report per step");
            println!("  step {:>6}/{steps} loss {:#.6}", s + 1, r.loss);
        }
        if cfg.stage2.checkpoint_every > 0
            && (s + 1) % cfg.stage2.checkpoint_every == 0
            && s + 1 != steps
        {
            save_stage2(&out.join(format!("stage2_step{:06}.vxcp", s + 1)), &cfg, &tr)?;
        }
    }
    // Zero extra steps; runs the first-stage freeze verification.
    tr.train(0)?;
    save_stage2(&out.join("stage2.vxcp"), &cfg, &tr)?;
    let rows = tr.log.iter().map(Stage2Report::csv_row).collect();
    write_log(out, "stage2_losses", "second-stage loss", Stage2Report::CSV_HEADER, rows)?;
    println!(
        "stage-2 done in {:.1} min; first-stage weights verified frozen; wrote {}",
        minutes(t0),
        out.join("stage2.vxcp").display()
    );
    Ok(())
}

fn save_stage2(path: &Path, cfg: &RunConfig, tr: &Stage2Trainer) -> Result<()> {
    let meta = CheckpointMeta {
        echo: SpecEcho::from_config(cfg, STAGE_LDM, tr.registry.names()),
        latent_scale: tr.latent_scale,
        step: tr.step as u64,
        seed: cfg.seed,
    };
    save_checkpoint(path, &meta, &tr.unet)
}

pub fn translate(args: TranslateArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let (meta1, ae) = load_checkpoint(&args.stage1)?;
    meta1.ensure_stage(STAGE_AE)?;
    let modalities = meta1.echo.modalities.clone();
    meta1.ensure_matches(&SpecEcho::from_config(&cfg, STAGE_AE, &modalities))?;
    let (unet, latent_scale) = if cfg.ablation.use_diffusion {
        let path = args.stage2.as_ref().ok_or_else(|| {
            VoxError::Checkpoint(
                "diffusion is enabled; pass --stage2 with the second-stage weights".into(),
            )
        })?;
        let (meta2, unet) = load_checkpoint(path)?;
        meta2.ensure_stage(STAGE_LDM)?;
        meta2.ensure_matches(&SpecEcho::from_config(&cfg, STAGE_LDM, &modalities))?;
        (Some(unet), meta2.latent_scale)
    } else {
        (None, 1.0)
    };
    let registry = ModalityRegistry::new(&modalities)?;
    registry.index_of(&args.source)?;
    for t in &args.targets {
        registry.index_of(t)?;
    }
    let vol = load_raw(&args.input)?;
    let x = as_input(&vol)?;
    let stem = args
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string();
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let model = TranslateModel {
        cfg,
        registry,
        ae,
        unet,
        latent_scale,
    };
    for target in &args.targets {
        let t0 = Instant::now();
        let res = model.translate(&x, target, seed)?;
        let v = as_volume(&res.volume)?;
        let base = format!("{stem}__{}__{}", args.source, target);
        let vol_path = out.join(format!("{base}.rvol"));
        save_raw(&v, &vol_path)?;
        if args.slices {
            save_pgm_mid_slice(&v, SliceAxis::Axial, &out.join(format!("{base}_axial.pgm")))?;
            save_pgm_mid_slice(
                &v,
                SliceAxis::Sagittal,
                &out.join(format!("{base}_sagittal.pgm")),
            )?;
        }
        println!(
            "{} -> {}: {} sampling steps, {:.1} s, wrote {}",
            args.source,
            target,
            res.sampling_steps,
            t0.elapsed().as_secs_f64(),
            vol_path.display()
        );
    }
    Ok(())
}

fn rvol_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("rvol") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let preds = rvol_stems(&args.predictions)?;
    let refs = rvol_stems(&args.references)?;
    if preds.is_empty() {
        return Err(VoxError::data(format!(
            "no .rvol volumes in {}",
            args.predictions.display()
        )));
    }
    let missing: Vec<&String> = preds.iter().filter(|s| !refs.contains(s)).collect();
    let extra: Vec<&String> = refs.iter().filter(|s| !preds.contains(s)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(VoxError::data(format!(
            "prediction/reference ids do not match; without references: {:?}, without predictions: {:?}",
            missing, extra
        )));
    }
    let mut report = MetricReport::default();
    for stem in &preds {
        let p = load_raw(&args.predictions.join(format!("{stem}.rvol")))?;
        let r = load_raw(&args.references.join(format!("{stem}.rvol")))?;
        let parts: Vec<&str> = stem.split("__").collect();
        let (subject, src, tar) = if parts.len() == 3 {
            (parts[0].to_string(), parts[1].to_string(), parts[2].to_string())
        } else {
            (stem.clone(), String::new(), String::new())
        };
        report.push(MetricRow {
            subject,
            src,
            tar,
            psnr: psnr(&p, &r, PEAK)?,
            nmse: nmse(&p, &r)?,
            ssim: ssim(&p, &r)?,
        });
    }
    let csv = report.to_csv();
    let path = out.join("metrics.csv");
    std::fs::write(&path, &csv)?;
    let (p, n, s) = report.aggregate().expect("at least one row");
    println!(
        "{} volumes: PSNR {:.3} \u{b1} {:.3} dB | NMSE {:.3e} \u{b1} {:.3e} | SSIM {:.3} \u{b1} {:.3}",
        report.rows.len(),
        p.mean,
        p.std,
        n.mean,
        n.std,
        s.mean,
        s.std
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let outcome = run_battery(args.seed, args.corrupt.as_deref())?;
    for line in &outcome.lines {
        println!("{}", line.render());
    }
    let failed = outcome.failures();
    println!(
        "{} checks, {} failed, {:.1} s",
        outcome.lines.len(),
        failed.len(),
        outcome.seconds
    );
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|l| l.name.as_str()).collect();
        Err(VoxError::Numeric(format!(
            "gradient checks failed: {}",
            names.join(", ")
        )))
    }
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    if cfg.dataset.data_dir.is_some() {
        return Err(VoxError::config(
            "gen-data writes a fresh dataset from the phantom settings; \
             unset dataset.data_dir in the configuration",
        ));
    }
    let out = &args.common.out;
    let spec = cfg.phantom_spec();
    let mut manifest = DatasetManifest::new(&spec, cfg.dataset.subjects)?;
    split_dataset(&mut manifest, cfg.dataset.train_fraction, cfg.seed)?;
    let pool = DataPool::new(spec, manifest)?;
    let t0 = Instant::now();
    export_pool(&pool, out)?;
    let train = pool.seeds(voxtrans_core::phantom::Split::Train).len();
    let test = pool.seeds(voxtrans_core::phantom::Split::Test).len();
    println!(
        "wrote {} subjects ({} train, {} test), {} modalities each, to {} in {:.1} min",
        train + test,
        train,
        test,
        pool.modality_names().len(),
        out.display(),
        minutes(t0)
    );
    Ok(())
}
