//! Subcommand implementations.

use std::path::{Path, PathBuf};

use lnca_core::ae::Autoencoder;
use lnca_core::bench::{
    bench_inference, bench_training_step, write_bench_csv, BenchRecord, ModelKind,
};
use lnca_core::checkpoint;
use lnca_core::config::RunConfig;
use lnca_core::corrupt::resize_bilinear;
use lnca_core::dataset::{load_manifest_dataset, write_dataset, Dataset, Split};
use lnca_core::image::{load_image, save_pgm, save_png};
use lnca_core::metrics::psnr_mse;
use lnca_core::metrics::ssim;
use lnca_core::nca::{NcaModel, ReplayPool};
use lnca_core::train::{
    self, fitting_ssim_config, train_ae as run_train_ae, train_nca as run_train_nca,
    write_curves_csv, Phase,
};
use lnca_core::{Error, Result};

use crate::CommonOpts;

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(common: &CommonOpts, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    // snapshot the effective configuration (carries the schema version)
    std::fs::write(common.out.join("config.json"), cfg.to_pretty_string())?;
    Ok(())
}

pub fn make_dataset(
    common: CommonOpts,
    images: Option<PathBuf>,
    synthetic: Option<usize>,
) -> Result<()> {
    let cfg = load_config(&common)?;
    prepare_out(&common, &cfg)?;
    let dataset = match (&images, synthetic) {
        (Some(dir), None) => {
            Dataset::load_folder(dir, cfg.ae.height, cfg.ae.width, cfg.train.seed)?
        }
        (None, Some(n)) => Dataset::toy(n, cfg.ae.height, cfg.ae.width, cfg.train.seed)?,
        (None, None) => {
            return Err(Error::InvalidInput(
                "make-dataset needs --images DIR or --synthetic N".into(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidInput(
                "--images and --synthetic are mutually exclusive".into(),
            ))
        }
    };
    let entries = write_dataset(
        &dataset,
        &common.out,
        cfg.train.corruption,
        cfg.train.eval_severity,
        cfg.train.seed,
    )?;
    println!(
        "wrote {} clean/corrupted pairs to {}",
        entries.len(),
        common.out.display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, epochs: Option<usize>, batch: Option<usize>) {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = batch {
        cfg.train.batch_size = b;
    }
}

fn log_epoch_summary(curves: &[train::CurvePoint], term: &str) {
    if let Some(last) = curves.iter().rev().find(|c| c.term == term) {
        println!("final {}: {:.6}", term, last.value);
    }
}

pub fn train_ae(
    common: CommonOpts,
    data: PathBuf,
    epochs: Option<usize>,
    batch: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    apply_overrides(&mut cfg, epochs, batch);
    cfg.train.phase = Phase::Ae;
    cfg.validate()?;
    prepare_out(&common, &cfg)?;
    let (dataset, _) = load_manifest_dataset(&data, cfg.ae.height, cfg.ae.width)?;
    let mut ae: Autoencoder<f32> = Autoencoder::new(cfg.ae, cfg.train.seed)?;
    let stats = run_train_ae(&mut ae, &dataset, &cfg.train, &cfg.weights)?;
    checkpoint::save(&common.out.join("ae.ckpt"), cfg.to_json(), &[("ae", &ae)])?;
    write_curves_csv(&common.out.join("ae_curves.csv"), &stats.curves)?;
    println!(
        "trained autoencoder for {} epochs ({} optimizer steps)",
        cfg.train.epochs, stats.optimizer_steps
    );
    log_epoch_summary(&stats.curves, "total");
    Ok(())
}

pub fn train_nca(
    common: CommonOpts,
    data: PathBuf,
    ckpt: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    apply_overrides(&mut cfg, epochs, batch);
    cfg.train.phase = Phase::Nca;
    cfg.validate()?;
    prepare_out(&common, &cfg)?;
    let ckpt_path = ckpt.unwrap_or_else(|| common.out.join("ae.ckpt"));
    let (dataset, _) = load_manifest_dataset(&data, cfg.ae.height, cfg.ae.width)?;
    let mut ae: Autoencoder<f32> = Autoencoder::new(cfg.ae, cfg.train.seed)?;
    checkpoint::load_section(&ckpt_path, "ae", &mut ae)?;
    let mut nca: NcaModel<f32> =
        NcaModel::new(cfg.ae.latent_channels, cfg.transition, cfg.train.seed ^ 0x9ca)?;
    let mut pool = ReplayPool::new(cfg.train.pool_capacity);
    let stats = run_train_nca(&mut ae, &mut nca, &dataset, &cfg.train, &cfg.weights, &mut pool)?;
    checkpoint::save(
        &common.out.join("lnca.ckpt"),
        cfg.to_json(),
        &[("ae", &ae), ("nca", &nca)],
    )?;
    write_curves_csv(&common.out.join("nca_curves.csv"), &stats.curves)?;
    println!(
        "trained the CA for {} epochs ({} optimizer steps, pool {}/{})",
        cfg.train.epochs,
        stats.optimizer_steps,
        pool.len(),
        pool.capacity()
    );
    log_epoch_summary(&stats.curves, "ssim");
    Ok(())
}

/// Builds the full model pair described by a checkpoint's embedded config.
fn load_full_model(path: &Path) -> Result<(RunConfig, Autoencoder<f32>, NcaModel<f32>)> {
    let config_json = checkpoint::read_config(path)?;
    let cfg: RunConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    cfg.validate()?;
    let mut ae: Autoencoder<f32> = Autoencoder::new(cfg.ae, 0)?;
    checkpoint::load_section(path, "ae", &mut ae)?;
    let mut nca: NcaModel<f32> = NcaModel::new(cfg.ae.latent_channels, cfg.transition, 0)?;
    checkpoint::load_section(path, "nca", &mut nca)?;
    Ok((cfg, ae, nca))
}

pub fn restore(
    common: CommonOpts,
    ckpt: PathBuf,
    images_dir: PathBuf,
    steps: usize,
) -> Result<()> {
    let (cfg, mut ae, nca) = load_full_model(&ckpt)?;
    prepare_out(&common, &cfg)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", images_dir.display())));
    }
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let mut count = 0usize;
    for p in &paths {
        let img = load_image(p)?;
        let img = if img.height() != cfg.ae.height || img.width() != cfg.ae.width {
            resize_bilinear(&img, 0, cfg.ae.height, cfg.ae.width)
        } else {
            img
        };
        let enc = ae.encode(&img)?;
        let state = nca.seed_state(&enc.latent)?;
        let rolled = nca.rollout(&state, steps, lnca_core::layers::Mode::Eval, seed)?;
        let out = ae.decode(&rolled.visible(), &enc.skip)?;
        let name = p.file_name().expect("listed file has a name");
        save_png(&out, 0, &common.out.join(name))?;
        count += 1;
    }
    println!("restored {count} images into {}", common.out.display());
    Ok(())
}

pub fn eval(common: CommonOpts, ckpt: PathBuf, data: PathBuf, steps: usize) -> Result<()> {
    use std::io::Write;
    let (cfg, mut ae, nca) = load_full_model(&ckpt)?;
    prepare_out(&common, &cfg)?;
    let (dataset, entries) = load_manifest_dataset(&data, cfg.ae.height, cfg.ae.width)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let mut report = std::fs::File::create(common.out.join("eval_report.csv"))?;
    writeln!(report, "# lnca config-schema {}", train::CONFIG_SCHEMA_VERSION)?;
    writeln!(report, "image_id,split,ssim,psnr,mse")?;
    let ssim_cfg = fitting_ssim_config(&dataset.images);
    let mut count = 0usize;
    for (i, entry) in entries.iter().enumerate() {
        let clean = dataset.images.image(i);
        let corrupted_path = data.join(entry.path.replace("clean/", "corrupted/"));
        let corrupted = load_image(&corrupted_path)?;
        let corrupted = if corrupted.height() != cfg.ae.height || corrupted.width() != cfg.ae.width
        {
            resize_bilinear(&corrupted, 0, cfg.ae.height, cfg.ae.width)
        } else {
            corrupted
        };
        let enc = ae.encode(&corrupted)?;
        let state = nca.seed_state(&enc.latent)?;
        let rolled = nca.rollout(&state, steps, lnca_core::layers::Mode::Eval, seed)?;
        let restored = ae.decode(&rolled.visible(), &enc.skip)?;
        let (_, s) = ssim(&restored, &clean, &ssim_cfg)?;
        let pm = psnr_mse(&restored, &clean)?;
        let split = match entry.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let id = Path::new(&entry.path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        writeln!(report, "{},{},{:.6},{:.4},{:.8}", id, split, s, pm.psnr, pm.mse)?;
        count += 1;
    }
    println!("evaluated {count} images; report at {}", common.out.join("eval_report.csv").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    common: CommonOpts,
    models: Vec<ModelKind>,
    repeats: usize,
    steps: usize,
    byte_budget: usize,
    inference_only: bool,
    training_only: bool,
    resolutions: Vec<usize>,
    batches: Vec<usize>,
) -> Result<()> {
    let cfg = load_config(&common)?;
    prepare_out(&common, &cfg)?;
    let models = if models.is_empty() { ModelKind::ALL.to_vec() } else { models };
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let budget = Some(byte_budget);

    if !inference_only {
        let mut records: Vec<BenchRecord> = Vec::new();
        for &kind in &models {
            for &res in &resolutions {
                for &batch in &batches {
                    eprintln!("bench train {kind} {res}x{res} batch {batch}");
                    records.push(bench_training_step(
                        kind, res, res, batch, steps, repeats, budget, seed,
                    )?);
                }
            }
        }
        write_bench_csv(&common.out.join("train_bench.csv"), &records)?;
    }

    if !training_only {
        let mut records: Vec<BenchRecord> = Vec::new();
        for &kind in &models {
            for &res in &resolutions {
                for &batch in &batches {
                    eprintln!("bench infer {kind} {res}x{res} batch {batch}");
                    let (rec, diff) = bench_inference(
                        kind,
                        res,
                        res,
                        batch,
                        lnca_core::nca::EVAL_STEPS,
                        repeats,
                        budget,
                        seed,
                    )?;
                    if let Some(diff) = diff {
                        save_pgm(
                            diff.data(),
                            diff.height(),
                            diff.width(),
                            &common.out.join(format!("diff_{kind}_{res}x{res}_b{batch}.pgm")),
                        )?;
                    }
                    records.push(rec);
                }
            }
        }
        write_bench_csv(&common.out.join("infer_bench.csv"), &records)?;
    }
    println!("benchmark results in {}", common.out.display());
    Ok(())
}
