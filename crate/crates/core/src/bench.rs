//! Efficiency harness: peak live tensor bytes and wall-clock latency for
//! training steps and inference passes, over a resolution x batch grid.
//!
//! Peak memory is the engine-tracked live tensor byte count, not process
//! RSS: deterministic, and comparable across models, but not directly
//! comparable to GPU VRAM figures. Configurations that blow the byte budget
//! are reported as out-of-memory rows ("--" cells in the CSV).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ae::{AeConfig, Autoencoder};
use crate::corrupt::{corrupt, CorruptionSpec};
use crate::error::{Error, Result};
use crate::image::{toy_images, ImageBatch};
use crate::layers::{set_trainable, Mode};
use crate::losses::{loss_phase2, LossWeights};
use crate::nca::{NcaModel, TransitionConfig};
use crate::tensor::{bytes, Element, Tape, TensorError};
use crate::train::{Adam, TrainConfig, CONFIG_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LatentVitca,
    LatentNafca,
    VitcaInputSpace,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] =
        [ModelKind::LatentVitca, ModelKind::LatentNafca, ModelKind::VitcaInputSpace];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::LatentVitca => "latent-vitca",
            ModelKind::LatentNafca => "latent-nafca",
            ModelKind::VitcaInputSpace => "vitca-input-space",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent-vitca" => Ok(ModelKind::LatentVitca),
            "latent-nafca" => Ok(ModelKind::LatentNafca),
            "vitca-input-space" => Ok(ModelKind::VitcaInputSpace),
            other => Err(Error::InvalidInput(format!("unknown model kind {other}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One benchmark measurement row. `None` measurement fields mean the
/// configuration exceeded the byte budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub model: ModelKind,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub steps: usize,
    pub peak_state_bytes: Option<usize>,
    pub mean_latency_s: Option<f64>,
    pub stddev_latency_s: Option<f64>,
    pub repeats: usize,
}

/// Default byte budget: generous enough for the smallest input-space ViTCA
/// training configuration, small enough that the bigger grid cells report
/// out-of-memory the way the reference tables do.
pub const DEFAULT_BYTE_BUDGET: usize = 1_600_000_000;

/// Model bundle under benchmark: latent kinds carry the autoencoder, the
/// input-space kind runs the CA directly on image channels.
pub struct BenchModel<E: Element> {
    pub ae: Option<Autoencoder<E>>,
    pub nca: NcaModel<E>,
}

impl<E: Element> BenchModel<E> {
    pub fn build(kind: ModelKind, height: usize, width: usize, seed: u64) -> Result<Self> {
        match kind {
            ModelKind::LatentVitca | ModelKind::LatentNafca => {
                let ae_cfg = AeConfig { height, width, ..AeConfig::default() };
                let mut ae = Autoencoder::new(ae_cfg, seed)?;
                // batch norm needs statistics for eval-mode passes
                let primer = toy_images(2, height, width, seed ^ 0xbeef);
                let mut tape = Tape::eval();
                let x = tape.constant(&primer.to_tensor()?);
                ae.forward_bypass_t(&mut tape, &x, Mode::Train)?;
                let t_cfg = if kind == ModelKind::LatentVitca {
                    TransitionConfig::vitca()
                } else {
                    TransitionConfig::nafca()
                };
                let nca = NcaModel::new(ae_cfg.latent_channels, t_cfg, seed ^ 1)?;
                Ok(BenchModel { ae: Some(ae), nca })
            }
            ModelKind::VitcaInputSpace => {
                let nca = NcaModel::new(3, TransitionConfig::vitca(), seed ^ 2)?;
                Ok(BenchModel { ae: None, nca })
            }
        }
    }

    /// Full restoration pass at eval settings; returns the restored batch.
    pub fn infer(&mut self, corrupted: &ImageBatch, t_steps: usize, seed: u64) -> Result<ImageBatch> {
        match &mut self.ae {
            Some(ae) => {
                let enc = ae.encode(corrupted)?;
                let state = self.nca.seed_state(&enc.latent)?;
                let rolled = self.nca.rollout(&state, t_steps, Mode::Eval, seed)?;
                ae.decode(&rolled.visible(), &enc.skip)
            }
            None => {
                let state = self.nca.seed_state(&corrupted.to_tensor()?)?;
                let rolled = self.nca.rollout(&state, t_steps, Mode::Eval, seed)?;
                ImageBatch::from_tensor(&rolled.visible())
            }
        }
    }

    /// One full training step: forward + loss + backward + optimizer update.
    fn train_step(
        &mut self,
        clean: &ImageBatch,
        corrupted: &ImageBatch,
        t_steps: usize,
        adam: &mut Adam,
        weights: &LossWeights,
        seed: u64,
    ) -> Result<()> {
        match &mut self.ae {
            Some(ae) => {
                set_trainable(ae, false);
                let result = (|| {
                    let enc = ae.encode(corrupted)?;
                    let y_latent = ae.encode(clean)?.latent;
                    let state = self.nca.seed_state(&enc.latent)?;
                    let mut tape = Tape::new();
                    let (rolled, _) =
                        self.nca.rollout_var(&mut tape, &state, t_steps, Mode::Train, seed)?;
                    let (loss, _) = loss_phase2(
                        &mut tape,
                        ae,
                        &rolled,
                        self.nca.visible_channels,
                        &enc.skip,
                        clean,
                        &y_latent,
                        weights,
                    )?;
                    let grads = tape.backward(&loss)?;
                    adam.step(&mut self.nca, &grads, 1e-3);
                    Ok(())
                })();
                set_trainable(ae, true);
                result
            }
            None => {
                // input-space CA: image-space reconstruction plus overflow
                let state = self.nca.seed_state(&corrupted.to_tensor()?)?;
                let mut tape = Tape::new();
                let (rolled, _) =
                    self.nca.rollout_var(&mut tape, &state, t_steps, Mode::Train, seed)?;
                let c = self.nca.state_channels();
                let visible = tape.slice_last(&rolled, 0, self.nca.visible_channels)?;
                let hidden = tape.slice_last(&rolled, self.nca.visible_channels, c)?;
                let y = tape.constant(&clean.to_tensor()?);
                let l_rec = tape.mse(&y, &visible)?;
                let over_v = tape.l1_clip_norm(&visible, E::ZERO, E::ONE)?;
                let over_h = tape.l1_clip_norm(&hidden, E::from_f64(-1.0), E::ONE)?;
                let over = tape.add(&over_v, &over_h)?;
                let loss = tape.weighted_sum(&[
                    (E::from_f64(weights.w_rec_nca), &l_rec),
                    (E::from_f64(weights.w_over), &over),
                ])?;
                let grads = tape.backward(&loss)?;
                adam.step(&mut self.nca, &grads, 1e-3);
                Ok(())
            }
        }
    }
}

fn is_budget_error(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::BudgetExceeded { .. }))
}

/// Deterministic corrupted/clean pair for a bench configuration.
fn bench_batch(height: usize, width: usize, batch: usize, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
    let clean = toy_images(batch, height, width, seed);
    let corrupted = corrupt(&clean, &CorruptionSpec::noise(0.1, seed ^ 0xc0))?;
    Ok((clean, corrupted))
}

/// Runs `repeats`+1 instrumented executions of `body`, discards the first
/// (warm-up), and reports latency statistics plus the peak byte count.
fn measure(
    repeats: usize,
    byte_budget: Option<usize>,
    mut body: impl FnMut() -> Result<()>,
) -> Result<(Option<usize>, Option<f64>, Option<f64>)> {
    assert!(repeats >= 1, "need at least one measured repeat");
    let outcome = bytes::with_budget(byte_budget, || -> Result<(usize, Vec<f64>)> {
        let mut peak = 0usize;
        // warm-up run, not recorded
        bytes::reset_peak();
        body()?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            bytes::reset_peak();
            let start = Instant::now();
            body()?;
            times.push(start.elapsed().as_secs_f64());
            peak = peak.max(bytes::peak());
        }
        Ok((peak, times))
    });
    match outcome {
        Ok((peak, times)) => {
            let n = times.len() as f64;
            let mean = times.iter().sum::<f64>() / n;
            let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
            Ok((Some(peak), Some(mean), Some(var.sqrt())))
        }
        Err(e) if is_budget_error(&e) => Ok((None, None, None)),
        Err(e) => Err(e),
    }
}

/// Training-step benchmark: mean/stddev step latency over `repeats` runs
/// after one warm-up, plus peak live tensor bytes.
pub fn bench_training_step(
    kind: ModelKind,
    height: usize,
    width: usize,
    batch: usize,
    t_steps: usize,
    repeats: usize,
    byte_budget: Option<usize>,
    seed: u64,
) -> Result<BenchRecord> {
    let mut model = BenchModel::<f32>::build(kind, height, width, seed)?;
    let (clean, corrupted) = bench_batch(height, width, batch, seed)?;
    let mut adam = Adam::new(&TrainConfig::default());
    let weights = LossWeights::default();
    let mut run = 0u64;
    let (peak, mean, std) = measure(repeats, byte_budget, || {
        run += 1;
        model.train_step(&clean, &corrupted, t_steps, &mut adam, &weights, seed ^ run)
    })?;
    Ok(BenchRecord {
        model: kind,
        height,
        width,
        batch,
        steps: t_steps,
        peak_state_bytes: peak,
        mean_latency_s: mean,
        stddev_latency_s: std,
        repeats,
    })
}

/// Inference benchmark: forward-only timing with no gradient recording.
/// Also returns the last restored batch for difference imaging.
pub fn bench_inference(
    kind: ModelKind,
    height: usize,
    width: usize,
    batch: usize,
    t_steps: usize,
    repeats: usize,
    byte_budget: Option<usize>,
    seed: u64,
) -> Result<(BenchRecord, Option<ImageBatch>)> {
    let mut model = BenchModel::<f32>::build(kind, height, width, seed)?;
    let (_, corrupted) = bench_batch(height, width, batch, seed)?;
    let mut restored = None;
    let (peak, mean, std) = measure(repeats, byte_budget, || {
        restored = Some(model.infer(&corrupted, t_steps, seed)?);
        Ok(())
    })?;
    let record = BenchRecord {
        model: kind,
        height,
        width,
        batch,
        steps: t_steps,
        peak_state_bytes: peak,
        mean_latency_s: mean,
        stddev_latency_s: std,
        repeats,
    };
    let diff = restored.map(|r| difference_image(&corrupted, &r));
    Ok((record, diff))
}

/// Mean absolute difference per pixel (over batch and channels), scaled
/// into [0,1] for PGM export.
pub fn difference_image(a: &ImageBatch, b: &ImageBatch) -> ImageBatch {
    let (n, h, w, c) = (a.len(), a.height(), a.width(), a.channels());
    let mut out = ImageBatch::zeros(1, h, w, 1);
    let mut maxv = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for ni in 0..n {
                for ci in 0..c {
                    acc += (a.at(ni, y, x, ci) - b.at(ni, y, x, ci)).abs();
                }
            }
            let v = acc / (n * c) as f32;
            maxv = maxv.max(v);
            out.set(0, y, x, 0, v);
        }
    }
    if maxv > 0.0 {
        for v in out.data_mut() {
            *v /= maxv;
        }
    }
    out
}

/// The benchmark grid from the efficiency protocol.
pub const GRID_RESOLUTIONS: [usize; 3] = [32, 64, 128];
pub const GRID_BATCHES: [usize; 3] = [8, 16, 32];

/// Writes records as CSV with "--" for out-of-memory cells.
pub fn write_bench_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# lnca config-schema {}", CONFIG_SCHEMA_VERSION)?;
    writeln!(
        f,
        "model,resolution,batch,steps,peak_state_bytes,mean_latency_s,stddev_latency_s,repeats"
    )?;
    for r in records {
        let fmt_usize = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "--".into());
        let fmt_f64 = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "--".into());
        writeln!(
            f,
            "{},{}x{},{},{},{},{},{},{}",
            r.model,
            r.height,
            r.width,
            r.batch,
            r.steps,
            fmt_usize(r.peak_state_bytes),
            fmt_f64(r.mean_latency_s),
            fmt_f64(r.stddev_latency_s),
            r.repeats
        )?;
    }
    Ok(())
}

// ── Analytic FLOP accounting ────────────────────────────────────────
//
// Counts multiply-accumulate-dominated work (2 FLOPs per MAC) for the
// forward pass; used as an independent oracle for the latent-vs-input
// efficiency ordering.

fn conv_flops(cells: u64, k: u64, ci: u64, co: u64) -> u64 {
    2 * cells * k * k * ci * co
}

fn vitca_step_flops_per_cell(state_ch: u64, cfg: &TransitionConfig) -> u64 {
    let e = cfg.embed_dim as u64;
    let input = state_ch + if cfg.use_positional_encoding { 2 } else { 0 };
    let mlp = cfg.mlp_hidden as u64;
    let mut f = 2 * input * e; // embedding
    f += 3 * 2 * e * e; // q, k, v
    f += 2 * 2 * 9 * e; // scores + value mixing over 9 neighbors
    f += 2 * e * e; // output projection
    f += 2 * e * mlp + 2 * mlp * e; // MLP
    f += 2 * e * state_ch; // head
    f += 3 * 8 * e; // layer norms
    f
}

fn nafca_step_flops_per_cell(state_ch: u64, cfg: &TransitionConfig) -> u64 {
    let s = state_ch;
    let block = |width: u64, gated: bool| {
        let mid = s * width / 2;
        let mut f = 8 * s; // layer norm
        f += 2 * s * (s * width); // expand 1x1
        f += mid; // simple gate product
        if gated {
            f += 2 * 9 * mid; // single-filter 3x3 map
            f += mid; // hadamard with the map
        }
        f += 2 * mid * s; // project 1x1
        f
    };
    block(cfg.perception_width as u64, true)
        + block(cfg.update_width as u64, false)
        + 8 * s
        + 2 * s * s // head
}

fn ae_flops(cfg: &AeConfig, batch: u64) -> u64 {
    let (h, w) = (cfg.height as u64, cfg.width as u64);
    let bf = cfg.base_filters as u64;
    let mut f = 0;
    let mut cells = batch * h * w;
    // encoder
    f += conv_flops(cells, 3, cfg.channels as u64, bf);
    f += conv_flops(cells, 1, bf, cfg.skip_channels as u64);
    let mut width = bf;
    for _ in 0..cfg.downsample_stages {
        cells /= 4;
        f += conv_flops(cells, 3, width, width * 2);
        width *= 2;
    }
    f += conv_flops(cells, 3, width, cfg.latent_channels as u64);
    // decoder mirror
    f += conv_flops(cells, 3, cfg.latent_channels as u64, width);
    for _ in 0..cfg.downsample_stages {
        cells *= 4;
        f += conv_flops(cells, 3, width / 2, width);
        width /= 2;
    }
    f += conv_flops(cells, 1, bf, cfg.skip_channels as u64);
    f += conv_flops(cells, 3, cfg.skip_channels as u64, cfg.channels as u64);
    f
}

/// Forward (inference) FLOPs for a full restoration pass at `t_steps`.
pub fn inference_flops(kind: ModelKind, height: usize, width: usize, batch: usize, t_steps: usize) -> u64 {
    let b = batch as u64;
    match kind {
        ModelKind::VitcaInputSpace => {
            let cfg = TransitionConfig::vitca();
            let cells = b * (height * width) as u64;
            cells * t_steps as u64 * vitca_step_flops_per_cell(3 + cfg.hidden_channels as u64, &cfg)
        }
        ModelKind::LatentVitca | ModelKind::LatentNafca => {
            let ae_cfg = AeConfig { height, width, ..AeConfig::default() };
            let (lh, lw) = ae_cfg.latent_dims();
            let cells = b * (lh * lw) as u64;
            let state_ch;
            let per_cell = if kind == ModelKind::LatentVitca {
                let cfg = TransitionConfig::vitca();
                state_ch = ae_cfg.latent_channels as u64 + cfg.hidden_channels as u64;
                vitca_step_flops_per_cell(state_ch, &cfg)
            } else {
                let cfg = TransitionConfig::nafca();
                state_ch = ae_cfg.latent_channels as u64 + cfg.hidden_channels as u64;
                nafca_step_flops_per_cell(state_ch, &cfg)
            };
            ae_flops(&ae_cfg, b) + cells * t_steps as u64 * per_cell
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_bookkeeping_and_csv_format() {
        let rec = bench_training_step(
            ModelKind::LatentNafca,
            32,
            32,
            2,
            2,
            3,
            None,
            7,
        )
        .unwrap();
        assert_eq!(rec.repeats, 3);
        assert!(rec.mean_latency_s.unwrap() > 0.0);
        assert!(rec.stddev_latency_s.unwrap() >= 0.0);
        assert!(rec.peak_state_bytes.unwrap() > 0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let oom = BenchRecord {
            model: ModelKind::VitcaInputSpace,
            height: 128,
            width: 128,
            batch: 32,
            steps: 16,
            peak_state_bytes: None,
            mean_latency_s: None,
            stddev_latency_s: None,
            repeats: 1,
        };
        write_bench_csv(&path, &[rec, oom]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# lnca config-schema 1\n"));
        assert!(text.contains("model,resolution,batch,steps,peak_state_bytes"));
        assert!(text.contains("latent-nafca,32x32,2,2,"));
        assert!(text.contains("vitca-input-space,128x128,32,16,--,--,--,1"));
    }

    #[test]
    fn budget_turns_into_oom_row() {
        let rec = bench_training_step(
            ModelKind::LatentNafca,
            32,
            32,
            2,
            2,
            1,
            Some(100_000), // deliberately tiny
            7,
        )
        .unwrap();
        assert_eq!(rec.peak_state_bytes, None);
        assert_eq!(rec.mean_latency_s, None);
    }

    #[test]
    fn inference_uses_less_memory_than_training() {
        let kind = ModelKind::LatentNafca;
        let train = bench_training_step(kind, 32, 32, 2, 4, 1, None, 3).unwrap();
        let (infer, diff) = bench_inference(kind, 32, 32, 2, 4, 1, None, 3).unwrap();
        assert!(
            infer.peak_state_bytes.unwrap() < train.peak_state_bytes.unwrap(),
            "inference {} vs training {}",
            infer.peak_state_bytes.unwrap(),
            train.peak_state_bytes.unwrap()
        );
        let diff = diff.unwrap();
        assert_eq!((diff.height(), diff.width()), (32, 32));
    }

    #[test]
    fn latent_models_need_fewer_inference_flops() {
        for kind in [ModelKind::LatentVitca, ModelKind::LatentNafca] {
            for res in [32usize, 64, 128] {
                let latent = inference_flops(kind, res, res, 8, 64);
                let input = inference_flops(ModelKind::VitcaInputSpace, res, res, 8, 64);
                assert!(
                    latent < input,
                    "{kind} at {res}: {latent} !< {input}"
                );
            }
        }
    }

    #[test]
    fn model_kind_round_trips() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(ModelKind::parse("resnet").is_err());
    }
}
