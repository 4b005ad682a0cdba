//! Two-phase training: the autoencoder phase with triplet batches and two
//! gradient-descent steps per batch, then the CA phase with pool sampling
//! and latent-space restoration losses. Adam with cosine annealing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::Autoencoder;
use crate::corrupt::{corrupt, curriculum_severity, CorruptionKind, CorruptionSpec, TripletBatch};
use crate::dataset::{sample_seed, Dataset, Split};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::layers::{set_trainable, Mode, Module};
use crate::losses::{loss_phase1_step1, loss_phase1_step2, loss_phase2, LossWeights};
use crate::metrics::{ssim, SsimConfig};
use crate::nca::{CaState, NcaModel, PoolEntry, ReplayPool, TargetId, EVAL_STEPS};
use crate::tensor::{Element, Grads, Param, ParamId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ae,
    Nca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub curriculum: bool,
    pub min_severity: f64,
    pub max_severity: f64,
    /// Fixed severity for validation/test corruption.
    pub eval_severity: f64,
    pub corruption: CorruptionKind,
    pub pool_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Ae,
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            curriculum: false,
            min_severity: 0.02,
            max_severity: 0.1,
            eval_severity: 0.1,
            corruption: CorruptionKind::GaussianNoise,
            pool_capacity: crate::nca::DEFAULT_POOL_CAPACITY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 || self.lr_min <= 0.0 || self.lr_min > self.lr {
            return Err(Error::Config("need 0 < lr_min <= lr".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (derangement needs it)".into()));
        }
        if self.min_severity > self.max_severity || self.min_severity < 0.0 {
            return Err(Error::Config("need 0 <= min_severity <= max_severity".into()));
        }
        if self.pool_capacity == 0 {
            return Err(Error::Config("pool_capacity must be positive".into()));
        }
        Ok(())
    }

    /// Cosine annealing from lr (epoch 0) down to lr_min (last epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = (self.epochs - 1).max(1) as f64;
        let cos = (std::f64::consts::PI * epoch as f64 / t).cos();
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + cos)
    }

    fn train_severity(&self, epoch: usize) -> Result<f64> {
        if self.curriculum {
            curriculum_severity(epoch, self.epochs, self.min_severity, self.max_severity)
        } else {
            Ok(self.eval_severity)
        }
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam with moments kept in f64 regardless of the model element type.
/// The unit-norm variant rescales every parameter's gradient to unit L2
/// norm before the moment update: backpropagation through long unrolled CA
/// sequences produces step-count-dependent gradient magnitudes that
/// otherwise destabilize training.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    normalize: bool,
    t: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            normalize: false,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Adam with per-parameter unit gradient normalization (CA phase).
    pub fn with_unit_grad_norm(config: &TrainConfig) -> Self {
        Adam { normalize: true, ..Adam::new(config) }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter that received a gradient.
    pub fn step<E: Element, M: Module<E> + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &Grads<E>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut apply = |p: &mut Param<E>| {
            if !p.trainable() {
                return;
            }
            let Some(g) = grads.param(p.id()) else { return };
            let scale = if self.normalize {
                let norm = g.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
                1.0 / (norm + 1e-8)
            } else {
                1.0
            };
            let m = self.m.entry(p.id()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(p.id()).or_insert_with(|| vec![0.0; p.numel()]);
            let mut next = Vec::with_capacity(p.numel());
            for ((mi, vi), (&pi, &gi)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.value().data().iter().zip(g.data()))
            {
                let gf = gi.to_f64() * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gf;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gf * gf;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                next.push(E::from_f64(pi.to_f64() - lr * mhat / (vhat.sqrt() + self.eps)));
            }
            p.set_value(Tensor::from_vec(p.value().shape(), next).expect("same shape"));
        };
        model.visit_params_mut(&mut apply);
    }
}

// ── Curves ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: Split,
    pub term: String,
    pub value: f64,
}

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Loss-curve CSV: epoch,split,term,value with the schema version embedded
/// as a leading comment row.
pub fn write_curves_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# lnca config-schema {}", CONFIG_SCHEMA_VERSION)?;
    writeln!(f, "epoch,split,term,value")?;
    for p in points {
        let split = match p.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        writeln!(f, "{},{},{},{}", p.epoch, split, p.term, p.value)?;
    }
    Ok(())
}

pub struct TrainStats {
    pub curves: Vec<CurvePoint>,
    pub optimizer_steps: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

// ── Phase 1: autoencoder ────────────────────────────────────────────

/// Trains the autoencoder on triplet batches: per batch, one optimizer step
/// on the rec/dist/task sum, then a second on the equivalence loss. CA
/// parameters are never touched.
pub fn train_ae<E: Element>(
    ae: &mut Autoencoder<E>,
    dataset: &Dataset,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainStats> {
    config.validate()?;
    weights.validate()?;
    let mut adam = Adam::new(config);
    let mut curves = Vec::new();

    for epoch in 0..config.epochs {
        let severity = config.train_severity(epoch)?;
        let lr = config.lr_at(epoch);
        let mut order = dataset.train.to_vec();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xae, epoch as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // no derangement for a single sample
            }
            let anchor = dataset.images.select(chunk);
            let spec = CorruptionSpec {
                kind: config.corruption,
                severity,
                seed: mix(config.seed, 1 + epoch as u64, bi as u64),
            };
            let triplet =
                TripletBatch::build(&anchor, &spec, mix(config.seed, 2 + epoch as u64, bi as u64))?;

            let mut tape = Tape::new();
            let (loss1, report1) =
                loss_phase1_step1(&mut tape, ae, &triplet, weights, Mode::Train)?;
            let grads = tape.backward(&loss1)?;
            adam.step(ae, &grads, lr);

            let mut rng2 =
                ChaCha8Rng::seed_from_u64(mix(config.seed, 3 + epoch as u64, bi as u64));
            let mut tape = Tape::new();
            let (loss2, report2) =
                loss_phase1_step2(&mut tape, ae, &triplet, weights, &mut rng2, Mode::Train)?;
            let grads = tape.backward(&loss2)?;
            adam.step(ae, &grads, lr);

            for (name, v) in report1.terms.iter().chain(report2.terms.iter()) {
                *sums.entry(name).or_insert(0.0) += v;
            }
            *sums.entry("total").or_insert(0.0) += report1.total + report2.total;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Dataset("training split too small for the batch size".into()));
        }
        for (name, sum) in &sums {
            curves.push(CurvePoint {
                epoch,
                split: Split::Train,
                term: name.to_string(),
                value: sum / batches as f64,
            });
        }

        // validation: step-1 losses at the fixed severity, eval mode
        if dataset.val.len() >= 2 {
            let anchor = dataset.images.select(&dataset.val);
            let spec = CorruptionSpec {
                kind: config.corruption,
                severity: config.eval_severity,
                seed: mix(config.seed, 0x7a1, epoch as u64),
            };
            let triplet = TripletBatch::build(&anchor, &spec, mix(config.seed, 0x7a2, epoch as u64))?;
            let mut tape = Tape::eval();
            let (_, report) = loss_phase1_step1(&mut tape, ae, &triplet, weights, Mode::Eval)?;
            for (name, v) in &report.terms {
                curves.push(CurvePoint {
                    epoch,
                    split: Split::Val,
                    term: name.to_string(),
                    value: *v,
                });
            }
            curves.push(CurvePoint {
                epoch,
                split: Split::Val,
                term: "total".into(),
                value: report.total,
            });
        }
    }
    Ok(TrainStats { curves, optimizer_steps: adam.steps() })
}

// ── Phase 2: the CA ─────────────────────────────────────────────────

struct StepBatch<E: Element> {
    cells: Tensor<E>,
    steps: Vec<u64>,
    targets: Vec<TargetId>,
    skips: Tensor<E>,
}

fn stack_entries<E: Element>(entries: &[PoolEntry<E>]) -> Result<StepBatch<E>> {
    let cells: Vec<&Tensor<E>> = entries.iter().map(|e| &e.state.cells).collect();
    let skips: Vec<&Tensor<E>> = entries.iter().map(|e| &e.skip).collect();
    Ok(StepBatch {
        cells: Tensor::concat_batch(&cells)?,
        steps: entries.iter().map(|e| e.state.step).collect(),
        targets: entries.iter().map(|e| e.target).collect(),
        skips: Tensor::concat_batch(&skips)?,
    })
}

fn split_batch<E: Element>(
    batch: &StepBatch<E>,
    cells: &Tensor<E>,
    visible_channels: usize,
    applied_steps: u64,
) -> Result<Vec<PoolEntry<E>>> {
    let mut out = Vec::with_capacity(batch.targets.len());
    for i in 0..batch.targets.len() {
        out.push(PoolEntry {
            state: CaState {
                cells: cells.slice_batch(i, i + 1)?,
                visible_channels,
                step: batch.steps[i] + applied_steps,
            },
            target: batch.targets[i],
            skip: batch.skips.slice_batch(i, i + 1)?,
        });
    }
    Ok(out)
}

/// Restores a batch through the full pipeline at eval settings: encode,
/// 64 CA steps, decode.
pub fn restore<E: Element>(
    ae: &mut Autoencoder<E>,
    nca: &NcaModel<E>,
    corrupted: &ImageBatch,
    seed: u64,
) -> Result<ImageBatch> {
    let enc = ae.encode(corrupted)?;
    let state = nca.seed_state(&enc.latent)?;
    let rolled = nca.rollout(&state, EVAL_STEPS, Mode::Eval, seed)?;
    ae.decode(&rolled.visible(), &enc.skip)
}

/// Mean SSIM of restored validation images against their clean versions.
fn validation_ssim<E: Element>(
    ae: &mut Autoencoder<E>,
    nca: &NcaModel<E>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<f64> {
    let idx = if dataset.val.is_empty() { &dataset.train } else { &dataset.val };
    let clean = dataset.images.select(idx);
    let spec = CorruptionSpec {
        kind: config.corruption,
        severity: config.eval_severity,
        seed: sample_seed(config.seed, 0xea1),
    };
    let corrupted = corrupt(&clean, &spec)?;
    let restored = restore(ae, nca, &corrupted, mix(config.seed, 0xea1, 0))?;
    let (_, mean) = ssim(&restored, &clean, &fitting_ssim_config(&clean))?;
    Ok(mean)
}

/// Default SSIM parameters with the window clamped to the image size, so
/// validation works on tiny lattices too.
pub fn fitting_ssim_config(images: &ImageBatch) -> SsimConfig {
    let mut cfg = SsimConfig::default();
    cfg.window = cfg.window.min(images.height()).min(images.width());
    cfg
}

/// Trains the CA in latent space with pool sampling. The autoencoder is
/// frozen for the duration of the call (its parameters are marked
/// non-trainable and verified to receive no gradients).
pub fn train_nca<E: Element>(
    ae: &mut Autoencoder<E>,
    nca: &mut NcaModel<E>,
    dataset: &Dataset,
    config: &TrainConfig,
    weights: &LossWeights,
    pool: &mut ReplayPool<E>,
) -> Result<TrainStats> {
    config.validate()?;
    weights.validate()?;
    let mut ae_ids: HashSet<ParamId> = HashSet::new();
    ae.visit_params(&mut |p| {
        ae_ids.insert(p.id());
    });
    set_trainable(ae, false);
    let result = train_nca_inner(ae, nca, dataset, config, weights, pool, &ae_ids);
    set_trainable(ae, true);
    result
}

#[allow(clippy::too_many_arguments)]
fn train_nca_inner<E: Element>(
    ae: &mut Autoencoder<E>,
    nca: &mut NcaModel<E>,
    dataset: &Dataset,
    config: &TrainConfig,
    weights: &LossWeights,
    pool: &mut ReplayPool<E>,
    ae_ids: &HashSet<ParamId>,
) -> Result<TrainStats> {
    let mut adam = Adam::with_unit_grad_norm(config);
    let mut curves = Vec::new();
    let mut pool_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xb00, 0));
    let mut global_step: u64 = 0;

    for epoch in 0..config.epochs {
        let severity = config.train_severity(epoch)?;
        let lr = config.lr_at(epoch);
        let mut order = dataset.train.to_vec();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xca, epoch as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            global_step += 1;
            let odd_phase = global_step % 2 == 1 || pool.is_empty();

            // odd phases seed fresh trajectories, even phases resume pooled ones
            let (batch, sampled_slots) = if odd_phase {
                let clean = dataset.images.select(chunk);
                let spec = CorruptionSpec {
                    kind: config.corruption,
                    severity,
                    seed: mix(config.seed, 4 + epoch as u64, bi as u64),
                };
                let corrupted = corrupt(&clean, &spec)?;
                let enc = ae.encode(&corrupted)?;
                let state = nca.seed_state(&enc.latent)?;
                let batch = StepBatch {
                    cells: state.cells,
                    steps: vec![0; chunk.len()],
                    targets: chunk.iter().map(|&i| TargetId(i)).collect(),
                    skips: enc.skip,
                };
                (batch, None)
            } else {
                let slots = pool.sample(config.batch_size, &mut pool_rng)?;
                let entries: Vec<PoolEntry<E>> =
                    slots.iter().map(|&s| pool.entry(s).clone()).collect();
                (stack_entries(&entries)?, Some(slots))
            };

            let steps = {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(config.seed, 5 + epoch as u64, bi as u64));
                NcaModel::<E>::sample_train_steps(&mut rng)
            };
            let rollout_seed = mix(config.seed, 6 + epoch as u64, bi as u64);

            let y = dataset.images.select(&batch.targets.iter().map(|t| t.0).collect::<Vec<_>>());
            let y_latent = ae.encode(&y)?.latent;

            let state = CaState {
                cells: batch.cells.clone(),
                visible_channels: nca.visible_channels,
                step: batch.steps.iter().copied().max().unwrap_or(0),
            };
            let mut tape = Tape::new();
            let (rolled, _) = nca.rollout_var(&mut tape, &state, steps, Mode::Train, rollout_seed)?;
            let (loss, report) = loss_phase2(
                &mut tape,
                ae,
                &rolled,
                nca.visible_channels,
                &batch.skips,
                &y,
                &y_latent,
                weights,
            )?;
            let rolled_cells = rolled.value().clone();
            let grads = tape.backward(&loss)?;
            if grads.param_ids().any(|id| ae_ids.contains(&id)) {
                return Err(Error::InvalidInput(
                    "autoencoder received gradients during the CA phase".into(),
                ));
            }
            adam.step(nca, &grads, lr);

            let entries = split_batch(&batch, &rolled_cells, nca.visible_channels, steps as u64)?;
            match sampled_slots {
                None => pool.store_fresh(entries, &mut pool_rng),
                Some(slots) => {
                    for (slot, entry) in slots.into_iter().zip(entries) {
                        pool.store_back(slot, entry);
                    }
                }
            }

            for (name, v) in &report.terms {
                *sums.entry(name).or_insert(0.0) += v;
            }
            *sums.entry("total").or_insert(0.0) += report.total;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Dataset("training split too small for the batch size".into()));
        }
        for (name, sum) in &sums {
            curves.push(CurvePoint {
                epoch,
                split: Split::Train,
                term: name.to_string(),
                value: sum / batches as f64,
            });
        }
        let val = validation_ssim(ae, nca, dataset, config)?;
        curves.push(CurvePoint { epoch, split: Split::Val, term: "ssim".into(), value: val });
    }
    Ok(TrainStats { curves, optimizer_steps: adam.steps() })
}
