//! Shared helpers for the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lnca_core::ae::{AeConfig, Autoencoder};
use lnca_core::corrupt::{CorruptionSpec, TripletBatch};
use lnca_core::image::toy_images;
use lnca_core::layers::{Mode, Module};
use lnca_core::losses::{loss_phase1_step1, loss_phase1_step2, loss_phase2, LossWeights};
use lnca_core::nca::{NcaModel, TransitionConfig, TransitionKind};
use lnca_core::tensor::{gradcheck, Param, Tape, Tensor};

pub fn tiny_ae_f64(seed: u64) -> Autoencoder<f64> {
    Autoencoder::new(
        AeConfig {
            height: 8,
            width: 8,
            channels: 3,
            downsample_stages: 1,
            base_filters: 4,
            latent_channels: 3,
            skip_channels: 3,
        },
        seed,
    )
    .expect("valid config")
}

pub fn tiny_nafca_f64(seed: u64) -> NcaModel<f64> {
    NcaModel::new(
        3,
        TransitionConfig {
            kind: TransitionKind::Nafca,
            hidden_channels: 4,
            ..Default::default()
        },
        seed,
    )
    .expect("valid config")
}

pub fn tiny_vitca_f64(seed: u64) -> NcaModel<f64> {
    NcaModel::new(
        3,
        TransitionConfig {
            kind: TransitionKind::Vitca,
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 12,
            hidden_channels: 4,
            ..Default::default()
        },
        seed,
    )
    .expect("valid config")
}

/// Gives every zero-initialized head some signal so gradients flow.
pub fn randomize_params<M: Module<f64>>(model: &mut M, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_params_mut(&mut |p: &mut Param<f64>| {
        if p.value().data().iter().all(|&v| v == 0.0) {
            let t = Tensor::randn(p.value().shape(), scale, &mut rng).unwrap();
            p.set_value(t);
        }
    });
}

fn flatten_params<M: Module<f64>>(model: &M) -> Vec<f64> {
    let mut flat = Vec::new();
    model.visit_params(&mut |p| flat.extend_from_slice(p.value().data()));
    flat
}

fn load_params<M: Module<f64>>(model: &mut M, flat: &[f64]) {
    let mut off = 0;
    model.visit_params_mut(&mut |p| {
        let n = p.numel();
        let t = Tensor::from_vec(p.value().shape(), flat[off..off + n].to_vec()).unwrap();
        p.set_value(t);
        off += n;
    });
}

fn param_grads_flat<M: Module<f64>>(model: &M, grads: &lnca_core::tensor::Grads<f64>) -> Vec<f64> {
    let mut flat = Vec::new();
    model.visit_params(&mut |p| match grads.param(p.id()) {
        Some(g) => flat.extend(g.data().iter().copied()),
        None => flat.extend(std::iter::repeat(0.0).take(p.numel())),
    });
    flat
}

/// Finite-difference check of a scalar loss against every model parameter:
/// `loss` must be a pure function of the parameter values (all randomness
/// fixed by the caller). Probes `n_probes` spread coordinates.
fn fd_check_params<M: Module<f64>>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> f64,
    grads_flat: &[f64],
    n_probes: usize,
    h: f64,
) -> f64 {
    let mut flat = flatten_params(model);
    assert_eq!(flat.len(), grads_flat.len());
    let coords = gradcheck::probe_coords(flat.len(), n_probes);
    let mut f = |x: &[f64]| {
        load_params(model, x);
        loss(model)
    };
    let worst = gradcheck::max_rel_err_at(&mut f, &mut flat, grads_flat, &coords, h);
    load_params(model, &flat);
    worst
}

/// Gradient checks for the composite training losses (reconstruction,
/// distance, task, equivalence, CA reconstruction/latent/overflow) through
/// the full model forward passes, against central finite differences.
pub fn loss_gradient_checks(
    worst: &mut Vec<(String, f64)>,
    shapes_per_op: usize,
    _tol: f64,
    h: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10_55);

    // Phase-1 step-1 losses: one check per term so every formula is covered.
    for (name, weights) in [
        ("loss_rec_ae", LossWeights { w_dist: 0.0, w_task: 0.0, ..Default::default() }),
        ("loss_dist", LossWeights { w_rec_ae: 0.0, w_task: 0.0, ..Default::default() }),
        ("loss_task", LossWeights { w_rec_ae: 0.0, w_dist: 0.0, ..Default::default() }),
    ] {
        let mut max = 0.0f64;
        let mut trials = 0usize;
        while trials < shapes_per_op {
            let seed: u64 = rng.random();
            let mut ae = tiny_ae_f64(seed);
            let imgs = toy_images(2, 8, 8, seed ^ 1);
            let batch =
                TripletBatch::build(&imgs, &CorruptionSpec::noise(0.15, seed ^ 2), seed ^ 3)
                    .unwrap();
            // keep the hinge comfortably away from its kink
            if name == "loss_dist" {
                let mut tape = Tape::new();
                let (_, report) =
                    loss_phase1_step1(&mut tape, &mut ae, &batch, &weights, Mode::Train).unwrap();
                let d = report.term("dist").unwrap();
                if d < 1e-3 {
                    continue;
                }
            }
            let mut tape = Tape::new();
            let (loss, _) =
                loss_phase1_step1(&mut tape, &mut ae, &batch, &weights, Mode::Train).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let gflat = param_grads_flat(&ae, &grads);
            let err = fd_check_params(
                &mut ae,
                |m| {
                    let mut tape = Tape::eval();
                    loss_phase1_step1(&mut tape, m, &batch, &weights, Mode::Train)
                        .unwrap()
                        .0
                        .item()
                },
                &gflat,
                12,
                h,
            );
            max = max.max(err);
            trials += 1;
        }
        worst.push((name.to_string(), max));
    }

    // Phase-1 step-2: the equivalence loss with fixed noise.
    let mut max = 0.0f64;
    for _ in 0..shapes_per_op {
        let seed: u64 = rng.random();
        let mut ae = tiny_ae_f64(seed);
        let imgs = toy_images(2, 8, 8, seed ^ 1);
        let batch =
            TripletBatch::build(&imgs, &CorruptionSpec::noise(0.15, seed ^ 2), seed ^ 3).unwrap();
        let weights = LossWeights::default();
        let noise_seed = seed ^ 4;
        let mut tape = Tape::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(noise_seed);
        let (loss, _) =
            loss_phase1_step2(&mut tape, &mut ae, &batch, &weights, &mut rng2, Mode::Train)
                .unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gflat = param_grads_flat(&ae, &grads);
        let err = fd_check_params(
            &mut ae,
            |m| {
                let mut tape = Tape::eval();
                let mut rng2 = ChaCha8Rng::seed_from_u64(noise_seed);
                loss_phase1_step2(&mut tape, m, &batch, &weights, &mut rng2, Mode::Train)
                    .unwrap()
                    .0
                    .item()
            },
            &gflat,
            12,
            h,
        );
        max = max.max(err);
    }
    worst.push(("loss_eq".to_string(), max));

    // Phase-2 losses through a one-step rollout: checks the CA parameters
    // (backpropagation through the transition) and all three loss terms.
    // States are scaled outside the clip ranges so the overflow term is live.
    for kind in ["nafca", "vitca"] {
        let mut max = 0.0f64;
        for t in 0..shapes_per_op {
            let seed: u64 = rng.random();
            let mut ae = tiny_ae_f64(seed);
            let mut nca = if kind == "nafca" {
                tiny_nafca_f64(seed ^ 5)
            } else {
                tiny_vitca_f64(seed ^ 5)
            };
            randomize_params(&mut nca, seed ^ 6, 0.2);
            let imgs = toy_images(2, 8, 8, seed ^ 7);
            // prime batch-norm statistics for the eval-mode decode
            {
                let mut tape = Tape::eval();
                let x = tape.constant(&imgs.to_tensor().unwrap());
                ae.forward_bypass_t(&mut tape, &x, Mode::Train).unwrap();
            }
            let enc = ae.encode(&imgs).unwrap();
            let state = nca.seed_state(&enc.latent).unwrap();
            // push some values outside [0,1] / [-1,1]
            let scaled = state.cells.map(|v| v * 2.4 - 0.7).unwrap();
            let state = lnca_core::nca::CaState { cells: scaled, ..state };
            let weights = LossWeights::default();
            let rollout_seed = seed ^ 8;
            let steps = 1 + (t % 2); // one- and two-step unrolls
            let y_latent = enc.latent.clone();
            let skip = enc.skip.clone();
            let y = imgs.clone();

            let eval_loss = |ae: &mut Autoencoder<f64>, nca: &NcaModel<f64>, record: bool| {
                let mut tape = if record { Tape::new() } else { Tape::eval() };
                let (rolled, _) = nca
                    .rollout_var(&mut tape, &state, steps, Mode::Eval, rollout_seed)
                    .unwrap();
                let (loss, _) = loss_phase2(
                    &mut tape,
                    ae,
                    &rolled,
                    nca.visible_channels,
                    &skip,
                    &y,
                    &y_latent,
                    &weights,
                )
                .unwrap();
                (loss, tape)
            };
            let (loss, mut tape) = eval_loss(&mut ae, &nca, true);
            let grads = tape.backward(&loss).unwrap();
            let gflat = param_grads_flat(&nca, &grads);
            let err = fd_check_params(
                &mut nca,
                |m| eval_loss(&mut ae, m, false).0.item(),
                &gflat,
                12,
                h,
            );
            max = max.max(err);
        }
        worst.push((format!("loss_phase2_{kind}"), max));
    }
}
