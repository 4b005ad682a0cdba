//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test -p lnca-core --test acceptance -- --nocapture`
//! to see the per-criterion summary lines.

mod support;

use std::sync::{Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lnca_core::tensor::gradcheck;
use lnca_core::tensor::{PaddingMode, Tape, Tensor, Var};

/// Criteria run one at a time so latency/byte measurements stay clean.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {}: {} ({})",
        criterion,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "criterion {} failed: {}", criterion, detail);
}

// ── Criterion 1: gradient suite ─────────────────────────────────────
//
// Every differentiable op passes central finite-difference checks in double
// precision, max relative error < 1e-4, across >= 20 randomized shapes.

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SHAPES_PER_OP: usize = 20;
const PROBES_PER_INPUT: usize = 10;

/// Generic finite-difference check: `forward` maps freshly-built input vars
/// to an output tensor, which is reduced to a scalar with an MSE against a
/// fixed random target. Returns the max relative error over probed coords.
fn fd_check_op(
    rng: &mut ChaCha8Rng,
    shapes: &[Vec<usize>],
    forward: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64>,
) -> f64 {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let mut flat: Vec<f64> = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();

    let build_vars = |x: &[f64], tape: &mut Tape<f64>, retain: bool| -> Vec<Var<f64>> {
        let mut vars = Vec::new();
        let mut off = 0;
        for (shape, &size) in shapes.iter().zip(&sizes) {
            let t = Tensor::from_vec(shape, x[off..off + size].to_vec()).unwrap();
            let mut v = tape.constant(&t);
            if retain {
                tape.retain_grad(&mut v);
            }
            vars.push(v);
            off += size;
        }
        vars
    };

    // Discover the output shape, then fix a random target that reduces the
    // op output to a scalar via MSE.
    let out_shape = {
        let mut t = Tape::eval();
        let vars = build_vars(&flat, &mut t, false);
        forward(&mut t, &vars).shape().to_vec()
    };
    let mut target_seed = ChaCha8Rng::seed_from_u64(rng.random());
    let target = Tensor::from_fn(&out_shape, |_| target_seed.random_range(-1.0..1.0)).unwrap();

    // Analytic gradients.
    let analytic_flat = {
        let mut tape = Tape::new();
        let vars = build_vars(&flat, &mut tape, true);
        let out = forward(&mut tape, &vars);
        let tv = tape.constant(&target);
        let loss = tape.mse(&out, &tv).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut g = Vec::with_capacity(total);
        for v in &vars {
            match grads.retained(v) {
                Some(t) => g.extend_from_slice(t.data()),
                None => g.extend(std::iter::repeat(0.0).take(v.value().numel())),
            }
        }
        g
    };

    // Probe a spread of coordinates from every input.
    let mut coords = Vec::new();
    let mut off = 0;
    for &size in &sizes {
        for c in gradcheck::probe_coords(size, PROBES_PER_INPUT) {
            coords.push(off + c);
        }
        off += size;
    }
    let mut f = |x: &[f64]| {
        let mut tape = Tape::eval();
        let vars = build_vars(x, &mut tape, false);
        let out = forward(&mut tape, &vars);
        let tv = tape.constant(&target);
        tape.mse(&out, &tv).unwrap().item()
    };
    gradcheck::max_rel_err_at(&mut f, &mut flat, &analytic_flat, &coords, FD_STEP)
}

fn run_op_suite(name: &str, worst: &mut Vec<(String, f64)>, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut max = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let e = one(&mut rng);
        if e > max {
            max = e;
        }
    }
    worst.push((name.to_string(), max));
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = gate();
    let started = std::time::Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();

    run_op_suite("conv2d", &mut worst, |rng| {
        let b = rng.random_range(1..3usize);
        let h = rng.random_range(3..7usize);
        let w = rng.random_range(3..7usize);
        let ci = rng.random_range(1..4usize);
        let co = rng.random_range(1..4usize);
        let stride = rng.random_range(1..3usize);
        let shapes = vec![vec![b, h, w, ci], vec![3, 3, ci, co], vec![co]];
        fd_check_op(rng, &shapes, |tape, v| {
            tape.conv2d(&v[0], &v[1], Some(&v[2]), stride, PaddingMode::Zero)
                .unwrap()
        })
    });

    run_op_suite("conv_transpose2d", &mut worst, |rng| {
        let b = rng.random_range(1..3usize);
        let h = rng.random_range(2..5usize);
        let w = rng.random_range(2..5usize);
        let ci = rng.random_range(1..4usize);
        let cf = rng.random_range(1..4usize);
        let stride = rng.random_range(1..3usize);
        let shapes = vec![vec![b, h, w, cf], vec![3, 3, ci, cf], vec![ci]];
        fd_check_op(rng, &shapes, |tape, v| {
            tape.conv_transpose2d(&v[0], &v[1], Some(&v[2]), stride).unwrap()
        })
    });

    run_op_suite("layer_norm", &mut worst, |rng| {
        let rows = rng.random_range(1..6usize);
        let c = rng.random_range(2..9usize);
        let shapes = vec![vec![rows, c], vec![c], vec![c]];
        fd_check_op(rng, &shapes, |tape, v| {
            tape.layer_norm(&v[0], &v[1], &v[2], 1e-5).unwrap()
        })
    });

    run_op_suite("batch_norm", &mut worst, |rng| {
        let rows = rng.random_range(3..9usize);
        let c = rng.random_range(1..5usize);
        let shapes = vec![vec![rows, c], vec![c], vec![c]];
        fd_check_op(rng, &shapes, |tape, v| {
            tape.batch_norm_train(&v[0], &v[1], &v[2], 1e-5).unwrap().0
        })
    });

    run_op_suite("swish", &mut worst, |rng| {
        let n = rng.random_range(1..24usize);
        fd_check_op(rng, &[vec![n]], |tape, v| tape.swish(&v[0]).unwrap())
    });

    run_op_suite("gelu", &mut worst, |rng| {
        let n = rng.random_range(1..24usize);
        fd_check_op(rng, &[vec![n]], |tape, v| tape.gelu(&v[0]).unwrap())
    });

    run_op_suite("sigmoid", &mut worst, |rng| {
        let n = rng.random_range(1..24usize);
        fd_check_op(rng, &[vec![n]], |tape, v| tape.sigmoid(&v[0]).unwrap())
    });

    run_op_suite("local_attention", &mut worst, |rng| {
        let b = rng.random_range(1..3usize);
        let h = rng.random_range(2..5usize);
        let w = rng.random_range(2..5usize);
        let heads = [1, 2][rng.random_range(0..2usize)];
        let dh = rng.random_range(1..4usize);
        let c = heads * dh;
        let shapes = vec![vec![b, h, w, c], vec![b, h, w, c], vec![b, h, w, c]];
        fd_check_op(rng, &shapes, |tape, v| {
            tape.local_attention(&v[0], &v[1], &v[2], heads).unwrap()
        })
    });

    run_op_suite("simple_gate", &mut worst, |rng| {
        let rows = rng.random_range(1..6usize);
        let c = 2 * rng.random_range(1..5usize);
        fd_check_op(rng, &[vec![rows, c]], |tape, v| {
            let (a, b) = tape.split_half(&v[0]).unwrap();
            tape.hadamard(&a, &b).unwrap()
        })
    });

    // Gate x * C(x): Hadamard of x with a broadcast single-filter 3x3 conv map.
    run_op_suite("gate_conv_map", &mut worst, |rng| {
        let b = rng.random_range(1..3usize);
        let h = rng.random_range(3..6usize);
        let w = rng.random_range(3..6usize);
        let c = rng.random_range(1..5usize);
        let shapes = vec![vec![b, h, w, c], vec![3, 3, c, 1]];
        fd_check_op(rng, &shapes, |tape, v| {
            let map = tape.conv2d(&v[0], &v[1], None, 1, PaddingMode::Zero).unwrap();
            tape.mul_cell_map(&v[0], &map).unwrap()
        })
    });

    run_op_suite("mse", &mut worst, |rng| {
        let n = rng.random_range(1..24usize);
        let shapes = vec![vec![n], vec![n]];
        fd_check_op(rng, &shapes, |tape, v| tape.mse(&v[0], &v[1]).unwrap())
    });

    run_op_suite("l1_clip_norm", &mut worst, |rng| {
        let n = rng.random_range(1..24usize);
        // inputs in [-1,1]; clip to a narrower band so both sides activate
        fd_check_op(rng, &[vec![n]], |tape, v| {
            let wide = tape.scale(&v[0], 2.0).unwrap();
            tape.l1_clip_norm(&wide, -0.5, 0.5).unwrap()
        })
    });

    support::loss_gradient_checks(&mut worst, SHAPES_PER_OP, GRAD_TOL, FD_STEP);

    let max = worst.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{}={:.2e}", n, e))
        .collect::<Vec<_>>()
        .join(" ");
    let elapsed = started.elapsed();
    report(
        "1-gradient-suite",
        max < GRAD_TOL && elapsed.as_secs() < 300,
        &format!("max_rel_err {:.3e}, {:.1}s | {}", max, elapsed.as_secs_f64(), detail),
    );
}

// ── Criterion 2: locality ───────────────────────────────────────────

#[test]
fn criterion_2_locality() {
    let _g = gate();
    use lnca_core::layers::Mode;
    use lnca_core::nca::NcaModel;

    let mut failures = 0usize;
    let trials = 100;
    for kind in ["vitca", "nafca"] {
        for trial in 0..trials {
            let seed = 0x10c + trial as u64;
            let mut model: NcaModel<f64> = if kind == "vitca" {
                support::tiny_vitca_f64(seed)
            } else {
                support::tiny_nafca_f64(seed)
            };
            support::randomize_params(&mut model, seed ^ 9, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let (h, w) = (6, 7);
            let latent = Tensor::from_fn(&[1, h, w, 3], |_| rng.random_range(0.0..1.0)).unwrap();
            let base = model.seed_state(&latent).unwrap();
            let sc = model.state_channels();
            let cy = rng.random_range(0..h);
            let cx = rng.random_range(0..w);
            let mut data = base.cells.data().to_vec();
            for c in 0..sc {
                data[(cy * w + cx) * sc + c] += rng.random_range(0.1..0.5);
            }
            let pert = Tensor::from_vec(base.cells.shape(), data).unwrap();
            let ones = Tensor::full(&[1, h, w, 1], 1.0f64).unwrap();
            let mut tape = Tape::eval();
            let step = |tape: &mut Tape<f64>, cells: &Tensor<f64>| {
                let v = tape.constant(cells);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                model
                    .step_with_mask(tape, &v, &ones, Mode::Eval, &mut rng)
                    .unwrap()
                    .value()
                    .clone()
            };
            let a = step(&mut tape, &base.cells);
            let b = step(&mut tape, &pert);
            for y in 0..h {
                for x in 0..w {
                    let in_moore =
                        (y as isize - cy as isize).abs() <= 1 && (x as isize - cx as isize).abs() <= 1;
                    if in_moore {
                        continue;
                    }
                    let idx = (y * w + x) * sc;
                    if (0..sc).any(|c| a.data()[idx + c] != b.data()[idx + c]) {
                        failures += 1;
                    }
                }
            }
        }
    }
    report(
        "2-locality",
        failures == 0,
        &format!("{} out-of-neighborhood changes over {} trials x 2 transitions", failures, trials),
    );
}

// ── Criterion 3: loss analytics ─────────────────────────────────────

#[test]
fn criterion_3_loss_analytics() {
    let _g = gate();
    use lnca_core::corrupt::TripletBatch;
    use lnca_core::image::{toy_images, ImageBatch};
    use lnca_core::layers::Mode;
    use lnca_core::losses::{loss_phase1_step1, loss_phase2, LossWeights};

    let w = LossWeights::default();
    let mut ok = true;
    let mut notes = Vec::new();

    // L_DIST == alpha for degenerate equal latents (and L_TASK == 0 under
    // the empty mask that comes with an identical anchor/positive pair).
    let mut ae = support::tiny_ae_f64(1);
    let imgs = toy_images(2, 8, 8, 2);
    let degenerate = TripletBatch {
        anchor: imgs.clone(),
        positive: imgs.clone(),
        negative: imgs.clone(),
        mask: ImageBatch::zeros(2, 8, 8, 3),
    };
    let mut tape = Tape::new();
    let (_, report1) = loss_phase1_step1(&mut tape, &mut ae, &degenerate, &w, Mode::Train).unwrap();
    if report1.term("dist").unwrap() != w.margin_alpha {
        ok = false;
        notes.push(format!("L_DIST {} != alpha {}", report1.term("dist").unwrap(), w.margin_alpha));
    }
    if report1.term("task").unwrap() != 0.0 {
        ok = false;
        notes.push("L_TASK != 0 under empty mask".into());
    }

    // L_DIST == 0 when the margin is satisfied: scalar hinge chain.
    let mut tape = Tape::<f64>::new();
    let close = tape.constant(&Tensor::scalar_tensor(0.05).unwrap());
    let far = tape.constant(&Tensor::scalar_tensor(0.9).unwrap());
    let m = tape.sub(&close, &far).unwrap();
    let m = tape.add_scalar(&m, w.margin_alpha).unwrap();
    let hinge = tape.relu(&m).unwrap();
    if hinge.item() != 0.0 {
        ok = false;
        notes.push("hinge not exactly zero when satisfied".into());
    }

    // L_OVER == 0 for in-range states.
    let mut ae2 = support::tiny_ae_f64(3);
    {
        let mut tape = Tape::eval();
        let x = tape.constant(&imgs.to_tensor().unwrap());
        ae2.forward_bypass_t(&mut tape, &x, Mode::Train).unwrap();
    }
    let enc = ae2.encode(&imgs).unwrap();
    let nca = support::tiny_nafca_f64(4);
    let state = nca.seed_state(&enc.latent).unwrap();
    let mut tape = Tape::new();
    let cells = tape.constant(&state.cells);
    let (_, report2) = loss_phase2(
        &mut tape,
        &mut ae2,
        &cells,
        3,
        &enc.skip,
        &imgs,
        &enc.latent,
        &w,
    )
    .unwrap();
    if report2.term("over").unwrap() != 0.0 {
        ok = false;
        notes.push("L_OVER != 0 for in-range state".into());
    }

    report("3-loss-analytics", ok, &notes.join("; "));
}

// ── Criterion 4: SSIM properties ────────────────────────────────────

#[test]
fn criterion_4_ssim_properties() {
    let _g = gate();
    use lnca_core::image::{toy_images, ImageBatch};
    use lnca_core::metrics::{ssim, SsimConfig};

    let cfg = SsimConfig::default();
    let mut ok = true;
    let mut notes = Vec::new();

    // identity
    let x = toy_images(3, 16, 16, 8);
    let (per, mean) = ssim(&x, &x, &cfg).unwrap();
    if per.iter().any(|v| (v - 1.0).abs() > 1e-9) || (mean - 1.0).abs() > 1e-9 {
        ok = false;
        notes.push("ssim(x,x) != 1".into());
    }

    // symmetry and range over random pairs
    let mut worst_sym = 0.0f64;
    for seed in 0..20u64 {
        let a = toy_images(1, 16, 16, 100 + seed);
        let b = toy_images(1, 16, 16, 200 + seed);
        let (_, ab) = ssim(&a, &b, &cfg).unwrap();
        let (_, ba) = ssim(&b, &a, &cfg).unwrap();
        worst_sym = worst_sym.max((ab - ba).abs());
        if !(-1.0..=1.0).contains(&ab) {
            ok = false;
            notes.push(format!("ssim out of range: {}", ab));
        }
    }
    if worst_sym > 1e-9 {
        ok = false;
        notes.push(format!("symmetry violated by {}", worst_sym));
    }

    // constant-image closed form
    let mut worst_const = 0.0f64;
    for (a, b) in [(0.2f32, 0.8f32), (0.4, 0.6), (0.5, 0.5), (0.05, 0.95)] {
        let xa = ImageBatch::new(1, 12, 12, 1, vec![a; 144]).unwrap();
        let xb = ImageBatch::new(1, 12, 12, 1, vec![b; 144]).unwrap();
        let (_, got) = ssim(&xa, &xb, &cfg).unwrap();
        let (af, bf) = (a as f64, b as f64);
        let want = (2.0 * af * bf + cfg.c1()) / (af * af + bf * bf + cfg.c1());
        worst_const = worst_const.max((got - want).abs());
    }
    if worst_const > 1e-9 {
        ok = false;
        notes.push(format!("constant closed form off by {}", worst_const));
    }

    report(
        "4-ssim-properties",
        ok,
        &format!("sym {:.1e}, const {:.1e} {}", worst_sym, worst_const, notes.join("; ")),
    );
}

// ── Criterion 5: toy end-to-end restoration ─────────────────────────

#[test]
fn criterion_5_toy_end_to_end() {
    let _g = gate();
    use lnca_core::ae::{AeConfig, Autoencoder};
    use lnca_core::corrupt::{corrupt, CorruptionSpec};
    use lnca_core::dataset::Dataset;
    use lnca_core::losses::LossWeights;
    use lnca_core::metrics::ssim;
    use lnca_core::nca::{NcaModel, ReplayPool, TransitionConfig, TransitionKind};
    use lnca_core::train::{fitting_ssim_config, restore, train_ae, train_nca, TrainConfig};

    let started = std::time::Instant::now();
    let dataset = Dataset::toy(16, 32, 32, 0x70f).unwrap();
    let ae_cfg = AeConfig {
        height: 32,
        width: 32,
        channels: 3,
        downsample_stages: 2,
        base_filters: 16,
        latent_channels: 16,
        skip_channels: 16,
    };
    let train_cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        eval_severity: 0.1,
        min_severity: 0.1,
        max_severity: 0.1,
        seed: 42,
        pool_capacity: 64,
        ..Default::default()
    };
    let weights = LossWeights::default();

    let mut ae: Autoencoder<f32> = Autoencoder::new(ae_cfg, train_cfg.seed).unwrap();
    train_ae(&mut ae, &dataset, &train_cfg, &weights).unwrap();

    let transition = TransitionConfig { kind: TransitionKind::Nafca, ..Default::default() };
    let mut nca: NcaModel<f32> =
        NcaModel::new(ae_cfg.latent_channels, transition, train_cfg.seed ^ 0x9ca).unwrap();
    let mut pool = ReplayPool::new(train_cfg.pool_capacity);
    train_nca(&mut ae, &mut nca, &dataset, &train_cfg, &weights, &mut pool).unwrap();

    // restore the training split at the evaluation protocol
    let clean = dataset.images.select(&dataset.train);
    let corrupted = corrupt(
        &clean,
        &CorruptionSpec::noise(0.1, lnca_core::dataset::sample_seed(train_cfg.seed, 0x5e)),
    )
    .unwrap();
    let restored = restore(&mut ae, &nca, &corrupted, 0xd0e).unwrap();
    let cfg = fitting_ssim_config(&clean);
    let (_, restored_ssim) = ssim(&restored, &clean, &cfg).unwrap();
    let (_, corrupted_ssim) = ssim(&corrupted, &clean, &cfg).unwrap();

    let elapsed = started.elapsed().as_secs_f64();
    let pass = restored_ssim >= 0.75
        && restored_ssim >= corrupted_ssim + 0.05
        && elapsed < 1800.0;
    report(
        "5-toy-end-to-end",
        pass,
        &format!(
            "ssim restored {:.4} vs corrupted {:.4} (margin {:.4}), {:.0}s",
            restored_ssim,
            corrupted_ssim,
            restored_ssim - corrupted_ssim,
            elapsed
        ),
    );
}

// ── Criterion 6: training-memory ratios over the grid ───────────────

#[test]
fn criterion_6_training_memory_ratios() {
    let _g = gate();
    use lnca_core::bench::{bench_training_step, ModelKind, DEFAULT_BYTE_BUDGET, GRID_BATCHES, GRID_RESOLUTIONS};

    let budget = Some(DEFAULT_BYTE_BUDGET);
    let mut ok = true;
    let mut notes = Vec::new();

    // headline ratio at 32x32, batch 8, t=16
    let peak = |kind: ModelKind| -> Option<usize> {
        bench_training_step(kind, 32, 32, 8, 16, 1, budget, 0x6e)
            .unwrap()
            .peak_state_bytes
    };
    let input_peak = peak(ModelKind::VitcaInputSpace);
    let Some(input_peak) = input_peak else {
        report("6-memory-ratios", false, "input-space ViTCA exceeded the budget at 32x32 b8");
        return;
    };
    for kind in [ModelKind::LatentVitca, ModelKind::LatentNafca] {
        match peak(kind) {
            Some(p) => {
                let ratio = p as f64 / input_peak as f64;
                notes.push(format!("{}/input ratio {:.3}", kind, ratio));
                if ratio > 0.25 {
                    ok = false;
                }
            }
            None => {
                ok = false;
                notes.push(format!("{} exceeded budget", kind));
            }
        }
    }

    // qualitative ordering over every grid cell that fits, plus resolution
    // monotonicity per model
    let mut peaks = std::collections::HashMap::new();
    for kind in ModelKind::ALL {
        for &res in &GRID_RESOLUTIONS {
            for &batch in &GRID_BATCHES {
                let rec = bench_training_step(kind, res, res, batch, 16, 1, budget, 0x6e).unwrap();
                peaks.insert((kind, res, batch), rec.peak_state_bytes);
            }
        }
    }
    let mut compared = 0;
    for &res in &GRID_RESOLUTIONS {
        for &batch in &GRID_BATCHES {
            if let Some(input) = peaks[&(ModelKind::VitcaInputSpace, res, batch)] {
                for kind in [ModelKind::LatentVitca, ModelKind::LatentNafca] {
                    if let Some(latent) = peaks[&(kind, res, batch)] {
                        compared += 1;
                        if latent >= input {
                            ok = false;
                            notes.push(format!("{kind} {res} b{batch}: {latent} >= {input}"));
                        }
                    }
                }
            }
        }
    }
    notes.push(format!("{compared} grid comparisons"));
    for kind in ModelKind::ALL {
        for &batch in &GRID_BATCHES {
            let mut prev: Option<usize> = None;
            for &res in &GRID_RESOLUTIONS {
                if let Some(p) = peaks[&(kind, res, batch)] {
                    if let Some(q) = prev {
                        if p <= q {
                            ok = false;
                            notes.push(format!("{kind} b{batch}: peak not increasing at {res}"));
                        }
                    }
                    prev = Some(p);
                }
            }
        }
    }

    report("6-memory-ratios", ok, &notes.join("; "));
}

// ── Criterion 7: inference latency ordering ─────────────────────────

#[test]
fn criterion_7_inference_latency_ordering() {
    let _g = gate();
    use lnca_core::bench::{bench_inference, ModelKind};

    let latency = |kind: ModelKind| -> f64 {
        bench_inference(kind, 128, 128, 8, 64, 1, None, 0x71)
            .unwrap()
            .0
            .mean_latency_s
            .unwrap()
    };
    let nafca = latency(ModelKind::LatentNafca);
    let vitca = latency(ModelKind::LatentVitca);
    let input = latency(ModelKind::VitcaInputSpace);
    report(
        "7-inference-latency-ordering",
        nafca < vitca && vitca < input,
        &format!("latent-nafca {:.2}s < latent-vitca {:.2}s < input-space {:.2}s", nafca, vitca, input),
    );
}

// ── Criterion 8: frozen-phase parameter checksums ───────────────────

#[test]
fn criterion_8_frozen_phase_checksums() {
    let _g = gate();
    use lnca_core::ae::{AeConfig, Autoencoder};
    use lnca_core::dataset::Dataset;
    use lnca_core::layers::module_checksum;
    use lnca_core::losses::LossWeights;
    use lnca_core::nca::{NcaModel, ReplayPool, TransitionConfig, TransitionKind};
    use lnca_core::train::{train_ae, train_nca, TrainConfig};

    let dataset = Dataset::toy(10, 16, 16, 0x8a).unwrap();
    let ae_cfg = AeConfig {
        height: 16,
        width: 16,
        channels: 3,
        downsample_stages: 2,
        base_filters: 8,
        latent_channels: 8,
        skip_channels: 8,
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 5,
        pool_capacity: 16,
        ..Default::default()
    };
    let weights = LossWeights::default();
    let mut ae: Autoencoder<f32> = Autoencoder::new(ae_cfg, 1).unwrap();
    let mut nca: NcaModel<f32> = NcaModel::new(
        8,
        TransitionConfig { kind: TransitionKind::Nafca, ..Default::default() },
        2,
    )
    .unwrap();

    let nca_before = module_checksum(&nca);
    train_ae(&mut ae, &dataset, &cfg, &weights).unwrap();
    let nca_unchanged = module_checksum(&nca) == nca_before;

    let ae_before = module_checksum(&ae);
    let mut pool = ReplayPool::new(cfg.pool_capacity);
    train_nca(&mut ae, &mut nca, &dataset, &cfg, &weights, &mut pool).unwrap();
    let ae_unchanged = module_checksum(&ae) == ae_before;
    let nca_moved = module_checksum(&nca) != nca_before;

    report(
        "8-frozen-phase-checksums",
        nca_unchanged && ae_unchanged && nca_moved,
        &format!(
            "phase1 kept CA frozen: {}; phase2 kept AE frozen: {}; CA trained: {}",
            nca_unchanged, ae_unchanged, nca_moved
        ),
    );
}

// ── Criterion 9: pool invariants ────────────────────────────────────

#[test]
fn criterion_9_pool_invariants() {
    let _g = gate();
    use lnca_core::nca::{CaState, PoolEntry, ReplayPool, TargetId};

    let mut pool = ReplayPool::<f32>::new(64);
    let mut rng = ChaCha8Rng::seed_from_u64(0x90);
    let tag_state = |t: usize| CaState {
        cells: Tensor::full(&[1, 1, 1, 2], t as f32).unwrap(),
        visible_channels: 1,
        step: 0,
    };
    let mut max_len = 0usize;
    let mut mismatches = 0usize;
    for phase in 0..10_000usize {
        if phase % 2 == 0 {
            let entries: Vec<PoolEntry<f32>> = (0..4)
                .map(|i| {
                    let t = phase * 8 + i;
                    PoolEntry {
                        state: tag_state(t),
                        target: TargetId(t),
                        skip: Tensor::zeros(&[1]).unwrap(),
                    }
                })
                .collect();
            pool.store_fresh(entries, &mut rng);
        } else {
            let slots = pool.sample(4, &mut rng).unwrap();
            for s in slots {
                let e = pool.entry(s).clone();
                if e.state.cells.data()[0] as usize != e.target.0 {
                    mismatches += 1;
                }
                pool.store_back(s, e);
            }
        }
        max_len = max_len.max(pool.len());
    }
    report(
        "9-pool-invariants",
        max_len <= 64 && mismatches == 0,
        &format!("max size {} (cap 64), {} association mismatches over 1e4 phases", max_len, mismatches),
    );
}
