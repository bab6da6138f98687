// SPDX-License-Identifier: Apache-2.0

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use edge_core::features::{effective_pad_distance, harmonic_distance, Features, Task};
use edge_core::golden::{
    build_ir_system, cg_jacobi, dense_cholesky_solve, ir_drop_map, solve, solve_transient_thermal, temperature_map,
    SolverOptions,
};
use edge_core::gridio::{ChipSpec, CropRecord, GridKind, GridMap, GridSequence};
use edge_core::models::{window_mse, ModelBundle, Prediction};
use edge_core::nn::{
    concat_channels, maxpool2, maxpool2_backward, mse_loss, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvLstmCell, ConvTranspose2d, LstmState, Tensor,
};
use edge_core::pipeline::{
    evaluate, label_manifest, load_samples, measure_runtime, split, train, Corner, ErrorReport, Sample, SplitSpec,
    TrainConfig, TrainLog,
};
use edge_core::rng::Pcg32;
use edge_core::synth::{gen_dataset, Manifest, PadLayout, SynthConfig};

const IR_EPOCHS: usize = 100;
const THERMAL_EPOCHS: usize = 100;
const TRANSIENT_EPOCHS: usize = 50;
const SEED: u64 = 7;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

// ---------------------------------------------------------------------------
// Gradient checks

const H: f64 = 1e-4;
const TRIALS: usize = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error of `analytic` against central differences of `f` at `point`.
fn worst(analytic: &[f64], point: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(analytic.len(), point.len());
    let mut p = point.to_vec();
    let mut out: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + H;
        let up = f(&p);
        p[i] = orig - H;
        let down = f(&p);
        p[i] = orig;
        out = out.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    out
}

fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut Pcg32) -> Tensor<f64> {
    Tensor::from_fn(n, c, h, w, |_| rng.uniform(-1.0, 1.0))
}

fn with_data(like: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    let (n, c, h, w) = like.shape();
    Tensor::from_vec(n, c, h, w, data.to_vec()).unwrap()
}

/// Values at least 0.01 apart, so no central-difference probe crosses a max-pool tie.
fn separated(n: usize, c: usize, h: usize, w: usize, rng: &mut Pcg32) -> Tensor<f64> {
    let mut ranks: Vec<usize> = (0..n * c * h * w).collect();
    rng.shuffle(&mut ranks);
    let mut it = ranks.into_iter();
    Tensor::from_fn(n, c, h, w, |_| it.next().unwrap() as f64 * 0.01 - 0.5)
}

/// Values at least 0.01 away from the ReLU kink.
fn off_kink(n: usize, c: usize, h: usize, w: usize, rng: &mut Pcg32) -> Tensor<f64> {
    Tensor::from_fn(n, c, h, w, |_| {
        let v = rng.uniform(0.01, 1.0);
        if rng.below(2) == 0 {
            v
        } else {
            -v
        }
    })
}

fn shape(rng: &mut Pcg32) -> (usize, usize, usize, usize) {
    (
        rng.range_inclusive(1, 2),
        rng.range_inclusive(1, 3),
        rng.range_inclusive(2, 6),
        rng.range_inclusive(2, 6),
    )
}

fn check_conv(rng: &mut Pcg32) -> f64 {
    let (n, c_in, h, w) = shape(rng);
    let c_out = rng.range_inclusive(1, 3);
    let k = [1, 3, 5][rng.below(3) as usize];
    let mut layer = Conv2d::<f64>::new(c_in, c_out, k, rng);
    layer.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let x = random(n, c_in, h, w, rng);
    let r = random(n, c_out, h, w, rng);
    let dx = layer.backward(&x, &r, true).unwrap().unwrap();
    let base = layer.clone();
    let e_x = worst(dx.data(), x.data(), |v| base.forward(&with_data(&x, v)).unwrap().dot(&r));
    let e_w = worst(&layer.weight.grad, &layer.weight.value, |v| {
        let mut l = base.clone();
        l.weight.value = v.to_vec();
        l.forward(&x).unwrap().dot(&r)
    });
    let e_b = worst(&layer.bias.grad, &layer.bias.value, |v| {
        let mut l = base.clone();
        l.bias.value = v.to_vec();
        l.forward(&x).unwrap().dot(&r)
    });
    e_x.max(e_w).max(e_b)
}

fn check_conv_transpose(rng: &mut Pcg32) -> f64 {
    let (n, c_in, h, w) = shape(rng);
    let c_out = rng.range_inclusive(1, 3);
    let k = [1, 3, 5][rng.below(3) as usize];
    let mut layer = ConvTranspose2d::<f64>::new(c_in, c_out, k, rng);
    layer.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let x = random(n, c_in, h, w, rng);
    let r = random(n, c_out, h, w, rng);
    let dx = layer.backward(&x, &r, true).unwrap().unwrap();
    let base = layer.clone();
    let e_x = worst(dx.data(), x.data(), |v| base.forward(&with_data(&x, v)).unwrap().dot(&r));
    let e_w = worst(&layer.weight.grad, &layer.weight.value, |v| {
        let mut l = base.clone();
        l.weight.value = v.to_vec();
        l.forward(&x).unwrap().dot(&r)
    });
    let e_b = worst(&layer.bias.grad, &layer.bias.value, |v| {
        let mut l = base.clone();
        l.bias.value = v.to_vec();
        l.forward(&x).unwrap().dot(&r)
    });
    e_x.max(e_w).max(e_b)
}

fn check_maxpool(rng: &mut Pcg32) -> f64 {
    let (n, c, h, w) = shape(rng);
    let x = separated(n, c, 2 * h, 2 * w, rng);
    let (y, rec) = maxpool2(&x).unwrap();
    let r = random(n, c, h, w, rng);
    let _ = y;
    let dx = maxpool2_backward(&rec, &r).unwrap();
    worst(dx.data(), x.data(), |v| maxpool2(&with_data(&x, v)).unwrap().0.dot(&r))
}

fn check_upsample(rng: &mut Pcg32) -> f64 {
    let (n, c, h, w) = shape(rng);
    let x = random(n, c, h, w, rng);
    let r = random(n, c, 2 * h, 2 * w, rng);
    let dx = upsample2_backward(&r).unwrap();
    worst(dx.data(), x.data(), |v| upsample2(&with_data(&x, v)).dot(&r))
}

fn check_relu(rng: &mut Pcg32) -> f64 {
    let (n, c, h, w) = shape(rng);
    let x = off_kink(n, c, h, w, rng);
    let r = random(n, c, h, w, rng);
    let dx = relu_backward(&x, &r);
    worst(dx.data(), x.data(), |v| relu(&with_data(&x, v)).dot(&r))
}

fn check_concat(rng: &mut Pcg32) -> f64 {
    let (n, ca, h, w) = shape(rng);
    let cb = rng.range_inclusive(1, 3);
    let a = random(n, ca, h, w, rng);
    let b = random(n, cb, h, w, rng);
    let r = random(n, ca + cb, h, w, rng);
    let (da, db) = split_channels(&r, ca).unwrap();
    let e_a = worst(da.data(), a.data(), |v| concat_channels(&with_data(&a, v), &b).unwrap().dot(&r));
    let e_b = worst(db.data(), b.data(), |v| concat_channels(&a, &with_data(&b, v)).unwrap().dot(&r));
    e_a.max(e_b)
}

fn check_mse(rng: &mut Pcg32) -> f64 {
    let (n, _, h, w) = shape(rng);
    let p = random(n, 1, h, w, rng);
    let t = random(n, 1, h, w, rng);
    let (_, g) = mse_loss(&p, &t).unwrap();
    let e = worst(g.data(), p.data(), |v| mse_loss(&with_data(&p, v), &t).unwrap().0);
    let rec = CropRecord::for_dims(h, w, 4);
    let (ph, pw) = rec.padded_dims(h, w);
    let p = random(n, 1, ph, pw, rng);
    let t = random(n, 1, ph, pw, rng);
    let (_, g) = window_mse(&p, &t, &rec).unwrap();
    e.max(worst(g.data(), p.data(), |v| window_mse(&with_data(&p, v), &t, &rec).unwrap().0))
}

const STEPS: usize = 3;

fn lstm_loss(cell: &ConvLstmCell<f64>, xs: &[Tensor<f64>], rh: &[Tensor<f64>], rc: &Tensor<f64>) -> f64 {
    let (n, _, h, w) = xs[0].shape();
    let mut state = LstmState::zeros(n, cell.c_hid, h, w);
    let mut total = 0.0;
    for (x, r) in xs.iter().zip(rh) {
        state = cell.step(x, &state).unwrap().0;
        total += state.h.dot(r);
    }
    total + state.c.dot(rc)
}

fn check_convlstm(rng: &mut Pcg32) -> f64 {
    let (n, c_in, h, w) = shape(rng);
    let c_hid = rng.range_inclusive(1, 3);
    let k = [1, 3][rng.below(2) as usize];
    let mut cell = ConvLstmCell::<f64>::new(c_in, c_hid, k, rng);
    cell.gates.bias.value.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let xs: Vec<_> = (0..STEPS).map(|_| random(n, c_in, h, w, rng)).collect();
    let rh: Vec<_> = (0..STEPS).map(|_| random(n, c_hid, h, w, rng)).collect();
    let rc = random(n, c_hid, h, w, rng);
    let base = cell.clone();

    let mut state = LstmState::zeros(n, c_hid, h, w);
    let mut caches = Vec::new();
    for x in &xs {
        let (next, cache) = cell.step(x, &state).unwrap();
        caches.push(cache);
        state = next;
    }
    let mut dh_next = Tensor::zeros(n, c_hid, h, w);
    let mut dc = rc.clone();
    let mut dxs = vec![Tensor::zeros(n, c_in, h, w); STEPS];
    for t in (0..STEPS).rev() {
        let mut dh = rh[t].clone();
        dh.add_assign(&dh_next);
        let (dx, dh_prev, dc_prev) = cell.backward_step(&caches[t], &dh, &dc).unwrap();
        dxs[t] = dx;
        dh_next = dh_prev;
        dc = dc_prev;
    }
    let e_w = worst(&cell.gates.weight.grad, &cell.gates.weight.value, |v| {
        let mut c = base.clone();
        c.gates.weight.value = v.to_vec();
        lstm_loss(&c, &xs, &rh, &rc)
    });
    let e_b = worst(&cell.gates.bias.grad, &cell.gates.bias.value, |v| {
        let mut c = base.clone();
        c.gates.bias.value = v.to_vec();
        lstm_loss(&c, &xs, &rh, &rc)
    });
    let per = xs[0].len();
    let flat_dx: Vec<f64> = dxs.iter().flat_map(|t| t.data().to_vec()).collect();
    let flat_x: Vec<f64> = xs.iter().flat_map(|t| t.data().to_vec()).collect();
    let e_x = worst(&flat_dx, &flat_x, |v| {
        let xs: Vec<_> = v.chunks(per).map(|c| with_data(&xs[0], c)).collect();
        lstm_loss(&base, &xs, &rh, &rc)
    });
    e_w.max(e_b).max(e_x)
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = Pcg32::stream(SEED, 0, "acceptance-gradients");
    let checks: [(&str, fn(&mut Pcg32) -> f64, f64); 8] = [
        ("conv", check_conv, 1e-4),
        ("conv_transpose", check_conv_transpose, 1e-4),
        ("maxpool", check_maxpool, 1e-4),
        ("upsample", check_upsample, 1e-4),
        ("relu", check_relu, 1e-4),
        ("concat", check_concat, 1e-4),
        ("mse", check_mse, 1e-4),
        ("convlstm_bptt", check_convlstm, 1e-3),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, check, tol) in checks {
        let e = (0..TRIALS).map(|_| check(&mut rng)).fold(0.0, f64::max);
        pass &= e < tol;
        parts.push(format!("{name} {e:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(
        "gradients",
        pass,
        format!("{TRIALS} random tensors per layer, worst rel err: {}; {secs:.1} s", parts.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// Golden solvers

fn random_die(rng: &mut Pcg32) -> (GridMap, GridMap, PadLayout) {
    loop {
        let (r, c) = (rng.range_inclusive(2, 16), rng.range_inclusive(2, 16));
        let pitch = rng.range_inclusive(2, 5);
        let (or, oc) = (rng.range_inclusive(0, pitch - 1), rng.range_inclusive(0, pitch - 1));
        let Ok(pads) = PadLayout::new(pitch, or, oc, r, c) else { continue };
        let power = GridMap::new(r, c, 250.0, GridKind::Power, (0..r * c).map(|_| rng.uniform(0.0, 0.02)).collect()).unwrap();
        let density = GridMap::new(r, c, 250.0, GridKind::PdnDensity, (0..r * c).map(|_| rng.uniform(0.1, 1.0)).collect()).unwrap();
        return (power, density, pads);
    }
}

fn inf_rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

fn solver_oracle() -> Outcome {
    let mut rng = Pcg32::stream(SEED, 0, "acceptance-dies");
    let tight = SolverOptions {
        tol: 1e-13,
        ..SolverOptions::default()
    };
    let (mut worst_cg, mut worst_lin) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (power, density, pads) = random_die(&mut rng);
        let chip = ChipSpec::default().with_dims(power.rows(), power.cols());
        let sys = build_ir_system(&power, &density, &pads, &chip).unwrap();
        let dense = dense_cholesky_solve(&sys.g, &sys.j).unwrap();
        let mut x = vec![0.0; sys.n()];
        cg_jacobi(&sys.g, &sys.j, &mut x, 1e-13, 20 * sys.n().max(1)).unwrap();
        worst_cg = worst_cg.max(inf_rel(&x, &dense));

        let (a, b) = (rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0));
        let j2: Vec<f64> = (0..sys.n()).map(|_| rng.uniform(0.0, 0.03)).collect();
        let mut s2 = sys.clone();
        s2.j = j2.clone();
        let mut s3 = sys.clone();
        s3.j = sys.j.iter().zip(&j2).map(|(u, v)| a * u + b * v).collect();
        let (x1, x2, x3) = (solve(&sys, &tight).unwrap(), solve(&s2, &tight).unwrap(), solve(&s3, &tight).unwrap());
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
        worst_lin = worst_lin.max(inf_rel(&x3, &combo));
    }
    outcome(
        "solver-oracle",
        worst_cg <= 1e-8 && worst_lin <= 1e-9,
        format!("100 random dies <= 16x16: CG vs dense {worst_cg:.1e} (<= 1e-8), superposition {worst_lin:.1e} (<= 1e-9)"),
    )
}

fn hand_physics() -> Outcome {
    let opts = SolverOptions::default();
    // Chain: pad at tile 0, 1 S branches, 1 mA drawn at tile 2.
    let chip = ChipSpec {
        unit_sheet_conductance_s: 1.0,
        ..ChipSpec::default().with_dims(1, 3)
    };
    let power = GridMap::new(1, 3, 250.0, GridKind::Power, vec![0.0, 0.0, 1e-3 * chip.vdd_volts]).unwrap();
    let density = GridMap::filled(1, 3, 250.0, GridKind::PdnDensity, 1.0).unwrap();
    let pads = PadLayout::new(3, 0, 0, 1, 3).unwrap();
    let drop = ir_drop_map(&power, &density, &pads, &chip, &opts).unwrap();
    let chain_err = drop
        .values()
        .iter()
        .zip([0.0, 1e-3, 2e-3])
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);

    let single = ChipSpec::default().with_dims(1, 1);
    let p = 0.3;
    let t = temperature_map(&GridMap::new(1, 1, 250.0, GridKind::Power, vec![p]).unwrap(), &single, &opts).unwrap();
    let expect = single.ambient_c + p / single.ambient_thermal_conductance_w_per_c;
    let node_err = (t.values()[0] - expect).abs() / expect;

    let chip = ChipSpec::default().with_dims(6, 5);
    let mut rng = Pcg32::stream(SEED, 0, "acceptance-settle");
    let map = GridMap::new(6, 5, 250.0, GridKind::Power, (0..30).map(|_| rng.uniform(0.0, 0.02)).collect()).unwrap();
    let tau = chip.thermal_capacitance_j_per_c / chip.ambient_thermal_conductance_w_per_c;
    let dt = 15.0;
    let frames = (5.0 * tau / dt).ceil() as usize;
    let seq = GridSequence::new(vec![map.clone(); frames], dt).unwrap();
    let tr = solve_transient_thermal(&seq, &chip, &opts).unwrap();
    let steady = temperature_map(&map, &chip, &opts).unwrap();
    let last = tr.frames().last().unwrap();
    let settle = last
        .values()
        .iter()
        .zip(steady.values())
        .map(|(a, s)| (s - a).abs() / (s - chip.ambient_c))
        .fold(0.0, f64::max);

    outcome(
        "hand-physics",
        chain_err <= 1e-12 && node_err <= 1e-12 && settle <= 0.01,
        format!(
            "1x3 chain |err| {chain_err:.1e} V; single node rel {node_err:.1e}; transient at t = {:.0} s within {:.3} % of static rise",
            frames as f64 * dt,
            100.0 * settle
        ),
    )
}

fn pad_distance() -> Outcome {
    let px = 250.0;
    let single = PadLayout::new(7, 2, 3, 6, 5).unwrap();
    let d = effective_pad_distance(&single, 6, 5, px).unwrap();
    let &(pr, pc) = &single.pads()[0];
    let mut e_single: f64 = 0.0;
    for r in 0..6 {
        for c in 0..5 {
            let dist = (px * ((r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2)).sqrt()).max(px / 2.0);
            e_single = e_single.max((d.get(r, c) - dist).abs() / dist);
        }
    }
    let e_equi = (1..=8)
        .map(|n| (harmonic_distance(&vec![3.7; n]) - 3.7 / n as f64).abs())
        .fold(0.0, f64::max);
    let e_pair = (harmonic_distance(&[1.0, 3.0]) - 0.75).abs();
    outcome(
        "pad-distance",
        single.pads().len() == 1 && e_single <= 1e-12 && e_equi <= 1e-12 && e_pair <= 1e-12,
        format!("single pad {e_single:.1e}, N equidistant {e_equi:.1e}, (1, 3) -> 0.75 {e_pair:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// Learning experiments

fn labeled(dir: &Path, cfg: &SynthConfig, counts: (usize, usize, usize), task: Task) -> Manifest {
    let m = gen_dataset(cfg, counts.0, counts.1, counts.2, dir).unwrap();
    label_manifest(&m, task, &cfg.chip, &SolverOptions::default(), 1).unwrap();
    m
}

fn label_extreme(samples: &[Sample], f: fn(&GridMap) -> f64) -> f64 {
    samples
        .iter()
        .flat_map(|s| s.label.frames().iter().map(f))
        .fold(f64::NEG_INFINITY, f64::max)
}

struct Experiment {
    model: ModelBundle,
    log: TrainLog,
    test: Vec<Sample>,
    report: ErrorReport,
    /// Dataset maximum of the reference quantity, in display units.
    reference: f64,
    minutes: f64,
}

impl Experiment {
    /// Training losses and every test metric, timing excluded.
    fn fingerprint(&self) -> Vec<u64> {
        let mut v: Vec<u64> = Vec::new();
        for r in &self.log.epochs {
            v.extend([r.train_loss.to_bits(), r.val_loss.to_bits(), r.lr.to_bits()]);
        }
        for c in &self.report.cases {
            v.extend([c.avg_err.to_bits(), c.max_err.to_bits()]);
            v.extend(c.frame_avg.iter().chain(&c.frame_max).map(|x| x.to_bits()));
        }
        v.push(self.log.best_epoch as u64);
        v
    }
}

fn experiment(task: Task, cfg: SynthConfig, counts: (usize, usize, usize), epochs: usize) -> Experiment {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let m = labeled(dir.path(), &cfg, counts, task);
    let s = split(&m, &SplitSpec { seed: cfg.seed, ..SplitSpec::default() }).unwrap();
    let (tr, va, te) = (
        load_samples(&s.train, task).unwrap(),
        load_samples(&s.val, task).unwrap(),
        load_samples(&s.test, task).unwrap(),
    );
    let tc = TrainConfig {
        epochs,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let (model, log) = train(task, &tr, &va, &tc).unwrap();
    let corner = Corner::for_task(task, &cfg.chip);
    let report = evaluate(&model, &te, corner, 50, 1).unwrap();
    let all: Vec<Sample> = tr.into_iter().chain(va).chain(te.iter().cloned()).collect();
    let reference = match task {
        Task::IrStatic => label_extreme(&all, GridMap::max) * corner.scale,
        _ => label_extreme(&all, GridMap::max) - cfg.chip.ambient_c,
    };
    Experiment {
        model,
        log,
        test: te,
        report,
        reference,
        minutes: started.elapsed().as_secs_f64() / 60.0,
    }
}

fn ir_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

fn run_ir() -> Experiment {
    experiment(Task::IrStatic, ir_synth(SEED), (50, 2, 2), IR_EPOCHS)
}

fn run_thermal() -> Experiment {
    experiment(Task::ThermalStatic, ir_synth(SEED + 1), (200, 1, 1), THERMAL_EPOCHS)
}

fn transient_synth() -> SynthConfig {
    SynthConfig {
        seed: SEED + 2,
        chip: ChipSpec::default().with_dims(8, 8),
        pad_pitch: (2, 4),
        sigma_tiles: (0.5, 2.0),
        frames: 20,
        emit_sequences: true,
        ..SynthConfig::default()
    }
}

fn run_transient() -> Experiment {
    experiment(Task::ThermalTransient, transient_synth(), (40, 1, 1), TRANSIENT_EPOCHS)
}

/// 20 fresh 68x32 dies with the same per-area power statistics as 34x32.
fn run_large(model: &ModelBundle) -> (ErrorReport, bool) {
    let base = SynthConfig::default();
    let cfg = SynthConfig {
        seed: SEED + 100,
        chip: base.chip.clone().with_dims(68, 32),
        budget_w: 2.0 * base.budget_w,
        hotspots: (2 * base.hotspots.0, 2 * base.hotspots.1),
        ..base
    };
    let dir = tempfile::tempdir().unwrap();
    let m = labeled(dir.path(), &cfg, (20, 1, 1), Task::IrStatic);
    let samples = load_samples(&m, Task::IrStatic).unwrap();
    let shapes_ok = samples.iter().all(|s| match model.infer(&s.features) {
        Ok(Prediction::Static(p)) => p.dims() == (68, 32) && p.values().iter().all(|v| v.is_finite()),
        _ => false,
    });
    let report = evaluate(model, &samples, Corner::for_task(Task::IrStatic, &cfg.chip), 50, 1).unwrap();
    (report, shapes_ok)
}

fn ir_outcome(e: &Experiment) -> Outcome {
    let avg = 100.0 * e.report.avg_err() / e.reference;
    let max = 100.0 * e.report.max_err() / e.reference;
    outcome(
        "ir-learning",
        avg <= 2.0 && max <= 10.0,
        format!(
            "{} test cases, {IR_EPOCHS} epochs (best {}): avg {:.3} mV = {avg:.3} % (<= 2 %), max {:.3} mV = {max:.3} % (<= 10 %) of max golden drop {:.3} mV; {:.1} min",
            e.report.cases.len(),
            e.log.best_epoch,
            e.report.avg_err(),
            e.report.max_err(),
            e.reference,
            e.minutes
        ),
    )
}

fn thermal_outcome(e: &Experiment) -> Outcome {
    let avg = 100.0 * e.report.avg_err() / e.reference;
    outcome(
        "thermal-learning",
        avg <= 2.0,
        format!(
            "{} test cases, {THERMAL_EPOCHS} epochs (best {}): avg {:.4} C = {avg:.3} % (<= 2 %) of max rise {:.3} C; max {:.3} C; {:.1} min",
            e.report.cases.len(),
            e.log.best_epoch,
            e.report.avg_err(),
            e.reference,
            e.report.max_err(),
            e.minutes
        ),
    )
}

fn size_outcome(ir: &Experiment, large: &ErrorReport, shapes_ok: bool) -> Outcome {
    let ratio = large.avg_err() / ir.report.avg_err();
    outcome(
        "size-independence",
        shapes_ok && ratio <= 2.0,
        format!(
            "20 fresh 68x32 dies: outputs finite and 68x32 = {shapes_ok}; avg {:.3} mV vs 34x32 test avg {:.3} mV, ratio {ratio:.3} (<= 2)",
            large.avg_err(),
            ir.report.avg_err()
        ),
    )
}

fn transient_outcome(e: &Experiment) -> Outcome {
    let worst_frame = e
        .report
        .cases
        .iter()
        .flat_map(|c| c.frame_avg.iter().copied())
        .fold(0.0, f64::max);
    let pct = 100.0 * worst_frame / e.reference;
    let lengths_ok = e.test.iter().all(|s| match e.model.infer(&s.features) {
        Ok(Prediction::Sequence(p)) => p.len() == s.features.frames().len(),
        _ => false,
    });
    let frames = match &e.test[0].features {
        Features::Sequence(f) => f.len(),
        Features::Static(_) => 1,
    };
    outcome(
        "transient-learning",
        pct <= 5.0 && lengths_ok,
        format!(
            "{} test sequences of {frames} frames, {TRANSIENT_EPOCHS} epochs: worst per-frame avg {worst_frame:.4} C = {pct:.3} % (<= 5 %) of max rise {:.3} C; lengths match = {lengths_ok}; {:.1} min",
            e.report.cases.len(),
            e.reference,
            e.minutes
        ),
    )
}

fn latency_outcome(ir: &Experiment) -> Outcome {
    let features = &ir.test[0].features;
    let ms = measure_runtime(&ir.model, features, 21).unwrap();
    outcome(
        "latency",
        ms < 100.0,
        format!("34x32 IR inference median {ms:.3} ms over 21 runs (< 100 ms)"),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results = Vec::new();
    let mut report = |o: Outcome| {
        println!("{} {:<20} {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        results.push(o.pass);
    };
    report(gradients());
    report(solver_oracle());
    report(hand_physics());
    report(pad_distance());

    let ir = run_ir();
    report(ir_outcome(&ir));
    let thermal = run_thermal();
    report(thermal_outcome(&thermal));
    let (large, shapes_ok) = run_large(&ir.model);
    report(size_outcome(&ir, &large, shapes_ok));
    let transient = run_transient();
    report(transient_outcome(&transient));

    let repeat = [run_ir(), run_thermal(), run_transient()];
    let (large2, _) = run_large(&repeat[0].model);
    let same_runs = [&ir, &thermal, &transient]
        .iter()
        .zip(&repeat)
        .all(|(a, b)| a.fingerprint() == b.fingerprint() && a.model.to_bytes() == b.model.to_bytes());
    let same_large = large
        .cases
        .iter()
        .zip(&large2.cases)
        .all(|(a, b)| a.avg_err.to_bits() == b.avg_err.to_bits() && a.max_err.to_bits() == b.max_err.to_bits());
    report(outcome(
        "determinism",
        same_runs && same_large,
        format!("repeated IR, thermal, 68x32 and transient runs: losses, metrics and model bytes identical = {}", same_runs && same_large),
    ));
    report(latency_outcome(&ir));

    let passed = results.iter().filter(|p| **p).count();
    println!(
        "acceptance: {passed}/{} passed in {:.1} min",
        results.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
