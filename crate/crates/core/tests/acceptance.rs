//! Acceptance criteria A1–A8. Each test prints one `A<n> PASS|FAIL` line to
//! stderr (bypassing the harness capture) and then asserts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relit_core::dataset::{generate_dataset, load_dataset, synthesize_scene, DatasetConfig};
use relit_core::fit::{fit_pair, FitConfig};
use relit_core::lightsolve::{condition_report, estimate_light, Ridge};
use relit_core::losses::{loss_relit, total_loss, total_loss_with_grad, LossWeights, PairEstimate};
use relit_core::metrics::{angular_error, angular_errors, pixel_error, ssim, Norm};
use relit_core::nn::{evaluate_model, Mode, Model, ModelConfig, TrainConfig, TrainData, Trainer};
use relit_core::render::render;
use relit_core::synth::{MultiLitSample, PairMode};
use relit_core::{ColorSpace, ImagePlane, Mask, NormalMap};

mod common;
use common::{small_scene, supervision, FdStats, PairVars};

// A1
const A1_TOL: f64 = 2.0 / 65535.0;
// A2
const A2_SEEDS: u64 = 20;
const A2_STEP: f64 = 1e-6;
const A2_REL: f64 = 1e-3;
const A2_ABS: f64 = 1e-7;
const A2_MAX_KINK_FRACTION: f64 = 0.01;
const A2_NET_PARAMS_PER_SEED: usize = 120;
// A3
const A3_SCENES: usize = 100;
const A3_MAX_CONDITION: f64 = 1e6;
const A3_TOL: f64 = 1e-5;
// A4
const A4_TOL: f64 = 0.05;
// A5
const A5_RATIO: f64 = 0.8;
const A5_STEPS: usize = 4000;
const A5_BATCH_PAIRS: usize = 4;
const A5_LR: f64 = 2e-3;
const A5_LAMBDA_LIGHT: f64 = 10.0;
// A6
const A6_RATIO: f64 = 0.7;
const A6_PAIRS: usize = 10;
const A6_ITERATIONS: usize = 400;
// A7
const A7_SSIM_TOL: f64 = 1e-9;
const A7_ANGLE_TOL: f64 = 1e-6;
const A7_PIXEL_TOL: f64 = 1e-9;

fn report(id: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "\n{id} {verdict} {detail}");
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn a1_forward_model_exactness() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        scenes: 64,
        k: 5,
        size: 64,
        seed: 101,
        ..Default::default()
    };
    generate_dataset(dir.path(), &cfg).unwrap();
    let (_, scenes) = load_dataset(dir.path()).unwrap();
    let mut worst: f64 = 0.0;
    for s in &scenes {
        let smp = &s.sample;
        for (img, l) in smp.images.iter().zip(&smp.lightings) {
            let r = render(&smp.albedo, &smp.normals, l, &smp.mask).unwrap();
            worst = worst.max(max_abs_diff(r.data(), img.data()));
        }
    }
    let pass = worst <= A1_TOL;
    report(
        "A1",
        pass,
        format!("max |render - stored| = {:.3}/65535 (tol 2/65535) over {} images, {:.1}s", worst * 65535.0, scenes.len() * 5, t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

fn a2_fit_variables(seed: u64, stats: &mut FdStats) {
    let s = small_scene(seed);
    let (w, h) = (s.mask.width(), s.mask.height());
    let weights = LossWeights::default();
    let sup = supervision(&s);
    let images = [&s.images[0], &s.images[1]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA2);
    let mut vars = PairVars::random(&mut rng, &s);
    let est = vars.estimate(w, h);
    let (f0, grads) = total_loss_with_grad(&est, images, &s.mask, Some(&sup), &weights).unwrap();
    let analytic = vars.gradient(&est, &grads);
    let eval = |v: &PairVars| total_loss(&v.estimate(w, h), images, &s.mask, Some(&sup), &weights).unwrap().total;
    for i in 0..vars.len() {
        let orig = *vars.get_mut(i);
        *vars.get_mut(i) = orig + A2_STEP;
        let fp = eval(&vars);
        *vars.get_mut(i) = orig - A2_STEP;
        let fm = eval(&vars);
        *vars.get_mut(i) = orig;
        stats.check(&format!("seed {seed} var {i}"), analytic[i], f0.total, fp, fm);
    }
}

/// Mean total loss over the pairs of a batch, with the parameter gradient
/// when `grad` is set.
fn network_loss(model: &mut Model, scenes: &[MultiLitSample], grad: bool) -> (f64, Option<Vec<f64>>) {
    let weights = LossWeights::default();
    let images: Vec<&ImagePlane> = scenes.iter().flat_map(|s| [&s.images[0], &s.images[1]]).collect();
    let masks: Vec<&Mask> = scenes.iter().flat_map(|s| [&s.mask, &s.mask]).collect();
    let (outs, tape) = model.forward(&images, &masks, Mode::Train).unwrap();
    let scale = 1.0 / scenes.len() as f64;
    let mut outs = outs.into_iter();
    let mut total = 0.0;
    let mut head = Vec::new();
    for s in scenes {
        let est = PairEstimate::new(outs.next().unwrap(), outs.next().unwrap());
        let (loss, g) =
            total_loss_with_grad(&est, [&s.images[0], &s.images[1]], &s.mask, Some(&supervision(s)), &weights).unwrap();
        total += scale * loss.total;
        for mut gk in g {
            gk.scale(scale);
            head.push(gk);
        }
    }
    let g = grad.then(|| model.backward(&tape.unwrap(), &head).unwrap());
    (total, g)
}

fn a2_network(seed: u64, stats: &mut FdStats) {
    let scenes = vec![small_scene(1000 + 2 * seed), small_scene(1001 + 2 * seed)];
    let mut model = Model::new(ModelConfig::micro(), seed).unwrap();
    let (f0, analytic) = network_loss(&mut model, &scenes, true);
    let analytic = analytic.unwrap();
    let n = model.num_params();
    let indices: Vec<usize> = if seed == 0 {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..A2_NET_PARAMS_PER_SEED).map(|_| rng.gen_range(0..n)).collect()
    };
    for i in indices {
        let orig = model.params().data()[i];
        model.params_mut()[i] = orig + A2_STEP;
        let fp = network_loss(&mut model, &scenes, false).0;
        model.params_mut()[i] = orig - A2_STEP;
        let fm = network_loss(&mut model, &scenes, false).0;
        model.params_mut()[i] = orig;
        stats.check(&format!("seed {seed} param {i}"), analytic[i], f0, fp, fm);
    }
}

#[test]
fn a2_gradient_oracle() {
    let t = Instant::now();
    let mut fit = FdStats::new(A2_STEP, A2_REL, A2_ABS);
    let mut net = FdStats::new(A2_STEP, A2_REL, A2_ABS);
    for seed in 0..A2_SEEDS {
        a2_fit_variables(seed, &mut fit);
        a2_network(seed, &mut net);
    }
    let ok = |s: &FdStats| s.failures.is_empty() && s.kink_fraction() <= A2_MAX_KINK_FRACTION;
    let pass = ok(&fit) && ok(&net);
    let shown: Vec<&String> = fit.failures.iter().chain(&net.failures).filter(|f| !f.is_empty()).collect();
    report(
        "A2",
        pass,
        format!(
            "fit vars {} checked, {} kinks, {} failures, worst err/tol {:.3}; network params {} checked, {} kinks, {} failures, worst err/tol {:.3} (tol 1e-3 rel), {:.1}s {:?}",
            fit.checked,
            fit.kinks,
            fit.failures.len(),
            fit.worst_ratio,
            net.checked,
            net.kinks,
            net.failures.len(),
            net.worst_ratio,
            t.elapsed().as_secs_f64(),
            shown
        ),
    );
    assert!(pass);
}

#[test]
fn a3_light_solver_round_trip() {
    let t = Instant::now();
    let cfg = DatasetConfig {
        scenes: 1,
        k: 2,
        size: 32,
        seed: 303,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let mut index = 0;
    while used < A3_SCENES {
        let (_, s) = synthesize_scene(&cfg, index).unwrap();
        index += 1;
        let cond = condition_report(&s.normals, &s.albedo, &s.mask).unwrap().condition;
        if !(cond < A3_MAX_CONDITION) {
            skipped += 1;
            continue;
        }
        let l = &s.lightings[0];
        let img = render(&s.albedo, &s.normals, l, &s.mask).unwrap();
        let est = estimate_light(&img, &s.albedo, &s.normals, &s.mask, Ridge::Absolute(0.0)).unwrap();
        worst = worst.max(est.light.max_abs_diff(l));
        used += 1;
    }
    let pass = worst < A3_TOL;
    report(
        "A3",
        pass,
        format!("max |L_hat - L| = {worst:.2e} (tol 1e-5) over {used} scenes, {skipped} skipped for condition >= 1e6, {:.2}s", t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn a4_cross_relighting_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        scenes: 16,
        k: 5,
        size: 64,
        seed: 404,
        ..Default::default()
    };
    generate_dataset(dir.path(), &cfg).unwrap();
    let (_, scenes) = load_dataset(dir.path()).unwrap();
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for sc in &scenes {
        let s = &sc.sample;
        for (i, j) in s.pairs(PairMode::All).unwrap() {
            let est = PairEstimate::shared(s.albedo.clone(), s.normals.clone(), [s.lightings[i].clone(), s.lightings[j].clone()]);
            worst = worst.max(loss_relit(&est, &s.images[i], &s.images[j], &s.mask).unwrap());
            pairs += 1;
        }
    }
    let pass = worst <= A4_TOL;
    report("A4", pass, format!("max loss_relit on GT = {worst:.2e} LAB-L1 (tol 0.05) over {pairs} stored pairs"));
    assert!(pass);
}

#[test]
fn a5_cross_relighting_ablation() {
    let t = Instant::now();
    let cfg = DatasetConfig {
        scenes: 64,
        k: 5,
        size: 64,
        seed: 2024,
        ..Default::default()
    };
    let scenes: Vec<MultiLitSample> = (0..cfg.scenes).map(|i| synthesize_scene(&cfg, i).unwrap().1).collect();
    let data = TrainData::new(scenes.clone(), PairMode::All).unwrap();
    let mut results = BTreeMap::new();
    for use_relit in [true, false] {
        let mut tc = TrainConfig {
            use_relit,
            steps: A5_STEPS,
            batch_pairs: A5_BATCH_PAIRS,
            seed: 1,
            ..Default::default()
        };
        tc.adam.lr = A5_LR;
        tc.weights.lambda_light = A5_LAMBDA_LIGHT;
        let mut trainer = Trainer::new(tc).unwrap();
        trainer.run(&data, None, None, 0).unwrap();
        let ev = evaluate_model(trainer.model(), &scenes, PairMode::All, "ablation").unwrap();
        let median = ev.report.normals.unwrap().median;
        results.insert(use_relit, (median, ev.report.relit.l1));
    }
    let (with, without) = (results[&true], results[&false]);
    let normal_ratio = with.0 / without.0;
    let relit_ratio = with.1 / without.1;
    let pass = normal_ratio <= A5_RATIO && relit_ratio <= A5_RATIO;
    report(
        "A5",
        pass,
        format!(
            "median normal error {:.2} vs {:.2} deg (ratio {normal_ratio:.3}), relit L1 {:.2} vs {:.2} (ratio {relit_ratio:.3}), tol 0.8, {A5_STEPS} steps, {:.0}s",
            with.0,
            without.0,
            with.1,
            without.1,
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a6_fit_pair_ablation() {
    let t = Instant::now();
    let cfg = DatasetConfig {
        scenes: A6_PAIRS,
        k: 2,
        size: 64,
        seed: 7,
        ..Default::default()
    };
    let fc = FitConfig {
        iterations: A6_ITERATIONS,
        ..Default::default()
    };
    let (mut with, mut without) = (0.0, 0.0);
    for i in 0..A6_PAIRS {
        let (_, s) = synthesize_scene(&cfg, i).unwrap();
        for (lambda_relit, acc) in [(1.0, &mut with), (0.0, &mut without)] {
            let w = LossWeights::self_supervised(1.0, lambda_relit);
            let f = fit_pair(&s.images[0], &s.images[1], &s.mask, &w, &fc).unwrap();
            *acc += loss_relit(&f.estimate, &s.images[0], &s.images[1], &s.mask).unwrap() / A6_PAIRS as f64;
        }
    }
    let ratio = with / without;
    let pass = ratio <= A6_RATIO;
    report(
        "A6",
        pass,
        format!("mean relit LAB-L1 {with:.3} vs {without:.3} (ratio {ratio:.3}, tol 0.7), {A6_ITERATIONS} iterations, {:.1}s", t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

fn rotate_x(n: [f64; 3], deg: f64) -> [f64; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    [n[0], c * n[1] - s * n[2], s * n[1] + c * n[2]]
}

#[test]
fn a7_metric_self_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let size = 32;
    let full = Mask::full(size, size);
    let x = ImagePlane::from_fn_rgb(size, size, ColorSpace::LinearRgb, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
    let ssim_err = (ssim(&x, &x, &full).unwrap() - 1.0).abs();

    // normals tilted 40° back so any further tilt up to 50° stays in the front hemisphere
    let gt = NormalMap::constant(size, size, rotate_x([0.0, 0.0, 1.0], -40.0)).unwrap();
    let tilted = |deg: f64| NormalMap::constant(size, size, rotate_x(gt.get(0), deg)).unwrap();
    let medians: Vec<f64> = [0.0, 5.0, 10.0, 20.0, 35.0, 50.0]
        .iter()
        .map(|&d| angular_error(&tilted(d), &gt, &full).unwrap().median)
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] > w[0]);
    let rot = angular_errors(&tilted(25.0), &gt, &full).unwrap();
    let rot_err = rot.iter().map(|a| (a - 25.0).abs()).fold(0.0, f64::max);

    let base = ImagePlane::from_fn_rgb(size, size, ColorSpace::Srgb, |_, _| {
        [rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8)]
    })
    .unwrap();
    let shifted = base.map(ColorSpace::Srgb, |v| v + 12.0 / 255.0).unwrap();
    let l1 = pixel_error(&shifted, &base, &full, Norm::L1).unwrap();
    let l2 = pixel_error(&shifted, &base, &full, Norm::L2).unwrap();
    let pixel_err = (l1 - 12.0).abs().max((l2 - 12.0).abs());

    let pass = ssim_err <= A7_SSIM_TOL && monotone && rot_err <= A7_ANGLE_TOL && pixel_err <= A7_PIXEL_TOL;
    report(
        "A7",
        pass,
        format!("|ssim(x,x)-1| = {ssim_err:.1e}, monotone {monotone}, 25deg tilt error {rot_err:.1e}, uniform shift 12 error {pixel_err:.1e}"),
    );
    assert!(pass);
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn train_once(data_dir: &Path, out: &Path) -> (Vec<u8>, Vec<u8>) {
    let (_, scenes) = load_dataset(data_dir).unwrap();
    let data = TrainData::from_loaded(scenes, PairMode::All).unwrap();
    let tc = TrainConfig {
        steps: 10,
        batch_pairs: 2,
        seed: 5,
        model: ModelConfig::micro(),
        ..Default::default()
    };
    let ckpt = out.join("model.ckpt");
    let mut log = Vec::new();
    Trainer::new(tc).unwrap().run(&data, Some(&mut log), Some(&ckpt), 4).unwrap();
    (fs::read(&ckpt).unwrap(), log)
}

#[test]
fn a8_determinism() {
    let cfg = DatasetConfig {
        scenes: 4,
        k: 3,
        size: 16,
        seed: 808,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(a.path(), &cfg).unwrap();
    generate_dataset(b.path(), &cfg).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    let data_same = ta == tb && !ta.is_empty();

    let (oa, ob) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ckpt_a, log_a) = train_once(a.path(), oa.path());
    let (ckpt_b, log_b) = train_once(a.path(), ob.path());
    let train_same = ckpt_a == ckpt_b && log_a == log_b;

    let pass = data_same && train_same;
    report(
        "A8",
        pass,
        format!(
            "dataset {} files identical: {data_same}; checkpoint ({} bytes) and log ({} bytes) identical: {train_same}",
            ta.len(),
            ckpt_a.len(),
            log_a.len()
        ),
    );
    assert!(pass);
}
