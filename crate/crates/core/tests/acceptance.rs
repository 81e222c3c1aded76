//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tof_core::evaluate::{strict_confusion, tolerant_confusion, users_producers, Confusion};
use tof_core::inference::{binarize, predict_scene, BlendPlan, NetworkModel, WindowModel};
use tof_core::network::{param_count, Mode, NetConfig, Network, ParamStore};
use tof_core::objective::{alpha_schedule, class_weights, loss_from_logits, signed_distance_map, EFFECTIVE_BETA};
use tof_core::preprocess::{whittaker_smooth, WhittakerConfig};
use tof_core::raster::{ChannelLayout, LabelGrid, PlotSample};
use tof_core::synth::{generate_dataset, generate_plot, CoverMix, LogisticBaseline, LogisticConfig, SynthConfig};
use tof_core::trainer::{Checkpoint, TrainConfig, Trainer, LOG_FILE, MODEL_FILE, OPTIMIZER_FILE, PARAMS_FILE};
use tof_core::Result;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} [{verdict}] {name}: {detail}");
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn samples(plots: Vec<tof_core::synth::SynthPlot<f32>>) -> Vec<PlotSample<f32>> {
    plots.into_iter().map(|p| p.sample).collect()
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize, p: f64) -> LabelGrid {
    LabelGrid::new(Array2::from_shape_fn((n, n), |_| u8::from(rng.random_bool(p)))).unwrap()
}

/// Dense `(I + lambda D'D) z = y` through nalgebra's LU.
fn dense_whittaker(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let mut d = DMatrix::<f64>::zeros(n - 2, n);
    for i in 0..n - 2 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    let a = DMatrix::<f64>::identity(n, n) + d.transpose() * &d * lambda;
    let z = a.lu().solve(&DVector::from_column_slice(y)).expect("positive definite system");
    z.iter().copied().collect()
}

#[test]
fn c1_whittaker_matches_dense_solve() {
    let start = Instant::now();
    let cfg = WhittakerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let y: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let banded = whittaker_smooth(&y, &cfg).unwrap();
        for (a, b) in banded.iter().zip(dense_whittaker(&y, cfg.lambda)) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut worst_linear: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-0.1..0.1));
        let y: Vec<f64> = (0..24).map(|t| a + b * t as f64).collect();
        for (z, v) in whittaker_smooth(&y, &cfg).unwrap().iter().zip(&y) {
            worst_linear = worst_linear.max((z - v).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "whittaker oracle",
        worst <= 1e-8 && worst_linear <= 1e-8 && secs < 10.0,
        &format!("max |banded - dense| {worst:.2e}, linear drift {worst_linear:.2e}, {secs:.2} s"),
    );
}

/// Combined loss summed over the batch and its logit gradients.
fn batch_loss(net: &Network, ps: &ParamStore<f64>, xs: &[ArrayView4<'_, f64>], ys: &[LabelGrid], mode: &Mode, alpha: f64) -> (f64, Vec<Array2<f64>>) {
    let weights = class_weights(
        [
            ys.iter().map(|y| (y.dim().0 * y.dim().1 - y.positives()) as u64).sum(),
            ys.iter().map(|y| y.positives() as u64).sum(),
        ],
        EFFECTIVE_BETA,
    )
    .unwrap();
    let pass = net.forward_batch(ps, xs, mode).unwrap();
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (l, y) in pass.logits.iter().zip(ys) {
        let phi = signed_distance_map(y);
        let (terms, g) = loss_from_logits(l.view(), y, phi.view(), alpha, weights, 1.0).unwrap();
        total += terms.total;
        grads.push(g);
    }
    (total, grads)
}

#[test]
fn c2_full_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let net = Network::new(NetConfig { time_steps: 4, ..NetConfig::default() }).unwrap();
    let mut ps: ParamStore<f64> = net.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in ps.ids().collect::<Vec<_>>() {
        if ps.specs()[id.index()].learnable {
            ps.get_mut(id).iter_mut().for_each(|v| *v += rng.random_range(-0.02..0.02));
        }
    }
    let xs: Vec<Array4<f64>> = (0..2).map(|_| Array4::from_shape_fn((4, 8, 8, 16), |_| rng.random_range(0.0..1.0))).collect();
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    let ys: Vec<LabelGrid> = (0..2).map(|_| random_grid(&mut rng, 8, 0.4)).collect();
    let alpha = alpha_schedule(30).unwrap();
    let mode = Mode::train(0, 9, 0.1);
    let (_, dlogits) = batch_loss(&net, &ps, &views, &ys, &mode, alpha);
    let pass = net.forward_batch(&ps, &views, &mode).unwrap();
    let grads = net.backward_batch(&ps, &pass.cache, &dlogits);

    let eps = 1e-6;
    let per_tensor = 12;
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0usize);
    for id in ps.ids().collect::<Vec<_>>() {
        let spec = ps.specs()[id.index()].clone();
        if !spec.learnable {
            continue;
        }
        let stride = spec.len().div_ceil(per_tensor).max(1);
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for i in (rng.random_range(0..stride)..spec.len()).step_by(stride) {
            let orig = ps.get(id)[i];
            ps.get_mut(id)[i] = orig + eps;
            let lp = batch_loss(&net, &ps, &views, &ys, &mode, alpha).0;
            ps.get_mut(id)[i] = orig - eps;
            let lm = batch_loss(&net, &ps, &views, &ys, &mode, alpha).0;
            ps.get_mut(id)[i] = orig;
            num.push((lp - lm) / (2.0 * eps));
            ana.push(grads.get(id)[i]);
        }
        checked += num.len();
        let diff = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt() + ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        let e = if scale < 1e-12 { diff } else { diff / scale };
        if e > worst {
            worst = e;
            worst_name = spec.name.clone();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "gradient integrity",
        worst <= 1e-3 && secs < 300.0,
        &format!("worst relative error {worst:.2e} ({worst_name}) over {checked} entries, alpha {alpha}, {secs:.1} s"),
    );
}

#[test]
fn c3_parameter_budget() {
    let n = param_count(&NetConfig::default()).unwrap();
    let reference = 221_000;
    report(
        3,
        "parameter budget",
        (180_000..=260_000).contains(&n),
        &format!("{n} learnable parameters ({:+.1}% against {reference})", 100.0 * (n as f64 / reference as f64 - 1.0)),
    );
}

/// Pixel-pair matching within Chebyshev distance 1.
fn brute_tolerant(y: &LabelGrid, p: &LabelGrid) -> Confusion {
    let (h, w) = y.dim();
    let cells: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let near = |a: (usize, usize), b: (usize, usize)| a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1;
    let mut m = Confusion::default();
    for &a in &cells {
        let (yv, pv) = (y.get(a.0, a.1), p.get(a.0, a.1));
        if yv {
            if cells.iter().any(|&b| p.get(b.0, b.1) && near(a, b)) {
                m.tp += 1;
            } else {
                m.fn_ += 1;
            }
        }
        if pv && !cells.iter().any(|&b| y.get(b.0, b.1) && near(a, b)) {
            m.fp += 1;
        }
        if !yv && !pv {
            m.tn += 1;
        }
    }
    m
}

#[test]
fn c4_tolerant_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut dominance_violations) = (0, 0);
    for _ in 0..1000 {
        let (py, pp) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
        let y = random_grid(&mut rng, 14, py);
        let p = random_grid(&mut rng, 14, pp);
        let tol = tolerant_confusion(&y, &p).unwrap();
        mismatches += usize::from(tol != brute_tolerant(&y, &p));
        let strict = strict_confusion(&y, &p).unwrap();
        dominance_violations += usize::from(tol.tp < strict.tp || tol.fp > strict.fp || tol.fn_ > strict.fn_);
    }
    let table = Confusion { tp: 74_304, fp: 3_599, fn_: 4_802, tn: 0 };
    let (ua, pa) = users_producers(&table);
    let (ua, pa) = (ua.unwrap(), pa.unwrap());
    let table_ok = format!("{ua:.3}") == "0.954" && format!("{pa:.3}") == "0.939";
    report(
        4,
        "metric oracle",
        mismatches == 0 && dominance_violations == 0 && table_ok,
        &format!("{mismatches} oracle mismatches and {dominance_violations} dominance violations in 1000 pairs; reported counts give UA {ua:.3} PA {pa:.3}"),
    );
}

struct Constant(f64);

impl WindowModel<f64> for Constant {
    fn predict_window(&self, w: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
        Ok(Array2::from_elem((w.dim().1, w.dim().2), self.0))
    }
}

#[test]
fn c5_blending_matches_brute_force() {
    let cfg = NetConfig {
        hidden_per_direction: 4,
        fpa_width: 8,
        pyramid_width: 4,
        conv_block_width: 8,
        time_steps: 3,
        ..NetConfig::default()
    };
    let net = Network::new(cfg).unwrap();
    let ps: ParamStore<f64> = net.init_params(5);
    let model = NetworkModel { network: &net, params: &ps };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scene = Array4::from_shape_fn((3, 28, 28, 16), |_| rng.random_range(0.0..1.0));
    let plan = BlendPlan::default();
    let tiled = predict_scene(scene.view(), &model, &plan).unwrap();

    let (num, den) = (&mut Array2::<f64>::zeros((28, 28)), &mut Array2::<f64>::zeros((28, 28)));
    for r0 in [0, 7, 14] {
        for c0 in [0, 7, 14] {
            let p = net.predict(&ps, scene.slice(s![.., r0..r0 + 14, c0..c0 + 14, ..])).unwrap();
            for r in 0..14 {
                for c in 0..14 {
                    let d2 = (r as f64 - 6.5).powi(2) + (c as f64 - 6.5).powi(2);
                    let w = (-d2 / (2.0 * 3.5 * 3.5)).exp();
                    num[[r0 + r, c0 + c]] += w * p[[r, c]];
                    den[[r0 + r, c0 + c]] += w;
                }
            }
        }
    }
    let worst = tiled
        .probs()
        .iter()
        .zip(num.iter().zip(den.iter()))
        .map(|(t, (n, d))| (t - n / d).abs())
        .fold(0.0f64, f64::max);
    let constant = predict_scene(scene.view(), &Constant(0.7), &plan).unwrap();
    let exact = constant.probs().iter().all(|&v| v == 0.7);
    report(
        5,
        "tiled blending",
        worst <= 1e-6 && exact,
        &format!("max |tiled - brute force| {worst:.2e}; constant model reproduced exactly: {exact}"),
    );
}

/// Reduced network used by the training criteria.
fn reduced(epochs: u32, batch_size: usize) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            hidden_per_direction: 16,
            time_steps: 12,
            ..NetConfig::default()
        },
        epochs,
        batch_size,
        ..TrainConfig::default()
    }
}

#[test]
fn c6_overfits_small_training_set() {
    let start = Instant::now();
    let data = samples(generate_dataset::<f32>(20, CoverMix::Uniform, &SynthConfig::default(), 1).unwrap());
    let mut cfg = reduced(300, OVERFIT_BATCH);
    cfg.net.zoneout_prob = 0.0;
    cfg.net.dropblock_max = 0.0;
    let mut t = Trainer::new(cfg, &data, 1).unwrap();
    t.train(None).unwrap();
    let acc = t.pixel_accuracy().unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "overfit sanity",
        acc >= 0.95 && secs < 1800.0,
        &format!("train pixel accuracy {:.2}% after 300 epochs on 20 plots, {:.0} s", 100.0 * acc, secs),
    );
}

const OVERFIT_BATCH: usize = 10;

fn tolerant_ua_pa(pairs: &[(LabelGrid, LabelGrid)]) -> (f64, f64) {
    let total: Confusion = pairs.iter().map(|(y, p)| tolerant_confusion(y, p).unwrap()).sum();
    let (ua, pa) = users_producers(&total);
    (ua.unwrap_or(0.0), pa.unwrap_or(0.0))
}

#[test]
fn c7_temporal_model_beats_logistic_baseline_on_sparse_cover() {
    let start = Instant::now();
    let train = samples(generate_dataset::<f32>(SPARSE_TRAIN_PLOTS, CoverMix::Uniform, &SynthConfig::default(), 70).unwrap());
    let test = samples(generate_dataset::<f32>(100, CoverMix::Low, &SynthConfig::default(), 71).unwrap());
    assert!(test.iter().all(|s| s.cover < 0.2));

    let mut t = Trainer::new(reduced(SPARSE_EPOCHS, 20), &train, 7).unwrap();
    t.train(None).unwrap();
    let threshold = t.train_threshold().unwrap();
    let model = NetworkModel { network: &t.network, params: &t.params };
    let model_pairs: Vec<(LabelGrid, LabelGrid)> = test
        .iter()
        .map(|s| {
            let probs = predict_scene(s.stack.data(), &model, &BlendPlan::default()).unwrap();
            (s.label.clone(), binarize(probs.probs(), threshold).unwrap())
        })
        .collect();

    let baseline = LogisticBaseline::fit(&train, &LogisticConfig::default()).unwrap();
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    for s in &train {
        probs.extend(baseline.predict_proba(s.stack.data()).unwrap().iter().copied());
        truth.extend(s.label.values().iter().map(|&v| v == 1));
    }
    let base_threshold = tof_core::inference::select_threshold(&probs, &truth).unwrap();
    let base_pairs: Vec<(LabelGrid, LabelGrid)> = test
        .iter()
        .map(|s| (s.label.clone(), binarize(baseline.predict_proba(s.stack.data()).unwrap().view(), base_threshold).unwrap()))
        .collect();

    let (mua, mpa) = tolerant_ua_pa(&model_pairs);
    let (bua, bpa) = tolerant_ua_pa(&base_pairs);
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        "comparative sparse-cover accuracy",
        mua - bua >= 0.10 && mpa - bpa >= 0.10 && secs < 7200.0,
        &format!(
            "model UA {:.1}% PA {:.1}% vs baseline UA {:.1}% PA {:.1}% on 100 plots under 20% cover, {:.0} s",
            100.0 * mua,
            100.0 * mpa,
            100.0 * bua,
            100.0 * bpa,
            secs
        ),
    );
}

const SPARSE_TRAIN_PLOTS: usize = 60;
const SPARSE_EPOCHS: u32 = 100;

#[test]
fn c8_cloud_gaps_reconstruct_clean_signal() {
    let sigma = 0.02;
    let mut worst: f64 = 0.0;
    let mut min_clouded: f64 = 1.0;
    for seed in 0..20 {
        let cfg = SynthConfig {
            seed,
            cover_target: 0.3,
            cloud_gap_fraction: 0.5,
            noise_sigma: sigma,
            ..SynthConfig::default()
        };
        let p = generate_plot::<f64>(&cfg).unwrap();
        let acq = &p.raw.acquisitions;
        let clouded = acq.iter().filter(|a| a.cloud_mask.iter().any(|&c| c)).count() as f64 / acq.len() as f64;
        min_clouded = min_clouded.min(clouded);
        let d = p.sample.stack.data();
        let optical = d.slice(s![.., .., .., ChannelLayout::OPTICAL]);
        let rmse = (&optical - &p.clean_s2).mapv(|e| e * e).mean().unwrap().sqrt();
        worst = worst.max(rmse);
    }
    report(
        8,
        "preprocessing robustness",
        worst <= sigma + 0.02 && min_clouded >= 0.5,
        &format!("worst optical RMSE {worst:.4} over 20 plots (limit {:.2}), at least {:.0}% of acquisitions clouded", sigma + 0.02, 100.0 * min_clouded),
    );
}

/// Trains, checkpoints and predicts into `dir`.
fn pipeline_run(dir: &Path, data: &[PlotSample<f32>], scene: ArrayView4<'_, f32>) {
    let cfg = TrainConfig {
        net: NetConfig {
            hidden_per_direction: 4,
            fpa_width: 8,
            pyramid_width: 4,
            conv_block_width: 8,
            time_steps: 6,
            ..NetConfig::default()
        },
        epochs: 4,
        batch_size: 10,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, data, 42).unwrap();
    t.train(Some(dir)).unwrap();
    let ck = Checkpoint::<f32>::load(dir).unwrap();
    let net = Network::new(ck.manifest.config.net).unwrap();
    let probs = predict_scene(scene, &NetworkModel { network: &net, params: &ck.params }, &BlendPlan::default()).unwrap();
    let threshold = ck.manifest.threshold.unwrap_or(0.5);
    let mask = binarize(probs.probs(), threshold).unwrap();
    tof_core::bundle::save_prediction(&dir.join("pred"), "scene", &probs.into_inner(), threshold, &mask).unwrap();
}

#[test]
fn c9_identical_seeds_reproduce_artifacts() {
    let data = samples(generate_dataset::<f32>(12, CoverMix::Uniform, &SynthConfig::default(), 90).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let scene = Array4::from_shape_fn((24, 21, 30, 16), |_| rng.random_range(0.0f32..1.0));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline_run(a.path(), &data, scene.view());
    pipeline_run(b.path(), &data, scene.view());
    let files = [LOG_FILE, MODEL_FILE, PARAMS_FILE, OPTIMIZER_FILE, "pred/probs.bin", "pred/probs.json", "pred/mask.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).unwrap())
        .collect();
    report(
        9,
        "determinism",
        differing.is_empty(),
        &format!("{} artifacts compared, differing: {:?}", files.len(), differing),
    );
}
