//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when an
//! earlier criterion fails. The process exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereo_adapt::ablation::{self, DeskBenchmark, Switches};
use stereo_adapt::color::{channel_stats, lab_to_rgb, pair_stats, rgb_to_lab, transfer, LabImage, ProgressiveState};
use stereo_adapt::cost::{channel_normalize, concat_volume, correlation_volume, cost_norm, cost_norm_tensor, pixel_normalize};
use stereo_adapt::data::io::{read_disp_png16, read_pfm_raw, write_disp_png16, write_pfm};
use stereo_adapt::data::{gen_synthetic_pair, image_to_tensor, D1Threshold, StereoSample, SyntheticSpec};
use stereo_adapt::model::{
    forward_disparity, forward_occlusion, soft_argmin, softmax_disparity, ModelConfig, OcclusionNetConfig, ParamSet,
    StereoNetConfig,
};
use stereo_adapt::recon::{
    error_map, gt_occlusion_from_disparity, loss_bce, loss_occ_reg, loss_recon, loss_smooth, loss_smooth_l1, ssim3x3,
    total_loss, warp_right_to_left, DisparityMap, LossBreakdown, LossTerms, LossWeights,
};
use stereo_adapt::tensor::{grad_check, Adam, AdamConfig};
use stereo_adapt::train::{evaluate, predict, TrainConfig, Trainer};
use stereo_adapt::{Graph, Result, Tensor4, Var};

// ---- tolerances ------------------------------------------------------

const NORM_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-5;
const GRAD_SEEDS: u64 = 5;
const COLOR_MATCH_TOL: f64 = 1e-9;
const COLOR_IDENTITY_TOL: f64 = 1e-12;
const OCC_ROWS: usize = 1000;
const RECOVERY_MEDIAN_PX: f64 = 0.5;
const RECOVERY_MAX_ITERS: usize = 1000;
const RECOVERY_START: f64 = 4.0;
const ABLATION_ITERS: usize = 3000;
const ABLATION_SEEDS: u64 = 3;
const ABLATION_MIN_REDUCTION: f64 = 0.30;
const PLUMBING_TOL: f64 = 1e-12;
const PLUMBING_ITERS: usize = 10;
const PNG16_TOL: f64 = 1.0 / 512.0;
const EVAL_TOL: f64 = 1e-9;

type Outcome = std::result::Result<(bool, String), Box<dyn std::error::Error>>;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---- 1. normalization ------------------------------------------------

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut eq1, mut eq2, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let shape = [
            rng.random_range(1..=2),
            rng.random_range(1..=32),
            rng.random_range(1..=32),
            rng.random_range(1..=64),
        ];
        let f = random(shape, &mut rng, -3.0, 3.0);
        let mut g = Graph::new();
        let v = g.constant(f.clone());
        let c = channel_normalize(&mut g, v, 0.0)?;
        let p = pixel_normalize(&mut g, c, 0.0)?;
        let [n, ch, h, w] = shape;
        let cn = g.value(c);
        for ni in 0..n {
            for ci in 0..ch {
                let ss: f64 = cn.plane(ni, ci).iter().map(|x| x * x).sum();
                eq1 = eq1.max((ss - 1.0).abs());
            }
        }
        let pn = g.value(p);
        for ni in 0..n {
            for i in 0..h * w {
                let ss: f64 = (0..ch).map(|ci| pn.plane(ni, ci)[i].powi(2)).sum();
                eq2 = eq2.max((ss.sqrt() - 1.0).abs());
            }
        }
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled = cost_norm_tensor(&f.map(|x| a * x), 0.0)?;
        scale = scale.max(scaled.max_abs_diff(&cost_norm_tensor(&f, 0.0)?));
    }
    let pass = eq1 <= NORM_TOL && eq2 <= NORM_TOL && scale <= NORM_TOL;
    Ok((pass, format!("channel {eq1:.1e}, pixel {eq2:.1e}, scale {scale:.1e} (tol {NORM_TOL:.0e})")))
}

// ---- 2. gradients ----------------------------------------------------

type Case = (&'static str, Vec<Tensor4>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Scalar probe `Σ x ⊙ r` with a fixed random `r`, so every output
/// coordinate gets a distinct weight.
fn probe(g: &mut Graph, x: Var, r: &Tensor4) -> Result<Var> {
    let r = g.constant(r.clone());
    let m = g.mul(x, r)?;
    g.sum_all(m)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        stereo: StereoNetConfig {
            feature_channels: 3,
            feature_layers: 2,
            max_disp: 4,
            regularizer_layers: 2,
            cost_norm: true,
        },
        occlusion: OcclusionNetConfig {
            hidden_channels: 3,
            layers: 2,
        },
    }
}

fn grad_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();
    let s = [1, 2, 5, 6];

    let (x, w, b) = (
        random([2, 2, 5, 5], &mut rng, -1.0, 1.0),
        random([3, 2, 3, 3], &mut rng, -1.0, 1.0),
        random([1, 3, 1, 1], &mut rng, -1.0, 1.0),
    );
    let r = random([2, 3, 3, 3], &mut rng, -1.0, 1.0);
    cases.push((
        "conv2d",
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            probe(g, y, &r)
        }),
    ));

    for act in ["relu", "leaky_relu", "sigmoid", "exp", "log", "sqrt", "abs", "square", "clamp"] {
        let positive = matches!(act, "log" | "sqrt");
        let x = random(s, &mut rng, if positive { 0.2 } else { -2.0 }, 2.0);
        let r = random(s, &mut rng, -1.0, 1.0);
        cases.push((
            act,
            vec![x],
            Box::new(move |g, v| {
                let y = match act {
                    "relu" => g.relu(v[0]),
                    "leaky_relu" => g.leaky_relu(v[0], 0.1),
                    "sigmoid" => g.sigmoid(v[0]),
                    "exp" => g.exp(v[0]),
                    "log" => g.log(v[0])?,
                    "sqrt" => g.sqrt(v[0])?,
                    "abs" => g.abs(v[0]),
                    "square" => g.square(v[0]),
                    _ => g.clamp(v[0], -1.0, 1.0),
                };
                probe(g, y, &r)
            }),
        ));
    }

    let vol = random([1, 5, 3, 4], &mut rng, -2.0, 2.0);
    let r = random([1, 5, 3, 4], &mut rng, -1.0, 1.0);
    cases.push((
        "softmax_disparity",
        vec![vol.clone()],
        Box::new(move |g, v| {
            let p = softmax_disparity(g, v[0], 1.0);
            probe(g, p, &r)
        }),
    ));
    let r = random([1, 1, 3, 4], &mut rng, -1.0, 1.0);
    cases.push((
        "soft_argmin",
        vec![vol],
        Box::new(move |g, v| {
            let p = softmax_disparity(g, v[0], 1.0);
            let d = soft_argmin(g, p)?;
            probe(g, d, &r)
        }),
    ));

    let (ir, d) = (random(s, &mut rng, 0.0, 1.0), random([1, 1, 5, 6], &mut rng, 0.1, 3.9));
    let r = random(s, &mut rng, -1.0, 1.0);
    cases.push((
        "warp",
        vec![ir, d],
        Box::new(move |g, v| {
            let (w, _) = warp_right_to_left(g, v[0], v[1])?;
            probe(g, w, &r)
        }),
    ));

    let (a, b) = (random(s, &mut rng, 0.0, 1.0), random(s, &mut rng, 0.0, 1.0));
    let r = random(s, &mut rng, -1.0, 1.0);
    cases.push((
        "ssim3x3",
        vec![a.clone(), b.clone()],
        Box::new(move |g, v| {
            let y = ssim3x3(g, v[0], v[1])?;
            probe(g, y, &r)
        }),
    ));
    let r = random([1, 1, 5, 6], &mut rng, -1.0, 1.0);
    cases.push((
        "error_map",
        vec![a, b],
        Box::new(move |g, v| {
            let y = error_map(g, v[0], v[1])?;
            probe(g, y, &r)
        }),
    ));

    let (il, ir) = (random(s, &mut rng, 0.0, 1.0), random(s, &mut rng, 0.0, 1.0));
    let d = random([1, 1, 5, 6], &mut rng, 0.1, 2.9);
    let occ = random([1, 1, 5, 6], &mut rng, 0.05, 0.95);
    cases.push((
        "loss_recon",
        vec![il.clone(), ir.clone(), d.clone(), occ.clone()],
        Box::new(move |g, v| {
            let (w, valid) = warp_right_to_left(g, v[1], v[2])?;
            loss_recon(g, v[0], w, v[3], &valid, 0.85)
        }),
    ));
    cases.push((
        "loss_smooth",
        vec![d.clone(), il],
        Box::new(|g, v| loss_smooth(g, v[0], v[1])),
    ));
    cases.push(("loss_occ_reg", vec![occ.clone()], Box::new(|g, v| loss_occ_reg(g, v[0]))));
    let target = Tensor4::from_fn([1, 1, 5, 6], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    cases.push((
        "loss_bce",
        vec![occ],
        Box::new(move |g, v| loss_bce(g, v[0], &target)),
    ));
    // offsets in (0, 1) and beyond 1 hit both smooth-L1 branches
    let gt = d.zip_map(&random([1, 1, 5, 6], &mut rng, -2.0, 2.0), |a, o| a + o);
    let valid = Tensor4::from_fn([1, 1, 5, 6], |[_, _, y, _]| if y == 0 { 0.0 } else { 1.0 });
    cases.push((
        "loss_smooth_l1",
        vec![d],
        Box::new(move |g, v| loss_smooth_l1(g, v[0], &gt, &valid)),
    ));

    let f = random([2, 3, 4, 5], &mut rng, -1.0, 1.0);
    let r = random([2, 3, 4, 5], &mut rng, -1.0, 1.0);
    cases.push((
        "cost_norm",
        vec![f],
        Box::new(move |g, v| {
            let y = cost_norm(g, v[0])?;
            probe(g, y, &r)
        }),
    ));

    let (fl, fr) = (random([1, 3, 3, 6], &mut rng, -1.0, 1.0), random([1, 3, 3, 6], &mut rng, -1.0, 1.0));
    let r = random([1, 4, 3, 6], &mut rng, -1.0, 1.0);
    cases.push((
        "correlation_volume",
        vec![fl.clone(), fr.clone()],
        Box::new(move |g, v| {
            let (c, _) = correlation_volume(g, v[0], v[1], 4)?;
            probe(g, c, &r)
        }),
    ));
    let r = random([1, 24, 3, 6], &mut rng, -1.0, 1.0);
    cases.push((
        "concat_volume",
        vec![fl, fr],
        Box::new(move |g, v| {
            let (c, _) = concat_volume(g, v[0], v[1], 4)?;
            probe(g, c, &r)
        }),
    ));

    // whole disparity pipeline, differentiated w.r.t. every parameter
    let model = tiny_model();
    let params = ParamSet::init(&model, seed).unwrap();
    let (il, ir) = (random([1, 3, 4, 6], &mut rng, 0.0, 1.0), random([1, 3, 4, 6], &mut rng, 0.0, 1.0));
    let r = random([1, 1, 4, 6], &mut rng, -1.0, 1.0);
    let names = params.names().to_vec();
    let stereo_count = names.iter().filter(|n| !n.starts_with("occ.")).count();
    let mut inputs: Vec<Tensor4> = params.tensors()[..stereo_count].to_vec();
    inputs.extend([il.clone(), ir.clone()]);
    {
        let (names, params, r) = (names.clone(), params.clone(), r.clone());
        cases.push((
            "forward_disparity",
            inputs,
            Box::new(move |g, v| {
                let mut bp = params.bind_frozen(g);
                for (name, &var) in names.iter().zip(&v[..stereo_count]) {
                    bp.replace(name, var);
                }
                let out = forward_disparity(g, v[stereo_count], v[stereo_count + 1], &bp, &model.stereo)?;
                probe(g, out.disparity, &r)
            }),
        ));
    }

    let occ_params: Vec<Tensor4> = params.tensors()[stereo_count..].to_vec();
    let d = random([1, 1, 4, 6], &mut rng, 0.0, 3.0);
    let e = random([1, 1, 4, 6], &mut rng, 0.0, 1.0);
    let mut inputs = occ_params;
    inputs.extend([d, ir, e]);
    let k = names.len() - stereo_count;
    cases.push((
        "forward_occlusion",
        inputs,
        Box::new(move |g, v| {
            let mut bp = params.bind_frozen(g);
            for (name, &var) in names[stereo_count..].iter().zip(&v[..k]) {
                bp.replace(name, var);
            }
            let o = forward_occlusion(g, v[k], v[k + 1], v[k + 2], &bp, &model)?;
            probe(g, o, &r)
        }),
    ));
    cases
}

fn gradients() -> Outcome {
    let mut worst = (0.0f64, "", 0u64);
    let mut worst_elementwise = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..GRAD_SEEDS {
        for (name, inputs, f) in grad_cases(seed) {
            let report = grad_check(f, &inputs, FD_STEP)?;
            worst_elementwise = worst_elementwise.max(report.max_elementwise_rel_err);
            if report.max_rel_err > worst.0 {
                worst = (report.max_rel_err, name, seed);
            }
            if report.max_rel_err >= FD_REL_TOL {
                failures.push(format!(
                    "{name}@{seed}: {:.2e} (input {} index {}: analytic {:.6e} numeric {:.6e})",
                    report.max_rel_err, report.worst_input, report.worst_index, report.analytic, report.numeric
                ));
            }
        }
    }
    let count = grad_cases(0).len();
    let detail = format!(
        "{count} ops x {GRAD_SEEDS} seeds, worst rel err {:.2e} ({} seed {}), tol {FD_REL_TOL:.0e}; \
         worst single coordinate {worst_elementwise:.2e}",
        worst.0, worst.1, worst.2
    );
    if failures.is_empty() {
        Ok((true, detail))
    } else {
        Ok((false, format!("{detail}; failing: {}", failures.join(", "))))
    }
}

// ---- 3. color transfer -----------------------------------------------

fn random_lab(w: u32, h: u32, rng: &mut ChaCha8Rng, mean: [f64; 3], spread: [f64; 3]) -> LabImage {
    let pixels = (0..w * h)
        .map(|_| std::array::from_fn(|k| mean[k] + spread[k] * rng.random_range(-1.0..1.0)))
        .collect();
    LabImage::new(w, h, pixels).unwrap()
}

fn color_transfer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut match_err = 0.0f64;
    for _ in 0..20 {
        let src = random_lab(17, 11, &mut rng, [40.0, 5.0, -3.0], [20.0, 15.0, 10.0]);
        let tgt = random_lab(13, 9, &mut rng, [65.0, -10.0, 12.0], [8.0, 30.0, 4.0]);
        let t_stats = channel_stats(&tgt)?;
        let state = ProgressiveState::new(1.0)?.updated(&t_stats);
        let out = channel_stats(&transfer(&src, &channel_stats(&src)?, &state)?)?;
        for k in 0..3 {
            match_err = match_err.max((out.mu[k] - t_stats.mu[k]).abs());
            match_err = match_err.max((out.sigma[k] - t_stats.sigma[k]).abs());
        }
    }

    let img = random_lab(16, 8, &mut rng, [50.0, 0.0, 0.0], [25.0, 20.0, 20.0]);
    let stats = channel_stats(&img)?;
    let state = ProgressiveState::warm_started(0.95, &stats)?;
    let same = transfer(&img, &stats, &state)?;
    let identity_err = img
        .pixels
        .iter()
        .zip(&same.pixels)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max);

    let mut state = ProgressiveState::new(0.95)?;
    let first = stereo_adapt::color::ColorStats {
        mu: [50.0, 50.0, 50.0],
        sigma: [1.0, 1.0, 1.0],
    };
    state.update(&first);
    let ema_ok = state.mu_t == [47.5; 3];

    let pass = match_err <= COLOR_MATCH_TOL && identity_err <= COLOR_IDENTITY_TOL && ema_ok;
    Ok((
        pass,
        format!(
            "stats match {match_err:.1e} (tol {COLOR_MATCH_TOL:.0e}), identity {identity_err:.1e} (tol {COLOR_IDENTITY_TOL:.0e}), first EMA mean {}",
            state.mu_t[0]
        ),
    ))
}

// ---- 4. occlusion oracle ---------------------------------------------

/// Quadratic reference: pixel `x` is visible iff it lands inside the right
/// image and no other pixel landing on the same column is nearer.
fn brute_force_occlusion(row: &[f64]) -> Vec<f64> {
    let w = row.len();
    let land = |x: usize| (x as f64 - row[x]).round();
    (0..w)
        .map(|x| {
            let r = land(x);
            let outside = r < 0.0 || r >= w as f64;
            let hidden = (0..w).any(|o| o != x && land(o) == r && row[o] > row[x]);
            if outside || hidden {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn occlusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = 64;
    // half the rows use integer disparities so that ties actually occur
    let disp = Tensor4::from_fn([1, 1, OCC_ROWS, w], |[_, _, y, _]| {
        if y % 2 == 0 {
            rng.random_range(0..=15) as f64
        } else {
            rng.random_range(0.0..=15.0)
        }
    });
    let mask = gt_occlusion_from_disparity(&DisparityMap::new(disp.clone())?);
    let mut mismatched_rows = 0;
    let mut occluded = 0usize;
    for y in 0..OCC_ROWS {
        let row = &disp.plane(0, 0)[y * w..(y + 1) * w];
        let got = &mask.tensor().plane(0, 0)[y * w..(y + 1) * w];
        let want = brute_force_occlusion(row);
        occluded += want.iter().filter(|&&v| v == 1.0).count();
        if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatched_rows += 1;
        }
    }
    Ok((
        mismatched_rows == 0,
        format!("{mismatched_rows}/{OCC_ROWS} rows differ, {occluded} occluded pixels in total"),
    ))
}

// ---- 5. photometric recovery -----------------------------------------

fn photometric_recovery() -> Outcome {
    let spec = SyntheticSpec {
        layers: 0,
        background_disp: Some(6),
        ..SyntheticSpec::domain_b(128, 64, 6)
    };
    let sample = gen_synthetic_pair(&spec, 5)?;
    let il = image_to_tensor(&sample.left);
    let ir = image_to_tensor(&sample.right);
    // Constant start 2 px short of the truth. The texture's photometric
    // basin is about ±3 px wide; from 0 the field stalls in a side minimum.
    let mut d = Tensor4::full([1, 1, 64, 128], RECOVERY_START);
    let mut adam = Adam::new(AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    });
    let median_err = |d: &Tensor4| {
        let mut e: Vec<f64> = d.data().iter().map(|v| (v - 6.0).abs()).collect();
        e.sort_by(f64::total_cmp);
        e[e.len() / 2]
    };
    let mut iters = 0;
    while iters < RECOVERY_MAX_ITERS && median_err(&d) >= RECOVERY_MEDIAN_PX {
        let mut g = Graph::new();
        let dv = g.param(d.clone());
        let l = g.constant(il.clone());
        let r = g.constant(ir.clone());
        let occ = g.constant(Tensor4::zeros([1, 1, 64, 128]));
        let (w, valid) = warp_right_to_left(&mut g, r, dv)?;
        let ar = loss_recon(&mut g, l, w, occ, &valid, 0.85)?;
        let sm = loss_smooth(&mut g, dv, l)?;
        let sm = g.mul_scalar(sm, 0.1);
        let loss = g.add(ar, sm)?;
        let grad = g.backward(loss)?.get_or_zeros(dv, d.shape());
        adam.step(std::slice::from_mut(&mut d), &[grad])?;
        iters += 1;
    }
    let m = median_err(&d);
    Ok((
        m < RECOVERY_MEDIAN_PX,
        format!("median |d - 6| = {m:.3} px after {iters} iterations from d = {RECOVERY_START} (tol {RECOVERY_MEDIAN_PX})"),
    ))
}

// ---- 6. desk-scale ablation ------------------------------------------

fn desk_ablation() -> Outcome {
    let bench = DeskBenchmark::generate()?;
    let mut means = Vec::new();
    for (name, switches) in ablation::ROWS {
        let mut sum = 0.0;
        let mut per_seed = Vec::new();
        for seed in 0..ABLATION_SEEDS {
            let d1 = ablation::run(&bench, switches, ABLATION_ITERS, seed)?.aggregate.d1_percent;
            per_seed.push(format!("{d1:.2}"));
            sum += d1;
        }
        let mean = sum / ABLATION_SEEDS as f64;
        println!("    {name:10} target D1 per seed [{}] mean {mean:.2}%", per_seed.join(", "));
        means.push((switches, mean));
    }
    let get = |s: Switches| means.iter().find(|(k, _)| *k == s).map(|(_, m)| *m).unwrap();
    let base = get(Switches::BASELINE);
    let full = get(Switches::FULL);
    let singles = [Switches::COLOR, Switches::COST_NORM, Switches::RECON];
    let a = get(Switches::COLOR) < base;
    let b = get(Switches::COST_NORM) < base;
    let c = singles.iter().all(|&s| full < get(s));
    let reduction = (base - full) / base;
    let d = reduction >= ABLATION_MIN_REDUCTION;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    Ok((
        a && b && c && d,
        format!(
            "(a) color<base {} (b) costnorm<base {} (c) full<singles {} (d) reduction {:.1}% >= {:.0}% {}",
            mark(a),
            mark(b),
            mark(c),
            100.0 * reduction,
            100.0 * ABLATION_MIN_REDUCTION,
            mark(d)
        ),
    ))
}

// ---- 7. loss plumbing ------------------------------------------------

/// One training step written out by hand, with the color transfer and the
/// reconstruction branch only present when `with_color` / `with_recon`.
struct Reference<'a> {
    model: ModelConfig,
    params: ParamSet,
    adam: Adam,
    color: ProgressiveState,
    source: &'a [StereoSample],
    target: &'a [StereoSample],
    crop: (usize, usize),
}

impl Reference<'_> {
    fn crop(&self, set: &[StereoSample], items: &[(usize, usize, usize)], with_color: bool) -> Result<Vec<StereoSample>> {
        items
            .iter()
            .map(|&(i, x, y)| {
                let mut s = set[i].crop(x, y, self.crop.0, self.crop.1)?;
                if with_color {
                    let stats = pair_stats(&set[i].left, &set[i].right)?;
                    let restyle = |img: &RgbImage| -> Result<RgbImage> {
                        Ok(lab_to_rgb(&transfer(&rgb_to_lab(img), &stats, &self.color)?))
                    };
                    s.left = restyle(&s.left)?;
                    s.right = restyle(&s.right)?;
                }
                Ok(s)
            })
            .collect()
    }

    fn step(&mut self, plan: &stereo_adapt::train::BatchPlan, with_color: bool, with_recon: bool) -> Result<LossBreakdown> {
        if with_color {
            for &(ti, _, _) in &plan.target {
                let t = &self.target[ti];
                self.color.update(&pair_stats(&t.left, &t.right)?);
            }
        }
        let stack = |xs: Vec<Tensor4>| Tensor4::stack_batch(&xs);
        let src = self.crop(self.source, &plan.source, with_color)?;
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g);
        let il = g.constant(stack(src.iter().map(|s| image_to_tensor(&s.left)).collect())?);
        let ir = g.constant(stack(src.iter().map(|s| image_to_tensor(&s.right)).collect())?);
        let gt = stack(src.iter().map(|s| s.disparity.tensor().clone()).collect())?;
        let valid = stack(src.iter().map(|s| s.valid.clone()).collect())?;
        let d_s = forward_disparity(&mut g, il, ir, &bp, &self.model.stereo)?.disparity;
        let mut terms = LossTerms {
            s_main: Some(loss_smooth_l1(&mut g, d_s, &gt, &valid)?),
            ..Default::default()
        };
        if with_recon {
            let occ_gt = stack(src.iter().map(|s| s.occlusion_or_derived().into_tensor()).collect())?;
            let d_in = g.detach(d_s);
            let (w, _) = warp_right_to_left(&mut g, ir, d_in)?;
            let e = error_map(&mut g, il, w)?;
            let o = forward_occlusion(&mut g, d_in, ir, e, &bp, &self.model)?;
            terms.s_occ = Some(loss_bce(&mut g, o, &occ_gt)?);

            let tgt = self.crop(self.target, &plan.target, false)?;
            let il_t = g.constant(stack(tgt.iter().map(|s| image_to_tensor(&s.left)).collect())?);
            let ir_t = g.constant(stack(tgt.iter().map(|s| image_to_tensor(&s.right)).collect())?);
            let d_t = forward_disparity(&mut g, il_t, ir_t, &bp, &self.model.stereo)?.disparity;
            let (w_t, valid_t) = warp_right_to_left(&mut g, ir_t, d_t)?;
            let e_t = error_map(&mut g, il_t, w_t)?;
            let e_t = g.detach(e_t);
            let d_t_in = g.detach(d_t);
            let o_t = forward_occlusion(&mut g, d_t_in, ir_t, e_t, &bp, &self.model)?;
            terms.t_ar = Some(loss_recon(&mut g, il_t, w_t, o_t, &valid_t, 0.85)?);
            terms.t_occ = Some(loss_occ_reg(&mut g, o_t)?);
            terms.t_sm = Some(loss_smooth(&mut g, d_t, il_t)?);
        }
        let (total, breakdown) = total_loss(&mut g, &terms, &LossWeights::default())?;
        let grads = g.backward(total)?;
        let grads: Vec<Tensor4> = bp
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        self.adam.step(self.params.tensors_mut(), &grads)?;
        Ok(breakdown)
    }
}

fn plumbing_samples() -> Result<(Vec<StereoSample>, Vec<StereoSample>)> {
    let a = SyntheticSpec::domain_a(32, 16, 6);
    let b = SyntheticSpec::domain_b(32, 16, 6);
    let source = (0..4).map(|i| gen_synthetic_pair(&a, i)).collect::<Result<_>>()?;
    let target = (0..3).map(|i| gen_synthetic_pair(&b, 100 + i)).collect::<Result<_>>()?;
    Ok((source, target))
}

fn loss_plumbing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = LossWeights::default();
    let weights_ok = [w.lambda_s_occ, w.lambda_t_ar, w.lambda_t_occ, w.lambda_t_sm] == [0.2, 1.0, 0.2, 0.1];
    let mut total_err = 0.0f64;
    for _ in 0..100 {
        let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let hand = c[0] + 0.2 * c[1] + 1.0 * c[2] + 0.2 * c[3] + 0.1 * c[4];
        total_err = total_err.max((LossBreakdown::from_components(c, &w).total - hand).abs());
        let mut g = Graph::new();
        let vars = c.map(|v| g.constant(Tensor4::scalar(v)));
        let terms = LossTerms {
            s_main: Some(vars[0]),
            s_occ: Some(vars[1]),
            t_ar: Some(vars[2]),
            t_occ: Some(vars[3]),
            t_sm: Some(vars[4]),
        };
        let (t, bd) = total_loss(&mut g, &terms, &w)?;
        total_err = total_err.max((g.scalar(t) - hand).abs()).max((bd.total - hand).abs());
    }

    let (source, target) = plumbing_samples()?;
    let mut mismatches = Vec::new();
    for (name, switches) in ablation::ROWS {
        let cfg = TrainConfig {
            color_transfer: switches.color_transfer,
            cost_norm: switches.cost_norm,
            recon: switches.recon,
            batch_size: 2,
            crop_width: 24,
            crop_height: 12,
            feature_channels: 4,
            feature_layers: 2,
            max_disp: 8,
            regularizer_layers: 2,
            occ_channels: 4,
            occ_layers: 2,
            seed: 17,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg.clone(), &source, &target)?;
        let model = *trainer.model();
        let mut reference = Reference {
            model,
            params: ParamSet::init(&model, cfg.seed)?,
            adam: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            color: ProgressiveState::new(cfg.gamma)?,
            source: &source,
            target: &target,
            crop: (cfg.crop_width, cfg.crop_height),
        };
        for it in 0..PLUMBING_ITERS {
            let plan = trainer.draw_batch();
            let got = trainer.step_with(&plan)?;
            let want = reference.step(&plan, switches.color_transfer, switches.recon)?;
            let zeros_ok = switches.recon || got.components()[1..].iter().all(|&v| v == 0.0);
            let same = got.components().map(f64::to_bits) == want.components().map(f64::to_bits)
                && got.total.to_bits() == want.total.to_bits();
            if !(same && zeros_ok) {
                mismatches.push(format!("{name} iteration {}", it + 1));
                break;
            }
        }
        if trainer.params != reference.params {
            mismatches.push(format!("{name} parameters"));
        }
    }
    let pass = weights_ok && total_err <= PLUMBING_TOL && mismatches.is_empty();
    Ok((
        pass,
        format!(
            "weights {}, total err {total_err:.1e} (tol {PLUMBING_TOL:.0e}), {} configs x {PLUMBING_ITERS} iterations bit-identical to hand-built steps{}",
            if weights_ok { "ok" } else { "WRONG" },
            ablation::ROWS.len(),
            if mismatches.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {}", mismatches.join(", "))
            }
        ),
    ))
}

// ---- 8. I/O and evaluation -------------------------------------------

fn io_and_eval(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let map = Tensor4::from_fn([1, 1, 23, 37], |_| rng.random_range(-500.0f32..500.0) as f64);
    let pfm = dir.join("roundtrip.pfm");
    write_pfm(&pfm, &map)?;
    let back = read_pfm_raw(&pfm)?;
    let pfm_ok = back.shape() == map.shape() && back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let disp = Tensor4::from_fn([1, 1, 19, 29], |_| rng.random_range(0.0..255.0));
    let png = dir.join("roundtrip.png");
    write_disp_png16(&png, &disp, None)?;
    let png_err = read_disp_png16(&png)?.disparity.tensor().max_abs_diff(&disp);

    // evaluation aggregate versus a direct recount over raw predictions
    let spec = SyntheticSpec::domain_b(40, 20, 8);
    let samples: Vec<StereoSample> = (0..20).map(|i| gen_synthetic_pair(&spec, 300 + i)).collect::<Result<_>>()?;
    let model = ModelConfig {
        stereo: StereoNetConfig {
            feature_channels: 4,
            feature_layers: 2,
            max_disp: 12,
            ..Default::default()
        },
        occlusion: OcclusionNetConfig {
            hidden_channels: 4,
            layers: 2,
        },
    };
    let params = ParamSet::init(&model, 8)?;
    let report = evaluate(&params, &model, &samples, D1Threshold::default())?;
    let (mut bad, mut count, mut abs_sum) = (0u64, 0u64, 0.0);
    for s in &samples {
        let pred = predict(&params, &model, &s.left, &s.right)?;
        let gt = s.disparity.tensor();
        for i in 0..gt.len() {
            if s.valid.data()[i] > 0.5 {
                let e = (pred.data()[i] - gt.data()[i]).abs();
                count += 1;
                abs_sum += e;
                if e > 3.0 {
                    bad += 1;
                }
            }
        }
    }
    let d1 = 100.0 * bad as f64 / count as f64;
    let epe = abs_sum / count as f64;
    let eval_err = (report.aggregate.d1_percent - d1).abs().max((report.aggregate.epe - epe).abs());

    let pass = pfm_ok && png_err <= PNG16_TOL && eval_err <= EVAL_TOL;
    Ok((
        pass,
        format!(
            "PFM bit-exact {pfm_ok}, PNG16 err {png_err:.2e} (tol 1/512), eval on 20 samples D1 {d1:.3}% err {eval_err:.1e} (tol {EVAL_TOL:.0e})"
        ),
    ))
}

// ---- 9. determinism --------------------------------------------------

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stereo-adapt"))
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        return Err(format!(
            "`stereo-adapt {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn determinism(dir: &Path) -> Outcome {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (src, tgt) = (p("src"), p("tgt"));
    cli(&["gen-synth", "--out", &src, "--n", "4", "--seed", "1", "--domain", "a", "--width", "40", "--height", "20", "--max-disp", "6"])?;
    cli(&["gen-synth", "--out", &tgt, "--n", "3", "--seed", "2", "--domain", "b", "--width", "40", "--height", "20", "--max-disp", "6"])?;
    let config = format!(
        "source = {src}\ntarget = {tgt}\ncolor-transfer = on\ncost-norm = on\nrecon = on\n\
         iterations = 12\neval-interval = 4\neval-samples = 2\nbatch-size = 2\n\
         crop-width = 24\ncrop-height = 12\nfeature-channels = 4\nfeature-layers = 2\n\
         max-disp = 8\nocc-channels = 4\nocc-layers = 2\n"
    );
    let cfg = p("run.cfg");
    std::fs::write(&cfg, config)?;
    // both runs use the same output directory since the checkpoint echoes it
    let out = p("run");
    for run in ["run1", "run2"] {
        cli(&["train", "--config", &cfg, "--seed", "9", "--out", &out])?;
        std::fs::create_dir_all(dir.join(run))?;
        for f in ["metrics.csv", "checkpoint.bin"] {
            std::fs::rename(dir.join("run").join(f), dir.join(run).join(f))?;
        }
    }
    let read = |f: &str| std::fs::read(dir.join(f)).unwrap_or_default();
    let metrics_same = read("run1/metrics.csv") == read("run2/metrics.csv") && !read("run1/metrics.csv").is_empty();
    let ckpt_same = read("run1/checkpoint.bin") == read("run2/checkpoint.bin") && !read("run1/checkpoint.bin").is_empty();
    Ok((
        metrics_same && ckpt_same,
        format!(
            "metrics.csv identical {metrics_same}, checkpoint.bin identical {ckpt_same} ({} bytes)",
            read("run1/checkpoint.bin").len()
        ),
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    // (name, runtime budget in seconds, check); no budget where none is set
    let criteria: Vec<(&str, Option<f64>, Box<dyn Fn() -> Outcome>)> = vec![
        ("normalization invariants", Some(10.0), Box::new(normalization)),
        ("gradient suite", Some(120.0), Box::new(gradients)),
        ("color-transfer exactness", Some(5.0), Box::new(color_transfer)),
        ("occlusion oracle", Some(5.0), Box::new(occlusion_oracle)),
        ("photometric disparity recovery", Some(180.0), Box::new(photometric_recovery)),
        ("desk-scale ablation", Some(1800.0), Box::new(desk_ablation)),
        ("loss-weight plumbing", None, Box::new(loss_plumbing)),
        ("I/O and evaluation", None, Box::new(|| io_and_eval(dir.path()))),
        ("determinism", None, Box::new(|| determinism(dir.path()))),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let (mut pass, mut detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        if let Some(b) = budget {
            if secs >= *b {
                pass = false;
                detail = format!("{detail}; over the {b:.0}s budget");
            }
        }
        if !pass {
            failed += 1;
        }
        println!("{} [{n}] {name}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
