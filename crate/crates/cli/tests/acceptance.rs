// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use stitchkit::analysis::probe::{example_means, restrict};
use stitchkit::analysis::{
    apply_clamp, attribution_correlation, compute_steering_vector, eval_probe, relative_transfer_gap,
    select_features, train_probe, AttributionInputs, ProbeConfig, SteeringVector, TokenSet,
};
use stitchkit::sae::{
    decoder_cosines, decoder_norm_deviation, init_sae, live_features, median, mse_and_grad, sae_forward,
    train_sae, Activation, SaeInit, SaeParams, SaeRun, SaeTrainConfig, SaeTrainer,
};
use stitchkit::scaling::{estimate_flops, fit_power_law, flops_to_threshold, FlopModel, FrontierPoint};
use stitchkit::stitch::{train_stitch, Stitch, StitchTrainConfig};
use stitchkit::svcca::{select_layer, svcca_score};
use stitchkit::synthgen::{generate_world, PlantedWorld, WorldConfig};
use stitchkit::transfer::transfer_sae;
use stitchkit::optim::LrSchedule;
use stitchkit::{linalg, rng, Mat, Vector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_sae(r: &mut rng::Rng, d: usize, m: usize, k: usize) -> SaeParams {
    SaeParams {
        w_e: rng::gaussian_mat(r, d, m, 1.0 / (d as f64).sqrt()),
        b_e: Vector::from_fn(m, |_, _| 0.1 * rng::normal(r)),
        w_d: rng::gaussian_mat(r, m, d, 1.0 / (d as f64).sqrt()),
        b_d: Vector::from_fn(d, |_, _| 0.1 * rng::normal(r)),
        activation: Activation::TopK(k),
    }
}

fn random_stitch(r: &mut rng::Rng, d_a: usize, d_b: usize) -> Stitch {
    Stitch::new(
        rng::gaussian_mat(r, d_a, d_b, 1.0 / (d_a as f64).sqrt()),
        Vector::from_fn(d_b, |_, _| 0.1 * rng::normal(r)),
        rng::gaussian_mat(r, d_b, d_a, 1.0 / (d_b as f64).sqrt()),
        Vector::from_fn(d_a, |_, _| 0.1 * rng::normal(r)),
        1.0,
    )
    .unwrap()
}

/// 50 random (θ, stitch, batch) triples.
fn triples() -> Vec<(SaeParams, Stitch, Mat)> {
    let mut r = rng::seeded(rng::substream(2024, "triples"));
    (0..50)
        .map(|i| {
            let d_a = [8, 32][i % 2];
            let d_b = [8, 64][(i / 2) % 2];
            let m = [16, 128][(i / 4) % 2];
            let k = 1 + (i % 7).min(m - 1);
            let theta = random_sae(&mut r, d_a, m, k);
            let stitch = random_stitch(&mut r, d_a, d_b);
            let batch = rng::gaussian_mat(&mut r, 32, d_b, 1.0);
            (theta, stitch, batch)
        })
        .collect()
}

fn eq5_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for (theta, stitch, x) in triples() {
        let moved = transfer_sae(&theta, &stitch).map_err(|e| e.to_string())?;
        let (codes_t, recon_t) = sae_forward(&x, &moved.params).map_err(|e| e.to_string())?;
        let down = stitch.apply_down(&x).map_err(|e| e.to_string())?;
        let (codes, recon) = sae_forward(&down, &theta).map_err(|e| e.to_string())?;
        let up = stitch.apply_up(&recon).map_err(|e| e.to_string())?;
        worst = worst.max(linalg::rel_error(&recon_t, &up)).max(linalg::rel_error(&codes_t, &codes));
    }
    let dt = t0.elapsed();
    check(
        worst < 1e-9 && dt < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 50 triples in {dt:.2?}"),
    )
}

fn rank_bound() -> Outcome {
    let mut worst = 0.0f64;
    for (theta, stitch, _) in triples() {
        let moved = transfer_sae(&theta, &stitch).map_err(|e| e.to_string())?;
        let (e, d) = moved.excess_rank();
        worst = worst.max(e).max(d);
    }
    check(worst < 1e-6, format!("largest relative singular value past d_A: {worst:.2e}"))
}

fn stitch_config() -> StitchTrainConfig {
    StitchTrainConfig {
        learning_rate: 1e-3,
        batch_tokens: 64,
        seed: 3,
        ..StitchTrainConfig::default()
    }
}

fn stitch_recovery() -> Outcome {
    let t0 = Instant::now();
    let run = |sigma: f64| -> Result<_, String> {
        let cfg = WorldConfig { noise_sigma: sigma, ..WorldConfig::default() };
        let w = generate_world(&cfg, 1).map_err(|e| e.to_string())?;
        let s = w.sample_pair(200_000, 2).map_err(|e| e.to_string())?;
        let (_, h) = train_stitch(&stitch_config(), &[s.a], &[s.b]).map_err(|e| e.to_string())?;
        h.final_heldout.ok_or_else(|| "no held-out split".to_string())
    };
    let clean = run(0.0)?;
    let noisy = run(0.05)?;
    let dt = t0.elapsed();
    let floor = 0.05f64 * 0.05;
    let inv = clean.inv_a_mse + clean.inv_b_mse;
    let ratio = noisy.up_mse / floor;
    check(
        clean.total < 1e-4 && inv < 1e-4 && (ratio - 1.0).abs() <= 0.10 && dt < Duration::from_secs(120),
        format!(
            "clean total {:.2e}, inversion {:.2e}; noisy up_mse / floor = {ratio:.4}; {dt:.1?}",
            clean.total, inv
        ),
    )
}

struct WarmStart {
    savings: f64,
    cos_random: f64,
    cos_warm: f64,
}

const WARM_LATENTS: usize = 256;
const WARM_K: usize = 8;

fn warm_start_seed(seed: u64) -> Result<WarmStart, String> {
    let e = |x: stitchkit::Error| x.to_string();
    let cfg = WorldConfig { noise_sigma: 0.01, ..WorldConfig::default() };
    let w = generate_world(&cfg, 100 + seed).map_err(e)?;
    let s = w.sample_pair(100_000, 200 + seed).map_err(e)?;
    let base = SaeTrainConfig {
        latent_size: WARM_LATENTS,
        k: WARM_K,
        learning_rate: 1e-3,
        total_tokens: 300_000,
        batch_tokens: 256,
        seed,
        log_every: 20,
        ..SaeTrainConfig::default()
    };
    // The SAE on A already exists in this scenario; its cost is not counted.
    let sae_a = train_sae(&base, std::slice::from_ref(&s.a)).map_err(e)?;
    let scfg = StitchTrainConfig {
        learning_rate: 3e-3,
        batch_tokens: 64,
        epochs: 1,
        seed,
        ..StitchTrainConfig::default()
    };
    let n_stitch = 50_000;
    let (stitch, h) = train_stitch(&scfg, &[s.a.slice(0, n_stitch)], &[s.b.slice(0, n_stitch)]).map_err(e)?;
    let stitch_cost = estimate_flops(&FlopModel::stitch(w.config.d_a, w.config.d_b), h.tokens_processed) as f64;
    let moved = transfer_sae(&sae_a.params, &stitch).map_err(e)?;
    let warm_cfg = SaeTrainConfig {
        init: SaeInit::FromParams(Box::new(moved.params)),
        ..base.clone()
    };
    let random = train_sae(&base, std::slice::from_ref(&s.b)).map_err(e)?;
    let warm = train_sae(&warm_cfg, std::slice::from_ref(&s.b)).map_err(e)?;
    let model = FlopModel::sae(w.config.d_b, WARM_LATENTS);
    let hist = |r: &SaeRun| r.history.iter().map(|x| (x.tokens, x.explained_variance)).collect::<Vec<_>>();
    let f_random = flops_to_threshold(&hist(&random), 0.90, &model, 0.0)
        .ok_or_else(|| format!("seed {seed}: random init never reached 0.90"))?;
    let f_warm = flops_to_threshold(&hist(&warm), 0.90, &model, stitch_cost)
        .ok_or_else(|| format!("seed {seed}: warm start never reached 0.90"))?;

    let eval = w.sample_pair(4096, 300 + seed).map_err(e)?.b.to_mat();
    let cos = |r: &SaeRun| -> Result<f64, String> {
        let live = live_features(&r.params, [&eval]).map_err(|x| x.to_string())?;
        median(&decoder_cosines(&r.params, &r.initial, &live)).ok_or_else(|| "no live features".to_string())
    };
    Ok(WarmStart {
        savings: 1.0 - f_warm / f_random,
        cos_random: cos(&random)?,
        cos_warm: cos(&warm)?,
    })
}

fn warm_runs() -> Result<Vec<WarmStart>, String> {
    (0..5u64).into_par_iter().map(warm_start_seed).collect()
}

fn warm_start_savings(runs: &Result<Vec<WarmStart>, String>, dt: Duration) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let s: Vec<f64> = runs.iter().map(|r| r.savings).collect();
    let med = median(&s).unwrap();
    let shown: Vec<String> = s.iter().map(|x| format!("{:.0}%", 100.0 * x)).collect();
    check(
        med >= 0.30 && dt < Duration::from_secs(600),
        format!("median savings {:.1}% (seeds: {}); {dt:.1?}", 100.0 * med, shown.join(", ")),
    )
}

fn decoder_rotation(runs: &Result<Vec<WarmStart>, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let pairs: Vec<String> = runs.iter().map(|r| format!("{:.3}>{:.3}", r.cos_warm, r.cos_random)).collect();
    check(
        runs.iter().all(|r| r.cos_warm > r.cos_random),
        format!("median cosine warm>random per seed: {}", pairs.join(", ")),
    )
}

fn topk_invariants() -> Outcome {
    let mut r = rng::seeded(rng::substream(5, "topk"));
    let mut violations = 0usize;
    for call in 0..10_000 {
        let d = 4 + call % 13;
        let m = 8 + call % 29;
        let k = 1 + call % m.min(9);
        let mut p = random_sae(&mut r, d, m, k);
        // Shift the encoder bias so that rows with fewer than k positive
        // pre-activations also occur.
        p.b_e.add_scalar_mut(-0.5 * (call % 3) as f64);
        let x = rng::gaussian_mat(&mut r, 3, d, 1.0);
        let pre = p.pre_activations(&x).map_err(|e| e.to_string())?;
        let (codes, _) = sae_forward(&x, &p).map_err(|e| e.to_string())?;
        for row in 0..x.nrows() {
            let l0 = codes.row(row).iter().filter(|&&c| c > 0.0).count();
            let positive = pre.row(row).iter().filter(|&&v| v > 0.0).count();
            let bad = l0 > k || (positive >= k && l0 != k) || codes.row(row).iter().any(|&c| c < 0.0);
            violations += usize::from(bad);
        }
    }
    let w = generate_world(&WorldConfig::default(), 9).map_err(|e| e.to_string())?;
    let data = w.sample_pair(500 * 64, 10).map_err(|e| e.to_string())?.b.to_mat();
    let cfg = SaeTrainConfig {
        latent_size: 128,
        k: 8,
        learning_rate: 1e-3,
        ..SaeTrainConfig::default()
    };
    let mut trainer =
        SaeTrainer::new(init_sae(&cfg, 64).map_err(|e| e.to_string())?, 1e-3, LrSchedule::Constant, 500)
            .map_err(|e| e.to_string())?;
    let mut max_dev = 0.0f64;
    for step in 0..500 {
        trainer.step(&data.rows(step * 64, 64).into_owned()).map_err(|e| e.to_string())?;
        max_dev = max_dev.max(decoder_norm_deviation(&trainer.params.w_d));
    }
    check(
        violations == 0 && max_dev < 1e-6,
        format!("{violations} violations in 10^4 calls; max decoder norm deviation {max_dev:.2e} over 500 steps"),
    )
}

fn gradient_check() -> Outcome {
    let mut r = rng::seeded(rng::substream(6, "grad"));
    let (d, m, k, n) = (6, 10, 3, 5);
    let p = random_sae(&mut r, d, m, k);
    let x = rng::gaussian_mat(&mut r, n, d, 1.0);
    let (_, g) = mse_and_grad(&p, &x).map_err(|e| e.to_string())?;
    let (support, _) = sae_forward(&x, &p).map_err(|e| e.to_string())?;
    let same_support = |q: &SaeParams| {
        let (c, _) = sae_forward(&x, q).unwrap();
        c.iter().zip(support.iter()).all(|(a, b)| (*a > 0.0) == (*b > 0.0))
    };
    let loss = |q: &SaeParams| mse_and_grad(q, &x).unwrap().0.mse;
    let h = 1e-6;
    let mut num = Vec::new();
    let mut ana = Vec::new();
    let mut moved_support = false;
    let mut probe = |get: &dyn Fn(&mut SaeParams) -> &mut f64, analytic: f64| {
        let (mut plus, mut minus) = (p.clone(), p.clone());
        *get(&mut plus) += h;
        *get(&mut minus) -= h;
        moved_support |= !same_support(&plus) || !same_support(&minus);
        num.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        ana.push(analytic);
    };
    for i in 0..d {
        for j in 0..m {
            probe(&|q| &mut q.w_e[(i, j)], g.w_e[(i, j)]);
            probe(&|q| &mut q.w_d[(j, i)], g.w_d[(j, i)]);
        }
        probe(&|q| &mut q.b_d[i], g.b_d[i]);
    }
    for j in 0..m {
        probe(&|q| &mut q.b_e[j], g.b_e[j]);
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = diff / norm;
    check(
        rel < 1e-4 && !moved_support,
        format!("relative error {rel:.2e} over {} parameters (support fixed: {})", ana.len(), !moved_support),
    )
}

fn svcca() -> Outcome {
    let mut r = rng::seeded(rng::substream(7, "svcca"));
    let x = rng::gaussian_mat(&mut r, 500, 16, 1.0);
    let q = linalg::orthonormal_columns(rng::gaussian_mat(&mut r, 16, 16, 1.0));
    let mut y = &x * &q;
    linalg::add_row_bias(&mut y, &Vector::from_fn(16, |_, _| 3.0 * rng::normal(&mut r)));
    let inv = svcca_score(&x, &y, 0.99).map_err(|e| e.to_string())?;
    let z = rng::gaussian_mat(&mut r, 500, 24, 1.0) + &x * rng::gaussian_mat(&mut r, 16, 24, 0.3);
    let asym = (svcca_score(&x, &z, 0.99).unwrap() - svcca_score(&z, &x, 0.99).unwrap()).abs();

    let trials: Vec<bool> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = WorldConfig { noise_sigma: 0.05, ..WorldConfig::default() };
            let w = generate_world(&cfg, 1000 + seed).unwrap();
            let s = w.sample_pair(2048, seed).unwrap();
            let other = w.sample_pair(2048, seed + 5000).unwrap().b.to_mat();
            let n_layers = 6;
            let planted = (seed as usize * 7) % n_layers;
            let hb = s.b.to_mat();
            let cands: Vec<Mat> = (0..n_layers)
                .map(|j| {
                    let lambda = if j == planted { 0.0 } else { 0.3 + 0.1 * j.abs_diff(planted) as f64 };
                    &hb * (1.0 - lambda * lambda).sqrt() + &other * lambda
                })
                .collect();
            select_layer(&s.a.to_mat(), &cands, 0.99).unwrap().chosen_layer == planted
        })
        .collect();
    let correct = trials.iter().filter(|&&t| t).count();
    check(
        (inv - 1.0).abs() <= 1e-6 && correct == 20 && asym <= 1e-6,
        format!("invariance |s-1| = {:.1e}; planted layer {correct}/20; asymmetry {asym:.1e}", (inv - 1.0).abs()),
    )
}

/// Test accuracy of a k=1 probe on `codes` with the first half of examples
/// used for selection and fitting.
fn probe_accuracy(codes: &Mat, spans: &[(usize, usize)], labels: &[bool]) -> f64 {
    let means = example_means(codes, spans).unwrap();
    let n_train = spans.len() / 2;
    let rows = |range: std::ops::Range<usize>, want: Option<bool>| -> Vec<usize> {
        range.filter(|&i| want.is_none_or(|w| labels[i] == w)).collect()
    };
    let pick = |idx: &[usize]| means.select_rows(idx.iter());
    let feats = select_features(&pick(&rows(0..n_train, Some(true))), &pick(&rows(0..n_train, Some(false))), 1).unwrap();
    let train = rows(0..n_train, None);
    let test = rows(n_train..spans.len(), None);
    let lab = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let probe = train_probe(&restrict(&pick(&train), &feats), &lab(&train), &ProbeConfig::default()).unwrap();
    eval_probe(&probe, &restrict(&pick(&test), &feats), &lab(&test)).unwrap()
}

fn probing() -> Outcome {
    let cfg = WorldConfig { noise_sigma: 0.05, ..WorldConfig::default() };
    let hits = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let w = generate_world(&cfg, 2000 + seed).unwrap();
            let feature = (seed as usize * 13) % w.config.m_true;
            let task = w.sample_probe_task(100, 16, feature, 0.5, seed).unwrap();
            let codes = w.dictionary_sae_b(8).encode(&task.sample.b.to_mat()).unwrap();
            let (spans, labels) = (&task.spans, &task.labels);
            let means = example_means(&codes, spans).unwrap();
            let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
            let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
            let sel = select_features(&means.select_rows(pos.iter()), &means.select_rows(neg.iter()), 1).unwrap();
            sel == vec![feature]
        })
        .count();

    let accs: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let w: PlantedWorld = generate_world(&cfg, 3000 + seed).unwrap();
            let pair = w.sample_pair(20_000, seed).unwrap();
            let (stitch, _) = train_stitch(&stitch_config(), &[pair.a], &[pair.b]).unwrap();
            let moved = transfer_sae(&w.dictionary_sae_a(8), &stitch).unwrap().params;
            let feature = (seed as usize * 5) % w.config.m_true;
            let task = w.sample_probe_task(400, 8, feature, 0.2, seed + 77).unwrap();
            let hb = task.sample.b.to_mat();
            let truth = probe_accuracy(&w.dictionary_sae_b(8).encode(&hb).unwrap(), &task.spans, &task.labels);
            let transfer = probe_accuracy(&moved.encode(&hb).unwrap(), &task.spans, &task.labels);
            (truth, transfer)
        })
        .collect();
    let truth = accs.iter().map(|a| a.0).sum::<f64>() / accs.len() as f64;
    let transfer = accs.iter().map(|a| a.1).sum::<f64>() / accs.len() as f64;
    check(
        hits >= 95 && transfer >= truth - 0.05,
        format!("selection {hits}/100; accuracy ground truth {truth:.3} vs transfer {transfer:.3}"),
    )
}

fn steering_math() -> Outcome {
    let mut r = rng::seeded(rng::substream(8, "steer"));
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let d = 2 + i % 40;
        let mut v = Vector::from_fn(d, |_, _| rng::normal(&mut r));
        v /= v.norm();
        let sv = SteeringVector {
            v: v.iter().copied().collect(),
            z_bar: 3.0 * rng::normal(&mut r),
            layer: 0,
            label: String::new(),
        };
        let h = Vector::from_fn(d, |_, _| 2.0 * rng::normal(&mut r));
        let once = apply_clamp(&h, &sv);
        let twice = apply_clamp(&once, &sv);
        let perp = |u: &Vector| u - &v * u.dot(&v);
        worst = worst
            .max((once.dot(&v) - sv.z_bar).abs())
            .max((&twice - &once).norm())
            .max((perp(&once) - perp(&h)).norm());
    }
    let g1 = relative_transfer_gap(0.79, 0.81).map_err(|e| e.to_string())?;
    let g2 = relative_transfer_gap(0.0, 0.23).map_err(|e| e.to_string())?;
    let g3 = relative_transfer_gap(0.0, 0.0).map_err(|e| e.to_string())?;
    let fixtures = g1 == 0.79 / 0.81 && (g1 * 1000.0).round() / 1000.0 == 0.975 && g2 == 0.0 && g3 == 0.0;
    // Difference-of-means is exercised too, so the clamp target is real.
    let pos = rng::gaussian_mat(&mut r, 50, 8, 1.0).add_scalar(1.0);
    let neg = rng::gaussian_mat(&mut r, 50, 8, 1.0);
    let sv = compute_steering_vector(&pos, &neg).map_err(|e| e.to_string())?;
    let unit = (sv.direction().norm() - 1.0).abs() < 1e-12;
    check(
        worst < 1e-9 && fixtures && unit,
        format!("max clamp error {worst:.1e} over 10^3 vectors; gaps {g1:.5}, {g2}, {g3}"),
    )
}

fn attribution() -> Outcome {
    let series = |a: Vec<f64>, b: Vec<f64>| AttributionInputs {
        codes_a: Mat::from_column_slice(a.len(), 1, &a),
        codes_b: Mat::from_column_slice(b.len(), 1, &b),
        logit_weights_a: Mat::from_element(a.len(), 1, 1.0),
        logit_weights_b: Mat::from_element(b.len(), 1, 1.0),
        next_token_ids: vec![0; a.len()],
    };
    let mut r = rng::seeded(rng::substream(9, "attr"));
    let a: Vec<f64> = (0..200).map(|_| rng::normal(&mut r)).collect();
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    let same = attribution_correlation(&series(a.clone(), a.clone()), TokenSet::All).unwrap()[0].unwrap();
    let opp = attribution_correlation(&series(a, neg), TokenSet::All).unwrap()[0].unwrap();

    let w = generate_world(&WorldConfig { noise_sigma: 0.02, ..WorldConfig::default() }, 11).unwrap();
    let s = w.sample_pair(10_000, 12).unwrap();
    let theta = w.dictionary_sae_a(8);
    let moved = transfer_sae(&theta, &Stitch::identity(w.config.d_a)).unwrap().params;
    let h = s.a.to_mat();
    let (ua, _) = w.unembeddings(13);
    let n = h.nrows() - 1;
    let head = h.rows(0, n).into_owned();
    let codes_a = theta.encode(&head).unwrap();
    let codes_b = moved.encode(&head).unwrap();
    let live = live_features(&theta, [&head]).unwrap();
    let inputs = AttributionInputs::from_decoders(
        &codes_a,
        &codes_b,
        &theta.w_d,
        &moved.w_d,
        &ua,
        &ua,
        &s.a.token_ids[1..],
        &live,
    )
    .unwrap();
    let corr = attribution_correlation(&inputs, TokenSet::ActivePlusSample { seed: 14 }).unwrap();
    let min = corr.iter().map(|c| c.unwrap_or(f64::NEG_INFINITY)).fold(f64::INFINITY, f64::min);
    check(
        (same - 1.0).abs() < 1e-12 && (opp + 1.0).abs() < 1e-12 && min >= 0.999,
        format!("identical {same}, negated {opp}; self-transfer min {min:.6} over {} live features", live.len()),
    )
}

fn power_law() -> Outcome {
    let (a, beta) = (41.2f64, 0.16f64);
    let points = |noise: &mut dyn FnMut() -> f64| -> Vec<FrontierPoint> {
        (0..10)
            .map(|i| {
                let c = 10f64.powf(12.0 + 6.0 * i as f64 / 9.0);
                FrontierPoint {
                    flops: c,
                    loss: a * c.powf(-beta) * noise(),
                    run_id: "generator".into(),
                }
            })
            .collect()
    };
    let exact = fit_power_law(&points(&mut || 1.0)).map_err(|e| e.to_string())?;
    let exact_ok = (exact.a - a).abs() < 1e-6 && (exact.beta - beta).abs() < 1e-6;
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut r = rng::seeded(rng::indexed(15, seed));
        let fit = fit_power_law(&points(&mut || 1.0 + 0.05 * rng::normal(&mut r))).map_err(|e| e.to_string())?;
        worst = worst.max((fit.beta - beta).abs());
    }
    check(
        exact_ok && worst <= 0.02,
        format!(
            "noiseless A={:.9}, beta={:.9}; worst |beta-0.16| under noise {worst:.4} (100 seeds)",
            exact.a, exact.beta
        ),
    )
}

fn flop_estimator() -> Outcome {
    let single = estimate_flops(&FlopModel::single_affine(300, 70), 1);
    let stitch = estimate_flops(&FlopModel::stitch(512, 768), 200_000_000) as f64;
    let ratio = stitch / 1.4e15;
    check(
        single == 6 * 300 * 70 && (0.5..=2.0).contains(&ratio),
        format!("single affine {single} = 6mn; stitch 512->768 at 2e8 tokens {stitch:.3e} ({ratio:.2}x of 1.4e15)"),
    )
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_stitchkit");
    let chain: &[&[&str]] = &[
        &["gen-synth", "--synth.n_tokens=3000"],
        &["select-layer"],
        &["train-stitch", "--stitch.learning_rate=3e-3", "--stitch.batch_tokens=64"],
        &["transfer-sae"],
        &["train-sae", "--sae.total_tokens=20000", "--sae.latent_size=128", "--sae.learning_rate=1e-3", "--sae.log_every=5"],
        &["eval-sae"],
        &["probe"],
        &["steer-vector"],
        &["analyze-features"],
        &["scaling-report"],
    ];
    let run = |dir: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
        for args in chain {
            let out = Command::new(bin)
                .current_dir(dir)
                .args(*args)
                .args(["--seed", "11"])
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
            }
        }
        let mut csvs = BTreeMap::new();
        for entry in std::fs::read_dir(dir.join("out")).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.extension().is_some_and(|e| e == "csv") {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                csvs.insert(name, std::fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
        Ok(csvs)
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (run(d1.path())?, run(d2.path())?);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(
        differing.is_empty() && a.len() == b.len() && a.len() >= 10,
        format!("{} CSV files from 10 subcommands; differing: {differing:?}", a.len()),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome, dt: Duration| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name}: {detail} [{dt:.1?}]");
    };
    let criteria: &[Criterion] = &[
        ("transferred SAE equals down-SAE-up pipeline", eq5_equivalence),
        ("transferred SAE rank bound", rank_bound),
        ("stitch recovery on planted world", stitch_recovery),
    ];
    for (name, f) in criteria {
        let t0 = Instant::now();
        let outcome = f();
        report(name, outcome, t0.elapsed());
    }
    let t0 = Instant::now();
    let runs = warm_runs();
    let dt = t0.elapsed();
    report("warm-start FLOP savings", warm_start_savings(&runs, dt), dt);
    report("decoder rotation smaller from stitch init", decoder_rotation(&runs), Duration::ZERO);
    let rest: &[Criterion] = &[
        ("TopK invariants", topk_invariants),
        ("SAE gradient check", gradient_check),
        ("SVCCA invariance, selection and symmetry", svcca),
        ("probe feature selection and transfer accuracy", probing),
        ("steering clamp and transfer-gap fixtures", steering_math),
        ("attribution correlation", attribution),
        ("power-law fit", power_law),
        ("FLOP estimator", flop_estimator),
        ("CLI determinism", cli_determinism),
    ];
    for (name, f) in rest {
        let t0 = Instant::now();
        let outcome = f();
        report(name, outcome, t0.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
