//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and their lines are never swallowed by output capture. Set
//! `DHN_ACCEPTANCE=1,6` to run a subset.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{array, Array2};

use dhn_core::abundance::{
    mlnd_log_density, poisson_lognormal_log_likelihood_with_noise, PositiveSubset,
};
use dhn_core::autodiff::{Tape, Var};
use dhn_core::data::{
    generate_synthetic, load_csv, DataKind, Dataset, GenConfig, GroundTruth, Schema, SplitIndex,
    Standardizer, TruthParams,
};
use dhn_core::metrics::{acc, alpha_sweep, evaluate, zrmse};
use dhn_core::model::{train, Ablation, DhnConfig, DhnModel, TrainReport};
use dhn_core::mvp::{mvp_log_likelihood_with_noise, BinaryPattern, CovarianceParam};
use dhn_core::probcore::oracle::{
    central_difference, dense_normal_log_density, orthant_probability,
    poisson_lognormal_quadrature, relative_error,
};
use dhn_core::probcore::{std_normal_cdf, RngStream};
use dhn_core::DhnError;

const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero derivatives.
const REL_FLOOR: f64 = 1e-3;

/// Training setup shared by the synthetic recovery criteria.
const RECOVERY_ROWS: usize = 20_000;
const RECOVERY_FEATURES: usize = 10;
const RECOVERY_TARGETS: usize = 8;
const RECOVERY_EPOCHS: usize = 20;
const RECOVERY_LR: f64 = 1e-4;
const RECOVERY_BATCH: usize = 128;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn say(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("DHN_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: Vec<(u32, &str, fn() -> Verdict)> = vec![
        (1, "orthant-probability consistency", c1_orthant),
        (2, "gradient suite", c2_gradients),
        (
            3,
            "log-normal density and Poisson-log-normal oracles",
            c3_heads,
        ),
        (4, "synthetic recovery, continuous", c4_recovery_continuous),
        (5, "synthetic recovery, count", c5_recovery_count),
        (6, "metric unit cases", c6_metrics),
        (7, "determinism of train and eval", c7_determinism),
        (8, "robustness", c8_robustness),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        say(&format!(
            "criterion {id} [{name}]: {status} ({}) [{:.1}s]",
            v.detail,
            start.elapsed().as_secs_f64()
        ));
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        say(&format!("acceptance: failed criteria {failed:?}"));
        std::process::exit(1);
    }
    say("acceptance: all selected criteria passed");
}

// ---------------------------------------------------------------- 1

/// Monte-Carlo estimate and its standard error for one row, with the
/// per-sample probabilities recomputed outside the tape.
fn mvp_estimate(
    mean: &[f64],
    cov: &CovarianceParam,
    pattern: &[bool],
    k: usize,
    seed: u64,
) -> (f64, f64) {
    let l = mean.len();
    let noise = RngStream::new(seed).normal_matrix(k, l);
    let mut tape = Tape::new();
    let mu = tape.constant(Array2::from_shape_vec((1, l), mean.to_vec()).unwrap());
    let factor = tape.constant(cov.factor());
    let ll = mvp_log_likelihood_with_noise(
        &mut tape,
        mu,
        factor,
        &[BinaryPattern::new(pattern.to_vec())],
        &noise,
    )
    .unwrap();
    let estimate = tape.scalar_value(ll).exp();

    let c = cov.factor();
    let samples: Vec<f64> = noise
        .rows()
        .into_iter()
        .map(|v| {
            (0..l)
                .map(|j| {
                    let w = mean[j] + (0..l).map(|t| c[[j, t]] * v[t]).sum::<f64>();
                    if pattern[j] {
                        std_normal_cdf(w)
                    } else {
                        std_normal_cdf(-w)
                    }
                })
                .product()
        })
        .collect();
    let m = samples.iter().sum::<f64>() / k as f64;
    let var = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (k - 1) as f64;
    (estimate, (var / k as f64).sqrt())
}

fn c1_orthant() -> Verdict {
    const K: usize = 100_000;
    let mut rng = RngStream::new(2024);
    let mut worst = 0.0f64;
    let mut misses = Vec::new();
    for case in 0..20 {
        let l = 1 + case % 3;
        let mean: Vec<f64> = (0..l).map(|_| 0.8 * rng.standard_normal()).collect();
        let raw = Array2::from_shape_fn((l, l), |(i, j)| {
            if i >= j {
                0.8 * rng.standard_normal()
            } else {
                0.0
            }
        });
        let cov = CovarianceParam::from_raw(raw).unwrap();
        let pattern: Vec<bool> = (0..l).map(|_| rng.uniform() < 0.5).collect();
        let signs: Vec<f64> = pattern
            .iter()
            .map(|b| if *b { 1.0 } else { -1.0 })
            .collect();
        let oracle = orthant_probability(&mean, &cov.sigma(), &signs).unwrap();
        let (est, se) = mvp_estimate(&mean, &cov, &pattern, K, 100 + case as u64);
        let z = (est - oracle).abs() / se.max(1e-300);
        worst = worst.max(z);
        if z > 3.0 {
            misses.push(format!(
                "case {case} (L={l}): est {est:.5} oracle {oracle:.5} z {z:.2}"
            ));
        }
    }
    let pinned = CovarianceParam::from_factor(&array![[1.0, 0.0], [1.0, 2e-4]]).unwrap();
    let (p, _) = mvp_estimate(&[0.0, 0.0], &pinned, &[true, true], K, 7);
    let pinned_ok = (p - 1.0 / 3.0).abs() <= 0.01;
    verdict(
        misses.is_empty() && pinned_ok,
        format!(
            "20 configs, worst |z| = {worst:.2} (limit 3){}; pinned 1/3 case gives {p:.4} (limit ±0.01)",
            if misses.is_empty() { String::new() } else { format!(", misses: {}", misses.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

type Build = fn(&mut Tape, &[Var]) -> dhn_core::Result<Var>;

/// Max relative error between tape gradients and central differences of
/// `sum(W ⊙ build(inputs))` for a fixed random weight W.
fn primitive_error(inputs: &[Array2<f64>], build: Build, seed: u64) -> f64 {
    let weights = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
        let out = build(&mut t, &vars).unwrap();
        let (r, c) = t.shape(out);
        RngStream::new(seed).normal_matrix(r, c)
    };
    let objective = |xs: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.variable(x.clone())).collect();
        let out = build(&mut t, &vars).unwrap();
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w);
        let s = t.sum(prod);
        let g = t.backward(s).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get_or_zeros(*v, x.dim()))
            .collect();
        (t.scalar_value(s), grads)
    };
    let (_, grads) = objective(inputs);
    let mut worst = 0.0f64;
    for (n, x) in inputs.iter().enumerate() {
        for ((i, j), _) in x.indexed_iter() {
            let numeric = central_difference(
                |v| {
                    let mut xs = inputs.to_vec();
                    xs[n][[i, j]] = v;
                    objective(&xs).0
                },
                x[[i, j]],
                FD_STEP,
            );
            worst = worst.max(relative_error(grads[n][[i, j]], numeric, REL_FLOOR));
        }
    }
    worst
}

fn away_from_zero(rng: &mut RngStream, r: usize, c: usize) -> Array2<f64> {
    rng.normal_matrix(r, c).mapv(|v| {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

fn spd_from(t: &mut Tape, a: Var) -> Var {
    let (n, _) = t.shape(a);
    let aat = t.matmul_t(a, a);
    let eye = t.constant(Array2::eye(n));
    t.add(aat, eye)
}

fn c2_gradients() -> Verdict {
    let mut rng = RngStream::new(99);
    let mut report = Vec::new();
    let mut worst_primitive = 0.0f64;
    let primitives: Vec<(&str, Vec<(usize, usize)>, Build)> = vec![
        ("add", vec![(3, 4), (3, 4)], |t, v| Ok(t.add(v[0], v[1]))),
        ("sub", vec![(3, 4), (3, 4)], |t, v| Ok(t.sub(v[0], v[1]))),
        ("mul", vec![(3, 4), (3, 4)], |t, v| Ok(t.mul(v[0], v[1]))),
        ("neg", vec![(3, 4)], |t, v| Ok(t.neg(v[0]))),
        ("scale", vec![(3, 4)], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_row", vec![(3, 4), (1, 4)], |t, v| {
            Ok(t.add_row(v[0], v[1]))
        }),
        ("matmul", vec![(3, 2), (2, 4)], |t, v| {
            Ok(t.matmul(v[0], v[1]))
        }),
        ("matmul_t", vec![(3, 2), (4, 2)], |t, v| {
            Ok(t.matmul_t(v[0], v[1]))
        }),
        ("transpose", vec![(3, 4)], |t, v| Ok(t.transpose(v[0]))),
        ("exp", vec![(3, 4)], |t, v| Ok(t.exp(v[0]))),
        ("log", vec![(3, 4)], |t, v| {
            let e = t.exp(v[0]);
            Ok(t.log(e))
        }),
        ("relu", vec![(3, 4)], |t, v| Ok(t.relu(v[0]))),
        ("softplus", vec![(3, 4)], |t, v| Ok(t.softplus(v[0]))),
        ("abs", vec![(3, 4)], |t, v| Ok(t.abs(v[0]))),
        ("norm_cdf", vec![(3, 4)], |t, v| Ok(t.norm_cdf(v[0]))),
        ("log_norm_cdf", vec![(3, 4)], |t, v| {
            let s = t.scale(v[0], 4.0);
            t.log_norm_cdf(s)
        }),
        ("signed_log_norm_cdf", vec![(3, 4)], |t, v| {
            let s = t.scale(v[0], 4.0);
            let ind = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f64);
            t.signed_log_norm_cdf(s, ind)
        }),
        ("sum", vec![(3, 4)], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![(3, 4)], |t, v| Ok(t.mean(v[0]))),
        ("row_sum", vec![(3, 4)], |t, v| Ok(t.row_sum(v[0]))),
        ("reshape", vec![(3, 4)], |t, v| Ok(t.reshape(v[0], 2, 6))),
        ("repeat_rows", vec![(3, 4)], |t, v| {
            Ok(t.repeat_rows(v[0], 3))
        }),
        ("log_mean_exp_rows", vec![(3, 4)], |t, v| {
            let s = t.scale(v[0], 3.0);
            Ok(t.log_mean_exp_rows(s))
        }),
        ("subset_normal_log_density", vec![(3, 4), (4, 4)], |t, v| {
            let cov = spd_from(t, v[1]);
            let obs = array![
                [0.3, -1.0, 0.5, 2.0],
                [1.0, 0.0, -0.4, 0.2],
                [0.1, 0.1, 0.1, 0.1]
            ];
            t.subset_normal_log_density(
                v[0],
                cov,
                &obs,
                &[vec![0, 2, 3], vec![1], vec![0, 1, 2, 3]],
            )
        }),
    ];
    for (name, shapes, build) in &primitives {
        let mut worst = 0.0f64;
        for rep in 0..100 {
            let inputs: Vec<Array2<f64>> = shapes
                .iter()
                .map(|&(r, c)| away_from_zero(&mut rng, r, c))
                .collect();
            worst = worst.max(primitive_error(&inputs, *build, rep));
        }
        if worst >= 1e-4 {
            report.push(format!("{name} {worst:.1e}"));
        }
        worst_primitive = worst_primitive.max(worst);
    }

    let mut worst_e2e = 0.0f64;
    let mut checked = 0usize;
    for kind in [DataKind::Continuous, DataKind::Count] {
        let (err, n) = end_to_end_error(kind);
        worst_e2e = worst_e2e.max(err);
        checked += n;
    }
    verdict(
        worst_primitive < 1e-4 && worst_e2e < 1e-3,
        format!(
            "{} primitives x 100 draws, worst rel. err {worst_primitive:.1e} (limit 1e-4){}; \
             end-to-end L=3 M=4 K=8 over {checked} parameter entries, worst {worst_e2e:.1e} (limit 1e-3)",
            primitives.len(),
            if report.is_empty() { String::new() } else { format!(" [over: {}]", report.join(", ")) }
        ),
    )
}

fn end_to_end_error(kind: DataKind) -> (f64, usize) {
    let mut c = DhnConfig::new(4, 3, kind);
    c.encoder_dims = vec![6, 5];
    c.latent_dim = 4;
    c.head_hidden_dim = 5;
    c.k_train = 8;
    let mut model = DhnModel::new(c, Standardizer::identity(4)).unwrap();
    let mut rng = RngStream::new(31);
    // separate Σ' from Σ so no penalty entry sits exactly on a tie
    let bump = rng.normal_matrix(3, 3) * 0.3;
    let id = model.abundance_cov_id();
    *model.params_mut().value_mut(id) += &bump;
    // zero biases put dead-unit rows exactly on the relu kink
    let ids: Vec<_> = model
        .params()
        .iter()
        .map(|(id, _, v)| (id, v.dim()))
        .collect();
    for (id, (a, b)) in ids {
        *model.params_mut().value_mut(id) += &(rng.normal_matrix(a, b) * 0.05);
    }
    let x = rng.normal_matrix(8, 4);
    let y = match kind {
        DataKind::Continuous => {
            rng.normal_matrix(8, 3)
                .mapv(|v| if v > -0.3 { (0.8 * v).exp() } else { 0.0 })
        }
        DataKind::Count => rng.normal_matrix(8, 3).mapv(|v| {
            if v > -0.3 {
                (1.5 * v + 2.0).floor().max(1.0)
            } else {
                0.0
            }
        }),
    };
    let rows: Vec<usize> = (0..8).collect();
    let stream = RngStream::new(5);
    let analytic = model.loss(&x, &y, &rows, &stream, true).unwrap().grads;
    let mut worst = 0.0f64;
    let mut n = 0;
    let params: Vec<_> = model
        .params()
        .iter()
        .map(|(id, name, v)| (id, name.to_string(), v.clone()))
        .collect();
    for (id, name, value) in params {
        for ((i, j), &base) in value.indexed_iter() {
            if name.ends_with(".cov") && j > i {
                continue;
            }
            let mut probe = model.clone();
            let numeric = central_difference(
                |v| {
                    probe.params_mut().value_mut(id)[[i, j]] = v;
                    probe.loss(&x, &y, &rows, &stream, false).unwrap().loss
                },
                base,
                FD_STEP,
            );
            worst = worst.max(relative_error(analytic[id.0][[i, j]], numeric, REL_FLOOR));
            n += 1;
        }
    }
    (worst, n)
}

// ---------------------------------------------------------------- 3

fn c3_heads() -> Verdict {
    let mut rng = RngStream::new(314);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let l = 1 + case % 6;
        let raw = Array2::from_shape_fn(
            (l, l),
            |(i, j)| if i >= j { rng.standard_normal() } else { 0.0 },
        );
        let cov = CovarianceParam::from_raw(raw).unwrap();
        let sigma = cov.sigma();
        let mut subset: Vec<usize> = (0..l).filter(|_| rng.uniform() < 0.7).collect();
        if subset.is_empty() {
            subset.push(case % l);
        }
        subset.truncate(5);
        let mean: Vec<f64> = (0..l).map(|_| rng.standard_normal()).collect();
        let values: Vec<f64> = subset
            .iter()
            .map(|_| (0.8 * rng.standard_normal()).exp())
            .collect();

        let mut tape = Tape::new();
        let mu = tape.constant(Array2::from_shape_vec((1, l), mean.clone()).unwrap());
        let s = tape.constant(sigma.clone());
        let ps = PositiveSubset::new(subset.clone(), values.clone()).unwrap();
        let d = mlnd_log_density(&mut tape, mu, s, &[ps]).unwrap();
        let got = tape.scalar_value(d);

        let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
        let sub_mean: Vec<f64> = subset.iter().map(|&j| mean[j]).collect();
        let sub_cov = Array2::from_shape_fn((subset.len(), subset.len()), |(a, b)| {
            sigma[[subset[a], subset[b]]]
        });
        let want = dense_normal_log_density(&logs, &sub_mean, &sub_cov);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }

    // y = 2, μ' = 0, Σ' = 1 + 0.5² = 1.25
    const K: usize = 200_000;
    let mut s = RngStream::new(77);
    let identity = s.normal_matrix(K, 1);
    let spread = s.normal_matrix(K, 1);
    let mut tape = Tape::new();
    let mu = tape.constant(array![[0.0]]);
    let factor = tape.constant(array![[0.5]]);
    let subset = PositiveSubset::new(vec![0], vec![2.0]).unwrap();
    let ll = poisson_lognormal_log_likelihood_with_noise(
        &mut tape,
        mu,
        factor,
        &[subset],
        &identity,
        &spread,
    )
    .unwrap();
    let est = tape.scalar_value(ll).exp();
    let samples: Vec<f64> = identity
        .iter()
        .zip(spread.iter())
        .map(|(z, v)| {
            let rate = (z + 0.5 * v).exp();
            rate * rate * (-rate).exp() / 2.0
        })
        .collect();
    let m = samples.iter().sum::<f64>() / K as f64;
    let se = (samples.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / ((K - 1) * K) as f64).sqrt();
    let oracle = poisson_lognormal_quadrature(2, 0.0, 1.25);
    let z = (est - oracle).abs() / se;
    verdict(
        worst <= 1e-10 && z <= 3.0,
        format!(
            "50 subset densities, worst rel. diff {worst:.1e} (limit 1e-10); Poisson-log-normal {est:.5} vs quadrature {oracle:.5}, |z| = {z:.2} (limit 3)"
        ),
    )
}

// ---------------------------------------------------------------- 4, 5

fn recovery_data(kind: DataKind) -> (Dataset, SplitIndex) {
    let truth = GroundTruth::random(
        RECOVERY_FEATURES,
        RECOVERY_TARGETS,
        &TruthParams::default(),
        11,
    );
    let (data, _) = generate_synthetic(&GenConfig {
        n: RECOVERY_ROWS,
        kind,
        seed: 12,
        truth,
    })
    .unwrap();
    let split = SplitIndex::new(data.n_rows(), 13).unwrap();
    (data, split)
}

fn recovery_config(kind: DataKind, ablation: Ablation) -> DhnConfig {
    let mut c = DhnConfig::new(RECOVERY_FEATURES, RECOVERY_TARGETS, kind).with_ablation(ablation);
    c.epochs = RECOVERY_EPOCHS;
    c.batch_size = RECOVERY_BATCH;
    c.optimizer.learning_rate = RECOVERY_LR;
    c.seed = 13;
    c
}

fn fit(data: &Dataset, split: &SplitIndex, config: &DhnConfig) -> (DhnModel, TrainReport) {
    train(data, split, config).unwrap_or_else(|e| panic!("training failed: {e}"))
}

fn c4_recovery_continuous() -> Verdict {
    let (data, split) = recovery_data(DataKind::Continuous);
    let (full, report) = fit(
        &data,
        &split,
        &recovery_config(DataKind::Continuous, Ablation::Full),
    );
    let (plain, _) = fit(
        &data,
        &split,
        &recovery_config(DataKind::Continuous, Ablation::NoCovPenalty),
    );
    let full_eval = evaluate(&full, &data, &split, 0.5).unwrap();
    let plain_eval = evaluate(&plain, &data, &split, 0.5).unwrap();

    let mut curve = vec![report.initial_val_nll];
    curve.extend(report.val_curve().iter().take(5));
    let monotone = curve.windows(2).all(|w| w[1] < w[0]);
    let gap = full_eval.acc - plain_eval.acc;
    let curve_text: Vec<String> = curve.iter().map(|v| format!("{v:.4}")).collect();
    verdict(
        monotone && full_eval.acc >= 0.4 && gap >= 0.03,
        format!(
            "validation NLL start..epoch 5 [{}] monotone: {monotone}; test ACC full {:.4} (limit 0.4); \
             no-cov-penalty {:.4}, gap {gap:+.4} (limit +0.03)",
            curve_text.join(", "),
            full_eval.acc,
            plain_eval.acc
        ),
    )
}

fn c5_recovery_count() -> Verdict {
    let (data, split) = recovery_data(DataKind::Count);
    let (full, _) = fit(
        &data,
        &split,
        &recovery_config(DataKind::Count, Ablation::Full),
    );
    let (mlnd, _) = fit(
        &data,
        &split,
        &recovery_config(DataKind::Count, Ablation::MlndOnly),
    );
    let full_eval = evaluate(&full, &data, &split, 0.5).unwrap();
    let mlnd_eval = evaluate(&mlnd, &data, &split, 0.5).unwrap();
    verdict(
        full_eval.zrmse < mlnd_eval.zrmse,
        format!(
            "test zRMSE(0.5) full {:.4} vs mlnd-only {:.4} (full must be lower); ACC full {:.4}, mlnd-only {:.4}",
            full_eval.zrmse, mlnd_eval.zrmse, full_eval.acc, mlnd_eval.acc
        ),
    )
}

// ---------------------------------------------------------------- 6

fn c6_metrics() -> Verdict {
    let mut notes = Vec::new();
    let y = array![[0.0, 2.0]];
    let p = array![[1.0, 2.0]];
    let z_half = zrmse(&y, &p, 0.5).unwrap();
    let hand = (z_half - 0.5f64.sqrt()).abs() < 1e-12 && zrmse(&y, &p, 0.0).unwrap() == 0.0;
    notes.push(format!("zRMSE hand case {z_half:.12}"));

    let actual = array![
        [0.0, 1.0, 3.0],
        [2.0, 0.0, 0.5],
        [4.0, 5.0, 0.0],
        [1.0, 0.0, 2.0]
    ];
    let plus = acc(&actual, &actual).unwrap().acc;
    let minus = acc(&actual, &(-&actual)).unwrap().acc;
    let signs = (plus - 1.0).abs() < 1e-12 && (minus + 1.0).abs() < 1e-12;
    notes.push(format!("ACC {plus:.12} / {minus:.12}"));

    // exact on positives, positive values at true zeros
    let predicted = actual.mapv(|v| if v > 0.0 { v } else { 1.5 });
    let sweep = alpha_sweep(&actual, &predicted, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    let increasing = sweep.windows(2).all(|w| w[1].1 > w[0].1);
    let values: Vec<String> = sweep.iter().map(|(_, z)| format!("{z:.4}")).collect();
    notes.push(format!("alpha sweep [{}]", values.join(", ")));
    verdict(hand && signs && increasing, notes.join("; "))
}

// ---------------------------------------------------------------- 7, 8

fn dhn(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dhn"))
        .args(args)
        .current_dir(dir)
        .env_remove("DHN_SEED")
        .output()
        .expect("run dhn");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn c7_determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir_in(root.path()).unwrap();
            let steps: [&[&str]; 3] = [
                &[
                    "synth", "--n", "1500", "--m", "5", "--l", "4", "--kind", "count", "--seed",
                    "3", "--out", "d",
                ],
                &[
                    "train",
                    "--data",
                    "d.csv",
                    "--schema",
                    "d.schema",
                    "--epochs",
                    "3",
                    "--seed",
                    "7",
                    "--threads",
                    "1",
                    "--model",
                    "m.json",
                ],
                &[
                    "eval",
                    "--data",
                    "d.csv",
                    "--schema",
                    "d.schema",
                    "--model",
                    "m.json",
                    "--alpha-sweep",
                    "0,0.5,1",
                ],
            ];
            for s in steps {
                let (code, err) = dhn(dir.path(), s);
                assert_eq!(code, 0, "dhn {s:?} failed: {err}");
            }
            dir
        })
        .collect();
    let files = [
        "d.csv",
        "d.schema",
        "d.truth.json",
        "m.json",
        "m.train.txt",
        "m.config.json",
        "m.eval.txt",
        "m.sweep.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(runs[0].path().join(f)).unwrap()
                != std::fs::read(runs[1].path().join(f)).unwrap()
        })
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} output files byte-identical across two runs",
                files.len()
            )
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

fn located(err: &DhnError, row: usize, column: &str) -> bool {
    matches!(err, DhnError::DataAt { row: r, column: c, .. } if *r == row && c == column)
}

fn c8_robustness() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let schema = |kind: DataKind| Schema {
        kind,
        features: vec!["a".into(), "b".into()],
        targets: vec!["s1".into(), "s2".into()],
    };
    let write = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    };
    let neg = load_csv(
        write("neg.csv", "a,b,s1,s2\n1,2,0,3\n1,1,0,-1\n"),
        &schema(DataKind::Continuous),
    )
    .unwrap_err();
    let frac = load_csv(
        write("frac.csv", "a,b,s1,s2\n1,2,2.5,3\n"),
        &schema(DataKind::Count),
    )
    .unwrap_err();
    let nan = load_csv(
        write("nan.csv", "a,b,s1,s2\n1,2,1,3\n0,1,1,1\nNaN,1,0,0\n"),
        &schema(DataKind::Count),
    )
    .unwrap_err();
    let loader_ok = located(&neg, 2, "s2") && located(&frac, 1, "s1") && located(&nan, 3, "a");

    schema(DataKind::Count)
        .save(dir.path().join("bad.schema"))
        .unwrap();
    let (code_data, msg) = dhn(
        dir.path(),
        &[
            "train",
            "--data",
            "neg.csv",
            "--schema",
            "bad.schema",
            "--epochs",
            "1",
        ],
    );
    let cli_data_ok = code_data == 2 && msg.contains("row 2, column 's2'");

    let (code_synth, _) = dhn(
        dir.path(),
        &[
            "synth", "--n", "400", "--m", "3", "--l", "3", "--kind", "count", "--seed", "1",
            "--out", "s",
        ],
    );
    let (code_div, div_msg) = dhn(
        dir.path(),
        &[
            "train", "--data", "s.csv", "--schema", "s.schema", "--epochs", "3", "--lr", "1000",
            "--model", "s.json",
        ],
    );
    let checkpoint = dir.path().join("s.checkpoint.json").exists();
    let (code_l0, _) = dhn(dir.path(), &["synth", "--l", "0"]);
    let last_line = div_msg.lines().last().unwrap_or("").to_string();
    verdict(
        loader_ok && cli_data_ok && code_synth == 0 && code_div == 3 && checkpoint && code_l0 == 1,
        format!(
            "located loader errors: {loader_ok} ({neg} | {frac} | {nan}); CLI data error exit {code_data}; \
             lr=1e3 exit {code_div} (want 3), checkpoint kept: {checkpoint}, message: {last_line}; --l 0 exit {code_l0}"
        ),
    )
}
