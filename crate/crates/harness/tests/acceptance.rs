//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::{Duration, Instant};

use frugal_core::coord::{alg2_step_masked, momentum_variance_mc, CoordState};
use frugal_core::engine::FrugalConfig;
use frugal_core::linalg::Matrix;
use frugal_core::problems::{NoisyQuadratic, Problem, TinyMlp};
use frugal_core::projection::{build_projector, split_gradient, ProjectionKind, Projector};
use frugal_core::rules::{sgd_step, sgdm_step, Hyper, MomentumState, StateFreeRule, StateFullRule};
use frugal_harness::angles::{run_angle_analysis, AngleConfig};
use frugal_harness::config::{OptimizerSpec, PlainRule, ProblemSpec, RunConfig};
use frugal_harness::experiment::{run_experiment, RunOptions, Summary};
use frugal_harness::memory::{layer_stack, llama_layer_floats, measure_floats, memory_floats};
use frugal_harness::rate::{run_rate_check, RateConfig};
use frugal_harness::toy::{run_reproj_toy, ToyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_s as f64 {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn mlp_run(optimizer: OptimizerSpec, steps: u64) -> Result<Summary, String> {
    let cfg = RunConfig {
        problem: ProblemSpec::TinyMlp {
            dims: vec![2, 16, 2],
            activation: frugal_core::problems::Activation::Tanh,
            samples: 512,
            separation: 0.75,
            batch_size: 64,
            data_seed: 0,
        },
        optimizer,
        steps,
        seeds: vec![0, 1],
        output: None,
        metric_every: 10,
        stochastic: true,
    };
    run_experiment(&cfg, RunOptions::default()).map_err(|e| e.to_string())
}

fn max_param_gap(a: &Summary, b: &Summary) -> f64 {
    a.runs
        .iter()
        .zip(&b.runs)
        .flat_map(|(x, y)| x.final_params.iter().zip(&y.final_params))
        .map(|(p, q)| p.max_abs_diff(q).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let lr = 1e-2;
    let engine = |density: f64| FrugalConfig {
        density,
        update_gap: 20,
        lr_full: lr,
        rule_full: StateFullRule::AdamW,
        rule_free: StateFreeRule::SignSgd,
        ..FrugalConfig::default()
    };
    let full = mlp_run(OptimizerSpec::Frugal { engine: engine(1.0), roles: BTreeMap::new() }, 200)?;
    let adamw = mlp_run(OptimizerSpec::Plain { rule: PlainRule::Adamw, hyper: Hyper::with_lr(lr) }, 200)?;
    let roles: BTreeMap<String, String> =
        ["layer0.bias", "layer1.bias"].map(|n| (n.to_string(), "projectable".to_string())).into();
    let empty = mlp_run(OptimizerSpec::Frugal { engine: engine(0.0), roles }, 200)?;
    let sign = mlp_run(OptimizerSpec::Plain { rule: PlainRule::Signsgd, hyper: Hyper::with_lr(lr) }, 200)?;
    let (d1, d0) = (max_param_gap(&full, &adamw), max_param_gap(&empty, &sign));
    within(start.elapsed(), 10)?;
    check(d1 <= 1e-12 && d0 <= 1e-12, format!("rho=1 vs adamw max gap {d1:.1e}, rho=0 vs signsgd max gap {d0:.1e}"))
}

fn criterion_2() -> Outcome {
    let d = 10;
    let curv = (0..d).map(|j| 1.0 + j as f64 / (d - 1) as f64).collect();
    let q = NoisyQuadratic::new(curv, vec![(1.0 / d as f64).sqrt(); d]).map_err(|e| e.to_string())?;
    let (alpha, beta) = (0.05, 0.9);
    let h = Hyper { lr: alpha, beta1: beta, ..Hyper::default() };
    let mut mismatches = 0;
    for full in [true, false] {
        let mask = vec![full; d];
        let mut state = CoordState::new(q.start());
        let mut reference = Matrix::column_vector(q.start());
        let mut mom = MomentumState::zeros(d, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let g = q.stochastic_grad(&state.x, &mut rng);
            alg2_step_masked(&mut state, &g, &mask, alpha, beta).map_err(|e| e.to_string())?;
            let gm = Matrix::column_vector(g);
            reference = if full {
                let (p, s) = sgdm_step(&reference, &mom, &gm, &h).map_err(|e| e.to_string())?;
                mom = s;
                p
            } else {
                sgd_step(&reference, &gm, &h).map_err(|e| e.to_string())?
            };
            if state.x.as_slice() != reference.as_slice() {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} of 2000 steps differ bitwise"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (bi, beta) in [0.0f64, 0.5, 0.9, 0.99].into_iter().enumerate() {
        let horizon = if beta == 0.0 { 1 } else { ((1e-6f64).ln() / (beta * beta).ln()).ceil() as usize };
        for (si, sigma_sq) in [0.25f64, 1.0, 4.0].into_iter().enumerate() {
            let sigma = vec![(sigma_sq / 4.0).sqrt(); 4];
            let mv = momentum_variance_mc(beta, &sigma, horizon.max(1), 10_000, (bi * 3 + si) as u64)
                .map_err(|e| e.to_string())?;
            worst = worst.max(mv.estimate / mv.bound);
        }
    }
    within(start.elapsed(), 30)?;
    check(worst <= 1.05, format!("largest estimate/bound ratio {worst:.4} over 12 settings"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let r = run_rate_check(&RateConfig::default()).map_err(|e| e.to_string())?;
    within(start.elapsed(), 120)?;
    let worst = r.rows.iter().map(|x| x.mean_grad_sq / x.bound).fold(0.0, f64::max);
    check(
        r.all_within_bound() && r.floors_monotone() && r.rows.len() == 15,
        format!(
            "{} runs, largest mean/bound {worst:.3}, floors monotone: {}",
            r.rows.len(),
            r.floors_monotone()
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_rebuild, mut worst_energy): (f64, f64) = (0.0, 0.0);
    for kind in ProjectionKind::ALL {
        for i in 0..100u64 {
            let (rows, cols) = (rng.random_range(1..9), rng.random_range(1..9));
            let g = gaussian(&mut rng, rows, cols);
            let p = match kind {
                ProjectionKind::Blocks => Projector::block(&[0], (i % 2) as usize, (rows, cols), 0),
                k => build_projector(k, &g, 0.3 + 0.004 * i as f64, i, 0).map_err(|e| e.to_string())?,
            };
            let s = split_gradient(&p, &g).map_err(|e| e.to_string())?;
            let up = p.proj_up(&s.g_full).map_err(|e| e.to_string())?;
            let rebuilt = up.add(&s.g_free).map_err(|e| e.to_string())?;
            worst_rebuild = worst_rebuild.max(rebuilt.max_abs_diff(&g).map_err(|e| e.to_string())?);
            let total = g.norm_sq();
            worst_energy = worst_energy.max((total - up.norm_sq() - s.g_free.norm_sq()).abs() / total);
        }
    }
    check(
        worst_rebuild <= 1e-10 && worst_energy <= 1e-9,
        format!("500 splits, reconstruction {worst_rebuild:.1e}, energy {worst_energy:.1e} relative"),
    )
}

fn criterion_6() -> Outcome {
    let groups = layer_stack(4, 12, 32);
    let parameters: usize = groups.iter().map(|g| g.rows * g.cols).sum();
    let mut failures = Vec::new();
    for rho in [0.25, 0.5] {
        let coordinate = 2.0 * rho * parameters as f64;
        for kind in ProjectionKind::ALL {
            let cfg = FrugalConfig { density: rho, projection: kind, seed: 3, ..FrugalConfig::default() };
            let (measured, active) = measure_floats(&cfg, &groups).map_err(|e| e.to_string())?;
            let report = memory_floats(kind, rho, &groups, 2, Some(&active)).map_err(|e| e.to_string())?;
            let expected = if kind.stores_basis() { coordinate * 13.0 / 12.0 } else { coordinate };
            if measured as f64 != expected || report.predicted_floats != measured || report.closed_form != expected {
                failures.push(format!("{kind:?} rho={rho}: measured {measured}, expected {expected}"));
            }
        }
    }
    let h = 768usize;
    for rho in [0.0625, 0.25, 0.5] {
        let base = rho * (h * h) as f64;
        let randk = llama_layer_floats(ProjectionKind::RandK, rho, h, 2048);
        let svd = llama_layer_floats(ProjectionKind::Svd, rho, h, 2048);
        if randk != 24.0 * base || svd != 26.0 * base {
            failures.push(format!("h=768 rho={rho}: {randk} and {svd}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "census matches 2*rho*P and 13/12 of it for dense bases; 24 and 26 rho h^2 per layer".into()
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let r = run_reproj_toy(&ToyConfig::default()).map_err(|e| e.to_string())?;
    within(start.elapsed(), 60)?;
    let detail = r
        .verdicts
        .iter()
        .map(|v| format!("rank {} passes at lr {:?}", v.rank, v.passing_lrs))
        .collect::<Vec<_>>()
        .join(", ");
    check(r.all_ranks_pass(), detail)
}

fn criterion_8() -> Outcome {
    let r = run_angle_analysis(&AngleConfig::default()).map_err(|e| e.to_string())?;
    check(
        r.svd_min_max_cosine > 0.9 && r.welch.p_value < 0.01 && r.svd_pair_means.len() == 20,
        format!(
            "svd min-max cosine {:.4}, random {:.4}, Welch p {:.2e}",
            r.svd_min_max_cosine, r.random_min_max_cosine, r.welch.p_value
        ),
    )
}

fn criterion_9() -> Outcome {
    let problem = Problem::TinyMlp(TinyMlp::default_classifier(0));
    let params = problem.init_params(3);
    let exact = problem.eval(&params, None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (gi, p) in params.iter().enumerate() {
        for _ in 0..10 {
            let idx = rng.random_range(0..p.len());
            let mut plus = params.clone();
            plus[gi].as_mut_slice()[idx] += h;
            let mut minus = params.clone();
            minus[gi].as_mut_slice()[idx] -= h;
            let lp = problem.eval(&plus, None).map_err(|e| e.to_string())?.loss;
            let lm = problem.eval(&minus, None).map_err(|e| e.to_string())?.loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = exact.grads[gi].as_slice()[idx];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-5));
            checked += 1;
        }
    }
    check(worst <= 1e-5, format!("{checked} coordinates, largest relative error {worst:.1e}"))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/train_tiny_mlp.json");
    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(tag);
        let o = Command::new(env!("CARGO_BIN_EXE_frugal"))
            .args(["train", config, "--seed", "4", "--format", "csv", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("train exited with {}", o.status));
        }
        let file = std::fs::read(out.join("metrics_seed4.csv")).map_err(|e| e.to_string())?;
        Ok((o.stdout, file))
    };
    let (a, b) = (run("a")?, run("b")?);
    check(
        a == b && !a.0.is_empty() && !a.0.contains(&b'\r'),
        format!("two runs: stdout {} bytes, file {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence at density 1 and 0", criterion_1),
        ("coordinate momentum extremes are SGDM and SGD", criterion_2),
        ("momentum noise variance bound", criterion_3),
        ("convergence bound and noise floors", criterion_4),
        ("gradient split correctness", criterion_5),
        ("optimizer-state memory formulas", criterion_6),
        ("re-projection toy ordering", criterion_7),
        ("principal angles of SVD bases", criterion_8),
        ("finite-difference gradient check", criterion_9),
        ("byte-identical train output", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail}; {secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({detail}; {secs:.2}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
