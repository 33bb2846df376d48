//! End-to-end acceptance checks. Prints one verdict line per criterion and
//! exits nonzero if any criterion fails. Closed-loop criteria run full
//! 90 s episodes, so expect tens of minutes on a single core.

mod common;

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use auv_mppi::baselines::PidController;
use auv_mppi::config::{load_scenario, ResolvedScenario};
use auv_mppi::costs::{CostFunction, CylinderObstacle, GoalSpec};
use auv_mppi::dynamics::{VehicleModel, VehicleState};
use auv_mppi::lie_se3::{Pose, Twist, UnitQuat};
use auv_mppi::mppi::{compute_weights, rollout_cost, sample_noise, ActionSequence, MppiConfig, MppiController, SampleCost};
use auv_mppi::savgol;
use auv_mppi::sim::{apply_variant, compute_metrics, cruise_health, run_episode, BuoyancyVariant, Controller, Metrics};
use common::*;
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

enum Verdict {
    Pass(String),
    Fail(String),
    Report(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within_budget(start: Instant, budget: f64, ok: bool, detail: String) -> Verdict {
    let secs = start.elapsed().as_secs_f64();
    verdict(ok && secs < budget, format!("{detail}; {secs:.1} s of {budget} s"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ResolvedScenario {
    load_scenario(&configs().join(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Run {
    metrics: Metrics,
    final_x_error: f64,
    health: Option<f64>,
    stopped: bool,
}

fn finish(log: auv_mppi::sim::TrajectoryLog, r: &ResolvedScenario, variant: BuoyancyVariant) -> Run {
    let sc = r.scenario.clone().with_variant(variant);
    let metrics = compute_metrics(&log, &sc).expect("non-empty log");
    let last = log.final_state().expect("non-empty log");
    Run {
        final_x_error: (last.pose.position.x - sc.goal.pose.position.x).abs(),
        health: cruise_health(&log, &sc, 0.01, 0.10),
        stopped: log.stopped(),
        metrics,
    }
}

fn mppi_run(r: &ResolvedScenario, variant: BuoyancyVariant, cfg: MppiConfig) -> Result<Run, String> {
    let model = Arc::new(r.model.clone());
    let sc = r.scenario.clone().with_variant(variant);
    let plant = apply_variant(&model, variant).map_err(|e| e.to_string())?;
    let mut c = MppiController::new(model, r.cost.clone(), cfg).map_err(|e| e.to_string())?;
    let log = run_episode(&mut c, &sc, &plant).map_err(|e| e.to_string())?;
    Ok(finish(log, r, variant))
}

fn mppi_seeds(r: &ResolvedScenario, variant: BuoyancyVariant, base: &MppiConfig) -> Result<Vec<Run>, String> {
    (0..SEEDS)
        .map(|seed| {
            let cfg = MppiConfig {
                seed,
                ..base.clone()
            };
            mppi_run(r, variant, cfg).map_err(|e| format!("seed {seed}: {e}"))
        })
        .collect()
}

fn pid_run(r: &ResolvedScenario, variant: BuoyancyVariant, cascade: bool) -> Run {
    let sc = r.scenario.clone().with_variant(variant);
    let plant = apply_variant(&r.model, variant).unwrap();
    let alloc = r.model.thrusters().clone();
    let mut c: Box<dyn Controller> = if cascade {
        Box::new(PidController::cascade(r.file.pid.cascade, sc.goal, alloc, sc.control_dt))
    } else {
        Box::new(PidController::single(r.file.pid.single, sc.goal, alloc, sc.control_dt))
    };
    finish(run_episode(c.as_mut(), &sc, &plant).unwrap(), r, variant)
}

fn c1_weights() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut argmin_ok = true;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=5000);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let lambda = 10f64.powf(rng.gen_range(-2.0..1.0));
        let mut costs: Vec<SampleCost> = (0..k)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    SampleCost::Rejected
                } else {
                    SampleCost::Finite(rng.gen_range(0.0..scale))
                }
            })
            .collect();
        costs[rng.gen_range(0..k)] = SampleCost::Finite(rng.gen_range(0.0..scale));
        let w = compute_weights(&costs, lambda).unwrap().weights;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let argmin = (0..k)
            .filter(|&i| costs[i].value().is_some())
            .min_by(|&a, &b| costs[a].value().unwrap().total_cmp(&costs[b].value().unwrap()))
            .unwrap();
        let argmax = (0..k).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        argmin_ok &= argmin == argmax || w[argmin] == w[argmax];
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<SampleCost> = costs
            .iter()
            .map(|s| match s {
                SampleCost::Finite(v) => SampleCost::Finite(v + c),
                SampleCost::Rejected => SampleCost::Rejected,
            })
            .collect();
        let ws = compute_weights(&shifted, lambda).unwrap().weights;
        let d = w.iter().zip(&ws).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_shift = worst_shift.max(d);
    }
    let mut three = true;
    for lambda in [0.01, 0.06, 0.5, 1.0, 7.0] {
        let w = compute_weights(
            &[SampleCost::Finite(0.0), SampleCost::Finite(lambda * 3f64.ln())],
            lambda,
        )
        .unwrap()
        .weights;
        three &= (w[0] - 0.75).abs() <= f64::EPSILON && (w[1] - 0.25).abs() <= f64::EPSILON;
    }
    let ok = worst_sum <= 1e-12 && argmin_ok && worst_shift < 1e-10 && three;
    within_budget(
        start,
        5.0,
        ok,
        format!("max |sum-1| {worst_sum:.1e}, argmin=argmax {argmin_ok}, max shift change {worst_shift:.1e}, (0, ln3) case {three}"),
    )
}

fn c2_se3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst_log = 0.0f64;
    for _ in 0..10_000 {
        let w = random_unit_vector(&mut rng) * rng.gen_range(0.0..std::f64::consts::PI - 1e-3);
        let v = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let xi = Twist::new(v, w);
        let back = Pose::exp(&xi).log().unwrap();
        worst_log = worst_log.max((back.to_vector() - xi.to_vector()).amax());
    }
    let mut worst_ad = 0.0f64;
    for _ in 0..1000 {
        let a = random_pose(&mut rng, 3.0, 5.0);
        let b = random_pose(&mut rng, 3.0, 5.0);
        let d = (a * b).adjoint() - a.adjoint() * b.adjoint();
        worst_ad = worst_ad.max(d.amax());
    }
    within_budget(
        start,
        5.0,
        worst_log < 1e-9 && worst_ad < 1e-9,
        format!("exp/log roundtrip {worst_log:.1e}, adjoint homomorphism {worst_ad:.1e}"),
    )
}

fn c3_dynamics() -> Verdict {
    let start = Instant::now();
    let m = VehicleModel::default_rexrov();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst_skew = 0.0f64;
    for _ in 0..10_000 {
        let c = m.coriolis(&random_twist(&mut rng, 3.0, 1.0));
        worst_skew = worst_skew.max((c + c.transpose()).amax());
    }
    let cons = conservative_model();
    let mut worst_drift = 0.0f64;
    for _ in 0..5 {
        let mut x = VehicleState::new(Pose::identity(), random_twist(&mut rng, 1.0, 0.5));
        let e0 = cons.kinetic_energy(&x.velocity);
        for _ in 0..1000 {
            x = cons.step_wrench(&x, &Vector6::zeros(), 0.01);
        }
        worst_drift = worst_drift.max((cons.kinetic_energy(&x.velocity) - e0).abs() / e0);
    }
    let x0 = VehicleState::new(
        Pose::new(Vector3::zeros(), UnitQuat::from_euler(0.1, -0.2, 0.3)),
        Twist::new(Vector3::new(0.8, -0.3, 0.2), Vector3::new(0.2, -0.1, 0.4)),
    );
    let tau = Vector6::new(300.0, -100.0, 200.0, 20.0, -40.0, 60.0);
    let endpoint = |dt: f64| {
        let mut x = x0;
        for _ in 0..(2.0 / dt).round() as usize {
            x = m.step_wrench(&x, &tau, dt);
        }
        let mut v = x.velocity.to_vector();
        for i in 0..3 {
            v[i] += x.pose.position[i];
        }
        v
    };
    let truth = endpoint(1e-4);
    let e1 = (endpoint(0.02) - truth).norm();
    let e2 = (endpoint(0.01) - truth).norm();
    let order = (e1 / e2).log2();
    within_budget(
        start,
        30.0,
        worst_skew < 1e-10 && worst_drift < 1e-3 && order >= 1.9,
        format!("|C+C^T| {worst_skew:.1e}, energy drift {:.2e}%, order {order:.2}", worst_drift * 100.0),
    )
}

fn c4_rollout_oracle() -> Verdict {
    let start = Instant::now();
    let m = VehicleModel::default_rexrov();
    let limits = m.thrust_limits().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    let mut mismatched_rejections = 0;
    let mut rejections = 0;
    for case in 0..100u64 {
        let mut cfg = MppiConfig {
            num_samples: 8,
            horizon: 10,
            seed: case,
            ..MppiConfig::defaults_for(&m)
        };
        cfg = cfg.with_noise_fraction(&m, rng.gen_range(0.005..0.2));
        cfg.control_cost_weight = rng.gen_range(0.0..1.0);
        cfg.lambda = rng.gen_range(0.01..1.0);
        let x0 = VehicleState::new(random_pose(&mut rng, 0.5, 2.0), random_twist(&mut rng, 0.5, 0.2));
        let mut cost = CostFunction::waypoint(GoalSpec::at_rest(random_pose(&mut rng, 1.0, 5.0)));
        if case % 4 == 0 {
            let c = x0.pose.position + Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0);
            cost = cost.with_obstacles(vec![CylinderObstacle::new(c, 0.5, 1.0)], 0.5);
        }
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| limits.iter().map(|l| rng.gen_range(-0.5 * l..0.5 * l)).collect())
            .collect();
        let seq = ActionSequence::from_rows(&rows).unwrap();
        let batch = sample_noise(&cfg, case);
        for k in 0..8 {
            let eps = batch.sample(k);
            let eps_rows: Vec<Vec<f64>> = eps.chunks(limits.len()).map(|c| c.to_vec()).collect();
            let got = rollout_cost(&m, &x0, &seq, eps, &cost, &cfg).unwrap().value();
            let want = ref_rollout_cost(&m, &x0, &rows, &eps_rows, &cost, &cfg);
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => rejections += 1,
                _ => mismatched_rejections += 1,
            }
        }
    }
    within_budget(
        start,
        10.0,
        worst < 1e-10 && mismatched_rejections == 0,
        format!("max deviation {worst:.1e}, {rejections} agreed rejections, {mismatched_rejections} disagreements"),
    )
}

fn c5_forward(runs: &[Run]) -> Verdict {
    let med = |f: &dyn Fn(&Run) -> f64| median(runs.iter().map(f).collect());
    let x = med(&|r| r.final_x_error);
    let over = med(&|r| r.metrics.overshoot_pct);
    let y = med(&|r| r.metrics.max_abs_error[1]);
    let z = med(&|r| r.metrics.max_abs_error[2]);
    let yaw = med(&|r| r.metrics.max_abs_error[3]);
    verdict(
        x < 0.5 && over < 5.0 && y < 0.5 && z < 0.5 && yaw < 0.1,
        format!("median final x error {x:.3} m, overshoot {over:.2}%, max |y| {y:.3} m, max |z| {z:.3} m, max |yaw| {yaw:.4} rad"),
    )
}

fn c6_buoyancy(mppi: &[Run], pid: &Run, cascade: &Run) -> Verdict {
    let z = median(mppi.iter().map(|r| r.metrics.steady_state_error[2]).collect());
    let zp = pid.metrics.steady_state_error[2];
    let zc = cascade.metrics.steady_state_error[2];
    verdict(
        z < 0.3 && z < zp && z < zc,
        format!("steady-state |z|: mppi median {z:.3} m, pid {zp:.3} m, cascade pid {zc:.3} m"),
    )
}

fn c7_obstacles(r: &ResolvedScenario) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in BuoyancyVariant::ALL {
        match mppi_seeds(r, variant, &r.mppi) {
            Ok(runs) => {
                let coll = median(runs.iter().map(|r| r.metrics.collision_count as f64).collect());
                let dist = median(runs.iter().map(|r| r.metrics.final_position_error).collect());
                let worst = runs.iter().map(|r| r.metrics.collision_count).max().unwrap_or(0);
                let stopped = runs.iter().filter(|r| r.stopped).count();
                ok &= coll == 0.0 && dist <= 1.0;
                parts.push(format!(
                    "{}: median collisions {coll}, worst {worst}, median final distance {dist:.3} m, {stopped} of {SEEDS} stopped with every sample rejected",
                    variant.as_str()
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{}: {e}", variant.as_str()));
            }
        }
    }
    verdict(ok, parts.join("; "))
}

fn c8_health(runs: &[Run]) -> Verdict {
    let h: Vec<f64> = runs.iter().map(|r| r.health.unwrap_or(0.0)).collect();
    let lowest = h.iter().copied().fold(f64::INFINITY, f64::min);
    let m = median(h);
    verdict(
        m >= 0.8,
        format!("median healthy cruise fraction {m:.3}, lowest seed {lowest:.3}"),
    )
}

fn c9_filter(r: &ResolvedScenario, plain: &[Run]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst = 0.0f64;
    for window in (3..=21).step_by(2) {
        for order in 0..window.min(6) {
            for degree in 0..=order {
                let coef: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let signal: Vec<f64> = (0..60)
                    .map(|i| {
                        let t = i as f64 / 60.0;
                        coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
                    })
                    .collect();
                let out = savgol::smooth(&signal, window, order).unwrap();
                let h = window / 2;
                for i in h..signal.len() - h {
                    worst = worst.max((out[i] - signal[i]).abs());
                }
            }
        }
    }
    let filter = r.mppi.filter.unwrap_or_default();
    let cfg = MppiConfig {
        filter: Some(filter),
        ..r.mppi.clone()
    };
    let smoothed = match mppi_seeds(r, BuoyancyVariant::Neutral, &cfg) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(format!("filtered runs failed: {e}")),
    };
    let j0 = median(plain.iter().map(|r| r.metrics.thrust_jitter).collect());
    let j1 = median(smoothed.iter().map(|r| r.metrics.thrust_jitter).collect());
    let reduction = 1.0 - j1 / j0;
    let bounds = matches!(c5_forward(&smoothed), Verdict::Pass(_));
    verdict(
        worst < 1e-9 && reduction >= 0.2 && bounds,
        format!(
            "polynomial passthrough {worst:.1e}; window {} order {} jitter {j0:.2} -> {j1:.2} N ({:.0}% less); forward bounds hold {bounds}",
            filter.window,
            filter.poly_order,
            reduction * 100.0
        ),
    )
}

fn c10_timing(r: &ResolvedScenario) -> Verdict {
    let model = Arc::new(r.model.clone());
    let mut c = MppiController::new(model.clone(), r.cost.clone(), r.mppi.clone()).unwrap();
    let mut x = r.scenario.initial;
    let mut times = Vec::new();
    for _ in 0..30 {
        let t = Instant::now();
        let (u, _) = c.control_step(&x).unwrap();
        times.push(t.elapsed().as_secs_f64() * 1e3);
        x = model.step(&x, &u, &Default::default(), r.mppi.dt).unwrap().state;
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Verdict::Report(format!(
        "K={} horizon {} on {} worker(s): mean control step {mean:.1} ms (soft target 100 ms)",
        r.mppi.num_samples,
        r.mppi.horizon,
        rayon::current_num_threads()
    ))
}

fn c11_trends(r: &ResolvedScenario, defaults: &[Run]) -> Verdict {
    let ss_x = |runs: &[Run]| median(runs.iter().map(|r| r.metrics.steady_state_error[0]).collect());
    let settle = |runs: &[Run]| median(runs.iter().map(|r| r.metrics.settling_time.unwrap_or(f64::INFINITY)).collect());
    let with = |k: usize, h: usize| {
        mppi_seeds(
            r,
            BuoyancyVariant::Neutral,
            &MppiConfig {
                num_samples: k,
                horizon: h,
                ..r.mppi.clone()
            },
        )
    };
    let (k250, k1000, h50) = match (with(250, r.mppi.horizon), with(1000, r.mppi.horizon), with(r.mppi.num_samples, 50)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (a, b, c) => {
            let errs: Vec<String> = [a.err(), b.err(), c.err()].into_iter().flatten().collect();
            return Verdict::Fail(errs.join("; "));
        }
    };
    let e = [ss_x(&k250), ss_x(&k1000), ss_x(defaults)];
    let s25 = settle(defaults);
    let s50 = settle(&h50);
    verdict(
        e[0] >= e[1] && e[1] >= e[2] && s25 < s50,
        format!(
            "median steady-state x error K=250/1000/2000: {:.3}/{:.3}/{:.3} m; median settling horizon 25 {s25:.1} s vs 50 {s50:.1} s",
            e[0], e[1], e[2]
        ),
    )
}

fn main() {
    // `cargo test --test acceptance -- 1 4` runs only criteria 1 and 4
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);

    let forward = load("forward.toml");
    let negative = load("forward_negative.toml");
    let obstacles = load("obstacle_course.toml");
    let defaults: OnceCell<Result<Vec<Run>, String>> = OnceCell::new();
    let with_defaults = |f: &dyn Fn(&[Run]) -> Verdict| {
        match defaults.get_or_init(|| mppi_seeds(&forward, BuoyancyVariant::Neutral, &forward.mppi)) {
            Ok(runs) => f(runs),
            Err(e) => Verdict::Fail(format!("forward runs failed: {e}")),
        }
    };

    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Report(d) => ("REPORT", d),
        };
        println!("criterion {id:>2} {tag:<6} {name}: {detail} [{secs:.0} s]");
    };

    report(1, "weight math", &mut c1_weights);
    report(2, "SE(3) identities", &mut c2_se3);
    report(3, "dynamics conservation", &mut c3_dynamics);
    report(4, "rollout oracle", &mut c4_rollout_oracle);
    report(5, "forward task", &mut || with_defaults(&c5_forward));
    report(6, "buoyancy ordering", &mut || {
        let variant = negative.scenario.variant;
        match mppi_seeds(&negative, variant, &negative.mppi) {
            Ok(m) => c6_buoyancy(&m, &pid_run(&negative, variant, false), &pid_run(&negative, variant, true)),
            Err(e) => Verdict::Fail(e),
        }
    });
    report(7, "obstacle course", &mut || c7_obstacles(&obstacles));
    report(8, "cruise health", &mut || with_defaults(&c8_health));
    report(9, "Savitzky-Golay smoothing", &mut || with_defaults(&|r| c9_filter(&forward, r)));
    report(10, "timing", &mut || c10_timing(&forward));
    report(11, "hyperparameter trends", &mut || with_defaults(&|r| c11_trends(&forward, r)));

    if failed > 0 {
        println!("{failed} of the selected criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
