//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use adaptive_lqr::bellman::{
    bellman_residual, random_hyperstate, residual_scan, solve_feedback, value_eval,
    variance_inequality_scan, Classification, ValueKind, ValueSpec, FEEDBACK_TOL, SCAN_TOL,
};
use adaptive_lqr::closedloop::{
    adaptive_stability_report, simulate, simulate_path_as, stability_margin,
    uniform_stabilizability_check, OpenLoopTable, Policy, SimConfig, SimRun,
};
use adaptive_lqr::filter::{innovation_step, FilterState};
use adaptive_lqr::fleet::{
    ce_fleet, double_integrator_fleet, doubled_g_fleet, mixed_dimension_fleet, pm_one_signal_fleet,
    scalar_integrator,
};
use adaptive_lqr::riccati::{riccati_algebraic, riccati_ode};
use adaptive_lqr::{Belief, DMatrix, DVector, LinearRegime, RegimeEnsemble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
    secs: f64,
}

fn v(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn m(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn riccati_closed_form() -> (bool, String) {
    let r = LinearRegime::scalar(0.0, 1.0, 1.0, 1.0);
    let k_t = riccati_ode(&r, 1.0, 10_000).unwrap()[(0, 0)];
    let ode_err = (k_t - 1f64.tanh()).abs();
    let k = riccati_algebraic(&r).unwrap().k[(0, 0)];
    let are_err = (k - 1.0).abs();
    (
        ode_err < 1e-6 && are_err < 1e-10,
        format!("|K(1) - tanh 1| = {ode_err:.2e}, |K - 1| = {are_err:.2e}"),
    )
}

fn riccati_quadratics() -> (bool, String) {
    let mut pass = true;
    let mut detail = Vec::new();
    for (c, want) in [(3f64.sqrt(), 3.0), (1.0, 1.0 + 2f64.sqrt())] {
        let s = riccati_algebraic(&LinearRegime::scalar(1.0, 1.0, c, 0.0)).unwrap();
        let err = (s.k[(0, 0)] - want).abs();
        pass &= err < 1e-9 && s.residual < 1e-9 && s.spectral_abscissa < 0.0;
        detail.push(format!(
            "K = {:.12} (err {err:.1e}, residual {:.1e}, abscissa {:.4})",
            s.k[(0, 0)],
            s.residual,
            s.spectral_abscissa
        ));
    }
    (pass, detail.join("; "))
}

fn filter_closed_form() -> (bool, String) {
    let dt: f64 = 1e-4;
    let z = [v(1.0), v(-1.0)];
    let steps = (0.5 * 3f64.ln() / dt).round() as usize;
    let mut fs = FilterState::new(Belief::uniform(2));
    for _ in 0..steps {
        fs.bayes_update(&z, &v(dt), dt).unwrap();
    }
    let p_err = (fs.belief[0] - 0.75).abs();

    let mut sup: f64 = 0.0;
    for path in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        rng.set_stream(path);
        let theta = (path % 2) as usize;
        let mut b = FilterState::new(Belief::uniform(2));
        let mut i = b.clone();
        for _ in 0..(1.0 / dt).round() as usize {
            let dy = v(z[theta][0] * dt + dt.sqrt() * rng.sample::<f64, _>(StandardNormal));
            b.bayes_update(&z, &dy, dt).unwrap();
            i = innovation_step(&i, &z, &dy, dt).unwrap();
            sup = sup.max((b.belief[0] - i.belief[0]).abs());
        }
    }
    (
        p_err < 1e-4 && sup <= 5.0 * dt,
        format!(
            "|p_1 - 0.75| = {p_err:.2e}; sup |bayes - innovation| = {sup:.2e} (limit {:.1e})",
            5.0 * dt
        ),
    )
}

fn entropy_config(workers: usize) -> SimConfig {
    let mut cfg = SimConfig::new(1e-3, 4.0, 10_000, 4);
    cfg.workers = Some(workers);
    cfg.keep_paths = true;
    cfg
}

fn entropy_identity(run: &SimRun, dt: f64) -> (bool, String) {
    let gap = run.ledger_gap_mean.abs();
    let limit = 3.0 * run.ledger_gap_stderr + 10.0 * dt;
    (
        gap <= limit,
        format!(
            "log 2 = {:.6}, E[H(T)] = {:.6}, E[quad] = {:.6}, |gap| = {gap:.2e} <= {limit:.2e}",
            run.entropy_initial, run.entropy_final_mean, run.quad_mean
        ),
    )
}

fn martingale_and_consistency(run: &SimRun) -> (bool, String) {
    let mut pass = true;
    let mut worst_mart: f64 = 0.0;
    for j in 0..2 {
        let dev = (run.belief_final_mean[j] - 0.5).abs();
        pass &= dev <= 3.0 * run.belief_final_stderr[j];
        worst_mart = worst_mart.max(dev / run.belief_final_stderr[j]);
    }
    let recs = run.per_path.as_ref().unwrap();
    let mut bins_checked = 0;
    let mut worst_bin: f64 = 0.0;
    for j in 0..2 {
        for b in 0..10 {
            let (lo, hi) = (b as f64 / 10.0, (b + 1) as f64 / 10.0);
            let inside: Vec<_> = recs
                .iter()
                .filter(|r| {
                    let p = r.belief_final[j];
                    p >= lo && (p < hi || (b == 9 && p <= 1.0))
                })
                .collect();
            if inside.len() < 20 {
                continue;
            }
            let n = inside.len() as f64;
            let frac = inside.iter().filter(|r| r.theta == j + 1).count() as f64 / n;
            let pbar = inside.iter().map(|r| r.belief_final[j]).sum::<f64>() / n;
            let se = (pbar * (1.0 - pbar) / n).sqrt();
            let miss = (lo - frac).max(frac - hi).max(0.0);
            bins_checked += 1;
            if miss > 3.0 * se {
                pass = false;
            }
            if se > 0.0 {
                worst_bin = worst_bin.max(miss / se);
            } else if miss > 0.0 {
                worst_bin = f64::INFINITY;
            }
        }
    }
    (
        pass,
        format!(
            "E[p(T)] = ({:.4}, {:.4}), worst {worst_mart:.2} stderr; {bins_checked} belief bins, worst miss {worst_bin:.2} stderr",
            run.belief_final_mean[0], run.belief_final_mean[1]
        ),
    )
}

fn ce_config(workers: usize) -> SimConfig {
    let mut cfg = SimConfig::new(1e-3, 12.0, 20_000, 6);
    cfg.tail_estimate = true;
    cfg.workers = Some(workers);
    cfg
}

fn ce_run(workers: usize) -> SimRun {
    let e = ce_fleet();
    simulate(
        &e,
        &Policy::certainty_equivalent(&e, m(1.0)).unwrap(),
        &ce_config(workers),
    )
    .unwrap()
}

fn ce_pipeline(run: &SimRun) -> (bool, String) {
    let e = ce_fleet();
    let vce = ValueSpec::for_ensemble(ValueKind::VCe, &e).unwrap();
    let cert = solve_feedback(&e, &vce.riccati, FEEDBACK_TOL).unwrap();
    let f_ok = (cert.f[(0, 0)] - 1.0).abs() < 1e-10
        && cert.residual < 1e-10
        && cert.classification == Classification::ExactCe;
    let worst = (0..100)
        .map(|k| {
            let s = random_hyperstate(&e, 6, k);
            bellman_residual(&vce, &e, &s.x, &s.belief).unwrap().abs()
        })
        .fold(0.0, f64::max);
    let target = value_eval(&vce, &e.x0, &Belief::uniform(2)).unwrap();
    let err = (run.modified_cost_mean - target).abs();
    let tol = (0.02 * target).max(3.0 * run.modified_cost_stderr);
    (
        f_ok && worst < 1e-10 && err <= tol,
        format!(
            "F = {:.12}, residual {:.1e}, {:?}; max |residual(V_ce)| = {worst:.1e}; modified cost {:.5} +- {:.5} vs V_ce {target:.6}",
            cert.f[(0, 0)],
            cert.residual,
            cert.classification,
            run.modified_cost_mean,
            run.modified_cost_stderr
        ),
    )
}

fn supersolution_sandwich() -> (bool, String) {
    let e = doubled_g_fleet();
    let vce = ValueSpec::for_ensemble(ValueKind::VCe, &e).unwrap();
    let cert = solve_feedback(&e, &vce.riccati, FEEDBACK_TOL).unwrap();
    let mut cfg = SimConfig::new(1e-3, 12.0, 5_000, 7);
    cfg.tail_estimate = true;
    let run = simulate(
        &e,
        &Policy::certainty_equivalent(&e, cert.f.clone()).unwrap(),
        &cfg,
    )
    .unwrap();
    let target = value_eval(&vce, &e.x0, &Belief::uniform(2)).unwrap();
    let min_residual = (0..100)
        .map(|k| {
            let s = random_hyperstate(&e, 7, k);
            bellman_residual(&vce, &e, &s.x, &s.belief).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    let scan = variance_inequality_scan(&e, &vce.riccati, 10_000, 7).unwrap();
    (
        run.modified_cost_mean <= target + 3.0 * run.modified_cost_stderr && min_residual > 0.0 && scan.value >= -SCAN_TOL,
        format!(
            "F = {:.6} ({:?}); modified cost {:.5} +- {:.5} <= V_ce {target:.6}; min residual {min_residual:.2e}; scan min {:.2e}",
            cert.f[(0, 0)],
            cert.classification,
            run.modified_cost_mean,
            run.modified_cost_stderr,
            scan.value
        ),
    )
}

/// The test fleet with a uniformly stabilizing output feedback for each.
fn fleet() -> Vec<(&'static str, RegimeEnsemble, f64)> {
    vec![
        ("ce", ce_fleet(), 1.0),
        ("doubled_g", doubled_g_fleet(), 0.5),
        ("pm_one", pm_one_signal_fleet(), 1.0),
        ("double_integrator", double_integrator_fleet(), 2.0),
        ("mixed_dimension", mixed_dimension_fleet(), -0.3),
    ]
}

fn subsolution_bound() -> (bool, String) {
    let mut pass = true;
    let mut worst = f64::INFINITY;
    let mut cells = 0;
    for (name, e, f) in fleet() {
        let uce = ValueSpec::for_ensemble(ValueKind::UCe, &e).unwrap();
        let bound = value_eval(&uce, &e.x0, &e.prior_belief().unwrap()).unwrap();
        let policies = [
            Policy::Zero,
            Policy::lq_per_regime(&e).unwrap(),
            Policy::certainty_equivalent(&e, m(f)).unwrap(),
            Policy::BellmanGradient(uce.clone()),
        ];
        for pol in policies {
            let mut cfg = SimConfig::new(2e-3, 10.0, 400, 8);
            cfg.tail_estimate = true;
            let run = simulate(&e, &pol, &cfg).unwrap();
            let slack = (run.cost_mean + 3.0 * run.cost_stderr - bound) / bound;
            cells += 1;
            if slack < 0.0 {
                pass = false;
                println!(
                    "    {name}/{}: cost {:.5} +- {:.5} < U_ce {bound:.5}",
                    pol.name(),
                    run.cost_mean,
                    run.cost_stderr
                );
            }
            worst = worst.min(slack);
        }
    }
    (
        pass,
        format!("{cells} cells, smallest relative slack {worst:.3e}"),
    )
}

fn uce_not_supersolution() -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, e, _) in fleet() {
        let uce = ValueSpec::for_ensemble(ValueKind::UCe, &e).unwrap();
        let scan = residual_scan(&uce, &e, 2_000, 9).unwrap();
        pass &= scan.min.value < -SCAN_TOL;
        parts.push(format!("{name} {:.2e}", scan.min.value));
    }
    (
        pass,
        format!("most negative residual: {}", parts.join(", ")),
    )
}

fn adaptive_stabilizability() -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, e, f) in fleet() {
        let f = m(f);
        let abscissas = uniform_stabilizability_check(&e, &f).unwrap();
        let mu = stability_margin(&e, &f, &abscissas);
        let horizon = 10.0 / mu;
        let dt = if horizon <= 12.0 { 1e-3 } else { 5e-3 };
        let cfg = SimConfig::new(dt, horizon, 2_000, 10);
        let rep = adaptive_stability_report(&e, &f, &cfg).unwrap();
        let ok = rep.decay_ratio <= 1e-3 && rep.blowups == 0 && rep.c_witness.is_finite();
        pass &= ok;
        parts.push(format!(
            "{name} {}: mu {mu:.3}, T {horizon:.1}, E|x(T)|^2/|x(0)|^2 = {:.2e} +- {:.1e}, blowups {}, c = {:.3}",
            if ok { "ok" } else { "MISS" },
            rep.decay_ratio,
            rep.terminal_msq_stderr / rep.initial_msq,
            rep.blowups,
            rep.c_witness
        ));
    }
    (pass, parts.join("; "))
}

fn scalar_integrator_example() -> (bool, String) {
    let cfg = SimConfig::new(1e-3, 12.0, 10, 11);
    let family = |c: f64| {
        Policy::OpenLoop(
            OpenLoopTable::sample(|t| v(-c * (-t).exp()), cfg.horizon, cfg.dt).unwrap(),
        )
    };
    let e = scalar_integrator(1.0, -1.0, 0.5);
    let run = simulate(&e, &family(1.0), &cfg).unwrap();
    let cost_err = (run.cost_mean - 0.5).abs();

    let mut pass = cost_err < 1e-6;
    let mut closest: f64 = f64::INFINITY;
    for (xp, xm) in [(1.0, 0.5), (1.0, -0.3), (2.0, 1.0), (-0.5, -1.5)] {
        let e = scalar_integrator(xp, xm, 0.5);
        let floor = 0.5 * f64::abs(xp + xm);
        for k in -40..=40 {
            let pol = family(k as f64 * 0.1);
            let (plus, _) = simulate_path_as(&e, &pol, &cfg, 0, 0).unwrap();
            let (minus, _) = simulate_path_as(&e, &pol, &cfg, 0, 1).unwrap();
            let worst = plus.terminal_msq.sqrt().max(minus.terminal_msq.sqrt());
            pass &= worst >= floor - 1e-9 && worst > 0.0;
            closest = closest.min(worst / floor);
        }
    }
    (
        pass,
        format!("|cost - 1/2| = {cost_err:.2e}; max_j |x_j(T)| never below |x+ + x-|/2 (closest ratio {closest:.4})"),
    )
}

fn determinism(c4: &SimRun, c6: &SimRun) -> (bool, String) {
    let e = pm_one_signal_fleet();
    let mut pass = true;
    for w in [2, 8] {
        pass &= simulate(&e, &Policy::Zero, &entropy_config(w)).unwrap() == *c4;
        pass &= ce_run(w) == *c6;
    }
    (
        pass,
        "entropy and CE runs bit-identical with 1, 2 and 8 workers".into(),
    )
}

fn timed(id: u32, limit: Option<f64>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (mut pass, mut detail) = f();
    let secs = start.elapsed().as_secs_f64();
    if let Some(l) = limit {
        if secs > l {
            pass = false;
            detail.push_str(&format!(" [runtime {secs:.1}s over {l}s]"));
        }
    }
    let o = Outcome {
        id,
        pass,
        detail,
        secs,
    };
    println!(
        "criterion {:>2}: {} ({:.1}s) {}",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.secs,
        o.detail
    );
    o
}

fn main() -> ExitCode {
    // pick up the test-harness style filter, so `cargo test <name>` elsewhere
    // does not rerun the whole suite
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut out = Vec::new();
    out.push(timed(1, Some(1.0), riccati_closed_form));
    out.push(timed(2, Some(1.0), riccati_quadratics));
    out.push(timed(3, Some(10.0), filter_closed_form));

    let e = pm_one_signal_fleet();
    let mut c4_run = None;
    out.push(timed(4, Some(120.0), || {
        let cfg = entropy_config(1);
        let run = simulate(&e, &Policy::Zero, &cfg).unwrap();
        let r = entropy_identity(&run, cfg.dt);
        c4_run = Some(run);
        r
    }));
    let c4_run = c4_run.unwrap();
    out.push(timed(5, None, || martingale_and_consistency(&c4_run)));

    let mut c6_run = None;
    out.push(timed(6, Some(300.0), || {
        let run = ce_run(1);
        let r = ce_pipeline(&run);
        c6_run = Some(run);
        r
    }));
    let c6_run = c6_run.unwrap();
    out.push(timed(7, None, supersolution_sandwich));
    out.push(timed(8, None, subsolution_bound));
    out.push(timed(9, None, uce_not_supersolution));
    out.push(timed(10, None, adaptive_stabilizability));
    out.push(timed(11, None, scalar_integrator_example));
    out.push(timed(12, None, || determinism(&c4_run, &c6_run)));

    let failed: Vec<u32> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        out.len() - failed.len(),
        out.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
