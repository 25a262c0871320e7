use adaptive_lqr::bellman::{
    residual_scan, solve_feedback, value_eval, variance_inequality_scan, Sample, ScanExtremum,
};
use adaptive_lqr::closedloop::{
    adaptive_stability_report, simulate, simulate_path, simulate_path_as, stability_margin,
    uniform_stabilizability_check,
};
use adaptive_lqr::filter::{trajectory_header, trajectory_row};
use adaptive_lqr::linalg::{matrix_from_rows, matrix_to_rows};
use adaptive_lqr::riccati::{is_minimal, solve_ensemble};
use adaptive_lqr::{
    entropy, Belief, Classification, DMatrix, DVector, Error, FeedbackCertificate, OpenLoopTable,
    Policy, RegimeEnsemble, Result, SimConfig, ValueKind, ValueSpec,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::params::{Params, PolicyChoice};
use crate::{Command, Table};

pub(crate) struct Outcome {
    pub results: Value,
    pub table: Table,
    pub params: Params,
}

pub(crate) fn dispatch(
    cmd: Command,
    e: &RegimeEnsemble,
    params: Params,
    threads: Option<usize>,
) -> Result<Outcome> {
    match cmd {
        Command::Riccati => riccati(e, params),
        Command::FilterDemo => filter_demo(e, params, threads),
        Command::Simulate => simulate_cmd(e, params, threads),
        Command::CheckCe => check_ce(e, params),
        Command::ResidualScan => residual_scan_cmd(e, params),
        Command::EntropyIdentity => entropy_identity(e, params, threads),
        Command::StabilizeReport => stabilize_report(e, params, threads),
        Command::ScalarIntegrator => scalar_integrator(e, params),
        Command::Compare => {
            let cmp = compare_policies(e, &params, threads)?;
            let mut table = Table::new(cols(&[
                "rank",
                "policy",
                "cost_mean",
                "cost_stderr",
                "modified_cost_mean",
                "modified_cost_stderr",
                "blowups",
            ]));
            for r in &cmp.rows {
                table.rows.push(vec![
                    r.rank.to_string(),
                    r.name.clone(),
                    r.cost_mean.to_string(),
                    r.cost_stderr.to_string(),
                    r.modified_cost_mean.to_string(),
                    r.modified_cost_stderr.to_string(),
                    r.blowups.to_string(),
                ]);
            }
            Ok(Outcome {
                results: serde_json::to_value(&cmp)?,
                table,
                params,
            })
        }
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn horizon(params: &Params) -> Result<f64> {
    params
        .horizon
        .ok_or_else(|| Error::Config("this command needs T=<horizon>".into()))
}

fn sim_config(params: &Params, threads: Option<usize>) -> Result<SimConfig> {
    let mut cfg = SimConfig::new(params.dt, horizon(params)?, params.paths, params.seed);
    cfg.tail_estimate = params.tail;
    cfg.workers = threads;
    cfg.validate()?;
    Ok(cfg)
}

fn certificate(e: &RegimeEnsemble, params: &Params) -> Result<FeedbackCertificate> {
    let vce = ValueSpec::for_ensemble(ValueKind::VCe, e)?;
    solve_feedback(e, &vce.riccati, params.tol)
}

/// The `F` override, or the certificate feedback when one exists.
fn feedback_matrix(e: &RegimeEnsemble, params: &Params) -> Result<(DMatrix<f64>, &'static str)> {
    if let Some(rows) = &params.f {
        let f =
            matrix_from_rows(rows).ok_or_else(|| Error::Config("F is not rectangular".into()))?;
        return Ok((f, "override"));
    }
    let cert = certificate(e, params)?;
    if cert.classification == Classification::None {
        return Err(Error::Config(
            "no F given and the ensemble admits no certainty-equivalence feedback; pass F=<matrix>"
                .into(),
        ));
    }
    Ok((cert.f, "certificate"))
}

fn build_policy(choice: PolicyChoice, e: &RegimeEnsemble, params: &Params) -> Result<Policy> {
    let gradient = |kind| Ok(Policy::BellmanGradient(ValueSpec::for_ensemble(kind, e)?));
    match choice {
        PolicyChoice::Zero => Ok(Policy::Zero),
        PolicyChoice::Lq => Policy::lq_per_regime(e),
        PolicyChoice::Ce => Policy::certainty_equivalent(e, feedback_matrix(e, params)?.0),
        PolicyChoice::BellmanUCe => gradient(ValueKind::UCe),
        PolicyChoice::BellmanVCe => gradient(ValueKind::VCe),
        PolicyChoice::BellmanScaled => gradient(ValueKind::ScaledEntropy {
            lambda: params.lambda_required()?,
        }),
    }
}

fn sample_json(s: &Sample) -> Value {
    json!({
        "x": s.x.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>(),
        "belief": s.belief.as_slice(),
    })
}

fn extremum_json(s: &ScanExtremum) -> Value {
    json!({ "value": s.value, "at": sample_json(&s.sample) })
}

fn riccati(e: &RegimeEnsemble, params: Params) -> Result<Outcome> {
    let sols = solve_ensemble(e)?;
    let mut table = Table::new(cols(&["regime", "row", "col", "K"]));
    let mut regimes = Vec::new();
    for (j, (r, s)) in e.regimes.iter().zip(&sols).enumerate() {
        let m = is_minimal(r);
        regimes.push(json!({
            "regime": j + 1,
            "K": matrix_to_rows(&s.k),
            "gain": matrix_to_rows(&s.gain),
            "spectral_abscissa": s.spectral_abscissa,
            "residual": s.residual,
            "iterations": s.iterations,
            "controllable": m.controllable,
            "observable": m.observable,
        }));
        for row in 0..s.k.nrows() {
            for col in 0..s.k.ncols() {
                table.rows.push(vec![
                    (j + 1).to_string(),
                    row.to_string(),
                    col.to_string(),
                    s.k[(row, col)].to_string(),
                ]);
            }
        }
    }
    Ok(Outcome {
        results: json!({ "regimes": regimes }),
        table,
        params,
    })
}

fn filter_demo(e: &RegimeEnsemble, params: Params, threads: Option<usize>) -> Result<Outcome> {
    let cfg = sim_config(&params, threads)?;
    let pol = build_policy(params.policy, e, &params)?;
    let (rec, trace) = simulate_path(e, &pol, &cfg, params.path)?;
    let mut table = Table::new(trajectory_header(e.len()));
    for row in &trace {
        table.rows.push(trajectory_row(
            row.t,
            &Belief::new(row.belief.clone())?,
            row.quad,
        ));
    }
    let h0 = entropy(&e.prior_belief()?);
    let results = json!({
        "path": rec.path_id,
        "theta": rec.theta,
        "policy": pol.name(),
        "cost": rec.cost,
        "entropy_initial": h0,
        "entropy_final": rec.h_final,
        "quad": rec.quad,
        // zero only in expectation
        "single_path_gap": h0 - rec.h_final - rec.quad,
        "belief_final": rec.belief_final,
        "terminal_msq": rec.terminal_msq,
        "steps": trace.len() - 1,
    });
    Ok(Outcome {
        results,
        table,
        params,
    })
}

fn simulate_cmd(e: &RegimeEnsemble, params: Params, threads: Option<usize>) -> Result<Outcome> {
    let mut cfg = sim_config(&params, threads)?;
    cfg.keep_paths = true;
    let pol = build_policy(params.policy, e, &params)?;
    let mut run = simulate(e, &pol, &cfg)?;
    let mut table = Table::new(cols(&[
        "path_id",
        "theta",
        "cost",
        "H_final",
        "terminal_msq",
    ]));
    for r in run.per_path.take().unwrap_or_default() {
        table.rows.push(vec![
            r.path_id.to_string(),
            r.theta.to_string(),
            r.cost.to_string(),
            r.h_final.to_string(),
            r.terminal_msq.to_string(),
        ]);
    }
    Ok(Outcome {
        results: serde_json::to_value(&run)?,
        table,
        params,
    })
}

fn check_ce(e: &RegimeEnsemble, params: Params) -> Result<Outcome> {
    let vce = ValueSpec::for_ensemble(ValueKind::VCe, e)?;
    let cert = solve_feedback(e, &vce.riccati, params.tol)?;
    let scan = variance_inequality_scan(e, &vce.riccati, params.trials, params.seed)?;
    let scan_holds = scan.value >= -params.scan_tol;
    let mut table = Table::new(cols(&[
        "classification",
        "residual",
        "norm",
        "partial_isometry_defect",
        "faithful",
        "scan_min",
        "scan_holds",
    ]));
    table.rows.push(vec![
        serde_json::to_value(cert.classification)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        cert.residual.to_string(),
        cert.norm.to_string(),
        cert.partial_isometry_defect.to_string(),
        cert.faithful.to_string(),
        scan.value.to_string(),
        scan_holds.to_string(),
    ]);
    let results = json!({
        "certificate": cert,
        "variance_scan": {
            "trials": params.trials,
            "min": extremum_json(&scan),
            "holds": scan_holds,
        },
        // without a faithful signal map a passing scan does not imply a certificate
        "scan_implies_certificate": cert.faithful,
    });
    Ok(Outcome {
        results,
        table,
        params,
    })
}

fn residual_scan_cmd(e: &RegimeEnsemble, params: Params) -> Result<Outcome> {
    let vs = ValueSpec::for_ensemble(params.value_kind()?, e)?;
    let scan = residual_scan(&vs, e, params.trials, params.seed)?;
    let mut header = cols(&["extremum", "value"]);
    header.extend((1..=e.len()).map(|j| format!("p_{j}")));
    let mut table = Table::new(header);
    for (name, x) in [("min", &scan.min), ("max", &scan.max)] {
        let mut row = vec![name.to_string(), x.value.to_string()];
        row.extend(x.sample.belief.as_slice().iter().map(|p| p.to_string()));
        table.rows.push(row);
    }
    let results = json!({
        "value": vs.kind,
        "entropy_weight": vs.entropy_weight(),
        "trials": scan.trials,
        "min": extremum_json(&scan.min),
        "max": extremum_json(&scan.max),
        "supersolution_on_samples": scan.min.value >= -params.scan_tol,
        "subsolution_on_samples": scan.max.value <= params.scan_tol,
    });
    Ok(Outcome {
        results,
        table,
        params,
    })
}

fn entropy_identity(e: &RegimeEnsemble, params: Params, threads: Option<usize>) -> Result<Outcome> {
    let cfg = sim_config(&params, threads)?;
    let pol = build_policy(params.policy, e, &params)?;
    let run = simulate(e, &pol, &cfg)?;
    let bound = 3.0 * run.ledger_gap_stderr + 10.0 * cfg.dt;
    let holds = run.ledger_gap_mean.abs() <= bound;
    let mut table = Table::new(cols(&[
        "H0",
        "E_HT",
        "E_HT_stderr",
        "E_quad",
        "E_quad_stderr",
        "gap",
        "gap_stderr",
        "bound",
        "holds",
    ]));
    table.rows.push(
        [
            run.entropy_initial,
            run.entropy_final_mean,
            run.entropy_final_stderr,
            run.quad_mean,
            run.quad_stderr,
            run.ledger_gap_mean,
            run.ledger_gap_stderr,
            bound,
        ]
        .iter()
        .map(|v| v.to_string())
        .chain([holds.to_string()])
        .collect(),
    );
    let results = json!({
        "H0": run.entropy_initial,
        "E_HT": run.entropy_final_mean,
        "E_HT_stderr": run.entropy_final_stderr,
        "E_quad": run.quad_mean,
        "E_quad_stderr": run.quad_stderr,
        "E_quad_last_decile": run.quad_last_decile_mean,
        "gap": run.ledger_gap_mean,
        "gap_stderr": run.ledger_gap_stderr,
        "bound": bound,
        "holds": holds,
        "run": run,
    });
    Ok(Outcome {
        results,
        table,
        params,
    })
}

fn stabilize_report(
    e: &RegimeEnsemble,
    mut params: Params,
    threads: Option<usize>,
) -> Result<Outcome> {
    let (f, source) = feedback_matrix(e, &params)?;
    if params.horizon.is_none() {
        let abscissas = uniform_stabilizability_check(e, &f)?;
        params.horizon = Some(10.0 / stability_margin(e, &f, &abscissas));
    }
    let mut cfg = sim_config(&params, threads)?;
    let n = params.checkpoints;
    cfg.checkpoints = (1..=n).map(|i| cfg.horizon * i as f64 / n as f64).collect();
    let rep = adaptive_stability_report(e, &f, &cfg)?;
    let mut table = Table::new(cols(&["t", "msq_mean", "msq_stderr"]));
    for c in &rep.decay {
        table.rows.push(vec![
            c.t.to_string(),
            c.msq_mean.to_string(),
            c.msq_stderr.to_string(),
        ]);
    }
    let results = json!({
        "F": matrix_to_rows(&f),
        "F_source": source,
        "report": rep,
    });
    Ok(Outcome {
        results,
        table,
        params,
    })
}

fn scalar_integrator(e: &RegimeEnsemble, params: Params) -> Result<Outcome> {
    if e.input_dim() != 1 {
        return Err(Error::Config(format!(
            "scalar-integrator needs input dimension 1, got {}",
            e.input_dim()
        )));
    }
    let mut cfg = sim_config(&params, Some(1))?;
    cfg.paths = 1;
    let prior = e.prior_belief()?;
    // Open-loop states do not depend on the noise; one path per regime is exact.
    let evaluate = |c: f64| -> Result<(f64, Vec<f64>)> {
        let table = OpenLoopTable::sample(
            |t| DVector::from_element(1, -c * (-t).exp()),
            cfg.horizon,
            cfg.dt,
        )?;
        let pol = Policy::OpenLoop(table);
        let mut cost = 0.0;
        let mut terminal = Vec::with_capacity(e.len());
        for j in 0..e.len() {
            let (rec, _) = simulate_path_as(e, &pol, &cfg, 0, j)?;
            cost += prior[j] * rec.cost;
            terminal.push(rec.terminal_msq.sqrt());
        }
        Ok((cost, terminal))
    };

    let (cost, terminal) = evaluate(params.c)?;
    let mut table = Table::new(cols(&["c", "cost", "max_terminal_norm"]));
    let mut best = (f64::INFINITY, params.c_min);
    for i in 0..params.c_steps {
        let c = if params.c_steps == 1 {
            params.c_min
        } else {
            params.c_min + (params.c_max - params.c_min) * i as f64 / (params.c_steps - 1) as f64
        };
        let (cost, term) = evaluate(c)?;
        let worst = term.iter().copied().fold(0.0, f64::max);
        if worst < best.0 {
            best = (worst, c);
        }
        table
            .rows
            .push(vec![c.to_string(), cost.to_string(), worst.to_string()]);
    }
    let results = json!({
        "c": params.c,
        "cost": cost,
        "terminal_norms": terminal,
        "scan": {
            "smallest_max_terminal_norm": best.0,
            "at_c": best.1,
            "all_regimes_nulled": best.0 <= 1e-9,
        },
    });
    Ok(Outcome {
        results,
        table,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub rank: usize,
    pub policy: PolicyChoice,
    pub name: String,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    pub modified_cost_mean: f64,
    pub modified_cost_stderr: f64,
    pub blowups: usize,
    /// `cost_mean + 3 stderr >= U_ce(x0, p0)`.
    pub above_u_ce: bool,
    /// `modified_cost_mean <= V_ce(x0, p0) + 3 stderr`; only for the CE policy
    /// driven by the certificate feedback.
    pub below_v_ce: Option<bool>,
    #[serde(skip)]
    pub path_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyComparison {
    pub u_ce: f64,
    pub v_ce: f64,
    pub certificate: FeedbackCertificate,
    /// Sorted by `cost_mean`, cheapest first.
    pub rows: Vec<PolicyRow>,
    pub checks_pass: bool,
}

/// Simulates every policy in `params.policies` on the same noise streams.
pub fn compare_policies(
    e: &RegimeEnsemble,
    params: &Params,
    threads: Option<usize>,
) -> Result<PolicyComparison> {
    if params.policies.len() < 2 {
        return Err(Error::Config("compare needs at least two policies".into()));
    }
    let mut cfg = sim_config(params, threads)?;
    cfg.keep_paths = true;
    let x0 = &e.x0;
    let p0 = e.prior_belief()?;
    let u_ce = value_eval(&ValueSpec::for_ensemble(ValueKind::UCe, e)?, x0, &p0)?;
    let v_ce = value_eval(&ValueSpec::for_ensemble(ValueKind::VCe, e)?, x0, &p0)?;
    let cert = certificate(e, params)?;

    let mut rows = Vec::new();
    for &choice in &params.policies {
        let pol = build_policy(choice, e, params)?;
        let certified = choice == PolicyChoice::Ce
            && cert.classification != Classification::None
            && matches!(&pol, Policy::CertaintyEquivalent(f) if (f - &cert.f).norm() <= params.tol.max(1e-12));
        let mut run = simulate(e, &pol, &cfg)?;
        let path_costs = run
            .per_path
            .take()
            .unwrap_or_default()
            .iter()
            .map(|r| r.cost)
            .collect();
        rows.push(PolicyRow {
            rank: 0,
            policy: choice,
            name: pol.name().to_string(),
            cost_mean: run.cost_mean,
            cost_stderr: run.cost_stderr,
            modified_cost_mean: run.modified_cost_mean,
            modified_cost_stderr: run.modified_cost_stderr,
            blowups: run.blowups,
            above_u_ce: run.cost_mean + 3.0 * run.cost_stderr >= u_ce,
            below_v_ce: certified
                .then_some(run.modified_cost_mean <= v_ce + 3.0 * run.modified_cost_stderr),
            path_costs,
        });
    }
    rows.sort_by(|a, b| a.cost_mean.total_cmp(&b.cost_mean));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let checks_pass = rows
        .iter()
        .all(|r| r.above_u_ce && r.below_v_ce != Some(false));
    Ok(PolicyComparison {
        u_ce,
        v_ce,
        certificate: cert,
        rows,
        checks_pass,
    })
}
