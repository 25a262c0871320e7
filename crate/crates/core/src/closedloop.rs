//! Monte Carlo simulation of the partially observed loop.
//!
//! Each path draws the true regime from the prior, integrates every regime
//! state under the common control, generates observations from the true
//! regime, runs the Bayes filter and applies the policy. The policy only ever
//! sees [`PolicyView`], which carries no regime label.
//!
//! Path `k` uses the ChaCha8 stream `k` of `seed`, so a run is reproducible
//! bit for bit regardless of how paths are spread over threads, and two
//! policies run with the same seed share their random numbers.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::ValueSpec;
use crate::error::{Error, Result};
use crate::filter::FilterState;
use crate::linalg::{op_norm, zoh_discretize};
use crate::regime::{
    conditional_variance_with, entropy, mix_into, validate_ensemble, Belief, RegimeEnsemble,
};
use crate::riccati::{solve_ensemble, spectral_abscissa, RiccatiSolution};

/// A path is aborted once `|x_theta|` or some `p_j |x_j|` exceeds this.
pub const BLOWUP_NORM: f64 = 1e8;

/// Everything a policy may look at.
#[derive(Debug, Clone, Copy)]
pub struct PolicyView<'a> {
    pub t: f64,
    pub dt: f64,
    pub x: &'a [DVector<f64>],
    pub belief: &'a Belief,
    pub zhat: &'a DVector<f64>,
}

/// Piecewise-linear control table, held constant beyond its ends.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopTable {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl OpenLoopTable {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Config(format!(
                "open-loop table has {} times and {} values",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "open-loop times must be strictly increasing".into(),
            ));
        }
        if values
            .iter()
            .any(|v| v.len() != values[0].len() || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Config(
                "open-loop values must be finite and of one dimension".into(),
            ));
        }
        Ok(Self { times, values })
    }

    /// Samples `f` at the step midpoints of a `dt` grid on `[0, horizon]`,
    /// which is where the simulator evaluates open-loop controls.
    pub fn sample(f: impl Fn(f64) -> DVector<f64>, horizon: f64, dt: f64) -> Result<Self> {
        let steps = steps_for(horizon, dt)?;
        let times: Vec<f64> = (0..steps).map(|k| (k as f64 + 0.5) * dt).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn eval_into(&self, t: f64, out: &mut DVector<f64>) {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            out.copy_from(&self.values[0]);
        } else if k == self.times.len() {
            out.copy_from(&self.values[k - 1]);
        } else {
            let (t0, t1) = (self.times[k - 1], self.times[k]);
            let w = (t - t0) / (t1 - t0);
            out.copy_from(&self.values[k - 1]);
            *out *= 1.0 - w;
            out.axpy(w, &self.values[k], 1.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Zero,
    /// LQ feedback of the most probable regime (lowest index on ties).
    LqPerRegime(Vec<RiccatiSolution>),
    /// `u = -F z_hat`.
    CertaintyEquivalent(DMatrix<f64>),
    /// `u = -sum_j B_j' grad_j f` for a value candidate `f`.
    BellmanGradient(ValueSpec),
    /// `u(t)` from a table, evaluated at step midpoints.
    OpenLoop(OpenLoopTable),
}

impl Policy {
    pub fn lq_per_regime(e: &RegimeEnsemble) -> Result<Self> {
        Ok(Policy::LqPerRegime(solve_ensemble(e)?))
    }

    pub fn certainty_equivalent(e: &RegimeEnsemble, f: DMatrix<f64>) -> Result<Self> {
        let p = Policy::CertaintyEquivalent(f);
        p.check(e)?;
        Ok(p)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Zero => "zero",
            Policy::LqPerRegime(_) => "lq_per_regime",
            Policy::CertaintyEquivalent(_) => "certainty_equivalent",
            Policy::BellmanGradient(_) => "bellman_gradient",
            Policy::OpenLoop(_) => "open_loop",
        }
    }

    pub fn check(&self, e: &RegimeEnsemble) -> Result<()> {
        let (i, o) = (e.input_dim(), e.output_dim());
        let check_sols = |sols: &[RiccatiSolution]| {
            if sols.len() != e.len()
                || sols
                    .iter()
                    .zip(&e.regimes)
                    .any(|(s, r)| s.state_dim() != r.state_dim() || s.gain.nrows() != i)
            {
                Err(Error::Dimension(
                    "Riccati solutions do not match the ensemble".into(),
                ))
            } else {
                Ok(())
            }
        };
        match self {
            Policy::Zero => Ok(()),
            Policy::LqPerRegime(sols) => check_sols(sols),
            Policy::BellmanGradient(vs) => check_sols(&vs.riccati),
            Policy::CertaintyEquivalent(f) => {
                if f.shape() != (i, o) {
                    Err(Error::Dimension(format!(
                        "F is {}x{}, expected {i}x{o}",
                        f.nrows(),
                        f.ncols()
                    )))
                } else if f.iter().any(|v| !v.is_finite()) {
                    Err(Error::Config("F has non-finite entries".into()))
                } else {
                    Ok(())
                }
            }
            Policy::OpenLoop(table) => {
                if table.dim() != i {
                    Err(Error::Dimension(format!(
                        "open-loop control has dimension {}, expected {i}",
                        table.dim()
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Writes the control for `view` into `u`.
    pub fn control(&self, view: &PolicyView<'_>, u: &mut DVector<f64>) {
        match self {
            Policy::Zero => u.fill(0.0),
            Policy::LqPerRegime(sols) => {
                let p = view.belief.as_slice();
                let mut j = 0;
                for (k, &pk) in p.iter().enumerate() {
                    if pk > p[j] {
                        j = k;
                    }
                }
                u.gemv(-1.0, &sols[j].gain, &view.x[j], 0.0);
            }
            Policy::CertaintyEquivalent(f) => u.gemv(-1.0, f, view.zhat, 0.0),
            Policy::BellmanGradient(vs) => vs.feedback_into(view.x, view.belief.as_slice(), u),
            Policy::OpenLoop(table) => table.eval_into(view.t + 0.5 * view.dt, u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    /// Add `1/2 <K_theta x(T), x(T)>` to each path cost.
    #[serde(default)]
    pub tail_estimate: bool,
    /// Thread count; `None` uses the global pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub keep_paths: bool,
    /// Times at which `E|x_theta(t)|^2` is recorded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<f64>,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, paths: usize, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            paths,
            seed,
            tail_estimate: false,
            workers: None,
            keep_paths: false,
            checkpoints: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        steps_for(self.horizon, self.dt)?;
        if self.paths == 0 {
            return Err(Error::Config("paths must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(t) = self
            .checkpoints
            .iter()
            .find(|&&t| !(0.0..=self.horizon).contains(&t))
        {
            return Err(Error::Config(format!("checkpoint {t} outside [0, T]")));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        steps_for(self.horizon, self.dt).unwrap_or(0)
    }
}

fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if !(horizon >= dt && horizon.is_finite()) {
        return Err(Error::Config(format!(
            "T must be at least dt, got T = {horizon}"
        )));
    }
    Ok(((horizon / dt).round() as usize).max(1))
}

/// Outcome of one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub path_id: usize,
    /// 1-based true regime.
    pub theta: usize,
    /// Running cost, plus the tail term when enabled.
    pub cost: f64,
    pub tail: f64,
    pub h_final: f64,
    pub quad: f64,
    /// Part of `quad` accrued over the last tenth of the horizon.
    pub quad_last_decile: f64,
    /// `|x_theta(T)|^2`.
    pub terminal_msq: f64,
    pub belief_final: Vec<f64>,
    pub checkpoint_msq: Vec<f64>,
    pub blew_up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub t: f64,
    pub msq_mean: f64,
    pub msq_stderr: f64,
}

/// Monte Carlo aggregate over the paths that did not blow up.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRun {
    pub policy: String,
    pub paths: usize,
    pub completed: usize,
    pub blowups: usize,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// Cost plus final entropy.
    pub modified_cost_mean: f64,
    pub modified_cost_stderr: f64,
    pub entropy_initial: f64,
    pub entropy_final_mean: f64,
    pub entropy_final_stderr: f64,
    pub quad_mean: f64,
    pub quad_stderr: f64,
    pub quad_last_decile_mean: f64,
    /// Mean of `H(p) - H(p(T)) - quad`.
    pub ledger_gap_mean: f64,
    pub ledger_gap_stderr: f64,
    pub terminal_state_msq: f64,
    pub terminal_state_msq_stderr: f64,
    /// Always zero: the simulator runs the Bayes filter, which never leaves
    /// the simplex. Kept for report compatibility with innovation runs.
    pub clamp_count: u64,
    pub belief_final_mean: Vec<f64>,
    pub belief_final_stderr: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_path: Option<Vec<PathRecord>>,
}

/// Mean and standard error, summed in index order.
pub fn mean_stderr(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-step record of a traced path.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub belief: Vec<f64>,
    pub quad: f64,
    pub u: Vec<f64>,
    pub x_theta: Vec<f64>,
}

struct Kernel<'a> {
    e: &'a RegimeEnsemble,
    pol: &'a Policy,
    cfg: &'a SimConfig,
    prior: Belief,
    cumulative: Vec<f64>,
    zoh: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    tail_k: Option<Vec<DMatrix<f64>>>,
    steps: usize,
    checkpoint_steps: Vec<usize>,
}

impl<'a> Kernel<'a> {
    fn new(e: &'a RegimeEnsemble, pol: &'a Policy, cfg: &'a SimConfig) -> Result<Self> {
        let diags = validate_ensemble(e);
        if !diags.is_empty() {
            return Err(Error::InvalidEnsemble(diags));
        }
        cfg.validate()?;
        pol.check(e)?;
        let prior = e.prior_belief()?;
        let mut acc = 0.0;
        let cumulative = prior
            .as_slice()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let zoh = e
            .regimes
            .iter()
            .map(|r| zoh_discretize(&r.a, &r.b, cfg.dt))
            .collect();
        let tail_k = if cfg.tail_estimate {
            let sols = match pol {
                Policy::LqPerRegime(s) => s.clone(),
                Policy::BellmanGradient(vs) => vs.riccati.clone(),
                _ => solve_ensemble(e)?,
            };
            Some(sols.into_iter().map(|s| s.k).collect())
        } else {
            None
        };
        let steps = cfg.steps();
        let checkpoint_steps = cfg
            .checkpoints
            .iter()
            .map(|t| ((t / cfg.dt).round() as usize).min(steps))
            .collect();
        Ok(Self {
            e,
            pol,
            cfg,
            prior,
            cumulative,
            zoh,
            tail_k,
            steps,
            checkpoint_steps,
        })
    }

    fn draw_theta(&self, rng: &mut ChaCha8Rng) -> usize {
        let r: f64 = rng.random();
        let last = self
            .prior
            .as_slice()
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(0);
        self.cumulative
            .iter()
            .zip(self.prior.as_slice())
            .position(|(&c, &p)| p > 0.0 && r < c)
            .unwrap_or(last)
    }

    fn run(
        &self,
        path: usize,
        theta_override: Option<usize>,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<PathRecord> {
        let e = self.e;
        let dt = self.cfg.dt;
        let sqdt = dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(path as u64);
        let drawn = self.draw_theta(&mut rng);
        let theta = theta_override.unwrap_or(drawn);
        let ctheta = &e.regimes[theta].c;

        let mut x: Vec<DVector<f64>> = e.x0.clone();
        let mut xn: Vec<DVector<f64>> = x.clone();
        let mut z: Vec<DVector<f64>> = e.regimes.iter().zip(&x).map(|(r, xj)| &r.g * xj).collect();
        let mut zhat = DVector::zeros(e.output_dim());
        let mut dy = DVector::zeros(e.output_dim());
        let mut u = DVector::zeros(e.input_dim());
        let mut cx = DVector::zeros(ctheta.nrows());
        let mut fs = FilterState::new(self.prior.clone());

        cx.gemv(1.0, ctheta, &x[theta], 0.0);
        let mut c_prev = cx.norm_squared();
        let mut cost = 0.0;
        let mut quad = 0.0;
        let mut quad_last = 0.0;
        let decile_start = self.steps - self.steps / 10;
        let mut checkpoint_msq = vec![0.0; self.checkpoint_steps.len()];
        let record_checkpoints = |k: usize, x: &[DVector<f64>], out: &mut [f64]| {
            for (slot, &s) in out.iter_mut().zip(&self.checkpoint_steps) {
                if s == k {
                    *slot = x[theta].norm_squared();
                }
            }
        };
        record_checkpoints(0, &x, &mut checkpoint_msq);

        for k in 0..self.steps {
            let t = k as f64 * dt;
            let p = fs.belief.as_slice();
            mix_into(&z, p, &mut zhat);
            let dq = 0.5 * conditional_variance_with(&z, p, &zhat) * dt;
            quad += dq;
            if k >= decile_start {
                quad_last += dq;
            }
            self.pol.control(
                &PolicyView {
                    t,
                    dt,
                    x: &x,
                    belief: &fs.belief,
                    zhat: &zhat,
                },
                &mut u,
            );
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TraceRow {
                    t,
                    belief: fs.belief.as_slice().to_vec(),
                    quad: quad - dq,
                    u: u.iter().copied().collect(),
                    x_theta: x[theta].iter().copied().collect(),
                });
            }

            for d in dy.iter_mut() {
                *d = sqdt * rng.sample::<f64, _>(StandardNormal);
            }
            dy.axpy(dt, &z[theta], 1.0);
            fs.bayes_update(&z, &dy, dt)?;

            for (j, (phi, gamma)) in self.zoh.iter().enumerate() {
                xn[j].gemv(1.0, phi, &x[j], 0.0);
                xn[j].gemv(1.0, gamma, &u, 1.0);
                std::mem::swap(&mut x[j], &mut xn[j]);
            }
            // A discredited unstable regime may grow without bound while its
            // belief weight decays faster; only weighted states reach the loop.
            let blown = !(x[theta].norm() <= BLOWUP_NORM)
                || x.iter()
                    .zip(fs.belief.as_slice())
                    .any(|(xj, &pj)| pj > 0.0 && !(pj * xj.norm() <= BLOWUP_NORM));
            if blown || !u.iter().all(|v| v.is_finite()) {
                return Ok(PathRecord {
                    path_id: path,
                    theta: theta + 1,
                    cost: f64::NAN,
                    tail: f64::NAN,
                    h_final: f64::NAN,
                    quad,
                    quad_last_decile: quad_last,
                    terminal_msq: f64::NAN,
                    belief_final: fs.belief.as_slice().to_vec(),
                    checkpoint_msq,
                    blew_up: true,
                });
            }
            cx.gemv(1.0, ctheta, &x[theta], 0.0);
            let c_next = cx.norm_squared();
            cost += 0.5 * (0.5 * (c_prev + c_next) + u.norm_squared()) * dt;
            c_prev = c_next;
            for ((zj, r), xj) in z.iter_mut().zip(&e.regimes).zip(&x) {
                zj.gemv(1.0, &r.g, xj, 0.0);
            }
            record_checkpoints(k + 1, &x, &mut checkpoint_msq);
        }

        let tail = match &self.tail_k {
            Some(ks) => 0.5 * x[theta].dot(&(&ks[theta] * &x[theta])),
            None => 0.0,
        };
        if let Some(tr) = trace {
            tr.push(TraceRow {
                t: self.steps as f64 * dt,
                belief: fs.belief.as_slice().to_vec(),
                quad,
                u: u.iter().copied().collect(),
                x_theta: x[theta].iter().copied().collect(),
            });
        }
        Ok(PathRecord {
            path_id: path,
            theta: theta + 1,
            cost: cost + tail,
            tail,
            h_final: entropy(&fs.belief),
            quad,
            quad_last_decile: quad_last,
            terminal_msq: x[theta].norm_squared(),
            belief_final: fs.belief.as_slice().to_vec(),
            checkpoint_msq,
            blew_up: false,
        })
    }
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|err| Error::Config(format!("thread pool: {err}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs `cfg.paths` independent paths under `pol`.
pub fn simulate(e: &RegimeEnsemble, pol: &Policy, cfg: &SimConfig) -> Result<SimRun> {
    let kernel = Kernel::new(e, pol, cfg)?;
    let records: Vec<PathRecord> = in_pool(cfg.workers, || {
        (0..cfg.paths)
            .into_par_iter()
            .map(|k| kernel.run(k, None, None))
            .collect::<Result<Vec<_>>>()
    })??;
    aggregate(e, pol, cfg, &kernel, records)
}

/// One path with its per-step trace.
pub fn simulate_path(
    e: &RegimeEnsemble,
    pol: &Policy,
    cfg: &SimConfig,
    path: usize,
) -> Result<(PathRecord, Vec<TraceRow>)> {
    let kernel = Kernel::new(e, pol, cfg)?;
    let mut trace = Vec::with_capacity(kernel.steps + 1);
    let rec = kernel.run(path, None, Some(&mut trace))?;
    Ok((rec, trace))
}

/// As [`simulate_path`] with the true regime forced to `theta` (0-based).
/// The noise stream is the one path `path` would use.
pub fn simulate_path_as(
    e: &RegimeEnsemble,
    pol: &Policy,
    cfg: &SimConfig,
    path: usize,
    theta: usize,
) -> Result<(PathRecord, Vec<TraceRow>)> {
    if theta >= e.len() {
        return Err(Error::Config(format!(
            "regime {} does not exist",
            theta + 1
        )));
    }
    let kernel = Kernel::new(e, pol, cfg)?;
    let mut trace = Vec::with_capacity(kernel.steps + 1);
    let rec = kernel.run(path, Some(theta), Some(&mut trace))?;
    Ok((rec, trace))
}

fn aggregate(
    e: &RegimeEnsemble,
    pol: &Policy,
    cfg: &SimConfig,
    kernel: &Kernel<'_>,
    records: Vec<PathRecord>,
) -> Result<SimRun> {
    let blowups = records.iter().filter(|r| r.blew_up).count();
    if blowups as f64 > 0.01 * cfg.paths as f64 {
        return Err(Error::BlowUp {
            failed: blowups,
            paths: cfg.paths,
            limit: cfg.paths / 100,
        });
    }
    let ok: Vec<&PathRecord> = records.iter().filter(|r| !r.blew_up).collect();
    let h0 = entropy(&kernel.prior);
    let stat = |f: &dyn Fn(&PathRecord) -> f64| mean_stderr(ok.iter().map(|r| f(r)));
    let (cost_mean, cost_stderr) = stat(&|r| r.cost);
    let (modified_cost_mean, modified_cost_stderr) = stat(&|r| r.cost + r.h_final);
    let (entropy_final_mean, entropy_final_stderr) = stat(&|r| r.h_final);
    let (quad_mean, quad_stderr) = stat(&|r| r.quad);
    let (quad_last_decile_mean, _) = stat(&|r| r.quad_last_decile);
    let (ledger_gap_mean, ledger_gap_stderr) = stat(&|r| h0 - r.h_final - r.quad);
    let (terminal_state_msq, terminal_state_msq_stderr) = stat(&|r| r.terminal_msq);
    let (belief_final_mean, belief_final_stderr) =
        (0..e.len()).map(|j| stat(&|r| r.belief_final[j])).unzip();
    let checkpoints = cfg
        .checkpoints
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            let (m, s) = stat(&|r| r.checkpoint_msq[c]);
            Checkpoint {
                t,
                msq_mean: m,
                msq_stderr: s,
            }
        })
        .collect();
    Ok(SimRun {
        policy: pol.name().to_string(),
        paths: cfg.paths,
        completed: ok.len(),
        blowups,
        cost_mean,
        cost_stderr,
        modified_cost_mean,
        modified_cost_stderr,
        entropy_initial: h0,
        entropy_final_mean,
        entropy_final_stderr,
        quad_mean,
        quad_stderr,
        quad_last_decile_mean,
        ledger_gap_mean,
        ledger_gap_stderr,
        terminal_state_msq,
        terminal_state_msq_stderr,
        clamp_count: 0,
        belief_final_mean,
        belief_final_stderr,
        checkpoints,
        per_path: cfg.keep_paths.then_some(records),
    })
}

/// CSV with columns `path_id, theta, cost, H_final, terminal_msq`.
pub fn write_paths_csv<W: Write>(records: &[PathRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["path_id", "theta", "cost", "H_final", "terminal_msq"])?;
    for r in records {
        wtr.write_record([
            r.path_id.to_string(),
            r.theta.to_string(),
            r.cost.to_string(),
            r.h_final.to_string(),
            r.terminal_msq.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `spectral_abscissa(A_j - B_j F G_j)` for each regime.
pub fn uniform_stabilizability_check(e: &RegimeEnsemble, f: &DMatrix<f64>) -> Result<Vec<f64>> {
    if f.shape() != (e.input_dim(), e.output_dim()) {
        return Err(Error::Dimension(format!(
            "F is {}x{}, expected {}x{}",
            f.nrows(),
            f.ncols(),
            e.input_dim(),
            e.output_dim()
        )));
    }
    Ok(e.regimes
        .iter()
        .map(|r| spectral_abscissa(&(&r.a - &r.b * f * &r.g)))
        .collect())
}

/// Largest `mu` with `Re spec(A_j - B_j F G_j) <= -mu` such that `1/mu` also
/// bounds `|B_j|`, `|C_j|`, `|G_j|` and `|F|`.
pub fn stability_margin(e: &RegimeEnsemble, f: &DMatrix<f64>, abscissas: &[f64]) -> f64 {
    let decay = -abscissas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bound = e
        .regimes
        .iter()
        .flat_map(|r| [op_norm(&r.b), op_norm(&r.c), op_norm(&r.g)])
        .fold(op_norm(f), f64::max);
    if bound > 0.0 {
        decay.min(1.0 / bound)
    } else {
        decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub abscissas: Vec<f64>,
    /// See [`stability_margin`].
    pub mu: f64,
    pub horizon: f64,
    /// `sum_j p_j |x_j(0)|^2`.
    pub initial_msq: f64,
    pub terminal_msq: f64,
    pub terminal_msq_stderr: f64,
    /// `terminal_msq / initial_msq`.
    pub decay_ratio: f64,
    pub decay: Vec<Checkpoint>,
    pub modified_cost_mean: f64,
    pub modified_cost_stderr: f64,
    /// `modified cost / (1/2 sum_j p_j |x_j|^2 + H(p))`.
    pub c_witness: f64,
    pub blowups: usize,
    pub run: SimRun,
}

/// Closed-loop run under `u = -F z_hat` with decay diagnostics. Without
/// explicit checkpoints, ten evenly spaced horizons are recorded.
pub fn adaptive_stability_report(
    e: &RegimeEnsemble,
    f: &DMatrix<f64>,
    cfg: &SimConfig,
) -> Result<StabilityReport> {
    let abscissas = uniform_stabilizability_check(e, f)?;
    if abscissas.iter().any(|a| !(*a < 0.0)) {
        return Err(Error::NotStabilizable { abscissas });
    }
    let mu = stability_margin(e, f, &abscissas);
    let mut cfg = cfg.clone();
    if cfg.checkpoints.is_empty() {
        cfg.checkpoints = (1..=10).map(|k| cfg.horizon * k as f64 / 10.0).collect();
    }
    let run = simulate(e, &Policy::certainty_equivalent(e, f.clone())?, &cfg)?;
    let prior = e.prior_belief()?;
    let initial_msq = e.initial_state_msq();
    let denom = 0.5 * initial_msq + entropy(&prior);
    Ok(StabilityReport {
        mu,
        horizon: cfg.horizon,
        initial_msq,
        terminal_msq: run.terminal_state_msq,
        terminal_msq_stderr: run.terminal_state_msq_stderr,
        decay_ratio: run.terminal_state_msq / initial_msq,
        decay: run.checkpoints.clone(),
        modified_cost_mean: run.modified_cost_mean,
        modified_cost_stderr: run.modified_cost_stderr,
        c_witness: run.modified_cost_mean / denom,
        blowups: run.blowups,
        abscissas,
        run,
    })
}
