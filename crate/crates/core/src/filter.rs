//! Regime-belief filtering along an observation path.
//!
//! Observations follow `dy = z_theta dt + dw`. Each regime `j` carries a
//! log-likelihood `log l_j(t) = int <z_j, dy> - 1/2 int |z_j|^2 dt`, and the
//! belief is the Bayes normalization `p_j(t) = l_j(t) p_j / sum_k l_k(t) p_k`.
//! This is the canonical filter: the only discretization is the left-point
//! (Ito) sum for `int <z_j, dy>`, and the belief stays on the simplex exactly.
//!
//! The innovation form `dp_j = p_j <z_j - z_hat, dy - z_hat dt>` is the same
//! filter written as an SDE. It is kept as a cross-check only.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::regime::{conditional_variance_with, entropy, mix, Belief};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// `log l_j(t)`.
    pub log_lik: Vec<f64>,
    pub prior: Belief,
    pub belief: Belief,
    pub t: f64,
    /// Innovation steps that left the simplex and had to be clamped.
    pub clamp_count: u64,
}

impl FilterState {
    pub fn new(prior: Belief) -> Self {
        Self {
            log_lik: vec![0.0; prior.len()],
            belief: prior.clone(),
            prior,
            t: 0.0,
            clamp_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    /// Bayes' rule from prior and log-likelihoods, via log-sum-exp.
    pub fn bayes_belief(&self) -> Belief {
        let mut w = self.belief.clone();
        bayes_normalize(&self.log_lik, self.prior.as_slice(), w.as_mut_slice());
        w
    }

    /// In-place [`bayes_step`] for simulation loops.
    pub fn bayes_update(&mut self, z: &[DVector<f64>], dy: &DVector<f64>, dt: f64) -> Result<()> {
        check_step(self.len(), z, dy, dt)?;
        for (ll, zj) in self.log_lik.iter_mut().zip(z) {
            *ll += zj.dot(dy) - 0.5 * zj.norm_squared() * dt;
        }
        if let Some(j) = self.log_lik.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!(
                "log-likelihood {} is not finite",
                j + 1
            )));
        }
        bayes_normalize(
            &self.log_lik,
            self.prior.as_slice(),
            self.belief.as_mut_slice(),
        );
        self.t += dt;
        Ok(())
    }
}

fn bayes_normalize(log_lik: &[f64], prior: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (ll, &p) in log_lik.iter().zip(prior) {
        if p > 0.0 {
            max = max.max(ll + p.ln());
        }
    }
    let mut sum = 0.0;
    for ((o, ll), &p) in out.iter_mut().zip(log_lik).zip(prior) {
        *o = if p > 0.0 {
            (ll + p.ln() - max).exp()
        } else {
            0.0
        };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn check_step(n: usize, z: &[DVector<f64>], dy: &DVector<f64>, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if z.len() != n {
        return Err(Error::Dimension(format!(
            "{} signals for {n} regimes",
            z.len()
        )));
    }
    if let Some(j) = z.iter().position(|zj| zj.len() != dy.len()) {
        return Err(Error::Dimension(format!(
            "signal {} has dimension {}, observation has {}",
            j + 1,
            z[j].len(),
            dy.len()
        )));
    }
    if dy.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dimension(
            "observation increment is not finite".into(),
        ));
    }
    if let Some(j) = z.iter().position(|zj| zj.iter().any(|v| !v.is_finite())) {
        return Err(Error::Dimension(format!("signal {} is not finite", j + 1)));
    }
    Ok(())
}

/// One step of the likelihood (Bayes) filter with left-point signals `z`.
pub fn bayes_step(
    fs: &FilterState,
    z: &[DVector<f64>],
    dy: &DVector<f64>,
    dt: f64,
) -> Result<FilterState> {
    let mut next = fs.clone();
    next.bayes_update(z, dy, dt)?;
    Ok(next)
}

/// One step of the innovation SDE `dp_j = p_j <z_j - z_hat, dy - z_hat dt>`.
///
/// The diffusion coefficients `sigma_j = p_j (z_j - z_hat)` commute, so the
/// Milstein scheme needs only the increment `dy`:
///
/// ```text
/// p_j += p_j <d_j, dy - z_hat dt>
///      + 1/2 p_j [ (<d_j, dy>^2 - |d_j|^2 dt) - sum_k p_k (<d_k, dy>^2 - |d_k|^2 dt) ]
/// ```
///
/// with `d_j = z_j - z_hat`. The correction sums to zero over `j`, and it is
/// what makes the step agree with [`bayes_step`] to first order in `dt`
/// pathwise; the plain Euler step ([`innovation_step_euler`]) only agrees to
/// order `sqrt(dt)`. Negative components are clamped to zero and the belief
/// renormalized; each clamp is counted.
pub fn innovation_step(
    fs: &FilterState,
    z: &[DVector<f64>],
    dy: &DVector<f64>,
    dt: f64,
) -> Result<FilterState> {
    innovation_step_impl(fs, z, dy, dt, true)
}

/// Euler-Maruyama discretization of the innovation SDE.
pub fn innovation_step_euler(
    fs: &FilterState,
    z: &[DVector<f64>],
    dy: &DVector<f64>,
    dt: f64,
) -> Result<FilterState> {
    innovation_step_impl(fs, z, dy, dt, false)
}

fn innovation_step_impl(
    fs: &FilterState,
    z: &[DVector<f64>],
    dy: &DVector<f64>,
    dt: f64,
    milstein: bool,
) -> Result<FilterState> {
    check_step(fs.len(), z, dy, dt)?;
    let mut next = fs.clone();
    for (ll, zj) in next.log_lik.iter_mut().zip(z) {
        *ll += zj.dot(dy) - 0.5 * zj.norm_squared() * dt;
    }
    let p = fs.belief.as_slice();
    let zhat = mix(z, &fs.belief)?;
    let dnu = dy - &zhat * dt;

    // per-regime <d_j, dy>^2 - |d_j|^2 dt
    let quad: Vec<f64> = z
        .iter()
        .map(|zj| {
            let d = zj - &zhat;
            let a = d.dot(dy);
            a * a - d.norm_squared() * dt
        })
        .collect();
    let mean_quad: f64 = p.iter().zip(&quad).map(|(pj, q)| pj * q).sum();

    let mut out = Vec::with_capacity(p.len());
    for ((&pj, zj), qj) in p.iter().zip(z).zip(&quad) {
        let d = zj - &zhat;
        let mut v = pj + pj * d.dot(&dnu);
        if milstein {
            v += 0.5 * pj * (qj - mean_quad);
        }
        out.push(v);
    }
    let mut clamped = false;
    for v in out.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped = true;
        }
    }
    if clamped {
        next.clamp_count += 1;
    }
    if out.iter().sum::<f64>() <= 0.0 {
        return Err(Error::NonFinite {
            context: "innovation step (belief collapsed)",
            step: 0,
        });
    }
    next.belief = Belief::from_weights(out);
    next.t += dt;
    Ok(next)
}

/// `z_hat = sum_j p_j z_j` under the current belief.
pub fn conditional_signal(fs: &FilterState, z: &[DVector<f64>]) -> Result<DVector<f64>> {
    mix(z, &fs.belief)
}

/// Pathwise entropy accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyLedger {
    /// `H(p(0))`.
    pub h0: f64,
    /// `H(p(T))`.
    pub ht: f64,
    /// `1/2 sum_steps sum_j p_j |z_j - z_hat|^2 dt`.
    pub quad: f64,
}

impl EntropyLedger {
    /// `h0 - ht - quad`; zero in expectation, not per path.
    pub fn gap(&self) -> f64 {
        self.h0 - self.ht - self.quad
    }
}

/// Entropy ledger of a filter trajectory. `signals[k]` are the signals used
/// for the step from `states[k]` to `states[k + 1]`.
pub fn entropy_ledger(
    states: &[FilterState],
    signals: &[Vec<DVector<f64>>],
    dt: f64,
) -> Result<EntropyLedger> {
    let (first, last) = match (states.first(), states.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Config("empty filter trajectory".into())),
    };
    if signals.len() + 1 < states.len() {
        return Err(Error::Dimension(format!(
            "{} signal records for {} steps",
            signals.len(),
            states.len() - 1
        )));
    }
    let mut quad = 0.0;
    for (fs, z) in states.iter().zip(signals).take(states.len() - 1) {
        let zhat = conditional_signal(fs, z)?;
        quad += 0.5 * conditional_variance_with(z, fs.belief.as_slice(), &zhat) * dt;
    }
    Ok(EntropyLedger {
        h0: entropy(&first.prior),
        ht: entropy(&last.belief),
        quad,
    })
}

/// Observation record `y(t_k)` on an increasing grid with `y(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    times: Vec<f64>,
    y: Vec<DVector<f64>>,
}

impl ObservationPath {
    pub fn new(times: Vec<f64>, y: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != y.len() {
            return Err(Error::Config(format!(
                "{} times for {} observations",
                times.len(),
                y.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(Error::Config("observation grid must start at t = 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "observation times must be strictly increasing".into(),
            ));
        }
        if y[0].iter().any(|&v| v != 0.0) {
            return Err(Error::Config("y(0) must be zero".into()));
        }
        let o = y[0].len();
        if y.iter().any(|v| v.len() != o) {
            return Err(Error::Dimension("observations of mixed dimension".into()));
        }
        Ok(Self { times, y })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.y
    }

    /// `(t_k, dt_k, dy_k)` for each grid interval.
    pub fn increments(&self) -> impl Iterator<Item = (f64, f64, DVector<f64>)> + '_ {
        self.times
            .windows(2)
            .zip(self.y.windows(2))
            .map(|(t, y)| (t[0], t[1] - t[0], &y[1] - &y[0]))
    }
}

/// A filter run along a path, with the signals used at each step.
#[derive(Debug, Clone)]
pub struct FilterTrajectory {
    pub states: Vec<FilterState>,
    pub signals: Vec<Vec<DVector<f64>>>,
}

impl FilterTrajectory {
    /// Runs the Bayes filter along `path`; `signal_at(t)` supplies the
    /// left-point signals for each interval.
    pub fn run_bayes(
        prior: Belief,
        path: &ObservationPath,
        mut signal_at: impl FnMut(f64) -> Vec<DVector<f64>>,
    ) -> Result<Self> {
        let mut fs = FilterState::new(prior);
        let mut states = vec![fs.clone()];
        let mut signals = Vec::new();
        for (t, dt, dy) in path.increments() {
            let z = signal_at(t);
            fs.bayes_update(&z, &dy, dt)?;
            states.push(fs.clone());
            signals.push(z);
        }
        Ok(Self { states, signals })
    }

    pub fn ledger(&self, dt: f64) -> Result<EntropyLedger> {
        entropy_ledger(&self.states, &self.signals, dt)
    }

    /// CSV with columns `t, p_1..p_N, H, quad` (cumulative quad).
    pub fn write_csv<W: Write>(&self, dt: f64, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let n = self.states.first().map_or(0, FilterState::len);
        wtr.write_record(trajectory_header(n))?;
        let mut quad = 0.0;
        for (k, fs) in self.states.iter().enumerate() {
            if k > 0 {
                let prev = &self.states[k - 1];
                let zhat = conditional_signal(prev, &self.signals[k - 1])?;
                quad +=
                    0.5 * conditional_variance_with(
                        &self.signals[k - 1],
                        prev.belief.as_slice(),
                        &zhat,
                    ) * dt;
            }
            wtr.write_record(trajectory_row(fs.t, &fs.belief, quad))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|j| format!("p_{j}")));
    h.push("H".into());
    h.push("quad".into());
    h
}

pub fn trajectory_row(t: f64, b: &Belief, quad: f64) -> Vec<String> {
    let mut row = vec![t.to_string()];
    row.extend(b.as_slice().iter().map(|p| p.to_string()));
    row.push(entropy(b).to_string());
    row.push(quad.to_string());
    row
}
