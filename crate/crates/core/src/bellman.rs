//! Dynamic programming on the hyperstate `(x_1..x_N, p)`: Hamiltonian,
//! belief generator, the quadratic-plus-entropy value candidates and their
//! Bellman residuals, and extraction of the certainty-equivalent feedback.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{op_norm, rank, serialize_rows};
use crate::regime::{conditional_variance_with, entropy, mix_into, Belief, RegimeEnsemble};
use crate::riccati::{solve_ensemble, RiccatiSolution};

/// Residual and defect tolerance of [`solve_feedback`].
pub const FEEDBACK_TOL: f64 = 1e-8;
/// Tolerance for sign decisions in scans.
pub const SCAN_TOL: f64 = 1e-10;

/// Which candidate `f(x, p) = 1/2 sum_j p_j <K_j x_j, x_j> + w H(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueKind {
    /// `w = 0`.
    UCe,
    /// `w = 1`.
    VCe,
    /// `w = lambda^2`.
    ScaledEntropy { lambda: f64 },
}

impl ValueKind {
    pub fn entropy_weight(self) -> f64 {
        match self {
            ValueKind::UCe => 0.0,
            ValueKind::VCe => 1.0,
            ValueKind::ScaledEntropy { lambda } => lambda * lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSpec {
    pub kind: ValueKind,
    pub riccati: Vec<RiccatiSolution>,
}

impl ValueSpec {
    pub fn new(kind: ValueKind, riccati: Vec<RiccatiSolution>) -> Self {
        Self { kind, riccati }
    }

    pub fn for_ensemble(kind: ValueKind, e: &RegimeEnsemble) -> Result<Self> {
        Ok(Self::new(kind, solve_ensemble(e)?))
    }

    pub fn entropy_weight(&self) -> f64 {
        self.kind.entropy_weight()
    }

    fn check(&self, x: &[DVector<f64>], b: &Belief) -> Result<()> {
        if self.riccati.len() != x.len() || b.len() != x.len() {
            return Err(Error::Dimension(format!(
                "{} Riccati solutions, {} states, belief over {}",
                self.riccati.len(),
                x.len(),
                b.len()
            )));
        }
        for (j, (s, xj)) in self.riccati.iter().zip(x).enumerate() {
            if s.state_dim() != xj.len() {
                return Err(Error::Dimension(format!(
                    "state {} has dimension {}, K is {}x{}",
                    j + 1,
                    xj.len(),
                    s.state_dim(),
                    s.state_dim()
                )));
            }
        }
        Ok(())
    }

    /// `grad_{x_j} f = p_j K_j x_j`.
    pub fn gradient(&self, x: &[DVector<f64>], b: &Belief) -> Result<Vec<DVector<f64>>> {
        self.check(x, b)?;
        Ok(self
            .riccati
            .iter()
            .zip(x)
            .zip(b.as_slice())
            .map(|((s, xj), &p)| &s.k * xj * p)
            .collect())
    }

    /// `-sum_j B_j' grad_j f = -sum_j p_j B_j'K_j x_j`.
    pub fn feedback(&self, x: &[DVector<f64>], b: &Belief) -> Result<DVector<f64>> {
        self.check(x, b)?;
        let mut u = DVector::zeros(self.riccati[0].gain.nrows());
        self.feedback_into(x, b.as_slice(), &mut u);
        Ok(u)
    }

    /// Allocation-free [`ValueSpec::feedback`]; dimensions unchecked.
    pub(crate) fn feedback_into(&self, x: &[DVector<f64>], p: &[f64], u: &mut DVector<f64>) {
        u.fill(0.0);
        for ((s, xj), &pj) in self.riccati.iter().zip(x).zip(p) {
            if pj != 0.0 {
                u.gemv(-pj, &s.gain, xj, 1.0);
            }
        }
    }
}

/// `f(x, p)`.
pub fn value_eval(vs: &ValueSpec, x: &[DVector<f64>], b: &Belief) -> Result<f64> {
    vs.check(x, b)?;
    let quad: f64 = vs
        .riccati
        .iter()
        .zip(x)
        .zip(b.as_slice())
        .map(|((s, xj), &p)| 0.5 * p * xj.dot(&(&s.k * xj)))
        .sum();
    let w = vs.entropy_weight();
    Ok(if w == 0.0 {
        quad
    } else {
        quad + w * entropy(b)
    })
}

fn check_states(e: &RegimeEnsemble, x: &[DVector<f64>], b: &Belief) -> Result<()> {
    if x.len() != e.len() || b.len() != e.len() {
        return Err(Error::Dimension(format!(
            "{} states and belief over {} for {} regimes",
            x.len(),
            b.len(),
            e.len()
        )));
    }
    if let Some(j) = e
        .regimes
        .iter()
        .zip(x)
        .position(|(r, xj)| r.state_dim() != xj.len())
    {
        return Err(Error::Dimension(format!(
            "state {} has dimension {}, regime has {}",
            j + 1,
            x[j].len(),
            e.regimes[j].state_dim()
        )));
    }
    Ok(())
}

/// `H(x, p, D) = min_u { 1/2 sum p_j |C_j x_j|^2 + 1/2 |u|^2 + sum <D_j, A_j x_j + B_j u> }`.
///
/// Returns the minimum and the minimizer `u = -sum_j B_j'D_j`.
pub fn hamiltonian(
    e: &RegimeEnsemble,
    x: &[DVector<f64>],
    b: &Belief,
    d: &[DVector<f64>],
) -> Result<(f64, DVector<f64>)> {
    check_states(e, x, b)?;
    if d.len() != e.len() || d.iter().zip(x).any(|(dj, xj)| dj.len() != xj.len()) {
        return Err(Error::Dimension(
            "gradient blocks do not match the states".into(),
        ));
    }
    let mut value = 0.0;
    let mut bd = DVector::zeros(e.input_dim());
    for (((r, xj), dj), &p) in e.regimes.iter().zip(x).zip(d).zip(b.as_slice()) {
        value += 0.5 * p * (&r.c * xj).norm_squared();
        value += dj.dot(&(&r.a * xj));
        bd.gemv_tr(1.0, &r.b, dj, 1.0);
    }
    value -= 0.5 * bd.norm_squared();
    Ok((value, -bd))
}

fn check_signals(z: &[DVector<f64>], b: &Belief) -> Result<()> {
    if z.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{} signals for {} regimes",
            z.len(),
            b.len()
        )));
    }
    if z.iter().any(|zj| zj.len() != z[0].len()) {
        return Err(Error::Dimension("signals of mixed dimension".into()));
    }
    Ok(())
}

/// Belief part of the generator applied to a value candidate. Only the
/// entropy term is nonlinear in `p`, and `L H = -1/2 sum_j p_j |z_j - z_hat|^2`.
pub fn generator_on(vs: &ValueSpec, b: &Belief, z: &[DVector<f64>]) -> Result<f64> {
    check_signals(z, b)?;
    let w = vs.entropy_weight();
    if w == 0.0 {
        return Ok(0.0);
    }
    let mut zhat = DVector::zeros(z[0].len());
    mix_into(z, b.as_slice(), &mut zhat);
    Ok(-0.5 * w * conditional_variance_with(z, b.as_slice(), &zhat))
}

/// `1/2 sum_{j,k} hess[j,k] p_j p_k <z_j - z_hat, z_k - z_hat>` for a test
/// function with belief Hessian `hess`.
pub fn generator_from_hessian(hess: &DMatrix<f64>, b: &Belief, z: &[DVector<f64>]) -> Result<f64> {
    check_signals(z, b)?;
    let n = b.len();
    if hess.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Hessian is {:?}, expected {n}x{n}",
            hess.shape()
        )));
    }
    let mut zhat = DVector::zeros(z[0].len());
    mix_into(z, b.as_slice(), &mut zhat);
    let dev: Vec<DVector<f64>> = z.iter().map(|zj| zj - &zhat).collect();
    let p = b.as_slice();
    let mut s = 0.0;
    for j in 0..n {
        for k in 0..n {
            if p[j] != 0.0 && p[k] != 0.0 {
                s += hess[(j, k)] * p[j] * p[k] * dev[j].dot(&dev[k]);
            }
        }
    }
    Ok(0.5 * s)
}

/// Belief Hessian of `H(p)`: `diag(-1/p_j)`, with zero rows where `p_j = 0`
/// (they are multiplied by `p_j` in the generator).
pub fn entropy_hessian(b: &Belief) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        b.len(),
        b.as_slice()
            .iter()
            .map(|&p| if p > 0.0 { -1.0 / p } else { 0.0 }),
    ))
}

/// Signals `z_j = G_j x_j`.
pub fn signals(e: &RegimeEnsemble, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
    e.regimes.iter().zip(x).map(|(r, xj)| &r.g * xj).collect()
}

/// `-L f - H(x, p, grad f)`: zero where `f` solves the Bellman equation,
/// positive where it is a strict supersolution.
pub fn bellman_residual(
    vs: &ValueSpec,
    e: &RegimeEnsemble,
    x: &[DVector<f64>],
    b: &Belief,
) -> Result<f64> {
    check_states(e, x, b)?;
    let d = vs.gradient(x, b)?;
    let (h, _) = hamiltonian(e, x, b, &d)?;
    let lf = generator_on(vs, b, &signals(e, x))?;
    Ok(-lf - h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    ExactCe,
    Supersolution,
    None,
}

/// Least-squares solution of `F G_j = B_j'K_j` for all `j` with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackCertificate {
    #[serde(rename = "F", serialize_with = "serialize_rows")]
    pub f: DMatrix<f64>,
    /// `max_j |F G_j - B_j'K_j|`.
    pub residual: f64,
    /// Largest singular value of `F`.
    pub norm: f64,
    /// `|F F' F - F|`.
    pub partial_isometry_defect: f64,
    pub classification: Classification,
    /// Some `G_j` is surjective.
    pub faithful: bool,
    pub tol: f64,
}

pub fn solve_feedback(
    e: &RegimeEnsemble,
    sols: &[RiccatiSolution],
    tol: f64,
) -> Result<FeedbackCertificate> {
    if sols.len() != e.len() {
        return Err(Error::Dimension(format!(
            "{} Riccati solutions for {} regimes",
            sols.len(),
            e.len()
        )));
    }
    let o = e.output_dim();
    let i = e.input_dim();
    let total: usize = e.regimes.iter().map(|r| r.state_dim()).sum();
    let mut g_stack = DMatrix::zeros(o, total);
    let mut h_stack = DMatrix::zeros(i, total);
    let mut col = 0;
    for (r, s) in e.regimes.iter().zip(sols) {
        let n = r.state_dim();
        if s.state_dim() != n {
            return Err(Error::Dimension(
                "Riccati solution does not match its regime".into(),
            ));
        }
        g_stack.view_mut((0, col), (o, n)).copy_from(&r.g);
        h_stack.view_mut((0, col), (i, n)).copy_from(&s.gain);
        col += n;
    }

    let smax = op_norm(&g_stack);
    let f = if smax == 0.0 {
        DMatrix::zeros(i, o)
    } else {
        let eps = o.max(total) as f64 * smax * 1e-12;
        let pinv = g_stack
            .svd(true, true)
            .pseudo_inverse(eps)
            .map_err(|_| Error::Singular("feedback pseudo-inverse"))?;
        &h_stack * pinv
    };

    let residual = e
        .regimes
        .iter()
        .zip(sols)
        .map(|(r, s)| op_norm(&(&f * &r.g - &s.gain)))
        .fold(0.0, f64::max);
    let norm = op_norm(&f);
    let defect = op_norm(&(&f * f.transpose() * &f - &f));
    let classification = if residual <= tol && defect <= tol {
        Classification::ExactCe
    } else if residual <= tol && norm <= 1.0 + tol {
        Classification::Supersolution
    } else {
        Classification::None
    };
    let faithful = e.regimes.iter().any(|r| rank(&r.g) == o);
    Ok(FeedbackCertificate {
        f,
        residual,
        norm,
        partial_isometry_defect: defect,
        classification,
        faithful,
        tol,
    })
}

/// A sampled hyperstate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<DVector<f64>>,
    pub belief: Belief,
}

/// Seeded hyperstate: `x_j` entries uniform on `[-1, 1]`, `p ~ Dirichlet(1,..,1)`.
/// Sample `index` depends only on `(seed, index)`.
pub fn random_hyperstate(e: &RegimeEnsemble, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let x = e
        .regimes
        .iter()
        .map(|r| DVector::from_fn(r.state_dim(), |_, _| rng.random_range(-1.0..=1.0)))
        .collect();
    let w: Vec<f64> = (0..e.len()).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    Sample {
        x,
        belief: Belief::from_weights(w),
    }
}

/// `sum_j p_j |G_j x_j - g_hat|^2 - sum_j p_j |B_j'K_j x_j - k_hat|^2`.
pub fn variance_gap(
    e: &RegimeEnsemble,
    sols: &[RiccatiSolution],
    x: &[DVector<f64>],
    b: &Belief,
) -> Result<f64> {
    check_states(e, x, b)?;
    if sols.len() != e.len() {
        return Err(Error::Dimension(
            "one Riccati solution per regime required".into(),
        ));
    }
    let z = signals(e, x);
    let v: Vec<DVector<f64>> = sols.iter().zip(x).map(|(s, xj)| &s.gain * xj).collect();
    let p = b.as_slice();
    let mut zhat = DVector::zeros(e.output_dim());
    let mut vhat = DVector::zeros(e.input_dim());
    mix_into(&z, p, &mut zhat);
    mix_into(&v, p, &mut vhat);
    Ok(conditional_variance_with(&z, p, &zhat) - conditional_variance_with(&v, p, &vhat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanExtremum {
    pub value: f64,
    pub sample: Sample,
}

/// Minimum of [`variance_gap`] over `trials` seeded samples.
pub fn variance_inequality_scan(
    e: &RegimeEnsemble,
    sols: &[RiccatiSolution],
    trials: usize,
    seed: u64,
) -> Result<ScanExtremum> {
    scan(e, trials, seed, |s| variance_gap(e, sols, &s.x, &s.belief)).map(|(min, _)| min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualScan {
    pub min: ScanExtremum,
    pub max: ScanExtremum,
    pub trials: usize,
}

/// Extremes of [`bellman_residual`] over `trials` seeded samples plus
/// structured probes where one regime state is a basis vector, the others
/// vanish and the belief is uniform.
pub fn residual_scan(
    vs: &ValueSpec,
    e: &RegimeEnsemble,
    trials: usize,
    seed: u64,
) -> Result<ResidualScan> {
    let eval = |s: &Sample| bellman_residual(vs, e, &s.x, &s.belief);
    let (mut min, mut max) = scan(e, trials, seed, eval)?;
    for s in block_probes(e) {
        let r = eval(&s)?;
        if r < min.value {
            min = ScanExtremum {
                value: r,
                sample: s.clone(),
            };
        }
        if r > max.value {
            max = ScanExtremum {
                value: r,
                sample: s,
            };
        }
    }
    Ok(ResidualScan { min, max, trials })
}

fn block_probes(e: &RegimeEnsemble) -> Vec<Sample> {
    let mut out = Vec::new();
    for (k, r) in e.regimes.iter().enumerate() {
        for i in 0..r.state_dim() {
            let x = e
                .regimes
                .iter()
                .enumerate()
                .map(|(j, rj)| {
                    let mut v = DVector::zeros(rj.state_dim());
                    if j == k {
                        v[i] = 1.0;
                    }
                    v
                })
                .collect();
            out.push(Sample {
                x,
                belief: Belief::uniform(e.len()),
            });
        }
    }
    out
}

fn scan(
    e: &RegimeEnsemble,
    trials: usize,
    seed: u64,
    f: impl Fn(&Sample) -> Result<f64> + Sync,
) -> Result<(ScanExtremum, ScanExtremum)> {
    if trials == 0 {
        return Err(Error::Config("scan needs at least one trial".into()));
    }
    let values: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|k| f(&random_hyperstate(e, seed, k)))
        .collect::<Result<_>>()?;
    // first index wins ties, independent of scheduling
    let (mut imin, mut imax) = (0, 0);
    for (k, &v) in values.iter().enumerate() {
        if v < values[imin] {
            imin = k;
        }
        if v > values[imax] {
            imax = k;
        }
    }
    let at = |k: usize| ScanExtremum {
        value: values[k],
        sample: random_hyperstate(e, seed, k as u64),
    };
    Ok((at(imin), at(imax)))
}
