//! Per-regime LQ machinery.
//!
//! For a minimal triple `(A, B, C)` the infinite-horizon regulator cost
//! `1/2 int |Cx|^2 + |u|^2` has value `1/2 <Kx, x>`, where `K` is the unique
//! positive-definite solution of
//!
//! ```text
//! 0 = C'C + A'K + KA - K B B' K
//! ```
//!
//! and the optimal feedback is `u = -B'K x`. The finite-horizon value is
//! `1/2 <K(T)x, x>` with `K(.)` solving the matrix Riccati ODE from `K(0) = 0`.
//!
//! The algebraic solver runs Newton-Kleinman (one Lyapunov solve per step)
//! from a stabilizing iterate found by integrating the ODE until
//! `A - BB'K(t)` is stable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, min_sym_eigenvalue, op_norm, rank, symmetrize};
use crate::regime::{LinearRegime, RegimeEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Minimality {
    pub controllable: bool,
    pub observable: bool,
}

impl Minimality {
    pub fn is_minimal(&self) -> bool {
        self.controllable && self.observable
    }
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

/// `C; CA; ...; CA^{n-1}` stacked vertically.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let q = c.nrows();
    let mut out = DMatrix::zeros(n * q, n);
    let mut block = c.clone();
    for k in 0..n {
        out.view_mut((k * q, 0), (q, n)).copy_from(&block);
        block *= a;
    }
    out
}

pub fn is_minimal(r: &LinearRegime) -> Minimality {
    let n = r.state_dim();
    Minimality {
        controllable: rank(&controllability_matrix(&r.a, &r.b)) == n,
        observable: rank(&observability_matrix(&r.a, &r.c)) == n,
    }
}

/// Largest real part over the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Right-hand side `C'C + A'K + KA - K BB' K`.
pub fn riccati_rhs(r: &LinearRegime, k: &DMatrix<f64>) -> DMatrix<f64> {
    let s = &r.b * r.b.transpose();
    riccati_rhs_with(&r.a, &s, &(r.c.transpose() * &r.c), k)
}

fn riccati_rhs_with(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    let ak = a.transpose() * k;
    q + &ak + ak.transpose() - k * s * k
}

struct RiccatiOde {
    a: DMatrix<f64>,
    s: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl RiccatiOde {
    fn new(r: &LinearRegime) -> Self {
        Self {
            a: r.a.clone(),
            s: &r.b * r.b.transpose(),
            q: r.c.transpose() * &r.c,
        }
    }

    fn f(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        riccati_rhs_with(&self.a, &self.s, &self.q, k)
    }

    fn rk4_step(&self, k: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let k1 = self.f(k);
        let k2 = self.f(&(k + &k1 * (h / 2.0)));
        let k3 = self.f(&(k + &k2 * (h / 2.0)));
        let k4 = self.f(&(k + &k3 * h));
        let mut next = k + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        symmetrize(&mut next);
        next
    }

    /// Step size that keeps RK4 inside its stability region for iterates of
    /// norm up to `k_norm`.
    fn safe_step(&self, k_norm: f64) -> f64 {
        0.1 / (1.0 + 2.0 * op_norm(&self.a) + 2.0 * k_norm * op_norm(&self.s))
    }
}

/// Default step count for [`riccati_ode`]: `max(1000, 100 T |A|)`.
pub fn default_ode_steps(r: &LinearRegime, horizon: f64) -> usize {
    let scaled = (100.0 * horizon * op_norm(&r.a)).ceil();
    if scaled.is_finite() {
        (scaled as usize).max(1000)
    } else {
        1000
    }
}

/// Integrates the Riccati ODE from `K(0) = 0` to `K(horizon)` with
/// `steps` fixed RK4 steps.
pub fn riccati_ode(r: &LinearRegime, horizon: f64, steps: usize) -> Result<DMatrix<f64>> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    if steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    let ode = RiccatiOde::new(r);
    let h = horizon / steps as f64;
    let n = r.state_dim();
    let mut k = DMatrix::zeros(n, n);
    for step in 0..steps {
        k = ode.rk4_step(&k, h);
        if !is_finite(&k) {
            return Err(Error::NonFinite {
                context: "Riccati ODE",
                step: step + 1,
            });
        }
    }
    Ok(k)
}

/// Solves `A'X + XA + Q = 0` through the `n^2 x n^2` Kronecker system.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Lyapunov: A is {:?}, Q is {:?}",
            a.shape(),
            q.shape()
        )));
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let v = op
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("Lyapunov solve"))?;
    let mut x = DMatrix::from_column_slice(n, n, v.as_slice());
    symmetrize(&mut x);
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    /// Bound on the operator norm of the algebraic residual.
    pub tol: f64,
    pub max_newton_iter: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_newton_iter: 100,
        }
    }
}

/// Stabilizing solution of the algebraic Riccati equation for one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// Value Hessian, symmetric positive definite.
    pub k: DMatrix<f64>,
    /// `B'K`, the optimal feedback gain.
    pub gain: DMatrix<f64>,
    /// Closed-loop dynamics `A - B gain`.
    pub abar: DMatrix<f64>,
    pub spectral_abscissa: f64,
    /// Operator norm of `C'C + A'K + KA - KBB'K`.
    pub residual: f64,
    pub iterations: usize,
}

impl RiccatiSolution {
    pub fn state_dim(&self) -> usize {
        self.k.nrows()
    }
}

pub fn riccati_algebraic(r: &LinearRegime) -> Result<RiccatiSolution> {
    riccati_algebraic_with(r, RiccatiOptions::default())
}

pub fn riccati_algebraic_with(r: &LinearRegime, opts: RiccatiOptions) -> Result<RiccatiSolution> {
    let m = is_minimal(r);
    if !m.is_minimal() {
        return Err(Error::NotMinimal {
            regime: None,
            controllable: m.controllable,
            observable: m.observable,
        });
    }
    let ode = RiccatiOde::new(r);
    let mut k = stabilizing_start(&ode)?;

    let mut iterations = 0;
    for it in 0..opts.max_newton_iter {
        iterations = it + 1;
        let abar = &ode.a - &ode.s * &k;
        let q = &ode.q + &k * &ode.s * &k;
        let next = solve_lyapunov(&abar, &q)?;
        let change = op_norm(&(&next - &k));
        k = next;
        if !is_finite(&k) {
            return Err(Error::NonFinite {
                context: "Newton-Kleinman",
                step: iterations,
            });
        }
        if change <= 1e-14 * op_norm(&k).max(1.0) {
            break;
        }
    }

    let residual = op_norm(&ode.f(&k));
    let gain = r.b.transpose() * &k;
    let abar = &r.a - &r.b * &gain;
    let abscissa = spectral_abscissa(&abar);
    if residual > opts.tol || !(abscissa < 0.0) || !(min_sym_eigenvalue(&k) > 0.0) {
        return Err(Error::NonConvergence {
            residual,
            iterations,
        });
    }
    Ok(RiccatiSolution {
        k,
        gain,
        abar,
        spectral_abscissa: abscissa,
        residual,
        iterations,
    })
}

/// Integrates the Riccati ODE until `A - S K(t)` is stable.
fn stabilizing_start(ode: &RiccatiOde) -> Result<DMatrix<f64>> {
    let n = ode.a.nrows();
    let mut k = DMatrix::zeros(n, n);
    const CHUNK: usize = 50;
    const MAX_CHUNKS: usize = 200_000;
    for chunk in 0..MAX_CHUNKS {
        if spectral_abscissa(&(&ode.a - &ode.s * &k)) < 0.0 {
            return Ok(k);
        }
        let h = ode.safe_step(op_norm(&k));
        for _ in 0..CHUNK {
            k = ode.rk4_step(&k, h);
        }
        if !is_finite(&k) {
            return Err(Error::NonFinite {
                context: "Riccati ODE warm start",
                step: (chunk + 1) * CHUNK,
            });
        }
    }
    Err(Error::NonConvergence {
        residual: op_norm(&ode.f(&k)),
        iterations: 0,
    })
}

/// Solves every regime of an ensemble; errors name the offending regime.
pub fn solve_ensemble(e: &RegimeEnsemble) -> Result<Vec<RiccatiSolution>> {
    e.regimes
        .iter()
        .enumerate()
        .map(|(j, r)| {
            riccati_algebraic(r).map_err(|err| match err {
                Error::NotMinimal {
                    controllable,
                    observable,
                    ..
                } => Error::NotMinimal {
                    regime: Some(j + 1),
                    controllable,
                    observable,
                },
                other => other,
            })
        })
        .collect()
}

/// `1/2 <Kx, x>`.
pub fn lq_value(sol: &RiccatiSolution, x: &DVector<f64>) -> Result<f64> {
    if x.len() != sol.state_dim() {
        return Err(Error::Dimension(format!(
            "state has dimension {}, K is {}x{}",
            x.len(),
            sol.state_dim(),
            sol.state_dim()
        )));
    }
    Ok(0.5 * x.dot(&(&sol.k * x)))
}
