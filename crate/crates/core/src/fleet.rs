//! Small canonical ensembles used by tests, benches and the CLI.

use nalgebra::{DMatrix, DVector};

use crate::regime::{LinearRegime, RegimeEnsemble};

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// Two scalar regimes `(a, b, c, g) = (0, 1, 1, 1)` and `(1, 1, sqrt 3, 3)`.
/// Their Riccati solutions are `K = 1` and `K = 3`, so `B'K = G` in both and
/// `F = 1` is an exact certainty-equivalent feedback.
pub fn ce_fleet() -> RegimeEnsemble {
    RegimeEnsemble::new(
        vec![
            LinearRegime::scalar(0.0, 1.0, 1.0, 1.0),
            LinearRegime::scalar(1.0, 1.0, 3f64.sqrt(), 3.0),
        ],
        vec![0.5, 0.5],
        vec![v1(1.0), v1(1.0)],
    )
}

/// [`ce_fleet`] with observation gains doubled: `G_j = 2 B_j'K_j`.
pub fn doubled_g_fleet() -> RegimeEnsemble {
    let mut e = ce_fleet();
    for r in &mut e.regimes {
        r.g *= 2.0;
    }
    e
}

/// Two identical integrators observed with gain 1, started at `+1` and `-1`.
/// Under zero control the signals are the constants `+1` and `-1`.
pub fn pm_one_signal_fleet() -> RegimeEnsemble {
    RegimeEnsemble::new(
        vec![
            LinearRegime::scalar(0.0, 1.0, 1.0, 1.0),
            LinearRegime::scalar(0.0, 1.0, 1.0, 1.0),
        ],
        vec![0.5, 0.5],
        vec![v1(1.0), v1(-1.0)],
    )
}

/// Unobserved integrator with unknown control sign: `dx = +-u dt`, `G = 0`.
pub fn scalar_integrator(x_plus: f64, x_minus: f64, p_plus: f64) -> RegimeEnsemble {
    RegimeEnsemble::new(
        vec![
            LinearRegime::scalar(0.0, 1.0, 1.0, 0.0),
            LinearRegime::scalar(0.0, -1.0, 1.0, 0.0),
        ],
        vec![p_plus, 1.0 - p_plus],
        vec![v1(x_plus), v1(x_minus)],
    )
}

/// Double integrators with actuation gains 1 and 1/2, observed through
/// position plus velocity. `F = 2` stabilizes both regimes.
pub fn double_integrator_fleet() -> RegimeEnsemble {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    RegimeEnsemble::new(
        vec![
            LinearRegime::new(
                a.clone(),
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                c.clone(),
                g.clone(),
            ),
            LinearRegime::new(a, DMatrix::from_row_slice(2, 1, &[0.0, 0.5]), c, g),
        ],
        vec![0.5, 0.5],
        vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        ],
    )
}

/// Three regimes of state dimension 1, 2 and 1 sharing a scalar input and
/// a scalar observation. `F = -0.3` stabilizes all three.
pub fn mixed_dimension_fleet() -> RegimeEnsemble {
    RegimeEnsemble::new(
        vec![
            LinearRegime::scalar(-0.5, 1.0, 1.0, 0.8),
            LinearRegime::new(
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]),
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                DMatrix::identity(2, 2),
                DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
            ),
            LinearRegime::scalar(0.3, 2.0, 1.0, -1.0),
        ],
        vec![0.3, 0.4, 0.3],
        vec![v1(1.0), DVector::from_vec(vec![0.5, -0.5]), v1(-1.0)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regime::validate_ensemble;

    #[test]
    fn fleets_validate() {
        for e in [
            ce_fleet(),
            doubled_g_fleet(),
            pm_one_signal_fleet(),
            scalar_integrator(1.0, 1.0, 0.5),
            double_integrator_fleet(),
            mixed_dimension_fleet(),
        ] {
            assert!(
                validate_ensemble(&e).is_empty(),
                "{:?}",
                validate_ensemble(&e)
            );
        }
    }
}
