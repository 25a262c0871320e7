//! Benchmark fixtures.

use adaptive_lqr::{DMatrix, LinearRegime};

/// A chain of `n` integrators driven at the end and observed at the head,
/// with a little damping: minimal for every `n`.
pub fn integrator_chain(n: usize) -> LinearRegime {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
        a[(i, i)] = -0.1;
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(n - 1, 0)] = 1.0;
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;
    LinearRegime::new(a, b, c.clone(), c)
}
