//! Regimes, ensembles, beliefs and hyperstates.
//!
//! A [`RegimeEnsemble`] is the finite family of linear systems
//! `(A_j, B_j, C_j, G_j)` the plant may be, together with the prior over which
//! one is active and the initial state each regime would start from. Regimes
//! share input and output dimensions but may have different state dimensions.
//!
//! Regime numbers in diagnostics and reports are 1-based; indices into the
//! Rust collections are 0-based.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows};

/// Deviation from 1 that [`Belief::new`] silently renormalizes.
pub const BELIEF_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegime {
    /// State dynamics, `n x n`.
    pub a: DMatrix<f64>,
    /// Input gain, `n x i`.
    pub b: DMatrix<f64>,
    /// Cost output map, `q x n`.
    pub c: DMatrix<f64>,
    /// Observation (signal) map, `o x n`.
    pub g: DMatrix<f64>,
}

impl LinearRegime {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, g: DMatrix<f64>) -> Self {
        Self { a, b, c, g }
    }

    /// Scalar regime `x' = a x + b u`, cost output `c x`, signal `g x`.
    pub fn scalar(a: f64, b: f64, c: f64, g: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(b), m(c), m(g))
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.g.nrows()
    }

    fn diagnostics(&self, regime: usize, out: &mut Vec<Diagnostic>) {
        let n = self.a.nrows();
        let mut push = |field: &str, message: String| {
            out.push(Diagnostic::regime(regime, field, message));
        };
        if n == 0 {
            push("A", "state dimension is zero".into());
        }
        if self.a.ncols() != n {
            push(
                "A",
                format!("A is {}x{}, expected square", n, self.a.ncols()),
            );
        }
        if self.b.nrows() != n {
            push("B", format!("B has {} rows, expected {n}", self.b.nrows()));
        }
        if self.c.ncols() != n {
            push(
                "C",
                format!("C has {} columns, expected {n}", self.c.ncols()),
            );
        }
        if self.g.ncols() != n {
            push(
                "G",
                format!("G has {} columns, expected {n}", self.g.ncols()),
            );
        }
        for (name, m) in [
            ("A", &self.a),
            ("B", &self.b),
            ("C", &self.c),
            ("G", &self.g),
        ] {
            if m.iter().any(|v| !v.is_finite()) {
                push(name, format!("{name} has non-finite entries"));
            }
        }
    }
}

/// One validation failure. `regime` is 1-based when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub regime: Option<usize>,
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn regime(index: usize, field: &str, message: String) -> Self {
        Self {
            regime: Some(index + 1),
            field: field.to_string(),
            message,
        }
    }

    fn global(field: &str, message: String) -> Self {
        Self {
            regime: None,
            field: field.to_string(),
            message,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.regime {
            Some(r) => write!(f, "regime {r}, field {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Validates and, if the sum is within [`BELIEF_SUM_TOL`] of one,
    /// renormalizes.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidBelief("empty probability vector".into()));
        }
        if let Some(j) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidBelief(format!(
                "p_{} = {} is not a nonnegative finite number",
                j + 1,
                p[j]
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > BELIEF_SUM_TOL {
            return Err(Error::InvalidBelief(format!("probabilities sum to {sum}")));
        }
        Ok(Self(p.into_iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform belief over zero regimes");
        Self(vec![1.0 / n as f64; n])
    }

    /// The point mass on regime index `j` (0-based).
    pub fn vertex(n: usize, j: usize) -> Self {
        assert!(j < n, "vertex index {j} out of range for {n} regimes");
        let mut p = vec![0.0; n];
        p[j] = 1.0;
        Self(p)
    }

    /// Normalizes nonnegative weights. Caller guarantees a positive sum.
    pub(crate) fn from_weights(mut w: Vec<f64>) -> Self {
        let sum: f64 = w.iter().sum();
        debug_assert!(sum > 0.0);
        w.iter_mut().for_each(|v| *v /= sum);
        Self(w)
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_vertex(&self) -> bool {
        self.0.iter().filter(|&&v| v > 0.0).count() == 1
    }

    /// Convex combination `lambda * self + (1 - lambda) * other`.
    pub fn blend(&self, other: &Belief, lambda: f64) -> Result<Belief> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "beliefs of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let p = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Belief::new(p)
    }
}

impl<'de> Deserialize<'de> for Belief {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = Vec::<f64>::deserialize(d)?;
        Belief::new(p).map_err(serde::de::Error::custom)
    }
}

impl std::ops::Index<usize> for Belief {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Shannon entropy `-sum p_j log p_j`, with `0 log 0 = 0`.
pub fn entropy(b: &Belief) -> f64 {
    -b.0.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Belief-weighted mixture `sum_j p_j v_j`.
pub fn mix(vectors: &[DVector<f64>], b: &Belief) -> Result<DVector<f64>> {
    if vectors.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{} vectors for a belief over {} regimes",
            vectors.len(),
            b.len()
        )));
    }
    let dim = vectors[0].len();
    if let Some(j) = vectors.iter().position(|v| v.len() != dim) {
        return Err(Error::Dimension(format!(
            "vector {} has dimension {}, expected {dim}",
            j + 1,
            vectors[j].len()
        )));
    }
    let mut out = DVector::zeros(dim);
    mix_into(vectors, b.as_slice(), &mut out);
    Ok(out)
}

/// Allocation-free mixture for hot loops; dimensions are the caller's problem.
pub(crate) fn mix_into(vectors: &[DVector<f64>], p: &[f64], out: &mut DVector<f64>) {
    out.fill(0.0);
    for (v, &w) in vectors.iter().zip(p) {
        if w != 0.0 {
            out.axpy(w, v, 1.0);
        }
    }
}

/// `sum_j p_j |v_j - v_hat|^2` where `v_hat` is the mixture.
pub fn conditional_variance(vectors: &[DVector<f64>], b: &Belief) -> Result<f64> {
    let hat = mix(vectors, b)?;
    Ok(conditional_variance_with(vectors, b.as_slice(), &hat))
}

pub(crate) fn conditional_variance_with(
    vectors: &[DVector<f64>],
    p: &[f64],
    hat: &DVector<f64>,
) -> f64 {
    vectors
        .iter()
        .zip(p)
        .map(|(v, &w)| {
            if w == 0.0 {
                0.0
            } else {
                let mut s = 0.0;
                for (a, h) in v.iter().zip(hat.iter()) {
                    s += (a - h) * (a - h);
                }
                w * s
            }
        })
        .sum()
}

/// The finite family of candidate systems plus prior and initial states.
///
/// Construction does not validate; call [`validate_ensemble`] (or
/// [`RegimeEnsemble::validated`]) before handing it to a solver.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeEnsemble {
    pub regimes: Vec<LinearRegime>,
    /// Raw prior weights; see [`RegimeEnsemble::prior_belief`].
    pub prior: Vec<f64>,
    pub x0: Vec<DVector<f64>>,
}

impl RegimeEnsemble {
    pub fn new(regimes: Vec<LinearRegime>, prior: Vec<f64>, x0: Vec<DVector<f64>>) -> Self {
        Self { regimes, prior, x0 }
    }

    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.regimes.first().map_or(0, LinearRegime::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.regimes.first().map_or(0, LinearRegime::output_dim)
    }

    pub fn prior_belief(&self) -> Result<Belief> {
        Belief::new(self.prior.clone())
    }

    /// Returns `self` if it passes validation.
    pub fn validated(self) -> Result<Self> {
        let diags = validate_ensemble(&self);
        if diags.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidEnsemble(diags))
        }
    }

    pub fn with_prior(mut self, prior: Vec<f64>) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_x0(mut self, x0: Vec<DVector<f64>>) -> Self {
        self.x0 = x0;
        self
    }

    /// The hyperstate at time zero.
    pub fn initial_hyperstate(&self) -> Result<HyperState> {
        Ok(HyperState {
            x: self.x0.clone(),
            belief: self.prior_belief()?,
            t: 0.0,
        })
    }

    /// `sum_j p_j |x_j|^2`, the prior mean-square initial state.
    pub fn initial_state_msq(&self) -> f64 {
        self.prior
            .iter()
            .zip(&self.x0)
            .map(|(p, x)| p * x.norm_squared())
            .sum()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: EnsembleJson = serde_json::from_str(s)?;
        raw.try_into()
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_json(&self) -> EnsembleJson {
        EnsembleJson::from(self)
    }
}

/// Checks every structural invariant; empty result means valid.
pub fn validate_ensemble(e: &RegimeEnsemble) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if e.regimes.is_empty() {
        out.push(Diagnostic::global(
            "regimes",
            "ensemble has no regimes".into(),
        ));
        return out;
    }
    let i = e.input_dim();
    let o = e.output_dim();
    for (j, r) in e.regimes.iter().enumerate() {
        r.diagnostics(j, &mut out);
        if r.input_dim() != i {
            out.push(Diagnostic::regime(
                j,
                "B",
                format!(
                    "B has {} columns, expected shared input dimension {i}",
                    r.input_dim()
                ),
            ));
        }
        if r.output_dim() != o {
            out.push(Diagnostic::regime(
                j,
                "G",
                format!(
                    "G has {} rows, expected shared output dimension {o}",
                    r.output_dim()
                ),
            ));
        }
    }
    let n = e.regimes.len();
    if e.prior.len() != n {
        out.push(Diagnostic::global(
            "prior",
            format!("prior has length {}, expected {n}", e.prior.len()),
        ));
    } else if let Err(err) = Belief::new(e.prior.clone()) {
        let msg = match err {
            Error::InvalidBelief(m) => m,
            other => other.to_string(),
        };
        out.push(Diagnostic::global("prior", msg));
    }
    if e.x0.len() != n {
        out.push(Diagnostic::global(
            "x0",
            format!("x0 has length {}, expected {n}", e.x0.len()),
        ));
    } else {
        for (j, (x, r)) in e.x0.iter().zip(&e.regimes).enumerate() {
            if x.len() != r.state_dim() {
                out.push(Diagnostic::regime(
                    j,
                    "x0",
                    format!("x0 has dimension {}, expected {}", x.len(), r.state_dim()),
                ));
            }
            if x.iter().any(|v| !v.is_finite()) {
                out.push(Diagnostic::regime(
                    j,
                    "x0",
                    "x0 has non-finite entries".into(),
                ));
            }
        }
    }
    out
}

/// The completely observed state `(x_1..x_N, p_1..p_N)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub x: Vec<DVector<f64>>,
    pub belief: Belief,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeJson {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
}

/// On-disk ensemble schema. Matrices are arrays of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleJson {
    pub regimes: Vec<RegimeJson>,
    pub prior: Vec<f64>,
    pub x0: Vec<Vec<f64>>,
}

impl From<&RegimeEnsemble> for EnsembleJson {
    fn from(e: &RegimeEnsemble) -> Self {
        Self {
            regimes: e
                .regimes
                .iter()
                .map(|r| RegimeJson {
                    a: matrix_to_rows(&r.a),
                    b: matrix_to_rows(&r.b),
                    c: matrix_to_rows(&r.c),
                    g: matrix_to_rows(&r.g),
                })
                .collect(),
            prior: e.prior.clone(),
            x0: e.x0.iter().map(|x| x.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<EnsembleJson> for RegimeEnsemble {
    type Error = Error;

    fn try_from(raw: EnsembleJson) -> Result<Self> {
        let mut diags = Vec::new();
        let mut regimes = Vec::with_capacity(raw.regimes.len());
        for (j, r) in raw.regimes.iter().enumerate() {
            let mut get = |field: &str, rows: &[Vec<f64>]| {
                matrix_from_rows(rows).unwrap_or_else(|| {
                    diags.push(Diagnostic::regime(
                        j,
                        field,
                        format!("{field} has ragged rows"),
                    ));
                    DMatrix::zeros(0, 0)
                })
            };
            let a = get("A", &r.a);
            let b = get("B", &r.b);
            let c = get("C", &r.c);
            let g = get("G", &r.g);
            regimes.push(LinearRegime::new(a, b, c, g));
        }
        if !diags.is_empty() {
            return Err(Error::InvalidEnsemble(diags));
        }
        let x0 = raw.x0.into_iter().map(DVector::from_vec).collect();
        Ok(RegimeEnsemble::new(regimes, raw.prior, x0))
    }
}

impl Serialize for RegimeEnsemble {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EnsembleJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegimeEnsemble {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = EnsembleJson::deserialize(d)?;
        RegimeEnsemble::try_from(raw).map_err(serde::de::Error::custom)
    }
}
