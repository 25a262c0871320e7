use adaptive_lqr::bellman::{ValueKind, FEEDBACK_TOL, SCAN_TOL};
use adaptive_lqr::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Command;

/// Closed-loop policies selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Zero,
    /// LQ feedback of the most probable regime.
    Lq,
    /// `u = -F z_hat`, with `F` from the `F` override or the certificate.
    Ce,
    BellmanUCe,
    BellmanVCe,
    /// Gradient of the quadratic plus `lambda^2` times entropy.
    BellmanScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueChoice {
    UCe,
    VCe,
    ScaledEntropy,
}

/// Every numeric and policy parameter of an experiment, fully resolved.
///
/// Reports echo this struct; feeding it back through `replay` reproduces the
/// run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub dt: f64,
    /// `None` only for `stabilize-report` before resolution (`10 / mu`).
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub paths: usize,
    pub seed: u64,
    /// Residual and partial-isometry tolerance for the feedback certificate.
    pub tol: f64,
    /// Sign tolerance for sampled residual and variance scans.
    pub scan_tol: f64,
    /// Sample count for scans.
    pub trials: usize,
    pub policy: PolicyChoice,
    /// Policies for `compare`.
    pub policies: Vec<PolicyChoice>,
    #[serde(rename = "F")]
    pub f: Option<Vec<Vec<f64>>>,
    pub value: ValueChoice,
    pub lambda: Option<f64>,
    /// Add the `1/2 <K_theta x(T), x(T)>` tail proxy to path costs.
    pub tail: bool,
    /// Path index for `filter-demo`.
    pub path: usize,
    /// Open-loop amplitude for `scalar-integrator`.
    pub c: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub c_steps: usize,
    /// Number of evenly spaced decay checkpoints for `stabilize-report`.
    pub checkpoints: usize,
}

pub const KEYS: &[&str] = &[
    "dt",
    "T",
    "paths",
    "seed",
    "tol",
    "scan_tol",
    "trials",
    "policy",
    "policies",
    "F",
    "value",
    "lambda",
    "tail",
    "path",
    "c",
    "c_min",
    "c_max",
    "c_steps",
    "checkpoints",
];

impl Params {
    pub fn defaults(cmd: Command) -> Self {
        let mut p = Params {
            dt: 1e-3,
            horizon: Some(10.0),
            paths: 1000,
            seed: 0,
            tol: FEEDBACK_TOL,
            scan_tol: SCAN_TOL,
            trials: 10_000,
            policy: PolicyChoice::Zero,
            policies: vec![PolicyChoice::Ce, PolicyChoice::Zero],
            f: None,
            value: ValueChoice::VCe,
            lambda: None,
            tail: false,
            path: 0,
            c: 1.0,
            c_min: -4.0,
            c_max: 4.0,
            c_steps: 81,
            checkpoints: 10,
        };
        match cmd {
            Command::EntropyIdentity => {
                p.horizon = Some(4.0);
                p.paths = 10_000;
            }
            Command::FilterDemo => p.horizon = Some(4.0),
            Command::StabilizeReport => {
                p.horizon = None;
                p.paths = 2000;
                p.policy = PolicyChoice::Ce;
            }
            Command::Compare => p.tail = true,
            Command::ScalarIntegrator => p.horizon = Some(12.0),
            _ => {}
        }
        p
    }

    /// Defaults for `cmd` with `key=value` overrides applied in order.
    pub fn resolve(cmd: Command, overrides: &[(String, String)]) -> Result<Self> {
        let mut p = Self::defaults(cmd);
        for (k, v) in overrides {
            p.set(k, v)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dt" => self.dt = num(key, v)?,
            "T" => self.horizon = Some(num(key, v)?),
            "paths" => self.paths = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "tol" => self.tol = num(key, v)?,
            "scan_tol" => self.scan_tol = num(key, v)?,
            "trials" => self.trials = num(key, v)?,
            "policy" => self.policy = named(key, v)?,
            "policies" => {
                self.policies = v
                    .split(',')
                    .map(|s| named(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "F" => self.f = Some(matrix(v)?),
            "value" => self.value = named(key, v)?,
            "lambda" => self.lambda = Some(num(key, v)?),
            "tail" => self.tail = num(key, v)?,
            "path" => self.path = num(key, v)?,
            "c" => self.c = num(key, v)?,
            "c_min" => self.c_min = num(key, v)?,
            "c_max" => self.c_max = num(key, v)?,
            "c_steps" => self.c_steps = num(key, v)?,
            "checkpoints" => self.checkpoints = num(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown parameter {key:?}; known: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tol >= 0.0 && self.tol.is_finite())
            || !(self.scan_tol >= 0.0 && self.scan_tol.is_finite())
        {
            return bad("tolerances must be finite and non-negative".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() {
                return bad(format!("lambda must be finite, got {l}"));
            }
        }
        let finite = self.c.is_finite() && self.c_min.is_finite() && self.c_max.is_finite();
        if !finite || self.c_min > self.c_max || self.c_steps == 0 {
            return bad("need finite c and c_min <= c_max with c_steps >= 1".into());
        }
        Ok(())
    }

    pub fn value_kind(&self) -> Result<ValueKind> {
        Ok(match self.value {
            ValueChoice::UCe => ValueKind::UCe,
            ValueChoice::VCe => ValueKind::VCe,
            ValueChoice::ScaledEntropy => ValueKind::ScaledEntropy {
                lambda: self.lambda_required()?,
            },
        })
    }

    pub fn lambda_required(&self) -> Result<f64> {
        self.lambda
            .ok_or_else(|| Error::Config("this choice needs lambda=<value>".into()))
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={v:?}")))
}

fn named<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(Value::String(v.into()))
        .map_err(|_| Error::Config(format!("unrecognized {key} {v:?}")))
}

/// `F` as a JSON matrix (`[[1, 0]]`) or a bare number for the 1x1 case.
fn matrix(v: &str) -> Result<Vec<Vec<f64>>> {
    if let Ok(x) = v.parse::<f64>() {
        return Ok(vec![vec![x]]);
    }
    let rows: Vec<Vec<f64>> = serde_json::from_str(v)
        .map_err(|_| Error::Config(format!("cannot parse F={v:?} as a matrix")))?;
    if rows.is_empty() || rows[0].is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Config(format!(
            "F={v:?} is not a non-empty rectangular matrix"
        )));
    }
    Ok(rows)
}
