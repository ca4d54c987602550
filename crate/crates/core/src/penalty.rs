//! MCP and SCAD fusion penalties and their proximal maps.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Mcp,
    Scad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
    /// Concavity parameter: `eta > 1` for MCP, `eta > 2` for SCAD.
    pub eta: f64,
}

impl PenaltyConfig {
    pub fn mcp(lambda: f64, eta: f64) -> Result<Self> {
        Self::new(PenaltyKind::Mcp, lambda, eta)
    }

    pub fn scad(lambda: f64, eta: f64) -> Result<Self> {
        Self::new(PenaltyKind::Scad, lambda, eta)
    }

    pub fn new(kind: PenaltyKind, lambda: f64, eta: f64) -> Result<Self> {
        let cfg = Self { kind, lambda, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn default_eta(kind: PenaltyKind) -> f64 {
        match kind {
            PenaltyKind::Mcp => 1.5,
            PenaltyKind::Scad => 3.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("penalty lambda must be finite and >= 0, got {}", self.lambda)));
        }
        let min_eta = match self.kind {
            PenaltyKind::Mcp => 1.0,
            PenaltyKind::Scad => 2.0,
        };
        if !(self.eta > min_eta) || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "{:?} needs eta > {min_eta}, got {}",
                self.kind, self.eta
            )));
        }
        Ok(())
    }

    /// Radius beyond which the penalty is flat.
    pub fn flat_radius(&self) -> f64 {
        self.eta * self.lambda
    }
}

impl FromStr for PenaltyConfig {
    type Err = Error;

    /// `mcp:lambda=0.1:eta=1.5` or `scad:lambda=0.1:eta=3.7`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = match parts.next().unwrap_or_default() {
            "mcp" => PenaltyKind::Mcp,
            "scad" => PenaltyKind::Scad,
            other => return Err(Error::Config(format!("unknown penalty {other:?}"))),
        };
        let mut lambda = None;
        let mut eta = None;
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("penalty option {p:?} is not key=value")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("penalty {k}={v:?} is not a number")))?;
            match k {
                "lambda" => lambda = Some(v),
                "eta" => eta = Some(v),
                other => return Err(Error::Config(format!("unknown penalty option {other:?}"))),
            }
        }
        let lambda = lambda.ok_or_else(|| Error::Config("penalty needs lambda=".into()))?;
        Self::new(kind, lambda, eta.unwrap_or_else(|| Self::default_eta(kind)))
    }
}

/// Closed-form `p(t, lambda)` for `t >= 0`.
pub fn penalty_value(cfg: &PenaltyConfig, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("penalty argument must be >= 0, got {t}")));
    }
    let (l, e) = (cfg.lambda, cfg.eta);
    Ok(match cfg.kind {
        PenaltyKind::Mcp => {
            if t <= e * l {
                l * t - t * t / (2.0 * e)
            } else {
                e * l * l / 2.0
            }
        }
        PenaltyKind::Scad => {
            if t <= l {
                l * t
            } else if t <= e * l {
                (2.0 * e * l * t - t * t - l * l) / (2.0 * (e - 1.0))
            } else {
                l * l * (e + 1.0) / 2.0
            }
        }
    })
}

/// `(1 - c / ||w||)_+ w`.
pub fn group_soft_threshold(w: &[f64], c: f64) -> Vec<f64> {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= c || norm == 0.0 {
        return vec![0.0; w.len()];
    }
    let f = 1.0 - c / norm;
    w.iter().map(|v| v * f).collect()
}

/// Proximal map of the scaled fusion penalty, validated once for a fixed `rho`.
///
/// With `s = ||delta|| / scale` and `t = ||w|| / scale`, minimizing
/// `p(||delta|| / scale) + rho / (2 scale^2) ||w - delta||^2` reduces to the
/// scalar problem `p(s) + rho / 2 (s - t)^2` along the ray of `w`; the `1/N^2`
/// weights of the fused objective multiply both terms and drop out. Under
/// `eta * rho > 1` (MCP) or `(eta - 1) * rho > 1` (SCAD) the scalar problem is
/// strictly convex and the case formulas below are its unique minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaProx {
    cfg: PenaltyConfig,
    rho: f64,
}

impl DeltaProx {
    pub fn new(cfg: PenaltyConfig, rho: f64) -> Result<Self> {
        cfg.validate()?;
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        let curvature = match cfg.kind {
            PenaltyKind::Mcp => cfg.eta * rho,
            PenaltyKind::Scad => (cfg.eta - 1.0) * rho,
        };
        if curvature <= 1.0 {
            return Err(Error::Config(format!(
                "{:?} proximal step is ill-posed: need {} > 1 (eta={}, rho={rho})",
                cfg.kind,
                match cfg.kind {
                    PenaltyKind::Mcp => "eta*rho",
                    PenaltyKind::Scad => "(eta-1)*rho",
                },
                cfg.eta
            )));
        }
        Ok(Self { cfg, rho })
    }

    pub fn config(&self) -> &PenaltyConfig {
        &self.cfg
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Minimizer `s` of the scalar problem for input radius `t`.
    pub fn shrink_radius(&self, t: f64) -> f64 {
        let (l, e, rho) = (self.cfg.lambda, self.cfg.eta, self.rho);
        match self.cfg.kind {
            PenaltyKind::Mcp => {
                if t <= e * l {
                    (t - l / rho).max(0.0) / (1.0 - 1.0 / (e * rho))
                } else {
                    t
                }
            }
            PenaltyKind::Scad => {
                if t <= l + l / rho {
                    (t - l / rho).max(0.0)
                } else if t <= e * l {
                    (t - e * l / ((e - 1.0) * rho)) / (1.0 - 1.0 / ((e - 1.0) * rho))
                } else {
                    t
                }
            }
        }
    }

    /// Minimizer `delta` for centre `w`; `scale` is the norm divisor `sqrt(J M)`.
    pub fn apply(&self, w: &[f64], scale: f64) -> Vec<f64> {
        let mut out = w.to_vec();
        self.apply_in_place(&mut out, scale);
        out
    }

    pub fn apply_in_place(&self, w: &mut [f64], scale: f64) {
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return;
        }
        let t = norm / scale;
        let s = self.shrink_radius(t);
        if s == t {
            return;
        }
        let f = s / t;
        w.iter_mut().for_each(|v| *v *= f);
    }

    /// The exact subproblem objective (up to the common `1/N^2`), for tests and diagnostics.
    pub fn objective(&self, delta: &[f64], w: &[f64], scale: f64) -> f64 {
        let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gap: f64 = w.iter().zip(delta).map(|(a, b)| (a - b) * (a - b)).sum();
        penalty_value(&self.cfg, dn / scale).unwrap_or(f64::NAN) + self.rho / (2.0 * scale * scale) * gap
    }
}

/// One-shot form of [`DeltaProx::apply`].
pub fn delta_prox(cfg: &PenaltyConfig, w: &[f64], rho: f64, scale: f64) -> Result<Vec<f64>> {
    Ok(DeltaProx::new(*cfg, rho)?.apply(w, scale))
}
