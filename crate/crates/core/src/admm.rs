//! ADMM for the fused Bellman-moment objective
//!
//! ```text
//! min_beta ||G(beta)||^2 + 1/N^2 sum_{i<j} p(||beta_i - beta_j|| / sqrt(JM), lambda)
//! ```
//!
//! split as `delta_ij = beta_i - beta_j` with augmented Lagrangian
//!
//! ```text
//! L_AL = ||G||^2 + 1/N^2 sum p(||delta_ij|| / sqrt(JM))
//!      + 1/(JM N^2) sum <nu_ij, beta_i - beta_j - delta_ij>
//!      + rho/(2 JM N^2) sum ||beta_i - beta_j - delta_ij||^2.
//! ```
//!
//! The stored dual `nu` is `JM` times the plain multiplier, which makes the
//! delta step centre `beta_i - beta_j + nu/rho` and the dual step
//! `nu += rho * residual` exact for this Lagrangian. Internally everything is
//! multiplied by `N^2`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inverse_with_jitter, pairwise_sum};
use crate::moment::{CoefficientSet, MomentSystem};
use crate::penalty::{penalty_value, DeltaProx, PenaltyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaInit {
    PerTrajectoryRidge,
    Pooled,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Stop once `max_ij ||beta_i - beta_j - delta_ij|| < eps`.
    pub eps: f64,
    pub max_iters: usize,
    pub init: BetaInit,
    /// Ridge for the per-trajectory start, relative to the mean diagonal of
    /// `A_i^T A_i` over trajectories (so it is unit-free).
    pub ridge: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eps: 1e-4,
            max_iters: 2000,
            init: BetaInit::PerTrajectoryRidge,
            ridge: 1e-2,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which `(i, j)` differences carry a fusion term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairGraph {
    /// All `N(N-1)/2` pairs in lexicographic order.
    Complete,
    /// A caller-chosen subset (each `i < j`); uses a dense beta step.
    Subset(Vec<(usize, usize)>),
}

impl PairGraph {
    pub fn pairs(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        match self {
            PairGraph::Complete => Ok((0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()),
            PairGraph::Subset(p) => {
                if let Some(&(i, j)) = p.iter().find(|&&(i, j)| !(i < j && j < n)) {
                    return Err(Error::Config(format!("pair ({i}, {j}) is not 0 <= i < j < {n}")));
                }
                let mut p = p.clone();
                p.sort_unstable();
                p.dedup();
                Ok(p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub beta: CoefficientSet,
    /// `delta_ij` for `pairs[k]`, stored at `k*d .. (k+1)*d`.
    pub delta: Vec<f64>,
    /// Scaled dual, same layout as `delta`.
    pub nu: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub iter: usize,
    pub residual_history: Vec<f64>,
}

impl AdmmState {
    /// `delta_ij = beta_i - beta_j`, `nu = 0`.
    pub fn from_beta(beta: CoefficientSet, pairs: Vec<(usize, usize)>) -> Self {
        let d = beta.dim();
        let mut delta = vec![0.0; pairs.len() * d];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let diff = &beta.blocks[i] - &beta.blocks[j];
            delta[k * d..(k + 1) * d].copy_from_slice(diff.as_slice());
        }
        let nu = vec![0.0; delta.len()];
        Self {
            beta,
            delta,
            nu,
            pairs,
            iter: 0,
            residual_history: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.dim()
    }

    /// `max_ij ||beta_i - beta_j - delta_ij||_2`.
    pub fn primal_residual(&self) -> f64 {
        let d = self.dim();
        self.pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let bi = &self.beta.blocks[i];
                let bj = &self.beta.blocks[j];
                (0..d)
                    .map(|c| {
                        let r = bi[c] - bj[c] - self.delta[k * d + c];
                        r * r
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Precomputed factorizations for the exact beta step (fixed `rho`).
pub struct BetaSolver {
    /// Loss weight `N^2 / (S J)^2`.
    omega: f64,
    /// Coupling weight `rho / (J M)`.
    coupling: f64,
    d: usize,
    n: usize,
    loss_rhs: Vec<DVector<f64>>,
    kind: BetaSolverKind,
}

enum BetaSolverKind {
    /// Block inverses `(2 omega A_i^T A_i + c N I)^{-1}` and the aggregate system
    /// `I - c sum_i H_i^{-1}` that eliminates the all-pairs coupling.
    Complete {
        h_inv: Vec<DMatrix<f64>>,
        aggregate_inv: DMatrix<f64>,
    },
    Dense {
        system_inv: DMatrix<f64>,
    },
}

impl BetaSolver {
    pub fn new(sys: &MomentSystem, rho: f64, graph: &PairGraph, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = sys.len();
        let d = sys.dim();
        let nf = n as f64;
        let omega = nf * nf * sys.normalizer().powi(2);
        let coupling = rho / d as f64;
        let loss_hess: Vec<DMatrix<f64>> = sys.stats.iter().map(|s| s.a.tr_mul(&s.a) * (2.0 * omega)).collect();
        let loss_rhs = sys.stats.iter().map(|s| s.a.tr_mul(&s.b) * (2.0 * omega)).collect();
        let kind = match graph {
            PairGraph::Complete => {
                let h_inv = loss_hess
                    .iter()
                    .enumerate()
                    .map(|(i, h)| {
                        let m = h + DMatrix::identity(d, d) * (coupling * nf);
                        inverse_with_jitter(&m, &format!("beta block {i}"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let scaled: Vec<DMatrix<f64>> = h_inv.iter().map(|h| h * coupling).collect();
                let sum = pairwise_sum(&scaled, &DMatrix::zeros(d, d), &|a: &DMatrix<f64>, b: &DMatrix<f64>| a + b);
                let aggregate = DMatrix::identity(d, d) - sum;
                let aggregate_inv = inverse_with_jitter(&aggregate, "aggregate beta system")?;
                BetaSolverKind::Complete { h_inv, aggregate_inv }
            }
            PairGraph::Subset(_) => {
                let mut m = DMatrix::zeros(n * d, n * d);
                for (i, h) in loss_hess.iter().enumerate() {
                    let mut block = m.view_mut((i * d, i * d), (d, d));
                    block += h;
                }
                for &(i, j) in pairs {
                    for c in 0..d {
                        let (ri, rj) = (i * d + c, j * d + c);
                        m[(ri, ri)] += coupling;
                        m[(rj, rj)] += coupling;
                        m[(ri, rj)] -= coupling;
                        m[(rj, ri)] -= coupling;
                    }
                }
                let system_inv = inverse_with_jitter(&m, "dense beta system")?;
                BetaSolverKind::Dense { system_inv }
            }
        };
        Ok(Self {
            omega,
            coupling,
            d,
            n,
            loss_rhs,
            kind,
        })
    }

    /// Right-hand side `2 omega A_i^T b_i + sum_j (+/-)(c delta_ij - nu_ij / JM)`.
    fn rhs(&self, state: &AdmmState) -> Vec<DVector<f64>> {
        let d = self.d;
        let inv_d = 1.0 / d as f64;
        let mut rhs = self.loss_rhs.clone();
        for (k, &(i, j)) in state.pairs.iter().enumerate() {
            for c in 0..d {
                let q = self.coupling * state.delta[k * d + c] - inv_d * state.nu[k * d + c];
                rhs[i][c] += q;
                rhs[j][c] -= q;
            }
        }
        rhs
    }

    /// Exact minimizer of `L_AL` over beta for the current `delta`, `nu`.
    pub fn solve(&self, state: &AdmmState) -> CoefficientSet {
        let rhs = self.rhs(state);
        match &self.kind {
            BetaSolverKind::Complete { h_inv, aggregate_inv } => {
                let y: Vec<DVector<f64>> = h_inv.par_iter().zip(&rhs).map(|(h, r)| h * r).collect();
                let ysum = pairwise_sum(&y, &DVector::zeros(self.d), &|a: &DVector<f64>, b: &DVector<f64>| a + b);
                let s = aggregate_inv * ysum;
                let cs = s * self.coupling;
                let blocks = h_inv.par_iter().zip(y).map(|(h, yi)| yi + h * &cs).collect();
                CoefficientSet::new(blocks)
            }
            BetaSolverKind::Dense { system_inv } => {
                let mut flat = DVector::zeros(self.n * self.d);
                for (i, r) in rhs.iter().enumerate() {
                    flat.rows_mut(i * self.d, self.d).copy_from(r);
                }
                let sol = system_inv * flat;
                CoefficientSet::new((0..self.n).map(|i| sol.rows(i * self.d, self.d).into_owned()).collect())
            }
        }
    }

    /// Gradient of `N^2 L_AL` with respect to beta, for stationarity checks.
    pub fn gradient(&self, sys: &MomentSystem, state: &AdmmState, beta: &CoefficientSet) -> CoefficientSet {
        let d = self.d;
        let inv_d = 1.0 / d as f64;
        let mut g: Vec<DVector<f64>> = sys
            .stats
            .iter()
            .zip(&beta.blocks)
            .zip(&self.loss_rhs)
            .map(|((s, b), r)| s.a.tr_mul(&(&s.a * b)) * (2.0 * self.omega) - r)
            .collect();
        for (k, &(i, j)) in state.pairs.iter().enumerate() {
            for c in 0..d {
                let r = beta.blocks[i][c] - beta.blocks[j][c] - state.delta[k * d + c];
                let v = inv_d * state.nu[k * d + c] + self.coupling * r;
                g[i][c] += v;
                g[j][c] -= v;
            }
        }
        CoefficientSet::new(g)
    }
}

/// Step 2: `delta_ij = prox(beta_i - beta_j + nu_ij / rho)` for every pair.
pub fn delta_update(state: &mut AdmmState, prox: &DeltaProx) {
    let d = state.dim();
    let scale = (d as f64).sqrt();
    let rho = prox.rho();
    let beta = &state.beta;
    let pairs = &state.pairs;
    state
        .delta
        .par_chunks_mut(d)
        .zip(state.nu.par_chunks(d))
        .zip(pairs.par_iter())
        .for_each(|((delta, nu), &(i, j))| {
            for c in 0..d {
                delta[c] = beta.blocks[i][c] - beta.blocks[j][c] + nu[c] / rho;
            }
            prox.apply_in_place(delta, scale);
        });
}

/// Step 3: `nu_ij += rho (beta_i - beta_j - delta_ij)`.
pub fn dual_update(state: &mut AdmmState, rho: f64) {
    let d = state.dim();
    let beta = &state.beta;
    let pairs = &state.pairs;
    state
        .nu
        .par_chunks_mut(d)
        .zip(state.delta.par_chunks(d))
        .zip(pairs.par_iter())
        .for_each(|((nu, delta), &(i, j))| {
            for c in 0..d {
                nu[c] += rho * (beta.blocks[i][c] - beta.blocks[j][c] - delta[c]);
            }
        });
}

/// Step 1 as a free function; builds the factorization on every call.
pub fn beta_update(sys: &MomentSystem, state: &AdmmState, cfg: &AdmmConfig) -> Result<CoefficientSet> {
    let graph = if state.pairs.len() == sys.len() * sys.len().saturating_sub(1) / 2 {
        PairGraph::Complete
    } else {
        PairGraph::Subset(state.pairs.clone())
    };
    Ok(BetaSolver::new(sys, cfg.rho, &graph, &state.pairs)?.solve(state))
}

/// Penalized objective `||G||^2 + 1/N^2 sum p(||beta_i - beta_j|| / sqrt(JM))`.
pub fn penalized_objective(
    sys: &MomentSystem,
    penalty: &PenaltyConfig,
    beta: &CoefficientSet,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let loss = sys.loss(beta)?;
    let scale = (sys.dim() as f64).sqrt();
    let n = sys.len() as f64;
    let pen: f64 = pairs
        .iter()
        .map(|&(i, j)| penalty_value(penalty, (&beta.blocks[i] - &beta.blocks[j]).norm() / scale))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(loss + pen / (n * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration cap reached; the iterate with the smallest primal residual is returned.
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub primal_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmDiagnostics {
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_residual: f64,
    pub objective_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub beta: CoefficientSet,
    pub diagnostics: AdmmDiagnostics,
}

pub fn initial_beta(sys: &MomentSystem, cfg: &AdmmConfig) -> Result<CoefficientSet> {
    let d = sys.dim();
    match cfg.init {
        BetaInit::Zeros => Ok(CoefficientSet::zeros(sys.len(), d)),
        BetaInit::Pooled => {
            let all: Vec<usize> = (0..sys.len()).collect();
            let theta = sys.fused_least_squares(&all)?;
            Ok(CoefficientSet::new(vec![theta; sys.len()]))
        }
        BetaInit::PerTrajectoryRidge => {
            let scale = sys
                .stats
                .iter()
                .map(|s| s.a.iter().map(|v| v * v).sum::<f64>() / d as f64)
                .sum::<f64>()
                / sys.len() as f64;
            let ridge = cfg.ridge * scale;
            let blocks = sys
                .stats
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let m = s.a.tr_mul(&s.a) + DMatrix::identity(d, d) * ridge;
                    let rhs = s.a.tr_mul(&s.b);
                    m.clone()
                        .cholesky()
                        .map(|c| c.solve(&rhs))
                        .or_else(|| m.lu().solve(&rhs))
                        .ok_or_else(|| Error::IllPosed {
                            what: format!("ridge start for trajectory {i}"),
                            detail: "singular ridge system; increase the ridge".into(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CoefficientSet::new(blocks))
        }
    }
}

/// Run ADMM over all pairs.
pub fn solve(sys: &MomentSystem, penalty: &PenaltyConfig, cfg: &AdmmConfig) -> Result<AdmmSolution> {
    solve_with(sys, penalty, cfg, &PairGraph::Complete, &mut |_| {})
}

/// Run ADMM with an explicit pair graph, reporting every iteration to `observer`.
pub fn solve_with(
    sys: &MomentSystem,
    penalty: &PenaltyConfig,
    cfg: &AdmmConfig,
    graph: &PairGraph,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<AdmmSolution> {
    cfg.validate()?;
    let start = initial_beta(sys, cfg)?;
    solve_from(sys, penalty, cfg, graph, start, observer)
}

/// ADMM from an explicit starting point (`delta = beta_i - beta_j`, `nu = 0`).
pub fn solve_from(
    sys: &MomentSystem,
    penalty: &PenaltyConfig,
    cfg: &AdmmConfig,
    graph: &PairGraph,
    start: CoefficientSet,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<AdmmSolution> {
    cfg.validate()?;
    let prox = DeltaProx::new(*penalty, cfg.rho)?;
    let pairs = graph.pairs(sys.len())?;
    let solver = BetaSolver::new(sys, cfg.rho, graph, &pairs)?;
    let mut state = AdmmState::from_beta(start, pairs);

    let mut best: Option<(f64, CoefficientSet)> = None;
    let mut objective_trace = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    while state.iter < cfg.max_iters {
        state.beta = solver.solve(&state);
        if !state.beta.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite coefficients at ADMM iteration {}",
                state.iter + 1
            )));
        }
        delta_update(&mut state, &prox);
        dual_update(&mut state, cfg.rho);
        state.iter += 1;

        let residual = state.primal_residual();
        let objective = penalized_objective(sys, penalty, &state.beta, &state.pairs)?;
        if !residual.is_finite() || !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite residual/objective at ADMM iteration {}",
                state.iter
            )));
        }
        state.residual_history.push(residual);
        objective_trace.push(objective);
        observer(&IterationRecord {
            iter: state.iter,
            primal_residual: residual,
            objective,
        });
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, state.beta.clone()));
        }
        if residual < cfg.eps {
            status = SolveStatus::Converged;
            break;
        }
    }

    let (final_residual, beta) = match status {
        SolveStatus::Converged => (*state.residual_history.last().unwrap_or(&0.0), state.beta),
        SolveStatus::MaxIterations => {
            let (r, b) = best.unwrap_or((f64::INFINITY, state.beta));
            log::warn!("ADMM stopped at the iteration cap ({}) with primal residual {r:.3e}", cfg.max_iters);
            (r, b)
        }
    };
    Ok(AdmmSolution {
        beta,
        diagnostics: AdmmDiagnostics {
            status,
            iterations: state.iter,
            final_residual,
            objective_trace,
            residual_trace: state.residual_history,
        },
    })
}
