//! Bellman moment statistics under the linear sieve model.
//!
//! For trajectory `i` with features `Z_t = z(X_t, A_t)` and
//! `W_t = Z_t - gamma * u(pi, X_{t+1})`:
//!
//! ```text
//! A_i = sum_t Z_t W_t^T      b_i = sum_t Z_t R_t      Gram_i = sum_t Z_t Z_t^T
//! ```
//!
//! The stacked moment vector has blocks `(b_i - A_i beta_i) / (S J)` with
//! `S = sum_i T_i`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::FeatureContext;
use crate::data::{policy_probs, Policy, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, solve_checked};

/// Per-trajectory coefficient blocks `beta_1 .. beta_N`, each of length `J M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub blocks: Vec<DVector<f64>>,
}

impl CoefficientSet {
    pub fn new(blocks: Vec<DVector<f64>>) -> Self {
        Self { blocks }
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            blocks: vec![DVector::zeros(dim); n],
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self {
            blocks: rows.iter().map(|r| DVector::from_column_slice(r)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Sufficient statistics of one trajectory, plus the per-step rows needed by
/// the residual-weighted sandwich.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub gram: DMatrix<f64>,
    pub steps: usize,
    /// Row `t` is `Z_t^T`.
    pub z_rows: DMatrix<f64>,
    /// Row `t` is `(Z_t - gamma U_{t+1})^T`.
    pub w_rows: DMatrix<f64>,
    pub rewards: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSystem {
    pub stats: Vec<TrajectoryStats>,
    pub gamma: f64,
    pub basis_dim: usize,
    pub n_actions: usize,
    pub total_steps: usize,
}

/// Build the per-trajectory statistics for evaluating `policy`.
pub fn assemble(batch: &TrajectoryBatch, ctx: &FeatureContext, policy: &Policy) -> Result<MomentSystem> {
    if ctx.n_actions != batch.n_actions() {
        return Err(Error::Dimension {
            expected: batch.n_actions(),
            got: ctx.n_actions,
            context: "feature context action count",
        });
    }
    if policy.n_actions() != batch.n_actions() {
        return Err(Error::Dimension {
            expected: batch.n_actions(),
            got: policy.n_actions(),
            context: "policy action count",
        });
    }
    let gamma = batch.gamma();
    let d = ctx.dim();
    let stats = batch
        .trajectories()
        .par_iter()
        .map(|traj| {
            let steps = traj.len();
            let mut z_rows = DMatrix::zeros(steps, d);
            let mut w_rows = DMatrix::zeros(steps, d);
            let mut a = DMatrix::zeros(d, d);
            let mut b = DVector::zeros(d);
            let mut gram = DMatrix::zeros(d, d);
            let mut phi_next = ctx.phi(&traj.states[0])?;
            for t in 0..steps {
                let phi = std::mem::replace(&mut phi_next, ctx.phi(&traj.states[t + 1])?);
                let z = DVector::from_vec(ctx.z_from_phi(&phi, traj.actions[t])?);
                let probs = policy_probs(policy, &traj.states[t + 1])?;
                let u = DVector::from_vec(ctx.u_from_parts(&phi_next, &probs)?);
                let w = &z - &u * gamma;
                a.ger(1.0, &z, &w, 1.0);
                gram.ger(1.0, &z, &z, 1.0);
                b.axpy(traj.rewards[t], &z, 1.0);
                z_rows.set_row(t, &z.transpose());
                w_rows.set_row(t, &w.transpose());
            }
            Ok(TrajectoryStats {
                a,
                b,
                gram,
                steps,
                z_rows,
                w_rows,
                rewards: DVector::from_column_slice(&traj.rewards),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentSystem {
        stats,
        gamma,
        basis_dim: ctx.basis_dim(),
        n_actions: ctx.n_actions,
        total_steps: batch.total_steps(),
    })
}

impl MomentSystem {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Coefficient block length `J M`.
    pub fn dim(&self) -> usize {
        self.basis_dim * self.n_actions
    }

    /// The `1 / (S J)` factor in front of the moment vector.
    pub fn normalizer(&self) -> f64 {
        1.0 / (self.total_steps as f64 * self.basis_dim as f64)
    }

    fn check_beta(&self, beta: &CoefficientSet) -> Result<()> {
        if beta.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: beta.len(),
                context: "coefficient block count",
            });
        }
        if let Some(b) = beta.blocks.iter().find(|b| b.len() != self.dim()) {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: b.len(),
                context: "coefficient block length",
            });
        }
        Ok(())
    }

    /// Blocks `(b_i - A_i beta_i) / (S J)`, concatenated.
    pub fn moment_vector(&self, beta: &CoefficientSet) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        let d = self.dim();
        let k = self.normalizer();
        let mut g = DVector::zeros(d * self.len());
        for (i, (s, bi)) in self.stats.iter().zip(&beta.blocks).enumerate() {
            let block = (&s.b - &s.a * bi) * k;
            g.rows_mut(i * d, d).copy_from(&block);
        }
        Ok(g)
    }

    /// `||G||^2`.
    pub fn loss(&self, beta: &CoefficientSet) -> Result<f64> {
        Ok(self.moment_vector(beta)?.norm_squared())
    }

    /// Gradient of `||G||^2` with respect to each block.
    pub fn loss_gradient(&self, beta: &CoefficientSet) -> Result<CoefficientSet> {
        self.check_beta(beta)?;
        let k2 = self.normalizer().powi(2);
        let blocks = self
            .stats
            .iter()
            .zip(&beta.blocks)
            .map(|(s, bi)| s.a.tr_mul(&(&s.a * bi - &s.b)) * (2.0 * k2))
            .collect();
        Ok(CoefficientSet::new(blocks))
    }

    fn summed<F>(&self, members: &[usize], f: F) -> Result<DMatrix<f64>>
    where
        F: Fn(&TrajectoryStats) -> DMatrix<f64>,
    {
        if members.is_empty() {
            return Err(Error::Config("empty member set".into()));
        }
        let parts = members
            .iter()
            .map(|&i| {
                self.stats
                    .get(i)
                    .map(&f)
                    .ok_or_else(|| Error::Config(format!("member index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let zero = DMatrix::zeros(parts[0].nrows(), parts[0].ncols());
        Ok(pairwise_sum(&parts, &zero, &|x: &DMatrix<f64>, y: &DMatrix<f64>| x + y))
    }

    /// Root of the group estimating equation `sum_i A_i theta = sum_i b_i`.
    pub fn solve_group(&self, members: &[usize]) -> Result<DVector<f64>> {
        let a = self.summed(members, |s| s.a.clone())?;
        let b = self.summed(members, |s| DMatrix::from_column_slice(s.b.len(), 1, s.b.as_slice()))?;
        solve_checked(&a, &b.column(0).into_owned(), &group_label(members))
    }

    /// Minimizer of `sum_i ||b_i - A_i theta||^2`: the value all blocks take when
    /// the fused objective collapses to a single group.
    pub fn fused_least_squares(&self, members: &[usize]) -> Result<DVector<f64>> {
        let ata = self.summed(members, |s| s.a.tr_mul(&s.a))?;
        let atb = self.summed(members, |s| {
            let v = s.a.tr_mul(&s.b);
            DMatrix::from_column_slice(v.len(), 1, v.as_slice())
        })?;
        solve_checked(&ata, &atb.column(0).into_owned(), &group_label(members))
    }

    /// `(Sigma, Omega)` for the given members and group coefficients, both
    /// normalized by the full-sample step count `S`.
    pub fn sandwich(&self, members: &[usize], theta: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: theta.len(),
                context: "group coefficients",
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite group coefficients".into()));
        }
        let inv_s = 1.0 / self.total_steps as f64;
        let sigma = self.summed(members, |s| s.a.clone())? * inv_s;
        let omega = self.summed(members, |s| {
            let resid = &s.rewards - &s.w_rows * theta;
            // Z^T diag(resid^2) Z
            let mut weighted = s.z_rows.clone();
            for (t, r) in resid.iter().enumerate() {
                weighted.row_mut(t).scale_mut(r * r);
            }
            s.z_rows.tr_mul(&weighted)
        })? * inv_s;
        Ok((sigma, omega))
    }
}

fn group_label(members: &[usize]) -> String {
    if members.len() <= 8 {
        format!("group {members:?}")
    } else {
        format!(
            "group of {} trajectories starting {:?}",
            members.len(),
            &members[..4]
        )
    }
}
