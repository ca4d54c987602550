//! Group detection on fitted coefficients, group coefficients, value
//! estimates and integrated-value confidence intervals, plus the end-to-end
//! evaluation pipeline that ties them to the fused solver.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::admm::{self, AdmmConfig, AdmmDiagnostics};
use crate::basis::{BasisChoice, FeatureContext};
use crate::data::{Policy, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, sym_part, MAX_CONDITION};
use crate::moment::{assemble, CoefficientSet, MomentSystem};
use crate::penalty::PenaltyConfig;

/// Partition of `N` trajectories into `K` nonempty groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl GroupAssignment {
    /// Build from arbitrary labels; groups are renumbered by first appearance.
    pub fn from_labels(raw: &[usize]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Config("cannot group zero trajectories".into()));
        }
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = raw
            .iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect();
        let k = map.len();
        let mut sizes = vec![0; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        Ok(Self { k, labels, sizes })
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::from_labels(&vec![0; n])
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| i)
            .collect()
    }

    /// The `N x K` 0/1 membership matrix.
    pub fn w(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n(), self.k);
        for (i, &l) in self.labels.iter().enumerate() {
            w[(i, l)] = 1.0;
        }
        w
    }
}

/// How trajectories are clustered from their fitted coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GroupingMode {
    /// Connected components of `{(i, j): ||beta_i - beta_j|| / sqrt(JM) <= tau}`.
    /// `tau = None` means half the penalty's lambda.
    FusedGraph { tau: Option<f64> },
    KMeans { k: usize, restarts: usize, seed: u64 },
}

impl Default for GroupingMode {
    fn default() -> Self {
        Self::FusedGraph { tau: None }
    }
}

impl GroupingMode {
    pub fn kmeans(k: usize) -> Self {
        Self::KMeans { k, restarts: 10, seed: 0 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::FusedGraph { .. } => "fused_graph",
            Self::KMeans { .. } => "kmeans",
        }
    }
}

/// `fused`, `fused:tau=0.05`, `kmeans:k=2`, `kmeans:k=2:restarts=20:seed=7`.
impl FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let bad = |msg: String| Error::Config(format!("grouping {s:?}: {msg}"));
        let mut mode = match head {
            "fused" | "fused_graph" => Self::FusedGraph { tau: None },
            "kmeans" => Self::KMeans {
                k: 0,
                restarts: 10,
                seed: 0,
            },
            other => return Err(bad(format!("unknown mode {other:?}"))),
        };
        for kv in parts {
            let (key, val) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
            match (&mut mode, key) {
                (Self::FusedGraph { tau }, "tau") => {
                    *tau = Some(val.parse().map_err(|_| bad(format!("bad tau {val:?}")))?)
                }
                (Self::KMeans { k, .. }, "k") => *k = val.parse().map_err(|_| bad(format!("bad k {val:?}")))?,
                (Self::KMeans { restarts, .. }, "restarts") => {
                    *restarts = val.parse().map_err(|_| bad(format!("bad restarts {val:?}")))?
                }
                (Self::KMeans { seed, .. }, "seed") => {
                    *seed = val.parse().map_err(|_| bad(format!("bad seed {val:?}")))?
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        if let Self::KMeans { k, restarts, .. } = mode {
            if k == 0 || restarts == 0 {
                return Err(bad("kmeans needs k >= 1 and restarts >= 1".into()));
            }
        }
        if let Self::FusedGraph { tau: Some(t) } = mode {
            if !(t > 0.0) {
                return Err(bad("tau must be positive".into()));
            }
        }
        Ok(mode)
    }
}

fn scaled_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / (a.len() as f64).sqrt()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn fused_components(beta: &CoefficientSet, tau: f64) -> Vec<usize> {
    let n = beta.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if scaled_distance(&beta.blocks[i], &beta.blocks[j]) <= tau {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// One k-means++ seeded Lloyd run: `(labels, inertia)`.
fn lloyd(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            // an emptied cluster keeps its old center
            if !members.is_empty() {
                let mut sum = DVector::zeros(center.len());
                for m in &members {
                    sum += *m;
                }
                *center = sum / members.len() as f64;
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

/// Cluster trajectories by their fitted coefficients. `lambda` is only used to
/// default the fused-graph threshold.
pub fn detect_groups(beta: &CoefficientSet, mode: &GroupingMode, lambda: f64) -> Result<GroupAssignment> {
    if beta.is_empty() {
        return Err(Error::Config("no coefficients to group".into()));
    }
    if !beta.is_finite() {
        return Err(Error::Numerical("non-finite coefficients passed to grouping".into()));
    }
    match *mode {
        GroupingMode::FusedGraph { tau } => {
            let tau = tau.unwrap_or(0.5 * lambda);
            if !(tau > 0.0) {
                return Err(Error::Config(format!(
                    "fused-graph threshold must be positive (got {tau}); set tau or use lambda > 0"
                )));
            }
            GroupAssignment::from_labels(&fused_components(beta, tau))
        }
        GroupingMode::KMeans { k, restarts, seed } => {
            if k == 0 || k > beta.len() {
                return Err(Error::Config(format!(
                    "kmeans with K = {k} on {} trajectories",
                    beta.len()
                )));
            }
            let mut best: Option<(Vec<usize>, f64)> = None;
            for r in 0..restarts.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let (labels, inertia) = lloyd(&beta.blocks, k, &mut rng);
                if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
                    best = Some((labels, inertia));
                }
            }
            let (labels, _) = best.expect("at least one restart");
            GroupAssignment::from_labels(&labels)
        }
    }
}

fn check_assignment(assignment: &GroupAssignment, n: usize) -> Result<()> {
    if assignment.n() != n {
        return Err(Error::Dimension {
            expected: n,
            got: assignment.n(),
            context: "group labels",
        });
    }
    if assignment.sizes.len() != assignment.k || assignment.sizes.contains(&0) {
        return Err(Error::Config("group assignment has empty groups".into()));
    }
    Ok(())
}

/// Mean of member coefficients per group (`B W / N_k`).
pub fn group_coefficients(beta: &CoefficientSet, assignment: &GroupAssignment) -> Result<Vec<DVector<f64>>> {
    check_assignment(assignment, beta.len())?;
    let d = beta.dim();
    let mut theta = vec![DVector::zeros(d); assignment.k];
    for (b, &l) in beta.blocks.iter().zip(&assignment.labels) {
        theta[l] += b;
    }
    for (t, &size) in theta.iter_mut().zip(&assignment.sizes) {
        *t /= size as f64;
    }
    Ok(theta)
}

/// Group estimating-equation roots given the partition.
pub fn refit_groups(sys: &MomentSystem, assignment: &GroupAssignment) -> Result<Vec<DVector<f64>>> {
    check_assignment(assignment, sys.len())?;
    (0..assignment.k).map(|k| sys.solve_group(&assignment.members(k))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaMode {
    #[default]
    Refit,
    Average,
}

impl FromStr for ThetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refit" => Ok(Self::Refit),
            "average" => Ok(Self::Average),
            other => Err(Error::Config(format!("unknown theta mode {other:?}"))),
        }
    }
}

/// Fitted group value functions under one policy.
#[derive(Debug, Clone)]
pub struct GroupModel {
    pub theta: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub omega: Vec<DMatrix<f64>>,
    /// Condition number of each `Sigma`.
    pub cond: Vec<f64>,
    pub ctx: FeatureContext,
    pub policy: Policy,
    pub assignment: GroupAssignment,
    /// `S = sum_i T_i` over the whole batch.
    pub total_steps: usize,
}

impl GroupModel {
    pub fn build(
        sys: &MomentSystem,
        assignment: GroupAssignment,
        theta: Vec<DVector<f64>>,
        ctx: FeatureContext,
        policy: Policy,
    ) -> Result<Self> {
        check_assignment(&assignment, sys.len())?;
        if theta.len() != assignment.k {
            return Err(Error::Dimension {
                expected: assignment.k,
                got: theta.len(),
                context: "group coefficient count",
            });
        }
        let mut sigma = Vec::with_capacity(assignment.k);
        let mut omega = Vec::with_capacity(assignment.k);
        let mut cond = Vec::with_capacity(assignment.k);
        for (k, th) in theta.iter().enumerate() {
            let (s, o) = sys.sandwich(&assignment.members(k), th)?;
            cond.push(condition_number(&s));
            sigma.push(s);
            omega.push(o);
        }
        Ok(Self {
            theta,
            sigma,
            omega,
            cond,
            ctx,
            policy,
            assignment,
            total_steps: sys.total_steps,
        })
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    /// `Q^(k)(x, a) = z(x, a)^T theta_k`.
    pub fn q_value(&self, k: usize, x: &[f64], action: usize) -> Result<f64> {
        let z = self.ctx.z(x, action)?;
        Ok(dot(&z, &self.theta[k]))
    }

    /// `V^(k)(x) = u(pi, x)^T theta_k`.
    pub fn v_value(&self, k: usize, x: &[f64]) -> Result<f64> {
        let u = self.ctx.u(&self.policy, x)?;
        Ok(dot(&u, &self.theta[k]))
    }

    /// Mean of `u(pi, x)` over a reference sample.
    pub fn mean_u(&self, reference: &[Vec<f64>]) -> Result<DVector<f64>> {
        if reference.is_empty() {
            return Err(Error::Config("reference sample is empty".into()));
        }
        let mut acc = DVector::zeros(self.ctx.dim());
        for x in reference {
            acc += DVector::from_vec(self.ctx.u(&self.policy, x)?);
        }
        Ok(acc / reference.len() as f64)
    }
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInference {
    pub v_r: f64,
    /// `sigma_R`, the per-step scale; the standard error is `sigma_R / sqrt(S)`.
    pub sigma: f64,
    pub se: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub level: f64,
    pub z: f64,
    pub groups: Vec<GroupInference>,
}

/// Two-sided normal critical value for the given coverage level.
pub fn normal_critical(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// `Sigma^-1 Omega Sigma^-T`, symmetrized after checking it is symmetric to rounding.
pub fn sandwich_covariance(sigma: &DMatrix<f64>, omega: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let cond = condition_number(sigma);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllPosed {
            what: what.to_string(),
            detail: format!("Sigma condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"),
        });
    }
    let inv = sigma.clone().try_inverse().ok_or_else(|| Error::IllPosed {
        what: what.to_string(),
        detail: "Sigma is not invertible".into(),
    })?;
    let m = &inv * omega * inv.transpose();
    let scale = 1.0 + m.amax();
    let asym = (&m - m.transpose()).amax() / scale;
    if asym >= 1e-8 {
        return Err(Error::Numerical(format!(
            "{what}: sandwich covariance asymmetry {asym:.3e} above 1e-8"
        )));
    }
    Ok(sym_part(&m))
}

/// Integrated value per group with normal confidence intervals.
pub fn integrated_value(model: &GroupModel, reference: &[Vec<f64>], level: f64) -> Result<InferenceResult> {
    let z = normal_critical(level)?;
    let u_bar = model.mean_u(reference)?;
    let root_s = (model.total_steps as f64).sqrt();
    let groups = (0..model.k())
        .map(|k| {
            let v_r = u_bar.dot(&model.theta[k]);
            let cov = sandwich_covariance(&model.sigma[k], &model.omega[k], &format!("group {k}"))?;
            let sigma = (u_bar.dot(&(&cov * &u_bar))).max(0.0).sqrt();
            let se = sigma / root_s;
            Ok(GroupInference {
                v_r,
                sigma,
                se,
                ci: [v_r - z * se, v_r + z * se],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceResult { level, z, groups })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // both partitions trivial and identical in structure
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Settings for one evaluation run (fit, group, infer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub basis: BasisChoice,
    pub penalty: PenaltyConfig,
    pub admm: AdmmConfig,
    pub grouping: GroupingMode,
    pub theta_mode: ThetaMode,
    pub level: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            basis: BasisChoice::default(),
            penalty: PenaltyConfig::mcp(0.1, 1.5).expect("valid default penalty"),
            admm: AdmmConfig::default(),
            grouping: GroupingMode::default(),
            theta_mode: ThetaMode::Refit,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub beta: CoefficientSet,
    pub diagnostics: AdmmDiagnostics,
    pub model: GroupModel,
    pub inference: InferenceResult,
}

/// Fit per-trajectory coefficients with the fused penalty, cluster them, and
/// estimate group values. With `groups = Some(..)` the clustering step is
/// skipped and the given partition is used.
pub fn evaluate_with(
    batch: &TrajectoryBatch,
    ctx: &FeatureContext,
    policy: &Policy,
    cfg: &EvaluateConfig,
    reference: &[Vec<f64>],
    groups: Option<GroupAssignment>,
) -> Result<Evaluation> {
    if policy.n_actions() != batch.n_actions() {
        return Err(Error::Dimension {
            expected: batch.n_actions(),
            got: policy.n_actions(),
            context: "policy action count",
        });
    }
    let sys = assemble(batch, ctx, policy)?;
    let sol = admm::solve(&sys, &cfg.penalty, &cfg.admm)?;
    let assignment = match groups {
        Some(g) => g,
        None => detect_groups(&sol.beta, &cfg.grouping, cfg.penalty.lambda)?,
    };
    let theta = match cfg.theta_mode {
        ThetaMode::Refit => refit_groups(&sys, &assignment)?,
        ThetaMode::Average => group_coefficients(&sol.beta, &assignment)?,
    };
    let model = GroupModel::build(&sys, assignment, theta, ctx.clone(), policy.clone())?;
    let inference = integrated_value(&model, reference, cfg.level)?;
    Ok(Evaluation {
        beta: sol.beta,
        diagnostics: sol.diagnostics,
        model,
        inference,
    })
}

/// Inference for a fixed partition using refit coefficients only; with the
/// single-group partition this is the pooled (homogeneous) baseline.
pub fn pooled_inference(
    batch: &TrajectoryBatch,
    ctx: &FeatureContext,
    policy: &Policy,
    level: f64,
    reference: &[Vec<f64>],
    assignment: GroupAssignment,
) -> Result<InferenceResult> {
    let sys = assemble(batch, ctx, policy)?;
    let theta = refit_groups(&sys, &assignment)?;
    let model = GroupModel::build(&sys, assignment, theta, ctx.clone(), policy.clone())?;
    integrated_value(&model, reference, level)
}

/// [`evaluate_with`] with the basis resolved from the batch and, by default,
/// the batch's initial states as the reference sample.
pub fn evaluate(
    batch: &TrajectoryBatch,
    policy: &Policy,
    cfg: &EvaluateConfig,
    reference: Option<&[Vec<f64>]>,
) -> Result<Evaluation> {
    let spec = cfg.basis.resolve(batch.state_dim(), batch.all_states())?;
    let ctx = FeatureContext::new(spec, batch.n_actions());
    let initial;
    let reference = match reference {
        Some(r) => r,
        None => {
            initial = batch.initial_states();
            &initial
        }
    };
    evaluate_with(batch, &ctx, policy, cfg, reference, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub members: Vec<String>,
    pub theta: Vec<f64>,
    #[serde(rename = "V_R")]
    pub v_r: f64,
    pub sigma: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub sigma_condition: f64,
}

/// JSON shape of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub groups: Vec<GroupReport>,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: String,
    pub refit: bool,
    pub settings: EvaluateConfig,
    pub admm: AdmmSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmSummary {
    pub status: admm::SolveStatus,
    pub iterations: usize,
    pub final_residual: f64,
}

impl EvaluationReport {
    pub fn new(eval: &Evaluation, batch: &TrajectoryBatch, cfg: &EvaluateConfig) -> Self {
        let ids: Vec<&str> = batch.trajectories().iter().map(|t| t.id.as_str()).collect();
        let groups = eval
            .inference
            .groups
            .iter()
            .enumerate()
            .map(|(k, g)| GroupReport {
                members: eval.model.assignment.members(k).into_iter().map(|i| ids[i].to_string()).collect(),
                theta: eval.model.theta[k].iter().copied().collect(),
                v_r: g.v_r,
                sigma: g.sigma,
                se: g.se,
                ci: g.ci,
                sigma_condition: eval.model.cond[k],
            })
            .collect();
        Self {
            groups,
            k: eval.model.k(),
            mode: cfg.grouping.label().to_string(),
            refit: cfg.theta_mode == ThetaMode::Refit,
            settings: cfg.clone(),
            admm: AdmmSummary {
                status: eval.diagnostics.status,
                iterations: eval.diagnostics.iterations,
                final_residual: eval.diagnostics.final_residual,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::data::{SoftmaxPolicy, TabularPolicy, Trajectory};
    use proptest::prelude::*;
    use rand::Rng;

    fn blocks(rows: &[&[f64]]) -> CoefficientSet {
        CoefficientSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn identical_coefficients_form_one_group() {
        let b = blocks(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let g = detect_groups(&b, &GroupingMode::FusedGraph { tau: Some(1e-9) }, 0.0).unwrap();
        assert_eq!(g.k, 1);
        assert_eq!(g.sizes, vec![3]);
    }

    #[test]
    fn separated_clusters_are_split_exactly() {
        let b = blocks(&[&[0.0, 0.0], &[5.0, 5.0], &[0.0, 0.1], &[5.0, 5.1]]);
        let g = detect_groups(&b, &GroupingMode::FusedGraph { tau: Some(0.5) }, 0.0).unwrap();
        assert_eq!(g.labels, vec![0, 1, 0, 1]);
        let km = detect_groups(&b, &GroupingMode::kmeans(2), 0.0).unwrap();
        assert_eq!(km.labels, vec![0, 1, 0, 1]);
    }

    #[test]
    fn fused_threshold_defaults_to_half_lambda() {
        // scaled distance between the two blocks is 0.3 / sqrt(2) ~ 0.212
        let b = blocks(&[&[0.0, 0.0], &[0.3, 0.0]]);
        assert_eq!(detect_groups(&b, &GroupingMode::default(), 0.5).unwrap().k, 1);
        assert_eq!(detect_groups(&b, &GroupingMode::default(), 0.4).unwrap().k, 2);
        assert!(detect_groups(&b, &GroupingMode::default(), 0.0).is_err());
    }

    #[test]
    fn kmeans_rejects_too_many_groups() {
        let b = blocks(&[&[0.0], &[1.0]]);
        assert!(matches!(
            detect_groups(&b, &GroupingMode::kmeans(3), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = CoefficientSet::from_rows(&rows);
        let mode = GroupingMode::KMeans {
            k: 3,
            restarts: 5,
            seed: 11,
        };
        assert_eq!(detect_groups(&b, &mode, 0.0).unwrap(), detect_groups(&b, &mode, 0.0).unwrap());
    }

    #[test]
    fn membership_matrix_rows_sum_to_one() {
        let g = GroupAssignment::from_labels(&[7, 3, 7, 9, 3]).unwrap();
        assert_eq!(g.labels, vec![0, 1, 0, 2, 1]);
        assert_eq!(g.sizes, vec![2, 2, 1]);
        let w = g.w();
        for r in 0..5 {
            assert_eq!(w.row(r).sum(), 1.0);
        }
        assert_eq!(g.sizes.iter().sum::<usize>(), 5);
    }

    #[test]
    fn group_mean_examples() {
        let b = blocks(&[&[1.0, 1.0, 1.0], &[3.0, 3.0, 3.0], &[9.0, 0.0, 0.0]]);
        let g = GroupAssignment::from_labels(&[0, 0, 1]).unwrap();
        let th = group_coefficients(&b, &g).unwrap();
        assert_eq!(th[0].as_slice(), &[2.0, 2.0, 2.0]);
        assert_eq!(th[1].as_slice(), &[9.0, 0.0, 0.0]);
        // matricized form B W / N_k
        let bm = DMatrix::from_columns(&b.blocks);
        let prod = bm * g.w();
        assert_eq!(prod.column(0) / 2.0, th[0]);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // textbook example: perfect split vs one misplaced item
        let ari = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]);
        // contingency [[2,1],[0,3]]: index 1+3=4, rows 3+3=6, cols 1+6=7, total 15
        let expected = (4.0 - 6.0 * 7.0 / 15.0) / (6.5 - 6.0 * 7.0 / 15.0);
        assert!((ari - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fused_graph_is_scale_invariant(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..12),
                                          tau in 0.05f64..2.0, c in 0.1f64..10.0) {
            let b = CoefficientSet::from_rows(&rows);
            let scaled = CoefficientSet::new(b.blocks.iter().map(|v| v * c).collect());
            let g1 = detect_groups(&b, &GroupingMode::FusedGraph { tau: Some(tau) }, 0.0).unwrap();
            let g2 = detect_groups(&scaled, &GroupingMode::FusedGraph { tau: Some(tau * c) }, 0.0).unwrap();
            // tolerate knife-edge pairs where rounding can flip the comparison
            let edge = rows.iter().enumerate().any(|(i, a)| rows[i + 1..].iter().any(|bb| {
                let d = scaled_distance(&DVector::from_vec(a.clone()), &DVector::from_vec(bb.clone()));
                (d - tau).abs() < 1e-9
            }));
            if !edge {
                prop_assert_eq!(g1, g2);
            }
        }

        #[test]
        fn group_mean_is_affine(rows1 in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 6),
                                rows2 in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 6),
                                s in -2.0f64..2.0) {
            let g = GroupAssignment::from_labels(&[0, 1, 0, 2, 1, 0]).unwrap();
            let b1 = CoefficientSet::from_rows(&rows1);
            let b2 = CoefficientSet::from_rows(&rows2);
            let comb = CoefficientSet::new(b1.blocks.iter().zip(&b2.blocks).map(|(x, y)| x * s + y).collect());
            let t1 = group_coefficients(&b1, &g).unwrap();
            let t2 = group_coefficients(&b2, &g).unwrap();
            let tc = group_coefficients(&comb, &g).unwrap();
            for k in 0..3 {
                prop_assert!((&tc[k] - (&t1[k] * s + &t2[k])).amax() < 1e-12);
            }
        }
    }

    fn toy_batch(seed: u64, n: usize, t: usize) -> TrajectoryBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..n)
            .map(|i| {
                let states = (0..=t)
                    .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let actions = (0..t).map(|_| rng.random_range(1..=2)).collect();
                let rewards = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
                Trajectory::new(format!("t{i}"), states, actions, rewards).unwrap()
            })
            .collect();
        TrajectoryBatch::new(trajs, 2, 0.6).unwrap()
    }

    fn toy_model(theta: Vec<DVector<f64>>, policy: Policy) -> GroupModel {
        let batch = toy_batch(1, 4, 10);
        let ctx = FeatureContext::new(BasisSpec::identity(2, true), 2);
        let sys = assemble(&batch, &ctx, &policy).unwrap();
        let g = GroupAssignment::from_labels(&[0, 0, 1, 1]).unwrap();
        GroupModel::build(&sys, g, theta, ctx, policy).unwrap()
    }

    fn softmax(alpha: Vec<Vec<f64>>) -> Policy {
        Policy::Softmax(SoftmaxPolicy { alpha, intercept: true })
    }

    #[test]
    fn zero_theta_gives_zero_values() {
        let m = toy_model(vec![DVector::zeros(6); 2], softmax(vec![vec![0.3, -0.2, 0.5]]));
        assert_eq!(m.q_value(0, &[0.4, -1.0], 2).unwrap(), 0.0);
        assert_eq!(m.v_value(1, &[0.4, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn v_is_policy_average_of_q() {
        let pol = softmax(vec![vec![0.3, -0.2, 0.5]]);
        let th = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]);
        let m = toy_model(vec![th.clone(), th], pol.clone());
        let x = [0.8, -0.25];
        let p = crate::data::policy_probs(&pol, &x).unwrap();
        let avg = p[0] * m.q_value(0, &x, 1).unwrap() + p[1] * m.q_value(0, &x, 2).unwrap();
        assert!((m.v_value(0, &x).unwrap() - avg).abs() < 1e-14);

        let det = Policy::Tabular(TabularPolicy::sim_target());
        let th = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]);
        let md = toy_model(vec![th.clone(), th], det);
        // both coordinates positive selects action 1
        assert_eq!(md.v_value(0, &[0.5, 0.5]).unwrap(), md.q_value(0, &[0.5, 0.5], 1).unwrap());
        assert_eq!(md.v_value(0, &[-0.5, 0.5]).unwrap(), md.q_value(0, &[-0.5, 0.5], 2).unwrap());
    }

    #[test]
    fn point_mass_reference_matches_pointwise_value() {
        let pol = softmax(vec![vec![0.3, -0.2, 0.5]]);
        let th = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]);
        let m = toy_model(vec![th.clone(), th * 2.0], pol);
        let x0 = vec![0.1, 0.9];
        let inf = integrated_value(&m, std::slice::from_ref(&x0), 0.95).unwrap();
        for k in 0..2 {
            assert!((inf.groups[k].v_r - m.v_value(k, &x0).unwrap()).abs() < 1e-14);
            let g = &inf.groups[k];
            assert!(g.ci[0] <= g.v_r && g.v_r <= g.ci[1]);
            let width = 2.0 * inf.z * g.sigma / (m.total_steps as f64).sqrt();
            assert!((g.ci[1] - g.ci[0] - width).abs() < 1e-12);
        }
        assert!(integrated_value(&m, &[], 0.95).is_err());
    }

    #[test]
    fn exact_linear_rewards_give_zero_width() {
        // gamma = 0 and rewards exactly linear in z: residuals vanish
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = FeatureContext::new(BasisSpec::identity(2, true), 2);
        let truth = [0.3, -0.4, 1.1, -0.7, 0.2, 0.5];
        let trajs = (0..6)
            .map(|i| {
                let states: Vec<Vec<f64>> = (0..=12)
                    .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let actions: Vec<usize> = (0..12).map(|_| rng.random_range(1..=2)).collect();
                let rewards = (0..12)
                    .map(|t| {
                        let z = ctx.z(&states[t], actions[t]).unwrap();
                        z.iter().zip(truth).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                Trajectory::new(format!("e{i}"), states, actions, rewards).unwrap()
            })
            .collect();
        let batch = TrajectoryBatch::new(trajs, 2, 0.0).unwrap();
        let pol = softmax(vec![vec![0.0; 3]]);
        let sys = assemble(&batch, &ctx, &pol).unwrap();
        let g = GroupAssignment::single(6).unwrap();
        let theta = refit_groups(&sys, &g).unwrap();
        assert!((&theta[0] - DVector::from_row_slice(&truth)).amax() < 1e-10);
        let m = GroupModel::build(&sys, g, theta, ctx, pol).unwrap();
        assert!(m.omega[0].amax() < 1e-20);
        let inf = integrated_value(&m, &batch.initial_states(), 0.95).unwrap();
        assert!(inf.groups[0].ci[1] - inf.groups[0].ci[0] < 1e-9);
    }

    #[test]
    fn single_group_refit_is_pooled_solution() {
        let batch = toy_batch(3, 5, 15);
        let ctx = FeatureContext::new(BasisSpec::identity(2, true), 2);
        let pol = softmax(vec![vec![0.1, 0.2, -0.3]]);
        let sys = assemble(&batch, &ctx, &pol).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let th = refit_groups(&sys, &GroupAssignment::single(5).unwrap()).unwrap();
        assert_eq!(th[0], sys.solve_group(&all).unwrap());
    }

    #[test]
    fn singular_sigma_is_ill_posed() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let o = DMatrix::identity(2, 2);
        assert!(matches!(sandwich_covariance(&s, &o, "g"), Err(Error::IllPosed { .. })));
    }

    #[test]
    fn critical_value_matches_table() {
        assert!((normal_critical(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!(normal_critical(1.0).is_err());
    }

    #[test]
    fn grouping_mode_parsing() {
        assert_eq!("fused".parse::<GroupingMode>().unwrap(), GroupingMode::FusedGraph { tau: None });
        assert_eq!(
            "kmeans:k=2:seed=4".parse::<GroupingMode>().unwrap(),
            GroupingMode::KMeans {
                k: 2,
                restarts: 10,
                seed: 4
            }
        );
        assert!("kmeans".parse::<GroupingMode>().is_err());
        assert!("fused:k=2".parse::<GroupingMode>().is_err());
    }
}
