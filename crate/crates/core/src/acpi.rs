//! Auto-clustered policy iteration: alternate fused evaluation, regrouping and
//! per-group softmax policy improvement.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm;
use crate::basis::FeatureContext;
use crate::data::{Policy, SoftmaxPolicy, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::grouping::{
    detect_groups, group_coefficients, EvaluateConfig, GroupAssignment, GroupingMode, ThetaMode,
};
use crate::moment::{assemble, CoefficientSet, MomentSystem};

/// Gradient-ascent settings for the policy step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Initial trial step; grows after accepted steps, halves on rejection.
    pub step: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iters: 200,
            grad_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.grad_tol > 0.0 && self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config(
                "optimizer needs step > 0, grad_tol > 0 and 0 < armijo < 1".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("optimizer max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Action values `q_a(x) = phi(x)^T theta_a` over a reference sample.
#[derive(Debug, Clone)]
pub struct ActionValues {
    /// Reference states.
    pub states: Vec<Vec<f64>>,
    /// `q[r][a]`.
    pub q: Vec<Vec<f64>>,
}

impl ActionValues {
    pub fn new(ctx: &FeatureContext, theta: &DVector<f64>, reference: &[Vec<f64>]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Config("reference sample is empty".into()));
        }
        if theta.len() != ctx.dim() {
            return Err(Error::Dimension {
                expected: ctx.dim(),
                got: theta.len(),
                context: "group coefficients",
            });
        }
        let j = ctx.basis_dim();
        let q = reference
            .iter()
            .map(|x| {
                let phi = ctx.phi(x)?;
                Ok((0..ctx.n_actions)
                    .map(|a| phi.iter().zip(theta.rows(a * j, j).iter()).map(|(p, t)| p * t).sum())
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self {
            states: reference.to_vec(),
            q,
        })
    }
}

/// `(1/|R|) sum_x sum_a pi(a|x) q_a(x)`.
pub fn policy_objective(values: &ActionValues, policy: &SoftmaxPolicy) -> Result<f64> {
    let mut acc = 0.0;
    for (x, q) in values.states.iter().zip(&values.q) {
        let p = policy.probs(x)?;
        acc += p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / values.states.len() as f64)
}

/// Gradient of [`policy_objective`] in the layout of [`SoftmaxPolicy::flat`]:
/// `d/d alpha_j = mean_x pi_j (q_j - qbar) x~`.
pub fn policy_gradient(values: &ActionValues, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
    let m = policy.n_actions();
    let width = policy.feature_dim();
    let mut grad = vec![0.0; (m - 1) * width];
    for (x, q) in values.states.iter().zip(&values.q) {
        if q.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: q.len(),
                context: "action values vs policy actions",
            });
        }
        let p = policy.probs(x)?;
        let f = policy.features(x);
        let qbar: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
        for j in 0..m - 1 {
            let w = p[j] * (q[j] - qbar);
            for (g, fv) in grad[j * width..(j + 1) * width].iter_mut().zip(&f) {
                *g += w * fv;
            }
        }
    }
    let n = values.states.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub policy: SoftmaxPolicy,
    pub objective_start: f64,
    pub objective_end: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Backtracking gradient ascent on the surrogate value, starting from `start`.
/// Accepted steps never lower the objective.
pub fn improve_policy(values: &ActionValues, start: &SoftmaxPolicy, cfg: &OptimizerConfig) -> Result<Improvement> {
    cfg.validate()?;
    let mut alpha = start.flat();
    let mut policy = start.clone();
    let m = start.n_actions();
    let intercept = start.intercept;
    let mut obj = policy_objective(values, &policy)?;
    let objective_start = obj;
    let mut step = cfg.step;
    let mut grad = policy_gradient(values, &policy)?;
    let mut gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let mut iterations = 0;
    let mut converged = gnorm < cfg.grad_tol;
    while !converged && iterations < cfg.max_iters {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            let tp = SoftmaxPolicy::from_flat(&trial, m, intercept);
            let tobj = policy_objective(values, &tp)?;
            if tobj >= obj + cfg.armijo * step * g2 {
                accepted = Some((trial, tp, tobj));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, tp, tobj)) = accepted else {
            log::debug!("policy step: line search exhausted at gradient norm {gnorm:.3e}");
            break;
        };
        alpha = trial;
        policy = tp;
        obj = tobj;
        iterations += 1;
        step *= 2.0;
        grad = policy_gradient(values, &policy)?;
        gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        converged = gnorm < cfg.grad_tol;
    }
    if !converged {
        log::warn!("policy improvement stopped after {iterations} steps with gradient norm {gnorm:.3e}");
    }
    Ok(Improvement {
        policy,
        objective_start,
        objective_end: obj,
        iterations,
        grad_norm: gnorm,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcpiConfig {
    pub max_outer_iters: usize,
    /// Convergence threshold on the largest change in per-group surrogate value.
    pub tol_v: f64,
    pub optimizer: OptimizerConfig,
    pub eval: EvaluateConfig,
    /// Skip clustering and keep exactly this many groups (`1` gives the pooled baseline).
    pub force_k: Option<usize>,
    /// Whether softmax policies carry an intercept.
    pub intercept: bool,
}

impl Default for AcpiConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 100,
            tol_v: 1e-4,
            optimizer: OptimizerConfig::default(),
            eval: EvaluateConfig::default(),
            force_k: None,
            intercept: true,
        }
    }
}

impl AcpiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(Error::Config("max_outer_iters must be positive".into()));
        }
        if !(self.tol_v > 0.0) {
            return Err(Error::Config("tol_v must be positive".into()));
        }
        if self.force_k == Some(0) {
            return Err(Error::Config("force_k must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.eval.admm.validate()?;
        self.eval.penalty.validate()
    }
}

/// One outer iteration, as written to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iter: usize,
    pub k: usize,
    pub sizes: Vec<usize>,
    /// Surrogate value before and after each group's policy step.
    pub v_before: Vec<f64>,
    pub v_after: Vec<f64>,
    pub admm_iterations: Vec<usize>,
    pub membership_changed: bool,
    pub max_value_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcpiGroup {
    pub alpha: Vec<Vec<f64>>,
    pub intercept: bool,
    #[serde(rename = "V_R")]
    pub v_r: f64,
    pub members: Vec<usize>,
}

impl AcpiGroup {
    pub fn policy(&self) -> SoftmaxPolicy {
        SoftmaxPolicy {
            alpha: self.alpha.clone(),
            intercept: self.intercept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcpiResult {
    pub iters: Vec<OuterRecord>,
    pub groups: Vec<AcpiGroup>,
    pub labels: Vec<usize>,
    pub converged: bool,
}

/// Per-trajectory coefficients of every current group policy.
struct PolicyFit {
    sys: MomentSystem,
    beta: Option<CoefficientSet>,
    admm_iterations: usize,
}

fn fit_policy(batch: &TrajectoryBatch, ctx: &FeatureContext, policy: &SoftmaxPolicy, cfg: &AcpiConfig) -> Result<PolicyFit> {
    let sys = assemble(batch, ctx, &Policy::Softmax(policy.clone()))?;
    // with a forced single group and refit coefficients the fused fit is unused
    if cfg.force_k == Some(1) && cfg.eval.theta_mode == ThetaMode::Refit {
        return Ok(PolicyFit {
            sys,
            beta: None,
            admm_iterations: 0,
        });
    }
    let sol = admm::solve(&sys, &cfg.eval.penalty, &cfg.eval.admm)?;
    Ok(PolicyFit {
        sys,
        admm_iterations: sol.diagnostics.iterations,
        beta: Some(sol.beta),
    })
}

/// Index of the most common old label among `members` (lowest index on ties).
fn majority(old: &[usize], members: &[usize], k_old: usize) -> usize {
    let mut counts = vec![0usize; k_old];
    for &i in members {
        counts[old[i]] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Run policy iteration with automatic clustering. `reference` defaults to the
/// batch's initial states; `observer` sees each outer record as it is produced.
pub fn run_acpi_with(
    batch: &TrajectoryBatch,
    ctx: &FeatureContext,
    cfg: &AcpiConfig,
    reference: &[Vec<f64>],
    observer: &mut dyn FnMut(&OuterRecord),
) -> Result<AcpiResult> {
    cfg.validate()?;
    if reference.is_empty() {
        return Err(Error::Config("reference sample is empty".into()));
    }
    let n = batch.len();
    if let Some(k) = cfg.force_k {
        if k > n {
            return Err(Error::Config(format!("force_k = {k} exceeds {n} trajectories")));
        }
    }
    let mut assignment = GroupAssignment::single(n)?;
    let mut policies = vec![SoftmaxPolicy::zeros(batch.n_actions(), batch.state_dim(), cfg.intercept)];
    let mut last_values: Option<Vec<f64>> = None;
    let mut iters = Vec::new();
    let mut converged = false;
    let mut values = vec![0.0];

    for outer in 1..=cfg.max_outer_iters {
        let fits = policies
            .par_iter()
            .map(|p| fit_policy(batch, ctx, p, cfg))
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(k, r)| r.map_err(|e| Error::Numerical(format!("outer iteration {outer}, group {k}: {e}"))))
            .collect::<Result<Vec<_>>>()?;

        // each trajectory keeps the coefficients fitted under its own group's policy
        let new_assignment = match cfg.force_k {
            Some(1) => GroupAssignment::single(n)?,
            forced => {
                let own = CoefficientSet::new(
                    (0..n)
                        .map(|i| {
                            fits[assignment.labels[i]]
                                .beta
                                .as_ref()
                                .expect("fused fit present when clustering")
                                .blocks[i]
                                .clone()
                        })
                        .collect(),
                );
                let mode = match forced {
                    Some(k) => match cfg.eval.grouping {
                        GroupingMode::KMeans { restarts, seed, .. } => GroupingMode::KMeans { k, restarts, seed },
                        GroupingMode::FusedGraph { .. } => GroupingMode::kmeans(k),
                    },
                    None => cfg.eval.grouping,
                };
                detect_groups(&own, &mode, cfg.eval.penalty.lambda)?
            }
        };
        let membership_changed = new_assignment.labels != assignment.labels;

        let inherited: Vec<usize> = (0..new_assignment.k)
            .map(|k| majority(&assignment.labels, &new_assignment.members(k), assignment.k))
            .collect();
        let steps = (0..new_assignment.k)
            .into_par_iter()
            .map(|k| {
                let fit = &fits[inherited[k]];
                let members = new_assignment.members(k);
                let theta = match cfg.eval.theta_mode {
                    ThetaMode::Refit => fit.sys.solve_group(&members)?,
                    ThetaMode::Average => {
                        let beta = fit.beta.as_ref().expect("fused fit present for averaging");
                        let sub = GroupAssignment::from_labels(
                            &(0..n).map(|i| usize::from(!members.contains(&i))).collect::<Vec<_>>(),
                        )?;
                        group_coefficients(beta, &sub)?.swap_remove(0)
                    }
                };
                let av = ActionValues::new(ctx, &theta, reference)?;
                improve_policy(&av, &policies[inherited[k]], &cfg.optimizer)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        values = steps.iter().map(|s| s.objective_end).collect();
        let max_value_change = match &last_values {
            Some(prev) if prev.len() == values.len() && !membership_changed => Some(
                prev.iter()
                    .zip(&values)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            ),
            _ => None,
        };
        let record = OuterRecord {
            iter: outer,
            k: new_assignment.k,
            sizes: new_assignment.sizes.clone(),
            v_before: steps.iter().map(|s| s.objective_start).collect(),
            v_after: values.clone(),
            admm_iterations: fits.iter().map(|f| f.admm_iterations).collect(),
            membership_changed,
            max_value_change,
        };
        observer(&record);
        iters.push(record);

        policies = steps.into_iter().map(|s| s.policy).collect();
        assignment = new_assignment;
        if max_value_change.is_some_and(|c| c < cfg.tol_v) {
            converged = true;
            break;
        }
        last_values = Some(values.clone());
    }
    if !converged {
        log::warn!("policy iteration hit the outer cap of {} iterations", cfg.max_outer_iters);
    }

    let groups = policies
        .into_iter()
        .enumerate()
        .map(|(k, p)| AcpiGroup {
            alpha: p.alpha,
            intercept: p.intercept,
            v_r: values[k],
            members: assignment.members(k),
        })
        .collect();
    Ok(AcpiResult {
        iters,
        groups,
        labels: assignment.labels,
        converged,
    })
}

/// [`run_acpi_with`] with the basis resolved from the batch and the initial
/// states as reference sample.
pub fn run_acpi(batch: &TrajectoryBatch, cfg: &AcpiConfig) -> Result<AcpiResult> {
    let spec = cfg.eval.basis.resolve(batch.state_dim(), batch.all_states())?;
    let ctx = FeatureContext::new(spec, batch.n_actions());
    run_acpi_with(batch, &ctx, cfg, &batch.initial_states(), &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::refit_groups;
    use crate::basis::BasisSpec;
    use crate::data::Trajectory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect()
    }

    fn ctx(m: usize) -> FeatureContext {
        FeatureContext::new(BasisSpec::identity(2, true), m)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [2usize, 3] {
            let c = ctx(m);
            let theta = DVector::from_fn(c.dim(), |_, _| rng.random_range(-1.0..1.0));
            let reference = sample(&mut rng, 30);
            let av = ActionValues::new(&c, &theta, &reference).unwrap();
            let flat: Vec<f64> = (0..(m - 1) * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pol = SoftmaxPolicy::from_flat(&flat, m, true);
            let g = policy_gradient(&av, &pol).unwrap();
            for i in 0..flat.len() {
                let h = 1e-5;
                let mut up = flat.clone();
                up[i] += h;
                let mut dn = flat.clone();
                dn[i] -= h;
                let fd = (policy_objective(&av, &SoftmaxPolicy::from_flat(&up, m, true)).unwrap()
                    - policy_objective(&av, &SoftmaxPolicy::from_flat(&dn, m, true)).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn dominant_action_gets_all_mass() {
        let c = ctx(2);
        // q_1 = 1 + 0.1 x_1, q_2 = -1: action 1 dominates on the whole sample
        let theta = DVector::from_vec(vec![1.0, 0.1, 0.0, -1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference = sample(&mut rng, 50);
        let av = ActionValues::new(&c, &theta, &reference).unwrap();
        let res = improve_policy(&av, &SoftmaxPolicy::zeros(2, 2, true), &OptimizerConfig::default()).unwrap();
        let mean: f64 = reference.iter().map(|x| res.policy.probs(x).unwrap()[0]).sum::<f64>() / 50.0;
        assert!(mean > 0.95, "{mean}");
        assert!(res.objective_end >= res.objective_start);
    }

    #[test]
    fn indifference_has_zero_gradient() {
        let c = ctx(3);
        let block = [0.4, -0.2, 0.9];
        let theta = DVector::from_iterator(9, block.iter().cycle().take(9).copied());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference = sample(&mut rng, 20);
        let av = ActionValues::new(&c, &theta, &reference).unwrap();
        for _ in 0..5 {
            let flat: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = policy_gradient(&av, &SoftmaxPolicy::from_flat(&flat, 3, true)).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn accepted_steps_never_decrease_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = ctx(2);
        let theta = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let reference = sample(&mut rng, 40);
        let av = ActionValues::new(&c, &theta, &reference).unwrap();
        let mut pol = SoftmaxPolicy::zeros(2, 2, true);
        let mut last = policy_objective(&av, &pol).unwrap();
        for _ in 0..10 {
            let cfg = OptimizerConfig {
                max_iters: 1,
                ..OptimizerConfig::default()
            };
            let r = improve_policy(&av, &pol, &cfg).unwrap();
            assert!(r.objective_end >= last);
            last = r.objective_end;
            pol = r.policy;
        }
    }

    fn linear_batch(seed: u64, n: usize, t: usize, flip: usize) -> TrajectoryBatch {
        // reward favours action 1 where x_1 > 0 for the first `n - flip` trajectories,
        // the opposite for the rest
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..n)
            .map(|i| {
                let sign = if i < n - flip { 1.0 } else { -1.0 };
                let states: Vec<Vec<f64>> = (0..=t)
                    .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let actions: Vec<usize> = (0..t).map(|_| rng.random_range(1..=2)).collect();
                let rewards = (0..t)
                    .map(|s| {
                        let a = if actions[s] == 1 { 1.0 } else { -1.0 };
                        sign * a * states[s][0] + 0.1 * rng.random_range(-1.0..1.0)
                    })
                    .collect();
                Trajectory::new(format!("l{i}"), states, actions, rewards).unwrap()
            })
            .collect();
        TrajectoryBatch::new(trajs, 2, 0.5).unwrap()
    }

    #[test]
    fn forced_single_group_one_step_is_pooled_evaluate_then_improve() {
        let batch = linear_batch(1, 12, 15, 0);
        let c = ctx(2);
        let reference = batch.initial_states();
        let cfg = AcpiConfig {
            max_outer_iters: 1,
            force_k: Some(1),
            ..AcpiConfig::default()
        };
        let res = run_acpi_with(&batch, &c, &cfg, &reference, &mut |_| {}).unwrap();

        let start = SoftmaxPolicy::zeros(2, 2, true);
        let sys = assemble(&batch, &c, &Policy::Softmax(start.clone())).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let theta = refit_groups(&sys, &GroupAssignment::single(12).unwrap()).unwrap();
        assert_eq!(theta[0], sys.solve_group(&all).unwrap());
        let av = ActionValues::new(&c, &theta[0], &reference).unwrap();
        let manual = improve_policy(&av, &start, &cfg.optimizer).unwrap();
        assert_eq!(res.groups.len(), 1);
        assert_eq!(res.groups[0].alpha, manual.policy.alpha);
        assert_eq!(res.groups[0].v_r, manual.objective_end);
    }

    #[test]
    fn homogeneous_data_stays_in_one_group() {
        let batch = linear_batch(2, 10, 30, 0);
        let c = ctx(2);
        let reference = batch.initial_states();
        let cfg = AcpiConfig {
            max_outer_iters: 5,
            eval: EvaluateConfig {
                penalty: crate::penalty::PenaltyConfig::mcp(1.0, 1.5).unwrap(),
                ..EvaluateConfig::default()
            },
            ..AcpiConfig::default()
        };
        let res = run_acpi_with(&batch, &c, &cfg, &reference, &mut |_| {}).unwrap();
        assert_eq!(res.groups.len(), 1);
        let pooled = run_acpi_with(
            &batch,
            &c,
            &AcpiConfig {
                force_k: Some(1),
                ..cfg.clone()
            },
            &reference,
            &mut |_| {},
        )
        .unwrap();
        for (a, b) in res.groups[0].policy().flat().iter().zip(pooled.groups[0].policy().flat()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn opposite_groups_get_opposite_policies() {
        let batch = linear_batch(5, 20, 30, 10);
        let c = ctx(2);
        let reference = batch.initial_states();
        let cfg = AcpiConfig {
            max_outer_iters: 10,
            eval: EvaluateConfig {
                grouping: GroupingMode::kmeans(2),
                ..EvaluateConfig::default()
            },
            ..AcpiConfig::default()
        };
        let mut trace = Vec::new();
        let res = run_acpi_with(&batch, &c, &cfg, &reference, &mut |r| trace.push(r.clone())).unwrap();
        assert_eq!(res.groups.len(), 2);
        assert_eq!(trace.len(), res.iters.len());
        let truth: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        assert_eq!(crate::grouping::adjusted_rand_index(&res.labels, &truth), 1.0);
        // group holding trajectory 0 prefers action 1 at x_1 > 0, the other group prefers action 2
        let g0 = res.labels[0];
        let x = [1.0, 0.0];
        assert!(res.groups[g0].policy().probs(&x).unwrap()[0] > 0.9);
        assert!(res.groups[1 - g0].policy().probs(&x).unwrap()[0] < 0.1);
        for r in &res.iters {
            for (b, a) in r.v_before.iter().zip(&r.v_after) {
                assert!(a >= b);
            }
        }
    }
}
