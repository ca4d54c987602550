//! Two-group linear-dynamics simulator, Monte-Carlo value oracles and the
//! experiment harnesses built on them.
//!
//! Simulator actions are coded `{0, 1}`; they enter batches as `{1, 2}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acpi::{run_acpi_with, AcpiConfig, AcpiResult};
use crate::basis::FeatureContext;
use crate::data::{policy_probs, Policy, SoftmaxPolicy, Trajectory, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::grouping::{evaluate_with, EvaluateConfig, GroupAssignment, GroupingMode};

/// Stream domains keep independent uses of one seed apart.
const DOMAIN_DATA: u64 = 0;
const DOMAIN_ROLLOUT: u64 = 1;
const DOMAIN_REFERENCE: u64 = 2;
const DOMAIN_WARMUP: u64 = 3;

/// Generator for the `(domain, index)` stream of `seed`. Independent of the
/// order in which streams are consumed, so parallel use is reproducible.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) | index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub n_per_group: usize,
    /// Transitions per trajectory.
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Per-coordinate transition noise standard deviation.
    pub noise_sd: f64,
    /// Reward loading of the state, one vector per group.
    pub reward_vectors: Vec<[f64; 2]>,
    pub action_cost: f64,
    pub dynamics_gain: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_per_group: 100,
            horizon: 10,
            gamma: 0.6,
            seed: 0,
            noise_sd: 0.5,
            reward_vectors: vec![[2.0, -1.0], [-2.0, 1.0]],
            action_cost: 0.25,
            dynamics_gain: 0.75,
        }
    }
}

impl SimSpec {
    pub fn groups(&self) -> usize {
        self.reward_vectors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount must lie in [0, 1), got {}", self.gamma)));
        }
        if self.n_per_group == 0 || self.horizon == 0 {
            return Err(Error::Config("n_per_group and horizon must be positive".into()));
        }
        if self.reward_vectors.is_empty() {
            return Err(Error::Config("at least one group is required".into()));
        }
        for (i, a) in self.reward_vectors.iter().enumerate() {
            if self.reward_vectors[i + 1..].contains(a) {
                return Err(Error::Config("group reward vectors must differ".into()));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be non-negative".into()));
        }
        Ok(())
    }

    /// Reward `x^T b_k - c (2a - 1)` for action code `a`.
    pub fn reward(&self, group: usize, x: &[f64], code: u8) -> f64 {
        let b = self.reward_vectors[group];
        x[0] * b[0] + x[1] * b[1] - self.action_cost * (2.0 * f64::from(code) - 1.0)
    }

    /// Noise-free next state `D(a) x`.
    pub fn mean_next(&self, x: &[f64], code: u8) -> [f64; 2] {
        let s = 2.0 * f64::from(code) - 1.0;
        [self.dynamics_gain * s * x[0], -self.dynamics_gain * s * x[1]]
    }

    fn next_state(&self, x: &[f64], code: u8, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m = self.mean_next(x, code);
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        vec![m[0] + self.noise_sd * e0, m[1] + self.noise_sd * e1]
    }
}

fn initial_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Draw a simulator action code from a policy over internal actions `1..=2`.
fn draw_code(policy: &Policy, x: &[f64], rng: &mut ChaCha8Rng) -> Result<u8> {
    let p = policy_probs(policy, x)?;
    let u: f64 = rng.random();
    Ok(if u < p[0] { 0 } else { 1 })
}

/// A simulated batch with its true group labels (kept out of the batch).
#[derive(Debug, Clone)]
pub struct SimData {
    pub batch: TrajectoryBatch,
    pub membership: Vec<usize>,
}

/// Simulate `n_per_group` trajectories per group under the Bernoulli(0.5)
/// behavior policy. Trajectory `i` draws from its own stream.
pub fn generate(spec: &SimSpec) -> Result<SimData> {
    spec.validate()?;
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let total = spec.n_per_group * spec.groups();
    let membership: Vec<usize> = (0..total).map(|i| i / spec.n_per_group).collect();
    let trajs = (0..total)
        .into_par_iter()
        .map(|i| {
            let group = membership[i];
            let mut rng = stream_rng(spec.seed, DOMAIN_DATA, i as u64);
            let mut states = vec![initial_state(&mut rng)];
            let mut actions = Vec::with_capacity(spec.horizon);
            let mut rewards = Vec::with_capacity(spec.horizon);
            for t in 0..spec.horizon {
                let code = u8::from(coin.sample(&mut rng));
                rewards.push(spec.reward(group, &states[t], code));
                actions.push(usize::from(code) + 1);
                let next = spec.next_state(&states[t], code, &mut rng);
                states.push(next);
            }
            Trajectory::new(format!("traj{i:05}"), states, actions, rewards)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = TrajectoryBatch::new(trajs, 2, spec.gamma)?;
    Ok(SimData { batch, membership })
}

/// Monte-Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub value: f64,
    pub se: f64,
    pub horizon: usize,
    pub rollouts: usize,
}

/// Discounted return of one rollout from `x0`.
pub fn rollout_return(
    spec: &SimSpec,
    policy: &Policy,
    group: usize,
    x0: Vec<f64>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut x = x0;
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..horizon {
        let code = draw_code(policy, &x, rng)?;
        total += disc * spec.reward(group, &x, code);
        disc *= spec.gamma;
        x = spec.next_state(&x, code, rng);
    }
    Ok(total)
}

/// Smallest `H` with `gamma^H * R_max < 1e-6`, `R_max` from 1000 behavior-policy steps.
pub fn adaptive_horizon(spec: &SimSpec) -> usize {
    if spec.gamma == 0.0 {
        return 1;
    }
    let mut rng = stream_rng(spec.seed, DOMAIN_WARMUP, 0);
    let mut r_max = 0.0f64;
    let mut x = initial_state(&mut rng);
    for step in 0..1000 {
        let code = u8::from(rng.random::<bool>());
        let group = step % spec.groups();
        r_max = r_max.max(spec.reward(group, &x, code).abs());
        x = spec.next_state(&x, code, &mut rng);
    }
    let r_max = r_max.max(1.0);
    ((1e-6 / r_max).ln() / spec.gamma.ln()).ceil().max(1.0) as usize
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Integrated value of `policy` on group `group` from `x0 ~ N(0, I)`.
/// `horizon = None` picks the adaptive horizon. `stream_offset` separates
/// independent estimates drawn from one seed.
pub fn mc_true_value(
    spec: &SimSpec,
    policy: &Policy,
    group: usize,
    n_rollouts: usize,
    horizon: Option<usize>,
    stream_offset: u64,
) -> Result<McValue> {
    spec.validate()?;
    if group >= spec.groups() {
        return Err(Error::Config(format!("group {group} out of range")));
    }
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be positive".into()));
    }
    let h = horizon.unwrap_or_else(|| adaptive_horizon(spec));
    if spec.gamma > 0.0 && spec.gamma.powi(h as i32) >= 1e-6 {
        log::warn!("rollout horizon {h} leaves a discount tail of {:.2e}", spec.gamma.powi(h as i32));
    }
    let returns = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(spec.seed, DOMAIN_ROLLOUT, stream_offset + r as u64);
            let x0 = initial_state(&mut rng);
            rollout_return(spec, policy, group, x0, h, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let (value, se) = mean_se(&returns);
    Ok(McValue {
        value,
        se,
        horizon: h,
        rollouts: n_rollouts,
    })
}

/// `n` states from `N(0, I)` on a dedicated stream.
pub fn reference_sample(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, DOMAIN_REFERENCE, 0);
    (0..n).map(|_| initial_state(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageConfig {
    /// `(n_per_group, horizon)` cells.
    pub grid: Vec<(usize, usize)>,
    pub reps: usize,
    pub level: f64,
    pub eval: EvaluateConfig,
    pub policy: Policy,
    pub seed: u64,
    /// Size of the fixed `N(0, I)` reference sample used by the estimator.
    pub reference_size: usize,
    /// Rollouts per group for the Monte-Carlo truth.
    pub truth_rollouts: usize,
    pub sim: SimSpec,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            grid: [20, 50, 100]
                .iter()
                .flat_map(|&n| [10, 30, 40].map(|t| (n, t)))
                .collect(),
            reps: 200,
            level: 0.95,
            eval: EvaluateConfig {
                grouping: GroupingMode::kmeans(2),
                ..EvaluateConfig::default()
            },
            policy: Policy::Tabular(crate::data::TabularPolicy::sim_target()),
            seed: 0,
            reference_size: 10_000,
            truth_rollouts: 100_000,
            sim: SimSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub n_per_group: usize,
    pub horizon: usize,
    pub group: usize,
    pub truth: f64,
    pub acpe_coverage: Option<f64>,
    pub pooled_coverage: Option<f64>,
    pub acpe_failures: usize,
    pub pooled_failures: usize,
    pub reps: usize,
    pub valid: bool,
    pub mean_acpe_estimate: Option<f64>,
    pub mean_pooled_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub truth: Vec<McValue>,
    pub cells: Vec<CoverageCell>,
}

/// Fraction of intervals containing `truth`; `None` for an empty list.
pub fn coverage_fraction(intervals: &[[f64; 2]], truth: f64) -> Option<f64> {
    if intervals.is_empty() {
        return None;
    }
    let hit = intervals.iter().filter(|ci| ci[0] <= truth && truth <= ci[1]).count();
    Some(hit as f64 / intervals.len() as f64)
}

/// Per true group, `(estimate, CI)` taken from the detected group holding most
/// of that group's trajectories.
fn intervals_by_true_group(
    assignment: &GroupAssignment,
    inference: &crate::grouping::InferenceResult,
    membership: &[usize],
    groups: usize,
) -> Vec<(f64, [f64; 2])> {
    (0..groups)
        .map(|g| {
            let mut counts = vec![0usize; assignment.k];
            for (i, &m) in membership.iter().enumerate() {
                if m == g {
                    counts[assignment.labels[i]] += 1;
                }
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            let k = counts.iter().position(|&c| c == best).unwrap_or(0);
            (inference.groups[k].v_r, inference.groups[k].ci)
        })
        .collect()
}

type RepOutcome = (Option<Vec<(f64, [f64; 2])>>, Option<Vec<(f64, [f64; 2])>>);

/// Replicated coverage of the clustered and pooled intervals on a grid of
/// sample sizes.
pub fn coverage_experiment(cfg: &CoverageConfig) -> Result<CoverageTable> {
    if cfg.reps < 50 {
        return Err(Error::Config(format!("coverage needs at least 50 replications, got {}", cfg.reps)));
    }
    cfg.sim.validate()?;
    let groups = cfg.sim.groups();
    let truth_spec = SimSpec {
        seed: cfg.seed,
        ..cfg.sim.clone()
    };
    let truth = (0..groups)
        .map(|g| mc_true_value(&truth_spec, &cfg.policy, g, cfg.truth_rollouts, None, (g * cfg.truth_rollouts) as u64))
        .collect::<Result<Vec<_>>>()?;
    let reference = reference_sample(cfg.seed, cfg.reference_size);
    let eval = EvaluateConfig {
        level: cfg.level,
        ..cfg.eval.clone()
    };

    let mut cells = Vec::new();
    for (cell_idx, &(n, t)) in cfg.grid.iter().enumerate() {
        let outcomes: Vec<RepOutcome> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let spec = SimSpec {
                    n_per_group: n,
                    horizon: t,
                    seed: cfg
                        .seed
                        .wrapping_add(1 + (cell_idx as u64) * 1_000_003 + rep as u64),
                    ..cfg.sim.clone()
                };
                let data = match generate(&spec) {
                    Ok(d) => d,
                    Err(e) => {
                        log::warn!("cell ({n}, {t}) rep {rep}: generation failed: {e}");
                        return (None, None);
                    }
                };
                run_replication(&data, &eval, &cfg.policy, &reference, groups, n, t, rep)
            })
            .collect();

        for g in 0..groups {
            let acpe: Vec<(f64, [f64; 2])> = outcomes.iter().filter_map(|o| o.0.as_ref().map(|v| v[g])).collect();
            let pooled: Vec<(f64, [f64; 2])> = outcomes.iter().filter_map(|o| o.1.as_ref().map(|v| v[g])).collect();
            let acpe_failures = cfg.reps - acpe.len();
            let pooled_failures = cfg.reps - pooled.len();
            // failures may be dropped from the denominator only while rare
            let valid = (acpe_failures.max(pooled_failures) as f64) < 0.05 * cfg.reps as f64;
            let cis = |v: &[(f64, [f64; 2])]| v.iter().map(|x| x.1).collect::<Vec<_>>();
            let mean = |v: &[(f64, [f64; 2])]| (!v.is_empty()).then(|| v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64);
            cells.push(CoverageCell {
                n_per_group: n,
                horizon: t,
                group: g,
                truth: truth[g].value,
                acpe_coverage: if valid { coverage_fraction(&cis(&acpe), truth[g].value) } else { None },
                pooled_coverage: if valid { coverage_fraction(&cis(&pooled), truth[g].value) } else { None },
                acpe_failures,
                pooled_failures,
                reps: cfg.reps,
                valid,
                mean_acpe_estimate: mean(&acpe),
                mean_pooled_estimate: mean(&pooled),
            });
        }
    }
    Ok(CoverageTable { truth, cells })
}

#[allow(clippy::too_many_arguments)]
fn run_replication(
    data: &SimData,
    eval: &EvaluateConfig,
    policy: &Policy,
    reference: &[Vec<f64>],
    groups: usize,
    n: usize,
    t: usize,
    rep: usize,
) -> RepOutcome {
    let batch = &data.batch;
    let ctx = match eval.basis.resolve(batch.state_dim(), batch.all_states()) {
        Ok(spec) => FeatureContext::new(spec, batch.n_actions()),
        Err(e) => {
            log::warn!("cell ({n}, {t}) rep {rep}: basis: {e}");
            return (None, None);
        }
    };
    let acpe = match evaluate_with(batch, &ctx, policy, eval, reference, None) {
        Ok(ev) => Some(intervals_by_true_group(
            &ev.model.assignment,
            &ev.inference,
            &data.membership,
            groups,
        )),
        Err(e) => {
            log::warn!("cell ({n}, {t}) rep {rep}: clustered estimate failed: {e}");
            None
        }
    };
    let single = GroupAssignment::single(batch.len()).expect("nonempty batch");
    let pooled = match crate::grouping::pooled_inference(batch, &ctx, policy, eval.level, reference, single) {
        Ok(inf) => Some(vec![(inf.groups[0].v_r, inf.groups[0].ci); groups]),
        Err(e) => {
            log::warn!("cell ({n}, {t}) rep {rep}: pooled estimate failed: {e}");
            None
        }
    };
    (acpe, pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyValueConfig {
    /// Rollouts per group and repetition.
    pub rollouts_per_group: usize,
    pub horizon: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for PolicyValueConfig {
    fn default() -> Self {
        Self {
            rollouts_per_group: 250,
            horizon: 50,
            repetitions: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueRow {
    pub policy: String,
    pub group: usize,
    pub value: f64,
    pub se: f64,
    pub rollouts: usize,
}

/// Monte-Carlo values of labelled policies on every group, pooled over
/// `repetitions` independent batches of rollouts.
pub fn policy_value_experiment(
    spec: &SimSpec,
    policies: &[(String, Policy)],
    cfg: &PolicyValueConfig,
) -> Result<Vec<PolicyValueRow>> {
    spec.validate()?;
    let n = cfg.rollouts_per_group * cfg.repetitions;
    if n == 0 {
        return Err(Error::Config("policy value experiment needs rollouts".into()));
    }
    let run_spec = SimSpec {
        seed: cfg.seed,
        ..spec.clone()
    };
    let mut rows = Vec::new();
    for (label, policy) in policies {
        for g in 0..spec.groups() {
            // common random numbers across policies on the same group
            let v = mc_true_value(&run_spec, policy, g, n, Some(cfg.horizon), (g * n) as u64)?;
            rows.push(PolicyValueRow {
                policy: label.clone(),
                group: g,
                value: v.value,
                se: v.se,
                rollouts: n,
            });
        }
    }
    Ok(rows)
}

/// Clustered policy iteration against the pooled baseline on one simulated batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub acpi: AcpiResult,
    pub pooled: AcpiResult,
    /// Index of the learned group that holds most of each true group.
    pub group_for_truth: Vec<usize>,
    pub values: Vec<PolicyValueRow>,
}

pub fn policy_comparison(
    spec: &SimSpec,
    acpi: &AcpiConfig,
    values: &PolicyValueConfig,
) -> Result<PolicyComparison> {
    let data = generate(spec)?;
    let batch = &data.batch;
    let basis = acpi.eval.basis.resolve(batch.state_dim(), batch.all_states())?;
    let ctx = FeatureContext::new(basis, batch.n_actions());
    let reference = batch.initial_states();
    let clustered = run_acpi_with(batch, &ctx, acpi, &reference, &mut |_| {})?;
    let pooled_cfg = AcpiConfig {
        force_k: Some(1),
        ..acpi.clone()
    };
    let pooled = run_acpi_with(batch, &ctx, &pooled_cfg, &reference, &mut |_| {})?;

    let group_for_truth: Vec<usize> = (0..spec.groups())
        .map(|g| {
            let mut counts = vec![0usize; clustered.groups.len()];
            for (i, &m) in data.membership.iter().enumerate() {
                if m == g {
                    counts[clustered.labels[i]] += 1;
                }
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            counts.iter().position(|&c| c == best).unwrap_or(0)
        })
        .collect();
    let mut labelled: Vec<(String, Policy)> = clustered
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| (format!("acpi_group_{k}"), Policy::Softmax(g.policy())))
        .collect();
    labelled.push(("pooled".into(), Policy::Softmax(pooled.groups[0].policy())));
    let rows = policy_value_experiment(spec, &labelled, values)?;
    Ok(PolicyComparison {
        acpi: clustered,
        pooled,
        group_for_truth,
        values: rows,
    })
}

/// The uniform softmax policy over the simulator's two actions.
pub fn uniform_policy() -> Policy {
    Policy::Softmax(SoftmaxPolicy::zeros(2, 2, true))
}
