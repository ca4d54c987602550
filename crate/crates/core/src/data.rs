//! Trajectory containers, policies, and file ingestion.
//!
//! Actions are stored 1-based (`1..=M`) everywhere inside the crate. The file
//! encoding is declared by [`Schema::action_base`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    /// `len() + 1` states; the last one is the terminal next-state.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        states: Vec<Vec<f64>>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if actions.is_empty() {
            return Err(Error::Integrity(format!("trajectory {id} has no transitions")));
        }
        if actions.len() != rewards.len() || states.len() != actions.len() + 1 {
            return Err(Error::Integrity(format!(
                "trajectory {id}: {} states, {} actions, {} rewards (need T+1, T, T)",
                states.len(),
                actions.len(),
                rewards.len()
            )));
        }
        Ok(Self {
            id,
            states,
            actions,
            rewards,
        })
    }

    /// Number of transitions `T_i`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Discounted returns `Y_t = sum_{s >= t} gamma^(s-t) R_s` within the observed horizon.
    pub fn discounted_returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.rewards.len()];
        let mut acc = 0.0;
        for t in (0..self.rewards.len()).rev() {
            acc = self.rewards[t] + gamma * acc;
            out[t] = acc;
        }
        out
    }
}

/// An immutable, validated collection of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    n_actions: usize,
    gamma: f64,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Trajectory>, n_actions: usize, gamma: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Integrity("batch contains no trajectories".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("discount must lie in [0, 1), got {gamma}")));
        }
        if n_actions == 0 {
            return Err(Error::Config("action count must be positive".into()));
        }
        let state_dim = trajectories[0].states[0].len();
        if state_dim == 0 {
            return Err(Error::Schema("state vectors are empty".into()));
        }
        for traj in &trajectories {
            if let Some(bad) = traj.states.iter().find(|s| s.len() != state_dim) {
                return Err(Error::Dimension {
                    expected: state_dim,
                    got: bad.len(),
                    context: "state vector",
                });
            }
            if let Some(&a) = traj.actions.iter().find(|&&a| a == 0 || a > n_actions) {
                return Err(Error::Domain(format!(
                    "trajectory {}: action {a} outside 1..={n_actions}",
                    traj.id
                )));
            }
            let finite = traj.states.iter().flatten().chain(&traj.rewards).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Domain(format!("trajectory {} contains non-finite values", traj.id)));
            }
        }
        Ok(Self {
            trajectories,
            state_dim,
            n_actions,
            gamma,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `sum_i T_i`, the quantity that replaces `N T` for unequal lengths.
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.states[0].clone()).collect()
    }

    pub fn all_states(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.trajectories.iter().flat_map(|t| t.states.iter())
    }

    /// Same data with trajectories reordered by `order` (a permutation of `0..N`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let trajectories = order
            .iter()
            .map(|&i| {
                self.trajectories
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("permutation index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(trajectories, self.n_actions, self.gamma)
    }

    /// Sub-batch with the given trajectory indices, in that order.
    pub fn subset(&self, members: &[usize]) -> Result<Self> {
        self.permuted(members)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown file format {other:?}"))),
        }
    }
}

/// Column mapping and action encoding of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub traj_id: String,
    pub t: String,
    /// State columns are `{state_prefix}1 .. {state_prefix}p`.
    pub state_prefix: String,
    pub action: String,
    pub reward: String,
    /// Smallest action code in the file (0 for `{0,1}` files, 1 for `{1..M}` files).
    pub action_base: usize,
    /// Declared action count; inferred from the largest action code when absent.
    pub n_actions: Option<usize>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            traj_id: "traj_id".into(),
            t: "t".into(),
            state_prefix: "x_".into(),
            action: "action".into(),
            reward: "reward".into(),
            action_base: 0,
            n_actions: None,
        }
    }
}

impl Schema {
    fn decode_action(&self, code: i64, row_ctx: &str) -> Result<usize> {
        let internal = code - self.action_base as i64 + 1;
        if internal < 1 {
            return Err(Error::Domain(format!(
                "{row_ctx}: action {code} below the declared base {}",
                self.action_base
            )));
        }
        if let Some(m) = self.n_actions {
            if internal as usize > m {
                return Err(Error::Domain(format!(
                    "{row_ctx}: action {code} outside the {m} declared actions (base {})",
                    self.action_base
                )));
            }
        }
        Ok(internal as usize)
    }

    fn encode_action(&self, internal: usize) -> i64 {
        internal as i64 - 1 + self.action_base as i64
    }
}

pub fn load_batch(path: &Path, format: FileFormat, schema: &Schema, gamma: f64) -> Result<TrajectoryBatch> {
    let trajectories = match format {
        FileFormat::Csv => read_csv(path, schema)?,
        FileFormat::Jsonl => read_jsonl(path, schema)?,
    };
    if trajectories.is_empty() {
        return Err(Error::Schema(format!("{} contains no trajectories", path.display())));
    }
    let n_actions = match schema.n_actions {
        Some(m) => m,
        None => trajectories
            .iter()
            .flat_map(|t| t.actions.iter().copied())
            .max()
            .unwrap_or(1),
    };
    TrajectoryBatch::new(trajectories, n_actions, gamma)
}

pub fn save_batch(batch: &TrajectoryBatch, path: &Path, format: FileFormat, schema: &Schema) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        FileFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            let mut header = vec![schema.traj_id.clone(), schema.t.clone()];
            header.extend((1..=batch.state_dim()).map(|j| format!("{}{j}", schema.state_prefix)));
            header.push(schema.action.clone());
            header.push(schema.reward.clone());
            w.write_record(&header)?;
            for traj in batch.trajectories() {
                for (t, state) in traj.states.iter().enumerate() {
                    let mut rec = vec![traj.id.clone(), t.to_string()];
                    rec.extend(state.iter().map(|v| v.to_string()));
                    if t < traj.len() {
                        rec.push(schema.encode_action(traj.actions[t]).to_string());
                        rec.push(traj.rewards[t].to_string());
                    } else {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                    w.write_record(&rec)?;
                }
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        FileFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for traj in batch.trajectories() {
                let line = JsonlTrajectory {
                    id: traj.id.clone(),
                    states: traj.states.clone(),
                    actions: traj.actions.iter().map(|&a| schema.encode_action(a)).collect(),
                    rewards: traj.rewards.clone(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlTrajectory {
    id: String,
    states: Vec<Vec<f64>>,
    actions: Vec<i64>,
    rewards: Vec<f64>,
}

fn read_jsonl(path: &Path, schema: &Schema) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlTrajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        let ctx = format!("trajectory {}", rec.id);
        let actions = rec
            .actions
            .iter()
            .map(|&a| schema.decode_action(a, &ctx))
            .collect::<Result<Vec<_>>>()?;
        out.push(Trajectory::new(rec.id, rec.states, actions, rec.rewards)?);
    }
    Ok(out)
}

struct Row {
    t: i64,
    state: Vec<f64>,
    action: Option<i64>,
    reward: Option<f64>,
    line: u64,
}

fn read_csv(path: &Path, schema: &Schema) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Schema(format!("{} has no header row", path.display())));
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let id_col = col(&schema.traj_id)?;
    let t_col = col(&schema.t)?;
    let action_col = col(&schema.action)?;
    let reward_col = col(&schema.reward)?;

    let mut state_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(pos, h)| {
            h.trim()
                .strip_prefix(schema.state_prefix.as_str())
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|j| (j, pos))
        })
        .collect();
    state_cols.sort_unstable();
    if state_cols.is_empty() {
        return Err(Error::Schema(format!("no state columns with prefix {:?}", schema.state_prefix)));
    }
    for (k, (j, _)) in state_cols.iter().enumerate() {
        if *j != k + 1 {
            return Err(Error::Schema(format!(
                "state columns must be {0}1..{0}p without gaps; found index {j}",
                schema.state_prefix
            )));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let parse_f = |c: usize, what: &str| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("line {line}: cannot parse {what} {:?}", field(c))))
        };
        let id = field(id_col).to_string();
        let t = field(t_col)
            .parse::<i64>()
            .map_err(|_| Error::Schema(format!("line {line}: cannot parse t {:?}", field(t_col))))?;
        let state = state_cols
            .iter()
            .map(|&(_, c)| parse_f(c, "state"))
            .collect::<Result<Vec<_>>>()?;
        let action = match field(action_col) {
            "" => None,
            s => Some(
                s.parse::<i64>()
                    .map_err(|_| Error::Schema(format!("line {line}: cannot parse action {s:?}")))?,
            ),
        };
        let reward = match field(reward_col) {
            "" => None,
            _ => Some(parse_f(reward_col, "reward")?),
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row {
            t,
            state,
            action,
            reward,
            line,
        });
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.t);
        for (k, r) in rows.iter().enumerate() {
            if r.t != k as i64 {
                return Err(Error::Integrity(format!(
                    "trajectory {id}: step indices are not contiguous from 0 (found t={} at position {k})",
                    r.t
                )));
            }
        }
        if rows.len() < 2 {
            return Err(Error::Integrity(format!(
                "trajectory {id} needs at least two rows (one transition plus the terminal state)"
            )));
        }
        let steps = rows.len() - 1;
        let mut actions = Vec::with_capacity(steps);
        let mut rewards = Vec::with_capacity(steps);
        for r in &rows[..steps] {
            let ctx = format!("line {} (trajectory {id})", r.line);
            let a = r
                .action
                .ok_or_else(|| Error::Schema(format!("{ctx}: missing action")))?;
            actions.push(schema.decode_action(a, &ctx)?);
            rewards.push(r.reward.ok_or_else(|| Error::Schema(format!("{ctx}: missing reward")))?);
        }
        let states = rows.into_iter().map(|r| r.state).collect();
        out.push(Trajectory::new(id, states, actions, rewards)?);
    }
    Ok(out)
}

/// Multinomial logit over `M` actions with action `M` as the reference category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    /// `M - 1` rows, each of length `p` (plus one when `intercept` is set).
    pub alpha: Vec<Vec<f64>>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

impl SoftmaxPolicy {
    /// All-zero coefficients, i.e. the uniform policy.
    pub fn zeros(n_actions: usize, state_dim: usize, intercept: bool) -> Self {
        let width = state_dim + usize::from(intercept);
        Self {
            alpha: vec![vec![0.0; width]; n_actions.saturating_sub(1)],
            intercept,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.alpha.len() + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    /// Policy features: the state with an optional leading 1.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(x.len() + 1);
        if self.intercept {
            f.push(1.0);
        }
        f.extend_from_slice(x);
        f
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let expected = self.feature_dim() - usize::from(self.intercept);
        if !self.alpha.is_empty() && x.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: x.len(),
                context: "softmax policy state",
            });
        }
        let f = self.features(x);
        let mut logits: Vec<f64> = self
            .alpha
            .iter()
            .map(|a| a.iter().zip(&f).map(|(u, v)| u * v).sum())
            .collect();
        logits.push(0.0);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in &mut logits {
            *l /= total;
        }
        Ok(logits)
    }

    /// Flattened coefficients, row-major over actions.
    pub fn flat(&self) -> Vec<f64> {
        self.alpha.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], n_actions: usize, intercept: bool) -> Self {
        let width = flat.len() / n_actions.saturating_sub(1).max(1);
        Self {
            alpha: flat.chunks(width.max(1)).map(<[f64]>::to_vec).collect(),
            intercept,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TabularRule {
    /// Action code 0 when both of the first two state coordinates are positive, else 1.
    #[serde(rename = "sim_target_v1")]
    SimTargetV1,
    #[serde(rename = "uniform")]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub rule: TabularRule,
    #[serde(default = "default_two")]
    pub actions: usize,
}

fn default_two() -> usize {
    2
}

impl TabularPolicy {
    pub fn sim_target() -> Self {
        Self {
            rule: TabularRule::SimTargetV1,
            actions: 2,
        }
    }

    pub fn uniform(actions: usize) -> Self {
        Self {
            rule: TabularRule::Uniform,
            actions,
        }
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.rule {
            TabularRule::SimTargetV1 => {
                if x.len() < 2 {
                    return Err(Error::Dimension {
                        expected: 2,
                        got: x.len(),
                        context: "sim_target_v1 needs two state coordinates",
                    });
                }
                if self.actions != 2 {
                    return Err(Error::Config("sim_target_v1 is defined for two actions".into()));
                }
                Ok(if x[0] > 0.0 && x[1] > 0.0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                })
            }
            TabularRule::Uniform => Ok(vec![1.0 / self.actions as f64; self.actions]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Policy {
    Softmax(SoftmaxPolicy),
    Tabular(TabularPolicy),
}

impl Policy {
    pub fn n_actions(&self) -> usize {
        match self {
            Policy::Softmax(p) => p.n_actions(),
            Policy::Tabular(p) => p.actions,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Probability vector over actions `1..=M` (index 0 is action 1).
pub fn policy_probs(policy: &Policy, x: &[f64]) -> Result<Vec<f64>> {
    match policy {
        Policy::Softmax(p) => p.probs(x),
        Policy::Tabular(p) => p.probs(x),
    }
}

/// Read a CSV of state rows (header optional-free: every column is a coordinate).
pub fn load_states_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("cannot parse state value {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Schema(format!("{} contains no state rows", path.display())));
    }
    Ok(out)
}
