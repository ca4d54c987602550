use std::path::Path;

use hrl_core::acpi::{self, OuterRecord};
use hrl_core::basis::FeatureContext;
use hrl_core::data::{self, load_batch, load_states_csv, Policy, Schema, TabularPolicy, TrajectoryBatch};
use hrl_core::grouping::{self, EvaluationReport};
use hrl_core::sim::{self, CoverageTable, PolicyComparison, PolicyValueRow};
use serde::Serialize;

use crate::cli::{CoverageArgs, EvaluateArgs, IterateArgs, PolicyValueArgs, SimulateArgs, TableFormat};
use crate::error::CliError;
use crate::output::{self, Document, TraceWriter};
use crate::settings::{
    load_file, required, CoverageSettings, DataSettings, EvaluateSettings, IterateSettings, PolicyValueSettings,
    SimulateSettings,
};

/// Summary lines go to stdout when the result went to a file, else to stderr.
fn summary(to_file: bool, lines: &[String]) {
    for l in lines {
        if to_file {
            println!("{l}");
        } else {
            eprintln!("{l}");
        }
    }
}

fn load_data(d: &DataSettings) -> Result<(TrajectoryBatch, Option<Vec<Vec<f64>>>), CliError> {
    let path = required(&d.path, "--data")?;
    let gamma = required(&d.gamma, "--gamma")?;
    let format = d.format.unwrap_or_else(|| crate::settings::format_for(&path));
    let batch = load_batch(&path, format, &d.schema, gamma)?;
    let reference = d.reference.as_deref().map(load_states_csv).transpose()?;
    log::info!(
        "loaded {} trajectories ({} transitions) from {}",
        batch.len(),
        batch.total_steps(),
        path.display()
    );
    Ok((batch, reference))
}

#[derive(Debug, Serialize)]
struct GroupRow {
    group: usize,
    size: usize,
    #[serde(rename = "V_R")]
    v_r: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
}

pub fn evaluate(args: &EvaluateArgs, config: Option<&Path>) -> Result<(), CliError> {
    let settings = load_file::<EvaluateSettings>(config)?.resolve(args);
    let policy_path = required(&settings.policy, "--policy")?;
    let cfg = settings.model.evaluate_config(settings.level)?;
    let (batch, reference) = load_data(&settings.data)?;
    let policy = Policy::from_json_file(&policy_path)?;

    let eval = grouping::evaluate(&batch, &policy, &cfg, reference.as_deref())?;
    let report = EvaluationReport::new(&eval, &batch, &cfg);
    let rows: Vec<GroupRow> = report
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| GroupRow {
            group: k,
            size: g.members.len(),
            v_r: g.v_r,
            se: g.se,
            ci_lo: g.ci[0],
            ci_hi: g.ci[1],
        })
        .collect();
    let doc = Document::new("evaluate", &settings, &report)?;
    let out = args.output.out.as_deref();
    output::emit(&doc, &rows, args.output.format == Some(TableFormat::Csv), out)?;

    let mut lines = vec![format!(
        "K = {} ({:?} after {} ADMM iterations, residual {:.2e})",
        report.k, report.admm.status, report.admm.iterations, report.admm.final_residual
    )];
    for r in &rows {
        lines.push(format!(
            "  group {}: n = {:<5} V_R = {:>9.4}  se = {:.4}  {:.0}% CI [{:.4}, {:.4}]",
            r.group,
            r.size,
            r.v_r,
            r.se,
            100.0 * settings.level,
            r.ci_lo,
            r.ci_hi
        ));
    }
    summary(out.is_some(), &lines);
    Ok(())
}

#[derive(Debug, Serialize)]
struct IterateGroup {
    policy: Policy,
    #[serde(rename = "V_R")]
    v_r: f64,
    members: Vec<String>,
}

#[derive(Debug, Serialize)]
struct IterateResult {
    #[serde(rename = "K")]
    k: usize,
    converged: bool,
    outer_iterations: usize,
    groups: Vec<IterateGroup>,
    iters: Vec<OuterRecord>,
}

#[derive(Debug, Serialize)]
struct PolicyRow {
    group: usize,
    size: usize,
    #[serde(rename = "V_R")]
    v_r: f64,
    /// Row-major softmax coefficients joined by `;`.
    alpha: String,
}

pub fn iterate(args: &IterateArgs, config: Option<&Path>) -> Result<(), CliError> {
    let settings = load_file::<IterateSettings>(config)?.resolve(args);
    let cfg = settings.acpi_config()?;
    let (batch, reference) = load_data(&settings.data)?;
    let reference = reference.unwrap_or_else(|| batch.initial_states());
    let basis = cfg.eval.basis.resolve(batch.state_dim(), batch.all_states())?;
    let ctx = FeatureContext::new(basis, batch.n_actions());

    let mut trace = args.trace.as_deref().map(TraceWriter::create).transpose()?;
    let mut trace_err = None;
    let result = acpi::run_acpi_with(&batch, &ctx, &cfg, &reference, &mut |rec| {
        log::info!("outer {}: K = {} sizes {:?}", rec.iter, rec.k, rec.sizes);
        if let Some(w) = trace.as_mut() {
            if let Err(e) = w.record(rec) {
                trace_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e);
    }

    let ids: Vec<&str> = batch.trajectories().iter().map(|t| t.id.as_str()).collect();
    let groups: Vec<IterateGroup> = result
        .groups
        .iter()
        .map(|g| IterateGroup {
            policy: Policy::Softmax(g.policy()),
            v_r: g.v_r,
            members: g.members.iter().map(|&i| ids[i].to_string()).collect(),
        })
        .collect();
    let rows: Vec<PolicyRow> = result
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| PolicyRow {
            group: k,
            size: g.members.len(),
            v_r: g.v_r,
            alpha: g
                .policy()
                .flat()
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect();
    let res = IterateResult {
        k: groups.len(),
        converged: result.converged,
        outer_iterations: result.iters.len(),
        groups,
        iters: result.iters,
    };
    let doc = Document::new("iterate", &settings, &res)?;
    let out = args.output.out.as_deref();
    output::emit(&doc, &rows, args.output.format == Some(TableFormat::Csv), out)?;

    let mut lines = vec![format!(
        "K = {} after {} outer iterations ({})",
        res.k,
        res.outer_iterations,
        if res.converged { "converged" } else { "iteration cap" }
    )];
    for r in &rows {
        lines.push(format!("  group {}: n = {:<5} V_R = {:.4}", r.group, r.size, r.v_r));
    }
    summary(out.is_some(), &lines);
    Ok(())
}

#[derive(Debug, Serialize)]
struct MembershipRow<'a> {
    traj_id: &'a str,
    group: usize,
}

#[derive(Debug, Serialize)]
struct SimulateResult {
    trajectories: usize,
    transitions: usize,
    batch: String,
    membership: String,
}

pub fn simulate(args: &SimulateArgs, config: Option<&Path>) -> Result<(), CliError> {
    let settings = load_file::<SimulateSettings>(config)?.resolve(args);
    let out = required(&args.out, "--out")?;
    let format = args
        .data_format
        .map(Into::into)
        .unwrap_or_else(|| crate::settings::format_for(&out));
    let membership_path = args
        .membership
        .clone()
        .unwrap_or_else(|| output::sidecar(&out, "membership.csv"));

    let sim = sim::generate(&settings.sim)?;
    data::save_batch(&sim.batch, &out, format, &Schema::default())?;
    let rows: Vec<MembershipRow> = sim
        .batch
        .trajectories()
        .iter()
        .zip(&sim.membership)
        .map(|(t, &g)| MembershipRow {
            traj_id: &t.id,
            group: g,
        })
        .collect();
    output::write_text(&membership_path, &output::csv_string(&rows)?)?;

    let res = SimulateResult {
        trajectories: sim.batch.len(),
        transitions: sim.batch.total_steps(),
        batch: file_name(&out),
        membership: file_name(&membership_path),
    };
    let doc = Document::new("simulate", &settings, &res)?;
    output::write_text(&output::sidecar(&out, "meta.json"), &output::json_string(&doc)?)?;
    println!(
        "wrote {} trajectories to {} and membership to {}",
        res.trajectories,
        out.display(),
        membership_path.display()
    );
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn coverage(args: &CoverageArgs, config: Option<&Path>) -> Result<(), CliError> {
    let settings = load_file::<CoverageSettings>(config)?.resolve(args)?;
    let policy = match &settings.policy {
        Some(p) => Policy::from_json_file(p)?,
        None => Policy::Tabular(TabularPolicy::sim_target()),
    };
    let cfg = settings.coverage_config(policy)?;
    let table: CoverageTable = sim::coverage_experiment(&cfg)?;
    let doc = Document::new("coverage", &settings, &table)?;
    let out = args.output.out.as_deref();
    let csv = args.output.format.is_none_or(|f| f == TableFormat::Csv);
    output::emit(&doc, &table.cells, csv, out)?;

    let fmt = |c: Option<f64>| c.map_or("  n/a".to_string(), |v| format!("{v:.3}"));
    let mut lines = vec!["   n    T  group   truth    ACPE  pooled".to_string()];
    for c in &table.cells {
        lines.push(format!(
            "{:>4} {:>4} {:>6} {:>7.3} {:>7} {:>7}{}",
            c.n_per_group,
            c.horizon,
            c.group,
            c.truth,
            fmt(c.acpe_coverage),
            fmt(c.pooled_coverage),
            if c.valid { "" } else { "  (invalid: too many failed fits)" }
        ));
    }
    summary(out.is_some(), &lines);
    Ok(())
}

pub fn policy_value(args: &PolicyValueArgs, config: Option<&Path>) -> Result<(), CliError> {
    let settings = load_file::<PolicyValueSettings>(config)?.resolve(args);
    let (acpi_cfg, values_cfg) = settings.configs()?;
    let cmp: PolicyComparison = sim::policy_comparison(&settings.sim, &acpi_cfg, &values_cfg)?;
    let doc = Document::new("policy-value", &settings, &cmp)?;
    let out = args.output.out.as_deref();
    let csv = args.output.format.is_none_or(|f| f == TableFormat::Csv);
    output::emit(&doc, &cmp.values, csv, out)?;

    let mut lines = vec![format!(
        "learned K = {}; true group g is held mostly by learned group {:?}",
        cmp.acpi.groups.len(),
        cmp.group_for_truth
    )];
    lines.extend(value_lines(&cmp.values));
    summary(out.is_some(), &lines);
    Ok(())
}

fn value_lines(rows: &[PolicyValueRow]) -> Vec<String> {
    rows.iter()
        .map(|r| format!("  {:<14} on group {}: {:>8.4} (se {:.4})", r.policy, r.group, r.value, r.se))
        .collect()
}
