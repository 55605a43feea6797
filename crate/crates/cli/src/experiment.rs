//! Executes resolved experiment configs and writes their outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use aoi_whittle::oracle::{index_by_bisection, joint_rvi_solve, DecoupledMdp, JointMdp, JointPolicy};
use aoi_whittle::policies::{PolicyKind, PolicyOptions};
use aoi_whittle::sim::{self, SimConfig, SimReport, SweepGrid};
use aoi_whittle::{IndexCalculator, SeriesContext, UeConfig, UeState};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_policy, ExperimentConfig, ExperimentKind, OutputFormat, SimSpec, SweepSpec};
use crate::error::CliError;
use crate::table::{Cell, Table};

pub const SWEEP_COLUMNS: [&str; 7] = ["lambda", "epsilon", "policy", "mean_cost", "ci_low", "ci_high", "replications"];

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Simulation config and policy options described by a resolved `sim` section.
pub fn sim_config(spec: &SimSpec, seed: u64) -> Result<SimConfig, CliError> {
    let policy = parse_policy("sim.policy", spec.policy.as_deref().unwrap_or("whittle"))?;
    Ok(SimConfig {
        ues: spec.ues.clone(),
        horizon: spec.horizon,
        warmup: spec.warmup.unwrap_or_else(|| sim::default_warmup(spec.horizon)),
        seed,
        policy,
        replications: spec.replications.unwrap_or(crate::config::DEFAULT_REPLICATIONS),
        charge: spec.charge.unwrap_or(0.0),
    })
}

/// Solves the joint MDP for `ues` when `optimal` is requested.
pub fn policy_options(spec: &SimSpec, ues: &[UeConfig], policies: &[PolicyKind]) -> Result<PolicyOptions, CliError> {
    let mut options = PolicyOptions {
        index_offset: spec.index_offset.unwrap_or(crate::config::DEFAULT_INDEX_OFFSET),
        tie_break: spec.tie_break.unwrap_or_default(),
        joint: None,
        clamp_to_table: spec.clamp_to_table.unwrap_or(true),
    };
    if policies.contains(&PolicyKind::Optimal) {
        options.joint = Some(Arc::new(solve_joint(spec, ues)?));
    }
    Ok(options)
}

fn solve_joint(spec: &SimSpec, ues: &[UeConfig]) -> Result<JointPolicy, CliError> {
    let caps = spec.optimal_caps.unwrap_or(crate::config::DEFAULT_OPTIMAL_CAPS);
    joint_rvi_solve(&JointMdp::new(ues.to_vec(), caps, caps)).map_err(runtime)
}

fn sweep_policies(sweep: &SweepSpec) -> Result<Vec<PolicyKind>, CliError> {
    sweep
        .policies
        .iter()
        .enumerate()
        .map(|(k, p)| parse_policy(&format!("sweep.policies[{k}]"), p).map_err(CliError::from))
        .collect()
}

/// One row per grid point and policy.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub policy: PolicyKind,
    pub report: SimReport,
}

pub fn run_sweep(spec: &SimSpec, sweep: &SweepSpec, seed: u64) -> Result<Vec<SweepRow>, CliError> {
    let base = sim_config(spec, seed)?;
    let policies = sweep_policies(sweep)?;
    let grid = SweepGrid {
        lambdas: sweep.lambdas.clone(),
        eps: sweep.epsilons.clone(),
    };
    let mut rows = Vec::new();
    for (lambda, eps) in grid.points() {
        let mut point = base.clone();
        for ue in &mut point.ues {
            if let Some(l) = lambda {
                ue.lambda = l;
            }
            if let Some(e) = eps {
                ue.eps = e;
            }
        }
        let options = policy_options(spec, &point.ues, &policies)?;
        let cells = sim::sweep(&point, &SweepGrid::default(), &policies, &options).map_err(runtime)?;
        for cell in cells {
            let report = cell.report.map_err(|e| {
                CliError::Runtime(format!(
                    "cell lambda={lambda:?} epsilon={eps:?} policy={}: {e}",
                    cell.policy
                ))
            })?;
            rows.push(SweepRow {
                lambda,
                epsilon: eps,
                policy: cell.policy,
                report,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&SWEEP_COLUMNS);
    for r in rows {
        t.push(vec![
            r.lambda.into(),
            r.epsilon.into(),
            r.policy.as_str().into(),
            r.report.mean_cost.into(),
            r.report.ci_low.into(),
            r.report.ci_high.into(),
            r.report.replications.into(),
        ]);
    }
    t
}

pub fn index_table(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let spec = cfg.index_table.as_ref().expect("resolved index_table");
    let ctx = SeriesContext::new(spec.lambda, spec.epsilon, spec.cost)
        .map_err(runtime)?
        .with_offset(spec.offset);
    let calc = IndexCalculator::from_context(ctx);
    let mut t = Table::new(&["a", "d", "index", "d1", "branch"]);
    for a in 1..=spec.a_max {
        for d in 0..=spec.d_max {
            let v = calc.index(UeState { a, d }).map_err(runtime)?;
            let branch = serde_json::to_value(v.branch).map_err(runtime)?;
            t.push(vec![
                a.into(),
                d.into(),
                v.value.into(),
                v.d1.into(),
                branch.as_str().unwrap_or_default().into(),
            ]);
        }
    }
    Ok(t)
}

pub fn oracle_check_table(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let spec = cfg.oracle_check.as_ref().expect("resolved oracle_check");
    let calc = IndexCalculator::new(spec.lambda, spec.epsilon, spec.cost).map_err(runtime)?;
    let caps = spec.caps.expect("resolved caps");
    let base = DecoupledMdp::new(spec.lambda, spec.epsilon, spec.cost, 0.0)
        .with_caps(caps, caps)
        .with_tolerance(spec.tolerance.expect("resolved tolerance"));
    let rel = spec.relative_tolerance.expect("resolved relative tolerance");
    let floor = spec.absolute_floor.expect("resolved floor");
    let states: Vec<UeState> = (1..=spec.a_max)
        .flat_map(|a| (1..=spec.d_max).map(move |d| UeState { a, d }))
        .collect();
    let rows: Vec<Vec<Cell>> = states
        .par_iter()
        .map(|&s| {
            let closed = calc.index_value(s).map_err(runtime)?;
            let hi = if closed > 0.0 { 2.0 * closed } else { 1.0 };
            let oracle = index_by_bisection(&base, s, hi).map_err(runtime)?;
            let diff = (closed - oracle).abs();
            let within = diff <= (rel * oracle.abs()).max(floor);
            Ok(vec![
                s.a.into(),
                s.d.into(),
                closed.into(),
                oracle.into(),
                (diff / oracle.abs().max(f64::MIN_POSITIVE)).into(),
                within.into(),
            ])
        })
        .collect::<Result<_, CliError>>()?;
    let mut t = Table::new(&["a", "d", "closed_form", "oracle", "rel_error", "within_tolerance"]);
    for r in rows {
        t.push(r);
    }
    Ok(t)
}

pub fn sim_run_table(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let spec = cfg.sim.as_ref().expect("resolved sim");
    let config = sim_config(spec, cfg.seed.unwrap_or_default())?;
    let options = policy_options(spec, &config.ues, &[config.policy])?;
    let r = sim::run_named(&config, &options).map_err(runtime)?;
    let mut t = Table::new(&[
        "scope",
        "policy",
        "mean_cost",
        "mean_aoi",
        "ci_low",
        "ci_high",
        "replications",
        "throughput",
        "transmissions",
        "mean_charge",
    ]);
    let n = r.ue_count as f64;
    t.push(vec![
        "fleet".into(),
        r.policy.as_str().into(),
        r.mean_cost.into(),
        (r.per_ue_aoi.iter().sum::<f64>() / n).into(),
        r.ci_low.into(),
        r.ci_high.into(),
        r.replications.into(),
        r.throughput.into(),
        r.transmissions.into(),
        r.mean_charge.into(),
    ]);
    for (k, (c, h)) in r.per_ue_cost.iter().zip(&r.per_ue_aoi).enumerate() {
        t.push(vec![
            format!("ue{k}").into(),
            r.policy.as_str().into(),
            (*c).into(),
            (*h).into(),
            Cell::Empty,
            Cell::Empty,
            r.replications.into(),
            Cell::Empty,
            Cell::Empty,
            Cell::Empty,
        ]);
    }
    Ok(t)
}

/// fig2 preset rows: each policy's simulated cost next to the joint optimum.
#[derive(Clone, Debug)]
pub struct Fig2Result {
    pub xi_opt: f64,
    pub rows: Vec<SweepRow>,
}

pub fn run_fig2(cfg: &ExperimentConfig) -> Result<Fig2Result, CliError> {
    let spec = cfg.sim.as_ref().expect("resolved sim");
    let seed = cfg.seed.unwrap_or_default();
    let joint = solve_joint(spec, &spec.ues)?;
    let sweep = cfg.sweep.clone().unwrap_or(SweepSpec {
        lambdas: vec![],
        epsilons: vec![],
        policies: vec!["whittle".into(), "optimal".into()],
    });
    let policies = sweep_policies(&sweep)?;
    let mut options = policy_options(spec, &spec.ues, &[])?;
    let xi_opt = joint.xi_opt;
    options.joint = Some(Arc::new(joint));
    let base = sim_config(spec, seed)?;
    let cells = sim::sweep(&base, &SweepGrid::default(), &policies, &options).map_err(runtime)?;
    let rows = cells
        .into_iter()
        .map(|c| {
            Ok(SweepRow {
                lambda: None,
                epsilon: None,
                policy: c.policy,
                report: c.report.map_err(runtime)?,
            })
        })
        .collect::<Result<_, CliError>>()?;
    Ok(Fig2Result { xi_opt, rows })
}

pub fn fig2_table(r: &Fig2Result) -> Table {
    let mut t = Table::new(&["policy", "mean_cost", "ci_low", "ci_high", "replications", "xi_opt", "relative_gap"]);
    for row in &r.rows {
        t.push(vec![
            row.policy.as_str().into(),
            row.report.mean_cost.into(),
            row.report.ci_low.into(),
            row.report.ci_high.into(),
            row.report.replications.into(),
            r.xi_opt.into(),
            ((row.report.mean_cost - r.xi_opt) / r.xi_opt).into(),
        ]);
    }
    t
}

/// Runs a resolved config and returns the primary results table.
pub fn execute(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let seed = cfg.seed.unwrap_or_default();
    match cfg.kind {
        ExperimentKind::IndexTable => index_table(cfg),
        ExperimentKind::OracleCheck => oracle_check_table(cfg),
        ExperimentKind::SimRun => sim_run_table(cfg),
        ExperimentKind::Sweep | ExperimentKind::PresetFig3 | ExperimentKind::PresetFig4 => {
            let rows = run_sweep(
                cfg.sim.as_ref().expect("resolved sim"),
                cfg.sweep.as_ref().expect("resolved sweep"),
                seed,
            )?;
            Ok(sweep_table(&rows))
        }
        ExperimentKind::PresetFig2 => Ok(fig2_table(&run_fig2(cfg)?)),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub format: Option<OutputFormat>,
}

#[derive(Serialize)]
struct Meta<'a> {
    kind: ExperimentKind,
    seed: u64,
    library_version: &'static str,
    cli_version: &'static str,
    wall_time_seconds: f64,
    results: &'a str,
    format: OutputFormat,
    config: &'a ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub results: PathBuf,
    pub meta: PathBuf,
    pub resolved: PathBuf,
    pub rows: usize,
}

fn write_atomically(files: &[(PathBuf, Vec<u8>)]) -> Result<(), CliError> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let tmp = path.with_file_name(format!(".{name}.partial"));
        if let Err(e) = std::fs::write(&tmp, bytes) {
            for t in &staged {
                let _ = std::fs::remove_file(t);
            }
            let _ = std::fs::remove_file(&tmp);
            return Err(CliError::io(tmp, e));
        }
        staged.push(tmp);
    }
    for (tmp, (path, _)) in staged.iter().zip(files) {
        std::fs::rename(tmp, path).map_err(|e| CliError::io(path.clone(), e))?;
    }
    Ok(())
}

/// Loads, validates and runs the experiment at `config`, then writes the
/// results file, `meta.json` and `resolved.toml` into `options.out_dir`.
pub fn run_experiment(config: &Path, options: &RunOptions) -> Result<RunSummary, CliError> {
    let raw = ExperimentConfig::load(config)?;
    let resolved = raw.resolve(options.seed, options.format)?;
    if options.threads == Some(0) {
        return Err(crate::error::ConfigError::new("--threads", "must be at least 1").into());
    }
    let start = Instant::now();
    let table = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(runtime)?
            .install(|| execute(&resolved))?,
        None => execute(&resolved)?,
    };
    let wall = start.elapsed().as_secs_f64();

    let format = resolved.format();
    let name = resolved.output_name();
    std::fs::create_dir_all(&options.out_dir).map_err(|e| CliError::io(&options.out_dir, e))?;
    let results = options.out_dir.join(&name);
    let meta_path = options.out_dir.join("meta.json");
    let resolved_path = options.out_dir.join("resolved.toml");
    let meta = Meta {
        kind: resolved.kind,
        seed: resolved.seed.unwrap_or_default(),
        library_version: aoi_whittle::VERSION,
        cli_version: env!("CARGO_PKG_VERSION"),
        wall_time_seconds: wall,
        results: &name,
        format,
        config: &resolved,
    };
    let mut meta_bytes = serde_json::to_vec_pretty(&meta).map_err(runtime)?;
    meta_bytes.push(b'\n');
    write_atomically(&[
        (results.clone(), table.encode(format)),
        (meta_path.clone(), meta_bytes),
        (resolved_path.clone(), resolved.to_toml().into_bytes()),
    ])?;
    Ok(RunSummary {
        results,
        meta: meta_path,
        resolved: resolved_path,
        rows: table.rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text).unwrap().resolve(None, None).unwrap()
    }

    #[test]
    fn index_table_contains_reference_row() {
        let t = execute(&cfg(
            r#"
schema_version = 1
kind = "index_table"
[index_table]
lambda = 0.5
epsilon = 0.25
cost = { kind = "linear" }
a_max = 4
d_max = 4
"#,
        ))
        .unwrap();
        assert_eq!(t.rows.len(), 4 * 5);
        let row = t.rows.iter().find(|r| r[0] == Cell::Int(1) && r[1] == Cell::Int(2)).unwrap();
        assert_eq!(row[2], Cell::Float(4.25));
    }

    #[test]
    fn oracle_check_runs() {
        let t = execute(&cfg(
            r#"
schema_version = 1
kind = "oracle_check"
[oracle_check]
lambda = 1.0
epsilon = 0.0
cost = { kind = "linear" }
a_max = 1
d_max = 3
caps = 24
"#,
        ))
        .unwrap();
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r[5] == Cell::Bool(true)), "{:?}", t.rows);
    }

    #[test]
    fn sim_run_rows() {
        let t = execute(&cfg(
            r#"
schema_version = 1
kind = "sim_run"
[sim]
horizon = 20000
replications = 2
policy = "always_schedule"
[[sim.ues]]
lambda = 1.0
epsilon = 0.0
cost = { kind = "linear" }
"#,
        ))
        .unwrap();
        assert_eq!(t.rows[0][2], Cell::Float(2.0));
        assert_eq!(t.rows.len(), 2);
    }

    #[test]
    fn small_fig2_run() {
        let c = cfg(
            "schema_version = 1\nkind = \"preset_fig2\"\n[preset]\nhorizon = 20000\nreplications = 2\npolicies = [\"whittle\", \"optimal\"]",
        );
        let r = run_fig2(&c).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.xi_opt > 0.0 && r.xi_opt < 1.0);
        let opt = &r.rows[1].report;
        assert!((opt.mean_cost - r.xi_opt).abs() < 0.1 * r.xi_opt);
    }
}
