//! The `wncs` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 value iteration
//! did not converge, 3 a structural check failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_thresholds, read_value_table, write_json, write_results, write_sweep, write_thresholds,
    write_trace, write_value_table, ArtifactError, Envelope, ResultsBody, SweepBody, SweepRow,
    SweepRun,
};
use crate::config::{parse_baselines, ConfigError, RunConfig, SweepAxis};
use crate::grid::row_for;
use crate::kernel::{build_kernel, Kernel, SliceKey};
use crate::policy::{
    extract_thresholds, threshold_trends, unfold_policy, verify_evenness, verify_fold_equivalence,
    verify_kernel_dominance, verify_monotonicity, verify_threshold_structure, PolicyError,
    StructureReport,
};
use crate::sim::{estimate_cost, InitialState, SchedulingPolicy};
use crate::solver::{value_iteration, SolveReport, ValueTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 1,
    NotConverged = 2,
    CheckFailed = 3,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure {
        exit: Exit::Usage,
        message: msg.to_string(),
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

impl From<ArtifactError> for Failure {
    fn from(e: ArtifactError) -> Self {
        usage(e)
    }
}

fn default_config_help() -> String {
    format!(
        "Configuration is read from a TOML file (--config); flags override the file, \
         which overrides the defaults. The defaults are:\n\n{}",
        RunConfig::default().to_toml()
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "wncs",
    version,
    about = "Optimal uplink/downlink scheduling for an energy-harvesting networked control loop"
)]
#[command(after_long_help = default_config_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (config: output_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Simulation seed (config: sim.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stopping tolerance on the sup-norm update (config: solver.tol).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration cap (config: solver.max_iter).
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Nodes of the symmetric grid, odd (config: grid.n_nodes).
    #[arg(long)]
    pub grid_nodes: Option<usize>,
    /// Largest retained age (config: grid.tau_max).
    #[arg(long)]
    pub tau_max: Option<u32>,
    /// Grid half-width in standard deviations (config: grid.x_max_mult).
    #[arg(long)]
    pub x_max_mult: Option<f64>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.sim.seed = v;
        }
        if let Some(v) = self.tol {
            cfg.solver.tol = v;
        }
        if let Some(v) = self.max_iter {
            cfg.solver.max_iter = v;
        }
        if let Some(v) = self.grid_nodes {
            cfg.grid.n_nodes = v;
        }
        if let Some(v) = self.tau_max {
            cfg.grid.tau_max = v;
        }
        if let Some(v) = self.x_max_mult {
            cfg.grid.x_max_mult = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the scheduling MDP and write value tables, thresholds and a report.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Check the structural properties of a solved value table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Value table to check [default: <out>/value_table.json].
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Estimate discounted costs by Monte Carlo.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Threshold policy (thresholds.csv or thresholds.json from `solve`).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Comma-separated baselines: never_act, periodic:<k>, greedy_uplink,
        /// random_admissible (config: sim.baselines).
        #[arg(long, value_delimiter = ',')]
        baselines: Option<Vec<String>>,
        /// Write per-step traces of the first sim.trace_rollouts rollouts.
        #[arg(long)]
        trace: bool,
    },
    /// Solve for each value of one parameter and stack the threshold surfaces.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of p, beta, B, a, sigma2.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> Exit
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                Exit::Usage
            } else {
                Exit::Ok
            };
        }
    };
    match run(cli.command) {
        Ok(exit) => exit,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.exit
        }
    }
}

pub fn run(command: Command) -> Result<Exit, Failure> {
    match command {
        Command::Solve { common } => cmd_solve(&common.resolve()?),
        Command::Verify { common, table } => {
            let cfg = common.resolve()?;
            let table = table.unwrap_or_else(|| cfg.output_dir.join("value_table.json"));
            cmd_verify(&cfg, &table)
        }
        Command::Simulate {
            common,
            policy,
            baselines,
            trace,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = baselines {
                cfg.sim.baselines = b;
                cfg.baselines()?;
            }
            cmd_simulate(&cfg, policy.as_deref(), trace)
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = common.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let values = values
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| usage(format!("invalid sweep value '{v}': {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            cmd_sweep(&cfg, axis, &values)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn solve_one(cfg: &RunConfig, folded: bool) -> Result<(Kernel, ValueTable, SolveReport), Failure> {
    let grid = cfg.grid(folded)?;
    let kernel = build_kernel(&cfg.params(), &grid).map_err(usage)?;
    info!(
        "solving on the {} grid ({} states)",
        if folded { "folded" } else { "symmetric" },
        kernel.space().len()
    );
    let (table, report) =
        value_iteration(&kernel, cfg.solver.tol, cfg.solver.max_iter).map_err(|e| Failure {
            exit: Exit::NotConverged,
            message: e.to_string(),
        })?;
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok((kernel, table, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReports {
    pub folded: Option<SolveReport>,
    pub symmetric: Option<SolveReport>,
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<Exit, Failure> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut reports = SolveReports {
        folded: None,
        symmetric: None,
    };
    let mut primary = None;
    if cfg.mode.solves_folded() {
        let (kernel, table, report) = solve_one(cfg, true)?;
        if cfg.solver.write_kernel {
            let path = out.join("kernel.json");
            let file =
                fs::File::create(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            kernel
                .write_json(std::io::BufWriter::new(file))
                .map_err(usage)?;
        }
        write_value_table(out, "value_table", &table, cfg)?;
        reports.folded = Some(report);
        primary = Some(table);
    }
    if cfg.mode.solves_symmetric() {
        let (_, table, report) = solve_one(cfg, false)?;
        let stem = if primary.is_some() {
            "value_table_full"
        } else {
            "value_table"
        };
        write_value_table(out, stem, &table, cfg)?;
        reports.symmetric = Some(report);
        primary.get_or_insert(table);
    }
    let converged = [&reports.folded, &reports.symmetric]
        .iter()
        .all(|r| r.as_ref().is_none_or(|r| r.converged));
    write_json(
        &out.join("solve_report.json"),
        &Envelope::new("solve_report", cfg, &reports),
    )?;

    let table = primary.expect("at least one grid is solved");
    let exit = match extract_thresholds(&table, cfg.hash()) {
        Ok(policy) => {
            write_thresholds(out, &policy, cfg)?;
            Exit::Ok
        }
        Err(e) => {
            eprintln!("no threshold policy written: {e}");
            Exit::CheckFailed
        }
    };
    for (name, r) in [
        ("folded", &reports.folded),
        ("symmetric", &reports.symmetric),
    ] {
        if let Some(r) = r {
            println!(
                "{name}: {} after {} iterations, residual {:.3e}, {:.2}s",
                if r.converged {
                    "converged"
                } else {
                    "NOT converged"
                },
                r.iterations,
                r.final_residual,
                r.wall_time_secs
            );
        }
    }
    if !converged {
        return Ok(Exit::NotConverged);
    }
    Ok(exit)
}

fn check_matches(
    cfg: &RunConfig,
    table: &ValueTable,
    embedded: &RunConfig,
    path: &Path,
) -> Result<(), Failure> {
    let expected = cfg.grid(table.grid.folded)?;
    if table.grid != expected || table.space.battery_cap != cfg.params().battery_capacity {
        return Err(usage(format!(
            "{}: grid does not match the configuration",
            path.display()
        )));
    }
    if embedded.params() != cfg.params() {
        return Err(usage(format!(
            "{}: model parameters do not match the configuration",
            path.display()
        )));
    }
    Ok(())
}

fn policy_failure(e: PolicyError) -> Failure {
    usage(e)
}

pub fn cmd_verify(cfg: &RunConfig, table_path: &Path) -> Result<Exit, Failure> {
    let (env, table) = read_value_table(table_path)?;
    check_matches(cfg, &table, &env.config, table_path)?;

    let full_path = table_path.with_file_name("value_table_full.json");
    let full = if !table.grid.folded {
        Some(table.clone())
    } else if full_path.exists() {
        let (env_full, full) = read_value_table(&full_path)?;
        check_matches(cfg, &full, &env_full.config, &full_path)?;
        Some(full)
    } else {
        None
    };
    let folded = table.folded_half();
    let kernel = build_kernel(&cfg.params(), &folded.grid).map_err(usage)?;
    let tol = cfg.solver.verify_tol;

    let mut report = StructureReport {
        monotonicity: Some(verify_monotonicity(&folded, tol).map_err(policy_failure)?),
        threshold: Some(verify_threshold_structure(&folded, tol).map_err(policy_failure)?),
        dominance: Some(verify_kernel_dominance(&kernel, &folded.v, tol).map_err(policy_failure)?),
        trends: extract_thresholds(&folded, "")
            .ok()
            .map(|p| threshold_trends(&p)),
        ..StructureReport::default()
    };
    if let Some(full) = &full {
        report.evenness = Some(verify_evenness(full, tol).map_err(policy_failure)?);
        if table.grid.folded {
            report.fold = Some(verify_fold_equivalence(full, &table, tol).map_err(policy_failure)?);
        }
    }
    let out = table_path.parent().unwrap_or(Path::new("."));
    write_json(
        &out.join("structure_report.json"),
        &Envelope::new("structure_report", cfg, &report),
    )?;

    let line = |name: &str, pass: Option<bool>| match pass {
        Some(true) => println!("{name}: pass"),
        Some(false) => println!("{name}: FAIL"),
        None => println!("{name}: skipped"),
    };
    line("evenness", report.evenness.as_ref().map(|c| c.pass));
    line("fold equivalence", report.fold.as_ref().map(|c| c.pass));
    line(
        "monotonicity",
        report.monotonicity.as_ref().map(|c| c.pass_x && c.pass_b),
    );
    line(
        "threshold structure",
        report
            .threshold
            .as_ref()
            .map(|c| c.pass_upset && c.pass_c1 && c.pass_c2),
    );
    line(
        "kernel dominance",
        report.dominance.as_ref().map(|c| c.pass),
    );
    Ok(if report.all_pass() {
        Exit::Ok
    } else {
        Exit::CheckFailed
    })
}

/// `E[V(x0, 0, y0, b0)]` over the initial-state distribution.
fn reference_value(table: &ValueTable, cfg: &RunConfig) -> Result<f64, Failure> {
    let sim = cfg.sim_config()?;
    let slice = SliceKey {
        tau: 0,
        y: sim.y0,
        b: sim.b0,
    };
    Ok(match sim.x0 {
        InitialState::Fixed(x) => table.value_at(x, 0, sim.y0, sim.b0),
        InitialState::StandardNormal => {
            let w = row_for(0.0, 1.0, &table.grid).map_err(usage)?;
            w.iter()
                .zip(table.slice_values(slice))
                .map(|(p, v)| p * v)
                .sum()
        }
    })
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    policy_path: Option<&Path>,
    trace: bool,
) -> Result<Exit, Failure> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let params = cfg.params();
    let mut sim = cfg.sim_config()?;
    if !trace {
        sim.trace_rollouts = 0;
    }
    let mut policies: Vec<Box<dyn SchedulingPolicy>> = Vec::new();
    let mut reference = None;
    if let Some(path) = policy_path {
        let env = read_thresholds(path)?;
        if env.config.params() != params {
            warn!(
                "{}: policy was solved for different model parameters",
                path.display()
            );
        }
        let table_path = path.with_file_name("value_table.json");
        if env.config.params() == params && table_path.exists() {
            let (_, table) = read_value_table(&table_path)?;
            reference = Some(reference_value(&table, cfg)?);
        }
        policies.push(Box::new(unfold_policy(&env.body)));
    }
    for b in parse_baselines(cfg.sim.baselines.iter().map(String::as_str))? {
        policies.push(Box::new(b));
    }
    if policies.is_empty() {
        return Err(usage(
            "nothing to simulate: give --policy or at least one baseline",
        ));
    }

    let mut results = Vec::new();
    let mut traces = Vec::new();
    for p in &policies {
        let (est, rollouts) = estimate_cost(p.as_ref(), &params, &sim).map_err(usage)?;
        println!(
            "{:<20} mean {:>12.6} se {:.6}",
            est.policy, est.mean, est.se
        );
        for (i, r) in rollouts.into_iter().enumerate() {
            if let Some(rows) = r.trace {
                traces.push((est.policy.clone(), i, rows));
            }
        }
        results.push(est);
    }
    write_results(
        out,
        &ResultsBody {
            results,
            optimal_value_reference: reference,
        },
        cfg,
    )?;
    if trace {
        write_trace(out, &traces)?;
    }
    Ok(Exit::Ok)
}

pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Exit, Failure> {
    let configs = values
        .iter()
        .map(|&v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut body = SweepBody {
        axis: axis.to_string(),
        runs: Vec::new(),
        rows: Vec::new(),
    };
    let mut exit = Exit::Ok;
    for (&value, run_cfg) in values.iter().zip(&configs) {
        let (_, table, report) = solve_one(run_cfg, true)?;
        let policy = extract_thresholds(&table, run_cfg.hash());
        if !report.converged {
            exit = Exit::NotConverged;
        } else if policy.is_err() && exit == Exit::Ok {
            exit = Exit::CheckFailed;
        }
        if let Ok(p) = &policy {
            body.rows.extend(p.thresholds.iter().map(|e| SweepRow {
                value,
                tau: e.tau,
                b: e.b,
                x_star: e.x_star,
                refined_x_star: e.refined_x_star,
            }));
        }
        println!(
            "{axis} = {value}: {} iterations, converged = {}",
            report.iterations, report.converged
        );
        body.runs.push(SweepRun {
            value,
            config_hash: run_cfg.hash(),
            converged: report.converged,
            iterations: report.iterations,
            final_residual: report
                .final_residual
                .is_finite()
                .then_some(report.final_residual),
            threshold_structure: policy.is_ok(),
        });
    }
    write_sweep(out, &body, cfg)?;
    Ok(exit)
}
