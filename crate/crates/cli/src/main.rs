//! `swingsafe` — scenario runner and comparison harness for the bilayered
//! frequency controller on swing-equation networks.
//!
//! Subcommands: `run`, `compare`, `solve-qp`, `check-case`, `dump-qp`.
//! Exit codes: 0 when every requested audit passes, 1 when one fails,
//! 2 on configuration or input errors.

mod casefile;
mod csvout;
mod qpdump;
mod report;
mod scenario;

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use swingsafe_core::dynamics::SystemState;
use swingsafe_core::prediction::{assemble_mpc_qp, discretize_backward_euler, linearize, locality_audit};
use swingsafe_core::solvers::{
    distributed_execute, kkt_residual, saddle_integrate, Consumer, KktResidual, ReferenceSolver,
    SaddleConfig, SaddleOutcome,
};
use swingsafe_core::units::hz_to_rad_s;

use casefile::{parse_forecast, CaseFile};
use report::{audit_run, compare_runs, AuditSelection};
use scenario::{Backend, Mode, Scenario};

#[derive(Parser)]
#[command(
    name = "swingsafe",
    version,
    about = "Bilayered frequency control on swing-equation networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario, write the trajectory CSV, and audit it.
    Run(RunArgs),
    /// Run two controller modes on the same case and compare them.
    Compare(CompareArgs),
    /// Solve a dumped QP instance with a chosen backend.
    SolveQp(SolveQpArgs),
    /// Validate a case file and print its derived quantities.
    CheckCase(CheckCaseArgs),
    /// Assemble the MPC QP of a case at equilibrium and dump it.
    DumpQp(DumpQpArgs),
}

#[derive(Args)]
struct CaseArgs {
    /// Case description (TOML).
    #[arg(long)]
    case: PathBuf,
    /// Recentre injections to zero mean before building the network.
    #[arg(long)]
    rebalance: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Controller mode: open-loop, top-only, bilayered, bilayered-shift.
    #[arg(long, default_value = "bilayered")]
    mode: String,
    /// QP backend: reference, saddle-central, saddle-distributed.
    #[arg(long, default_value = "reference")]
    backend: String,
    /// Simulation end time in seconds (defaults to the case's scenario).
    #[arg(long)]
    t_end: Option<f64>,
    /// Integrator step in seconds (defaults to the case's scenario).
    #[arg(long)]
    dt: Option<f64>,
    /// Keep one CSV row per this many steps (defaults to the case, then 100).
    #[arg(long)]
    output_every: Option<usize>,
    /// Output directory (default: $SWINGSAFE_OUT_DIR, then the working dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated audits to run: safety, lyapunov, invariants,
    /// locality, or all.
    #[arg(long, default_value = "all")]
    audit: String,
    /// Constant added to the raw MPC output in bilayered-shift mode.
    #[arg(long, default_value_t = 0.1)]
    shift: f64,
    /// Keep the controller off until this time (seconds).
    #[arg(long, default_value_t = 0.0)]
    enable_at: f64,
    /// Comma-separated initial frequency offsets in Hz, one per bus.
    #[arg(long)]
    omega0_hz: Option<String>,
    /// Injection forecast mode: perfect or hold-current.
    #[arg(long, default_value = "perfect")]
    forecast: String,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Optional second case; must match the first (guards misuse).
    #[arg(long)]
    case_b: Option<PathBuf>,
    /// First controller mode.
    #[arg(long, default_value = "bilayered")]
    mode_a: String,
    /// Second controller mode.
    #[arg(long, default_value = "top-only")]
    mode_b: String,
    #[arg(long, default_value = "reference")]
    backend: String,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    output_every: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    shift: f64,
    #[arg(long, default_value = "perfect")]
    forecast: String,
}

#[derive(Args)]
struct SolveQpArgs {
    /// Dumped QP instance (see `dump-qp`).
    #[arg(long)]
    dump: PathBuf,
    /// reference, saddle-central, or saddle-distributed.
    #[arg(long, default_value = "reference")]
    backend: String,
    /// Write the solution as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-round residual trace CSV here (saddle backends).
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckCaseArgs {
    #[command(flatten)]
    case: CaseArgs,
}

#[derive(Args)]
struct DumpQpArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(text: &str, shift: f64) -> Result<Mode> {
    Ok(match text {
        "open-loop" => Mode::OpenLoop,
        "top-only" => Mode::TopOnly,
        "bilayered" => Mode::Bilayered,
        "bilayered-shift" => Mode::BilayeredShift(shift),
        other => bail!(
            "unknown mode `{other}` (expected open-loop, top-only, bilayered, or bilayered-shift)"
        ),
    })
}

fn parse_backend(text: &str) -> Result<Backend> {
    Ok(match text {
        "reference" => Backend::Reference,
        "saddle-central" => Backend::SaddleCentral,
        "saddle-distributed" => Backend::SaddleDistributed,
        other => bail!(
            "unknown backend `{other}` (expected reference, saddle-central, or saddle-distributed)"
        ),
    })
}

fn parse_omega0(text: &str) -> Result<DVector<f64>> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad frequency entry `{s}`"))
        })
        .collect::<Result<_>>()?;
    Ok(DVector::from_iterator(
        vals.len(),
        vals.into_iter().map(hz_to_rad_s),
    ))
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("SWINGSAFE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

#[allow(clippy::too_many_arguments)]
fn build_scenario(
    cf: &CaseFile,
    rebalance: bool,
    mode: Mode,
    backend: Backend,
    t_end: Option<f64>,
    dt: Option<f64>,
    output_every: Option<usize>,
    enable_at: f64,
    omega0: Option<DVector<f64>>,
    forecast: &str,
) -> Result<Scenario> {
    let net = cf.network(rebalance)?;
    let cfg = cf.controller_config(&net)?;
    let profile = cf.disturbance(parse_forecast(forecast)?)?;
    let scen = cf.scenario.as_ref();
    let s = Scenario {
        net,
        cfg,
        profile,
        mode,
        backend,
        t_end: t_end.or(scen.map(|s| s.t_end)).unwrap_or(180.0),
        dt: dt.or(scen.map(|s| s.dt)).unwrap_or(1e-3),
        output_every: output_every
            .or(scen.and_then(|s| s.output_every))
            .unwrap_or(100),
        enable_at,
        omega0,
    };
    s.validate()?;
    Ok(s)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn write_trajectory_csv(dir: &Path, label: &str, s: &Scenario, traj: &swingsafe_core::dynamics::Trajectory) -> Result<PathBuf> {
    let path = dir.join(format!("trajectory_{label}.csv"));
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    csvout::write_trajectory(
        &mut w,
        &s.net,
        traj,
        &s.cfg.omega_min,
        &s.cfg.omega_max,
        s.output_every,
    )?;
    w.flush()?;
    Ok(path)
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let cf = CaseFile::load(&args.case.case)?;
    let mode = parse_mode(&args.mode, args.shift)?;
    let backend = parse_backend(&args.backend)?;
    let omega0 = args.omega0_hz.as_deref().map(parse_omega0).transpose()?;
    let s = build_scenario(
        &cf,
        args.case.rebalance,
        mode,
        backend,
        args.t_end,
        args.dt,
        args.output_every,
        args.enable_at,
        omega0,
        &args.forecast,
    )?;
    let sel = AuditSelection::parse(&args.audit).map_err(anyhow::Error::msg)?;
    let out_dir = resolve_out_dir(args.out_dir);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let started = Instant::now();
    let out = s.run()?;
    let elapsed = started.elapsed().as_secs_f64();
    let label = mode.label();
    let csv_path = write_trajectory_csv(&out_dir, label, &s, &out.traj)?;

    let title = format!(
        "{} / {} on {}",
        label,
        backend.label(),
        args.case.case.display()
    );
    let rep = audit_run(&s, &out.traj, sel);
    let text = rep.render_text(&title);
    let meta = json!({
        "case": args.case.case.display().to_string(),
        "name": cf.name,
        "mode": label,
        "backend": backend.label(),
        "t_end": s.t_end,
        "dt": s.dt,
        "enable_at": s.enable_at,
        "mpc_samples": out.mpc_samples,
        "solver_failures": out.solver_failures,
    });
    write_file(&out_dir.join(format!("audit_{label}.txt")), &text)?;
    write_file(
        &out_dir.join(format!("audit_{label}.json")),
        &serde_json::to_string_pretty(&rep.render_json(meta))?,
    )?;

    print!("{text}");
    println!(
        "trajectory: {} ({} MPC samples, {} solver failures, {elapsed:.1} s)",
        csv_path.display(),
        out.mpc_samples,
        out.solver_failures
    );
    Ok(if rep.pass() { 0 } else { 1 })
}

fn cmd_compare(args: CompareArgs) -> Result<u8> {
    let cf = CaseFile::load(&args.case.case)?;
    if let Some(other) = &args.case_b {
        let cf_b = CaseFile::load(other)?;
        if cf_b != cf {
            bail!(
                "case mismatch: {} and {} describe different systems; compare needs one case",
                args.case.case.display(),
                other.display()
            );
        }
    }
    let backend = parse_backend(&args.backend)?;
    let build = |mode_text: &str| -> Result<Scenario> {
        build_scenario(
            &cf,
            args.case.rebalance,
            parse_mode(mode_text, args.shift)?,
            backend,
            args.t_end,
            args.dt,
            args.output_every,
            0.0,
            None,
            &args.forecast,
        )
    };
    let sa = build(&args.mode_a)?;
    let sb = build(&args.mode_b)?;
    let out_dir = resolve_out_dir(args.out_dir);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let ra = sa.run()?;
    let rb = sb.run()?;
    write_trajectory_csv(&out_dir, sa.mode.label(), &sa, &ra.traj)?;
    write_trajectory_csv(&out_dir, sb.mode.label(), &sb, &rb.traj)?;

    let cmp = compare_runs(&sa, &ra.traj, &sb, &rb.traj);
    let text = cmp.render_text(sa.mode.label(), sb.mode.label());
    write_file(&out_dir.join("compare.txt"), &text)?;
    write_file(
        &out_dir.join("compare.json"),
        &serde_json::to_string_pretty(&cmp.render_json(sa.mode.label(), sb.mode.label()))?,
    )?;
    print!("{text}");
    Ok(0)
}

fn cmd_check_case(args: CheckCaseArgs) -> Result<u8> {
    let cf = CaseFile::load(&args.case.case)?;
    if let Some(name) = &cf.name {
        println!("case: {name}");
    }
    let net = cf.network(args.case.rebalance)?;
    println!(
        "{} buses ({} zero-inertia), {} edges",
        net.n_buses(),
        (0..net.n_buses()).filter(|&i| net.inertia()[i] == 0.0).count(),
        net.n_edges()
    );
    println!(
        "controlled buses: {:?}; safety buses: {:?} (1-based)",
        net.controlled().iter().map(|i| i + 1).collect::<Vec<_>>(),
        net.safety().iter().map(|i| i + 1).collect::<Vec<_>>()
    );
    println!(
        "injection sum: {:.3e}",
        net.injection().iter().sum::<f64>()
    );
    let cond = net.check_equilibrium_condition();
    println!(
        "equilibrium condition ‖L†p‖_edge = {:.6} ({})",
        cond.value,
        if cond.holds { "holds" } else { "VIOLATED" }
    );
    println!("{}", report::case_energy_line(&net));
    let cfg = cf.controller_config(&net)?;
    println!(
        "controller: sampling {} s, horizon {} steps of {} s",
        cfg.sample_period,
        cfg.horizon_steps(),
        cfg.pred_step
    );
    let profile = cf.disturbance(swingsafe_core::netmodel::ForecastMode::Perfect)?;
    if profile.segments.is_empty() {
        println!("disturbance: none");
    } else {
        let t_last = profile
            .segments
            .iter()
            .map(|s| s.t_end)
            .fold(0.0, f64::max);
        println!(
            "disturbance on buses {:?} (1-based) until t = {} s",
            profile.buses.iter().map(|i| i + 1).collect::<Vec<_>>(),
            t_last
        );
        for seg in &profile.segments {
            let mid = 0.5 * (seg.t_start + seg.t_end);
            for t in [seg.t_start, mid, seg.t_end] {
                println!("  delta({t}) = {:.6}", profile.delta(t));
            }
        }
        println!("  delta({}) = {:.6}", t_last + 10.0, profile.delta(t_last + 10.0));
    }
    println!("case ok");
    Ok(0)
}

/// Builds the MPC program of a case, linearised and discretised at the
/// nominal equilibrium with a constant-injection forecast.
fn equilibrium_qp(cf: &CaseFile, rebalance: bool) -> Result<swingsafe_core::prediction::QpInstance> {
    let net = cf.network(rebalance)?;
    let cfg = cf.controller_config(&net)?;
    let lm = linearize(&net, &cfg.tau);
    let dm = discretize_backward_euler(&lm, cfg.pred_step);
    let mut x0 = SystemState::zeros(&net);
    x0.lambda = net.compute_equilibrium()?;
    let horizon = cfg.horizon_steps();
    let p = DVector::from_column_slice(net.injection());
    let forecast = vec![p; horizon.saturating_sub(1)];
    Ok(assemble_mpc_qp(&dm, &net, &cfg.weights(), horizon, &x0, &forecast)?)
}

fn cmd_dump_qp(args: DumpQpArgs) -> Result<u8> {
    let cf = CaseFile::load(&args.case.case)?;
    let qp = equilibrium_qp(&cf, args.case.rebalance)?;
    let text = qpdump::dump_qp(&qp);
    match &args.out {
        Some(path) => {
            write_file(path, &text)?;
            println!(
                "wrote {} ({} variables, {} inequalities, {} equalities)",
                path.display(),
                qp.dims.dim(),
                qp.dims.n_ineq(),
                qp.dims.n_eq()
            );
        }
        None => print!("{text}"),
    }
    Ok(0)
}

fn print_kkt(kkt: &KktResidual) {
    println!(
        "KKT: stationarity {:.3e}, primal ineq {:.3e}, primal eq {:.3e}, complementarity {:.3e} (max {:.3e})",
        kkt.stationarity, kkt.primal_ineq, kkt.primal_eq, kkt.complementarity, kkt.max()
    );
}

fn write_solution_json(
    path: &Path,
    backend: &str,
    objective: f64,
    kkt: &KktResidual,
    y: &DVector<f64>,
) -> Result<()> {
    let doc = json!({
        "backend": backend,
        "objective": objective,
        "kkt": {
            "stationarity": kkt.stationarity,
            "primal_ineq": kkt.primal_ineq,
            "primal_eq": kkt.primal_eq,
            "complementarity": kkt.complementarity,
        },
        "y": y.iter().copied().collect::<Vec<f64>>(),
    });
    write_file(path, &serde_json::to_string_pretty(&doc)?)
}

fn report_saddle(out: &SaddleOutcome) {
    println!(
        "{} after {} rounds (step size {:.3e})",
        if out.converged { "converged" } else { "NO CONVERGENCE" },
        out.rounds,
        out.h_used
    );
    print_kkt(&out.kkt);
    if !out.converged {
        println!("residual trace (last checks):");
        let rows = &out.trace.rows;
        for row in rows.iter().skip(rows.len().saturating_sub(5)) {
            println!(
                "  round {}: |dz| {:.3e}, stationarity {:.3e}, ineq {:.3e}, eq {:.3e}, compl {:.3e}",
                row.round, row.dz_norm, row.stationarity, row.primal_ineq, row.primal_eq,
                row.complementarity
            );
        }
    }
}

fn cmd_solve_qp(args: SolveQpArgs) -> Result<u8> {
    let text = fs::read_to_string(&args.dump)
        .with_context(|| format!("reading {}", args.dump.display()))?;
    let qp = qpdump::load_qp(&text)?;
    println!(
        "loaded QP: {} variables, {} inequalities, {} equalities, horizon {}",
        qp.dims.dim(),
        qp.dims.n_ineq(),
        qp.dims.n_eq(),
        qp.dims.horizon
    );
    let backend = parse_backend(&args.backend)?;
    let write_trace = |outcome: &SaddleOutcome| -> Result<()> {
        if let Some(path) = &args.trace_out {
            let file =
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            csvout::write_trace(&mut w, &outcome.trace)?;
            w.flush()?;
        }
        Ok(())
    };
    match backend {
        Backend::Reference => {
            let sol = ReferenceSolver::new().solve(&qp, 1e-10)?;
            let objective = qp.objective(&sol.y);
            println!(
                "reference solution in {} active-set iterations; objective {:.9e}",
                sol.iterations, objective
            );
            let kkt = kkt_residual(&qp, &sol.y, &sol.eta, &sol.mu);
            print_kkt(&kkt);
            if let Some(path) = &args.out {
                write_solution_json(path, "reference", objective, &kkt, &sol.y)?;
            }
            Ok(0)
        }
        Backend::SaddleCentral => {
            let outcome = saddle_integrate(&qp, &SaddleConfig::default(), None, None)?;
            report_saddle(&outcome);
            write_trace(&outcome)?;
            let objective = qp.objective(&outcome.state.z);
            println!("objective {:.9e}", objective);
            if let Some(path) = &args.out {
                write_solution_json(path, "saddle-central", objective, &outcome.kkt, &outcome.state.z)?;
            }
            Ok(if outcome.converged { 0 } else { 1 })
        }
        Backend::SaddleDistributed => {
            let (outcome, log) = distributed_execute(&qp, &SaddleConfig::default(), None, None)?;
            report_saddle(&outcome);
            write_trace(&outcome)?;
            let objective = qp.objective(&outcome.state.z);
            println!("objective {:.9e}", objective);
            let audit = locality_audit(&qp)?;
            log.check()?;
            println!(
                "locality certificate: {} Hessian couplings (max owner distance {}), {} constraint rows local; \
                 {} message flows, max read distance {} (primal) / {} (dual)",
                audit.h_couplings,
                audit.max_h_distance,
                audit.rows_checked,
                log.records.len(),
                log.max_distance(Consumer::PrimalUpdate),
                log.max_distance(Consumer::DualUpdate)
            );
            if let Some(path) = &args.out {
                write_solution_json(path, "saddle-distributed", objective, &outcome.kkt, &outcome.state.z)?;
            }
            Ok(if outcome.converged { 0 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::SolveQp(a) => cmd_solve_qp(a),
        Command::CheckCase(a) => cmd_check_case(a),
        Command::DumpQp(a) => cmd_dump_qp(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
