//! CSV emission with fixed column order and fixed float formatting
//! (`{:.16e}`), so identical runs produce byte-identical files.

use std::io::{self, Write};
use swingsafe_core::dynamics::Trajectory;
use swingsafe_core::monitor;
use swingsafe_core::netmodel::PowerNetwork;
use swingsafe_core::solvers::ConvergenceTrace;
use swingsafe_core::units::rad_s_to_hz;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the trajectory table.
///
/// Columns: `t`, per-safety-bus frequency in Hz, per-controlled-bus total
/// response `α`, per-safety-bus `α_TL`, per-controlled-bus `α_BL`, `u_MPC`,
/// `û`, the closed-loop energy `V̄` (empty when the case has no
/// equilibrium), and a 0/1 `safe` flag (all safety buses inside their band).
/// Bus labels are 1-based, matching the case-file convention.
/// `every` keeps one row per `every` integrator steps (the last row is
/// always written).
pub fn write_trajectory(
    out: &mut dyn Write,
    net: &PowerNetwork,
    traj: &Trajectory,
    omega_min: &[f64],
    omega_max: &[f64],
    every: usize,
) -> io::Result<()> {
    let steps = &traj.steps;
    let mut header = vec!["t".to_string()];
    for &i in &steps.safety {
        header.push(format!("omega_hz_bus{}", i + 1));
    }
    for &i in &steps.controlled {
        header.push(format!("alpha_bus{}", i + 1));
    }
    for &i in &steps.safety {
        header.push(format!("alpha_tl_bus{}", i + 1));
    }
    for &i in &steps.controlled {
        header.push(format!("alpha_bl_bus{}", i + 1));
    }
    for &i in &steps.controlled {
        header.push(format!("u_mpc_bus{}", i + 1));
    }
    for &i in &steps.controlled {
        header.push(format!("u_hat_bus{}", i + 1));
    }
    header.push("v_bar".into());
    header.push("safe".into());
    writeln!(out, "{}", header.join(","))?;

    let every = every.max(1);
    let last = steps.len() - 1;
    for k in 0..steps.len() {
        if k % every != 0 && k != last {
            continue;
        }
        let mut row = vec![fmt(steps.t[k])];
        let omega = steps.omega_row(k);
        for &i in &steps.safety {
            row.push(fmt(rad_s_to_hz(omega[i])));
        }
        for v in steps.alpha_row(k) {
            row.push(fmt(*v));
        }
        for v in steps.alpha_tl_row(k) {
            row.push(fmt(*v));
        }
        for v in steps.alpha_bl_row(k) {
            row.push(fmt(*v));
        }
        for v in steps.u_mpc_row(k) {
            row.push(fmt(*v));
        }
        for v in steps.u_hat_row(k) {
            row.push(fmt(*v));
        }
        match &traj.lambda_eq {
            Some(leq) => {
                let state = steps.state_at(k);
                row.push(fmt(monitor::energy_vbar(net, leq, &state)));
            }
            None => row.push(String::new()),
        }
        let safe = steps
            .safety
            .iter()
            .all(|&i| omega[i] >= omega_min[i] && omega[i] <= omega_max[i]);
        row.push(if safe { "1".into() } else { "0".into() });
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the residual trace of a saddle-point solve.
pub fn write_trace(out: &mut dyn Write, trace: &ConvergenceTrace) -> io::Result<()> {
    writeln!(
        out,
        "round,dz_norm,stationarity,primal_ineq,primal_eq,complementarity,dist_to_oracle"
    )?;
    for row in &trace.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.round,
            fmt(row.dz_norm),
            fmt(row.stationarity),
            fmt(row.primal_ineq),
            fmt(row.primal_eq),
            fmt(row.complementarity),
            row.dist_to_oracle.map(fmt).unwrap_or_default()
        )?;
    }
    Ok(())
}
