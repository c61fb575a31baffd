//! Audit execution over finished runs, rendered as human-readable text and
//! a machine-readable JSON summary.

use serde_json::{json, Value};
use swingsafe_core::dynamics::{StepSeries, SystemState, Trajectory};
use swingsafe_core::monitor::{
    control_cost, invariant_audit, level_set_constant, lyapunov_decrease_audit, safety_audit,
};
use swingsafe_core::netmodel::PowerNetwork;
use swingsafe_core::prediction::{
    assemble_mpc_qp, discretize_backward_euler, linearize, locality_audit,
};
use swingsafe_core::solvers::{AgentNetwork, Consumer};
use swingsafe_core::units::{hz_to_rad_s, rad_s_to_hz};
use nalgebra::DVector;

use crate::scenario::Scenario;

/// Band-compliance tolerance for buses that start inside the band: one
/// thousandth of a hertz.
pub const OVERSHOOT_TOL_HZ: f64 = 1e-3;

/// Which audits to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditSelection {
    pub safety: bool,
    pub lyapunov: bool,
    pub invariants: bool,
    pub locality: bool,
}

impl AuditSelection {
    pub fn all() -> Self {
        AuditSelection {
            safety: true,
            lyapunov: true,
            invariants: true,
            locality: true,
        }
    }

    pub fn none() -> Self {
        AuditSelection {
            safety: false,
            lyapunov: false,
            invariants: false,
            locality: false,
        }
    }

    /// Parses a comma-separated selection (`safety,lyapunov,...` or `all`).
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut sel = AuditSelection::none();
        for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "all" => sel = AuditSelection::all(),
                "safety" => sel.safety = true,
                "lyapunov" => sel.lyapunov = true,
                "invariants" => sel.invariants = true,
                "locality" => sel.locality = true,
                other => {
                    return Err(format!(
                        "unknown audit `{other}` (expected safety, lyapunov, invariants, locality, or all)"
                    ))
                }
            }
        }
        Ok(sel)
    }
}

/// One audit's outcome.
pub struct Section {
    pub name: &'static str,
    pub pass: bool,
    pub lines: Vec<String>,
    pub metrics: Value,
}

pub struct AuditReport {
    pub sections: Vec<Section>,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.sections.iter().all(|s| s.pass)
    }

    pub fn render_text(&self, title: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("audit report: {title}\n"));
        for s in &self.sections {
            out.push_str(&format!(
                "[{}] {}\n",
                if s.pass { "PASS" } else { "FAIL" },
                s.name
            ));
            for line in &s.lines {
                out.push_str(&format!("  {line}\n"));
            }
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.pass() { "PASS" } else { "FAIL" }
        ));
        out
    }

    pub fn render_json(&self, scenario_meta: Value) -> Value {
        json!({
            "scenario": scenario_meta,
            "pass": self.pass(),
            "sections": self.sections.iter().map(|s| json!({
                "name": s.name,
                "pass": s.pass,
                "detail": s.lines,
                "metrics": s.metrics,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Copies the rows of `traj` with `t ≥ t_from` into a standalone trajectory.
pub fn slice_from(traj: &Trajectory, t_from: f64) -> Trajectory {
    let s = &traj.steps;
    let keep: Vec<usize> = (0..s.len()).filter(|&k| s.t[k] + 1e-9 >= t_from).collect();
    let gather = |stride: usize, data: &[f64]| -> Vec<f64> {
        keep.iter()
            .flat_map(|&k| data[k * stride..(k + 1) * stride].to_vec())
            .collect()
    };
    let steps = StepSeries {
        n_buses: s.n_buses,
        n_edges: s.n_edges,
        controlled: s.controlled.clone(),
        safety: s.safety.clone(),
        t: keep.iter().map(|&k| s.t[k]).collect(),
        lambda: gather(s.n_edges, &s.lambda),
        omega: gather(s.n_buses, &s.omega),
        alpha_bl: gather(s.controlled.len(), &s.alpha_bl),
        alpha: gather(s.controlled.len(), &s.alpha),
        alpha_tl: gather(s.safety.len(), &s.alpha_tl),
        u_mpc: gather(s.controlled.len(), &s.u_mpc),
        u_hat: gather(s.controlled.len(), &s.u_hat),
    };
    Trajectory {
        dt: traj.dt,
        t_end: traj.t_end,
        lambda_eq: traj.lambda_eq.clone(),
        steps,
    }
}

/// Last time at which the disturbance is active (0 for a constant profile).
fn disturbance_end(scenario: &Scenario) -> f64 {
    scenario
        .profile
        .segments
        .iter()
        .map(|s| s.t_end)
        .fold(0.0, f64::max)
}

fn safety_section(scenario: &Scenario, traj: &Trajectory) -> Section {
    let rep = safety_audit(
        &scenario.net,
        traj,
        &scenario.cfg.omega_min,
        &scenario.cfg.omega_max,
        scenario.enable_at,
    );
    let tol = hz_to_rad_s(OVERSHOOT_TOL_HZ);
    let mut pass = true;
    let mut lines = Vec::new();
    for b in &rep.per_bus {
        let worst = b.overshoot_upper.max(b.overshoot_lower);
        let ok = if b.started_safe {
            worst <= tol
        } else {
            b.monotone_approach && b.entry_time.is_some()
        };
        pass &= ok;
        let entry = b
            .entry_time
            .map(|t| format!("{t:.3} s"))
            .unwrap_or_else(|| "never".into());
        lines.push(format!(
            "bus {}: start {}, worst excursion {:.3e} Hz, band entry {}, monotone approach {}",
            b.bus + 1,
            if b.started_safe { "safe" } else { "unsafe" },
            rad_s_to_hz(worst),
            entry,
            b.monotone_approach,
        ));
    }
    let metrics = json!({
        "overshoot_hz": rad_s_to_hz(rep.max_overshoot()),
        "all_entered": rep.all_entered(),
        "all_monotone": rep.all_monotone(),
        "audited_from": scenario.enable_at,
    });
    Section {
        name: "safety",
        pass,
        lines,
        metrics,
    }
}

fn lyapunov_section(scenario: &Scenario, traj: &Trajectory) -> Section {
    let t_from = disturbance_end(scenario).max(scenario.enable_at);
    let window = slice_from(traj, t_from);
    if window.steps.len() < 2 {
        return Section {
            name: "lyapunov",
            pass: false,
            lines: vec![format!(
                "no constant-injection window after t = {t_from:.1} s; extend t_end"
            )],
            metrics: json!({"window_from": t_from}),
        };
    }
    match lyapunov_decrease_audit(&scenario.net, &window, &scenario.cfg.epsilon, &scenario.cfg.tau)
    {
        Ok(rep) => {
            let lines = vec![
                format!(
                    "V̄ {:.6e} → {:.6e} over {} steps (window from t = {t_from:.1} s)",
                    rep.v_bar_initial, rep.v_bar_final, rep.steps_checked
                ),
                format!(
                    "max ΔV̄ per step {:.3e}; max dissipation-bound gap {:.3e}",
                    rep.max_delta, rep.max_bound_gap
                ),
                format!(
                    "level sets: ρ̂ {:.3e} → max {:.3e}; angles in box: {}",
                    rep.rho_initial, rep.rho_max, rep.lambda_in_box
                ),
            ];
            let metrics = json!({
                "window_from": t_from,
                "v_bar_initial": rep.v_bar_initial,
                "v_bar_final": rep.v_bar_final,
                "max_delta": rep.max_delta,
                "max_bound_gap": rep.max_bound_gap,
                "rho_initial": rep.rho_initial,
                "rho_max": rep.rho_max,
                "lambda_in_box": rep.lambda_in_box,
            });
            Section {
                name: "lyapunov",
                pass: true,
                lines,
                metrics,
            }
        }
        Err(e) => Section {
            name: "lyapunov",
            pass: false,
            lines: vec![e.to_string()],
            metrics: json!({"window_from": t_from}),
        },
    }
}

fn invariants_section(scenario: &Scenario, traj: &Trajectory) -> Section {
    match invariant_audit(traj, &scenario.cfg.epsilon) {
        Ok(rep) => Section {
            name: "invariants",
            pass: true,
            lines: vec![format!(
                "{} rows: max α_BL·û − ε·α² = {:.3e}; max ω·α_TL = {:.3e}",
                rep.rows_checked, rep.max_filter_product, rep.max_sign_product
            )],
            metrics: json!({
                "rows": rep.rows_checked,
                "max_filter_product": rep.max_filter_product,
                "max_sign_product": rep.max_sign_product,
            }),
        },
        Err(e) => Section {
            name: "invariants",
            pass: false,
            lines: vec![e.to_string()],
            metrics: json!({}),
        },
    }
}

fn locality_section(scenario: &Scenario) -> Section {
    let build = || -> Result<(Vec<String>, Value), String> {
        let net = &scenario.net;
        let cfg = &scenario.cfg;
        let lm = linearize(net, &cfg.tau);
        let dm = discretize_backward_euler(&lm, cfg.pred_step);
        let mut x0 = SystemState::zeros(net);
        if let Ok(leq) = net.compute_equilibrium() {
            x0.lambda = leq;
        }
        let horizon = cfg.horizon_steps();
        let p = DVector::from_column_slice(net.injection());
        let forecast = vec![p; horizon.saturating_sub(1)];
        let qp = assemble_mpc_qp(&dm, net, &cfg.weights(), horizon, &x0, &forecast)
            .map_err(|e| e.to_string())?;
        let audit = locality_audit(&qp).map_err(|e| e.to_string())?;
        let agents = AgentNetwork::build(&qp).map_err(|e| e.to_string())?;
        let log = agents.message_log();
        log.check().map_err(|e| e.to_string())?;
        let primal_max = log.max_distance(Consumer::PrimalUpdate);
        let dual_max = log.max_distance(Consumer::DualUpdate);
        let lines = vec![
            format!(
                "objective couplings: {} pairs, max owner distance {} (bound 2)",
                audit.h_couplings, audit.max_h_distance
            ),
            format!("constraint rows within one hop of members: {}", audit.rows_checked),
            format!(
                "message log: {} flows, max primal read distance {} (bound 2), max dual read distance {} (bound 1)",
                log.records.len(),
                primal_max,
                dual_max
            ),
        ];
        let metrics = json!({
            "h_couplings": audit.h_couplings,
            "max_h_distance": audit.max_h_distance,
            "rows_checked": audit.rows_checked,
            "message_flows": log.records.len(),
            "max_primal_distance": primal_max,
            "max_dual_distance": dual_max,
        });
        Ok((lines, metrics))
    };
    match build() {
        Ok((lines, metrics)) => Section {
            name: "locality",
            pass: true,
            lines,
            metrics,
        },
        Err(detail) => Section {
            name: "locality",
            pass: false,
            lines: vec![detail],
            metrics: json!({}),
        },
    }
}

/// Runs the selected audits over a finished scenario.
pub fn audit_run(scenario: &Scenario, traj: &Trajectory, sel: AuditSelection) -> AuditReport {
    let mut sections = Vec::new();
    if sel.safety {
        sections.push(safety_section(scenario, traj));
    }
    if sel.lyapunov {
        sections.push(lyapunov_section(scenario, traj));
    }
    if sel.invariants {
        sections.push(invariants_section(scenario, traj));
    }
    if sel.locality {
        sections.push(locality_section(scenario));
    }
    AuditReport { sections }
}

/// Side-by-side comparison metrics of two runs of the same case.
pub struct Comparison {
    pub cost_a: f64,
    pub cost_b: f64,
    pub peak_hz_a: f64,
    pub peak_hz_b: f64,
    pub final_over_peak_a: f64,
    pub final_over_peak_b: f64,
}

fn peak_safety_frequency(net: &PowerNetwork, traj: &Trajectory) -> f64 {
    let steps = &traj.steps;
    let mut peak = 0.0f64;
    for k in 0..steps.len() {
        let omega = steps.omega_row(k);
        for &i in net.safety() {
            peak = peak.max(omega[i].abs());
        }
    }
    peak
}

fn final_over_peak(net: &PowerNetwork, traj: &Trajectory) -> f64 {
    let peak = peak_safety_frequency(net, traj);
    if peak == 0.0 {
        return 0.0;
    }
    let last = traj.steps.len() - 1;
    let omega = traj.steps.omega_row(last);
    let fin = net
        .safety()
        .iter()
        .map(|&i| omega[i].abs())
        .fold(0.0, f64::max);
    fin / peak
}

pub fn compare_runs(
    scenario_a: &Scenario,
    traj_a: &Trajectory,
    scenario_b: &Scenario,
    traj_b: &Trajectory,
) -> Comparison {
    Comparison {
        cost_a: control_cost(traj_a, &scenario_a.cfg.c),
        cost_b: control_cost(traj_b, &scenario_b.cfg.c),
        peak_hz_a: rad_s_to_hz(peak_safety_frequency(&scenario_a.net, traj_a)),
        peak_hz_b: rad_s_to_hz(peak_safety_frequency(&scenario_b.net, traj_b)),
        final_over_peak_a: final_over_peak(&scenario_a.net, traj_a),
        final_over_peak_b: final_over_peak(&scenario_b.net, traj_b),
    }
}

impl Comparison {
    pub fn render_text(&self, label_a: &str, label_b: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("comparison: {label_a} vs {label_b}\n"));
        s.push_str(&format!(
            "control cost:    {:>14.6e}  {:>14.6e}\n",
            self.cost_a, self.cost_b
        ));
        s.push_str(&format!(
            "peak |ω| (Hz):   {:>14.6e}  {:>14.6e}\n",
            self.peak_hz_a, self.peak_hz_b
        ));
        s.push_str(&format!(
            "final/peak |ω|:  {:>14.6e}  {:>14.6e}\n",
            self.final_over_peak_a, self.final_over_peak_b
        ));
        s
    }

    pub fn render_json(&self, label_a: &str, label_b: &str) -> Value {
        json!({
            "a": {"label": label_a, "cost": self.cost_a, "peak_hz": self.peak_hz_a,
                   "final_over_peak": self.final_over_peak_a},
            "b": {"label": label_b, "cost": self.cost_b, "peak_hz": self.peak_hz_b,
                   "final_over_peak": self.final_over_peak_b},
        })
    }
}

/// Printable summary of how tight the level sets are for a case.
pub fn case_energy_line(net: &PowerNetwork) -> String {
    match net.compute_equilibrium() {
        Ok(leq) => format!(
            "equilibrium found; level-set boundary constant c = {:.6e}",
            level_set_constant(net, &leq)
        ),
        Err(e) => format!("no equilibrium: {e}"),
    }
}
