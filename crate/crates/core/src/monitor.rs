//! Energy-function evaluation and post-hoc audits of simulation runs:
//! Lyapunov decrease, level-set membership, frequency-safety compliance,
//! filter/sign invariants, and control-cost accounting.
//!
//! Everything here is pure post-processing over immutable trajectories.

use crate::dynamics::{SystemState, Trajectory};
use crate::netmodel::PowerNetwork;
use nalgebra::DVector;
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("audit failure: {detail}")]
    AuditFailure { detail: String },
}

/// Per-edge potential `a(λ) = cos λ∞ − cos λ − λ sin λ∞ + λ∞ sin λ∞`,
/// the Bregman divergence of `−cos` at `λ∞` — nonnegative whenever both
/// angles lie in `[−π/2, π/2]`.
pub fn edge_potential(lambda: f64, lambda_inf: f64) -> f64 {
    lambda_inf.cos() - lambda.cos() - lambda * lambda_inf.sin() + lambda_inf * lambda_inf.sin()
}

fn kinetic(net: &PowerNetwork, omega: &[f64]) -> f64 {
    let m = net.inertia();
    0.5 * omega
        .iter()
        .enumerate()
        .map(|(i, w)| m[i] * w * w)
        .sum::<f64>()
}

fn potential(net: &PowerNetwork, lambda_eq: &DVector<f64>, lambda: &[f64]) -> f64 {
    let b = net.susceptance();
    lambda
        .iter()
        .enumerate()
        .map(|(j, &l)| b[j] * edge_potential(l, lambda_eq[j]))
        .sum()
}

/// Open-loop energy `V(x) = ½ Σ_{M_i>0} M_i ω_i² + Σ_j [Y_b]_jj a(λ_j)`.
pub fn energy_v(net: &PowerNetwork, lambda_eq: &DVector<f64>, state: &SystemState) -> f64 {
    kinetic(net, state.omega.as_slice()) + potential(net, lambda_eq, state.lambda.as_slice())
}

/// Closed-loop energy `V̄(x) = V(x) + ½ Σ_{i∈I_u} α²_BL,i`.
///
/// The actuation quadratic is unweighted: along the low-pass dynamics
/// `α̇_BL = −α_BL/τ − ω + û` the cross terms `ω_i α_BL,i` from the kinetic
/// part cancel exactly only with unit weights, which is what makes the
/// dissipation bound checked by [`lyapunov_decrease_audit`] hold.
pub fn energy_vbar(net: &PowerNetwork, lambda_eq: &DVector<f64>, state: &SystemState) -> f64 {
    let filter: f64 = net
        .controlled()
        .iter()
        .map(|&i| state.alpha_bl[i] * state.alpha_bl[i])
        .sum();
    energy_v(net, lambda_eq, state) + 0.5 * filter
}

/// Boundary constant `c = min over the faces |λ_k| = π/2 of V̄(λ̃, 0, 0)`.
///
/// The minimisation is separable: on the face `λ_k = ±π/2` every free
/// coordinate minimises its own term at `λ_j = λ∞_j` (where `a` vanishes),
/// so `c = min_{k,±} [Y_b]_kk a(±π/2)`.
pub fn level_set_constant(net: &PowerNetwork, lambda_eq: &DVector<f64>) -> f64 {
    let b = net.susceptance();
    (0..net.n_edges())
        .flat_map(|k| {
            [
                b[k] * edge_potential(FRAC_PI_2, lambda_eq[k]),
                b[k] * edge_potential(-FRAC_PI_2, lambda_eq[k]),
            ]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Snapshot of the energy state of one system state.
#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    pub v: f64,
    pub v_bar: f64,
    /// Boundary constant of the level-set family.
    pub c: f64,
    /// Smallest ρ with the state inside the level set `T_ρ`; infinite when
    /// some angle leaves the closed box `|λ_j| ≤ π/2`.
    pub rho_hat: f64,
    pub in_level_set: bool,
}

pub fn energy_report(
    net: &PowerNetwork,
    lambda_eq: &DVector<f64>,
    state: &SystemState,
) -> EnergyReport {
    let v = energy_v(net, lambda_eq, state);
    let v_bar = energy_vbar(net, lambda_eq, state);
    let c = level_set_constant(net, lambda_eq);
    let in_box = state.lambda.iter().all(|l| l.abs() <= FRAC_PI_2);
    let rho_hat = if in_box { v_bar / c } else { f64::INFINITY };
    EnergyReport {
        v,
        v_bar,
        c,
        rho_hat,
        in_level_set: rho_hat <= 1.0,
    }
}

/// Result of [`lyapunov_decrease_audit`].
#[derive(Debug, Clone)]
pub struct LyapunovReport {
    pub steps_checked: usize,
    pub v_bar_initial: f64,
    pub v_bar_final: f64,
    /// Largest per-step increase `ΔV̄` observed (≤ tolerance when passing).
    pub max_delta: f64,
    /// Largest gap `ΔV̄ − ∫bound dt` against the dissipation bound.
    pub max_bound_gap: f64,
    pub rho_initial: f64,
    pub rho_max: f64,
    /// Whether every angle stayed inside the closed box `|λ| ≤ π/2`.
    pub lambda_in_box: bool,
}

/// Checks that `V̄` is non-increasing along a constant-injection closed-loop
/// run, and that the dissipation bound
/// `dV̄/dt ≤ −ωᵀEω − Σ_{i∈I_u}(1/τ_i − ε_i)α²_BL,i`
/// holds step-wise under trapezoidal quadrature.
///
/// Tolerances scale with the step and the energy level to absorb RK4
/// truncation: monotonicity allows `1e−8·dt·(1+|V̄|)` per step, the
/// dissipation bound `1e−6·dt·(1+|V̄|)`.
pub fn lyapunov_decrease_audit(
    net: &PowerNetwork,
    traj: &Trajectory,
    epsilon: &[f64],
    tau: &[f64],
) -> Result<LyapunovReport, MonitorError> {
    if traj.steps.is_empty() {
        return Err(MonitorError::AuditFailure {
            detail: "empty trajectory".into(),
        });
    }
    let lambda_eq = traj
        .lambda_eq
        .as_ref()
        .ok_or_else(|| MonitorError::AuditFailure {
            detail: "trajectory lacks an equilibrium; energy audit undefined".into(),
        })?;
    let steps = &traj.steps;
    let c = level_set_constant(net, lambda_eq);
    let damping = net.damping();

    // Dissipation-bound integrand at one row.
    let bound_at = |k: usize| -> f64 {
        let omega = steps.omega_row(k);
        let alpha_bl = steps.alpha_bl_row(k);
        let mut b = -omega
            .iter()
            .enumerate()
            .map(|(i, w)| damping[i] * w * w)
            .sum::<f64>();
        for (slot, &i) in steps.controlled.iter().enumerate() {
            b -= (1.0 / tau[i] - epsilon[i]) * alpha_bl[slot] * alpha_bl[slot];
        }
        b
    };
    let vbar_at = |k: usize| -> f64 {
        let filter: f64 = steps.alpha_bl_row(k).iter().map(|a| a * a).sum();
        kinetic(net, steps.omega_row(k)) + potential(net, lambda_eq, steps.lambda_row(k))
            + 0.5 * filter
    };

    let mut report = LyapunovReport {
        steps_checked: 0,
        v_bar_initial: vbar_at(0),
        v_bar_final: vbar_at(steps.len() - 1),
        max_delta: f64::NEG_INFINITY,
        max_bound_gap: f64::NEG_INFINITY,
        rho_initial: vbar_at(0) / c,
        rho_max: f64::NEG_INFINITY,
        lambda_in_box: true,
    };
    let mut violations: Vec<String> = Vec::new();

    let mut prev_v = report.v_bar_initial;
    let mut prev_b = bound_at(0);
    for k in 0..steps.len() {
        report.rho_max = report.rho_max.max(vbar_at(k) / c);
        if steps.lambda_row(k).iter().any(|l| l.abs() > FRAC_PI_2) {
            report.lambda_in_box = false;
        }
        if k == 0 {
            continue;
        }
        let dt = steps.t[k] - steps.t[k - 1];
        let v = vbar_at(k);
        let b = bound_at(k);
        let delta = v - prev_v;
        let bound_gap = delta - 0.5 * dt * (prev_b + b);
        report.max_delta = report.max_delta.max(delta);
        report.max_bound_gap = report.max_bound_gap.max(bound_gap);
        report.steps_checked += 1;

        let scale = dt * (1.0 + prev_v.abs());
        if delta > 1e-8 * scale && violations.len() < 5 {
            violations.push(format!(
                "t = {:.4}: ΔV̄ = {delta:.3e} exceeds monotonicity tolerance {:.3e}",
                steps.t[k],
                1e-8 * scale
            ));
        }
        if bound_gap > 1e-6 * scale && violations.len() < 5 {
            violations.push(format!(
                "t = {:.4}: ΔV̄ = {delta:.3e} exceeds dissipation bound by {bound_gap:.3e}",
                steps.t[k]
            ));
        }
        prev_v = v;
        prev_b = b;
    }
    if violations.is_empty() {
        Ok(report)
    } else {
        Err(MonitorError::AuditFailure {
            detail: violations.join("; "),
        })
    }
}

/// Per-bus outcome of [`safety_audit`].
#[derive(Debug, Clone)]
pub struct SafetyBusReport {
    pub bus: usize,
    /// Whether the frequency was inside `[ω̲, ω̄]` at the first audited row.
    pub started_safe: bool,
    /// Worst excursion above `ω̄` (0 when never exceeded), in rad/s.
    pub overshoot_upper: f64,
    /// Worst excursion below `ω̲` (0 when never exceeded), in rad/s.
    pub overshoot_lower: f64,
    /// First time after which the frequency stays inside the band.
    pub entry_time: Option<f64>,
    /// For unsafe starts: whether the distance to the band was
    /// non-increasing (tolerance 1e−9) until entry.
    pub monotone_approach: bool,
}

#[derive(Debug, Clone)]
pub struct SafetyReport {
    pub per_bus: Vec<SafetyBusReport>,
}

impl SafetyReport {
    /// Worst band excursion over all audited buses, in rad/s.
    pub fn max_overshoot(&self) -> f64 {
        self.per_bus
            .iter()
            .map(|b| b.overshoot_upper.max(b.overshoot_lower))
            .fold(0.0, f64::max)
    }

    pub fn all_entered(&self) -> bool {
        self.per_bus.iter().all(|b| b.entry_time.is_some())
    }

    pub fn all_monotone(&self) -> bool {
        self.per_bus.iter().all(|b| b.monotone_approach)
    }
}

/// Frequency-safety compliance of the buses in the safety set, considering
/// only rows with `t ≥ t_from` (useful when the controller is enabled late).
pub fn safety_audit(
    net: &PowerNetwork,
    traj: &Trajectory,
    omega_min: &[f64],
    omega_max: &[f64],
    t_from: f64,
) -> SafetyReport {
    const TOL: f64 = 1e-9;
    let steps = &traj.steps;
    let rows: Vec<usize> = (0..steps.len())
        .filter(|&k| steps.t[k] + TOL >= t_from)
        .collect();
    let mut per_bus = Vec::new();
    for &bus in net.safety() {
        let dist = |k: usize| -> f64 {
            let w = steps.omega_row(k)[bus];
            (w - omega_max[bus]).max(omega_min[bus] - w).max(0.0)
        };
        let mut overshoot_upper = 0.0f64;
        let mut overshoot_lower = 0.0f64;
        for &k in &rows {
            let w = steps.omega_row(k)[bus];
            overshoot_upper = overshoot_upper.max(w - omega_max[bus]);
            overshoot_lower = overshoot_lower.max(omega_min[bus] - w);
        }
        // First row index such that the band holds from there on.
        let mut entry_idx = None;
        for (pos, &k) in rows.iter().enumerate().rev() {
            if dist(k) > TOL {
                break;
            }
            entry_idx = Some(pos);
        }
        let monotone_approach = match entry_idx {
            Some(0) => true, // safe from the start of the window
            maybe_entry => {
                let upto = maybe_entry.unwrap_or(rows.len());
                (1..upto).all(|pos| dist(rows[pos]) <= dist(rows[pos - 1]) + TOL)
            }
        };
        per_bus.push(SafetyBusReport {
            bus,
            started_safe: rows.first().is_some_and(|&k| dist(k) == 0.0),
            overshoot_upper: overshoot_upper.max(0.0),
            overshoot_lower: overshoot_lower.max(0.0),
            entry_time: entry_idx.map(|pos| steps.t[rows[pos]]),
            monotone_approach,
        });
    }
    SafetyReport { per_bus }
}

/// Result of [`invariant_audit`].
#[derive(Debug, Clone, Copy)]
pub struct InvariantReport {
    pub rows_checked: usize,
    /// Largest value of `α_BL û − ε α²_BL` observed (≤ 1e−12 when passing).
    pub max_filter_product: f64,
    /// Largest value of `ω · α_TL` observed (≤ 0 when passing).
    pub max_sign_product: f64,
}

/// Checks the two pointwise control invariants at every logged row: the
/// filter dissipation product `α_BL,i û_i ≤ ε_i α²_BL,i + 1e−12` and the
/// top-layer sign property `ω_i α_TL,i ≤ 0`.
pub fn invariant_audit(traj: &Trajectory, epsilon: &[f64]) -> Result<InvariantReport, MonitorError> {
    let steps = &traj.steps;
    let mut report = InvariantReport {
        rows_checked: steps.len(),
        max_filter_product: f64::NEG_INFINITY,
        max_sign_product: f64::NEG_INFINITY,
    };
    for k in 0..steps.len() {
        let alpha_bl = steps.alpha_bl_row(k);
        let u_hat = steps.u_hat_row(k);
        for (slot, &i) in steps.controlled.iter().enumerate() {
            let margin = alpha_bl[slot] * u_hat[slot] - epsilon[i] * alpha_bl[slot] * alpha_bl[slot];
            report.max_filter_product = report.max_filter_product.max(margin);
            if margin > 1e-12 {
                return Err(MonitorError::AuditFailure {
                    detail: format!(
                        "filter invariant violated at t = {:.4}, bus {i}: α_BL û − ε α² = {margin:.3e}",
                        steps.t[k]
                    ),
                });
            }
        }
        let omega = steps.omega_row(k);
        let alpha_tl = steps.alpha_tl_row(k);
        for (slot, &i) in steps.safety.iter().enumerate() {
            let product = omega[i] * alpha_tl[slot];
            report.max_sign_product = report.max_sign_product.max(product);
            if product > 0.0 {
                return Err(MonitorError::AuditFailure {
                    detail: format!(
                        "sign invariant violated at t = {:.4}, bus {i}: ω·α_TL = {product:.3e}",
                        steps.t[k]
                    ),
                });
            }
        }
    }
    Ok(report)
}

/// Trapezoidal control cost `∫ Σ_{i∈I_u} c_i α_i²(t) dt` over the run,
/// with `α_i` the total (both-layer) response at bus `i`.
pub fn control_cost(traj: &Trajectory, c: &[f64]) -> f64 {
    let steps = &traj.steps;
    let integrand = |k: usize| -> f64 {
        steps
            .alpha_row(k)
            .iter()
            .zip(steps.controlled.iter())
            .map(|(a, &i)| c[i] * a * a)
            .sum()
    };
    let mut cost = 0.0;
    let mut prev = integrand(0);
    for k in 1..steps.len() {
        let cur = integrand(k);
        cost += 0.5 * (steps.t[k] - steps.t[k - 1]) * (prev + cur);
        prev = cur;
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{BilayeredLaw, ControlMode, ControllerConfig, SolverBackend};
    use crate::dynamics::{
        simulate, ControlEval, ControlLaw, DynamicsError, InitialCondition, SimParams, StepSeries,
    };
    use crate::netmodel::DisturbanceProfile;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn four_bus() -> PowerNetwork {
        PowerNetwork::new(
            vec![(0, 1), (1, 2), (2, 3), (3, 0)],
            vec![20.0; 4],
            vec![1.0, 0.8, 0.0, 0.6],
            vec![1.0, 1.0, 1.5, 1.0],
            vec![7.0, 4.0, -15.0, 4.0],
            vec![0, 1, 3],
            vec![0, 1],
        )
        .unwrap()
    }

    fn two_bus(b: f64, p: f64) -> PowerNetwork {
        PowerNetwork::new(
            vec![(0, 1)],
            vec![b],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![p, -p],
            vec![0],
            vec![0],
        )
        .unwrap()
    }

    #[test]
    fn potential_vanishes_at_equilibrium_and_is_nonnegative_in_box() {
        assert_eq!(edge_potential(0.3, 0.3), 0.0);
        let grid: Vec<f64> = (0..=60).map(|i| -FRAC_PI_2 + i as f64 * FRAC_PI_2 / 30.0).collect();
        for &linf in &grid {
            for &l in &grid {
                assert!(
                    edge_potential(l, linf) >= -1e-12,
                    "a({l}, {linf}) negative"
                );
            }
        }
    }

    #[test]
    fn energy_examples() {
        let net = four_bus();
        let lambda_eq = net.compute_equilibrium().unwrap();
        let mut state = SystemState::zeros(&net);
        state.lambda = lambda_eq.clone();
        assert_relative_eq!(energy_v(&net, &lambda_eq, &state), 0.0);
        assert_relative_eq!(energy_vbar(&net, &lambda_eq, &state), 0.0);
        // Pure kinetic state: ½ M_i at an inertial bus.
        state.omega[1] = 1.0;
        assert_relative_eq!(energy_v(&net, &lambda_eq, &state), 0.5 * 0.8);
        // The actuation quadratic adds ½ α² per controlled bus, unweighted.
        state.omega[1] = 0.0;
        state.alpha_bl[3] = 1.0;
        assert_relative_eq!(energy_vbar(&net, &lambda_eq, &state), 0.5);
        // Additivity.
        state.omega[1] = 2.0;
        assert_relative_eq!(
            energy_vbar(&net, &lambda_eq, &state),
            energy_v(&net, &lambda_eq, &state) + 0.5
        );
    }

    #[test]
    fn level_set_constant_hand_value() {
        // 2-bus, b = 1, p = 0 → λ∞ = 0 and c = a(π/2) = cos 0 − cos(π/2) = 1.
        let net = two_bus(1.0, 0.0);
        let lambda_eq = net.compute_equilibrium().unwrap();
        assert!(lambda_eq.amax() < 1e-12);
        assert_relative_eq!(level_set_constant(&net, &lambda_eq), 1.0, epsilon = 1e-12);
        // Loaded line: c > 0 strictly inside the box.
        let net = two_bus(2.0, 1.0);
        let lambda_eq = net.compute_equilibrium().unwrap();
        assert!(lambda_eq[0].abs() < FRAC_PI_2);
        assert!(level_set_constant(&net, &lambda_eq) > 0.0);
    }

    #[test]
    fn separable_constant_matches_grid_minimisation() {
        let net = four_bus();
        let lambda_eq = net.compute_equilibrium().unwrap();
        let c = level_set_constant(&net, &lambda_eq);
        // Brute force: on each face λ_k = ±π/2, scan the free coordinates
        // over a grid that includes the per-edge minimiser λ∞_j.
        let b = net.susceptance();
        let m = net.n_edges();
        let mut brute = f64::INFINITY;
        for k in 0..m {
            for sign in [1.0, -1.0] {
                let mut total = b[k] * edge_potential(sign * FRAC_PI_2, lambda_eq[k]);
                for j in 0..m {
                    if j == k {
                        continue;
                    }
                    let mut best = f64::INFINITY;
                    for g in 0..=40 {
                        let l = -FRAC_PI_2 + g as f64 * FRAC_PI_2 / 20.0;
                        best = best.min(b[j] * edge_potential(l, lambda_eq[j]));
                    }
                    best = best.min(b[j] * edge_potential(lambda_eq[j], lambda_eq[j]));
                    total += best;
                }
                brute = brute.min(total);
            }
        }
        assert_relative_eq!(c, brute, epsilon = 1e-12);
    }

    #[test]
    fn energy_report_flags_level_set_membership() {
        let net = four_bus();
        let lambda_eq = net.compute_equilibrium().unwrap();
        let mut state = SystemState::zeros(&net);
        state.lambda = lambda_eq.clone();
        state.omega[0] = 0.2;
        let rep = energy_report(&net, &lambda_eq, &state);
        assert!(rep.v > 0.0 && rep.v_bar >= rep.v && rep.c > 0.0);
        assert!(rep.rho_hat > 0.0 && rep.rho_hat < 1.0);
        assert!(rep.in_level_set);
        // An angle outside the closed box puts the state outside every T_ρ.
        state.lambda[0] = FRAC_PI_2 + 0.1;
        let rep = energy_report(&net, &lambda_eq, &state);
        assert!(rep.rho_hat.is_infinite());
        assert!(!rep.in_level_set);
    }

    fn run_closed_loop(omega0: DVector<f64>, t_end: f64) -> (PowerNetwork, ControllerConfig, Trajectory) {
        let net = four_bus();
        let cfg = ControllerConfig::table_defaults(&net);
        let mut law = BilayeredLaw::new(
            &net,
            cfg.clone(),
            ControlMode::Bilayered,
            SolverBackend::Reference,
            DisturbanceProfile::none(),
        )
        .unwrap();
        let mut params = SimParams::new(t_end, 1e-3);
        params.initial = InitialCondition::EquilibriumWithOmega(omega0);
        let traj = simulate(&net, &DisturbanceProfile::none(), &params, &mut law).unwrap();
        (net, cfg, traj)
    }

    #[test]
    fn lyapunov_audit_passes_on_closed_loop_run() {
        let omega0 = DVector::from_vec(vec![0.3, -0.2, 0.0, 0.1]);
        let (net, cfg, traj) = run_closed_loop(omega0, 5.0);
        let rep = lyapunov_decrease_audit(&net, &traj, &cfg.epsilon, &cfg.tau).unwrap();
        assert!(rep.steps_checked >= 5000);
        assert!(rep.v_bar_final < rep.v_bar_initial);
        assert!(rep.rho_initial < 1.0);
        assert!(rep.rho_max <= rep.rho_initial + 1e-6);
        assert!(rep.lambda_in_box);
    }

    #[test]
    fn equilibrium_run_has_zero_energy_drift() {
        let (net, cfg, traj) = run_closed_loop(DVector::zeros(4), 1.0);
        let rep = lyapunov_decrease_audit(&net, &traj, &cfg.epsilon, &cfg.tau).unwrap();
        assert!(rep.v_bar_initial.abs() < 1e-15);
        assert!(rep.max_delta.abs() < 1e-14);
    }

    /// A control law that bypasses the stability filter: it feeds a constant
    /// û into the low-pass filter regardless of `α_BL`.
    struct FilterBypassLaw {
        tau: f64,
        u: f64,
    }

    impl ControlLaw for FilterBypassLaw {
        fn pre_step(
            &mut self,
            _k: usize,
            _t: f64,
            _state: &SystemState,
            _net: &PowerNetwork,
        ) -> Result<(), DynamicsError> {
            Ok(())
        }

        fn evaluate(
            &self,
            _t: f64,
            state: &SystemState,
            _p_eff: &DVector<f64>,
            net: &PowerNetwork,
        ) -> ControlEval {
            let mut ev = ControlEval::inactive(net.n_buses());
            for &i in net.controlled() {
                ev.u_mpc[i] = self.u;
                ev.u_hat[i] = self.u; // no saturation: the filter is bypassed
                ev.alpha_bl_dot[i] =
                    -state.alpha_bl[i] / self.tau - state.omega[i] + self.u;
                ev.alpha[i] = state.alpha_bl[i];
            }
            ev
        }

        fn bottom_layer_effective(&self, _t: f64) -> bool {
            true
        }
    }

    #[test]
    fn filter_bypass_run_fails_the_lyapunov_audit() {
        let net = four_bus();
        let mut law = FilterBypassLaw { tau: 0.5, u: 2.0 };
        let params = SimParams::new(2.0, 1e-3);
        let traj = simulate(&net, &DisturbanceProfile::none(), &params, &mut law).unwrap();
        let eps = vec![1.9; 4];
        let tau = vec![0.5; 4];
        let err = lyapunov_decrease_audit(&net, &traj, &eps, &tau).unwrap_err();
        assert!(err.to_string().contains("exceeds"));
        // The same run also violates the filter-product invariant.
        assert!(invariant_audit(&traj, &eps).is_err());
    }

    #[test]
    fn invariant_audit_passes_on_closed_loop_run() {
        let omega0 = DVector::from_vec(vec![0.3, -0.2, 0.0, 0.1]);
        let (_net, cfg, traj) = run_closed_loop(omega0, 3.0);
        let rep = invariant_audit(&traj, &cfg.epsilon).unwrap();
        assert_eq!(rep.rows_checked, traj.steps.len());
        assert!(rep.max_filter_product <= 1e-12);
        assert!(rep.max_sign_product <= 0.0);
    }

    #[test]
    fn safety_audit_reports_overshoot_and_entry() {
        let net = four_bus();
        let cfg = ControllerConfig::table_defaults(&net);
        // Start well outside the band with the controller active.
        let omega0 = DVector::from_vec(vec![1.8, 0.0, 0.0, 0.0]);
        let mut law = BilayeredLaw::new(
            &net,
            cfg.clone(),
            ControlMode::Bilayered,
            SolverBackend::Reference,
            DisturbanceProfile::none(),
        )
        .unwrap();
        let mut params = SimParams::new(8.0, 1e-3);
        params.initial = InitialCondition::EquilibriumWithOmega(omega0);
        let traj = simulate(&net, &DisturbanceProfile::none(), &params, &mut law).unwrap();

        let rep = safety_audit(&net, &traj, &cfg.omega_min, &cfg.omega_max, 0.0);
        let bus0 = rep.per_bus.iter().find(|b| b.bus == 0).unwrap();
        assert!(!bus0.started_safe);
        assert!(bus0.overshoot_upper > 0.5, "initial excursion visible");
        assert!(bus0.monotone_approach, "approach must be monotone");
        let entry = bus0.entry_time.expect("band entered in finite time");
        assert!(entry > 0.0 && entry < 8.0);
        let bus1 = rep.per_bus.iter().find(|b| b.bus == 1).unwrap();
        assert!(bus1.started_safe);
        assert!(rep.all_entered());
        assert!(rep.all_monotone());
    }

    #[test]
    fn control_cost_examples() {
        let net = four_bus();
        // Hand-built two-row series: constant α = 1 at bus 0 over 10 s.
        let mut steps = StepSeries {
            n_buses: 4,
            n_edges: 4,
            controlled: net.controlled().to_vec(),
            safety: net.safety().to_vec(),
            t: vec![0.0, 10.0],
            lambda: vec![0.0; 8],
            omega: vec![0.0; 8],
            alpha_bl: vec![0.0; 6],
            alpha: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            alpha_tl: vec![0.0; 4],
            u_mpc: vec![0.0; 6],
            u_hat: vec![0.0; 6],
        };
        let traj = Trajectory {
            dt: 10.0,
            t_end: 10.0,
            lambda_eq: None,
            steps: steps.clone(),
        };
        let c = vec![4.0, 1.0, 1.0, 1.0];
        assert_relative_eq!(control_cost(&traj, &c), 40.0);
        // Zero response costs nothing.
        steps.alpha = vec![0.0; 6];
        let traj = Trajectory {
            dt: 10.0,
            t_end: 10.0,
            lambda_eq: None,
            steps,
        };
        assert_relative_eq!(control_cost(&traj, &c), 0.0);
    }
}
