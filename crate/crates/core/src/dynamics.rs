//! Nonlinear swing dynamics and the fixed-step closed-loop simulator.
//!
//! The model is a differential-algebraic system on edge angles `λ`, bus
//! frequencies `ω`, and the bottom-layer actuation state `α_BL`:
//!
//! ```text
//! λ̇ = D ω
//! M_i ω̇_i = −E_i ω_i − [Dᵀ Y_b sin(λ)]_i + p_i + α_i        (M_i > 0)
//! 0      = −E_i ω_i − [Dᵀ Y_b sin(λ)]_i + p_i + α_i        (M_i = 0)
//! ```
//!
//! Zero-inertia buses are eliminated algebraically at every integrator stage.
//! When the active control law has a frequency-dependent component at a
//! zero-inertia bus, the algebraic relation becomes implicit in `ω_i` and is
//! resolved by bracketed bisection (the relation is strictly monotone).
//!
//! The simulator advances with classical RK4 at a fixed step, invokes the
//! control law once per step boundary (where MPC sampling may occur), and
//! records the full state at every step so that audits can be evaluated
//! offline at integrator resolution.

use crate::netmodel::{DisturbanceProfile, NetworkError, PowerNetwork};
use nalgebra::DVector;
use thiserror::Error;

/// Errors raised by the dynamics layer.
#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("input outside actuation set: {detail}")]
    InputOutsideActuationSet { detail: String },
    #[error("non-finite state at t = {t:.6}")]
    NonFiniteState { t: f64 },
    #[error("failed to resolve algebraic frequency at bus {bus}, t = {t:.6}")]
    AlgebraicResolution { bus: usize, t: f64 },
    #[error("controller failure at t = {t:.6}: {detail}")]
    Controller { t: f64, detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Continuous state of the closed-loop system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    /// Edge angle differences `λ` (length = number of edges).
    pub lambda: DVector<f64>,
    /// Bus frequency deviations `ω` in rad/s (length = number of buses);
    /// entries at zero-inertia buses hold the resolved algebraic values.
    pub omega: DVector<f64>,
    /// Bottom-layer actuation state `α_BL` (length = number of buses, zero
    /// outside the controlled set).
    pub alpha_bl: DVector<f64>,
}

impl SystemState {
    pub fn zeros(net: &PowerNetwork) -> Self {
        SystemState {
            lambda: DVector::zeros(net.n_edges()),
            omega: DVector::zeros(net.n_buses()),
            alpha_bl: DVector::zeros(net.n_buses()),
        }
    }

    fn is_finite(&self) -> bool {
        self.lambda.iter().all(|v| v.is_finite())
            && self.omega.iter().all(|v| v.is_finite())
            && self.alpha_bl.iter().all(|v| v.is_finite())
    }
}

/// Total actuation vector constrained to the controlled set.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    alpha: DVector<f64>,
}

impl InputSignal {
    /// Validates that the input is supported on the controlled buses only.
    pub fn new(alpha: DVector<f64>, net: &PowerNetwork) -> Result<Self, DynamicsError> {
        if alpha.len() != net.n_buses() {
            return Err(DynamicsError::InputOutsideActuationSet {
                detail: format!("length {} != {} buses", alpha.len(), net.n_buses()),
            });
        }
        for i in 0..net.n_buses() {
            if !net.is_controlled(i) && alpha[i] != 0.0 {
                return Err(DynamicsError::InputOutsideActuationSet {
                    detail: format!("nonzero input {} at uncontrolled bus {}", alpha[i], i),
                });
            }
        }
        Ok(InputSignal { alpha })
    }

    pub fn zero(net: &PowerNetwork) -> Self {
        InputSignal {
            alpha: DVector::zeros(net.n_buses()),
        }
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
}

/// Time derivative of the differential part of the state.
#[derive(Debug, Clone)]
pub struct SwingRhs {
    /// `λ̇` (length = number of edges).
    pub dlambda: DVector<f64>,
    /// `ω̇` for inertial buses; entries at zero-inertia buses are zero.
    pub domega: DVector<f64>,
}

/// Right-hand side of the swing dynamics under a validated input and
/// effective injections `p`.  `state.omega` must already hold the resolved
/// algebraic frequencies at zero-inertia buses.
pub fn swing_rhs(
    net: &PowerNetwork,
    state: &SystemState,
    input: &InputSignal,
    p: &DVector<f64>,
) -> Result<SwingRhs, DynamicsError> {
    let (dlambda, domega) = rhs_unchecked(net, &state.lambda, &state.omega, input.alpha(), p);
    Ok(SwingRhs { dlambda, domega })
}

/// Algebraic frequency at a zero-inertia bus with a frequency-independent
/// input: `ω_i = (−[Dᵀ Y_b sin λ]_i + p_i + α_i) / E_i`.
pub fn algebraic_omega(
    net: &PowerNetwork,
    lambda: &DVector<f64>,
    p: &DVector<f64>,
    alpha_i: f64,
    bus: usize,
) -> f64 {
    debug_assert_eq!(net.inertia()[bus], 0.0);
    let flow = net.flow(lambda);
    (-flow[bus] + p[bus] + alpha_i) / net.damping()[bus]
}

fn rhs_unchecked(
    net: &PowerNetwork,
    lambda: &DVector<f64>,
    omega: &DVector<f64>,
    alpha: &DVector<f64>,
    p: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = net.n_buses();
    let flow = net.flow(lambda);
    let mut dlambda = DVector::zeros(net.n_edges());
    for (j, &(a, b)) in net.edges().iter().enumerate() {
        dlambda[j] = omega[a] - omega[b];
    }
    let mut domega = DVector::zeros(n);
    for i in 0..n {
        let m = net.inertia()[i];
        if m > 0.0 {
            domega[i] = (-net.damping()[i] * omega[i] - flow[i] + p[i] + alpha[i]) / m;
        }
    }
    (dlambda, domega)
}

/// Instantaneous control decomposition returned by a [`ControlLaw`].
#[derive(Debug, Clone)]
pub struct ControlEval {
    /// Total applied actuation `α = α_TL + α_BL` (zero off the controlled set).
    pub alpha: DVector<f64>,
    /// Top-layer component (zero off the safety set).
    pub alpha_tl: DVector<f64>,
    /// Raw MPC input currently held (zero off the controlled set).
    pub u_mpc: DVector<f64>,
    /// Stability-filtered MPC input `û` (zero off the controlled set).
    pub u_hat: DVector<f64>,
    /// Time derivative of the bottom-layer state `α_BL`.
    pub alpha_bl_dot: DVector<f64>,
}

impl ControlEval {
    pub fn inactive(n: usize) -> Self {
        ControlEval {
            alpha: DVector::zeros(n),
            alpha_tl: DVector::zeros(n),
            u_mpc: DVector::zeros(n),
            u_hat: DVector::zeros(n),
            alpha_bl_dot: DVector::zeros(n),
        }
    }
}

/// A state-feedback control law driven by the simulator.
///
/// `pre_step` runs once per integrator step boundary and may update internal
/// state (e.g. take an MPC sample).  `evaluate` must be a pure function of
/// its arguments and the internal state fixed by the last `pre_step`; it is
/// called at every RK4 stage.
pub trait ControlLaw {
    fn pre_step(
        &mut self,
        step_index: usize,
        t: f64,
        state: &SystemState,
        net: &PowerNetwork,
    ) -> Result<(), DynamicsError>;

    /// Evaluates the control decomposition at a stage point whose algebraic
    /// frequencies have already been resolved.
    fn evaluate(
        &self,
        t: f64,
        state: &SystemState,
        p_eff: &DVector<f64>,
        net: &PowerNetwork,
    ) -> ControlEval;

    /// Whether the bottom-layer state contributes to the applied input at
    /// time `t` (false while the controller is disabled).
    fn bottom_layer_effective(&self, _t: f64) -> bool {
        false
    }

    /// Top-layer actuation at `bus` as a function of a trial frequency and
    /// the corresponding mismatch `v`; used to resolve the implicit algebraic
    /// relation at zero-inertia safety buses.  Must be continuous and
    /// non-increasing in the trial frequency.
    fn top_layer_response(&self, _bus: usize, _trial_omega: f64, _v: f64) -> f64 {
        0.0
    }

    /// Whether the top layer can be nonzero at `bus` at time `t`.
    fn has_top_layer(&self, _bus: usize, _t: f64) -> bool {
        false
    }
}

/// Open-loop operation: no actuation at all.
#[derive(Debug, Default, Clone)]
pub struct OpenLoopLaw;

impl ControlLaw for OpenLoopLaw {
    fn pre_step(
        &mut self,
        _step_index: usize,
        _t: f64,
        _state: &SystemState,
        _net: &PowerNetwork,
    ) -> Result<(), DynamicsError> {
        Ok(())
    }

    fn evaluate(
        &self,
        _t: f64,
        _state: &SystemState,
        _p_eff: &DVector<f64>,
        net: &PowerNetwork,
    ) -> ControlEval {
        ControlEval::inactive(net.n_buses())
    }
}

/// Initial condition for a simulation run.
#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// Start at the synchronous equilibrium of the nominal injections.
    Equilibrium,
    /// Start at the equilibrium with an added frequency offset (length =
    /// number of buses; entries at zero-inertia buses are ignored).
    EquilibriumWithOmega(DVector<f64>),
    /// Fully explicit initial state.
    Explicit(SystemState),
}

/// Fixed-step simulation parameters.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub t_end: f64,
    pub dt: f64,
    pub initial: InitialCondition,
}

impl SimParams {
    pub fn new(t_end: f64, dt: f64) -> Self {
        SimParams {
            t_end,
            dt,
            initial: InitialCondition::Equilibrium,
        }
    }

    /// Number of integrator steps (`t_end / dt`, which must be integral).
    pub fn n_steps(&self) -> usize {
        let k = (self.t_end / self.dt).round();
        assert!(
            (self.t_end - k * self.dt).abs() <= 1e-9 * self.t_end.max(1.0),
            "t_end must be an integer multiple of dt"
        );
        k as usize
    }
}

/// Per-step recording of a simulation run (struct-of-arrays; one row per
/// integrator step boundary, including the initial and final states).
#[derive(Debug, Clone)]
pub struct StepSeries {
    /// Number of buses / edges / controlled / safety entries per row.
    pub n_buses: usize,
    pub n_edges: usize,
    pub controlled: Vec<usize>,
    pub safety: Vec<usize>,
    pub t: Vec<f64>,
    /// Flattened rows of `λ`, stride `n_edges`.
    pub lambda: Vec<f64>,
    /// Flattened rows of `ω` (all buses, resolved), stride `n_buses`.
    pub omega: Vec<f64>,
    /// Flattened rows of `α_BL` restricted to controlled buses.
    pub alpha_bl: Vec<f64>,
    /// Flattened rows of total `α` restricted to controlled buses.
    pub alpha: Vec<f64>,
    /// Flattened rows of `α_TL` restricted to safety buses.
    pub alpha_tl: Vec<f64>,
    /// Flattened rows of `u_MPC` restricted to controlled buses.
    pub u_mpc: Vec<f64>,
    /// Flattened rows of `û` restricted to controlled buses.
    pub u_hat: Vec<f64>,
}

impl StepSeries {
    fn with_capacity(net: &PowerNetwork, rows: usize) -> Self {
        StepSeries {
            n_buses: net.n_buses(),
            n_edges: net.n_edges(),
            controlled: net.controlled().to_vec(),
            safety: net.safety().to_vec(),
            t: Vec::with_capacity(rows),
            lambda: Vec::with_capacity(rows * net.n_edges()),
            omega: Vec::with_capacity(rows * net.n_buses()),
            alpha_bl: Vec::with_capacity(rows * net.controlled().len()),
            alpha: Vec::with_capacity(rows * net.controlled().len()),
            alpha_tl: Vec::with_capacity(rows * net.safety().len()),
            u_mpc: Vec::with_capacity(rows * net.controlled().len()),
            u_hat: Vec::with_capacity(rows * net.controlled().len()),
        }
    }

    fn push(&mut self, t: f64, state: &SystemState, eval: &ControlEval) {
        self.t.push(t);
        self.lambda.extend(state.lambda.iter());
        self.omega.extend(state.omega.iter());
        for &i in &self.controlled {
            self.alpha_bl.push(state.alpha_bl[i]);
            self.alpha.push(eval.alpha[i]);
            self.u_mpc.push(eval.u_mpc[i]);
            self.u_hat.push(eval.u_hat[i]);
        }
        for &i in &self.safety {
            self.alpha_tl.push(eval.alpha_tl[i]);
        }
    }

    /// Number of recorded rows.
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `λ` row at step `k`.
    pub fn lambda_row(&self, k: usize) -> &[f64] {
        &self.lambda[k * self.n_edges..(k + 1) * self.n_edges]
    }

    /// `ω` row at step `k` (all buses).
    pub fn omega_row(&self, k: usize) -> &[f64] {
        &self.omega[k * self.n_buses..(k + 1) * self.n_buses]
    }

    pub fn alpha_bl_row(&self, k: usize) -> &[f64] {
        let s = self.controlled.len();
        &self.alpha_bl[k * s..(k + 1) * s]
    }

    pub fn alpha_row(&self, k: usize) -> &[f64] {
        let s = self.controlled.len();
        &self.alpha[k * s..(k + 1) * s]
    }

    pub fn alpha_tl_row(&self, k: usize) -> &[f64] {
        let s = self.safety.len();
        &self.alpha_tl[k * s..(k + 1) * s]
    }

    pub fn u_mpc_row(&self, k: usize) -> &[f64] {
        let s = self.controlled.len();
        &self.u_mpc[k * s..(k + 1) * s]
    }

    pub fn u_hat_row(&self, k: usize) -> &[f64] {
        let s = self.controlled.len();
        &self.u_hat[k * s..(k + 1) * s]
    }

    /// Reconstructs the full state at step `k`.
    pub fn state_at(&self, k: usize) -> SystemState {
        let mut alpha_bl = DVector::zeros(self.n_buses);
        for (slot, &i) in self.controlled.iter().enumerate() {
            alpha_bl[i] = self.alpha_bl_row(k)[slot];
        }
        SystemState {
            lambda: DVector::from_column_slice(self.lambda_row(k)),
            omega: DVector::from_column_slice(self.omega_row(k)),
            alpha_bl,
        }
    }
}

/// Result of a closed-loop simulation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub t_end: f64,
    /// Equilibrium edge angles of the nominal injections, when they exist
    /// (used by the energy audits).
    pub lambda_eq: Option<DVector<f64>>,
    pub steps: StepSeries,
}

impl Trajectory {
    pub fn final_state(&self) -> SystemState {
        self.steps.state_at(self.steps.len() - 1)
    }
}

/// Runs the closed-loop simulation with classical RK4 at a fixed step.
///
/// The control law's `pre_step` runs at every step boundary before the stage
/// evaluations; the disturbance is evaluated exactly at stage times.  Returns
/// an error if the state leaves the representable range.
pub fn simulate(
    net: &PowerNetwork,
    profile: &DisturbanceProfile,
    params: &SimParams,
    law: &mut dyn ControlLaw,
) -> Result<Trajectory, DynamicsError> {
    let n_steps = params.n_steps();
    let dt = params.dt;
    let lambda_eq = net.compute_equilibrium().ok();

    let mut state = match &params.initial {
        InitialCondition::Equilibrium => {
            let lambda = lambda_eq.clone().ok_or_else(|| NetworkError::NoConvergence {
                detail: "equilibrium start requested but no equilibrium found".into(),
            })?;
            SystemState {
                lambda,
                omega: DVector::zeros(net.n_buses()),
                alpha_bl: DVector::zeros(net.n_buses()),
            }
        }
        InitialCondition::EquilibriumWithOmega(offset) => {
            let lambda = lambda_eq.clone().ok_or_else(|| NetworkError::NoConvergence {
                detail: "equilibrium start requested but no equilibrium found".into(),
            })?;
            SystemState {
                lambda,
                omega: offset.clone(),
                alpha_bl: DVector::zeros(net.n_buses()),
            }
        }
        InitialCondition::Explicit(s) => s.clone(),
    };

    let mut steps = StepSeries::with_capacity(net, n_steps + 1);

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        law.pre_step(k, t, &state, net)?;

        let p_eff = profile.injection_at(net, t);
        resolve_algebraic(net, law, t, &mut state, &p_eff)?;
        let eval = law.evaluate(t, &state, &p_eff, net);
        steps.push(t, &state, &eval);
        if k == n_steps {
            break;
        }

        state = rk4_step(net, law, t, &state, dt, profile, eval)?;
        if !state.is_finite() {
            return Err(DynamicsError::NonFiniteState { t: t + dt });
        }
    }

    Ok(Trajectory {
        dt,
        t_end: params.t_end,
        lambda_eq,
        steps,
    })
}

/// One RK4 step of the closed-loop dynamics from (t, state), with the stage-1
/// control evaluation already available.
fn rk4_step(
    net: &PowerNetwork,
    law: &dyn ControlLaw,
    t: f64,
    state: &SystemState,
    dt: f64,
    profile: &DisturbanceProfile,
    eval1: ControlEval,
) -> Result<SystemState, DynamicsError> {
    let stage = |t_s: f64,
                 s: &SystemState,
                 eval: Option<&ControlEval>|
     -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), DynamicsError> {
        let p_eff = profile.injection_at(net, t_s);
        let mut s_resolved = s.clone();
        resolve_algebraic(net, law, t_s, &mut s_resolved, &p_eff)?;
        let owned;
        let ev = match eval {
            Some(e) => e,
            None => {
                owned = law.evaluate(t_s, &s_resolved, &p_eff, net);
                &owned
            }
        };
        let (dl, dw) = rhs_unchecked(net, &s_resolved.lambda, &s_resolved.omega, &ev.alpha, &p_eff);
        Ok((dl, dw, ev.alpha_bl_dot.clone()))
    };

    let advance = |s: &SystemState, k: &(DVector<f64>, DVector<f64>, DVector<f64>), h: f64| {
        SystemState {
            lambda: &s.lambda + h * &k.0,
            omega: &s.omega + h * &k.1,
            alpha_bl: &s.alpha_bl + h * &k.2,
        }
    };

    let k1 = stage(t, state, Some(&eval1))?;
    let s2 = advance(state, &k1, dt / 2.0);
    let k2 = stage(t + dt / 2.0, &s2, None)?;
    let s3 = advance(state, &k2, dt / 2.0);
    let k3 = stage(t + dt / 2.0, &s3, None)?;
    let s4 = advance(state, &k3, dt);
    let k4 = stage(t + dt, &s4, None)?;

    let sixth = dt / 6.0;
    Ok(SystemState {
        lambda: &state.lambda + sixth * (&k1.0 + 2.0 * &k2.0 + 2.0 * &k3.0 + &k4.0),
        omega: &state.omega + sixth * (&k1.1 + 2.0 * &k2.1 + 2.0 * &k3.1 + &k4.1),
        alpha_bl: &state.alpha_bl + sixth * (&k1.2 + 2.0 * &k2.2 + 2.0 * &k3.2 + &k4.2),
    })
}

/// Performs one RK4 step of the open-loop or closed-loop dynamics; exposed
/// for integrator-order tests.
pub fn integrate_step(
    net: &PowerNetwork,
    profile: &DisturbanceProfile,
    law: &mut dyn ControlLaw,
    t: f64,
    state: &SystemState,
    dt: f64,
) -> Result<SystemState, DynamicsError> {
    law.pre_step(0, t, state, net)?;
    let p_eff = profile.injection_at(net, t);
    let mut resolved = state.clone();
    resolve_algebraic(net, law, t, &mut resolved, &p_eff)?;
    let eval = law.evaluate(t, &resolved, &p_eff, net);
    let next = rk4_step(net, law, t, &resolved, dt, profile, eval)?;
    if !next.is_finite() {
        return Err(DynamicsError::NonFiniteState { t: t + dt });
    }
    let mut next = next;
    let p_next = profile.injection_at(net, t + dt);
    resolve_algebraic(net, law, t + dt, &mut next, &p_next)?;
    Ok(next)
}

/// Overwrites `state.omega` at zero-inertia buses with the algebraically
/// consistent frequencies.
fn resolve_algebraic(
    net: &PowerNetwork,
    law: &dyn ControlLaw,
    t: f64,
    state: &mut SystemState,
    p_eff: &DVector<f64>,
) -> Result<(), DynamicsError> {
    let flow = net.flow(&state.lambda);
    let bottom = law.bottom_layer_effective(t);
    for i in 0..net.n_buses() {
        if net.inertia()[i] > 0.0 {
            continue;
        }
        let alpha_passive = if bottom && net.is_controlled(i) {
            state.alpha_bl[i]
        } else {
            0.0
        };
        let q = -flow[i] + p_eff[i] + alpha_passive;
        let e = net.damping()[i];
        if !law.has_top_layer(i, t) {
            state.omega[i] = q / e;
        } else {
            state.omega[i] = solve_implicit_omega(law, i, q, e)
                .ok_or(DynamicsError::AlgebraicResolution { bus: i, t })?;
        }
    }
    Ok(())
}

/// Solves `E ω = q + r(ω)` for the strictly increasing residual
/// `g(ω) = E ω − q − r(ω)`, where `r` is the (non-increasing) top-layer
/// response.  Returns `None` if no bracket is found.
fn solve_implicit_omega(law: &dyn ControlLaw, bus: usize, q: f64, e: f64) -> Option<f64> {
    let g = |w: f64| e * w - q - law.top_layer_response(bus, w, e * w - q);
    let center = q / e;
    let mut half_width = 1.0f64.max(center.abs() * 0.1);
    let mut lo = center - half_width;
    let mut hi = center + half_width;
    for _ in 0..80 {
        if g(lo) <= 0.0 && g(hi) >= 0.0 {
            break;
        }
        half_width *= 2.0;
        lo = center - half_width;
        hi = center + half_width;
    }
    if !(g(lo) <= 0.0 && g(hi) >= 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::ForecastMode;
    use approx::assert_relative_eq;

    fn two_bus() -> PowerNetwork {
        PowerNetwork::new(
            vec![(0, 1)],
            vec![1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![0, 1],
            vec![0],
        )
        .unwrap()
    }

    #[test]
    fn swing_rhs_hand_example() {
        let net = two_bus();
        let state = SystemState {
            lambda: DVector::from_vec(vec![0.0]),
            omega: DVector::from_vec(vec![1.0, -1.0]),
            alpha_bl: DVector::zeros(2),
        };
        let input = InputSignal::zero(&net);
        let p = DVector::zeros(2);
        let rhs = swing_rhs(&net, &state, &input, &p).unwrap();
        assert_eq!(rhs.dlambda[0], 2.0);
        assert_eq!(rhs.domega[0], -1.0);
        assert_eq!(rhs.domega[1], 1.0);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let net = PowerNetwork::new(
            vec![(0, 1), (1, 2)],
            vec![2.0, 3.0],
            vec![1.0, 2.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![0.4, 0.1, -0.5],
            vec![0, 1, 2],
            vec![0],
        )
        .unwrap();
        let lambda = net.compute_equilibrium().unwrap();
        let state = SystemState {
            lambda,
            omega: DVector::zeros(3),
            alpha_bl: DVector::zeros(3),
        };
        let rhs = swing_rhs(
            &net,
            &state,
            &InputSignal::zero(&net),
            &DVector::from_column_slice(net.injection()),
        )
        .unwrap();
        assert!(rhs.dlambda.amax() <= 1e-12);
        assert!(rhs.domega.amax() <= 1e-12);
    }

    #[test]
    fn input_validation_rejects_uncontrolled_buses() {
        let net = PowerNetwork::new(
            vec![(0, 1)],
            vec![1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![0],
            vec![0],
        )
        .unwrap();
        let bad = InputSignal::new(DVector::from_vec(vec![0.0, 0.3]), &net);
        assert!(matches!(
            bad,
            Err(DynamicsError::InputOutsideActuationSet { .. })
        ));
        assert!(InputSignal::new(DVector::from_vec(vec![0.3, 0.0]), &net).is_ok());
    }

    #[test]
    fn algebraic_omega_balances_torque() {
        // Bus 1 has zero inertia, damping 2, injection 1: ω = 1/2 at λ = 0.
        let net = PowerNetwork::new(
            vec![(0, 1)],
            vec![1.0],
            vec![1.0, 0.0],
            vec![1.0, 2.0],
            vec![-1.0, 1.0],
            vec![0, 1],
            vec![0],
        )
        .unwrap();
        let lambda = DVector::zeros(1);
        let p = DVector::from_column_slice(net.injection());
        assert_relative_eq!(algebraic_omega(&net, &lambda, &p, 0.0, 1), 0.5);
    }

    #[test]
    fn rk4_has_fifth_order_local_error() {
        // Single isolated bus with M = E = 1 integrates ω̇ = −ω exactly as
        // the classical RK4 Taylor polynomial; compare against exp(−dt).
        let net = PowerNetwork::new(
            vec![],
            vec![],
            vec![1.0],
            vec![1.0],
            vec![0.0],
            vec![],
            vec![],
        )
        .unwrap();
        let state = SystemState {
            lambda: DVector::zeros(0),
            omega: DVector::from_vec(vec![1.0]),
            alpha_bl: DVector::zeros(1),
        };
        let dt = 0.1;
        let mut law = OpenLoopLaw;
        let next = integrate_step(
            &net,
            &DisturbanceProfile::none(),
            &mut law,
            0.0,
            &state,
            dt,
        )
        .unwrap();
        let err = (next.omega[0] - (-dt).exp()).abs();
        let lead = dt.powi(5) / 120.0;
        assert!(
            err > 0.5 * lead && err < 1.5 * lead,
            "local error {err:.3e} vs leading term {lead:.3e}"
        );
    }

    #[test]
    fn open_loop_from_equilibrium_stays_put() {
        let net = PowerNetwork::new(
            vec![(0, 1), (1, 2), (2, 0)],
            vec![4.0, 4.0, 4.0],
            vec![1.0, 1.5, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.5, 0.2, -0.7],
            vec![0, 1],
            vec![0],
        )
        .unwrap();
        let params = SimParams::new(1.0, 1e-3);
        let mut law = OpenLoopLaw;
        let traj = simulate(&net, &DisturbanceProfile::none(), &params, &mut law).unwrap();
        for k in 0..traj.steps.len() {
            for &w in traj.steps.omega_row(k) {
                assert!(w.abs() <= 1e-11, "ω = {w:.3e} at step {k}");
            }
        }
    }

    #[test]
    fn zero_inertia_bus_satisfies_algebraic_identity() {
        let net = PowerNetwork::new(
            vec![(0, 1), (1, 2), (2, 0)],
            vec![4.0, 4.0, 4.0],
            vec![1.0, 1.5, 0.0],
            vec![1.0, 1.0, 0.8],
            vec![0.5, 0.2, -0.7],
            vec![0, 1],
            vec![0],
        )
        .unwrap();
        let profile = DisturbanceProfile::ramp_hold_ramp(
            vec![2],
            0.3,
            0.5,
            2.0,
            2.5,
            ForecastMode::Perfect,
        );
        let params = SimParams::new(3.0, 1e-3);
        let mut law = OpenLoopLaw;
        let traj = simulate(&net, &profile, &params, &mut law).unwrap();
        for k in (0..traj.steps.len()).step_by(100) {
            let t = traj.steps.t[k];
            let state = traj.steps.state_at(k);
            let p = profile.injection_at(&net, t);
            let expected = algebraic_omega(&net, &state.lambda, &p, 0.0, 2);
            assert_relative_eq!(state.omega[2], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn lambda_stays_in_cycle_space() {
        // On a ring, range(D) is a proper subspace; verify the integrator
        // does not drift out of it over 10⁴ steps.
        let net = PowerNetwork::new(
            vec![(0, 1), (1, 2), (2, 0)],
            vec![4.0, 5.0, 6.0],
            vec![1.0, 1.5, 2.0],
            vec![1.0, 1.0, 1.0],
            vec![0.5, 0.2, -0.7],
            vec![0],
            vec![0],
        )
        .unwrap();
        let params = SimParams {
            t_end: 10.0,
            dt: 1e-3,
            initial: InitialCondition::EquilibriumWithOmega(DVector::from_vec(vec![
                0.5, -0.2, 0.1,
            ])),
        };
        let mut law = OpenLoopLaw;
        let traj = simulate(&net, &DisturbanceProfile::none(), &params, &mut law).unwrap();
        let d = net.incidence_matrix();
        let d_pinv = d.clone().svd(true, true).pseudo_inverse(1e-12).unwrap();
        let last = traj.final_state();
        let projected = &d * (&d_pinv * &last.lambda);
        assert!(
            (projected - &last.lambda).amax() <= 1e-8,
            "λ drifted out of range(D)"
        );
    }

    #[test]
    fn non_finite_input_is_reported() {
        struct Runaway;
        impl ControlLaw for Runaway {
            fn pre_step(
                &mut self,
                _k: usize,
                _t: f64,
                _s: &SystemState,
                _n: &PowerNetwork,
            ) -> Result<(), DynamicsError> {
                Ok(())
            }
            fn evaluate(
                &self,
                _t: f64,
                _s: &SystemState,
                _p: &DVector<f64>,
                net: &PowerNetwork,
            ) -> ControlEval {
                let mut eval = ControlEval::inactive(net.n_buses());
                eval.alpha[0] = f64::NAN;
                eval
            }
        }
        let net = two_bus();
        let params = SimParams::new(1.0, 1e-3);
        let mut law = Runaway;
        let out = simulate(&net, &DisturbanceProfile::none(), &params, &mut law);
        assert!(matches!(out, Err(DynamicsError::NonFiniteState { .. })));
    }
}
