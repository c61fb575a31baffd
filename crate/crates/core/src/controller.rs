//! The bilayered control law: sampled MPC with a stability filter and
//! low-pass actuation (bottom layer), plus a real-time barrier-style safety
//! controller (top layer).
//!
//! Layer separation is the load-bearing property: the bottom layer can only
//! inject energy at a rate bounded by the filter inequality
//! `α_BL û ≤ ε α_BL²`, so any MPC output — however wrong — leaves closed-loop
//! stability intact; the top layer acts only outside the frequency threshold
//! band and always opposes the frequency sign.  The MPC layer therefore
//! improves transient cost without being trusted for safety.

use crate::dynamics::{ControlEval, ControlLaw, DynamicsError, SystemState};
use crate::netmodel::{DisturbanceProfile, ForecastMode, PowerNetwork};
use crate::prediction::{
    assemble_mpc_qp, discretize_backward_euler, linearize, DiscreteModel, MpcWeights, QpInstance,
};
use crate::solvers::{
    distributed_execute, saddle_integrate, ReferenceSolver, SaddleConfig, SaddleState,
};
use nalgebra::DVector;
use thiserror::Error;

/// Sampling-boundary comparison slack (absolute, in seconds).
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {detail}")]
    InvalidConfig { detail: String },
}

/// Per-bus controller parameters; angular quantities are in rad/s.
///
/// Vectors hold one entry per bus; entries outside the relevant set
/// (controlled buses for `epsilon`/`tau`, safety buses for bands, gains) are
/// carried but unused.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Safe frequency band `[ω̲_i, ω̄_i]`.
    pub omega_min: Vec<f64>,
    pub omega_max: Vec<f64>,
    /// Threshold band `[ω̲ᵗʰʳ_i, ω̄ᵗʰʳ_i]` inside which the top layer is off.
    pub omega_thr_min: Vec<f64>,
    pub omega_thr_max: Vec<f64>,
    /// Barrier gains of the top layer.
    pub gamma_upper: Vec<f64>,
    pub gamma_lower: Vec<f64>,
    /// Stability-filter sensitivity bounds.
    pub epsilon: Vec<f64>,
    /// Low-pass filter time constants.
    pub tau: Vec<f64>,
    /// MPC effort and slack weights.
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    /// MPC sampling period `t^w` spacing.
    pub sample_period: f64,
    /// Prediction horizon length in seconds (`t̃`) and step (`T`).
    pub horizon_time: f64,
    pub pred_step: f64,
    pub forecast: ForecastMode,
}

impl ControllerConfig {
    /// Reference parameter set: thresholds ±0.1 Hz, safe band ±0.2 Hz,
    /// unit barrier gains, ε = 1.9, τ = 0.5 (ετ = 0.95 < 1), effort weight 4
    /// on safety buses and 1 elsewhere, slack weight 100, 1 s sampling, 10 s
    /// horizon at 0.2 s steps.
    pub fn table_defaults(net: &PowerNetwork) -> Self {
        let n = net.n_buses();
        let band = crate::units::hz_to_rad_s(0.2);
        let thr = crate::units::hz_to_rad_s(0.1);
        let mut c = vec![1.0; n];
        for &i in net.safety() {
            c[i] = 4.0;
        }
        ControllerConfig {
            omega_min: vec![-band; n],
            omega_max: vec![band; n],
            omega_thr_min: vec![-thr; n],
            omega_thr_max: vec![thr; n],
            gamma_upper: vec![1.0; n],
            gamma_lower: vec![1.0; n],
            epsilon: vec![1.9; n],
            tau: vec![0.5; n],
            c,
            d: vec![100.0; n],
            sample_period: 1.0,
            horizon_time: 10.0,
            pred_step: 0.2,
            forecast: ForecastMode::Perfect,
        }
    }

    /// Number of prediction steps `N = ⌈t̃ / T⌉` (exact ratios round).
    pub fn horizon_steps(&self) -> usize {
        let raw = self.horizon_time / self.pred_step;
        let rounded = raw.round();
        let n = if (raw - rounded).abs() < 1e-9 {
            rounded
        } else {
            raw.ceil()
        };
        (n as usize).max(1)
    }

    pub fn weights(&self) -> MpcWeights {
        MpcWeights {
            c: self.c.clone(),
            d: self.d.clone(),
            epsilon: self.epsilon.clone(),
            omega_min: self.omega_min.clone(),
            omega_max: self.omega_max.clone(),
        }
    }

    pub fn validate(&self, net: &PowerNetwork) -> Result<(), ControllerError> {
        let n = net.n_buses();
        let arrays: [(&str, &Vec<f64>); 10] = [
            ("omega_min", &self.omega_min),
            ("omega_max", &self.omega_max),
            ("omega_thr_min", &self.omega_thr_min),
            ("omega_thr_max", &self.omega_thr_max),
            ("gamma_upper", &self.gamma_upper),
            ("gamma_lower", &self.gamma_lower),
            ("epsilon", &self.epsilon),
            ("tau", &self.tau),
            ("c", &self.c),
            ("d", &self.d),
        ];
        for (name, arr) in arrays {
            if arr.len() != n {
                return Err(ControllerError::InvalidConfig {
                    detail: format!("{name} must have one entry per bus ({n})"),
                });
            }
        }
        for &i in net.controlled() {
            if self.epsilon[i] <= 0.0 || self.tau[i] <= 0.0 {
                return Err(ControllerError::InvalidConfig {
                    detail: format!("epsilon and tau must be positive at controlled bus {i}"),
                });
            }
            if self.epsilon[i] * self.tau[i] >= 1.0 {
                return Err(ControllerError::InvalidConfig {
                    detail: format!(
                        "stability requires epsilon*tau < 1 at bus {i} (got {})",
                        self.epsilon[i] * self.tau[i]
                    ),
                });
            }
            if self.c[i] <= 0.0 {
                return Err(ControllerError::InvalidConfig {
                    detail: format!("effort weight c must be positive at bus {i}"),
                });
            }
        }
        for &i in net.safety() {
            let ok = self.omega_min[i] < self.omega_thr_min[i]
                && self.omega_thr_min[i] < 0.0
                && 0.0 < self.omega_thr_max[i]
                && self.omega_thr_max[i] < self.omega_max[i];
            if !ok {
                return Err(ControllerError::InvalidConfig {
                    detail: format!(
                        "need omega_min < omega_thr_min < 0 < omega_thr_max < omega_max at bus {i}"
                    ),
                });
            }
            if self.gamma_upper[i] <= 0.0 || self.gamma_lower[i] <= 0.0 {
                return Err(ControllerError::InvalidConfig {
                    detail: format!("barrier gains must be positive at bus {i}"),
                });
            }
            if self.d[i] <= 0.0 {
                return Err(ControllerError::InvalidConfig {
                    detail: format!("slack weight d must be positive at bus {i}"),
                });
            }
        }
        if self.sample_period <= 0.0 || self.horizon_time <= 0.0 || self.pred_step <= 0.0 {
            return Err(ControllerError::InvalidConfig {
                detail: "sampling period, horizon, and prediction step must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Saturates the MPC input into the stability envelope `±ε|α_BL|`.
pub fn stability_filter(alpha_bl: f64, u_mpc: f64, eps: f64) -> f64 {
    let bound = eps * alpha_bl.abs();
    u_mpc.clamp(-bound, bound)
}

/// Low-pass actuation dynamics `α̇_BL = −α_BL/τ − ω + û`.
pub fn lowpass_rhs(alpha_bl: f64, omega: f64, u_hat: f64, tau: f64) -> f64 {
    -alpha_bl / tau - omega + u_hat
}

/// The top-layer barrier response at one bus.
///
/// Outside the threshold band the output cancels enough of the mismatch `v`
/// to keep the frequency inside `[ω̲, ω̄]`; exactly at a threshold the band
/// is treated as closed (output 0) to keep the barrier term finite.  The
/// output never pushes the frequency away from zero: `ω · α_TL ≤ 0`.
#[allow(clippy::too_many_arguments)]
pub fn top_layer_term(
    omega: f64,
    v: f64,
    omega_min: f64,
    omega_max: f64,
    thr_min: f64,
    thr_max: f64,
    gamma_upper: f64,
    gamma_lower: f64,
) -> f64 {
    if omega > thr_max {
        let barrier = gamma_upper * (omega_max - omega) / (omega - thr_max);
        (barrier + v).min(0.0)
    } else if omega < thr_min {
        let barrier = gamma_lower * (omega_min - omega) / (thr_min - omega);
        (barrier + v).max(0.0)
    } else {
        0.0
    }
}

/// Which layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// Only the real-time safety layer.
    TopOnly,
    /// Safety layer plus the MPC bottom layer.
    Bilayered,
}

/// How MPC samples are solved.
#[derive(Debug, Clone)]
pub enum SolverBackend {
    /// Centralised active-set oracle (default; fast and exact).
    Reference,
    /// Centralised saddle-point integration.
    SaddleCentral(SaddleConfig),
    /// Multi-agent saddle-point simulation (bitwise equal to central).
    SaddleDistributed(SaddleConfig),
}

/// The bilayered state-feedback law driven by the simulator.
pub struct BilayeredLaw {
    cfg: ControllerConfig,
    mode: ControlMode,
    backend: SolverBackend,
    profile: DisturbanceProfile,
    /// Time before which both layers are inactive.
    enable_time: f64,
    /// Constant added to the raw MPC output before the stability filter
    /// (robustness experiments; zero in normal operation).
    mpc_shift: DVector<f64>,
    dm: DiscreteModel,
    weights: MpcWeights,
    horizon: usize,
    /// Warm-start shift in prediction steps between consecutive samples.
    shift_steps: usize,
    safety_mask: Vec<bool>,
    // Runtime state.
    u_mpc: DVector<f64>,
    next_sample_time: f64,
    warm: Option<SaddleState>,
    reference: ReferenceSolver,
    solver_failures: usize,
    samples_taken: usize,
}

impl BilayeredLaw {
    pub fn new(
        net: &PowerNetwork,
        cfg: ControllerConfig,
        mode: ControlMode,
        backend: SolverBackend,
        profile: DisturbanceProfile,
    ) -> Result<Self, ControllerError> {
        cfg.validate(net)?;
        let lm = linearize(net, &cfg.tau);
        let dm = discretize_backward_euler(&lm, cfg.pred_step);
        let weights = cfg.weights();
        let horizon = cfg.horizon_steps();
        let shift_steps = (cfg.sample_period / cfg.pred_step).round().max(1.0) as usize;
        Ok(BilayeredLaw {
            safety_mask: (0..net.n_buses()).map(|i| net.is_safety(i)).collect(),
            u_mpc: DVector::zeros(net.n_buses()),
            next_sample_time: 0.0,
            warm: None,
            reference: ReferenceSolver::new(),
            solver_failures: 0,
            samples_taken: 0,
            mpc_shift: DVector::zeros(net.n_buses()),
            enable_time: 0.0,
            cfg,
            mode,
            backend,
            profile,
            dm,
            weights,
            horizon,
            shift_steps,
        })
    }

    /// Delays both layers until `t`; until then the plant runs open loop.
    pub fn with_enable_time(mut self, t: f64) -> Self {
        self.enable_time = t;
        self.next_sample_time = t;
        self
    }

    /// Adds a constant shift to the raw MPC output before the filter.
    pub fn with_mpc_shift(mut self, shift: DVector<f64>) -> Self {
        self.mpc_shift = shift;
        self
    }

    pub fn solver_failures(&self) -> usize {
        self.solver_failures
    }

    pub fn samples_taken(&self) -> usize {
        self.samples_taken
    }

    fn active(&self, t: f64) -> bool {
        t + TIME_EPS >= self.enable_time
    }

    /// Shifts the previous sample's saddle iterate forward by
    /// `shift_steps` prediction steps (replicating the terminal block) to
    /// warm-start the next sample.
    fn shift_warm_start(&self, prev: &SaddleState, qp: &QpInstance) -> SaddleState {
        let dims = &qp.dims;
        let n = dims.horizon;
        let sd = dims.state_dim();
        let s = self.shift_steps;
        let mut z = prev.z.clone();
        for k in 1..=n {
            let src = (k + s).min(n);
            for r in 0..sd {
                z[dims.state_var(k, r)] = prev.z[dims.state_var(src, r)];
            }
            for slot in 0..dims.safety.len() {
                z[dims.slack_var(k, slot)] = prev.z[dims.slack_var(src, slot)];
            }
        }
        // Inequality multipliers: the leading 2|I_ω| rows per step shift with
        // their step; the trailing sensitivity rows stay.
        let mut eta = prev.eta.clone();
        let per_step = 2 * dims.safety.len();
        for k in 1..=n {
            let src = (k + s).min(n);
            for r in 0..per_step {
                eta[(k - 1) * per_step + r] = prev.eta[(src - 1) * per_step + r];
            }
        }
        // Equality multipliers: dynamics rows shift within 1..N-1; the
        // initial-state and forced-zero blocks stay.
        let mut mu = prev.mu.clone();
        if n >= 2 {
            for k in 1..n {
                let src = (k + s).min(n - 1);
                for r in 0..sd {
                    mu[(k - 1) * sd + r] = prev.mu[(src - 1) * sd + r];
                }
            }
        }
        SaddleState { z, eta, mu }
    }

    fn take_sample(
        &mut self,
        t: f64,
        state: &SystemState,
        net: &PowerNetwork,
    ) -> Result<(), DynamicsError> {
        let forecast: Vec<DVector<f64>> = (1..self.horizon)
            .map(|k| match self.cfg.forecast {
                ForecastMode::Perfect => self
                    .profile
                    .injection_at(net, t + k as f64 * self.cfg.pred_step),
                ForecastMode::HoldCurrent => self.profile.injection_at(net, t),
            })
            .collect();
        let qp = assemble_mpc_qp(&self.dm, net, &self.weights, self.horizon, state, &forecast)
            .map_err(|e| DynamicsError::Controller {
                t,
                detail: e.to_string(),
            })?;
        self.samples_taken += 1;

        let solved = match &self.backend {
            SolverBackend::Reference => self
                .reference
                .solve(&qp, 1e-6)
                .map(|sol| qp.extract_input(&sol.y)),
            SolverBackend::SaddleCentral(scfg) => {
                let init = self.warm.as_ref().map(|w| self.shift_warm_start(w, &qp));
                saddle_integrate(&qp, scfg, init.as_ref(), None).map(|out| {
                    if !out.converged {
                        log::warn!(
                            "t = {t:.3}: saddle budget exhausted (best KKT {:.3e}); using best iterate",
                            out.kkt.max()
                        );
                    }
                    let u = qp.extract_input(&out.state.z);
                    self.warm = Some(out.state);
                    u
                })
            }
            SolverBackend::SaddleDistributed(scfg) => {
                let init = self.warm.as_ref().map(|w| self.shift_warm_start(w, &qp));
                distributed_execute(&qp, scfg, init.as_ref(), None).map(|(out, _log)| {
                    if !out.converged {
                        log::warn!(
                            "t = {t:.3}: saddle budget exhausted (best KKT {:.3e}); using best iterate",
                            out.kkt.max()
                        );
                    }
                    let u = qp.extract_input(&out.state.z);
                    self.warm = Some(out.state);
                    u
                })
            }
        };
        match solved {
            Ok(u) => self.u_mpc = u,
            Err(e) => {
                // Fail safe: hold the previous sample. The stability filter
                // guarantees a stale or wrong MPC input cannot destabilise
                // the closed loop.
                self.solver_failures += 1;
                log::warn!("t = {t:.3}: MPC solve failed ({e}); holding previous input");
            }
        }
        Ok(())
    }
}

impl ControlLaw for BilayeredLaw {
    fn pre_step(
        &mut self,
        _step_index: usize,
        t: f64,
        state: &SystemState,
        net: &PowerNetwork,
    ) -> Result<(), DynamicsError> {
        if self.mode != ControlMode::Bilayered || !self.active(t) {
            return Ok(());
        }
        if t + TIME_EPS < self.next_sample_time {
            return Ok(());
        }
        self.next_sample_time += self.cfg.sample_period;
        self.take_sample(t, state, net)
    }

    fn evaluate(
        &self,
        t: f64,
        state: &SystemState,
        p_eff: &DVector<f64>,
        net: &PowerNetwork,
    ) -> ControlEval {
        let n = net.n_buses();
        let mut ev = ControlEval::inactive(n);
        if !self.active(t) {
            return ev;
        }
        if self.mode == ControlMode::Bilayered {
            for &i in net.controlled() {
                let u_raw = self.u_mpc[i] + self.mpc_shift[i];
                let u_hat = stability_filter(state.alpha_bl[i], u_raw, self.cfg.epsilon[i]);
                ev.u_mpc[i] = u_raw;
                ev.u_hat[i] = u_hat;
                ev.alpha_bl_dot[i] =
                    lowpass_rhs(state.alpha_bl[i], state.omega[i], u_hat, self.cfg.tau[i]);
                ev.alpha[i] += state.alpha_bl[i];
            }
        }
        let flow = net.flow(&state.lambda);
        let bottom = self.mode == ControlMode::Bilayered;
        for &i in net.safety() {
            let alpha_bl = if bottom { state.alpha_bl[i] } else { 0.0 };
            let v = net.damping()[i] * state.omega[i] + flow[i] - p_eff[i] - alpha_bl;
            let tl = top_layer_term(
                state.omega[i],
                v,
                self.cfg.omega_min[i],
                self.cfg.omega_max[i],
                self.cfg.omega_thr_min[i],
                self.cfg.omega_thr_max[i],
                self.cfg.gamma_upper[i],
                self.cfg.gamma_lower[i],
            );
            ev.alpha_tl[i] = tl;
            ev.alpha[i] += tl;
        }
        ev
    }

    fn bottom_layer_effective(&self, t: f64) -> bool {
        self.mode == ControlMode::Bilayered && self.active(t)
    }

    fn top_layer_response(&self, bus: usize, trial_omega: f64, v: f64) -> f64 {
        top_layer_term(
            trial_omega,
            v,
            self.cfg.omega_min[bus],
            self.cfg.omega_max[bus],
            self.cfg.omega_thr_min[bus],
            self.cfg.omega_thr_max[bus],
            self.cfg.gamma_upper[bus],
            self.cfg.gamma_lower[bus],
        )
    }

    fn has_top_layer(&self, bus: usize, t: f64) -> bool {
        self.safety_mask[bus] && self.active(t)
    }
}
