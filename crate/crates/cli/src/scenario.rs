//! Scenario assembly and execution: turns a case file plus command-line
//! choices into a simulated trajectory.

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use swingsafe_core::controller::{BilayeredLaw, ControlMode, ControllerConfig, SolverBackend};
use swingsafe_core::dynamics::{
    simulate, InitialCondition, OpenLoopLaw, SimParams, Trajectory,
};
use swingsafe_core::netmodel::{DisturbanceProfile, PowerNetwork};
use swingsafe_core::solvers::SaddleConfig;

/// Which controller runs the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    OpenLoop,
    TopOnly,
    Bilayered,
    /// Bilayered with a constant shift added to the raw MPC output at every
    /// controlled bus (robustness experiment).
    BilayeredShift(f64),
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::OpenLoop => "open-loop",
            Mode::TopOnly => "top-only",
            Mode::Bilayered => "bilayered",
            Mode::BilayeredShift(_) => "bilayered-shift",
        }
    }

    pub fn uses_mpc(&self) -> bool {
        matches!(self, Mode::Bilayered | Mode::BilayeredShift(_))
    }
}

/// How MPC samples are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Reference,
    SaddleCentral,
    SaddleDistributed,
}

impl Backend {
    pub fn label(&self) -> &'static str {
        match self {
            Backend::Reference => "reference",
            Backend::SaddleCentral => "saddle-central",
            Backend::SaddleDistributed => "saddle-distributed",
        }
    }

    fn to_solver(self) -> SolverBackend {
        match self {
            Backend::Reference => SolverBackend::Reference,
            Backend::SaddleCentral => SolverBackend::SaddleCentral(SaddleConfig::default()),
            Backend::SaddleDistributed => {
                SolverBackend::SaddleDistributed(SaddleConfig::default())
            }
        }
    }
}

/// Fully resolved scenario, ready to run.
pub struct Scenario {
    pub net: PowerNetwork,
    pub cfg: ControllerConfig,
    pub profile: DisturbanceProfile,
    pub mode: Mode,
    pub backend: Backend,
    pub t_end: f64,
    pub dt: f64,
    /// Keep one output row per this many integrator steps.
    pub output_every: usize,
    /// Time at which the controller switches on (0 = from the start).
    pub enable_at: f64,
    /// Initial frequency offsets in rad/s (length = buses), if any.
    pub omega0: Option<DVector<f64>>,
}

pub struct RunOutput {
    pub traj: Trajectory,
    pub mpc_samples: usize,
    pub solver_failures: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0) || !(self.dt > 0.0) {
            bail!("t_end and dt must be positive (got {} / {})", self.t_end, self.dt);
        }
        if self.mode.uses_mpc() {
            let ratio = self.cfg.sample_period / self.dt;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                bail!(
                    "dt = {} must divide the MPC sampling period {}",
                    self.dt,
                    self.cfg.sample_period
                );
            }
        }
        if let Some(w) = &self.omega0 {
            if w.len() != self.net.n_buses() {
                bail!(
                    "omega0 lists {} entries for {} buses",
                    w.len(),
                    self.net.n_buses()
                );
            }
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.validate()?;
        let mut params = SimParams::new(self.t_end, self.dt);
        if let Some(w) = &self.omega0 {
            params.initial = InitialCondition::EquilibriumWithOmega(w.clone());
        }
        match self.mode {
            Mode::OpenLoop => {
                let traj = simulate(&self.net, &self.profile, &params, &mut OpenLoopLaw)
                    .context("open-loop simulation failed")?;
                Ok(RunOutput {
                    traj,
                    mpc_samples: 0,
                    solver_failures: 0,
                })
            }
            _ => {
                let control_mode = if self.mode.uses_mpc() {
                    ControlMode::Bilayered
                } else {
                    ControlMode::TopOnly
                };
                let mut law = BilayeredLaw::new(
                    &self.net,
                    self.cfg.clone(),
                    control_mode,
                    self.backend.to_solver(),
                    self.profile.clone(),
                )?;
                if self.enable_at > 0.0 {
                    law = law.with_enable_time(self.enable_at);
                }
                if let Mode::BilayeredShift(b) = self.mode {
                    let mut shift = DVector::zeros(self.net.n_buses());
                    for &i in self.net.controlled() {
                        shift[i] = b;
                    }
                    law = law.with_mpc_shift(shift);
                }
                let traj = simulate(&self.net, &self.profile, &params, &mut law)
                    .with_context(|| format!("{} simulation failed", self.mode.label()))?;
                Ok(RunOutput {
                    traj,
                    mpc_samples: law.samples_taken(),
                    solver_failures: law.solver_failures(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use swingsafe_core::controller::ControllerConfig;

    fn two_bus() -> PowerNetwork {
        PowerNetwork::new(
            vec![(0, 1)],
            vec![5.0],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![0.5, -0.5],
            vec![0, 1],
            vec![0],
        )
        .unwrap()
    }

    fn scenario(net: PowerNetwork, mode: Mode) -> Scenario {
        let cfg = ControllerConfig::table_defaults(&net);
        Scenario {
            net,
            cfg,
            profile: DisturbanceProfile::none(),
            mode,
            backend: Backend::Reference,
            t_end: 2.0,
            dt: 1e-3,
            output_every: 10,
            enable_at: 0.0,
            omega0: None,
        }
    }

    #[test]
    fn dt_must_divide_sampling_period_for_mpc_modes() {
        let mut s = scenario(two_bus(), Mode::Bilayered);
        s.dt = 3e-4;
        assert!(s.validate().is_err());
        // Open loop has no sampling clock, so the same dt is fine.
        s.mode = Mode::OpenLoop;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn omega0_length_is_checked() {
        let mut s = scenario(two_bus(), Mode::OpenLoop);
        s.omega0 = Some(DVector::from_column_slice(&[0.1]));
        assert!(s.validate().is_err());
    }

    #[test]
    fn modes_run_and_label() {
        for (mode, label, mpc) in [
            (Mode::OpenLoop, "open-loop", false),
            (Mode::TopOnly, "top-only", false),
            (Mode::Bilayered, "bilayered", true),
            (Mode::BilayeredShift(0.1), "bilayered-shift", true),
        ] {
            assert_eq!(mode.label(), label);
            assert_eq!(mode.uses_mpc(), mpc);
            let out = scenario(two_bus(), mode).run().unwrap();
            assert_eq!(out.traj.steps.len(), 2001);
            if mpc {
                assert_eq!(out.mpc_samples, 3);
            } else {
                assert_eq!(out.mpc_samples, 0);
            }
        }
    }
}
