//! Power-network data model, disturbance profiles, and synchronous equilibria.
//!
//! A network is an undirected connected graph of buses and transmission lines.
//! Each bus carries inertia `M_i >= 0` (zero for algebraic buses), damping
//! `E_i > 0`, and a nominal active-power injection `p_i`; each line carries a
//! positive susceptance.  The controller acts on the controlled subset `I_u`
//! of buses; frequency limits are enforced on the safety subset
//! `I_omega ⊆ I_u`.
//!
//! Line angle differences are stacked edge-wise as `λ = D θ`, where `D` is the
//! oriented incidence matrix; equilibria of the lossless nonlinear flow
//! `Dᵀ Y_b sin(λ) = p` are computed by a damped Newton iteration on reduced
//! bus angles.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative tolerance on `|Σ p_i|` for the balanced-injection invariant.
pub const BALANCE_TOL: f64 = 1e-9;

/// Relative eigenvalue cutoff used by the Laplacian pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Relative residual tolerance for the equilibrium Newton iteration.
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 100;

/// Errors raised when constructing or analysing a network.
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network graph is not connected")]
    DisconnectedGraph,
    #[error("edge {edge} has non-positive susceptance {value}")]
    NonPositiveSusceptance { edge: usize, value: f64 },
    #[error("bus {bus} has non-positive damping {value}")]
    NonPositiveDamping { bus: usize, value: f64 },
    #[error("bus {bus} has negative inertia {value}")]
    NegativeInertia { bus: usize, value: f64 },
    #[error("at least one bus must have positive inertia")]
    NoInertia,
    #[error("injections sum to {sum:.3e}; they must balance to zero")]
    UnbalancedInjection { sum: f64 },
    #[error("bus index {bus} out of range")]
    InvalidBus { bus: usize },
    #[error("invalid edge: {detail}")]
    InvalidEdge { detail: String },
    #[error("safety bus {bus} is not in the controlled set")]
    SafetyNotControlled { bus: usize },
    #[error("length mismatch: {detail}")]
    LengthMismatch { detail: String },
    #[error("equilibrium computation failed: {detail}")]
    NoConvergence { detail: String },
}

/// Immutable description of a swing-equation power network.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    n_buses: usize,
    /// Oriented edges as (positive end, negative end) bus indices.
    edges: Vec<(usize, usize)>,
    susceptance: Vec<f64>,
    inertia: Vec<f64>,
    damping: Vec<f64>,
    injection: Vec<f64>,
    /// Sorted controlled bus set `I_u`.
    controlled: Vec<usize>,
    /// Sorted safety bus set `I_omega ⊆ I_u`.
    safety: Vec<usize>,
    is_controlled: Vec<bool>,
    is_safety: Vec<bool>,
}

impl PowerNetwork {
    /// Validates and constructs a network.
    ///
    /// Invariants enforced: connected graph, positive susceptances and
    /// damping, non-negative inertia with at least one inertial bus, balanced
    /// injections (`|Σ p_i| ≤ 1e-9 · max(1, ‖p‖_∞)`), and
    /// `I_omega ⊆ I_u ⊆ {0..n}`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        edges: Vec<(usize, usize)>,
        susceptance: Vec<f64>,
        inertia: Vec<f64>,
        damping: Vec<f64>,
        injection: Vec<f64>,
        controlled: Vec<usize>,
        safety: Vec<usize>,
    ) -> Result<Self, NetworkError> {
        let n = inertia.len();
        if damping.len() != n || injection.len() != n {
            return Err(NetworkError::LengthMismatch {
                detail: format!(
                    "inertia/damping/injection have lengths {}/{}/{}",
                    n,
                    damping.len(),
                    injection.len()
                ),
            });
        }
        if susceptance.len() != edges.len() {
            return Err(NetworkError::LengthMismatch {
                detail: format!(
                    "{} edges but {} susceptances",
                    edges.len(),
                    susceptance.len()
                ),
            });
        }
        for (j, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(NetworkError::InvalidEdge {
                    detail: format!("edge {j} endpoint out of range"),
                });
            }
            if a == b {
                return Err(NetworkError::InvalidEdge {
                    detail: format!("edge {j} is a self-loop at bus {a}"),
                });
            }
        }
        for (j, &b) in susceptance.iter().enumerate() {
            if !(b > 0.0) {
                return Err(NetworkError::NonPositiveSusceptance { edge: j, value: b });
            }
        }
        for (i, &e) in damping.iter().enumerate() {
            if !(e > 0.0) {
                return Err(NetworkError::NonPositiveDamping { bus: i, value: e });
            }
        }
        let mut any_inertia = false;
        for (i, &m) in inertia.iter().enumerate() {
            if m < 0.0 || !m.is_finite() {
                return Err(NetworkError::NegativeInertia { bus: i, value: m });
            }
            any_inertia |= m > 0.0;
        }
        if !any_inertia {
            return Err(NetworkError::NoInertia);
        }
        let sum: f64 = injection.iter().sum();
        let p_scale = injection.iter().fold(1.0f64, |a, &p| a.max(p.abs()));
        if sum.abs() > BALANCE_TOL * p_scale {
            return Err(NetworkError::UnbalancedInjection { sum });
        }
        if !is_connected(n, &edges) {
            return Err(NetworkError::DisconnectedGraph);
        }

        let mut controlled = controlled;
        controlled.sort_unstable();
        controlled.dedup();
        let mut safety = safety;
        safety.sort_unstable();
        safety.dedup();
        let mut is_controlled = vec![false; n];
        for &i in &controlled {
            if i >= n {
                return Err(NetworkError::InvalidBus { bus: i });
            }
            is_controlled[i] = true;
        }
        let mut is_safety = vec![false; n];
        for &i in &safety {
            if i >= n {
                return Err(NetworkError::InvalidBus { bus: i });
            }
            if !is_controlled[i] {
                return Err(NetworkError::SafetyNotControlled { bus: i });
            }
            is_safety[i] = true;
        }

        Ok(PowerNetwork {
            n_buses: n,
            edges,
            susceptance,
            inertia,
            damping,
            injection,
            controlled,
            safety,
            is_controlled,
            is_safety,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn susceptance(&self) -> &[f64] {
        &self.susceptance
    }

    pub fn inertia(&self) -> &[f64] {
        &self.inertia
    }

    pub fn damping(&self) -> &[f64] {
        &self.damping
    }

    pub fn injection(&self) -> &[f64] {
        &self.injection
    }

    /// Sorted controlled bus set `I_u`.
    pub fn controlled(&self) -> &[usize] {
        &self.controlled
    }

    /// Sorted safety bus set `I_omega`.
    pub fn safety(&self) -> &[usize] {
        &self.safety
    }

    pub fn is_controlled(&self, bus: usize) -> bool {
        self.is_controlled[bus]
    }

    pub fn is_safety(&self, bus: usize) -> bool {
        self.is_safety[bus]
    }

    /// Buses with `M_i = 0` whose frequency is determined algebraically.
    pub fn zero_inertia_buses(&self) -> Vec<usize> {
        (0..self.n_buses).filter(|&i| self.inertia[i] == 0.0).collect()
    }

    /// Returns a copy with a different injection vector (re-validated).
    pub fn with_injection(&self, injection: Vec<f64>) -> Result<Self, NetworkError> {
        Self::new(
            self.edges.clone(),
            self.susceptance.clone(),
            self.inertia.clone(),
            self.damping.clone(),
            injection,
            self.controlled.clone(),
            self.safety.clone(),
        )
    }

    /// Oriented incidence matrix `D` (edges × buses): row `j` has `+1` at the
    /// positive end and `-1` at the negative end of edge `j`.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.edges.len(), self.n_buses);
        for (j, &(a, b)) in self.edges.iter().enumerate() {
            d[(j, a)] = 1.0;
            d[(j, b)] = -1.0;
        }
        d
    }

    /// Weighted Laplacian `L = Dᵀ Y_b D`.
    pub fn weighted_laplacian(&self) -> DMatrix<f64> {
        let n = self.n_buses;
        let mut l = DMatrix::zeros(n, n);
        for (j, &(a, b)) in self.edges.iter().enumerate() {
            let w = self.susceptance[j];
            l[(a, a)] += w;
            l[(b, b)] += w;
            l[(a, b)] -= w;
            l[(b, a)] -= w;
        }
        l
    }

    /// Moore–Penrose pseudoinverse of the weighted Laplacian, computed from a
    /// symmetric eigendecomposition with relative cutoff [`PINV_CUTOFF`].
    pub fn laplacian_pseudoinverse(&self) -> DMatrix<f64> {
        let l = self.weighted_laplacian();
        let eig = l.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let cutoff = PINV_CUTOFF * max_ev;
        let n = self.n_buses;
        let mut pinv = DMatrix::zeros(n, n);
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev.abs() > cutoff {
                let v = eig.eigenvectors.column(k);
                pinv += v * v.transpose() / ev;
            }
        }
        pinv
    }

    /// Maximum difference `|z_a - z_b|` over edges (the edge-wise sup norm).
    pub fn edge_difference_norm(&self, z: &DVector<f64>) -> f64 {
        self.edges
            .iter()
            .fold(0.0f64, |acc, &(a, b)| acc.max((z[a] - z[b]).abs()))
    }

    /// Evaluates the sufficient condition for a unique stable equilibrium:
    /// the edge-wise sup norm of `L† p` must be below one.
    pub fn check_equilibrium_condition(&self) -> EquilibriumCondition {
        let p = DVector::from_column_slice(&self.injection);
        let z = self.laplacian_pseudoinverse() * p;
        let value = self.edge_difference_norm(&z);
        EquilibriumCondition {
            value,
            holds: value < 1.0,
        }
    }

    /// Net electrical torque term `Dᵀ Y_b sin(λ)` at the given edge angles.
    pub fn flow(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_buses);
        for (j, &(a, b)) in self.edges.iter().enumerate() {
            let f = self.susceptance[j] * lambda[j].sin();
            out[a] += f;
            out[b] -= f;
        }
        out
    }

    /// Computes the synchronous equilibrium edge angles `λ∞ ∈ range(D)` with
    /// `|λ∞_j| < π/2`, solving `Dᵀ Y_b sin(λ) = p` by damped Newton on
    /// reduced bus angles (the last bus is grounded).
    pub fn compute_equilibrium(&self) -> Result<DVector<f64>, NetworkError> {
        let n = self.n_buses;
        let m = self.edges.len();
        if m == 0 {
            return Ok(DVector::zeros(0));
        }
        let d = self.incidence_matrix();
        let p = DVector::from_column_slice(&self.injection);
        let p_scale = self.injection.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let tol = NEWTON_TOL * p_scale;
        let cap = std::f64::consts::FRAC_PI_2;

        let mut theta = DVector::zeros(n);
        let mut lambda = DVector::zeros(m);
        let mut residual = self.flow(&lambda) - &p;
        for _ in 0..NEWTON_MAX_ITERS {
            let norm = residual.amax();
            if norm <= tol {
                return Ok(lambda);
            }
            // Reduced Jacobian Dᵀ Y_b cos(λ) D without the grounded bus.
            let mut jac = DMatrix::zeros(n - 1, n - 1);
            for (j, &(a, b)) in self.edges.iter().enumerate() {
                let w = self.susceptance[j] * lambda[j].cos();
                if a < n - 1 {
                    jac[(a, a)] += w;
                }
                if b < n - 1 {
                    jac[(b, b)] += w;
                }
                if a < n - 1 && b < n - 1 {
                    jac[(a, b)] -= w;
                    jac[(b, a)] -= w;
                }
            }
            let rhs = DVector::from_fn(n - 1, |i, _| residual[i]);
            let chol = jac.cholesky().ok_or_else(|| NetworkError::NoConvergence {
                detail: "reduced Jacobian is not positive definite".into(),
            })?;
            let delta = chol.solve(&rhs);

            // Backtracking line search keeping all angles strictly inside
            // (-π/2, π/2) and reducing the residual norm.
            let mut step = 1.0;
            let mut accepted = false;
            while step >= 1e-6 {
                let mut theta_try = theta.clone();
                for i in 0..n - 1 {
                    theta_try[i] -= step * delta[i];
                }
                let lambda_try = &d * &theta_try;
                let inside = lambda_try.iter().all(|&l| l.abs() < cap);
                if inside {
                    let res_try = self.flow(&lambda_try) - &p;
                    if res_try.amax() <= (1.0 - 0.25 * step) * norm {
                        theta = theta_try;
                        lambda = lambda_try;
                        residual = res_try;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                return Err(NetworkError::NoConvergence {
                    detail: format!("line search stalled at residual {norm:.3e}"),
                });
            }
        }
        Err(NetworkError::NoConvergence {
            detail: format!(
                "no convergence after {NEWTON_MAX_ITERS} iterations (residual {:.3e})",
                residual.amax()
            ),
        })
    }
}

/// Result of the stable-equilibrium sufficient condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumCondition {
    /// Edge-wise sup norm of `L† p`.
    pub value: f64,
    /// True when `value < 1`.
    pub holds: bool,
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for &k in &adj[i] {
            if !seen[k] {
                seen[k] = true;
                count += 1;
                stack.push(k);
            }
        }
    }
    count == n
}

/// How the controller forecasts future injections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastMode {
    /// The forecast returns the true future disturbance values.
    Perfect,
    /// The forecast holds the value at the sampling instant constant.
    HoldCurrent,
}

/// Shape of one disturbance segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentShape {
    Constant { level: f64 },
    /// `amplitude · sin(angular_freq · (t − t_ref))`.
    Sine {
        amplitude: f64,
        angular_freq: f64,
        t_ref: f64,
    },
}

/// One time segment of a piecewise disturbance multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub shape: SegmentShape,
}

impl Segment {
    fn value(&self, t: f64) -> f64 {
        match self.shape {
            SegmentShape::Constant { level } => level,
            SegmentShape::Sine {
                amplitude,
                angular_freq,
                t_ref,
            } => amplitude * (angular_freq * (t - t_ref)).sin(),
        }
    }
}

/// Piecewise multiplicative disturbance on a subset of buses:
/// `p_i(t) = (1 + δ(t)) p_i` for disturbed buses, `p_i` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceProfile {
    /// Buses whose injection is scaled.
    pub buses: Vec<usize>,
    /// Ordered, non-overlapping segments; δ is zero outside all segments.
    pub segments: Vec<Segment>,
    pub forecast: ForecastMode,
}

impl DisturbanceProfile {
    /// A disturbance that is identically zero.
    pub fn none() -> Self {
        DisturbanceProfile {
            buses: Vec::new(),
            segments: Vec::new(),
            forecast: ForecastMode::Perfect,
        }
    }

    /// Quarter-sine ramp from zero to `peak` over `[0, t_ramp_end]`, hold at
    /// `peak` until `t_hold_end`, quarter-sine decay back to zero at `t_end`,
    /// zero afterwards.
    pub fn ramp_hold_ramp(
        buses: Vec<usize>,
        peak: f64,
        t_ramp_end: f64,
        t_hold_end: f64,
        t_end: f64,
        forecast: ForecastMode,
    ) -> Self {
        assert!(0.0 < t_ramp_end && t_ramp_end < t_hold_end && t_hold_end < t_end);
        let up = Segment {
            t_start: 0.0,
            t_end: t_ramp_end,
            shape: SegmentShape::Sine {
                amplitude: peak,
                angular_freq: std::f64::consts::FRAC_PI_2 / t_ramp_end,
                t_ref: 0.0,
            },
        };
        let hold = Segment {
            t_start: t_ramp_end,
            t_end: t_hold_end,
            shape: SegmentShape::Constant { level: peak },
        };
        let down_len = t_end - t_hold_end;
        let down = Segment {
            t_start: t_hold_end,
            t_end,
            shape: SegmentShape::Sine {
                amplitude: peak,
                angular_freq: std::f64::consts::FRAC_PI_2 / down_len,
                t_ref: t_hold_end - down_len,
            },
        };
        DisturbanceProfile {
            buses,
            segments: vec![up, hold, down],
            forecast,
        }
    }

    /// Scalar multiplier δ(t); segments are matched first to last.
    pub fn delta(&self, t: f64) -> f64 {
        for seg in &self.segments {
            if t >= seg.t_start && t <= seg.t_end {
                return seg.value(t);
            }
        }
        0.0
    }

    /// Effective injections at time `t`.
    pub fn injection_at(&self, net: &PowerNetwork, t: f64) -> DVector<f64> {
        let mut p = DVector::from_column_slice(net.injection());
        let delta = self.delta(t);
        if delta != 0.0 {
            for &i in &self.buses {
                p[i] *= 1.0 + delta;
            }
        }
        p
    }

    /// Forecast injections for a future time `tau`, as seen from a sample
    /// taken at `t_sample`.
    pub fn forecast_injection(&self, net: &PowerNetwork, t_sample: f64, tau: f64) -> DVector<f64> {
        match self.forecast {
            ForecastMode::Perfect => self.injection_at(net, tau),
            ForecastMode::HoldCurrent => self.injection_at(net, t_sample),
        }
    }
}
