//! Linearised prediction model, discretisations, and MPC QP assembly.
//!
//! Around the origin the swing dynamics with the bottom-layer filter become a
//! descriptor system `G̃ ẋ = Ã x + B̃₁ p + B̃₂ û` on the stacked state
//! `x = (λ, ω, α_BL)`:
//!
//! * `λ̇ = D ω` — edge rows, unit mass;
//! * `M_i ω̇_i = −E_i ω_i − [Dᵀ Y_b λ]_i + p_i + α_BL,i` — bus rows with mass
//!   `M_i` (zero for algebraic buses);
//! * `M_i α̇_BL,i = −α_BL,i/τ_i − ω_i + û_i` for controlled buses, and the
//!   static relation `0 = −α_BL,i + û_i` for uncontrolled buses (whose input
//!   is forced to zero by an equality constraint).  Writing the uncontrolled
//!   rows this way keeps `B̃₂` of full column rank, which the strong convexity
//!   of the assembled program relies on.
//!
//! Discretisation produces implicit recursions `F x̂(k+1) = A x̂(k) + B₁ p̂(k)
//! + B₂ û`; backward Euler is unconditionally stable, forward Euler requires
//! an invertible `G̃` and a small step.
//!
//! [`assemble_mpc_qp`] builds the strongly convex quadratic program over
//! `Y = (X̂, û, S)` whose solution is the MPC input: the stage costs are
//! augmented with squared dynamics residuals and an initial-state penalty —
//! terms that vanish on the feasible set, leave the minimiser unchanged, and
//! make the Hessian positive definite.  Every variable and every constraint
//! row is assigned an owning node or edge agent, and [`locality_audit`]
//! certifies that the Hessian couples only agents within two hops of the
//! node–edge incidence graph and that every constraint row is centred on a
//! single agent and its immediate neighbours.

use crate::dynamics::SystemState;
use crate::netmodel::PowerNetwork;
use crate::sparse::{CsrMatrix, TripletBuilder};
use nalgebra::DVector;
use thiserror::Error;

/// Tolerance above one for the discrete spectral-radius stability test.
pub const SPECTRAL_TOL: f64 = 1e-9;

/// Errors raised by the prediction layer.
#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("descriptor matrix G is singular at state row {row}; forward Euler needs all buses inertial and controlled")]
    SingularG { row: usize },
    #[error("F is singular at step {step}; choose a smaller discretisation step")]
    SingularF { step: f64 },
    #[error("locality violation: {detail}")]
    LocalityViolation { detail: String },
    #[error("dimension mismatch: {detail}")]
    BadDimensions { detail: String },
}

/// Continuous-time descriptor model `G̃ ẋ = Ã x + B̃₁ p + B̃₂ û`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    /// Diagonal of `G̃` (length = state dimension `m + 2n`).
    pub g_diag: DVector<f64>,
    pub a: CsrMatrix,
    pub b1: CsrMatrix,
    pub b2: CsrMatrix,
    pub n_buses: usize,
    pub n_edges: usize,
}

impl LinearModel {
    pub fn state_dim(&self) -> usize {
        self.g_diag.len()
    }
}

/// Builds the linearised descriptor model; `tau` holds the bottom-layer
/// filter time constants per bus (used on controlled buses).
pub fn linearize(net: &PowerNetwork, tau: &[f64]) -> LinearModel {
    let n = net.n_buses();
    let m = net.n_edges();
    assert_eq!(tau.len(), n, "one filter time constant per bus");
    let sd = m + 2 * n;

    let mut g = DVector::zeros(sd);
    let mut a = TripletBuilder::new();
    let mut b1 = TripletBuilder::new();
    let mut b2 = TripletBuilder::new();

    // Edge rows: λ̇_j = ω_a − ω_b.
    for (j, &(pos, neg)) in net.edges().iter().enumerate() {
        g[j] = 1.0;
        a.push(j, m + pos, 1.0);
        a.push(j, m + neg, -1.0);
    }
    // Frequency rows: M_i ω̇_i = −E_i ω_i − [Dᵀ Y_b λ]_i + p_i + α_BL,i.
    for i in 0..n {
        g[m + i] = net.inertia()[i];
        a.push(m + i, m + i, -net.damping()[i]);
        a.push(m + i, m + n + i, 1.0);
        b1.push(m + i, i, 1.0);
    }
    for (j, &(pos, neg)) in net.edges().iter().enumerate() {
        let b = net.susceptance()[j];
        a.push(m + pos, j, -b);
        a.push(m + neg, j, b);
    }
    // Actuation rows: filter dynamics on controlled buses, static zero
    // relation elsewhere.
    for i in 0..n {
        let row = m + n + i;
        if net.is_controlled(i) {
            g[row] = net.inertia()[i];
            a.push(row, m + i, -1.0);
            a.push(row, m + n + i, -1.0 / tau[i]);
        } else {
            g[row] = 0.0;
            a.push(row, m + n + i, -1.0);
        }
        b2.push(row, i, 1.0);
    }

    LinearModel {
        g_diag: g,
        a: a.build(sd, sd),
        b1: b1.build(sd, n),
        b2: b2.build(sd, n),
        n_buses: n,
        n_edges: m,
    }
}

/// Implicit discrete recursion `F x̂(k+1) = A x̂(k) + B₁ p̂(k) + B₂ û`.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    pub f: CsrMatrix,
    pub a: CsrMatrix,
    pub b1: CsrMatrix,
    pub b2: CsrMatrix,
    /// Discretisation step `T`.
    pub step: f64,
    pub n_buses: usize,
    pub n_edges: usize,
}

fn diag_triplets(g: &DVector<f64>) -> Vec<(usize, usize, f64)> {
    g.iter()
        .enumerate()
        .filter(|&(_, &v)| v != 0.0)
        .map(|(i, &v)| (i, i, v))
        .collect()
}

/// Backward-Euler discretisation: `F = G̃ − T Ã`, `A = G̃`, `B_s = T B̃_s`.
///
/// This is the exact implicit-Euler recursion for the descriptor system and
/// remains valid when `G̃` is singular: algebraic rows (`G̃_rr = 0`) enforce
/// their static relation at the new time step.  When `G̃ = I` it reduces to
/// the familiar `A = I` form.  Stable for every step size.
pub fn discretize_backward_euler(lm: &LinearModel, step: f64) -> DiscreteModel {
    assert!(step > 0.0);
    let sd = lm.state_dim();
    let mut f = diag_triplets(&lm.g_diag);
    for (i, j, v) in lm.a.iter() {
        f.push((i, j, -step * v));
    }
    let scale = |m: &CsrMatrix| {
        let t: Vec<(usize, usize, f64)> = m.iter().map(|(i, j, v)| (i, j, step * v)).collect();
        CsrMatrix::from_triplets(m.nrows(), m.ncols(), &t)
    };
    DiscreteModel {
        f: CsrMatrix::from_triplets(sd, sd, &f),
        a: CsrMatrix::from_triplets(sd, sd, &diag_triplets(&lm.g_diag)),
        b1: scale(&lm.b1),
        b2: scale(&lm.b2),
        step,
        n_buses: lm.n_buses,
        n_edges: lm.n_edges,
    }
}

/// Forward-Euler discretisation: `F = G̃`, `A = G̃ + T Ã`, `B_s = T B̃_s`.
/// Requires `G̃` invertible (no zero-inertia and no uncontrolled buses) and is
/// only stable for sufficiently small steps.
pub fn discretize_forward_euler(lm: &LinearModel, step: f64) -> Result<DiscreteModel, PredictionError> {
    assert!(step > 0.0);
    let sd = lm.state_dim();
    for (row, &g) in lm.g_diag.iter().enumerate() {
        if g == 0.0 {
            return Err(PredictionError::SingularG { row });
        }
    }
    let mut a = diag_triplets(&lm.g_diag);
    for (i, j, v) in lm.a.iter() {
        a.push((i, j, step * v));
    }
    let scale = |m: &CsrMatrix| {
        let t: Vec<(usize, usize, f64)> = m.iter().map(|(i, j, v)| (i, j, step * v)).collect();
        CsrMatrix::from_triplets(m.nrows(), m.ncols(), &t)
    };
    Ok(DiscreteModel {
        f: CsrMatrix::from_triplets(sd, sd, &diag_triplets(&lm.g_diag)),
        a: CsrMatrix::from_triplets(sd, sd, &a),
        b1: scale(&lm.b1),
        b2: scale(&lm.b2),
        step,
        n_buses: lm.n_buses,
        n_edges: lm.n_edges,
    })
}

/// Spectral radius of the one-step map `F⁻¹ A`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralReport {
    pub radius: f64,
    /// True when `radius ≤ 1 + SPECTRAL_TOL`.
    pub stable: bool,
}

/// Computes the spectral radius of `F⁻¹ A` with a dense eigensolver.
pub fn spectral_stability_check(dm: &DiscreteModel) -> Result<SpectralReport, PredictionError> {
    let f = dm.f.to_dense();
    let lu = f.lu();
    if !lu.is_invertible() {
        return Err(PredictionError::SingularF { step: dm.step });
    }
    let map = lu
        .solve(&dm.a.to_dense())
        .ok_or(PredictionError::SingularF { step: dm.step })?;
    let eigs = map.complex_eigenvalues();
    let radius = eigs.iter().fold(0.0f64, |acc, e| acc.max(e.norm()));
    Ok(SpectralReport {
        radius,
        stable: radius <= 1.0 + SPECTRAL_TOL,
    })
}

/// Owning agent of a variable or constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Node(usize),
    Edge(usize),
}

/// Index layout of the decision vector `Y = (X̂, û, S)`.
///
/// States are stacked per prediction step (`k = 1..=N`), each as
/// `(λ̂, ω̂, α̂_BL)`; then the `n` inputs `û`; then one slack per safety bus
/// and step.
#[derive(Debug, Clone, PartialEq)]
pub struct QpDims {
    pub n_buses: usize,
    pub n_edges: usize,
    pub horizon: usize,
    pub controlled: Vec<usize>,
    pub safety: Vec<usize>,
}

impl QpDims {
    pub fn state_dim(&self) -> usize {
        self.n_edges + 2 * self.n_buses
    }

    /// Total number of decision variables.
    pub fn dim(&self) -> usize {
        self.state_dim() * self.horizon + self.n_buses + self.safety.len() * self.horizon
    }

    /// Number of equality rows: dynamics, initial condition, and forced-zero
    /// inputs at uncontrolled buses.
    pub fn n_eq(&self) -> usize {
        self.state_dim() * self.horizon + self.n_buses - self.controlled.len()
    }

    /// Number of inequality rows: two frequency bounds per safety bus and
    /// step plus two sensitivity bounds per controlled bus.
    pub fn n_ineq(&self) -> usize {
        2 * self.safety.len() * self.horizon + 2 * self.controlled.len()
    }

    /// Index of state component `r` of `x̂(k)`, `k ∈ 1..=N`.
    pub fn state_var(&self, k: usize, r: usize) -> usize {
        debug_assert!(1 <= k && k <= self.horizon && r < self.state_dim());
        (k - 1) * self.state_dim() + r
    }

    pub fn lambda_var(&self, k: usize, edge: usize) -> usize {
        self.state_var(k, edge)
    }

    pub fn omega_var(&self, k: usize, bus: usize) -> usize {
        self.state_var(k, self.n_edges + bus)
    }

    pub fn alpha_var(&self, k: usize, bus: usize) -> usize {
        self.state_var(k, self.n_edges + self.n_buses + bus)
    }

    pub fn u_var(&self, bus: usize) -> usize {
        self.state_dim() * self.horizon + bus
    }

    pub fn slack_var(&self, k: usize, safety_slot: usize) -> usize {
        debug_assert!(safety_slot < self.safety.len());
        self.state_dim() * self.horizon + self.n_buses + (k - 1) * self.safety.len() + safety_slot
    }

    /// Owner of state component `r`: edge rows belong to their edge agent,
    /// frequency and actuation rows to their bus agent.
    pub fn state_row_owner(&self, r: usize) -> Owner {
        if r < self.n_edges {
            Owner::Edge(r)
        } else if r < self.n_edges + self.n_buses {
            Owner::Node(r - self.n_edges)
        } else {
            Owner::Node(r - self.n_edges - self.n_buses)
        }
    }
}

/// MPC cost and bound parameters, one entry per bus (entries outside the
/// relevant set are ignored where noted).
#[derive(Debug, Clone)]
pub struct MpcWeights {
    /// Actuation effort weight `c_i` (applies to every predicted `α̂_BL,i`).
    pub c: Vec<f64>,
    /// Slack penalty `d_i` (safety buses).
    pub d: Vec<f64>,
    /// Sensitivity bound factor `ε_i` (controlled buses).
    pub epsilon: Vec<f64>,
    /// Frequency band `[ω̲_i, ω̄_i]` in rad/s (safety buses).
    pub omega_min: Vec<f64>,
    pub omega_max: Vec<f64>,
}

/// Assembled convex quadratic program
/// `min ½ YᵀHY + fᵀY + constant  s.t.  R₁Y ≤ r₁, R₂Y = r₂`
/// together with agent-ownership metadata.
///
/// Across MPC samples on a fixed network only `f`, `r1_rhs`, `r2_rhs` (and
/// `constant`) change; `h`, `r1`, `r2` are structural.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub h: CsrMatrix,
    pub f: DVector<f64>,
    pub constant: f64,
    pub r1: CsrMatrix,
    pub r1_rhs: DVector<f64>,
    pub r2: CsrMatrix,
    pub r2_rhs: DVector<f64>,
    pub var_owner: Vec<Owner>,
    pub ineq_owner: Vec<Owner>,
    pub eq_owner: Vec<Owner>,
    /// Sign `η_i ∈ {+1, −1}` of `α_BL,i` at the sample, per controlled bus
    /// (in `dims.controlled` order); `+1` at zero.
    pub sign_pattern: Vec<f64>,
    pub dims: QpDims,
    /// Bus endpoints per edge (for locality checks and agent construction).
    pub edges: Vec<(usize, usize)>,
}

impl QpInstance {
    /// Objective value `½ yᵀHy + fᵀy + constant`.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&self.h.mul_vec(y)) + self.f.dot(y) + self.constant
    }

    /// Cheap structural fingerprint used to confirm that cached
    /// factorisations remain valid across samples: nonzero counts plus value
    /// sums of the three structural matrices.
    pub fn structure_fingerprint(&self) -> (usize, usize, usize, f64, f64, f64) {
        let sum = |m: &CsrMatrix| m.iter().map(|(_, _, v)| v).sum::<f64>();
        (
            self.h.nnz(),
            self.r1.nnz(),
            self.r2.nnz(),
            sum(&self.h),
            sum(&self.r1),
            sum(&self.r2),
        )
    }

    /// Extracts the optimal input `û*` (length `n_buses`) from a solution
    /// vector, forcing exact zeros at uncontrolled buses.
    pub fn extract_input(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut u = DVector::zeros(self.dims.n_buses);
        for &i in &self.dims.controlled {
            u[i] = y[self.dims.u_var(i)];
        }
        u
    }
}

/// Stacks a [`SystemState`] into the prediction state ordering `(λ, ω, α)`.
pub fn stack_state(state: &SystemState) -> DVector<f64> {
    let m = state.lambda.len();
    let n = state.omega.len();
    let mut x = DVector::zeros(m + 2 * n);
    x.rows_mut(0, m).copy_from(&state.lambda);
    x.rows_mut(m, n).copy_from(&state.omega);
    x.rows_mut(m + n, n).copy_from(&state.alpha_bl);
    x
}

/// Assembles the MPC quadratic program at a sample state.
///
/// `forecast` holds the predicted injections `p̂(k)` for `k = 1..N-1` (the
/// transitions); extra entries are ignored.
pub fn assemble_mpc_qp(
    dm: &DiscreteModel,
    net: &PowerNetwork,
    weights: &MpcWeights,
    horizon: usize,
    x0: &SystemState,
    forecast: &[DVector<f64>],
) -> Result<QpInstance, PredictionError> {
    let n = net.n_buses();
    let m = net.n_edges();
    let sd = m + 2 * n;
    if dm.n_buses != n || dm.n_edges != m || dm.f.nrows() != sd {
        return Err(PredictionError::BadDimensions {
            detail: "discrete model does not match network".into(),
        });
    }
    if horizon < 1 {
        return Err(PredictionError::BadDimensions {
            detail: "horizon must be at least 1".into(),
        });
    }
    if forecast.len() + 1 < horizon {
        return Err(PredictionError::BadDimensions {
            detail: format!(
                "need {} forecast vectors for horizon {horizon}, got {}",
                horizon - 1,
                forecast.len()
            ),
        });
    }
    for w in [&weights.c, &weights.d, &weights.epsilon, &weights.omega_min, &weights.omega_max] {
        if w.len() != n {
            return Err(PredictionError::BadDimensions {
                detail: "weight vectors must have one entry per bus".into(),
            });
        }
    }

    let dims = QpDims {
        n_buses: n,
        n_edges: m,
        horizon,
        controlled: net.controlled().to_vec(),
        safety: net.safety().to_vec(),
    };
    let dim = dims.dim();
    let x0v = stack_state(x0);
    if x0v.len() != sd {
        return Err(PredictionError::BadDimensions {
            detail: "sample state does not match network".into(),
        });
    }

    // --- Objective -------------------------------------------------------
    let mut h = TripletBuilder::new();
    let mut f = DVector::zeros(dim);
    let mut constant = 0.0;

    // Stage costs: c_i α̂²_BL,i(k) for every bus, d_i s_i²(k) for safety buses.
    for k in 1..=horizon {
        for i in 0..n {
            h.push(dims.alpha_var(k, i), dims.alpha_var(k, i), 2.0 * weights.c[i]);
        }
        for (slot, &i) in dims.safety.iter().enumerate() {
            h.push(dims.slack_var(k, slot), dims.slack_var(k, slot), 2.0 * weights.d[i]);
        }
    }

    // Dynamics-residual penalties ‖F x̂(k+1) − A x̂(k) − B₂ û − B₁ p̂(k)‖².
    let mut residual_row: Vec<(usize, f64)> = Vec::with_capacity(16);
    for k in 1..horizon {
        let w_k = dm.b1.mul_vec(&forecast[k - 1]);
        for r in 0..sd {
            residual_row.clear();
            let (cols, vals) = dm.f.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                residual_row.push((dims.state_var(k + 1, c), v));
            }
            let (cols, vals) = dm.a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                residual_row.push((dims.state_var(k, c), -v));
            }
            let (cols, vals) = dm.b2.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                residual_row.push((dims.u_var(c), -v));
            }
            for &(ia, va) in &residual_row {
                for &(ib, vb) in &residual_row {
                    h.push(ia, ib, 2.0 * va * vb);
                }
                f[ia] -= 2.0 * w_k[r] * va;
            }
            constant += w_k[r] * w_k[r];
        }
    }

    // Initial-state penalty ‖x̂(1) − x(t^w)‖².
    for r in 0..sd {
        let idx = dims.state_var(1, r);
        h.push(idx, idx, 2.0);
        f[idx] -= 2.0 * x0v[r];
        constant += x0v[r] * x0v[r];
    }

    // --- Equalities ------------------------------------------------------
    let n_eq = dims.n_eq();
    let mut r2 = TripletBuilder::new();
    let mut r2_rhs = DVector::zeros(n_eq);
    let mut eq_owner = Vec::with_capacity(n_eq);

    // Dynamics rows for k = 1..N-1.
    let mut row_idx = 0;
    for k in 1..horizon {
        let w_k = dm.b1.mul_vec(&forecast[k - 1]);
        for r in 0..sd {
            let (cols, vals) = dm.f.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                r2.push(row_idx, dims.state_var(k + 1, c), v);
            }
            let (cols, vals) = dm.a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                r2.push(row_idx, dims.state_var(k, c), -v);
            }
            let (cols, vals) = dm.b2.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                r2.push(row_idx, dims.u_var(c), -v);
            }
            r2_rhs[row_idx] = w_k[r];
            eq_owner.push(dims.state_row_owner(r));
            row_idx += 1;
        }
    }
    // Initial condition x̂(1) = x(t^w).
    for r in 0..sd {
        r2.push(row_idx, dims.state_var(1, r), 1.0);
        r2_rhs[row_idx] = x0v[r];
        eq_owner.push(dims.state_row_owner(r));
        row_idx += 1;
    }
    // û_i = 0 at uncontrolled buses.
    for i in 0..n {
        if !net.is_controlled(i) {
            r2.push(row_idx, dims.u_var(i), 1.0);
            r2_rhs[row_idx] = 0.0;
            eq_owner.push(Owner::Node(i));
            row_idx += 1;
        }
    }
    debug_assert_eq!(row_idx, n_eq);

    // --- Inequalities ----------------------------------------------------
    let n_ineq = dims.n_ineq();
    let mut r1 = TripletBuilder::new();
    let mut r1_rhs = DVector::zeros(n_ineq);
    let mut ineq_owner = Vec::with_capacity(n_ineq);

    // Soft frequency bounds: ω̂_i(k) − s_i(k) ≤ ω̄_i and
    // −ω̂_i(k) − s_i(k) ≤ −ω̲_i, for k = 1..N.
    let mut row_idx = 0;
    for k in 1..=horizon {
        for (slot, &i) in dims.safety.iter().enumerate() {
            r1.push(row_idx, dims.omega_var(k, i), 1.0);
            r1.push(row_idx, dims.slack_var(k, slot), -1.0);
            r1_rhs[row_idx] = weights.omega_max[i];
            ineq_owner.push(Owner::Node(i));
            row_idx += 1;

            r1.push(row_idx, dims.omega_var(k, i), -1.0);
            r1.push(row_idx, dims.slack_var(k, slot), -1.0);
            r1_rhs[row_idx] = -weights.omega_min[i];
            ineq_owner.push(Owner::Node(i));
            row_idx += 1;
        }
    }
    // Sensitivity bounds ±û_i ≤ ε_i |α_BL,i(t^w)|, written with the sign
    // pattern η_i = sgn(α_BL,i(t^w)) so that the rows are structural and only
    // the right-hand side varies between samples.
    let mut sign_pattern = Vec::with_capacity(dims.controlled.len());
    for &i in &dims.controlled {
        let eta = if x0.alpha_bl[i] >= 0.0 { 1.0 } else { -1.0 };
        sign_pattern.push(eta);
        let bound = weights.epsilon[i] * eta * x0.alpha_bl[i];
        r1.push(row_idx, dims.u_var(i), 1.0);
        r1_rhs[row_idx] = bound;
        ineq_owner.push(Owner::Node(i));
        row_idx += 1;
        r1.push(row_idx, dims.u_var(i), -1.0);
        r1_rhs[row_idx] = bound;
        ineq_owner.push(Owner::Node(i));
        row_idx += 1;
    }
    debug_assert_eq!(row_idx, n_ineq);

    // --- Variable ownership ---------------------------------------------
    let mut var_owner = Vec::with_capacity(dim);
    for _k in 1..=horizon {
        for r in 0..sd {
            var_owner.push(dims.state_row_owner(r));
        }
    }
    for i in 0..n {
        var_owner.push(Owner::Node(i));
    }
    for _k in 1..=horizon {
        for &i in &dims.safety {
            var_owner.push(Owner::Node(i));
        }
    }
    debug_assert_eq!(var_owner.len(), dim);

    Ok(QpInstance {
        h: h.build(dim, dim),
        f,
        constant,
        r1: r1.build(n_ineq, dim),
        r1_rhs,
        r2: r2.build(n_eq, dim),
        r2_rhs,
        var_owner,
        ineq_owner,
        eq_owner,
        sign_pattern,
        dims,
        edges: net.edges().to_vec(),
    })
}

/// Hessian of the plain stage cost (no residual augmentation, no
/// initial-state penalty).  Subject to the same constraints it has the same
/// minimiser as the augmented objective, since the augmentation terms vanish
/// on the feasible set; exposed for equivalence checks.
pub fn stage_cost_hessian(net: &PowerNetwork, weights: &MpcWeights, horizon: usize) -> CsrMatrix {
    let dims = QpDims {
        n_buses: net.n_buses(),
        n_edges: net.n_edges(),
        horizon,
        controlled: net.controlled().to_vec(),
        safety: net.safety().to_vec(),
    };
    let mut h = TripletBuilder::new();
    for k in 1..=horizon {
        for i in 0..net.n_buses() {
            h.push(dims.alpha_var(k, i), dims.alpha_var(k, i), 2.0 * weights.c[i]);
        }
        for (slot, &i) in dims.safety.iter().enumerate() {
            h.push(dims.slack_var(k, slot), dims.slack_var(k, slot), 2.0 * weights.d[i]);
        }
    }
    h.build(dims.dim(), dims.dim())
}

/// Pairwise distance between owners in the node–edge incidence graph
/// (`usize::MAX` when farther than 2).
fn owner_distance_capped(a: Owner, b: Owner, edges: &[(usize, usize)]) -> usize {
    let incident = |i: usize, e: usize| edges[e].0 == i || edges[e].1 == i;
    match (a, b) {
        _ if a == b => 0,
        (Owner::Node(i), Owner::Edge(e)) | (Owner::Edge(e), Owner::Node(i)) => {
            if incident(i, e) {
                1
            } else {
                usize::MAX
            }
        }
        (Owner::Node(i), Owner::Node(j)) => {
            if edges.iter().any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i)) {
                2
            } else {
                usize::MAX
            }
        }
        (Owner::Edge(e), Owner::Edge(g)) => {
            let (a0, a1) = edges[e];
            let (b0, b1) = edges[g];
            if a0 == b0 || a0 == b1 || a1 == b0 || a1 == b1 {
                2
            } else {
                usize::MAX
            }
        }
    }
}

/// Structural locality certificate.
#[derive(Debug, Clone, Copy)]
pub struct LocalityReport {
    /// Off-diagonal Hessian nonzeros checked.
    pub h_couplings: usize,
    /// Largest owner distance seen in the Hessian (≤ 2).
    pub max_h_distance: usize,
    /// Constraint rows checked.
    pub rows_checked: usize,
}

/// Verifies that the assembled program is 2-hop local: every Hessian nonzero
/// couples variables whose owners are at incidence distance ≤ 2, and every
/// constraint row involves only one "home" agent and owners at distance ≤ 1
/// from it.
pub fn locality_audit(qp: &QpInstance) -> Result<LocalityReport, PredictionError> {
    let edges = &qp.edges;
    let mut h_couplings = 0usize;
    let mut max_h_distance = 0usize;
    for (i, j, v) in qp.h.iter() {
        if i == j || v == 0.0 {
            continue;
        }
        let d = owner_distance_capped(qp.var_owner[i], qp.var_owner[j], edges);
        if d > 2 {
            return Err(PredictionError::LocalityViolation {
                detail: format!(
                    "H[{i},{j}] couples {:?} and {:?} beyond two hops",
                    qp.var_owner[i], qp.var_owner[j]
                ),
            });
        }
        h_couplings += 1;
        max_h_distance = max_h_distance.max(d);
    }

    let mut rows_checked = 0usize;
    let mut check_rows = |mat: &CsrMatrix, owners: &[Owner], kind: &str| -> Result<(), PredictionError> {
        for r in 0..mat.nrows() {
            let (cols, _) = mat.row(r);
            if cols.is_empty() {
                continue;
            }
            let home = owners[r];
            for &c in cols {
                let d = owner_distance_capped(home, qp.var_owner[c], edges);
                if d > 1 {
                    return Err(PredictionError::LocalityViolation {
                        detail: format!(
                            "{kind} row {r} (home {home:?}) reads variable {c} owned by {:?}",
                            qp.var_owner[c]
                        ),
                    });
                }
            }
            rows_checked += 1;
        }
        Ok(())
    };
    check_rows(&qp.r1, &qp.ineq_owner, "inequality")?;
    check_rows(&qp.r2, &qp.eq_owner, "equality")?;

    Ok(LocalityReport {
        h_couplings,
        max_h_distance,
        rows_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::PowerNetwork;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn uniform(n: usize, v: f64) -> Vec<f64> {
        vec![v; n]
    }

    fn default_weights(net: &PowerNetwork) -> MpcWeights {
        let n = net.n_buses();
        let mut c = uniform(n, 1.0);
        for &i in net.safety() {
            c[i] = 4.0;
        }
        MpcWeights {
            c,
            d: uniform(n, 100.0),
            epsilon: uniform(n, 1.9),
            omega_min: uniform(n, -1.2566370614359172),
            omega_max: uniform(n, 1.2566370614359172),
        }
    }

    /// Two buses, one line, bus 0 controlled: the hand-derived 5×5 model.
    #[test]
    fn linearize_two_bus_hand_example() {
        let net = PowerNetwork::new(
            vec![(0, 1)],
            vec![1.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![0.0, 0.0],
            vec![0],
            vec![0],
        )
        .unwrap();
        let lm = linearize(&net, &[0.5, 0.5]);
        assert_eq!(lm.state_dim(), 5);
        assert_eq!(
            lm.g_diag,
            nalgebra::DVector::from_vec(vec![1.0, 1.0, 2.0, 1.0, 0.0])
        );
        let expected_a = DMatrix::from_row_slice(
            5,
            5,
            &[
                0.0, 1.0, -1.0, 0.0, 0.0, // λ̇ = ω₀ − ω₁
                -1.0, -3.0, 0.0, 1.0, 0.0, // M₀ω̇₀
                1.0, 0.0, -4.0, 0.0, 1.0, // M₁ω̇₁
                0.0, -1.0, 0.0, -2.0, 0.0, // filter at bus 0 (τ = 0.5)
                0.0, 0.0, 0.0, 0.0, -1.0, // static zero at bus 1
            ],
        );
        assert_eq!(lm.a.to_dense(), expected_a);
        let expected_b1 = DMatrix::from_row_slice(
            5,
            2,
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        );
        assert_eq!(lm.b1.to_dense(), expected_b1);
        let expected_b2 = DMatrix::from_row_slice(
            5,
            2,
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        );
        assert_eq!(lm.b2.to_dense(), expected_b2);
    }

    #[test]
    fn b2_has_full_column_rank() {
        for seed in 0..5 {
            let net = crate::netgen::random_network(seed, 3, 6);
            let lm = linearize(&net, &uniform(net.n_buses(), 0.5));
            let svd = lm.b2.to_dense().svd(false, false);
            let min_sv = svd.singular_values.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min_sv > 0.9, "B₂ must keep full column rank");
        }
    }

    /// Scalar descriptor ẋ = −x: backward Euler gives x⁺ = x / (1 + T),
    /// forward Euler x⁺ = (1 − T) x, unstable for T > 2.
    #[test]
    fn scalar_discretisation_examples() {
        let lm = LinearModel {
            g_diag: nalgebra::DVector::from_vec(vec![1.0]),
            a: CsrMatrix::from_triplets(1, 1, &[(0, 0, -1.0)]),
            b1: CsrMatrix::from_triplets(1, 0, &[]),
            b2: CsrMatrix::from_triplets(1, 0, &[]),
            n_buses: 0,
            n_edges: 1,
        };
        let be = discretize_backward_euler(&lm, 0.5);
        assert_eq!(be.f.get(0, 0), 1.5);
        assert_eq!(be.a.get(0, 0), 1.0);
        let rep = spectral_stability_check(&be).unwrap();
        assert_relative_eq!(rep.radius, 1.0 / 1.5, epsilon = 1e-12);
        assert!(rep.stable);

        let fe = discretize_forward_euler(&lm, 0.5).unwrap();
        assert_eq!(fe.f.get(0, 0), 1.0);
        assert_eq!(fe.a.get(0, 0), 0.5);
        assert!(spectral_stability_check(&fe).unwrap().stable);

        let fe_big = discretize_forward_euler(&lm, 3.0).unwrap();
        let rep = spectral_stability_check(&fe_big).unwrap();
        assert_relative_eq!(rep.radius, 2.0, epsilon = 1e-12);
        assert!(!rep.stable);
    }

    #[test]
    fn forward_euler_rejects_singular_descriptor() {
        // Zero-inertia bus 1 makes G̃ singular.
        let net = PowerNetwork::new(
            vec![(0, 1)],
            vec![1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![0, 1],
            vec![0],
        )
        .unwrap();
        let lm = linearize(&net, &uniform(2, 0.5));
        assert!(matches!(
            discretize_forward_euler(&lm, 0.1),
            Err(PredictionError::SingularG { .. })
        ));
    }

    #[test]
    fn backward_euler_stable_across_steps() {
        for seed in [0u64, 3, 7] {
            let net = crate::netgen::random_network(seed, 2, 6);
            let lm = linearize(&net, &uniform(net.n_buses(), 0.5));
            for step in [0.05, 0.2, 1.0, 5.0] {
                let dm = discretize_backward_euler(&lm, step);
                let rep = spectral_stability_check(&dm).unwrap();
                assert!(
                    rep.stable,
                    "seed {seed} step {step}: radius {}",
                    rep.radius
                );
            }
        }
    }

    /// Lightly damped two-bus oscillator: forward Euler diverges for large
    /// steps while backward Euler stays contractive.
    #[test]
    fn forward_euler_unstable_for_large_step() {
        let net = PowerNetwork::new(
            vec![(0, 1)],
            vec![1.0],
            vec![1.0, 1.0],
            vec![0.05, 0.05],
            vec![0.0, 0.0],
            vec![0, 1],
            vec![0],
        )
        .unwrap();
        let lm = linearize(&net, &uniform(2, 0.5));
        let fe = discretize_forward_euler(&lm, 10.0).unwrap();
        let rep = spectral_stability_check(&fe).unwrap();
        assert!(rep.radius > 1.0 + SPECTRAL_TOL, "radius {}", rep.radius);
        let be = discretize_backward_euler(&lm, 10.0);
        assert!(spectral_stability_check(&be).unwrap().stable);
    }

    /// One-step responses of the two discretisations agree to O(T²).
    #[test]
    fn discretisations_agree_to_second_order() {
        let net = PowerNetwork::new(
            vec![(0, 1)],
            vec![2.0],
            vec![1.0, 1.5],
            vec![0.8, 1.1],
            vec![0.3, -0.3],
            vec![0, 1],
            vec![0],
        )
        .unwrap();
        let lm = linearize(&net, &uniform(2, 0.5));
        let x0 = nalgebra::DVector::from_vec(vec![0.1, 0.2, -0.1, 0.05, -0.02]);
        let p = nalgebra::DVector::from_vec(vec![0.3, -0.3]);
        let u = nalgebra::DVector::from_vec(vec![0.04, 0.01]);
        let one_step = |dm: &DiscreteModel| {
            let rhs = dm.a.mul_vec(&x0) + dm.b1.mul_vec(&p) + dm.b2.mul_vec(&u);
            dm.f.to_dense().lu().solve(&rhs).unwrap()
        };
        let diff_at = |t: f64| {
            let be = one_step(&discretize_backward_euler(&lm, t));
            let fe = one_step(&discretize_forward_euler(&lm, t).unwrap());
            (be - fe).amax()
        };
        let e1 = diff_at(0.02);
        let e2 = diff_at(0.01);
        let ratio = e1 / e2;
        assert!(
            (3.0..5.0).contains(&ratio),
            "halving the step should quarter the difference (ratio {ratio})"
        );
    }

    fn standard39() -> PowerNetwork {
        let edges = crate::netgen::standard_39bus_edges();
        let n = 39;
        let mut inertia = vec![0.0; n];
        for (g, m) in (29..39).zip([3.0, 2.5, 3.5, 2.8, 2.6, 3.4, 2.9, 2.4, 2.4, 4.2]) {
            inertia[g] = m;
        }
        let damping = vec![1.0; n];
        // 29 load buses drawing −0.1 each, balanced by the ten generators.
        let mut injection = vec![-0.1; n];
        let total: f64 = injection.iter().take(29).sum();
        for g in 29..39 {
            injection[g] = -total / 10.0;
        }
        let m = edges.len();
        PowerNetwork::new(
            edges,
            vec![5.0; m],
            inertia,
            damping,
            injection,
            vec![2, 6, 24, 29, 30, 31, 36],
            vec![29, 30, 31, 36],
        )
        .unwrap()
    }

    #[test]
    fn assembled_dimensions_match_closed_forms() {
        let net = standard39();
        assert_eq!(net.n_buses(), 39);
        assert_eq!(net.n_edges(), 46);
        let lm = linearize(&net, &uniform(39, 0.5));
        let dm = discretize_backward_euler(&lm, 0.2);
        let weights = default_weights(&net);
        let x0 = SystemState::zeros(&net);
        let p = nalgebra::DVector::from_column_slice(net.injection());
        let forecast = vec![p; 49];
        let qp = assemble_mpc_qp(&dm, &net, &weights, 50, &x0, &forecast).unwrap();
        // (m + 2n + |I_ω|) N + n and the two row counts.
        assert_eq!(qp.dims.dim(), (46 + 78 + 4) * 50 + 39);
        assert_eq!(qp.dims.dim(), 6439);
        assert_eq!(qp.r1.nrows(), 2 * 4 * 50 + 2 * 7);
        assert_eq!(qp.r1.nrows(), 414);
        assert_eq!(qp.r2.nrows(), (46 + 78) * 50 + 39 - 7);
        assert_eq!(qp.r2.nrows(), 6232);
        assert_eq!(qp.var_owner.len(), 6439);
        assert_eq!(qp.ineq_owner.len(), 414);
        assert_eq!(qp.eq_owner.len(), 6232);
        // The assembled program is structurally 2-hop local.
        let report = locality_audit(&qp).unwrap();
        assert!(report.max_h_distance <= 2);
        assert_eq!(qp.h.max_asymmetry(), 0.0);
    }

    fn small_instance(seed: u64, horizon: usize) -> (PowerNetwork, QpInstance) {
        let net = crate::netgen::random_network(seed, 2, 6);
        let lm = linearize(&net, &uniform(net.n_buses(), 0.5));
        let dm = discretize_backward_euler(&lm, 0.2);
        let weights = default_weights(&net);
        let mut x0 = SystemState::zeros(&net);
        for i in 0..net.n_buses() {
            x0.omega[i] = 0.1 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
            if net.is_controlled(i) {
                x0.alpha_bl[i] = 0.05 * (i as f64 - 1.0);
            }
        }
        let p = nalgebra::DVector::from_column_slice(net.injection());
        let forecast = vec![p; horizon.saturating_sub(1)];
        let qp = assemble_mpc_qp(&dm, &net, &weights, horizon, &x0, &forecast).unwrap();
        (net, qp)
    }

    #[test]
    fn hessian_is_positive_definite_and_symmetric() {
        for seed in 0..6 {
            let (_, qp) = small_instance(seed, 5);
            assert_eq!(qp.h.max_asymmetry(), 0.0);
            let eig = qp.h.to_dense().symmetric_eigen();
            let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min_ev > 1e-10, "seed {seed}: min eigenvalue {min_ev:.3e}");
        }
    }

    #[test]
    fn structure_constant_across_samples() {
        let net = crate::netgen::random_network(4, 3, 5);
        let lm = linearize(&net, &uniform(net.n_buses(), 0.5));
        let dm = discretize_backward_euler(&lm, 0.2);
        let weights = default_weights(&net);
        let p = nalgebra::DVector::from_column_slice(net.injection());
        let x_a = SystemState::zeros(&net);
        let mut x_b = SystemState::zeros(&net);
        x_b.omega[0] = 0.7;
        if let Some(&i) = net.controlled().first() {
            x_b.alpha_bl[i] = -0.2;
        }
        let qp_a = assemble_mpc_qp(&dm, &net, &weights, 6, &x_a, &vec![p.clone(); 5]).unwrap();
        let qp_b =
            assemble_mpc_qp(&dm, &net, &weights, 6, &x_b, &vec![p * 1.5; 5]).unwrap();
        // Matrices are structural even across a sign flip of α_BL; only the
        // linear terms and right-hand sides move.
        assert_eq!(qp_a.h, qp_b.h);
        assert_eq!(qp_a.r1, qp_b.r1);
        assert_eq!(qp_a.r2, qp_b.r2);
        assert_ne!(qp_a.f, qp_b.f);
        assert_ne!(qp_a.r2_rhs, qp_b.r2_rhs);
        assert_ne!(qp_a.sign_pattern, qp_b.sign_pattern);
        assert!(qp_b.r1_rhs.iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn zero_actuation_state_yields_zero_input_bounds() {
        let (net, qp) = {
            let net = crate::netgen::random_network(2, 3, 4);
            let lm = linearize(&net, &uniform(net.n_buses(), 0.5));
            let dm = discretize_backward_euler(&lm, 0.2);
            let weights = default_weights(&net);
            let x0 = SystemState::zeros(&net);
            let p = nalgebra::DVector::from_column_slice(net.injection());
            let qp = assemble_mpc_qp(&dm, &net, &weights, 4, &x0, &vec![p; 3]).unwrap();
            (net, qp)
        };
        // The trailing 2|I_u| inequality rows bound ±û_i by ε·|α_BL| = 0.
        let n_bound_rows = 2 * net.controlled().len();
        let start = qp.r1.nrows() - n_bound_rows;
        for r in start..qp.r1.nrows() {
            assert_eq!(qp.r1_rhs[r], 0.0);
        }
        assert!(qp.sign_pattern.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn locality_audit_flags_corrupted_instances() {
        let (_, mut qp) = small_instance(1, 4);
        let report = locality_audit(&qp).unwrap();
        assert!(report.h_couplings > 0);

        // Couple two variables owned by agents far apart (a slack of bus a
        // and the state of a non-adjacent object): corrupt H directly.
        let find_far_pair = || {
            for i in 0..qp.var_owner.len() {
                for j in 0..qp.var_owner.len() {
                    if owner_distance_capped(qp.var_owner[i], qp.var_owner[j], &qp.edges)
                        == usize::MAX
                    {
                        return Some((i, j));
                    }
                }
            }
            None
        };
        if let Some((i, j)) = find_far_pair() {
            let mut triplets: Vec<(usize, usize, f64)> = qp.h.iter().collect();
            triplets.push((i, j, 1e-3));
            triplets.push((j, i, 1e-3));
            qp.h = CsrMatrix::from_triplets(qp.h.nrows(), qp.h.ncols(), &triplets);
            assert!(matches!(
                locality_audit(&qp),
                Err(PredictionError::LocalityViolation { .. })
            ));
        }
    }

    /// A dense (impulse-invariant style) discretisation `A = exp(G̃⁻¹ Ã T)`
    /// on a three-bus path couples non-adjacent agents and fails the audit.
    #[test]
    fn dense_exponential_discretisation_fails_locality() {
        let net = PowerNetwork::new(
            vec![(0, 1), (1, 2)],
            vec![2.0, 2.0],
            vec![1.0, 1.0, 1.0],
            vec![0.5, 0.5, 0.5],
            vec![0.1, 0.0, -0.1],
            vec![0, 1, 2],
            vec![0],
        )
        .unwrap();
        let lm = linearize(&net, &uniform(3, 0.5));
        let g_inv_a = {
            let mut a = lm.a.to_dense();
            for r in 0..a.nrows() {
                for c in 0..a.ncols() {
                    a[(r, c)] /= lm.g_diag[r];
                }
            }
            a
        };
        let expm = (g_inv_a * 0.2).exp();
        let sd = lm.state_dim();
        let mut a_trip = Vec::new();
        for r in 0..sd {
            for c in 0..sd {
                if expm[(r, c)].abs() > 1e-12 {
                    a_trip.push((r, c, expm[(r, c)]));
                }
            }
        }
        let dm = DiscreteModel {
            f: CsrMatrix::identity(sd),
            a: CsrMatrix::from_triplets(sd, sd, &a_trip),
            b1: discretize_backward_euler(&lm, 0.2).b1,
            b2: discretize_backward_euler(&lm, 0.2).b2,
            step: 0.2,
            n_buses: 3,
            n_edges: 2,
        };
        let weights = default_weights(&net);
        let x0 = SystemState::zeros(&net);
        let p = nalgebra::DVector::from_column_slice(net.injection());
        let qp = assemble_mpc_qp(&dm, &net, &weights, 3, &x0, &vec![p; 2]).unwrap();
        assert!(matches!(
            locality_audit(&qp),
            Err(PredictionError::LocalityViolation { .. })
        ));
    }

    #[test]
    fn stage_cost_hessian_is_a_diagonal_subset() {
        let net = crate::netgen::random_network(5, 3, 5);
        let weights = default_weights(&net);
        let h = stage_cost_hessian(&net, &weights, 4);
        for (i, j, v) in h.iter() {
            assert_eq!(i, j);
            assert!(v > 0.0);
        }
    }
}
