//! QP solvers: a centralised reference oracle and projected saddle-point
//! dynamics executed either centrally or as a round-based multi-agent
//! simulation.
//!
//! The reference solver factorises the equality-KKT matrix
//! `K₀ = [H R₂ᵀ; R₂ 0]` once per program structure and then runs a dual
//! active-set iteration on the inequality rows, caching the `K₀⁻¹`-images of
//! activated rows; across MPC samples only the linear terms change, so both
//! the factorisation and the cached columns are reused.  Its contract is the
//! KKT residual bound, not the algorithm.
//!
//! The saddle-point path integrates the projected flow
//!
//! ```text
//! ε_Z Ż  = −(H Z + f + R₁ᵀ η + R₂ᵀ μ)
//! ε_η η̇ = [R₁ Z − r₁]⁺_η        (projected to keep η ≥ 0)
//! ε_μ μ̇ = R₂ Z − r₂
//! ```
//!
//! with explicit Euler steps.  The flow converges for any gains; the discrete
//! step size is an empirical choice, so the driver detects divergence (norm
//! blow-up) and stagnation (no residual progress) and deterministically
//! restarts with a halved step, up to a retry budget.
//!
//! [`distributed_execute`] runs the identical synchronous update as a
//! multi-agent simulation: one agent per node and edge, each owning its
//! variables and constraint rows, reading exclusively from a per-round inbox.
//! Both modes accumulate through [`crate::sparse::sparse_dot`] in identical
//! order, so their iterates are bitwise equal; the static message log
//! certifies that primal updates read at most 2 hops away and dual updates at
//! most 1 hop in the node–edge incidence graph.

use crate::prediction::{Owner, QpInstance};
use crate::sparse::{sparse_dot, CsrMatrix};
use nalgebra::{DMatrix, DVector, Dyn};
use std::collections::HashMap;
use thiserror::Error;

/// Errors raised by the solver layer.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("singular KKT system: {detail}")]
    SingularKkt { detail: String },
    #[error("no convergence after {iters} iterations: {detail}")]
    NoConvergence { iters: usize, detail: String },
    #[error("saddle flow diverged; step halved {retries} times without recovery")]
    Divergence { retries: usize },
    #[error("ownership gap: {detail}")]
    OwnershipGap { detail: String },
    #[error("locality violation: {detail}")]
    LocalityViolation { detail: String },
    #[error("dimension mismatch: {detail}")]
    BadDimensions { detail: String },
}

// ---------------------------------------------------------------------------
// KKT residuals
// ---------------------------------------------------------------------------

/// Norms of the four KKT conditions at a primal-dual point.
#[derive(Debug, Clone, Copy)]
pub struct KktResidual {
    /// ‖H Y + f + R₁ᵀ η + R₂ᵀ μ‖₂
    pub stationarity: f64,
    /// ‖max(R₁ Y − r₁, 0)‖₂
    pub primal_ineq: f64,
    /// ‖R₂ Y − r₂‖₂
    pub primal_eq: f64,
    /// |ηᵀ (R₁ Y − r₁)|
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_ineq)
            .max(self.primal_eq)
            .max(self.complementarity)
    }
}

/// Evaluates the KKT residuals of `qp` at `(y, eta, mu)`.
pub fn kkt_residual(
    qp: &QpInstance,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResidual {
    let stationarity =
        (qp.h.mul_vec(y) + &qp.f + qp.r1.tr_mul_vec(eta) + qp.r2.tr_mul_vec(mu)).norm();
    let ineq_res = qp.r1.mul_vec(y) - &qp.r1_rhs;
    let primal_ineq = ineq_res.map(|v| v.max(0.0)).norm();
    let primal_eq = (qp.r2.mul_vec(y) - &qp.r2_rhs).norm();
    let complementarity = eta.dot(&ineq_res).abs();
    KktResidual {
        stationarity,
        primal_ineq,
        primal_eq,
        complementarity,
    }
}

// ---------------------------------------------------------------------------
// Reference solver
// ---------------------------------------------------------------------------

/// Primal-dual solution of a [`QpInstance`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    /// Active-set iterations used.
    pub iterations: usize,
    pub kkt: KktResidual,
}

type Fingerprint = (usize, usize, usize, f64, f64, f64);

/// Centralised QP oracle with structure-level caching.
///
/// Keep one instance alive across MPC samples of a fixed network: the `K₀`
/// factorisation and the activated-row columns are rebuilt only when the
/// structural fingerprint of the program changes.
pub struct ReferenceSolver {
    fingerprint: Option<Fingerprint>,
    /// `None` when `K₀` is singular (diagnosed per solve).
    lu: Option<nalgebra::LU<f64, Dyn, Dyn>>,
    /// Cached `K₀⁻¹ [a_wᵀ; 0]` split into primal and equality-dual parts,
    /// keyed by inequality row.
    columns: HashMap<usize, (DVector<f64>, DVector<f64>)>,
    dim: usize,
    n_eq: usize,
}

impl ReferenceSolver {
    pub fn new() -> Self {
        ReferenceSolver {
            fingerprint: None,
            lu: None,
            columns: HashMap::new(),
            dim: 0,
            n_eq: 0,
        }
    }

    fn refresh_structure(&mut self, qp: &QpInstance) {
        let fp = qp.structure_fingerprint();
        if self.fingerprint == Some(fp) {
            return;
        }
        let dim = qp.h.nrows();
        let n_eq = qp.r2.nrows();
        let mut k0 = DMatrix::zeros(dim + n_eq, dim + n_eq);
        for (i, j, v) in qp.h.iter() {
            k0[(i, j)] = v;
        }
        for (r, j, v) in qp.r2.iter() {
            k0[(dim + r, j)] = v;
            k0[(j, dim + r)] = v;
        }
        let lu = k0.lu();
        self.lu = if lu.is_invertible() { Some(lu) } else { None };
        self.columns.clear();
        self.dim = dim;
        self.n_eq = n_eq;
        self.fingerprint = Some(fp);
    }

    /// `K₀⁻¹ [a_wᵀ; 0]` for inequality row `w`, cached.
    fn column(&mut self, qp: &QpInstance, w: usize) -> (DVector<f64>, DVector<f64>) {
        if let Some(c) = self.columns.get(&w) {
            return c.clone();
        }
        let lu = self.lu.as_ref().expect("column() requires invertible K0");
        let mut rhs = DVector::zeros(self.dim + self.n_eq);
        let (cols, vals) = qp.r1.row(w);
        for (&j, &v) in cols.iter().zip(vals) {
            rhs[j] = v;
        }
        let sol = lu.solve(&rhs).expect("LU solve after invertibility check");
        let c = (
            sol.rows(0, self.dim).into_owned(),
            sol.rows(self.dim, self.n_eq).into_owned(),
        );
        self.columns.insert(w, c.clone());
        c
    }

    /// Solves `qp` to a KKT residual of at most `tol`.
    pub fn solve(&mut self, qp: &QpInstance, tol: f64) -> Result<QpSolution, SolverError> {
        let dim = qp.h.nrows();
        let n_eq = qp.r2.nrows();
        let n_ineq = qp.r1.nrows();
        if qp.f.len() != dim || qp.r1_rhs.len() != n_ineq || qp.r2_rhs.len() != n_eq {
            return Err(SolverError::BadDimensions {
                detail: "objective/constraint sizes disagree".into(),
            });
        }
        self.refresh_structure(qp);
        if self.lu.is_none() {
            // Distinguish inconsistent equalities from a genuinely singular
            // system before giving up.
            let r2d = qp.r2.to_dense();
            let svd = r2d.clone().svd(true, true);
            let ls = svd
                .solve(&qp.r2_rhs, 1e-12)
                .map_err(|e| SolverError::SingularKkt { detail: e.to_string() })?;
            let residual = (qp.r2.mul_vec(&ls) - &qp.r2_rhs).norm();
            if residual > 1e-8 * qp.r2_rhs.norm().max(1.0) {
                return Err(SolverError::NoConvergence {
                    iters: 0,
                    detail: format!(
                        "equality constraints are inconsistent (least-squares residual {residual:.3e})"
                    ),
                });
            }
            return Err(SolverError::SingularKkt {
                detail: "K0 is singular (redundant equality rows are not supported)".into(),
            });
        }

        // Equality-constrained base solution.
        let mut rhs = DVector::zeros(dim + n_eq);
        for i in 0..dim {
            rhs[i] = -qp.f[i];
        }
        for r in 0..n_eq {
            rhs[dim + r] = qp.r2_rhs[r];
        }
        let base = self
            .lu
            .as_ref()
            .unwrap()
            .solve(&rhs)
            .expect("LU solve after invertibility check");
        let y0 = base.rows(0, dim).into_owned();
        let mu0 = base.rows(dim, n_eq).into_owned();

        let feas_tol = 1e-10 * qp.r1_rhs.amax().max(1.0);
        let dual_tol = 1e-12;
        let max_iters = 3 * n_ineq + 50;

        let mut active: Vec<usize> = Vec::new();
        let mut blocked: Vec<usize> = Vec::new();
        let mut y;
        let mut eta_active: DVector<f64>;

        let mut iterations = 0;
        loop {
            iterations += 1;
            if iterations > max_iters {
                return Err(SolverError::NoConvergence {
                    iters: iterations,
                    detail: "active-set iteration limit exceeded".into(),
                });
            }

            // Multipliers for the current active set via the Schur system
            // S η = g with S[v][w] = a_vᵀ (K₀⁻¹)_yy a_w.
            if !active.is_empty() {
                let k = active.len();
                let cols: Vec<(DVector<f64>, DVector<f64>)> =
                    active.iter().map(|&w| self.column(qp, w)).collect();
                let mut s = DMatrix::zeros(k, k);
                let mut g = DVector::zeros(k);
                for (vi, &v) in active.iter().enumerate() {
                    for wi in 0..k {
                        s[(vi, wi)] = qp.r1.row_dot(v, cols[wi].0.as_slice());
                    }
                    g[vi] = qp.r1.row_dot(v, y0.as_slice()) - qp.r1_rhs[v];
                }
                let chol = match s.clone().cholesky() {
                    Some(c) => c,
                    None => {
                        // The most recently added row is dependent on the
                        // current working set; drop and block it.
                        let dropped = active.pop().unwrap();
                        blocked.push(dropped);
                        continue;
                    }
                };
                eta_active = chol.solve(&g);

                // Prune rows whose multiplier went negative.
                if let Some((pos, _)) = eta_active
                    .iter()
                    .enumerate()
                    .filter(|&(_, &e)| e < -dual_tol)
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                {
                    active.remove(pos);
                    continue;
                }

                y = y0.clone();
                for (wi, _) in active.iter().enumerate() {
                    y.axpy(-eta_active[wi], &cols[wi].0, 1.0);
                }
            } else {
                y = y0.clone();
                eta_active = DVector::zeros(0);
            }

            // Most violated inactive inequality.
            let mut worst: Option<(usize, f64)> = None;
            for v in 0..n_ineq {
                if active.contains(&v) || blocked.contains(&v) {
                    continue;
                }
                let viol = qp.r1.row_dot(v, y.as_slice()) - qp.r1_rhs[v];
                if viol > feas_tol && worst.map_or(true, |(_, w)| viol > w) {
                    worst = Some((v, viol));
                }
            }
            match worst {
                Some((v, _)) => active.push(v),
                None => break,
            }
        }

        // Assemble full multipliers.
        let mut eta = DVector::zeros(n_ineq);
        let mut mu = mu0;
        for (wi, &w) in active.iter().enumerate() {
            eta[w] = eta_active[wi].max(0.0);
            let (_, cmu) = self.column(qp, w);
            mu.axpy(-eta_active[wi], &cmu, 1.0);
        }

        let kkt = kkt_residual(qp, &y, &eta, &mu);
        if kkt.max() > tol {
            return Err(SolverError::NoConvergence {
                iters: iterations,
                detail: format!("KKT residual {:.3e} above tolerance {tol:.1e}", kkt.max()),
            });
        }
        Ok(QpSolution {
            y,
            eta,
            mu,
            iterations,
            kkt,
        })
    }
}

impl Default for ReferenceSolver {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot reference solve (no caching across calls).
pub fn solve_qp_reference(qp: &QpInstance, tol: f64) -> Result<QpSolution, SolverError> {
    ReferenceSolver::new().solve(qp, tol)
}

// ---------------------------------------------------------------------------
// Saddle-point dynamics
// ---------------------------------------------------------------------------

/// Primal-dual iterate of the saddle flow; `eta` stays componentwise ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub z: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
}

impl SaddleState {
    pub fn zeros(qp: &QpInstance) -> Self {
        SaddleState {
            z: DVector::zeros(qp.h.nrows()),
            eta: DVector::zeros(qp.r1.nrows()),
            mu: DVector::zeros(qp.r2.nrows()),
        }
    }

    fn norm(&self) -> f64 {
        (self.z.norm_squared() + self.eta.norm_squared() + self.mu.norm_squared()).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
            && self.eta.iter().all(|v| v.is_finite())
            && self.mu.iter().all(|v| v.is_finite())
    }
}

/// Gains and integration parameters of the saddle flow.
#[derive(Debug, Clone)]
pub struct SaddleConfig {
    pub eps_z: f64,
    pub eps_eta: f64,
    pub eps_mu: f64,
    /// Explicit-Euler step; halved automatically on divergence/stagnation.
    pub h: f64,
    pub max_rounds: usize,
    /// KKT residual checked every this many rounds.
    pub check_every: usize,
    pub stop_tol: f64,
    /// Maximum deterministic step-halving restarts.
    pub max_retries: usize,
    /// Declare divergence when the iterate norm exceeds this multiple of the
    /// initial norm (plus one).
    pub divergence_factor: f64,
    /// Declare stagnation when the best KKT residual improves by less than
    /// 0.1% over this many consecutive checks.
    pub stagnation_checks: usize,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        SaddleConfig {
            eps_z: 5e-4,
            eps_eta: 2.5e-4,
            eps_mu: 2.5e-4,
            h: 1e-3,
            max_rounds: 200_000,
            check_every: 100,
            stop_tol: 1e-6,
            max_retries: 8,
            divergence_factor: 1e6,
            stagnation_checks: 25,
        }
    }
}

/// Right-hand side of the projected saddle flow at `state`.
///
/// `dη_i = [R₁Z − r₁]_i` when `η_i > 0`, else `max([R₁Z − r₁]_i, 0)`; all
/// components are scaled by their gains.
pub fn saddle_rhs(
    qp: &QpInstance,
    state: &SaddleState,
    cfg: &SaddleConfig,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let grad =
        qp.h.mul_vec(&state.z) + &qp.f + qp.r1.tr_mul_vec(&state.eta) + qp.r2.tr_mul_vec(&state.mu);
    let dz = grad.map(|g| -g / cfg.eps_z);
    let ineq_res = qp.r1.mul_vec(&state.z) - &qp.r1_rhs;
    let deta = DVector::from_fn(ineq_res.len(), |r, _| {
        let res = ineq_res[r];
        let proj = if state.eta[r] > 0.0 { res } else { res.max(0.0) };
        proj / cfg.eps_eta
    });
    let dmu = (qp.r2.mul_vec(&state.z) - &qp.r2_rhs).map(|v| v / cfg.eps_mu);
    (dz, deta, dmu)
}

/// One row of the convergence trace, written at every residual check.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub round: usize,
    /// ‖Z − Z_prev‖ of the round preceding the check.
    pub dz_norm: f64,
    pub stationarity: f64,
    pub primal_ineq: f64,
    pub primal_eq: f64,
    pub complementarity: f64,
    /// Distance ‖(Z,η,μ) − (Y*,η*,μ*)‖ when an oracle solution was supplied.
    pub dist_to_oracle: Option<f64>,
}

/// Trace of residual checks across the integration.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

/// Result of a saddle integration.
#[derive(Debug, Clone)]
pub struct SaddleOutcome {
    pub state: SaddleState,
    pub converged: bool,
    pub rounds: usize,
    /// Step size in effect at termination (after any halvings).
    pub h_used: f64,
    pub kkt: KktResidual,
    pub trace: ConvergenceTrace,
    /// Checks at which the distance to the oracle increased (diagnostic; the
    /// continuous flow is monotone, the discretisation need not be).
    pub monotone_violations: usize,
}

impl SaddleOutcome {
    /// Converts a non-converged outcome into an error.
    pub fn require_converged(self) -> Result<SaddleOutcome, SolverError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SolverError::NoConvergence {
                iters: self.rounds,
                detail: format!("best KKT residual {:.3e}", self.kkt.max()),
            })
        }
    }
}

struct StepSizes {
    z: f64,
    eta: f64,
    mu: f64,
}

fn central_round(
    qp: &QpInstance,
    r1t: &CsrMatrix,
    r2t: &CsrMatrix,
    cur: &SaddleState,
    steps: &StepSizes,
    next: &mut SaddleState,
) {
    let zs = cur.z.as_slice();
    let es = cur.eta.as_slice();
    let ms = cur.mu.as_slice();
    for i in 0..qp.h.nrows() {
        let g = qp.h.row_dot(i, zs) + qp.f[i] + r1t.row_dot(i, es) + r2t.row_dot(i, ms);
        next.z[i] = cur.z[i] - steps.z * g;
    }
    for r in 0..qp.r1.nrows() {
        let res = qp.r1.row_dot(r, zs) - qp.r1_rhs[r];
        let e = cur.eta[r];
        let d = if e > 0.0 { res } else { res.max(0.0) };
        next.eta[r] = (e + steps.eta * d).max(0.0);
    }
    for q in 0..qp.r2.nrows() {
        next.mu[q] = cur.mu[q] + steps.mu * (qp.r2.row_dot(q, zs) - qp.r2_rhs[q]);
    }
}

enum Executor<'a> {
    Central {
        r1t: CsrMatrix,
        r2t: CsrMatrix,
    },
    Distributed(&'a mut AgentNetwork),
}

impl Executor<'_> {
    fn round(&mut self, qp: &QpInstance, cur: &SaddleState, steps: &StepSizes, next: &mut SaddleState) {
        match self {
            Executor::Central { r1t, r2t } => central_round(qp, r1t, r2t, cur, steps, next),
            Executor::Distributed(net) => net.round(cur, steps, next),
        }
    }
}

fn run_saddle(
    qp: &QpInstance,
    cfg: &SaddleConfig,
    init: Option<&SaddleState>,
    oracle: Option<&QpSolution>,
    mut exec: Executor<'_>,
) -> Result<SaddleOutcome, SolverError> {
    let dim = qp.h.nrows();
    let n_ineq = qp.r1.nrows();
    let n_eq = qp.r2.nrows();
    let start = match init {
        Some(s) => {
            if s.z.len() != dim || s.eta.len() != n_ineq || s.mu.len() != n_eq {
                return Err(SolverError::BadDimensions {
                    detail: "warm-start state does not match program".into(),
                });
            }
            assert!(
                s.eta.iter().all(|&e| e >= 0.0),
                "inequality multipliers must start nonnegative"
            );
            s.clone()
        }
        None => SaddleState::zeros(qp),
    };
    let oracle_dist = |st: &SaddleState| {
        oracle.map(|sol| {
            ((&st.z - &sol.y).norm_squared()
                + (&st.eta - &sol.eta).norm_squared()
                + (&st.mu - &sol.mu).norm_squared())
            .sqrt()
        })
    };

    let div_threshold = cfg.divergence_factor * (start.norm() + 1.0);
    let mut h = cfg.h;
    let mut retries = 0usize;

    'restart: loop {
        let steps = StepSizes {
            z: h / cfg.eps_z,
            eta: h / cfg.eps_eta,
            mu: h / cfg.eps_mu,
        };
        let mut cur = start.clone();
        let mut next = cur.clone();
        let mut trace = ConvergenceTrace::default();
        let mut best_kkt = f64::INFINITY;
        let mut best_state = cur.clone();
        let mut best_resid = kkt_residual(qp, &cur.z, &cur.eta, &cur.mu);
        let mut window_best = f64::INFINITY;
        let mut checks_in_window = 0usize;
        let mut prev_dist = oracle_dist(&cur);
        let mut monotone_violations = 0usize;

        let mut round = 0usize;
        while round < cfg.max_rounds {
            round += 1;
            exec.round(qp, &cur, &steps, &mut next);
            let dz_norm = (&next.z - &cur.z).norm();
            std::mem::swap(&mut cur, &mut next);

            if round % cfg.check_every == 0 || round == cfg.max_rounds {
                if !cur.is_finite() || cur.norm() > div_threshold {
                    if retries >= cfg.max_retries {
                        return Err(SolverError::Divergence { retries });
                    }
                    retries += 1;
                    h *= 0.5;
                    continue 'restart;
                }
                let kkt = kkt_residual(qp, &cur.z, &cur.eta, &cur.mu);
                let dist = oracle_dist(&cur);
                if let (Some(d), Some(p)) = (dist, prev_dist) {
                    if d > p {
                        monotone_violations += 1;
                    }
                }
                prev_dist = dist;
                trace.rows.push(TraceRow {
                    round,
                    dz_norm,
                    stationarity: kkt.stationarity,
                    primal_ineq: kkt.primal_ineq,
                    primal_eq: kkt.primal_eq,
                    complementarity: kkt.complementarity,
                    dist_to_oracle: dist,
                });
                let kmax = kkt.max();
                if kmax < best_kkt {
                    best_kkt = kmax;
                    best_state = cur.clone();
                    best_resid = kkt;
                }
                if kmax <= cfg.stop_tol {
                    return Ok(SaddleOutcome {
                        state: cur,
                        converged: true,
                        rounds: round,
                        h_used: h,
                        kkt,
                        trace,
                        monotone_violations,
                    });
                }
                // Stagnation: pure oscillation makes no residual progress at
                // all; genuinely slow convergence still compounds over the
                // window.
                checks_in_window += 1;
                if checks_in_window >= cfg.stagnation_checks {
                    if best_kkt > window_best * (1.0 - 1e-3) && retries < cfg.max_retries {
                        retries += 1;
                        h *= 0.5;
                        continue 'restart;
                    }
                    window_best = best_kkt;
                    checks_in_window = 0;
                }
            }
        }

        return Ok(SaddleOutcome {
            state: best_state,
            converged: false,
            rounds: round,
            h_used: h,
            kkt: best_resid,
            trace,
            monotone_violations,
        });
    }
}

/// Integrates the projected saddle flow centrally.
///
/// Stops when the KKT residual drops below `cfg.stop_tol`; on budget
/// exhaustion the best iterate seen is returned with `converged = false`.
/// Supplying the reference solution as `oracle` adds distance columns to the
/// trace and the monotonicity diagnostic.
pub fn saddle_integrate(
    qp: &QpInstance,
    cfg: &SaddleConfig,
    init: Option<&SaddleState>,
    oracle: Option<&QpSolution>,
) -> Result<SaddleOutcome, SolverError> {
    let exec = Executor::Central {
        r1t: qp.r1.transpose(),
        r2t: qp.r2.transpose(),
    };
    run_saddle(qp, cfg, init, oracle, exec)
}

// ---------------------------------------------------------------------------
// Distributed execution
// ---------------------------------------------------------------------------

/// What a message carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Payload {
    Primal,
    IneqDual,
    EqDual,
}

/// Which update consumes a message; primal updates may read up to 2 hops,
/// dual updates up to 1 hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Consumer {
    PrimalUpdate,
    DualUpdate,
}

/// One aggregated communication edge of the synchronous execution.
#[derive(Debug, Clone, Copy)]
pub struct MessageRecord {
    pub reader: Owner,
    pub owner: Owner,
    pub payload: Payload,
    pub consumer: Consumer,
    /// Node–edge incidence-graph distance between reader and owner.
    pub distance: usize,
    /// Scalar values read along this edge in every round.
    pub values_per_round: usize,
}

/// Static communication certificate of a distributed execution: the message
/// structure is identical in every round.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    pub records: Vec<MessageRecord>,
}

impl MessageLog {
    pub fn max_distance(&self, consumer: Consumer) -> usize {
        self.records
            .iter()
            .filter(|r| r.consumer == consumer)
            .map(|r| r.distance)
            .max()
            .unwrap_or(0)
    }

    /// Verifies the 2-hop (primal) / 1-hop (dual) communication bounds.
    pub fn check(&self) -> Result<(), SolverError> {
        for r in &self.records {
            let limit = match r.consumer {
                Consumer::PrimalUpdate => 2,
                Consumer::DualUpdate => 1,
            };
            if r.distance > limit {
                return Err(SolverError::LocalityViolation {
                    detail: format!(
                        "{:?} reads {:?} from {:?} at distance {} (limit {limit})",
                        r.reader, r.payload, r.owner, r.distance
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Sparse row with columns remapped to inbox slots, preserving the original
/// accumulation order.
#[derive(Debug, Clone, Default)]
struct PlanMatrix {
    indptr: Vec<usize>,
    slots: Vec<usize>,
    vals: Vec<f64>,
}

impl PlanMatrix {
    fn new() -> Self {
        PlanMatrix {
            indptr: vec![0],
            slots: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(s, v) in entries {
            self.slots.push(s);
            self.vals.push(v);
        }
        self.indptr.push(self.slots.len());
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        sparse_dot(&self.vals[a..b], &self.slots[a..b], x)
    }
}

/// One agent: owned indices, remapped update plans, and inbox buffers.
#[derive(Debug, Clone)]
struct Agent {
    owner: Owner,
    // Primal side.
    primal_idx: Vec<usize>,
    primal_f: Vec<f64>,
    self_z_slot: Vec<usize>,
    plan_h: PlanMatrix,
    plan_r1t: PlanMatrix,
    plan_r2t: PlanMatrix,
    // Dual side.
    ineq_idx: Vec<usize>,
    ineq_rhs: Vec<f64>,
    self_eta_slot: Vec<usize>,
    plan_r1: PlanMatrix,
    eq_idx: Vec<usize>,
    eq_rhs: Vec<f64>,
    self_mu_slot: Vec<usize>,
    plan_r2: PlanMatrix,
    // Inbox sources (global indices) per slot.
    z_sources: Vec<usize>,
    eta_sources: Vec<usize>,
    mu_sources: Vec<usize>,
    // Scratch inboxes, refilled every round.
    z_in: Vec<f64>,
    eta_in: Vec<f64>,
    mu_in: Vec<f64>,
}

/// The multi-agent execution fabric for one QP structure.
pub struct AgentNetwork {
    agents: Vec<Agent>,
    log: MessageLog,
}

/// Checks that every variable and constraint row is owned by an agent in
/// `present`.
pub fn validate_ownership(qp: &QpInstance, present: &[Owner]) -> Result<(), SolverError> {
    let have = |o: &Owner| present.contains(o);
    for (i, o) in qp.var_owner.iter().enumerate() {
        if !have(o) {
            return Err(SolverError::OwnershipGap {
                detail: format!("variable {i} owned by absent agent {o:?}"),
            });
        }
    }
    for (r, o) in qp.ineq_owner.iter().enumerate() {
        if !have(o) {
            return Err(SolverError::OwnershipGap {
                detail: format!("inequality row {r} owned by absent agent {o:?}"),
            });
        }
    }
    for (q, o) in qp.eq_owner.iter().enumerate() {
        if !have(o) {
            return Err(SolverError::OwnershipGap {
                detail: format!("equality row {q} owned by absent agent {o:?}"),
            });
        }
    }
    Ok(())
}

/// Breadth-first distances from `start` in the node–edge incidence graph.
fn incidence_distances(start: Owner, n_buses: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let n_vertices = n_buses + edges.len();
    let vid = |o: Owner| match o {
        Owner::Node(i) => i,
        Owner::Edge(e) => n_buses + e,
    };
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_vertices];
    for (e, &(a, b)) in edges.iter().enumerate() {
        let ev = n_buses + e;
        adj[ev].push(a);
        adj[ev].push(b);
        adj[a].push(ev);
        adj[b].push(ev);
    }
    let mut dist = vec![usize::MAX; n_vertices];
    let mut queue = std::collections::VecDeque::new();
    dist[vid(start)] = 0;
    queue.push_back(vid(start));
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

impl AgentNetwork {
    /// Builds the agent fabric for `qp`, validating ownership coverage and
    /// the communication distance bounds.
    pub fn build(qp: &QpInstance) -> Result<Self, SolverError> {
        let n = qp.dims.n_buses;
        let m = qp.edges.len();
        let all_agents: Vec<Owner> = (0..n)
            .map(Owner::Node)
            .chain((0..m).map(Owner::Edge))
            .collect();
        validate_ownership(qp, &all_agents)?;

        let r1t = qp.r1.transpose();
        let r2t = qp.r2.transpose();

        // Owned index lists per agent.
        let agent_pos: HashMap<Owner, usize> =
            all_agents.iter().enumerate().map(|(p, &o)| (o, p)).collect();
        let mut owned_vars: Vec<Vec<usize>> = vec![Vec::new(); all_agents.len()];
        for (i, o) in qp.var_owner.iter().enumerate() {
            owned_vars[agent_pos[o]].push(i);
        }
        let mut owned_ineq: Vec<Vec<usize>> = vec![Vec::new(); all_agents.len()];
        for (r, o) in qp.ineq_owner.iter().enumerate() {
            owned_ineq[agent_pos[o]].push(r);
        }
        let mut owned_eq: Vec<Vec<usize>> = vec![Vec::new(); all_agents.len()];
        for (q, o) in qp.eq_owner.iter().enumerate() {
            owned_eq[agent_pos[o]].push(q);
        }

        let vid = |o: Owner| match o {
            Owner::Node(i) => i,
            Owner::Edge(e) => n + e,
        };

        let mut agents = Vec::with_capacity(all_agents.len());
        let mut log_map: std::collections::BTreeMap<(Owner, Owner, Payload, Consumer), (usize, usize)> =
            std::collections::BTreeMap::new();

        for (pos, &owner) in all_agents.iter().enumerate() {
            let dist = incidence_distances(owner, n, &qp.edges);
            let mut z_slots: HashMap<usize, usize> = HashMap::new();
            let mut eta_slots: HashMap<usize, usize> = HashMap::new();
            let mut mu_slots: HashMap<usize, usize> = HashMap::new();
            let mut z_sources = Vec::new();
            let mut eta_sources = Vec::new();
            let mut mu_sources = Vec::new();

            let mut agent = Agent {
                owner,
                primal_idx: owned_vars[pos].clone(),
                primal_f: owned_vars[pos].iter().map(|&i| qp.f[i]).collect(),
                self_z_slot: Vec::new(),
                plan_h: PlanMatrix::new(),
                plan_r1t: PlanMatrix::new(),
                plan_r2t: PlanMatrix::new(),
                ineq_idx: owned_ineq[pos].clone(),
                ineq_rhs: owned_ineq[pos].iter().map(|&r| qp.r1_rhs[r]).collect(),
                self_eta_slot: Vec::new(),
                plan_r1: PlanMatrix::new(),
                eq_idx: owned_eq[pos].clone(),
                eq_rhs: owned_eq[pos].iter().map(|&q| qp.r2_rhs[q]).collect(),
                self_mu_slot: Vec::new(),
                plan_r2: PlanMatrix::new(),
                z_sources: Vec::new(),
                eta_sources: Vec::new(),
                mu_sources: Vec::new(),
                z_in: Vec::new(),
                eta_in: Vec::new(),
                mu_in: Vec::new(),
            };

            // Slot allocation records the message edge on first use.
            macro_rules! slot {
                ($slots:ident, $sources:ident, $idx:expr, $src_owner:expr, $payload:expr, $consumer:expr) => {{
                    let idx = $idx;
                    let entry = $slots.entry(idx);
                    let slot = match entry {
                        std::collections::hash_map::Entry::Occupied(o) => *o.get(),
                        std::collections::hash_map::Entry::Vacant(vac) => {
                            let s = $sources.len();
                            $sources.push(idx);
                            *vac.insert(s)
                        }
                    };
                    let src: Owner = $src_owner;
                    if src != owner {
                        let d = dist[vid(src)];
                        let e = log_map
                            .entry((owner, src, $payload, $consumer))
                            .or_insert((d, 0));
                        e.1 += 1;
                    }
                    slot
                }};
            }

            for &i in &owned_vars[pos] {
                let self_slot = slot!(
                    z_slots,
                    z_sources,
                    i,
                    qp.var_owner[i],
                    Payload::Primal,
                    Consumer::PrimalUpdate
                );
                agent.self_z_slot.push(self_slot);
                let (cols, vals) = qp.h.row(i);
                let row: Vec<(usize, f64)> = cols
                    .iter()
                    .zip(vals)
                    .map(|(&j, &v)| {
                        (
                            slot!(
                                z_slots,
                                z_sources,
                                j,
                                qp.var_owner[j],
                                Payload::Primal,
                                Consumer::PrimalUpdate
                            ),
                            v,
                        )
                    })
                    .collect();
                agent.plan_h.push_row(&row);
                let (cols, vals) = r1t.row(i);
                let row: Vec<(usize, f64)> = cols
                    .iter()
                    .zip(vals)
                    .map(|(&r, &v)| {
                        (
                            slot!(
                                eta_slots,
                                eta_sources,
                                r,
                                qp.ineq_owner[r],
                                Payload::IneqDual,
                                Consumer::PrimalUpdate
                            ),
                            v,
                        )
                    })
                    .collect();
                agent.plan_r1t.push_row(&row);
                let (cols, vals) = r2t.row(i);
                let row: Vec<(usize, f64)> = cols
                    .iter()
                    .zip(vals)
                    .map(|(&q, &v)| {
                        (
                            slot!(
                                mu_slots,
                                mu_sources,
                                q,
                                qp.eq_owner[q],
                                Payload::EqDual,
                                Consumer::PrimalUpdate
                            ),
                            v,
                        )
                    })
                    .collect();
                agent.plan_r2t.push_row(&row);
            }

            for &r in &owned_ineq[pos] {
                let self_slot = slot!(
                    eta_slots,
                    eta_sources,
                    r,
                    qp.ineq_owner[r],
                    Payload::IneqDual,
                    Consumer::DualUpdate
                );
                agent.self_eta_slot.push(self_slot);
                let (cols, vals) = qp.r1.row(r);
                let row: Vec<(usize, f64)> = cols
                    .iter()
                    .zip(vals)
                    .map(|(&j, &v)| {
                        (
                            slot!(
                                z_slots,
                                z_sources,
                                j,
                                qp.var_owner[j],
                                Payload::Primal,
                                Consumer::DualUpdate
                            ),
                            v,
                        )
                    })
                    .collect();
                agent.plan_r1.push_row(&row);
            }

            for &q in &owned_eq[pos] {
                let self_slot = slot!(
                    mu_slots,
                    mu_sources,
                    q,
                    qp.eq_owner[q],
                    Payload::EqDual,
                    Consumer::DualUpdate
                );
                agent.self_mu_slot.push(self_slot);
                let (cols, vals) = qp.r2.row(q);
                let row: Vec<(usize, f64)> = cols
                    .iter()
                    .zip(vals)
                    .map(|(&j, &v)| {
                        (
                            slot!(
                                z_slots,
                                z_sources,
                                j,
                                qp.var_owner[j],
                                Payload::Primal,
                                Consumer::DualUpdate
                            ),
                            v,
                        )
                    })
                    .collect();
                agent.plan_r2.push_row(&row);
            }

            agent.z_in = vec![0.0; z_sources.len()];
            agent.eta_in = vec![0.0; eta_sources.len()];
            agent.mu_in = vec![0.0; mu_sources.len()];
            agent.z_sources = z_sources;
            agent.eta_sources = eta_sources;
            agent.mu_sources = mu_sources;
            agents.push(agent);
        }

        let log = MessageLog {
            records: log_map
                .into_iter()
                .map(|((reader, owner, payload, consumer), (distance, values))| MessageRecord {
                    reader,
                    owner,
                    payload,
                    consumer,
                    distance,
                    values_per_round: values,
                })
                .collect(),
        };
        log.check()?;

        Ok(AgentNetwork { agents, log })
    }

    pub fn message_log(&self) -> &MessageLog {
        &self.log
    }

    /// Owners of the instantiated agents, in execution order.
    pub fn owners(&self) -> Vec<Owner> {
        self.agents.iter().map(|a| a.owner).collect()
    }

    /// One synchronous round: gather inboxes from the current global state,
    /// let each agent update its owned components, scatter into `next`.
    fn round(&mut self, cur: &SaddleState, steps: &StepSizes, next: &mut SaddleState) {
        for agent in &mut self.agents {
            for (slot, &src) in agent.z_sources.iter().enumerate() {
                agent.z_in[slot] = cur.z[src];
            }
            for (slot, &src) in agent.eta_sources.iter().enumerate() {
                agent.eta_in[slot] = cur.eta[src];
            }
            for (slot, &src) in agent.mu_sources.iter().enumerate() {
                agent.mu_in[slot] = cur.mu[src];
            }
        }
        for agent in &self.agents {
            for (li, &gi) in agent.primal_idx.iter().enumerate() {
                let g = agent.plan_h.row_dot(li, &agent.z_in)
                    + agent.primal_f[li]
                    + agent.plan_r1t.row_dot(li, &agent.eta_in)
                    + agent.plan_r2t.row_dot(li, &agent.mu_in);
                next.z[gi] = agent.z_in[agent.self_z_slot[li]] - steps.z * g;
            }
            for (lr, &gr) in agent.ineq_idx.iter().enumerate() {
                let res = agent.plan_r1.row_dot(lr, &agent.z_in) - agent.ineq_rhs[lr];
                let e = agent.eta_in[agent.self_eta_slot[lr]];
                let d = if e > 0.0 { res } else { res.max(0.0) };
                next.eta[gr] = (e + steps.eta * d).max(0.0);
            }
            for (lq, &gq) in agent.eq_idx.iter().enumerate() {
                next.mu[gq] = agent.mu_in[agent.self_mu_slot[lq]]
                    + steps.mu * (agent.plan_r2.row_dot(lq, &agent.z_in) - agent.eq_rhs[lq]);
            }
        }
    }
}

/// Runs the saddle flow as a synchronous multi-agent simulation.
///
/// Produces bitwise-identical iterates to [`saddle_integrate`] under the same
/// configuration, plus the static message log of the execution.
pub fn distributed_execute(
    qp: &QpInstance,
    cfg: &SaddleConfig,
    init: Option<&SaddleState>,
    oracle: Option<&QpSolution>,
) -> Result<(SaddleOutcome, MessageLog), SolverError> {
    let mut net = AgentNetwork::build(qp)?;
    let log = net.log.clone();
    let outcome = run_saddle(qp, cfg, init, oracle, Executor::Distributed(&mut net))?;
    Ok((outcome, log))
}
