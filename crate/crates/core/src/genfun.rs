//! Symplectic one-step maps defined through a type-2 generating
//! function.
//!
//! With `F(q, P) = q . P + h S(q, P)`, the step `(p0, q0) -> (p1, q1)`
//! is defined implicitly by
//!
//! ```text
//! p0 = p1 + h d1S(q0, p1)        (solved for p1)
//! q1 = q0 + h d2S(q0, p1)
//! ```
//!
//! Any map of this form is symplectic regardless of what `S` is, which
//! is the point: `S` may be an arbitrary network and the structure
//! survives. The price is the implicit solve in the first relation,
//! handled here by fixed-point iteration with a damped Newton
//! fallback.

use crate::error::{Error, Result};
use crate::net::{net_input_grad, InputGrad, ParamNet};
use crate::state::{PhaseState, Trajectory};

/// Closed-form generating functions with known exact maps, used to
/// validate the solver and the structure checks independently of any
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticGf {
    /// `S = 0`: the identity map.
    Zero,
    /// `S = |P|^2 / 2`: free flight `q1 = q0 + h p0`, `p1 = p0`.
    FreeParticle,
    /// The exact step of `H = (|p|^2 + |q|^2) / 2`, a clockwise
    /// rotation by angle `h` in every `(q_i, p_i)` plane. Requires
    /// `|h| < pi/2` where the type-2 form is well defined.
    HarmonicRotation,
}

impl AnalyticGf {
    pub fn name(self) -> &'static str {
        match self {
            AnalyticGf::Zero => "zero",
            AnalyticGf::FreeParticle => "free_particle",
            AnalyticGf::HarmonicRotation => "harmonic_rotation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AnalyticGf::Zero),
            "free_particle" => Ok(AnalyticGf::FreeParticle),
            "harmonic_rotation" => Ok(AnalyticGf::HarmonicRotation),
            other => Err(Error::InvalidConfig(format!(
                "unknown analytic generating function {other:?}"
            ))),
        }
    }

    fn value(self, q: &[f64], p_next: &[f64], h: f64) -> f64 {
        match self {
            AnalyticGf::Zero => 0.0,
            AnalyticGf::FreeParticle => 0.5 * p_next.iter().map(|p| p * p).sum::<f64>(),
            AnalyticGf::HarmonicRotation => {
                let (c, t) = (1.0 / h.cos() - 1.0, h.tan());
                let qp: f64 = q.iter().zip(p_next).map(|(a, b)| a * b).sum();
                let ss: f64 = q
                    .iter()
                    .chain(p_next.iter())
                    .map(|x| x * x)
                    .sum();
                (c * qp + t * ss / 2.0) / h
            }
        }
    }

    fn grad(self, q: &[f64], p_next: &[f64], h: f64) -> InputGrad {
        let d = q.len();
        match self {
            AnalyticGf::Zero => InputGrad {
                d1: vec![0.0; d],
                d2: vec![0.0; d],
            },
            AnalyticGf::FreeParticle => InputGrad {
                d1: vec![0.0; d],
                d2: p_next.to_vec(),
            },
            AnalyticGf::HarmonicRotation => {
                let (c, t) = (1.0 / h.cos() - 1.0, h.tan());
                InputGrad {
                    d1: (0..d).map(|i| (c * p_next[i] + t * q[i]) / h).collect(),
                    d2: (0..d).map(|i| (c * q[i] + t * p_next[i]) / h).collect(),
                }
            }
        }
    }
}

/// Where the generating function comes from.
#[derive(Debug, Clone)]
pub enum GfSource {
    Net(ParamNet),
    Analytic { gf: AnalyticGf, dim: usize },
}

/// Controls the implicit momentum solve and the finite-difference
/// Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Convergence threshold on the infinity norm of the residual
    /// `p1 + h d1S(q0, p1) - p0`.
    pub abs_tol: f64,
    /// Iteration budget shared by fixed point and Newton phases.
    pub max_iter: usize,
    /// Switch to damped Newton when fixed-point contraction stalls.
    pub newton_fallback: bool,
    /// Step for finite-difference Jacobians (both the Newton residual
    /// Jacobian and `GenFunMap::jacobian`).
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            abs_tol: 1e-12,
            max_iter: 100,
            newton_fallback: true,
            fd_step: 1e-6,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "solver abs_tol must be positive, got {}",
                self.abs_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("solver max_iter must be positive".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "solver fd_step must be positive, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// Per-step solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iters: usize,
    pub newton_used: bool,
    pub residual: f64,
}

/// A rollout that failed partway keeps what it produced. `partial`
/// holds the initial state plus every completed step; `step` is the
/// index of the step that failed (0 for the first).
#[derive(Debug)]
pub struct RolloutFailure {
    pub partial: Trajectory,
    pub step: usize,
    pub cause: Error,
}

impl From<RolloutFailure> for Error {
    fn from(f: RolloutFailure) -> Error {
        Error::RolloutAborted {
            step: f.step,
            cause: Box::new(f.cause),
        }
    }
}

/// The one-step symplectic map generated by `S` with step size `h`.
#[derive(Debug, Clone)]
pub struct GenFunMap {
    source: GfSource,
    h: f64,
    solver: SolverConfig,
}

impl GenFunMap {
    pub fn new(source: GfSource, h: f64, solver: SolverConfig) -> Result<Self> {
        solver.validate()?;
        if !h.is_finite() || h == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "step size must be finite and nonzero, got {h}"
            )));
        }
        match &source {
            GfSource::Net(net) => {
                if net.output_dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        context: "generating function network output",
                        expected: 1,
                        got: net.output_dim(),
                    });
                }
                if net.input_dim() == 0 || net.input_dim() % 2 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "generating function network needs an even, positive input width, got {}",
                        net.input_dim()
                    )));
                }
            }
            GfSource::Analytic { gf, dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidConfig(
                        "analytic generating function dimension must be positive".into(),
                    ));
                }
                if *gf == AnalyticGf::HarmonicRotation
                    && h.abs() >= std::f64::consts::FRAC_PI_2
                {
                    return Err(Error::InvalidConfig(format!(
                        "harmonic rotation generating function requires |h| < pi/2, got {h}"
                    )));
                }
            }
        }
        Ok(GenFunMap { source, h, solver })
    }

    pub fn from_net(net: ParamNet, h: f64, solver: SolverConfig) -> Result<Self> {
        Self::new(GfSource::Net(net), h, solver)
    }

    pub fn analytic(gf: AnalyticGf, dim: usize, h: f64, solver: SolverConfig) -> Result<Self> {
        Self::new(GfSource::Analytic { gf, dim }, h, solver)
    }

    /// Degrees of freedom of the states this map acts on.
    pub fn dim(&self) -> usize {
        match &self.source {
            GfSource::Net(net) => net.input_dim() / 2,
            GfSource::Analytic { dim, .. } => *dim,
        }
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn source(&self) -> &GfSource {
        &self.source
    }

    /// `S(q, P)`.
    pub fn value(&self, q: &[f64], p_next: &[f64]) -> Result<f64> {
        self.check_args(q, p_next)?;
        match &self.source {
            GfSource::Net(net) => crate::net::net_forward(net, q, p_next),
            GfSource::Analytic { gf, .. } => Ok(gf.value(q, p_next, self.h)),
        }
    }

    /// Both gradient blocks of `S` at `(q, P)`.
    pub fn grad(&self, q: &[f64], p_next: &[f64]) -> Result<InputGrad> {
        self.check_args(q, p_next)?;
        match &self.source {
            GfSource::Net(net) => net_input_grad(net, q, p_next),
            GfSource::Analytic { gf, .. } => Ok(gf.grad(q, p_next, self.h)),
        }
    }

    fn check_args(&self, q: &[f64], p_next: &[f64]) -> Result<()> {
        let d = self.dim();
        if q.len() != d {
            return Err(Error::DimensionMismatch {
                context: "generating function q argument",
                expected: d,
                got: q.len(),
            });
        }
        if p_next.len() != d {
            return Err(Error::DimensionMismatch {
                context: "generating function P argument",
                expected: d,
                got: p_next.len(),
            });
        }
        Ok(())
    }

    /// Advances one step.
    pub fn step(&self, state: &PhaseState) -> Result<PhaseState> {
        self.step_with_stats(state).map(|(s, _)| s)
    }

    /// Advances one step and reports solver effort.
    pub fn step_with_stats(&self, state: &PhaseState) -> Result<(PhaseState, StepStats)> {
        if state.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "map input state",
                expected: self.dim(),
                got: state.dim(),
            });
        }
        if !state.is_finite() {
            return Err(Error::NonFinite("map input state".into()));
        }
        let (p1, stats) = self.solve_momentum(&state.q, &state.p)?;
        let g = self.grad(&state.q, &p1)?;
        let q1: Vec<f64> = state
            .q
            .iter()
            .zip(&g.d2)
            .map(|(q, d2)| q + self.h * d2)
            .collect();
        if !(p1.iter().all(|x| x.is_finite()) && q1.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("map output state".into()));
        }
        Ok((PhaseState { p: p1, q: q1 }, stats))
    }

    /// Residual of the implicit momentum relation.
    fn residual(&self, q0: &[f64], p0: &[f64], p1: &[f64]) -> Result<Vec<f64>> {
        let g = self.grad(q0, p1)?;
        Ok((0..p0.len())
            .map(|i| p1[i] + self.h * g.d1[i] - p0[i])
            .collect())
    }

    /// Solves `p1 + h d1S(q0, p1) = p0` for `p1`.
    ///
    /// Fixed-point iteration `p <- p0 - h d1S(q0, p)` contracts when
    /// `h` times the Lipschitz constant of `d1S` in `P` is below one.
    /// A reduction factor worse than 0.5 counts as a stall and hands
    /// over to damped Newton (if enabled) with a finite-difference
    /// residual Jacobian. After the tolerance is met, iteration
    /// continues while the residual still strictly decreases; stopping
    /// at the numerical floor rather than at `abs_tol` keeps the map
    /// smooth enough for finite-difference Jacobians on top of it.
    fn solve_momentum(&self, q0: &[f64], p0: &[f64]) -> Result<(Vec<f64>, StepStats)> {
        let tol = self.solver.abs_tol;
        let mut p = p0.to_vec();
        let mut res = inf_norm(&self.residual(q0, p0, &p)?);
        let mut best = (p.clone(), res);
        let mut iters = 0;
        let mut newton_used = false;
        let mut stalled = false;

        while iters < self.solver.max_iter {
            if res == 0.0 {
                return Ok((p, StepStats { iters, newton_used, residual: res }));
            }
            if !res.is_finite() {
                break;
            }
            let g = self.grad(q0, &p)?;
            let p_new: Vec<f64> = (0..p.len())
                .map(|i| p0[i] - self.h * g.d1[i])
                .collect();
            let res_new = inf_norm(&self.residual(q0, p0, &p_new)?);
            iters += 1;

            if res_new < best.1 {
                best = (p_new.clone(), res_new);
            }
            let improved = res_new < res;
            if res_new > 0.5 * res && res_new > tol {
                stalled = true;
            }
            p = p_new;
            res = res_new;
            if stalled {
                break;
            }
            if res <= tol && !improved {
                // Converged and sitting at the floor.
                return Ok((best.0, StepStats { iters, newton_used, residual: best.1 }));
            }
        }

        if best.1 <= tol && !stalled {
            return Ok((best.0, StepStats { iters, newton_used, residual: best.1 }));
        }

        if !self.solver.newton_fallback {
            return Err(Error::SolverDiverged {
                residual: best.1,
                iters,
                tol,
            });
        }

        // Damped Newton from the best iterate seen so far.
        newton_used = true;
        let d = p0.len();
        let mut p = if best.1.is_finite() {
            best.0.clone()
        } else {
            p0.to_vec()
        };
        let mut r = self.residual(q0, p0, &p)?;
        let mut res = inf_norm(&r);
        while iters < self.solver.max_iter {
            if res == 0.0 {
                break;
            }
            // J[i][j] = d residual_i / d p1_j by central differences.
            let fd = self.solver.fd_step;
            let mut jac = vec![vec![0.0; d]; d];
            for j in 0..d {
                let mut pp = p.clone();
                pp[j] += fd;
                let rp = self.residual(q0, p0, &pp)?;
                pp[j] = p[j] - fd;
                let rm = self.residual(q0, p0, &pp)?;
                for i in 0..d {
                    jac[i][j] = (rp[i] - rm[i]) / (2.0 * fd);
                }
            }
            let delta = solve_linear(jac, r.iter().map(|x| -x).collect()).ok_or(
                Error::SolverDiverged {
                    residual: res,
                    iters,
                    tol,
                },
            )?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..10 {
                let cand: Vec<f64> = (0..d).map(|i| p[i] + alpha * delta[i]).collect();
                let r_cand = self.residual(q0, p0, &cand)?;
                let res_cand = inf_norm(&r_cand);
                if res_cand < res {
                    p = cand;
                    r = r_cand;
                    res = res_cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            iters += 1;
            if res < best.1 {
                best = (p.clone(), res);
            }
            if !accepted {
                // No damping step improved: either converged to the
                // floor or genuinely stuck.
                break;
            }
        }

        if best.1 <= tol {
            Ok((
                best.0,
                StepStats {
                    iters,
                    newton_used,
                    residual: best.1,
                },
            ))
        } else {
            Err(Error::SolverDiverged {
                residual: best.1,
                iters,
                tol,
            })
        }
    }

    /// Iterates the map `n_steps` times. The result holds the initial
    /// state plus one state per completed step.
    pub fn rollout(
        &self,
        state0: &PhaseState,
        n_steps: usize,
    ) -> std::result::Result<Trajectory, RolloutFailure> {
        self.rollout_with(state0, n_steps, None)
    }

    /// Rollout with an optional periodic reduction: after every step
    /// all components (momenta and positions) are wrapped into
    /// `[0, period)`. Meaningful only for maps whose dynamics commute
    /// with those shifts, such as angle-valued systems; it keeps the
    /// states inside the region where a learned `S` was fitted.
    pub fn rollout_with(
        &self,
        state0: &PhaseState,
        n_steps: usize,
        wrap_period: Option<f64>,
    ) -> std::result::Result<Trajectory, RolloutFailure> {
        let mut states = Vec::with_capacity(n_steps + 1);
        let mut current = state0.clone();
        if let Some(tau) = wrap_period {
            current = wrap_state(&current, tau);
        }
        states.push(current.clone());
        for step in 0..n_steps {
            match self.step(&current) {
                Ok(mut next) => {
                    if let Some(tau) = wrap_period {
                        next = wrap_state(&next, tau);
                    }
                    states.push(next.clone());
                    current = next;
                }
                Err(cause) => {
                    return Err(RolloutFailure {
                        partial: Trajectory::new(self.h, 0.0, states),
                        step,
                        cause,
                    });
                }
            }
        }
        Ok(Trajectory::new(self.h, 0.0, states))
    }

    /// Jacobian of the full step map at `state` in the flat `(p, q)`
    /// layout, by central differences with the configured step.
    pub fn jacobian(&self, state: &PhaseState) -> Result<Vec<Vec<f64>>> {
        let n = 2 * self.dim();
        let flat = state.to_flat();
        let fd = self.solver.fd_step;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut xp = flat.clone();
            xp[j] += fd;
            let sp = self.step(&PhaseState::from_flat(&xp)?)?.to_flat();
            xp[j] = flat[j] - fd;
            let sm = self.step(&PhaseState::from_flat(&xp)?)?.to_flat();
            cols.push(
                sp.iter()
                    .zip(&sm)
                    .map(|(a, b)| (a - b) / (2.0 * fd))
                    .collect::<Vec<f64>>(),
            );
        }
        let mut jac = vec![vec![0.0; n]; n];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..n {
                jac[i][j] = col[i];
            }
        }
        Ok(jac)
    }

    /// `|M^T J M - J|_F` for the step Jacobian `M` at `state`; zero
    /// for an exactly symplectic map, up to solver and
    /// finite-difference noise.
    pub fn symplecticity_defect(&self, state: &PhaseState) -> Result<f64> {
        Ok(symplectic_defect_of(&self.jacobian(state)?))
    }
}

fn wrap_state(state: &PhaseState, period: f64) -> PhaseState {
    PhaseState {
        p: state.p.iter().map(|&x| x.rem_euclid(period)).collect(),
        q: state.q.iter().map(|&x| x.rem_euclid(period)).collect(),
    }
}

/// `|M^T J M - J|_F` where `J` is the canonical form on the flat
/// `(p, q)` layout: `J = [[0, I], [-I, 0]]` in d-by-d blocks. The
/// matrix must be square with even size.
pub fn symplectic_defect_of(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    assert!(n.is_multiple_of(2) && m.iter().all(|row| row.len() == n));
    let d = n / 2;
    let j_of = |i: usize, k: usize| -> f64 {
        if i < d && k == i + d {
            1.0
        } else if i >= d && k == i - d {
            -1.0
        } else {
            0.0
        }
    };
    // (M^T J M)_{ik} = sum_{a,b} M_{ai} J_{ab} M_{bk}
    //               = sum_a M_{ai} (J M)_{ak}.
    let mut defect_sq = 0.0;
    for i in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                // (J M)_{ak}: J has one nonzero per row.
                let jm = if a < d { m[a + d][k] } else { -m[a - d][k] };
                acc += m[a][i] * jm;
            }
            let diff = acc - j_of(i, k);
            defect_sq += diff * diff;
        }
    }
    defect_sq.sqrt()
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            // row > col, so the pivot row sits in the head split.
            let (head, tail) = a.split_at_mut(row);
            for (x, pv) in tail[0][col..].iter_mut().zip(&head[col][col..]) {
                *x -= f * pv;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
