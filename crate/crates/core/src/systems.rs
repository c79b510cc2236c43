//! Benchmark systems and reference integration.
//!
//! Four continuous-time Hamiltonian systems plus one discrete-time
//! area-preserving map. Reference trajectories come from high-order
//! splitting (separable systems) or classical Runge-Kutta at a fine
//! internal step.

use crate::error::{Error, Result};
use crate::state::{PhaseState, Trajectory};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Default mass ratio for the restricted three-body problem
/// (Earth-Moon).
pub const DEFAULT_MU: f64 = 0.012150585609624;

/// Positions closer than this to a gravitational center are rejected
/// rather than evaluated.
const SINGULARITY_RADIUS: f64 = 1e-8;

/// A benchmark system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SystemSpec {
    /// Planar two-body problem in reduced coordinates,
    /// `H = |p|^2/2 - 1/|q|`, d = 2.
    Kepler2d,
    /// `H = |p|^2/2 + |q|^2/2 + q1^2 q2 + q2^3/3`, d = 2.
    HenonHeiles,
    /// Planar circular restricted three-body problem in the rotating
    /// frame, d = 2. `mu` is the mass ratio of the smaller primary.
    Pcr3bp { mu: f64 },
    /// Chirikov standard map on the torus, d = 1, discrete time with
    /// unit step. `k` is the kick strength.
    StandardMap { k: f64 },
    /// Unit-frequency harmonic oscillator `H = (p^2 + q^2)/2`, d = 1.
    Harmonic1d,
}

impl SystemSpec {
    /// Degrees of freedom.
    pub fn dim(self) -> usize {
        match self {
            SystemSpec::Kepler2d | SystemSpec::HenonHeiles | SystemSpec::Pcr3bp { .. } => 2,
            SystemSpec::StandardMap { .. } | SystemSpec::Harmonic1d => 1,
        }
    }

    /// Whether the system evolves in continuous time under a
    /// Hamiltonian vector field (the standard map does not).
    pub fn is_flow(self) -> bool {
        !matches!(self, SystemSpec::StandardMap { .. })
    }

    /// Whether `H = T(p) + V(q)` with `T = |p|^2/2`, which is what the
    /// splitting integrators require.
    pub fn is_separable(self) -> bool {
        matches!(
            self,
            SystemSpec::Kepler2d | SystemSpec::HenonHeiles | SystemSpec::Harmonic1d
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemSpec::Kepler2d => "kepler2d",
            SystemSpec::HenonHeiles => "henon_heiles",
            SystemSpec::Pcr3bp { .. } => "pcr3bp",
            SystemSpec::StandardMap { .. } => "standard_map",
            SystemSpec::Harmonic1d => "harmonic1d",
        }
    }

    /// The conserved energy (for the standard map there is none; an
    /// error is returned).
    pub fn hamiltonian(self, state: &PhaseState) -> Result<f64> {
        self.check_state(state)?;
        let (p, q) = (&state.p, &state.q);
        match self {
            SystemSpec::Kepler2d => {
                let r = norm(q);
                if r < SINGULARITY_RADIUS {
                    return Err(Error::DomainViolation(format!(
                        "kepler2d position within {SINGULARITY_RADIUS} of the center"
                    )));
                }
                Ok(0.5 * dot(p, p) - 1.0 / r)
            }
            SystemSpec::HenonHeiles => Ok(0.5 * dot(p, p)
                + 0.5 * dot(q, q)
                + q[0] * q[0] * q[1]
                + q[1] * q[1] * q[1] / 3.0),
            SystemSpec::Pcr3bp { mu } => {
                let (r1, r2) = pcr3bp_radii(q, mu)?;
                Ok(0.5 * dot(p, p) + p[0] * q[1] - p[1] * q[0] - (1.0 - mu) / r1 - mu / r2)
            }
            SystemSpec::StandardMap { .. } => Err(Error::InvalidConfig(
                "standard_map is a discrete map and has no Hamiltonian function".into(),
            )),
            SystemSpec::Harmonic1d => Ok(0.5 * (p[0] * p[0] + q[0] * q[0])),
        }
    }

    /// Time derivatives `(dp/dt, dq/dt)` of the canonical equations.
    pub fn vector_field(self, state: &PhaseState) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_state(state)?;
        let (p, q) = (&state.p, &state.q);
        match self {
            SystemSpec::Kepler2d | SystemSpec::HenonHeiles | SystemSpec::Harmonic1d => {
                let dv = self.grad_potential(q)?;
                Ok((dv.iter().map(|g| -g).collect(), p.clone()))
            }
            SystemSpec::Pcr3bp { mu } => {
                let (r1, r2) = pcr3bp_radii(q, mu)?;
                let (r1c, r2c) = (r1 * r1 * r1, r2 * r2 * r2);
                let gx = (1.0 - mu) * (q[0] + mu) / r1c + mu * (q[0] + mu - 1.0) / r2c;
                let gy = (1.0 - mu) * q[1] / r1c + mu * q[1] / r2c;
                let dp = vec![p[1] - gx, -p[0] - gy];
                let dq = vec![p[0] + q[1], p[1] - q[0]];
                Ok((dp, dq))
            }
            SystemSpec::StandardMap { .. } => Err(Error::InvalidConfig(
                "standard_map has no continuous-time vector field".into(),
            )),
        }
    }

    /// Gradient of the potential for separable systems.
    pub fn grad_potential(self, q: &[f64]) -> Result<Vec<f64>> {
        match self {
            SystemSpec::Kepler2d => {
                let r = norm(q);
                if r < SINGULARITY_RADIUS {
                    return Err(Error::DomainViolation(format!(
                        "kepler2d position within {SINGULARITY_RADIUS} of the center"
                    )));
                }
                let r3 = r * r * r;
                Ok(q.iter().map(|qi| qi / r3).collect())
            }
            SystemSpec::HenonHeiles => Ok(vec![
                q[0] + 2.0 * q[0] * q[1],
                q[1] + q[0] * q[0] + q[1] * q[1],
            ]),
            SystemSpec::Harmonic1d => Ok(vec![q[0]]),
            _ => Err(Error::InvalidConfig(format!(
                "{} is not separable",
                self.name()
            ))),
        }
    }

    fn check_state(self, state: &PhaseState) -> Result<()> {
        if state.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "system state",
                expected: self.dim(),
                got: state.dim(),
            });
        }
        if !state.is_finite() {
            return Err(Error::NonFinite("system state".into()));
        }
        Ok(())
    }
}

fn pcr3bp_radii(q: &[f64], mu: f64) -> Result<(f64, f64)> {
    let r1 = ((q[0] + mu) * (q[0] + mu) + q[1] * q[1]).sqrt();
    let r2 = ((q[0] + mu - 1.0) * (q[0] + mu - 1.0) + q[1] * q[1]).sqrt();
    if r1 < SINGULARITY_RADIUS || r2 < SINGULARITY_RADIUS {
        return Err(Error::DomainViolation(format!(
            "pcr3bp position within {SINGULARITY_RADIUS} of a primary"
        )));
    }
    Ok((r1, r2))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One application of the standard map with kick strength `k`:
/// `p' = p + k sin(theta)`, `theta' = theta + p'`. Values are *not*
/// reduced modulo 2 pi; callers that want torus coordinates wrap
/// afterwards.
pub fn standard_map_step(state: &PhaseState, k: f64) -> Result<PhaseState> {
    if state.dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "standard map state",
            expected: 1,
            got: state.dim(),
        });
    }
    let p1 = state.p[0] + k * state.q[0].sin();
    let q1 = state.q[0] + p1;
    Ok(PhaseState {
        p: vec![p1],
        q: vec![q1],
    })
}

/// Iterates the standard map, recording every state (unreduced).
pub fn standard_map_rollout(state0: &PhaseState, k: f64, n_steps: usize) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(state0.clone());
    let mut current = state0.clone();
    for _ in 0..n_steps {
        current = standard_map_step(&current, k)?;
        states.push(current.clone());
    }
    Ok(Trajectory::new(1.0, 0.0, states))
}

/// Wraps a value into `[0, 2 pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    x.rem_euclid(TWO_PI)
}

/// Reference integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Fourth-order composition of leapfrog steps. Separable systems
    /// only.
    Yoshida4,
    /// Plain second-order leapfrog. Separable systems only.
    Leapfrog,
    /// Classical fourth-order Runge-Kutta on the full vector field.
    Rk4,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Yoshida4 => "yoshida4",
            Scheme::Leapfrog => "leapfrog",
            Scheme::Rk4 => "rk4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "yoshida4" => Ok(Scheme::Yoshida4),
            "leapfrog" => Ok(Scheme::Leapfrog),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::InvalidConfig(format!(
                "unknown integration scheme {other:?}"
            ))),
        }
    }
}

/// The scheme used for ground truth when none is requested explicitly:
/// the symplectic composition where the splitting applies, otherwise
/// Runge-Kutta.
pub fn default_scheme(system: SystemSpec) -> Scheme {
    if system.is_separable() {
        Scheme::Yoshida4
    } else {
        Scheme::Rk4
    }
}

/// Leapfrog (velocity Verlet) step for separable systems.
fn leapfrog_step(system: SystemSpec, state: &PhaseState, tau: f64) -> Result<PhaseState> {
    let mut g = system.grad_potential(&state.q)?;
    let mut p_half: Vec<f64> = state
        .p
        .iter()
        .zip(&g)
        .map(|(p, gi)| p - 0.5 * tau * gi)
        .collect();
    let q1: Vec<f64> = state
        .q
        .iter()
        .zip(&p_half)
        .map(|(q, ph)| q + tau * ph)
        .collect();
    g = system.grad_potential(&q1)?;
    for (ph, gi) in p_half.iter_mut().zip(&g) {
        *ph -= 0.5 * tau * gi;
    }
    Ok(PhaseState { p: p_half, q: q1 })
}

/// Fourth-order composition coefficients: three leapfrog substeps with
/// lengths `w1 tau, w0 tau, w1 tau` where `w1 = 1/(2 - 2^(1/3))` and
/// `w0 = 1 - 2 w1`.
fn yoshida4_step(system: SystemSpec, state: &PhaseState, tau: f64) -> Result<PhaseState> {
    let cbrt2 = 2f64.powf(1.0 / 3.0);
    let w1 = 1.0 / (2.0 - cbrt2);
    let w0 = 1.0 - 2.0 * w1;
    let s1 = leapfrog_step(system, state, w1 * tau)?;
    let s2 = leapfrog_step(system, &s1, w0 * tau)?;
    leapfrog_step(system, &s2, w1 * tau)
}

/// Classical RK4 step on the canonical vector field.
fn rk4_step(system: SystemSpec, state: &PhaseState, tau: f64) -> Result<PhaseState> {
    let d = state.dim();
    let eval = |s: &PhaseState| system.vector_field(s);
    let advance = |s: &PhaseState, k: &(Vec<f64>, Vec<f64>), c: f64| PhaseState {
        p: (0..d).map(|i| s.p[i] + c * k.0[i]).collect(),
        q: (0..d).map(|i| s.q[i] + c * k.1[i]).collect(),
    };
    let k1 = eval(state)?;
    let k2 = eval(&advance(state, &k1, tau / 2.0))?;
    let k3 = eval(&advance(state, &k2, tau / 2.0))?;
    let k4 = eval(&advance(state, &k3, tau))?;
    Ok(PhaseState {
        p: (0..d)
            .map(|i| {
                state.p[i] + tau / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i])
            })
            .collect(),
        q: (0..d)
            .map(|i| {
                state.q[i] + tau / 6.0 * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i])
            })
            .collect(),
    })
}

/// One integrator step of length `tau` with the given scheme. Splitting
/// schemes require a separable system.
pub fn integrate_step(
    system: SystemSpec,
    state: &PhaseState,
    tau: f64,
    scheme: Scheme,
) -> Result<PhaseState> {
    if !system.is_flow() {
        return Err(Error::InvalidConfig(format!(
            "{} is a discrete map, not a flow",
            system.name()
        )));
    }
    if matches!(scheme, Scheme::Leapfrog | Scheme::Yoshida4) && !system.is_separable() {
        return Err(Error::InvalidConfig(format!(
            "splitting scheme {} needs a separable system, got {}",
            scheme.name(),
            system.name()
        )));
    }
    match scheme {
        Scheme::Leapfrog => leapfrog_step(system, state, tau),
        Scheme::Yoshida4 => yoshida4_step(system, state, tau),
        Scheme::Rk4 => rk4_step(system, state, tau),
    }
}

/// Integrates a continuous-time system from `state0`, recording states
/// every `h` (so `n_steps + 1` states in total spanning time
/// `n_steps * h`). The integrator runs internally at step `tau`, which
/// must divide `h` to working precision.
pub fn reference_integrate(
    system: SystemSpec,
    state0: &PhaseState,
    h: f64,
    n_steps: usize,
    tau: f64,
    scheme: Scheme,
) -> Result<Trajectory> {
    if !system.is_flow() {
        return Err(Error::InvalidConfig(format!(
            "{} is discrete; iterate the map instead of integrating",
            system.name()
        )));
    }
    if !(h > 0.0 && tau > 0.0 && h.is_finite() && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "record step and internal step must be positive, got h={h}, tau={tau}"
        )));
    }
    let substeps_f = h / tau;
    let substeps = substeps_f.round() as usize;
    if substeps == 0 || (substeps_f - substeps as f64).abs() > 1e-9 * substeps_f {
        return Err(Error::InvalidConfig(format!(
            "internal step tau={tau} must evenly divide record step h={h}"
        )));
    }
    if matches!(scheme, Scheme::Yoshida4 | Scheme::Leapfrog) && !system.is_separable() {
        return Err(Error::InvalidConfig(format!(
            "{} requires a separable Hamiltonian; {} is not",
            scheme.name(),
            system.name()
        )));
    }
    let step = |s: &PhaseState| -> Result<PhaseState> {
        match scheme {
            Scheme::Yoshida4 => yoshida4_step(system, s, tau),
            Scheme::Leapfrog => leapfrog_step(system, s, tau),
            Scheme::Rk4 => rk4_step(system, s, tau),
        }
    };
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(state0.clone());
    let mut current = state0.clone();
    for _ in 0..n_steps {
        for _ in 0..substeps {
            current = step(&current)?;
        }
        states.push(current.clone());
    }
    Ok(Trajectory::new(h, 0.0, states))
}

/// Osculating orbital elements of a planar Kepler state with unit
/// gravitational parameter: semi-major axis `a = -1/(2H)` and
/// eccentricity `e = sqrt(1 + 2 H L^2)` where
/// `L = q1 p2 - q2 p1`. Only meaningful for bound motion (`H < 0`).
pub fn orbital_elements(state: &PhaseState) -> Result<(f64, f64)> {
    let energy = SystemSpec::Kepler2d.hamiltonian(state)?;
    if energy >= 0.0 {
        return Err(Error::DomainViolation(format!(
            "orbital elements need a bound orbit, got energy {energy}"
        )));
    }
    let (p, q) = (&state.p, &state.q);
    let ang = q[0] * p[1] - q[1] * p[0];
    let a = -1.0 / (2.0 * energy);
    let e = (1.0 + 2.0 * energy * ang * ang).max(0.0).sqrt();
    Ok((a, e))
}

/// Maximum absolute drift of the Hamiltonian along a trajectory,
/// relative to its value at the first state.
pub fn max_energy_drift(system: SystemSpec, traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return Ok(0.0);
    }
    let h0 = system.hamiltonian(&traj.states[0])?;
    let mut worst = 0.0f64;
    for s in &traj.states[1..] {
        worst = worst.max((system.hamiltonian(s)? - h0).abs());
    }
    Ok(worst)
}
