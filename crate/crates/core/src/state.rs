use crate::error::{Error, Result};

/// A point in phase space with `d` momentum and `d` position components.
///
/// The flat layout used throughout (file formats, Jacobians, network
/// inputs for learned vector fields) is `(p_1..p_d, q_1..q_d)`:
/// momenta first.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PhaseState {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::DimensionMismatch {
                context: "phase state p vs q",
                expected: p.len(),
                got: q.len(),
            });
        }
        Ok(PhaseState { p, q })
    }

    /// Number of degrees of freedom (half the phase-space dimension).
    pub fn dim(&self) -> usize {
        self.p.len()
    }

    /// Reads a state from the flat `(p, q)` layout.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch {
                context: "flat phase state must have even length",
                expected: flat.len() + 1,
                got: flat.len(),
            });
        }
        let d = flat.len() / 2;
        Ok(PhaseState {
            p: flat[..d].to_vec(),
            q: flat[d..].to_vec(),
        })
    }

    /// Flattens to the `(p, q)` layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.dim());
        out.extend_from_slice(&self.p);
        out.extend_from_slice(&self.q);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|x| x.is_finite())
    }

    /// Euclidean distance to `other` in the full phase space.
    pub fn distance(&self, other: &PhaseState) -> f64 {
        self.p
            .iter()
            .zip(&other.p)
            .chain(self.q.iter().zip(&other.q))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A uniformly sampled trajectory: states at times `t0 + i*h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub t0: f64,
    pub states: Vec<PhaseState>,
}

impl Trajectory {
    pub fn new(h: f64, t0: f64, states: Vec<PhaseState>) -> Self {
        Trajectory { h, t0, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.dim())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + self.h * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    /// Keeps every `every`-th state (including the first). The step of
    /// the result is `every * h`.
    pub fn subsample(&self, every: usize) -> Trajectory {
        assert!(every > 0, "subsample stride must be positive");
        Trajectory {
            h: self.h * every as f64,
            t0: self.t0,
            states: self.states.iter().step_by(every).cloned().collect(),
        }
    }
}

/// One supervised pair extracted from consecutive trajectory states.
///
/// For a step `(q_i, p_i) -> (q_{i+1}, p_{i+1})` the stored targets are
/// the increments that a type-2 generating function must reproduce:
/// `dq = q_{i+1} - q_i` and `dp = p_i - p_{i+1}`. `p_next` is the
/// momentum after the step, which is the second gradient argument.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub q: Vec<f64>,
    pub p_next: Vec<f64>,
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
}

impl TrainingPair {
    pub fn dim(&self) -> usize {
        self.q.len()
    }
}
