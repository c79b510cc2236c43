//! Dataset generation and serialization.
//!
//! A dataset is a bundle of short reference trajectories ("sequences")
//! of a single system at a fixed coarse step `h`. Sequences are
//! generated independently with per-sequence RNG streams derived from
//! one master seed, so generation parallelizes without changing any
//! byte of the output.

use crate::error::{Error, Result};
use crate::state::{PhaseState, Trajectory, TrainingPair};
use crate::systems::{
    default_scheme, reference_integrate, standard_map_rollout, wrap_angle, Scheme, SystemSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// How initial conditions are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScheme {
    /// Uniform orbital elements for the planar Kepler problem:
    /// semi-major axis, eccentricity, true anomaly and argument of
    /// periapsis each drawn uniformly from their ranges, then
    /// converted to Cartesian phase-space coordinates.
    OrbitalBox {
        a_range: (f64, f64),
        e_range: (f64, f64),
        anomaly_range: (f64, f64),
        periapsis_range: (f64, f64),
    },
    /// Isotropic Gaussian perturbations of states along one reference
    /// orbit started at `ref_state`: a base state is picked uniformly
    /// among `n_ref` stored states, then every component receives
    /// `N(0, sigma^2)` noise.
    GaussianTube {
        ref_state: PhaseState,
        sigma: f64,
        n_ref: usize,
    },
}

impl SamplingScheme {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingScheme::OrbitalBox { .. } => "orbital_box",
            SamplingScheme::GaussianTube { .. } => "gaussian_tube",
        }
    }

    fn validate(&self, system: SystemSpec) -> Result<()> {
        match self {
            SamplingScheme::OrbitalBox {
                a_range,
                e_range,
                anomaly_range,
                periapsis_range,
            } => {
                if system != SystemSpec::Kepler2d {
                    return Err(Error::InvalidConfig(format!(
                        "orbital_box sampling is defined only for kepler2d, not {}",
                        system.name()
                    )));
                }
                for (name, range) in [
                    ("a_range", a_range),
                    ("e_range", e_range),
                    ("anomaly_range", anomaly_range),
                    ("periapsis_range", periapsis_range),
                ] {
                    if !(range.0.is_finite() && range.1.is_finite() && range.0 <= range.1) {
                        return Err(Error::InvalidConfig(format!(
                            "orbital_box {name} must be a finite ordered range, got {range:?}"
                        )));
                    }
                }
                if a_range.0 <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "orbital_box semi-major axes must be positive".into(),
                    ));
                }
                if e_range.0 < 0.0 || e_range.1 >= 1.0 {
                    return Err(Error::InvalidConfig(
                        "orbital_box eccentricities must lie in [0, 1)".into(),
                    ));
                }
                Ok(())
            }
            SamplingScheme::GaussianTube {
                ref_state,
                sigma,
                n_ref,
            } => {
                if ref_state.dim() != system.dim() {
                    return Err(Error::DimensionMismatch {
                        context: "tube reference state",
                        expected: system.dim(),
                        got: ref_state.dim(),
                    });
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "tube sigma must be positive, got {sigma}"
                    )));
                }
                if *n_ref == 0 {
                    return Err(Error::InvalidConfig(
                        "tube needs at least one reference state".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Generation parameters shared by sampling and integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Coarse step between recorded states. Must be 1 for the
    /// standard map.
    pub h: f64,
    /// Internal integrator step for continuous-time systems; must
    /// divide `h`. Ignored by the standard map.
    pub tau: f64,
    /// Reference integrator; `None` picks the system default
    /// (splitting where separable, Runge-Kutta otherwise).
    pub scheme: Option<Scheme>,
    /// States per sequence (at least 2).
    pub seq_len: usize,
    pub n_sequences: usize,
    pub seed: u64,
}

/// A generated dataset: `n_sequences` trajectories of `seq_len` states
/// each, all at step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub system: SystemSpec,
    pub h: f64,
    pub seed: u64,
    pub sequences: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.len())
    }

    pub fn n_pairs(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.len().saturating_sub(1))
            .sum()
    }
}

/// Derives the RNG seed of sequence `index` from the master seed with
/// a splitmix-style mix, so sequences are independent and the mapping
/// is stable across platforms and thread counts.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Converts planar orbital elements (unit gravitational parameter) to
/// Cartesian phase-space coordinates.
///
/// With semi-latus rectum `l = a (1 - e^2)` and radius
/// `r = l / (1 + e cos nu)`, the position sits at angle
/// `u = peri + nu` from the x axis and the velocity splits into a
/// radial part `e sin(nu) / sqrt(l)` and a transverse part
/// `(1 + e cos nu) / sqrt(l)`.
pub fn kepler_state_from_elements(a: f64, e: f64, peri: f64, nu: f64) -> Result<PhaseState> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "semi-major axis must be positive, got {a}"
        )));
    }
    if !(0.0..1.0).contains(&e) {
        return Err(Error::InvalidConfig(format!(
            "eccentricity must lie in [0, 1), got {e}"
        )));
    }
    let l = a * (1.0 - e * e);
    let r = l / (1.0 + e * nu.cos());
    let u = peri + nu;
    let (su, cu) = u.sin_cos();
    let q = vec![r * cu, r * su];
    let vr = e * nu.sin() / l.sqrt();
    let vt = (1.0 + e * nu.cos()) / l.sqrt();
    let p = vec![vr * cu - vt * su, vr * su + vt * cu];
    PhaseState::new(p, q)
}

/// Builds the tube's reference orbit: coarse states of the true
/// dynamics starting from `ref_state`. Standard-map states are wrapped
/// into the torus so the tube stays compact.
fn tube_reference_orbit(
    system: SystemSpec,
    ref_state: &PhaseState,
    n_ref: usize,
    gen: &GenerationConfig,
) -> Result<Vec<PhaseState>> {
    if n_ref == 1 {
        return Ok(vec![ref_state.clone()]);
    }
    match system {
        SystemSpec::StandardMap { k } => {
            let start = PhaseState {
                p: ref_state.p.iter().map(|&x| wrap_angle(x)).collect(),
                q: ref_state.q.iter().map(|&x| wrap_angle(x)).collect(),
            };
            let traj = standard_map_rollout(&start, k, n_ref - 1)?;
            Ok(traj
                .states
                .into_iter()
                .map(|s| PhaseState {
                    p: s.p.iter().map(|&x| wrap_angle(x)).collect(),
                    q: s.q.iter().map(|&x| wrap_angle(x)).collect(),
                })
                .collect())
        }
        _ => {
            let scheme = gen.scheme.unwrap_or_else(|| default_scheme(system));
            let traj =
                reference_integrate(system, ref_state, gen.h, n_ref - 1, gen.tau, scheme)?;
            Ok(traj.states)
        }
    }
}

/// Draws `n` initial conditions. Each index uses its own derived RNG
/// stream, so any prefix of the output is independent of `n`.
pub fn sample_initial_conditions(
    system: SystemSpec,
    sampling: &SamplingScheme,
    n: usize,
    gen: &GenerationConfig,
) -> Result<Vec<PhaseState>> {
    sampling.validate(system)?;
    match sampling {
        SamplingScheme::OrbitalBox {
            a_range,
            e_range,
            anomaly_range,
            periapsis_range,
        } => (0..n)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(gen.seed, j as u64));
                let a = sample_range(&mut rng, *a_range);
                let e = sample_range(&mut rng, *e_range);
                let nu = sample_range(&mut rng, *anomaly_range);
                let peri = sample_range(&mut rng, *periapsis_range);
                kepler_state_from_elements(a, e, peri, nu)
            })
            .collect(),
        SamplingScheme::GaussianTube {
            ref_state,
            sigma,
            n_ref,
        } => {
            let base = tube_reference_orbit(system, ref_state, *n_ref, gen)?;
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| Error::InvalidConfig(format!("tube noise: {e}")))?;
            Ok((0..n)
                .map(|j| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(gen.seed, j as u64));
                    let pick = rng.gen_range(0..base.len());
                    let b = &base[pick];
                    PhaseState {
                        p: b.p.iter().map(|x| x + normal.sample(&mut rng)).collect(),
                        q: b.q.iter().map(|x| x + normal.sample(&mut rng)).collect(),
                    }
                })
                .collect())
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Generates the full dataset: samples initial conditions and rolls
/// each out with the reference dynamics. Sequences are produced in
/// parallel; per-sequence seeding keeps the result identical for any
/// thread count.
pub fn generate_dataset(
    system: SystemSpec,
    sampling: &SamplingScheme,
    gen: &GenerationConfig,
) -> Result<TrajectoryDataset> {
    if gen.seq_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequences need at least 2 states, got {}",
            gen.seq_len
        )));
    }
    if gen.n_sequences == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one sequence".into()));
    }
    if let SystemSpec::StandardMap { .. } = system {
        if gen.h != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "the standard map advances one kick per step; h must be 1, got {}",
                gen.h
            )));
        }
    }
    let ics = sample_initial_conditions(system, sampling, gen.n_sequences, gen)?;
    let steps = gen.seq_len - 1;
    let sequences: Result<Vec<Trajectory>> = ics
        .into_par_iter()
        .map(|ic| match system {
            SystemSpec::StandardMap { k } => standard_map_rollout(&ic, k, steps),
            _ => {
                let scheme = gen.scheme.unwrap_or_else(|| default_scheme(system));
                reference_integrate(system, &ic, gen.h, steps, gen.tau, scheme)
            }
        })
        .collect();
    Ok(TrajectoryDataset {
        system,
        h: gen.h,
        seed: gen.seed,
        sequences: sequences?,
    })
}

/// Flattens a dataset into supervised pairs for generating-function
/// training: every consecutive state pair contributes
/// `(q_i, p_{i+1}, dq = q_{i+1} - q_i, dp = p_i - p_{i+1})`.
pub fn extract_pairs(ds: &TrajectoryDataset) -> Vec<TrainingPair> {
    let mut pairs = Vec::with_capacity(ds.n_pairs());
    for seq in &ds.sequences {
        for w in seq.states.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            pairs.push(TrainingPair {
                q: a.q.clone(),
                p_next: b.p.clone(),
                dq: b.q.iter().zip(&a.q).map(|(x, y)| x - y).collect(),
                dp: a.p.iter().zip(&b.p).map(|(x, y)| x - y).collect(),
            });
        }
    }
    pairs
}

/// A state paired with a first-order finite-difference estimate of its
/// time derivative, the supervision for unstructured baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub state: PhaseState,
    pub dp_dt: Vec<f64>,
    pub dq_dt: Vec<f64>,
}

/// Forward differences `(x_{i+1} - x_i) / h` at every non-final state.
pub fn finite_difference_targets(ds: &TrajectoryDataset) -> Vec<FieldSample> {
    let mut out = Vec::with_capacity(ds.n_pairs());
    for seq in &ds.sequences {
        for w in seq.states.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            out.push(FieldSample {
                state: a.clone(),
                dp_dt: b.p.iter().zip(&a.p).map(|(x, y)| (x - y) / ds.h).collect(),
                dq_dt: b.q.iter().zip(&a.q).map(|(x, y)| (x - y) / ds.h).collect(),
            });
        }
    }
    out
}

fn system_tag(system: SystemSpec) -> (u32, f64) {
    match system {
        SystemSpec::Kepler2d => (0, 0.0),
        SystemSpec::HenonHeiles => (1, 0.0),
        SystemSpec::Pcr3bp { mu } => (2, mu),
        SystemSpec::StandardMap { k } => (3, k),
        SystemSpec::Harmonic1d => (4, 0.0),
    }
}

fn system_from_tag(tag: u32, param: f64, path: &Path) -> Result<SystemSpec> {
    match tag {
        0 => Ok(SystemSpec::Kepler2d),
        1 => Ok(SystemSpec::HenonHeiles),
        2 => Ok(SystemSpec::Pcr3bp { mu: param }),
        3 => Ok(SystemSpec::StandardMap { k: param }),
        4 => Ok(SystemSpec::Harmonic1d),
        other => Err(Error::malformed(path, format!("unknown system tag {other}"))),
    }
}

fn system_from_name(name: &str, param: Option<f64>, path: &Path) -> Result<SystemSpec> {
    match name {
        "kepler2d" => Ok(SystemSpec::Kepler2d),
        "henon_heiles" => Ok(SystemSpec::HenonHeiles),
        "pcr3bp" => Ok(SystemSpec::Pcr3bp {
            mu: param
                .ok_or_else(|| Error::malformed(path, "pcr3bp dataset missing param header"))?,
        }),
        "standard_map" => Ok(SystemSpec::StandardMap {
            k: param.ok_or_else(|| {
                Error::malformed(path, "standard_map dataset missing param header")
            })?,
        }),
        "harmonic1d" => Ok(SystemSpec::Harmonic1d),
        other => Err(Error::malformed(path, format!("unknown system {other:?}"))),
    }
}

fn uniform_seq_len(ds: &TrajectoryDataset) -> Result<usize> {
    let len = ds.seq_len();
    if len < 2 {
        return Err(Error::InvalidConfig("dataset sequences are empty".into()));
    }
    if ds.sequences.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidConfig(
            "dataset sequences have unequal lengths".into(),
        ));
    }
    Ok(len)
}

/// Writes the dataset as CSV: `#`-prefixed `key: value` header lines,
/// one column-name line, then one row per state with columns
/// `seq, idx, t, p1..pd, q1..qd`. Floats carry 17 significant digits
/// so a read reproduces the exact bits.
pub fn write_dataset_csv(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let seq_len = uniform_seq_len(ds)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = ds.dim();
    let (_, param) = system_tag(ds.system);
    let fmt = crate::ioutil::fmt_f64;
    let mut header = String::new();
    header.push_str("# format: trajectory-dataset v1\n");
    header.push_str(&format!("# system: {}\n", ds.system.name()));
    if matches!(
        ds.system,
        SystemSpec::Pcr3bp { .. } | SystemSpec::StandardMap { .. }
    ) {
        header.push_str(&format!("# param: {}\n", fmt(param)));
    }
    header.push_str(&format!("# dim: {d}\n"));
    header.push_str(&format!("# h: {}\n", fmt(ds.h)));
    header.push_str(&format!("# seed: {}\n", ds.seed));
    header.push_str(&format!("# sequences: {}\n", ds.sequences.len()));
    header.push_str(&format!("# seq_len: {seq_len}\n"));
    header.push_str("seq,idx,t");
    for i in 1..=d {
        header.push_str(&format!(",p{i}"));
    }
    for i in 1..=d {
        header.push_str(&format!(",q{i}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;

    let mut line = String::new();
    for (j, seq) in ds.sequences.iter().enumerate() {
        for (i, s) in seq.states.iter().enumerate() {
            line.clear();
            line.push_str(&format!("{j},{i},{}", fmt(seq.time(i))));
            for v in s.p.iter().chain(s.q.iter()) {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by `write_dataset_csv`.
pub fn read_dataset_csv(path: &Path) -> Result<TrajectoryDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut system_name = None;
    let mut param = None;
    let mut dim = None;
    let mut h = None;
    let mut seed = None;
    let mut n_sequences = None;
    let mut seq_len = None;
    let mut saw_columns = false;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let ctx = format!("line {}", lineno + 1);
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((key, value)) = rest.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "system" => system_name = Some(value.to_string()),
                    "param" => param = Some(crate::ioutil::parse_f64(value, path, &ctx)?),
                    "dim" => dim = Some(crate::ioutil::parse_usize(value, path, &ctx)?),
                    "h" => h = Some(crate::ioutil::parse_f64(value, path, &ctx)?),
                    "seed" => {
                        seed = Some(value.parse::<u64>().map_err(|_| {
                            Error::malformed(path, format!("{ctx}: bad seed {value:?}"))
                        })?)
                    }
                    "sequences" => {
                        n_sequences = Some(crate::ioutil::parse_usize(value, path, &ctx)?)
                    }
                    "seq_len" => seq_len = Some(crate::ioutil::parse_usize(value, path, &ctx)?),
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_columns {
            // Column-name line.
            saw_columns = true;
            continue;
        }
        let mut fields = line.split(',');
        let seq = crate::ioutil::parse_usize(
            fields.next().ok_or_else(|| Error::malformed(path, format!("{ctx}: empty row")))?,
            path,
            &ctx,
        )?;
        let idx = crate::ioutil::parse_usize(
            fields
                .next()
                .ok_or_else(|| Error::malformed(path, format!("{ctx}: missing idx")))?,
            path,
            &ctx,
        )?;
        let values: Result<Vec<f64>> = fields
            .map(|f| crate::ioutil::parse_f64(f, path, &ctx))
            .collect();
        // The time column is redundant (t = i h); skip it.
        let values = values?;
        if values.is_empty() {
            return Err(Error::malformed(path, format!("{ctx}: missing state columns")));
        }
        rows.push((seq, idx, values[1..].to_vec()));
    }

    let system_name =
        system_name.ok_or_else(|| Error::malformed(path, "missing system header"))?;
    let system = system_from_name(&system_name, param, path)?;
    let d = dim.ok_or_else(|| Error::malformed(path, "missing dim header"))?;
    if d != system.dim() {
        return Err(Error::malformed(
            path,
            format!("dim {} does not match system {}", d, system.name()),
        ));
    }
    let h = h.ok_or_else(|| Error::malformed(path, "missing h header"))?;
    let seed = seed.ok_or_else(|| Error::malformed(path, "missing seed header"))?;
    let n_seq = n_sequences.ok_or_else(|| Error::malformed(path, "missing sequences header"))?;
    let seq_len = seq_len.ok_or_else(|| Error::malformed(path, "missing seq_len header"))?;
    if rows.len() != n_seq * seq_len {
        return Err(Error::malformed(
            path,
            format!(
                "expected {} rows ({} sequences x {}), found {}",
                n_seq * seq_len,
                n_seq,
                seq_len,
                rows.len()
            ),
        ));
    }

    let mut sequences = Vec::with_capacity(n_seq);
    for j in 0..n_seq {
        let mut states = Vec::with_capacity(seq_len);
        for i in 0..seq_len {
            let (seq, idx, values) = &rows[j * seq_len + i];
            if *seq != j || *idx != i {
                return Err(Error::malformed(
                    path,
                    format!("row order broken at sequence {j}, index {i}"),
                ));
            }
            if values.len() != 2 * d {
                return Err(Error::malformed(
                    path,
                    format!(
                        "sequence {j} index {i}: expected {} state columns, got {}",
                        2 * d,
                        values.len()
                    ),
                ));
            }
            states.push(PhaseState::from_flat(values)?);
        }
        sequences.push(Trajectory::new(h, 0.0, states));
    }
    Ok(TrajectoryDataset {
        system,
        h,
        seed,
        sequences,
    })
}

const BINARY_MAGIC: &[u8; 8] = b"GFDS0001";

/// Binary twin of the CSV format: the same header fields followed by
/// raw little-endian doubles, `p` block then `q` block per state.
pub fn write_dataset_binary(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let seq_len = uniform_seq_len(ds)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (tag, param) = system_tag(ds.system);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(BINARY_MAGIC)?;
    write(&tag.to_le_bytes())?;
    write(&param.to_le_bytes())?;
    write(&(ds.dim() as u32).to_le_bytes())?;
    write(&ds.h.to_le_bytes())?;
    write(&ds.seed.to_le_bytes())?;
    write(&(ds.sequences.len() as u64).to_le_bytes())?;
    write(&(seq_len as u64).to_le_bytes())?;
    for seq in &ds.sequences {
        for s in &seq.states {
            for v in s.p.iter().chain(s.q.iter()) {
                write(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by `write_dataset_binary`.
pub fn read_dataset_binary(path: &Path) -> Result<TrajectoryDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != BINARY_MAGIC {
        return Err(Error::malformed(path, "bad magic"));
    }
    let tag = read_u32(&mut r, path)?;
    let param = read_f64(&mut r, path)?;
    let system = system_from_tag(tag, param, path)?;
    let d = read_u32(&mut r, path)? as usize;
    if d != system.dim() {
        return Err(Error::malformed(
            path,
            format!("dim {} does not match system {}", d, system.name()),
        ));
    }
    let h = read_f64(&mut r, path)?;
    let seed = read_u64(&mut r, path)?;
    let n_seq = read_u64(&mut r, path)? as usize;
    let seq_len = read_u64(&mut r, path)? as usize;
    if seq_len < 2 {
        return Err(Error::malformed(path, format!("seq_len {seq_len} below 2")));
    }
    let mut sequences = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let mut states = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            let mut flat = vec![0.0; 2 * d];
            for v in flat.iter_mut() {
                *v = read_f64(&mut r, path)?;
            }
            states.push(PhaseState::from_flat(&flat)?);
        }
        sequences.push(Trajectory::new(h, 0.0, states));
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(Error::malformed(path, "trailing bytes after data")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(TrajectoryDataset {
        system,
        h,
        seed,
        sequences,
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(buf))
}

/// Writes a single trajectory as CSV with columns `idx, t, p.., q..`.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = traj.dim();
    let fmt = crate::ioutil::fmt_f64;
    let mut out = String::new();
    out.push_str("# format: trajectory v1\n");
    out.push_str(&format!("# dim: {d}\n"));
    out.push_str(&format!("# h: {}\n", fmt(traj.h)));
    out.push_str(&format!("# t0: {}\n", fmt(traj.t0)));
    out.push_str("idx,t");
    for i in 1..=d {
        out.push_str(&format!(",p{i}"));
    }
    for i in 1..=d {
        out.push_str(&format!(",q{i}"));
    }
    out.push('\n');
    for (i, s) in traj.states.iter().enumerate() {
        out.push_str(&format!("{i},{}", fmt(traj.time(i))));
        for v in s.p.iter().chain(s.q.iter()) {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trajectory written by `write_trajectory_csv`.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut dim = None;
    let mut h = None;
    let mut t0 = None;
    let mut saw_columns = false;
    let mut states = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let ctx = format!("line {}", lineno + 1);
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.trim().split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "dim" => dim = Some(crate::ioutil::parse_usize(value, path, &ctx)?),
                    "h" => h = Some(crate::ioutil::parse_f64(value, path, &ctx)?),
                    "t0" => t0 = Some(crate::ioutil::parse_f64(value, path, &ctx)?),
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_columns {
            saw_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let d = dim.ok_or_else(|| Error::malformed(path, "missing dim header"))?;
        if fields.len() != 2 + 2 * d {
            return Err(Error::malformed(
                path,
                format!("{ctx}: expected {} columns, got {}", 2 + 2 * d, fields.len()),
            ));
        }
        let values: Result<Vec<f64>> = fields[2..]
            .iter()
            .map(|f| crate::ioutil::parse_f64(f, path, &ctx))
            .collect();
        states.push(PhaseState::from_flat(&values?)?);
    }
    Ok(Trajectory::new(
        h.ok_or_else(|| Error::malformed(path, "missing h header"))?,
        t0.unwrap_or(0.0),
        states,
    ))
}
