//! Run configuration: a flat sectioned `key = value` text format,
//! command-line overrides, and resolution into typed settings with
//! per-system defaults.
//!
//! Precedence: `--set section.key=value` overrides beat config-file
//! values, which beat the built-in defaults. Resolution consumes keys;
//! anything left over is reported as an unknown key with its field
//! path, so typos fail loudly instead of silently using a default.

use crate::textio::fmt_f64;
use gfnn::dataset::{kepler_state_from_elements, GenerationConfig, SamplingScheme};
use gfnn::diagnostics::CrossingDirection;
use gfnn::genfun::{AnalyticGf, SolverConfig};
use gfnn::systems::Scheme;
use gfnn::training::{LrSchedule, ModelKind, PredictScheme, TrainConfig};
use gfnn::{Activation, Error, PhaseState, Result, SystemSpec};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

const TWO_PI: f64 = 2.0 * PI;

/// Earth-Moon mass ratio, the rotating-frame default.
pub const DEFAULT_MU: f64 = 0.012150585609624;

/// Parsed but untyped configuration: `"section.key" -> value`.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses the sectioned text format: `[section]` headers,
    /// `key = value` lines, `#` comments, blank lines ignored.
    pub fn parse(text: &str, origin: &Path) -> Result<RawConfig> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before.trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::malformed(
                        origin,
                        format!("line {}: empty section name", lineno + 1),
                    ));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::malformed(
                    origin,
                    format!("line {}: expected key = value, got {line:?}", lineno + 1),
                )
            })?;
            let key = key.trim();
            if key.is_empty() || section.is_empty() {
                return Err(Error::malformed(
                    origin,
                    format!("line {}: key outside a [section]", lineno + 1),
                ));
            }
            entries.insert(format!("{section}.{key}"), value.trim().to_string());
        }
        Ok(RawConfig { entries })
    }

    pub fn load(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override {spec:?} is not section.key=value"))
        })?;
        let key = key.trim();
        if !key.contains('.') {
            return Err(Error::InvalidConfig(format!(
                "override key {key:?} needs a section prefix (section.key)"
            )));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries.remove(&format!("{section}.{key}"))
    }

    fn finish(self) -> Result<()> {
        if let Some((key, _)) = self.entries.into_iter().next() {
            let (section, name) = key.split_once('.').unwrap_or(("", key.as_str()));
            return Err(Error::InvalidConfig(format!(
                "[{section}] {name}: unknown configuration key"
            )));
        }
        Ok(())
    }
}

fn bad(section: &str, key: &str, detail: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("[{section}] {key}: {detail}"))
}

/// Typed getters over a section of the raw map. The closures keep the
/// field path in every error message.
struct Section<'a> {
    raw: &'a mut RawConfig,
    name: &'static str,
}

impl<'a> Section<'a> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.raw.take(self.name, key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| bad(self.name, key, format!("bad float {v:?}"))),
        }
    }

    fn f64_opt(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| bad(self.name, key, format!("bad float {v:?}"))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| bad(self.name, key, format!("bad integer {v:?}"))),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| bad(self.name, key, format!("bad integer {v:?}"))),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(bad(self.name, key, format!("expected true or false, got {v:?}"))),
        }
    }

    fn pair(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse_pair(&v).ok_or_else(|| bad(self.name, key, format!("expected lo,hi, got {v:?}"))),
        }
    }

    fn floats_opt(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => parse_floats(&v)
                .map(Some)
                .ok_or_else(|| bad(self.name, key, format!("expected comma-separated floats, got {v:?}"))),
        }
    }

    fn path(&mut self, key: &str, default: PathBuf) -> PathBuf {
        self.take(key).map(PathBuf::from).unwrap_or(default)
    }
}

fn parse_pair(v: &str) -> Option<(f64, f64)> {
    let fs = parse_floats(v)?;
    if fs.len() == 2 {
        Some((fs[0], fs[1]))
    } else {
        None
    }
}

fn parse_floats(v: &str) -> Option<Vec<f64>> {
    v.split(',')
        .map(|f| f.trim().parse::<f64>().ok())
        .collect()
}

fn fmt_floats(fs: &[f64]) -> String {
    fs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

/// `auto`, `none`, or an explicit period for torus reductions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WrapMode {
    Auto,
    Never,
    Period(f64),
}

impl WrapMode {
    fn parse(section: &str, key: &str, v: Option<String>) -> Result<WrapMode> {
        match v.as_deref() {
            None | Some("auto") => Ok(WrapMode::Auto),
            Some("none") => Ok(WrapMode::Never),
            Some(s) => s
                .parse::<f64>()
                .map(WrapMode::Period)
                .map_err(|_| bad(section, key, format!("expected auto, none or a period, got {s:?}"))),
        }
    }

    pub fn render(self) -> String {
        match self {
            WrapMode::Auto => "auto".into(),
            WrapMode::Never => "none".into(),
            WrapMode::Period(x) => fmt_f64(x),
        }
    }

    /// The period to reduce by, if any: `auto` wraps torus systems.
    pub fn resolve(self, system: SystemSpec) -> Option<f64> {
        match self {
            WrapMode::Auto => match system {
                SystemSpec::StandardMap { .. } => Some(TWO_PI),
                _ => None,
            },
            WrapMode::Never => None,
            WrapMode::Period(x) => Some(x),
        }
    }
}

/// `auto` (skip the transient, fit the rest) or an explicit time range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitWindow {
    Auto,
    Range(f64, f64),
}

impl FitWindow {
    pub fn render(self) -> String {
        match self {
            FitWindow::Auto => "auto".into(),
            FitWindow::Range(lo, hi) => format!("{},{}", fmt_f64(lo), fmt_f64(hi)),
        }
    }
}

/// Histogram range: `auto` (torus period, or the joint sample range)
/// or explicit bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlRange {
    Auto,
    Range(f64, f64),
}

impl KlRange {
    pub fn render(self) -> String {
        match self {
            KlRange::Auto => "auto".into(),
            KlRange::Range(lo, hi) => format!("{},{}", fmt_f64(lo), fmt_f64(hi)),
        }
    }
}

/// Where a prediction run gets its map.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    File(PathBuf),
    Analytic(AnalyticGf),
}

impl ModelSource {
    fn parse(v: &str) -> Result<ModelSource> {
        if let Some(name) = v.strip_prefix("analytic:") {
            Ok(ModelSource::Analytic(AnalyticGf::parse(name)?))
        } else {
            Ok(ModelSource::File(PathBuf::from(v)))
        }
    }

    fn render(&self) -> String {
        match self {
            ModelSource::File(p) => p.display().to_string(),
            ModelSource::Analytic(gf) => format!("analytic:{}", gf.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetCfg {
    pub sampling: SamplingScheme,
    pub gen: GenerationConfig,
    /// Base path of the dataset files; `.csv` and `.bin` are appended.
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct NetCfg {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl NetCfg {
    /// Full layer widths for this model kind on a d-dof system.
    pub fn dims(&self, d: usize) -> Vec<usize> {
        let out = match self.kind {
            ModelKind::Gfnn | ModelKind::Hnn => 1,
            ModelKind::Vfnn => 2 * d,
        };
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(2 * d);
        dims.extend_from_slice(&self.hidden);
        dims.push(out);
        dims
    }
}

#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub core: TrainConfig,
    pub predict_scheme: PredictScheme,
    pub model_path: PathBuf,
    pub history_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PredictCfg {
    pub model: ModelSource,
    pub state: PhaseState,
    pub n_steps: usize,
    /// Step-size override; defaults to the model's stored step.
    pub h: Option<f64>,
    pub wrap: WrapMode,
    pub solver: SolverConfig,
    pub trajectory_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DiagCfg {
    pub fit_window: FitWindow,
    pub bins: usize,
    pub kl_range: KlRange,
    pub wrap: WrapMode,
    pub plane: usize,
    pub direction: CrossingDirection,
    pub kl: bool,
    pub poincare: bool,
    pub error_report_path: PathBuf,
    pub growth_summary_path: PathBuf,
    pub drift_path: PathBuf,
    pub section_path: PathBuf,
    pub kl_path: PathBuf,
}

/// Everything a command needs, defaults applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub dataset: DatasetCfg,
    pub net: NetCfg,
    pub train: TrainCfg,
    pub predict: PredictCfg,
    pub diag: DiagCfg,
    pub out_dir: PathBuf,
}

/// A tube reference state on the given energy level of the two-well
/// potential system: all momentum on the first axis, origin position.
pub fn energy_ref_state(energy: f64) -> Result<PhaseState> {
    if energy < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "energy level must be nonnegative, got {energy}"
        )));
    }
    PhaseState::new(vec![(2.0 * energy).sqrt(), 0.0], vec![0.0, 0.0])
}

fn default_ref_state(system: SystemSpec) -> Result<Option<PhaseState>> {
    Ok(match system {
        SystemSpec::Harmonic1d => Some(PhaseState::new(vec![0.0], vec![1.0])?),
        SystemSpec::StandardMap { .. } => Some(PhaseState::new(vec![0.6], vec![3.0])?),
        SystemSpec::HenonHeiles => Some(energy_ref_state(1.0 / 12.0)?),
        // No sensible universal orbit in the rotating frame.
        SystemSpec::Pcr3bp { .. } => None,
        SystemSpec::Kepler2d => None,
    })
}

fn default_predict_state(system: SystemSpec) -> Result<PhaseState> {
    match system {
        SystemSpec::Harmonic1d => PhaseState::new(vec![0.0], vec![1.0]),
        SystemSpec::StandardMap { .. } => PhaseState::new(vec![0.6], vec![3.0]),
        SystemSpec::HenonHeiles => energy_ref_state(1.0 / 12.0),
        SystemSpec::Kepler2d => kepler_state_from_elements(1.0, 0.0, 0.0, 0.0),
        SystemSpec::Pcr3bp { .. } => Err(Error::InvalidConfig(
            "[predict] state: required for the rotating-frame system (no default orbit)".into(),
        )),
    }
}

fn default_h(system: SystemSpec) -> f64 {
    match system {
        SystemSpec::HenonHeiles => 0.5,
        SystemSpec::StandardMap { .. } => 1.0,
        _ => 0.1,
    }
}

impl RunConfig {
    /// Resolves a raw config, consuming every key it understands and
    /// rejecting the rest.
    pub fn resolve(mut raw: RawConfig) -> Result<RunConfig> {
        // A manifest records how it was produced; those keys are
        // informational on re-runs.
        raw.take("run", "command");
        raw.take("run", "args");

        let mut sys = Section { raw: &mut raw, name: "system" };
        let name = sys
            .take("name")
            .ok_or_else(|| bad("system", "name", "required (kepler2d, henon_heiles, pcr3bp, standard_map, harmonic1d)"))?
            .replace('-', "_");
        let k = sys.f64("k", 1.2)?;
        let mu = sys.f64("mu", DEFAULT_MU)?;
        let system = match name.as_str() {
            "kepler2d" => SystemSpec::Kepler2d,
            "henon_heiles" => SystemSpec::HenonHeiles,
            "pcr3bp" => SystemSpec::Pcr3bp { mu },
            "standard_map" => SystemSpec::StandardMap { k },
            "harmonic1d" => SystemSpec::Harmonic1d,
            other => return Err(bad("system", "name", format!("unknown system {other:?}"))),
        };
        let d = system.dim();

        let mut out = Section { raw: &mut raw, name: "output" };
        let out_dir = out.path("dir", PathBuf::from("out"));

        let mut ds = Section { raw: &mut raw, name: "dataset" };
        let h = ds.f64("h", default_h(system))?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(bad("dataset", "h", format!("must be positive, got {h}")));
        }
        if matches!(system, SystemSpec::StandardMap { .. }) && h != 1.0 {
            return Err(bad("dataset", "h", "the kicked map advances one unit per step"));
        }
        let tau = ds.f64("tau", if system.is_flow() { h / 10.0 } else { h })?;
        let integrator = match ds.take("integrator") {
            None => None,
            Some(v) => Some(Scheme::parse(&v).map_err(|e| bad("dataset", "integrator", e))?),
        };
        let gen = GenerationConfig {
            h,
            tau,
            scheme: integrator,
            seq_len: ds.usize("seq_len", 2)?,
            n_sequences: ds.usize("n_sequences", 1000)?,
            seed: ds.u64("seed", 0)?,
        };
        let scheme_name = ds.take("scheme").unwrap_or_else(|| {
            if system == SystemSpec::Kepler2d {
                "orbital_box".into()
            } else {
                "gaussian_tube".into()
            }
        });
        let sampling = match scheme_name.replace('-', "_").as_str() {
            "orbital_box" => SamplingScheme::OrbitalBox {
                a_range: ds.pair("a_range", (0.8, 1.2))?,
                e_range: ds.pair("e_range", (0.0, 0.05))?,
                anomaly_range: ds.pair("anomaly_range", (0.0, TWO_PI))?,
                periapsis_range: ds.pair("periapsis_range", (0.0, TWO_PI))?,
            },
            "gaussian_tube" => {
                let energy = ds.f64_opt("energy")?;
                let ref_state = match ds.floats_opt("ref_state")? {
                    Some(flat) => {
                        if flat.len() != 2 * d {
                            return Err(bad(
                                "dataset",
                                "ref_state",
                                format!("expected {} components (p.., q..), got {}", 2 * d, flat.len()),
                            ));
                        }
                        PhaseState::from_flat(&flat)?
                    }
                    None => match energy {
                        Some(e) if system == SystemSpec::HenonHeiles => energy_ref_state(e)?,
                        _ => default_ref_state(system)?.ok_or_else(|| {
                            bad("dataset", "ref_state", "required for this system (no default orbit)")
                        })?,
                    },
                };
                SamplingScheme::GaussianTube {
                    ref_state,
                    sigma: ds.f64("sigma", default_sigma(system))?,
                    n_ref: ds.usize("n_ref", default_n_ref(system))?,
                }
            }
            other => return Err(bad("dataset", "scheme", format!("unknown sampling scheme {other:?}"))),
        };
        let dataset_path = ds.path("path", out_dir.join("dataset"));
        let dataset = DatasetCfg { sampling, gen, path: dataset_path };

        let mut net = Section { raw: &mut raw, name: "net" };
        let kind = match net.take("kind") {
            None => ModelKind::Gfnn,
            Some(v) => ModelKind::parse(&v).map_err(|e| bad("net", "kind", e))?,
        };
        let hidden = match net.take("hidden") {
            None => vec![200, 100, 50, 20],
            Some(v) => v
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("net", "hidden", format!("expected comma-separated widths, got {v:?}")))?,
        };
        let activation = match net.take("activation") {
            None => Activation::Tanh,
            Some(v) => Activation::parse(&v).map_err(|e| bad("net", "activation", e))?,
        };
        let net = NetCfg {
            kind,
            hidden,
            activation,
            init_seed: net.u64("init_seed", 0)?,
        };

        let mut tr = Section { raw: &mut raw, name: "train" };
        let defaults = TrainConfig::default();
        let checkpoint_every = tr.usize("checkpoint_every", 0)?;
        let checkpoint_dir = if checkpoint_every > 0 {
            Some(tr.path("checkpoint_dir", out_dir.join("checkpoint")))
        } else {
            tr.take("checkpoint_dir").map(PathBuf::from)
        };
        let schedule = match tr.take("schedule") {
            None => defaults.schedule,
            Some(v) => LrSchedule::parse(&v).map_err(|e| bad("train", "schedule", e))?,
        };
        let core = TrainConfig {
            batch_size: tr.usize("batch_size", defaults.batch_size)?,
            epochs: tr.usize("epochs", defaults.epochs)?,
            lr0: tr.f64("lr0", defaults.lr0)?,
            schedule,
            beta1: tr.f64("beta1", defaults.beta1)?,
            beta2: tr.f64("beta2", defaults.beta2)?,
            eps: tr.f64("eps", defaults.eps)?,
            seed: tr.u64("seed", defaults.seed)?,
            shuffle: tr.bool("shuffle", defaults.shuffle)?,
            checkpoint_every,
            checkpoint_dir,
        };
        core.validate()?;
        let predict_scheme = match tr.take("predict_scheme") {
            None => PredictScheme::Euler,
            Some(v) => PredictScheme::parse(&v).map_err(|e| bad("train", "predict_scheme", e))?,
        };
        let train = TrainCfg {
            core,
            predict_scheme,
            model_path: tr.path("model_path", out_dir.join("model.json")),
            history_path: tr.path("history_path", out_dir.join("history.csv")),
        };

        let mut pr = Section { raw: &mut raw, name: "predict" };
        let model = match pr.take("model") {
            None => ModelSource::File(train.model_path.clone()),
            Some(v) => ModelSource::parse(&v)?,
        };
        let elements = pr.floats_opt("elements")?;
        let state_flat = pr.floats_opt("state")?;
        let state = match (state_flat, elements) {
            (Some(_), Some(_)) => {
                return Err(bad("predict", "state", "give either state or elements, not both"))
            }
            (Some(flat), None) => {
                if flat.len() != 2 * d {
                    return Err(bad(
                        "predict",
                        "state",
                        format!("expected {} components (p.., q..), got {}", 2 * d, flat.len()),
                    ));
                }
                PhaseState::from_flat(&flat)?
            }
            (None, Some(el)) => {
                if system != SystemSpec::Kepler2d {
                    return Err(bad("predict", "elements", "orbital elements need the two-body system"));
                }
                if el.len() != 4 {
                    return Err(bad("predict", "elements", format!("expected a,e,periapsis,anomaly, got {} values", el.len())));
                }
                kepler_state_from_elements(el[0], el[1], el[2], el[3])?
            }
            (None, None) => default_predict_state(system)?,
        };
        let solver_defaults = SolverConfig::default();
        let solver = SolverConfig {
            abs_tol: pr.f64("abs_tol", solver_defaults.abs_tol)?,
            max_iter: pr.usize("max_iter", solver_defaults.max_iter)?,
            newton_fallback: pr.bool("newton_fallback", solver_defaults.newton_fallback)?,
            fd_step: pr.f64("fd_step", solver_defaults.fd_step)?,
        };
        let predict = PredictCfg {
            model,
            state,
            n_steps: pr.usize("n_steps", 1000)?,
            h: pr.f64_opt("h")?,
            wrap: WrapMode::parse("predict", "wrap", pr.take("wrap"))?,
            solver,
            trajectory_path: pr.path("trajectory_path", out_dir.join("trajectory.csv")),
        };

        let mut dg = Section { raw: &mut raw, name: "diagnostics" };
        let fit_window = match dg.take("fit_window") {
            None => FitWindow::Auto,
            Some(v) if v == "auto" => FitWindow::Auto,
            Some(v) => {
                let (lo, hi) = parse_pair(&v)
                    .ok_or_else(|| bad("diagnostics", "fit_window", format!("expected auto or lo,hi, got {v:?}")))?;
                FitWindow::Range(lo, hi)
            }
        };
        let kl_range = match dg.take("range") {
            None => KlRange::Auto,
            Some(v) if v == "auto" => KlRange::Auto,
            Some(v) => {
                let (lo, hi) = parse_pair(&v)
                    .ok_or_else(|| bad("diagnostics", "range", format!("expected auto or lo,hi, got {v:?}")))?;
                KlRange::Range(lo, hi)
            }
        };
        let direction = match dg.take("direction") {
            None => CrossingDirection::Positive,
            Some(v) => CrossingDirection::parse(&v).map_err(|e| bad("diagnostics", "direction", e))?,
        };
        let plane = dg.usize("plane", 0)?;
        if plane >= d {
            return Err(bad("diagnostics", "plane", format!("coordinate index out of range (system has {d} dof)")));
        }
        let diag = DiagCfg {
            fit_window,
            bins: dg.usize("bins", 100)?,
            kl_range,
            wrap: WrapMode::parse("diagnostics", "wrap", dg.take("wrap"))?,
            plane,
            direction,
            kl: dg.bool("kl", false)?,
            poincare: dg.bool("poincare", false)?,
            error_report_path: dg.path("error_report_path", out_dir.join("error_report.csv")),
            growth_summary_path: dg.path("growth_summary_path", out_dir.join("growth_summary.csv")),
            drift_path: dg.path("drift_path", out_dir.join("drift.csv")),
            section_path: dg.path("section_path", out_dir.join("section.csv")),
            kl_path: dg.path("kl_path", out_dir.join("kl.csv")),
        };

        raw.finish()?;
        Ok(RunConfig {
            system,
            dataset,
            net,
            train,
            predict,
            diag,
            out_dir,
        })
    }

    /// Renders the resolved configuration back into the text format,
    /// with a `[run]` section recording the command and its inputs.
    /// The output parses back to an identical configuration, so a
    /// manifest re-runs the command it describes.
    pub fn render_manifest(&self, command: &str, args: &[(&str, String)]) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("command = {command}\n"));
        let rendered: Vec<String> = args.iter().map(|(k, v)| format!("--{k} {v}")).collect();
        s.push_str(&format!("args = {}\n", rendered.join(" ")));

        s.push_str("\n[system]\n");
        s.push_str(&format!("name = {}\n", self.system.name()));
        match self.system {
            SystemSpec::StandardMap { k } => s.push_str(&format!("k = {}\n", fmt_f64(k))),
            SystemSpec::Pcr3bp { mu } => s.push_str(&format!("mu = {}\n", fmt_f64(mu))),
            _ => {}
        }

        s.push_str("\n[output]\n");
        s.push_str(&format!("dir = {}\n", self.out_dir.display()));

        s.push_str("\n[dataset]\n");
        let g = &self.dataset.gen;
        s.push_str(&format!("h = {}\n", fmt_f64(g.h)));
        s.push_str(&format!("tau = {}\n", fmt_f64(g.tau)));
        if let Some(sch) = g.scheme {
            s.push_str(&format!("integrator = {}\n", sch.name()));
        }
        s.push_str(&format!("seq_len = {}\n", g.seq_len));
        s.push_str(&format!("n_sequences = {}\n", g.n_sequences));
        s.push_str(&format!("seed = {}\n", g.seed));
        s.push_str(&format!("path = {}\n", self.dataset.path.display()));
        s.push_str(&format!("scheme = {}\n", self.dataset.sampling.name()));
        match &self.dataset.sampling {
            SamplingScheme::OrbitalBox {
                a_range,
                e_range,
                anomaly_range,
                periapsis_range,
            } => {
                s.push_str(&format!("a_range = {}\n", fmt_floats(&[a_range.0, a_range.1])));
                s.push_str(&format!("e_range = {}\n", fmt_floats(&[e_range.0, e_range.1])));
                s.push_str(&format!("anomaly_range = {}\n", fmt_floats(&[anomaly_range.0, anomaly_range.1])));
                s.push_str(&format!("periapsis_range = {}\n", fmt_floats(&[periapsis_range.0, periapsis_range.1])));
            }
            SamplingScheme::GaussianTube { ref_state, sigma, n_ref } => {
                s.push_str(&format!("ref_state = {}\n", fmt_floats(&ref_state.to_flat())));
                s.push_str(&format!("sigma = {}\n", fmt_f64(*sigma)));
                s.push_str(&format!("n_ref = {n_ref}\n"));
            }
        }

        s.push_str("\n[net]\n");
        s.push_str(&format!("kind = {}\n", self.net.kind.name()));
        let hidden: Vec<String> = self.net.hidden.iter().map(|w| w.to_string()).collect();
        s.push_str(&format!("hidden = {}\n", hidden.join(",")));
        s.push_str(&format!("activation = {}\n", self.net.activation.name()));
        s.push_str(&format!("init_seed = {}\n", self.net.init_seed));

        s.push_str("\n[train]\n");
        let t = &self.train.core;
        s.push_str(&format!("batch_size = {}\n", t.batch_size));
        s.push_str(&format!("epochs = {}\n", t.epochs));
        s.push_str(&format!("lr0 = {}\n", fmt_f64(t.lr0)));
        s.push_str(&format!("schedule = {}\n", t.schedule.render()));
        s.push_str(&format!("beta1 = {}\n", fmt_f64(t.beta1)));
        s.push_str(&format!("beta2 = {}\n", fmt_f64(t.beta2)));
        s.push_str(&format!("eps = {}\n", fmt_f64(t.eps)));
        s.push_str(&format!("seed = {}\n", t.seed));
        s.push_str(&format!("shuffle = {}\n", t.shuffle));
        s.push_str(&format!("checkpoint_every = {}\n", t.checkpoint_every));
        if let Some(dir) = &t.checkpoint_dir {
            s.push_str(&format!("checkpoint_dir = {}\n", dir.display()));
        }
        s.push_str(&format!("predict_scheme = {}\n", self.train.predict_scheme.name()));
        s.push_str(&format!("model_path = {}\n", self.train.model_path.display()));
        s.push_str(&format!("history_path = {}\n", self.train.history_path.display()));

        s.push_str("\n[predict]\n");
        s.push_str(&format!("model = {}\n", self.predict.model.render()));
        s.push_str(&format!("state = {}\n", fmt_floats(&self.predict.state.to_flat())));
        s.push_str(&format!("n_steps = {}\n", self.predict.n_steps));
        if let Some(h) = self.predict.h {
            s.push_str(&format!("h = {}\n", fmt_f64(h)));
        }
        s.push_str(&format!("wrap = {}\n", self.predict.wrap.render()));
        let sv = &self.predict.solver;
        s.push_str(&format!("abs_tol = {}\n", fmt_f64(sv.abs_tol)));
        s.push_str(&format!("max_iter = {}\n", sv.max_iter));
        s.push_str(&format!("newton_fallback = {}\n", sv.newton_fallback));
        s.push_str(&format!("fd_step = {}\n", fmt_f64(sv.fd_step)));
        s.push_str(&format!("trajectory_path = {}\n", self.predict.trajectory_path.display()));

        s.push_str("\n[diagnostics]\n");
        let dgc = &self.diag;
        s.push_str(&format!("fit_window = {}\n", dgc.fit_window.render()));
        s.push_str(&format!("bins = {}\n", dgc.bins));
        s.push_str(&format!("range = {}\n", dgc.kl_range.render()));
        s.push_str(&format!("wrap = {}\n", dgc.wrap.render()));
        s.push_str(&format!("plane = {}\n", dgc.plane));
        s.push_str(&format!("direction = {}\n", dgc.direction.name()));
        s.push_str(&format!("kl = {}\n", dgc.kl));
        s.push_str(&format!("poincare = {}\n", dgc.poincare));
        s.push_str(&format!("error_report_path = {}\n", dgc.error_report_path.display()));
        s.push_str(&format!("growth_summary_path = {}\n", dgc.growth_summary_path.display()));
        s.push_str(&format!("drift_path = {}\n", dgc.drift_path.display()));
        s.push_str(&format!("section_path = {}\n", dgc.section_path.display()));
        s.push_str(&format!("kl_path = {}\n", dgc.kl_path.display()));
        s
    }
}

fn default_sigma(system: SystemSpec) -> f64 {
    match system {
        // Noise on the momentum axis moves the energy by roughly
        // p * sigma; 0.05 keeps the two standard energy levels of the
        // two-well system well separated.
        SystemSpec::HenonHeiles => 0.05,
        SystemSpec::StandardMap { .. } => 0.5,
        _ => 0.5,
    }
}

fn default_n_ref(system: SystemSpec) -> usize {
    match system {
        SystemSpec::StandardMap { .. } => 1000,
        _ => 100,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<RunConfig> {
        RunConfig::resolve(RawConfig::parse(text, Path::new("test.conf")).unwrap())
    }

    #[test]
    fn kepler_defaults_fill_in() {
        let cfg = resolve("[system]\nname = kepler2d\n").unwrap();
        assert_eq!(cfg.dataset.gen.h, 0.1);
        match cfg.dataset.sampling {
            SamplingScheme::OrbitalBox { a_range, e_range, .. } => {
                assert_eq!(a_range, (0.8, 1.2));
                assert_eq!(e_range, (0.0, 0.05));
            }
            _ => panic!("expected the element-box sampler"),
        }
        assert_eq!(cfg.net.hidden, vec![200, 100, 50, 20]);
        assert_eq!(cfg.train.core.batch_size, 200);
        assert_eq!(cfg.train.core.lr0, 0.01);
        assert!(cfg.train.core.epochs >= 20);
    }

    #[test]
    fn standard_map_defaults_and_unit_step_guard() {
        let cfg = resolve("[system]\nname = standard_map\n").unwrap();
        assert_eq!(cfg.system, SystemSpec::StandardMap { k: 1.2 });
        assert_eq!(cfg.dataset.gen.h, 1.0);
        match &cfg.dataset.sampling {
            SamplingScheme::GaussianTube { sigma, n_ref, .. } => {
                assert_eq!(*sigma, 0.5);
                assert_eq!(*n_ref, 1000);
            }
            _ => panic!("expected the tube sampler"),
        }
        let err = resolve("[system]\nname = standard_map\n[dataset]\nh = 0.5\n");
        assert!(err.is_err());
    }

    #[test]
    fn two_well_energy_sets_the_tube_center() {
        let cfg = resolve("[system]\nname = henon_heiles\n[dataset]\nenergy = 0.16666666666666666\n").unwrap();
        match &cfg.dataset.sampling {
            SamplingScheme::GaussianTube { ref_state, .. } => {
                let e = 0.5 * ref_state.p.iter().map(|p| p * p).sum::<f64>();
                assert!((e - 1.0 / 6.0).abs() < 1e-12);
                assert_eq!(ref_state.q, vec![0.0, 0.0]);
            }
            _ => panic!("expected the tube sampler"),
        }
        assert_eq!(cfg.dataset.gen.h, 0.5);
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut raw = RawConfig::parse(
            "[system]\nname = harmonic1d\n[dataset]\nn_sequences = 700\nseed = 4\n",
            Path::new("test.conf"),
        )
        .unwrap();
        raw.set("dataset.n_sequences=9").unwrap();
        raw.set("train.epochs = 3").unwrap();
        let cfg = RunConfig::resolve(raw).unwrap();
        assert_eq!(cfg.dataset.gen.n_sequences, 9);
        assert_eq!(cfg.dataset.gen.seed, 4);
        assert_eq!(cfg.train.core.epochs, 3);
    }

    #[test]
    fn unknown_keys_fail_with_a_field_path() {
        let err = resolve("[system]\nname = harmonic1d\n[dataset]\nsample_count = 10\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("[dataset] sample_count"), "got {err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = resolve(
            "# experiment setup\n[system]\nname = harmonic1d # the 1-dof oscillator\n\n[train]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.train.core.epochs, 2);
    }

    #[test]
    fn manifest_round_trips_to_the_same_config() {
        let cfg = resolve(
            "[system]\nname = standard_map\nk = 0.6\n[dataset]\nn_sequences = 11\nsigma = 0.25\n[net]\nhidden = 8,8\nkind = vfnn\n[train]\nepochs = 2\nschedule = constant\n[predict]\nn_steps = 7\n[output]\ndir = elsewhere\n",
        )
        .unwrap();
        let manifest = cfg.render_manifest("gen-data", &[]);
        let again = resolve(&manifest).unwrap();
        let again_manifest = again.render_manifest("gen-data", &[]);
        assert_eq!(manifest, again_manifest);
        assert_eq!(again.system, cfg.system);
        assert_eq!(again.dataset.sampling, cfg.dataset.sampling);
        assert_eq!(again.train.core, cfg.train.core);
        assert_eq!(again.predict.n_steps, 7);
        assert_eq!(again.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn predict_state_sources_are_exclusive() {
        let err = resolve(
            "[system]\nname = kepler2d\n[predict]\nstate = 0,1,1,0\nelements = 1,0,0,0\n",
        );
        assert!(err.is_err());
        let cfg = resolve("[system]\nname = kepler2d\n[predict]\nelements = 1.0,0.0,0.0,0.0\n").unwrap();
        // A circular unit orbit starts at radius 1 with speed 1.
        let r: f64 = cfg.predict.state.q.iter().map(|q| q * q).sum::<f64>();
        assert!((r - 1.0).abs() < 1e-12);
    }
}
