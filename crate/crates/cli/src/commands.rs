//! The seven subcommands. Each returns the one-line `key=value`
//! summary for stdout, writes its outputs plus a `manifest-<cmd>.txt`
//! into the output directory, and is deterministic: re-running with
//! the same config and inputs reproduces every file byte for byte.

use crate::config::{FitWindow, KlRange, ModelSource, RunConfig};
use crate::textio::{fmt_f64, kv, read_run_csv, write_run_csv};
use gfnn::dataset::{
    extract_pairs, generate_dataset, read_dataset_binary, read_dataset_csv, write_dataset_binary,
    write_dataset_csv, TrajectoryDataset,
};
use gfnn::diagnostics::{
    component_samples, conserved_drift, fit_growth, fit_window_after, marginal_kl,
    poincare_section, trajectory_error, write_drift_csv, write_error_report_csv,
    write_kl_summary_csv, write_section_csv, ErrorReport, GrowthFit,
};
use gfnn::genfun::GenFunMap;
use gfnn::{PhaseState, Trajectory};
use gfnn::training::{
    baseline_rollout_with, euler_error_bound, train_baseline, train_gfnn, write_history_csv,
    EpochStats, ModelKind, SavedModel,
};
use gfnn::{Error, ParamNet, Result};
use std::path::Path;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    Ok(())
}

fn write_manifest(cfg: &RunConfig, command: &str, args: &[(&str, String)]) -> Result<()> {
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("manifest-{command}.txt"));
    std::fs::write(&path, cfg.render_manifest(command, args)).map_err(|e| Error::io(&path, e))
}

fn final_loss(history: &[EpochStats]) -> f64 {
    history.last().map_or(f64::NAN, |s| s.mean_loss)
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let ds = generate_dataset(cfg.system, &cfg.dataset.sampling, &cfg.dataset.gen)?;
    let csv = cfg.dataset.path.with_extension("csv");
    let bin = cfg.dataset.path.with_extension("bin");
    ensure_parent(&csv)?;
    write_dataset_csv(&ds, &csv)?;
    write_dataset_binary(&ds, &bin)?;
    write_manifest(cfg, "gen-data", &[])?;
    Ok([
        kv("cmd", "gen-data"),
        kv("system", cfg.system.name()),
        kv("scheme", cfg.dataset.sampling.name()),
        kv("n_sequences", ds.sequences.len().to_string()),
        kv("seq_len", ds.seq_len().to_string()),
        kv("pairs", ds.n_pairs().to_string()),
        kv("h", fmt_f64(ds.h)),
        kv("seed", ds.seed.to_string()),
        kv("csv", path_str(&csv)),
        kv("bin", path_str(&bin)),
    ]
    .join(" "))
}

fn load_dataset(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let bin = cfg.dataset.path.with_extension("bin");
    let csv = cfg.dataset.path.with_extension("csv");
    let ds = if bin.exists() {
        read_dataset_binary(&bin)?
    } else if csv.exists() {
        read_dataset_csv(&csv)?
    } else {
        return Err(Error::io(
            &bin,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset not found (run gen-data first, or point dataset.path at existing files)",
            ),
        ));
    };
    if ds.system != cfg.system {
        return Err(Error::InvalidConfig(format!(
            "dataset was generated for {}, but the config names {}",
            ds.system.name(),
            cfg.system.name()
        )));
    }
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let d = ds.dim();
    let net0 = ParamNet::xavier(&cfg.net.dims(d), cfg.net.activation, cfg.net.init_seed)?;
    let n_params = net0.n_params();
    let (model, history) = match cfg.net.kind {
        ModelKind::Gfnn => {
            let pairs = extract_pairs(&ds);
            let (net, history) = train_gfnn(&pairs, net0, ds.h, &cfg.train.core)?;
            (
                SavedModel {
                    kind: ModelKind::Gfnn,
                    h: ds.h,
                    predict: None,
                    net,
                },
                history,
            )
        }
        kind => {
            let model0 = gfnn::training::BaselineModel::new(kind, net0, cfg.train.predict_scheme)?;
            let (model, history) = train_baseline(&ds, model0, &cfg.train.core)?;
            (
                SavedModel {
                    kind,
                    h: ds.h,
                    predict: Some(model.predict),
                    net: model.net,
                },
                history,
            )
        }
    };
    ensure_parent(&cfg.train.model_path)?;
    model.save(&cfg.train.model_path)?;
    ensure_parent(&cfg.train.history_path)?;
    write_history_csv(&history, &cfg.train.history_path)?;
    write_manifest(cfg, "train", &[])?;
    Ok([
        kv("cmd", "train"),
        kv("kind", cfg.net.kind.name()),
        kv("system", cfg.system.name()),
        kv("pairs", ds.n_pairs().to_string()),
        kv("params", n_params.to_string()),
        kv("epochs", history.len().to_string()),
        kv("final_loss", fmt_f64(final_loss(&history))),
        kv("model", path_str(&cfg.train.model_path)),
        kv("history", path_str(&cfg.train.history_path)),
    ]
    .join(" "))
}

fn wrap_state(s: &PhaseState, period: f64) -> PhaseState {
    PhaseState {
        p: s.p.iter().map(|x| x.rem_euclid(period)).collect(),
        q: s.q.iter().map(|x| x.rem_euclid(period)).collect(),
    }
}

/// Trajectory, per-step solver iteration counts, and whether any step
/// needed the Newton fallback.
type RolloutStats = (Trajectory, Vec<usize>, bool);
/// Partial trajectory and counts, the failed step index, its cause.
type RolloutAbort = (Trajectory, Vec<usize>, usize, Error);

/// Iterates the implicit map, keeping per-step solver iteration counts.
/// A failed step reports its index and hands back everything computed
/// so far, mirroring the library rollout.
fn gf_rollout_with_stats(
    map: &GenFunMap,
    state0: &PhaseState,
    n_steps: usize,
    wrap: Option<f64>,
) -> std::result::Result<RolloutStats, RolloutAbort> {
    let mut current = match wrap {
        Some(tau) => wrap_state(state0, tau),
        None => state0.clone(),
    };
    let mut states = vec![current.clone()];
    let mut iters = Vec::with_capacity(n_steps);
    let mut newton_used = false;
    for step in 0..n_steps {
        match map.step_with_stats(&current) {
            Ok((mut next, stats)) => {
                if let Some(tau) = wrap {
                    next = wrap_state(&next, tau);
                }
                iters.push(stats.iters);
                newton_used |= stats.newton_used;
                states.push(next.clone());
                current = next;
            }
            Err(cause) => {
                return Err((Trajectory::new(map.h(), 0.0, states), iters, step, cause));
            }
        }
    }
    Ok((Trajectory::new(map.h(), 0.0, states), iters, newton_used))
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<String> {
    let state = cfg.predict.state.clone();
    let d = state.dim();
    let wrap = cfg.predict.wrap.resolve(cfg.system);
    let n_steps = cfg.predict.n_steps;
    if n_steps == 0 {
        return Err(Error::InvalidConfig("[predict] n_steps: must be at least 1".into()));
    }
    let out = &cfg.predict.trajectory_path;
    ensure_parent(out)?;
    write_manifest(cfg, "predict", &[])?;

    enum Runner {
        Map(GenFunMap),
        Baseline(gfnn::training::BaselineModel, f64),
    }
    let model_name = match &cfg.predict.model {
        ModelSource::File(p) => path_str(p),
        ModelSource::Analytic(gf) => format!("analytic:{}", gf.name()),
    };
    let runner = match &cfg.predict.model {
        ModelSource::Analytic(gf) => {
            let h = cfg.predict.h.unwrap_or(cfg.dataset.gen.h);
            Runner::Map(GenFunMap::analytic(*gf, d, h, cfg.predict.solver)?)
        }
        ModelSource::File(path) => {
            let saved = SavedModel::load(path)?;
            if saved.net.input_dim() != 2 * d {
                return Err(Error::InvalidConfig(format!(
                    "model at {} reads {} inputs, but the initial state has {} components",
                    path.display(),
                    saved.net.input_dim(),
                    2 * d
                )));
            }
            let h = cfg.predict.h.unwrap_or(saved.h);
            match saved.kind {
                ModelKind::Gfnn => Runner::Map(GenFunMap::from_net(saved.net, h, cfg.predict.solver)?),
                _ => Runner::Baseline(saved.into_baseline()?, h),
            }
        }
    };

    match runner {
        Runner::Map(map) => match gf_rollout_with_stats(&map, &state, n_steps, wrap) {
            Ok((traj, iters, newton_used)) => {
                write_run_csv(&traj, Some(&iters), out)?;
                Ok([
                    kv("cmd", "predict"),
                    kv("status", "ok"),
                    kv("model", &model_name),
                    kv("steps", n_steps.to_string()),
                    kv("h", fmt_f64(map.h())),
                    kv("max_iters", iters.iter().max().copied().unwrap_or(0).to_string()),
                    kv("newton_used", newton_used.to_string()),
                    kv("out", path_str(out)),
                ]
                .join(" "))
            }
            Err((partial, iters, step, cause)) => {
                // Keep what was computed, then fail with the step index.
                write_run_csv(&partial, Some(&iters), out)?;
                println!(
                    "{}",
                    [
                        kv("cmd", "predict"),
                        kv("status", "aborted"),
                        kv("model", &model_name),
                        kv("failed_step", step.to_string()),
                        kv("steps_completed", iters.len().to_string()),
                        kv("out", path_str(out)),
                    ]
                    .join(" ")
                );
                Err(Error::RolloutAborted {
                    step,
                    cause: Box::new(cause),
                })
            }
        },
        Runner::Baseline(model, h) => match baseline_rollout_with(&model, &state, h, n_steps, wrap) {
            Ok(traj) => {
                write_run_csv(&traj, None, out)?;
                Ok([
                    kv("cmd", "predict"),
                    kv("status", "ok"),
                    kv("model", &model_name),
                    kv("kind", model.kind.name()),
                    kv("scheme", model.predict.name()),
                    kv("steps", n_steps.to_string()),
                    kv("h", fmt_f64(h)),
                    kv("out", path_str(out)),
                ]
                .join(" "))
            }
            Err(failure) => {
                write_run_csv(&failure.partial, None, out)?;
                println!(
                    "{}",
                    [
                        kv("cmd", "predict"),
                        kv("status", "aborted"),
                        kv("model", &model_name),
                        kv("failed_step", failure.step.to_string()),
                        kv("steps_completed", failure.partial.len().saturating_sub(1).to_string()),
                        kv("out", path_str(out)),
                    ]
                    .join(" ")
                );
                Err(failure.into())
            }
        },
    }
}

fn resolve_kl_range(cfg: &RunConfig, samples: &[&[f64]]) -> (f64, f64) {
    match cfg.diag.kl_range {
        KlRange::Range(lo, hi) => (lo, hi),
        KlRange::Auto => {
            if let Some(period) = cfg.diag.wrap.resolve(cfg.system) {
                return (0.0, period);
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for set in samples {
                for &x in *set {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            if !(lo < hi) {
                (lo - 0.5, lo + 0.5)
            } else {
                (lo, hi)
            }
        }
    }
}

fn component_name(c: usize, d: usize) -> String {
    if c < d {
        format!("p{}", c + 1)
    } else {
        format!("q{}", c - d + 1)
    }
}

fn kl_entries(cfg: &RunConfig, pred: &Trajectory, truth: &Trajectory) -> Result<Vec<(String, f64)>> {
    let d = pred.dim();
    let wrap = cfg.diag.wrap.resolve(cfg.system);
    let mut entries = Vec::with_capacity(2 * d);
    for c in 0..2 * d {
        let ps = component_samples(std::slice::from_ref(pred), c, wrap)?;
        let ts = component_samples(std::slice::from_ref(truth), c, wrap)?;
        let range = resolve_kl_range(cfg, &[&ps, &ts]);
        let kl = marginal_kl(&ps, &ts, cfg.diag.bins, range)?;
        entries.push((component_name(c, d), kl));
    }
    Ok(entries)
}

const SUMMARY_HEADER: &str =
    "method,status,preferred,power_slope,power_rss,exp_rate,exp_rss,window_lo,window_hi,n_points,end_err\n";

/// One growth-summary row. Empty fields mean the fit was skipped.
fn summary_row(method: &str, status: &str, fit: Option<&GrowthFit>, end_err: Option<f64>) -> String {
    let mut fields = vec![method.to_string(), status.to_string()];
    match fit {
        Some(f) => fields.extend([
            f.preferred.name().to_string(),
            fmt_f64(f.power_slope),
            fmt_f64(f.power_rss),
            fmt_f64(f.exp_rate),
            fmt_f64(f.exp_rss),
            fmt_f64(f.window.0),
            fmt_f64(f.window.1),
            f.n_points.to_string(),
            fmt_f64(end_err.unwrap_or(f64::NAN)),
        ]),
        None => fields.extend(std::iter::repeat_n(String::new(), 9)),
    }
    let mut row = fields.join(",");
    row.push('\n');
    row
}

fn is_exact(report: &ErrorReport) -> bool {
    report.p_err.iter().chain(&report.q_err).all(|&e| e == 0.0)
}

fn fitted_report(cfg: &RunConfig, report: &ErrorReport) -> Result<ErrorReport> {
    let window = match cfg.diag.fit_window {
        FitWindow::Range(lo, hi) => (lo, hi),
        FitWindow::Auto => fit_window_after(&report.times, 10)?,
    };
    fit_growth(report, window)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    pred_path: &Path,
    truth_path: &Path,
    baseline_path: Option<&Path>,
) -> Result<String> {
    let pred = read_run_csv(pred_path)?;
    let truth = read_run_csv(truth_path)?;
    let report = trajectory_error(&pred, &truth)?;
    let args: Vec<(&str, String)> = [
        Some(("pred", path_str(pred_path))),
        Some(("truth", path_str(truth_path))),
        baseline_path.map(|b| ("baseline", path_str(b))),
    ]
    .into_iter()
    .flatten()
    .collect();
    write_manifest(cfg, "evaluate", &args)?;
    ensure_parent(&cfg.diag.error_report_path)?;
    ensure_parent(&cfg.diag.growth_summary_path)?;

    let mut summary_csv = String::from(SUMMARY_HEADER);
    let mut line = vec![kv("cmd", "evaluate"), kv("n", report.len().to_string())];

    if is_exact(&report) {
        write_error_report_csv(&report, &cfg.diag.error_report_path)?;
        summary_csv.push_str(&summary_row("prediction", "exact", None, None));
        line.push(kv("status", "exact"));
    } else {
        let fitted = fitted_report(cfg, &report)?;
        write_error_report_csv(&fitted, &cfg.diag.error_report_path)?;
        let fit = fitted.fit.expect("fit attached");
        let end_err = fitted.total_err().last().copied();
        summary_csv.push_str(&summary_row("prediction", "fitted", Some(&fit), end_err));
        line.push(kv("status", "fitted"));
        line.push(kv("preferred", fit.preferred.name()));
        line.push(kv("power_slope", fmt_f64(fit.power_slope)));
        line.push(kv("exp_rate", fmt_f64(fit.exp_rate)));
        line.push(kv("end_err", fmt_f64(end_err.unwrap_or(f64::NAN))));

        if cfg.system.is_flow() {
            let drift = conserved_drift(&pred, cfg.system)?;
            ensure_parent(&cfg.diag.drift_path)?;
            write_drift_csv(&drift, &cfg.diag.drift_path)?;
            line.push(kv("drift", path_str(&cfg.diag.drift_path)));
        }
        if cfg.diag.kl {
            let entries = kl_entries(cfg, &pred, &truth)?;
            ensure_parent(&cfg.diag.kl_path)?;
            write_kl_summary_csv(&entries, &cfg.diag.kl_path)?;
            line.push(kv("kl", path_str(&cfg.diag.kl_path)));
        }
        if cfg.diag.poincare {
            let section = poincare_section(&pred, cfg.diag.plane, cfg.diag.direction)?;
            ensure_parent(&cfg.diag.section_path)?;
            write_section_csv(&section, &cfg.diag.section_path)?;
            line.push(kv("section", path_str(&cfg.diag.section_path)));
        }
    }

    if let Some(bpath) = baseline_path {
        let base = read_run_csv(bpath)?;
        let breport = trajectory_error(&base, &truth)?;
        if is_exact(&breport) {
            summary_csv.push_str(&summary_row("baseline", "exact", None, None));
            line.push(kv("baseline_status", "exact"));
        } else {
            let bfitted = fitted_report(cfg, &breport)?;
            let bfit = bfitted.fit.expect("fit attached");
            let bend = bfitted.total_err().last().copied();
            let bpath_out = sibling(&cfg.diag.error_report_path, "_baseline");
            write_error_report_csv(&bfitted, &bpath_out)?;
            summary_csv.push_str(&summary_row("baseline", "fitted", Some(&bfit), bend));
            line.push(kv("baseline_preferred", bfit.preferred.name()));
            line.push(kv("baseline_power_slope", fmt_f64(bfit.power_slope)));
            line.push(kv("baseline_exp_rate", fmt_f64(bfit.exp_rate)));
            line.push(kv("baseline_end_err", fmt_f64(bend.unwrap_or(f64::NAN))));
        }
    }

    std::fs::write(&cfg.diag.growth_summary_path, summary_csv)
        .map_err(|e| Error::io(&cfg.diag.growth_summary_path, e))?;
    line.push(kv("report", path_str(&cfg.diag.error_report_path)));
    line.push(kv("summary", path_str(&cfg.diag.growth_summary_path)));
    Ok(line.join(" "))
}

/// `report.csv` + `_baseline` -> `report_baseline.csv`.
fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

pub fn cmd_poincare(cfg: &RunConfig, traj_path: &Path) -> Result<String> {
    let traj = read_run_csv(traj_path)?;
    let section = poincare_section(&traj, cfg.diag.plane, cfg.diag.direction)?;
    ensure_parent(&cfg.diag.section_path)?;
    write_section_csv(&section, &cfg.diag.section_path)?;
    write_manifest(cfg, "poincare", &[("traj", path_str(traj_path))])?;
    Ok([
        kv("cmd", "poincare"),
        kv("plane", cfg.diag.plane.to_string()),
        kv("direction", cfg.diag.direction.name()),
        kv("crossings", section.points.len().to_string()),
        kv("out", path_str(&cfg.diag.section_path)),
    ]
    .join(" "))
}

pub fn cmd_kl(cfg: &RunConfig, pred_path: &Path, truth_path: &Path) -> Result<String> {
    let pred = read_run_csv(pred_path)?;
    let truth = read_run_csv(truth_path)?;
    let entries = kl_entries(cfg, &pred, &truth)?;
    ensure_parent(&cfg.diag.kl_path)?;
    write_kl_summary_csv(&entries, &cfg.diag.kl_path)?;
    write_manifest(
        cfg,
        "kl",
        &[("pred", path_str(pred_path)), ("truth", path_str(truth_path))],
    )?;
    let mut line = vec![kv("cmd", "kl"), kv("bins", cfg.diag.bins.to_string())];
    for (name, value) in &entries {
        line.push(kv(&format!("kl_{name}"), fmt_f64(*value)));
    }
    line.push(kv("out", path_str(&cfg.diag.kl_path)));
    Ok(line.join(" "))
}

/// Tabulates the a-priori Euler error envelope
/// `(exp(L t) - 1) / L * (delta + L h / 2)` on an even time grid.
pub fn cmd_bound(
    lipschitz: f64,
    delta: f64,
    h: f64,
    t_max: f64,
    rows: usize,
    out: &Path,
) -> Result<String> {
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "lipschitz constant must be finite and nonnegative, got {lipschitz}"
        )));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "field error delta must be finite and nonnegative, got {delta}"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {h}")));
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::InvalidConfig(format!("horizon must be positive, got {t_max}")));
    }
    if rows == 0 {
        return Err(Error::InvalidConfig("need at least one table row".into()));
    }
    let mut csv = String::from("t,bound\n");
    let mut last = f64::NAN;
    for i in 1..=rows {
        let t = t_max * i as f64 / rows as f64;
        last = euler_error_bound(lipschitz, delta, h, t);
        csv.push_str(&format!("{},{}\n", fmt_f64(t), fmt_f64(last)));
    }
    ensure_parent(out)?;
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    let manifest = format!(
        "[run]\ncommand = bound\nargs = --lipschitz {} --delta {} --h {} --t-max {} --rows {} --out {}\n",
        fmt_f64(lipschitz),
        fmt_f64(delta),
        fmt_f64(h),
        fmt_f64(t_max),
        rows,
        out.display()
    );
    let mpath = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .join("manifest-bound.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok([
        kv("cmd", "bound"),
        kv("lipschitz", fmt_f64(lipschitz)),
        kv("delta", fmt_f64(delta)),
        kv("h", fmt_f64(h)),
        kv("rows", rows.to_string()),
        kv("bound_at_horizon", fmt_f64(last)),
        kv("out", path_str(out)),
    ]
    .join(" "))
}
