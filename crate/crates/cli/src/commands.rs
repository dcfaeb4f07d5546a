//! Command implementations. Each returns whether every estimator converged;
//! artifacts are written either way.

use crate::artifacts::{
    already_done, load_tensor, read_json, require_stage, save_tensor, write_json, Layout, Manifest, StageStatus,
};
use crate::config::{Estimator, RunConfig, SCHEMA_VERSION};
use crate::pipeline::{self, FitDiagnostics, FitOutput};
use crate::protocol::run_protocol;
use anyhow::{bail, Context, Result};
use bpmm_core::changepoint::ChangePointReport;
use bpmm_core::io::{load_panel, save_panel_binary, LoadOptions};
use bpmm_core::simgen::{generate, prewhiten_with, OrderCriterion, SimTruth};
use bpmm_core::{ClusterAssignment, DynamicNetworkSet, NetworkKind, PanelDataset};
use ndarray::{Array3, Ix3, Ix4};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Whether all work finished without hitting an iteration limit.
pub type Converged = bool;

fn manifest(cfg: &RunConfig, stage: &str, converged: bool, files: &[&str]) -> Manifest {
    Manifest {
        schema_version: SCHEMA_VERSION,
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        status: if converged {
            StageStatus::Complete
        } else {
            StageStatus::NotConverged
        },
        files: files.iter().map(|f| f.to_string()).collect(),
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    // drop any stale manifest first so an interrupted rewrite is never
    // mistaken for a finished stage
    let m = dir.join(crate::artifacts::MANIFEST);
    if m.exists() {
        std::fs::remove_file(&m)?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn skip(dir: &Path, cfg: &RunConfig, force: bool) -> Result<Option<Converged>> {
    if !force && already_done(dir, &cfg.hash())? {
        let m = Manifest::read(dir)?.expect("checked");
        log::info!("{} is up to date; skipping (use --force to recompute)", dir.display());
        return Ok(Some(m.status == StageStatus::Complete));
    }
    Ok(None)
}

pub fn simulate(cfg: &RunConfig, force: bool) -> Result<Converged> {
    if cfg.input.is_some() {
        bail!("simulate does not use [input]; remove it or run fit directly");
    }
    let dir = Layout::new(&cfg.output_dir).sim();
    if let Some(c) = skip(&dir, cfg, force)? {
        return Ok(c);
    }
    prepare_dir(&dir)?;
    let (panel, truth) = generate(&cfg.sim)?;
    save_panel_binary(&panel, &dir.join("panel.bpmm"), &dir.join("covariates.csv"))?;
    write_json(&dir.join("truth.json"), &truth)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    manifest(cfg, "simulate", true, &["panel.bpmm", "covariates.csv", "truth.json", "config.toml"]).write(&dir)?;
    log::info!("wrote simulated panel to {}", dir.display());
    Ok(true)
}

/// The panel to fit: external input, or the simulated panel of this run.
pub fn load_input(cfg: &RunConfig, force: bool) -> Result<PanelDataset> {
    let panel = match &cfg.input {
        Some(inp) => load_panel(&inp.data, &inp.covariates, LoadOptions { demean: inp.demean })?,
        None => {
            let dir = Layout::new(&cfg.output_dir).sim();
            require_stage(&dir, &cfg.hash(), force)?;
            load_panel(&dir.join("panel.bpmm"), &dir.join("covariates.csv"), LoadOptions { demean: false })?
        }
    };
    if cfg.prewhiten.enabled {
        let pw = prewhiten_with(&panel, cfg.prewhiten.max_ar_order, OrderCriterion::Bic)?;
        let diffed = pw.differenced.iter().filter(|&&d| d).count();
        if diffed > 0 {
            log::warn!("{diffed} series were differenced instead of AR-filtered");
        }
        return Ok(pw.panel);
    }
    Ok(panel)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub estimator: Estimator,
    pub kind: NetworkKind,
    pub diagnostics: FitDiagnostics,
}

fn labels_to_f64(l: &Array3<usize>) -> Array3<f64> {
    l.mapv(|x| x as f64)
}

pub fn fit(cfg: &RunConfig, force: bool) -> Result<Converged> {
    let layout = Layout::new(&cfg.output_dir);
    let mut all = true;
    let mut panel: Option<PanelDataset> = None;
    for &est in cfg.method.estimators() {
        let dir = layout.fit(est.name());
        if let Some(c) = skip(&dir, cfg, force)? {
            all &= c;
            continue;
        }
        let p = match &panel {
            Some(p) => p,
            None => panel.insert(load_input(cfg, force)?),
        };
        log::info!("fitting {} on {} subjects, {} nodes, {} scans", est.name(), p.n_subjects(), p.n_nodes(), p.n_scans());
        let out = pipeline::fit(est, p, &cfg.hyper, cfg.baseline.window, cfg.seed)?;
        prepare_dir(&dir)?;
        let mut files = vec!["networks.bpmt", "fit.json", "trace.csv"];
        match &out.networks {
            DynamicNetworkSet::PairwiseFisherZ(z) => save_tensor(&dir.join("networks.bpmt"), z)?,
            DynamicNetworkSet::Precision(o) => save_tensor(&dir.join("networks.bpmt"), o)?,
        }
        if let Some(l) = &out.labels {
            save_tensor(&dir.join("labels.bpmt"), &labels_to_f64(l))?;
            files.push("labels.bpmt");
        }
        let mut trace = String::from("unit,iteration,log_posterior\n");
        for (u, t) in out.diagnostics.traces.iter().enumerate() {
            for (k, lp) in t.iter().enumerate() {
                let _ = writeln!(trace, "{u},{},{lp}", k + 1);
            }
        }
        std::fs::write(dir.join("trace.csv"), trace)?;
        let converged = out.diagnostics.converged;
        if !converged {
            log::warn!("{}: iteration limit reached before convergence", est.name());
        }
        write_json(
            &dir.join("fit.json"),
            &FitSummary {
                estimator: est,
                kind: out.networks.kind(),
                diagnostics: out.diagnostics,
            },
        )?;
        manifest(cfg, "fit", converged, &files).write(&dir)?;
        all &= converged;
    }
    Ok(all)
}

/// Reloads a fit stage.
pub fn load_fit(cfg: &RunConfig, est: Estimator, force: bool) -> Result<(FitOutput, Converged)> {
    let dir = Layout::new(&cfg.output_dir).fit(est.name());
    let m = require_stage(&dir, &cfg.hash(), force)?;
    let summary: FitSummary = read_json(&dir.join("fit.json"))?;
    let raw = load_tensor(&dir.join("networks.bpmt"))?;
    let networks = match summary.kind {
        NetworkKind::PairwiseFisherZ => DynamicNetworkSet::PairwiseFisherZ(raw.into_dimensionality::<Ix3>()?),
        NetworkKind::Precision => DynamicNetworkSet::Precision(raw.into_dimensionality::<Ix4>()?),
    };
    let labels_path = dir.join("labels.bpmt");
    let labels = if labels_path.exists() {
        Some(load_tensor(&labels_path)?.into_dimensionality::<Ix3>()?.mapv(|x| x as usize))
    } else {
        None
    };
    Ok((
        FitOutput {
            estimator: est,
            networks,
            labels,
            diagnostics: summary.diagnostics,
        },
        m.status == StageStatus::Complete,
    ))
}

pub fn postprocess(cfg: &RunConfig, force: bool) -> Result<Converged> {
    let layout = Layout::new(&cfg.output_dir);
    let mut all = true;
    for &est in cfg.method.estimators() {
        let dir = layout.post(est.name());
        if let Some(c) = skip(&dir, cfg, force)? {
            all &= c;
            continue;
        }
        let (f, converged) = load_fit(cfg, est, force)?;
        let max_k = cfg.subgroup.max_k.unwrap_or(cfg.hyper.n_components);
        let out = pipeline::postprocess(&f, &cfg.changepoint, cfg.subgroup.k, max_k, cfg.seed)?;
        prepare_dir(&dir)?;
        let mut files = vec!["changepoints.json", "piecewise.bpmt", "subgroups.json", "clusters.txt"];
        write_json(&dir.join("changepoints.json"), &out.changepoints)?;
        save_tensor(&dir.join("piecewise.bpmt"), &out.changepoints.piecewise)?;
        write_json(&dir.join("subgroups.json"), &out.subgroups)?;
        std::fs::write(dir.join("clusters.txt"), cluster_table(&out.subgroups, &out.changepoints))?;
        if let Some(sim) = &out.similarity {
            let mut csv = String::new();
            for row in sim.values().rows() {
                let line: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
                let _ = writeln!(csv, "{}", line.join(","));
            }
            std::fs::write(dir.join("similarity.csv"), csv)?;
            files.push("similarity.csv");
        }
        if !out.changepoints.path_monotone {
            log::warn!("{}: change-point count was not monotone along the penalty grid for some subject", est.name());
        }
        manifest(cfg, "postprocess", converged, &files).write(&dir)?;
        all &= converged;
    }
    Ok(all)
}

/// Cluster-level change points with member counts.
fn cluster_table(groups: &ClusterAssignment, cps: &ChangePointReport) -> String {
    let mut s = String::from("cluster\tsize\tchange_points\n");
    for (c, pts) in &cps.cluster_level {
        let list: Vec<String> = pts.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(s, "{c}\t{}\t{}", groups.members(*c).len(), list.join(","));
    }
    s
}

pub fn evaluate(cfg: &RunConfig, force: bool) -> Result<Converged> {
    if cfg.input.is_some() {
        bail!("evaluate needs simulation truth; it is not available for external input");
    }
    let layout = Layout::new(&cfg.output_dir);
    let hash = cfg.hash();
    require_stage(&layout.sim(), &hash, force)?;
    let truth: SimTruth = read_json(&layout.sim().join("truth.json"))?;
    let mut all = true;
    for &est in cfg.method.estimators() {
        let dir = layout.eval(est.name());
        if let Some(c) = skip(&dir, cfg, force)? {
            all &= c;
            continue;
        }
        let (f, converged) = load_fit(cfg, est, force)?;
        require_stage(&layout.post(est.name()), &hash, force)?;
        let post_dir = layout.post(est.name());
        let cps: ChangePointReport = read_json(&post_dir.join("changepoints.json"))?;
        let groups: ClusterAssignment = read_json(&post_dir.join("subgroups.json"))?;
        let ev = pipeline::evaluate(&f.networks, &groups, &cps.cluster_level, &truth)?;
        prepare_dir(&dir)?;
        std::fs::write(dir.join("metrics.txt"), ev.report.to_text())?;
        write_json(&dir.join("metrics.json"), &ev)?;
        let mut table = String::from("cluster\ttrue_change_points\testimated\tsensitivity\tfalse_positives\n");
        for r in &ev.clusters {
            let j = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                table,
                "{}\t{}\t{}\t{:.6}\t{}",
                r.cluster,
                j(&r.true_cps),
                j(&r.estimated),
                r.sensitivity,
                r.false_positives
            );
        }
        std::fs::write(dir.join("cluster_changepoints.tsv"), table)?;
        let mut curve = String::from("scan,f1\n");
        for (t, x) in ev.f1_curve.iter().enumerate() {
            let _ = writeln!(curve, "{t},{x:.6}");
        }
        std::fs::write(dir.join("f1_over_time.csv"), curve)?;
        manifest(
            cfg,
            "evaluate",
            converged,
            &["metrics.txt", "metrics.json", "cluster_changepoints.tsv", "f1_over_time.csv"],
        )
        .write(&dir)?;
        print!("{}:\n{}", est.name(), ev.report.to_text());
        all &= converged;
    }
    Ok(all)
}

pub fn reproduce_tables(cfg: &RunConfig, force: bool) -> Result<Converged> {
    let dir = Layout::new(&cfg.output_dir).tables();
    if let Some(c) = skip(&dir, cfg, force)? {
        return Ok(c);
    }
    let result = run_protocol(cfg)?;
    prepare_dir(&dir)?;
    let text = result.tables_text();
    std::fs::write(dir.join("tables.txt"), &text)?;
    write_json(&dir.join("tables.json"), &result)?;
    std::fs::write(dir.join("f1_over_time.csv"), result.f1_csv())?;
    let converged = result.all_converged();
    manifest(cfg, "reproduce-tables", converged, &["tables.txt", "tables.json", "f1_over_time.csv"]).write(&dir)?;
    print!("{text}");
    Ok(converged)
}
