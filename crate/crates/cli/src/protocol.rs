//! The scaled simulation protocol behind `reproduce-tables`: for each
//! replicate seed, simulate, fit every estimator, post-process and score.

use crate::config::{Estimator, RunConfig};
use crate::pipeline::{evaluate, fit, postprocess, protocol_k};
use anyhow::Result;
use bpmm_core::metrics::{clustering_error, MetricReport};
use bpmm_core::rng::derive_seed;
use bpmm_core::simgen::{generate, SimConfig};
use bpmm_core::subgroup::{build_similarity, kmeans_subgroups};
use bpmm_core::ClusterAssignment;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodScores {
    pub report: MetricReport,
    pub f1_curve: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replicate {
    pub seed: u64,
    pub idpac: MethodScores,
    /// idPAC with covariate effects held at zero.
    pub idpac_naive: Option<MethodScores>,
    pub idpmac: Option<MethodScores>,
    pub baseline: MethodScores,
    /// Subgroup CE after adding spurious covariates.
    pub idpac_spurious_ce: Option<f64>,
    pub idpmac_spurious_ce: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub replicates: Vec<Replicate>,
    pub spurious: usize,
}

fn scores(
    cfg: &RunConfig,
    estimator: Estimator,
    naive: bool,
    panel: &bpmm_core::PanelDataset,
    truth: &bpmm_core::simgen::SimTruth,
    seed: u64,
) -> Result<MethodScores> {
    let mut hp = cfg.hyper.clone();
    hp.covariate_naive = naive;
    let k = protocol_k(cfg);
    let start = Instant::now();
    let f = fit(estimator, panel, &hp, cfg.baseline.window, seed)?;
    let post = postprocess(&f, &cfg.changepoint, Some(k), k, seed)?;
    let ev = evaluate(&f.networks, &post.subgroups, &post.changepoints.cluster_level, truth)?;
    log::info!(
        "seed {seed}: {}{} done in {:.1}s (ce {:.3}, mse {:.4}, f1 {:.3})",
        estimator.name(),
        if naive { " (covariate-naive)" } else { "" },
        start.elapsed().as_secs_f64(),
        ev.report.ce,
        ev.report.mse,
        ev.report.f1
    );
    Ok(MethodScores {
        report: ev.report,
        f1_curve: ev.f1_curve,
        converged: f.diagnostics.converged,
    })
}

fn subgroup_ce(cfg: &RunConfig, estimator: Estimator, sim: &SimConfig, seed: u64) -> Result<f64> {
    let (panel, truth) = generate(sim)?;
    let f = fit(estimator, &panel, &cfg.hyper, cfg.baseline.window, seed)?;
    let labels = f.labels.expect("mixture estimators carry labels");
    let k = protocol_k(cfg);
    let groups = kmeans_subgroups(&build_similarity(&labels), Some(k), k, seed)?;
    Ok(clustering_error(&groups, &ClusterAssignment::from_labels(&truth.true_labels))?)
}

pub fn run_replicate(cfg: &RunConfig, seed: u64) -> Result<Replicate> {
    let p = &cfg.protocol;
    let sim = SimConfig { seed, ..p.sim.clone() };
    let (panel, truth) = generate(&sim)?;
    let fit_seed = derive_seed(cfg.seed, seed);
    let idpac = scores(cfg, Estimator::Idpac, false, &panel, &truth, fit_seed)?;
    let idpac_naive = if p.naive {
        Some(scores(cfg, Estimator::Idpac, true, &panel, &truth, fit_seed)?)
    } else {
        None
    };
    let idpmac = if p.run_idpmac {
        Some(scores(cfg, Estimator::Idpmac, false, &panel, &truth, fit_seed)?)
    } else {
        None
    };
    let baseline = scores(cfg, Estimator::Baseline, false, &panel, &truth, fit_seed)?;
    let (mut idpac_spurious_ce, mut idpmac_spurious_ce) = (None, None);
    if p.spurious > 0 {
        let noisy = SimConfig {
            n_spurious: sim.n_spurious + p.spurious,
            ..sim.clone()
        };
        idpac_spurious_ce = Some(subgroup_ce(cfg, Estimator::Idpac, &noisy, fit_seed)?);
        if p.run_idpmac {
            idpmac_spurious_ce = Some(subgroup_ce(cfg, Estimator::Idpmac, &noisy, fit_seed)?);
        }
    }
    Ok(Replicate {
        seed,
        idpac,
        idpac_naive,
        idpmac,
        baseline,
        idpac_spurious_ce,
        idpmac_spurious_ce,
    })
}

pub fn run_protocol(cfg: &RunConfig) -> Result<ProtocolResult> {
    let replicates = cfg
        .protocol
        .seeds
        .iter()
        .map(|&s| run_replicate(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolResult {
        replicates,
        spurious: cfg.protocol.spurious,
    })
}

type Pick = fn(&Replicate) -> Option<&MethodScores>;

const METHODS: [(&str, Pick); 4] = [
    ("idpac", |r| Some(&r.idpac)),
    ("idpac_naive", |r| r.idpac_naive.as_ref()),
    ("idpmac", |r| r.idpmac.as_ref()),
    ("baseline", |r| Some(&r.baseline)),
];

impl ProtocolResult {
    /// Mean of `f` over replicates where it is defined.
    pub fn mean(&self, f: impl Fn(&Replicate) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.replicates.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean of a metric for one method.
    pub fn method_mean(&self, method: &str, metric: impl Fn(&MetricReport) -> f64) -> Option<f64> {
        let pick = METHODS.iter().find(|(m, _)| *m == method)?.1;
        self.mean(|r| pick(r).map(|s| metric(&s.report)))
    }

    /// Scan-wise mean F1 curve of one method.
    pub fn mean_f1_curve(&self, method: &str) -> Option<Vec<f64>> {
        let pick = METHODS.iter().find(|(m, _)| *m == method)?.1;
        let curves: Vec<&Vec<f64>> = self.replicates.iter().filter_map(|r| pick(r).map(|s| &s.f1_curve)).collect();
        let first = curves.first()?;
        Some(
            (0..first.len())
                .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
                .collect(),
        )
    }

    pub fn all_converged(&self) -> bool {
        self.replicates
            .iter()
            .all(|r| METHODS.iter().all(|(_, pick)| pick(r).is_none_or(|s| s.converged)))
    }

    /// Fixed-format text report.
    pub fn tables_text(&self) -> String {
        let mut s = String::new();
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let n = self.replicates.len();
        let mixture = ["idpac", "idpac_naive", "idpmac"];
        let _ = writeln!(s, "# subgroup recovery, mean over {n} replicates");
        let _ = writeln!(s, "method\tce\tvi");
        for m in mixture {
            if let Some(ce) = self.method_mean(m, |r| r.ce) {
                let _ = writeln!(s, "{m}\t{ce:.6}\t{}", fmt(self.method_mean(m, |r| r.vi)));
            }
        }
        let _ = writeln!(s, "\n# cluster-level change points, matched within ±2 scans");
        let _ = writeln!(s, "method\tsensitivity\tfalse_positives");
        for m in mixture {
            if let Some(x) = self.method_mean(m, |r| r.cp_sensitivity) {
                let _ = writeln!(s, "{m}\t{x:.6}\t{}", fmt(self.method_mean(m, |r| r.cp_false_positives)));
            }
        }
        let _ = writeln!(s, "\n# pairwise-correlation MSE");
        let _ = writeln!(s, "method\tmse");
        for (m, _) in METHODS {
            if let Some(x) = self.method_mean(m, |r| r.mse) {
                let _ = writeln!(s, "{m}\t{x:.6}");
            }
        }
        let _ = writeln!(s, "\n# edge recovery F1 at |partial correlation| > 0.05");
        let _ = writeln!(s, "method\tf1");
        for (m, _) in METHODS {
            if let Some(x) = self.method_mean(m, |r| r.f1) {
                let _ = writeln!(s, "{m}\t{x:.6}");
            }
        }
        if self.spurious > 0 {
            let _ = writeln!(s, "\n# subgroup CE with {} spurious covariates", self.spurious);
            let _ = writeln!(s, "method\tce\tce_spurious\tincrease");
            for (m, f) in [
                ("idpac", (|r: &Replicate| r.idpac_spurious_ce) as fn(&Replicate) -> Option<f64>),
                ("idpmac", |r: &Replicate| r.idpmac_spurious_ce),
            ] {
                if let (Some(base), Some(sp)) = (self.method_mean(m, |r| r.ce), self.mean(f)) {
                    let _ = writeln!(s, "{m}\t{base:.6}\t{sp:.6}\t{:.6}", sp - base);
                }
            }
        }
        let _ = writeln!(s, "\n# per replicate");
        let _ = writeln!(s, "seed\tmethod\tce\tvi\tf1\tmse\tcp_sensitivity\tcp_false_positives\tconverged");
        for r in &self.replicates {
            for (m, pick) in METHODS {
                if let Some(x) = pick(r) {
                    let q = &x.report;
                    let _ = writeln!(
                        s,
                        "{}\t{m}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                        r.seed, q.ce, q.vi, q.f1, q.mse, q.cp_sensitivity, q.cp_false_positives, x.converged
                    );
                }
            }
        }
        s
    }

    /// Scan-wise mean F1 of every method that has one, as CSV.
    pub fn f1_csv(&self) -> String {
        let curves: Vec<(&str, Vec<f64>)> = METHODS
            .iter()
            .filter_map(|(m, _)| self.mean_f1_curve(m).map(|c| (*m, c)))
            .collect();
        let mut s = String::from("scan");
        for (m, _) in &curves {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        let t = curves.first().map_or(0, |c| c.1.len());
        for scan in 0..t {
            let _ = write!(s, "{scan}");
            for (_, c) in &curves {
                let _ = write!(s, ",{:.6}", c[scan]);
            }
            s.push('\n');
        }
        s
    }
}
