//! In-memory stages shared by the commands and the table protocol.

use crate::config::{Estimator, RunConfig};
use anyhow::Result;
use bpmm_core::changepoint::{detect_changepoints, ChangePointOptions, ChangePointReport};
use bpmm_core::metrics::{
    cluster_cp_scores, clustering_error, f1_over_time, mse_correlations, network_partials,
    variation_of_information, MetricReport, CP_TOLERANCE, F1_THRESHOLD,
};
use bpmm_core::simgen::{sliding_window_baseline, SimTruth};
use bpmm_core::subgroup::{build_similarity, kmeans_subgroups, SimilarityMatrix};
use bpmm_core::{idpac, idpmac, ClusterAssignment, DynamicNetworkSet, HyperParams, PanelDataset};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: Vec<usize>,
    /// Log-posterior per EM iteration, one trace per fitted unit (edge for
    /// idPAC, the whole panel for idPMAC).
    pub traces: Vec<Vec<f64>>,
    pub lasso_warnings: usize,
    pub beta_rejections: usize,
    pub jitters: usize,
    pub oscillating: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub estimator: Estimator,
    pub networks: DynamicNetworkSet,
    /// Argmax component labels `(N, T, units)`; absent for the baseline.
    pub labels: Option<Array3<usize>>,
    pub diagnostics: FitDiagnostics,
}

impl FitOutput {
    /// Trajectories segmented for change points: Fisher-z correlations, or
    /// partial correlations for precision networks.
    pub fn trajectories(&self) -> Result<Array3<f64>> {
        Ok(match &self.networks {
            DynamicNetworkSet::PairwiseFisherZ(z) => z.clone(),
            p @ DynamicNetworkSet::Precision(_) => network_partials(p)?,
        })
    }
}

pub fn fit(estimator: Estimator, panel: &PanelDataset, hp: &HyperParams, window: usize, seed: u64) -> Result<FitOutput> {
    Ok(match estimator {
        Estimator::Idpac => {
            let f = idpac::fit_all_edges(panel, hp, seed)?;
            let labels = f.hard_labels();
            let diagnostics = FitDiagnostics {
                converged: f.all_converged(),
                iterations: f.edges.iter().map(|e| e.iterations).collect(),
                traces: f.edges.iter().map(|e| e.log_posterior_trace.clone()).collect(),
                lasso_warnings: f.edges.iter().map(|e| e.lasso_warnings).sum(),
                beta_rejections: f.edges.iter().map(|e| e.beta_rejections).sum(),
                ..FitDiagnostics::default()
            };
            FitOutput {
                estimator,
                networks: f.networks,
                labels: Some(labels),
                diagnostics,
            }
        }
        Estimator::Idpmac => {
            let f = idpmac::fit_idpmac(panel, hp, seed)?;
            let diagnostics = FitDiagnostics {
                converged: f.converged,
                iterations: vec![f.iterations],
                traces: vec![f.log_posterior_trace.clone()],
                lasso_warnings: f.lasso_warnings,
                beta_rejections: f.beta_rejections,
                jitters: f.jitters,
                oscillating: f.oscillating,
            };
            FitOutput {
                estimator,
                labels: Some(f.hard_labels()),
                networks: f.networks(),
                diagnostics,
            }
        }
        Estimator::Baseline => FitOutput {
            estimator,
            networks: sliding_window_baseline(panel, window)?,
            labels: None,
            diagnostics: FitDiagnostics {
                converged: true,
                ..FitDiagnostics::default()
            },
        },
    })
}

#[derive(Debug, Clone)]
pub struct PostOutput {
    pub changepoints: ChangePointReport,
    pub subgroups: ClusterAssignment,
    pub similarity: Option<SimilarityMatrix>,
}

/// Subgroups from component-label agreement, then change points pooled over
/// them. The baseline has no component labels and is treated as one group.
pub fn postprocess(
    fit: &FitOutput,
    cp: &ChangePointOptions,
    k: Option<usize>,
    max_k: usize,
    seed: u64,
) -> Result<PostOutput> {
    let n = fit.networks.n_subjects();
    let (subgroups, similarity) = match &fit.labels {
        Some(labels) => {
            let sim = build_similarity(labels);
            (kmeans_subgroups(&sim, k, max_k, seed)?, Some(sim))
        }
        None => (ClusterAssignment::new(vec![0; n], 1)?, None),
    };
    let changepoints = detect_changepoints(&fit.trajectories()?, &subgroups, cp)?;
    Ok(PostOutput {
        changepoints,
        subgroups,
        similarity,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterCpRow {
    pub cluster: usize,
    pub true_cps: Vec<usize>,
    pub estimated: Vec<usize>,
    pub sensitivity: f64,
    pub false_positives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per true cluster, mirroring the cluster change-point table.
    pub clusters: Vec<ClusterCpRow>,
    /// Mean F1 across subjects at each scan.
    pub f1_curve: Vec<f64>,
}

/// Scores an estimate against simulation truth.
pub fn evaluate(
    networks: &DynamicNetworkSet,
    subgroups: &ClusterAssignment,
    cluster_cps: &BTreeMap<usize, Vec<usize>>,
    truth: &SimTruth,
) -> Result<Evaluation> {
    let true_labels = ClusterAssignment::from_labels(&truth.true_labels);
    let ce = clustering_error(subgroups, &true_labels)?;
    let vi = variation_of_information(subgroups, &true_labels)?;
    let f1_curve = f1_over_time(&network_partials(networks)?, &truth.partial_correlations(), F1_THRESHOLD)?;
    let f1 = f1_curve.iter().sum::<f64>() / f1_curve.len().max(1) as f64;
    let mse = mse_correlations(networks, &DynamicNetworkSet::PairwiseFisherZ(truth.pairwise_fisher_z()))?;
    let scores = cluster_cp_scores(cluster_cps, subgroups, &true_labels, &truth.cluster_cps, CP_TOLERANCE)?;
    let map = bpmm_core::metrics::best_label_matching(subgroups, &true_labels)?;
    let clusters: Vec<ClusterCpRow> = scores
        .iter()
        .enumerate()
        .map(|(c, &(sensitivity, false_positives))| ClusterCpRow {
            cluster: c,
            true_cps: truth.cluster_cps[c].clone(),
            estimated: map[c].and_then(|g| cluster_cps.get(&g).cloned()).unwrap_or_default(),
            sensitivity,
            false_positives,
        })
        .collect();
    let k = clusters.len().max(1) as f64;
    let report = MetricReport {
        ce,
        vi,
        f1,
        mse,
        cp_sensitivity: clusters.iter().map(|r| r.sensitivity).sum::<f64>() / k,
        cp_false_positives: clusters.iter().map(|r| r.false_positives as f64).sum::<f64>() / k,
    };
    Ok(Evaluation {
        report,
        clusters,
        f1_curve,
    })
}

/// Subgroup count used when none is configured for the protocol: the number
/// of mixture components.
pub fn protocol_k(cfg: &RunConfig) -> usize {
    cfg.subgroup.k.unwrap_or(cfg.hyper.n_components)
}
