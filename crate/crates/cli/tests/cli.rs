use bpmm_cli::config::RunConfig;
use bpmm_cli::pipeline;
use bpmm_core::metrics::F1_THRESHOLD;
use bpmm_core::simgen::{generate, SimConfig};
use bpmm_core::{ClusterAssignment, DynamicNetworkSet};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::SystemTime;

const TINY: &str = r#"
schema_version = 1
seed = 3

[hyper]
n_components = 2
mc_samples = 4
mc_burn_in = 2
max_em_iters = 5

[sim]
n_subjects = 8
n_nodes = 6
n_scans = 60
cluster_sizes = [4, 4]
cps_per_cluster = [1, 1]
min_segment = 10

[baseline]
window = 11
"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, format!("{TINY}\n{extra}")).unwrap();
        Run { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn bpmm(&self, cmd: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bpmm"))
            .arg(cmd)
            .arg("--config")
            .arg(&self.config)
            .arg("--output-dir")
            .arg(self.out())
            .args(extra)
            .env("BPMM_LOG", "error")
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 0 or the non-convergence code: tiny runs stop at their iteration limit.
fn finished(o: &Output) -> bool {
    matches!(code(o), 0 | 2)
}

fn mtime(p: &Path) -> SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn simulate_is_byte_reproducible() {
    let (a, b) = (Run::new(""), Run::new(""));
    assert_eq!(code(&a.bpmm("simulate", &[])), 0);
    assert_eq!(code(&b.bpmm("simulate", &[])), 0);
    for f in ["panel.bpmm", "covariates.csv", "truth.json", "manifest.json"] {
        let x = std::fs::read(a.out().join("sim").join(f)).unwrap();
        let y = std::fs::read(b.out().join("sim").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn seed_flag_changes_the_panel() {
    let (a, b) = (Run::new(""), Run::new(""));
    a.bpmm("simulate", &[]);
    b.bpmm("simulate", &["--seed", "4"]);
    let x = std::fs::read(a.out().join("sim/panel.bpmm")).unwrap();
    let y = std::fs::read(b.out().join("sim/panel.bpmm")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn invalid_cluster_sizes_are_a_usage_error() {
    let run = Run::new("");
    let text = std::fs::read_to_string(&run.config).unwrap().replace("[4, 4]", "[4, 3]");
    std::fs::write(&run.config, text).unwrap();
    let o = run.bpmm("simulate", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cluster sizes sum to 7"), "{}", stderr(&o));
    assert!(!run.out().exists(), "nothing may be written for an invalid config");
}

#[test]
fn unknown_keys_are_a_usage_error() {
    let o = Run::new("[changepoint]\nthreshold = 0.5\n").bpmm("simulate", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("threshold"), "{}", stderr(&o));
}

#[test]
fn unsupported_schema_version_is_rejected() {
    let run = Run::new("");
    let text = std::fs::read_to_string(&run.config).unwrap().replace("schema_version = 1", "schema_version = 9");
    std::fs::write(&run.config, text).unwrap();
    let o = run.bpmm("simulate", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("schema_version"));
}

#[test]
fn bad_subcommand_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_bpmm")).arg("simulat").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn fit_without_simulation_fails_cleanly() {
    let o = Run::new("").bpmm("fit", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing input stage"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_for_both_mixture_estimators() {
    let run = Run::new("");
    // top-level keys must precede the tables
    let text = format!("method = \"both\"\n{TINY}");
    std::fs::write(&run.config, text).unwrap();
    assert_eq!(code(&run.bpmm("simulate", &[])), 0);
    let fit = run.bpmm("fit", &[]);
    assert!(finished(&fit), "{}", stderr(&fit));
    for est in ["idpac", "idpmac"] {
        let d = run.out().join("fit").join(est);
        for f in ["networks.bpmt", "labels.bpmt", "trace.csv", "fit.json", "manifest.json"] {
            assert!(d.join(f).exists(), "missing fit/{est}/{f}");
        }
    }
    assert!(finished(&run.bpmm("postprocess", &[])));
    let eval = run.bpmm("evaluate", &[]);
    assert!(finished(&eval), "{}", stderr(&eval));
    let report = String::from_utf8_lossy(&eval.stdout);
    for est in ["idpac", "idpmac"] {
        assert!(report.contains(&format!("{est}:")), "{report}");
        let d = run.out().join("eval").join(est);
        for f in ["metrics.txt", "metrics.json", "cluster_changepoints.tsv", "f1_over_time.csv"] {
            assert!(d.join(f).exists(), "missing eval/{est}/{f}");
        }
    }
}

#[test]
fn baseline_runs_and_converges() {
    let run = Run::new("");
    std::fs::write(&run.config, format!("method = \"baseline\"\n{TINY}")).unwrap();
    for cmd in ["simulate", "fit", "postprocess", "evaluate"] {
        let o = run.bpmm(cmd, &[]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let clusters = std::fs::read_to_string(run.out().join("post/baseline/clusters.txt")).unwrap();
    // no component labels: every subject forms one group
    assert_eq!(clusters.lines().count(), 2, "{clusters}");
}

#[test]
fn finished_stages_are_skipped_until_forced() {
    let run = Run::new("");
    run.bpmm("simulate", &[]);
    assert!(finished(&run.bpmm("fit", &[])));
    let net = run.out().join("fit/idpac/networks.bpmt");
    let manifest = std::fs::read(run.out().join("fit/idpac/manifest.json")).unwrap();
    let before = mtime(&net);
    std::thread::sleep(std::time::Duration::from_millis(20));
    assert!(finished(&run.bpmm("fit", &[])));
    assert_eq!(mtime(&net), before, "rerun must not recompute");
    assert_eq!(std::fs::read(run.out().join("fit/idpac/manifest.json")).unwrap(), manifest);
    let bytes = std::fs::read(&net).unwrap();
    assert!(finished(&run.bpmm("fit", &["--force"])));
    assert!(mtime(&net) > before, "--force must recompute");
    assert_eq!(std::fs::read(&net).unwrap(), bytes, "recomputation is deterministic");
}

#[test]
fn thread_count_does_not_change_results() {
    let run = Run::new("");
    run.bpmm("simulate", &[]);
    run.bpmm("fit", &["--threads", "1"]);
    let one = std::fs::read(run.out().join("fit/idpac/networks.bpmt")).unwrap();
    run.bpmm("fit", &["--threads", "3", "--force"]);
    let three = std::fs::read(run.out().join("fit/idpac/networks.bpmt")).unwrap();
    assert_eq!(one, three);
}

#[test]
fn stages_from_another_config_are_refused() {
    let run = Run::new("");
    run.bpmm("simulate", &[]);
    run.bpmm("fit", &[]);
    run.bpmm("postprocess", &[]);
    let o = run.bpmm("evaluate", &["--seed", "11"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert!(finished(&run.bpmm("evaluate", &["--seed", "11", "--force"])));
}

#[test]
fn evaluation_report_is_deterministic() {
    let run = Run::new("");
    for cmd in ["simulate", "fit", "postprocess"] {
        run.bpmm(cmd, &[]);
    }
    let a = run.bpmm("evaluate", &[]);
    let json_a = std::fs::read(run.out().join("eval/idpac/metrics.json")).unwrap();
    let b = run.bpmm("evaluate", &["--force"]);
    let json_b = std::fs::read(run.out().join("eval/idpac/metrics.json")).unwrap();
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json_a, json_b);
    assert!(!a.stdout.is_empty());
}

#[test]
fn default_config_round_trips() {
    let o = Command::new(env!("CARGO_BIN_EXE_bpmm")).arg("default-config").output().unwrap();
    assert_eq!(code(&o), 0);
    let cfg = RunConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

/// Scoring the truth against itself: perfect subgroups, correlations and
/// change points. F1 is checked against a direct count because true edges
/// whose partial correlation is at most the detection threshold count as
/// misses even for a perfect estimate.
#[test]
fn truth_scores_perfectly_against_itself() {
    let cfg = SimConfig {
        n_subjects: 12,
        n_nodes: 8,
        n_scans: 80,
        cluster_sizes: vec![4, 4, 4],
        cps_per_cluster: vec![1, 2, 1],
        min_segment: 15,
        ..SimConfig::scaled(9)
    };
    let (_, truth) = generate(&cfg).unwrap();
    let groups = ClusterAssignment::from_labels(&truth.true_labels);
    let cps: BTreeMap<usize, Vec<usize>> = truth.cluster_cps.iter().cloned().enumerate().collect();
    let est = DynamicNetworkSet::PairwiseFisherZ(truth.pairwise_fisher_z());
    let ev = pipeline::evaluate(&est, &groups, &cps, &truth).unwrap();
    assert_eq!(ev.report.ce, 0.0);
    assert!(ev.report.vi.abs() < 1e-12);
    assert!(ev.report.mse < 1e-20);
    assert_eq!(ev.report.cp_sensitivity, 1.0);
    assert_eq!(ev.report.cp_false_positives, 0.0);

    let partial = truth.partial_correlations();
    let (n, t, e) = partial.dim();
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..t {
            let (mut tp, mut fn_) = (0.0, 0.0);
            for k in 0..e {
                let p: f64 = partial[[i, s, k]];
                if p != 0.0 {
                    if p.abs() > F1_THRESHOLD {
                        tp += 1.0;
                    } else {
                        fn_ += 1.0;
                    }
                }
            }
            total += if tp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fn_) };
        }
    }
    let expected = total / (n * t) as f64;
    assert!((ev.report.f1 - expected).abs() < 1e-9, "{} vs {expected}", ev.report.f1);
    assert!(expected > 0.8);
}
