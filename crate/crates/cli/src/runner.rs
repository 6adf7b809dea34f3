//! Experiment execution: sample acquisition, pursuit runs, artifact emission.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};

use crate::config::{ExperimentConfig, Mode, Preset};
use crate::ingest;
use crate::report::{self, num_cell, IngestEcho, KlDto, MethodRun, ReportDoc};
use ppfactor_core::distributions::{
    moment_match_instrumental, sample_matrix, sim3_sample, Generator, ProductDensity,
};
use ppfactor_core::linalg::Matrix;
use ppfactor_core::pursuit::{self, PursuitReport};

/// Where a run's artifacts landed.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// Full machine-readable report.
    pub report_json: PathBuf,
    /// Iteration table in the published row structure.
    pub table_csv: PathBuf,
    /// Per-step direction-search traces.
    pub trace_csv: PathBuf,
    /// Human-readable run log.
    pub log: PathBuf,
}

/// A completed invocation. Artifacts exist even when the run failed
/// numerically; the failure is then recorded both here and in the report.
#[derive(Debug)]
pub struct RunOutcome {
    /// Artifact locations.
    pub artifacts: RunArtifacts,
    /// First numerical failure, if the experiment did not fully succeed.
    pub numerical_error: Option<String>,
}

/// Why a run could not produce its artifacts.
#[derive(Debug)]
pub enum RunFailure {
    /// Invalid input: unreadable or malformed data, inadequate sample.
    Input(anyhow::Error),
    /// Failure while executing the run or writing artifacts.
    Run(anyhow::Error),
}

/// Parallelism cap: `PPFACTOR_THREADS` when set, else the machine width.
pub fn thread_cap_from_env() -> anyhow::Result<usize> {
    match std::env::var("PPFACTOR_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                anyhow!("environment variable PPFACTOR_THREADS: expected a positive integer, got '{v}'")
            })?;
            if n == 0 {
                return Err(anyhow!(
                    "environment variable PPFACTOR_THREADS: must be at least 1"
                ));
            }
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(usize::from)
            .unwrap_or(1)),
        Err(e) => Err(anyhow!("environment variable PPFACTOR_THREADS: {e}")),
    }
}

/// Run one experiment end to end and write its artifacts.
///
/// `threads` caps internal parallelism; results are byte-identical for any
/// value because independent method runs are joined in a fixed order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<RunOutcome, RunFailure> {
    // Acquire the sample (and, in simulate mode, the generating density).
    let mut cfg = cfg.clone();
    let mut ingest_echo = None;
    let (x, truth): (Matrix, Option<ProductDensity>) = match cfg.mode {
        Mode::Simulate => {
            let density = cfg
                .build_density()
                .map_err(RunFailure::Input)?
                .expect("simulate mode carries a density");
            let is_sim3 = cfg
                .density
                .as_ref()
                .and_then(|s| s.preset)
                .map_or(false, |p| p == Preset::Sim3);
            let x = if is_sim3 {
                sim3_sample(cfg.seed)
            } else {
                sample_matrix(&density, cfg.m, cfg.seed)
            };
            (x, Some(density))
        }
        Mode::Ingest => {
            let path = cfg.data_path.clone().expect("ingest mode carries a path");
            let got = ingest::ingest_sample(&path, cfg.d).map_err(RunFailure::Input)?;
            if got.data.rows() <= cfg.d {
                return Err(RunFailure::Input(anyhow!(
                    "{}: {} usable rows; the sample size must exceed the dimension d = {}",
                    path.display(),
                    got.data.rows(),
                    cfg.d
                )));
            }
            ingest_echo = Some(IngestEcho {
                path: path.display().to_string(),
                rows_used: got.data.rows(),
                dropped_nonfinite: got.dropped_nonfinite,
                header_skipped: got.header_skipped,
            });
            cfg.m = got.data.rows();
            (got.data, None)
        }
    };

    // Instrumental density: Gaussian with the sample's moments.
    let mut top_error: Option<String> = None;
    let g = match moment_match_instrumental(&x, Generator::Gaussian) {
        Ok(g) => Some(g),
        Err(e) => {
            top_error = Some(format!("instrumental fit: {e}"));
            None
        }
    };

    // Run the configured methods; "both" runs them as independent
    // deterministic computations joined in fixed order, so the artifact
    // bytes do not depend on the thread count.
    let methods = cfg.method.methods();
    let pcfg = cfg.pursuit_config();
    let results: Vec<Result<PursuitReport, String>> = match &g {
        None => Vec::new(),
        Some(g) => {
            if threads >= 2 && methods.len() >= 2 {
                std::thread::scope(|s| {
                    let handles: Vec<_> = methods
                        .iter()
                        .map(|&m| {
                            let (x, g, pcfg) = (&x, g, &pcfg);
                            s.spawn(move || {
                                pursuit::run_pursuit(x, g, m, pcfg).map_err(|e| e.to_string())
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("pursuit worker panicked"))
                        .collect()
                })
            } else {
                methods
                    .iter()
                    .map(|&m| pursuit::run_pursuit(&x, g, m, &pcfg).map_err(|e| e.to_string()))
                    .collect()
            }
        }
    };

    // Assemble the document.
    let mut runs = Vec::with_capacity(results.len());
    let mut reports: Vec<Option<PursuitReport>> = Vec::with_capacity(results.len());
    let mut log_notes: Vec<String> = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(rep) => {
                if let Some(e) = &rep.error {
                    if top_error.is_none() {
                        top_error = Some(format!("{}: {e}", report::method_label(rep.method)));
                    }
                }
                let kl = match &truth {
                    Some(f) if rep.error.is_none() => {
                        match pursuit::kl_to_truth(&rep, f, 2000, cfg.seed.wrapping_add(9001)) {
                            Ok(est) => Some(KlDto {
                                value: report::opt6(est.value),
                                std_error: report::opt6(est.std_error),
                                n_mc: est.n_used,
                            }),
                            Err(e) => {
                                log_notes.push(format!(
                                    "kl_to_truth ({}): {e}",
                                    report::method_label(rep.method)
                                ));
                                None
                            }
                        }
                    }
                    _ => None,
                };
                runs.push(report::method_run(&rep, kl));
                reports.push(Some(rep));
            }
            Err(e) => {
                let label = report::method_label(methods[i]);
                if top_error.is_none() {
                    top_error = Some(format!("{label}: {e}"));
                }
                runs.push(MethodRun {
                    method: label.into(),
                    conclusion: String::new(),
                    initial_test: None,
                    iterations: Vec::new(),
                    kl_trace: Vec::new(),
                    kl_trace_se: Vec::new(),
                    max_abs_pairwise_dot: None,
                    kl_to_truth: None,
                    error: Some(e),
                });
                reports.push(None);
            }
        }
    }

    let doc = ReportDoc {
        seed: cfg.seed,
        config: cfg.clone(),
        ingest: ingest_echo,
        runs,
        error: top_error.clone(),
    };

    let artifacts = write_artifacts(&cfg, &doc, &reports, &log_notes).map_err(RunFailure::Run)?;
    Ok(RunOutcome {
        artifacts,
        numerical_error: top_error,
    })
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    doc: &ReportDoc,
    reports: &[Option<PursuitReport>],
    log_notes: &[String],
) -> anyhow::Result<RunArtifacts> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating output dir {}", dir.display()))?;

    let artifacts = RunArtifacts {
        report_json: dir.join("report.json"),
        table_csv: dir.join("table.csv"),
        trace_csv: dir.join("trace.csv"),
        log: dir.join("run.log"),
    };

    let json = serde_json::to_string_pretty(doc).context("serializing report")? + "\n";
    fs::write(&artifacts.report_json, json)
        .with_context(|| format!("writing {}", artifacts.report_json.display()))?;

    fs::write(&artifacts.table_csv, report::table_csv(doc))
        .with_context(|| format!("writing {}", artifacts.table_csv.display()))?;

    let present: Vec<&PursuitReport> = reports.iter().filter_map(|r| r.as_ref()).collect();
    fs::write(&artifacts.trace_csv, report::trace_csv(&present))
        .with_context(|| format!("writing {}", artifacts.trace_csv.display()))?;

    fs::write(&artifacts.log, render_log(cfg, doc, log_notes))
        .with_context(|| format!("writing {}", artifacts.log.display()))?;

    Ok(artifacts)
}

// The log repeats the key results in a skimmable form. It contains no
// timestamps or durations: artifacts must be byte-identical across reruns.
fn render_log(cfg: &ExperimentConfig, doc: &ReportDoc, notes: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ppfactor run, seed {}", doc.seed);
    let _ = writeln!(s);
    let _ = writeln!(s, "[config]");
    match toml::to_string(&cfg) {
        Ok(t) => s.push_str(&t),
        Err(e) => {
            let _ = writeln!(s, "(config echo unavailable: {e})");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "[sample]");
    let _ = writeln!(s, "rows: {}", cfg.m);
    let _ = writeln!(s, "columns: {}", cfg.d);
    if let Some(ing) = &doc.ingest {
        let _ = writeln!(s, "source: {}", ing.path);
        let _ = writeln!(s, "dropped_nonfinite: {}", ing.dropped_nonfinite);
        let _ = writeln!(s, "header_skipped: {}", ing.header_skipped);
    } else {
        let _ = writeln!(s, "source: simulated");
    }
    for run in &doc.runs {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}]", run.method);
        if let Some(t) = &run.initial_test {
            let _ = writeln!(
                s,
                "initial test: statistic {} p {} in_ellipsoid {}",
                cell(t.statistic),
                cell(t.p_value),
                t.in_ellipsoid
            );
        }
        for it in &run.iterations {
            let _ = writeln!(
                s,
                "iteration {}: value {} p {} in_ellipsoid {} clamped {} refiltered {}",
                it.k,
                cell(it.criterion.value),
                cell(it.test.p_value),
                it.test.in_ellipsoid,
                it.criterion.clamped,
                it.criterion.refiltered
            );
            if let Some(sam) = &it.sampler {
                let _ = writeln!(
                    s,
                    "  sampler: acceptance {} envelope_violations {}",
                    cell(sam.acceptance_rate),
                    sam.envelope_violations
                );
            }
        }
        let _ = writeln!(
            s,
            "kl_trace: {}",
            run.kl_trace
                .iter()
                .map(|v| cell(*v))
                .collect::<Vec<_>>()
                .join(" ")
        );
        if let Some(kl) = &run.kl_to_truth {
            let _ = writeln!(
                s,
                "kl_to_truth: {} (se {})",
                cell(kl.value),
                cell(kl.std_error)
            );
        }
        let _ = writeln!(s, "conclusion: {}", run.conclusion);
        if let Some(e) = &run.error {
            let _ = writeln!(s, "error: {e}");
        }
    }
    if !notes.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "[notes]");
        for n in notes {
            let _ = writeln!(s, "{n}");
        }
    }
    if let Some(e) = &doc.error {
        let _ = writeln!(s);
        let _ = writeln!(s, "[failure]");
        let _ = writeln!(s, "{e}");
    }
    s
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => num_cell(x),
        None => "null".into(),
    }
}
