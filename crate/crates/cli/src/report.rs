//! Report documents and table rendering.
//!
//! Every number that reaches an artifact goes through the same rounding
//! (6 significant digits, the tables' precision) and the same serializer,
//! so a value printed in `table.csv` is byte-identical to its appearance
//! in `report.json`. Non-finite values serialize as JSON `null` and empty
//! CSV cells.

use serde::Serialize;

use crate::config::ExperimentConfig;
use ppfactor_core::pursuit::{Decision, Method, PursuitReport, StopTestResult};

/// Round to 6 significant digits; zero and non-finite values pass through.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - exp);
    (x * scale).round() / scale
}

/// Rounded value for JSON; `None` (→ `null`) when non-finite.
pub fn opt6(x: f64) -> Option<f64> {
    x.is_finite().then(|| sig6(x))
}

/// CSV cell text: the JSON numeral of the rounded value, or empty when
/// non-finite.
pub fn num_cell(x: f64) -> String {
    match opt6(x) {
        Some(v) => serde_json::to_string(&v).expect("finite float serializes"),
        None => String::new(),
    }
}

/// Stop-test outcome in report form.
#[derive(Debug, Clone, Serialize)]
pub struct TestDto {
    /// Normalized statistic s.
    pub statistic: Option<f64>,
    /// Upper-tail p-value of sqrt(n) * s.
    pub p_value: Option<f64>,
    /// Confidence level the comparison used.
    pub alpha: f64,
    /// Threshold s was compared against.
    pub threshold: Option<f64>,
    /// Whether the direction lay inside the confidence ellipsoid.
    pub in_ellipsoid: bool,
    /// "stop" or "continue".
    pub decision: String,
    /// True when the variance estimate degenerated.
    pub degenerate: bool,
}

impl TestDto {
    fn from_core(t: &StopTestResult) -> Self {
        Self {
            statistic: opt6(t.statistic),
            p_value: opt6(t.p_value),
            alpha: sig6(t.alpha),
            threshold: opt6(t.threshold),
            in_ellipsoid: t.in_ellipsoid,
            decision: match t.decision {
                Decision::Stop => "stop".into(),
                Decision::Continue => "continue".into(),
            },
            degenerate: t.degenerate,
        }
    }

    /// Table verdict in the published style.
    fn verdict(&self) -> &'static str {
        if self.in_ellipsoid {
            "True"
        } else {
            "False"
        }
    }
}

/// Criterion evaluation at an accepted direction.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionDto {
    /// Empirical criterion value.
    pub value: Option<f64>,
    /// Variance estimate behind the stop test.
    pub variance_hat: Option<f64>,
    /// Retained points the average ran over.
    pub n_used: usize,
    /// Denominator clamping events.
    pub clamped: usize,
    /// Instrumental rows excluded by the per-direction floor.
    pub refiltered: usize,
}

/// Rejection-sampler diagnostics for an iteration's instrumental draw.
#[derive(Debug, Clone, Serialize)]
pub struct SamplerDto {
    /// Accepted proposals over attempts.
    pub acceptance_rate: Option<f64>,
    /// Envelope violations observed (each restarts the draw).
    pub envelope_violations: usize,
    /// Final envelope constant.
    pub envelope: Option<f64>,
}

/// One extracted direction with its evaluation and test.
#[derive(Debug, Clone, Serialize)]
pub struct IterationDto {
    /// 1-based iteration index.
    pub k: usize,
    /// Canonical unit direction.
    pub direction: Vec<Option<f64>>,
    /// Direction rescaled so the largest coordinate is 1.
    pub paper_style_direction: Vec<Option<f64>>,
    /// Criterion value at the direction.
    pub criterion: CriterionDto,
    /// Stop test at the direction.
    pub test: TestDto,
    /// Sampler diagnostics (absent on the first iteration).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerDto>,
}

/// Divergence of the final estimate from a known truth (simulate mode).
#[derive(Debug, Clone, Serialize)]
pub struct KlDto {
    /// Monte-Carlo divergence estimate.
    pub value: Option<f64>,
    /// Standard error of the estimate.
    pub std_error: Option<f64>,
    /// Draws used.
    pub n_mc: usize,
}

/// Everything one method variant produced.
#[derive(Debug, Clone, Serialize)]
pub struct MethodRun {
    /// "ours" or "huber".
    pub method: String,
    /// Human-readable verdict.
    pub conclusion: String,
    /// The direction-free divergence test before any extraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_test: Option<TestDto>,
    /// Accepted iterations in order.
    pub iterations: Vec<IterationDto>,
    /// Divergence estimates for g^(0) .. g^(k).
    pub kl_trace: Vec<Option<f64>>,
    /// Standard errors of the kl_trace entries.
    pub kl_trace_se: Vec<Option<f64>>,
    /// Largest |a_i . a_j| over direction pairs.
    pub max_abs_pairwise_dot: Option<f64>,
    /// Divergence from the generating density, when it is known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_to_truth: Option<KlDto>,
    /// Stage failure that ended this run early, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Ingestion bookkeeping echoed into the report.
#[derive(Debug, Clone, Serialize)]
pub struct IngestEcho {
    /// Source file.
    pub path: String,
    /// Usable rows after filtering.
    pub rows_used: usize,
    /// Rows dropped for NaN/infinite fields.
    pub dropped_nonfinite: usize,
    /// Whether a header row was detected and skipped.
    pub header_skipped: bool,
}

/// The single JSON document a run emits.
#[derive(Debug, Clone, Serialize)]
pub struct ReportDoc {
    /// Master seed, duplicated from the config for quick grepping.
    pub seed: u64,
    /// The exact validated settings the run used.
    pub config: ExperimentConfig,
    /// Ingestion summary (ingest mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestEcho>,
    /// One entry per method, in fixed order.
    pub runs: Vec<MethodRun>,
    /// Failure marker when the experiment could not complete.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Label used in artifacts for a core method.
pub fn method_label(m: Method) -> &'static str {
    match m {
        Method::Ours => "ours",
        Method::Huber => "huber",
    }
}

/// Convert a core pursuit report into its document form.
pub fn method_run(report: &PursuitReport, kl_to_truth: Option<KlDto>) -> MethodRun {
    MethodRun {
        method: method_label(report.method).into(),
        conclusion: report.conclusion.clone(),
        initial_test: report.initial_test.as_ref().map(TestDto::from_core),
        iterations: report
            .iterations
            .iter()
            .enumerate()
            .map(|(i, it)| IterationDto {
                k: i + 1,
                direction: it.direction.coords().iter().map(|&c| opt6(c)).collect(),
                paper_style_direction: it
                    .paper_style_direction
                    .iter()
                    .map(|&c| opt6(c))
                    .collect(),
                criterion: CriterionDto {
                    value: opt6(it.criterion.value),
                    variance_hat: opt6(it.criterion.variance_hat),
                    n_used: it.criterion.n_used,
                    clamped: it.criterion.clamped,
                    refiltered: it.criterion.refiltered,
                },
                test: TestDto::from_core(&it.test),
                sampler: it.sampler.as_ref().map(|s| SamplerDto {
                    acceptance_rate: opt6(s.acceptance_rate),
                    envelope_violations: s.envelope_violations,
                    envelope: opt6(s.envelope),
                }),
            })
            .collect(),
        kl_trace: report.kl_trace.iter().map(|&v| opt6(v)).collect(),
        kl_trace_se: report.kl_trace_se.iter().map(|&v| opt6(v)).collect(),
        max_abs_pairwise_dot: opt6(report.max_abs_pairwise_dot),
        kl_to_truth,
        error: report.error.clone(),
    }
}

fn cell_of(v: Option<f64>) -> String {
    match v {
        Some(x) => serde_json::to_string(&x).expect("finite float serializes"),
        None => String::new(),
    }
}

fn dir_cell(coords: &[Option<f64>]) -> String {
    coords
        .iter()
        .map(|c| cell_of(*c))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Render the iteration table, mirroring the published row blocks:
/// extremum value, direction, test verdict, divergence rows, conclusion.
pub fn table_csv(doc: &ReportDoc) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "row",
        "iteration",
        "value",
        "std_error",
        "p_value",
        "verdict",
        "direction",
    ])
    .expect("in-memory write");
    for run in &doc.runs {
        let m = run.method.as_str();
        if let Some(t) = &run.initial_test {
            w.write_record([
                m,
                "initial_test",
                "0",
                &cell_of(t.statistic),
                "",
                &cell_of(t.p_value),
                t.verdict(),
                "",
            ])
            .expect("in-memory write");
        }
        for it in &run.iterations {
            let k = it.k.to_string();
            w.write_record([
                m,
                "extremum",
                &k,
                &cell_of(it.criterion.value),
                "",
                "",
                "",
                &dir_cell(&it.paper_style_direction),
            ])
            .expect("in-memory write");
            w.write_record([
                m,
                "test",
                &k,
                &cell_of(it.test.statistic),
                "",
                &cell_of(it.test.p_value),
                it.test.verdict(),
                "",
            ])
            .expect("in-memory write");
        }
        for (j, v) in run.kl_trace.iter().enumerate() {
            let se = run.kl_trace_se.get(j).copied().flatten();
            w.write_record([
                m,
                "kl_trace",
                &j.to_string(),
                &cell_of(*v),
                &cell_of(se),
                "",
                "",
                "",
            ])
            .expect("in-memory write");
        }
        if let Some(kl) = &run.kl_to_truth {
            w.write_record([
                m,
                "kl_to_truth",
                "",
                &cell_of(kl.value),
                &cell_of(kl.std_error),
                "",
                "",
                "",
            ])
            .expect("in-memory write");
        }
        w.write_record([m, "conclusion", "", "", "", "", &run.conclusion, ""])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Render the per-step search traces.
pub fn trace_csv(reports: &[&PursuitReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "iteration", "step", "best_value"])
        .expect("in-memory write");
    for report in reports {
        let m = method_label(report.method);
        for (i, it) in report.iterations.iter().enumerate() {
            let k = (i + 1).to_string();
            for (s, v) in it.search_trace.iter().enumerate() {
                w.write_record([m, &k, &s.to_string(), &num_cell(*v)])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_six_significant_digits() {
        assert_eq!(sig6(0.035822029), 0.035822);
        assert_eq!(sig6(123456.789), 123457.0);
        assert_eq!(sig6(-1.23456749e-7), -1.23457e-7);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(sig6(2.0), 2.0);
        assert!(sig6(f64::NAN).is_nan());
    }

    #[test]
    fn nonfinite_values_become_null_and_empty_cells() {
        assert_eq!(opt6(f64::INFINITY), None);
        assert_eq!(num_cell(f64::NAN), "");
        assert_eq!(num_cell(0.25), "0.25");
        assert_eq!(
            serde_json::to_string(&opt6(f64::NAN)).unwrap(),
            "null"
        );
    }

    #[test]
    fn csv_cells_match_json_serialization() {
        for &x in &[0.035822029, -7.5, 1.0, 3.0e-9, 123456.789] {
            let cell = num_cell(x);
            let json = serde_json::to_string(&sig6(x)).unwrap();
            assert_eq!(cell, json);
        }
    }
}
