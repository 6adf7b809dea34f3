//! Experiment configuration: TOML schema, validation, and presets.
//!
//! A config file describes one experiment: where the sample comes from
//! (a generated density or a CSV file), which method variants to run, and
//! the knobs forwarded to the pursuit loop. Parsing is strict — unknown
//! keys are rejected so typos fail loudly instead of silently running
//! defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ppfactor_core::distributions::{
    EllipticalDensity, Factor1D, GumbelDensity1D, Normal1D, ProductDensity,
};
use ppfactor_core::linalg::Matrix;
use ppfactor_core::optimizer::AnnealConfig;
use ppfactor_core::pursuit::{Method, PursuitConfig, ThresholdMode};

/// Where the sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Draw the sample from a configured density.
    Simulate,
    /// Read the sample from a CSV file.
    Ingest,
}

/// Which criterion variant(s) to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    /// Minimize the transformed-instrumental divergence.
    Ours,
    /// Maximize the projected relative entropy.
    Huber,
    /// Run both on the identical sample for a paired comparison.
    Both,
}

impl MethodChoice {
    /// Core method list, in fixed report order.
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Ours => vec![Method::Ours],
            MethodChoice::Huber => vec![Method::Huber],
            MethodChoice::Both => vec![Method::Ours, Method::Huber],
        }
    }
}

/// Stop-test threshold convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdChoice {
    /// The published constant comparison.
    Paper,
    /// Standard-normal quantile on the same statistic.
    Corrected,
}

impl ThresholdChoice {
    /// Core enum value.
    pub fn to_core(self) -> ThresholdMode {
        match self {
            ThresholdChoice::Paper => ThresholdMode::PaperConstant,
            ThresholdChoice::Corrected => ThresholdMode::NormalQuantile,
        }
    }
}

/// Built-in experiment designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// d = 3 product density on overlapping coordinate sums.
    Sim1,
    /// d = 10, one Gumbel axis in Gaussian noise.
    Sim2,
    /// d = 20 with 4 planted outliers.
    Sim3,
}

impl Preset {
    /// Ambient dimension the preset is defined at.
    pub fn dim(self) -> usize {
        match self {
            Preset::Sim1 => 3,
            Preset::Sim2 => 10,
            Preset::Sim3 => 20,
        }
    }

    /// Default sample size.
    pub fn sample_size(self) -> usize {
        match self {
            Preset::Sim1 | Preset::Sim2 => 50,
            Preset::Sim3 => 100,
        }
    }

    /// Directory-friendly name.
    pub fn name(self) -> &'static str {
        match self {
            Preset::Sim1 => "sim1",
            Preset::Sim2 => "sim2",
            Preset::Sim3 => "sim3",
        }
    }
}

/// One 1-D factor in a custom product density.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    /// Factor family.
    pub dist: DistKind,
    /// Location parameter.
    pub loc: f64,
    /// Scale parameter; must be positive.
    pub scale: f64,
}

/// Supported 1-D factor families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    /// Normal(loc, scale) with scale the standard deviation.
    Normal,
    /// Gumbel(loc, scale).
    Gumbel,
}

/// Trailing independent Gaussian block of a custom density.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TailSpec {
    /// Component means.
    pub mean: Vec<f64>,
    /// Component standard deviations; must be positive.
    pub sd: Vec<f64>,
}

/// The `[density]` table: either a preset name or an explicit product spec.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DensityTable {
    /// Built-in design; excludes the custom fields.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Basis rows a_1'..a_d' of a custom product density.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<f64>>>,
    /// Leading 1-D factors, one per `[[density.factor]]` block.
    #[serde(default, rename = "factor", skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<FactorSpec>,
    /// Trailing diagonal-Gaussian block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailSpec>,
}

/// Direction-search settings mirrored into the config file.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSettings {
    /// Proposal steps per restart.
    pub n_steps: usize,
    /// Initial temperature before data-driven scaling.
    pub t0: f64,
    /// Geometric cooling factor per step.
    pub cooling: f64,
    /// Tangent proposal standard deviation at full temperature.
    pub proposal_sigma: f64,
    /// Independent restarts; the best result wins.
    pub restarts: usize,
    /// Run the deterministic polish on the winner.
    pub polish: bool,
}

impl Default for AnnealSettings {
    fn default() -> Self {
        let c = AnnealConfig::default();
        Self {
            n_steps: c.n_steps,
            t0: c.t0,
            cooling: c.cooling,
            proposal_sigma: c.proposal_sigma,
            restarts: c.restarts,
            polish: c.polish,
        }
    }
}

impl AnnealSettings {
    /// Core settings struct.
    pub fn to_core(&self) -> AnnealConfig {
        AnnealConfig {
            n_steps: self.n_steps,
            t0: self.t0,
            cooling: self.cooling,
            proposal_sigma: self.proposal_sigma,
            restarts: self.restarts,
            polish: self.polish,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            bail!("config field 'anneal.n_steps': must be at least 1");
        }
        if self.restarts == 0 {
            bail!("config field 'anneal.restarts': must be at least 1");
        }
        if !(self.t0 > 0.0) {
            bail!("config field 'anneal.t0': must be positive");
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            bail!("config field 'anneal.cooling': must lie strictly between 0 and 1");
        }
        if !(self.proposal_sigma > 0.0) {
            bail!("config field 'anneal.proposal_sigma': must be positive");
        }
        Ok(())
    }
}

/// Raw deserialization target; everything optional that has a default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Mode,
    method: Option<MethodChoice>,
    d: Option<usize>,
    m: Option<usize>,
    alpha: Option<f64>,
    nu: Option<f64>,
    threshold_mode: Option<ThresholdChoice>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    k_max: Option<usize>,
    instrumental_m: Option<usize>,
    orthogonalize: Option<bool>,
    data_path: Option<PathBuf>,
    density: Option<DensityTable>,
    anneal: Option<AnnealSettings>,
}

/// A validated experiment description with every default resolved.
///
/// Serialization of this struct is the config echo stamped into reports,
/// so a run's artifacts always state the exact settings that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    /// Sample source.
    pub mode: Mode,
    /// Method variant(s).
    pub method: MethodChoice,
    /// Ambient dimension.
    pub d: usize,
    /// Sample size (generated draws in simulate mode; in ingest mode the
    /// usable row count, filled after reading the file).
    pub m: usize,
    /// Stop-test confidence level.
    pub alpha: f64,
    /// Truncation exponent.
    pub nu: f64,
    /// Threshold convention.
    pub threshold_mode: ThresholdChoice,
    /// Master seed.
    pub seed: u64,
    /// Artifact directory.
    pub output_dir: PathBuf,
    /// Iteration cap; defaults to d inside the pursuit loop.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    /// Instrumental draw size; defaults to the data sample size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrumental_m: Option<usize>,
    /// Project the search orthogonally to accepted directions.
    pub orthogonalize: bool,
    /// Direction-search settings.
    pub anneal: AnnealSettings,
    /// CSV file (ingest mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    /// Density description (simulate mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityTable>,
}

/// Read and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let raw: RawConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config file {}", path.display()))?;
    validate(raw)
}

fn validate(raw: RawConfig) -> Result<ExperimentConfig> {
    match raw.mode {
        Mode::Simulate => {
            if raw.density.is_none() {
                bail!("config field 'density': required in simulate mode");
            }
            if raw.data_path.is_some() {
                bail!(
                    "config field 'data_path': not allowed in simulate mode \
                     (exactly one of 'density' and 'data_path' may be given)"
                );
            }
        }
        Mode::Ingest => {
            if raw.data_path.is_none() {
                bail!("config field 'data_path': required in ingest mode");
            }
            if raw.density.is_some() {
                bail!(
                    "config field 'density': not allowed in ingest mode \
                     (exactly one of 'density' and 'data_path' may be given)"
                );
            }
            if raw.m.is_some() {
                bail!(
                    "config field 'm': not used in ingest mode; the sample \
                     size comes from the data file"
                );
            }
        }
    }

    // Resolve dimension and sample size.
    let (d, m) = match (&raw.density, raw.mode) {
        (Some(spec), _) => {
            let spec_d = density_dim(spec)?;
            if let Some(d) = raw.d {
                if d != spec_d {
                    bail!(
                        "config field 'd': {d} contradicts the density \
                         specification's dimension {spec_d}"
                    );
                }
            }
            let m = match raw.m {
                Some(m) => m,
                None => match spec.preset {
                    Some(p) => p.sample_size(),
                    None => bail!("config field 'm': required for a custom density"),
                },
            };
            if spec.preset == Some(Preset::Sim3) && m != 100 {
                bail!(
                    "config field 'm': preset sim3 is defined at m = 100 \
                     (96 clean draws plus 4 planted outliers); got {m}"
                );
            }
            (spec_d, m)
        }
        (None, _) => {
            let d = raw
                .d
                .context("config field 'd': required in ingest mode")?;
            // Placeholder until the file is read; patched by the runner.
            (d, 0)
        }
    };
    if d < 2 {
        bail!("config field 'd': dimension must be at least 2; got {d}");
    }
    if raw.density.is_some() && m <= d {
        bail!("config field 'm': sample size must exceed the dimension d = {d}; got {m}");
    }

    let alpha = raw.alpha.unwrap_or(0.9);
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!("config field 'alpha': must lie strictly between 0 and 1; got {alpha}");
    }

    let nu_cap = 1.0 / (4.0 + d as f64);
    let nu = raw.nu.unwrap_or(0.8 * nu_cap);
    if !(nu > 0.0 && nu < nu_cap) {
        bail!(
            "config field 'nu': must satisfy 0 < nu < 1/(4+d) = {nu_cap:.6}; got {nu}"
        );
    }

    if let Some(k) = raw.k_max {
        if k == 0 {
            bail!("config field 'k_max': must be at least 1");
        }
    }
    if let Some(im) = raw.instrumental_m {
        if im <= d {
            bail!(
                "config field 'instrumental_m': must exceed the dimension d = {d}; got {im}"
            );
        }
    }

    let anneal = raw.anneal.unwrap_or_default();
    anneal.validate()?;

    Ok(ExperimentConfig {
        mode: raw.mode,
        method: raw.method.unwrap_or(MethodChoice::Ours),
        d,
        m,
        alpha,
        nu,
        threshold_mode: raw.threshold_mode.unwrap_or(ThresholdChoice::Paper),
        seed: raw.seed.unwrap_or(0),
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("ppfactor-out")),
        k_max: raw.k_max,
        instrumental_m: raw.instrumental_m,
        orthogonalize: raw.orthogonalize.unwrap_or(false),
        anneal,
        data_path: raw.data_path,
        density: raw.density,
    })
}

fn density_dim(spec: &DensityTable) -> Result<usize> {
    match (&spec.preset, &spec.rows) {
        (Some(_), Some(_)) => bail!(
            "config field 'density': give either 'preset' or the custom \
             'rows'/'factor'/'tail' fields, not both"
        ),
        (Some(p), None) => {
            if !spec.factors.is_empty() || spec.tail.is_some() {
                bail!(
                    "config field 'density': give either 'preset' or the custom \
                     'rows'/'factor'/'tail' fields, not both"
                );
            }
            Ok(p.dim())
        }
        (None, Some(rows)) => {
            let d = rows.len();
            if d == 0 {
                bail!("config field 'density.rows': must not be empty");
            }
            for (i, row) in rows.iter().enumerate() {
                if row.len() != d {
                    bail!(
                        "config field 'density.rows': row {} has length {}, \
                         expected the basis size {d}",
                        i + 1,
                        row.len()
                    );
                }
            }
            let tail_dim = spec.tail.as_ref().map_or(0, |t| t.mean.len());
            if let Some(t) = &spec.tail {
                if t.mean.len() != t.sd.len() {
                    bail!(
                        "config field 'density.tail': 'mean' and 'sd' must have \
                         the same length; got {} and {}",
                        t.mean.len(),
                        t.sd.len()
                    );
                }
                if let Some(s) = t.sd.iter().find(|s| !(**s > 0.0)) {
                    bail!("config field 'density.tail.sd': entries must be positive; got {s}");
                }
            }
            if spec.factors.len() + tail_dim != d {
                bail!(
                    "config field 'density': {} factor(s) plus a tail of \
                     dimension {} do not fill the basis size {d}",
                    spec.factors.len(),
                    tail_dim
                );
            }
            for (i, f) in spec.factors.iter().enumerate() {
                if !(f.scale > 0.0) {
                    bail!(
                        "config field 'density.factor[{}].scale': must be positive; got {}",
                        i + 1,
                        f.scale
                    );
                }
            }
            Ok(d)
        }
        (None, None) => bail!(
            "config field 'density': give a 'preset' or a custom \
             'rows'/'factor'/'tail' specification"
        ),
    }
}

impl ExperimentConfig {
    /// Settings forwarded to the pursuit loop.
    pub fn pursuit_config(&self) -> PursuitConfig {
        PursuitConfig {
            alpha: self.alpha,
            threshold_mode: self.threshold_mode.to_core(),
            nu: Some(self.nu),
            k_max: self.k_max,
            instrumental_m: self.instrumental_m,
            anneal: self.anneal.to_core(),
            orthogonalize: self.orthogonalize,
            seed: self.seed,
            ..PursuitConfig::default()
        }
    }

    /// Build the configured density (simulate mode only).
    pub fn build_density(&self) -> Result<Option<ProductDensity>> {
        let Some(spec) = &self.density else {
            return Ok(None);
        };
        let density = match spec.preset {
            Some(Preset::Sim1) => ppfactor_core::distributions::sim1_density(),
            Some(Preset::Sim2) => ppfactor_core::distributions::sim2_density(),
            Some(Preset::Sim3) => ppfactor_core::distributions::sim3_density(),
            None => build_custom(spec)?,
        };
        Ok(Some(density))
    }
}

fn build_custom(spec: &DensityTable) -> Result<ProductDensity> {
    let rows = spec.rows.as_ref().expect("validated custom density");
    let mut factors = Vec::with_capacity(spec.factors.len());
    for f in &spec.factors {
        let factor = match f.dist {
            DistKind::Normal => Factor1D::Normal(
                Normal1D::new(f.loc, f.scale).map_err(|e| anyhow::anyhow!("{e}"))?,
            ),
            DistKind::Gumbel => Factor1D::Gumbel(
                GumbelDensity1D::new(f.loc, f.scale).map_err(|e| anyhow::anyhow!("{e}"))?,
            ),
        };
        factors.push(factor);
    }
    let tail = match &spec.tail {
        Some(t) if !t.mean.is_empty() => {
            let k = t.mean.len();
            let mut cov = Matrix::zeros(k, k);
            for (i, s) in t.sd.iter().enumerate() {
                cov.set(i, i, s * s);
            }
            Some(
                EllipticalDensity::gaussian(t.mean.clone(), cov)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            )
        }
        _ => None,
    };
    ProductDensity::new(rows, factors, tail).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Ready-made config for a preset run (the `simulate` subcommand).
pub fn preset_config(preset: Preset) -> ExperimentConfig {
    ExperimentConfig {
        mode: Mode::Simulate,
        method: MethodChoice::Ours,
        d: preset.dim(),
        m: preset.sample_size(),
        alpha: 0.9,
        nu: 0.8 / (4.0 + preset.dim() as f64),
        threshold_mode: ThresholdChoice::Corrected,
        seed: 0,
        output_dir: PathBuf::from("ppfactor-out").join(preset.name()),
        k_max: None,
        instrumental_m: None,
        orthogonalize: false,
        anneal: AnnealSettings::default(),
        data_path: None,
        density: Some(DensityTable {
            preset: Some(preset),
            rows: None,
            factors: Vec::new(),
            tail: None,
        }),
    }
}
