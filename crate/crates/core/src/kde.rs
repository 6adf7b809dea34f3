//! Gaussian-product-kernel density estimators and the truncation scheme.
//!
//! The multivariate estimator over an n x d subsample uses per-coordinate
//! bandwidths h_l = sigma_l * n^{-1/(4+d)}; projected 1-D estimators share
//! the ambient rate n^{-1/(4+d)} so all plug-in ratios converge at one
//! speed. Truncation discards sample points whose estimated (or
//! instrumental) density falls below a deterministic floor so that every
//! denominator in the criteria stays bounded away from zero.

use alloc::vec::Vec;

use crate::distributions::{Direction, ScalarDensity};
use crate::linalg::{self, Matrix};
use crate::math;
use crate::{Error, Result};

/// Per-coordinate bandwidths sigma_l * m^{-1/(4+d)} with d = sds.len().
pub fn bandwidth_rule(m: usize, sds: &[f64]) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::InvalidArgument(
            "bandwidth rule needs at least two observations".into(),
        ));
    }
    let d = sds.len();
    let rate = math::powf(m as f64, -1.0 / (4.0 + d as f64));
    sds.iter()
        .map(|&s| {
            if s > 0.0 && s.is_finite() {
                Ok(s * rate)
            } else {
                Err(Error::InvalidArgument(
                    "bandwidth rule requires positive variance in every coordinate".into(),
                ))
            }
        })
        .collect()
}

/// Pointwise kernel error scale y_m = m^{-2/(4+d)}.
pub fn pointwise_rate(m: usize, d: usize) -> f64 {
    math::powf(m as f64, -2.0 / (4.0 + d as f64))
}

/// Truncation floor theta_m = m^{-nu}.
pub fn truncation_theta(m: usize, nu: f64) -> f64 {
    math::powf(m as f64, -nu)
}

/// Low-density anchor exp(E[ln g] - 3 sd[ln g]) for a d-dim Gaussian g.
///
/// Floors of the form theta_m * anchor then sit three log-density standard
/// deviations below typical values, so they bite only in genuine tails
/// regardless of dimension or scale.
pub fn gaussian_log_density_anchor(d: usize, ln_det_sigma: f64) -> f64 {
    let df = d as f64;
    math::exp(-0.5 * (df * math::LN_2PI + ln_det_sigma) - 0.5 * df - 3.0 * math::sqrt(0.5 * df))
}

/// 1-D specialization of [`gaussian_log_density_anchor`] for variance var.
pub fn gaussian_log_density_anchor_1d(var: f64) -> f64 {
    gaussian_log_density_anchor(1, math::ln(var))
}

/// Multivariate Gaussian-product-kernel estimate.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    points: Matrix,
    bandwidths: Vec<f64>,
    ln_norm: f64,
}

impl KernelEstimate {
    /// Estimate from a sample with the default bandwidth rule.
    pub fn from_sample(points: Matrix) -> Result<Self> {
        let sds = linalg::column_sds(&points);
        let bandwidths = bandwidth_rule(points.rows(), &sds)?;
        Self::with_bandwidths(points, bandwidths)
    }

    /// Estimate with explicit per-coordinate bandwidths.
    pub fn with_bandwidths(points: Matrix, bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.len() != points.cols() {
            return Err(Error::InvalidArgument(
                "one bandwidth per coordinate required".into(),
            ));
        }
        if bandwidths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidArgument(
                "bandwidths must be positive".into(),
            ));
        }
        if points.rows() == 0 {
            return Err(Error::InvalidArgument(
                "kernel estimate needs at least one point".into(),
            ));
        }
        let d = points.cols() as f64;
        let ln_norm = -0.5 * d * math::LN_2PI - bandwidths.iter().map(|&h| math::ln(h)).sum::<f64>();
        Ok(Self {
            points,
            bandwidths,
            ln_norm,
        })
    }

    /// Number of kernel centers.
    #[inline]
    pub fn n(&self) -> usize {
        self.points.rows()
    }

    /// Ambient dimension.
    #[inline]
    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Per-coordinate bandwidths.
    #[inline]
    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Kernel centers.
    #[inline]
    pub fn points(&self) -> &Matrix {
        &self.points
    }

    /// Log-density at x via log-sum-exp over kernels.
    pub fn ln_eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let n = self.n();
        let mut max_e = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.points.row(i);
            let mut e = 0.0;
            for (l, (&xl, &hl)) in x.iter().zip(&self.bandwidths).enumerate() {
                let z = (xl - row[l]) / hl;
                e -= 0.5 * z * z;
            }
            if e > max_e {
                max_e = e;
            }
            exps.push(e);
        }
        let mut acc = 0.0;
        for e in exps {
            acc += math::exp(e - max_e);
        }
        self.ln_norm + max_e + math::ln(acc / n as f64)
    }

    /// Density at x, strictly positive at any finite point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        math::exp(self.ln_eval(x))
    }

    /// Log-density at the i-th construction point with its own kernel left
    /// out. Plug-in ratios evaluated on the construction sample use this
    /// form; keeping the own-point mass K(0)/(n prod h) inflates the
    /// denominator by a systematic factor at these sample sizes.
    pub fn ln_eval_loo(&self, i: usize) -> f64 {
        let n = self.n();
        debug_assert!(i < n);
        if n < 2 {
            return self.ln_eval(self.points.row(i));
        }
        let x: Vec<f64> = self.points.row(i).to_vec();
        let mut max_e = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(n - 1);
        for k in 0..n {
            if k == i {
                continue;
            }
            let row = self.points.row(k);
            let mut e = 0.0;
            for (l, (&xl, &hl)) in x.iter().zip(&self.bandwidths).enumerate() {
                let z = (xl - row[l]) / hl;
                e -= 0.5 * z * z;
            }
            if e > max_e {
                max_e = e;
            }
            exps.push(e);
        }
        let mut acc = 0.0;
        for e in exps {
            acc += math::exp(e - max_e);
        }
        self.ln_norm + max_e + math::ln(acc / (n - 1) as f64)
    }
}

/// 1-D kernel estimate of the law of a'X.
#[derive(Debug, Clone)]
pub struct ProjectedKernelEstimate {
    direction: Direction,
    scalars: Vec<f64>,
    bandwidth: f64,
}

impl ProjectedKernelEstimate {
    /// Estimate from already-projected scalars.
    ///
    /// The bandwidth follows the same rate as the full-dimensional estimate
    /// the projections come from, sigma * n^{-1/(4+d)} with d the ambient
    /// dimension of `direction` (n^{-1/5} when d = 1). Tying the projected
    /// estimators to the ambient rate keeps every plug-in ratio in the
    /// criteria converging at one shared speed; the extra smoothing also
    /// stops a direction search over the sphere from locking onto
    /// small-sample bumps that a 1-D-optimal bandwidth would leave visible.
    pub fn from_scalars(direction: Direction, scalars: Vec<f64>) -> Result<Self> {
        let n = scalars.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "projected estimate needs at least two points".into(),
            ));
        }
        let sd = math::sample_sd(&scalars);
        if !(sd > 0.0) {
            return Err(Error::InvalidArgument(
                "projected sample is degenerate (zero variance)".into(),
            ));
        }
        let d = direction.coords().len();
        let bandwidth = sd * math::powf(n as f64, -1.0 / (4.0 + d as f64));
        Ok(Self {
            direction,
            scalars,
            bandwidth,
        })
    }

    /// Estimate from a sample matrix by projecting each row onto `direction`.
    pub fn from_sample(direction: Direction, points: &Matrix) -> Result<Self> {
        let scalars: Vec<f64> = (0..points.rows())
            .map(|i| direction.project(points.row(i)))
            .collect();
        Self::from_scalars(direction, scalars)
    }

    /// Projection direction.
    #[inline]
    pub fn direction(&self) -> &Direction {
        &self.direction
    }

    /// Projected sample values.
    #[inline]
    pub fn scalars(&self) -> &[f64] {
        &self.scalars
    }

    /// Bandwidth.
    #[inline]
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Log-density at t.
    pub fn ln_eval(&self, t: f64) -> f64 {
        let n = self.scalars.len();
        let mut max_e = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(n);
        for &s in &self.scalars {
            let z = (t - s) / self.bandwidth;
            let e = -0.5 * z * z;
            if e > max_e {
                max_e = e;
            }
            exps.push(e);
        }
        let mut acc = 0.0;
        for e in exps {
            acc += math::exp(e - max_e);
        }
        -0.5 * math::LN_2PI - math::ln(self.bandwidth) + max_e + math::ln(acc / n as f64)
    }

    /// Density at t.
    pub fn eval(&self, t: f64) -> f64 {
        math::exp(self.ln_eval(t))
    }

    /// Log-density at the i-th construction scalar with its own kernel left
    /// out; see [`KernelEstimate::ln_eval_loo`].
    pub fn ln_eval_loo(&self, i: usize) -> f64 {
        let n = self.scalars.len();
        debug_assert!(i < n);
        if n < 2 {
            return self.ln_eval(self.scalars[i]);
        }
        let t = self.scalars[i];
        let mut max_e = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(n - 1);
        for (k, &s) in self.scalars.iter().enumerate() {
            if k == i {
                continue;
            }
            let z = (t - s) / self.bandwidth;
            let e = -0.5 * z * z;
            if e > max_e {
                max_e = e;
            }
            exps.push(e);
        }
        let mut acc = 0.0;
        for e in exps {
            acc += math::exp(e - max_e);
        }
        -0.5 * math::LN_2PI - math::ln(self.bandwidth) + max_e + math::ln(acc / (n - 1) as f64)
    }
}

impl ScalarDensity for ProjectedKernelEstimate {
    fn ln_density(&self, t: f64) -> f64 {
        self.ln_eval(t)
    }

    fn is_approximate(&self) -> bool {
        true
    }
}

/// Subsample surviving the density floors, with the floor bookkeeping.
#[derive(Debug, Clone)]
pub struct TruncatedSample {
    /// Retained data rows.
    pub kept_x: Matrix,
    /// Retained instrumental-sample rows.
    pub kept_y: Matrix,
    /// Floor scale theta_m = m^{-nu}.
    pub theta: f64,
    /// Floor exponent.
    pub nu: f64,
    /// Size before truncation.
    pub m_original: usize,
    /// Absolute floor applied to f_m(X_i).
    pub x_floor: f64,
    /// Absolute floor applied to g(Y_i).
    pub y_floor: f64,
    /// X rows dropped by the floor (before pairing).
    pub dropped_x: usize,
    /// Y rows dropped by the floor (before pairing).
    pub dropped_y: usize,
}

impl TruncatedSample {
    /// Retained pair count n.
    #[inline]
    pub fn n(&self) -> usize {
        self.kept_x.rows()
    }
}

/// Apply the density floors to both samples.
///
/// Keeps X_i with f_m(X_i) >= theta_m * x_anchor and Y_i with
/// g(Y_i) >= theta_m * y_anchor, where theta_m = m^{-nu}. The anchors adapt
/// the dimensionless floor to the density's scale (pass 1.0 for the bare
/// rule). The kept sets are truncated to a common size n (trailing rows of
/// the longer set dropped).
pub fn truncate(
    x_sample: &Matrix,
    y_sample: &Matrix,
    f_m: &KernelEstimate,
    g_eval: &dyn Fn(&[f64]) -> f64,
    nu: f64,
    x_anchor: f64,
    y_anchor: f64,
) -> Result<TruncatedSample> {
    let d = x_sample.cols();
    if y_sample.cols() != d {
        return Err(Error::InvalidArgument(
            "samples must share a dimension".into(),
        ));
    }
    let nu_max = 1.0 / (4.0 + d as f64);
    if !(nu > 0.0 && nu < nu_max) {
        return Err(Error::InvalidArgument(alloc::format!(
            "truncation exponent nu={nu} outside (0, 1/(4+d)) = (0, {nu_max:.6})"
        )));
    }
    let m = x_sample.rows();
    let theta = truncation_theta(m, nu);
    let x_floor = theta * x_anchor;
    let y_floor = theta * y_anchor;
    let keep_x: Vec<usize> = (0..m)
        .filter(|&i| f_m.eval(x_sample.row(i)) >= x_floor)
        .collect();
    let keep_y: Vec<usize> = (0..y_sample.rows())
        .filter(|&i| g_eval(y_sample.row(i)) >= y_floor)
        .collect();
    let n = keep_x.len().min(keep_y.len());
    let required = d + 2;
    if n < required {
        return Err(Error::TruncationTooAggressive {
            survivors: n,
            required,
        });
    }
    let cols: Vec<usize> = (0..d).collect();
    let kept_x = x_sample.select(&keep_x[..n], &cols);
    let kept_y = y_sample.select(&keep_y[..n], &cols);
    Ok(TruncatedSample {
        kept_x,
        kept_y,
        theta,
        nu,
        m_original: m,
        x_floor,
        y_floor,
        dropped_x: m - keep_x.len(),
        dropped_y: y_sample.rows() - keep_y.len(),
    })
}
