//! Analytic densities: the elliptical family, 1-D factors (normal, Gumbel),
//! product densities on a linear basis, and their samplers.
//!
//! These serve two roles: the instrumental density g is an elliptical density
//! moment-matched to the data, and simulation ground truths are product
//! densities of 1-D non-Gaussian factors with an elliptical block.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Cholesky, Lu, Matrix};
use crate::math;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// A direction in R^d, optionally canonicalized.
///
/// Canonical form is unit Euclidean norm with the first nonzero coordinate
/// positive; projection laws are invariant under rescaling, so canonical
/// form picks one representative per antipodal pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    coords: Vec<f64>,
    canonical: bool,
}

impl Direction {
    /// Canonicalized direction: unit norm, first nonzero coordinate positive.
    pub fn canonical(coords: &[f64]) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                what: "direction coordinate".into(),
            });
        }
        let norm = math::sqrt(coords.iter().map(|c| c * c).sum());
        if norm < 1e-12 {
            return Err(Error::InvalidArgument(
                "direction must be a nonzero vector".into(),
            ));
        }
        let mut unit: Vec<f64> = coords.iter().map(|c| c / norm).collect();
        let lead = unit.iter().find(|c| math::abs(**c) > 1e-12);
        if let Some(&l) = lead {
            if l < 0.0 {
                for c in &mut unit {
                    *c = -*c;
                }
            }
        }
        Ok(Self {
            coords: unit,
            canonical: true,
        })
    }

    /// Direction stored as given, without normalization.
    pub fn raw(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().map(|c| c * c).sum::<f64>() < 1e-24 {
            return Err(Error::InvalidArgument(
                "direction must be a nonzero vector".into(),
            ));
        }
        Ok(Self {
            coords,
            canonical: false,
        })
    }

    /// Coordinates.
    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Whether the direction is in canonical form.
    #[inline]
    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    /// Ambient dimension.
    #[inline]
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Euclidean inner product with a point.
    #[inline]
    pub fn project(&self, x: &[f64]) -> f64 {
        self.coords.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Angle to another vector in degrees, ignoring orientation (0..90).
    pub fn angle_deg_to(&self, other: &[f64]) -> f64 {
        let na = math::sqrt(self.coords.iter().map(|c| c * c).sum());
        let nb = math::sqrt(other.iter().map(|c| c * c).sum());
        let dot: f64 = self.coords.iter().zip(other).map(|(a, b)| a * b).sum();
        let c = math::abs(dot) / (na * nb);
        let c = if c > 1.0 { 1.0 } else { c };
        libm::acos(c) * 180.0 / core::f64::consts::PI
    }

    /// Rescaled copy with the largest-magnitude coordinate set to 1.
    pub fn rescaled_to_unit_max(&self) -> Vec<f64> {
        let mut best = 0.0;
        for &c in &self.coords {
            if math::abs(c) > math::abs(best) {
                best = c;
            }
        }
        self.coords.iter().map(|c| c / best).collect()
    }
}

/// Radial profile xi of an elliptical density.
///
/// The density is c_d |Sigma|^{-1/2} xi(half Mahalanobis squared). The
/// Gaussian family has xi(t) = exp(-t); other profiles are supplied as plain
/// functions and normalized by quadrature.
#[derive(Debug, Clone)]
pub enum Generator {
    /// xi(t) = exp(-t).
    Gaussian,
    /// Arbitrary profile with a display label; must decay fast enough for
    /// finite second moments.
    Custom {
        /// Name used in reports.
        label: &'static str,
        /// The profile function.
        xi: fn(f64) -> f64,
    },
}

impl Generator {
    /// Profile value xi(t).
    #[inline]
    pub fn xi(&self, t: f64) -> f64 {
        match self {
            Generator::Gaussian => math::exp(-t),
            Generator::Custom { xi, .. } => xi(t),
        }
    }

    /// Display label.
    pub fn label(&self) -> &'static str {
        match self {
            Generator::Gaussian => "gaussian",
            Generator::Custom { label, .. } => label,
        }
    }

    /// Normalization constant c_d = Gamma(d/2)/(2 pi)^{d/2} / I with
    /// I the radial integral of x^{d/2-1} xi(x).
    pub fn norm_const(&self, d: usize) -> Result<f64> {
        match self {
            // The radial integral equals Gamma(d/2) exactly.
            Generator::Gaussian => Ok(math::exp(-0.5 * d as f64 * math::LN_2PI)),
            Generator::Custom { xi, .. } => {
                let half_d = 0.5 * d as f64;
                // Substitution x = s^2 removes the x^{d/2-1} endpoint
                // singularity at d = 1.
                let xi = *xi;
                let radial =
                    math::integrate_half_line(|s| 2.0 * math::powf(s, d as f64 - 1.0) * xi(s * s), 96);
                if !radial.is_finite() || radial <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "generator radial integral is not finite and positive".into(),
                    ));
                }
                let ln_c = math::ln_gamma(half_d) - half_d * math::LN_2PI - math::ln(radial);
                Ok(math::exp(ln_c))
            }
        }
    }

    fn is_gaussian(&self) -> bool {
        matches!(self, Generator::Gaussian)
    }
}

/// Inverse-CDF table for the radial law of a non-Gaussian generator.
///
/// The radius R = |L^{-1}(X - mu)| has density proportional to
/// r^{d-1} xi(r^2 / 2).
#[derive(Debug, Clone)]
struct RadialTable {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl RadialTable {
    fn build(generator: &Generator, d: usize) -> Result<Self> {
        let weight = |r: f64| math::powf(r, d as f64 - 1.0) * generator.xi(0.5 * r * r);
        let mut r_max = 8.0 + 2.0 * math::sqrt(d as f64);
        let mut peak = 0.0f64;
        for i in 0..=256 {
            let v = weight(r_max * i as f64 / 256.0);
            if v > peak {
                peak = v;
            }
        }
        if !(peak > 0.0) {
            return Err(Error::InvalidArgument(
                "generator profile vanishes on the probed radial range".into(),
            ));
        }
        while weight(r_max) > 1e-15 * peak {
            r_max *= 1.5;
            if r_max > 1e6 {
                return Err(Error::InvalidArgument(
                    "generator tail decays too slowly for radial tabulation".into(),
                ));
            }
        }
        let n = 4096usize;
        let mut grid = Vec::with_capacity(n + 1);
        let mut cdf = Vec::with_capacity(n + 1);
        let h = r_max / n as f64;
        let mut acc = 0.0;
        let mut prev = weight(0.0);
        grid.push(0.0);
        cdf.push(0.0);
        for i in 1..=n {
            let r = h * i as f64;
            let w = weight(r);
            acc += 0.5 * (prev + w) * h;
            prev = w;
            grid.push(r);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Self { grid, cdf })
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let u = rng::uniform01(rng);
        // Binary search for the bracketing CDF panel.
        let mut lo = 0usize;
        let mut hi = self.cdf.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cdf[mid] < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c0 = self.cdf[lo];
        let c1 = self.cdf[hi];
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.grid[lo] + t * (self.grid[hi] - self.grid[lo])
    }
}

/// Elliptical density c_d |Sigma|^{-1/2} xi(half (x-mu)' Sigma^{-1} (x-mu)).
#[derive(Debug, Clone)]
pub struct EllipticalDensity {
    mu: Vec<f64>,
    sigma: Matrix,
    generator: Generator,
    norm_const: f64,
    chol: Cholesky,
    ln_det: f64,
    radial: Option<RadialTable>,
}

impl EllipticalDensity {
    /// Construct from location, SPD scale matrix, and generator.
    pub fn new(mu: Vec<f64>, sigma: Matrix, generator: Generator) -> Result<Self> {
        let d = mu.len();
        if sigma.rows() != d || sigma.cols() != d {
            return Err(Error::InvalidArgument(
                "scale matrix dimensions must match the location vector".into(),
            ));
        }
        let chol = Cholesky::factor(&sigma)?;
        let ln_det = chol.ln_det();
        let norm_const = generator.norm_const(d)?;
        let radial = if generator.is_gaussian() {
            None
        } else {
            Some(RadialTable::build(&generator, d)?)
        };
        Ok(Self {
            mu,
            sigma,
            generator,
            norm_const,
            chol,
            ln_det,
            radial,
        })
    }

    /// Standard Gaussian N(0, I_d).
    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], Matrix::identity(d), Generator::Gaussian)
            .expect("identity scale is positive-definite")
    }

    /// Gaussian with the given mean and covariance.
    pub fn gaussian(mu: Vec<f64>, sigma: Matrix) -> Result<Self> {
        Self::new(mu, sigma, Generator::Gaussian)
    }

    /// Ambient dimension.
    #[inline]
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Location vector.
    #[inline]
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Scale matrix.
    #[inline]
    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    /// Generator.
    #[inline]
    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Normalization constant c_d.
    #[inline]
    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    /// True when the generator is the Gaussian profile.
    pub fn is_gaussian(&self) -> bool {
        self.generator.is_gaussian()
    }

    /// ln |Sigma|.
    #[inline]
    pub fn ln_det_sigma(&self) -> f64 {
        self.ln_det
    }

    /// Cached Cholesky factor of Sigma.
    #[inline]
    pub(crate) fn chol(&self) -> &Cholesky {
        &self.chol
    }

    /// Density at x.
    pub fn eval(&self, x: &[f64]) -> f64 {
        math::exp(self.ln_eval(x))
    }

    /// Log-density at x.
    pub fn ln_eval(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let q = self.chol.quad_form(&diff);
        match &self.generator {
            Generator::Gaussian => {
                -0.5 * (self.dim() as f64 * math::LN_2PI + self.ln_det) - 0.5 * q
            }
            g => math::ln(self.norm_const) - 0.5 * self.ln_det + math::ln(g.xi(0.5 * q)),
        }
    }

    /// Marginal over the kept coordinate indices.
    ///
    /// The scale matrix restricts to the kept block; the same profile is
    /// reused with its normalization recomputed for the new dimension (exact
    /// for the Gaussian generator).
    pub fn marginal(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::InvalidArgument(
                "marginal requires a nonempty index set".into(),
            ));
        }
        if keep.iter().any(|&i| i >= self.dim()) {
            return Err(Error::InvalidArgument(
                "marginal index out of range".into(),
            ));
        }
        let mu: Vec<f64> = keep.iter().map(|&i| self.mu[i]).collect();
        let sigma = self.sigma.select(keep, keep);
        Self::new(mu, sigma, self.generator.clone())
    }

    /// Conditional density of the remaining coordinates given observed ones.
    ///
    /// Location and scale follow the Schur-complement update
    /// mu' = mu_1 + S_12 S_22^{-1} (v - mu_2), S' = S_11 - S_12 S_22^{-1} S_21.
    pub fn conditional(&self, given: &[usize], values: &[f64]) -> Result<Self> {
        let d = self.dim();
        if given.is_empty() || given.len() >= d {
            return Err(Error::InvalidArgument(
                "conditioning set must be a proper nonempty subset".into(),
            ));
        }
        if given.len() != values.len() {
            return Err(Error::InvalidArgument(
                "conditioning values must match the index set".into(),
            ));
        }
        let mut is_given = vec![false; d];
        for &i in given {
            if i >= d {
                return Err(Error::InvalidArgument(
                    "conditioning index out of range".into(),
                ));
            }
            is_given[i] = true;
        }
        let keep: Vec<usize> = (0..d).filter(|&i| !is_given[i]).collect();
        let s_gg = self.sigma.select(given, given);
        let s_kg = self.sigma.select(&keep, given);
        let chol_gg = Cholesky::factor(&s_gg)?;
        let resid: Vec<f64> = given
            .iter()
            .zip(values)
            .map(|(&i, &v)| v - self.mu[i])
            .collect();
        let w = chol_gg.solve(&resid);
        let mut mu: Vec<f64> = keep.iter().map(|&i| self.mu[i]).collect();
        for (r, m) in mu.iter_mut().enumerate() {
            *m += s_kg.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut sigma = self.sigma.select(&keep, &keep);
        // S_kg S_gg^{-1} S_gk, column by column through the factorization.
        let k = keep.len();
        for a in 0..k {
            let col = chol_gg.solve(s_kg.row(a));
            for b in 0..k {
                let corr: f64 = s_kg.row(b).iter().zip(&col).map(|(x, y)| x * y).sum();
                sigma.set(b, a, sigma.get(b, a) - corr);
            }
        }
        // Symmetrize against roundoff before factoring.
        for a in 0..k {
            for b in (a + 1)..k {
                let v = 0.5 * (sigma.get(a, b) + sigma.get(b, a));
                sigma.set(a, b, v);
                sigma.set(b, a, v);
            }
        }
        Self::new(mu, sigma, self.generator.clone())
    }

    /// Exact 1-D law of a'X for any nonzero vector a.
    pub fn project_1d(&self, a: &[f64]) -> Result<Self> {
        if a.len() != self.dim() {
            return Err(Error::InvalidArgument(
                "projection vector dimension mismatch".into(),
            ));
        }
        let mean: f64 = a.iter().zip(&self.mu).map(|(x, m)| x * m).sum();
        let sa = self.sigma.matvec(a);
        let var: f64 = a.iter().zip(&sa).map(|(x, y)| x * y).sum();
        if var <= 0.0 {
            return Err(Error::InvalidArgument(
                "projection vector must be nonzero".into(),
            ));
        }
        Self::new(vec![mean], Matrix::from_rows(1, 1, vec![var])?, self.generator.clone())
    }

    /// One draw written into `out`.
    pub fn sample_point(&self, rng: &mut Rng, out: &mut [f64]) {
        let d = self.dim();
        match &self.radial {
            None => {
                let z = rng::standard_normal_vec(rng, d);
                let lz = self.chol.l_matvec(&z);
                for i in 0..d {
                    out[i] = self.mu[i] + lz[i];
                }
            }
            Some(table) => {
                let u = rng::uniform_sphere(rng, d);
                let r = table.sample(rng);
                let lu = self.chol.l_matvec(&u);
                for i in 0..d {
                    out[i] = self.mu[i] + r * lu[i];
                }
            }
        }
    }
}

/// A 1-D density evaluable in log space.
pub trait ScalarDensity {
    /// Log-density at t.
    fn ln_density(&self, t: f64) -> f64;

    /// Density at t.
    fn density(&self, t: f64) -> f64 {
        math::exp(self.ln_density(t))
    }

    /// True for Monte-Carlo or kernel-backed handles rather than closed forms.
    fn is_approximate(&self) -> bool {
        false
    }
}

/// Owned 1-D density handle.
pub type ScalarHandle = Box<dyn ScalarDensity + Send + Sync>;

impl ScalarDensity for EllipticalDensity {
    fn ln_density(&self, t: f64) -> f64 {
        debug_assert_eq!(self.dim(), 1, "scalar use of a multivariate density");
        self.ln_eval(&[t])
    }
}

/// 1-D normal density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal1D {
    /// Mean.
    pub mean: f64,
    /// Standard deviation, positive.
    pub sd: f64,
}

impl Normal1D {
    /// Construct; the standard deviation must be positive.
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::InvalidArgument(
                "normal standard deviation must be positive".into(),
            ));
        }
        Ok(Self { mean, sd })
    }

    /// One draw.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.mean + self.sd * rng::standard_normal(rng)
    }

    /// CDF at t.
    pub fn cdf(&self, t: f64) -> f64 {
        math::normal_cdf((t - self.mean) / self.sd)
    }
}

impl ScalarDensity for Normal1D {
    fn ln_density(&self, t: f64) -> f64 {
        let z = (t - self.mean) / self.sd;
        -0.5 * math::LN_2PI - math::ln(self.sd) - 0.5 * z * z
    }
}

/// Gumbel (type-I extreme value) density with location and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelDensity1D {
    /// Location.
    pub loc: f64,
    /// Scale, positive.
    pub scale: f64,
}

impl GumbelDensity1D {
    /// Construct; the scale must be positive.
    pub fn new(loc: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(
                "gumbel scale must be positive".into(),
            ));
        }
        Ok(Self { loc, scale })
    }

    /// Mean loc + scale * gamma.
    pub fn mean(&self) -> f64 {
        self.loc + self.scale * math::EULER_GAMMA
    }

    /// Variance (pi * scale)^2 / 6.
    pub fn variance(&self) -> f64 {
        let pi = core::f64::consts::PI;
        pi * pi * self.scale * self.scale / 6.0
    }

    /// CDF exp(-exp(-z)).
    pub fn cdf(&self, t: f64) -> f64 {
        let z = (t - self.loc) / self.scale;
        math::exp(-math::exp(-z))
    }

    /// One draw by inverse CDF.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u = rng::uniform01(rng);
        self.loc - self.scale * math::ln(-math::ln(u))
    }
}

impl ScalarDensity for GumbelDensity1D {
    fn ln_density(&self, t: f64) -> f64 {
        let z = (t - self.loc) / self.scale;
        -math::ln(self.scale) - z - math::exp(-z)
    }
}

/// Samplable 1-D factor of a product density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor1D {
    /// Normal factor.
    Normal(Normal1D),
    /// Gumbel factor.
    Gumbel(GumbelDensity1D),
}

impl Factor1D {
    /// One draw.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Factor1D::Normal(n) => n.sample(rng),
            Factor1D::Gumbel(g) => g.sample(rng),
        }
    }

    /// Analytic mean.
    pub fn mean(&self) -> f64 {
        match self {
            Factor1D::Normal(n) => n.mean,
            Factor1D::Gumbel(g) => g.mean(),
        }
    }

    /// Analytic variance.
    pub fn variance(&self) -> f64 {
        match self {
            Factor1D::Normal(n) => n.sd * n.sd,
            Factor1D::Gumbel(g) => g.variance(),
        }
    }
}

impl ScalarDensity for Factor1D {
    fn ln_density(&self, t: f64) -> f64 {
        match self {
            Factor1D::Normal(n) => n.ln_density(t),
            Factor1D::Gumbel(g) => g.ln_density(t),
        }
    }
}

/// Law of c * Z for a 1-D factor Z and nonzero constant c.
#[derive(Debug, Clone, Copy)]
pub struct Scaled1D {
    inner: Factor1D,
    coef: f64,
}

impl Scaled1D {
    /// Construct; the coefficient must be nonzero.
    pub fn new(inner: Factor1D, coef: f64) -> Result<Self> {
        if coef == 0.0 || !coef.is_finite() {
            return Err(Error::InvalidArgument(
                "scaling coefficient must be finite and nonzero".into(),
            ));
        }
        Ok(Self { inner, coef })
    }
}

impl ScalarDensity for Scaled1D {
    fn ln_density(&self, t: f64) -> f64 {
        self.inner.ln_density(t / self.coef) - math::ln(math::abs(self.coef))
    }
}

/// A fully specified multivariate density with a sampler.
pub trait AnalyticDensity: Send + Sync {
    /// Ambient dimension.
    fn dim(&self) -> usize;

    /// Log-density at x.
    fn ln_density_at(&self, x: &[f64]) -> f64;

    /// Density at x.
    fn density_at(&self, x: &[f64]) -> f64 {
        math::exp(self.ln_density_at(x))
    }

    /// One draw written into `out`.
    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]);

    /// Closed-form law of a'X when available.
    fn project_exact(&self, a: &Direction) -> Option<ScalarHandle> {
        let _ = a;
        None
    }

    /// The density as a Gaussian, when it is one; enables closed forms.
    fn as_gaussian(&self) -> Option<&EllipticalDensity> {
        None
    }
}

impl AnalyticDensity for EllipticalDensity {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn ln_density_at(&self, x: &[f64]) -> f64 {
        self.ln_eval(x)
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        self.sample_point(rng, out);
    }

    fn project_exact(&self, a: &Direction) -> Option<ScalarHandle> {
        self.project_1d(a.coords()).ok().map(|d| Box::new(d) as ScalarHandle)
    }

    fn as_gaussian(&self) -> Option<&EllipticalDensity> {
        if self.is_gaussian() {
            Some(self)
        } else {
            None
        }
    }
}

/// Density of X = A^{-1} Y where Y has independent blocks: j non-Gaussian
/// 1-D factors on the first coordinates and one elliptical block on the rest.
///
/// Evaluation is |det A| times the product of factor densities at the basis
/// projections (a_1'x, ..., a_d'x).
#[derive(Debug, Clone)]
pub struct ProductDensity {
    basis: Matrix,
    lu: Lu,
    abs_det: f64,
    nongaussian: Vec<Factor1D>,
    elliptical: Option<EllipticalDensity>,
    j: usize,
}

impl ProductDensity {
    /// Construct from basis rows a_1..a_d, the j leading 1-D factors, and the
    /// elliptical block over the trailing d-j coordinates (None when j = d).
    pub fn new(
        basis_rows: &[Vec<f64>],
        nongaussian: Vec<Factor1D>,
        elliptical: Option<EllipticalDensity>,
    ) -> Result<Self> {
        let d = basis_rows.len();
        let j = nongaussian.len();
        let ell_dim = elliptical.as_ref().map_or(0, |e| e.dim());
        if j + ell_dim != d {
            return Err(Error::InvalidArgument(
                "factor count plus elliptical dimension must equal the basis size".into(),
            ));
        }
        let mut data = Vec::with_capacity(d * d);
        for row in basis_rows {
            if row.len() != d {
                return Err(Error::InvalidArgument(
                    "basis rows must all have length d".into(),
                ));
            }
            data.extend_from_slice(row);
        }
        let basis = Matrix::from_rows(d, d, data)?;
        let lu = Lu::factor(&basis)?;
        let abs_det = math::abs(lu.det());
        Ok(Self {
            basis,
            lu,
            abs_det,
            nongaussian,
            elliptical,
            j,
        })
    }

    /// Number of non-Gaussian factors.
    #[inline]
    pub fn num_nongaussian(&self) -> usize {
        self.j
    }

    /// Basis matrix with rows a_i'.
    #[inline]
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Non-Gaussian factors.
    #[inline]
    pub fn factors(&self) -> &[Factor1D] {
        &self.nongaussian
    }

    /// Elliptical block, if any.
    #[inline]
    pub fn elliptical_part(&self) -> Option<&EllipticalDensity> {
        self.elliptical.as_ref()
    }

    fn dim_internal(&self) -> usize {
        self.basis.rows()
    }
}

impl AnalyticDensity for ProductDensity {
    fn dim(&self) -> usize {
        self.dim_internal()
    }

    fn ln_density_at(&self, x: &[f64]) -> f64 {
        let y = self.basis.matvec(x);
        let mut ln = math::ln(self.abs_det);
        for (f, &yi) in self.nongaussian.iter().zip(&y) {
            ln += f.ln_density(yi);
        }
        if let Some(e) = &self.elliptical {
            ln += e.ln_eval(&y[self.j..]);
        }
        ln
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let d = self.dim_internal();
        let mut y = vec![0.0; d];
        for (i, f) in self.nongaussian.iter().enumerate() {
            y[i] = f.sample(rng);
        }
        if let Some(e) = &self.elliptical {
            e.sample_point(rng, &mut y[self.j..]);
        }
        let x = self.lu.solve(&y);
        out.copy_from_slice(&x);
    }

    fn project_exact(&self, a: &Direction) -> Option<ScalarHandle> {
        // a'X = a'A^{-1}Y = w'Y with w = A^{-T} a.
        let w = self.lu.solve_transpose(a.coords());
        let scale = w.iter().fold(0.0f64, |m, v| if math::abs(*v) > m { math::abs(*v) } else { m });
        let tol = 1e-12 * scale;
        let active: Vec<usize> = w
            .iter()
            .enumerate()
            .filter(|(_, v)| math::abs(**v) > tol)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            return None;
        }
        let all_elliptical = active.iter().all(|&i| i >= self.j);
        if all_elliptical {
            let e = self.elliptical.as_ref()?;
            let w_ell = &w[self.j..];
            return e.project_1d(w_ell).ok().map(|d| Box::new(d) as ScalarHandle);
        }
        if active.len() == 1 {
            let i = active[0];
            // Single factor coordinate: a'X = w_i Y_i.
            return Scaled1D::new(self.nongaussian[i], w[i])
                .ok()
                .map(|s| Box::new(s) as ScalarHandle);
        }
        None
    }
}

/// m draws from a density arranged as an m x d matrix, deterministic in seed.
pub fn sample_matrix(dist: &dyn AnalyticDensity, m: usize, seed: u64) -> Matrix {
    let d = dist.dim();
    let mut rng = rng::rng_for(seed, 0);
    let mut out = Matrix::zeros(m, d);
    let mut row = vec![0.0; d];
    for i in 0..m {
        dist.sample_into(&mut rng, &mut row);
        for (jj, &v) in row.iter().enumerate() {
            out.set(i, jj, v);
        }
    }
    out
}

/// Law of a'X: exact when the density admits one, otherwise a kernel
/// estimate over `m_mc` projected draws, flagged approximate.
pub fn project_density_1d(
    dist: &dyn AnalyticDensity,
    a: &Direction,
    m_mc: usize,
    seed: u64,
) -> Result<ScalarHandle> {
    if a.dim() != dist.dim() {
        return Err(Error::InvalidArgument(
            "projection direction dimension mismatch".into(),
        ));
    }
    if let Some(exact) = dist.project_exact(a) {
        return Ok(exact);
    }
    let mut rng = rng::rng_for(seed, 0);
    let mut row = vec![0.0; dist.dim()];
    let mut scalars = Vec::with_capacity(m_mc);
    for _ in 0..m_mc {
        dist.sample_into(&mut rng, &mut row);
        scalars.push(a.project(&row));
    }
    let est = crate::kde::ProjectedKernelEstimate::from_scalars(a.clone(), scalars)?;
    Ok(Box::new(est))
}

/// Elliptical density with the sample's mean and covariance.
///
/// The fit never looks at any ground truth; both moments come from the
/// sample (unbiased covariance, denominator m-1).
pub fn moment_match_instrumental(sample: &Matrix, generator: Generator) -> Result<EllipticalDensity> {
    let m = sample.rows();
    let d = sample.cols();
    if m <= d {
        return Err(Error::InvalidArgument(
            "moment matching needs more observations than dimensions".into(),
        ));
    }
    let mu = linalg::column_means(sample);
    let cov = linalg::sample_covariance(sample)?;
    EllipticalDensity::new(mu, cov, generator).map_err(|e| match e {
        Error::NotPositiveDefinite => Error::InvalidArgument(
            "sample covariance is singular; regularize (e.g. add a small ridge) or drop collinear columns"
                .into(),
        ),
        other => other,
    })
}

/// Simulation preset 1: d = 3 product density on overlapping coordinate sums.
///
/// Factor layout (0-based coordinates): Gumbel(-3, 4) on x0 + x2,
/// Gumbel(1, 1) on x0 + x1, and Normal(-5, 2) on x1 + x2 as the trailing
/// 1-D elliptical block. Exact normalization |det A| = 2.
pub fn sim1_density() -> ProductDensity {
    let rows = vec![
        vec![1.0, 0.0, 1.0],
        vec![1.0, 1.0, 0.0],
        vec![0.0, 1.0, 1.0],
    ];
    let factors = vec![
        Factor1D::Gumbel(GumbelDensity1D::new(-3.0, 4.0).expect("positive scale")),
        Factor1D::Gumbel(GumbelDensity1D::new(1.0, 1.0).expect("positive scale")),
    ];
    let normal_block = EllipticalDensity::gaussian(
        vec![-5.0],
        Matrix::from_rows(1, 1, vec![4.0]).expect("1x1"),
    )
    .expect("positive variance");
    ProductDensity::new(&rows, factors, Some(normal_block)).expect("well-formed preset")
}

/// Directions the first simulation preset is built to reveal.
pub fn sim1_expected_directions() -> [Vec<f64>; 2] {
    [vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]
}

/// Simulation preset 2: d = 10, Gumbel(-5, 1) on the first coordinate and
/// standard Gaussian on the other nine, identity basis.
pub fn sim2_density() -> ProductDensity {
    let d = 10;
    sim_axis_gumbel_density(d)
}

/// Simulation preset 3 clean component: d = 20 analogue of preset 2.
pub fn sim3_density() -> ProductDensity {
    let d = 20;
    sim_axis_gumbel_density(d)
}

fn sim_axis_gumbel_density(d: usize) -> ProductDensity {
    let rows: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut r = vec![0.0; d];
            r[i] = 1.0;
            r
        })
        .collect();
    let factors = vec![Factor1D::Gumbel(
        GumbelDensity1D::new(-5.0, 1.0).expect("positive scale"),
    )];
    let gauss = EllipticalDensity::standard(d - 1);
    ProductDensity::new(&rows, factors, Some(gauss)).expect("well-formed preset")
}

/// Simulation preset 3 sample: 96 draws from the clean density plus 4
/// outliers at (2, 0, ..., 0), in a 100 x 20 matrix.
pub fn sim3_sample(seed: u64) -> Matrix {
    let clean = sim3_density();
    let d = 20;
    let m_clean = 96;
    let m_out = 4;
    let mut out = Matrix::zeros(m_clean + m_out, d);
    let mut rng = rng::rng_for(seed, 0);
    let mut row = vec![0.0; d];
    for i in 0..m_clean {
        clean.sample_into(&mut rng, &mut row);
        for (jj, &v) in row.iter().enumerate() {
            out.set(i, jj, v);
        }
    }
    for i in m_clean..(m_clean + m_out) {
        out.set(i, 0, 2.0);
    }
    out
}
