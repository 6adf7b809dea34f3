//! Scalar math on top of `libm`, plus the handful of special functions and
//! quadrature rules the estimators need.
//!
//! Everything routes through `libm` rather than the `std` float methods so the
//! whole crate produces bit-identical numbers on every platform.

use alloc::vec::Vec;

/// ln(2π).
pub const LN_2PI: f64 = 1.8378770664093453;
/// Euler–Mascheroni constant (mean of the standard Gumbel law).
pub const EULER_GAMMA: f64 = 0.5772156649015329;

/// e^x.
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// Natural logarithm.
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Square root.
#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// x^y for real y.
#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// ln Γ(x).
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// |x|.
#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// Density of the standard normal law at `z`.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    exp(-0.5 * z * z - 0.5 * LN_2PI)
}

/// Distribution function of the standard normal law.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

/// Quantile of the standard normal law (Wichura's AS 241, double precision).
///
/// Relative error below 1e-15 on (0, 1); returns ±∞ at the endpoints.
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if abs(q) <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly7(r, &A_NQ) / poly7(r, &B_NQ);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = sqrt(-ln(r));
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly7(r, &C_NQ) / poly7(r, &D_NQ)
    } else {
        let r = r - 5.0;
        poly7(r, &E_NQ) / poly7(r, &F_NQ)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[inline]
fn poly7(x: f64, c: &[f64; 8]) -> f64 {
    // Horner evaluation, highest coefficient last in the arrays below.
    let mut acc = c[7];
    for k in (0..7).rev() {
        acc = acc * x + c[k];
    }
    acc
}

// AS 241 (PPND16) coefficient blocks, constant term first.
const A_NQ: [f64; 8] = [
    3.3871328727963666080,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const B_NQ: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const C_NQ: [f64; 8] = [
    1.42343711074968357734,
    4.63033784615654529590,
    5.76949722146069140550,
    3.64784832476320460504,
    1.27045825245236838258,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const D_NQ: [f64; 8] = [
    1.0,
    2.05319162663775882187,
    1.67638483018380384940,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const E_NQ: [f64; 8] = [
    6.65790464350110377720,
    5.46378491116411436990,
    1.78482653991729133580,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const F_NQ: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

/// Arithmetic mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n−1); 0 for fewer than two points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0)
}

/// Unbiased sample standard deviation.
pub fn sample_sd(xs: &[f64]) -> f64 {
    sqrt(sample_variance(xs))
}

/// log(Σ e^{x_i}) computed stably.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    for &x in xs {
        if x > hi {
            hi = x;
        }
    }
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| exp(x - hi)).sum();
    hi + ln(sum)
}

/// Slope of the least-squares line through (x_i, y_i).
pub fn regression_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 || n < 2.0 {
        return 0.0;
    }
    num / den
}

// 8-point Gauss–Legendre nodes/weights on [-1, 1].
const GL8_X: [f64; 8] = [
    -0.9602898564975363,
    -0.7966664774136267,
    -0.525532409916329,
    -0.1834346424956498,
    0.1834346424956498,
    0.525532409916329,
    0.7966664774136267,
    0.9602898564975363,
];
const GL8_W: [f64; 8] = [
    0.10122853629037626,
    0.22238103445337448,
    0.31370664587788727,
    0.362683783378362,
    0.362683783378362,
    0.31370664587788727,
    0.22238103445337448,
    0.10122853629037626,
];

/// ∫_a^b f(x) dx by composite 8-point Gauss–Legendre over `panels` sub-intervals.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels.max(1);
    let w = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + w * p as f64;
        let mid = lo + 0.5 * w;
        let half = 0.5 * w;
        let mut acc = 0.0;
        for k in 0..8 {
            acc += GL8_W[k] * f(mid + half * GL8_X[k]);
        }
        total += acc * half;
    }
    total
}

/// ∫_0^∞ f(x) dx via the substitution x = t/(1−t) on (0, 1).
///
/// Suitable for integrands decaying at least exponentially; the Jacobian
/// (1−t)^{−2} is folded in.
pub fn integrate_half_line<F: Fn(f64) -> f64>(f: F, panels: usize) -> f64 {
    integrate(
        |t| {
            let om = 1.0 - t;
            if om <= 0.0 {
                return 0.0;
            }
            let x = t / om;
            let v = f(x) / (om * om);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        panels,
    )
}

/// Kolmogorov distribution tail Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}.
///
/// Used for the asymptotic p-value of Kolmogorov–Smirnov statistics.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = exp(-2.0 * kf * kf * lambda * lambda);
        if term < 1e-18 {
            break;
        }
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov statistic against a CDF given as a callable.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let c = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = f64::max(d, f64::max(abs(c - lo), abs(hi - c)));
    }
    d
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa: Vec<f64> = a.to_vec();
    let mut xb: Vec<f64> = b.to_vec();
    xa.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < na && j < nb {
        let xi = xa[i];
        let xj = xb[j];
        if xi <= xj {
            i += 1;
        }
        if xj <= xi {
            j += 1;
        }
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        d = f64::max(d, abs(fa - fb));
    }
    d
}
