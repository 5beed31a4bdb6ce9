//! Log-densities, CDFs and quantile functions for the prior families:
//! Cauchy, half-Cauchy, standard normal, Beta, and the LKJ distribution
//! over correlation matrices.
//!
//! All log-densities are fully normalized; additive constants are kept so
//! that values are comparable across parameterizations.

use std::f64::consts::PI;

const LN_2PI: f64 = 1.8378770664093453;

/// Natural log of the gamma function, Lanczos approximation (g = 7, n = 9).
///
/// Accurate to ~1e-13 relative over the positive reals; negative non-integer
/// arguments are handled by reflection.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        return PI.ln() - (PI * x).sin().abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// log Beta(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log density of Cauchy(0, scale) at `x`.
pub fn cauchy_log_pdf(x: f64, scale: f64) -> f64 {
    let z = x / scale;
    -(PI * scale).ln() - (z * z).ln_1p()
}

/// Derivative of `cauchy_log_pdf` with respect to `x`.
pub fn cauchy_log_pdf_grad(x: f64, scale: f64) -> f64 {
    -2.0 * x / (scale * scale + x * x)
}

/// CDF of Cauchy(0, scale).
pub fn cauchy_cdf(x: f64, scale: f64) -> f64 {
    0.5 + (x / scale).atan() / PI
}

/// Quantile of Cauchy(0, scale).
pub fn cauchy_quantile(p: f64, scale: f64) -> f64 {
    scale * (PI * (p - 0.5)).tan()
}

/// Log density of half-Cauchy(0, scale) at `x >= 0`.
pub fn half_cauchy_log_pdf(x: f64, scale: f64) -> f64 {
    let z = x / scale;
    2f64.ln() - (PI * scale).ln() - (z * z).ln_1p()
}

/// Derivative of `half_cauchy_log_pdf` with respect to `x`.
pub fn half_cauchy_log_pdf_grad(x: f64, scale: f64) -> f64 {
    -2.0 * x / (scale * scale + x * x)
}

/// CDF of half-Cauchy(0, scale); zero below the origin.
pub fn half_cauchy_cdf(x: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        2.0 * (x / scale).atan() / PI
    }
}

/// Quantile of half-Cauchy(0, scale).
pub fn half_cauchy_quantile(p: f64, scale: f64) -> f64 {
    scale * (PI * p / 2.0).tan()
}

/// Log density of the standard normal at `x`.
pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Log density of Beta(a, b) at `x` in (0, 1).
pub fn beta_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
}

/// Shape parameter of the scaled-Beta law of the canonical partial
/// correlation in column `j` (1-indexed) of a `k x k` LKJ(eta) matrix.
///
/// Under LKJ(eta) the CPCs are independent with
/// `(z_ij + 1)/2 ~ Beta(b_j, b_j)` where `b_j = eta + (k - 1 - j)/2`.
pub fn lkj_cpc_shape(eta: f64, k: usize, j: usize) -> f64 {
    eta + (k - 1 - j) as f64 / 2.0
}

/// Log density of the scaled Beta(b, b) law on (-1, 1) at `z`.
pub fn scaled_beta_log_pdf(z: f64, b: f64) -> f64 {
    (b - 1.0) * (-z * z).ln_1p() - (2.0 * b - 1.0) * 2f64.ln() - ln_beta(b, b)
}

/// Log normalizing constant of LKJ(eta) over `k x k` correlation matrices,
/// i.e. the density is `exp(lkj_log_norm(eta, k)) * det(Omega)^(eta-1)`
/// with respect to the free lower-triangular entries of `Omega`.
///
/// Derived from the canonical-partial-correlation factorization: column `j`
/// holds `k - j` CPCs, each scaled Beta(b_j, b_j) on (-1, 1).
pub fn lkj_log_norm(eta: f64, k: usize) -> f64 {
    let mut c = 0.0;
    for j in 1..k {
        let b = lkj_cpc_shape(eta, k, j);
        c -= (k - j) as f64 * ((2.0 * b - 1.0) * 2f64.ln() + ln_beta(b, b));
    }
    c
}

/// Fully normalized log LKJ(eta) density of a correlation matrix given as a
/// flat row-major `k x k` slice.
pub fn lkj_corr_log_pdf(omega: &[f64], k: usize, eta: f64) -> f64 {
    let chol = cholesky(omega, k).expect("correlation matrix must be positive definite");
    let log_det: f64 = (0..k).map(|i| 2.0 * chol[i * k + i].ln()).sum();
    lkj_log_norm(eta, k) + (eta - 1.0) * log_det
}

/// Log LKJ(eta) density evaluated on a Cholesky factor `L` of a correlation
/// matrix (flat row-major, unit-norm rows), with respect to the free
/// strictly-lower entries of `L`.
///
/// Equals `lkj_log_norm(eta, k) + sum_{m>=2} (k - m + 2 eta - 2) ln L_mm`;
/// the `k - m` exponent is the Jacobian of `Omega = L L'`.
pub fn lkj_chol_log_pdf(l: &[f64], k: usize, eta: f64) -> f64 {
    let mut lp = lkj_log_norm(eta, k);
    for m in 2..=k {
        lp += ((k - m) as f64 + 2.0 * eta - 2.0) * l[(m - 1) * k + (m - 1)].ln();
    }
    lp
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable inverse logit.
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood contribution of one observation, stable for
/// large `|eta|`.
pub fn bernoulli_logit_log_pmf(y: f64, eta: f64) -> f64 {
    // y*eta - ln(1 + exp(eta))
    y * eta - softplus(eta)
}

/// Cholesky factorization of a symmetric positive definite matrix given as a
/// flat row-major `k x k` slice. Returns the lower factor, or `None` if the
/// matrix is not positive definite.
pub fn cholesky(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for m in 0..j {
                s -= l[i * k + m] * l[j * k + m];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}
