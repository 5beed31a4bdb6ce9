//! Maximum-likelihood logistic regression by iteratively reweighted least
//! squares (Fisher scoring), with explicit detection of the divergence that
//! (quasi-)separated data induces.
//!
//! Under separation the likelihood has no interior maximum: each scoring
//! step pushes the separating coefficients further out, so the coefficient
//! norm grows without the update ever shrinking below tolerance. The fit
//! keeps the full per-iteration norm trajectory so that behavior is
//! diagnosable rather than a crash.

use crate::design::DesignMatrices;
use crate::dist::{bernoulli_logit_log_pmf, inv_logit};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_IRLS_TOL: f64 = 1e-8;
pub const DEFAULT_IRLS_MAX_ITER: usize = 100;

/// Coefficients are on the standardized predictor scale, in log-odds units;
/// the divergence threshold of 8 on that scale is a 16 log-odds swing across
/// a +/- 0.5 contrast, far outside the plausible range.
pub const DIVERGENCE_COEF_THRESHOLD: f64 = 8.0;

#[derive(Debug, Error)]
pub enum MleError {
    #[error("mle: design matrix (with intercept) is rank deficient: rank {rank} < {cols}")]
    RankDeficient { rank: usize, cols: usize },
    #[error("mle: tolerance must be positive")]
    BadTolerance,
    #[error("mle: divergence verdict needs at least 5 iterations, fit has {0}")]
    TooFewIterations(usize),
    #[error("mle: {0}")]
    UnsupportedStructure(String),
}

/// Result of an IRLS fit. `coefficients[0]` is the intercept; the remaining
/// entries follow the design's column order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Euclidean coefficient norm after each iteration.
    pub coef_norm_trajectory: Vec<f64>,
    pub deviance: f64,
    pub log_likelihood: f64,
}

impl GlmFit {
    pub fn max_abs_coefficient(&self) -> f64 {
        self.coefficients.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// Fisher scoring from beta = 0 until the coefficient-update max-norm drops
/// below `tol` or `max_iter` is reached. Weight underflow and singular
/// working systems are reported as non-convergence, never as a panic.
pub fn fit_glm_irls(
    design: &DesignMatrices,
    tol: f64,
    max_iter: usize,
) -> Result<GlmFit, MleError> {
    if tol <= 0.0 {
        return Err(MleError::BadTolerance);
    }
    let n = design.n;
    let p = design.p + 1;
    let mut x = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 0..design.p {
            x[(i, j + 1)] = design.x[i * design.p + j];
        }
    }
    let rank = x.clone().rank(1e-10);
    if rank < p {
        return Err(MleError::RankDeficient { rank, cols: p });
    }
    let y = DVector::<f64>::from_column_slice(&design.y);

    let mut beta = DVector::<f64>::zeros(p);
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // floor keeps the working system solvable when probabilities saturate
    let w_floor = 1e-10;

    for _ in 0..max_iter {
        let eta = &x * &beta;
        let mu = eta.map(inv_logit);
        let w: DVector<f64> = mu.map(|m| (m * (1.0 - m)).max(w_floor));
        // working response z = eta + (y - mu) / w
        let z = &eta
            + DVector::from_iterator(n, (0..n).map(|i| (y[i] - mu[i]) / w[i]));
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for i in 0..n {
            let wi = w[i];
            for j in 0..p {
                let xw = x[(i, j)] * wi;
                xtwz[j] += xw * z[i];
                for k in j..p {
                    xtwx[(j, k)] += xw * x[(i, k)];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                xtwx[(j, k)] = xtwx[(k, j)];
            }
        }
        let Some(solution) = xtwx.lu().solve(&xtwz) else {
            iterations += 1;
            trajectory.push(beta.norm());
            break;
        };
        if solution.iter().any(|v| !v.is_finite()) {
            iterations += 1;
            trajectory.push(beta.norm());
            break;
        }
        let update_max = (&solution - &beta).amax();
        beta = solution;
        iterations += 1;
        trajectory.push(beta.norm());
        if update_max < tol {
            converged = true;
            break;
        }
    }

    let eta = &x * &beta;
    let log_likelihood: f64 = (0..n)
        .map(|i| bernoulli_logit_log_pmf(y[i], eta[i]))
        .sum();

    // standard errors from the inverse Fisher information at the estimate
    let mu = eta.map(inv_logit);
    let w: DVector<f64> = mu.map(|m| (m * (1.0 - m)).max(w_floor));
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        for j in 0..p {
            for k in 0..p {
                xtwx[(j, k)] += x[(i, j)] * w[i] * x[(i, k)];
            }
        }
    }
    let std_errors: Vec<f64> = match xtwx.try_inverse() {
        Some(inv) => (0..p).map(|j| inv[(j, j)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; p],
    };

    let mut names = vec!["(Intercept)".to_string()];
    names.extend(design.x_names.iter().cloned());
    Ok(GlmFit {
        names,
        coefficients: beta.iter().cloned().collect(),
        std_errors,
        iterations,
        converged,
        coef_norm_trajectory: trajectory,
        deviance: -2.0 * log_likelihood,
        log_likelihood,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceVerdict {
    Converged,
    /// Not converged, coefficients past the threshold and still growing.
    Diverging,
    /// Not converged but not growing either (for example, out of iterations).
    Stalled,
}

/// Classify a finished fit: `Diverging` means not converged, some
/// |coefficient| > 8, and a coefficient norm that rose monotonically over
/// the final 5 iterations.
pub fn detect_mle_divergence(fit: &GlmFit) -> Result<DivergenceVerdict, MleError> {
    if fit.iterations < 5 {
        return Err(MleError::TooFewIterations(fit.iterations));
    }
    if fit.converged {
        return Ok(DivergenceVerdict::Converged);
    }
    let t = &fit.coef_norm_trajectory;
    let tail = &t[t.len() - 5..];
    let growing = tail.windows(2).all(|w| w[1] > w[0]);
    if fit.max_abs_coefficient() > DIVERGENCE_COEF_THRESHOLD && growing {
        Ok(DivergenceVerdict::Diverging)
    } else {
        Ok(DivergenceVerdict::Stalled)
    }
}
