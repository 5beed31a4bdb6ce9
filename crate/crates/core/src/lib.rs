//! Detection of separation and quasi-separation in binary-response regression
//! data, frequentist contrast fitters that exhibit the resulting maximum
//! likelihood pathology, and a Bayesian hierarchical logistic regression
//! (weakly informative Cauchy/half-Cauchy/LKJ priors, No-U-Turn sampling)
//! as the robust alternative.
//!
//! The model is `y ~ Bernoulli(p)` with `logit(p) = beta0 + X*beta + Z*u`,
//! where `u` are per-group deviations with covariance
//! `Sigma = diag(sigma) * Omega * diag(sigma)`.
//!
//! Pipeline: parse a mixed-model formula ([`formula`]), load and standardize
//! data onto the 0.5 scale and assemble design matrices ([`data`], [`design`]),
//! scan for separation ([`separation`], [`tree`]), fit by IRLS or Laplace
//! ([`mle`], [`laplace`]) or by NUTS over the posterior ([`posterior`],
//! [`sampler`]), and summarize with convergence diagnostics ([`diagnostics`]).
//! [`run`] orchestrates end-to-end runs; [`sim`] generates synthetic datasets
//! with controllable separation for verification.

pub mod data;
pub mod design;
pub mod diagnostics;
pub mod dist;
pub mod formula;
pub mod laplace;
pub mod mle;
pub mod posterior;
pub mod run;
pub mod sampler;
pub mod separation;
pub mod sim;
pub mod tree;
