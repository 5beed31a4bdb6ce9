//! Standardization of predictors onto the 0.5 scale and assembly of the
//! model matrices `y`, `X`, and per-block `Z`.
//!
//! Covariates are centered and divided by twice their sample standard
//! deviation (n-1 denominator), so the transformed column has mean 0 and
//! SD 0.5. Unordered factors get sum contrasts with deviations of +/- 0.5
//! (first declared level positive, last declared level carries -0.5).
//! Ordered factors get orthogonal polynomial contrasts on equally spaced
//! level codes, each column rescaled so its observed SD is 0.5. Interaction
//! columns are elementwise products of their parents, which automatically
//! puts higher-order terms on smaller scales (two binary factors yield
//! +/- 0.25 products).

use crate::data::{Column, DataError, Dataset};
use crate::formula::{ModelSpec, Term};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Centering/scaling of one covariate: `x -> (x - center) / divisor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateScale {
    pub center: f64,
    /// Twice the sample standard deviation.
    pub divisor: f64,
}

/// Contrast encoding of one factor: `contrasts[c][level]` is the value of
/// contrast column `c` for a row at that level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEncoding {
    pub levels: Vec<String>,
    pub ordered: bool,
    pub column_names: Vec<String>,
    pub contrasts: Vec<Vec<f64>>,
}

/// Everything needed to reproduce the predictor transformation, serialized
/// into fit reports so natural-scale back-transformation is reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub covariates: BTreeMap<String, CovariateScale>,
    pub factors: BTreeMap<String, FactorEncoding>,
}

impl ScalingRecord {
    pub fn apply_covariate(&self, name: &str, x: f64) -> Option<f64> {
        let s = self.covariates.get(name)?;
        Some((x - s.center) / s.divisor)
    }

    pub fn invert_covariate(&self, name: &str, v: f64) -> Option<f64> {
        let s = self.covariates.get(name)?;
        Some(v * s.divisor + s.center)
    }
}

fn sample_mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Orthonormal polynomial contrasts on level codes `1..=k`: `k - 1` columns
/// of length `k`, unit norm, sign fixed so the last level is positive.
fn poly_contrasts(k: usize) -> Vec<Vec<f64>> {
    let center = (k as f64 + 1.0) / 2.0;
    let x: Vec<f64> = (1..=k).map(|i| i as f64 - center).collect();
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (k as f64).sqrt(); k]];
    let mut out = Vec::with_capacity(k - 1);
    for d in 1..k {
        let mut v: Vec<f64> = x.iter().map(|xi| xi.powi(d as i32)).collect();
        // two Gram-Schmidt sweeps for stability
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        if v[k - 1] < 0.0 {
            for vi in v.iter_mut() {
                *vi = -*vi;
            }
        }
        basis.push(v.clone());
        out.push(v);
    }
    out
}

fn poly_column_name(idx: usize) -> String {
    match idx {
        0 => ".L".to_string(),
        1 => ".Q".to_string(),
        2 => ".C".to_string(),
        i => format!(".P{}", i + 1),
    }
}

/// Compute the [`ScalingRecord`] for every predictor the spec references.
pub fn standardize(dataset: &Dataset, spec: &ModelSpec) -> Result<ScalingRecord, DataError> {
    let mut record = ScalingRecord::default();
    for var in spec.predictor_vars() {
        match dataset.columns.get(&var) {
            Some(Column::Covariate(values)) => {
                let (mean, sd) = sample_mean_sd(values);
                if sd <= 0.0 {
                    return Err(DataError::ZeroVariance { column: var });
                }
                record.covariates.insert(
                    var,
                    CovariateScale {
                        center: mean,
                        divisor: 2.0 * sd,
                    },
                );
            }
            Some(Column::Factor {
                codes,
                levels,
                ordered,
            }) => {
                let mut observed = vec![false; levels.len()];
                for &c in codes {
                    observed[c as usize] = true;
                }
                if observed.iter().filter(|&&o| o).count() < 2 {
                    return Err(DataError::SingleObservedLevel { column: var });
                }
                let k = levels.len();
                let (contrasts, column_names) = if *ordered {
                    let base = poly_contrasts(k);
                    let mut contrasts = Vec::with_capacity(k - 1);
                    let mut names = Vec::with_capacity(k - 1);
                    for (c, col) in base.into_iter().enumerate() {
                        let assigned: Vec<f64> =
                            codes.iter().map(|&code| col[code as usize]).collect();
                        let (_, sd) = sample_mean_sd(&assigned);
                        if sd <= 0.0 {
                            return Err(DataError::ZeroVariance {
                                column: format!("{var}{}", poly_column_name(c)),
                            });
                        }
                        let f = 0.5 / sd;
                        contrasts.push(col.into_iter().map(|v| v * f).collect());
                        names.push(poly_column_name(c));
                    }
                    (contrasts, names)
                } else {
                    // sum contrasts scaled to +/- 0.5; column c is +0.5 at
                    // level c, -0.5 at the last level, 0 elsewhere
                    let mut contrasts = Vec::with_capacity(k - 1);
                    let mut names = Vec::with_capacity(k - 1);
                    for c in 0..k - 1 {
                        let mut col = vec![0.0; k];
                        col[c] = 0.5;
                        col[k - 1] = -0.5;
                        contrasts.push(col);
                        names.push(format!(".{}", levels[c]));
                    }
                    (contrasts, names)
                };
                record.factors.insert(
                    var,
                    FactorEncoding {
                        levels: levels.clone(),
                        ordered: *ordered,
                        column_names,
                        contrasts,
                    },
                );
            }
            Some(Column::Response(_)) => {
                return Err(DataError::WrongColumnType {
                    column: var,
                    expected: "predictor".to_string(),
                })
            }
            None => {
                return Err(DataError::WrongColumnType {
                    column: var,
                    expected: "column present in the dataset".to_string(),
                })
            }
        }
    }
    Ok(record)
}

/// One random-effects block: the per-row group design and group membership.
#[derive(Debug, Clone)]
pub struct ZBlock {
    pub group: String,
    pub group_levels: Vec<String>,
    pub coef_names: Vec<String>,
    pub q: usize,
    /// Row-major `n x q`.
    pub z: Vec<f64>,
    pub group_idx: Vec<usize>,
}

/// Response, fixed design (intercept excluded) and random-effects blocks.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub y: Vec<f64>,
    /// Row-major `n x p`.
    pub x: Vec<f64>,
    pub x_names: Vec<String>,
    /// Per X column: product of the covariate divisors (2 sd) of the
    /// column's term, for natural-unit back-transformation. 1 for columns
    /// built from factors alone.
    pub x_natural_divisor: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub blocks: Vec<ZBlock>,
    pub scaling: ScalingRecord,
}

impl DesignMatrices {
    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn x_column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.x[i * self.p + j]).collect()
    }
}

/// Standardized columns for one variable (a covariate yields one column, a
/// k-level factor k-1 contrast columns).
fn encode_var(
    dataset: &Dataset,
    scaling: &ScalingRecord,
    var: &str,
) -> Result<Vec<(String, Vec<f64>)>, DataError> {
    if let Some(s) = scaling.covariates.get(var) {
        let values = dataset
            .covariate(var)
            .ok_or_else(|| DataError::WrongColumnType {
                column: var.to_string(),
                expected: "covariate".to_string(),
            })?;
        let col = values.iter().map(|&x| (x - s.center) / s.divisor).collect();
        return Ok(vec![(var.to_string(), col)]);
    }
    if let Some(enc) = scaling.factors.get(var) {
        let (codes, _) = dataset
            .factor(var)
            .ok_or_else(|| DataError::WrongColumnType {
                column: var.to_string(),
                expected: "factor".to_string(),
            })?;
        return Ok(enc
            .contrasts
            .iter()
            .zip(&enc.column_names)
            .map(|(contrast, suffix)| {
                let col: Vec<f64> = codes.iter().map(|&c| contrast[c as usize]).collect();
                (format!("{var}{suffix}"), col)
            })
            .collect());
    }
    Err(DataError::WrongColumnType {
        column: var.to_string(),
        expected: "standardized predictor".to_string(),
    })
}

/// Columns of one term: the cartesian product of its variables' encodings,
/// values multiplied elementwise.
fn term_columns(
    dataset: &Dataset,
    scaling: &ScalingRecord,
    term: &Term,
) -> Result<Vec<(String, Vec<f64>)>, DataError> {
    let mut cols: Vec<(String, Vec<f64>)> = vec![(String::new(), vec![1.0; dataset.n])];
    for var in term.vars() {
        let enc = encode_var(dataset, scaling, var)?;
        let mut next = Vec::with_capacity(cols.len() * enc.len());
        for (name, values) in &cols {
            for (ename, evalues) in &enc {
                let combined_name = if name.is_empty() {
                    ename.clone()
                } else {
                    format!("{name}:{ename}")
                };
                let combined: Vec<f64> = values
                    .iter()
                    .zip(evalues)
                    .map(|(a, b)| a * b)
                    .collect();
                next.push((combined_name, combined));
            }
        }
        cols = next;
    }
    Ok(cols)
}

/// Build design matrices from a dataset, spec and scaling record.
pub fn build_design(
    dataset: &Dataset,
    spec: &ModelSpec,
    scaling: &ScalingRecord,
) -> Result<DesignMatrices, DataError> {
    let n = dataset.n;
    let y: Vec<f64> = dataset.response_values().iter().map(|&v| v as f64).collect();

    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut x_natural_divisor: Vec<f64> = Vec::new();
    for term in &spec.fixed_terms {
        let cols = term_columns(dataset, scaling, term)?;
        let divisor: f64 = term
            .vars()
            .iter()
            .filter_map(|v| scaling.covariates.get(v))
            .map(|s| s.divisor)
            .product();
        x_natural_divisor.extend(std::iter::repeat(divisor).take(cols.len()));
        columns.extend(cols);
    }
    let p = columns.len();
    let mut x = vec![0.0; n * p];
    let mut x_names = Vec::with_capacity(p);
    for (j, (name, values)) in columns.into_iter().enumerate() {
        x_names.push(name);
        for i in 0..n {
            x[i * p + j] = values[i];
        }
    }

    let mut blocks = Vec::with_capacity(spec.random_blocks.len());
    for rb in &spec.random_blocks {
        let (codes, levels) = dataset
            .factor(&rb.group)
            .ok_or_else(|| DataError::WrongColumnType {
                column: rb.group.clone(),
                expected: "grouping factor".to_string(),
            })?;
        // observed levels in declared order
        let mut seen = vec![false; levels.len()];
        for &c in codes {
            seen[c as usize] = true;
        }
        let group_levels: Vec<String> = levels
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| s)
            .map(|(l, _)| l.clone())
            .collect();
        let mut remap = vec![usize::MAX; levels.len()];
        let mut next = 0usize;
        for (c, &s) in seen.iter().enumerate() {
            if s {
                remap[c] = next;
                next += 1;
            }
        }
        let group_idx: Vec<usize> = codes.iter().map(|&c| remap[c as usize]).collect();

        let mut zcols: Vec<(String, Vec<f64>)> = Vec::new();
        if rb.intercept {
            zcols.push(("(Intercept)".to_string(), vec![1.0; n]));
        }
        for term in &rb.slopes {
            zcols.extend(term_columns(dataset, scaling, term)?);
        }
        let q = zcols.len();
        let mut z = vec![0.0; n * q];
        let mut coef_names = Vec::with_capacity(q);
        for (j, (name, values)) in zcols.into_iter().enumerate() {
            coef_names.push(name);
            for i in 0..n {
                z[i * q + j] = values[i];
            }
        }
        blocks.push(ZBlock {
            group: rb.group.clone(),
            group_levels,
            coef_names,
            q,
            z,
            group_idx,
        });
    }

    Ok(DesignMatrices {
        y,
        x,
        x_names,
        x_natural_divisor,
        n,
        p,
        blocks,
        scaling: scaling.clone(),
    })
}

/// Identifiability of one random block: is there at least one group whose
/// rows span the block's coefficient space?
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockIdentifiability {
    pub group: String,
    pub q: usize,
    pub n_groups: usize,
    pub full_rank_group: Option<String>,
    pub ok: bool,
}

/// Result of the two identifiability conditions: more observations than
/// parameters, and a full-rank within-group design for every block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub n: usize,
    pub fixed_parameters: usize,
    pub random_coefficients: usize,
    pub variance_parameters: usize,
    pub total_parameters: usize,
    pub observations_exceed_parameters: bool,
    pub blocks: Vec<BlockIdentifiability>,
    pub pass: bool,
}

/// Count parameters and probe per-group rank; never fails, always reports.
pub fn check_identifiability(design: &DesignMatrices) -> IdentifiabilityReport {
    let fixed = design.p + 1; // intercept
    let mut random_coefficients = 0usize;
    let mut variance_parameters = 0usize;
    let mut blocks = Vec::with_capacity(design.blocks.len());

    for block in &design.blocks {
        let g = block.group_levels.len();
        let q = block.q;
        random_coefficients += q * g;
        variance_parameters += q + q * (q - 1) / 2;

        let mut full_rank_group = None;
        for gi in 0..g {
            let rows: Vec<usize> = (0..design.n)
                .filter(|&i| block.group_idx[i] == gi)
                .collect();
            if rows.len() < q {
                continue;
            }
            let mut m = DMatrix::<f64>::zeros(rows.len(), q);
            for (r, &i) in rows.iter().enumerate() {
                for c in 0..q {
                    m[(r, c)] = block.z[i * q + c];
                }
            }
            if m.rank(1e-9) == q {
                full_rank_group = Some(block.group_levels[gi].clone());
                break;
            }
        }
        blocks.push(BlockIdentifiability {
            group: block.group.clone(),
            q,
            n_groups: g,
            ok: full_rank_group.is_some(),
            full_rank_group,
        });
    }

    let total = fixed + random_coefficients + variance_parameters;
    let obs_ok = design.n > total;
    let pass = obs_ok && blocks.iter().all(|b| b.ok);
    IdentifiabilityReport {
        n: design.n,
        fixed_parameters: fixed,
        random_coefficients,
        variance_parameters,
        total_parameters: total,
        observations_exceed_parameters: obs_ok,
        blocks,
        pass,
    }
}
