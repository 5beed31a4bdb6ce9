//! Synthetic-data generator for verification: draws covariates, assigns
//! balanced factor levels and group memberships, simulates group deviations
//! `u ~ MVN(0, Sigma)` and responses `y ~ Bernoulli(logit^-1(eta))`, then
//! applies separation-injection rules that force chosen cells to a fixed
//! response.
//!
//! The linear predictor uses the same standardized design the fitters see,
//! so the generating coefficients live on the standardized scale and are
//! directly comparable to estimates. A fixed seed yields a byte-identical
//! CSV.

use crate::data::{schema_from_pairs, Column, ColumnKind, ColumnSchema, Dataset};
use crate::design::{build_design, standardize, DesignMatrices};
use crate::dist::{cholesky, inv_logit};
use crate::formula::{parse_formula, validate_spec, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateGen {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorGen {
    pub name: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupGen {
    pub name: String,
    pub count: usize,
}

/// Generating covariance of one random block: SDs plus a correlation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockTruth {
    pub group: String,
    pub sigma: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
}

/// Force `value` on every row matching all present conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Injection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_level: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_level: Option<String>,
    pub value: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub n: usize,
    pub formula: String,
    #[serde(default)]
    pub covariates: Vec<CovariateGen>,
    #[serde(default)]
    pub factors: Vec<FactorGen>,
    pub groups: Vec<GroupGen>,
    pub beta0: f64,
    /// One coefficient per design column, standardized scale.
    pub beta: Vec<f64>,
    pub blocks: Vec<BlockTruth>,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("sim: {0}")]
    BadScenario(String),
    #[error("sim: formula: {0}")]
    Formula(#[from] crate::formula::FormulaError),
    #[error("sim: data: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("sim: injections overlap on row {row}")]
    InjectionOverlap { row: usize },
    #[error("sim: cannot write `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::BadScenario("n must be positive".into()));
        }
        for b in &self.blocks {
            let q = b.sigma.len();
            if b.omega.len() != q || b.omega.iter().any(|r| r.len() != q) {
                return Err(SimError::BadScenario(format!(
                    "block `{}`: omega must be {q} x {q}",
                    b.group
                )));
            }
            let flat: Vec<f64> = b.omega.iter().flatten().cloned().collect();
            for i in 0..q {
                if (b.omega[i][i] - 1.0).abs() > 1e-12 {
                    return Err(SimError::BadScenario(format!(
                        "block `{}`: omega diagonal must be 1",
                        b.group
                    )));
                }
                for j in 0..q {
                    if (b.omega[i][j] - b.omega[j][i]).abs() > 1e-12 {
                        return Err(SimError::BadScenario(format!(
                            "block `{}`: omega must be symmetric",
                            b.group
                        )));
                    }
                }
            }
            if cholesky(&flat, q).is_none() {
                return Err(SimError::BadScenario(format!(
                    "block `{}`: omega is not positive definite",
                    b.group
                )));
            }
            if b.sigma.iter().any(|s| *s < 0.0) {
                return Err(SimError::BadScenario(format!(
                    "block `{}`: sigma must be non-negative",
                    b.group
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: SimScenario =
            serde_json::from_str(text).map_err(|e| SimError::BadScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

/// Everything the simulation produced, in memory.
pub struct SimProducts {
    pub dataset: Dataset,
    pub schema: ColumnSchema,
    pub spec: ModelSpec,
    pub design: DesignMatrices,
    pub truth: TruthRecord,
    pub csv_text: String,
}

/// Generating parameters echoed for verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scenario: SimScenario,
    pub seed: u64,
    pub x_names: Vec<String>,
    /// Simulated group deviations per block (group-major).
    pub u: Vec<Vec<f64>>,
}

/// Run the generator. Factor levels cycle within contiguous group chunks so
/// every group sees every level; covariates are normal draws.
pub fn simulate_scenario(scenario: &SimScenario, seed: u64) -> Result<SimProducts, SimError> {
    scenario.validate()?;
    let n = scenario.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // raw columns
    let mut columns: Vec<(String, Column)> = Vec::new();
    let mut schema_pairs: Vec<(String, ColumnKind)> = Vec::new();
    schema_pairs.push((
        "y".to_string(),
        ColumnKind::Response { levels: None },
    ));
    for cg in &scenario.covariates {
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cg.mean + cg.sd * z
            })
            .collect();
        columns.push((cg.name.clone(), Column::Covariate(values)));
        schema_pairs.push((cg.name.clone(), ColumnKind::Covariate));
    }
    for fg in &scenario.factors {
        let k = fg.levels.len();
        let codes: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
        columns.push((
            fg.name.clone(),
            Column::Factor {
                codes,
                levels: fg.levels.clone(),
                ordered: false,
            },
        ));
        schema_pairs.push((
            fg.name.clone(),
            ColumnKind::Factor {
                levels: fg.levels.clone(),
            },
        ));
    }
    for gg in &scenario.groups {
        let levels: Vec<String> = (0..gg.count).map(|i| format!("{}{}", gg.name, i + 1)).collect();
        let codes: Vec<u32> = (0..n).map(|i| (i * gg.count / n) as u32).collect();
        columns.push((
            gg.name.clone(),
            Column::Factor {
                codes,
                levels: levels.clone(),
                ordered: false,
            },
        ));
        schema_pairs.push((gg.name.clone(), ColumnKind::Factor { levels }));
    }

    let pairs_ref: Vec<(&str, ColumnKind)> = schema_pairs
        .iter()
        .map(|(n, k)| (n.as_str(), k.clone()))
        .collect();
    let schema = schema_from_pairs(&pairs_ref);

    let spec = parse_formula(&scenario.formula)?;
    validate_spec(&spec, &schema)?;

    // placeholder response for design assembly; X and Z do not depend on y
    let mut col_map: BTreeMap<String, Column> = columns
        .iter()
        .map(|(n, c)| (n.clone(), c.clone()))
        .collect();
    col_map.insert("y".to_string(), Column::Response(vec![0u8; n]));
    let dataset = Dataset {
        n,
        columns: col_map,
        response: "y".to_string(),
        dropped_rows: 0,
        missing_by_column: Vec::new(),
    };
    let scaling = standardize(&dataset, &spec)?;
    let mut design = build_design(&dataset, &spec, &scaling)?;
    if scenario.beta.len() != design.p {
        return Err(SimError::BadScenario(format!(
            "beta has {} entries but the design has {} columns ({:?})",
            scenario.beta.len(),
            design.p,
            design.x_names
        )));
    }
    if scenario.blocks.len() != design.blocks.len() {
        return Err(SimError::BadScenario(format!(
            "scenario lists {} blocks, formula produces {}",
            scenario.blocks.len(),
            design.blocks.len()
        )));
    }

    // group deviations
    let mut u_all: Vec<Vec<f64>> = Vec::with_capacity(design.blocks.len());
    for (bt, zb) in scenario.blocks.iter().zip(&design.blocks) {
        let q = zb.q;
        if bt.group != zb.group {
            return Err(SimError::BadScenario(format!(
                "scenario block `{}` does not match formula block `{}`",
                bt.group, zb.group
            )));
        }
        if bt.sigma.len() != q {
            return Err(SimError::BadScenario(format!(
                "block `{}`: sigma has {} entries, design has q = {q}",
                bt.group,
                bt.sigma.len()
            )));
        }
        let flat: Vec<f64> = bt.omega.iter().flatten().cloned().collect();
        let l = cholesky(&flat, q).expect("validated omega");
        let g = zb.group_levels.len();
        let mut u = vec![0.0; g * q];
        for gi in 0..g {
            let z: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
            for m in 0..q {
                let mut s = 0.0;
                for k in 0..=m {
                    s += l[m * q + k] * z[k];
                }
                u[gi * q + m] = bt.sigma[m] * s;
            }
        }
        u_all.push(u);
    }

    // responses
    let mut y = vec![0u8; n];
    for i in 0..n {
        let mut eta = scenario.beta0;
        for j in 0..design.p {
            eta += design.x[i * design.p + j] * scenario.beta[j];
        }
        for (u, zb) in u_all.iter().zip(&design.blocks) {
            let g = zb.group_idx[i];
            for m in 0..zb.q {
                eta += zb.z[i * zb.q + m] * u[g * zb.q + m];
            }
        }
        y[i] = (rng.random::<f64>() < inv_logit(eta)) as u8;
    }

    // injections
    if !scenario.injections.is_empty() {
        let lookup_factor = |name: &str| -> Option<(&[u32], &[String])> {
            dataset.factor(name)
        };
        for i in 0..n {
            let mut matched: Option<usize> = None;
            for (ri, rule) in scenario.injections.iter().enumerate() {
                let mut ok = true;
                if let (Some(col), Some(level)) = (&rule.group_column, &rule.group_level) {
                    match lookup_factor(col) {
                        Some((codes, levels)) => {
                            ok &= levels.get(codes[i] as usize).map(|l| l == level) == Some(true);
                        }
                        None => ok = false,
                    }
                }
                if let (Some(col), Some(level)) = (&rule.factor, &rule.factor_level) {
                    match lookup_factor(col) {
                        Some((codes, levels)) => {
                            ok &= levels.get(codes[i] as usize).map(|l| l == level) == Some(true);
                        }
                        None => ok = false,
                    }
                }
                if ok {
                    if matched.is_some() {
                        return Err(SimError::InjectionOverlap { row: i });
                    }
                    matched = Some(ri);
                }
            }
            if let Some(ri) = matched {
                y[i] = scenario.injections[ri].value;
            }
        }
    }

    // final dataset and CSV text
    let mut final_columns = dataset.columns.clone();
    final_columns.insert("y".to_string(), Column::Response(y.clone()));
    let dataset = Dataset {
        n,
        columns: final_columns,
        response: "y".to_string(),
        dropped_rows: 0,
        missing_by_column: Vec::new(),
    };
    design.y = y.iter().map(|&v| v as f64).collect();

    let header: Vec<String> = std::iter::once("y".to_string())
        .chain(columns.iter().map(|(n, _)| n.clone()))
        .collect();
    let mut csv_text = header.join(",");
    csv_text.push('\n');
    for i in 0..n {
        let mut row = vec![y[i].to_string()];
        for (_, col) in &columns {
            match col {
                Column::Covariate(v) => row.push(format!("{}", v[i])),
                Column::Factor { codes, levels, .. } => {
                    row.push(levels[codes[i] as usize].clone())
                }
                Column::Response(_) => unreachable!("y is not in the predictor columns"),
            }
        }
        csv_text.push_str(&row.join(","));
        csv_text.push('\n');
    }

    let truth = TruthRecord {
        scenario: scenario.clone(),
        seed,
        x_names: design.x_names.clone(),
        u: u_all,
    };

    Ok(SimProducts {
        dataset,
        schema,
        spec,
        design,
        truth,
        csv_text,
    })
}

/// Paths of the files a simulation writes.
pub struct SimFiles {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub truth: PathBuf,
}

/// Generate and write `data.csv`, `schema.json` and `truth.json` into `dir`.
pub fn write_simulated_dataset(
    scenario: &SimScenario,
    seed: u64,
    dir: &Path,
) -> Result<(SimProducts, SimFiles), SimError> {
    let products = simulate_scenario(scenario, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| SimError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let files = SimFiles {
        data: dir.join("data.csv"),
        schema: dir.join("schema.json"),
        truth: dir.join("truth.json"),
    };
    let write = |path: &Path, text: &str| -> Result<(), SimError> {
        std::fs::write(path, text).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    write(&files.data, &products.csv_text)?;
    write(
        &files.schema,
        &serde_json::to_string_pretty(&products.schema).expect("schema serializes"),
    )?;
    write(
        &files.truth,
        &serde_json::to_string_pretty(&products.truth).expect("truth serializes"),
    )?;
    Ok((products, files))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separation::{scan_grouped, SeparationClass};

    fn basic_scenario() -> SimScenario {
        SimScenario {
            name: "basic".into(),
            n: 2000,
            formula: "y ~ x + cond + (1 + cond | g)".into(),
            covariates: vec![CovariateGen {
                name: "x".into(),
                mean: 0.0,
                sd: 2.0,
            }],
            factors: vec![FactorGen {
                name: "cond".into(),
                levels: vec!["A".into(), "B".into()],
            }],
            groups: vec![GroupGen {
                name: "g".into(),
                count: 20,
            }],
            beta0: 0.0,
            beta: vec![0.0, 0.0],
            blocks: vec![BlockTruth {
                group: "g".into(),
                sigma: vec![0.0, 0.0],
                omega: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            }],
            injections: Vec::new(),
        }
    }

    #[test]
    fn null_scenario_gives_half_proportion() {
        let products = simulate_scenario(&basic_scenario(), 42).unwrap();
        let prop = products.design.y.iter().sum::<f64>() / products.design.y.len() as f64;
        // Binomial(2000, 0.5): 4 sigma is about 0.045
        assert!((prop - 0.5).abs() < 0.05, "proportion {prop}");
    }

    #[test]
    fn injected_group_cells_are_pure() {
        let mut scenario = basic_scenario();
        scenario.injections = vec![Injection {
            group_column: Some("g".into()),
            group_level: Some("g3".into()),
            factor: None,
            factor_level: None,
            value: 1,
        }];
        let products = simulate_scenario(&scenario, 7).unwrap();
        let units = scan_grouped(&products.dataset, &products.spec);
        let g3 = units.iter().find(|u| u.provenance == "g=g3").unwrap();
        assert!(
            g3.class != SeparationClass::Overlap,
            "g3 must contain pure cells"
        );
        assert!(g3.cells.iter().all(|c| c.pure));
    }

    #[test]
    fn fixed_seed_reproduces_csv_bytes() {
        let a = simulate_scenario(&basic_scenario(), 123).unwrap();
        let b = simulate_scenario(&basic_scenario(), 123).unwrap();
        assert_eq!(a.csv_text, b.csv_text);
        let c = simulate_scenario(&basic_scenario(), 124).unwrap();
        assert_ne!(a.csv_text, c.csv_text);
    }

    #[test]
    fn overlapping_injections_are_rejected() {
        let mut scenario = basic_scenario();
        scenario.injections = vec![
            Injection {
                group_column: Some("g".into()),
                group_level: Some("g3".into()),
                factor: None,
                factor_level: None,
                value: 1,
            },
            Injection {
                group_column: None,
                group_level: None,
                factor: Some("cond".into()),
                factor_level: Some("A".into()),
                value: 0,
            },
        ];
        assert!(matches!(
            simulate_scenario(&scenario, 1),
            Err(SimError::InjectionOverlap { .. })
        ));
    }

    #[test]
    fn beta_length_mismatch_is_caught() {
        let mut scenario = basic_scenario();
        scenario.beta = vec![0.0];
        assert!(matches!(
            simulate_scenario(&scenario, 1),
            Err(SimError::BadScenario(_))
        ));
    }

    #[test]
    fn bad_omega_is_caught() {
        let mut scenario = basic_scenario();
        scenario.blocks[0].omega = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            scenario.validate(),
            Err(SimError::BadScenario(_))
        ));
    }

    #[test]
    fn scenario_json_roundtrip() {
        let scenario = basic_scenario();
        let text = serde_json::to_string_pretty(&scenario).unwrap();
        let back = SimScenario::from_json(&text).unwrap();
        assert_eq!(back.n, scenario.n);
        assert_eq!(back.formula, scenario.formula);
    }
}
