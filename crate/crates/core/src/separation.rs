//! Classification of the response distribution as separation,
//! quasi-separation, or overlap.
//!
//! A scanned unit (a factor, a covariate, or one group of a random block) is
//! split into cells; a cell is *pure* when its observed success proportion is
//! exactly 0 or 1. A unit shows separation when every non-empty cell is pure,
//! quasi-separation when at least one but not all are, and overlap when none
//! are. Empty cells are reported but excluded from classification. The
//! dataset verdict is the worst classification found.

use crate::data::{Column, Dataset};
use crate::formula::ModelSpec;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeparationClass {
    Overlap,
    QuasiSeparation,
    Separation,
}

impl fmt::Display for SeparationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SeparationClass::Overlap => "Overlap",
            SeparationClass::QuasiSeparation => "QuasiSeparation",
            SeparationClass::Separation => "Separation",
        };
        f.write_str(s)
    }
}

/// One scanned cell: a factor level, a covariate side, or a group-by-level
/// combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub count: usize,
    pub successes: usize,
    /// Success proportion; `None` for an empty cell.
    pub proportion: Option<f64>,
    pub pure: bool,
}

impl CellReport {
    fn new(label: String, count: usize, successes: usize) -> Self {
        let proportion = if count > 0 {
            Some(successes as f64 / count as f64)
        } else {
            None
        };
        let pure = count > 0 && (successes == 0 || successes == count);
        CellReport {
            label,
            count,
            successes,
            proportion,
            pure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Factor,
    Covariate,
    Group,
}

/// Classification of one scanned unit with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitReport {
    pub kind: UnitKind,
    /// Which predictor or group produced this unit.
    pub provenance: String,
    pub cells: Vec<CellReport>,
    pub class: SeparationClass,
    /// Witnessing threshold for covariate units.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

/// All scanned units plus the dataset-level verdict (worst class found).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationReport {
    pub units: Vec<UnitReport>,
    pub verdict: SeparationClass,
}

impl SeparationReport {
    pub fn from_units(units: Vec<UnitReport>) -> Self {
        let verdict = units
            .iter()
            .map(|u| u.class)
            .max()
            .unwrap_or(SeparationClass::Overlap);
        SeparationReport { units, verdict }
    }
}

fn classify_cells(cells: &[CellReport]) -> SeparationClass {
    let scanned: Vec<&CellReport> = cells.iter().filter(|c| c.count > 0).collect();
    if scanned.is_empty() {
        return SeparationClass::Overlap;
    }
    let pure = scanned.iter().filter(|c| c.pure).count();
    if pure == scanned.len() {
        SeparationClass::Separation
    } else if pure > 0 {
        SeparationClass::QuasiSeparation
    } else {
        SeparationClass::Overlap
    }
}

/// Per-level proportions of one factor.
pub fn scan_factor(dataset: &Dataset, factor: &str) -> Option<UnitReport> {
    let (codes, levels) = dataset.factor(factor)?;
    let y = dataset.response_values();
    let mut counts = vec![0usize; levels.len()];
    let mut successes = vec![0usize; levels.len()];
    for (i, &c) in codes.iter().enumerate() {
        counts[c as usize] += 1;
        successes[c as usize] += y[i] as usize;
    }
    let cells: Vec<CellReport> = levels
        .iter()
        .enumerate()
        .map(|(l, label)| CellReport::new(label.clone(), counts[l], successes[l]))
        .collect();
    let class = classify_cells(&cells);
    Some(UnitReport {
        kind: UnitKind::Factor,
        provenance: factor.to_string(),
        cells,
        class,
        threshold: None,
    })
}

/// Threshold scan of one covariate. Thresholds are midpoints between
/// consecutive distinct sorted values; sides are `(<= t, > t)`. Separation:
/// some threshold leaves both sides pure; quasi-separation: some threshold
/// leaves exactly one side pure; overlap otherwise. The witnessing threshold
/// is the smallest one, with both-sides-pure witnesses preferred.
pub fn scan_covariate(dataset: &Dataset, covariate: &str) -> Option<UnitReport> {
    let values = dataset.covariate(covariate)?;
    let y = dataset.response_values();
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());

    let total: usize = y.iter().map(|&v| v as usize).sum();
    // prefix[k] = successes among the k smallest rows
    let mut best_sep: Option<(f64, usize, usize)> = None; // threshold, left n, left succ
    let mut best_quasi: Option<(f64, usize, usize)> = None;
    let mut left_succ = 0usize;
    for k in 1..n {
        left_succ += y[order[k - 1]] as usize;
        let (lo, hi) = (values[order[k - 1]], values[order[k]]);
        if lo == hi {
            continue;
        }
        let threshold = 0.5 * (lo + hi);
        let right_succ = total - left_succ;
        let left_pure = left_succ == 0 || left_succ == k;
        let right_pure = right_succ == 0 || right_succ == n - k;
        if left_pure && right_pure {
            if best_sep.is_none() {
                best_sep = Some((threshold, k, left_succ));
            }
        } else if (left_pure || right_pure) && best_quasi.is_none() {
            best_quasi = Some((threshold, k, left_succ));
        }
    }

    let (class, witness) = if let Some(w) = best_sep {
        (SeparationClass::Separation, Some(w))
    } else if let Some(w) = best_quasi {
        (SeparationClass::QuasiSeparation, Some(w))
    } else {
        (SeparationClass::Overlap, None)
    };

    let (cells, threshold) = match witness {
        Some((t, k, ls)) => (
            vec![
                CellReport::new(format!("{covariate} <= {t}"), k, ls),
                CellReport::new(format!("{covariate} > {t}"), n - k, total - ls),
            ],
            Some(t),
        ),
        None => (
            vec![CellReport::new("all rows".to_string(), n, total)],
            None,
        ),
    };
    Some(UnitReport {
        kind: UnitKind::Covariate,
        provenance: covariate.to_string(),
        cells,
        class,
        threshold,
    })
}

/// For every random block, cross each group level with the levels of the
/// block's slope factors and classify per group. Blocks without factor
/// slopes get one cell per group.
pub fn scan_grouped(dataset: &Dataset, spec: &ModelSpec) -> Vec<UnitReport> {
    let y = dataset.response_values();
    let mut units = Vec::new();
    for block in &spec.random_blocks {
        let Some((group_codes, group_levels)) = dataset.factor(&block.group) else {
            continue;
        };
        // distinct factor variables used by the block's slope terms
        let mut slope_factors: Vec<&str> = Vec::new();
        for term in &block.slopes {
            for var in term.vars() {
                if matches!(dataset.columns.get(var), Some(Column::Factor { .. }))
                    && !slope_factors.contains(&var.as_str())
                {
                    slope_factors.push(var);
                }
            }
        }
        let factor_cols: Vec<(&[u32], &[String])> = slope_factors
            .iter()
            .map(|f| dataset.factor(f).expect("factor column present"))
            .collect();
        let cross: usize = factor_cols.iter().map(|(_, l)| l.len()).product::<usize>().max(1);

        for (g, group_label) in group_levels.iter().enumerate() {
            let mut counts = vec![0usize; cross];
            let mut succ = vec![0usize; cross];
            for i in 0..dataset.n {
                if group_codes[i] as usize != g {
                    continue;
                }
                let mut cell = 0usize;
                for (codes, levels) in &factor_cols {
                    cell = cell * levels.len() + codes[i] as usize;
                }
                counts[cell] += 1;
                succ[cell] += y[i] as usize;
            }
            let cells: Vec<CellReport> = (0..cross)
                .map(|cell| {
                    let label = if slope_factors.is_empty() {
                        "all rows".to_string()
                    } else {
                        let mut parts = Vec::new();
                        let mut rem = cell;
                        for (codes_levels, name) in
                            factor_cols.iter().zip(&slope_factors).rev()
                        {
                            let k = codes_levels.1.len();
                            parts.push(format!("{name}={}", codes_levels.1[rem % k]));
                            rem /= k;
                        }
                        parts.reverse();
                        parts.join(" x ")
                    };
                    CellReport::new(label, counts[cell], succ[cell])
                })
                .collect();
            let class = classify_cells(&cells);
            units.push(UnitReport {
                kind: UnitKind::Group,
                provenance: format!("{}={}", block.group, group_label),
                cells,
                class,
                threshold: None,
            });
        }
    }
    units
}

/// Scan every fixed-effect predictor and every random-block group and merge
/// into one report.
pub fn scan_all(dataset: &Dataset, spec: &ModelSpec) -> SeparationReport {
    let mut units = Vec::new();
    for var in spec.predictor_vars() {
        match dataset.columns.get(&var) {
            Some(Column::Factor { .. }) => {
                if let Some(u) = scan_factor(dataset, &var) {
                    units.push(u);
                }
            }
            Some(Column::Covariate(_)) => {
                if let Some(u) = scan_covariate(dataset, &var) {
                    units.push(u);
                }
            }
            _ => {}
        }
    }
    units.extend(scan_grouped(dataset, spec));
    SeparationReport::from_units(units)
}

/// Plain-text rendering of a report, one line per cell.
pub fn render_report(report: &SeparationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("verdict: {}\n", report.verdict));
    for unit in &report.units {
        let thr = unit
            .threshold
            .map(|t| format!(" (threshold {t})"))
            .unwrap_or_default();
        out.push_str(&format!(
            "[{}] {} -> {}{}\n",
            match unit.kind {
                UnitKind::Factor => "factor",
                UnitKind::Covariate => "covariate",
                UnitKind::Group => "group",
            },
            unit.provenance,
            unit.class,
            thr
        ));
        for cell in &unit.cells {
            let prop = cell
                .proportion
                .map(|p| format!("{p:.4}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "    {:<30} n={:<6} p={}{}\n",
                cell.label,
                cell.count,
                prop,
                if cell.pure { " (pure)" } else { "" }
            ));
        }
    }
    out
}
