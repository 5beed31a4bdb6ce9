//! Binary classification tree over the response, used as a quasi-separation
//! probe: pure leaves with enough support witness regions the per-predictor
//! scans can miss in large crossed designs.
//!
//! Greedy CART with Gini impurity. Numeric splits use midpoints between
//! consecutive distinct values; factor splits use the optimal level-subset
//! search along the success-proportion ordering. Children must keep at least
//! `min_leaf` rows. Ties are broken by leftmost column, then first candidate
//! split, so output is deterministic.

use crate::data::{Column, Dataset};
use crate::formula::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Split {
    Numeric { column: String, threshold: f64 },
    Levels { column: String, left_levels: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        count: usize,
        successes: usize,
        proportion: f64,
        /// Pure leaf with `count >= min_leaf`: a quasi-separation witness.
        flagged: bool,
    },
    Internal {
        split: Split,
        count: usize,
        impurity: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn leaves(&self) -> Vec<&TreeNode> {
        match self {
            TreeNode::Leaf { .. } => vec![self],
            TreeNode::Internal { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    pub fn flagged_leaves(&self) -> Vec<&TreeNode> {
        self.leaves()
            .into_iter()
            .filter(|l| matches!(l, TreeNode::Leaf { flagged: true, .. }))
            .collect()
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0);
        out
    }

    fn render_into(&self, out: &mut String, indent: usize) {
        let pad = "  ".repeat(indent);
        match self {
            TreeNode::Leaf {
                count,
                proportion,
                flagged,
                ..
            } => {
                out.push_str(&format!(
                    "{pad}leaf n={count} p={proportion:.4}{}\n",
                    if *flagged { " [pure]" } else { "" }
                ));
            }
            TreeNode::Internal {
                split, left, right, ..
            } => {
                match split {
                    Split::Numeric { column, threshold } => {
                        out.push_str(&format!("{pad}{column} <= {threshold}\n"));
                    }
                    Split::Levels { column, left_levels } => {
                        out.push_str(&format!("{pad}{column} in {{{}}}\n", left_levels.join(", ")));
                    }
                }
                left.render_into(out, indent + 1);
                right.render_into(out, indent + 1);
            }
        }
    }
}

enum Feature<'a> {
    Numeric { name: &'a str, values: &'a [f64] },
    Factor {
        name: &'a str,
        codes: &'a [u32],
        levels: &'a [String],
    },
}

fn gini(successes: f64, count: f64) -> f64 {
    if count == 0.0 {
        return 0.0;
    }
    let p = successes / count;
    2.0 * p * (1.0 - p)
}

struct BestSplit {
    feature_idx: usize,
    split: SplitChoice,
    weighted_impurity: f64,
}

enum SplitChoice {
    Numeric(f64),
    Levels(Vec<u32>),
}

fn find_best_split(
    features: &[Feature],
    y: &[u8],
    rows: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let total = rows.len() as f64;
    let mut best: Option<BestSplit> = None;
    for (fi, feature) in features.iter().enumerate() {
        match feature {
            Feature::Numeric { values, .. } => {
                let mut sorted: Vec<usize> = rows.to_vec();
                sorted.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
                let mut left_n = 0f64;
                let mut left_s = 0f64;
                let total_s: f64 = rows.iter().map(|&i| y[i] as f64).sum();
                for k in 1..sorted.len() {
                    left_n += 1.0;
                    left_s += y[sorted[k - 1]] as f64;
                    let (lo, hi) = (values[sorted[k - 1]], values[sorted[k]]);
                    if lo == hi {
                        continue;
                    }
                    if k < min_leaf || sorted.len() - k < min_leaf {
                        continue;
                    }
                    let right_n = total - left_n;
                    let right_s = total_s - left_s;
                    let w = left_n / total * gini(left_s, left_n)
                        + right_n / total * gini(right_s, right_n);
                    if best.as_ref().map_or(true, |b| w < b.weighted_impurity - 1e-12) {
                        best = Some(BestSplit {
                            feature_idx: fi,
                            split: SplitChoice::Numeric(0.5 * (lo + hi)),
                            weighted_impurity: w,
                        });
                    }
                }
            }
            Feature::Factor { codes, levels, .. } => {
                let k = levels.len();
                let mut count = vec![0f64; k];
                let mut succ = vec![0f64; k];
                for &i in rows {
                    count[codes[i] as usize] += 1.0;
                    succ[codes[i] as usize] += y[i] as f64;
                }
                // order observed levels by success proportion; the optimal
                // binary partition for Gini is a prefix of this ordering
                let mut observed: Vec<usize> = (0..k).filter(|&l| count[l] > 0.0).collect();
                observed.sort_by(|&a, &b| {
                    let pa = succ[a] / count[a];
                    let pb = succ[b] / count[b];
                    pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
                });
                if observed.len() < 2 {
                    continue;
                }
                let total_s: f64 = succ.iter().sum();
                let mut left_n = 0f64;
                let mut left_s = 0f64;
                for prefix in 0..observed.len() - 1 {
                    let l = observed[prefix];
                    left_n += count[l];
                    left_s += succ[l];
                    if (left_n as usize) < min_leaf || (total as usize - left_n as usize) < min_leaf
                    {
                        continue;
                    }
                    let right_n = total - left_n;
                    let right_s = total_s - left_s;
                    let w = left_n / total * gini(left_s, left_n)
                        + right_n / total * gini(right_s, right_n);
                    if best.as_ref().map_or(true, |b| w < b.weighted_impurity - 1e-12) {
                        best = Some(BestSplit {
                            feature_idx: fi,
                            split: SplitChoice::Levels(
                                observed[..=prefix].iter().map(|&l| l as u32).collect(),
                            ),
                            weighted_impurity: w,
                        });
                    }
                }
            }
        }
    }
    best
}

fn grow(
    features: &[Feature],
    y: &[u8],
    rows: Vec<usize>,
    depth_left: usize,
    min_leaf: usize,
) -> TreeNode {
    let count = rows.len();
    let successes: usize = rows.iter().map(|&i| y[i] as usize).sum();
    let proportion = successes as f64 / count as f64;
    let node_impurity = gini(successes as f64, count as f64);
    let make_leaf = || TreeNode::Leaf {
        count,
        successes,
        proportion,
        flagged: (successes == 0 || successes == count) && count >= min_leaf,
    };

    if depth_left == 0 || node_impurity == 0.0 || count < 2 * min_leaf {
        return make_leaf();
    }
    let Some(best) = find_best_split(features, y, &rows, min_leaf) else {
        return make_leaf();
    };
    if best.weighted_impurity >= node_impurity - 1e-12 {
        return make_leaf();
    }

    let (split, left_rows, right_rows) = match (&features[best.feature_idx], &best.split) {
        (Feature::Numeric { name, values }, SplitChoice::Numeric(t)) => {
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.into_iter().partition(|&i| values[i] <= *t);
            (
                Split::Numeric {
                    column: name.to_string(),
                    threshold: *t,
                },
                l,
                r,
            )
        }
        (Feature::Factor { name, codes, levels }, SplitChoice::Levels(left)) => {
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.into_iter().partition(|&i| left.contains(&codes[i]));
            let mut left_sorted = left.clone();
            left_sorted.sort_unstable();
            (
                Split::Levels {
                    column: name.to_string(),
                    left_levels: left_sorted
                        .iter()
                        .map(|&l| levels[l as usize].clone())
                        .collect(),
                },
                l,
                r,
            )
        }
        _ => unreachable!("split choice matches feature type"),
    };

    TreeNode::Internal {
        split,
        count,
        impurity: node_impurity,
        left: Box::new(grow(features, y, left_rows, depth_left - 1, min_leaf)),
        right: Box::new(grow(features, y, right_rows, depth_left - 1, min_leaf)),
    }
}

pub const DEFAULT_MAX_DEPTH: usize = 6;
pub const DEFAULT_MIN_LEAF: usize = 20;

/// Fit the probe tree on the response using every predictor referenced by
/// the spec plus the grouping columns.
pub fn fit_tree(
    dataset: &Dataset,
    spec: &ModelSpec,
    max_depth: usize,
    min_leaf: usize,
) -> TreeNode {
    assert!(max_depth >= 1 && min_leaf >= 1, "max_depth and min_leaf must be >= 1");
    let y = dataset.response_values();
    let mut names: Vec<String> = spec.predictor_vars();
    for block in &spec.random_blocks {
        if !names.contains(&block.group) {
            names.push(block.group.clone());
        }
    }
    let features: Vec<Feature> = names
        .iter()
        .filter_map(|name| match dataset.columns.get(name) {
            Some(Column::Covariate(values)) => Some(Feature::Numeric { name, values }),
            Some(Column::Factor { codes, levels, .. }) => Some(Feature::Factor {
                name,
                codes,
                levels,
            }),
            _ => None,
        })
        .collect();
    let rows: Vec<usize> = (0..dataset.n).collect();
    grow(&features, y, rows, max_depth, min_leaf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;
    use crate::formula::parse_formula;
    use crate::separation::{scan_grouped, SeparationClass};
    use std::collections::BTreeMap;

    fn dataset(cols: Vec<(&str, Column)>, response: &str) -> Dataset {
        let n = cols[0].1.len();
        let columns: BTreeMap<String, Column> =
            cols.into_iter().map(|(n, c)| (n.to_string(), c)).collect();
        Dataset {
            n,
            columns,
            response: response.to_string(),
            dropped_rows: 0,
            missing_by_column: Vec::new(),
        }
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (*state >> 33) as f64 / (1u64 << 31) as f64
    }

    #[test]
    fn constant_response_yields_root_leaf() {
        let ds = dataset(
            vec![
                ("y", Column::Response(vec![1; 40])),
                ("x", Column::Covariate((0..40).map(|i| i as f64).collect())),
            ],
            "y",
        );
        let spec = parse_formula("y ~ x").unwrap();
        let tree = fit_tree(&ds, &spec, 6, 5);
        match tree {
            TreeNode::Leaf {
                count, proportion, ..
            } => {
                assert_eq!(count, 40);
                assert_eq!(proportion, 1.0);
            }
            _ => panic!("expected a root leaf"),
        }
    }

    #[test]
    fn threshold_indicator_recovers_planted_split() {
        // y = 1(x > 7); distinct values on both sides of 7
        let x: Vec<f64> = (0..60).map(|i| (i % 15) as f64).collect();
        let y: Vec<u8> = x.iter().map(|&v| (v > 7.0) as u8).collect();
        let ds = dataset(
            vec![
                ("y", Column::Response(y.clone())),
                ("x", Column::Covariate(x.clone())),
            ],
            "y",
        );
        let spec = parse_formula("y ~ x").unwrap();
        let tree = fit_tree(&ds, &spec, 6, 4);
        assert_eq!(tree.depth(), 1);
        match &tree {
            TreeNode::Internal { split, .. } => match split {
                Split::Numeric { threshold, .. } => {
                    // brute-force oracle: best split lies in the observed gap (7, 8)
                    assert_eq!(*threshold, 7.5);
                }
                _ => panic!("expected numeric split"),
            },
            _ => panic!("expected one split"),
        }
        for leaf in tree.leaves() {
            if let TreeNode::Leaf { flagged, .. } = leaf {
                assert!(flagged);
            }
        }
    }

    /// 10 subjects x 2 conditions x 20 rows per cell; subject s7 in
    /// condition B is forced all-1, everything else is mixed.
    fn planted_dataset() -> (Dataset, ModelSpec) {
        let mut subj = Vec::new();
        let mut cond = Vec::new();
        let mut y = Vec::new();
        let mut state = 7u64;
        for s in 0..10u32 {
            for c in 0..2u32 {
                for _ in 0..200 {
                    subj.push(s);
                    cond.push(c);
                    if s == 7 && c == 1 {
                        y.push(1u8);
                    } else {
                        y.push((lcg(&mut state) < 0.6) as u8);
                    }
                }
            }
        }
        let ds = dataset(
            vec![
                ("y", Column::Response(y)),
                (
                    "cond",
                    Column::Factor {
                        codes: cond,
                        levels: vec!["A".into(), "B".into()],
                        ordered: false,
                    },
                ),
                (
                    "subj",
                    Column::Factor {
                        codes: subj,
                        levels: (0..10).map(|i| format!("s{i}")).collect(),
                        ordered: false,
                    },
                ),
            ],
            "y",
        );
        let spec = parse_formula("y ~ cond + (1 + cond | subj)").unwrap();
        (ds, spec)
    }

    use crate::formula::ModelSpec;

    #[test]
    fn planted_pure_region_is_isolated_by_a_pure_leaf() {
        let (ds, spec) = planted_dataset();
        let tree = fit_tree(&ds, &spec, DEFAULT_MAX_DEPTH, DEFAULT_MIN_LEAF);
        let big_pure = tree.flagged_leaves().into_iter().any(|l| match l {
            TreeNode::Leaf {
                count, proportion, ..
            } => *count >= 200 && *proportion == 1.0,
            _ => false,
        });
        assert!(big_pure, "expected a pure leaf covering the planted region");
    }

    #[test]
    fn tree_flags_every_pure_cell_the_grouped_scan_finds() {
        // factor-only data: the tree sees the same columns the scan crosses,
        // so every pure cell of size >= min_leaf must end up flagged
        for seed in [3u64, 11, 29] {
            let mut state = seed;
            let mut subj = Vec::new();
            let mut cond = Vec::new();
            let mut y = Vec::new();
            let pure_cells = [(1usize, 0usize), (4, 1), (8, 1)];
            for s in 0..12usize {
                for c in 0..2usize {
                    for _ in 0..40 {
                        subj.push(s as u32);
                        cond.push(c as u32);
                        if pure_cells.contains(&(s, c)) {
                            y.push(1u8);
                        } else {
                            y.push((lcg(&mut state) < 0.55) as u8);
                        }
                    }
                }
            }
            let ds = dataset(
                vec![
                    ("y", Column::Response(y)),
                    (
                        "cond",
                        Column::Factor {
                            codes: cond,
                            levels: vec!["A".into(), "B".into()],
                            ordered: false,
                        },
                    ),
                    (
                        "subj",
                        Column::Factor {
                            codes: subj,
                            levels: (0..12).map(|i| format!("s{i}")).collect(),
                            ordered: false,
                        },
                    ),
                ],
                "y",
            );
            let spec = parse_formula("y ~ cond + (1 + cond | subj)").unwrap();
            let min_leaf = 20;
            let tree = fit_tree(&ds, &spec, 8, min_leaf);

            let scan_pure: usize = scan_grouped(&ds, &spec)
                .iter()
                .filter(|u| u.class != SeparationClass::Overlap)
                .flat_map(|u| u.cells.iter())
                .filter(|c| c.pure && c.count >= min_leaf)
                .count();
            assert_eq!(scan_pure, 3, "seed {seed}: planted cells found by scan");

            let flagged_rows: usize = tree
                .flagged_leaves()
                .iter()
                .map(|l| match l {
                    TreeNode::Leaf { count, proportion, .. } if *proportion == 1.0 => *count,
                    _ => 0,
                })
                .sum();
            assert!(
                flagged_rows >= 3 * 40,
                "seed {seed}: flagged pure-1 rows {flagged_rows} must cover the 120 planted rows"
            );
        }
    }

    #[test]
    fn degenerate_rows_yield_leaf_without_panicking() {
        let ds = dataset(
            vec![
                ("y", Column::Response(vec![1, 0, 1, 0])),
                ("x", Column::Covariate(vec![1.0, 1.0, 1.0, 1.0])),
            ],
            "y",
        );
        let spec = parse_formula("y ~ x").unwrap();
        let tree = fit_tree(&ds, &spec, 3, 1);
        assert_eq!(tree.depth(), 0);
    }

    #[test]
    fn json_rendering_is_stable() {
        let (ds, spec) = planted_dataset();
        let tree = fit_tree(&ds, &spec, 3, 50);
        let text = tree.render();
        assert!(text.contains("leaf"));
        let json = serde_json::to_string(&tree).unwrap();
        let back: TreeNode = serde_json::from_str(&json).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            json,
            "tree JSON roundtrip"
        );
    }
}
