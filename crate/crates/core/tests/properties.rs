//! Property tests for the structural invariants: formula round-tripping,
//! n-way expansion counts, scaling round trips, and label-swap invariance
//! of the separation classification.

use proptest::prelude::*;
use sepfit_core::data::{Column, Dataset};
use sepfit_core::design::{build_design, standardize};
use sepfit_core::formula::parse_formula;
use sepfit_core::separation::{scan_covariate, scan_factor};
use std::collections::BTreeMap;

fn ident() -> impl Strategy<Value = String> {
    "[a-d]".prop_map(|s| s.to_string())
}

/// Formula text over a tiny variable alphabet with distinct-variable terms.
fn formula_text() -> impl Strategy<Value = String> {
    let term = proptest::collection::vec(ident(), 1..3).prop_filter_map(
        "distinct vars",
        |vars| {
            let mut dedup = vars.clone();
            dedup.sort();
            dedup.dedup();
            (dedup.len() == vars.len()).then(|| vars.join(":"))
        },
    );
    let block = (proptest::collection::vec(ident(), 0..2), "[st]").prop_map(|(slopes, g)| {
        let mut inner = vec!["1".to_string()];
        inner.extend(slopes);
        format!("({} | {g})", inner.join(" + "))
    });
    (
        proptest::collection::vec(term, 1..4),
        proptest::collection::vec(block, 0..2),
    )
        .prop_map(|(terms, blocks)| {
            let mut parts = terms;
            parts.extend(blocks);
            format!("y ~ {}", parts.join(" + "))
        })
}

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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_print_parse_is_identity(text in formula_text()) {
        // duplicate terms across `+` are rejected; only exercise valid specs
        if let Ok(spec) = parse_formula(&text) {
            let printed = spec.to_formula();
            let reparsed = parse_formula(&printed).unwrap();
            prop_assert_eq!(spec, reparsed);
        }
    }

    #[test]
    fn nway_star_expansion_counts_subsets(n in 2usize..6) {
        let vars: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let spec = parse_formula(&format!("y ~ {}", vars.join("*"))).unwrap();
        prop_assert_eq!(spec.fixed_terms.len(), (1usize << n) - 1);
    }

    #[test]
    fn covariate_scaling_round_trips(
        raw in proptest::collection::vec(-1e3f64..1e3, 8..40),
        shift in -10.0f64..10.0,
    ) {
        let spread = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - raw.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let x: Vec<f64> = raw.iter().map(|v| v + shift).collect();
        let y: Vec<u8> = (0..x.len()).map(|i| (i % 2) as u8).collect();
        let ds = dataset(
            vec![("y", Column::Response(y)), ("x", Column::Covariate(x.clone()))],
            "y",
        );
        let spec = parse_formula("y ~ x").unwrap();
        let rec = standardize(&ds, &spec).unwrap();
        for &v in &x {
            let t = rec.apply_covariate("x", v).unwrap();
            let back = rec.invert_covariate("x", t).unwrap();
            prop_assert!((back - v).abs() < 1e-10 * v.abs().max(1.0));
        }
        let design = build_design(&ds, &spec, &rec).unwrap();
        let col = design.x_column(0);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (col.len() - 1) as f64;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var.sqrt() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn classification_is_invariant_under_label_swap(
        y in proptest::collection::vec(0u8..2, 12..60),
        values in proptest::collection::vec(0i32..6, 12..60),
    ) {
        let n = y.len().min(values.len());
        let y = &y[..n];
        let values = &values[..n];
        let flipped: Vec<u8> = y.iter().map(|&v| 1 - v).collect();

        // as a factor scan over up to six levels
        let codes: Vec<u32> = values.iter().map(|&v| v as u32).collect();
        let levels: Vec<String> = (0..6).map(|i| format!("l{i}")).collect();
        let make = |resp: Vec<u8>| {
            dataset(
                vec![
                    ("y", Column::Response(resp)),
                    (
                        "f",
                        Column::Factor {
                            codes: codes.clone(),
                            levels: levels.clone(),
                            ordered: false,
                        },
                    ),
                    (
                        "x",
                        Column::Covariate(values.iter().map(|&v| v as f64).collect()),
                    ),
                ],
                "y",
            )
        };
        let a = make(y.to_vec());
        let b = make(flipped);
        prop_assert_eq!(
            scan_factor(&a, "f").unwrap().class,
            scan_factor(&b, "f").unwrap().class
        );
        let xa = scan_covariate(&a, "x");
        let xb = scan_covariate(&b, "x");
        match (xa, xb) {
            (Some(ua), Some(ub)) => prop_assert_eq!(ua.class, ub.class),
            (None, None) => {}
            _ => prop_assert!(false, "scan availability differed"),
        }
    }
}
