use proptest::prelude::*;
use ranfx::dataframe::Column;
use ranfx::design::count_random_effects;
use ranfx::estimate::{check_identifiable, FitError};
use ranfx::formula::parse_expanded;
use ranfx::simgen::{sim_crossed, sim_factorial, CrossedConfig, FactorialConfig};
use ranfx::structlint::{
    infer_design, lint_structure, recommend_structure, FactorRole, FindingCode, Severity, Verdict,
};
use ranfx::{build_matrices, CenteringPolicy, ContrastScheme, Dataset};

const FIXED: &str = "heart_rate ~ 1 + condition*altitude";

fn factorial(replicates: usize) -> Dataset {
    sim_factorial(&FactorialConfig { replicates, ..Default::default() }).unwrap()
}

fn lint(ds: &Dataset, random: &str) -> ranfx::structlint::LintReport {
    let design = infer_design(ds, "subject", &["condition", "altitude"]).unwrap();
    lint_structure(&parse_expanded(&format!("{FIXED} + {random}")).unwrap(), &design)
}

#[test]
fn factorial_roles() {
    let d = infer_design(&factorial(1), "subject", &["condition", "altitude"]).unwrap();
    assert_eq!(d.role("condition"), Some(FactorRole::Within));
    assert_eq!(d.role("altitude"), Some(FactorRole::Within));
    assert_eq!(d.replicates, 1);
    assert_eq!(d.n_subjects, 10);
    let d = infer_design(&factorial(2), "subject", &["condition", "altitude"]).unwrap();
    assert_eq!(d.replicates, 2);
}

#[test]
fn group_column_is_between() {
    let ds = factorial(1);
    let subj = ds.column("subject").unwrap();
    let group: Vec<String> = (0..ds.n_rows())
        .map(|r| if subj.code(r).unwrap() % 2 == 0 { "ctl".into() } else { "trt".into() })
        .collect();
    let mut cols: Vec<(String, Column)> = ds.columns().map(|(k, c)| (k.to_string(), c.clone())).collect();
    cols.push(("group".into(), Column::from_labels(&group)));
    let ds = Dataset::from_columns(cols).unwrap();
    let d = infer_design(&ds, "subject", &["group", "condition"]).unwrap();
    assert_eq!(d.role("group"), Some(FactorRole::Between));
}

#[test]
fn option_a_under_specified() {
    let r = lint(&factorial(1), "(1|subject)");
    assert_eq!(r.verdict, Verdict::PassWithWarnings);
    let under: Vec<&Vec<String>> = r
        .findings
        .iter()
        .filter(|f| f.code == FindingCode::UnderSpecified)
        .map(|f| &f.columns)
        .collect();
    assert!(under.iter().any(|c| c.contains(&"condition".to_string())));
    assert!(under.iter().any(|c| c.contains(&"altitude".to_string())));
    assert!(r.findings.iter().all(|f| f.severity != Severity::Error));
}

#[test]
fn option_b_mis_specified() {
    let r = lint(&factorial(1), "(1|subject) + (1|condition) + (1|altitude)");
    assert_eq!(r.count(FindingCode::MisSpecified), 2);
}

#[test]
fn option_c_and_d_clean() {
    let ds = factorial(1);
    let c = lint(&ds, "(1|subject) + (1|subject:condition) + (1|subject:altitude)");
    assert_eq!(c.verdict, Verdict::Pass, "{c}");
    let d = lint(&ds, "(1 + condition + altitude|subject)");
    assert!(d.findings.iter().all(|f| f.severity != Severity::Error), "{d}");
}

#[test]
fn option_e_over_specified_agrees_with_fit() {
    for reps in [1, 2] {
        let ds = factorial(reps);
        let f = format!("{FIXED} + (condition*altitude|subject)");
        let r = lint(&ds, "(condition*altitude|subject)");
        let m = build_matrices(&ds, &parse_expanded(&f).unwrap(), &ContrastScheme::default(), &CenteringPolicy::none())
            .unwrap();
        let refused = matches!(check_identifiable(&m), Err(FitError::OverSpecified { .. }));
        assert_eq!(r.count(FindingCode::OverSpecified) > 0, refused, "replicates {reps}");
        assert_eq!(refused, count_random_effects(&m) >= m.n());
        if reps == 1 {
            assert_eq!(r.verdict, Verdict::Fail);
        }
    }
}

#[test]
fn missing_intercept_is_error() {
    let r = lint(&factorial(1), "(1|condition)");
    assert!(r.count(FindingCode::MissingRandomIntercept) > 0);
    assert_eq!(r.verdict, Verdict::Fail);
}

#[test]
fn recommendations() {
    let d = infer_design(&factorial(1), "subject", &["condition", "altitude"]).unwrap();
    assert_eq!(recommend_structure(&d), "(1|subject) + (1|subject:altitude) + (1|subject:condition)");
    let d = infer_design(&factorial(1), "subject", &[]).unwrap();
    assert_eq!(recommend_structure(&d), "(1|subject)");
    let ds = sim_crossed(&CrossedConfig { n_subjects: 12, n_stimuli: 30, ..Default::default() }).unwrap();
    let d = infer_design(&ds, "subject", &["modality", "stimulus"]).unwrap();
    assert_eq!(d.role("stimulus"), Some(FactorRole::Sampling));
    assert!(d.replicates > 1);
    assert_eq!(recommend_structure(&d), "(1+modality|subject) + (1|stimulus)");
}

#[test]
fn too_few_subjects() {
    let ds = Dataset::from_columns(vec![
        ("subject", Column::from_labels(&["a", "a"])),
        ("c", Column::from_labels(&["x", "y"])),
    ])
    .unwrap();
    assert!(infer_design(&ds, "subject", &["c"]).is_err());
}

/// Random layouts: subjects x within factor w (2-3 levels) x optional second
/// within factor v, an optional between factor, replicates and dropout.
fn layout() -> impl Strategy<Value = Dataset> {
    (5usize..12, 2usize..4, 0usize..3, any::<bool>(), 1usize..3, 0usize..4).prop_map(
        |(ns, nw, nv, between, reps, drop)| {
            let (mut s, mut w, mut v, mut g) = (vec![], vec![], vec![], vec![]);
            for i in 0..ns {
                for a in 0..nw {
                    for b in 0..nv.max(1) {
                        for _ in 0..reps {
                            if i < drop && a == nw - 1 && b == 0 {
                                continue;
                            }
                            s.push(format!("s{i:02}"));
                            w.push(format!("w{a}"));
                            v.push(format!("v{b}"));
                            g.push(if i % 2 == 0 { "g0" } else { "g1" });
                        }
                    }
                }
            }
            let mut cols = vec![("subject", Column::from_labels(&s)), ("w", Column::from_labels(&w))];
            if nv > 1 {
                cols.push(("v", Column::from_labels(&v)));
            }
            if between {
                cols.push(("g", Column::from_labels(&g)));
            }
            Dataset::from_columns(cols).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]
    #[test]
    fn recommendation_lints_clean(ds in layout()) {
        let cand: Vec<&str> = ["w", "v", "g"].into_iter().filter(|c| ds.has_column(c)).collect();
        let d = infer_design(&ds, "subject", &cand).unwrap();
        let fixed = cand.join("*");
        let rec = recommend_structure(&d);
        let ast = parse_expanded(&format!("y ~ 1 + {fixed} + {rec}")).unwrap();
        let r = lint_structure(&ast, &d);
        prop_assert_eq!(r.verdict, Verdict::Pass, "{} on {:?}: {}", rec, cand, r);
    }
}
