use proptest::prelude::*;
use ranfx::formula::{
    expand_terms, parse_expanded, parse_formula, FixedTerm, GroupingExpr, ParseErrorKind, VarRef,
};

fn labels(f: &str) -> Vec<String> {
    parse_expanded(f).unwrap().fixed_terms().iter().map(|t| t.label()).collect()
}

#[test]
fn simple_intercept_model() {
    let ast = parse_expanded("DV ~ 1 + W1 + (1|subject)").unwrap();
    assert!(ast.intercept);
    assert_eq!(ast.response.column, "DV");
    assert_eq!(labels("DV ~ 1 + W1 + (1|subject)"), ["W1"]);
    assert_eq!(ast.random.len(), 1);
    assert_eq!(ast.random[0].grouping, GroupingExpr::Factors(vec!["subject".into()]));
    assert!(ast.random[0].inner_terms().is_empty());
}

#[test]
fn quadratic_random_slopes() {
    let ast = parse_expanded("functioning ~ 1+time+I(time^2) + (1+time+I(time^2)|subject)").unwrap();
    let inner = ast.random[0].inner_terms();
    assert_eq!(inner.len(), 2);
    assert_eq!(inner[1].vars, vec![VarRef::pow("time", 2)]);
    assert!(ast.random[0].correlated);
    assert!(ast.random[0].has_slope_on("time"));
}

#[test]
fn malformed_input() {
    let e = parse_formula("y ~ (1|").unwrap_err();
    assert_eq!(e.kind, ParseErrorKind::UnmatchedParen);
    assert!(matches!(parse_formula("y ~ a | b").unwrap_err().kind, ParseErrorKind::BareBar));
    assert!(matches!(parse_formula("y + a").unwrap_err().kind, ParseErrorKind::Tilde));
    assert!(matches!(parse_formula("y ~ sqrt(a)").unwrap_err().kind, ParseErrorKind::UnknownFunction(_)));
    assert!(parse_formula("").is_err());
}

#[test]
fn slash_shortcut() {
    let a = parse_expanded("y ~ 1 + (1|classroom/student)").unwrap();
    let b = parse_expanded("y ~ 1 + (1|classroom) + (1|classroom:student)").unwrap();
    assert_eq!(a, b);
}

#[test]
fn star_and_dedup() {
    assert_eq!(labels("y ~ condition*altitude"), ["condition", "altitude", "condition:altitude"]);
    assert_eq!(labels("y ~ a + a"), ["a"]);
    assert_eq!(labels("y ~ a:b + b:a"), ["a:b"]);
    assert_eq!(labels("y ~ (a + b)*c"), ["a", "b", "c", "a:c", "b:c"]);
}

#[test]
fn intercept_removal_and_log() {
    assert!(!parse_formula("y ~ 0 + x").unwrap().intercept);
    assert!(!parse_formula("y ~ x - 1").unwrap().intercept);
    assert!(parse_formula("y ~ x").unwrap().intercept);
    let ast = parse_formula("log(RT) ~ 1 + modality + (1+modality|subject) + (1|stimulus)").unwrap();
    assert!(ast.response.log);
    assert_eq!(ast.response.column, "RT");
}

#[test]
fn double_bar_is_diagonal() {
    let ast = parse_expanded("y ~ 1 + c + (1 + c || s)").unwrap();
    assert_eq!(ast.random.len(), 1);
    assert!(!ast.random[0].correlated);
}

#[test]
fn referenced_columns_cover_everything() {
    let ast = parse_expanded("log(RT) ~ a*b + I(t^2) + (1+t|s/g)").unwrap();
    let cols = ast.referenced_columns();
    for c in ["RT", "a", "b", "t", "s", "g"] {
        assert!(cols.iter().any(|x| x == c), "{c} missing from {cols:?}");
    }
}

#[test]
fn fixed_term_identity() {
    let ab = FixedTerm::new(vec![VarRef::new("a"), VarRef::new("b")]);
    let ba = FixedTerm::new(vec![VarRef::new("b"), VarRef::new("a")]);
    assert!(ab.same_as(&ba));
    assert_eq!(ab.order(), 2);
}

const VARS: [&str; 4] = ["a", "b", "c", "d"];
const GROUPS: [&str; 3] = ["g1", "g2", "g3"];

fn fixed_expr() -> impl Strategy<Value = String> {
    let leaf = prop::sample::select(&VARS[..]).prop_map(str::to_string);
    leaf.prop_recursive(3, 8, 2, |inner| {
        (inner.clone(), prop::sample::select(vec!["+", "*", ":"]), inner)
            .prop_map(|(a, op, b)| format!("({a} {op} {b})"))
    })
}

fn random_term() -> impl Strategy<Value = String> {
    (
        prop::option::of(prop::sample::select(&VARS[..])),
        prop::sample::select(&GROUPS[..]),
        prop::option::of(prop::sample::select(&GROUPS[..])),
        prop::bool::ANY,
    )
        .prop_map(|(slope, g, sub, diag)| {
            let inner = slope.map_or("1".to_string(), |s| format!("1 + {s}"));
            let grouping = match sub {
                Some(h) if h != g => format!("{g}/{h}"),
                _ => g.to_string(),
            };
            let bar = if diag { "||" } else { "|" };
            format!("({inner} {bar} {grouping})")
        })
}

fn formula() -> impl Strategy<Value = String> {
    (fixed_expr(), prop::collection::vec(random_term(), 0..3)).prop_map(|(f, r)| {
        let mut s = format!("y ~ 1 + {f}");
        for t in r {
            s.push_str(" + ");
            s.push_str(&t);
        }
        s
    })
}

proptest! {
    #[test]
    fn expand_is_idempotent(f in formula()) {
        let once = expand_terms(&parse_formula(&f).unwrap());
        prop_assert_eq!(expand_terms(&once), once);
    }

    #[test]
    fn print_parse_round_trip(f in formula()) {
        let ast = parse_expanded(&f).unwrap();
        let printed = ast.to_string();
        let again = parse_formula(&printed).unwrap();
        prop_assert_eq!(&again, &ast, "printed as {}", printed);
    }

    #[test]
    fn expanded_terms_unique(f in formula()) {
        let terms = parse_expanded(&f).unwrap().fixed_terms();
        for i in 0..terms.len() {
            for j in i + 1..terms.len() {
                prop_assert!(!terms[i].same_as(&terms[j]));
            }
        }
    }

    #[test]
    fn slash_equivalence(g1 in "[a-z]{1,6}", g2 in "[A-Z]{1,6}") {
        let a = parse_expanded(&format!("y ~ 1 + (1|{g1}/{g2})")).unwrap();
        let b = parse_expanded(&format!("y ~ 1 + (1|{g1}) + (1|{g1}:{g2})")).unwrap();
        prop_assert_eq!(a, b);
    }
}
