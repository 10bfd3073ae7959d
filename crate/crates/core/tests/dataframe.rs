use std::collections::HashMap;

use proptest::prelude::*;
use ranfx::dataframe::{classify_relation, concat_factors, cross_tabulate, read_csv, read_csv_str, ColumnData};
use ranfx::{ColumnType, Dataset, FactorRelation};

fn csv(text: &str) -> Dataset {
    read_csv_str(text, &HashMap::new()).unwrap()
}

const HEART: &str = "subject,condition,heart_rate\ns1,ctl,60\ns1,ex,72\ns2,ctl,42\ns2,ex,50\n";

// students S1..S6 in three classrooms, two per room
const FIG_3A: &str = "classroom,student\nC1,S1\nC1,S2\nC2,S3\nC2,S4\nC3,S5\nC3,S6\n";
// same design, students relabelled 1..2 inside each room
const FIG_3B: &str = "classroom,student\nC1,S1\nC1,S2\nC2,S1\nC2,S2\nC3,S1\nC3,S2\n";

#[test]
fn heart_rate_types() {
    let ds = csv(HEART);
    assert_eq!(ds.n_rows(), 4);
    assert_eq!(ds.column("subject").unwrap().levels().unwrap(), ["s1", "s2"]);
    assert_eq!(ds.column("condition").unwrap().levels().unwrap().len(), 2);
    assert_eq!(ds.column("heart_rate").unwrap().column_type(), ColumnType::Numeric);
}

#[test]
fn header_only_file() {
    let ds = csv("a,b\n");
    assert_eq!(ds.n_rows(), 0);
    assert_eq!(ds.names(), ["a", "b"]);
}

#[test]
fn days_column_is_numeric() {
    let ds = csv("time\n0\n10\n35\n");
    let c = ds.column("time").unwrap();
    let v: Vec<f64> = (0..3).map(|i| c.value(i).unwrap()).collect();
    assert_eq!(v, [0.0, 10.0, 35.0]);
}

#[test]
fn empty_and_na_cells_are_missing() {
    let ds = csv("x,g\n1,a\n,b\nNA,NA\n4,c\n");
    let x = ds.column("x").unwrap();
    assert_eq!(x.column_type(), ColumnType::Numeric);
    assert_eq!(x.missing_count(), 2);
    assert!(x.is_missing(1) && x.is_missing(2));
    let g = ds.column("g").unwrap();
    assert_eq!(g.levels().unwrap(), ["a", "b", "c"]);
    assert!(g.is_missing(2));
}

#[test]
fn levels_sorted_and_override() {
    let ds = csv("g\nb\na\nc\na\n");
    assert_eq!(ds.column("g").unwrap().levels().unwrap(), ["a", "b", "c"]);
    let mut o = HashMap::new();
    o.insert("site".to_string(), ColumnType::Factor);
    let ds = read_csv_str("site\n3\n1\n2\n", &o).unwrap();
    let c = ds.column("site").unwrap();
    assert!(c.is_factor());
    assert_eq!(c.levels().unwrap(), ["1", "2", "3"]);
}

#[test]
fn read_summary_counts_missing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "a,b\n1,\n,\n3,x\n").unwrap();
    let (ds, summary) = read_csv(&path, &HashMap::new()).unwrap();
    assert_eq!(ds.n_rows(), 3);
    assert_eq!(summary.missing_cells["a"], 1);
    assert_eq!(summary.missing_cells["b"], 2);
    assert!(read_csv(dir.path().join("nope.csv"), &HashMap::new()).is_err());
}

#[test]
fn crosstab_nested_students() {
    let ds = csv(FIG_3A);
    let inc = cross_tabulate(&ds, "classroom", "student").unwrap();
    assert_eq!(inc.counts.len(), 3);
    assert_eq!(inc.counts[0], [1, 1, 0, 0, 0, 0]);
    for j in 0..6 {
        assert_eq!((0..3).filter(|&i| inc.counts[i][j] > 0).count(), 1);
    }
    assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::NestedBinA);
    let back = cross_tabulate(&ds, "student", "classroom").unwrap();
    assert_eq!(classify_relation(&back).unwrap(), FactorRelation::NestedAinB);
    assert_eq!(
        FactorRelation::NestedAinB.describe("student", "classroom"),
        "Nested: student within classroom"
    );
}

#[test]
fn crosstab_crossed_and_partial() {
    let ds = csv("subject,condition\nS1,A\nS1,B\nS2,A\nS2,B\nS3,A\nS3,B\n");
    let inc = cross_tabulate(&ds, "subject", "condition").unwrap();
    assert!(inc.counts.iter().flatten().all(|&c| c == 1));
    assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::FullyCrossed);

    let ds = csv("subject,condition\nS1,C1\nS1,C2\nS2,C1\nS2,C3\nS3,C1\nS3,C2\nS3,C3\n");
    let inc = cross_tabulate(&ds, "subject", "condition").unwrap();
    assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::PartiallyCrossed);

    let one = csv("a,b\nx,y\n");
    let inc = cross_tabulate(&one, "a", "b").unwrap();
    assert_eq!(inc.counts, vec![vec![1]]);
}

#[test]
fn ambiguous_coding_is_crossed_until_concatenated() {
    let mut ds = csv(FIG_3B);
    let inc = cross_tabulate(&ds, "classroom", "student").unwrap();
    assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::FullyCrossed);
    let id = concat_factors(&ds, "classroom", "student", ":").unwrap();
    assert_eq!(id.levels().unwrap().len(), 6);
    assert_eq!(id.label(1).unwrap(), "C1:S2");
    ds.push_column("id", id).unwrap();
    let inc = cross_tabulate(&ds, "id", "classroom").unwrap();
    assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::NestedAinB);
}

#[test]
fn concat_with_self() {
    let ds = csv("x\na\nb\n");
    let c = concat_factors(&ds, "x", "x", ":").unwrap();
    assert_eq!(c.levels().unwrap(), ["a:a", "b:b"]);
}

#[test]
fn crosstab_skips_pairwise_missing() {
    let ds = csv("a,b,c\nx,,1\ny,q,\nx,p,2\n");
    let inc = cross_tabulate(&ds, "a", "b").unwrap();
    assert_eq!(inc.total(), 2);
}

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(String::new()),
        (-1e6f64..1e6).prop_map(|v| format!("{v}")),
        "[a-z]{1,4}",
    ]
}

proptest! {
    #[test]
    fn csv_round_trip(rows in prop::collection::vec(prop::collection::vec(cell(), 3), 0..20)) {
        let mut text = String::from("a,b,c\n");
        for r in &rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        let ds = csv(&text);
        let again = csv(&ds.to_csv_string());
        prop_assert_eq!(ds.names(), again.names());
        prop_assert_eq!(ds.n_rows(), again.n_rows());
        for ((_, x), (_, y)) in ds.columns().zip(again.columns()) {
            prop_assert_eq!(x.column_type(), y.column_type());
            match (x.data(), y.data()) {
                (ColumnData::Numeric(_), ColumnData::Numeric(_)) => {
                    for i in 0..ds.n_rows() {
                        prop_assert_eq!(x.value(i), y.value(i));
                    }
                }
                _ => {
                    prop_assert_eq!(x.levels(), y.levels());
                    for i in 0..ds.n_rows() {
                        prop_assert_eq!(x.label(i), y.label(i));
                    }
                }
            }
        }
    }

    #[test]
    fn relation_flips_with_transpose(pairs in prop::collection::vec((0u8..4, 0u8..5), 1..30)) {
        let mut text = String::from("a,b\n");
        for (a, b) in &pairs {
            text.push_str(&format!("A{a},B{b}\n"));
        }
        let ds = csv(&text);
        let ab = classify_relation(&cross_tabulate(&ds, "a", "b").unwrap()).unwrap();
        let ba = classify_relation(&cross_tabulate(&ds, "b", "a").unwrap()).unwrap();
        prop_assert_eq!(ab.flipped(), ba);
    }
}
