use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const HEART: &str = "subject,condition,heart_rate\ns1,ctl,60\ns1,ex,72\ns2,ctl,42\ns2,ex,50\n";
const CLASSES: &str = "classroom,student\nC1,S1\nC1,S2\nC2,S3\nC2,S4\nC3,S5\nC3,S6\n";

fn ranfx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ranfx"))
        .args(args)
        .env_remove("RANFX_OUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn factorial(dir: &Path, reps: usize) -> String {
    let p = dir.join(format!("factorial{reps}.csv"));
    let o = ranfx(&["simulate", "factorial", "--set", &format!("replicates={reps}"), "-o", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p.to_str().unwrap().to_string()
}

#[test]
fn fit_heart_rate_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "hr.csv", HEART);
    let o = ranfx(&["--json", "fit", &data, "heart_rate ~ 1 + condition + (1|subject)", "--method", "reml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let fixed = v["fixed"].as_array().unwrap();
    assert!((fixed[0]["estimate"].as_f64().unwrap() - 51.0).abs() < 1e-6);
    assert!((fixed[1]["estimate"].as_f64().unwrap() - 10.0).abs() < 1e-6);
    assert_eq!(v["n_obs"], 4);

    let text = ranfx(&["fit", &data, "heart_rate ~ 1 + condition + (1|subject)"]);
    assert_eq!(code(&text), 0);
    assert!(stdout(&text).contains("51"));
}

#[test]
fn xtab_describes_nesting() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.csv", CLASSES);
    let o = ranfx(&["xtab", &data, "classroom", "student"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("Nested: student within classroom"), "{}", stdout(&o));
    let o = ranfx(&["--json", "xtab", &data, "student", "classroom"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["relation"], "NestedAinB");
}

#[test]
fn lint_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = factorial(dir.path(), 1);
    let a = ranfx(&["lint", &data, "heart_rate ~ condition*altitude + (1|subject)", "--subject", "subject"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(stdout(&a).contains("UnderSpecified") || stdout(&a).contains("under"), "{}", stdout(&a));
    let e = ranfx(&["--json", "lint", &data, "heart_rate ~ condition*altitude + (condition*altitude|subject)"]);
    assert_eq!(code(&e), 2);
    let v: Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert_eq!(v["verdict"], "Fail");
    assert_eq!(v["findings"][0]["code"], "OverSpecified");
}

#[test]
fn anova_refuses_failing_structure_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let data = factorial(dir.path(), 1);
    let e = ranfx(&["anova", &data, "heart_rate ~ condition*altitude + (condition*altitude|subject)"]);
    assert_eq!(code(&e), 2);
    assert!(stderr(&e).contains("--force"));
    // forcing still hits the fit's own identifiability check
    let f = ranfx(&["anova", "--force", &data, "heart_rate ~ condition*altitude + (condition*altitude|subject)"]);
    assert_eq!(code(&f), 2);
    assert!(stderr(&f).contains("unidentifiable"));

    let c = "heart_rate ~ condition*altitude + (1|subject) + (1|subject:condition) + (1|subject:altitude)";
    let mixed = ranfx(&["--json", "anova", &data, c]);
    assert_eq!(code(&mixed), 0, "{}", stderr(&mixed));
    let classical = ranfx(&["--json", "anova", "--classical", &data, c]);
    assert_eq!(code(&classical), 0, "{}", stderr(&classical));
    let m: Value = serde_json::from_str(&stdout(&mixed)).unwrap();
    let k: Value = serde_json::from_str(&stdout(&classical)).unwrap();
    for (x, y) in m["rows"].as_array().unwrap().iter().zip(k["rows"].as_array().unwrap()) {
        let (fx, fy) = (x["F"].as_f64().unwrap(), y["F"].as_f64().unwrap());
        assert!((fx - fy).abs() < 1e-4 * fy, "{fx} vs {fy}");
    }
}

#[test]
fn usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "hr.csv", HEART);
    let bad = ranfx(&["fit", &data, "heart_rate ~ (1|"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains('^'));
    assert_eq!(code(&ranfx(&["frobnicate"])), 1);
    assert_eq!(code(&ranfx(&["fit", &data, "heart_rate ~ 1 + (1|subject)", "--method", "bogus"])), 1);
    let missing = ranfx(&["fit", "/nonexistent/file.csv", "y ~ 1 + (1|s)"]);
    assert_eq!(code(&missing), 3);
    assert!(stderr(&missing).starts_with("error:"));
    let no_col = ranfx(&["fit", &data, "heart_rate ~ 1 + dose + (1|subject)"]);
    assert_eq!(code(&no_col), 1, "{}", stderr(&no_col));
}

#[test]
fn simulate_deterministic_and_out_dir() {
    let a = ranfx(&["simulate", "factorial", "--seed", "7"]);
    let b = ranfx(&["simulate", "factorial", "--seed", "7"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 61);

    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ranfx"))
        .args(["simulate", "longitudinal", "--seed", "3"])
        .env("RANFX_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = std::fs::read_to_string(dir.path().join("longitudinal_seed3.csv")).unwrap();
    assert_eq!(written.lines().count(), 721);

    let cfg = write(dir.path(), "sim.cfg", "family = crossed\nn_subjects = 4\nn_stimuli = 6 # small\n");
    let o = ranfx(&["--json", "simulate", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 24);
    assert_eq!(code(&ranfx(&["simulate", "nosuch"])), 1);
}

#[test]
fn predict_population_for_new_subject() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "hr.csv", HEART);
    let new = write(dir.path(), "new.csv", "subject,condition,heart_rate\ns3,ex,0\n");
    let o = ranfx(&[
        "--json",
        "predict",
        &data,
        "heart_rate ~ 1 + condition + (1|subject)",
        "--newdata",
        &new,
        "--population",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["fitted"][0].as_f64().unwrap() - 61.0).abs() < 1e-6);
}

#[test]
fn compare_requires_ml_for_fixed_changes() {
    let dir = tempfile::tempdir().unwrap();
    let data = factorial(dir.path(), 1);
    let a = "heart_rate ~ condition + (1|subject)";
    let b = "heart_rate ~ condition + altitude + (1|subject)";
    assert_eq!(code(&ranfx(&["compare", &data, a, b])), 2);
    let o = ranfx(&["--json", "compare", &data, a, b, "--method", "ml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["df"], 1);
    assert!(v["chisq"].as_f64().unwrap() > 0.0);
}

#[test]
fn negexp_population_fit() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("subject,month,functioning\n");
    for s in 0..6 {
        for t in 0..18 {
            let a = 75.0 + s as f64;
            let y = a - 60.0 * (-0.5 * t as f64).exp();
            text.push_str(&format!("p{s},{t},{y}\n"));
        }
    }
    let data = write(dir.path(), "sci.csv", &text);
    let o = ranfx(&["--json", "fit", "--negexp", &data, "functioning ~ month + (1|subject)"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["fixed"]["alpha"].as_f64().unwrap() - 77.5).abs() < 1e-5);
    assert_eq!(v["subjects"].as_array().unwrap().len(), 6);
}
