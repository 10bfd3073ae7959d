use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ranfx::dataframe::{classify_relation, cross_tabulate, read_csv, DataError};
use ranfx::design::{Centering, DesignError};
use ranfx::estimate::{predict, FitError};
use ranfx::formula::{expand_terms, FormulaAst};
use ranfx::inference::{anova_satterthwaite, classical_rm_anova, compare_models};
use ranfx::nonlinear::{fit_negexp_population, NegExpParams};
use ranfx::simgen::{simulate, SimConfig};
use ranfx::structlint::{infer_design, lint_structure, FactorRole, LintReport, Verdict};
use ranfx::{build_matrices, parse_formula, CenteringPolicy, ContrastScheme, Dataset, FitOptions, LmmFit, Method};

#[derive(Parser)]
#[command(name = "ranfx", version, about = "Linear mixed-effects models and random-effects structure checks")]
struct Cli {
    /// Emit JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-tabulate two factors and classify them as nested or crossed.
    Xtab { data: PathBuf, a: String, b: String },
    /// Check a random-effects structure against the design.
    Lint {
        data: PathBuf,
        formula: String,
        #[command(flatten)]
        lint: LintArgs,
    },
    /// Fit a mixed model and print the variance components and fixed effects.
    Fit {
        data: PathBuf,
        formula: String,
        #[command(flatten)]
        model: ModelArgs,
        /// Fit `y ~ time + (1|subject)` as a negative exponential curve per
        /// subject, summarised across subjects.
        #[arg(long)]
        negexp: bool,
        /// Start values alpha,delta,lambda for --negexp.
        #[arg(long, value_delimiter = ',', num_args = 3, allow_hyphen_values = true)]
        start: Option<Vec<f64>>,
    },
    /// Type III F-tests with Satterthwaite degrees of freedom.
    Anova {
        data: PathBuf,
        formula: String,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        lint: LintArgs,
        /// Skip the structure check.
        #[arg(long)]
        force: bool,
        /// Classical repeated-measures ANOVA over the fixed factors instead.
        #[arg(long)]
        classical: bool,
    },
    /// Write fitted values as CSV.
    Predict {
        data: PathBuf,
        formula: String,
        #[command(flatten)]
        model: ModelArgs,
        /// Rows to predict for (default: the fitting data).
        #[arg(long)]
        newdata: Option<PathBuf>,
        /// Fixed effects only.
        #[arg(long)]
        population: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (longitudinal, factorial or crossed).
    Simulate {
        family: Option<String>,
        /// File of `key = value` settings including `family`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a setting, e.g. `--set n_subjects=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        settings: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Likelihood-ratio test between two nested models.
    Compare {
        data: PathBuf,
        formula_a: String,
        formula_b: String,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Reml, ignore_case = true)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = ContrastArg::Treatment)]
    contrasts: ContrastArg,
    /// Reference level for treatment coding, `factor=level`.
    #[arg(long = "reference", value_name = "FACTOR=LEVEL")]
    references: Vec<String>,
    /// Centre a numeric variable, `var=first` or `var=mean`.
    #[arg(long = "center", value_name = "VAR=first|mean")]
    centering: Vec<String>,
}

#[derive(Args, Clone)]
struct LintArgs {
    #[arg(long, default_value = "subject")]
    subject: String,
    /// Factors to classify (default: every predictor and grouping column).
    #[arg(long, value_delimiter = ',')]
    factors: Vec<String>,
    /// Declare a factor as a sampled grouping factor (e.g. stimuli).
    #[arg(long, value_delimiter = ',')]
    sampling: Vec<String>,
    /// Declare nesting from the study design, `inner:outer`.
    #[arg(long = "nested", value_name = "INNER:OUTER")]
    nested: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Reml,
    Ml,
}

#[derive(Clone, Copy, ValueEnum)]
enum ContrastArg {
    Treatment,
    Sum,
}

enum Failure {
    Usage(anyhow::Error),
    Model(anyhow::Error),
    Io(anyhow::Error),
    LintFail(usize),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Model(_) | Failure::LintFail(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Io { .. } | DataError::Csv(_) | DataError::Ragged { .. } | DataError::DuplicateColumn(_) => {
            Failure::Io(e.into())
        }
        DataError::UnknownColumn(_) => Failure::Usage(e.into()),
        other => Failure::Model(other.into()),
    }
}

fn design_failure(e: DesignError) -> Failure {
    match e {
        DesignError::Data(d) => data_failure(d),
        other => Failure::Model(other.into()),
    }
}

type Res<T> = Result<T, Failure>;

struct Out {
    json: bool,
}

impl Out {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Res<()> {
        let s = if self.json {
            serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.into()))? + "\n"
        } else {
            text()
        };
        let mut out = std::io::stdout().lock();
        out.write_all(s.as_bytes()).map_err(|e| Failure::Io(e.into()))
    }
}

fn parse_model_formula(text: &str) -> Res<FormulaAst> {
    parse_formula(text)
        .map(|a| expand_terms(&a))
        .map_err(|e| Failure::Usage(anyhow!("{e}\n  {text}\n  {:>width$}", "^", width = e.pos + 1)))
}

struct ModelSetup {
    method: Method,
    contrasts: ContrastScheme,
    centering: CenteringPolicy,
}

fn model_setup(m: &ModelArgs) -> Res<ModelSetup> {
    let method = match m.method {
        MethodArg::Reml => Method::Reml,
        MethodArg::Ml => Method::Ml,
    };
    let contrasts = match m.contrasts {
        ContrastArg::Sum => {
            if !m.references.is_empty() {
                return Err(Failure::Usage(anyhow!("--reference only applies to treatment contrasts")));
            }
            ContrastScheme::Sum
        }
        ContrastArg::Treatment => {
            let mut reference = BTreeMap::new();
            for r in &m.references {
                let (f, l) = r
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(anyhow!("--reference expects FACTOR=LEVEL, got `{r}`")))?;
                reference.insert(f.to_string(), l.to_string());
            }
            ContrastScheme::Treatment { reference }
        }
    };
    let mut centering = CenteringPolicy::none();
    for c in &m.centering {
        let (v, how) = c
            .split_once('=')
            .ok_or_else(|| Failure::Usage(anyhow!("--center expects VAR=first|mean, got `{c}`")))?;
        let how = match how {
            "first" => Centering::AtFirstObservation,
            "mean" => Centering::AtMean,
            "none" => Centering::None,
            other => return Err(Failure::Usage(anyhow!("unknown centering `{other}`"))),
        };
        centering = centering.with(v, how);
    }
    Ok(ModelSetup {
        method,
        contrasts,
        centering,
    })
}

fn load(path: &Path) -> Res<Dataset> {
    read_csv(path, &HashMap::new())
        .map(|(d, _)| d)
        .map_err(data_failure)
}

fn fit_model(ds: &Dataset, ast: &FormulaAst, setup: &ModelSetup) -> Res<LmmFit> {
    let mats = build_matrices(ds, ast, &setup.contrasts, &setup.centering).map_err(design_failure)?;
    let opts = match setup.method {
        Method::Reml => FitOptions::reml(),
        Method::Ml => FitOptions::ml(),
    };
    match ranfx::fit_lmm(&mats, &opts) {
        Ok(f) => Ok(f),
        Err(FitError::NotConverged { evals, best }) => {
            eprintln!("warning: optimizer stopped after {evals} evaluations without converging");
            Ok(*best)
        }
        Err(e) => Err(Failure::Model(e.into())),
    }
}

fn run_lint(ds: &Dataset, ast: &FormulaAst, args: &LintArgs) -> Res<LintReport> {
    let candidates: Vec<String> = if args.factors.is_empty() {
        ast.referenced_columns()
            .into_iter()
            .filter(|c| *c != ast.response.column && *c != args.subject)
            .collect()
    } else {
        args.factors.clone()
    };
    let refs: Vec<&str> = candidates.iter().map(|s| s.as_str()).collect();
    let lint_err = |e: ranfx::structlint::LintError| match e {
        ranfx::structlint::LintError::Data(d) => data_failure(d),
        other => Failure::Model(other.into()),
    };
    let mut design = infer_design(ds, &args.subject, &refs).map_err(lint_err)?;
    for s in &args.sampling {
        design
            .assert_role(ds, s, FactorRole::Sampling)
            .map_err(lint_err)?;
    }
    for n in &args.nested {
        let (inner, outer) = n
            .split_once(':')
            .ok_or_else(|| Failure::Usage(anyhow!("--nested expects INNER:OUTER, got `{n}`")))?;
        design.assert_nested(ds, inner, outer).map_err(lint_err)?;
    }
    Ok(lint_structure(ast, &design))
}

fn run(cli: Cli) -> Res<()> {
    let out = Out { json: cli.json };
    match cli.command {
        Command::Xtab { data, a, b } => {
            let ds = load(&data)?;
            let inc = cross_tabulate(&ds, &a, &b).map_err(data_failure)?;
            let rel = classify_relation(&inc).map_err(data_failure)?;
            #[derive(Serialize)]
            struct Xtab<'a> {
                incidence: &'a ranfx::IncidenceMatrix,
                relation: ranfx::FactorRelation,
                description: String,
            }
            let description = rel.describe(&a, &b);
            out.emit(
                &Xtab {
                    incidence: &inc,
                    relation: rel,
                    description: description.clone(),
                },
                || format!("{inc}\n{description}\n"),
            )
        }
        Command::Lint { data, formula, lint } => {
            let ast = parse_model_formula(&formula)?;
            let ds = load(&data)?;
            let report = run_lint(&ds, &ast, &lint)?;
            out.emit(&report, || report.to_string())?;
            if report.verdict == Verdict::Fail {
                return Err(Failure::LintFail(errors(&report)));
            }
            Ok(())
        }
        Command::Fit {
            data,
            formula,
            model,
            negexp,
            start,
        } => {
            let ast = parse_model_formula(&formula)?;
            let setup = model_setup(&model)?;
            if negexp {
                let fixed = ast.fixed_terms();
                let (time, subject) = match (fixed.as_slice(), ast.random.as_slice()) {
                    ([t], [r]) if t.vars.len() == 1 && r.group_factors().len() == 1 => {
                        (t.vars[0].name.clone(), r.group_factors()[0].clone())
                    }
                    _ => {
                        return Err(Failure::Usage(anyhow!(
                            "--negexp expects a formula of the form `y ~ time + (1|subject)`"
                        )))
                    }
                };
                let start = start
                    .map(|s| NegExpParams::new(s[0], s[1], s[2]))
                    .unwrap_or_default();
                let ds = load(&data)?;
                let fit = fit_negexp_population(&ds, &ast.response.column, &time, &subject, start)
                    .map_err(|e| match e {
                        ranfx::nonlinear::NonlinearError::Data(d) => data_failure(d),
                        other => Failure::Model(other.into()),
                    })?;
                return out.emit(&fit, || fit.to_string());
            }
            let ds = load(&data)?;
            let fit = fit_model(&ds, &ast, &setup)?;
            let summary = fit.summary();
            out.emit(&summary, || summary.to_string())
        }
        Command::Anova {
            data,
            formula,
            model,
            lint,
            force,
            classical,
        } => {
            let ast = parse_model_formula(&formula)?;
            let setup = model_setup(&model)?;
            let ds = load(&data)?;
            if !force {
                if ds.has_column(&lint.subject) {
                    let report = run_lint(&ds, &ast, &lint)?;
                    if report.verdict == Verdict::Fail {
                        if !out.json {
                            eprint!("{report}");
                        }
                        eprintln!("refusing to fit a structure that fails the structure check (use --force to override)");
                        return Err(Failure::LintFail(errors(&report)));
                    }
                    for f in &report.findings {
                        eprintln!("{:?} [{:?}] {}", f.severity, f.code, f.message);
                    }
                } else {
                    eprintln!(
                        "note: no `{}` column; structure check skipped (set --subject)",
                        lint.subject
                    );
                }
            }
            let table = if classical {
                let within: Vec<String> = ast
                    .fixed_terms()
                    .iter()
                    .filter(|t| t.vars.len() == 1)
                    .map(|t| t.vars[0].name.clone())
                    .collect();
                let refs: Vec<&str> = within.iter().map(|s| s.as_str()).collect();
                classical_rm_anova(&ds, &ast.response.column, &lint.subject, &refs).map_err(|e| match e {
                    ranfx::inference::InferenceError::Data(d) => data_failure(d),
                    other => Failure::Model(other.into()),
                })?
            } else {
                let fit = fit_model(&ds, &ast, &setup)?;
                anova_satterthwaite(&fit)
            };
            out.emit(&table, || table.to_string())
        }
        Command::Predict {
            data,
            formula,
            model,
            newdata,
            population,
            output,
        } => {
            let ast = parse_model_formula(&formula)?;
            let setup = model_setup(&model)?;
            let ds = load(&data)?;
            let target = match &newdata {
                Some(p) => load(p)?,
                None => ds.clone(),
            };
            let fit = fit_model(&ds, &ast, &setup)?;
            let rows = fit.mats.kept_rows.clone();
            let (target, fitted) = if newdata.is_some() {
                let v = predict(&fit, &target, !population).map_err(design_failure)?;
                (target, v)
            } else {
                let kept = target.take_rows(&rows);
                let v = predict(&fit, &kept, !population).map_err(design_failure)?;
                (kept, v)
            };
            let mut result = target;
            result
                .push_column("fitted", ranfx::Column::from_f64(&fitted))
                .map_err(data_failure)?;
            if out.json {
                return out.emit(&serde_json::json!({ "fitted": fitted }), String::new);
            }
            write_dataset(&result, output.as_deref())
        }
        Command::Simulate {
            family,
            config,
            seed,
            settings,
            output,
        } => {
            let sim_err = |e: ranfx::simgen::SimError| Failure::Usage(e.into());
            let mut cfg = match (&config, &family) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Failure::Io(anyhow!("cannot read {}: {e}", p.display())))?;
                    SimConfig::from_key_values(&text).map_err(sim_err)?
                }
                (None, Some(f)) => SimConfig::default_for(f).map_err(sim_err)?,
                (None, None) => {
                    return Err(Failure::Usage(anyhow!("give a family or --config")));
                }
            };
            if let Some(s) = seed {
                cfg.set("seed", &s.to_string()).map_err(sim_err)?;
            }
            for kv in &settings {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim()).map_err(sim_err)?;
            }
            let ds = simulate(&cfg).map_err(|e| Failure::Model(e.into()))?;
            let output = output.or_else(|| {
                std::env::var_os("RANFX_OUT_DIR").map(|dir| {
                    let fam = match &cfg {
                        SimConfig::Longitudinal(_) => "longitudinal",
                        SimConfig::Factorial(_) => "factorial",
                        SimConfig::Crossed(_) => "crossed",
                    };
                    PathBuf::from(dir).join(format!("{fam}_seed{}.csv", cfg.seed()))
                })
            });
            if out.json {
                let mut records = Vec::with_capacity(ds.n_rows());
                for r in 0..ds.n_rows() {
                    let mut obj = serde_json::Map::new();
                    for (name, col) in ds.columns() {
                        let v = if col.is_factor() {
                            col.label(r).map(serde_json::Value::from)
                        } else {
                            col.value(r).map(serde_json::Value::from)
                        };
                        obj.insert(name.to_string(), v.unwrap_or(serde_json::Value::Null));
                    }
                    records.push(serde_json::Value::Object(obj));
                }
                if let Some(p) = &output {
                    write_dataset(&ds, Some(p))?;
                }
                return out.emit(&records, String::new);
            }
            write_dataset(&ds, output.as_deref())
        }
        Command::Compare {
            data,
            formula_a,
            formula_b,
            model,
        } => {
            let a = parse_model_formula(&formula_a)?;
            let b = parse_model_formula(&formula_b)?;
            let setup = model_setup(&model)?;
            let ds = load(&data)?;
            let fa = fit_model(&ds, &a, &setup)?;
            let fb = fit_model(&ds, &b, &setup)?;
            let rec = compare_models(&fa, &fb).map_err(|e| Failure::Model(e.into()))?;
            out.emit(&rec, || rec.to_string())
        }
    }
}

fn write_dataset(ds: &Dataset, path: Option<&Path>) -> Res<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Failure::Io(anyhow!("cannot create {}: {e}", dir.display())))?;
            }
            let f = std::fs::File::create(p)
                .map_err(|e| Failure::Io(anyhow!("cannot write {}: {e}", p.display())))?;
            ds.write_csv(std::io::BufWriter::new(f))
                .map_err(|e| Failure::Io(e.into()))?;
            eprintln!("wrote {} rows to {}", ds.n_rows(), p.display());
            Ok(())
        }
        None => ds
            .write_csv(std::io::stdout().lock())
            .map_err(|e| Failure::Io(e.into())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) => eprintln!("error: {e}"),
                Failure::Model(e) => eprintln!("error: {e}"),
                Failure::Io(e) => eprintln!("error: {e}"),
                Failure::LintFail(n) => eprintln!("error: random-effects structure check failed with {n} error(s)"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn errors(r: &LintReport) -> usize {
    r.findings
        .iter()
        .filter(|f| f.severity == ranfx::structlint::Severity::Error)
        .count()
}
