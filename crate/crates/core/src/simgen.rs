//! Seeded generators for the three design families: longitudinal growth
//! curves, a factorial within-subjects experiment and a crossed
//! subjects-by-stimuli experiment.
//!
//! Randomness comes from ChaCha20 seeded with `seed`; every random component
//! (subject deviates, noise, ...) reads its own stream, so adding a component
//! never perturbs the draws of the others.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataframe::{Column, Dataset};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("covariance for {0} is not positive semidefinite")]
    NotPsd(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

// stream ids
const S_SUBJECT: u64 = 1;
const S_SITE: u64 = 2;
const S_NOISE: u64 = 3;
const S_STIMULUS: u64 = 4;
const S_MISSING: u64 = 5;
const S_SUBJ_A: u64 = 6;
const S_SUBJ_B: u64 = 7;

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Lower Cholesky-like factor of a PSD covariance; zero variances are
/// allowed.
fn psd_factor(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let k = cov.nrows();
    let scale = cov.diagonal().iter().copied().fold(0.0, f64::max).max(1e-300);
    let mut l = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut d = cov[(j, j)];
        for c in 0..j {
            d -= l[(j, c)] * l[(j, c)];
        }
        if d < -1e-10 * scale {
            return Err(SimError::NotPsd(what.into()));
        }
        let d = d.max(0.0).sqrt();
        l[(j, j)] = d;
        for i in j + 1..k {
            let mut s = cov[(i, j)];
            for c in 0..j {
                s -= l[(i, c)] * l[(j, c)];
            }
            if d > 0.0 {
                l[(i, j)] = s / d;
            } else if s.abs() > 1e-10 * scale {
                return Err(SimError::NotPsd(what.into()));
            }
        }
    }
    Ok(l)
}

fn cov_from(sd: &[f64], corr: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let k = sd.len();
    if corr.nrows() != k || corr.ncols() != k {
        return Err(SimError::Invalid(format!("{what}: correlation matrix must be {k}x{k}")));
    }
    for i in 0..k {
        if sd[i] < 0.0 || !sd[i].is_finite() {
            return Err(SimError::Invalid(format!("{what}: SDs must be >= 0")));
        }
        for j in 0..k {
            let c = corr[(i, j)];
            if !(-1.0..=1.0).contains(&c) || (corr[(j, i)] - c).abs() > 1e-12 {
                return Err(SimError::Invalid(format!(
                    "{what}: correlations must be symmetric and within [-1, 1]"
                )));
            }
        }
    }
    Ok(DMatrix::from_fn(k, k, |i, j| sd[i] * sd[j] * corr[(i, j)]))
}

fn check_sd(v: f64, what: &str) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SimError::Invalid(format!("{what} must be a finite value >= 0")))
    }
}

fn label(prefix: &str, i: usize, n: usize) -> String {
    let width = n.to_string().len().max(2);
    format!("{prefix}{:0width$}", i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_times: usize,
    /// Sites; 0 omits the site column.
    pub n_sites: usize,
    /// Group label and its (intercept, linear, quadratic) coefficients.
    pub groups: Vec<(String, [f64; 3])>,
    /// SDs of the subject intercept, slope and quadratic deviates.
    pub subject_sd: [f64; 3],
    pub subject_corr: DMatrix<f64>,
    pub site_sd: f64,
    pub noise_sd: f64,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        LongitudinalConfig {
            seed: 1,
            n_subjects: 40,
            n_times: 18,
            n_sites: 4,
            groups: vec![
                ("A".into(), [20.0, 4.0, -0.12]),
                ("B".into(), [35.0, 4.5, -0.15]),
                ("C".into(), [50.0, 3.0, -0.10]),
            ],
            subject_sd: [8.0, 1.0, 0.05],
            subject_corr: DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 0.3, -0.2, 0.3, 1.0, -0.5, -0.2, -0.5, 1.0],
            ),
            site_sd: 0.0,
            noise_sd: 3.0,
        }
    }
}

/// Columns `subject, site, AIS_grade, time, functioning`; subjects rotate
/// through sites and groups, times are `0..n_times`.
pub fn sim_longitudinal(cfg: &LongitudinalConfig) -> Result<Dataset> {
    if cfg.n_subjects < 2 || cfg.n_times < 1 || cfg.groups.is_empty() {
        return Err(SimError::Invalid(
            "need >= 2 subjects, >= 1 time point and >= 1 group".into(),
        ));
    }
    check_sd(cfg.site_sd, "site SD")?;
    check_sd(cfg.noise_sd, "noise SD")?;
    let cov = cov_from(&cfg.subject_sd, &cfg.subject_corr, "subject deviates")?;
    let l = psd_factor(&cov, "subject deviates")?;
    let mut rs = stream(cfg.seed, S_SUBJECT);
    let mut rsite = stream(cfg.seed, S_SITE);
    let mut rn = stream(cfg.seed, S_NOISE);
    let site_dev: Vec<f64> = (0..cfg.n_sites)
        .map(|_| cfg.site_sd * normal(&mut rsite))
        .collect();
    let (mut subj, mut site, mut grade, mut time, mut y) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n_subjects {
        let z = DVector::from_fn(3, |_, _| normal(&mut rs));
        let dev = &l * z;
        let (gname, coef) = &cfg.groups[i % cfg.groups.len()];
        let s = if cfg.n_sites > 0 { i % cfg.n_sites } else { 0 };
        for t in 0..cfg.n_times {
            let tf = t as f64;
            let mean = (coef[0] + dev[0]) + (coef[1] + dev[1]) * tf + (coef[2] + dev[2]) * tf * tf;
            let site_eff = if cfg.n_sites > 0 { site_dev[s] } else { 0.0 };
            subj.push(label("S", i, cfg.n_subjects));
            site.push(label("site", s, cfg.n_sites.max(1)));
            grade.push(gname.clone());
            time.push(tf);
            y.push(mean + site_eff + cfg.noise_sd * normal(&mut rn));
        }
    }
    let mut cols = vec![("subject", Column::from_labels(&subj))];
    if cfg.n_sites > 0 {
        cols.push(("site", Column::from_labels(&site)));
    }
    cols.push(("AIS_grade", Column::from_labels(&grade)));
    cols.push(("time", Column::from_f64(&time)));
    cols.push(("functioning", Column::from_f64(&y)));
    Ok(Dataset::from_columns(cols).expect("consistent lengths"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorialConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub altitude_levels: Vec<String>,
    pub condition_levels: Vec<String>,
    pub replicates: usize,
    /// Cell means indexed `[altitude][condition]`.
    pub cell_means: Vec<Vec<f64>>,
    pub subject_sd: f64,
    pub subject_altitude_sd: f64,
    pub subject_condition_sd: f64,
    pub noise_sd: f64,
}

impl Default for FactorialConfig {
    fn default() -> Self {
        FactorialConfig {
            seed: 1,
            n_subjects: 10,
            altitude_levels: vec!["high".into(), "low".into()],
            condition_levels: vec!["delay".into(), "imm".into(), "rest".into()],
            replicates: 1,
            cell_means: vec![vec![80.0, 92.0, 70.0], vec![72.0, 86.0, 64.0]],
            subject_sd: 8.0,
            subject_altitude_sd: 4.0,
            subject_condition_sd: 4.0,
            noise_sd: 2.0,
        }
    }
}

/// Columns `subject, altitude, condition, heart_rate`; one row per subject x
/// altitude x condition x replicate.
pub fn sim_factorial(cfg: &FactorialConfig) -> Result<Dataset> {
    let (na, nc) = (cfg.altitude_levels.len(), cfg.condition_levels.len());
    if cfg.n_subjects < 2 || na < 1 || nc < 1 || cfg.replicates < 1 {
        return Err(SimError::Invalid(
            "need >= 2 subjects, >= 1 level per factor and >= 1 replicate".into(),
        ));
    }
    if cfg.cell_means.len() != na || cfg.cell_means.iter().any(|r| r.len() != nc) {
        return Err(SimError::Invalid(format!("cell means must be {na}x{nc}")));
    }
    for (v, what) in [
        (cfg.subject_sd, "subject SD"),
        (cfg.subject_altitude_sd, "subject:altitude SD"),
        (cfg.subject_condition_sd, "subject:condition SD"),
        (cfg.noise_sd, "noise SD"),
    ] {
        check_sd(v, what)?;
    }
    let mut rs = stream(cfg.seed, S_SUBJECT);
    let mut ra = stream(cfg.seed, S_SUBJ_A);
    let mut rc = stream(cfg.seed, S_SUBJ_B);
    let mut rn = stream(cfg.seed, S_NOISE);
    let (mut subj, mut alt, mut cond, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n_subjects {
        let s_dev = cfg.subject_sd * normal(&mut rs);
        let a_dev: Vec<f64> = (0..na).map(|_| cfg.subject_altitude_sd * normal(&mut ra)).collect();
        let c_dev: Vec<f64> = (0..nc).map(|_| cfg.subject_condition_sd * normal(&mut rc)).collect();
        for a in 0..na {
            for c in 0..nc {
                for _ in 0..cfg.replicates {
                    subj.push(label("S", i, cfg.n_subjects));
                    alt.push(cfg.altitude_levels[a].clone());
                    cond.push(cfg.condition_levels[c].clone());
                    y.push(
                        cfg.cell_means[a][c]
                            + s_dev
                            + a_dev[a]
                            + c_dev[c]
                            + cfg.noise_sd * normal(&mut rn),
                    );
                }
            }
        }
    }
    Ok(Dataset::from_columns(vec![
        ("subject", Column::from_labels(&subj)),
        ("altitude", Column::from_labels(&alt)),
        ("condition", Column::from_labels(&cond)),
        ("heart_rate", Column::from_f64(&y)),
    ])
    .expect("consistent lengths"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossedConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_stimuli: usize,
    pub modality_levels: [String; 2],
    /// log-RT intercept and the effect of the second modality
    pub intercept: f64,
    pub modality_effect: f64,
    pub subject_sd: f64,
    pub subject_slope_sd: f64,
    pub subject_corr: f64,
    pub stimulus_sd: f64,
    pub noise_sd: f64,
    /// Fraction of trials dropped at random.
    pub missing_rate: f64,
}

impl Default for CrossedConfig {
    fn default() -> Self {
        CrossedConfig {
            seed: 1,
            n_subjects: 53,
            n_stimuli: 543,
            modality_levels: ["audio".into(), "visual".into()],
            intercept: 6.5,
            modality_effect: 0.05,
            subject_sd: 0.152,
            subject_slope_sd: 0.1,
            subject_corr: 0.2,
            stimulus_sd: 0.017,
            noise_sd: 0.25,
            missing_rate: 0.0,
        }
    }
}

/// Columns `subject, stimulus, modality, RT`. Each subject sees every
/// stimulus once, in modality `(subject + stimulus) mod 2`; RT is on the
/// raw scale (log-RT follows the linear model).
pub fn sim_crossed(cfg: &CrossedConfig) -> Result<Dataset> {
    if cfg.n_subjects < 2 || cfg.n_stimuli < 2 {
        return Err(SimError::Invalid("need >= 2 subjects and >= 2 stimuli".into()));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(SimError::Invalid("missing rate must be in [0, 1)".into()));
    }
    check_sd(cfg.stimulus_sd, "stimulus SD")?;
    check_sd(cfg.noise_sd, "noise SD")?;
    let corr = DMatrix::from_row_slice(2, 2, &[1.0, cfg.subject_corr, cfg.subject_corr, 1.0]);
    let cov = cov_from(&[cfg.subject_sd, cfg.subject_slope_sd], &corr, "subject deviates")?;
    let l = psd_factor(&cov, "subject deviates")?;
    let mut rs = stream(cfg.seed, S_SUBJECT);
    let mut rst = stream(cfg.seed, S_STIMULUS);
    let mut rn = stream(cfg.seed, S_NOISE);
    let mut rm = stream(cfg.seed, S_MISSING);
    let subj_dev: Vec<DVector<f64>> = (0..cfg.n_subjects)
        .map(|_| &l * DVector::from_fn(2, |_, _| normal(&mut rs)))
        .collect();
    let stim_dev: Vec<f64> = (0..cfg.n_stimuli)
        .map(|_| cfg.stimulus_sd * normal(&mut rst))
        .collect();
    let (mut subj, mut stim, mut modality, mut rt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n_subjects {
        for j in 0..cfg.n_stimuli {
            let m = (i + j) % 2;
            let noise = normal(&mut rn);
            let u: f64 = rand::Rng::random(&mut rm);
            if u < cfg.missing_rate {
                continue;
            }
            let log_rt = cfg.intercept
                + subj_dev[i][0]
                + stim_dev[j]
                + m as f64 * (cfg.modality_effect + subj_dev[i][1])
                + cfg.noise_sd * noise;
            subj.push(label("S", i, cfg.n_subjects));
            stim.push(label("W", j, cfg.n_stimuli));
            modality.push(cfg.modality_levels[m].clone());
            rt.push(log_rt.exp());
        }
    }
    Ok(Dataset::from_columns(vec![
        ("subject", Column::from_labels(&subj)),
        ("stimulus", Column::from_labels(&stim)),
        ("modality", Column::from_labels(&modality)),
        ("RT", Column::from_f64(&rt)),
    ])
    .expect("consistent lengths"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimConfig {
    Longitudinal(LongitudinalConfig),
    Factorial(FactorialConfig),
    Crossed(CrossedConfig),
}

impl SimConfig {
    pub fn default_for(family: &str) -> Result<Self> {
        match family.to_ascii_lowercase().as_str() {
            "longitudinal" => Ok(SimConfig::Longitudinal(Default::default())),
            "factorial" => Ok(SimConfig::Factorial(Default::default())),
            "crossed" => Ok(SimConfig::Crossed(Default::default())),
            other => Err(SimError::Invalid(format!(
                "unknown family `{other}` (longitudinal, factorial, crossed)"
            ))),
        }
    }

    /// Parse `key = value` lines (`#` starts a comment). A `family` key
    /// selects the generator; other keys override its defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::Invalid(format!("line {}: expected key = value", no + 1)))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        let family = pairs
            .remove("family")
            .ok_or_else(|| SimError::Invalid("missing `family` key".into()))?;
        let mut cfg = Self::default_for(&family)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        match self {
            SimConfig::Longitudinal(c) => c.seed,
            SimConfig::Factorial(c) => c.seed,
            SimConfig::Crossed(c) => c.seed,
        }
    }

    /// Override one setting by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| SimError::Invalid(format!("`{key}`: `{v}` is not a number")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| SimError::Invalid(format!("`{key}`: `{v}` is not a count")))
        };
        let list = |v: &str| -> Result<Vec<f64>> { v.split(',').map(|s| num(s.trim())).collect() };
        let unknown = || SimError::Invalid(format!("unknown setting `{key}`"));
        match self {
            SimConfig::Longitudinal(c) => match key {
                "seed" => c.seed = int(value)? as u64,
                "n_subjects" => c.n_subjects = int(value)?,
                "n_times" => c.n_times = int(value)?,
                "n_sites" => c.n_sites = int(value)?,
                "site_sd" => c.site_sd = num(value)?,
                "noise_sd" => c.noise_sd = num(value)?,
                "subject_sd" => {
                    let v = list(value)?;
                    if v.len() != 3 {
                        return Err(SimError::Invalid("subject_sd needs 3 values".into()));
                    }
                    c.subject_sd = [v[0], v[1], v[2]];
                }
                "subject_corr" => {
                    // r01, r02, r12
                    let v = list(value)?;
                    if v.len() != 3 {
                        return Err(SimError::Invalid("subject_corr needs r01,r02,r12".into()));
                    }
                    c.subject_corr =
                        DMatrix::from_row_slice(3, 3, &[1.0, v[0], v[1], v[0], 1.0, v[2], v[1], v[2], 1.0]);
                }
                _ => return Err(unknown()),
            },
            SimConfig::Factorial(c) => match key {
                "seed" => c.seed = int(value)? as u64,
                "n_subjects" => c.n_subjects = int(value)?,
                "replicates" => c.replicates = int(value)?,
                "subject_sd" => c.subject_sd = num(value)?,
                "subject_altitude_sd" => c.subject_altitude_sd = num(value)?,
                "subject_condition_sd" => c.subject_condition_sd = num(value)?,
                "noise_sd" => c.noise_sd = num(value)?,
                "cell_means" => {
                    let v = list(value)?;
                    let nc = c.condition_levels.len();
                    if v.len() != c.altitude_levels.len() * nc {
                        return Err(SimError::Invalid(format!(
                            "cell_means needs {} values",
                            c.altitude_levels.len() * nc
                        )));
                    }
                    c.cell_means = v.chunks(nc).map(|r| r.to_vec()).collect();
                }
                _ => return Err(unknown()),
            },
            SimConfig::Crossed(c) => match key {
                "seed" => c.seed = int(value)? as u64,
                "n_subjects" => c.n_subjects = int(value)?,
                "n_stimuli" => c.n_stimuli = int(value)?,
                "intercept" => c.intercept = num(value)?,
                "modality_effect" => c.modality_effect = num(value)?,
                "subject_sd" => c.subject_sd = num(value)?,
                "subject_slope_sd" => c.subject_slope_sd = num(value)?,
                "subject_corr" => c.subject_corr = num(value)?,
                "stimulus_sd" => c.stimulus_sd = num(value)?,
                "noise_sd" => c.noise_sd = num(value)?,
                "missing_rate" => c.missing_rate = num(value)?,
                _ => return Err(unknown()),
            },
        }
        Ok(())
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    match cfg {
        SimConfig::Longitudinal(c) => sim_longitudinal(c),
        SimConfig::Factorial(c) => sim_factorial(c),
        SimConfig::Crossed(c) => sim_crossed(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(sim_longitudinal(&Default::default()).unwrap().n_rows(), 720);
        assert_eq!(sim_factorial(&Default::default()).unwrap().n_rows(), 60);
        let two = FactorialConfig {
            replicates: 2,
            ..Default::default()
        };
        assert_eq!(sim_factorial(&two).unwrap().n_rows(), 120);
        let small = CrossedConfig {
            n_subjects: 4,
            n_stimuli: 6,
            ..Default::default()
        };
        assert_eq!(sim_crossed(&small).unwrap().n_rows(), 24);
    }

    #[test]
    fn deterministic() {
        let a = sim_factorial(&Default::default()).unwrap();
        let b = sim_factorial(&Default::default()).unwrap();
        assert_eq!(a, b);
        let c = sim_factorial(&FactorialConfig {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_cell_means() {
        let cfg = FactorialConfig {
            subject_sd: 0.0,
            subject_altitude_sd: 0.0,
            subject_condition_sd: 0.0,
            noise_sd: 0.0,
            ..Default::default()
        };
        let ds = sim_factorial(&cfg).unwrap();
        let y = ds.column("heart_rate").unwrap();
        assert_eq!(y.value(0), Some(80.0));
        assert_eq!(y.value(4), Some(86.0));
    }

    #[test]
    fn rejects_bad_covariance() {
        let cfg = LongitudinalConfig {
            subject_corr: DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0],
            ),
            ..Default::default()
        };
        assert!(matches!(sim_longitudinal(&cfg), Err(SimError::NotPsd(_))));
    }

    #[test]
    fn key_values() {
        let cfg = SimConfig::from_key_values("family = factorial\n# comment\nreplicates = 2\nseed=9").unwrap();
        match cfg {
            SimConfig::Factorial(c) => {
                assert_eq!(c.replicates, 2);
                assert_eq!(c.seed, 9);
            }
            _ => panic!(),
        }
        assert!(SimConfig::from_key_values("family = crossed\nbogus = 1").is_err());
    }
}
