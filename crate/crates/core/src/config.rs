//! Run configuration read from TOML.
//!
//! Values are merged as defaults, then the file, then `section.key=value`
//! overrides from the command line. Unknown keys, type mismatches and
//! out-of-range values are reported with the line they appear on (line 0
//! for command-line overrides).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decomp::{SolverParams, Variant, GAMMA_GRID_2D};
use crate::error::{Error, Result};
use crate::pca::ImputeFallback;
use crate::registration::{RegParams, Similarity};
use crate::rpca::{AlmParams, LAMBDA_GRID_2D};
use crate::synth::{PhantomSpec, NEAR_MM};

/// Comparison arms of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain registration of the atlas to the tumor image.
    Direct,
    /// Registration with the ground-truth tumor masked out of the similarity.
    Masked,
    /// Pipeline with the low-rank plus sparse decomposition.
    Rpca,
    /// Pipeline with the PCA model and no regularization step.
    Pca0,
    Pca1,
    Pca2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Direct,
        Method::Masked,
        Method::Rpca,
        Method::Pca0,
        Method::Pca1,
        Method::Pca2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Masked => "masked",
            Method::Rpca => "rpca",
            Method::Pca0 => "pca0",
            Method::Pca1 => "pca1",
            Method::Pca2 => "pca2",
        }
    }

    /// Regularization steps of a PCA arm.
    pub fn reg_steps(self) -> Option<usize> {
        match self {
            Method::Pca0 => Some(0),
            Method::Pca1 => Some(1),
            Method::Pca2 => Some(2),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// First case seed; cases use `seed, seed + 1, ...`.
    pub seed: u64,
    pub cases: usize,
    pub dims: Vec<usize>,
    pub spacing: f64,
    pub max_disp: f64,
    /// Size of the normal population the basis is built from.
    pub population: usize,
    pub population_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 10,
            dims: vec![48, 48],
            spacing: 1.0,
            max_disp: 3.0,
            population: 250,
            population_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub modes: usize,
    pub impute_fallback: ImputeFallback,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            modes: 150,
            impute_fallback: ImputeFallback::GlobalMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Fidelity weight of the PCA arms; 3.0 scored best on held-out 48×48 phantoms.
    pub gamma: f64,
    pub variant: Variant,
    pub max_iter: usize,
    pub tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub theta: f64,
    pub warm_start: bool,
    /// Sparse weight of the LRS arm.
    pub lambda: f64,
    pub rho: f64,
    pub alm_tol: f64,
    pub alm_max_iter: usize,
    /// Population images stacked with the test image in the LRS arm.
    pub lrs_population: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let solver = SolverParams::default();
        let alm = AlmParams::default();
        Self {
            gamma: 3.0,
            variant: Variant::Rof,
            max_iter: solver.max_iter,
            tol: solver.tol,
            tau: None,
            sigma: None,
            theta: solver.theta,
            warm_start: solver.warm_start,
            lambda: 0.01,
            rho: alm.rho,
            alm_tol: alm.tol,
            alm_max_iter: alm.max_iter,
            lrs_population: 50,
        }
    }
}

impl SolverConfig {
    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            max_iter: self.max_iter,
            tol: self.tol,
            tau: self.tau,
            sigma: self.sigma,
            theta: self.theta,
            warm_start: self.warm_start,
        }
    }

    pub fn alm_params(&self) -> AlmParams {
        AlmParams {
            mu0: None,
            rho: self.rho,
            tol: self.alm_tol,
            max_iter: self.alm_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iters_per_level: usize,
    pub smoothing_sigma: f64,
    pub similarity: Similarity,
    pub step: f64,
    pub alternations: usize,
    pub inverse_iterations: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        let reg = RegParams::default();
        Self {
            levels: reg.levels,
            iters_per_level: reg.iters_per_level,
            smoothing_sigma: reg.smoothing_sigma,
            similarity: reg.similarity,
            step: reg.step,
            alternations: crate::pipeline::DEFAULT_ALTERNATIONS,
            inverse_iterations: crate::pipeline::INVERSE_ITERATIONS,
        }
    }
}

impl RegistrationConfig {
    pub fn reg_params(&self) -> RegParams {
        RegParams {
            levels: self.levels,
            iters_per_level: self.iters_per_level,
            smoothing_sigma: self.smoothing_sigma,
            similarity: self.similarity,
            step: self.step,
            mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub methods: Vec<Method>,
    pub near_mm: f64,
    pub folds: usize,
    /// Arm whose parameter is cross-validated (`rpca` tunes lambda, PCA arms tune gamma).
    pub cv_method: Method,
    pub gamma_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            near_mm: NEAR_MM,
            folds: 10,
            cv_method: Method::Pca1,
            gamma_grid: GAMMA_GRID_2D.to_vec(),
            lambda_grid: LAMBDA_GRID_2D.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    /// Registration command with `{moving}`, `{fixed}`, `{out}`; empty uses the built-in registrar.
    pub command_template: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub basis: BasisConfig,
    pub solver: SolverConfig,
    pub registration: RegistrationConfig,
    pub evaluate: EvaluateConfig,
    pub external: ExternalConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]`, or 0 if it is not in the text.
fn key_line(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return n + 1;
                }
            }
        }
    }
    0
}

impl RunConfig {
    /// Parses TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        config
            .validate()
            .map_err(|(section, key, message)| Error::Config {
                line: key_line(text, section, key),
                message: format!("{section}.{key}: {message}"),
            })?;
        Ok(config)
    }

    /// Reads `path` (or starts from defaults) and applies `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config {
                line: 0,
                message: format!("cannot read {}: {e}", p.display()),
            })?,
            None => String::new(),
        };
        let base = Self::from_toml(&text)?;
        if overrides.is_empty() {
            return Ok(base);
        }
        let cli_error = |message: String| Error::Config { line: 0, message };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| cli_error(e.to_string()))?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| cli_error(format!("override {item:?} is not section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| cli_error(format!("override {item:?} lacks a section")))?;
            let value = parse_value(raw.trim());
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let section_table = entry
                .as_table_mut()
                .ok_or_else(|| cli_error(format!("{section} is not a section")))?;
            section_table.insert(key.to_string(), value);
        }
        let config: RunConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    cli_error(format!("command line: {}", e.message().trim()))
                })?;
        config.validate().map_err(|(section, key, message)| {
            cli_error(format!("command line {section}.{key}: {message}"))
        })?;
        Ok(config)
    }

    /// Canonical TOML rendering, used as the experiment snapshot.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        fn check(
            ok: bool,
            section: &'static str,
            key: &'static str,
            what: &str,
        ) -> std::result::Result<(), (&'static str, &'static str, String)> {
            if ok {
                Ok(())
            } else {
                Err((section, key, what.to_string()))
            }
        }
        let d = &self.data;
        check(
            matches!(d.dims.len(), 2 | 3),
            "data",
            "dims",
            "needs 2 or 3 axes",
        )?;
        check(
            d.dims.iter().all(|&n| n >= 32),
            "data",
            "dims",
            "every axis needs at least 32 voxels",
        )?;
        check(d.cases >= 1, "data", "cases", "must be at least 1")?;
        check(d.spacing > 0.0, "data", "spacing", "must be positive")?;
        check(d.max_disp >= 0.0, "data", "max_disp", "must be nonnegative")?;
        check(
            d.population >= 2,
            "data",
            "population",
            "must be at least 2",
        )?;
        check(
            self.basis.modes >= 1,
            "basis",
            "modes",
            "must be at least 1",
        )?;
        check(
            self.basis.modes < d.population,
            "basis",
            "modes",
            "must be below data.population",
        )?;
        let s = &self.solver;
        check(
            s.gamma > 0.0 && s.gamma.is_finite(),
            "solver",
            "gamma",
            "must be positive",
        )?;
        check(s.max_iter >= 1, "solver", "max_iter", "must be at least 1")?;
        check(s.tol >= 0.0, "solver", "tol", "must be nonnegative")?;
        check(
            s.tau.is_none_or(|t| t > 0.0),
            "solver",
            "tau",
            "must be positive",
        )?;
        check(
            s.sigma.is_none_or(|t| t > 0.0),
            "solver",
            "sigma",
            "must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&s.theta),
            "solver",
            "theta",
            "must lie in [0, 1]",
        )?;
        check(s.lambda > 0.0, "solver", "lambda", "must be positive")?;
        check(s.rho >= 1.0, "solver", "rho", "must be at least 1")?;
        check(s.alm_tol > 0.0, "solver", "alm_tol", "must be positive")?;
        check(
            s.alm_max_iter >= 1,
            "solver",
            "alm_max_iter",
            "must be at least 1",
        )?;
        check(
            s.lrs_population >= 1,
            "solver",
            "lrs_population",
            "must be at least 1",
        )?;
        check(
            s.lrs_population <= d.population,
            "solver",
            "lrs_population",
            "cannot exceed data.population",
        )?;
        let r = &self.registration;
        check(
            r.levels >= 1,
            "registration",
            "levels",
            "must be at least 1",
        )?;
        check(
            r.smoothing_sigma >= 0.0,
            "registration",
            "smoothing_sigma",
            "must be nonnegative",
        )?;
        check(r.step > 0.0, "registration", "step", "must be positive")?;
        check(
            r.alternations >= 1,
            "registration",
            "alternations",
            "must be at least 1",
        )?;
        let e = &self.evaluate;
        check(
            !e.methods.is_empty(),
            "evaluate",
            "methods",
            "must not be empty",
        )?;
        check(e.near_mm > 0.0, "evaluate", "near_mm", "must be positive")?;
        check(e.folds >= 2, "evaluate", "folds", "must be at least 2")?;
        check(
            !e.gamma_grid.is_empty() && e.gamma_grid.iter().all(|&g| g > 0.0),
            "evaluate",
            "gamma_grid",
            "needs positive values",
        )?;
        check(
            !e.lambda_grid.is_empty() && e.lambda_grid.iter().all(|&l| l > 0.0),
            "evaluate",
            "lambda_grid",
            "needs positive values",
        )?;
        check(
            matches!(
                e.cv_method,
                Method::Rpca | Method::Pca0 | Method::Pca1 | Method::Pca2
            ),
            "evaluate",
            "cv_method",
            "must be rpca or a pca arm",
        )?;
        let t = &self.external.command_template;
        check(
            t.is_empty()
                || ["{moving}", "{fixed}", "{out}"]
                    .iter()
                    .all(|k| t.contains(k)),
            "external",
            "command_template",
            "needs {moving}, {fixed} and {out}",
        )?;
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let d = &self.data;
        let mut spec = if d.dims.len() == 3 {
            PhantomSpec::cube(d.dims[0])
        } else {
            PhantomSpec::square(d.dims[0])
        };
        spec.dims = d.dims.clone();
        spec.spacing = d.spacing;
        spec.max_disp = d.max_disp;
        spec
    }

    pub fn case_seeds(&self) -> Vec<u64> {
        (0..self.data.cases as u64)
            .map(|i| self.data.seed + i)
            .collect()
    }
}

/// Reads an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
