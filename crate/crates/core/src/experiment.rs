//! On-disk experiments: synth, basis, per-case pipelines, evaluation.
//!
//! Every stage reads what the previous one wrote, so a stage can be rerun
//! on its own. Layout under the experiment directory:
//!
//! ```text
//! config.toml
//! synth/atlas.pfg
//! synth/population/img_NNNN.pfg
//! synth/<case>/{normal,tumor_image,tumor_mask,gt_field}.pfg, case.meta
//! basis/...
//! pipeline/<case>/{reference,<method>}.pfg
//! errors.csv, cv.csv, manifest.json, timings.json
//! ```
//!
//! Wall times live in `timings.json`, outside the manifest, so identical
//! runs give identical manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::memory::matrix_bytes;
use crate::pca::{build_basis, PcaBasis};
use crate::pfg;
use crate::pipeline::{run_pipeline, Decomposer, PipelineParams, Registrar};
use crate::registration::{DeformationField, RegParams};
use crate::synth::{
    atlas_phantom, cross_validate, deformation_error, region_partition, synth_case,
    synth_population, CaseBundle, CrossValidation, ErrorReport, PhantomSpec, Region,
};

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const ERRORS: &str = "errors.csv";
pub const CV: &str = "cv.csv";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    BuildBasis,
    Pipeline,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Synth,
        Stage::BuildBasis,
        Stage::Pipeline,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildBasis => "build-basis",
            Stage::Pipeline => "pipeline",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub peak_bytes: usize,
}

/// Reproducibility record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub population_seed: u64,
    pub stages: Vec<StageRecord>,
    /// Stage that aborted the run, if any.
    pub failed_stage: Option<Stage>,
    /// Peak decomposition bytes per method over all cases.
    pub method_peak_bytes: BTreeMap<String, usize>,
    /// SHA-256 of every output file, keyed by path relative to the experiment directory.
    pub digests: BTreeMap<String, String>,
}

/// Wall seconds per stage and per (method, case).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
    pub methods: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn case_id(seed: u64) -> String {
    format!("case{seed:04}")
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes a case as PFG files plus `case.meta`.
pub fn write_case(dir: &Path, case: &CaseBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    pfg::write_grid(&dir.join("normal.pfg"), &case.normal)?;
    pfg::write_grid(&dir.join("normal_atlas.pfg"), &case.normal_atlas)?;
    pfg::write_grid(&dir.join("tumor_image.pfg"), &case.tumor_image)?;
    pfg::write_grid(&dir.join("tumor_mask.pfg"), &case.tumor_mask)?;
    case.gt_field.save(&dir.join("gt_field.pfg"))?;
    let g = case.normal.geometry();
    let meta = format!(
        "seed = {}\ndims = {:?}\nspacing = {:?}\ntumor_voxels = {}\n",
        case.seed,
        g.dims(),
        g.spacing(),
        case.tumor_mask.data().iter().filter(|&&v| v > 0.5).count()
    );
    write_atomic(&dir.join("case.meta"), meta.as_bytes())
}

pub fn read_case(dir: &Path) -> Result<CaseBundle> {
    let meta_path = dir.join("case.meta");
    let meta = std::fs::read_to_string(&meta_path)?;
    let seed = meta
        .lines()
        .find_map(|l| l.strip_prefix("seed = "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| crate::error::parse_failure(&meta_path, "no seed line"))?;
    Ok(CaseBundle {
        normal: pfg::read_grid(&dir.join("normal.pfg"))?,
        normal_atlas: pfg::read_grid(&dir.join("normal_atlas.pfg"))?,
        tumor_image: pfg::read_grid(&dir.join("tumor_image.pfg"))?,
        tumor_mask: pfg::read_grid(&dir.join("tumor_mask.pfg"))?,
        gt_field: DeformationField::load(&dir.join("gt_field.pfg"))?,
        seed,
    })
}

/// Images named `*.pfg` or `*.pgm` in `dir`, in file-name order.
pub fn read_image_dir(dir: &Path) -> Result<Vec<Grid>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pfg" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no images in {}", dir.display())));
    }
    paths.iter().map(|p| pfg::read_grid(p)).collect()
}

/// Outcome of one method on one case.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub method: Method,
    pub field: DeformationField,
    pub peak_bytes: usize,
    pub seconds: f64,
}

/// Shared inputs of the per-case arms.
pub struct ArmContext<'a> {
    pub atlas: &'a Grid,
    pub basis: &'a PcaBasis,
    /// Atlas-space images stacked with the test image in the LRS arm.
    pub lrs_population: &'a [Grid],
    pub config: &'a RunConfig,
}

impl ArmContext<'_> {
    pub fn registrar(&self) -> Registrar {
        let template = &self.config.external.command_template;
        if template.is_empty() {
            Registrar::Builtin(self.config.registration.reg_params())
        } else {
            Registrar::External(template.clone())
        }
    }

    fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            alternations: self.config.registration.alternations,
            registrar: self.registrar(),
            inverse_iterations: self.config.registration.inverse_iterations,
        }
    }

    /// Field of the atlas registered to the tumor-free image; errors are measured against it.
    pub fn reference(&self, case: &CaseBundle) -> Result<DeformationField> {
        self.registrar().run(self.atlas, &case.normal)
    }

    /// Runs `method` on `case`. `param` overrides gamma (PCA arms) or lambda (rpca).
    ///
    /// The masked arm always uses the built-in registrar since the external
    /// command has no way to receive a mask.
    pub fn run(&self, method: Method, case: &CaseBundle, param: Option<f64>) -> Result<ArmOutcome> {
        let start = Instant::now();
        let solver = &self.config.solver;
        let (field, peak_bytes) = match method {
            Method::Direct => (self.registrar().run(self.atlas, &case.tumor_image)?, 0),
            Method::Masked => {
                let params = RegParams {
                    mask: Some(case.tumor_mask.clone()),
                    ..self.config.registration.reg_params()
                };
                (
                    crate::registration::register(self.atlas, &case.tumor_image, &params)?,
                    0,
                )
            }
            Method::Rpca => {
                let decomposer = Decomposer::Lrs {
                    population: self.lrs_population,
                    lambda: param.unwrap_or(solver.lambda),
                    alm: solver.alm_params(),
                };
                let res = run_pipeline(
                    self.atlas,
                    &case.tumor_image,
                    &decomposer,
                    &self.pipeline_params(),
                )?;
                (res.field, res.peak_bytes)
            }
            Method::Pca0 | Method::Pca1 | Method::Pca2 => {
                let decomposer = Decomposer::Pca {
                    basis: self.basis,
                    gamma: param.unwrap_or(solver.gamma),
                    reg_steps: method.reg_steps().expect("pca arm"),
                    solver: solver.solver_params(),
                };
                let res = run_pipeline(
                    self.atlas,
                    &case.tumor_image,
                    &decomposer,
                    &self.pipeline_params(),
                )?;
                (res.field, res.peak_bytes)
            }
        };
        Ok(ArmOutcome {
            method,
            field,
            peak_bytes,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// An experiment directory together with its configuration.
pub struct Experiment {
    pub dir: PathBuf,
    pub config: RunConfig,
}

struct StageOutput {
    peak_bytes: usize,
    method_peak_bytes: BTreeMap<String, usize>,
    method_seconds: BTreeMap<String, BTreeMap<String, f64>>,
}

impl StageOutput {
    fn bytes(peak_bytes: usize) -> Self {
        Self {
            peak_bytes,
            method_peak_bytes: BTreeMap::new(),
            method_seconds: BTreeMap::new(),
        }
    }
}

impl Experiment {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Self {
        Self {
            dir: dir.into(),
            config,
        }
    }

    fn synth_dir(&self) -> PathBuf {
        self.dir.join("synth")
    }

    fn basis_dir(&self) -> PathBuf {
        self.dir.join("basis")
    }

    fn pipeline_dir(&self) -> PathBuf {
        self.dir.join("pipeline")
    }

    fn spec(&self) -> PhantomSpec {
        self.config.phantom_spec()
    }

    fn cases(&self) -> Result<Vec<CaseBundle>> {
        self.config
            .case_seeds()
            .into_iter()
            .map(|s| read_case(&self.synth_dir().join(case_id(s))))
            .collect()
    }

    fn atlas(&self) -> Result<Grid> {
        pfg::read_grid(&self.synth_dir().join("atlas.pfg"))
    }

    fn population(&self) -> Result<Vec<Grid>> {
        read_image_dir(&self.synth_dir().join("population"))
    }

    /// Writes the atlas, the normal population and every test case.
    pub fn synth(&self) -> Result<()> {
        self.synth_stage().map(|_| ())
    }

    fn synth_stage(&self) -> Result<StageOutput> {
        let spec = self.spec();
        let data = &self.config.data;
        let dir = self.synth_dir();
        pfg::write_grid(&dir.join("atlas.pfg"), &atlas_phantom(&spec)?)?;
        let population = synth_population(data.population_seed, data.population, &spec)?;
        let pop_dir = dir.join("population");
        std::fs::create_dir_all(&pop_dir)?;
        for (i, img) in population.iter().enumerate() {
            pfg::write_grid(&pop_dir.join(format!("img_{i:04}.pfg")), img)?;
        }
        self.config.case_seeds().par_iter().try_for_each(|&seed| {
            let case = synth_case(seed, &spec)?;
            write_case(&dir.join(case_id(seed)), &case)
        })?;
        Ok(StageOutput::bytes(matrix_bytes(
            spec.geometry()?.len(),
            data.population,
        )))
    }

    /// Builds the PCA basis from the stored population.
    pub fn build_basis(&self) -> Result<()> {
        self.basis_stage().map(|_| ())
    }

    fn basis_stage(&self) -> Result<StageOutput> {
        let population = self.population()?;
        let basis = build_basis(&population, self.config.basis.modes)?;
        basis.save(&self.basis_dir())?;
        let m = basis.geometry().len();
        Ok(StageOutput::bytes(
            basis.bytes() + matrix_bytes(m, population.len()),
        ))
    }

    fn context_inputs(&self) -> Result<(Grid, PcaBasis, Vec<Grid>)> {
        let atlas = self.atlas()?;
        let basis = PcaBasis::load(&self.basis_dir())?;
        let mut population = self.population()?;
        population.truncate(self.config.solver.lrs_population);
        Ok((atlas, basis, population))
    }

    /// Runs every configured method on every case and stores the fields.
    pub fn pipelines(&self) -> Result<()> {
        self.pipeline_stage().map(|_| ())
    }

    fn pipeline_stage(&self) -> Result<StageOutput> {
        let (atlas, basis, population) = self.context_inputs()?;
        let ctx = ArmContext {
            atlas: &atlas,
            basis: &basis,
            lrs_population: &population,
            config: &self.config,
        };
        let mut methods = self.config.evaluate.methods.clone();
        methods.sort();
        methods.dedup();
        let cases = self.cases()?;
        let outcomes: Vec<(String, Vec<ArmOutcome>)> = cases
            .par_iter()
            .map(|case| {
                let id = case_id(case.seed);
                let dir = self.pipeline_dir().join(&id);
                std::fs::create_dir_all(&dir)?;
                ctx.reference(case)
                    .and_then(|f| f.save(&dir.join("reference.pfg")))
                    .map_err(|e| e.context(format!("{id} reference")))?;
                let mut arms = Vec::with_capacity(methods.len());
                for &method in &methods {
                    let arm = ctx
                        .run(method, case, None)
                        .map_err(|e| e.context(format!("{id} {}", method.id())))?;
                    arm.field.save(&dir.join(format!("{}.pfg", method.id())))?;
                    log::info!("{id} {}: {:.1}s", method.id(), arm.seconds);
                    arms.push(arm);
                }
                Ok((id, arms))
            })
            .collect::<Result<_>>()?;
        let mut out = StageOutput::bytes(0);
        for (id, arms) in &outcomes {
            for arm in arms {
                let key = arm.method.id().to_string();
                let peak = out.method_peak_bytes.entry(key.clone()).or_default();
                *peak = (*peak).max(arm.peak_bytes);
                out.method_seconds
                    .entry(key)
                    .or_default()
                    .insert(id.clone(), arm.seconds);
                out.peak_bytes = out.peak_bytes.max(arm.peak_bytes);
            }
        }
        Ok(out)
    }

    /// Scores the stored fields and writes `errors.csv`.
    pub fn evaluate(&self) -> Result<Vec<ErrorReport>> {
        let reports = self.collect_errors()?;
        write_atomic(&self.dir.join(ERRORS), errors_csv(&reports).as_bytes())?;
        Ok(reports)
    }

    fn collect_errors(&self) -> Result<Vec<ErrorReport>> {
        let mut methods = self.config.evaluate.methods.clone();
        methods.sort_by_key(|m| m.id());
        methods.dedup();
        let mut reports = Vec::new();
        for seed in self.config.case_seeds() {
            let id = case_id(seed);
            let mask = pfg::read_grid(&self.synth_dir().join(&id).join("tumor_mask.pfg"))?;
            let regions = region_partition(&mask, self.config.evaluate.near_mm)?;
            let dir = self.pipeline_dir().join(&id);
            let reference = DeformationField::load(&dir.join("reference.pfg"))?;
            for &method in &methods {
                let field = DeformationField::load(&dir.join(format!("{}.pfg", method.id())))?;
                let mut report = deformation_error(&field, &reference, &regions)?;
                report.case_id = id.clone();
                report.method_id = method.id().to_string();
                reports.push(report);
            }
        }
        Ok(reports)
    }

    fn evaluate_stage(&self) -> Result<StageOutput> {
        let reports = self.evaluate()?;
        let m = self.spec().geometry()?.len();
        let d = self.config.data.dims.len();
        Ok(StageOutput::bytes(
            matrix_bytes(m, 2 * d + 2) * usize::from(!reports.is_empty()),
        ))
    }

    /// Runs all stages and writes the manifest, also when a stage fails.
    pub fn run(&self) -> Result<ExperimentManifest> {
        std::fs::create_dir_all(&self.dir)?;
        write_atomic(
            &self.dir.join("config.toml"),
            self.config.to_toml().as_bytes(),
        )?;
        let mut records = Vec::new();
        let mut method_peak_bytes = BTreeMap::new();
        let mut timings = Timings::default();
        let mut failure = None;
        for stage in Stage::ALL {
            let start = Instant::now();
            let result = match stage {
                Stage::Synth => self.synth_stage(),
                Stage::BuildBasis => self.basis_stage(),
                Stage::Pipeline => self.pipeline_stage(),
                Stage::Evaluate => self.evaluate_stage(),
            };
            timings
                .stages
                .insert(stage.name().into(), start.elapsed().as_secs_f64());
            match result {
                Ok(out) => {
                    records.push(StageRecord {
                        stage,
                        peak_bytes: out.peak_bytes,
                    });
                    method_peak_bytes.extend(out.method_peak_bytes);
                    timings.methods.extend(out.method_seconds);
                }
                Err(e) => {
                    failure = Some((stage, e.context(format!("stage {}", stage.name()))));
                    break;
                }
            }
        }
        let manifest = ExperimentManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.to_toml(),
            seeds: self.config.case_seeds(),
            population_seed: self.config.data.population_seed,
            stages: records,
            failed_stage: failure.as_ref().map(|(s, _)| *s),
            method_peak_bytes,
            digests: digest_tree(&self.dir)?,
        };
        let json = serde_json::to_string_pretty(&timings).expect("timings serialise");
        write_atomic(&self.dir.join(TIMINGS), json.as_bytes())?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_atomic(&self.dir.join(MANIFEST), json.as_bytes())?;
        match failure {
            Some((_, e)) => Err(e),
            None => Ok(manifest),
        }
    }

    /// Cross-validates the parameter of `evaluate.cv_method` and writes `cv.csv`.
    ///
    /// Needs the synth and basis stages; reference fields are taken from the
    /// pipeline stage when present and computed otherwise.
    pub fn crossval(&self) -> Result<CrossValidation> {
        let (atlas, basis, population) = self.context_inputs()?;
        let ctx = ArmContext {
            atlas: &atlas,
            basis: &basis,
            lrs_population: &population,
            config: &self.config,
        };
        let eval = &self.config.evaluate;
        let grid = if eval.cv_method == Method::Rpca {
            &eval.lambda_grid
        } else {
            &eval.gamma_grid
        };
        // Score against the reference registration by swapping it into gt_field.
        let cases: Vec<CaseBundle> = self
            .cases()?
            .into_iter()
            .map(|mut case| {
                let stored = self
                    .pipeline_dir()
                    .join(case_id(case.seed))
                    .join("reference.pfg");
                case.gt_field = if stored.exists() {
                    DeformationField::load(&stored)?
                } else {
                    ctx.reference(&case)?
                };
                Ok(case)
            })
            .collect::<Result<_>>()?;
        let cv = cross_validate(&cases, grid, eval.folds, |case, param| {
            let arm = ctx.run(eval.cv_method, case, Some(param))?;
            let regions = region_partition(&case.tumor_mask, eval.near_mm)?;
            let mut report = deformation_error(&arm.field, &case.gt_field, &regions)?;
            report.case_id = case_id(case.seed);
            report.method_id = eval.cv_method.id().to_string();
            Ok(report)
        })?;
        write_atomic(&self.dir.join(CV), cv_csv(&cv).as_bytes())?;
        Ok(cv)
    }
}

/// SHA-256 of every regular file under `dir`, skipping the manifest and timings.
pub fn digest_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == MANIFEST || rel == TIMINGS || rel == CV || rel.ends_with(".tmp") {
                continue;
            }
            out.insert(rel, sha256_file(&path)?);
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// `errors.csv`: one row per case, method and region.
pub fn errors_csv(reports: &[ErrorReport]) -> String {
    let mut out = String::from("case_id,method_id,region,mean_error_mm,weighted\n");
    let mut sorted: Vec<&ErrorReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.case_id, &a.method_id).cmp(&(&b.case_id, &b.method_id)));
    for r in sorted {
        for region in Region::ALL {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.case_id,
                r.method_id,
                region.name(),
                fmt_opt(r.region(region)),
                r.weighted
            );
        }
    }
    out
}

/// Parses `errors.csv` back into reports.
pub fn parse_errors_csv(text: &str, path: &Path) -> Result<Vec<ErrorReport>> {
    let bad =
        |line: usize, why: &str| crate::error::parse_failure(path, format!("line {line}: {why}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "case_id,method_id,region,mean_error_mm,weighted")) => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut reports: Vec<ErrorReport> = Vec::new();
    for (n, line) in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(n + 1, "expected 5 columns"));
        }
        let region = Region::ALL
            .into_iter()
            .find(|r| r.name() == cols[2])
            .ok_or_else(|| bad(n + 1, "unknown region"))?;
        let value = match cols[3] {
            "NA" => None,
            v => Some(v.parse().map_err(|_| bad(n + 1, "bad error value"))?),
        };
        let weighted = cols[4]
            .parse()
            .map_err(|_| bad(n + 1, "bad weighted value"))?;
        let same = reports
            .last()
            .is_some_and(|r| r.case_id == cols[0] && r.method_id == cols[1]);
        if !same {
            reports.push(ErrorReport {
                case_id: cols[0].to_string(),
                method_id: cols[1].to_string(),
                mean_error_mm: [None; 3],
                weighted,
            });
        }
        reports.last_mut().expect("pushed").mean_error_mm[region as usize] = value;
    }
    Ok(reports)
}

/// `cv.csv`: one row per test case of each fold.
pub fn cv_csv(cv: &CrossValidation) -> String {
    let mut out = String::from("fold,selected,train_weighted,case_id,test_weighted\n");
    for f in &cv.folds {
        for t in &f.test {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                f.fold, f.selected, f.train_error, t.case_id, t.weighted
            );
        }
    }
    out
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    (Some(mean), sd)
}

fn fmt_stat(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    pub csv: String,
}

/// Checks every digest in the manifest, then summarises errors, runtime and memory.
///
/// Also writes `summary.csv` next to the manifest.
pub fn report(manifest_path: &Path) -> Result<Summary> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: ExperimentManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    for (rel, digest) in &manifest.digests {
        let path = dir.join(rel);
        let actual = sha256_file(&path).map_err(|e| Error::Manifest(format!("{rel}: {e}")))?;
        if &actual != digest {
            return Err(Error::Manifest(format!("{rel} changed since the run")));
        }
    }
    if let Some(stage) = manifest.failed_stage {
        return Err(Error::Manifest(format!(
            "run failed in stage {}",
            stage.name()
        )));
    }
    let errors_path = dir.join(ERRORS);
    let reports = parse_errors_csv(&std::fs::read_to_string(&errors_path)?, &errors_path)?;
    let timings: Option<Timings> = std::fs::read_to_string(dir.join(TIMINGS))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());

    let mut methods: Vec<String> = reports.iter().map(|r| r.method_id.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut csv = String::from("method_id,region,n,mean_mm,sd_mm\n");
    let mut text = String::from("method    region    n    mean_mm   sd_mm\n");
    for method in &methods {
        let rows: Vec<&ErrorReport> = reports.iter().filter(|r| &r.method_id == method).collect();
        let mut columns: Vec<(&str, Vec<f64>)> = Region::ALL
            .iter()
            .map(|&region| {
                (
                    region.name(),
                    rows.iter().filter_map(|r| r.region(region)).collect(),
                )
            })
            .collect();
        columns.push(("weighted", rows.iter().map(|r| r.weighted).collect()));
        for (name, values) in columns {
            let (mean, sd) = mean_sd(&values);
            let _ = writeln!(
                csv,
                "{method},{name},{},{},{}",
                values.len(),
                fmt_opt(mean),
                fmt_opt(sd)
            );
            let _ = writeln!(
                text,
                "{method:<9} {name:<9} {:<4} {:<9} {}",
                values.len(),
                fmt_stat(mean),
                fmt_stat(sd)
            );
        }
    }
    text.push_str("\nmethod    seconds/case  peak_bytes\n");
    for method in &methods {
        let seconds = timings
            .as_ref()
            .and_then(|t| t.methods.get(method))
            .map(|per_case| per_case.values().copied().collect::<Vec<_>>());
        let mean = seconds.and_then(|s| mean_sd(&s).0);
        let bytes = manifest
            .method_peak_bytes
            .get(method)
            .map_or_else(|| "NA".to_string(), |b| b.to_string());
        let _ = writeln!(text, "{method:<9} {:<13} {bytes}", fmt_stat(mean));
    }
    write_atomic(&dir.join("summary.csv"), csv.as_bytes())?;
    Ok(Summary { text, csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_row(case: &str, method: &str, e: [Option<f64>; 3]) -> ErrorReport {
        ErrorReport {
            case_id: case.into(),
            method_id: method.into(),
            mean_error_mm: e,
            weighted: crate::synth::weighted_error(&e),
        }
    }

    #[test]
    fn errors_csv_parses_back() {
        let rows = vec![
            report_row("case0001", "pca1", [Some(0.5), Some(0.25), Some(0.125)]),
            report_row("case0000", "direct", [None, Some(1.0), Some(2.0)]),
        ];
        let text = errors_csv(&rows);
        assert!(text.starts_with(
            "case_id,method_id,region,mean_error_mm,weighted\ncase0000,direct,tumor,NA,"
        ));
        let back = parse_errors_csv(&text, Path::new("errors.csv")).unwrap();
        assert_eq!(back, vec![rows[1].clone(), rows[0].clone()]);
    }

    #[test]
    fn single_case_has_no_sd() {
        assert_eq!(mean_sd(&[2.0]), (Some(2.0), None));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn case_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let case = synth_case(3, &PhantomSpec::square(32)).unwrap();
        write_case(dir.path(), &case).unwrap();
        let back = read_case(dir.path()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.tumor_mask, case.tumor_mask);
        let diff = back.tumor_image.sub(&case.tumor_image).unwrap().max_abs();
        assert!(diff < 1e-6, "{diff}");
    }
}
