//! Alternating registration and decomposition.
//!
//! The atlas is registered to a quasi-normal estimate of the pathological
//! image, the image is pulled into atlas space through the inverse field,
//! decomposed there, and the abnormal part is mapped back to refresh the
//! estimate. The normal population only enters through the precomputed
//! basis (or, for the LRS arm, as fixed atlas-space columns).

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::DMatrix;

use crate::decomp::{iterative_regularize, working_set_bytes, DecompProblem, SolverParams};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::memory::matrix_bytes;
use crate::pca::PcaBasis;
use crate::pfg;
use crate::registration::{external_register, invert, register, warp, DeformationField, RegParams};
use crate::rpca::{rpca, AlmParams, DataMatrix};

/// Default number of register/decompose rounds.
pub const DEFAULT_ALTERNATIONS: usize = 6;
/// Fixed-point iterations used to invert the atlas-to-image field.
pub const INVERSE_ITERATIONS: usize = 20;

/// How the pathological image is split in atlas space.
#[derive(Debug, Clone)]
pub enum Decomposer<'a> {
    /// PCA + TV model with `reg_steps` rounds of iterative regularization.
    Pca {
        basis: &'a PcaBasis,
        gamma: f64,
        reg_steps: usize,
        solver: SolverParams,
    },
    /// Low-rank plus sparse split of the population with the image appended.
    Lrs {
        population: &'a [Grid],
        lambda: f64,
        alm: AlmParams,
    },
}

/// Registration backend.
#[derive(Debug, Clone)]
pub enum Registrar {
    Builtin(RegParams),
    /// Shell command with `{moving}`, `{fixed}` and `{out}` placeholders.
    External(String),
}

impl Default for Registrar {
    fn default() -> Self {
        Registrar::Builtin(RegParams::default())
    }
}

static SCRATCH: AtomicUsize = AtomicUsize::new(0);

impl Registrar {
    /// Field `u` with `warp(moving, u) ≈ fixed`.
    pub fn run(&self, moving: &Grid, fixed: &Grid) -> Result<DeformationField> {
        match self {
            Registrar::Builtin(params) => register(moving, fixed, params),
            Registrar::External(template) => {
                let n = SCRATCH.fetch_add(1, Ordering::Relaxed);
                let base =
                    std::env::temp_dir().join(format!("quasinormal-{}-{n}", std::process::id()));
                let paths: [PathBuf; 2] = [
                    base.with_extension("moving.pfg"),
                    base.with_extension("fixed.pfg"),
                ];
                let result = pfg::write_grid(&paths[0], moving)
                    .and_then(|_| pfg::write_grid(&paths[1], fixed))
                    .and_then(|_| external_register(&paths[0], &paths[1], template));
                for p in &paths {
                    let _ = std::fs::remove_file(p);
                }
                result
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub alternations: usize,
    pub registrar: Registrar,
    pub inverse_iterations: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            alternations: DEFAULT_ALTERNATIONS,
            registrar: Registrar::default(),
            inverse_iterations: INVERSE_ITERATIONS,
        }
    }
}

/// Diagnostics of one alternation.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternationReport {
    pub alternation: usize,
    /// Objective of the atlas-space decomposition.
    pub objective: f64,
    /// RMS difference between the warped atlas and the quasi-normal estimate
    /// after this round's registration.
    pub residual: f64,
    pub decomp_iterations: usize,
    pub decomp_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    /// Atlas-to-image field (pull-back: `warp(atlas, field) ≈ quasi_normal`).
    pub field: DeformationField,
    /// Quasi-normal estimate in image space.
    pub quasi_normal: Grid,
    /// Abnormal part mapped into image space.
    pub abnormal: Grid,
    pub per_iter: Vec<AlternationReport>,
    /// Peak bytes of the decomposition working set.
    pub peak_bytes: usize,
}

struct Split {
    abnormal: Grid,
    objective: f64,
    iterations: usize,
    bytes: usize,
}

fn decompose_atlas(decomposer: &Decomposer, warped: &Grid) -> Result<Split> {
    match decomposer {
        Decomposer::Pca {
            basis,
            gamma,
            reg_steps,
            solver,
        } => {
            let problem = DecompProblem {
                solver: solver.clone(),
                ..DecompProblem::new(basis, warped, *gamma)
            };
            let res = iterative_regularize(&problem, *reg_steps)?;
            Ok(Split {
                objective: res.objective(),
                iterations: res.iterations,
                abnormal: res.abnormal,
                bytes: basis.bytes() + working_set_bytes(warped.geometry(), basis.k()),
            })
        }
        Decomposer::Lrs {
            population,
            lambda,
            alm,
        } => {
            let mut columns = population.to_vec();
            columns.push(warped.clone());
            let d = DataMatrix::from_images(&columns)?;
            let res = rpca(&d, *lambda, alm)?;
            let n = d.n();
            let sparse: Vec<f64> = res.sparse.column(n - 1).iter().copied().collect();
            let nuclear: f64 = res.low_rank.singular_values().iter().sum();
            let objective = nuclear + lambda * res.sparse.iter().map(|v| v.abs()).sum::<f64>();
            Ok(Split {
                abnormal: warped.with_data(sparse),
                objective,
                iterations: res.iterations,
                // the population copy held by the caller plus the solver's matrices
                bytes: res.peak_bytes + matrix_bytes(d.m(), n),
            })
        }
    }
}

fn rms(a: &Grid, b: &Grid) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff.norm2() / (diff.len() as f64).sqrt())
}

/// Runs `params.alternations` rounds of registration and decomposition.
///
/// Round 0 registers the atlas to the pathological image itself. Each
/// round then pulls the image into atlas space with the inverted field,
/// decomposes it, maps the abnormal part back and re-registers the atlas
/// to `image - abnormal`.
pub fn run_pipeline(
    atlas: &Grid,
    pathological: &Grid,
    decomposer: &Decomposer,
    params: &PipelineParams,
) -> Result<PipelineResult> {
    atlas
        .geometry()
        .ensure_same(pathological.geometry(), "atlas vs pathological image")?;
    if params.alternations == 0 {
        return Err(Error::Invalid("alternations must be at least 1".into()));
    }
    let mut field = params
        .registrar
        .run(atlas, pathological)
        .map_err(|e| e.context("initial registration"))?;
    let mut quasi_normal = pathological.clone();
    let mut abnormal = Grid::zeros(pathological.geometry().clone());
    let mut per_iter = Vec::with_capacity(params.alternations);
    let mut peak_bytes = 0;

    for round in 1..=params.alternations {
        let tag = |e: Error| e.context(format!("alternation {round}"));
        let start = Instant::now();
        let inverse = invert(&field, params.inverse_iterations).map_err(tag)?;
        let warped = warp(pathological, &inverse).map_err(tag)?;
        let decomp_start = Instant::now();
        let split = decompose_atlas(decomposer, &warped).map_err(tag)?;
        let decomp_seconds = decomp_start.elapsed().as_secs_f64();
        peak_bytes = peak_bytes.max(split.bytes);
        abnormal = warp(&split.abnormal, &field).map_err(tag)?;
        quasi_normal = pathological.sub(&abnormal).map_err(tag)?;
        field = params.registrar.run(atlas, &quasi_normal).map_err(tag)?;
        let residual = rms(&warp(atlas, &field).map_err(tag)?, &quasi_normal).map_err(tag)?;
        per_iter.push(AlternationReport {
            alternation: round,
            objective: split.objective,
            residual,
            decomp_iterations: split.iterations,
            decomp_seconds,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(PipelineResult {
        field,
        quasi_normal,
        abnormal,
        per_iter,
        peak_bytes,
    })
}

/// PCA pipeline with the built-in registrar and default settings.
pub fn atlas_pipeline(
    atlas: &Grid,
    pathological: &Grid,
    basis: &PcaBasis,
    gamma: f64,
    reg_steps: usize,
    alternations: usize,
) -> Result<PipelineResult> {
    let decomposer = Decomposer::Pca {
        basis,
        gamma,
        reg_steps,
        solver: SolverParams::default(),
    };
    let params = PipelineParams {
        alternations,
        ..Default::default()
    };
    run_pipeline(atlas, pathological, &decomposer, &params)
}

/// `pipeline_report.csv` contents.
pub fn report_csv(reports: &[AlternationReport]) -> String {
    let mut out = String::from(
        "alternation,objective,residual,decomp_iterations,decomp_seconds,wall_seconds\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.alternation,
            r.objective,
            r.residual,
            r.decomp_iterations,
            r.decomp_seconds,
            r.wall_seconds
        ));
    }
    out
}

/// Sum of singular values, exposed for reporting LRS objectives.
pub fn nuclear_norm(x: &DMatrix<f64>) -> f64 {
    x.singular_values().iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::build_basis;
    use crate::synth::{
        atlas_phantom, deformation_error, region_partition, synth_case, synth_population,
        PhantomSpec, Region, NEAR_MM,
    };

    #[test]
    fn span_image_is_left_alone() {
        let spec = PhantomSpec::square(32);
        let population = synth_population(1, 12, &spec).unwrap();
        let basis = build_basis(&population, 6).unwrap();
        let image = basis.mean().add(&basis.mode(0).scale(0.5)).unwrap();
        let atlas = image.clone();
        let res = atlas_pipeline(&atlas, &image, &basis, 2.0, 1, 1).unwrap();
        let mse = res.quasi_normal.sub(&image).unwrap().norm2().powi(2) / image.len() as f64;
        assert!(mse <= 1e-6, "{mse}");
        assert!(
            res.field.mean_magnitude() <= 0.05,
            "{}",
            res.field.mean_magnitude()
        );
        assert_eq!(res.per_iter.len(), 1);
    }

    #[test]
    fn tumor_region_beats_direct_registration() {
        let spec = PhantomSpec::square(40);
        let population = synth_population(11, 60, &spec).unwrap();
        let basis = build_basis(&population, 40).unwrap();
        let atlas = atlas_phantom(&spec).unwrap();
        let case = synth_case(5, &spec).unwrap();
        let regions = region_partition(&case.tumor_mask, NEAR_MM).unwrap();
        let direct = register(&atlas, &case.tumor_image, &RegParams::default()).unwrap();
        let direct_err = deformation_error(&direct, &case.gt_field, &regions).unwrap();
        let res = atlas_pipeline(&atlas, &case.tumor_image, &basis, 2.0, 1, 2).unwrap();
        let err = deformation_error(&res.field, &case.gt_field, &regions).unwrap();
        assert!(
            err.region(Region::Tumor).unwrap() < direct_err.region(Region::Tumor).unwrap(),
            "{err:?} vs {direct_err:?}"
        );
    }

    #[test]
    fn zero_alternations_rejected() {
        let spec = PhantomSpec::square(32);
        let atlas = atlas_phantom(&spec).unwrap();
        let basis = PcaBasis::mean_only(atlas.clone());
        assert!(atlas_pipeline(&atlas, &atlas, &basis, 1.0, 0, 0).is_err());
    }
}
