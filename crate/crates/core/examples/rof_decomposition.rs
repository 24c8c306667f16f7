//! Splits an atlas-space tumor image into quasi-normal and abnormal parts
//! with the ROF model, with and without iterative regularization.

use quasinormal::decomp::{abnormality_mask, iterative_regularize, DecompProblem};
use quasinormal::pca::build_basis;
use quasinormal::registration::{invert, warp};
use quasinormal::synth::{dice, synth_case, synth_population, PhantomSpec};

fn main() -> quasinormal::Result<()> {
    let spec = PhantomSpec::square(48);
    let basis = build_basis(&synth_population(1000, 250, &spec)?, 150)?;
    let case = synth_case(4, &spec)?;
    // bring the image into atlas space with the known deformation
    let inverse = invert(&case.gt_field, 20)?;
    let image = warp(&case.tumor_image, &inverse)?;
    let mask = warp(&case.tumor_mask, &inverse)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });

    for gamma in [2.0, 3.0, 5.0] {
        let problem = DecompProblem::new(&basis, &image, gamma);
        for steps in 0..=2 {
            let res = iterative_regularize(&problem, steps)?;
            let err =
                res.quasi_normal.sub(&case.normal_atlas)?.norm2() / (image.len() as f64).sqrt();
            let found = abnormality_mask(&res, 0.1 * res.abnormal.max_abs().max(1e-12));
            println!(
                "gamma {gamma} steps {steps}: objective {:>8.3}, {:>5} iterations, converged {:<5}, quasi-normal rms {err:.4}, dice {:.2}",
                res.objective(),
                res.iterations,
                res.converged,
                dice(&found, &mask)?
            );
        }
    }
    Ok(())
}
