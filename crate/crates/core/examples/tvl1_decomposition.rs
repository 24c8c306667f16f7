//! The L1-fidelity variant on the same kind of input as the ROF example.

use quasinormal::decomp::{decompose, DecompProblem, Variant};
use quasinormal::pca::build_basis;
use quasinormal::registration::{invert, warp};
use quasinormal::synth::{synth_case, synth_population, PhantomSpec};

fn main() -> quasinormal::Result<()> {
    let spec = PhantomSpec::square(32);
    let basis = build_basis(&synth_population(1000, 100, &spec)?, 40)?;
    let case = synth_case(2, &spec)?;
    let image = warp(&case.tumor_image, &invert(&case.gt_field, 20)?)?;

    for variant in [Variant::Rof, Variant::Tvl1] {
        let mut problem = DecompProblem::new(&basis, &image, 2.0);
        problem.variant = variant;
        let res = decompose(&problem)?;
        let inside = res
            .abnormal
            .data()
            .iter()
            .filter(|s| s.abs() > 0.05)
            .count();
        println!(
            "{variant:?}: objective {:.3}, max |S| {:.3}, {} voxels with |S| > 0.05, {} iterations",
            res.objective(),
            res.abnormal.max_abs(),
            inside,
            res.iterations
        );
    }
    Ok(())
}
