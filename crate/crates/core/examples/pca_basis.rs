//! Builds a PCA appearance model from a phantom population and projects an
//! unseen subject onto it.

use quasinormal::pca::build_basis;
use quasinormal::synth::{synth_case, synth_population, PhantomSpec};

fn main() -> quasinormal::Result<()> {
    let spec = PhantomSpec::square(48);
    let population = synth_population(1000, 120, &spec)?;
    let subject = synth_case(0, &spec)?.normal_atlas;

    for k in [5, 20, 60, 119] {
        let basis = build_basis(&population, k)?;
        let alpha = basis.project(&subject)?;
        let fit = basis.reconstruct(&alpha)?;
        let rms = fit.sub(&subject)?.norm2() / (subject.len() as f64).sqrt();
        println!(
            "k = {k:>3}: leading sigma {:.3}, residual rms {rms:.5}",
            basis.singular_values()[0]
        );
    }
    let basis = build_basis(&population, 10)?;
    let spectrum: Vec<String> = basis
        .singular_values()
        .iter()
        .map(|s| format!("{s:.2}"))
        .collect();
    println!("first ten singular values: {}", spectrum.join(" "));
    Ok(())
}
