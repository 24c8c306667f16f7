//! A complete run on a small configuration followed by the summary report.
//!
//! Writes into `./small_experiment` unless a directory is given.

use quasinormal::config::{Method, RunConfig};
use quasinormal::experiment::{report, Experiment, MANIFEST};

fn main() -> quasinormal::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "small_experiment".into());
    let mut config = RunConfig::default();
    config.data.dims = vec![32, 32];
    config.data.cases = 3;
    config.data.population = 60;
    config.basis.modes = 30;
    config.evaluate.methods = vec![Method::Direct, Method::Masked, Method::Rpca, Method::Pca1];
    config.solver.lrs_population = 30;

    let manifest = Experiment::new(&dir, config).run()?;
    println!("{} files recorded in the manifest", manifest.digests.len());
    let summary = report(&std::path::Path::new(&dir).join(MANIFEST))?;
    print!("{}", summary.text);
    Ok(())
}
