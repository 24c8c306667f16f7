use quasinormal::config::RunConfig;
use quasinormal::experiment::Experiment;

// About 14 minutes: 10 cases times 6 gamma values of the pca1 arm.
// Run with `cargo test --release --test crossval -- --ignored --nocapture`.
#[test]
#[ignore]
fn selected_gamma_is_inside_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let grid = config.evaluate.gamma_grid.clone();
    let exp = Experiment::new(dir.path(), config);
    exp.synth().unwrap();
    exp.build_basis().unwrap();
    let cv = exp.crossval().unwrap();
    println!(
        "{}",
        std::fs::read_to_string(dir.path().join("cv.csv")).unwrap()
    );
    println!("selected gamma {}", cv.best_param);
    let inside = cv.best_param > grid[0] && cv.best_param < grid[grid.len() - 1];
    assert!(
        inside,
        "gamma {} sits on the edge of {grid:?}",
        cv.best_param
    );
}
