//! Forward gradient, divergence and total variation on a 2D phantom.

use quasinormal::grid::{divergence, forward_gradient, isotropic_tv, Geometry};
use quasinormal::synth::{atlas_phantom, PhantomSpec};

fn main() -> quasinormal::Result<()> {
    let atlas = atlas_phantom(&PhantomSpec::square(48))?;
    let grad = forward_gradient(&atlas);
    let div = divergence(&grad);
    // <grad u, grad u> = -<u, div grad u>
    let lhs = grad.dot(&grad);
    let rhs = -atlas.dot(&div);
    println!("TV(atlas)            = {:.4}", isotropic_tv(&atlas));
    println!("<grad u, grad u>     = {lhs:.6}");
    println!("-<u, div grad u>     = {rhs:.6}");

    let aniso = Geometry::new(&[48, 48], &[0.5, 1.0])?;
    println!(
        "operator norm bound: isotropic {:.3}, spacing (0.5, 1) {:.3}",
        atlas.geometry().gradient_norm_bound(),
        aniso.gradient_norm_bound()
    );
    Ok(())
}
