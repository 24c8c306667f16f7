//! Low-rank plus sparse recovery of a planted matrix with the inexact ALM.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use quasinormal::rpca::{default_lambda, rpca, AlmParams, DataMatrix};

fn main() -> quasinormal::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, n, rank) = (200, 80, 4);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let u = DMatrix::from_fn(m, rank, |_, _| normal());
    let v = DMatrix::from_fn(n, rank, |_, _| normal());
    let low = &u * v.transpose() / (m as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sparse = DMatrix::from_fn(m, n, |_, _| {
        if rng.random_bool(0.05) {
            rng.random_range(-5.0..5.0)
        } else {
            0.0
        }
    });

    let lambda = default_lambda(m, n);
    let res = rpca(
        &DataMatrix::new(&low + &sparse)?,
        lambda,
        &AlmParams::default(),
    )?;
    println!(
        "lambda {lambda:.4}: {} iterations, converged {}",
        res.iterations, res.converged
    );
    println!("estimated rank {} (planted {rank})", res.rank_est);
    println!(
        "relative error of L {:.2e}",
        (&res.low_rank - &low).norm() / low.norm()
    );
    println!(
        "relative error of S {:.2e}",
        (&res.sparse - &sparse).norm() / sparse.norm()
    );
    println!("peak bytes of the solver {}", res.peak_bytes);
    Ok(())
}
