//! Thin SVD by Householder QR followed by one-sided Jacobi on the square factor.
//!
//! nalgebra's bidiagonal SVD returns visibly wrong singular values (relative
//! error ~1e-3) on some rank-deficient inputs once vectors are requested, and
//! centred image stacks are always rank-deficient. Jacobi rotations converge
//! to full relative accuracy on these.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

pub(crate) struct ThinSvd {
    /// `m × r` left vectors, `r = min(m, n)`.
    pub u: DMatrix<f64>,
    /// Descending.
    pub sigma: Vec<f64>,
    /// `n × r` right vectors; columns with zero singular value are zero.
    pub v: DMatrix<f64>,
}

pub(crate) fn thin_svd(x: &DMatrix<f64>) -> Result<ThinSvd> {
    let (m, n) = x.shape();
    if m < n {
        let t = thin_svd(&x.transpose())?;
        return Ok(ThinSvd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SvdFailure);
    }
    let qr = x.clone().qr();
    let q = qr.q();
    // Rotating the columns of R^T orthogonalises them; the accumulated
    // rotation is then the left factor of R.
    let mut w = qr.r().transpose();
    let mut rot = DMatrix::<f64>::identity(n, n);
    jacobi(&mut w, &mut rot)?;

    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u_small = DMatrix::from_fn(n, n, |i, j| rot[(i, order[j])]);
    let v = DMatrix::from_fn(n, n, |i, j| {
        let s = norms[order[j]];
        if s > 0.0 {
            w[(i, order[j])] / s
        } else {
            0.0
        }
    });
    Ok(ThinSvd {
        u: q * u_small,
        sigma,
        v,
    })
}

/// Hestenes sweeps over column pairs of `w`, applying each rotation to `acc` too.
fn jacobi(w: &mut DMatrix<f64>, acc: &mut DMatrix<f64>) -> Result<()> {
    let n = w.ncols();
    let tol = f64::EPSILON * n.max(1) as f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w, p, q, c, s);
                rotate(acc, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::SvdFailure)
}

fn rotate(a: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let rows = a.nrows();
    let data = a.as_mut_slice();
    let (left, right) = data.split_at_mut(q * rows);
    let cp = &mut left[p * rows..(p + 1) * rows];
    let cq = &mut right[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check(x: &DMatrix<f64>) {
        let svd = thin_svd(x).unwrap();
        let r = svd.sigma.len();
        assert_eq!(r, x.nrows().min(x.ncols()));
        assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        let back = &svd.u * DMatrix::from_diagonal(&svd.sigma.clone().into()) * svd.v.transpose();
        let scale = svd.sigma[0].max(1e-300);
        assert!((back - x).norm() <= 1e-12 * scale * r as f64);
        let utu = svd.u.transpose() * &svd.u;
        assert!((utu - DMatrix::identity(r, r)).norm() < 1e-12);
        // eigenvalues of the Gram matrix as an independent check on sigma
        let mut eig: Vec<f64> = (x.transpose() * x)
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (s, e) in svd.sigma.iter().zip(&eig) {
            assert!(
                (s * s - e).abs() <= 1e-10 * scale * scale,
                "{s} vs {}",
                e.sqrt()
            );
        }
    }

    #[test]
    fn random_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, n) in [(1, 1), (7, 3), (3, 7), (20, 20), (40, 9)] {
            check(&random(&mut rng, m, n));
        }
    }

    #[test]
    fn centred_columns_are_rank_deficient() {
        // the case that tripped the bidiagonal routine
        let mut rng = ChaCha8Rng::seed_from_u64(7309);
        for _ in 0..200 {
            let n = rng.random_range(2..9);
            let m = rng.random_range(n..40);
            let mut x = random(&mut rng, m, n);
            for i in 0..m {
                let mu = x.row(i).mean();
                x.row_mut(i).add_scalar_mut(-mu);
            }
            check(&x);
            assert!(thin_svd(&x).unwrap().sigma[n - 1] < 1e-12);
        }
    }

    #[test]
    fn zero_matrix() {
        let svd = thin_svd(&DMatrix::zeros(5, 3)).unwrap();
        assert_eq!(svd.sigma, vec![0.0; 3]);
        assert_eq!(svd.v, DMatrix::zeros(3, 3));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut x = DMatrix::zeros(3, 2);
        x[(1, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&x), Err(Error::SvdFailure)));
    }
}
