// SPDX-License-Identifier: MIT OR Apache-2.0

//! Basis-form and inverse-form complement projections agree.

use orthoerase::check::{gaussian_vec, spanning_with_condition};
use orthoerase::linalg::{self, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> orthoerase::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, n) = (32, 6);
    for exp in [0, 2, 4, 6, 8, 10] {
        let cond = 10f64.powi(exp);
        let span = spanning_with_condition(&mut rng, d, n, cond);
        let v = gaussian_vec(&mut rng, d);
        let basis = linalg::gram_schmidt(&span, linalg::DEFAULT_DEP_TOL)?;
        let a = linalg::project_complement_basis(&v, &basis)?;
        let b = linalg::project_complement_inverse(
            &v,
            &Mat::from_columns(&span)?,
            linalg::DEFAULT_COND_MAX,
        )?;
        let diff = a
            .iter()
            .zip(&b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let residual = span
            .iter()
            .map(|s| linalg::dot(s, &a).abs() / linalg::norm(s))
            .fold(0.0, f64::max);
        println!("gram_cond=1e{exp:<2} max_diff={diff:.3e} max_residual={residual:.3e}");
    }

    let w = linalg::gram_schmidt(&[vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]], 1e-8)?.weights();
    println!("W = {:?}", w.as_slice());
    Ok(())
}
