//! Time-ordered product of a non-commuting kernel path versus frozen-kernel exponentials.

use lazyflow::operator::{gram_exp, operator_norm, product_integral, riemann_product, Interpolation, KernelPath};
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.1]);
    let b = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 0.0, 0.5]);
    let path = KernelPath::new(vec![0.0, 2.0], vec![a.clone(), b.clone()], Interpolation::PiecewiseLinear)?;

    let p = product_integral(&path, 0.0, 2.0, 1e-10)?;
    println!("P(2,0) with {} factors, error estimate {:.2e}", p.refinement, p.error_estimate);
    println!("{:.8}", p.value);
    println!("|P| = {:.6} (contraction)", operator_norm(&p.value)?);
    for n in [8, 64, 512] {
        let q = riemann_product(&path, 0.0, 2.0, n)?;
        println!("{n:>4} uniform factors: error {:.3e}", operator_norm(&(&q - &p.value))?);
    }
    println!("|P - e^(-2 K_0)| = {:.4}", operator_norm(&(&p.value - gram_exp(&a, 2.0)))?);
    println!("|P - e^(-2 K_2)| = {:.4}", operator_norm(&(&p.value - gram_exp(&b, 2.0)))?);
    Ok(())
}
