//! Propagates a Gaussian beam and compares its second-moment radius with
//! the analytic `w(z) = w0 sqrt(1 + (z / z_R)^2)`.
//!
//! cargo run --release --example gaussian_beam

use std::f64::consts::PI;

use num_complex::Complex64;
use partial_coherence::field::DEFAULT_WAVELENGTH as WL;
use partial_coherence::{make_plan, ComplexField, GridSpec};

fn radius(u: &ComplexField) -> f64 {
    let g = u.grid();
    let xs = g.coords();
    let (mut m0, mut m2) = (0.0, 0.0);
    for (r, row) in u.samples().chunks_exact(g.n()).enumerate() {
        for (c, s) in row.iter().enumerate() {
            m0 += s.norm_sqr();
            m2 += s.norm_sqr() * (xs[c] * xs[c] + xs[r] * xs[r]) / 2.0;
        }
    }
    2.0 * (m2 / m0).sqrt()
}

fn main() -> partial_coherence::Result<()> {
    let grid = GridSpec::imaging();
    let w0 = 0.2e-3;
    let zr = PI * w0 * w0 / WL;
    let beam = ComplexField::from_fn(grid, WL, |x, y| Complex64::new((-(x * x + y * y) / (w0 * w0)).exp(), 0.0))?;
    println!("w0 = {:.3} mm, z_R = {:.3} m", w0 * 1e3, zr);
    println!("{:>8} {:>12} {:>12} {:>9}", "z (m)", "w sim (mm)", "w (mm)", "err %");
    for z in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
        let out = make_plan(grid, WL, z, 2)?.propagate(&beam)?;
        let w = radius(&out);
        let analytic = w0 * (1.0 + (z / zr).powi(2)).sqrt();
        println!(
            "{z:>8.2} {:>12.5} {:>12.5} {:>9.4}",
            w * 1e3,
            analytic * 1e3,
            100.0 * (w / analytic - 1.0)
        );
    }
    Ok(())
}
