//! Samples decoherence screens and prints the ensemble autocorrelation of
//! the transmission `exp(i phi)` next to `exp(-dr^2 / l_c^2)`.
//!
//! cargo run --release --example phase_screen_autocorrelation [l_c_mm] [realizations]

use num_complex::Complex64;
use partial_coherence::{sample_phase_screen, GridSpec, PhaseScreenSpec};

fn main() -> partial_coherence::Result<()> {
    let mut args = std::env::args().skip(1);
    let l_c = args.next().map_or(1.0, |a| a.parse().expect("l_c in mm")) * 1e-3;
    let count: usize = args.next().map_or(100, |a| a.parse().expect("realization count"));

    let n = 256;
    let grid = GridSpec::with_extent(n, 20.0 * l_c)?;
    let spec = PhaseScreenSpec::with_default_sigma(grid, l_c, 3)?;
    let lags: Vec<usize> = (0..=(2.0 * l_c / grid.pitch()) as usize).step_by(2).collect();
    let mut acc = vec![Complex64::default(); lags.len()];
    for k in 0..count {
        let t: Vec<Complex64> = sample_phase_screen(&spec, k)
            .values
            .iter()
            .map(|&p| Complex64::from_polar(1.0, p))
            .collect();
        for (i, &lag) in lags.iter().enumerate() {
            let mut s = Complex64::default();
            for r in 0..n {
                for c in 0..n - lag {
                    s += t[r * n + c] * t[r * n + c + lag].conj();
                }
            }
            acc[i] += s / (n * (n - lag)) as f64;
        }
    }
    println!("l_c = {:.2} mm, {count} realizations, sigma_phi = 2 pi", l_c * 1e3);
    println!("{:>10} {:>10} {:>10}", "dr/l_c", "measured", "gaussian");
    for (i, &lag) in lags.iter().enumerate() {
        let x = lag as f64 * grid.pitch() / l_c;
        println!("{x:>10.3} {:>10.4} {:>10.4}", acc[i].re / count as f64, (-x * x).exp());
    }
    Ok(())
}
