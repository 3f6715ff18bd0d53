//! Young's double-pinhole fringes behind the decoherence screen. Visibility
//! rises with the coherence length; with few realizations the incoherent
//! end stays near `1/sqrt(M)`.
//!
//! cargo run --release --example double_pinhole [realizations]

use partial_coherence::pipeline::{cmd_calibrate, ExperimentConfig, Preset};

fn main() -> partial_coherence::Result<()> {
    let m: usize = std::env::args().nth(1).map_or(20, |a| a.parse().expect("realization count"));
    let mut cfg = ExperimentConfig::for_preset(Preset::Pinhole);
    cfg.output_dir = std::env::temp_dir().join("pcoh-double-pinhole");
    cfg.l_c = vec![0.3e-3, 3e-3, 10e-3];
    cfg.realizations = m;
    for p in cmd_calibrate(&cfg)? {
        let model = (-(cfg.sigma_phi.powi(2)) * (1.0 - (-(cfg.pinholes.spacing / (cfg.sigma_phi * p.l_c)).powi(2)).exp())).exp();
        println!(
            "l_c = {:5.1} mm  V = {:.3}  (I_max {:.3e}, I_min {:.3e}; screen model {:.3})",
            p.l_c * 1e3,
            p.report.v,
            p.report.i_max,
            p.report.i_min,
            model
        );
    }
    println!("fringe previews in {}", cfg.output_dir.join("previews").display());
    Ok(())
}
