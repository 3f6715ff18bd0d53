//! Depth-labeled dataset with ground glass halfway to the detector, then
//! the mean speckle size per depth and its straight-line fit.
//!
//! cargo run --release --example depth_speckle

use partial_coherence::dataset::MANIFEST_FILE;
use partial_coherence::pipeline::{cmd_generate, cmd_speckle, ExperimentConfig, GenerateOptions, Preset};

fn main() -> partial_coherence::Result<()> {
    let out = std::env::temp_dir().join("pcoh-depth-speckle");
    let _ = std::fs::remove_dir_all(&out);
    let mut cfg = ExperimentConfig::for_preset(Preset::DepthDiffuser);
    cfg.output_dir = out.clone();
    cfg.l_c = vec![8e-3];
    cfg.objects.count = 3;
    cfg.realizations = 10;
    cfg.previews = false;
    let m = cmd_generate(&cfg, &GenerateOptions::default())?;
    println!("{} records at depths {:?} m", m.records.len(), cfg.depths);

    let s = cmd_speckle(&out.join(MANIFEST_FILE), 256, Some(&out.join("speckle.csv")))?;
    print!("{}", s.csv);
    println!("slope {:.3e} m per m, R^2 {:.4}", s.fit.slope, s.fit.r2);
    Ok(())
}
