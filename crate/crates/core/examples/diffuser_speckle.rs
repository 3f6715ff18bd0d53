//! Coherent light through ground glass: fully developed speckle whose grain
//! grows with the propagation distance.

use partial_coherence::field::DEFAULT_WAVELENGTH as WL;
use partial_coherence::metrology::{speckle_stats, SpeckleWindow};
use partial_coherence::scene::{DiffuserSpec, Stage};
use partial_coherence::{ComplexField, GridSpec, SceneConfig};

fn main() -> partial_coherence::Result<()> {
    let grid = GridSpec::imaging();
    let source = ComplexField::new_plane_wave(grid, WL, 1.0)?;
    let window = SpeckleWindow::centered(grid.n(), 256);
    println!("{:>6} {:>14} {:>10}", "z (m)", "grain (um)", "contrast");
    for z in [0.25, 0.5, 1.0, 2.0] {
        let scene = SceneConfig::new(
            grid,
            WL,
            vec![Stage::Diffuser(DiffuserSpec::default()), Stage::FreeSpace(z), Stage::Detector],
        );
        let img = scene.prepare()?.run(&source, 0)?.to_intensity();
        let s = speckle_stats(&img, &window)?;
        println!("{z:>6.2} {:>14.2} {:>10.3}", s.size * 1e6, s.contrast);
    }
    Ok(())
}
