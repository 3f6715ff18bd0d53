//! Two-dimensional entropy of MNIST objects imaged under decreasing
//! coherence. Uses the library directly: one ensemble per (object, l_c),
//! a shared exposure scale, then `entropy_2d` on the quantized images.
//!
//! cargo run --release --example entropy_curve [objects] [realizations]

use partial_coherence::dataset::{select_objects, IdxDataset};
use partial_coherence::metrology::{entropy_2d, mean_and_std};
use partial_coherence::pipeline::{DEFAULT_IMAGES, DEFAULT_LABELS};
use partial_coherence::scene::direct_scene;
use partial_coherence::screen::realization_seed;
use partial_coherence::{ensemble_intensity, ComplexField, EnsembleSpec, GridSpec, PhaseScreenSpec};

fn main() -> partial_coherence::Result<()> {
    let mut args = std::env::args().skip(1);
    let objects: usize = args.next().map_or(4, |a| a.parse().expect("object count"));
    let m: usize = args.next().map_or(20, |a| a.parse().expect("realization count"));

    let ds = IdxDataset::load(DEFAULT_IMAGES.as_ref(), DEFAULT_LABELS.as_ref())?;
    let grid = GridSpec::imaging();
    let l_c = [0.1e-3, 0.3e-3, 1e-3, 3e-3, 8e-3];
    let chosen = select_objects(ds.len(), objects, 0)?;

    let mut images = Vec::new();
    for (pos, &idx) in chosen.iter().enumerate() {
        let scene = direct_scene(grid, ds.object(idx), 2.5);
        let source = ComplexField::new_plane_wave(grid, scene.wavelength, 1.0)?;
        let seed = realization_seed(1, pos as u64);
        for &l in &l_c {
            let ens = EnsembleSpec::new(PhaseScreenSpec::with_default_sigma(grid, l, seed)?, m)?;
            images.push(ensemble_intensity(&source, &ens, &scene)?);
        }
        eprintln!("object {idx} (digit {}) done", ds.label(idx));
    }

    let peak = images.iter().map(|i| i.max()).fold(0.0, f64::max);
    let scale = 255.0 / peak;
    println!("{:>8} {:>12} {:>8}", "l_c (mm)", "H (bits)", "std");
    for (k, &l) in l_c.iter().enumerate() {
        let hs: Vec<f64> = images
            .iter()
            .skip(k)
            .step_by(l_c.len())
            .map(|img| {
                let q = partial_coherence::field::quantize_values(img.values(), scale);
                entropy_2d(&q, grid.n()).map(|r| r.h)
            })
            .collect::<partial_coherence::Result<_>>()?;
        let (mean, std) = mean_and_std(&hs)?;
        println!("{:>8.1} {mean:>12.4} {std:>8.4}", l * 1e3);
    }
    Ok(())
}
