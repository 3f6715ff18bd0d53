//! Reads the bundled MNIST subset and shows one digit as the SLM sees it.

use partial_coherence::dataset::{select_objects, IdxDataset};
use partial_coherence::pipeline::{DEFAULT_IMAGES, DEFAULT_LABELS};
use partial_coherence::GridSpec;

fn main() -> partial_coherence::Result<()> {
    let ds = IdxDataset::load(DEFAULT_IMAGES.as_ref(), DEFAULT_LABELS.as_ref())?;
    let all: Vec<usize> = (0..ds.len()).collect();
    println!("{}: {} images, per class {:?}", ds.name(), ds.len(), ds.class_histogram(&all));

    let pick = select_objects(ds.len(), 200, 0)?;
    println!("200-object draw, per class {:?}", ds.class_histogram(&pick));

    let idx = pick[0];
    println!("image {idx}, label {}:", ds.label(idx));
    for row in ds.image(idx).chunks(28) {
        let line: String = row.iter().map(|&g| if g > 128 { '#' } else if g > 32 { '+' } else { '.' }).collect();
        println!("  {line}");
    }
    // Dark strokes block light: transmittance is 1 - g/255.
    let t = ds.object(idx).transmittance(&GridSpec::imaging());
    let dark = t.iter().filter(|&&v| v < 0.05).count();
    println!("on the 512x512 grid: {dark} samples below 5% transmittance, mean transmittance {:.3}", t.iter().sum::<f64>() / t.len() as f64);
    Ok(())
}
