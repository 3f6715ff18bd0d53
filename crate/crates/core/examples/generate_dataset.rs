//! End to end on a small grid: generate, interrupt, resume, verify, then
//! an entropy CSV and its plot.

use std::fs;

use partial_coherence::dataset::{IntensityRecord, MANIFEST_FILE};
use partial_coherence::pipeline::{
    cmd_entropy, cmd_generate, cmd_verify_manifest, ExperimentConfig, GenerateOptions, GridConfig, Preset,
};
use partial_coherence::plot::cmd_plot;

fn main() -> partial_coherence::Result<()> {
    let out = std::env::temp_dir().join("pcoh-generate-dataset");
    let _ = fs::remove_dir_all(&out);
    let mut cfg = ExperimentConfig::for_preset(Preset::Direct);
    cfg.output_dir = out.clone();
    cfg.grid = Some(GridConfig { n: 128, extent: 6e-3 });
    cfg.l_c = vec![0.1e-3, 1e-3, 8e-3];
    cfg.distance = 1.0;
    cfg.objects.count = 6;
    cfg.realizations = 10;

    let partial = cmd_generate(
        &cfg,
        &GenerateOptions {
            resume: false,
            stop_after: Some(5),
        },
    )?;
    println!(
        "stopped after {} of {} items, resume cursor {:?}",
        partial.records.len(),
        partial.header.items_expected,
        partial.header.resume_cursor
    );
    let m = cmd_generate(
        &cfg,
        &GenerateOptions {
            resume: true,
            stop_after: None,
        },
    )?;
    println!("resumed: {} records, exposure scale {:.4e}", m.records.len(), m.header.exposure_scale);

    let manifest = out.join(MANIFEST_FILE);
    cmd_verify_manifest(&manifest)?;
    let first = &m.records[0];
    let rec = IntensityRecord::read(&out.join(&first.path))?;
    println!(
        "item 0: digit {:?}, l_c {} m, {}x{} CINT, sha256 {}..",
        first.class_label,
        first.l_c_m,
        rec.grid.n(),
        rec.grid.n(),
        &first.sha256[..12]
    );

    let csv = out.join("entropy.csv");
    print!("{}", cmd_entropy(&manifest, None, Some(&csv))?);
    for p in cmd_plot(&[csv], &out)? {
        println!("plot: {}", p.display());
    }
    Ok(())
}
