//! Writes the ground-truth rasters of one test scene and their bicubic x4
//! reconstruction as 16-bit PGM and CSV, then reads one back.
//!
//! cargo run --release --example export -- [out-dir]

use std::path::PathBuf;

use chansr::dataset::{Dataset, Split};
use chansr::export::{decode_pgm, export_maps, first_of_split, predicted_rasters, scene_rasters, ExportFormat};
use chansr::scene::{generate_samples, PropagationParams};
use chansr::train::{BaselinePredictor, Interpolation};

fn main() -> chansr::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("chansr-maps"));
    let dataset = Dataset::new(generate_samples(7, 8, 128, 0.3, &PropagationParams::default())?)?.split([0.75, 0.125, 0.125], 7)?;
    let scene = first_of_split(&dataset, Split::Test);

    let truth = scene_rasters(&dataset, scene)?;
    let bicubic = predicted_rasters(&BaselinePredictor { method: Interpolation::Bicubic, scale: 4, fill_buildings: false }, &dataset, scene)?;
    let mut written = Vec::new();
    for format in [ExportFormat::Pgm, ExportFormat::Csv] {
        written.extend(export_maps(&truth, &dir.join("truth"), format)?);
        written.extend(export_maps(&bicubic, &dir.join("bicubic_x4"), format)?);
    }
    for path in &written {
        println!("{}", path.display());
    }

    let pl = decode_pgm(&std::fs::read(dir.join("truth/pl.pgm")).expect("pl.pgm was just written"))?;
    let (lo, hi) = pl.dequantize().range().expect("open ground present");
    println!("scene {scene}: pl.pgm is {0}x{0}, {lo:.2} .. {hi:.2} dB", pl.size);
    Ok(())
}
