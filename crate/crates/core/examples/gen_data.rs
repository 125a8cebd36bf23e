//! Synthesizes a small urban dataset, prints per-scene statistics and a LOS
//! map of the first scene, then writes it as a `.csrd` file.
//!
//! cargo run --release --example gen_data -- [out.csrd]

use std::path::PathBuf;

use chansr::dataset::{read_dataset, write_dataset, Dataset, Kind};
use chansr::scene::{generate_samples, generate_scene, trace_los, PropagationParams, Visibility};

fn main() -> chansr::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("example.csrd"));
    let params = PropagationParams::default();
    let samples = generate_samples(7, 8, 64, 0.3, &params)?;

    println!("scene  tx(row,col)  open  LOS share  PL range (dB)");
    for (i, s) in samples.iter().enumerate() {
        let pl = s.raster(Kind::Pl);
        let los = s.raster(Kind::Los);
        let open: Vec<usize> = (0..pl.len()).filter(|&p| s.raster(Kind::H)[p] == 0.0).collect();
        let los_share = open.iter().filter(|&&p| los[p] == 1.0).count() as f64 / open.len() as f64;
        let (lo, hi) = open.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &p| (a.min(pl[p]), b.max(pl[p])));
        println!("{i:>5}  ({:>3},{:>3})    {:>4}  {los_share:>9.3}  {lo:.1} .. {hi:.1}", s.tx.row, s.tx.col, open.len());
    }

    // LOS map of the first scene: '#' building, 'T' transmitter, '.' LOS, ' ' NLOS
    let scene = generate_scene(chansr::rng::derive_seed(7, 0), 64, 0.3)?;
    for r in (0..64).step_by(2) {
        let line: String = (0..64)
            .map(|c| {
                if (r as u32, c as u32) == (scene.tx.row, scene.tx.col) {
                    return 'T';
                }
                match trace_los(&scene, r, c).map(|t| t.visibility) {
                    Ok(Visibility::Inside) => '#',
                    Ok(Visibility::Los) => '.',
                    _ => ' ',
                }
            })
            .collect();
        println!("{line}");
    }

    let dataset = Dataset::new(samples)?.split([0.75, 0.125, 0.125], 7)?;
    write_dataset(&dataset, &out)?;
    let back = read_dataset(&out)?;
    println!("wrote {} scenes to {} (samples identical after reading: {})", back.len(), out.display(), back.samples == dataset.samples);
    Ok(())
}
