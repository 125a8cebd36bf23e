//! Scores nearest and bicubic interpolation of the downsampled maps against
//! the HR ground truth at scales 2, 4 and 8.
//!
//! cargo run --release --example baseline

use chansr::dataset::{Dataset, Kind, Split};
use chansr::scene::{generate_samples, PropagationParams};
use chansr::train::{evaluate_with, BaselinePredictor, Interpolation};

fn main() -> chansr::Result<()> {
    let dataset = Dataset::new(generate_samples(7, 32, 128, 0.3, &PropagationParams::default())?)?.split([0.8, 0.1, 0.1], 7)?;
    let test = dataset.indices(Split::Test)?;
    println!("method        scale  PL MAE  PL RMSE  DS MAE  LOS acc");
    for method in [Interpolation::Nearest, Interpolation::Bicubic] {
        for fill_buildings in [false, true] {
            for scale in [2, 4, 8] {
                let report = evaluate_with(&BaselinePredictor { method, scale, fill_buildings }, &dataset, &test)?;
                let pl = report.row(Kind::Pl).expect("pl row");
                println!(
                    "{:<13} {scale:>5}  {:>6.3}  {:>7.3}  {:>6.2}  {:.4}",
                    format!("{method:?}{}", if fill_buildings { "+fill" } else { "" }),
                    pl.mae,
                    pl.rmse.unwrap_or(f64::NAN),
                    report.mae(Kind::Ds),
                    report.los_accuracy()
                );
            }
        }
    }
    Ok(())
}
