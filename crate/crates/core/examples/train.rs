//! Trains the full model at scale 2 on a small synthetic dataset, compares it
//! against the bicubic baseline on the test split and saves the checkpoint.
//!
//! cargo run --release --example train -- [model.csrm]

use std::path::PathBuf;

use chansr::dataset::{Dataset, Kind, Split};
use chansr::model::{Model, ModelConfig};
use chansr::scene::{generate_samples, PropagationParams};
use chansr::train::{evaluate, evaluate_with, train, BaselinePredictor, Interpolation, TrainConfig};

fn main() -> chansr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("example.csrm"));

    let dataset = Dataset::new(generate_samples(7, 24, 64, 0.3, &PropagationParams::default())?)?.split([0.8, 0.1, 0.1], 7)?;
    let config = TrainConfig {
        epochs: 20,
        batch_size: 8,
        patch_size: 32,
        patches_per_scene: 16,
        lr: 3e-3,
        lr_halving_epochs: 7,
        model: ModelConfig { width: 16, head_width: 8, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let outcome = train(&config, &dataset)?;
    print!("{}", outcome.history.to_csv());
    println!("best epoch {} of {}", outcome.best_epoch, config.epochs);

    let model_report = evaluate(&outcome.best, &dataset, Split::Test, 2)?;
    let test = dataset.indices(Split::Test)?;
    let bicubic = evaluate_with(&BaselinePredictor { method: Interpolation::Bicubic, scale: 2, fill_buildings: false }, &dataset, &test)?;
    println!("target  model MAE  bicubic MAE");
    for kind in Kind::TARGETS {
        println!("{:<6}  {:>9.3}  {:>11.3}  {}", kind.name(), model_report.mae(kind), bicubic.mae(kind), kind.unit());
    }
    println!("LOS accuracy {:.4} (bicubic {:.4})", model_report.los_accuracy(), bicubic.los_accuracy());

    outcome.best.save(&out)?;
    let reloaded = Model::load(&out)?;
    println!("saved {} ({} parameters, reload identical: {})", out.display(), reloaded.num_parameters(), reloaded == outcome.best);
    Ok(())
}
