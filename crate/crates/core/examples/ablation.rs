//! Trains the four cumulative presets (STL, +RES, +DA, +ATT) at each scale
//! and prints the resulting ablation table as CSV. Takes several minutes
//! per scale on one core.
//!
//! cargo run --release --example ablation -- [scales, e.g. 2,4]

use chansr::dataset::Dataset;
use chansr::model::ModelConfig;
use chansr::scene::{generate_samples, PropagationParams};
use chansr::train::{run_ablation, TrainConfig};

fn main() -> chansr::Result<()> {
    let scales: Vec<usize> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.trim().parse().expect("scale list such as 2,4")).collect())
        .unwrap_or_else(|| vec![2]);

    let dataset = Dataset::new(generate_samples(7, 24, 64, 0.3, &PropagationParams::default())?)?.split([0.8, 0.1, 0.1], 7)?;
    let base = TrainConfig {
        epochs: 12,
        batch_size: 8,
        patch_size: 32,
        patches_per_scene: 16,
        lr: 3e-3,
        lr_halving_epochs: 5,
        model: ModelConfig { width: 16, head_width: 8, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let run = run_ablation(&base, &dataset, &scales)?;
    print!("{}", run.table.to_csv());
    for (preset, scale, model) in &run.models {
        println!("{} x{scale}: {} parameters", preset.label(), model.num_parameters());
    }
    Ok(())
}
