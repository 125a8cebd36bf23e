//! Trains a shared model briefly, then fine-tunes each head on its own
//! target with everything else frozen, and reports the validation change.
//!
//! cargo run --release --example finetune

use chansr::dataset::{Dataset, Kind};
use chansr::model::ModelConfig;
use chansr::scene::{generate_samples, PropagationParams};
use chansr::train::{finetune_heads, train, TrainConfig};

fn main() -> chansr::Result<()> {
    let dataset = Dataset::new(generate_samples(7, 16, 64, 0.3, &PropagationParams::default())?)?.split([0.75, 0.125, 0.125], 7)?;
    let config = TrainConfig {
        epochs: 4,
        batch_size: 8,
        patch_size: 32,
        patches_per_scene: 4,
        lr: 3e-3,
        model: ModelConfig { width: 8, head_width: 4, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let shared = train(&config, &dataset)?.best;
    let tune = TrainConfig { epochs: 2, lr: 1e-3, ..config };

    println!("target  before     after     (val MAE; LOS: error rate)");
    for kind in Kind::TARGETS {
        let out = finetune_heads(&shared, &dataset, kind.name(), &tune)?;
        let prefix = format!("head/{}/", kind.name());
        let changed: Vec<&String> = out.model.params().iter().filter(|(n, t)| shared.param(n) != Some(*t)).map(|(n, _)| n).collect();
        assert!(changed.iter().all(|n| n.starts_with(&prefix)));
        println!("{:<6}  {:<9.4}  {:<9.4} ({} tensors updated)", kind.name(), out.before, out.after, changed.len());
    }
    Ok(())
}
