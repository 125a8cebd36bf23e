//! Compares reverse-mode gradients of the whole network and its composite
//! loss against central finite differences.
//!
//! cargo run --release --example gradient_check

use chansr::autodiff::gradient_check_probes;
use chansr::loss::{composite_loss, LossWeights, Targets};
use chansr::model::{build_model, Bound, ModelConfig};
use chansr::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> chansr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for scale in [2, 4] {
        for back_projection in [false, true] {
            let cfg = ModelConfig { width: 4, head_width: 2, attention_reduction: 2, scale, back_projection, ..ModelConfig::default() };
            let mut model = build_model(&cfg)?;
            // Zero-initialized biases put ReLU inputs exactly on the kink wherever
            // a feature map is dead; finite differences disagree there by design.
            let biases: Vec<String> = model.params().keys().filter(|n| n.ends_with("/b")).cloned().collect();
            for name in biases {
                let shape = model.param(&name).expect("listed").shape().to_vec();
                model.set_param(&name, Tensor::from_fn(&shape, |_| rng.random_range(-0.1..0.1)))?;
            }
            let input = Tensor::from_fn(&[1, 7, 6, 6], |_| rng.random_range(0.0..1.0));
            let n = 36 * scale * scale;
            let targets = Targets {
                regression: std::array::from_fn(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()),
                los: (0..n).map(|_| rng.random_range(0..2u8)).collect(),
                mask: (0..n).map(|i| i % 7 != 0).collect(),
            };
            let names: Vec<&String> = model.params().keys().collect();
            let mut params: Vec<Tensor> = model.params().values().cloned().collect();
            params.push(input);
            let start = std::time::Instant::now();
            let err = gradient_check_probes(
                |tape, vars| {
                    let (x, ps) = vars.split_last().expect("input");
                    let bound = Bound::from_pairs(names.iter().map(|s| s.as_str()).zip(ps.iter().copied()));
                    let out = model.forward(tape, &bound, *x)?;
                    composite_loss(tape, &out.prediction, &targets, &LossWeights::default())
                },
                &params,
                1e-6,
                4,
            )?;
            println!(
                "scale {scale} back-projection {back_projection:<5}: {} tensors, max relative error {err:.2e} ({:.1} s)",
                params.len(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
