use chansr::autodiff::{gradient_check_probes, Tape};
use chansr::loss::{composite_loss, LossWeights, Targets};
use chansr::model::{build_model, Bound, Model, ModelConfig};
use chansr::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(width: usize) -> ModelConfig {
    ModelConfig { width, head_width: width, attention_reduction: 2, ..ModelConfig::default() }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn zero_params(model: &mut Model, prefix: &str) {
    let names: Vec<String> = model.params().keys().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let shape = model.param(&n).unwrap().shape().to_vec();
        model.set_param(&n, Tensor::zeros(&shape)).unwrap();
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_panels_with_residual_reduce_backbone_to_stem() {
    let mut model = build_model(&tiny(8)).unwrap();
    zero_params(&mut model, "deep/");
    zero_params(&mut model, "shallow/");
    // fusion [I | 0] so the fused output is the deep panel itself
    let c = 8;
    model.set_param("fuse/w", Tensor::from_fn(&[c, 2 * c, 1, 1], |i| if i / (2 * c) == i % (2 * c) { 1.0 } else { 0.0 })).unwrap();
    model.set_param("fuse/b", Tensor::zeros(&[c])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &|_| false);
    let x = tape.constant(random(&[2, 7, 6, 5], &mut rng));
    let out = model.forward_backbone(&mut tape, &p, x).unwrap();
    let stem = bits(tape.value(out.stem));
    assert_eq!(bits(tape.value(out.deep)), stem);
    assert_eq!(bits(tape.value(out.shallow)), stem);
    assert_eq!(bits(tape.value(out.output)), stem);
}

#[test]
fn zero_panels_without_residual_leave_bias_constants() {
    let cfg = ModelConfig { use_residual: false, ..tiny(8) };
    let mut model = build_model(&cfg).unwrap();
    zero_params(&mut model, "deep/");
    zero_params(&mut model, "shallow/");
    let bias = Tensor::from_fn(&[8], |i| 0.1 * i as f64 - 0.3);
    model.set_param("deep/1/conv3/b", bias.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &|_| false);
    let x = tape.constant(random(&[1, 7, 5, 5], &mut rng));
    let out = model.forward_backbone(&mut tape, &p, x).unwrap();
    let deep = tape.value(out.deep);
    for ch in 0..8 {
        assert!(deep.plane(0, ch).iter().all(|&v| v == bias.data()[ch]));
    }
    assert!(tape.value(out.shallow).data().iter().all(|&v| v == 0.0));
    assert_ne!(bits(deep), bits(tape.value(out.stem)));
}

#[test]
fn equal_expand_weights_give_uniform_attention() {
    let mut model = build_model(&tiny(8)).unwrap();
    let w = model.param("attn/expand0/w").unwrap().clone();
    let b = Tensor::from_fn(&[8], |i| i as f64 * 0.01);
    for i in 0..4 {
        model.set_param(&format!("attn/expand{i}/w"), w.clone()).unwrap();
        model.set_param(&format!("attn/expand{i}/b"), b.clone()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &|_| false);
    let f = tape.constant(random(&[2, 8, 6, 6], &mut rng));
    let out = model.forward_attention(&mut tape, &p, f).unwrap();
    let weights = tape.value(out.weights.unwrap());
    assert!(weights.data().iter().all(|&a| a == 0.25));

    // output = Σ 0.25 · K_i
    let mut expected = vec![0.0; 2 * 8 * 36];
    for k in [1, 3, 5, 7] {
        let kv = tape.conv2d(f, p.get(&format!("attn/k{k}/w")).unwrap(), p.get(&format!("attn/k{k}/b")).unwrap()).unwrap();
        for (e, v) in expected.iter_mut().zip(tape.value(kv).data()) {
            *e += 0.25 * v;
        }
    }
    let got = tape.value(out.output);
    let diff = got.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn attention_off_is_pass_through() {
    let model = build_model(&ModelConfig { use_attention: false, ..tiny(8) }).unwrap();
    assert!(model.params().keys().all(|n| !n.starts_with("attn/")));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &|_| false);
    let f = tape.constant(random(&[1, 8, 4, 4], &mut rng));
    let out = model.forward_attention(&mut tape, &p, f).unwrap();
    assert_eq!(out.output, f);
    assert!(out.weights.is_none());
}

#[test]
fn attention_weights_are_distributions() {
    let model = build_model(&tiny(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, &|_| false);
        let f = tape.constant(random(&[2, 8, 5, 5], &mut rng));
        let weights = model.forward_attention(&mut tape, &p, f).unwrap().weights.unwrap();
        let w = tape.value(weights);
        for n in 0..2 {
            for c in 0..8 {
                let s: f64 = (0..4).map(|b| w.data()[(n * 4 + b) * 8 + c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn output_shapes_per_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (scale, stages) in [(2, 1), (4, 2), (8, 3)] {
        let model = build_model(&ModelConfig { scale, ..tiny(4) }).unwrap();
        assert_eq!(model.params().keys().filter(|n| n.starts_with("up/") && n.ends_with("conv/w")).count(), stages);
        let out = model.predict(&random(&[1, 7, 4, 4], &mut rng)).unwrap();
        for r in &out.regression {
            assert_eq!(r.shape(), &[1, 1, 4 * scale, 4 * scale]);
        }
        assert_eq!(out.los_logits.shape(), &[1, 2, 4 * scale, 4 * scale]);
    }
    let model = build_model(&tiny(4)).unwrap();
    let out = model.predict(&random(&[1, 7, 32, 32], &mut rng)).unwrap();
    assert_eq!(out.regression[0].shape(), &[1, 1, 64, 64]);
}

#[test]
fn back_projection_changes_upscale_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = random(&[1, 8, 6, 6], &mut rng);
    let run = |bp: bool| {
        let model = build_model(&ModelConfig { back_projection: bp, ..tiny(8) }).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, &|_| false);
        let x = tape.constant(f.clone());
        let up = model.upscale(&mut tape, &p, x).unwrap();
        tape.value(up).clone()
    };
    let (off, on) = (run(false), run(true));
    assert_eq!(off.shape(), on.shape());
    assert!(off.max_abs_diff(&on) > 0.0);
}

#[test]
fn identity_like_upscale_preserves_constants() {
    let mut model = build_model(&ModelConfig { scale: 8, ..tiny(4) }).unwrap();
    for s in 0..3 {
        model
            .set_param(&format!("up/{s}/conv/w"), Tensor::from_fn(&[4, 4, 3, 3], |i| {
                let (o, rest) = (i / 36, i % 36);
                if rest / 9 == o && rest % 9 == 4 { 1.0 } else { 0.0 }
            }))
            .unwrap();
        model.set_param(&format!("up/{s}/conv/b"), Tensor::zeros(&[4])).unwrap();
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &|_| false);
    let x = tape.constant(Tensor::full(&[1, 4, 3, 3], 0.7));
    let up = model.upscale(&mut tape, &p, x).unwrap();
    let v = tape.value(up);
    assert_eq!(v.shape(), &[1, 4, 24, 24]);
    assert!(v.data().iter().all(|&a| a == 0.7));
}

#[test]
fn zero_heads_emit_their_bias() {
    let mut model = build_model(&tiny(4)).unwrap();
    let names: Vec<String> = model.params().keys().filter(|n| n.starts_with("head/") && n.ends_with("/w")).cloned().collect();
    for n in names {
        let shape = model.param(&n).unwrap().shape().to_vec();
        model.set_param(&n, Tensor::zeros(&shape)).unwrap();
    }
    model.set_param("head/pl/conv2/b", Tensor::new(&[1], vec![0.42]).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let out = model.predict(&random(&[1, 7, 4, 4], &mut rng)).unwrap();
    assert!(out.regression[0].data().iter().all(|&v| v == 0.42));
    assert!(out.regression[1].data().iter().all(|&v| v == 0.0));
}

#[test]
fn los_softmax_sums_to_one() {
    let model = build_model(&tiny(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = model.predict(&random(&[1, 7, 4, 4], &mut rng)).unwrap().los_logits;
    let (a, b) = (logits.plane(0, 0), logits.plane(0, 1));
    for (x, y) in a.iter().zip(b) {
        let m = x.max(*y);
        let (ex, ey) = ((x - m).exp(), (y - m).exp());
        assert!((ex / (ex + ey) + ey / (ex + ey) - 1.0).abs() < 1e-15);
    }
}

#[test]
fn outputs_finite_over_thousand_random_inputs() {
    let model = build_model(&tiny(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let scale = rng.random_range(0.1..10.0);
        let x = Tensor::from_fn(&[1, 7, 4, 4], |_| scale * rng.random_range(-1.0..1.0));
        let out = model.predict(&x).unwrap();
        assert!(out.regression.iter().all(Tensor::all_finite) && out.los_logits.all_finite());
    }
}

#[test]
fn same_input_same_output() {
    let model = build_model(&tiny(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 7, 5, 5], &mut rng);
    assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let model = build_model(&ModelConfig { back_projection: true, scale: 4, ..tiny(4) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csrm");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(std::fs::read(&path).unwrap(), back.encode().unwrap());
}

#[test]
fn parameter_count_depends_only_on_config() {
    let a = build_model(&ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
    let b = build_model(&ModelConfig { seed: 2, ..ModelConfig::default() }).unwrap();
    assert_eq!(a.num_parameters(), b.num_parameters());
    assert_ne!(a, b);
}

/// End-to-end central-difference check of the full model and composite loss.
fn end_to_end_gradient_error(back_projection: bool) -> f64 {
    let cfg = ModelConfig { width: 4, head_width: 2, attention_reduction: 2, back_projection, seed: 3, ..ModelConfig::default() };
    let model = build_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = random(&[1, 7, 8, 8], &mut rng);
    let n = 16 * 16;
    let targets = Targets {
        regression: std::array::from_fn(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()),
        los: (0..n).map(|_| rng.random_range(0..2u8)).collect(),
        mask: (0..n).map(|i| i % 7 != 0).collect(),
    };
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut params: Vec<Tensor> = model.params().values().cloned().collect();
    params.push(input);
    let weights = LossWeights::default();
    gradient_check_probes(
        |tape, vars| {
            let (x, ps) = vars.split_last().unwrap();
            let bound = Bound::from_pairs(names.iter().map(String::as_str).zip(ps.iter().copied()));
            let out = model.forward(tape, &bound, *x)?;
            composite_loss(tape, &out.prediction, &targets, &weights)
        },
        &params,
        1e-6,
        4,
    )
    .unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for bp in [false, true] {
        let err = end_to_end_gradient_error(bp);
        assert!(err < 1e-4, "back_projection {bp}: {err}");
    }
}
