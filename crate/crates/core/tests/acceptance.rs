//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all with `cargo test --test acceptance`, or a subset by number:
//! `cargo test --test acceptance -- 3 7`. The desk-scale criteria (8-10)
//! share trained models, so running them together is cheapest.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use chansr::autodiff::{gradient_check, gradient_check_probes, Tape, Var};
use chansr::dataset::{
    augment, decode_dataset, downsample, encode_dataset, read_dataset, write_dataset, CharacteristicSpec, Dataset, Kind,
    Map, Split, Transform,
};
use chansr::loss::{
    accuracy, ce_loss, composite_loss, l1_loss, regression_metrics, stde, LossWeights, Targets,
};
use chansr::model::{build_model, Bound, Model, ModelConfig};
use chansr::scene::{generate_samples, PropagationParams};
use chansr::tensor::Tensor;
use chansr::train::{
    evaluate, evaluate_with, finetune_heads, overfit_single, train, Ablation, AblationTable, BaselinePredictor,
    Interpolation, TrainConfig,
};
use chansr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

/// Reduced-width desk configuration (single-core sandbox); architecture
/// unchanged. Serial so the fixed-seed result does not depend on core count.
fn desk_config(scale: usize, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        deterministic: true,
        epochs: 30,
        batch_size: 8,
        patch_size: 32,
        patches_per_scene: 24,
        lr: 3e-3,
        lr_halving_epochs: 10,
        seed: SEED,
        scale,
        ablation,
        model: ModelConfig { width: 16, head_width: 8, seed: SEED, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(0.1..1.0);
        if r.random_bool(0.5) { v } else { -v }
    })
}

/// `mean(x ⊙ R)` for a fixed random `R`, turning any tensor into a scalar with
/// a dense, non-uniform gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = tape.constant(random(&shape, &mut rng(seed)));
    let prod = tape.mul(x, r)?;
    Ok(tape.mean(prod))
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn primitive_checks() -> Vec<(String, Check, Vec<Tensor>)> {
    let mut r = rng(101);
    let mut v: Vec<(String, Check, Vec<Tensor>)> = Vec::new();
    for k in [1, 3, 5, 7] {
        v.push((
            format!("conv2d k={k}"),
            Box::new(|t, p| {
                let y = t.conv2d(p[0], p[1], p[2])?;
                project(t, y, 1)
            }),
            vec![random(&[2, 3, 6, 5], &mut r), random(&[4, 3, k, k], &mut r), random(&[4], &mut r)],
        ));
    }
    v.push(("relu".into(), Box::new(|t, p| { let y = t.relu(p[0]); project(t, y, 2) }), vec![away_from_zero(&[2, 3, 4, 4], &mut r)]));
    v.push(("add".into(), Box::new(|t, p| { let y = t.add(p[0], p[1])?; project(t, y, 3) }), vec![random(&[2, 5], &mut r), random(&[2, 5], &mut r)]));
    v.push(("sub".into(), Box::new(|t, p| { let y = t.sub(p[0], p[1])?; project(t, y, 4) }), vec![random(&[2, 5], &mut r), random(&[2, 5], &mut r)]));
    v.push(("mul".into(), Box::new(|t, p| { let y = t.mul(p[0], p[1])?; project(t, y, 5) }), vec![random(&[3, 4], &mut r), random(&[3, 4], &mut r)]));
    v.push(("scale".into(), Box::new(|t, p| { let y = t.scale(p[0], -1.7); project(t, y, 6) }), vec![random(&[7], &mut r)]));
    v.push(("sum".into(), Box::new(|t, p| { let y = t.mul(p[0], p[0])?; Ok(t.sum(y)) }), vec![random(&[2, 3, 2], &mut r)]));
    v.push(("mean".into(), Box::new(|t, p| { let y = t.mul(p[0], p[0])?; Ok(t.mean(y)) }), vec![random(&[2, 3, 2], &mut r)]));
    v.push((
        "sqrt".into(),
        Box::new(|t, p| { let y = t.sqrt(p[0]); project(t, y, 7) }),
        vec![Tensor::from_fn(&[9], |i| 0.5 + 0.2 * i as f64)],
    ));
    v.push(("reshape".into(), Box::new(|t, p| { let y = t.reshape(p[0], &[3, 8])?; project(t, y, 8) }), vec![random(&[2, 3, 4], &mut r)]));
    v.push((
        "concat_channels".into(),
        Box::new(|t, p| { let y = t.concat_channels(p[0], p[1])?; project(t, y, 9) }),
        vec![random(&[2, 2, 3, 3], &mut r), random(&[2, 3, 3, 3], &mut r)],
    ));
    v.push(("global_avg_pool".into(), Box::new(|t, p| { let y = t.global_avg_pool(p[0])?; project(t, y, 10) }), vec![random(&[2, 3, 4, 5], &mut r)]));
    v.push((
        "linear".into(),
        Box::new(|t, p| { let y = t.linear(p[0], p[1], p[2])?; project(t, y, 11) }),
        vec![random(&[3, 5], &mut r), random(&[4, 5], &mut r), random(&[4], &mut r)],
    ));
    v.push((
        "stack".into(),
        Box::new(|t, p| { let y = t.stack(&[p[0], p[1], p[2]])?; project(t, y, 12) }),
        vec![random(&[2, 4], &mut r), random(&[2, 4], &mut r), random(&[2, 4], &mut r)],
    ));
    v.push(("branch_softmax".into(), Box::new(|t, p| { let y = t.branch_softmax(p[0])?; project(t, y, 13) }), vec![random(&[2, 4, 3], &mut r)]));
    v.push((
        "branch_select".into(),
        Box::new(|t, p| { let s = t.branch_softmax(p[0])?; let y = t.branch_select(s, 2)?; project(t, y, 14) }),
        vec![random(&[2, 4, 3], &mut r)],
    ));
    v.push((
        "channel_scale".into(),
        Box::new(|t, p| { let y = t.channel_scale(p[0], p[1])?; project(t, y, 15) }),
        vec![random(&[2, 3, 4, 4], &mut r), random(&[2, 3], &mut r)],
    ));
    for f in [2, 4] {
        v.push((
            format!("upsample_nearest x{f}"),
            Box::new(move |t, p| { let y = t.upsample_nearest(p[0], f)?; project(t, y, 16) }),
            vec![random(&[1, 2, 3, 3], &mut r)],
        ));
    }
    v.push(("block_mean".into(), Box::new(|t, p| { let y = t.block_mean(p[0], 2)?; project(t, y, 17) }), vec![random(&[1, 2, 6, 4], &mut r)]));

    let n = 30;
    let gt: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 4 != 0).collect();
    // predictions at least 0.05 from the targets, away from the |e| kink
    let pred = Tensor::from_fn(&[1, 1, 5, 6], |i| gt[i] + if i % 2 == 0 { 0.3 } else { -0.2 });
    let (g1, m1) = (gt.clone(), mask.clone());
    v.push(("masked_l1".into(), Box::new(move |t, p| t.masked_l1(p[0], &g1, &m1)), vec![pred.clone()]));
    let (g2, m2) = (gt.clone(), mask.clone());
    v.push(("masked_mse".into(), Box::new(move |t, p| t.masked_mse(p[0], &g2, &m2)), vec![pred]));
    let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    v.push((
        "masked_cross_entropy".into(),
        Box::new(move |t, p| t.masked_cross_entropy(p[0], &labels, &mask)),
        vec![random(&[1, 2, 5, 6], &mut r)],
    ));
    v
}

fn model_gradient_error(back_projection: bool) -> f64 {
    let cfg = ModelConfig { width: 4, head_width: 2, attention_reduction: 2, back_projection, scale: 2, seed: 5, ..ModelConfig::default() };
    let mut model = build_model(&cfg).unwrap();
    let mut r = rng(102);
    // move zero-initialized biases off the ReLU kink
    let biases: Vec<String> = model.params().keys().filter(|n| n.ends_with("/b")).cloned().collect();
    for name in biases {
        let shape = model.param(&name).unwrap().shape().to_vec();
        model.set_param(&name, random(&shape, &mut r).map(|v| 0.1 * v)).unwrap();
    }
    let input = random(&[1, 7, 8, 8], &mut r);
    let n = 16 * 16;
    let targets = Targets {
        regression: std::array::from_fn(|_| (0..n).map(|_| r.random_range(0.0..1.0)).collect()),
        los: (0..n).map(|_| r.random_range(0..2u8)).collect(),
        mask: (0..n).map(|i| i % 5 != 0).collect(),
    };
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut params: Vec<Tensor> = model.params().values().cloned().collect();
    params.push(input);
    gradient_check_probes(
        |tape, vars| {
            let (x, ps) = vars.split_last().unwrap();
            let bound = Bound::from_pairs(names.iter().map(String::as_str).zip(ps.iter().copied()));
            let out = model.forward(tape, &bound, *x)?;
            composite_loss(tape, &out.prediction, &targets, &LossWeights::default())
        },
        &params,
        1e-6,
        6,
    )
    .unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (name, f, params) in primitive_checks() {
        let e = gradient_check(f, &params, 1e-6).unwrap();
        if e > worst.0 {
            worst = (e, name);
        }
    }
    for bp in [false, true] {
        let e = model_gradient_error(bp);
        if e > worst.0 {
            worst = (e, format!("full model (back_projection={bp})"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-4 && secs < 60.0,
        format!("max relative error {:.2e} ({}), {:.1} s", worst.0, worst.1, secs),
    )
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for i in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                                    acc += x.at4(i, ci, sy as usize, sx as usize) * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((i * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn criterion_2() -> Verdict {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let k = [1, 3, 5, 7][case % 4];
        let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let x = random(&[n, cin, h, w], &mut r);
        let wt = random(&[cout, cin, k, k], &mut r);
        let b = random(&[cout], &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        let expected = conv_oracle(&x, &wt, &b);
        let d = tape.value(y).data().iter().zip(&expected).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    verdict(worst < 1e-12, format!("50 shapes, k in {{1,3,5,7}}, max abs diff {worst:.2e}"))
}

fn zero_panels(model: &mut Model) {
    let names: Vec<String> =
        model.params().keys().filter(|n| n.starts_with("deep/") || n.starts_with("shallow/")).cloned().collect();
    for n in names {
        let shape = model.param(&n).unwrap().shape().to_vec();
        model.set_param(&n, Tensor::zeros(&shape)).unwrap();
    }
}

fn criterion_3() -> Verdict {
    let c = 16;
    let input = random(&[2, 7, 9, 7], &mut rng(303));
    let run = |use_residual: bool| {
        let cfg = ModelConfig { width: c, head_width: 4, use_residual, seed: 3, ..ModelConfig::default() };
        let mut model = build_model(&cfg).unwrap();
        zero_panels(&mut model);
        model.set_param("fuse/w", Tensor::from_fn(&[c, 2 * c, 1, 1], |i| (i / (2 * c) == i % (2 * c)) as u8 as f64)).unwrap();
        model.set_param("fuse/b", Tensor::zeros(&[c])).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, &|_| false);
        let x = tape.constant(input.clone());
        let out = model.forward_backbone(&mut tape, &p, x).unwrap();
        let bits = |v: Var| tape.value(v).data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        (bits(out.stem), bits(out.deep), bits(out.shallow), bits(out.output))
    };
    let (stem, deep, shallow, output) = run(true);
    let on = deep == stem && shallow == stem && output == stem;
    let (stem_off, _, _, output_off) = run(false);
    let off = output_off != stem_off;
    verdict(on && off, format!("residual on: backbone == stem bitwise: {on}; residual off: differs: {off}"))
}

fn criterion_4() -> Verdict {
    let model = build_model(&ModelConfig { width: 8, head_width: 4, seed: 4, ..ModelConfig::default() }).unwrap();
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let scale = r.random_range(0.01..20.0);
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let f = Tensor::from_fn(&[1, 8, h, w], |_| scale * r.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, &|_| false);
        let fv = tape.constant(f);
        let wv = model.forward_attention(&mut tape, &p, fv).unwrap().weights.unwrap();
        let wts = tape.value(wv);
        for c in 0..8 {
            let s: f64 = (0..4).map(|b| wts.data()[b * 8 + c]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    let mut uniform = model.clone();
    let (w0, b0) = (model.param("attn/expand0/w").unwrap().clone(), model.param("attn/expand0/b").unwrap().clone());
    for i in 1..4 {
        uniform.set_param(&format!("attn/expand{i}/w"), w0.clone()).unwrap();
        uniform.set_param(&format!("attn/expand{i}/b"), b0.clone()).unwrap();
    }
    let mut tape = Tape::new();
    let p = uniform.bind(&mut tape, &|_| false);
    let fv = tape.constant(random(&[2, 8, 5, 5], &mut r));
    let wv = uniform.forward_attention(&mut tape, &p, fv).unwrap().weights.unwrap();
    let exact = tape.value(wv).data().iter().all(|&a| a == 0.25);
    verdict(worst < 1e-12 && exact, format!("max |sum-1| over 1000 inputs {worst:.2e}; equal expand weights give exactly 0.25: {exact}"))
}

fn criterion_5() -> Verdict {
    let mut r = rng(505);
    let mut worst = 0.0f64;
    let mut order_ok = true;
    let mut invariant = true;
    for trial in 0..1000 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let n = h * w;
        let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        mask[0] = true;
        let gt: Vec<f64> = mask.iter().map(|&m| if m { r.random_range(0.0..1.0) } else { -0.1 }).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random_range(-0.2..1.2)).collect();
        let logits: Vec<f64> = (0..2 * n).map(|_| r.random_range(-4.0..4.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let cls: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();

        // scalar-loop oracles
        let (mut se, mut sa, mut ss, mut sce, mut hits, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let e = pred[i] - gt[i];
            se += e;
            sa += e.abs();
            ss += e * e;
            let (a, b) = (logits[i], logits[n + i]);
            let m = a.max(b);
            sce += m + ((a - m).exp() + (b - m).exp()).ln() - if labels[i] == 1 { b } else { a };
            hits += (cls[i] == labels[i]) as u8 as f64;
            cnt += 1.0;
        }
        let (o_ame, o_mae, o_rmse, o_ce, o_acc) = ((se / cnt).abs(), sa / cnt, (ss / cnt).sqrt(), sce / cnt, hits / cnt);

        let losses = |pred: &[f64], gt: &[f64], logits: &[f64]| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::new(&[1, 1, h, w], pred.to_vec()).unwrap());
            let lg = tape.constant(Tensor::new(&[1, 2, h, w], logits.to_vec()).unwrap());
            let l1 = l1_loss(&mut tape, p, gt, &mask).unwrap();
            let sd = stde(&mut tape, p, gt, &mask).unwrap();
            let ce = ce_loss(&mut tape, lg, &labels, &mask).unwrap();
            [tape.value(l1).item(), tape.value(sd).item(), tape.value(ce).item()]
        };
        let [l1, sd, ce] = losses(&pred, &gt, &logits);
        let m = regression_metrics(&pred, &gt, &mask).unwrap();
        let acc = accuracy(&cls, &labels, &mask).unwrap();
        for d in [l1 - o_mae, sd - o_rmse, ce - o_ce, m.ame - o_ame, m.mae - o_mae, m.rmse - o_rmse, acc - o_acc] {
            worst = worst.max(d.abs());
        }
        order_ok &= m.ame <= m.mae && m.mae <= m.rmse;

        // perturb everything under the sentinel
        let (mut p2, mut g2, mut lg2) = (pred.clone(), gt.clone(), logits.clone());
        let mut cls2 = cls.clone();
        for i in 0..n {
            if !mask[i] {
                p2[i] = 1e3 * (trial as f64 + 1.0);
                g2[i] = -7.0;
                lg2[i] = 50.0;
                lg2[n + i] = -50.0;
                cls2[i] ^= 1;
            }
        }
        let m2 = regression_metrics(&p2, &g2, &mask).unwrap();
        invariant &= m2 == m
            && losses(&p2, &g2, &lg2).map(f64::to_bits) == [l1, sd, ce].map(f64::to_bits)
            && accuracy(&cls2, &labels, &mask).unwrap() == acc;
    }
    verdict(
        worst < 1e-12 && order_ok && invariant,
        format!("max oracle diff {worst:.2e}; AME<=MAE<=RMSE on 1000 maps: {order_ok}; sentinel-invariant: {invariant}"),
    )
}

fn criterion_6() -> Verdict {
    let ds = Dataset::new(generate_samples(SEED, 6, 32, 0.3, &PropagationParams::default()).unwrap()).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csrd");
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    let round_trip = back == ds && encode_dataset(&back).unwrap() == bytes && decode_dataset(&bytes).unwrap() == ds;

    let mut commutes = true;
    let mut cases = 0;
    let mut r = rng(606);
    for kind in Kind::ALL {
        let spec = CharacteristicSpec::default_for(kind);
        for scale in [2, 4, 8] {
            for _ in 0..10 {
                let n = scale * r.random_range(1..4);
                let values: Vec<f64> = (0..n * n)
                    .map(|_| match (kind, r.random_bool(0.2)) {
                        (Kind::H, _) => r.random_range(0.0..60.0),
                        (_, true) => spec.sentinel(),
                        (Kind::Los, false) => r.random_range(0..2) as f64,
                        (_, false) => r.random_range(spec.min..spec.max),
                    })
                    .collect();
                let map = Map::new(n, values).unwrap();
                for t in Transform::ALL {
                    let a = downsample(&t.apply_map(&map), scale, &spec).unwrap();
                    let b = t.apply_map(&downsample(&map, scale, &spec).unwrap());
                    commutes &= a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits()));
                    cases += 1;
                }
            }
        }
    }
    for s in &ds.samples {
        for kind in Kind::ALL {
            let spec = CharacteristicSpec::default_for(kind);
            let map = Map::from_f32(s.grid_size, s.raster(kind)).unwrap();
            for t in Transform::ALL {
                let a = downsample(&t.apply_map(&map), 4, &spec).unwrap();
                let b = t.apply_map(&downsample(&map, 4, &spec).unwrap());
                commutes &= a == b;
                cases += 1;
            }
        }
    }

    let six = ds.samples.iter().all(|s| {
        let v = augment(s);
        v.len() == 6 && v.iter().map(|x| x.rasters.iter().flatten().map(|f| f.to_bits()).collect::<Vec<_>>()).collect::<HashSet<_>>().len() == 6
    });
    let los = CharacteristicSpec::default_for(Kind::Los);
    let tie = downsample(&Map::new(2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(), 2, &los).unwrap().values == vec![0.0];
    verdict(
        round_trip && commutes && six && tie,
        format!("round-trip bitwise: {round_trip}; commutation exact on {cases} cases: {commutes}; 6 distinct variants: {six}; LOS tie -> NLOS: {tie}"),
    )
}

fn criterion_7() -> Verdict {
    let ds = Dataset::new(generate_samples(SEED, 1, 32, 0.3, &PropagationParams::default()).unwrap()).unwrap();
    // one step is one schedule epoch here: halve every 400 steps
    let cfg = TrainConfig {
        lr: 2e-3,
        lr_halving_epochs: 400,
        seed: SEED,
        scale: 2,
        model: ModelConfig { width: 32, head_width: 16, seed: SEED, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (_, losses) = overfit_single(&cfg, &ds, 0, 2000).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let first = losses.iter().position(|&l| l < 0.01);
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        first.is_some() && secs < 300.0,
        format!(
            "32x32 sample, scale 2: loss {:.4} -> {:.5} (min {:.5}), first below 0.01 at step {}, {:.0} s",
            losses[0],
            losses.last().unwrap(),
            min,
            first.map_or("never".into(), |s| (s + 1).to_string()),
            secs
        ),
    )
}

/// Desk dataset plus trained models keyed by (preset, scale).
struct Desk {
    dataset: Dataset,
    models: std::sync::Mutex<BTreeMap<(u8, usize), (Model, f64)>>,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let samples = generate_samples(SEED, 96, 128, 0.3, &PropagationParams::default()).unwrap();
        let dataset = Dataset::new(samples).unwrap().split([0.8, 0.1, 0.1], SEED).unwrap();
        Desk { dataset, models: Default::default() }
    })
}

/// Trained best model and training seconds, cached.
fn desk_model(preset: Ablation, scale: usize) -> (Model, f64) {
    let d = desk();
    let key = (preset as u8, scale);
    if let Some(m) = d.models.lock().unwrap().get(&key) {
        return m.clone();
    }
    let start = Instant::now();
    let outcome = train(&desk_config(scale, preset), &d.dataset).unwrap();
    let secs = start.elapsed().as_secs_f64();
    eprintln!("  trained {} at scale {scale} in {secs:.0} s (best epoch {})", preset.label(), outcome.best_epoch);
    d.models.lock().unwrap().insert(key, (outcome.best.clone(), secs));
    (outcome.best, secs)
}

fn criterion_8() -> Verdict {
    let d = desk();
    let mut reports = BTreeMap::new();
    let mut secs2 = 0.0;
    for scale in [2, 4, 8] {
        let (model, secs) = desk_model(Ablation::Att, scale);
        if scale == 2 {
            secs2 = secs;
        }
        reports.insert(scale, evaluate(&model, &d.dataset, Split::Test, scale).unwrap());
    }
    let test = d.dataset.indices(Split::Test).unwrap();
    let plain = BaselinePredictor { method: Interpolation::Bicubic, scale: 2, fill_buildings: false };
    let filled = BaselinePredictor { fill_buildings: true, ..plain };
    let bicubic = evaluate_with(&plain, &d.dataset, &test).unwrap().mae(Kind::Pl);
    let bicubic_filled = evaluate_with(&filled, &d.dataset, &test).unwrap().mae(Kind::Pl);
    let model_pl = reports[&2].mae(Kind::Pl);
    let a = model_pl <= 0.8 * bicubic;
    let acc = reports[&2].los_accuracy();
    let b = acc >= 0.90;
    let mut monotone = Vec::new();
    for kind in Kind::TARGETS {
        let m = [2, 4, 8].map(|s| reports[&s].mae(kind));
        monotone.push((kind, m, m[0] < m[1] && m[1] < m[2]));
    }
    let c = monotone.iter().all(|x| x.2);
    let timely = secs2 < 1200.0;
    let per_target: Vec<String> =
        monotone.iter().map(|(k, m, ok)| format!("{} {:.3}/{:.3}/{:.3}{}", k.name(), m[0], m[1], m[2], if *ok { "" } else { " (!)" })).collect();
    verdict(
        a && b && c && timely,
        format!(
            "(a) PL MAE {model_pl:.3} dB vs 0.8 x bicubic {:.3} dB [bicubic {bicubic:.3}, in-building-filled bicubic {bicubic_filled:.3}]: {a}; \
             (b) LOS accuracy {acc:.4}: {b}; (c) MAE x2<x4<x8 per target [{}]: {c}; scale-2 training {secs2:.0} s",
            0.8 * bicubic,
            per_target.join(", ")
        ),
    )
}

fn criterion_9() -> Verdict {
    let d = desk();
    let start = Instant::now();
    let mut results = Vec::new();
    for preset in Ablation::ALL {
        let (model, _) = desk_model(preset, 2);
        let report = evaluate(&model, &d.dataset, Split::Test, 2).unwrap();
        let row = report.row(Kind::Pl).unwrap();
        results.push((preset, row.mae, row.rmse.unwrap()));
    }
    let table = AblationTable { rows: AblationTable::rows_for(2, &results).unwrap() };
    println!("{}", table.to_csv().trim_end());
    let (att, stl) = (table.get(Ablation::Att, 2).unwrap(), table.get(Ablation::Stl, 2).unwrap());
    let pass = att.pl_mae <= stl.pl_mae && table.rows.len() == 4;
    verdict(
        pass,
        format!("+ATT PL MAE {:.3} dB vs STL {:.3} dB ({:+.1}% vs STL), {:.0} s", att.pl_mae, stl.pl_mae, att.mae_gain_vs_stl, start.elapsed().as_secs_f64()),
    )
}

fn criterion_10() -> Verdict {
    let d = desk();
    let (model, _) = desk_model(Ablation::Att, 2);
    let cfg = TrainConfig { epochs: 2, ..desk_config(2, Ablation::Att) };
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in Kind::TARGETS {
        let out = finetune_heads(&model, &d.dataset, kind.name(), &cfg).unwrap();
        let prefix = format!("head/{}/", kind.name());
        let frozen = model.params().iter().filter(|(n, _)| !n.starts_with(&prefix)).all(|(n, t)| {
            t.data().iter().map(|v| v.to_bits()).eq(out.model.param(n).unwrap().data().iter().map(|v| v.to_bits()))
        });
        let ok = out.after <= out.before * 1.01 && frozen;
        pass &= ok;
        parts.push(format!("{} {:.4}->{:.4}{}", kind.name(), out.before, out.after, if frozen { "" } else { " (frozen changed!)" }));
    }
    verdict(pass, format!("val error before->after: {}", parts.join(", ")))
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_chansr"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut ok = true;
    for tag in ["a", "b"] {
        let (data, model, report) = (format!("d_{tag}.csrd"), format!("m_{tag}.csrm"), format!("r_{tag}.csv"));
        ok &= run_cli(p, &["gen-data", "--seed", "7", "--scenes", "12", "--grid", "64", "--density", "0.3", "--deterministic", "--out", &data]);
        ok &= run_cli(
            p,
            &["train", "--data", &data, "--seed", "7", "--epochs", "2", "--batch", "4", "--patch", "32", "--width", "8", "--head-width", "4", "--deterministic", "--out", &model],
        );
        ok &= run_cli(p, &["eval", "--data", &data, "--checkpoint", &model, "--seed", "7", "--deterministic", "--out", &report]);
    }
    let pairs = [("d_a.csrd", "d_b.csrd"), ("m_a.csrm", "m_b.csrm"), ("m_a.last.csrm", "m_b.last.csrm"), ("m_a.history.csv", "m_b.history.csv"), ("r_a.csv", "r_b.csv")];
    let identical: Vec<bool> =
        pairs.iter().map(|(a, b)| matches!((std::fs::read(p.join(a)), std::fs::read(p.join(b))), (Ok(x), Ok(y)) if x == y)).collect();
    let pass = ok && identical.iter().all(|&x| x);
    verdict(pass, format!("commands succeeded: {ok}; byte-identical dataset/checkpoints/history/report: {identical:?}"))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        ("gradient correctness", criterion_1),
        ("convolution oracle", criterion_2),
        ("residual identity", criterion_3),
        ("attention distribution", criterion_4),
        ("loss and metric oracles", criterion_5),
        ("pipeline integrity", criterion_6),
        ("single-sample overfit", criterion_7),
        ("desk-scale end-to-end", criterion_8),
        ("ablation harness", criterion_9),
        ("head fine-tuning", criterion_10),
        ("determinism", criterion_11),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        failed += (!v.pass) as usize;
        println!(
            "criterion {number:>2} {}: {name}: {} [{}]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            fmt_duration(t.elapsed())
        );
    }
    println!("acceptance: {failed} failed, total {}", fmt_duration(start.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
