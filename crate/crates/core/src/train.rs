//! Training, head fine-tuning, evaluation, the ablation harness and the
//! interpolation baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{downsample, CharacteristicSpec, Dataset, Kind, Map, Split, Transform, IN_BUILDING_THRESHOLD};
use crate::error::{Error, Result};
use crate::loss::{self, composite_loss, EvalReport, LossWeights, ReportRow, Targets};
use crate::model::{build_model, Model, ModelConfig};
use crate::rng;
use crate::runtime;
use crate::tensor::Tensor;

/// Cumulative ablation presets: each adds one component to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Plain network: no residual adds, back-projection, augmentation or attention.
    Stl,
    /// Adds residual connections and back-projection.
    Res,
    /// Adds 6× augmentation.
    Da,
    /// Adds attention; the full model.
    Att,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Stl, Ablation::Res, Ablation::Da, Ablation::Att];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Stl => "STL",
            Ablation::Res => "+RES",
            Ablation::Da => "+DA",
            Ablation::Att => "+ATT",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        match s.to_ascii_lowercase().trim_start_matches('+') {
            "stl" => Ok(Ablation::Stl),
            "res" => Ok(Ablation::Res),
            "da" => Ok(Ablation::Da),
            "att" => Ok(Ablation::Att),
            other => Err(Error::InvalidArgument(format!("unknown ablation preset `{other}`"))),
        }
    }

    pub fn residual(self) -> bool {
        self != Ablation::Stl
    }

    pub fn augmentation(self) -> bool {
        matches!(self, Ablation::Da | Ablation::Att)
    }

    pub fn attention(self) -> bool {
        self == Ablation::Att
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// HR patch side.
    pub patch_size: usize,
    /// Random patches drawn from each training scene per epoch.
    pub patches_per_scene: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// The learning rate halves after every this many epochs.
    pub lr_halving_epochs: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub scale: usize,
    pub ablation: Ablation,
    pub split_ratios: [f64; 3],
    pub loss: LossWeights,
    /// Architecture; the residual, back-projection and attention switches
    /// are overridden by `ablation`, `scale` by the field above.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            patch_size: 64,
            patches_per_scene: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_halving_epochs: 100,
            seed: 7,
            deterministic: false,
            scale: 2,
            ablation: Ablation::Att,
            split_ratios: [0.8, 0.1, 0.1],
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.patches_per_scene == 0 {
            return Err(Error::config("patches_per_scene", "must be at least 1"));
        }
        if !matches!(self.scale, 2 | 4 | 8) {
            return Err(Error::config("scale", format!("must be 2, 4 or 8, got {}", self.scale)));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.scale) {
            return Err(Error::config(
                "patch_size",
                format!("{} is not a positive multiple of scale {}", self.patch_size, self.scale),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.lr_halving_epochs == 0 {
            return Err(Error::config("lr", "learning rate and halving period must be positive"));
        }
        self.loss.validate()?;
        self.effective_model().validate()
    }

    /// Model configuration with the ablation switches and scale applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            scale: self.scale,
            use_residual: self.ablation.residual(),
            back_projection: self.ablation.residual(),
            use_attention: self.ablation.attention(),
            ..self.model.clone()
        }
    }

    /// Learning rate in 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch.max(1) - 1) / self.lr_halving_epochs;
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// Sanitized native-unit rasters of one scene plus its validity mask.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub size: usize,
    pub native: [Vec<f64>; 7],
    /// `true` on open-ground cells.
    pub mask: Vec<bool>,
}

pub fn prepare_scene(dataset: &Dataset, index: usize) -> PreparedScene {
    let sample = &dataset.samples[index];
    let native = Kind::ALL.map(|k| {
        let spec = dataset.spec(k);
        sample.raster(k).iter().map(|&v| spec.sanitize_value(v as f64)).collect::<Vec<f64>>()
    });
    let pl = dataset.spec(Kind::Pl);
    let mask = native[Kind::Pl.index()].iter().map(|&v| !pl.is_sentinel(v)).collect();
    PreparedScene { size: sample.grid_size, native, mask }
}

/// One training/evaluation example: normalized LR input `[7,l,l]` and HR targets.
struct Example {
    lr: Vec<f64>,
    lr_size: usize,
    regression: [Vec<f64>; 5],
    los: Vec<u8>,
    mask: Vec<bool>,
}

fn crop(scene: &PreparedScene, row: usize, col: usize, size: usize, t: Transform) -> ([Vec<f64>; 7], Vec<bool>) {
    let g = scene.size;
    let cut = |src: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            out.extend_from_slice(&src[r * g + col..r * g + col + size]);
        }
        t.apply(size, &out)
    };
    let maps = scene.native.each_ref().map(|m| cut(m));
    let mut mask = Vec::with_capacity(size * size);
    for r in row..row + size {
        mask.extend_from_slice(&scene.mask[r * g + col..r * g + col + size]);
    }
    (maps, t.apply(size, &mask))
}

fn make_example(maps: &[Vec<f64>; 7], mask: Vec<bool>, size: usize, scale: usize, specs: &[CharacteristicSpec; 7]) -> Result<Example> {
    let lr_size = size / scale;
    let mut lr = Vec::with_capacity(7 * lr_size * lr_size);
    for kind in Kind::ALL {
        let spec = &specs[kind.index()];
        let hr = Map::new(size, maps[kind.index()].clone())?;
        let small = downsample(&hr, scale, spec)?;
        lr.extend(small.values.iter().map(|&v| spec.normalize_value(v)));
    }
    let regression = Kind::REGRESSION.map(|k| {
        let spec = &specs[k.index()];
        maps[k.index()].iter().map(|&v| spec.normalize_value(v)).collect::<Vec<f64>>()
    });
    let los = maps[Kind::Los.index()].iter().map(|&v| (v >= 0.5) as u8).collect();
    Ok(Example { lr, lr_size, regression, los, mask })
}

fn batch_tensors(examples: &[Example]) -> Result<(Tensor, Targets)> {
    let n = examples.len();
    let l = examples[0].lr_size;
    let mut input = Vec::with_capacity(n * 7 * l * l);
    let mut regression: [Vec<f64>; 5] = Default::default();
    let mut los = Vec::new();
    let mut mask = Vec::new();
    for ex in examples {
        input.extend_from_slice(&ex.lr);
        for (acc, r) in regression.iter_mut().zip(&ex.regression) {
            acc.extend_from_slice(r);
        }
        los.extend_from_slice(&ex.los);
        mask.extend_from_slice(&ex.mask);
    }
    Ok((Tensor::new(&[n, 7, l, l], input)?, Targets { regression, los, mask }))
}

/// Normalized LR input `[1,7,g/s,g/s]` for a full frame.
pub fn full_frame_input(scene: &PreparedScene, scale: usize, specs: &[CharacteristicSpec; 7]) -> Result<Tensor> {
    let (maps, mask) = crop(scene, 0, 0, scene.size, Transform::Identity);
    let ex = make_example(&maps, mask, scene.size, scale, specs)?;
    Tensor::new(&[1, 7, ex.lr_size, ex.lr_size], ex.lr)
}

/// HR output of a predictor, normalized units, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SrMaps {
    pub regression: [Vec<f64>; 5],
    pub los: Vec<u8>,
}

/// Anything that maps a normalized LR frame to HR maps.
pub trait Predictor {
    fn scale(&self) -> usize;

    /// `input` is `[1,7,l,l]`; `scene` is the HR ground truth, which real
    /// predictors must not read.
    fn predict(&self, input: &Tensor, scene: &PreparedScene) -> Result<SrMaps>;
}

impl Predictor for Model {
    fn scale(&self) -> usize {
        self.config().scale
    }

    fn predict(&self, input: &Tensor, _scene: &PreparedScene) -> Result<SrMaps> {
        let out = Model::predict(self, input)?;
        let [n, _, h, w] = out.los_logits.dims4()?;
        Ok(SrMaps {
            regression: out.regression.map(Tensor::into_data),
            los: loss::argmax_classes(out.los_logits.data(), n, h, w),
        })
    }
}

/// Full-frame evaluation of `predictor` on the scenes at `indices`, in native units.
/// Errors are pooled over all valid pixels of all scenes.
pub fn evaluate_with(predictor: &dyn Predictor, dataset: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let scale = predictor.scale();
    let mut preds: [Vec<f64>; 5] = Default::default();
    let mut gts: [Vec<f64>; 5] = Default::default();
    let mut los_pred = Vec::new();
    let mut los_gt = Vec::new();
    let mut mask = Vec::new();
    for &i in indices {
        let scene = prepare_scene(dataset, i);
        let input = full_frame_input(&scene, scale, &dataset.specs)?;
        let out = predictor.predict(&input, &scene)?;
        for (k, kind) in Kind::REGRESSION.iter().enumerate() {
            let spec = dataset.spec(*kind);
            preds[k].extend(out.regression[k].iter().map(|&u| spec.denormalize_value(u)));
            gts[k].extend_from_slice(&scene.native[kind.index()]);
        }
        los_pred.extend_from_slice(&out.los);
        los_gt.extend(scene.native[Kind::Los.index()].iter().map(|&v| (v >= 0.5) as u8));
        mask.extend_from_slice(&scene.mask);
    }
    let mut rows = Vec::with_capacity(6);
    for (k, kind) in Kind::REGRESSION.iter().enumerate() {
        let m = loss::regression_metrics(&preds[k], &gts[k], &mask)?;
        rows.push(ReportRow { target: *kind, ame: m.ame, mae: m.mae, rmse: Some(m.rmse), stde: Some(m.stde), accuracy: None });
    }
    let as_f64 = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let los_m = loss::regression_metrics(&as_f64(&los_pred), &as_f64(&los_gt), &mask)?;
    rows.push(ReportRow {
        target: Kind::Los,
        ame: los_m.ame,
        mae: los_m.mae,
        rmse: None,
        stde: None,
        accuracy: Some(loss::accuracy(&los_pred, &los_gt, &mask)?),
    });
    let valid = mask.iter().filter(|&&m| m).count();
    Ok(EvalReport { rows, scale, samples: indices.len(), valid_fraction: valid as f64 / mask.len() as f64 })
}

/// Evaluates a trained model on one split; the requested scale must match the checkpoint.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, scale: usize) -> Result<EvalReport> {
    if model.config().scale != scale {
        return Err(Error::ScaleMismatch { checkpoint: model.config().scale, requested: scale });
    }
    evaluate_with(model, dataset, &dataset.indices(split)?)
}

/// Adaptive-moment optimizer state, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient; others are untouched.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let param = model
                .param(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = param.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = param.shape().to_vec();
            model.set_param(name, Tensor::new(&shape, data)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Native-unit validation MAE in [`Kind::REGRESSION`] order.
    pub val_mae: [f64; 5],
    pub val_accuracy: f64,
    pub lr: f64,
    /// Wall-clock seconds; not recorded in deterministic mode.
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss");
        for k in Kind::REGRESSION {
            let _ = write!(s, ",val_mae_{}", k.name());
        }
        s.push_str(",val_acc_los,lr,seconds\n");
        for e in &self.epochs {
            let _ = write!(s, "{},{}", e.epoch, e.train_loss);
            for v in e.val_mae {
                let _ = write!(s, ",{v}");
            }
            let secs = e.seconds.map(|v| format!("{v:.3}")).unwrap_or_default();
            let _ = writeln!(s, ",{},{},{}", e.val_accuracy, e.lr, secs);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Mean range-normalized MAE over regression targets plus the LOS error rate.
pub fn validation_score(report: &EvalReport, dataset: &Dataset) -> f64 {
    let reg: f64 = Kind::REGRESSION.iter().map(|&k| report.mae(k) / dataset.spec(k).range()).sum::<f64>() / 5.0;
    reg + (1.0 - report.los_accuracy())
}

struct Sampler<'a> {
    dataset: &'a Dataset,
    scenes: Vec<PreparedScene>,
    patch: usize,
    scale: usize,
    augment: bool,
}

impl Sampler<'_> {
    fn example(&self, scene: usize, rng: &mut impl Rng) -> Result<Example> {
        let s = &self.scenes[scene];
        let slots = (s.size - self.patch) / self.scale + 1;
        let row = rng.random_range(0..slots) * self.scale;
        let col = rng.random_range(0..slots) * self.scale;
        let t = if self.augment { Transform::ALL[rng.random_range(0..6)] } else { Transform::Identity };
        let (maps, mask) = crop(s, row, col, self.patch, t);
        make_example(&maps, mask, self.patch, self.scale, &self.dataset.specs)
    }
}

/// Which parameters a run may update.
type TrainableFilter<'a> = &'a dyn Fn(&str) -> bool;

struct Run<'a> {
    config: &'a TrainConfig,
    dataset: &'a Dataset,
    weights: LossWeights,
    trainable: TrainableFilter<'a>,
    augment: bool,
}

/// Trains from `initial`; returns the best-scoring and last models.
fn run_training(run: &Run, initial: Model, score: &dyn Fn(&EvalReport) -> f64) -> Result<TrainOutcome> {
    let cfg = run.config;
    let train_idx = run.dataset.indices(Split::Train)?;
    let val_idx = run.dataset.indices(Split::Val)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and val splits".into()));
    }
    if cfg.patch_size > run.dataset.grid_size() {
        return Err(Error::config("patch_size", format!("{} exceeds grid {}", cfg.patch_size, run.dataset.grid_size())));
    }
    let previous_mode = runtime::is_serial();
    if cfg.deterministic {
        runtime::set_deterministic(true);
    }
    let sampler = Sampler {
        dataset: run.dataset,
        scenes: train_idx.iter().map(|&i| prepare_scene(run.dataset, i)).collect(),
        patch: cfg.patch_size,
        scale: cfg.scale,
        augment: run.augment,
    };
    let result = (|| {
        let mut model = initial;
        let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut rng = rng::stream(cfg.seed, 0x7A11);
        let mut history = TrainHistory::default();
        let initial_report = evaluate_with(&model, run.dataset, &val_idx)?;
        let mut best = (score(&initial_report), model.clone(), 0usize);
        let started = Instant::now();
        for epoch in 1..=cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let mut order: Vec<usize> =
                (0..sampler.scenes.len()).flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_scene)).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let examples = chunk.iter().map(|&i| sampler.example(i, &mut rng)).collect::<Result<Vec<_>>>()?;
                let (input, targets) = batch_tensors(&examples)?;
                let value = optimizer_step(&mut model, &mut adam, &input, &targets, &run.weights, run.trainable, lr)
                    .map_err(|e| match e {
                        Error::Divergence { .. } => Error::Divergence { step: history.step_losses.len() + 1 },
                        other => other,
                    })?;
                history.step_losses.push(value);
                epoch_loss += value;
                batches += 1;
            }
            let report = evaluate_with(&model, run.dataset, &val_idx)?;
            let s = score(&report);
            if s < best.0 {
                best = (s, model.clone(), epoch);
            }
            let record = EpochRecord {
                epoch,
                train_loss: epoch_loss / batches as f64,
                val_mae: Kind::REGRESSION.map(|k| report.mae(k)),
                val_accuracy: report.los_accuracy(),
                lr,
                seconds: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
            };
            log::info!(
                "epoch {epoch}/{}: loss {:.5}, val PL MAE {:.3} dB, LOS acc {:.4}",
                cfg.epochs,
                record.train_loss,
                record.val_mae[0],
                record.val_accuracy
            );
            history.epochs.push(record);
        }
        Ok(TrainOutcome { best: best.1, last: model, best_epoch: best.2, history })
    })();
    runtime::set_deterministic(previous_mode);
    result
}

/// Forward, loss, backward and one Adam update on one batch. Returns the loss.
pub fn optimizer_step(
    model: &mut Model,
    adam: &mut Adam,
    input: &Tensor,
    targets: &Targets,
    weights: &LossWeights,
    trainable: TrainableFilter,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, trainable);
    let x = tape.constant(input.clone());
    let out = model.forward(&mut tape, &params, x)?;
    let loss_var = composite_loss(&mut tape, &out.prediction, targets, weights)?;
    let value = tape.value(loss_var).item();
    if !value.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    let grads = tape.backward(loss_var)?;
    let mut named = BTreeMap::new();
    for (name, var) in params.iter() {
        if let Some(g) = grads.get(var) {
            named.insert(name.to_string(), g.clone());
        }
    }
    adam.step(model, &named, lr)?;
    Ok(value)
}

/// Trains a fresh model per `config` (ablation preset applied).
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let model = build_model(&config.effective_model())?;
    let run = Run { config, dataset, weights: config.loss, trainable: &|_| true, augment: config.ablation.augmentation() };
    run_training(&run, model, &|r| validation_score(r, dataset))
}

/// Overfits a single sample for `steps` optimizer steps on its full frame;
/// returns the loss of every step. Each step counts as one schedule epoch.
pub fn overfit_single(config: &TrainConfig, dataset: &Dataset, index: usize, steps: usize) -> Result<(Model, Vec<f64>)> {
    config.validate()?;
    let mut model = build_model(&config.effective_model())?;
    let scene = prepare_scene(dataset, index);
    let (maps, mask) = crop(&scene, 0, 0, scene.size, Transform::Identity);
    let ex = make_example(&maps, mask, scene.size, config.scale, &dataset.specs)?;
    let (input, targets) = batch_tensors(std::slice::from_ref(&ex))?;
    let mut adam = Adam::new(config.beta1, config.beta2, config.adam_eps);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let v = optimizer_step(&mut model, &mut adam, &input, &targets, &config.loss, &|_| true, config.lr_at(step))
            .map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { step },
                other => other,
            })?;
        losses.push(v);
    }
    Ok((model, losses))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    /// Target validation error before and after (MAE, or error rate for LOS).
    pub before: f64,
    pub after: f64,
    pub history: TrainHistory,
}

fn target_error(report: &EvalReport, target: Kind) -> f64 {
    if target == Kind::Los {
        1.0 - report.los_accuracy()
    } else {
        report.mae(target)
    }
}

/// Optimizes only `head/<target>/…` on that target's own loss. Everything
/// else is bound without gradients and never changes. The returned model is
/// the best on validation, which may be the starting one.
pub fn finetune_heads(model: &Model, dataset: &Dataset, target: &str, config: &TrainConfig) -> Result<FinetuneOutcome> {
    let kind = Kind::from_name(target)?;
    if !kind.is_target() {
        return Err(Error::UnknownTarget(target.to_string()));
    }
    let cfg = TrainConfig { scale: model.config().scale, ..config.clone() };
    if !cfg.patch_size.is_multiple_of(cfg.scale) {
        return Err(Error::config("patch_size", "must be a multiple of the checkpoint scale"));
    }
    let prefix = format!("head/{}/", kind.name());
    let trainable = move |name: &str| name.starts_with(&prefix);
    let run = Run {
        config: &cfg,
        dataset,
        weights: LossWeights::single(kind, cfg.loss.stde),
        trainable: &trainable,
        augment: cfg.ablation.augmentation(),
    };
    let val_idx = dataset.indices(Split::Val)?;
    let before = target_error(&evaluate_with(model, dataset, &val_idx)?, kind);
    let outcome = run_training(&run, model.clone(), &|r| target_error(r, kind))?;
    let after = target_error(&evaluate_with(&outcome.best, dataset, &val_idx)?, kind);
    Ok(FinetuneOutcome { model: outcome.best, before, after, history: outcome.history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: Ablation,
    pub scale: usize,
    pub pl_mae: f64,
    pub pl_rmse: f64,
    /// Percent reduction relative to STL.
    pub mae_gain_vs_stl: f64,
    pub rmse_gain_vs_stl: f64,
    /// Percent reduction relative to the preceding preset.
    pub mae_gain_vs_prev: f64,
    pub rmse_gain_vs_prev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows for one scale from `(preset, PL MAE, PL RMSE)` triples given in
    /// [`Ablation::ALL`] order.
    pub fn rows_for(scale: usize, results: &[(Ablation, f64, f64)]) -> Result<Vec<AblationRow>> {
        if results.iter().map(|r| r.0).ne(Ablation::ALL) {
            return Err(Error::InvalidArgument("ablation results must cover STL, +RES, +DA, +ATT in order".into()));
        }
        let (_, stl_mae, stl_rmse) = results[0];
        let mut rows = Vec::with_capacity(4);
        for (i, &(preset, mae, rmse)) in results.iter().enumerate() {
            let (prev_mae, prev_rmse) = if i == 0 { (mae, rmse) } else { (results[i - 1].1, results[i - 1].2) };
            rows.push(AblationRow {
                preset,
                scale,
                pl_mae: mae,
                pl_rmse: rmse,
                mae_gain_vs_stl: gain(stl_mae, mae),
                rmse_gain_vs_stl: gain(stl_rmse, rmse),
                mae_gain_vs_prev: gain(prev_mae, mae),
                rmse_gain_vs_prev: gain(prev_rmse, rmse),
            });
        }
        Ok(rows)
    }

    pub fn get(&self, preset: Ablation, scale: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset && r.scale == scale)
    }

    /// Rows in display order (+ATT first, STL last), one line per preset and scale.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "preset,scale,pl_mae,pl_rmse,mae_gain_vs_stl_pct,rmse_gain_vs_stl_pct,mae_gain_vs_prev_pct,rmse_gain_vs_prev_pct\n",
        );
        for preset in Ablation::ALL.iter().rev() {
            for r in self.rows.iter().filter(|r| r.preset == *preset) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.2},{:.2},{:.2},{:.2}",
                    preset.label(),
                    r.scale,
                    r.pl_mae,
                    r.pl_rmse,
                    r.mae_gain_vs_stl,
                    r.rmse_gain_vs_stl,
                    r.mae_gain_vs_prev,
                    r.rmse_gain_vs_prev
                );
            }
        }
        s
    }
}

pub struct AblationRun {
    pub table: AblationTable,
    /// Trained models by preset and scale.
    pub models: Vec<(Ablation, usize, Model)>,
}

fn gain(reference: f64, value: f64) -> f64 {
    100.0 * (reference - value) / reference
}

/// Trains the four cumulative presets at every scale with the same seed and
/// reports test-split PL MAE/RMSE.
pub fn run_ablation(base: &TrainConfig, dataset: &Dataset, scales: &[usize]) -> Result<AblationRun> {
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &scale in scales {
        let mut results: Vec<(Ablation, f64, f64)> = Vec::new();
        for preset in Ablation::ALL {
            let cfg = TrainConfig { ablation: preset, scale, ..base.clone() };
            log::info!("ablation {} at scale {scale}", preset.label());
            let outcome = train(&cfg, dataset)?;
            let report = evaluate(&outcome.best, dataset, Split::Test, scale)?;
            let row = report.row(Kind::Pl).expect("PL row");
            results.push((preset, row.mae, row.rmse.expect("regression rmse")));
            models.push((preset, scale, outcome.best));
        }
        rows.extend(AblationTable::rows_for(scale, &results)?);
    }
    Ok(AblationRun { table: AblationTable { rows }, models })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bicubic,
}

impl Interpolation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Interpolation::Nearest),
            "bicubic" => Ok(Interpolation::Bicubic),
            other => Err(Error::InvalidArgument(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Catmull-Rom kernel (`a = −0.5`).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples one axis: `src` has `n` samples along the axis at stride `stride`.
fn cubic_axis(n: usize, scale: usize) -> Vec<[(usize, f64); 4]> {
    (0..n * scale)
        .map(|i| {
            let pos = (i as f64 + 0.5) / scale as f64 - 0.5;
            let base = pos.floor();
            let t = pos - base;
            let mut taps = [(0usize, 0.0); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let offset = j as isize - 1;
                let idx = (base as isize + offset).clamp(0, n as isize - 1) as usize;
                *tap = (idx, cubic_weight(t - offset as f64));
            }
            taps
        })
        .collect()
}

/// Upsamples a LR map by `scale`. Nearest replicates; bicubic is separable
/// Catmull-Rom on pixel centres with edge clamping. LOS accepts nearest only.
pub fn baseline_interpolate(lr: &Map, scale: usize, method: Interpolation, kind: Kind) -> Result<Map> {
    if scale < 1 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let n = lr.size;
    let m = n * scale;
    match method {
        Interpolation::Nearest => {
            let mut out = Vec::with_capacity(m * m);
            for r in 0..m {
                for c in 0..m {
                    out.push(lr.get(r / scale, c / scale));
                }
            }
            Map::new(m, out)
        }
        Interpolation::Bicubic => {
            if kind == Kind::Los {
                return Err(Error::InvalidArgument("bicubic interpolation is not defined for LOS classes".into()));
            }
            let taps = cubic_axis(n, scale);
            let mut rows = vec![0.0; n * m];
            for r in 0..n {
                for (c, t) in taps.iter().enumerate() {
                    rows[r * m + c] = t.iter().map(|&(i, w)| w * lr.get(r, i)).sum();
                }
            }
            let mut out = vec![0.0; m * m];
            for (r, t) in taps.iter().enumerate() {
                for c in 0..m {
                    out[r * m + c] = t.iter().map(|&(i, w)| w * rows[i * m + c]).sum();
                }
            }
            Map::new(m, out)
        }
    }
}

/// Replaces in-building cells of a normalized map by the mean of their valid
/// 4-neighbours, growing inward until every cell is filled.
pub fn fill_in_building(map: &Map) -> Map {
    let n = map.size;
    let mut values = map.values.clone();
    let mut valid: Vec<bool> = values.iter().map(|&v| v >= IN_BUILDING_THRESHOLD).collect();
    if !valid.iter().any(|&v| v) {
        return map.clone();
    }
    loop {
        let mut updates = Vec::new();
        for r in 0..n {
            for c in 0..n {
                if valid[r * n + c] {
                    continue;
                }
                let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                let (sum, cnt) = neighbours
                    .iter()
                    .filter(|&&(y, x)| y < n && x < n && valid[y * n + x])
                    .fold((0.0, 0usize), |(s, k), &(y, x)| (s + values[y * n + x], k + 1));
                if cnt > 0 {
                    updates.push((r * n + c, sum / cnt as f64));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (i, v) in updates {
            values[i] = v;
            valid[i] = true;
        }
    }
    Map { size: n, values }
}

/// Interpolation baseline usable wherever a [`Predictor`] is expected.
#[derive(Clone, Copy, Debug)]
pub struct BaselinePredictor {
    pub method: Interpolation,
    pub scale: usize,
    /// Inpaint in-building LR cells before interpolating continuous maps.
    pub fill_buildings: bool,
}

impl Predictor for BaselinePredictor {
    fn scale(&self) -> usize {
        self.scale
    }

    fn predict(&self, input: &Tensor, _scene: &PreparedScene) -> Result<SrMaps> {
        let [_, _, l, _] = input.dims4()?;
        let channel = |kind: Kind| Map::new(l, input.plane(0, kind.index()).to_vec());
        let mut regression: [Vec<f64>; 5] = Default::default();
        for (k, kind) in Kind::REGRESSION.iter().enumerate() {
            let mut lr = channel(*kind)?;
            if self.fill_buildings {
                lr = fill_in_building(&lr);
            }
            regression[k] = baseline_interpolate(&lr, self.scale, self.method, *kind)?.values;
        }
        let los = baseline_interpolate(&channel(Kind::Los)?, self.scale, Interpolation::Nearest, Kind::Los)?;
        Ok(SrMaps { regression, los: los.values.iter().map(|&v| (v >= 0.5) as u8).collect() })
    }
}
