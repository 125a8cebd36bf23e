//! Masked training losses and evaluation metrics.
//!
//! Every loss and metric ignores pixels outside the validity mask (building
//! interiors), so sentinel values never leak into a number.
//!
//! `stde` is the root of the mean squared error, with no mean subtraction.
//! Numerically it is the same quantity as RMSE; both names are kept because
//! training calls it a dispersion term and reports call it RMSE.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::Kind;
use crate::error::{Error, Result};

/// Mean `|pred − gt|` over masked pixels.
pub fn l1_loss(tape: &mut Tape, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Var> {
    tape.masked_l1(pred, gt, mask)
}

/// Mean two-class cross-entropy of `[N,2,H,W]` logits over masked pixels.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
    tape.masked_cross_entropy(logits, labels, mask)
}

/// `sqrt(mean((pred − gt)²))` over masked pixels.
pub fn stde(tape: &mut Tape, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Var> {
    let mse = tape.masked_mse(pred, gt, mask)?;
    Ok(tape.sqrt(mse))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Per regression target, in [`Kind::REGRESSION`] order.
    pub regression: [f64; 5],
    pub ce: f64,
    pub stde: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { regression: [1.0; 5], ce: 1.0, stde: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.regression.iter().chain([&self.ce, &self.stde]);
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss_weights", "weights must be finite and non-negative"));
        }
        if all.clone().all(|w| *w == 0.0) {
            return Err(Error::config("loss_weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    /// Weights that train only `target`.
    pub fn single(target: Kind, stde: f64) -> Self {
        let mut w = LossWeights { regression: [0.0; 5], ce: 0.0, stde: 0.0 };
        match Kind::REGRESSION.iter().position(|&k| k == target) {
            Some(i) => {
                w.regression[i] = 1.0;
                w.stde = stde;
            }
            None => w.ce = 1.0,
        }
        w
    }
}

/// Model outputs on a tape: five regression maps `[N,1,H,W]` in
/// [`Kind::REGRESSION`] order and LOS logits `[N,2,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub regression: [Var; 5],
    pub los_logits: Var,
}

/// Ground truth for a batch, flattened `N·H·W` per target, normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub regression: [Vec<f64>; 5],
    pub los: Vec<u8>,
    pub mask: Vec<bool>,
}

/// `Σ w_k·l1_k + w_ce·ce + λ·Σ_k [w_k > 0]·stde_k`; terms with zero weight are omitted.
pub fn composite_loss(tape: &mut Tape, pred: &PredictionVars, gt: &Targets, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut terms = Vec::new();
    for k in 0..5 {
        if weights.regression[k] == 0.0 {
            continue;
        }
        let l1 = l1_loss(tape, pred.regression[k], &gt.regression[k], &gt.mask)?;
        terms.push(tape.scale(l1, weights.regression[k]));
        if weights.stde > 0.0 {
            let s = stde(tape, pred.regression[k], &gt.regression[k], &gt.mask)?;
            terms.push(tape.scale(s, weights.stde));
        }
    }
    if weights.ce > 0.0 {
        let ce = ce_loss(tape, pred.los_logits, &gt.los, &gt.mask)?;
        terms.push(tape.scale(ce, weights.ce));
    }
    let Some(&first) = terms.first() else {
        return Err(Error::config("loss_weights", "no loss term has a positive weight"));
    };
    let mut total = first;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    /// `|mean(e)|`
    pub ame: f64,
    /// `mean(|e|)`
    pub mae: f64,
    /// `sqrt(mean(e²))`
    pub rmse: f64,
    pub stde: f64,
}

/// Error statistics of `pred − gt` over masked pixels, in the maps' units.
pub fn regression_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<RegressionMetrics> {
    let (sum, abs, sq, n) = error_sums(pred, gt, mask)?;
    let n = n as f64;
    let rmse = (sq / n).sqrt();
    Ok(RegressionMetrics { ame: (sum / n).abs(), mae: abs / n, rmse, stde: rmse })
}

pub(crate) fn error_sums(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64, f64, usize)> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape(format!(
            "metrics: {} predictions, {} ground-truth values, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let (mut sum, mut abs, mut sq, mut n) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..pred.len() {
        if mask[i] {
            let e = pred[i] - gt[i];
            sum += e;
            abs += e.abs();
            sq += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum, abs, sq, n))
}

/// Fraction of masked pixels whose predicted class equals the label.
pub fn accuracy(pred: &[u8], gt: &[u8], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape("accuracy: length mismatch".into()));
    }
    let (correct, total) = (0..gt.len())
        .filter(|&i| mask[i])
        .fold((0usize, 0usize), |(c, t), i| (c + (pred[i] == gt[i]) as usize, t + 1));
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(correct as f64 / total as f64)
}

/// Per-pixel class from `[N,2,H,W]` logits; ties go to NLOS (0).
pub fn argmax_classes(logits: &[f64], n: usize, h: usize, w: usize) -> Vec<u8> {
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            out.push((logits[(i * 2 + 1) * hw + p] > logits[i * 2 * hw + p]) as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target: Kind,
    pub ame: f64,
    pub mae: f64,
    pub rmse: Option<f64>,
    pub stde: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Per-target errors in native units. Rows follow [`Kind::TARGETS`]; the LOS
/// row carries accuracy plus the AME/MAE of the 0/1 class map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub scale: usize,
    pub samples: usize,
    pub valid_fraction: f64,
}

impl EvalReport {
    pub fn row(&self, target: Kind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.target == target)
    }

    pub fn mae(&self, target: Kind) -> f64 {
        self.row(target).map_or(f64::NAN, |r| r.mae)
    }

    pub fn los_accuracy(&self) -> f64 {
        self.row(Kind::Los).and_then(|r| r.accuracy).unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("target,AME,MAE,RMSE,STDE,accuracy,scale\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.target.name(),
                r.ame,
                r.mae,
                opt(r.rmse),
                opt(r.stde),
                opt(r.accuracy),
                self.scale
            );
        }
        s
    }
}
