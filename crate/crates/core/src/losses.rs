//! Frame-level objectives: binary cross entropy, focal loss and the
//! duration-weighted focal loss.
//!
//! All losses clamp predictions to `[EPS, 1 - EPS]`; the clamp has zero
//! gradient outside that range. Reduction is the mean over frames, then the
//! mean over the batch.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::features::FrameLabels;
use crate::model::FrameScores;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    /// Weight of the positive term; the negative term gets `1 - beta`.
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { beta: 0.65, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal loss needs 0 < beta < 1 and gamma >= 0, got beta {} gamma {}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Which way the duration multiplier runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationMode {
    /// Largest weight for the shortest events.
    Intent,
    /// `1 + a (e^-w - 1) / (e^-10 - 1)`: largest weight for the longest events.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DurationWeightConfig {
    pub alpha: f64,
    pub w_short: f64,
    pub w_long: f64,
    pub mode: DurationMode,
}

impl Default for DurationWeightConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            w_short: 0.0,
            w_long: 10.0,
            mode: DurationMode::Intent,
        }
    }
}

impl DurationWeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.w_short < self.w_long) {
            return Err(Error::Config(format!(
                "duration weighting needs alpha >= 0 and w_short < w_long, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Multiplier in `[1, 1 + alpha]` for a class of mean event duration `w` seconds.
pub fn duration_weight(w: f64, cfg: &DurationWeightConfig) -> f64 {
    let w = w.clamp(cfg.w_short, cfg.w_long);
    let (lo, hi) = ((-cfg.w_long).exp(), (-cfg.w_short).exp());
    let x = (-w).exp();
    let frac = match cfg.mode {
        DurationMode::Intent => (x - lo) / (hi - lo),
        DurationMode::Literal => (x - hi) / (lo - hi),
    };
    1.0 + cfg.alpha * frac
}

/// Weights of one loss family: `-wp y (1-p)^g ln p - wn (1-y) p^g ln(1-p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameLoss {
    pub pos_weight: f64,
    pub neg_weight: f64,
    pub gamma: f64,
}

impl FrameLoss {
    pub const BCE: FrameLoss = FrameLoss {
        pos_weight: 1.0,
        neg_weight: 1.0,
        gamma: 0.0,
    };

    pub fn focal(cfg: &FocalConfig) -> Self {
        Self {
            pos_weight: cfg.beta,
            neg_weight: 1.0 - cfg.beta,
            gamma: cfg.gamma,
        }
    }

    pub fn value(&self, p: f64, y: f64) -> f64 {
        let p = p.clamp(EPS, 1.0 - EPS);
        let g = self.gamma;
        let pos = if y != 0.0 {
            -self.pos_weight * y * (1.0 - p).powf(g) * p.ln()
        } else {
            0.0
        };
        let neg = if y != 1.0 {
            -self.neg_weight * (1.0 - y) * p.powf(g) * (1.0 - p).ln()
        } else {
            0.0
        };
        pos + neg
    }

    /// `d value / d p` (zero where the clamp is active).
    pub fn derivative(&self, p: f64, y: f64) -> f64 {
        if !(EPS..=1.0 - EPS).contains(&p) {
            return 0.0;
        }
        let g = self.gamma;
        let mut d = 0.0;
        if y != 0.0 {
            let focus = if g == 0.0 { 0.0 } else { g * (1.0 - p).powf(g - 1.0) * p.ln() };
            d -= self.pos_weight * y * ((1.0 - p).powf(g) / p - focus);
        }
        if y != 1.0 {
            let focus = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) * (1.0 - p).ln() };
            d -= self.neg_weight * (1.0 - y) * (focus - p.powf(g) / (1.0 - p));
        }
        d
    }

    /// Mean over frames.
    pub fn mean(&self, y_hat: &[f64], y: &[f64]) -> Result<f64> {
        check_lengths(y_hat, y)?;
        Ok(y_hat.iter().zip(y).map(|(&p, &t)| self.value(p, t)).sum::<f64>() / y.len() as f64)
    }

    /// Gradient of [`FrameLoss::mean`] with respect to `y_hat`.
    pub fn mean_grad(&self, y_hat: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_lengths(y_hat, y)?;
        let n = y.len() as f64;
        Ok(y_hat.iter().zip(y).map(|(&p, &t)| self.derivative(p, t) / n).collect())
    }

    /// Batch loss on the tape: `probs` and `labels` are `[b, t]`; sample `i`
    /// is scaled by `weights[i]`. Labels and weights are constants.
    pub fn on_tape(&self, g: &Graph, probs: Var, labels: &Tensor, weights: &[f64]) -> Result<Var> {
        let shape = g.shape(probs);
        if shape.len() != 2 || labels.shape() != shape.as_slice() || weights.len() != shape[0] {
            return Err(Error::Shape(format!(
                "loss over {shape:?} with labels {:?} and {} sample weights",
                labels.shape(),
                weights.len()
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let p = g.value(probs);
        let scale = 1.0 / (b * t) as f64;
        let mut total = 0.0;
        for i in 0..b {
            let row: f64 = (0..t).map(|j| self.value(p.data()[i * t + j], labels.data()[i * t + j])).sum();
            total += weights[i] * row * scale;
        }
        let this = *self;
        let labels = labels.clone();
        let weights = weights.to_vec();
        Ok(g.custom(&[probs], Tensor::scalar(total), move |ctx| {
            let up = ctx.grad.item();
            let p = &ctx.inputs[0];
            let grad = (0..b * t)
                .map(|k| up * weights[k / t] * scale * this.derivative(p.data()[k], labels.data()[k]))
                .collect();
            vec![Some(Tensor::new(&[b, t], grad).expect("shape"))]
        }))
    }
}

fn check_lengths(y_hat: &[f64], y: &[f64]) -> Result<()> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} scores for {} labels", y_hat.len(), y.len())));
    }
    Ok(())
}

pub fn bce_loss(y_hat: &FrameScores, y: &FrameLabels) -> Result<f64> {
    FrameLoss::BCE.mean(&y_hat.values, &y.values)
}

pub fn focal_loss(y_hat: &FrameScores, y: &FrameLabels, cfg: &FocalConfig) -> Result<f64> {
    FrameLoss::focal(cfg).mean(&y_hat.values, &y.values)
}

/// Focal loss scaled by the duration multiplier of `class`.
pub fn du_focal_loss(
    y_hat: &FrameScores,
    y: &FrameLabels,
    class: &str,
    stats: &DurationStats,
    fcfg: &FocalConfig,
    dcfg: &DurationWeightConfig,
) -> Result<f64> {
    let w = duration_weight(stats.get(class)?, dcfg);
    Ok(w * focal_loss(y_hat, y, fcfg)?)
}

/// Mean event duration per class, in seconds, clipped to `[0, 10]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationStats {
    pub per_class: BTreeMap<String, f64>,
}

impl DurationStats {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in events {
            let slot = acc.entry(e.class.clone()).or_default();
            slot.0 += e.duration();
            slot.1 += 1;
        }
        Self {
            per_class: acc
                .into_iter()
                .map(|(c, (sum, n))| (c, (sum / n as f64).clamp(0.0, 10.0)))
                .collect(),
        }
    }

    pub fn get(&self, class: &str) -> Result<f64> {
        self.per_class
            .get(class)
            .copied()
            .ok_or_else(|| Error::MissingStats(class.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&s)?;
        if let Some((c, w)) = stats.per_class.iter().find(|(_, w)| !(0.0..=10.0).contains(*w)) {
            return Err(Error::InvalidInput(format!("duration {w} for class {c} outside [0, 10]")));
        }
        Ok(stats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Bce,
    Focal,
    DuFocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal: FocalConfig,
    pub duration: DurationWeightConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::DuFocal,
            focal: FocalConfig::default(),
            duration: DurationWeightConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        self.duration.validate()
    }

    pub fn frame_loss(&self) -> FrameLoss {
        match self.kind {
            LossKind::Bce => FrameLoss::BCE,
            LossKind::Focal | LossKind::DuFocal => FrameLoss::focal(&self.focal),
        }
    }

    /// Per-sample multiplier; negatives use the reference class.
    pub fn sample_weight(&self, class: &str, stats: &DurationStats) -> Result<f64> {
        match self.kind {
            LossKind::DuFocal => Ok(duration_weight(stats.get(class)?, &self.duration)),
            _ => Ok(1.0),
        }
    }
}
