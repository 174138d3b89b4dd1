//! Training objectives: attention box regression, large-margin proposal
//! classification, large-margin softmax pixel classification, robust box
//! regression and their weighted combination.
//!
//! All tape-based losses return a one-element [`Var`] that can be passed to
//! [`Tape::backward`].

use std::f64::consts::PI;

use thiserror::Error;

use crate::boxgeom::BoxDelta;
use crate::ndtensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing gradient for layer {0:?}")]
    MissingLayerGradient(LayerId),
    #[error("angle {0} outside [0, pi]")]
    AngleOutOfRange(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Weights of the combined detector objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 0.2,
            mask: 0.2,
            bbox: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if [self.cls, self.mask, self.bbox].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(LossError::Invalid(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

/// Layer of a classification net at which score gradients are collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    Input,
    LastHidden,
    Output,
}

impl LayerId {
    pub fn name(self) -> &'static str {
        match self {
            LayerId::Input => "input",
            LayerId::LastHidden => "last_hidden",
            LayerId::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "input" => Some(LayerId::Input),
            "last_hidden" => Some(LayerId::LastHidden),
            "output" => Some(LayerId::Output),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginConfig {
    /// Decision boundary added inside the hinge.
    pub gamma: f64,
    pub eps: f64,
    /// Layers whose gradient-difference norm falls below this value are
    /// left out of the hinge; a vanishing norm means the layer carries no
    /// separating direction and the ratio would only amplify noise.
    pub min_norm: f64,
    pub layers: Vec<LayerId>,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            eps: 1e-6,
            min_norm: 1e-3,
            layers: vec![LayerId::Input, LayerId::LastHidden],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLossConfig {
    pub m: u32,
    pub lambda: f64,
}

impl Default for MaskLossConfig {
    fn default() -> Self {
        Self { m: 2, lambda: 1e-4 }
    }
}

/// Gradients of the non-true and true class scores with respect to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub layer: LayerId,
    pub grad_other: Vec<f64>,
    pub grad_true: Vec<f64>,
}

impl LayerGradient {
    pub fn diff_norm(&self) -> f64 {
        self.grad_other
            .iter()
            .zip(&self.grad_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One sample for [`margin_cls_loss`]: a two-class score vector on the tape.
#[derive(Debug, Clone)]
pub struct MarginSample {
    pub scores: Var,
    pub true_class: usize,
    pub layer_grads: Vec<LayerGradient>,
}

/// Attention regression objective: squared delta error plus the mean
/// squared intensity difference between the two box contents.
///
/// `u`/`v` are image data and never receive gradients. With `n == 0` the
/// intensity term is dropped.
pub fn attention_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &BoxDelta,
    u: &Tensor,
    v: &Tensor,
    n: usize,
) -> Result<Var, LossError> {
    if tape.shape(pred) != [4] {
        return Err(TensorError::Shape {
            op: "attention_loss",
            detail: format!("prediction must be [4], got {:?}", tape.shape(pred)),
        }
        .into());
    }
    let target = tape.constant(Tensor::vector(gt.to_array().to_vec()));
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let delta_term = tape.sum(sq);
    if n == 0 {
        log::debug!("attention_loss: empty intersection, intensity term omitted");
        return Ok(delta_term);
    }
    if u.shape() != v.shape() {
        return Err(LossError::Invalid(format!(
            "patches differ in shape: {:?} vs {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let patch = patch_term(u, v, n);
    Ok(tape.add_scalar(delta_term, patch))
}

/// `‖U − V‖² / N`.
pub fn patch_term(u: &Tensor, v: &Tensor, n: usize) -> f64 {
    let ss: f64 = u.data().iter().zip(v.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    ss / n as f64
}

/// Large-margin hinge summed over samples and configured layers:
/// `max{0, γ + (f_o − f_t) / (ε + ‖∇_l f_o − ∇_l f_t‖)}`.
///
/// The gradient-difference norms enter as constants.
pub fn margin_cls_loss(tape: &mut Tape, samples: &[MarginSample], cfg: &MarginConfig) -> Result<Var, LossError> {
    let mut terms = Vec::with_capacity(samples.len() * cfg.layers.len());
    for s in samples {
        if tape.shape(s.scores) != [2] || s.true_class > 1 {
            return Err(LossError::Invalid(format!(
                "binary scores required, got shape {:?} and class {}",
                tape.shape(s.scores),
                s.true_class
            )));
        }
        let ft = tape.pick(s.scores, s.true_class)?;
        let fo = tape.pick(s.scores, 1 - s.true_class)?;
        let num = tape.sub(fo, ft)?;
        for layer in &cfg.layers {
            let g = s
                .layer_grads
                .iter()
                .find(|g| g.layer == *layer)
                .ok_or(LossError::MissingLayerGradient(*layer))?;
            let norm = g.diff_norm();
            if norm < cfg.min_norm {
                continue;
            }
            let ratio = tape.scale(num, 1.0 / (cfg.eps + norm));
            let shifted = tape.add_scalar(ratio, cfg.gamma);
            terms.push(tape.relu(shifted));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.concat(&terms)?;
    Ok(tape.sum(all))
}

/// Plain-number form of the hinge for a single sample.
pub fn margin_term(f_other: f64, f_true: f64, grads: &[LayerGradient], cfg: &MarginConfig) -> Result<f64, LossError> {
    let mut total = 0.0;
    for layer in &cfg.layers {
        let g = grads
            .iter()
            .find(|g| g.layer == *layer)
            .ok_or(LossError::MissingLayerGradient(*layer))?;
        let norm = g.diff_norm();
        if norm >= cfg.min_norm {
            total += (cfg.gamma + (f_other - f_true) / (cfg.eps + norm)).max(0.0);
        }
    }
    Ok(total)
}

/// Angular margin function `(−1)^k cos(mθ) − 2k` on `θ ∈ [kπ/m, (k+1)π/m]`.
pub fn phi(theta: f64, m: u32) -> Result<f64, LossError> {
    if m == 0 {
        return Err(LossError::Invalid("margin multiplier must be >= 1".into()));
    }
    if !(0.0..=PI).contains(&theta) {
        return Err(LossError::AngleOutOfRange(theta));
    }
    let k = crate::ndtensor::margin_piece(theta, m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * (m as f64 * theta).cos() - 2.0 * k as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct MaskLoss {
    pub loss: Var,
    /// Pixels dropped because their feature vector has zero norm.
    pub skipped: usize,
}

/// Large-margin softmax over two pixel classes, averaged over pixels, plus
/// `λ‖W‖_F²`.
///
/// `features` is `[P, D]` (one row per pixel), `weights` is `[2, D]`.
pub fn mask_loss(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    labels: &[u8],
    cfg: &MaskLossConfig,
) -> Result<MaskLoss, LossError> {
    let fs = tape.shape(features).to_vec();
    let ws = tape.shape(weights).to_vec();
    if fs.len() != 2 || ws.len() != 2 || ws[0] != 2 || ws[1] != fs[1] {
        return Err(TensorError::Shape {
            op: "mask_loss",
            detail: format!("features {fs:?} with weights {ws:?}"),
        }
        .into());
    }
    if labels.len() != fs[0] || labels.iter().any(|&l| l > 1) {
        return Err(LossError::Invalid(format!(
            "expected {} binary labels, got {}",
            fs[0],
            labels.len()
        )));
    }
    if cfg.m == 0 || !(cfg.lambda >= 0.0) {
        return Err(LossError::Invalid(format!("bad mask loss config {cfg:?}")));
    }
    let (p, d) = (fs[0], fs[1]);
    let wsq = tape.square(weights);
    let wss = tape.sum(wsq);
    let penalty = tape.scale(wss, cfg.lambda);

    let xv = tape.value(features).data();
    let keep: Vec<usize> = (0..p)
        .filter(|&i| xv[i * d..(i + 1) * d].iter().any(|&a| a != 0.0))
        .collect();
    let skipped = p - keep.len();
    if skipped > 0 {
        log::debug!("mask_loss: skipped {skipped} zero-norm pixel features");
    }
    if keep.is_empty() {
        return Ok(MaskLoss { loss: penalty, skipped });
    }
    let wv = tape.value(weights).data();
    for j in 0..2 {
        if wv[j * d..(j + 1) * d].iter().all(|&a| a == 0.0) {
            return Err(LossError::Invalid(format!("class {j} weight vector has zero norm")));
        }
    }
    let pk = keep.len();
    let idx = keep
        .iter()
        .flat_map(|&i| (0..d).map(move |c| Some(i * d + c)))
        .collect();
    let x = tape.gather(features, idx, &[pk, d])?;
    let xsq = tape.square(x);
    let ones = tape.constant(Tensor::full(&[d], 1.0));
    let xn2 = tape.matvec(xsq, ones)?;
    let xn = tape.sqrt(xn2);

    let mut target_logit = Vec::with_capacity(2);
    let mut plain_logit = Vec::with_capacity(2);
    for j in 0..2 {
        let wj = tape.gather(weights, (0..d).map(|c| Some(j * d + c)).collect(), &[d])?;
        let dot = tape.matvec(x, wj)?;
        let wjsq = tape.square(wj);
        let wjss = tape.sum(wjsq);
        let wn = tape.sqrt(wjss);
        let norms = tape.scale_by(xn, wn)?;
        let cos = tape.div(dot, norms)?;
        let ph = tape.margin_phi(cos, cfg.m)?;
        target_logit.push(tape.mul(norms, ph)?);
        plain_logit.push(dot);
    }
    let targets = tape.concat(&target_logit)?;
    let plains = tape.concat(&plain_logit)?;
    let mut ti = Vec::with_capacity(pk);
    let mut oi = Vec::with_capacity(pk);
    for (r, &i) in keep.iter().enumerate() {
        let y = labels[i] as usize;
        ti.push(Some(y * pk + r));
        oi.push(Some((1 - y) * pk + r));
    }
    let zt = tape.gather(targets, ti, &[pk])?;
    let zo = tape.gather(plains, oi, &[pk])?;
    let diff = tape.sub(zo, zt)?;
    let nll = tape.softplus(diff);
    let mean = tape.mean(nll);
    let loss = tape.add(mean, penalty)?;
    Ok(MaskLoss { loss, skipped })
}

pub fn smooth_l1(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.5 * u * u
    } else {
        u.abs() - 0.5
    }
}

/// Robust center regression: `Σ L(t_x − o_x) + Σ L(t_y − o_y)`.
///
/// `pred` holds `(o_x, o_y)` pairs, flattened (`[2N]` or `[N, 2]`).
pub fn box_loss(tape: &mut Tape, pred: Var, targets: &[(f64, f64)]) -> Result<Var, LossError> {
    let n = tape.value(pred).len();
    if n != 2 * targets.len() {
        return Err(LossError::Invalid(format!(
            "{} predicted values for {} targets",
            n,
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let flat: Vec<f64> = targets.iter().flat_map(|&(x, y)| [x, y]).collect();
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(Tensor::new(shape, flat)?);
    let r = tape.sub(t, pred)?;
    let l = tape.smooth_l1(r);
    Ok(tape.sum(l))
}

pub fn combined_loss(tape: &mut Tape, cls: Var, mask: Var, bbox: Var, w: &LossWeights) -> Result<Var, LossError> {
    let a = tape.scale(cls, w.cls);
    let b = tape.scale(mask, w.mask);
    let c = tape.scale(bbox, w.bbox);
    Ok(tape.add_all(&[a, b, c])?)
}

pub fn combined_value(cls: f64, mask: f64, bbox: f64, w: &LossWeights) -> f64 {
    w.cls * cls + w.mask * mask + w.bbox * bbox
}
