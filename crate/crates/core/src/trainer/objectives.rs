//! Per-pair objectives of the three training stages.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{TrainConfig, TrainError, TrainingPair};
use crate::boxgeom::{decode, generate_anchors, iou, Anchor, BBox, BoxDelta};
use crate::cascade::{attention_patch_term, box_grid, head_outputs, layer_gradients, roi_plain, ArchConfig, CascadeModel, Engine, MlpOut};
use crate::losses::{attention_loss, box_loss, combined_loss, mask_loss, margin_cls_loss, MarginSample};
use crate::ndtensor::{Tensor, Var};
use crate::recurrent::{lstm_window, pad_window, StateVars};

/// Loss of one pair: the tape value to differentiate plus its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub mask: f64,
    pub bbox: f64,
    pub att: f64,
}

/// Anchors sampled around one pair and their supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct DetPlan {
    pub region: BBox,
    pub positives: Vec<Anchor>,
    pub negatives: Vec<Anchor>,
    /// Center offsets of the landmark relative to each positive.
    pub targets: Vec<(f64, f64)>,
    /// Disk labels over the candidate box of each positive.
    pub masks: Vec<Vec<u8>>,
}

/// Binary disk of `radius` around `center` sampled on the `size × size`
/// cell grid of `b`.
pub fn disk_mask(b: &BBox, center: (f64, f64), radius: f64, size: usize) -> Vec<u8> {
    box_grid(b, size)
        .into_iter()
        .map(|(x, y)| u8::from((x - center.0).powi(2) + (y - center.1).powi(2) <= radius * radius))
        .collect()
}

/// Ground-truth attention box of a pair.
pub fn attention_target(arch: &ArchConfig, landmark: (f64, f64)) -> BBox {
    BBox {
        cx: landmark.0,
        cy: landmark.1,
        w: arch.att_box,
        h: arch.att_box,
    }
}

pub fn attention_pair_loss(e: &mut Engine<'_>, pair: &TrainingPair) -> Result<LossParts, TrainError> {
    let arch = &e.model.arch;
    let gt = attention_target(arch, pair.landmark);
    let pv = e.patch_var(&pair.patch)?;
    let pred = e.attention_delta(pv)?;
    let d = BoxDelta::from_slice(e.tape.value(pred).data());
    let pred_box = decode(&d, &arch.anchor_box());
    let (u, v, n) = if d.is_finite() && pred_box.w > 0.0 && pred_box.h > 0.0 {
        attention_patch_term(&pair.patch, &pred_box, &gt)
    } else {
        (Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0]), 0)
    };
    let total = attention_loss(&mut e.tape, pred, &pair.gt_delta, &u, &v, n)?;
    let att = e.tape.value(total).item();
    Ok(LossParts {
        total,
        cls: 0.0,
        mask: 0.0,
        bbox: 0.0,
        att,
    })
}

/// Chooses positive and negative anchors for a pair. Without an explicit
/// `region` the search region is the ground-truth attention box shifted by
/// up to `cfg.jitter` pixels, so training sees every anchor-to-landmark
/// offset of the grid. `rpn` scores, when given, select the hard half of
/// the negatives.
pub fn plan_detector(
    arch: &ArchConfig,
    pair: &TrainingPair,
    cfg: &TrainConfig,
    region: Option<BBox>,
    rpn: Option<&dyn Fn(&[Anchor]) -> Vec<f64>>,
    rng: &mut impl Rng,
) -> Result<Option<DetPlan>, TrainError> {
    let (gx, gy) = pair.landmark;
    let region = match region {
        Some(r) => r,
        None => {
            let j = cfg.jitter;
            let (dx, dy) = if j > 0.0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            BBox::square(gx + dx, gy + dy, arch.att_box)?
                .clipped_to(&arch.patch_box())
                .unwrap_or(arch.patch_box())
        }
    };
    let anchors = generate_anchors(&region, &arch.anchor_scales, arch.anchor_stride, &region, 0.0)?;
    let gt = BBox::square(gx, gy, arch.cand_box)?;
    let overlaps: Vec<f64> = anchors.iter().map(|a| iou(&a.bbox, &gt)).collect();
    let mut by_iou: Vec<usize> = (0..anchors.len()).filter(|&i| overlaps[i] > cfg.pos_iou).collect();
    by_iou.sort_by(|&a, &b| overlaps[b].total_cmp(&overlaps[a]).then(a.cmp(&b)));
    by_iou.truncate(cfg.positives);
    if by_iou.is_empty() {
        return Ok(None);
    }
    let positives: Vec<Anchor> = by_iou.iter().map(|&i| anchors[i]).collect();
    let mut pool: Vec<Anchor> = anchors
        .iter()
        .zip(&overlaps)
        .filter(|(_, &o)| o < cfg.neg_iou)
        .map(|(a, _)| *a)
        .collect();
    let want = positives.len().min(pool.len());
    let mut negatives = Vec::with_capacity(want);
    if let Some(score) = rpn {
        let hard = want / 2;
        let s = score(&pool);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut taken: Vec<usize> = order[..hard].to_vec();
        for &i in &taken {
            negatives.push(pool[i]);
        }
        taken.sort_unstable();
        for i in taken.into_iter().rev() {
            pool.remove(i);
        }
    }
    pool.shuffle(rng);
    negatives.extend(pool.into_iter().take(want - negatives.len()));
    let targets = positives
        .iter()
        .map(|a| ((gx - a.bbox.cx) / a.bbox.w, (gy - a.bbox.cy) / a.bbox.h))
        .collect();
    let mut masks = Vec::with_capacity(positives.len());
    for a in &positives {
        let b = BBox::square(a.bbox.cx, a.bbox.cy, arch.cand_box)?;
        masks.push(disk_mask(&b, (gx, gy), cfg.mask_radius, arch.mask_size));
    }
    Ok(Some(DetPlan {
        region,
        positives,
        negatives,
        targets,
        masks,
    }))
}

/// Margin sample whose gradient norms use the stored weights, so they stay
/// fixed while the tape copies are perturbed.
fn margin_sample(e: &Engine<'_>, out: &MlpOut, prefix: &str, scores: Var, rows: (usize, usize), label: usize) -> MarginSample {
    let w1 = e.model.params.get(&format!("{prefix}.w1")).expect("validated model");
    let w2 = e.model.params.get(&format!("{prefix}.w2")).expect("validated model");
    let pre = e.tape.value(out.pre).data();
    let (other, truth) = if label == 1 { (rows.0, rows.1) } else { (rows.1, rows.0) };
    MarginSample {
        scores,
        true_class: label,
        layer_grads: layer_gradients(w1, w2, pre, other, truth),
    }
}

/// Joint proposal, classification, mask and box objective on a merged map.
pub fn detector_loss(e: &mut Engine<'_>, map: Var, plan: &DetPlan, cfg: &TrainConfig) -> Result<LossParts, TrainError> {
    let cand = e.model.arch.cand_box;
    let samples: Vec<(Anchor, usize)> = plan
        .positives
        .iter()
        .map(|a| (*a, 1))
        .chain(plan.negatives.iter().map(|a| (*a, 0)))
        .collect();
    let mut margin = Vec::with_capacity(2 * samples.len());
    let mut feats = Vec::with_capacity(samples.len());
    for &(a, label) in &samples {
        let rpn = e.rpn(map, (a.bbox.cx, a.bbox.cy))?;
        let s = 2 * a.scale_index;
        let scores = e.tape.gather(rpn.logits, vec![Some(s), Some(s + 1)], &[2])?;
        margin.push(margin_sample(e, &rpn, "det.rpn", scores, (s, s + 1), label));
        let feat = e.roi_feature(map, &a.bbox)?;
        let cls = e.cls_head("head", feat)?;
        margin.push(margin_sample(e, &cls, "head.cls", cls.logits, (0, 1), label));
        feats.push(feat);
    }
    let cls_sum = margin_cls_loss(&mut e.tape, &margin, &cfg.margin)?;
    let cls = e.tape.scale(cls_sum, 1.0 / samples.len().max(1) as f64);

    let mut boxes = Vec::with_capacity(plan.positives.len());
    let mut masks = Vec::with_capacity(plan.positives.len());
    for (i, a) in plan.positives.iter().enumerate() {
        boxes.push(e.box_head("head", feats[i])?);
        let b = BBox::square(a.bbox.cx, a.bbox.cy, cand)?;
        let mf = e.mask_features(map, &b)?;
        let w = e.var("det.mask.w");
        masks.push(mask_loss(&mut e.tape, mf, w, &plan.masks[i], &cfg.mask)?.loss);
    }
    let npos = plan.positives.len().max(1) as f64;
    let (bbox, mask) = if boxes.is_empty() {
        let z = e.tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let pred = e.tape.concat(&boxes)?;
        let bsum = box_loss(&mut e.tape, pred, &plan.targets)?;
        let msum = e.tape.add_all(&masks)?;
        (e.tape.scale(bsum, 1.0 / npos), e.tape.scale(msum, 1.0 / npos))
    };
    let total = combined_loss(&mut e.tape, cls, mask, bbox, &cfg.weights)?;
    Ok(LossParts {
        total,
        cls: e.tape.value(cls).item(),
        mask: e.tape.value(mask).item(),
        bbox: e.tape.value(bbox).item(),
        att: 0.0,
    })
}

/// One supervised window for the recurrent heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmSample {
    /// `window` feature vectors, oldest first, zero padded at the front.
    pub window: Vec<Vec<f64>>,
    pub label: usize,
    pub target: (f64, f64),
    /// Detector-head logits and offset on the newest feature; the recurrent
    /// heads are trained as a correction to these.
    pub base_logits: [f64; 2],
    pub base_offset: (f64, f64),
}

/// Windows for the plan's anchors, built from the cached merged maps of the
/// current and preceding frames (`maps`, oldest first).
pub fn lstm_samples(model: &CascadeModel, plan: &DetPlan, maps: &[&Tensor]) -> Vec<LstmSample> {
    let arch = &model.arch;
    let sample = |a: &Anchor, label: usize, target: (f64, f64)| {
        let hist: Vec<Vec<f64>> = maps.iter().map(|m| roi_plain(model, m, &a.bbox)).collect();
        let window = pad_window(&hist, arch.window, arch.feat_dim);
        let (base_logits, base_offset) = head_outputs(&model.params, &window[window.len() - 1]);
        LstmSample {
            window,
            label,
            target,
            base_logits,
            base_offset,
        }
    };
    let mut out: Vec<LstmSample> = plan.positives.iter().zip(&plan.targets).map(|(a, t)| sample(a, 1, *t)).collect();
    out.extend(plan.negatives.iter().map(|a| sample(a, 0, (0.0, 0.0))));
    out
}

/// Classification and box objective through the LSTM-refined heads.
pub fn lstm_loss(e: &mut Engine<'_>, samples: &[LstmSample], cfg: &TrainConfig) -> Result<LossParts, TrainError> {
    let lv = e.lstm()?;
    let hidden = e.model.arch.lstm_hidden;
    let mut margin = Vec::with_capacity(samples.len());
    let mut boxes = Vec::new();
    let mut targets = Vec::new();
    for s in samples {
        let xs: Vec<Var> = s.window.iter().map(|x| e.tape.constant(Tensor::vector(x.clone()))).collect();
        let s0 = StateVars::zeros(&mut e.tape, hidden);
        let h = lstm_window(&mut e.tape, &lv, &xs, s0)?;
        let cls = e.cls_head("lhead", h)?;
        let base = e.tape.constant(Tensor::vector(s.base_logits.to_vec()));
        let logits = e.tape.add(cls.logits, base)?;
        margin.push(margin_sample(e, &cls, "lhead.cls", logits, (0, 1), s.label));
        if s.label == 1 {
            let t = e.box_head("lhead", h)?;
            let base = e.tape.constant(Tensor::vector(vec![s.base_offset.0, s.base_offset.1]));
            boxes.push(e.tape.add(t, base)?);
            targets.push(s.target);
        }
    }
    let cls_sum = margin_cls_loss(&mut e.tape, &margin, &cfg.margin)?;
    let cls = e.tape.scale(cls_sum, 1.0 / samples.len().max(1) as f64);
    let bbox = if boxes.is_empty() {
        e.tape.constant(Tensor::scalar(0.0))
    } else {
        let pred = e.tape.concat(&boxes)?;
        let b = box_loss(&mut e.tape, pred, &targets)?;
        e.tape.scale(b, 1.0 / boxes.len() as f64)
    };
    let zero = e.tape.constant(Tensor::scalar(0.0));
    let total = combined_loss(&mut e.tape, cls, zero, bbox, &cfg.weights)?;
    Ok(LossParts {
        total,
        cls: e.tape.value(cls).item(),
        mask: 0.0,
        bbox: e.tape.value(bbox).item(),
        att: 0.0,
    })
}
