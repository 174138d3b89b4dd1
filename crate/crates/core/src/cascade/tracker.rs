use std::collections::VecDeque;

use super::nets::{box_grid, sample_points, Engine, GRID_STRIDE};
use super::{ArchConfig, CascadeModel, ModelError};
use crate::boxgeom::{decode, generate_anchors, Anchor, BBox, BoxDelta};
use crate::dataio::{crop_at, patch_origin, GrayFrame};
use crate::ndtensor::{sigmoid, ParamSet, Tensor};
use crate::recurrent::{pad_window, LstmParams, LstmState};
use crate::temporal_select::{select_index, SelectionConfig};

/// Bound on the magnitude of predicted attention deltas; keeps a badly
/// trained regressor from producing overflowing boxes.
const DELTA_CLAMP: [f64; 4] = [1.0, 1.0, 1.5, 1.5];

/// One detector proposal after the heads have run.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub anchor: Anchor,
    /// Refined `cand_box`-sized box; its center is the landmark estimate.
    pub bbox: BBox,
    pub score: f64,
    pub rpn_score: f64,
    /// Row-major `mask_size × mask_size` foreground probabilities.
    pub mask: Vec<f64>,
    /// Region feature of the anchor, the LSTM input for this frame.
    pub feature: Vec<f64>,
}

/// Output of the recurrent heads for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub score: f64,
    /// Center offset in units of the anchor side.
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOptions {
    /// When false the detector searches the whole patch.
    pub use_attention: bool,
    pub use_lstm: bool,
    pub selection: SelectionConfig,
    /// Overrides the architecture's candidate cap.
    pub top_k: Option<usize>,
    /// Overrides the architecture's anchor overlap filter.
    pub min_iou: Option<f64>,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            use_attention: true,
            use_lstm: true,
            selection: SelectionConfig::default(),
            top_k: None,
            min_iou: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    /// Chosen landmark position in frame coordinates.
    pub position: (f64, f64),
    pub score: f64,
    /// No candidate survived; `position` repeats the previous one.
    pub lost: bool,
    /// Search region in patch coordinates.
    pub region: BBox,
    pub candidates: Vec<Candidate>,
}

/// Attention box from raw deltas: clamped, decoded against the anchor
/// box and clipped to the patch.
pub(crate) fn decode_attention(arch: &ArchConfig, raw: &[f64]) -> BBox {
    let mut d = [0.0; 4];
    for i in 0..4 {
        let v = if raw[i].is_finite() { raw[i] } else { 0.0 };
        d[i] = v.clamp(-DELTA_CLAMP[i], DELTA_CLAMP[i]);
    }
    let anchor = arch.anchor_box();
    decode(&BoxDelta::from_slice(&d), &anchor)
        .clipped_to(&arch.patch_box())
        .unwrap_or(anchor)
}

/// Candidate center from an anchor and a predicted offset, kept inside the patch.
pub(crate) fn candidate_center(arch: &ArchConfig, anchor: &BBox, t: (f64, f64)) -> (f64, f64) {
    let hi = arch.patch as f64 - 1.0;
    let fix = |v: f64, fallback: f64| if v.is_finite() { v.clamp(0.0, hi) } else { fallback.clamp(0.0, hi) };
    (
        fix(anchor.cx + t.0 * anchor.w, anchor.cx),
        fix(anchor.cy + t.1 * anchor.h, anchor.cy),
    )
}

fn two_class(logits: &[f64], offset: usize) -> f64 {
    sigmoid(logits[offset + 1] - logits[offset])
}

fn plain_affine(set: &ParamSet, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
    let w = set.get(w).expect("validated model");
    let b = set.get(b).expect("validated model");
    let n = x.len();
    w.data()
        .chunks(n)
        .zip(b.data())
        .map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi)
        .collect()
}

/// Two-layer perceptron evaluated without a tape.
pub(crate) fn plain_mlp(set: &ParamSet, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = plain_affine(set, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    plain_affine(set, &format!("{prefix}.w2"), &format!("{prefix}.b2"), &h)
}

impl Engine<'_> {
    /// Attention box for `patch`.
    pub fn attend(&mut self, patch: &Tensor) -> Result<BBox, ModelError> {
        let p = self.patch_var(patch)?;
        let d = self.attention_delta(p)?;
        Ok(decode_attention(&self.model.arch, self.tape.value(d).data()))
    }

    /// Merged detector feature map for `patch`.
    pub fn feature_map(&mut self, patch: &Tensor) -> Result<Tensor, ModelError> {
        let p = self.patch_var(patch)?;
        let m = self.merged_map(p)?;
        Ok(self.tape.value(m).clone())
    }

    /// Proposal scores of every anchor, evaluated per distinct anchor center.
    pub fn rpn_scores(&self, map: &Tensor, anchors: &[Anchor]) -> Vec<f64> {
        let set = &self.model.params;
        let mut centers: Vec<(f64, f64)> = Vec::new();
        let mut slot = Vec::with_capacity(anchors.len());
        for a in anchors {
            let c = (a.bbox.cx, a.bbox.cy);
            if centers.last() != Some(&c) {
                centers.push(c);
            }
            slot.push(centers.len() - 1);
        }
        let s = sample_points(map.shape(), &centers, GRID_STRIDE);
        let flat = s.apply(map.data());
        let ch = map.shape()[0];
        let n = centers.len();
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..ch).map(|c| flat[c * n + i]).collect();
                plain_mlp(set, "det.rpn", &x)
            })
            .collect();
        anchors
            .iter()
            .zip(slot)
            .map(|(a, i)| two_class(&logits[i], 2 * a.scale_index))
            .collect()
    }

    /// Region feature values at `b` on a stored map, computed without the tape.
    pub fn roi_values(&self, map: &Tensor, b: &BBox) -> Vec<f64> {
        roi_plain(self.model, map, b)
    }

    /// Proposals inside `region` from a precomputed map, capped at `top_k`
    /// and sorted by score (ties by anchor index).
    pub fn detect_on_map(&mut self, map: &Tensor, region: &BBox, top_k: usize, min_iou: f64) -> Result<Vec<Candidate>, ModelError> {
        let arch = self.model.arch.clone();
        let anchors = generate_anchors(region, &arch.anchor_scales, arch.anchor_stride, region, min_iou)?;
        if anchors.is_empty() {
            return Ok(Vec::new());
        }
        let rpn = self.rpn_scores(map, &anchors);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| rpn[b].total_cmp(&rpn[a]).then(anchors[a].index.cmp(&anchors[b].index)));
        order.truncate(top_k);
        let mv = self.tape.constant(map.clone());
        let mut out = Vec::with_capacity(order.len());
        for i in order {
            let anchor = anchors[i];
            let feat = self.roi_feature(mv, &anchor.bbox)?;
            let cls = self.cls_head("head", feat)?;
            let t = self.box_head("head", feat)?;
            let score = two_class(self.tape.value(cls.logits).data(), 0);
            let td = self.tape.value(t).data();
            let center = candidate_center(&arch, &anchor.bbox, (td[0], td[1]));
            let bbox = BBox::square(center.0, center.1, arch.cand_box)?;
            let mf = self.mask_features(mv, &bbox)?;
            out.push(Candidate {
                anchor,
                bbox,
                score,
                rpn_score: rpn[i],
                mask: self.mask_probs(mf),
                feature: self.tape.value(feat).data().to_vec(),
            });
        }
        sort_candidates(&mut out);
        Ok(out)
    }
}

/// Tape-free equivalent of [`Engine::roi_feature`].
pub fn roi_plain(model: &CascadeModel, map: &Tensor, b: &BBox) -> Vec<f64> {
    let s = sample_points(map.shape(), &box_grid(b, model.arch.roi_size), GRID_STRIDE);
    let x = s.apply(map.data());
    plain_affine(&model.params, "det.roi.w", "det.roi.b", &x)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect()
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor.index.cmp(&b.anchor.index)));
}

/// Attention box for a normalized patch.
pub fn attention_forward(model: &CascadeModel, patch: &Tensor) -> Result<BBox, ModelError> {
    Engine::frozen(model).attend(patch)
}

/// Scored proposals inside `attn`, using the architecture's overlap filter
/// and candidate cap.
pub fn detector_forward(model: &CascadeModel, patch: &Tensor, attn: &BBox) -> Result<Vec<Candidate>, ModelError> {
    let mut e = Engine::frozen(model);
    let map = e.feature_map(patch)?;
    e.detect_on_map(&map, attn, model.arch.top_k, model.arch.anchor_min_iou)
}

/// Recurrent classification and box heads over per-candidate feature
/// windows (oldest first). The LSTM heads read the final hidden state and
/// add a correction to the detector heads' output on the newest feature.
/// A window whose features have the wrong length yields `None`.
pub fn lstm_refine(model: &CascadeModel, windows: &[Vec<Vec<f64>>]) -> Result<Vec<Option<Refined>>, ModelError> {
    let lstm = LstmParams::from_set(&model.params, "lstm.")?;
    Ok(refine_with(model, &lstm, windows))
}

/// Detector-head logits and center offset for one ROI feature. The
/// recurrent heads add their outputs to these.
pub(crate) fn head_outputs(params: &ParamSet, feature: &[f64]) -> ([f64; 2], (f64, f64)) {
    let l = plain_mlp(params, "head.cls", feature);
    let t = plain_affine(params, "head.box.w", "head.box.b", feature);
    ([l[0], l[1]], (t[0], t[1]))
}

fn refine_with(model: &CascadeModel, lstm: &LstmParams, windows: &[Vec<Vec<f64>>]) -> Vec<Option<Refined>> {
    let s0 = LstmState::zeros(lstm.hidden);
    windows
        .iter()
        .map(|w| {
            let h = lstm.window(w, &s0).ok()?.h;
            let (base_logits, base_t) = head_outputs(&model.params, w.last()?);
            let logits = plain_mlp(&model.params, "lhead.cls", &h);
            let t = plain_affine(&model.params, "lhead.box.w", "lhead.box.b", &h);
            let logits = [base_logits[0] + logits[0], base_logits[1] + logits[1]];
            Some(Refined {
                score: two_class(&logits, 0),
                offset: (base_t.0 + t[0], base_t.1 + t[1]),
            })
        })
        .collect()
}

/// Sequential single-landmark tracker. The search patch stays centered on
/// the initial position for the whole sequence.
pub struct LandmarkTracker<'m> {
    engine: Engine<'m>,
    opts: TrackOptions,
    lstm: LstmParams,
    origin: (i64, i64),
    prev: (f64, f64),
    maps: VecDeque<Tensor>,
    max_value: f64,
}

impl<'m> LandmarkTracker<'m> {
    /// Starts a track from the annotated position on the first frame.
    pub fn new(model: &'m CascadeModel, opts: TrackOptions, first: &GrayFrame, start: (f64, f64), max_value: f64) -> Result<Self, ModelError> {
        model.validate()?;
        opts.selection
            .validate()
            .map_err(|e| ModelError::Arch(e.to_string()))?;
        let lstm = LstmParams::from_set(&model.params, "lstm.")?;
        let origin = patch_origin(start, model.arch.patch);
        let mut t = Self {
            engine: Engine::frozen(model),
            opts,
            lstm,
            origin,
            prev: (start.0 - origin.0 as f64, start.1 - origin.1 as f64),
            maps: VecDeque::new(),
            max_value,
        };
        let patch = t.crop(first);
        let map = t.engine.feature_map(&patch)?;
        t.engine.reset();
        t.push_map(map);
        Ok(t)
    }

    pub fn origin(&self) -> (i64, i64) {
        self.origin
    }

    /// Last chosen position in frame coordinates.
    pub fn position(&self) -> (f64, f64) {
        self.to_frame(self.prev)
    }

    fn to_frame(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 + self.origin.0 as f64, p.1 + self.origin.1 as f64)
    }

    pub fn crop(&self, frame: &GrayFrame) -> Tensor {
        crop_at(frame, self.origin, self.engine.model.arch.patch, self.max_value)
    }

    fn push_map(&mut self, map: Tensor) {
        self.maps.push_back(map);
        let keep = self.engine.model.arch.window.saturating_sub(1);
        while self.maps.len() > keep {
            self.maps.pop_front();
        }
    }

    pub fn track(&mut self, frame: &GrayFrame) -> Result<FrameResult, ModelError> {
        let patch = self.crop(frame);
        self.track_patch(&patch)
    }

    /// Processes the next frame given its already cropped patch.
    pub fn track_patch(&mut self, patch: &Tensor) -> Result<FrameResult, ModelError> {
        let arch = self.engine.model.arch.clone();
        self.engine.reset();
        let region = if self.opts.use_attention {
            self.engine.attend(patch)?
        } else {
            arch.patch_box()
        };
        let map = self.engine.feature_map(patch)?;
        let top_k = self.opts.top_k.unwrap_or(arch.top_k);
        let min_iou = self.opts.min_iou.unwrap_or(arch.anchor_min_iou);
        let mut cands = self.engine.detect_on_map(&map, &region, top_k, min_iou)?;
        if self.opts.use_lstm && !cands.is_empty() {
            let mut windows = Vec::with_capacity(cands.len());
            let past: Vec<Tensor> = self.maps.iter().cloned().collect();
            for c in &cands {
                let mut hist = Vec::with_capacity(past.len() + 1);
                for m in &past {
                    hist.push(self.engine.roi_values(m, &c.anchor.bbox));
                }
                hist.push(c.feature.clone());
                windows.push(pad_window(&hist, arch.window, arch.feat_dim));
            }
            let refined = refine_with(self.engine.model, &self.lstm, &windows);
            let mut kept = Vec::with_capacity(cands.len());
            for (mut c, r) in cands.into_iter().zip(refined) {
                match r {
                    Some(r) => {
                        let center = candidate_center(&arch, &c.anchor.bbox, r.offset);
                        c.bbox = BBox::square(center.0, center.1, arch.cand_box)?;
                        c.score = r.score;
                        kept.push(c);
                    }
                    None => log::warn!("dropping candidate at anchor {}: window assembly failed", c.anchor.index),
                }
            }
            cands = kept;
            sort_candidates(&mut cands);
        }
        self.engine.reset();
        self.push_map(map);
        let pairs: Vec<((f64, f64), f64)> = cands.iter().map(|c| ((c.bbox.cx, c.bbox.cy), c.score)).collect();
        let (lost, score) = match select_index(&pairs, self.prev, &self.opts.selection) {
            Ok(i) => {
                self.prev = pairs[i].0;
                (false, pairs[i].1)
            }
            Err(_) => {
                log::warn!("track lost; keeping previous position");
                (true, 0.0)
            }
        };
        Ok(FrameResult {
            position: self.to_frame(self.prev),
            score,
            lost,
            region,
            candidates: cands,
        })
    }
}
