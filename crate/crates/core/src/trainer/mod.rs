//! Staged training of the cascade: attention regressor, detector heads and
//! recurrent heads, each with the same epoch-level stop rule, plus
//! cross-validation splitting and loss-history export.

pub mod objectives;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::boxgeom::{encode, BBox, BoxDelta};
use crate::cascade::{ArchConfig, CascadeModel, Engine, ModelError};
use crate::dataio::{crop_at, patch_origin, SequenceBundle};
use crate::losses::{LossError, LossWeights, MarginConfig, MaskLossConfig};
use crate::ndtensor::{grad_check_entries, GradCheck, Tape, Tensor, TensorError, Var};
use objectives::{attention_pair_loss, attention_target, detector_loss, disk_mask, lstm_loss, lstm_samples, plan_detector, LossParts, LstmSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("no usable training pairs")]
    NoPairs,
    #[error("{stage} stage diverged at epoch {epoch}")]
    Divergence { stage: Stage, epoch: usize },
    #[error("cannot split {n} sequences into {folds} folds")]
    TooFewIds { n: usize, folds: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Box(#[from] crate::boxgeom::BoxError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Attention,
    Detector,
    Lstm,
    /// Attention and detector together, with detector regions taken from
    /// the predicted attention box.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Attention => "attention",
            Stage::Detector => "detector",
            Stage::Lstm => "lstm",
            Stage::Joint => "joint",
        }
    }

    /// Whether parameter `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Attention => name.starts_with("att."),
            Stage::Detector => name.starts_with("det.") || name.starts_with("head."),
            Stage::Lstm => name.starts_with("lstm.") || name.starts_with("lhead."),
            Stage::Joint => Stage::Attention.trains(name) || Stage::Detector.trains(name),
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            Stage::Attention => 0x9E37_79B9,
            Stage::Detector => 0x85EB_CA6B,
            Stage::Lstm => 0xC2B2_AE35,
            Stage::Joint => 0x27D4_EB2F,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epoch cap, applied to each stage separately.
    pub max_epochs: usize,
    /// Stop-rule checks begin at this epoch.
    pub min_epochs: usize,
    pub delta_stop: f64,
    pub seed: u64,
    /// Pairs per optimizer step; 0 means one step per sequence.
    pub batch_size: usize,
    /// Epochs of joint attention/detector fine-tuning after the staged passes.
    pub joint_epochs: usize,
    pub weights: LossWeights,
    pub margin: MarginConfig,
    pub mask: MaskLossConfig,
    pub include_reference: bool,
    /// Positive anchors per pair (highest overlap first).
    pub positives: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub mask_radius: f64,
    /// Half-width of the uniform shift applied to teacher regions.
    pub jitter: f64,
    /// Gradient entries checked against finite differences per stage.
    pub audit_entries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl TrainConfig {
    /// Full-scale schedule: learning rate 1e-6, plain SGD with one step per
    /// sequence, up to 1000 epochs, stop once an epoch gains less than 1e-3.
    pub fn full_scale() -> Self {
        Self {
            preset: "full".into(),
            learning_rate: 1e-6,
            momentum: 0.0,
            max_epochs: 1000,
            min_epochs: 1,
            delta_stop: 1e-3,
            batch_size: 0,
            ..Self::synthetic()
        }
    }

    /// Desk-scale settings for the synthetic benchmark.
    pub fn synthetic() -> Self {
        Self {
            preset: "synthetic".into(),
            learning_rate: 3e-2,
            momentum: 0.9,
            max_epochs: 5,
            min_epochs: 3,
            delta_stop: 1e-4,
            seed: 0,
            batch_size: 8,
            joint_epochs: 0,
            weights: LossWeights::default(),
            margin: MarginConfig::default(),
            mask: MaskLossConfig::default(),
            include_reference: true,
            positives: 4,
            pos_iou: 0.5,
            neg_iou: 0.2,
            mask_radius: 6.0,
            jitter: 2.0,
            audit_entries: 24,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full_scale()),
            "synthetic" => Some(Self::synthetic()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.delta_stop > 0.0) {
            return bad("delta_stop must be positive");
        }
        if self.positives == 0 {
            return bad("positives must be positive");
        }
        if !(0.0..=1.0).contains(&self.pos_iou) || !(0.0..=1.0).contains(&self.neg_iou) || self.neg_iou > self.pos_iou {
            return bad("overlap thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1");
        }
        if !(self.mask_radius >= 0.0) || !(self.jitter >= 0.0) {
            return bad("mask_radius and jitter must be nonnegative");
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// One supervised frame for one landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Normalized patch centered on the landmark's first-frame position.
    pub patch: Tensor,
    pub origin: (i64, i64),
    /// Attention target relative to the anchor box.
    pub gt_delta: BoxDelta,
    /// Landmark position in patch coordinates.
    pub landmark: (f64, f64),
    /// Disk labels over the candidate box centered on the landmark.
    pub mask: Vec<u8>,
    pub frame: usize,
    pub sequence: usize,
    pub landmark_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<TrainingPair>,
    /// Annotations whose position fell outside the patch.
    pub dropped: usize,
}

impl PairSet {
    pub fn extend(&mut self, other: PairSet) {
        self.pairs.extend(other.pairs);
        self.dropped += other.dropped;
    }
}

/// Pairs for every annotated (landmark, frame) of `seq`; `sequence` tags them
/// for per-sequence batching and temporal windows.
pub fn extract_training_pairs(
    seq: &SequenceBundle,
    sequence: usize,
    arch: &ArchConfig,
    include_reference: bool,
    mask_radius: f64,
) -> Result<PairSet, TrainError> {
    let mut out = PairSet::default();
    let p = arch.patch;
    let max = seq.max_value();
    for lm in &seq.landmarks {
        let Some(first) = lm.points.first() else {
            continue;
        };
        let origin = patch_origin((first.x, first.y), p);
        for a in &lm.points {
            if a.frame == first.frame && !include_reference {
                continue;
            }
            let local = (a.x - origin.0 as f64, a.y - origin.1 as f64);
            let hi = (p - 1) as f64;
            if !(0.0..=hi).contains(&local.0) || !(0.0..=hi).contains(&local.1) {
                log::warn!("{}: landmark {} frame {} lies outside the patch; pair dropped", seq.name, lm.id, a.frame);
                out.dropped += 1;
                continue;
            }
            let frame = seq.frames.get(a.frame).ok_or_else(|| TrainError::Config(format!("{}: frame {} missing", seq.name, a.frame)))?;
            let gt = attention_target(arch, local);
            let cand = BBox::square(local.0, local.1, arch.cand_box)?;
            out.pairs.push(TrainingPair {
                patch: crop_at(frame, origin, p, max),
                origin,
                gt_delta: encode(&gt, &arch.anchor_box())?,
                landmark: local,
                mask: disk_mask(&cand, local, mask_radius, arch.mask_size),
                frame: a.frame,
                sequence,
                landmark_id: lm.id.clone(),
            });
        }
    }
    Ok(out)
}

/// Mean per-pair loss of one epoch (epoch 0 is the pass before any update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub mask: f64,
    pub bbox: f64,
    pub att: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub history: Vec<EpochLoss>,
    /// True when the stop rule fired before `max_epochs`.
    pub stopped_early: bool,
    /// Pairs without a usable positive anchor in the last pass.
    pub skipped: usize,
    pub audit: Option<GradCheck>,
}

impl TrainReport {
    /// Number of training epochs run (the baseline pass excluded).
    pub fn epochs(&self) -> usize {
        self.history.len().saturating_sub(1)
    }
}

/// Stop rule: after epoch `e ≥ min_epochs`, stop when the loss decrease from
/// the previous epoch is below `delta_stop`; always stop at `max_epochs`.
pub fn should_stop(history: &[f64], cfg: &TrainConfig) -> bool {
    let e = history.len().saturating_sub(1);
    if e >= cfg.max_epochs {
        return true;
    }
    e >= cfg.min_epochs.max(1) && history[e - 1] - history[e] < cfg.delta_stop
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// `v ← μv − η·g`, `θ ← θ + v` for every named gradient.
    pub fn step(&mut self, params: &mut crate::ndtensor::ParamSet, grads: &[(String, Vec<f64>)]) {
        for (name, g) in grads {
            let Some(t) = params.get_mut(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi - self.learning_rate * gi;
                *p += *vi;
            }
        }
    }
}

type ItemLoss<'a> = dyn Fn(&mut Engine<'_>, usize, &mut ChaCha8Rng) -> Result<Option<LossParts>, TrainError> + 'a;

fn batches(items: &[usize], groups: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if cfg.batch_size == 0 {
        let mut by_group: Vec<(usize, Vec<usize>)> = Vec::new();
        for &i in items {
            match by_group.iter_mut().find(|(g, _)| *g == groups[i]) {
                Some((_, v)) => v.push(i),
                None => by_group.push((groups[i], vec![i])),
            }
        }
        by_group.shuffle(rng);
        by_group.into_iter().map(|(_, v)| v).collect()
    } else {
        let mut order = items.to_vec();
        order.shuffle(rng);
        order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Default)]
struct Sums {
    parts: [f64; 5],
    count: usize,
    skipped: usize,
}

impl Sums {
    fn add(&mut self, tape: &Tape, p: &LossParts) {
        let v = [tape.value(p.total).item(), p.cls, p.mask, p.bbox, p.att];
        for (s, x) in self.parts.iter_mut().zip(v) {
            *s += x;
        }
        self.count += 1;
    }

    fn epoch(&self, epoch: usize) -> EpochLoss {
        let n = self.count.max(1) as f64;
        let m = self.parts.map(|x| x / n);
        EpochLoss {
            epoch,
            total: m[0],
            cls: m[1],
            mask: m[2],
            bbox: m[3],
            att: m[4],
        }
    }
}

/// Central-difference check of the stage gradient on a random subsample of
/// trainable entries, for the first usable item.
fn audit(model: &CascadeModel, stage: Stage, n_items: usize, loss: &ItemLoss<'_>, entries: usize, rng: &mut ChaCha8Rng) -> Result<Option<GradCheck>, TrainError> {
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let pool: Vec<(usize, usize)> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| stage.trains(n))
        .flat_map(|(i, (_, t))| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = pool.choose_multiple(rng, entries.min(pool.len())).copied().collect();
    let snapshot = rng.clone();
    let mut probe = Engine::frozen(model);
    let mut usable = None;
    for i in 0..n_items {
        probe.reset();
        if loss(&mut probe, i, &mut snapshot.clone())?.is_some() {
            usable = Some(i);
            break;
        }
    }
    let Some(item) = usable else {
        return Ok(None);
    };
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let mut e = Engine::on_tape(model, std::mem::take(tape), vars.to_vec());
        let out = loss(&mut e, item, &mut snapshot.clone());
        *tape = e.into_tape();
        match out {
            Ok(Some(p)) => Ok(p.total),
            Ok(None) => Err(TensorError::Format("item became unusable".into())),
            Err(TrainError::Tensor(t)) => Err(t),
            Err(other) => Err(TensorError::Format(other.to_string())),
        }
    };
    let r = grad_check_entries(f, &params, 1e-6, &chosen)?;
    if r.max_deviation > 1e-4 {
        log::warn!("{stage} gradient audit deviation {:.3e} at {:?}", r.max_deviation, r.worst);
    } else {
        log::info!("{stage} gradient audit: {} entries, max deviation {:.3e}", r.entries_checked, r.max_deviation);
    }
    Ok(Some(r))
}

fn run_stage(model: &mut CascadeModel, stage: Stage, groups: &[usize], cfg: &TrainConfig, loss: &ItemLoss<'_>) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stage.seed_salt());
    let items: Vec<usize> = (0..groups.len()).collect();
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| stage.trains(n))
        .collect();
    let audit_result = if cfg.audit_entries > 0 {
        audit(model, stage, groups.len(), loss, cfg.audit_entries, &mut rng)?
    } else {
        None
    };

    let mut base = Sums::default();
    {
        let mut e = Engine::new(model, |n| stage.trains(n), false);
        for &i in &items {
            e.reset();
            match loss(&mut e, i, &mut rng)? {
                Some(p) => base.add(&e.tape, &p),
                None => base.skipped += 1,
            }
        }
    }
    if base.count == 0 {
        return Err(TrainError::NoPairs);
    }
    let first = base.epoch(0);
    if !first.total.is_finite() {
        return Err(TrainError::Divergence { stage, epoch: 0 });
    }
    let mut history = vec![first];
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    loop {
        let epoch = history.len();
        let mut sums = Sums::default();
        for batch in batches(&items, groups, cfg, &mut rng) {
            let mut acc: Vec<(String, Vec<f64>)> = Vec::new();
            let mut used = 0usize;
            {
                let mut e = Engine::new(model, |n| stage.trains(n), false);
                for i in batch {
                    e.reset();
                    let Some(p) = loss(&mut e, i, &mut rng)? else {
                        sums.skipped += 1;
                        continue;
                    };
                    if !e.tape.value(p.total).item().is_finite() {
                        return Err(TrainError::Divergence { stage, epoch });
                    }
                    sums.add(&e.tape, &p);
                    e.tape.backward(p.total)?;
                    if acc.is_empty() {
                        acc = names.iter().map(|n| (n.clone(), e.param_grad(n))).collect();
                    } else {
                        for (n, g) in acc.iter_mut() {
                            for (a, b) in g.iter_mut().zip(e.param_grad(n)) {
                                *a += b;
                            }
                        }
                    }
                    used += 1;
                }
            }
            if used == 0 {
                continue;
            }
            for (_, g) in acc.iter_mut() {
                g.iter_mut().for_each(|x| *x /= used as f64);
            }
            opt.step(&mut model.params, &acc);
            if model.params.iter().any(|(n, t)| stage.trains(n) && !t.all_finite()) {
                return Err(TrainError::Divergence { stage, epoch });
            }
        }
        if sums.count == 0 {
            return Err(TrainError::NoPairs);
        }
        let el = sums.epoch(epoch);
        if !el.total.is_finite() {
            return Err(TrainError::Divergence { stage, epoch });
        }
        let skipped = sums.skipped;
        log::info!("{stage} epoch {epoch}: loss {:.6}", el.total);
        history.push(el);
        let totals: Vec<f64> = history.iter().map(|h| h.total).collect();
        if should_stop(&totals, cfg) {
            let stopped_early = epoch < cfg.max_epochs;
            return Ok(TrainReport {
                stage,
                history,
                stopped_early,
                skipped,
                audit: audit_result,
            });
        }
    }
}

fn groups_of(pairs: &[TrainingPair]) -> Vec<usize> {
    pairs.iter().map(|p| p.sequence).collect()
}

/// Fits the attention regressor (`att.*`).
pub fn train_attention(model: &mut CascadeModel, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let loss = |e: &mut Engine<'_>, i: usize, _: &mut ChaCha8Rng| attention_pair_loss(e, &pairs[i]).map(Some);
    run_stage(model, Stage::Attention, &groups_of(pairs), cfg, &loss)
}

fn detector_item(e: &mut Engine<'_>, pair: &TrainingPair, cfg: &TrainConfig, rng: &mut ChaCha8Rng, region: Option<BBox>) -> Result<Option<LossParts>, TrainError> {
    let pv = e.patch_var(&pair.patch)?;
    let map = e.merged_map(pv)?;
    let map_value = e.tape.value(map).clone();
    let score = |anchors: &[crate::boxgeom::Anchor]| e.rpn_scores(&map_value, anchors);
    let Some(plan) = plan_detector(&e.model.arch, pair, cfg, region, Some(&score), rng)? else {
        return Ok(None);
    };
    let mut parts = detector_loss(e, map, &plan, cfg)?;
    if region.is_some() {
        let a = attention_pair_loss(e, pair)?;
        parts.total = e.tape.add(parts.total, a.total)?;
        parts.att = a.att;
    }
    Ok(Some(parts))
}

/// Fits the proposal stage and the frame-level heads (`det.*`, `head.*`)
/// on teacher regions around the ground truth.
pub fn train_detector(model: &mut CascadeModel, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let loss = |e: &mut Engine<'_>, i: usize, rng: &mut ChaCha8Rng| detector_item(e, &pairs[i], cfg, rng, None);
    run_stage(model, Stage::Detector, &groups_of(pairs), cfg, &loss)
}

/// Merged maps of every pair under the current detector.
pub fn feature_maps(model: &CascadeModel, pairs: &[TrainingPair]) -> Result<Vec<Tensor>, TrainError> {
    let mut e = Engine::frozen(model);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        e.reset();
        out.push(e.feature_map(&p.patch)?);
    }
    Ok(out)
}

/// Fits the recurrent heads (`lstm.*`, `lhead.*`) on windows of region
/// features from the frozen detector.
pub fn train_lstm(model: &mut CascadeModel, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let maps = feature_maps(model, pairs)?;
    let index: HashMap<(usize, &str, usize), usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| ((p.sequence, p.landmark_id.as_str(), p.frame), i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1656_67B1);
    let w = model.arch.window;
    let mut samples: Vec<Option<Vec<LstmSample>>> = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let score = |a: &[crate::boxgeom::Anchor]| Engine::frozen(model).rpn_scores(&maps[i], a);
        let plan = plan_detector(&model.arch, p, cfg, None, Some(&score), &mut rng)?;
        samples.push(plan.map(|plan| {
            let hist: Vec<&Tensor> = (0..w)
                .rev()
                .filter_map(|k| p.frame.checked_sub(k))
                .filter_map(|f| index.get(&(p.sequence, p.landmark_id.as_str(), f)))
                .map(|&j| &maps[j])
                .collect();
            lstm_samples(model, &plan, &hist)
        }));
    }
    let loss = |e: &mut Engine<'_>, i: usize, _: &mut ChaCha8Rng| match &samples[i] {
        Some(s) => lstm_loss(e, s, cfg).map(Some),
        None => Ok(None),
    };
    run_stage(model, Stage::Lstm, &groups_of(pairs), cfg, &loss)
}

/// Joint fine-tuning of attention and detector parameters. Detector anchors
/// are laid out in the attention boxes predicted at the start of the pass,
/// which act as fixed teacher regions.
pub fn train_joint(model: &mut CascadeModel, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let mut e = Engine::frozen(model);
    let mut regions = Vec::with_capacity(pairs.len());
    for p in pairs {
        e.reset();
        regions.push(e.attend(&p.patch)?);
    }
    drop(e);
    let loss = |e: &mut Engine<'_>, i: usize, rng: &mut ChaCha8Rng| detector_item(e, &pairs[i], cfg, rng, Some(regions[i]));
    let mut c = cfg.clone();
    c.max_epochs = cfg.joint_epochs.max(1);
    c.min_epochs = c.min_epochs.min(c.max_epochs);
    run_stage(model, Stage::Joint, &groups_of(pairs), &c, &loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullReport {
    pub stages: Vec<TrainReport>,
}

impl FullReport {
    /// Histories of all stages with epochs renumbered consecutively.
    pub fn combined_history(&self) -> Vec<EpochLoss> {
        let mut out = Vec::new();
        for s in &self.stages {
            for h in &s.history {
                let mut h = *h;
                h.epoch = out.len();
                out.push(h);
            }
        }
        out
    }
}

/// Staged training of a fresh model: attention, detector, optional joint
/// fine-tuning, then the recurrent heads.
pub fn train_full(arch: ArchConfig, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<(CascadeModel, FullReport), TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let mut model = CascadeModel::init(arch, cfg.seed)?;
    let mut stages = vec![train_attention(&mut model, pairs, cfg)?, train_detector(&mut model, pairs, cfg)?];
    if cfg.joint_epochs > 0 {
        stages.push(train_joint(&mut model, pairs, cfg)?);
    }
    stages.push(train_lstm(&mut model, pairs, cfg)?);
    Ok((model, FullReport { stages }))
}

/// One cross-validation partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded split into five test subsets whose sizes differ by at most one
/// (larger subsets first).
pub fn five_fold_split(ids: &[String], seed: u64) -> Result<Vec<Fold>, TrainError> {
    const K: usize = 5;
    if ids.len() < K {
        return Err(TrainError::TooFewIds { n: ids.len(), folds: K });
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / K, order.len() % K);
    let mut folds = Vec::with_capacity(K);
    let mut start = 0;
    for k in 0..K {
        let len = base + usize::from(k < extra);
        let test = order[start..start + len].to_vec();
        let train = order.iter().filter(|id| !test.contains(id)).cloned().collect();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}

pub const LOSS_CSV_HEADER: &str = "epoch,L,Lcls,Lmask,Lbox,Latt";

pub fn format_loss_csv(history: &[EpochLoss]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{},{},{}", h.epoch, h.total, h.cls, h.mask, h.bbox, h.att);
    }
    s
}

pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<(), TrainError> {
    std::fs::write(path, format_loss_csv(history)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
