//! Model assembly: attention regressor, proposal detector with
//! classification, box and mask heads, and LSTM-refined heads.
//!
//! All geometry inside this module is in patch coordinates: pixel `(c, r)`
//! of the search patch sits at `(x, y) = (c, r)`.

mod nets;
mod tracker;

pub use nets::{
    attention_patch_term, box_grid, layer_gradients, sample_points, Engine, MlpOut, GRID_STRIDE,
};
pub use tracker::{
    attention_forward, detector_forward, lstm_refine, roi_plain, Candidate, FrameResult, LandmarkTracker, Refined, TrackOptions,
};
pub(crate) use tracker::head_outputs;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::boxgeom::{BBox, BoxError};
use crate::ndtensor::{conv_output_len, ParamSet, Tensor, TensorError};
use crate::recurrent::LstmParams;

pub const MODEL_MAGIC: &[u8; 8] = b"LMMODEL1";
const MAX_MANIFEST: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("architecture: {0}")]
    Arch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Layer sizes and geometric constants of the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Side of the square search patch.
    pub patch: usize,
    /// Side of the attention box (the H×W ground-truth box).
    pub att_box: f64,
    /// Output channels of the three stride-2 backbone convolutions.
    pub channels: [usize; 3],
    pub rpn_hidden: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_stride: f64,
    pub anchor_min_iou: f64,
    pub roi_size: usize,
    pub feat_dim: usize,
    pub cls_hidden: usize,
    /// Side of the fixed candidate box.
    pub cand_box: f64,
    pub mask_size: usize,
    pub mask_channels: usize,
    pub top_k: usize,
    pub lstm_hidden: usize,
    pub window: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            patch: 100,
            att_box: 64.0,
            channels: [8, 16, 32],
            rpn_hidden: 32,
            anchor_scales: vec![16.0, 20.0, 24.0, 28.0],
            anchor_stride: 4.0,
            anchor_min_iou: 0.0,
            roi_size: 7,
            feat_dim: 128,
            cls_hidden: 32,
            cand_box: 20.0,
            mask_size: 20,
            mask_channels: 8,
            top_k: 8,
            lstm_hidden: 64,
            window: 5,
        }
    }
}

impl ArchConfig {
    /// Default layers with a 40 px attention box, sized for the synthetic
    /// sequences whose distractor blobs sit 30 to 44 px from the landmark.
    pub fn synthetic() -> Self {
        Self {
            att_box: 40.0,
            ..Self::default()
        }
    }

    /// A small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            patch: 24,
            att_box: 12.0,
            channels: [2, 3, 2],
            rpn_hidden: 3,
            anchor_scales: vec![6.0, 8.0],
            anchor_stride: 4.0,
            roi_size: 2,
            feat_dim: 4,
            cls_hidden: 3,
            cand_box: 6.0,
            mask_size: 3,
            mask_channels: 2,
            top_k: 3,
            lstm_hidden: 3,
            window: 2,
            ..Self::default()
        }
    }

    /// Side lengths of the three backbone outputs.
    pub fn map_sizes(&self) -> [usize; 3] {
        let s1 = conv_output_len(self.patch, 3, 2, 1).unwrap_or(0);
        let s2 = conv_output_len(s1, 3, 2, 1).unwrap_or(0);
        let s3 = conv_output_len(s2, 3, 2, 1).unwrap_or(0);
        [s1, s2, s3]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Arch(m));
        if self.patch < 8 {
            return bad(format!("patch {} too small", self.patch));
        }
        if self.channels.contains(&0)
            || [self.rpn_hidden, self.roi_size, self.feat_dim, self.cls_hidden, self.mask_size, self.mask_channels, self.top_k, self.lstm_hidden, self.window]
                .contains(&0)
        {
            return bad("all layer sizes must be positive".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(*s > 0.0)) {
            return bad("anchor scales must be positive".into());
        }
        if !(self.anchor_stride > 0.0) || !(0.0..=1.0).contains(&self.anchor_min_iou) {
            return bad("anchor stride must be positive and min_iou within [0, 1]".into());
        }
        if !(self.att_box > 0.0 && self.att_box <= self.patch as f64) || !(self.cand_box > 0.0) {
            return bad("box sizes must be positive and the attention box must fit the patch".into());
        }
        Ok(())
    }

    pub fn anchor_box(&self) -> BBox {
        let c = self.patch as f64 / 2.0;
        BBox {
            cx: c,
            cy: c,
            w: self.att_box,
            h: self.att_box,
        }
    }

    /// The whole patch as a box.
    pub fn patch_box(&self) -> BBox {
        let c = (self.patch as f64 - 1.0) / 2.0;
        BBox {
            cx: c,
            cy: c,
            w: self.patch as f64,
            h: self.patch as f64,
        }
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let scales: Vec<String> = self.anchor_scales.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "patch={}", self.patch);
        let _ = writeln!(s, "att_box={}", self.att_box);
        let _ = writeln!(s, "channels={},{},{}", self.channels[0], self.channels[1], self.channels[2]);
        let _ = writeln!(s, "rpn_hidden={}", self.rpn_hidden);
        let _ = writeln!(s, "anchor_scales={}", scales.join(","));
        let _ = writeln!(s, "anchor_stride={}", self.anchor_stride);
        let _ = writeln!(s, "anchor_min_iou={}", self.anchor_min_iou);
        let _ = writeln!(s, "roi_size={}", self.roi_size);
        let _ = writeln!(s, "feat_dim={}", self.feat_dim);
        let _ = writeln!(s, "cls_hidden={}", self.cls_hidden);
        let _ = writeln!(s, "cand_box={}", self.cand_box);
        let _ = writeln!(s, "mask_size={}", self.mask_size);
        let _ = writeln!(s, "mask_channels={}", self.mask_channels);
        let _ = writeln!(s, "top_k={}", self.top_k);
        let _ = writeln!(s, "lstm_hidden={}", self.lstm_hidden);
        let _ = writeln!(s, "window={}", self.window);
        s
    }

    /// Parses [`ArchConfig::to_manifest`] output. Every key is required.
    pub fn from_manifest(text: &str) -> Result<Self, ModelError> {
        let mut a = ArchConfig::default();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Format(format!("manifest line '{line}'")))?;
            let bad = || ModelError::Format(format!("bad value for '{k}': '{v}'"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad);
            match k {
                "patch" => a.patch = int()?,
                "att_box" => a.att_box = real()?,
                "channels" => {
                    let c: Vec<usize> = v.split(',').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
                    a.channels = c.try_into().map_err(|_| bad())?;
                }
                "rpn_hidden" => a.rpn_hidden = int()?,
                "anchor_scales" => {
                    a.anchor_scales = v
                        .split(',')
                        .map(|p| p.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad))
                        .collect::<Result<_, _>>()?
                }
                "anchor_stride" => a.anchor_stride = real()?,
                "anchor_min_iou" => a.anchor_min_iou = real()?,
                "roi_size" => a.roi_size = int()?,
                "feat_dim" => a.feat_dim = int()?,
                "cls_hidden" => a.cls_hidden = int()?,
                "cand_box" => a.cand_box = real()?,
                "mask_size" => a.mask_size = int()?,
                "mask_channels" => a.mask_channels = int()?,
                "top_k" => a.top_k = int()?,
                "lstm_hidden" => a.lstm_hidden = int()?,
                "window" => a.window = int()?,
                other => return Err(ModelError::Format(format!("unknown manifest key '{other}'"))),
            }
            if !seen.insert(k.to_string()) {
                return Err(ModelError::Format(format!("duplicate manifest key '{k}'")));
            }
        }
        if seen.len() != 16 {
            return Err(ModelError::Format(format!("manifest has {} of 16 keys", seen.len())));
        }
        a.validate()?;
        if a.patch > 4096 || a.feat_dim > 1 << 14 || a.lstm_hidden > 1 << 12 {
            return Err(ModelError::Arch("layer sizes exceed supported limits".into()));
        }
        Ok(a)
    }

    /// Expected `(name, shape, fan_in)` of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let [c1, c2, c3] = self.channels;
        let [_, _, s3] = self.map_sizes();
        let mut v: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut push = |n: &str, shape: Vec<usize>, fan: usize| v.push((n.to_string(), shape, fan));
        for p in ["att", "det"] {
            push(&format!("{p}.c1.w"), vec![c1, 1, 3, 3], 9);
            push(&format!("{p}.c1.b"), vec![c1], 9);
            push(&format!("{p}.c2.w"), vec![c2, c1, 3, 3], 9 * c1);
            push(&format!("{p}.c2.b"), vec![c2], 9 * c1);
            push(&format!("{p}.c3.w"), vec![c3, c2, 3, 3], 9 * c2);
            push(&format!("{p}.c3.b"), vec![c3], 9 * c2);
        }
        let flat = c3 * s3 * s3;
        push("att.fc.w", vec![4, flat], flat);
        push("att.fc.b", vec![4], flat);
        push("det.lat.w", vec![c2, c3, 1, 1], c3);
        push("det.lat.b", vec![c2], c3);
        let ns = self.anchor_scales.len();
        push("det.rpn.w1", vec![self.rpn_hidden, c2], c2);
        push("det.rpn.b1", vec![self.rpn_hidden], c2);
        push("det.rpn.w2", vec![2 * ns, self.rpn_hidden], self.rpn_hidden);
        push("det.rpn.b2", vec![2 * ns], self.rpn_hidden);
        let roi_in = c2 * self.roi_size * self.roi_size;
        push("det.roi.w", vec![self.feat_dim, roi_in], roi_in);
        push("det.roi.b", vec![self.feat_dim], roi_in);
        push("det.mask.w1", vec![self.mask_channels, c2, 1, 1], c2);
        push("det.mask.b1", vec![self.mask_channels], c2);
        push("det.mask.w", vec![2, self.mask_channels], self.mask_channels);
        for (p, n) in [("head", self.feat_dim), ("lhead", self.lstm_hidden)] {
            push(&format!("{p}.cls.w1"), vec![self.cls_hidden, n], n);
            push(&format!("{p}.cls.b1"), vec![self.cls_hidden], n);
            push(&format!("{p}.cls.w2"), vec![2, self.cls_hidden], self.cls_hidden);
            push(&format!("{p}.cls.b2"), vec![2], self.cls_hidden);
            push(&format!("{p}.box.w"), vec![2, n], n);
            push(&format!("{p}.box.b"), vec![2], n);
        }
        v
    }
}

/// Parameters plus the architecture they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub arch: ArchConfig,
    pub params: ParamSet,
}

impl CascadeModel {
    /// Uniform `±1/√fan_in` initialization from a seeded generator. Box-head
    /// weights start at zero so initial predictions equal the anchors.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, fan) in arch.param_specs() {
            let a = 1.0 / (fan as f64).sqrt();
            let n: usize = shape.iter().product();
            let zero = name.ends_with(".box.w") || name.ends_with(".box.b") || name.starts_with("att.fc");
            let data = (0..n)
                .map(|_| {
                    let v = rng.random_range(-a..a);
                    if zero {
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        LstmParams::random(arch.feat_dim, arch.lstm_hidden, &mut rng).insert_into(&mut params, "lstm.")?;
        Ok(Self { arch, params })
    }

    /// Checks that every expected parameter exists with the expected shape.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        for (name, shape, _) in self.arch.param_specs() {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Format(format!(
                        "parameter '{name}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Format(format!("missing parameter '{name}'"))),
            }
        }
        let l = LstmParams::from_set(&self.params, "lstm.")?;
        if l.input != self.arch.feat_dim || l.hidden != self.arch.lstm_hidden {
            return Err(ModelError::Format("LSTM dimensions disagree with the manifest".into()));
        }
        let expected = self.arch.param_specs().len() + 16;
        if self.params.len() != expected {
            return Err(ModelError::Format(format!(
                "{} parameters, expected {expected}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// `LMMODEL1`, manifest length (u32 LE), manifest text, parameter block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.arch.to_manifest();
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        out.extend_from_slice(m.as_bytes());
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
            return Err(ModelError::Format("not a model checkpoint".into()));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if n > MAX_MANIFEST || bytes.len() < 12 + n {
            return Err(ModelError::Format("truncated manifest".into()));
        }
        let text = std::str::from_utf8(&bytes[12..12 + n]).map_err(|_| ModelError::Format("manifest is not UTF-8".into()))?;
        let arch = ArchConfig::from_manifest(text)?;
        let params = ParamSet::from_bytes(&bytes[12 + n..])?;
        let m = Self { arch, params };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
