//! Flat `key = value` run configuration.
//!
//! Every key belongs to the table in [`KEYS`]; a file or override naming any
//! other key is rejected. Preset keys (`arch.preset`, `train.preset`) are
//! applied before all other keys regardless of where they appear, so a
//! preset never silently undoes an explicit setting.

use std::fmt::Write as _;

use lmtrack::cascade::{ArchConfig, TrackOptions};
use lmtrack::dataio::SynthConfig;
use lmtrack::evalbench::{BenchOptions, StdKind};
use lmtrack::losses::LayerId;
use lmtrack::trainer::TrainConfig;

use crate::CliError;

/// Effective settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Sequences written by `synth`; sequence `i` uses seed `--seed + i`.
    pub count: usize,
    pub synth: SynthConfig,
    pub arch_preset: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub track: TrackOptions,
    pub std_kind: StdKind,
    pub bench: BenchOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            count: 12,
            synth: SynthConfig::default(),
            arch_preset: "synthetic".into(),
            arch: ArchConfig::synthetic(),
            train: TrainConfig::synthetic(),
            track: TrackOptions::default(),
            std_kind: StdKind::Population,
            bench: BenchOptions::default(),
        }
    }
}

/// One accepted key.
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

impl Key {
    pub fn current(&self, cfg: &RunConfig) -> String {
        (self.get)(cfg)
    }
}

/// Types a config value can hold. Floats must be finite.
trait Value: Sized {
    fn from_config(v: &str) -> Result<Self, String>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn from_config(v: &str) -> Result<Self, String> {
                v.parse().map_err(|_| format!("cannot parse '{v}'"))
            }
        }
    )*};
}

plain_value!(usize, u32, bool, String);

impl Value for f64 {
    fn from_config(v: &str) -> Result<Self, String> {
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("expected a finite number, got '{v}'"))
    }
}

fn parse<T: Value>(v: &str) -> Result<T, String> {
    T::from_config(v)
}

fn parse_opt<T: Value>(v: &str) -> Result<Option<T>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_layers(v: &str) -> Result<Vec<LayerId>, String> {
    let layers = v
        .split(',')
        .map(|s| match s.trim() {
            "input" => Ok(LayerId::Input),
            "last_hidden" => Ok(LayerId::LastHidden),
            "output" => Ok(LayerId::Output),
            other => Err(format!("unknown layer '{other}' (input, last_hidden, output)")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if layers.is_empty() {
        return Err("at least one layer is required".into());
    }
    Ok(layers)
}

macro_rules! field {
    ($name:literal, $help:literal, $($f:ident).+ : $ty:ty) => {
        Key {
            name: $name,
            help: $help,
            get: |c| c.$($f).+.to_string(),
            set: |c, v| {
                c.$($f).+ = parse::<$ty>(v)?;
                Ok(())
            },
        }
    };
}

pub static KEYS: &[Key] = &[
    field!("synth.count", "number of sequences written by synth", count: usize),
    field!("synth.width", "frame width (px)", synth.width: usize),
    field!("synth.height", "frame height (px)", synth.height: usize),
    field!("synth.frames", "frames per sequence", synth.n_frames: usize),
    field!("synth.hz", "frame rate (Hz)", synth.hz: f64),
    field!("synth.spacing_mm", "pixel spacing (mm/px)", synth.spacing_mm: f64),
    field!("synth.source_tag", "scanner group written to each manifest", synth.source_tag: String),
    field!("synth.amplitude", "peak periodic displacement (px)", synth.amplitude: f64),
    field!("synth.frequency", "breathing frequency (Hz)", synth.frequency: f64),
    field!("synth.drift", "linear drift (px/frame)", synth.drift: f64),
    field!("synth.jump_prob", "probability of an abrupt jump per frame", synth.jump_prob: f64),
    field!("synth.jump_magnitude", "jump length (px)", synth.jump_magnitude: f64),
    field!("synth.jump_frames", "frames a jump takes to unwind", synth.jump_frames: usize),
    field!("synth.background", "mean background intensity", synth.background: f64),
    field!("synth.texture", "static tissue texture amplitude", synth.texture: f64),
    field!("synth.blob_amplitude", "landmark blob peak intensity", synth.blob_amplitude: f64),
    field!("synth.blob_sigma", "landmark blob radius (px)", synth.blob_sigma: f64),
    field!("synth.distractors", "look-alike blobs near the landmark", synth.distractors: usize),
    field!("synth.distractor_min_dist", "closest distractor distance (px)", synth.distractor_min_dist: f64),
    field!("synth.distractor_max_dist", "farthest distractor distance (px)", synth.distractor_max_dist: f64),
    field!("synth.distractor_flicker", "per-frame distractor amplitude variation", synth.distractor_flicker: f64),
    field!("synth.speckle", "speckle mixing weight, 0 disables", synth.speckle: f64),
    Key {
        name: "arch.preset",
        help: "layer sizes: synthetic, default or tiny",
        get: |c| c.arch_preset.clone(),
        set: |c, v| {
            c.arch = match v {
                "synthetic" => ArchConfig::synthetic(),
                "default" => ArchConfig::default(),
                "tiny" => ArchConfig::tiny(),
                _ => return Err(format!("unknown preset '{v}'")),
            };
            c.arch_preset = v.to_string();
            Ok(())
        },
    },
    field!("arch.att_box", "attention box side (px)", arch.att_box: f64),
    field!("arch.rpn_hidden", "proposal network hidden channels", arch.rpn_hidden: usize),
    Key {
        name: "arch.anchor_scales",
        help: "comma-separated anchor sides (px)",
        get: |c| list(&c.arch.anchor_scales),
        set: |c, v| {
            c.arch.anchor_scales = v.split(',').map(|s| parse(s.trim())).collect::<Result<_, _>>()?;
            Ok(())
        },
    },
    field!("arch.anchor_stride", "anchor grid stride (px)", arch.anchor_stride: f64),
    field!("arch.anchor_min_iou", "minimum anchor overlap with the search region", arch.anchor_min_iou: f64),
    field!("arch.roi_size", "pooled region side (cells)", arch.roi_size: usize),
    field!("arch.feat_dim", "candidate feature length", arch.feat_dim: usize),
    field!("arch.cls_hidden", "classifier hidden units", arch.cls_hidden: usize),
    field!("arch.cand_box", "candidate box side (px)", arch.cand_box: f64),
    field!("arch.mask_size", "mask side (px)", arch.mask_size: usize),
    field!("arch.mask_channels", "mask head channels", arch.mask_channels: usize),
    field!("arch.top_k", "candidates kept per frame", arch.top_k: usize),
    field!("arch.lstm_hidden", "recurrent hidden units", arch.lstm_hidden: usize),
    field!("arch.window", "frames in the recurrent window", arch.window: usize),
    Key {
        name: "train.preset",
        help: "training schedule: synthetic (desk scale) or full (lr 1e-6, up to 1000 epochs)",
        get: |c| c.train.preset.clone(),
        set: |c, v| {
            c.train = TrainConfig::preset(v).ok_or_else(|| format!("unknown preset '{v}'"))?;
            Ok(())
        },
    },
    field!("train.learning_rate", "step size", train.learning_rate: f64),
    field!("train.momentum", "momentum in [0, 1)", train.momentum: f64),
    field!("train.max_epochs", "epoch cap per stage", train.max_epochs: usize),
    field!("train.min_epochs", "first epoch at which early stopping may fire", train.min_epochs: usize),
    field!("train.delta_stop", "stop once an epoch improves the loss by less than this", train.delta_stop: f64),
    field!("train.batch_size", "pairs per step, 0 for one step per sequence", train.batch_size: usize),
    field!("train.joint_epochs", "joint attention/detector epochs, 0 skips the stage", train.joint_epochs: usize),
    field!("train.w_cls", "classification loss weight", train.weights.cls: f64),
    field!("train.w_mask", "mask loss weight", train.weights.mask: f64),
    field!("train.w_box", "box loss weight", train.weights.bbox: f64),
    field!("train.margin_gamma", "classification margin", train.margin.gamma: f64),
    field!("train.margin_min_norm", "layers with a smaller gradient gap are skipped", train.margin.min_norm: f64),
    Key {
        name: "train.margin_layers",
        help: "comma-separated margin layers: input, last_hidden, output",
        get: |c| c.train.margin.layers.iter().map(|l| l.name()).collect::<Vec<_>>().join(","),
        set: |c, v| {
            c.train.margin.layers = parse_layers(v)?;
            Ok(())
        },
    },
    field!("train.mask_m", "angular margin multiplier of the mask loss", train.mask.m: u32),
    field!("train.mask_lambda", "mask weight decay", train.mask.lambda: f64),
    field!("train.include_reference", "train on each landmark's first frame too", train.include_reference: bool),
    field!("train.positives", "positive anchors per pair", train.positives: usize),
    field!("train.pos_iou", "overlap marking an anchor positive", train.pos_iou: f64),
    field!("train.neg_iou", "overlap below which an anchor is negative", train.neg_iou: f64),
    field!("train.mask_radius", "ground-truth mask disk radius (px)", train.mask_radius: f64),
    field!("train.jitter", "half-width of teacher region shifts (px)", train.jitter: f64),
    field!("train.audit_entries", "gradient entries checked per stage, 0 disables", train.audit_entries: usize),
    field!("track.use_attention", "search only the predicted attention box", track.use_attention: bool),
    field!("track.use_lstm", "refine candidates with the recurrent heads", track.use_lstm: bool),
    field!("track.gamma", "score/distance tradeoff of the selection rule", track.selection.tradeoff_gamma: f64),
    field!("track.literal_argmin", "select the minimum combined score instead of the maximum", track.selection.literal_argmin: bool),
    Key {
        name: "track.top_k",
        help: "candidate cap, auto uses arch.top_k",
        get: |c| show_opt(&c.track.top_k),
        set: |c, v| {
            c.track.top_k = parse_opt(v)?;
            Ok(())
        },
    },
    Key {
        name: "track.min_iou",
        help: "anchor overlap filter, auto uses arch.anchor_min_iou",
        get: |c| show_opt(&c.track.min_iou),
        set: |c, v| {
            c.track.min_iou = parse_opt(v)?;
            Ok(())
        },
    },
    Key {
        name: "eval.std",
        help: "standard deviation: population or sample",
        get: |c| match c.std_kind {
            StdKind::Population => "population".into(),
            StdKind::Sample => "sample".into(),
        },
        set: |c, v| {
            c.std_kind = match v {
                "population" => StdKind::Population,
                "sample" => StdKind::Sample,
                _ => return Err(format!("expected population or sample, got '{v}'")),
            };
            Ok(())
        },
    },
    field!("bench.warmup", "untimed leading frames", bench.warmup: usize),
    field!("bench.repeats", "timed passes; each frame keeps its fastest time", bench.repeats: usize),
    field!("bench.parallel", "also time one thread per landmark", bench.parallel: bool),
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Entries of a config file, with 1-based line numbers. `#` starts a
/// comment line; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if let Some((first, _, _)) = out.iter().find(|(_, prev, _)| prev == k) {
            return Err(CliError::config(format!("line {}: '{k}' already set on line {first}", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults, then `entries` in order (presets first), then validation.
    pub fn build(entries: &[(String, String)], seed: u64) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let is_preset = |k: &str| k.ends_with(".preset");
        let ordered = entries.iter().filter(|(k, _)| is_preset(k)).chain(entries.iter().filter(|(k, _)| !is_preset(k)));
        for (k, v) in ordered {
            let spec = key(k).ok_or_else(|| CliError::config(format!("unknown key '{k}' (see --help)")))?;
            (spec.set)(&mut cfg, v).map_err(|e| CliError::config(format!("{k}: {e}")))?;
        }
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.arch.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.track.selection.tradeoff_gamma) {
            return Err(CliError::config("track.gamma must lie in [0, 1]"));
        }
        if self.bench.repeats == 0 {
            return Err(CliError::config("bench.repeats must be positive"));
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` line each, in a
    /// form [`parse_config_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.name, k.current(self));
        }
        s
    }
}

/// Key reference appended to every subcommand's help.
pub fn schema_help() -> String {
    let defaults = RunConfig::default();
    let mut s = String::from(
        "Config keys (file lines `key = value`, `#` comments; override with --set key=value).\n\
         Presets apply before other keys. Randomness comes only from --seed.\n",
    );
    let mut section = "";
    for k in KEYS {
        let sec = k.name.split('.').next().unwrap_or("");
        if sec != section {
            section = sec;
            let _ = writeln!(s, "\n[{sec}]");
        }
        let _ = writeln!(s, "  {:<28} {} (default {})", k.name, k.help, k.current(&defaults));
    }
    s
}
