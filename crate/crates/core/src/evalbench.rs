//! Tracking-error metrics, per-source reports, track files and throughput
//! measurement.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::cascade::{CascadeModel, LandmarkTracker, ModelError, TrackOptions};
use crate::dataio::{decode_frame, encode_frame, SequenceBundle};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no errors to summarize")]
    Empty,
    #[error("pixel spacing must be positive, got {0}")]
    Spacing(f64),
    #[error("track csv line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("frame {0}: {1}")]
    Frame(usize, String),
    #[error("tracks: {0}")]
    Track(String),
}

/// Euclidean distance between `pred` and `gt` in pixels, times `spacing_mm`.
pub fn tracking_error(pred: (f64, f64), gt: (f64, f64), spacing_mm: f64) -> Result<f64, EvalError> {
    if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
        return Err(EvalError::Spacing(spacing_mm));
    }
    Ok((pred.0 - gt.0).hypot(pred.1 - gt.1) * spacing_mm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub p95: f64,
    pub max: f64,
}

/// Nearest-rank percentile of an ascending slice: element `ceil(q·n)` (1-based).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn summarize(errors: &[f64], kind: StdKind) -> Result<Summary, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let ss: f64 = errors.iter().map(|e| (e - mean) * (e - mean)).sum();
    let denom = match kind {
        StdKind::Population => n as f64,
        StdKind::Sample if n > 1 => (n - 1) as f64,
        StdKind::Sample => 1.0,
    };
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        n,
        mean,
        std: (ss / denom).sqrt(),
        p95: nearest_rank(&sorted, 0.95),
        max: sorted[n - 1],
    })
}

/// Scanner groups in report order.
pub const SOURCES: [&str; 6] = ["CIL", "ETH", "ICR", "MED", "SYN", "OTHER"];

/// Report group of a source tag. `MED1`/`MED2` fold into `MED`; anything
/// unrecognized lands in `OTHER`.
pub fn normalize_source(tag: &str) -> &'static str {
    let t = tag.trim().to_ascii_uppercase();
    match t.as_str() {
        "CIL" => "CIL",
        "ETH" => "ETH",
        "ICR" => "ICR",
        "MED" | "MED1" | "MED2" => "MED",
        "SYN" => "SYN",
        _ => {
            log::warn!("unknown source tag '{tag}', grouped under OTHER");
            "OTHER"
        }
    }
}

/// Error series of one tracked landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkErrors {
    pub sequence: String,
    pub landmark_id: String,
    pub source_tag: String,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceRow {
    pub source: String,
    /// Number of landmarks in the group.
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub p95: f64,
    /// Mean over landmarks of each landmark's maximum error.
    pub ave_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub landmarks: Vec<(LandmarkErrors, Summary)>,
    /// One row per source present, in [`SOURCES`] order, then `ALL`.
    pub rows: Vec<SourceRow>,
    pub fps: Option<f64>,
}

pub const REPORT_CSV_HEADER: &str = "source,N,mean_mm,std_mm,p95_mm,ave_max_mm";
pub const LANDMARK_CSV_HEADER: &str = "sequence,landmark_id,source,n,mean_mm,std_mm,p95_mm,max_mm";

fn group_row(source: &str, members: &[&(LandmarkErrors, Summary)], kind: StdKind) -> Result<SourceRow, EvalError> {
    let pooled: Vec<f64> = members.iter().flat_map(|(l, _)| l.errors.iter().copied()).collect();
    let s = summarize(&pooled, kind)?;
    Ok(SourceRow {
        source: source.to_string(),
        n: members.len(),
        mean: s.mean,
        std: s.std,
        p95: s.p95,
        ave_max: members.iter().map(|(_, s)| s.max).sum::<f64>() / members.len() as f64,
    })
}

/// Per-source rows pooling each group's individual errors, plus an `ALL`
/// row over every landmark.
pub fn aggregate_report(landmarks: &[LandmarkErrors], kind: StdKind) -> Result<TrackReport, EvalError> {
    if landmarks.is_empty() {
        return Err(EvalError::Empty);
    }
    let with: Vec<(LandmarkErrors, Summary)> = landmarks
        .iter()
        .map(|l| Ok((l.clone(), summarize(&l.errors, kind)?)))
        .collect::<Result<_, EvalError>>()?;
    let groups: Vec<&str> = with.iter().map(|(l, _)| normalize_source(&l.source_tag)).collect();
    let mut rows = Vec::new();
    for src in SOURCES {
        let members: Vec<&(LandmarkErrors, Summary)> = with.iter().zip(&groups).filter(|(_, g)| **g == src).map(|(m, _)| m).collect();
        if !members.is_empty() {
            rows.push(group_row(src, &members, kind)?);
        }
    }
    let all: Vec<&(LandmarkErrors, Summary)> = with.iter().collect();
    rows.push(group_row("ALL", &all, kind)?);
    Ok(TrackReport {
        landmarks: with,
        rows,
        fps: None,
    })
}

impl TrackReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.source, r.n, r.mean, r.std, r.p95, r.ave_max);
        }
        s
    }

    /// One line per landmark with its own summary.
    pub fn landmarks_csv(&self) -> String {
        let mut s = format!("{LANDMARK_CSV_HEADER}\n");
        for (l, m) in &self.landmarks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                l.sequence, l.landmark_id, l.source_tag, m.n, m.mean, m.std, m.p95, m.max
            );
        }
        s
    }

    /// Fixed-width table with the same columns.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<8}{:>6}{:>12}{:>12}{:>12}{:>16}\n",
            "Source", "N", "Mean (mm)", "Std (mm)", "95% (mm)", "AVE.MaxError"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8}{:>6}{:>12.3}{:>12.3}{:>12.3}{:>16.3}",
                r.source, r.n, r.mean, r.std, r.p95, r.ave_max
            );
        }
        if let Some(f) = self.fps {
            let _ = writeln!(s, "fps: {f:.1}");
        }
        s
    }
}

/// One line of a track file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub landmark_id: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

pub const TRACK_CSV_HEADER: &str = "frame,landmark_id,x,y,score";

pub fn format_track_csv(rows: &[TrackRow]) -> String {
    let mut s = format!("{TRACK_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.frame, r.landmark_id, r.x, r.y, r.score);
    }
    s
}

/// Parses [`format_track_csv`] output; the header line is required.
pub fn parse_track_csv(text: &str) -> Result<Vec<TrackRow>, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRACK_CSV_HEADER => {}
        Some((i, _)) => {
            return Err(EvalError::Csv {
                line: i + 1,
                detail: format!("expected header '{TRACK_CSV_HEADER}'"),
            })
        }
        None => {
            return Err(EvalError::Csv {
                line: 0,
                detail: "empty file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |detail: String| EvalError::Csv { line: i + 1, detail };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        if f[1].is_empty() {
            return Err(bad("empty landmark id".into()));
        }
        let real = |s: &str, what: &str| -> Result<f64, EvalError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("bad {what} '{s}'")))
        };
        out.push(TrackRow {
            frame: f[0].parse().map_err(|_| bad(format!("bad frame index '{}'", f[0])))?,
            landmark_id: f[1].to_string(),
            x: real(f[2], "x")?,
            y: real(f[3], "y")?,
            score: real(f[4], "score")?,
        });
    }
    Ok(out)
}

/// Tracks every landmark of `seq` from its first annotation. Rows are sorted
/// by frame, then landmark id; each landmark's first row is its annotation.
pub fn track_sequence(model: &CascadeModel, seq: &SequenceBundle, opts: &TrackOptions) -> Result<Vec<TrackRow>, EvalError> {
    let max = seq.max_value();
    let mut rows = Vec::new();
    for lm in &seq.landmarks {
        let Some(first) = lm.points.first() else { continue };
        let start = (first.x, first.y);
        let mut tracker = LandmarkTracker::new(model, opts.clone(), &seq.frames[first.frame], start, max)?;
        rows.push(TrackRow {
            frame: first.frame,
            landmark_id: lm.id.clone(),
            x: start.0,
            y: start.1,
            score: 1.0,
        });
        for (f, frame) in seq.frames.iter().enumerate().skip(first.frame + 1) {
            let r = tracker.track(frame)?;
            rows.push(TrackRow {
                frame: f,
                landmark_id: lm.id.clone(),
                x: r.position.0,
                y: r.position.1,
                score: r.score,
            });
        }
    }
    rows.sort_by(|a, b| a.frame.cmp(&b.frame).then_with(|| a.landmark_id.cmp(&b.landmark_id)));
    Ok(rows)
}

/// Errors of track rows against the annotations of `seq`, at every annotated
/// frame after each landmark's first. Every such frame needs exactly one row.
pub fn score_tracks(seq: &SequenceBundle, rows: &[TrackRow]) -> Result<Vec<LandmarkErrors>, EvalError> {
    let mut by_key = std::collections::HashMap::new();
    for r in rows {
        if by_key.insert((r.landmark_id.as_str(), r.frame), (r.x, r.y)).is_some() {
            return Err(EvalError::Track(format!("landmark {} has two rows for frame {}", r.landmark_id, r.frame)));
        }
    }
    let mut out = Vec::new();
    for lm in &seq.landmarks {
        let mut errors = Vec::new();
        for p in lm.points.iter().skip(1) {
            let pred = by_key
                .get(&(lm.id.as_str(), p.frame))
                .ok_or_else(|| EvalError::Track(format!("no prediction for landmark {} on frame {}", lm.id, p.frame)))?;
            errors.push(tracking_error(*pred, (p.x, p.y), seq.spacing_mm)?);
        }
        out.push(LandmarkErrors {
            sequence: seq.name.clone(),
            landmark_id: lm.id.clone(),
            source_tag: seq.source_tag.clone(),
            errors,
        });
    }
    Ok(out)
}

/// [`track_sequence`] followed by [`score_tracks`].
pub fn evaluate_sequence(model: &CascadeModel, seq: &SequenceBundle, opts: &TrackOptions) -> Result<(Vec<LandmarkErrors>, Vec<TrackRow>), EvalError> {
    let rows = track_sequence(model, seq, opts)?;
    Ok((score_tracks(seq, &rows)?, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    /// Leading frames tracked in every pass but never timed.
    pub warmup: usize,
    /// Full passes over the sequence, each with a fresh tracker.
    pub repeats: usize,
    /// Also time one thread per landmark.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 5,
            repeats: 5,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpsReport {
    /// Timed frames per pass.
    pub frames: usize,
    pub landmarks: usize,
    /// Frames per second from each frame's fastest time over the passes,
    /// counting only tracker work on prepared patches. Interference from
    /// other processes only ever adds time, so this is the stable figure.
    pub exclusive_fps: f64,
    /// Frames per second over every timed frame of every pass.
    pub mean_fps: f64,
    /// Like `mean_fps` but including frame decoding and patch cropping.
    pub inclusive_fps: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_max_ms: f64,
    /// Exclusive fps with one thread per landmark, when requested.
    pub parallel_fps: Option<f64>,
    /// Positions of every landmark in every frame of the first pass.
    pub positions: Vec<Vec<(f64, f64)>>,
}

/// Frames per second from a frame count and elapsed seconds.
pub fn fps(frames: usize, seconds: f64) -> f64 {
    if seconds > 0.0 {
        frames as f64 / seconds
    } else {
        f64::INFINITY
    }
}

fn trackers<'m>(model: &'m CascadeModel, seq: &SequenceBundle, opts: &TrackOptions) -> Result<Vec<LandmarkTracker<'m>>, EvalError> {
    seq.landmarks
        .iter()
        .filter_map(|lm| lm.points.first())
        .map(|p| Ok(LandmarkTracker::new(model, opts.clone(), &seq.frames[p.frame], (p.x, p.y), seq.max_value())?))
        .collect()
}

/// Times single-stream tracking of every landmark over frames `1..`. A
/// frame's latency covers all of its landmarks, so cost grows with the
/// landmark count.
pub fn fps_benchmark(model: &CascadeModel, seq: &SequenceBundle, opts: &TrackOptions, bench: &BenchOptions) -> Result<FpsReport, EvalError> {
    let frames: Vec<usize> = (1..seq.frames.len()).collect();
    if frames.len() <= bench.warmup || seq.landmarks.is_empty() || bench.repeats == 0 {
        return Err(EvalError::Empty);
    }
    let timed = frames.len() - bench.warmup;
    let n_landmarks = trackers(model, seq, opts)?.len();
    let patches: Vec<Vec<_>> = {
        let tr = trackers(model, seq, opts)?;
        frames
            .iter()
            .map(|&f| tr.iter().map(|t| t.crop(&seq.frames[f])).collect())
            .collect()
    };

    let mut best = vec![f64::INFINITY; timed];
    let mut all = Vec::with_capacity(timed * bench.repeats);
    let mut positions = vec![Vec::new(); n_landmarks];
    for pass in 0..bench.repeats {
        let mut tr = trackers(model, seq, opts)?;
        for (k, per) in patches.iter().enumerate() {
            let t0 = Instant::now();
            for (i, (t, p)) in tr.iter_mut().zip(per).enumerate() {
                let r = t.track_patch(p)?;
                if pass == 0 {
                    positions[i].push(r.position);
                }
            }
            let dt = t0.elapsed().as_secs_f64();
            if k >= bench.warmup {
                best[k - bench.warmup] = best[k - bench.warmup].min(dt);
                all.push(dt);
            }
        }
    }

    let encoded: Vec<Vec<u8>> = frames
        .iter()
        .map(|&f| encode_frame(&seq.frames[f], seq.bit_depth).map_err(|e| EvalError::Frame(f, e)))
        .collect::<Result<_, _>>()?;
    let mut tr = trackers(model, seq, opts)?;
    let mut inclusive = 0.0;
    for (k, (bytes, &f)) in encoded.iter().zip(&frames).enumerate() {
        let t0 = Instant::now();
        let (frame, _) = decode_frame(bytes).map_err(|e| EvalError::Frame(f, e))?;
        for t in tr.iter_mut() {
            t.track(&frame)?;
        }
        if k >= bench.warmup {
            inclusive += t0.elapsed().as_secs_f64();
        }
    }

    let parallel_fps = if bench.parallel {
        let mut tr = trackers(model, seq, opts)?;
        let t0 = Instant::now();
        std::thread::scope(|s| {
            let handles: Vec<_> = tr
                .iter_mut()
                .enumerate()
                .map(|(i, t)| {
                    let patches = &patches;
                    s.spawn(move || -> Result<(), EvalError> {
                        for per in patches {
                            t.track_patch(&per[i])?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("tracker thread panicked"))
        })?;
        Some(fps(frames.len(), t0.elapsed().as_secs_f64()))
    } else {
        None
    };

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(FpsReport {
        frames: timed,
        landmarks: n_landmarks,
        exclusive_fps: fps(timed, best.iter().sum()),
        mean_fps: fps(all.len(), all.iter().sum()),
        inclusive_fps: fps(timed, inclusive),
        latency_p50_ms: nearest_rank(&sorted, 0.5) * 1e3,
        latency_p95_ms: nearest_rank(&sorted, 0.95) * 1e3,
        latency_max_ms: sorted[sorted.len() - 1] * 1e3,
        parallel_fps,
        positions,
    })
}
