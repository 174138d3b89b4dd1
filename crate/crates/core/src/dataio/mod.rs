//! Sequence ingestion and export, patch cropping and synthetic sequences.
//!
//! On-disk layout of one sequence directory:
//!
//! ```text
//! manifest.txt          key=value lines: spacing_mm, hz, source_tag (optional: name)
//! frame_00000.png       8- or 16-bit grayscale, one file per frame, contiguous from 0
//! frame_00001.png
//! ...
//! landmark_<id>.csv     rows "frame_index,x,y", optional header, strictly increasing frames
//! ```
//!
//! Coordinates are `x` = column and `y` = row in pixels, with the origin at
//! the center of the top-left pixel.

mod synth;

pub use synth::{synth_sequence, SynthConfig, SynthError};

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ndtensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("frame {index}: {detail}")]
    Frame { index: usize, detail: String },
    #[error("{file}, line {line}: {detail}")]
    Annotation { file: String, line: usize, detail: String },
    #[error("manifest, line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("landmark '{0}' has no annotation on frame 0")]
    MissingFirstFrame(String),
    #[error("{0}")]
    Layout(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Grayscale frame with integer samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(DataError::Layout(format!(
                "{} samples for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: i64, y: i64) -> Option<u16> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.pixels[y as usize * self.width + x as usize])
        }
    }
}

/// One annotated point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTrack {
    pub id: String,
    /// Strictly increasing frame indices; the first entry is frame 0.
    pub points: Vec<Annotation>,
}

impl LandmarkTrack {
    pub fn at(&self, frame: usize) -> Option<(f64, f64)> {
        self.points
            .binary_search_by_key(&frame, |a| a.frame)
            .ok()
            .map(|i| (self.points[i].x, self.points[i].y))
    }

    pub fn first(&self) -> (f64, f64) {
        (self.points[0].x, self.points[0].y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spacing_mm: f64,
    pub hz: f64,
    pub source_tag: String,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub name: String,
    pub frames: Vec<GrayFrame>,
    /// 8 or 16.
    pub bit_depth: u8,
    pub spacing_mm: f64,
    pub hz: f64,
    pub source_tag: String,
    pub landmarks: Vec<LandmarkTrack>,
}

impl SequenceBundle {
    pub fn max_value(&self) -> f64 {
        if self.bit_depth == 16 {
            65535.0
        } else {
            255.0
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| DataError::Layout("sequence has no frames".into()))?;
        if let Some((i, _)) = self
            .frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.width != first.width || f.height != first.height)
        {
            return Err(DataError::Frame {
                index: i,
                detail: format!("size differs from frame 0 ({}x{})", first.width, first.height),
            });
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(DataError::Layout(format!("unsupported bit depth {}", self.bit_depth)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) || !(self.hz > 0.0 && self.hz.is_finite()) {
            return Err(DataError::Layout(format!(
                "spacing_mm {} and hz {} must be positive",
                self.spacing_mm, self.hz
            )));
        }
        for lm in &self.landmarks {
            if lm.points.first().map(|a| a.frame) != Some(0) {
                return Err(DataError::MissingFirstFrame(lm.id.clone()));
            }
            if lm.points.windows(2).any(|w| w[1].frame <= w[0].frame) {
                return Err(DataError::Layout(format!("landmark '{}': frames not increasing", lm.id)));
            }
            if let Some(a) = lm.points.iter().find(|a| a.frame >= self.frames.len()) {
                return Err(DataError::Layout(format!(
                    "landmark '{}': frame {} beyond {} frames",
                    lm.id,
                    a.frame,
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }
}

/// Parses a manifest. Unknown keys are ignored with a warning.
pub fn parse_manifest(text: &str) -> Result<Manifest, DataError> {
    let mut spacing = None;
    let mut hz = None;
    let mut tag = None;
    let mut name = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| DataError::Manifest { line: ln + 1, detail };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| -> Result<f64, DataError> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x > 0.0)
                .ok_or_else(|| err(format!("'{k}' must be a positive number, got '{v}'")))
        };
        match k {
            "spacing_mm" => spacing = Some(num(v)?),
            "hz" => hz = Some(num(v)?),
            "source_tag" => {
                if v.is_empty() || v.contains(',') {
                    return Err(err(format!("invalid source_tag '{v}'")));
                }
                tag = Some(v.to_string())
            }
            "name" => name = Some(v.to_string()),
            other => log::warn!("manifest: ignoring unknown key '{other}'"),
        }
    }
    let missing = |k: &str| DataError::Manifest {
        line: 0,
        detail: format!("missing key '{k}'"),
    };
    let spacing_mm = spacing.ok_or_else(|| missing("spacing_mm"))?;
    if !(0.27..=0.77).contains(&spacing_mm) {
        log::warn!("spacing {spacing_mm} mm/px outside the typical 0.27..0.77 range");
    }
    Ok(Manifest {
        spacing_mm,
        hz: hz.ok_or_else(|| missing("hz"))?,
        source_tag: tag.ok_or_else(|| missing("source_tag"))?,
        name,
    })
}

pub fn format_manifest(m: &Manifest) -> String {
    let mut s = format!("spacing_mm={}\nhz={}\nsource_tag={}\n", m.spacing_mm, m.hz, m.source_tag);
    if let Some(n) = &m.name {
        let _ = writeln!(s, "name={n}");
    }
    s
}

/// Parses `frame_index,x,y` rows. A first line that does not start with a
/// digit is treated as a header.
pub fn parse_annotation_csv(file: &str, text: &str) -> Result<Vec<Annotation>, DataError> {
    let mut out: Vec<Annotation> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if ln == 0 && !line.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let err = |detail: String| DataError::Annotation {
            file: file.to_string(),
            line: ln + 1,
            detail,
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, got {}", cols.len())));
        }
        let frame: usize = cols[0]
            .parse()
            .map_err(|_| err(format!("bad frame index '{}'", cols[0])))?;
        let coord = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad coordinate '{s}'")))
        };
        let a = Annotation {
            frame,
            x: coord(cols[1])?,
            y: coord(cols[2])?,
        };
        if let Some(prev) = out.last() {
            if a.frame <= prev.frame {
                return Err(err(format!("frame {} does not follow {}", a.frame, prev.frame)));
            }
        }
        out.push(a);
    }
    Ok(out)
}

pub fn format_annotation_csv(points: &[Annotation]) -> String {
    let mut s = String::from("frame_index,x,y\n");
    for a in points {
        let _ = writeln!(s, "{},{},{}", a.frame, a.x, a.y);
    }
    s
}

/// Decodes a grayscale PNG. Returns the frame and its bit depth (8 or 16).
pub fn decode_frame(bytes: &[u8]) -> Result<(GrayFrame, u8), String> {
    let mut limits = png::Limits::default();
    limits.bytes = MAX_FRAME_BYTES;
    let mut dec = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .filter(|&n| n <= MAX_FRAME_BYTES)
        .ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale {
        return Err(format!("expected grayscale, got {:?}", info.color_type));
    }
    let (pixels, depth) = match info.bit_depth {
        png::BitDepth::Eight => {
            let px = (0..h)
                .flat_map(|r| buf[r * info.line_size..r * info.line_size + w].iter().map(|&b| b as u16))
                .collect();
            (px, 8)
        }
        png::BitDepth::Sixteen => {
            let px = (0..h)
                .flat_map(|r| {
                    buf[r * info.line_size..r * info.line_size + 2 * w]
                        .chunks_exact(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]))
                })
                .collect();
            (px, 16)
        }
        other => return Err(format!("unsupported bit depth {other:?}")),
    };
    let frame = GrayFrame::new(w, h, pixels).map_err(|e| e.to_string())?;
    Ok((frame, depth))
}

pub fn encode_frame(frame: &GrayFrame, bit_depth: u8) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        let data: Vec<u8> = match bit_depth {
            8 => {
                enc.set_depth(png::BitDepth::Eight);
                if frame.pixels.iter().any(|&p| p > 255) {
                    return Err("sample exceeds 8-bit range".into());
                }
                frame.pixels.iter().map(|&p| p as u8).collect()
            }
            16 => {
                enc.set_depth(png::BitDepth::Sixteen);
                frame.pixels.iter().flat_map(|p| p.to_be_bytes()).collect()
            }
            d => return Err(format!("unsupported bit depth {d}")),
        };
        let mut w = enc.write_header().map_err(|e| e.to_string())?;
        w.write_image_data(&data).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn frame_index(name: &str) -> Option<usize> {
    name.strip_prefix("frame_")?.strip_suffix(".png")?.parse().ok()
}

pub fn load_sequence(dir: &Path) -> Result<SequenceBundle, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = parse_manifest(&fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?)?;
    let mut frame_files = Vec::new();
    let mut landmark_files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(i) = frame_index(&name) {
            frame_files.push((i, entry.path()));
        } else if let Some(id) = name.strip_prefix("landmark_").and_then(|s| s.strip_suffix(".csv")) {
            landmark_files.push((id.to_string(), entry.path()));
        }
    }
    frame_files.sort();
    landmark_files.sort();
    for (pos, (i, _)) in frame_files.iter().enumerate() {
        if *i != pos {
            return Err(DataError::Frame {
                index: pos,
                detail: "missing frame file (frames must be contiguous from 0)".into(),
            });
        }
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    let mut depth = None;
    for (i, path) in &frame_files {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let (f, d) = decode_frame(&bytes).map_err(|detail| DataError::Frame { index: *i, detail })?;
        match depth {
            None => depth = Some(d),
            Some(prev) if prev != d => {
                return Err(DataError::Frame {
                    index: *i,
                    detail: format!("bit depth {d} differs from earlier frames ({prev})"),
                })
            }
            _ => {}
        }
        frames.push(f);
    }
    let mut landmarks = Vec::new();
    for (id, path) in landmark_files {
        let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let points = parse_annotation_csv(&file, &text)?;
        if points.first().map(|a| a.frame) != Some(0) {
            return Err(DataError::MissingFirstFrame(id));
        }
        if let Some((row, a)) = points.iter().enumerate().find(|(_, a)| a.frame >= frames.len()) {
            return Err(DataError::Annotation {
                file,
                line: row + 1,
                detail: format!("frame index {} but only {} frames", a.frame, frames.len()),
            });
        }
        landmarks.push(LandmarkTrack { id, points });
    }
    let name = manifest.name.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let bundle = SequenceBundle {
        name,
        frames,
        bit_depth: depth.unwrap_or(8),
        spacing_mm: manifest.spacing_mm,
        hz: manifest.hz,
        source_tag: manifest.source_tag,
        landmarks,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_sequence(bundle: &SequenceBundle, dir: &Path) -> Result<(), DataError> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = Manifest {
        spacing_mm: bundle.spacing_mm,
        hz: bundle.hz,
        source_tag: bundle.source_tag.clone(),
        name: Some(bundle.name.clone()).filter(|n| !n.is_empty()),
    };
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, format_manifest(&m)).map_err(io_err(&p))?;
    for (i, f) in bundle.frames.iter().enumerate() {
        let bytes = encode_frame(f, bundle.bit_depth).map_err(|detail| DataError::Frame { index: i, detail })?;
        let p = dir.join(format!("frame_{i:05}.png"));
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    for lm in &bundle.landmarks {
        if lm.id.is_empty() || lm.id.contains(['/', '\\']) {
            return Err(DataError::Layout(format!("landmark id '{}' cannot be a file name", lm.id)));
        }
        let p = dir.join(format!("landmark_{}.csv", lm.id));
        fs::write(&p, format_annotation_csv(&lm.points)).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Every subdirectory of `root` holding a manifest, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Top-left corner of a `size`-square patch centered on `center`.
pub fn patch_origin(center: (f64, f64), size: usize) -> (i64, i64) {
    let half = (size / 2) as i64;
    (center.0.round() as i64 - half, center.1.round() as i64 - half)
}

/// `size`×`size` patch centered on `center`, zero outside the frame,
/// intensities divided by `max_value`.
pub fn crop_patch(frame: &GrayFrame, center: (f64, f64), size: usize, max_value: f64) -> Tensor {
    let (ox, oy) = patch_origin(center, size);
    crop_at(frame, (ox, oy), size, max_value)
}

pub fn crop_at(frame: &GrayFrame, origin: (i64, i64), size: usize, max_value: f64) -> Tensor {
    let mut data = vec![0.0; size * size];
    let scale = 1.0 / max_value;
    for r in 0..size {
        let y = origin.1 + r as i64;
        if y < 0 || y >= frame.height as i64 {
            continue;
        }
        let row = &frame.pixels[y as usize * frame.width..(y as usize + 1) * frame.width];
        for c in 0..size {
            let x = origin.0 + c as i64;
            if x >= 0 && x < frame.width as i64 {
                data[r * size + c] = row[x as usize] as f64 * scale;
            }
        }
    }
    Tensor::new(vec![size, size], data).expect("square patch")
}
