use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{Annotation, GrayFrame, LandmarkTrack, SequenceBundle};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("landmark leaves the frame or its search patch at frame {0}")]
    OutOfFrame(usize),
    #[error("could not place {0} distractors at the requested distances")]
    Placement(usize),
}

/// Parameters of the synthetic breathing-motion sequence generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub hz: f64,
    pub spacing_mm: f64,
    pub source_tag: String,
    /// Rest position the landmark oscillates about; drawn near the image
    /// center when unset.
    pub center: Option<(f64, f64)>,
    /// Peak displacement of the periodic motion (px).
    pub amplitude: f64,
    /// Motion frequency (Hz).
    pub frequency: f64,
    pub phase: Option<f64>,
    /// Motion direction (radians from the x axis); random when unset.
    pub direction: Option<f64>,
    /// Linear drift (px per frame) along a random direction.
    pub drift: f64,
    pub jump_prob: f64,
    pub jump_magnitude: f64,
    pub jump_frames: usize,
    pub background: f64,
    pub texture: f64,
    pub blob_amplitude: f64,
    pub blob_sigma: f64,
    pub distractors: usize,
    pub distractor_min_dist: f64,
    pub distractor_max_dist: f64,
    /// Per-frame relative amplitude variation of distractors.
    pub distractor_flicker: f64,
    /// Mixing weight of the unit-mean Rayleigh field (0 disables speckle).
    pub speckle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            n_frames: 75,
            hz: 15.0,
            spacing_mm: 0.5,
            source_tag: "SYN".into(),
            center: None,
            amplitude: 8.0,
            frequency: 0.25,
            phase: None,
            direction: None,
            drift: 0.02,
            jump_prob: 0.02,
            jump_magnitude: 5.0,
            jump_frames: 3,
            background: 0.3,
            texture: 0.08,
            blob_amplitude: 0.45,
            blob_sigma: 3.0,
            distractors: 2,
            distractor_min_dist: 30.0,
            distractor_max_dist: 44.0,
            distractor_flicker: 0.3,
            speckle: 0.4,
            seed: 0,
        }
    }
}

/// Largest landmark excursion from its first-frame position that still
/// leaves a 20 px box inside a 100 px patch.
const MAX_EXCURSION: f64 = 40.0;
const EDGE_MARGIN: f64 = 8.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.width < 16 || self.height < 16 || self.n_frames == 0 {
            return bad("image must be at least 16x16 with at least one frame");
        }
        if !(0.0..=1.0).contains(&self.jump_prob) {
            return bad("jump_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return bad("speckle must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.distractor_flicker) {
            return bad("distractor_flicker must lie in [0, 1)");
        }
        for (name, v) in [
            ("hz", self.hz),
            ("spacing_mm", self.spacing_mm),
            ("blob_sigma", self.blob_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("drift", self.drift),
            ("jump_magnitude", self.jump_magnitude),
            ("texture", self.texture),
            ("background", self.background),
            ("blob_amplitude", self.blob_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be nonnegative")));
            }
        }
        if self.distractors > 0 && !(15.0 <= self.distractor_min_dist && self.distractor_min_dist <= self.distractor_max_dist) {
            return bad("distractor distances must satisfy 15 <= min <= max");
        }
        if self.amplitude + self.jump_magnitude >= MAX_EXCURSION {
            return bad("amplitude plus jump magnitude must stay below the patch half-size margin");
        }
        Ok(())
    }
}

/// Unit-mean Rayleigh sample by inverse CDF.
fn rayleigh(rng: &mut impl Rng) -> f64 {
    let sigma = (2.0 / PI).sqrt();
    let u: f64 = rng.random();
    sigma * (-2.0 * (1.0 - u).ln()).sqrt()
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Generates a sequence with one landmark annotated on every frame.
pub fn synth_sequence(cfg: &SynthConfig) -> Result<SequenceBundle, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (cx, cy) = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let start = cfg
        .center
        .unwrap_or_else(|| (cx + rng.random_range(-6.0..6.0), cy + rng.random_range(-6.0..6.0)));
    let phase = cfg.phase.unwrap_or_else(|| rng.random_range(0.0..2.0 * PI));
    let dir = cfg.direction.unwrap_or_else(|| rng.random_range(0.0..PI));
    let drift_dir = rng.random_range(0.0..2.0 * PI);
    let (ux, uy) = (dir.cos(), dir.sin());

    // Rigid tissue displacement per frame and probe shifts from jump events.
    let mut tissue = Vec::with_capacity(cfg.n_frames);
    let mut shift = Vec::with_capacity(cfg.n_frames);
    let mut active: Option<(usize, (f64, f64))> = None;
    for t in 0..cfg.n_frames {
        let s = cfg.amplitude * (2.0 * PI * cfg.frequency * t as f64 / cfg.hz + phase).sin();
        let d = cfg.drift * t as f64;
        tissue.push((s * ux + d * drift_dir.cos(), s * uy + d * drift_dir.sin()));
        let draw: f64 = rng.random();
        let ang = rng.random_range(0.0..2.0 * PI);
        if active.is_none() && t > 0 && draw < cfg.jump_prob && cfg.jump_frames > 0 {
            active = Some((cfg.jump_frames, (cfg.jump_magnitude * ang.cos(), cfg.jump_magnitude * ang.sin())));
        }
        match active {
            Some((left, off)) => {
                shift.push(off);
                active = if left > 1 { Some((left - 1, off)) } else { None };
            }
            None => shift.push((0.0, 0.0)),
        }
    }
    let path: Vec<(f64, f64)> = (0..cfg.n_frames)
        .map(|t| (start.0 + tissue[t].0 + shift[t].0, start.1 + tissue[t].1 + shift[t].1))
        .collect();
    let inside = |p: (f64, f64)| {
        p.0 >= EDGE_MARGIN && p.1 >= EDGE_MARGIN && p.0 <= cfg.width as f64 - 1.0 - EDGE_MARGIN && p.1 <= cfg.height as f64 - 1.0 - EDGE_MARGIN
    };
    let anchor = (path[0].0.round(), path[0].1.round());
    for (t, &p) in path.iter().enumerate() {
        if !inside(p) || (p.0 - anchor.0).abs() > MAX_EXCURSION || (p.1 - anchor.1).abs() > MAX_EXCURSION {
            return Err(SynthError::OutOfFrame(t));
        }
    }

    let mut offsets: Vec<(f64, f64)> = Vec::with_capacity(cfg.distractors);
    let mut tries = 0;
    while offsets.len() < cfg.distractors {
        tries += 1;
        if tries > 10_000 {
            return Err(SynthError::Placement(cfg.distractors));
        }
        let r = rng.random_range(cfg.distractor_min_dist..=cfg.distractor_max_dist);
        let a = rng.random_range(0.0..2.0 * PI);
        let o = (r * a.cos(), r * a.sin());
        let far_enough = offsets.iter().all(|q| (q.0 - o.0).hypot(q.1 - o.1) >= 15.0);
        let stays_in = path.iter().all(|p| inside((p.0 + o.0, p.1 + o.1)));
        if far_enough && stays_in {
            offsets.push(o);
        }
    }
    let distractor_sigma: Vec<f64> = offsets
        .iter()
        .map(|_| cfg.blob_sigma * rng.random_range(0.9..1.15))
        .collect();

    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let period = rng.random_range(18.0..60.0);
            let a = rng.random_range(0.0..2.0 * PI);
            Wave {
                kx: 2.0 * PI * a.cos() / period,
                ky: 2.0 * PI * a.sin() / period,
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();

    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        let mut blobs = vec![(path[t], cfg.blob_amplitude, cfg.blob_sigma)];
        for (o, &s) in offsets.iter().zip(&distractor_sigma) {
            let amp = cfg.blob_amplitude * (1.0 + rng.random_range(-cfg.distractor_flicker..=cfg.distractor_flicker));
            blobs.push(((path[t].0 + o.0, path[t].1 + o.1), amp, s));
        }
        let (sx, sy) = shift[t];
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let (bx, by) = (xf - sx, yf - sy);
                let tex: f64 = waves.iter().map(|v| (v.kx * bx + v.ky * by + v.phase).sin()).sum::<f64>() / 3.0;
                let mut v = cfg.background + cfg.texture * tex;
                for &((px, py), amp, s) in &blobs {
                    let d2 = (xf - px).powi(2) + (yf - py).powi(2);
                    if d2 < 36.0 * s * s {
                        v += amp * (-d2 / (2.0 * s * s)).exp();
                    }
                }
                if cfg.speckle > 0.0 {
                    v *= 1.0 - cfg.speckle + cfg.speckle * rayleigh(&mut rng);
                }
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u16);
            }
        }
        frames.push(GrayFrame { width: w, height: h, pixels });
    }

    let points = path
        .iter()
        .enumerate()
        .map(|(frame, &(x, y))| Annotation { frame, x, y })
        .collect();
    Ok(SequenceBundle {
        name: format!("syn_{:04}", cfg.seed),
        frames,
        bit_depth: 8,
        spacing_mm: cfg.spacing_mm,
        hz: cfg.hz,
        source_tag: cfg.source_tag.clone(),
        landmarks: vec![LandmarkTrack {
            id: "1".into(),
            points,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_frames: 20,
            ..Default::default()
        }
    }

    #[test]
    fn static_case_has_constant_path() {
        let cfg = SynthConfig {
            amplitude: 0.0,
            drift: 0.0,
            jump_prob: 0.0,
            ..small()
        };
        let b = synth_sequence(&cfg).unwrap();
        let p = &b.landmarks[0].points;
        assert!(p.iter().all(|a| a.x == p[0].x && a.y == p[0].y));
        b.validate().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_sequence(&small()).unwrap();
        let b = synth_sequence(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn path_extrema_follow_amplitude() {
        let cfg = SynthConfig {
            n_frames: 120,
            center: Some((64.0, 64.0)),
            phase: Some(0.0),
            direction: Some(0.0),
            drift: 0.0,
            jump_prob: 0.0,
            ..Default::default()
        };
        let b = synth_sequence(&cfg).unwrap();
        let xs: Vec<f64> = b.landmarks[0].points.iter().map(|a| a.x).collect();
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        let min = xs.iter().cloned().fold(f64::MAX, f64::min);
        // 60 samples per period: the sampled sinusoid reaches its peaks exactly
        assert!((max - 72.0).abs() < 1e-9, "{max}");
        assert!((min - 56.0).abs() < 1e-9, "{min}");
        let ys = b.landmarks[0].points.iter().map(|a| a.y);
        assert!(ys.into_iter().all(|y| (y - 64.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_escaping_configs() {
        let cfg = SynthConfig {
            center: Some((10.0, 64.0)),
            direction: Some(0.0),
            ..small()
        };
        assert!(matches!(synth_sequence(&cfg), Err(SynthError::OutOfFrame(_))));
        let cfg = SynthConfig {
            jump_prob: 1.5,
            ..small()
        };
        assert!(matches!(synth_sequence(&cfg), Err(SynthError::Config(_))));
    }

    #[test]
    fn landmark_is_the_local_bright_spot_without_noise() {
        let cfg = SynthConfig {
            speckle: 0.0,
            texture: 0.0,
            distractors: 0,
            ..small()
        };
        let b = synth_sequence(&cfg).unwrap();
        for (f, a) in b.frames.iter().zip(&b.landmarks[0].points) {
            let (mx, my) = (0..f.pixels.len())
                .max_by_key(|&i| f.pixels[i])
                .map(|i| ((i % f.width) as f64, (i / f.width) as f64))
                .unwrap();
            assert!((mx - a.x).abs() <= 1.0 && (my - a.y).abs() <= 1.0);
        }
    }
}
