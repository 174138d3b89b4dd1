//! Per-frame choice among scored candidates, trading detection confidence
//! against distance to the previous landmark position.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("no candidates: track lost")]
    TrackLost,
    #[error("trade-off {0} outside [0, 1]")]
    BadTradeoff(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub tradeoff_gamma: f64,
    /// Pick the minimum of the combined score instead of the maximum.
    pub literal_argmin: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tradeoff_gamma: 0.5,
            literal_argmin: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if (0.0..=1.0).contains(&self.tradeoff_gamma) {
            Ok(())
        } else {
            Err(SelectError::BadTradeoff(self.tradeoff_gamma))
        }
    }
}

/// `1 / (1 + e^d)`, written to stay finite for large `d`.
pub fn distance_term(d: f64) -> f64 {
    if d > 700.0 {
        0.0
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// `γ·S + (1 − γ)·1/(1 + e^{‖x − prev‖})`.
pub fn combined_score(pos: (f64, f64), score: f64, prev: (f64, f64), gamma: f64) -> f64 {
    gamma * score + (1.0 - gamma) * distance_term(distance(pos, prev))
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Index of the chosen candidate. Ties go to the candidate nearer `prev`,
/// then to the earlier one.
pub fn select_index(cands: &[((f64, f64), f64)], prev: (f64, f64), cfg: &SelectionConfig) -> Result<usize, SelectError> {
    cfg.validate()?;
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, &(pos, s)) in cands.iter().enumerate() {
        let raw = combined_score(pos, s, prev, cfg.tradeoff_gamma);
        let key = if cfg.literal_argmin { -raw } else { raw };
        let d = distance(pos, prev);
        let better = match best {
            None => true,
            Some((_, bk, bd)) => key > bk || (key == bk && d < bd),
        };
        if better {
            best = Some((i, key, d));
        }
    }
    best.map(|b| b.0).ok_or(SelectError::TrackLost)
}

pub fn select(cands: &[((f64, f64), f64)], prev: (f64, f64), cfg: &SelectionConfig) -> Result<(f64, f64), SelectError> {
    select_index(cands, prev, cfg).map(|i| cands[i].0)
}
