//! Note-event representation and quantization.
//!
//! Raw input is a sequence of `(note number, inter-onset interval)` pairs.
//! The engine consumes a coarser form: pitch class (note number mod 12) and
//! a logarithmic IOI bin index. Queries additionally get an offset-minimizing
//! pitch rounding before the mod-12 fold, to absorb a singer's global
//! sharp/flat tendency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw note event: real-valued MIDI note number plus inter-onset interval.
///
/// Note number 69 is A440; fractional values express detuned pitches as
/// produced by a pitch tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawNote {
    pub note_number: f64,
    pub ioi_ms: f64,
}

impl RawNote {
    pub fn new(note_number: f64, ioi_ms: f64) -> Self {
        Self { note_number, ioi_ms }
    }
}

/// A quantized note event: pitch class in `[0, 11]`, rhythm bin in
/// `[0, q-1]`, and the raw IOI retained for join/elaboration aggregation
/// (durations must be summed in the linear domain before re-quantization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizedEvent {
    pub pitch_class: u8,
    pub rhythm_bin: u8,
    pub raw_ioi_ms: f64,
}

/// IOI quantization parameters.
///
/// Bins are centers on a logarithmic scale from `ioi_min_ms` to `ioi_max_ms`.
/// With the defaults (29 bins over 30..3840 ms, a 2^7 span), one tempo
/// doubling is exactly +4 bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationConfig {
    pub q: usize,
    pub ioi_min_ms: f64,
    pub ioi_max_ms: f64,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self { q: 29, ioi_min_ms: 30.0, ioi_max_ms: 3840.0 }
    }
}

impl QuantizationConfig {
    pub fn with_bins(q: usize) -> Self {
        Self { q, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::InvalidParameter(format!("q = {} < 2", self.q)));
        }
        if !(self.ioi_min_ms > 0.0 && self.ioi_min_ms < self.ioi_max_ms) {
            return Err(Error::InvalidParameter(format!(
                "IOI bin range [{}, {}] invalid",
                self.ioi_min_ms, self.ioi_max_ms
            )));
        }
        Ok(())
    }
}

/// Convert a frequency in Hz to a real-valued MIDI note number
/// (equal temperament, 440 Hz = note 69).
pub fn note_number_from_frequency(f_hz: f64) -> f64 {
    69.0 + 12.0 * (f_hz / 440.0).log2()
}

/// Pitch class of a (possibly negative) integer note number; always in `[0, 11]`.
pub fn pitch_class(note_number: i64) -> u8 {
    note_number.rem_euclid(12) as u8
}

/// Candidate offsets tried by [`select_offset`].
pub const OFFSET_CANDIDATES: [f64; 10] =
    [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Mean squared rounding error of `notes` under a pitch offset.
pub fn offset_error(notes: &[f64], offset: f64) -> f64 {
    let sum: f64 = notes
        .iter()
        .map(|&m| {
            let shifted = m + offset;
            let e = shifted - shifted.round();
            e * e
        })
        .sum();
    sum / notes.len() as f64
}

/// Choose the offset in `{0.0, 0.1, ..., 0.9}` minimizing the mean squared
/// rounding error, and round every note number under it. Ties go to the
/// smallest offset.
pub fn select_offset(notes: &[f64]) -> Result<(f64, Vec<i64>)> {
    if notes.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut best_offset = OFFSET_CANDIDATES[0];
    let mut best_err = offset_error(notes, best_offset);
    for &o in &OFFSET_CANDIDATES[1..] {
        let e = offset_error(notes, o);
        if e < best_err {
            best_err = e;
            best_offset = o;
        }
    }
    let rounded = notes.iter().map(|&m| (m + best_offset).round() as i64).collect();
    Ok((best_offset, rounded))
}

/// Quantize an IOI in milliseconds to a logarithmic bin index.
///
/// Values outside the configured range clamp to the extreme bins; queries
/// legitimately contain extreme durations.
pub fn quantize_ioi(ioi_ms: f64, cfg: &QuantizationConfig) -> Result<u8> {
    if !(ioi_ms > 0.0) {
        return Err(Error::NonPositiveIoi(ioi_ms));
    }
    let span = cfg.ioi_max_ms.ln() - cfg.ioi_min_ms.ln();
    let raw = (ioi_ms.ln() - cfg.ioi_min_ms.ln()) / span * (cfg.q - 1) as f64;
    let bin = raw.round().clamp(0.0, (cfg.q - 1) as f64);
    Ok(bin as u8)
}

/// Bin-center IOI for a rhythm bin; inverse of [`quantize_ioi`] at bin centers.
pub fn dequantize_ioi(rhythm_bin: usize, cfg: &QuantizationConfig) -> Result<f64> {
    if rhythm_bin > cfg.q - 1 {
        return Err(Error::BinOutOfRange { bin: rhythm_bin, max: cfg.q - 1 });
    }
    let span = cfg.ioi_max_ms.ln() - cfg.ioi_min_ms.ln();
    Ok((cfg.ioi_min_ms.ln() + rhythm_bin as f64 / (cfg.q - 1) as f64 * span).exp())
}

/// Quantize a query note sequence: offset-minimizing pitch rounding, then
/// pitch class and IOI bin element-wise. Raw IOIs are preserved on the
/// output events.
pub fn quantize_sequence(
    notes: &[RawNote],
    cfg: &QuantizationConfig,
) -> Result<Vec<QuantizedEvent>> {
    let pitches: Vec<f64> = notes.iter().map(|n| n.note_number).collect();
    let (_, rounded) = select_offset(&pitches)?;
    rounded
        .iter()
        .zip(notes)
        .map(|(&p, n)| {
            Ok(QuantizedEvent {
                pitch_class: pitch_class(p),
                rhythm_bin: quantize_ioi(n.ioi_ms, cfg)?,
                raw_ioi_ms: n.ioi_ms,
            })
        })
        .collect()
}

/// Quantize a target note sequence. Targets are symbolic MIDI, so no offset
/// search is applied; note numbers are rounded directly.
pub fn quantize_target_sequence(
    notes: &[RawNote],
    cfg: &QuantizationConfig,
) -> Result<Vec<QuantizedEvent>> {
    if notes.is_empty() {
        return Err(Error::EmptySequence);
    }
    notes
        .iter()
        .map(|n| {
            Ok(QuantizedEvent {
                pitch_class: pitch_class(n.note_number.round() as i64),
                rhythm_bin: quantize_ioi(n.ioi_ms, cfg)?,
                raw_ioi_ms: n.ioi_ms,
            })
        })
        .collect()
}
