//! File formats and atomic I/O helpers.
//!
//! All interchange formats are JSON. Writes go to a temporary file in the
//! destination directory followed by an atomic rename, so a failed command
//! never leaves partial output behind.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{self, QuantizationConfig, QuantizedEvent, RawNote};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    write_bytes_atomic(path, &json)
}

pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_bytes_atomic(path, text.as_bytes())
}

fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// One entry of a note file. Queries carry real-valued `note` numbers from
/// a pitch tracker; targets are symbolic and may use integer `pitch`
/// instead. Both forms are accepted everywhere.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoteFileEntry {
    Tracked { note: f64, ioi_ms: f64 },
    Symbolic { pitch: i64, ioi_ms: f64 },
}

impl NoteFileEntry {
    pub fn to_raw(self) -> RawNote {
        match self {
            NoteFileEntry::Tracked { note, ioi_ms } => RawNote::new(note, ioi_ms),
            NoteFileEntry::Symbolic { pitch, ioi_ms } => RawNote::new(pitch as f64, ioi_ms),
        }
    }
}

pub fn load_raw_notes(path: &Path) -> Result<Vec<RawNote>> {
    let entries: Vec<NoteFileEntry> = read_json(path)?;
    Ok(entries.into_iter().map(NoteFileEntry::to_raw).collect())
}

/// Load and quantize a query note file (offset search applied).
pub fn load_query_events(path: &Path, cfg: &QuantizationConfig) -> Result<Vec<QuantizedEvent>> {
    let notes = load_raw_notes(path)?;
    events::quantize_sequence(&notes, cfg)
}

/// Load and quantize a target note file (no offset search; targets are
/// symbolic).
pub fn load_target_events(path: &Path, cfg: &QuantizationConfig) -> Result<Vec<QuantizedEvent>> {
    let notes = load_raw_notes(path)?;
    events::quantize_target_sequence(&notes, cfg)
}

pub fn save_notes(path: &Path, notes: &[RawNote]) -> Result<()> {
    let entries: Vec<NoteFileEntry> = notes
        .iter()
        .map(|n| NoteFileEntry::Tracked { note: n.note_number, ioi_ms: n.ioi_ms })
        .collect();
    write_json_atomic(path, &entries)
}

/// A target database file: a JSON array of note-event arrays.
pub fn load_database(path: &Path, cfg: &QuantizationConfig) -> Result<Vec<Vec<QuantizedEvent>>> {
    let raw: Vec<Vec<NoteFileEntry>> = read_json(path)?;
    raw.into_iter()
        .map(|target| {
            let notes: Vec<RawNote> = target.into_iter().map(NoteFileEntry::to_raw).collect();
            events::quantize_target_sequence(&notes, cfg)
        })
        .collect()
}

pub fn save_database(path: &Path, targets: &[Vec<RawNote>]) -> Result<()> {
    let out: Vec<Vec<NoteFileEntry>> = targets
        .iter()
        .map(|t| {
            t.iter()
                .map(|n| NoteFileEntry::Symbolic {
                    pitch: n.note_number.round() as i64,
                    ioi_ms: n.ioi_ms,
                })
                .collect()
        })
        .collect();
    write_json_atomic(path, &out)
}

fn default_start_index() -> usize {
    1
}

/// One training example: a target file, a query file, and the 1-based
/// target position the query is known to start at.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub target: String,
    pub query: String,
    #[serde(default = "default_start_index")]
    pub start_index: usize,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_json(path)
}
