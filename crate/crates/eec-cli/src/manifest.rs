//! Mask manifests: newline-delimited text, one record per line:
//!
//! ```text
//! frame_id view mask_path image_w image_h
//! ```
//!
//! `view` is `ego` or `exo`, paths are resolved relative to the manifest's
//! directory, and frame ids must be strictly increasing within each view.
//! Blank lines and lines starting with `#` are skipped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use eec_core::memory::View;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub frame_id: u32,
    pub view: View,
    /// Already resolved against the manifest's directory.
    pub mask_path: PathBuf,
    pub image_w: usize,
    pub image_h: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub enum ManifestError {
    Io(std::io::Error),
    Parse { line: usize, detail: &'static str },
    NonMonotonic { line: usize, view: &'static str },
}

impl fmt::Display for ManifestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestError::Io(e) => write!(f, "io error: {e}"),
            ManifestError::Parse { line, detail } => write!(f, "line {line}: {detail}"),
            ManifestError::NonMonotonic { line, view } => {
                write!(f, "line {line}: frame ids must be strictly increasing per view ({view})")
            }
        }
    }
}

impl std::error::Error for ManifestError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ManifestError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for ManifestError {
    fn from(e: std::io::Error) -> Self {
        ManifestError::Io(e)
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest, ManifestError> {
    let mut entries = Vec::new();
    let mut last_ego: Option<u32> = None;
    let mut last_exo: Option<u32> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let frame_id: u32 = fields
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(ManifestError::Parse { line: line_no, detail: "expected numeric frame id" })?;
        let view = match fields.next() {
            Some("ego") => View::Ego,
            Some("exo") => View::Exo,
            _ => {
                return Err(ManifestError::Parse {
                    line: line_no,
                    detail: "view must be `ego` or `exo`",
                })
            }
        };
        let mask_path = fields
            .next()
            .map(|t| base.join(t))
            .ok_or(ManifestError::Parse { line: line_no, detail: "expected mask path" })?;
        let image_w: usize = fields
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(ManifestError::Parse { line: line_no, detail: "expected image width" })?;
        let image_h: usize = fields
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(ManifestError::Parse { line: line_no, detail: "expected image height" })?;
        if fields.next().is_some() {
            return Err(ManifestError::Parse { line: line_no, detail: "unexpected trailing fields" });
        }
        let last = match view {
            View::Ego => &mut last_ego,
            View::Exo => &mut last_exo,
        };
        if let Some(prev) = *last {
            if frame_id <= prev {
                return Err(ManifestError::NonMonotonic {
                    line: line_no,
                    view: if view == View::Ego { "ego" } else { "exo" },
                });
            }
        }
        *last = Some(frame_id);
        entries.push(ManifestEntry { frame_id, view, mask_path, image_w, image_h });
    }
    Ok(Manifest { entries })
}

pub fn read_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let base = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    parse_manifest(&fs::read_to_string(path)?, &base)
}
