//! On-disk formats: RWF1 float fields, labels JSON, and binary PGM.
//!
//! RWF1 layout (all little-endian):
//!
//! ```text
//! "RWF1" | width u32 | height u32 | channels u32 | width*height*channels f32
//! ```
//!
//! Data is row-major with the channel index fastest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rwprop_core::{GridLattice, SparseLabels};
use serde::{Deserialize, Serialize};

pub const FIELD_MAGIC: &[u8; 4] = b"RWF1";
const HEADER_LEN: usize = 16;

/// Largest class count a MAP labeling can carry as PGM gray levels.
pub const MAX_CLASSES: usize = 255;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an RWF1 field (bad magic)")]
    BadMagic,
    #[error("field data is {got} bytes, header implies {expected}")]
    Length { expected: usize, got: usize },
    #[error("invalid labels JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("invalid PGM: {0}")]
    Pgm(String),
}

impl FormatError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl FieldFile {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self, FormatError> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(FormatError::Length {
                expected: expected * 4,
                got: data.len() * 4,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Narrows each value to `f32`.
    pub fn from_f64(width: u32, height: u32, channels: u32, data: &[f64]) -> Result<Self, FormatError> {
        Self::new(width, height, channels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FIELD_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            return Err(if bytes.len() >= 4 && &bytes[..4] != FIELD_MAGIC {
                FormatError::BadMagic
            } else {
                FormatError::Length {
                    expected: HEADER_LEN,
                    got: bytes.len(),
                }
            });
        }
        if &bytes[..4] != FIELD_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let (width, height, channels) = (word(1), word(2), word(3));
        let expected = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(channels as usize))
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::Length {
                expected: usize::MAX,
                got: bytes.len() - HEADER_LEN,
            })?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(FormatError::Length {
                expected,
                got: body.len(),
            });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, &self.to_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub x: i64,
    pub y: i64,
    pub class: i64,
}

/// Sparse labels on a lattice as exchanged in JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelsFile {
    pub width: i64,
    pub height: i64,
    pub num_classes: i64,
    pub entries: Vec<LabelEntry>,
}

impl LabelsFile {
    pub fn from_json(text: &str) -> Result<Self, FormatError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("labels serialize")
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| FormatError::invalid(path.display().to_string(), "not UTF-8"))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn lattice(&self) -> Result<GridLattice, FormatError> {
        let dim = |name: &str, v: i64| {
            usize::try_from(v)
                .ok()
                .filter(|v| *v >= 1 && *v <= u32::MAX as usize)
                .ok_or_else(|| FormatError::invalid(name, format!("must be a positive 32-bit size, got {v}")))
        };
        let (w, h) = (dim("width", self.width)?, dim("height", self.height)?);
        if w.checked_mul(h).is_none() {
            return Err(FormatError::invalid("width", "lattice too large"));
        }
        GridLattice::new(w, h).map_err(|e| FormatError::invalid("width", e.to_string()))
    }

    /// Validates every entry against the lattice and class count.
    pub fn to_labels(&self) -> Result<(GridLattice, SparseLabels), FormatError> {
        let lattice = self.lattice()?;
        let k = usize::try_from(self.num_classes)
            .ok()
            .filter(|k| (1..=MAX_CLASSES).contains(k))
            .ok_or_else(|| {
                FormatError::invalid("numClasses", format!("must be in 1..={MAX_CLASSES}, got {}", self.num_classes))
            })?;
        let (w, h) = (lattice.width() as i64, lattice.height() as i64);
        let mut seen: HashMap<usize, usize> = HashMap::with_capacity(self.entries.len());
        let mut pairs = Vec::with_capacity(self.entries.len());
        for (n, e) in self.entries.iter().enumerate() {
            let field = format!("entries[{n}]");
            if e.x < 0 || e.x >= w || e.y < 0 || e.y >= h {
                return Err(FormatError::invalid(
                    field,
                    format!("pixel ({}, {}) outside {w}x{h} lattice", e.x, e.y),
                ));
            }
            if e.class < 0 || e.class >= k as i64 {
                return Err(FormatError::invalid(
                    field,
                    format!("class {} outside 0..{k}", e.class),
                ));
            }
            let pixel = (e.y * w + e.x) as usize;
            if let Some(first) = seen.insert(pixel, n) {
                return Err(FormatError::invalid(
                    field,
                    format!("duplicate pixel ({}, {}), first given in entries[{first}]", e.x, e.y),
                ));
            }
            pairs.push((pixel, e.class as usize));
        }
        let labels = SparseLabels::new(k, pairs).map_err(|e| FormatError::invalid("entries", e.to_string()))?;
        Ok((lattice, labels))
    }

    pub fn from_labels(lattice: &GridLattice, labels: &SparseLabels) -> Self {
        let w = lattice.width();
        Self {
            width: w as i64,
            height: lattice.height() as i64,
            num_classes: labels.num_classes() as i64,
            entries: labels
                .entries()
                .iter()
                .map(|&(p, c)| LabelEntry {
                    x: (p % w) as i64,
                    y: (p / w) as i64,
                    class: c as i64,
                })
                .collect(),
        }
    }
}

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses binary PGM with maxval up to 255; comments are allowed in the
    /// header.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut pos = 0;
        let mut token = || -> Result<String, FormatError> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(FormatError::Pgm("truncated header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(FormatError::Pgm("expected P5 magic".into()));
        }
        let mut num = |what: &str| -> Result<usize, FormatError> {
            token()?
                .parse()
                .map_err(|_| FormatError::Pgm(format!("bad {what}")))
        };
        let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval == 0 || maxval > 255 {
            return Err(FormatError::Pgm(format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let data = &bytes[(pos + 1).min(bytes.len())..];
        let n = width * height;
        if data.len() != n {
            return Err(FormatError::Pgm(format!("raster is {} bytes, expected {n}", data.len())));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::from_pgm(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, &self.to_pgm())
    }
}
