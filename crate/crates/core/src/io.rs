//! On-disk formats: the `MRCF` binary descriptor container and the
//! correspondence JSON. Every write goes to a temporary file in the target
//! directory and is renamed into place.
//!
//! `MRCF` layout (little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `MRCF`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 4    | height in cells                         |
//! | 10     | 4    | width in cells                          |
//! | 14     | 4    | descriptor dim                          |
//! | 18     | 4    | stride in pixels (f32)                  |
//! | 22     | 2    | flags: bit0 normalized, bit1 mask block |
//! | 24     | ...  | f32 descriptors, row-major              |
//!
//! followed by `height × width` mask bytes (0/1) when bit1 is set.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BBox, CellMask, FeatureGrid, PixelPoint};
use crate::matching::{Correspondence, CorrespondenceSet, Provenance};

pub const MAGIC: [u8; 4] = *b"MRCF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const FLAG_NORMALIZED: u16 = 1;
pub const FLAG_MASK: u16 = 1 << 1;

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// A descriptor grid as stored on disk, with its optional cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub grid: FeatureGrid<f32>,
    pub mask: Option<CellMask>,
}

pub fn encode_feature_file(grid: &FeatureGrid<f32>, mask: Option<&CellMask>) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
    };
    let (h, w, dim) = (
        narrow(grid.height(), "height")?,
        narrow(grid.width(), "width")?,
        narrow(grid.dim(), "dim")?,
    );
    if let Some(m) = mask {
        if m.height != grid.height() || m.width != grid.width() {
            return Err(Error::invalid(format!(
                "mask is {}x{} but grid is {}x{}",
                m.height, m.width, h, w
            )));
        }
    }
    let mut flags = 0u16;
    if grid.is_normalized() {
        flags |= FLAG_NORMALIZED;
    }
    if mask.is_some() {
        flags |= FLAG_MASK;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4 + mask.map_or(0, |m| m.cells.len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(grid.stride_px() as f32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = mask {
        out.extend(m.cells.iter().map(|&c| u8::from(c != 0)));
    }
    Ok(out)
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_feature_file(bytes: &[u8]) -> Result<FeatureFile> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (h, w, dim) = (u32_at(bytes, 6), u32_at(bytes, 10), u32_at(bytes, 14));
    let stride = f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes"));
    let flags = u16_at(bytes, 22);
    if h < 2 {
        return Err(format_err(6, format!("height {h} must be at least 2")));
    }
    if w < 2 {
        return Err(format_err(10, format!("width {w} must be at least 2")));
    }
    if dim == 0 {
        return Err(format_err(14, "dim must be positive"));
    }
    if !(stride.is_finite() && stride > 0.0) {
        return Err(format_err(18, format!("stride {stride} must be positive and finite")));
    }
    if flags & !(FLAG_NORMALIZED | FLAG_MASK) != 0 {
        return Err(format_err(22, format!("unknown flag bits {flags:#06x}")));
    }
    let overflow = || Error::DimOverflow {
        height: h,
        width: w,
        dim,
    };
    let cells = (h as u64).checked_mul(w as u64).ok_or_else(overflow)?;
    let payload = cells
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= isize::MAX as u64 / 2)
        .ok_or_else(overflow)?;
    let has_mask = flags & FLAG_MASK != 0;
    let expected = HEADER_LEN as u64 + payload + if has_mask { cells } else { 0 };
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(format_err(expected as usize, format!("{} trailing bytes", actual - expected)));
    }
    let payload_end = HEADER_LEN + payload as usize;
    let mut data = Vec::with_capacity(payload as usize / 4);
    for (i, chunk) in bytes[HEADER_LEN..payload_end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format_err(HEADER_LEN + 4 * i, "non-finite descriptor value"));
        }
        data.push(v);
    }
    let (hu, wu) = (h as usize, w as usize);
    let grid = FeatureGrid::new(hu, wu, dim as usize, stride as f64, data)?
        .with_normalized_flag(flags & FLAG_NORMALIZED != 0);
    let mask = if has_mask {
        let raw = &bytes[payload_end..];
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(format_err(payload_end + i, format!("mask byte {} is not 0 or 1", raw[i])));
        }
        Some(CellMask::new(hu, wu, raw.to_vec())?)
    } else {
        None
    };
    Ok(FeatureFile { grid, mask })
}

pub fn write_feature_file(path: &Path, grid: &FeatureGrid<f32>, mask: Option<&CellMask>) -> Result<()> {
    write_atomic(path, &encode_feature_file(grid, mask)?)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub src: String,
    pub tgt: String,
    /// `[height, width]` in pixels.
    pub src_hw: [f64; 2],
    pub tgt_hw: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPair {
    pub src: BBox,
    pub tgt: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
    pub provenance: Provenance,
}

impl PairRecord {
    pub fn correspondence(&self) -> Correspondence {
        Correspondence::new(
            PixelPoint::new(self.sx, self.sy),
            PixelPoint::new(self.tx, self.ty),
            self.provenance,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub seen: Vec<u32>,
    #[serde(default)]
    pub unseen: Vec<u32>,
}

/// Keypoint annotations or mined pseudo-labels for one image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceFile {
    pub image_pair: ImagePair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxPair>,
    pub pairs: Vec<PairRecord>,
    #[serde(default)]
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<serde_json::Value>,
}

impl CorrespondenceFile {
    pub fn new(image_pair: ImagePair, set: &CorrespondenceSet) -> Self {
        Self {
            image_pair,
            bbox: None,
            pairs: set
                .iter()
                .map(|c| PairRecord {
                    id: None,
                    sx: c.src.x,
                    sy: c.src.y,
                    tx: c.tgt.x,
                    ty: c.tgt.y,
                    provenance: c.provenance,
                })
                .collect(),
            splits: Splits::default(),
            diagnostics: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Annotation(m));
        let [sh, sw] = self.image_pair.src_hw;
        let [th, tw] = self.image_pair.tgt_hw;
        if !([sh, sw, th, tw].iter().all(|v| v.is_finite() && *v > 0.0)) {
            return bad("image sizes must be positive".into());
        }
        if let Some(b) = &self.bbox {
            for bx in [&b.src, &b.tgt] {
                BBox::new(bx.min_x, bx.min_y, bx.max_x, bx.max_y).map_err(|e| Error::Annotation(e.to_string()))?;
            }
        }
        let mut ids = HashSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            let in_img = |x: f64, y: f64, h: f64, w: f64| x.is_finite() && y.is_finite() && (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
            if !in_img(p.sx, p.sy, sh, sw) {
                return bad(format!("pair {i}: source ({}, {}) outside the source image", p.sx, p.sy));
            }
            if !in_img(p.tx, p.ty, th, tw) {
                return bad(format!("pair {i}: target ({}, {}) outside the target image", p.tx, p.ty));
            }
            if let Some(id) = p.id {
                if !ids.insert(id) {
                    return bad(format!("duplicate pair id {id}"));
                }
            }
        }
        let seen: HashSet<u32> = self.splits.seen.iter().copied().collect();
        for id in self.splits.seen.iter().chain(&self.splits.unseen) {
            if !ids.contains(id) {
                return bad(format!("split references unknown pair id {id}"));
            }
        }
        if let Some(id) = self.splits.unseen.iter().find(|id| seen.contains(id)) {
            return bad(format!("pair id {id} is in both seen and unseen splits"));
        }
        Ok(())
    }

    /// All pairs as a set, in file order.
    pub fn correspondences(&self) -> Result<CorrespondenceSet> {
        CorrespondenceSet::from_pairs(self.pairs.iter().map(PairRecord::correspondence))
    }

    /// Annotated pairs in a split, in file order.
    pub fn split_pairs(&self, unseen: bool) -> Result<CorrespondenceSet> {
        let ids = if unseen { &self.splits.unseen } else { &self.splits.seen };
        let ids: HashSet<u32> = ids.iter().copied().collect();
        CorrespondenceSet::from_pairs(
            self.pairs
                .iter()
                .filter(|p| p.id.is_some_and(|id| ids.contains(&id)))
                .map(PairRecord::correspondence),
        )
    }

    /// Annotated pairs used as supervision: the seen split when one is
    /// given, otherwise every pair with annotated provenance.
    pub fn supervision(&self) -> Result<CorrespondenceSet> {
        if !self.splits.seen.is_empty() {
            return self.split_pairs(false);
        }
        CorrespondenceSet::from_pairs(
            self.pairs
                .iter()
                .filter(|p| p.provenance == Provenance::Annotated)
                .map(PairRecord::correspondence),
        )
    }
}

pub fn correspondence_to_string(file: &CorrespondenceFile) -> Result<String> {
    file.validate()?;
    let mut s = serde_json::to_string_pretty(file)?;
    s.push('\n');
    Ok(s)
}

pub fn write_correspondence_file(path: &Path, file: &CorrespondenceFile) -> Result<()> {
    write_atomic(path, correspondence_to_string(file)?.as_bytes())
}

pub fn read_correspondence_file(path: &Path) -> Result<CorrespondenceFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CorrespondenceFile = serde_json::from_str(&text)?;
    file.validate()?;
    Ok(file)
}
