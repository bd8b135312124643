//! On-disk formats: binary voxel grids, atom lists, and atomic file writes.
//!
//! Grid files carry a 16-byte little-endian header
//! `{ magic "VXGR", u16 version, u16 dtype (0 = f32, 1 = u16), 3 × u16 dims, u16 reserved }`
//! followed by the payload with z varying fastest.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxelizer::{DensityGrid, GridSpec, SpeciesGrid};

pub const GRID_MAGIC: [u8; 4] = *b"VXGR";
pub const GRID_VERSION: u16 = 1;
pub const GRID_HEADER_LEN: usize = 16;

#[derive(Error, Debug)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad grid file: {0}")]
    BadGrid(String),
    #[error("bad atom list line {line}: {reason}")]
    BadAtomLine { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum GridDtype {
    F32 = 0,
    U16 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridPayload {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub dims: [u16; 3],
    pub payload: GridPayload,
}

impl GridFile {
    pub fn from_density(grid: &DensityGrid) -> Self {
        let n = grid.spec.side_voxels as u16;
        Self {
            dims: [n; 3],
            payload: GridPayload::F32(grid.values.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_species(grid: &SpeciesGrid) -> Self {
        let n = grid.side_voxels as u16;
        Self { dims: [n; 3], payload: GridPayload::U16(grid.labels.clone()) }
    }

    fn cubic_side(&self) -> Result<usize, FormatError> {
        let [a, b, c] = self.dims;
        if a != b || b != c {
            return Err(FormatError::BadGrid(format!("grid {:?} is not cubic", self.dims)));
        }
        Ok(a as usize)
    }

    /// Interprets an f32 payload as a density grid; `spec` supplies the physical box.
    pub fn into_density(self, spec: GridSpec) -> Result<DensityGrid, FormatError> {
        let side = self.cubic_side()?;
        match self.payload {
            GridPayload::F32(v) => Ok(DensityGrid {
                spec: GridSpec { side_voxels: side, ..spec },
                values: v.into_iter().map(f64::from).collect(),
            }),
            GridPayload::U16(_) => Err(FormatError::BadGrid("expected f32 density payload".into())),
        }
    }

    pub fn into_species(self) -> Result<SpeciesGrid, FormatError> {
        let side = self.cubic_side()?;
        match self.payload {
            GridPayload::U16(labels) => Ok(SpeciesGrid { side_voxels: side, labels }),
            GridPayload::F32(_) => Err(FormatError::BadGrid("expected u16 species payload".into())),
        }
    }

    pub fn dtype(&self) -> GridDtype {
        match self.payload {
            GridPayload::F32(_) => GridDtype::F32,
            GridPayload::U16(_) => GridDtype::U16,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        let mut header = Vec::with_capacity(GRID_HEADER_LEN);
        header.extend_from_slice(&GRID_MAGIC);
        header.extend_from_slice(&GRID_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.dtype() as u16).to_le_bytes());
        for d in self.dims {
            header.extend_from_slice(&d.to_le_bytes());
        }
        header.extend_from_slice(&0u16.to_le_bytes());
        w.write_all(&header)?;
        let mut body = Vec::new();
        match &self.payload {
            GridPayload::F32(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
            GridPayload::U16(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FormatError> {
        let mut header = [0u8; GRID_HEADER_LEN];
        r.read_exact(&mut header)?;
        if header[..4] != GRID_MAGIC {
            return Err(FormatError::BadGrid("missing VXGR magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
        let version = u16_at(4);
        if version != GRID_VERSION {
            return Err(FormatError::BadGrid(format!("unsupported version {version}")));
        }
        let dtype = u16_at(6);
        let dims = [u16_at(8), u16_at(10), u16_at(12)];
        let count = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let payload = match dtype {
            0 => {
                if body.len() != count * 4 {
                    return Err(FormatError::BadGrid("payload length mismatch".into()));
                }
                GridPayload::F32(
                    body.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => {
                if body.len() != count * 2 {
                    return Err(FormatError::BadGrid("payload length mismatch".into()));
                }
                GridPayload::U16(body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
            }
            other => return Err(FormatError::BadGrid(format!("unknown dtype {other}"))),
        };
        Ok(Self { dims, payload })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// One line of an atom list: atomic number, centroid (Å) and supporting voxel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub atomic_number: u32,
    pub position: [f64; 3],
    pub voxel_count: usize,
}

/// Renders atoms as `Z x y z n_voxels` lines.
pub fn atoms_to_text(atoms: &[AtomRecord]) -> String {
    let mut out = String::new();
    for a in atoms {
        out.push_str(&format!(
            "{} {:?} {:?} {:?} {}\n",
            a.atomic_number, a.position[0], a.position[1], a.position[2], a.voxel_count
        ));
    }
    out
}

pub fn atoms_from_text(text: &str) -> Result<Vec<AtomRecord>, FormatError> {
    let mut atoms = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| FormatError::BadAtomLine { line: i + 1, reason: reason.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let z = fields[0].parse().map_err(|_| bad("atomic number"))?;
        let mut position = [0.0; 3];
        for (p, f) in position.iter_mut().zip(&fields[1..4]) {
            *p = f.parse().map_err(|_| bad("coordinate"))?;
        }
        let voxel_count = fields[4].parse().map_err(|_| bad("voxel count"))?;
        atoms.push(AtomRecord { atomic_number: z, position, voxel_count });
    }
    Ok(atoms)
}

pub fn atoms_to_json(atoms: &[AtomRecord]) -> String {
    serde_json::to_string_pretty(atoms).expect("atom list serializes")
}
