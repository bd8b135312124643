//! Crystal-file ingestion: a P1 CIF subset parser and dataset manifests.
//!
//! Supported CIF content is deliberately narrow: the six `_cell_*` parameters, an
//! optional space-group name, an optional symmetry-operation loop (identity only)
//! and an `_atom_site_*` loop carrying a symbol or label plus fractional coordinates.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements;

/// Manifest schema version written to disk.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum IngestError {
    #[error("malformed crystal file: {0}")]
    MalformedFile(String),
    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),
    #[error("non-P1 symmetry present ({0}); sites must be pre-expanded")]
    NonP1Symmetry(String),
    #[error("dataset is empty after filtering")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Lattice parameters: lengths in angstrom, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl CellParams {
    pub fn max_side(&self) -> f64 {
        self.a.max(self.b).max(self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub symbol: String,
    pub atomic_number: u32,
    /// Raw fractional coordinates as written in the file (not yet wrapped).
    pub frac: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalFile {
    pub id: String,
    pub cell: CellParams,
    pub sites: Vec<SiteRecord>,
}

impl CrystalFile {
    /// Writes the file back out in the same CIF subset [`parse_crystal_file`] reads.
    pub fn to_cif(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "data_{}", self.id);
        let c = &self.cell;
        let _ = writeln!(out, "_symmetry_space_group_name_H-M   'P 1'");
        let _ = writeln!(out, "_cell_length_a   {:?}", c.a);
        let _ = writeln!(out, "_cell_length_b   {:?}", c.b);
        let _ = writeln!(out, "_cell_length_c   {:?}", c.c);
        let _ = writeln!(out, "_cell_angle_alpha   {:?}", c.alpha);
        let _ = writeln!(out, "_cell_angle_beta   {:?}", c.beta);
        let _ = writeln!(out, "_cell_angle_gamma   {:?}", c.gamma);
        out.push_str("loop_\n _symmetry_equiv_pos_site_id\n _symmetry_equiv_pos_as_xyz\n  1  'x, y, z'\n");
        out.push_str("loop_\n _atom_site_type_symbol\n _atom_site_label\n _atom_site_fract_x\n _atom_site_fract_y\n _atom_site_fract_z\n");
        for (i, s) in self.sites.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {}  {}{}  {:?}  {:?}  {:?}",
                s.symbol, s.symbol, i, s.frac[0], s.frac[1], s.frac[2]
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Loop {
    tags: Vec<String>,
    values: Vec<String>,
}

impl Loop {
    fn column(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t.eq_ignore_ascii_case(tag))
    }

    fn rows(&self) -> impl Iterator<Item = &[String]> {
        self.values.chunks(self.tags.len().max(1))
    }
}

/// Splits a CIF line into whitespace-separated tokens, honoring single and double quotes.
fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&ch) = chars.peek() {
        if ch.is_whitespace() {
            chars.next();
            continue;
        }
        if ch == '#' {
            break;
        }
        if ch == '\'' || ch == '"' {
            chars.next();
            let mut tok = String::new();
            while let Some(c) = chars.next() {
                if c == ch && chars.peek().is_none_or(|n| n.is_whitespace()) {
                    break;
                }
                tok.push(c);
            }
            tokens.push(tok);
        } else {
            let mut tok = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
            tokens.push(tok);
        }
    }
    tokens
}

/// Parses a CIF numeric value, dropping a trailing standard uncertainty such as `4.02(3)`.
fn parse_number(tag: &str, raw: &str) -> Result<f64, IngestError> {
    let trimmed = raw.split('(').next().unwrap_or(raw);
    let value: f64 = trimmed
        .parse()
        .map_err(|_| IngestError::MalformedFile(format!("bad number {raw:?} for {tag}")))?;
    if !value.is_finite() {
        return Err(IngestError::MalformedFile(format!("non-finite value for {tag}")));
    }
    Ok(value)
}

/// Extracts the element part of a type symbol or label, e.g. `Fe2+` -> `Fe`, `O12` -> `O`.
fn element_from_token(token: &str) -> Result<(String, u32), IngestError> {
    let mut chars = token.chars();
    let first = chars
        .next()
        .filter(|c| c.is_ascii_alphabetic())
        .ok_or_else(|| IngestError::UnknownElement(token.to_string()))?;
    let mut symbol = first.to_ascii_uppercase().to_string();
    if let Some(second) = chars.next().filter(|c| c.is_ascii_lowercase()) {
        let two = format!("{symbol}{second}");
        if elements::atomic_number(&two).is_some() {
            symbol = two;
        } else if token.chars().all(|c| c.is_ascii_alphabetic()) {
            // A purely alphabetic two-letter token that is not an element is not a label.
            return Err(IngestError::UnknownElement(token.to_string()));
        }
    }
    let z = elements::atomic_number(&symbol)
        .ok_or_else(|| IngestError::UnknownElement(token.to_string()))?;
    Ok((symbol, z))
}

fn is_identity_op(op: &str) -> bool {
    let normalized: String = op
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_ascii_lowercase();
    normalized == "x,y,z" || normalized == "+x,+y,+z"
}

/// Parses the CIF subset into a [`CrystalFile`].
pub fn parse_crystal_file(text: &str) -> Result<CrystalFile, IngestError> {
    let mut id = String::new();
    let mut scalars: Vec<(String, String)> = Vec::new();
    let mut loops: Vec<Loop> = Vec::new();

    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        i += 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix("data_") {
            if !id.is_empty() {
                return Err(IngestError::MalformedFile("multiple data blocks".into()));
            }
            id = name.trim().to_string();
            continue;
        }
        if line.eq_ignore_ascii_case("loop_") {
            let mut lp = Loop { tags: Vec::new(), values: Vec::new() };
            while i < lines.len() && lines[i].trim().starts_with('_') {
                lp.tags.push(lines[i].trim().to_string());
                i += 1;
            }
            while i < lines.len() {
                let body = lines[i].trim();
                if body.starts_with('_')
                    || body.eq_ignore_ascii_case("loop_")
                    || body.starts_with("data_")
                {
                    break;
                }
                lp.values.extend(tokenize(body));
                i += 1;
            }
            if lp.tags.is_empty() || lp.values.len() % lp.tags.len() != 0 {
                return Err(IngestError::MalformedFile(
                    "loop value count does not match its tag count".into(),
                ));
            }
            loops.push(lp);
            continue;
        }
        if line.starts_with('_') {
            let mut tokens = tokenize(line);
            let tag = tokens.remove(0);
            let value = if tokens.is_empty() {
                // Value on the following line.
                let next = lines.get(i).map(|l| tokenize(l)).unwrap_or_default();
                i += 1;
                next.into_iter().next().unwrap_or_default()
            } else {
                tokens.join(" ")
            };
            scalars.push((tag, value));
        }
    }

    let scalar = |tag: &str| {
        scalars
            .iter()
            .find(|(t, _)| t.eq_ignore_ascii_case(tag))
            .map(|(_, v)| v.as_str())
    };

    for tag in ["_symmetry_space_group_name_H-M", "_space_group_name_H-M_alt"] {
        if let Some(hm) = scalar(tag) {
            let compact: String = hm.chars().filter(|c| !c.is_whitespace()).collect();
            if !compact.eq_ignore_ascii_case("P1") {
                return Err(IngestError::NonP1Symmetry(format!("space group {hm}")));
            }
        }
    }
    for lp in &loops {
        let col = lp
            .column("_symmetry_equiv_pos_as_xyz")
            .or_else(|| lp.column("_space_group_symop_operation_xyz"));
        if let Some(col) = col {
            for row in lp.rows() {
                if !is_identity_op(&row[col]) {
                    return Err(IngestError::NonP1Symmetry(format!("operation {:?}", row[col])));
                }
            }
        }
    }

    let cell_value = |tag: &str| -> Result<f64, IngestError> {
        let raw = scalar(tag)
            .ok_or_else(|| IngestError::MalformedFile(format!("missing {tag}")))?;
        parse_number(tag, raw)
    };
    let cell = CellParams {
        a: cell_value("_cell_length_a")?,
        b: cell_value("_cell_length_b")?,
        c: cell_value("_cell_length_c")?,
        alpha: cell_value("_cell_angle_alpha")?,
        beta: cell_value("_cell_angle_beta")?,
        gamma: cell_value("_cell_angle_gamma")?,
    };
    if cell.a <= 0.0 || cell.b <= 0.0 || cell.c <= 0.0 {
        return Err(IngestError::MalformedFile("cell lengths must be positive".into()));
    }
    for angle in [cell.alpha, cell.beta, cell.gamma] {
        if angle <= 0.0 || angle >= 180.0 {
            return Err(IngestError::MalformedFile(format!(
                "cell angle {angle} outside (0, 180)"
            )));
        }
    }

    let atom_loop = loops
        .iter()
        .find(|lp| lp.column("_atom_site_fract_x").is_some())
        .ok_or_else(|| IngestError::MalformedFile("missing _atom_site fractional loop".into()))?;
    let coord_cols = ["_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"]
        .map(|t| atom_loop.column(t));
    let [Some(cx), Some(cy), Some(cz)] = coord_cols else {
        return Err(IngestError::MalformedFile("incomplete fractional coordinates".into()));
    };
    let symbol_col = atom_loop
        .column("_atom_site_type_symbol")
        .or_else(|| atom_loop.column("_atom_site_label"))
        .ok_or_else(|| IngestError::MalformedFile("atom sites carry no symbol or label".into()))?;

    let mut sites = Vec::new();
    for row in atom_loop.rows() {
        let (symbol, atomic_number) = element_from_token(&row[symbol_col])?;
        let frac = [
            parse_number("_atom_site_fract_x", &row[cx])?,
            parse_number("_atom_site_fract_y", &row[cy])?,
            parse_number("_atom_site_fract_z", &row[cz])?,
        ];
        sites.push(SiteRecord { symbol, atomic_number, frac });
    }
    if sites.is_empty() {
        return Err(IngestError::MalformedFile("no atom sites".into()));
    }

    Ok(CrystalFile { id, cell, sites })
}

/// Retains the files whose longest side is strictly below `max_side_angstrom`.
pub fn filter_by_size(files: &[CrystalFile], max_side_angstrom: f64) -> Vec<CrystalFile> {
    files
        .iter()
        .filter(|f| f.cell.max_side() < max_side_angstrom)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    SingleCell,
    RepeatedLattice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub id: String,
    pub split: Split,
    /// Augmentation seeds. For `RepeatedLattice`, seed 0 denotes the unshifted lattice.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub representation: Representation,
    pub train_fraction: f64,
    pub seed: u64,
    pub rotations_per_cell: usize,
    pub offsets_per_cell: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let manifest: DatasetManifest = serde_json::from_str(text)
            .map_err(|e| IngestError::MalformedFile(format!("manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(IngestError::MalformedFile(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub train_fraction: f64,
    pub seed: u64,
    pub representation: Representation,
    pub rotations_per_cell: usize,
    pub offsets_per_cell: usize,
    pub max_side: f64,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            representation: Representation::SingleCell,
            rotations_per_cell: 3,
            offsets_per_cell: 2,
            max_side: 10.0,
        }
    }
}

/// Builds a deterministic train/test manifest over `(path, file)` pairs.
///
/// Cells with any side at or above `opts.max_side` are dropped before splitting.
pub fn build_manifest(
    files: &[(String, CrystalFile)],
    opts: &ManifestOptions,
) -> Result<DatasetManifest, IngestError> {
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return Err(IngestError::InvalidArgument(format!(
            "train_fraction {} outside (0, 1)",
            opts.train_fraction
        )));
    }
    if opts.rotations_per_cell == 0 {
        return Err(IngestError::InvalidArgument("rotations_per_cell must be >= 1".into()));
    }
    let kept: Vec<&(String, CrystalFile)> = files
        .iter()
        .filter(|(_, f)| f.cell.max_side() < opts.max_side)
        .collect();
    if kept.is_empty() {
        return Err(IngestError::EmptyDataset);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((opts.train_fraction * kept.len() as f64).round() as usize).min(kept.len());
    let mut is_train = vec![false; kept.len()];
    for &idx in &order[..n_train] {
        is_train[idx] = true;
    }

    let per_cell = match opts.representation {
        Representation::SingleCell => opts.rotations_per_cell,
        Representation::RepeatedLattice => 1 + opts.offsets_per_cell,
    };
    let mut used = HashSet::new();
    used.insert(0u64);
    let entries = kept
        .iter()
        .enumerate()
        .map(|(i, (path, file))| {
            let mut seeds = Vec::with_capacity(per_cell);
            if opts.representation == Representation::RepeatedLattice {
                seeds.push(0);
            }
            while seeds.len() < per_cell {
                let s: u64 = rng.random();
                if used.insert(s) {
                    seeds.push(s);
                }
            }
            ManifestEntry {
                path: path.clone(),
                id: file.id.clone(),
                split: if is_train[i] { Split::Train } else { Split::Test },
                seeds,
            }
        })
        .collect();

    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        representation: opts.representation,
        train_fraction: opts.train_fraction,
        seed: opts.seed,
        rotations_per_cell: opts.rotations_per_cell,
        offsets_per_cell: opts.offsets_per_cell,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NACL: &str = "data_NaCl
_symmetry_space_group_name_H-M   'P 1'
_cell_length_a   5.69
_cell_length_b   5.69
_cell_length_c   5.69
_cell_angle_alpha   90.0
_cell_angle_beta   90.0
_cell_angle_gamma   90.0
loop_
 _symmetry_equiv_pos_site_id
 _symmetry_equiv_pos_as_xyz
  1  'x, y, z'
loop_
 _atom_site_type_symbol
 _atom_site_label
 _atom_site_symmetry_multiplicity
 _atom_site_fract_x
 _atom_site_fract_y
 _atom_site_fract_z
 _atom_site_occupancy
  Na+  Na0  1  0.0  0.0  0.0  1
  Cl-  Cl1  1  0.5  0.5  0.5(2)  1
";

    fn minimal(symbol: &str, frac: &str) -> String {
        format!(
            "data_x\n_cell_length_a 4.0\n_cell_length_b 4.0\n_cell_length_c 4.0\n\
             _cell_angle_alpha 90\n_cell_angle_beta 90\n_cell_angle_gamma 90\n\
             loop_\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\n\
             {symbol} {frac}\n"
        )
    }

    #[test]
    fn parses_materials_project_style_file() {
        let f = parse_crystal_file(NACL).unwrap();
        assert_eq!(f.id, "NaCl");
        assert_eq!(f.sites.len(), 2);
        assert_eq!(f.sites[0].atomic_number, 11);
        assert_eq!(f.sites[1].symbol, "Cl");
        assert_eq!(f.sites[1].frac, [0.5, 0.5, 0.5]);
        assert_eq!(f.cell.a, 5.69);
    }

    #[test]
    fn minimal_single_site() {
        let f = parse_crystal_file(&minimal("Na", "0 0 0")).unwrap();
        assert_eq!(f.sites.len(), 1);
        assert_eq!(f.sites[0].atomic_number, 11);
        assert_eq!(f.cell.alpha, 90.0);
    }

    #[test]
    fn unknown_element() {
        let err = parse_crystal_file(&minimal("Xx", "0 0 0")).unwrap_err();
        assert!(matches!(err, IngestError::UnknownElement(_)));
    }

    #[test]
    fn label_fallback() {
        let text = minimal("Co2", "0 0 0").replace("_atom_site_type_symbol", "_atom_site_label");
        let f = parse_crystal_file(&text).unwrap();
        assert_eq!(f.sites[0].symbol, "Co");
    }

    #[test]
    fn missing_cell_block() {
        let text = minimal("Na", "0 0 0").replace("_cell_length_b 4.0\n", "");
        assert!(matches!(
            parse_crystal_file(&text),
            Err(IngestError::MalformedFile(_))
        ));
    }

    #[test]
    fn rejects_symmetry_operations() {
        let text = NACL.replace("1  'x, y, z'", "1  'x, y, z'\n  2  '-x, -y, -z'");
        assert!(matches!(
            parse_crystal_file(&text),
            Err(IngestError::NonP1Symmetry(_))
        ));
        let text = NACL.replace("'P 1'", "'F m -3 m'");
        assert!(matches!(
            parse_crystal_file(&text),
            Err(IngestError::NonP1Symmetry(_))
        ));
    }

    #[test]
    fn serialize_round_trip() {
        let f = parse_crystal_file(NACL).unwrap();
        let back = parse_crystal_file(&f.to_cif()).unwrap();
        assert_eq!(f, back);
    }

    fn cubic(id: &str, a: f64) -> (String, CrystalFile) {
        let text = minimal("Na", "0 0 0")
            .replace("data_x", &format!("data_{id}"))
            .replacen("_cell_length_a 4.0", &format!("_cell_length_a {a}"), 1);
        (format!("{id}.cif"), parse_crystal_file(&text).unwrap())
    }

    #[test]
    fn filter_is_strict() {
        let files: Vec<CrystalFile> = [9.9, 10.0, 12.0].iter().map(|&a| cubic("c", a).1).collect();
        let kept = filter_by_size(&files, 10.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].cell.a, 9.9);
        assert!(filter_by_size(&[], 10.0).is_empty());
    }

    #[test]
    fn manifest_split_is_deterministic() {
        let files: Vec<_> = (0..10).map(|i| cubic(&format!("m{i}"), 4.0)).collect();
        let opts = ManifestOptions { seed: 7, ..Default::default() };
        let a = build_manifest(&files, &opts).unwrap();
        let b = build_manifest(&files, &opts).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.split(Split::Train).count(), 8);
        assert_eq!(a.split(Split::Test).count(), 2);
        assert!(a.entries.iter().all(|e| e.seeds.len() == 3));
        let back = DatasetManifest::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn manifest_excludes_large_cells() {
        let mut files: Vec<_> = (0..4).map(|i| cubic(&format!("m{i}"), 4.0)).collect();
        files.push(cubic("big", 12.0));
        let m = build_manifest(&files, &ManifestOptions::default()).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(m.entries.iter().all(|e| e.id != "big"));
    }

    #[test]
    fn manifest_errors() {
        let files = vec![cubic("a", 4.0)];
        let opts = ManifestOptions { train_fraction: 0.0, ..Default::default() };
        assert!(matches!(
            build_manifest(&files, &opts),
            Err(IngestError::InvalidArgument(_))
        ));
        let big = vec![cubic("b", 11.0)];
        assert_eq!(
            build_manifest(&big, &ManifestOptions::default()),
            Err(IngestError::EmptyDataset)
        );
    }

    #[test]
    fn repeated_lattice_seeds_start_unshifted() {
        let files: Vec<_> = (0..3).map(|i| cubic(&format!("m{i}"), 4.0)).collect();
        let opts = ManifestOptions {
            representation: Representation::RepeatedLattice,
            ..Default::default()
        };
        let m = build_manifest(&files, &opts).unwrap();
        for e in &m.entries {
            assert_eq!(e.seeds.len(), 3);
            assert_eq!(e.seeds[0], 0);
            let uniq: HashSet<_> = e.seeds.iter().collect();
            assert_eq!(uniq.len(), 3);
        }
    }
}
