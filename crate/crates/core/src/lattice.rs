//! Triclinic unit-cell geometry: lattice matrices, coordinate transforms,
//! random rotations and placement of atoms into the sampling cube.

use nalgebra::{Matrix3, UnitQuaternion, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::MAX_ATOMIC_NUMBER;
use crate::ingest::{CellParams, CrystalFile};

/// Slack applied to the inclusive box bounds when enumerating periodic images.
const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LatticeError {
    #[error("degenerate cell: {0}")]
    DegenerateCell(String),
    #[error("cell side {side:.3} Å does not fit in a {box_side} Å box")]
    CellTooLarge { side: f64, box_side: f64 },
    #[error("invalid atom site: {0}")]
    InvalidSite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSite {
    pub atomic_number: u32,
    pub frac: [f64; 3],
}

/// An atom in Cartesian coordinates (Å) in the sampling-cube frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedAtom {
    pub atomic_number: u32,
    pub cart: [f64; 3],
}

impl PlacedAtom {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.cart)
    }
}

/// Builds the lattice matrix (rows are lattice vectors) with `a` along x and `b` in the x-y plane.
pub fn lattice_matrix_from_params(
    a: f64,
    b: f64,
    c: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<Matrix3<f64>, LatticeError> {
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(LatticeError::DegenerateCell(format!(
            "side lengths ({a}, {b}, {c}) must be positive"
        )));
    }
    for angle in [alpha, beta, gamma] {
        if !(angle > 0.0 && angle < 180.0) {
            return Err(LatticeError::DegenerateCell(format!("angle {angle} outside (0, 180)")));
        }
    }
    let (ca, cb, cg) = (alpha.to_radians().cos(), beta.to_radians().cos(), gamma.to_radians().cos());
    let sg = gamma.to_radians().sin();
    let volume_term = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
    if volume_term <= 1e-10 {
        return Err(LatticeError::DegenerateCell(format!(
            "angles ({alpha}, {beta}, {gamma}) admit no real cell"
        )));
    }
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz = c * volume_term.sqrt() / sg;
    #[rustfmt::skip]
    let m = Matrix3::new(
        a,      0.0,    0.0,
        b * cg, b * sg, 0.0,
        cx,     cy,     cz,
    );
    Ok(m)
}

/// Closed-form cell volume `abc·sqrt(1 − cos²α − cos²β − cos²γ + 2cosα cosβ cosγ)`.
pub fn cell_volume(p: &CellParams) -> f64 {
    let (ca, cb, cg) = (
        p.alpha.to_radians().cos(),
        p.beta.to_radians().cos(),
        p.gamma.to_radians().cos(),
    );
    p.a * p.b * p.c * (1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitCell {
    lattice: Matrix3<f64>,
    inverse: Matrix3<f64>,
    sites: Vec<AtomSite>,
}

/// Wraps a fractional coordinate into `[0, 1)`.
fn wrap_unit(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 { 0.0 } else { w }
}

impl UnitCell {
    /// Builds a cell from a lattice matrix (rows = vectors) and sites; coordinates are wrapped.
    pub fn new(lattice: Matrix3<f64>, sites: Vec<AtomSite>) -> Result<Self, LatticeError> {
        let det = lattice.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(LatticeError::DegenerateCell(format!(
                "lattice determinant {det} is not positive"
            )));
        }
        let inverse = lattice
            .try_inverse()
            .ok_or_else(|| LatticeError::DegenerateCell("singular lattice".into()))?;
        let sites = sites
            .into_iter()
            .map(|s| {
                if s.atomic_number == 0 || s.atomic_number > MAX_ATOMIC_NUMBER {
                    return Err(LatticeError::InvalidSite(format!(
                        "atomic number {}",
                        s.atomic_number
                    )));
                }
                if s.frac.iter().any(|v| !v.is_finite()) {
                    return Err(LatticeError::InvalidSite("non-finite coordinate".into()));
                }
                Ok(AtomSite { atomic_number: s.atomic_number, frac: s.frac.map(wrap_unit) })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { lattice, inverse, sites })
    }

    pub fn from_params(params: &CellParams, sites: Vec<AtomSite>) -> Result<Self, LatticeError> {
        let m = lattice_matrix_from_params(
            params.a,
            params.b,
            params.c,
            params.alpha,
            params.beta,
            params.gamma,
        )?;
        Self::new(m, sites)
    }

    pub fn from_crystal(file: &CrystalFile) -> Result<Self, LatticeError> {
        let sites = file
            .sites
            .iter()
            .map(|s| AtomSite { atomic_number: s.atomic_number, frac: s.frac })
            .collect();
        Self::from_params(&file.cell, sites)
    }

    pub fn lattice(&self) -> &Matrix3<f64> {
        &self.lattice
    }

    pub fn sites(&self) -> &[AtomSite] {
        &self.sites
    }

    pub fn volume(&self) -> f64 {
        self.lattice.determinant()
    }

    /// Lengths of the three lattice vectors.
    pub fn side_lengths(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.lattice.row(i).norm())
    }

    pub fn max_side(&self) -> f64 {
        self.side_lengths().into_iter().fold(0.0, f64::max)
    }

    /// `cart = frac · L` with lattice vectors as rows of `L`.
    pub fn frac_to_cart(&self, frac: &Vector3<f64>) -> Vector3<f64> {
        self.lattice.transpose() * frac
    }

    pub fn cart_to_frac(&self, cart: &Vector3<f64>) -> Vector3<f64> {
        self.inverse.transpose() * cart
    }
}

/// Draws a rotation uniformly from SO(3) using Shoemake's uniform quaternion construction.
pub fn random_rotation(seed: u64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (s1, s2) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = Quaternion::new(
        s2 * (tau * u3).cos(),
        s1 * (tau * u2).sin(),
        s1 * (tau * u2).cos(),
        s2 * (tau * u3).sin(),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Centers a single cell's atoms in the box after rotating them about their centroid.
pub fn place_single_cell(
    cell: &UnitCell,
    rotation: &Matrix3<f64>,
    box_side: f64,
) -> Result<Vec<PlacedAtom>, LatticeError> {
    let side = cell.max_side();
    if side >= box_side {
        return Err(LatticeError::CellTooLarge { side, box_side });
    }
    if cell.sites.is_empty() {
        return Ok(Vec::new());
    }
    let carts: Vec<Vector3<f64>> = cell
        .sites
        .iter()
        .map(|s| cell.frac_to_cart(&Vector3::from(s.frac)))
        .collect();
    let centroid = carts.iter().fold(Vector3::zeros(), |acc, p| acc + p) / carts.len() as f64;
    let center = Vector3::repeat(box_side / 2.0);
    Ok(cell
        .sites
        .iter()
        .zip(&carts)
        .map(|(site, p)| {
            let placed = rotation * (p - centroid) + center;
            PlacedAtom { atomic_number: site.atomic_number, cart: placed.into() }
        })
        .collect())
}

/// Tiles the cell periodically and returns every image inside `[-margin, box_side + margin]³`
/// after shifting the lattice by `-offset_frac · L`.
pub fn place_repeated_lattice(
    cell: &UnitCell,
    offset_frac: &Vector3<f64>,
    box_side: f64,
    margin: f64,
) -> Vec<PlacedAtom> {
    let lo = -margin - BOUNDARY_EPS;
    let hi = box_side + margin + BOUNDARY_EPS;

    // Fractional bounding box of the extended cube.
    let mut fmin = Vector3::repeat(f64::INFINITY);
    let mut fmax = Vector3::repeat(f64::NEG_INFINITY);
    for corner in 0..8 {
        let p = Vector3::new(
            if corner & 1 == 0 { lo } else { hi },
            if corner & 2 == 0 { lo } else { hi },
            if corner & 4 == 0 { lo } else { hi },
        );
        let f = cell.cart_to_frac(&p);
        fmin = fmin.inf(&f);
        fmax = fmax.sup(&f);
    }

    let mut atoms = Vec::new();
    for site in &cell.sites {
        let base = Vector3::from(site.frac) - offset_frac;
        let range = |axis: usize| {
            let start = (fmin[axis] - base[axis]).floor() as i64 - 1;
            let end = (fmax[axis] - base[axis]).ceil() as i64 + 1;
            start..=end
        };
        for i in range(0) {
            for j in range(1) {
                for k in range(2) {
                    let f = base + Vector3::new(i as f64, j as f64, k as f64);
                    let p = cell.frac_to_cart(&f);
                    if p.iter().all(|&v| v >= lo && v <= hi) {
                        atoms.push(PlacedAtom { atomic_number: site.atomic_number, cart: p.into() });
                    }
                }
            }
        }
    }
    atoms
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cubic(a: f64, sites: Vec<AtomSite>) -> UnitCell {
        UnitCell::new(Matrix3::from_diagonal_element(a), sites).unwrap()
    }

    #[test]
    fn cubic_matrix_is_diagonal() {
        let m = lattice_matrix_from_params(5.0, 5.0, 5.0, 90.0, 90.0, 90.0).unwrap();
        assert_relative_eq!(m, Matrix3::from_diagonal_element(5.0), epsilon = 1e-12);
        assert_relative_eq!(m.determinant(), 125.0, epsilon = 1e-10);
    }

    #[test]
    fn rhombohedral_volume_matches_closed_form() {
        let m = lattice_matrix_from_params(4.0, 4.0, 4.0, 60.0, 60.0, 60.0).unwrap();
        let c60 = 0.5f64;
        let expected = 64.0 * (1.0 - 3.0 * c60 * c60 + 2.0 * c60 * c60 * c60).sqrt();
        assert_relative_eq!(m.determinant(), expected, max_relative = 1e-12);
        // Lengths and angles are reproduced.
        for i in 0..3 {
            assert_relative_eq!(m.row(i).norm(), 4.0, max_relative = 1e-12);
        }
        let cos_ab = m.row(0).dot(&m.row(1)) / 16.0;
        assert_relative_eq!(cos_ab, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn collapsed_cell_is_degenerate() {
        assert!(matches!(
            lattice_matrix_from_params(5.0, 5.0, 5.0, 90.0, 90.0, 180.0),
            Err(LatticeError::DegenerateCell(_))
        ));
        assert!(matches!(
            lattice_matrix_from_params(5.0, 5.0, 5.0, 90.0, 90.0, 179.999_999_999),
            Err(LatticeError::DegenerateCell(_))
        ));
        assert!(matches!(
            lattice_matrix_from_params(5.0, 5.0, 5.0, 120.0, 120.0, 120.0),
            Err(LatticeError::DegenerateCell(_))
        ));
    }

    #[test]
    fn frac_to_cart_basics() {
        let cell = cubic(4.0, vec![]);
        let p = cell.frac_to_cart(&Vector3::new(0.5, 0.5, 0.5));
        assert_relative_eq!(p, Vector3::new(2.0, 2.0, 2.0));
        let tri = UnitCell::new(
            lattice_matrix_from_params(3.0, 4.0, 5.0, 70.0, 80.0, 100.0).unwrap(),
            vec![],
        )
        .unwrap();
        let v = tri.frac_to_cart(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(v, tri.lattice().row(0).transpose());
    }

    #[test]
    fn sites_are_wrapped() {
        let cell = cubic(4.0, vec![AtomSite { atomic_number: 11, frac: [1.25, -0.25, 0.0] }]);
        assert_eq!(cell.sites()[0].frac, [0.25, 0.75, 0.0]);
        assert_eq!(wrap_unit(-1e-18), 0.0);
    }

    #[test]
    fn rotation_is_orthonormal_and_deterministic() {
        for seed in 0..100 {
            let r = random_rotation(seed);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            assert!(err < 1e-12);
        }
        assert_eq!(random_rotation(42), random_rotation(42));
        assert_ne!(random_rotation(42), random_rotation(43));
    }

    #[test]
    fn single_atom_lands_at_box_center() {
        let cell = cubic(3.0, vec![AtomSite { atomic_number: 8, frac: [0.0; 3] }]);
        let atoms = place_single_cell(&cell, &Matrix3::identity(), 10.0).unwrap();
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].cart, [5.0, 5.0, 5.0]);
    }

    #[test]
    fn two_atom_placement_matches_hand_computation() {
        let cell = cubic(
            4.0,
            vec![
                AtomSite { atomic_number: 11, frac: [0.0, 0.0, 0.0] },
                AtomSite { atomic_number: 17, frac: [0.5, 0.25, 0.0] },
            ],
        );
        let r = random_rotation(9);
        let atoms = place_single_cell(&cell, &r, 10.0).unwrap();
        // Centroid is (1, 0.5, 0); offsets are ±(1, 0.5, 0).
        let rows = [[-1.0, -0.5, 0.0], [1.0, 0.5, 0.0]];
        for (atom, d) in atoms.iter().zip(rows) {
            for i in 0..3 {
                let expected = 5.0 + r[(i, 0)] * d[0] + r[(i, 1)] * d[1] + r[(i, 2)] * d[2];
                assert_relative_eq!(atom.cart[i], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oversized_cell_rejected() {
        let cell = cubic(10.0, vec![AtomSite { atomic_number: 1, frac: [0.0; 3] }]);
        assert!(matches!(
            place_single_cell(&cell, &Matrix3::identity(), 10.0),
            Err(LatticeError::CellTooLarge { .. })
        ));
    }

    #[test]
    fn repeated_lattice_lattice_points() {
        let cell = cubic(5.0, vec![AtomSite { atomic_number: 1, frac: [0.0; 3] }]);
        let atoms = place_repeated_lattice(&cell, &Vector3::zeros(), 10.0, 0.0);
        assert_eq!(atoms.len(), 27);
        for a in &atoms {
            for v in a.cart {
                assert!([0.0, 5.0, 10.0].contains(&v));
            }
        }
        let shifted = place_repeated_lattice(&cell, &Vector3::new(1.0, 0.0, 0.0), 10.0, 0.0);
        assert_eq!(shifted.len(), 27);
    }
}
