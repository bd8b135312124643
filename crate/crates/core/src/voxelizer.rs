//! Gaussian density grids and species label grids sampled at voxel centers.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Representation;
use crate::lattice::{place_repeated_lattice, place_single_cell, random_rotation, LatticeError, PlacedAtom, UnitCell};

/// Voxels whose center lies within this distance of an atom carry its label.
pub const SPECIES_RADIUS: f64 = 0.5;
/// Background plus atomic numbers 1..=100.
pub const NUM_CLASSES: usize = 101;
pub const MAX_LABEL: u16 = (NUM_CLASSES - 1) as u16;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum VoxelError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u16, num_classes: usize },
    #[error("atomic number {0} has no species class")]
    UnsupportedSpecies(u32),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub side_voxels: usize,
    pub box_side: f64,
    pub sigma: f64,
    pub cutoff_sigmas: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { side_voxels: 30, box_side: 10.0, sigma: 1.0, cutoff_sigmas: 6.0 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), VoxelError> {
        if self.side_voxels < 2 {
            return Err(VoxelError::InvalidSpec("side_voxels must be >= 2".into()));
        }
        if !(self.box_side > 0.0) || !(self.sigma > 0.0) {
            return Err(VoxelError::InvalidSpec("box_side and sigma must be positive".into()));
        }
        if !(self.cutoff_sigmas >= 3.0) {
            return Err(VoxelError::InvalidSpec("cutoff_sigmas must be >= 3".into()));
        }
        Ok(())
    }

    /// Edge length of one voxel in Å.
    pub fn pitch(&self) -> f64 {
        self.box_side / self.side_voxels as f64
    }

    pub fn voxel_volume(&self) -> f64 {
        self.pitch().powi(3)
    }

    pub fn num_voxels(&self) -> usize {
        self.side_voxels.pow(3)
    }

    /// Center of voxel index `i` along one axis.
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.pitch()
    }

    /// Linear index with z fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.side_voxels + j) * self.side_voxels + k
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let n = self.side_voxels;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    pub fn center_of(&self, idx: usize) -> [f64; 3] {
        self.unravel(idx).map(|i| self.center(i))
    }

    /// `1 / (σ³ (2π)^{3/2})`, the Gaussian normalization.
    pub fn normalization(&self) -> f64 {
        1.0 / (self.sigma.powi(3) * std::f64::consts::TAU.powf(1.5))
    }

    /// Inclusive voxel index range whose centers lie within `radius` of `x` along one axis.
    fn axis_range(&self, x: f64, radius: f64) -> Option<(usize, usize)> {
        let h = self.pitch();
        let lo = ((x - radius) / h - 0.5).ceil().max(0.0);
        let hi = ((x + radius) / h - 0.5).floor().min(self.side_voxels as f64 - 1.0);
        if lo > hi {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }
}

/// Unscaled density field; index with [`GridSpec::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, values: vec![0.0; spec.num_voxels()] }
    }

    /// Total mass `Σ values · voxel volume`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.voxel_volume()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Values multiplied by `σ³(2π)^{3/2}` so a lone atom peaks at its atomic number.
    pub fn plot_scaled(&self) -> Vec<f64> {
        let s = 1.0 / self.spec.normalization();
        self.values.iter().map(|v| v * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeciesGrid {
    pub side_voxels: usize,
    pub labels: Vec<u16>,
}

impl SpeciesGrid {
    pub fn background(side_voxels: usize) -> Self {
        Self { side_voxels, labels: vec![0; side_voxels.pow(3)] }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Per-voxel class scores for one sample, laid out `[class][voxel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbGrid {
    pub num_classes: usize,
    pub side_voxels: usize,
    pub values: Vec<f32>,
}

impl ClassProbGrid {
    pub fn num_voxels(&self) -> usize {
        self.side_voxels.pow(3)
    }

    pub fn score(&self, class: usize, voxel: usize) -> f32 {
        self.values[class * self.num_voxels() + voxel]
    }
}

/// Evaluates the Gaussian density sum at every voxel center, dropping contributions
/// farther than `cutoff_sigmas · σ`.
pub fn density_from_atoms(atoms: &[PlacedAtom], spec: &GridSpec) -> DensityGrid {
    let n = spec.side_voxels;
    let radius = spec.cutoff_sigmas * spec.sigma;
    let r2 = radius * radius;
    let inv_two_var = 1.0 / (2.0 * spec.sigma * spec.sigma);

    // Separable Gaussian factors per atom and axis.
    struct Footprint {
        z: f64,
        ranges: [(usize, usize); 3],
        d2: [Vec<f64>; 3],
        g: [Vec<f64>; 3],
    }
    let footprints: Vec<Footprint> = atoms
        .iter()
        .filter_map(|a| {
            let mut ranges = [(0, 0); 3];
            let mut d2: [Vec<f64>; 3] = Default::default();
            let mut g: [Vec<f64>; 3] = Default::default();
            for axis in 0..3 {
                let (lo, hi) = spec.axis_range(a.cart[axis], radius)?;
                ranges[axis] = (lo, hi);
                d2[axis] = (lo..=hi)
                    .map(|i| (spec.center(i) - a.cart[axis]).powi(2))
                    .collect();
                g[axis] = d2[axis].iter().map(|d| (-d * inv_two_var).exp()).collect();
            }
            Some(Footprint { z: a.atomic_number as f64, ranges, d2, g })
        })
        .collect();

    let norm = spec.normalization();
    let mut values = vec![0.0; spec.num_voxels()];
    values.par_chunks_mut(n * n).enumerate().for_each(|(i, slab)| {
        for fp in &footprints {
            let (x0, x1) = fp.ranges[0];
            if i < x0 || i > x1 {
                continue;
            }
            let dx2 = fp.d2[0][i - x0];
            let gx = fp.z * fp.g[0][i - x0];
            let (y0, y1) = fp.ranges[1];
            let (z0, z1) = fp.ranges[2];
            for j in y0..=y1 {
                let dxy2 = dx2 + fp.d2[1][j - y0];
                if dxy2 > r2 {
                    continue;
                }
                let gxy = gx * fp.g[1][j - y0];
                let row = &mut slab[j * n..(j + 1) * n];
                for k in z0..=z1 {
                    if dxy2 + fp.d2[2][k - z0] <= r2 {
                        row[k] += gxy * fp.g[2][k - z0];
                    }
                }
            }
        }
        for v in slab.iter_mut() {
            *v *= norm;
        }
    });
    DensityGrid { spec: *spec, values }
}

/// Labels each voxel with the atomic number of the nearest atom within 0.5 Å of its center.
/// Ties go to the atom appearing first in `atoms`.
pub fn species_from_atoms(atoms: &[PlacedAtom], spec: &GridSpec) -> Result<SpeciesGrid, VoxelError> {
    let r2 = SPECIES_RADIUS * SPECIES_RADIUS;
    let mut best = vec![f64::INFINITY; spec.num_voxels()];
    let mut labels = vec![0u16; spec.num_voxels()];
    for atom in atoms {
        if atom.atomic_number == 0 || atom.atomic_number > MAX_LABEL as u32 {
            return Err(VoxelError::UnsupportedSpecies(atom.atomic_number));
        }
        let [Some(rx), Some(ry), Some(rz)] =
            [0, 1, 2].map(|ax| spec.axis_range(atom.cart[ax], SPECIES_RADIUS))
        else {
            continue;
        };
        for i in rx.0..=rx.1 {
            let dx = spec.center(i) - atom.cart[0];
            for j in ry.0..=ry.1 {
                let dy = spec.center(j) - atom.cart[1];
                for k in rz.0..=rz.1 {
                    let dz = spec.center(k) - atom.cart[2];
                    let d2 = dx * dx + dy * dy + dz * dz;
                    let idx = spec.index(i, j, k);
                    if d2 <= r2 && d2 < best[idx] {
                        best[idx] = d2;
                        labels[idx] = atom.atomic_number as u16;
                    }
                }
            }
        }
    }
    Ok(SpeciesGrid { side_voxels: spec.side_voxels, labels })
}

pub fn one_hot_species(grid: &SpeciesGrid, num_classes: usize) -> Result<ClassProbGrid, VoxelError> {
    let nv = grid.labels.len();
    let mut values = vec![0.0f32; num_classes * nv];
    for (v, &label) in grid.labels.iter().enumerate() {
        if label as usize >= num_classes {
            return Err(VoxelError::LabelOutOfRange { label, num_classes });
        }
        values[label as usize * nv + v] = 1.0;
    }
    Ok(ClassProbGrid { num_classes, side_voxels: grid.side_voxels, values })
}

/// Fractional lattice offset used for a repeated-lattice sample. Seed 0 is the unshifted lattice.
pub fn lattice_offset(seed: u64) -> Vector3<f64> {
    if seed == 0 {
        return Vector3::zeros();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Vector3::new(rng.random(), rng.random(), rng.random())
}

/// Atoms of one sample as placed in the sampling cube, including margin images for
/// the repeated representation.
pub fn place_sample(
    cell: &UnitCell,
    representation: Representation,
    seed: u64,
    spec: &GridSpec,
) -> Result<Vec<PlacedAtom>, VoxelError> {
    spec.validate()?;
    Ok(match representation {
        Representation::SingleCell => {
            place_single_cell(cell, &random_rotation(seed), spec.box_side)?
        }
        Representation::RepeatedLattice => place_repeated_lattice(
            cell,
            &lattice_offset(seed),
            spec.box_side,
            spec.cutoff_sigmas * spec.sigma,
        ),
    })
}

/// Atoms whose positions fall inside the closed box `[0, box_side]³`.
pub fn atoms_in_box(atoms: &[PlacedAtom], box_side: f64) -> Vec<PlacedAtom> {
    atoms
        .iter()
        .filter(|a| a.cart.iter().all(|&v| (0.0..=box_side).contains(&v)))
        .copied()
        .collect()
}

/// Density and species grids for one (cell, representation, seed) triple.
pub fn make_sample(
    cell: &UnitCell,
    representation: Representation,
    seed: u64,
    spec: &GridSpec,
) -> Result<(DensityGrid, SpeciesGrid), VoxelError> {
    let atoms = place_sample(cell, representation, seed, spec)?;
    let density = density_from_atoms(&atoms, spec);
    let species = species_from_atoms(&atoms, spec)?;
    Ok((density, species))
}
