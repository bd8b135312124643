//! Small synthetic crystal sets for smoke training and self-tests.

use crystvox_core::ingest::CellParams;
use crystvox_core::lattice::AtomSite;
use crystvox_core::voxelizer::{make_sample, place_sample};
use crystvox_core::{GridSpec, Representation, UnitCell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TrainSample;
use crate::ModelError;

const SPECIES: [u32; 8] = [3, 8, 11, 12, 14, 17, 26, 29];

/// Near-cubic cells with 2–4 atoms at least 1.5 Å apart.
pub fn toy_cells(n: usize, seed: u64) -> Vec<UnitCell> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(n);
    while cells.len() < n {
        let params = CellParams {
            a: rng.random_range(3.5..5.5),
            b: rng.random_range(3.5..5.5),
            c: rng.random_range(3.5..5.5),
            alpha: rng.random_range(80.0..100.0),
            beta: rng.random_range(80.0..100.0),
            gamma: rng.random_range(80.0..100.0),
        };
        let count = rng.random_range(2..=4);
        let sites: Vec<AtomSite> = (0..count)
            .map(|_| AtomSite {
                atomic_number: SPECIES[rng.random_range(0..SPECIES.len())],
                frac: [rng.random(), rng.random(), rng.random()],
            })
            .collect();
        let Ok(cell) = UnitCell::from_params(&params, sites) else { continue };
        let Ok(atoms) = place_sample(&cell, Representation::SingleCell, 0, &GridSpec::default()) else { continue };
        let dist = |p: [f64; 3], q: [f64; 3]| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt();
        let separated = atoms.iter().enumerate().all(|(i, p)| atoms[..i].iter().all(|q| dist(p.cart, q.cart) > 1.5));
        if separated {
            cells.push(cell);
        }
    }
    cells
}

/// Voxelized single-cell samples of [`toy_cells`], one rotation each.
pub fn toy_samples(n: usize, seed: u64, spec: &GridSpec) -> Result<Vec<TrainSample>, ModelError> {
    toy_cells(n, seed)
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let (density, species) = make_sample(cell, Representation::SingleCell, seed.wrapping_add(i as u64), spec)
                .map_err(|e| ModelError::InvalidInput(e.to_string()))?;
            TrainSample::from_grids(&density, &species)
        })
        .collect()
}
