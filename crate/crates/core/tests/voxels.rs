use std::time::Instant;

use crystvox_core::ingest::CellParams;
use crystvox_core::lattice::{place_single_cell, random_rotation, AtomSite, PlacedAtom, UnitCell};
use crystvox_core::voxelizer::{density_from_atoms, make_sample, GridSpec};
use crystvox_core::Representation;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_atoms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<PlacedAtom> {
    (0..n)
        .map(|_| PlacedAtom {
            atomic_number: rng.random_range(1..=100),
            cart: [0; 3].map(|_| rng.random_range(lo..hi)),
        })
        .collect()
}

/// Full Gaussian sum at every voxel center with no cutoff.
fn brute_density(atoms: &[PlacedAtom], spec: &GridSpec) -> Vec<f64> {
    let norm = 1.0 / (spec.sigma.powi(3) * (2.0 * std::f64::consts::PI).powf(1.5));
    let h = spec.box_side / spec.side_voxels as f64;
    let n = spec.side_voxels;
    let mut out = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = [i, j, k].map(|t| (t as f64 + 0.5) * h);
                out[(i * n + j) * n + k] = atoms
                    .iter()
                    .map(|a| {
                        let d2: f64 = (0..3).map(|ax| (c[ax] - a.cart[ax]).powi(2)).sum();
                        a.atomic_number as f64 * norm * (-d2 / (2.0 * spec.sigma * spec.sigma)).exp()
                    })
                    .sum();
            }
        }
    }
    out
}

#[test]
fn truncated_density_matches_untruncated_sum() {
    let start = Instant::now();
    let spec = GridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = rng.random_range(1..=50);
        // Some atoms sit outside the box so their tails straddle the faces.
        let atoms = random_atoms(&mut rng, n, -2.0, 12.0);
        let z_max = atoms.iter().map(|a| a.atomic_number).max().unwrap() as f64;
        let fast = density_from_atoms(&atoms, &spec);
        let slow = brute_density(&atoms, &spec);
        let err = fast
            .values
            .iter()
            .zip(&slow)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-6 * z_max, "case {case}: error {err:e} with Z_max {z_max}");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn interior_mass_equals_total_charge() {
    let spec = GridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let margin = 4.0 * spec.sigma;
    for case in 0..50 {
        let n = rng.random_range(1..=20);
        let atoms = random_atoms(&mut rng, n, margin, spec.box_side - margin);
        let total: f64 = atoms.iter().map(|a| a.atomic_number as f64).sum();
        let mass = density_from_atoms(&atoms, &spec).mass();
        assert!((mass - total).abs() <= 0.01 * total, "case {case}: {mass} vs {total}");
    }
}

#[test]
fn atom_order_does_not_matter() {
    let spec = GridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut atoms = random_atoms(&mut rng, 30, 0.0, 10.0);
    let a = density_from_atoms(&atoms, &spec);
    atoms.shuffle(&mut rng);
    let b = density_from_atoms(&atoms, &spec);
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn density_decays_away_from_a_lone_atom() {
    let spec = GridSpec::default();
    let atom = PlacedAtom { atomic_number: 6, cart: [5.0; 3] };
    let grid = density_from_atoms(&[atom], &spec);
    let n = spec.side_voxels;
    // Walk outward along +x from the voxel containing the atom.
    let row: Vec<f64> = (15..n).map(|i| grid.values[spec.index(i, 15, 15)]).collect();
    assert!(row.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn samples_are_deterministic_per_seed() {
    let p = CellParams { a: 4.0, b: 5.0, c: 4.5, alpha: 80.0, beta: 95.0, gamma: 110.0 };
    let sites = vec![
        AtomSite { atomic_number: 8, frac: [0.1, 0.2, 0.3] },
        AtomSite { atomic_number: 14, frac: [0.6, 0.5, 0.7] },
    ];
    let cell = UnitCell::from_params(&p, sites).unwrap();
    let spec = GridSpec::default();
    for rep in [Representation::SingleCell, Representation::RepeatedLattice] {
        let a = make_sample(&cell, rep, 5, &spec).unwrap();
        let b = make_sample(&cell, rep, 5, &spec).unwrap();
        let c = make_sample(&cell, rep, 6, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }
}

#[test]
fn rotated_cells_keep_their_mass() {
    let p = CellParams { a: 3.0, b: 3.0, c: 3.0, alpha: 90.0, beta: 90.0, gamma: 90.0 };
    let sites = vec![
        AtomSite { atomic_number: 26, frac: [0.0, 0.0, 0.0] },
        AtomSite { atomic_number: 8, frac: [0.5, 0.5, 0.5] },
    ];
    let cell = UnitCell::from_params(&p, sites).unwrap();
    let spec = GridSpec::default();
    for seed in 0..5 {
        let atoms = place_single_cell(&cell, &random_rotation(seed), spec.box_side).unwrap();
        let mass = density_from_atoms(&atoms, &spec).mass();
        assert!((mass - 34.0).abs() < 0.34);
    }
}
