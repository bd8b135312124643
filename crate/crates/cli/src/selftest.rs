use crystvox_core::ingest::CellParams;
use crystvox_core::lattice::{random_rotation, PlacedAtom, UnitCell};
use crystvox_core::metrics::{bidirectional_nn_distances, percentile_bands, DistanceMode};
use crystvox_core::segmenter::{segment, SegmentOptions};
use crystvox_core::voxelizer::{density_from_atoms, one_hot_species, species_from_atoms};
use crystvox_core::{AtomRecord, GridSpec, NUM_CLASSES};
use crystvox_tensor::selfcheck::layer_suite;
use crystvox_tensor::{Graph, Tensor};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::commands::Ctx;
use crate::data::write_json;
use crate::error::{CliError, CliResult};

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn lattice_round_trip(rng: &mut ChaCha8Rng) -> CliResult<Check> {
    let mut worst = 0.0f64;
    let mut ortho = 0.0f64;
    for _ in 0..200 {
        let p = CellParams {
            a: rng.random_range(2.0..9.0),
            b: rng.random_range(2.0..9.0),
            c: rng.random_range(2.0..9.0),
            alpha: rng.random_range(55.0..125.0),
            beta: rng.random_range(55.0..125.0),
            gamma: rng.random_range(55.0..125.0),
        };
        let Ok(cell) = UnitCell::from_params(&p, vec![]) else { continue };
        let f = Vector3::new(rng.random(), rng.random(), rng.random());
        worst = worst.max((cell.cart_to_frac(&cell.frac_to_cart(&f)) - f).amax());
        let r = random_rotation(rng.random());
        ortho = ortho.max((r.transpose() * r - Matrix3::identity()).amax());
    }
    Ok(check(
        "lattice round trip and rotation orthogonality",
        worst <= 1e-12 && ortho < 1e-12,
        format!("round trip {worst:.1e}, orthogonality {ortho:.1e}"),
    ))
}

fn random_atoms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<PlacedAtom> {
    (0..n)
        .map(|_| PlacedAtom { atomic_number: rng.random_range(1..=100), cart: [0; 3].map(|_| rng.random_range(lo..hi)) })
        .collect()
}

fn voxelizer_oracle(rng: &mut ChaCha8Rng) -> CliResult<Check> {
    let spec = GridSpec::default();
    let norm = spec.normalization();
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let n = rng.random_range(1..=10);
        let atoms = random_atoms(rng, n, -1.0, 11.0);
        let z_max = atoms.iter().map(|a| a.atomic_number).max().unwrap_or(1) as f64;
        let grid = density_from_atoms(&atoms, &spec);
        for (v, &fast) in grid.values.iter().enumerate() {
            let c = spec.center_of(v);
            let slow: f64 = atoms
                .iter()
                .map(|a| {
                    let d2: f64 = (0..3).map(|k| (c[k] - a.cart[k]).powi(2)).sum();
                    a.atomic_number as f64 * norm * (-d2 / (2.0 * spec.sigma * spec.sigma)).exp()
                })
                .sum();
            worst = worst.max((fast - slow).abs() / z_max);
        }
    }
    Ok(check("density matches untruncated sum", worst < 1e-6, format!("max error / Z_max {worst:.2e}")))
}

fn mass_conservation(rng: &mut ChaCha8Rng) -> CliResult<Check> {
    let spec = GridSpec::default();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let atoms = random_atoms(rng, 5, 4.0, 6.0);
        let total: f64 = atoms.iter().map(|a| a.atomic_number as f64).sum();
        worst = worst.max((density_from_atoms(&atoms, &spec).mass() - total).abs() / total);
    }
    Ok(check("interior mass conservation", worst <= 0.01, format!("max relative deviation {worst:.2e}")))
}

fn segmentation_round_trip(rng: &mut ChaCha8Rng) -> CliResult<Check> {
    let spec = GridSpec::default();
    let half_diag = 3f64.sqrt() * spec.pitch() / 2.0;
    let min_sep = 1.0 + 2.0 * half_diag;
    let mut exact = 0;
    let cases = 10;
    for _ in 0..cases {
        let atoms = loop {
            let n = rng.random_range(2..=6);
            let atoms = random_atoms(rng, n, 1.0, 9.0);
            let ok = atoms.iter().enumerate().all(|(i, a)| {
                atoms[..i].iter().all(|b| (a.position() - b.position()).norm() > min_sep)
            });
            if ok {
                break atoms;
            }
        };
        let probs = one_hot_species(&species_from_atoms(&atoms, &spec)?, NUM_CLASSES)?;
        let found = segment(&probs, &spec, &SegmentOptions::default());
        let ok = found.len() == atoms.len()
            && atoms.iter().all(|a| {
                found.iter().any(|f| {
                    f.atomic_number == a.atomic_number
                        && (Vector3::from(f.position) - a.position()).norm() <= half_diag
                })
            });
        exact += ok as usize;
    }
    Ok(check("segmentation round trip", exact == cases, format!("{exact}/{cases} exact")))
}

fn metrics_oracles() -> CliResult<Check> {
    let truth = [PlacedAtom { atomic_number: 8, cart: [0.0, 2.0, 2.0] }, PlacedAtom { atomic_number: 8, cart: [0.0, 6.0, 5.0] }];
    let pred: Vec<AtomRecord> = truth
        .iter()
        .map(|a| AtomRecord { atomic_number: 8, position: [a.cart[0] + 0.1, a.cart[1], a.cart[2]], voxel_count: 19 })
        .collect();
    let (f, b) = bidirectional_nn_distances(&pred, &truth, DistanceMode::Euclidean)?;
    let shift_ok = f.iter().chain(&b).all(|&d| d == 0.1);
    let bands = percentile_bands(&[4.0, 1.0, 3.0, 2.0], &[0.0, 50.0, 100.0])?;
    Ok(check("metrics shift and percentiles", shift_ok && bands == [1.0, 2.5, 4.0], format!("{f:?} {bands:?}")))
}

fn loss_closed_forms() -> CliResult<Check> {
    let mut g = Graph::<f64>::new();
    let zero = g.input(Tensor::zeros(&[1, 4]));
    let kl0 = g.kl_diag_gaussian(zero, zero)?;
    let one = g.input(Tensor::new(&[1, 1], vec![1.0])?);
    let lv = g.input(Tensor::zeros(&[1, 1]));
    let kl1 = g.kl_diag_gaussian(one, lv)?;
    let logits = g.input(Tensor::zeros(&[1, 3]));
    let target = g.input(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0])?);
    let bce = g.bce_with_logits(logits, target)?;
    let (a, b, c) = (g.value(kl0).item(), g.value(kl1).item(), g.value(bce).item());
    let ok = a == 0.0 && (b - 0.5).abs() < 1e-9 && (c - std::f64::consts::LN_2).abs() < 1e-9;
    Ok(check("loss closed forms", ok, format!("KL(0,0) {a}, KL(1,0) {b}, BCE(0) {c}")))
}

fn autodiff() -> CliResult<Check> {
    let reports = layer_suite(2, 1)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.layer).collect();
    let worst = reports.iter().map(|r| r.worst.max_rel_error).fold(0.0, f64::max);
    Ok(check("layer gradients", failed.is_empty(), format!("worst relative error {worst:.2e}, failed {failed:?}")))
}

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let checks = vec![
        lattice_round_trip(&mut rng)?,
        voxelizer_oracle(&mut rng)?,
        mass_conservation(&mut rng)?,
        segmentation_round_trip(&mut rng)?,
        metrics_oracles()?,
        loss_closed_forms()?,
        autodiff()?,
    ];
    for c in &checks {
        println!("{} {:<48} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let rows: Vec<_> = checks.iter().map(|c| json!({ "check": c.name, "passed": c.passed, "detail": c.detail })).collect();
    write_json(&ctx.out.join("selftest.json"), &rows)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{failed} self-test check(s) failed")))
    }
}
