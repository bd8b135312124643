//! Evaluation of segmented atoms against ground truth: bidirectional nearest-atom
//! distances, species and count accuracy, percentile bands, spacing histograms and
//! density correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::AtomRecord;
use crate::lattice::PlacedAtom;
use crate::voxelizer::DensityGrid;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("truth atom list is empty")]
    EmptyTruth,
    #[error("no values to summarize")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// How inter-atom distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum DistanceMode {
    #[default]
    Euclidean,
    /// Minimum-image distance in a cubic box of the given period.
    MinimumImage { period: f64 },
}

impl DistanceMode {
    pub fn distance(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let mut s = 0.0;
        for axis in 0..3 {
            let mut d = a[axis] - b[axis];
            if let DistanceMode::MinimumImage { period } = *self {
                d -= period * (d / period).round();
            }
            s += d * d;
        }
        s.sqrt()
    }
}

fn nearest(from: &[f64; 3], to: &[[f64; 3]], mode: DistanceMode) -> Option<(usize, f64)> {
    to.iter()
        .enumerate()
        .map(|(i, p)| (i, mode.distance(from, p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Distances predicted→nearest true and true→nearest predicted.
/// With no predictions the second list holds `+∞` for every true atom.
pub fn bidirectional_nn_distances(
    pred: &[AtomRecord],
    truth: &[PlacedAtom],
    mode: DistanceMode,
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    let p: Vec<[f64; 3]> = pred.iter().map(|a| a.position).collect();
    let t: Vec<[f64; 3]> = truth.iter().map(|a| a.cart).collect();
    let forward = p.iter().map(|x| nearest(x, &t, mode).map_or(f64::INFINITY, |n| n.1)).collect();
    let backward = t.iter().map(|x| nearest(x, &p, mode).map_or(f64::INFINITY, |n| n.1)).collect();
    Ok((forward, backward))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesAccuracy {
    /// Exact atomic-number match rate; `None` when no prediction was matched.
    pub top1: Option<f64>,
    /// Rate of `|ΔZ| ≤ 2`; `None` when no prediction was matched.
    pub within_2z: Option<f64>,
    pub matched: usize,
}

/// Species agreement over predicted atoms that have a true atom closer than `match_radius`.
pub fn species_accuracy(
    pred: &[AtomRecord],
    truth: &[PlacedAtom],
    match_radius: f64,
    mode: DistanceMode,
) -> SpeciesAccuracy {
    let pairs = species_pairs(pred, truth, mode);
    let matched: Vec<_> = pairs.iter().filter(|p| p.distance < match_radius).collect();
    let n = matched.len();
    let rate = |f: &dyn Fn(&SpeciesPair) -> bool| {
        (n > 0).then(|| matched.iter().filter(|p| f(p)).count() as f64 / n as f64)
    };
    SpeciesAccuracy {
        top1: rate(&|p| p.pred_z == p.true_z),
        within_2z: rate(&|p| p.pred_z.abs_diff(p.true_z) <= 2),
        matched: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesPair {
    pub pred_z: u32,
    pub true_z: u32,
    pub distance: f64,
}

/// Each predicted atom paired with its nearest true atom.
pub fn species_pairs(pred: &[AtomRecord], truth: &[PlacedAtom], mode: DistanceMode) -> Vec<SpeciesPair> {
    let t: Vec<[f64; 3]> = truth.iter().map(|a| a.cart).collect();
    pred.iter()
        .filter_map(|p| {
            nearest(&p.position, &t, mode).map(|(i, d)| SpeciesPair {
                pred_z: p.atomic_number,
                true_z: truth[i].atomic_number,
                distance: d,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub n_pred: usize,
    pub n_true: usize,
    pub abs_diff: usize,
}

pub fn count_report(pred: &[AtomRecord], truth: &[PlacedAtom]) -> CountReport {
    CountReport { n_pred: pred.len(), n_true: truth.len(), abs_diff: pred.len().abs_diff(truth.len()) }
}

/// Linear-interpolation percentiles (the `(n − 1)·p/100` rank convention).
pub fn percentile_bands(values: &[f64], percentiles: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentiles
        .iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(MetricsError::InvalidArgument(format!("percentile {p}")));
            }
            let rank = p / 100.0 * (sorted.len() - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - lo as f64;
            if lo == hi || sorted[lo] == sorted[hi] {
                Ok(sorted[lo])
            } else {
                Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Nearest-neighbor distance for each atom, before binning.
    pub values: Vec<f64>,
}

/// Nearest-neighbor distance of every atom, binned into `bins` equal bins over `[lo, hi)`.
/// The last bin is closed on the right.
pub fn spacing_histogram(positions: &[[f64; 3]], lo: f64, hi: f64, bins: usize) -> Result<Histogram, MetricsError> {
    if bins == 0 || !(hi > lo) {
        return Err(MetricsError::InvalidArgument("need bins > 0 and hi > lo".into()));
    }
    let values: Vec<f64> = if positions.len() < 2 {
        Vec::new()
    } else {
        positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                positions
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| DistanceMode::Euclidean.distance(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in &values {
        if v >= lo && v <= hi {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    Ok(Histogram { edges, counts, values })
}

/// Pearson correlation over voxels, accumulated in a single pass of co-moment updates.
/// Returns `None` when either grid has zero variance.
pub fn density_correlation(pred: &DensityGrid, truth: &DensityGrid) -> Result<Option<f64>, MetricsError> {
    if pred.values.len() != truth.values.len() {
        return Err(MetricsError::InvalidArgument("grid sizes differ".into()));
    }
    let (mut mx, mut my, mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (n, (&x, &y)) in pred.values.iter().zip(&truth.values).enumerate() {
        let k = (n + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / k;
        my += dy / k;
        cxx += dx * (x - mx);
        cyy += dy * (y - my);
        cxy += dx * (y - my);
    }
    if cxx <= 0.0 || cyy <= 0.0 {
        return Ok(None);
    }
    Ok(Some(cxy / (cxx.sqrt() * cyy.sqrt())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub counts: CountReport,
    pub pred_to_true: Vec<f64>,
    pub true_to_pred: Vec<f64>,
    pub species: Vec<SpeciesPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub percentiles: Vec<f64>,
    pub pred_to_true_bands: Option<Vec<f64>>,
    pub true_to_pred_bands: Option<Vec<f64>>,
    /// Fraction of predicted atoms within 0.5 Å of a true atom.
    pub placed_within_half_angstrom: Option<f64>,
    /// Species agreement among predictions within the match radius.
    pub species_within_radius: SpeciesAccuracy,
    /// Species agreement with the nearest true atom regardless of distance.
    pub species_unconditioned: SpeciesAccuracy,
    pub count_exact_fraction: Option<f64>,
    pub count_within_two_fraction: Option<f64>,
    /// Histogram of `|n_pred − n_true|`.
    pub count_error_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub summary: EvalSummary,
}

pub const DEFAULT_PERCENTILES: [f64; 3] = [50.0, 75.0, 90.0];
pub const MATCH_RADIUS: f64 = 0.5;

/// Evaluates a set of `(id, predicted, truth)` samples.
pub fn evaluate(
    samples: &[(String, Vec<AtomRecord>, Vec<PlacedAtom>)],
    mode: DistanceMode,
) -> Result<EvalReport, MetricsError> {
    let mut evals = Vec::with_capacity(samples.len());
    let mut all_pred: Vec<AtomRecord> = Vec::new();
    let mut matched_pairs = Vec::new();
    for (id, pred, truth) in samples {
        let (f, b) = bidirectional_nn_distances(pred, truth, mode)?;
        let species = species_pairs(pred, truth, mode);
        matched_pairs.extend(species.iter().copied());
        all_pred.extend(pred.iter().copied());
        evals.push(SampleEval {
            id: id.clone(),
            counts: count_report(pred, truth),
            pred_to_true: f,
            true_to_pred: b,
            species,
        });
    }
    let forward: Vec<f64> = evals.iter().flat_map(|e| e.pred_to_true.iter().copied()).collect();
    let backward: Vec<f64> = evals.iter().flat_map(|e| e.true_to_pred.iter().copied()).collect();
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let accuracy = |radius: f64| {
        let m: Vec<_> = matched_pairs.iter().filter(|p| p.distance < radius).collect();
        SpeciesAccuracy {
            top1: rate(m.iter().filter(|p| p.pred_z == p.true_z).count(), m.len()),
            within_2z: rate(m.iter().filter(|p| p.pred_z.abs_diff(p.true_z) <= 2).count(), m.len()),
            matched: m.len(),
        }
    };
    let mut hist = BTreeMap::new();
    for e in &evals {
        *hist.entry(e.counts.abs_diff).or_insert(0) += 1;
    }
    let summary = EvalSummary {
        percentiles: DEFAULT_PERCENTILES.to_vec(),
        pred_to_true_bands: percentile_bands(&forward, &DEFAULT_PERCENTILES).ok(),
        true_to_pred_bands: percentile_bands(&backward, &DEFAULT_PERCENTILES).ok(),
        placed_within_half_angstrom: rate(
            forward.iter().filter(|&&d| d < MATCH_RADIUS).count(),
            forward.len(),
        ),
        species_within_radius: accuracy(MATCH_RADIUS),
        species_unconditioned: accuracy(f64::INFINITY),
        count_exact_fraction: rate(evals.iter().filter(|e| e.counts.abs_diff == 0).count(), evals.len()),
        count_within_two_fraction: rate(evals.iter().filter(|e| e.counts.abs_diff < 2).count(), evals.len()),
        count_error_histogram: hist,
    };
    Ok(EvalReport { samples: evals, summary })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV tables keyed by file name, one per figure panel.
    pub fn csv_tables(&self) -> Vec<(&'static str, String)> {
        let mut counts = String::from("id,n_true,n_pred,abs_diff\n");
        let mut distances = String::from("id,direction,distance\n");
        let mut species = String::from("id,pred_z,true_z,distance\n");
        for s in &self.samples {
            counts.push_str(&format!("{},{},{},{}\n", s.id, s.counts.n_true, s.counts.n_pred, s.counts.abs_diff));
            for d in &s.pred_to_true {
                distances.push_str(&format!("{},pred_to_true,{d}\n", s.id));
            }
            for d in &s.true_to_pred {
                distances.push_str(&format!("{},true_to_pred,{d}\n", s.id));
            }
            for p in &s.species {
                species.push_str(&format!("{},{},{},{}\n", s.id, p.pred_z, p.true_z, p.distance));
            }
        }
        let mut bands = String::from("direction,percentile,distance\n");
        for (name, vals) in [
            ("pred_to_true", &self.summary.pred_to_true_bands),
            ("true_to_pred", &self.summary.true_to_pred_bands),
        ] {
            if let Some(vals) = vals {
                for (p, v) in self.summary.percentiles.iter().zip(vals) {
                    bands.push_str(&format!("{name},{p},{v}\n"));
                }
            }
        }
        vec![
            ("counts.csv", counts),
            ("distances.csv", distances),
            ("percentiles.csv", bands),
            ("species.csv", species),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(z: u32, p: [f64; 3]) -> AtomRecord {
        AtomRecord { atomic_number: z, position: p, voxel_count: 19 }
    }

    fn placed(z: u32, p: [f64; 3]) -> PlacedAtom {
        PlacedAtom { atomic_number: z, cart: p }
    }

    fn sample_truth() -> Vec<PlacedAtom> {
        vec![placed(8, [1.0, 1.0, 1.0]), placed(26, [5.0, 5.0, 5.0]), placed(6, [8.0, 2.0, 7.0])]
    }

    #[test]
    fn identical_sets_have_zero_distances() {
        let truth = sample_truth();
        let pred: Vec<_> = truth.iter().map(|a| rec(a.atomic_number, a.cart)).collect();
        let (f, b) = bidirectional_nn_distances(&pred, &truth, DistanceMode::Euclidean).unwrap();
        assert!(f.iter().chain(&b).all(|&d| d == 0.0));
    }

    #[test]
    fn spurious_atom_adds_one_entry() {
        let truth = sample_truth();
        let mut pred: Vec<_> = truth.iter().map(|a| rec(a.atomic_number, a.cart)).collect();
        pred.push(rec(1, [50.0, 50.0, 50.0]));
        let (f, b) = bidirectional_nn_distances(&pred, &truth, DistanceMode::Euclidean).unwrap();
        assert_eq!(f.iter().filter(|&&d| d > 10.0).count(), 1);
        assert!(b.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn empty_cases() {
        let truth = sample_truth();
        let (f, b) = bidirectional_nn_distances(&[], &truth, DistanceMode::Euclidean).unwrap();
        assert!(f.is_empty());
        assert!(b.iter().all(|d| d.is_infinite()));
        assert_eq!(
            bidirectional_nn_distances(&[rec(1, [0.0; 3])], &[], DistanceMode::Euclidean),
            Err(MetricsError::EmptyTruth)
        );
    }

    #[test]
    fn species_accuracy_cases() {
        let truth = sample_truth();
        let perfect: Vec<_> = truth.iter().map(|a| rec(a.atomic_number, a.cart)).collect();
        let acc = species_accuracy(&perfect, &truth, 0.5, DistanceMode::Euclidean);
        assert_eq!((acc.top1, acc.within_2z), (Some(1.0), Some(1.0)));
        let off: Vec<_> = truth.iter().map(|a| rec(a.atomic_number + 1, a.cart)).collect();
        let acc = species_accuracy(&off, &truth, 0.5, DistanceMode::Euclidean);
        assert_eq!((acc.top1, acc.within_2z), (Some(0.0), Some(1.0)));
        let far = vec![rec(8, [3.0, 3.0, 3.0])];
        let acc = species_accuracy(&far, &truth, 0.5, DistanceMode::Euclidean);
        assert_eq!((acc.top1, acc.within_2z, acc.matched), (None, None, 0));
    }

    #[test]
    fn count_reports() {
        let truth = sample_truth();
        let pred: Vec<_> = truth.iter().map(|a| rec(a.atomic_number, a.cart)).collect();
        assert_eq!(count_report(&pred, &truth).abs_diff, 0);
        let mut extra = pred.clone();
        extra.push(rec(1, [0.0; 3]));
        assert_eq!(count_report(&extra, &truth).abs_diff, 1);
        let five: Vec<_> = (0..5).map(|i| placed(1, [i as f64; 3])).collect();
        assert_eq!(count_report(&[], &five), CountReport { n_pred: 0, n_true: 5, abs_diff: 5 });
    }

    #[test]
    fn percentile_cases() {
        let ramp: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile_bands(&ramp, &[50.0]).unwrap(), vec![50.0]);
        assert_eq!(percentile_bands(&[2.5], &[50.0, 75.0, 90.0]).unwrap(), vec![2.5; 3]);
        assert_eq!(percentile_bands(&[], &[50.0]), Err(MetricsError::EmptyInput));
        assert_eq!(percentile_bands(&[1.0, 2.0], &[25.0]).unwrap(), vec![1.25]);
    }

    #[test]
    fn spacing_cases() {
        let h = spacing_histogram(&[[0.0; 3], [2.0, 0.0, 0.0]], 0.0, 4.0, 8).unwrap();
        assert_eq!(h.values, vec![2.0, 2.0]);
        assert_eq!(h.counts[4], 2);
        let single = spacing_histogram(&[[0.0; 3]], 0.0, 4.0, 8).unwrap();
        assert!(single.values.is_empty());
        assert_eq!(single.counts.iter().sum::<usize>(), 0);
    }

    #[test]
    fn minimum_image_distance() {
        let m = DistanceMode::MinimumImage { period: 10.0 };
        assert!((m.distance(&[0.5, 0.0, 0.0], &[9.5, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_report() {
        let truth = sample_truth();
        let pred: Vec<_> = truth.iter().map(|a| rec(a.atomic_number, a.cart)).collect();
        let report = evaluate(&[("s0".into(), pred, truth)], DistanceMode::Euclidean).unwrap();
        assert_eq!(report.summary.count_exact_fraction, Some(1.0));
        assert_eq!(report.summary.species_within_radius.top1, Some(1.0));
        assert_eq!(report.summary.pred_to_true_bands, Some(vec![0.0; 3]));
        let tables = report.csv_tables();
        assert_eq!(tables.len(), 4);
        assert!(tables[0].1.contains("s0,3,3,0"));
        assert!(report.to_json().contains("\"samples\""));
    }
}
