//! Turns per-voxel class scores into discrete atoms: argmax, 26-connected
//! components, majority vote and centroids.

use std::collections::VecDeque;

use crate::io::AtomRecord;
use crate::voxelizer::{ClassProbGrid, DensityGrid, GridSpec, SpeciesGrid};

pub type SegmentedAtoms = Vec<AtomRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CentroidMode {
    #[default]
    Unweighted,
    DensityWeighted,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    pub min_cluster_voxels: usize,
    pub centroid: CentroidMode,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { min_cluster_voxels: 2, centroid: CentroidMode::Unweighted }
    }
}

/// Per-voxel class of maximal score; ties go to the lower class index.
pub fn argmax_labels(probs: &ClassProbGrid) -> SpeciesGrid {
    let nv = probs.num_voxels();
    let mut best = probs.values[..nv].to_vec();
    let mut labels = vec![0u16; nv];
    for class in 1..probs.num_classes {
        let row = &probs.values[class * nv..(class + 1) * nv];
        for v in 0..nv {
            if row[v] > best[v] {
                best[v] = row[v];
                labels[v] = class as u16;
            }
        }
    }
    SpeciesGrid { side_voxels: probs.side_voxels, labels }
}

/// Connected components of the non-background mask under 26-connectivity.
/// Components are ordered by their smallest linear voxel index; members are sorted.
pub fn connected_components(labels: &SpeciesGrid) -> Vec<Vec<usize>> {
    let n = labels.side_voxels as isize;
    let mut visited = vec![false; labels.labels.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.labels.len() {
        if visited[start] || labels.labels[start] == 0 {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let (i, j, k) = ((idx as isize) / (n * n), (idx as isize / n) % n, idx as isize % n);
            for di in -1..=1 {
                for dj in -1..=1 {
                    for dk in -1..=1 {
                        let (a, b, c) = (i + di, j + dj, k + dk);
                        if a < 0 || b < 0 || c < 0 || a >= n || b >= n || c >= n {
                            continue;
                        }
                        let nb = ((a * n + b) * n + c) as usize;
                        if !visited[nb] && labels.labels[nb] != 0 {
                            visited[nb] = true;
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

/// Modal non-background label of a cluster; ties go to the smaller atomic number.
pub fn majority_vote(cluster: &[usize], labels: &SpeciesGrid) -> u16 {
    let mut counts = std::collections::BTreeMap::<u16, usize>::new();
    for &v in cluster {
        let l = labels.labels[v];
        if l != 0 {
            *counts.entry(l).or_default() += 1;
        }
    }
    let mut best = (0u16, 0usize);
    for (label, count) in counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

/// Segments an already-discrete label grid.
pub fn segment_labels(
    labels: &SpeciesGrid,
    spec: &GridSpec,
    density: Option<&DensityGrid>,
    opts: &SegmentOptions,
) -> SegmentedAtoms {
    connected_components(labels)
        .into_iter()
        .filter(|c| c.len() >= opts.min_cluster_voxels)
        .map(|cluster| {
            let atomic_number = majority_vote(&cluster, labels) as u32;
            let weight = |v: usize| match (opts.centroid, density) {
                (CentroidMode::DensityWeighted, Some(d)) => d.values[v].max(0.0),
                _ => 1.0,
            };
            let mut total = 0.0;
            let mut acc = [0.0; 3];
            for &v in &cluster {
                let w = weight(v);
                let c = spec.center_of(v);
                for axis in 0..3 {
                    acc[axis] += w * c[axis];
                }
                total += w;
            }
            if total <= 0.0 {
                // All-zero weights fall back to the plain mean.
                total = cluster.len() as f64;
                acc = [0.0; 3];
                for &v in &cluster {
                    let c = spec.center_of(v);
                    for axis in 0..3 {
                        acc[axis] += c[axis];
                    }
                }
            }
            AtomRecord {
                atomic_number,
                position: acc.map(|a| a / total),
                voxel_count: cluster.len(),
            }
        })
        .collect()
}

/// Full pipeline from class scores to atoms.
pub fn segment(probs: &ClassProbGrid, spec: &GridSpec, opts: &SegmentOptions) -> SegmentedAtoms {
    segment_with_density(probs, spec, None, opts)
}

pub fn segment_with_density(
    probs: &ClassProbGrid,
    spec: &GridSpec,
    density: Option<&DensityGrid>,
    opts: &SegmentOptions,
) -> SegmentedAtoms {
    let labels = argmax_labels(probs);
    segment_labels(&labels, spec, density, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::PlacedAtom;
    use crate::voxelizer::{one_hot_species, species_from_atoms, NUM_CLASSES};

    fn grid_with(n: usize, voxels: &[(usize, u16)]) -> SpeciesGrid {
        let mut g = SpeciesGrid::background(n);
        for &(v, l) in voxels {
            g.labels[v] = l;
        }
        g
    }

    #[test]
    fn argmax_recovers_one_hot_and_breaks_ties_low() {
        let g = grid_with(3, &[(4, 26), (9, 8)]);
        let oh = one_hot_species(&g, NUM_CLASSES).unwrap();
        assert_eq!(argmax_labels(&oh), g);
        let uniform = ClassProbGrid { num_classes: 5, side_voxels: 2, values: vec![0.3; 40] };
        assert!(argmax_labels(&uniform).labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn corner_contact_is_connected() {
        let spec = GridSpec { side_voxels: 4, ..Default::default() };
        let g = grid_with(4, &[(spec.index(0, 0, 0), 6), (spec.index(1, 1, 1), 6)]);
        assert_eq!(connected_components(&g).len(), 1);
        let g = grid_with(4, &[(spec.index(0, 0, 0), 6), (spec.index(2, 2, 2), 6)]);
        let cc = connected_components(&g);
        assert_eq!(cc.len(), 2);
        assert_eq!(cc[0], vec![0]);
        let single = grid_with(4, &[(5, 1)]);
        assert_eq!(connected_components(&single), vec![vec![5]]);
    }

    #[test]
    fn majority_vote_rules() {
        let g = grid_with(2, &[(0, 8), (1, 8), (2, 6), (3, 6), (4, 8), (5, 6)]);
        assert_eq!(majority_vote(&[0, 1, 2], &g), 8);
        assert_eq!(majority_vote(&[0, 1, 2, 3], &g), 6);
        assert_eq!(majority_vote(&[0, 1, 4], &g), 8);
    }

    #[test]
    fn background_gives_no_atoms() {
        let spec = GridSpec::default();
        let oh = one_hot_species(&SpeciesGrid::background(30), NUM_CLASSES).unwrap();
        assert!(segment(&oh, &spec, &SegmentOptions::default()).is_empty());
    }

    #[test]
    fn nineteen_voxel_blob_centroid_is_exact() {
        let spec = GridSpec::default();
        let c = spec.center(12);
        let atom = PlacedAtom { atomic_number: 8, cart: [c, c, c] };
        let s = species_from_atoms(&[atom], &spec).unwrap();
        let atoms = segment(&one_hot_species(&s, NUM_CLASSES).unwrap(), &spec, &SegmentOptions::default());
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].atomic_number, 8);
        assert_eq!(atoms[0].voxel_count, 19);
        for axis in 0..3 {
            assert!((atoms[0].position[axis] - c).abs() < 1e-9);
        }
    }

    #[test]
    fn small_clusters_dropped() {
        let spec = GridSpec { side_voxels: 6, ..Default::default() };
        let g = grid_with(6, &[(0, 3)]);
        let oh = one_hot_species(&g, NUM_CLASSES).unwrap();
        assert!(segment(&oh, &spec, &SegmentOptions::default()).is_empty());
        let keep = SegmentOptions { min_cluster_voxels: 1, ..Default::default() };
        assert_eq!(segment(&oh, &spec, &keep).len(), 1);
    }

    #[test]
    fn density_weighted_centroid() {
        let spec = GridSpec { side_voxels: 6, ..Default::default() };
        let a = spec.index(2, 2, 2);
        let b = spec.index(2, 2, 3);
        let g = grid_with(6, &[(a, 5), (b, 5)]);
        let mut d = DensityGrid::zeros(spec);
        d.values[a] = 3.0;
        d.values[b] = 1.0;
        let opts = SegmentOptions { centroid: CentroidMode::DensityWeighted, ..Default::default() };
        let atoms = segment_labels(&g, &spec, Some(&d), &opts);
        let expected = 0.75 * spec.center(2) + 0.25 * spec.center(3);
        assert!((atoms[0].position[2] - expected).abs() < 1e-12);
    }
}
