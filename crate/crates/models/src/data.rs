use crystvox_core::{DensityGrid, SpeciesGrid};
use crystvox_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// One voxelized training example: density `M` and species labels `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub side: usize,
    pub density: Vec<f32>,
    pub labels: Vec<u16>,
}

impl TrainSample {
    pub fn from_grids(density: &DensityGrid, species: &SpeciesGrid) -> Result<Self, ModelError> {
        let side = density.spec.side_voxels;
        if species.side_voxels != side || species.labels.len() != density.values.len() {
            return Err(ModelError::InvalidInput(format!(
                "density side {side} does not match species side {}",
                species.side_voxels
            )));
        }
        Ok(Self { side, density: density.values.iter().map(|&v| v as f32).collect(), labels: species.labels.clone() })
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().fold(0.0f32, |a, &b| a.max(b)) as f64
    }
}

/// Largest voxel value over a dataset; the conditioning normalizer.
pub fn dataset_max_density(samples: &[TrainSample]) -> f64 {
    samples.iter().map(TrainSample::max_density).fold(0.0, f64::max)
}

/// Stacks samples into `[N, 1, S, S, S]` densities and `[N, classes, S, S, S]` one-hot targets.
pub fn batch_tensors<T: Element>(samples: &[&TrainSample], num_classes: usize) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    let first = samples.first().ok_or_else(|| ModelError::InvalidInput("empty batch".into()))?;
    let s = first.side;
    let nv = s * s * s;
    let n = samples.len();
    let mut density = Vec::with_capacity(n * nv);
    let mut onehot = vec![T::zero(); n * num_classes * nv];
    for (b, sample) in samples.iter().enumerate() {
        if sample.side != s || sample.density.len() != nv || sample.labels.len() != nv {
            return Err(ModelError::InvalidInput("samples in a batch must share one grid size".into()));
        }
        density.extend(sample.density.iter().map(|&v| T::of(v as f64)));
        for (v, &label) in sample.labels.iter().enumerate() {
            let c = label as usize;
            if c >= num_classes {
                return Err(ModelError::InvalidInput(format!("label {label} needs more than {num_classes} classes")));
            }
            onehot[(b * num_classes + c) * nv + v] = T::one();
        }
    }
    Ok((Tensor::new(&[n, 1, s, s, s], density)?, Tensor::new(&[n, num_classes, s, s, s], onehot)?))
}
