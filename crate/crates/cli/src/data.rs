use std::path::{Path, PathBuf};

use crystvox_core::ingest::{parse_crystal_file, ManifestEntry};
use crystvox_core::io::{write_atomic, GridFile};
use crystvox_core::lattice::PlacedAtom;
use crystvox_core::voxelizer::{atoms_in_box, density_from_atoms, place_sample, species_from_atoms};
use crystvox_core::{DatasetManifest, DensityGrid, GridSpec, Representation, SpeciesGrid, Split, UnitCell};
use crystvox_models::{ModelConfig, TrainConfig, TrainSample};
use crystvox_tensor::{checkpoint, Element, ParamStore, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A voxelized `(cell, seed)` pair together with the atoms inside the box.
pub struct VoxelSample {
    pub name: String,
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub density: DensityGrid,
    pub species: SpeciesGrid,
    pub truth: Vec<PlacedAtom>,
}

pub fn load_manifest(path: &Path) -> CliResult<(DatasetManifest, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest = DatasetManifest::from_json(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

pub fn resolve(base: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// File-name-safe version of a structure id.
pub fn sanitize(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "cell".into()
    } else {
        s
    }
}

pub fn load_cell(path: &Path) -> CliResult<UnitCell> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let file = parse_crystal_file(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(UnitCell::from_crystal(&file)?)
}

/// Voxelizes every `(entry, seed)` of the manifest that passes `keep`.
pub fn voxelize_manifest(
    manifest: &DatasetManifest,
    base: &Path,
    representation: Representation,
    spec: &GridSpec,
    keep: impl Fn(Split) -> bool + Sync,
) -> CliResult<Vec<VoxelSample>> {
    let jobs: Vec<(&ManifestEntry, usize, u64)> = manifest
        .entries
        .iter()
        .filter(|e| keep(e.split))
        .flat_map(|e| e.seeds.iter().enumerate().map(move |(k, &s)| (e, k, s)))
        .collect();
    jobs.par_iter()
        .map(|&(entry, k, seed)| {
            let cell = load_cell(&resolve(base, entry))?;
            let atoms = place_sample(&cell, representation, seed, spec)?;
            Ok(VoxelSample {
                name: format!("{}-{k}", sanitize(&entry.id)),
                id: entry.id.clone(),
                split: entry.split,
                seed,
                density: density_from_atoms(&atoms, spec),
                species: species_from_atoms(&atoms, spec)?,
                truth: atoms_in_box(&atoms, spec.box_side),
            })
        })
        .collect()
}

pub fn train_samples(samples: &[VoxelSample]) -> CliResult<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| TrainSample::from_grids(&s.density, &s.species).map_err(CliError::from))
        .collect()
}

pub fn grid_spec(side: usize) -> GridSpec {
    GridSpec { side_voxels: side, ..GridSpec::default() }
}

pub fn read_density(path: &Path) -> CliResult<DensityGrid> {
    let file = GridFile::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(file.into_density(GridSpec::default())?)
}

pub fn write_density(path: &Path, grid: &DensityGrid) -> CliResult<()> {
    Ok(GridFile::from_density(grid).save(path)?)
}

/// File name up to the first dot.
pub fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().filter(|s| !s.is_empty()).unwrap_or("grid").to_string()
}

/// Stacks density grids into a `[N, 1, S, S, S]` tensor.
pub fn density_batch<T: Element>(grids: &[DensityGrid]) -> CliResult<Tensor<T>> {
    let side = grids.first().map(|g| g.spec.side_voxels).ok_or_else(|| CliError::Usage("no input grids".into()))?;
    let mut data = Vec::with_capacity(grids.len() * side.pow(3));
    for g in grids {
        if g.spec.side_voxels != side {
            return Err(CliError::Data("input grids differ in size".into()));
        }
        data.extend(g.values.iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(&[grids.len(), 1, side, side, side], data)?)
}

/// The `index`-th grid of a `[N, C, S, S, S]` tensor's first channel.
pub fn grid_from_batch<T: Element>(t: &Tensor<T>, index: usize, spec: &GridSpec) -> DensityGrid {
    let row = t.row_len();
    let nv = spec.num_voxels();
    let values = t.data()[index * row..index * row + nv].iter().map(|v| v.as_f64()).collect();
    DensityGrid { spec: *spec, values }
}

/// Sidecar describing a checkpoint: architecture and the configuration it was trained with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps: u64,
}

pub fn card_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_model<T: Element>(store: &ParamStore<T>, card: &ModelCard, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save(store, path)?;
    let mut text = serde_json::to_string_pretty(card)?;
    text.push('\n');
    write_atomic(&card_path(path), text.as_bytes())?;
    Ok(())
}

pub fn load_model<T: Element>(path: &Path) -> CliResult<(ParamStore<T>, ModelCard)> {
    let store = checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let card_file = card_path(path);
    let text = std::fs::read_to_string(&card_file)
        .map_err(|e| CliError::Data(format!("missing model card {}: {e}", card_file.display())))?;
    Ok((store, serde_json::from_str(&text)?))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_and_names() {
        assert_eq!(stem(Path::new("/a/b/nacl-0.density.vxgr")), "nacl-0");
        assert_eq!(sanitize("Fe2 O3/x"), "Fe2_O3_x");
        assert_eq!(card_path(Path::new("out/model.vxck")), Path::new("out/model.vxck.json"));
    }

    #[test]
    fn model_round_trip_keeps_the_card() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vxck");
        let cfg = ModelConfig::tiny();
        let store = crystvox_models::train::init_params::<f32>(&cfg, 1);
        let card = ModelCard { model: cfg.clone(), train: TrainConfig::default(), steps: 7 };
        save_model(&store, &card, &path).unwrap();
        let (back, card2) = load_model::<f32>(&path).unwrap();
        assert_eq!(card2.model, cfg);
        assert_eq!(card2.steps, 7);
        assert_eq!(back.len(), store.len());
    }
}
