//! Crystal unit cells to voxel grids and back.
//!
//! The pipeline reads P1 crystal files ([`ingest`]), places atoms in a 10 Å sampling
//! cube ([`lattice`]), renders Gaussian density and species grids ([`voxelizer`]),
//! turns class scores back into atoms ([`segmenter`]) and scores the result
//! ([`metrics`]). File formats live in [`io`].

pub mod elements;
pub mod ingest;
pub mod io;
pub mod lattice;
pub mod metrics;
pub mod segmenter;
pub mod voxelizer;

pub use ingest::{CrystalFile, DatasetManifest, Representation, Split};
pub use io::AtomRecord;
pub use lattice::{AtomSite, PlacedAtom, UnitCell};
pub use voxelizer::{ClassProbGrid, DensityGrid, GridSpec, SpeciesGrid, NUM_CLASSES};
