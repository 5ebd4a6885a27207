//! Loading, preprocessing and synthesizing volumetric samples.

pub mod io;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use io::{load_volume, read_grid, save_volume, DatasetManifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, generate_synthetic_phantom, synthesize_dataset, Phantom, PhantomConfig};
pub use preprocess::{preprocess, Normalization, PreprocessConfig};
pub use volume::{IntensityDomain, VolumeSample};
