//! Synthetic datasets and the primitive meshes they are built on.
//!
//! The [`shapes`] submodule provides deterministic triangle-mesh generators
//! (cylinder tube, icosphere, torus) used both as dataset substrates and as
//! fixtures in conformance tests. The dataset machinery itself — generation,
//! on-disk layout, splits — lives here and in [`synth`].

pub mod shapes;
pub mod synth;

pub use shapes::{cylinder_tube, icosphere, torus};
pub use synth::{
    generate, load_external, save_dataset, BaseShape, DataError, Dataset, DatasetRecord,
    PlantedMaps, Split, SyntheticSpec,
};
