//! Synthetic registration pairs and point/mesh file I/O.

pub mod dataset;
pub mod mesh;
pub mod pairs;
pub mod shapes;

pub use dataset::{generate, load_cloud, read_dataset, read_manifest, shape_counts, write_dataset, DataConfig, Dataset, Manifest, PairEntry, Role, MANIFEST_FILE};
pub use mesh::{load_mesh, Mesh};
pub use pairs::{make_pair, NoiseSpec, PairMode, PairSetting, RegistrationPair, Split, ViewpointMode};
pub use shapes::{sample_shape, ShapeKind};
