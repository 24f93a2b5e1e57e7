//! Synthetic registration pairs, dataset manifests and point-cloud files.

pub mod io;
pub mod manifest;
pub mod pair;
pub mod shapes;

pub use io::{format_ply, format_xyz, parse_ply, parse_xyz, read_cloud, write_cloud, CloudFormat};
pub use manifest::{generate_dataset, generate_pairs, DatasetConfig, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use pair::{make_pair, pair_overlap, PairSpec, ScenePair, OVERLAP_TOLERANCE};
pub use shapes::{generate_shape, ShapeKind};
