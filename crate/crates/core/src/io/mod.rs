//! On-disk formats: frame directories, weight containers and exports.

pub mod export;
pub mod frames;
pub mod weights;

pub use export::{export_ply, ply_bytes, read_json, write_json, GroundTruth, MapExport, PlyFormat};
pub use frames::{read_sequence, write_frame, Frame, SequenceReader};
pub use weights::{load_weights, save_weights, DType, ModelWeights, TensorStore};
