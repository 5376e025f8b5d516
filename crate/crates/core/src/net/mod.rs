//! Architectures, parameter storage, whole-network passes and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod network;
pub mod registry;

pub use arch::{ArchConfig, ArchitectureSpec, LayerSpec, NormMode, Preset};
pub use checkpoint::{fold_checkpoint, read_checkpoint, write_checkpoint};
pub use network::{ConvLayerInfo, ConvTap, ForwardPass, NetOptions, Network, OutputNorm, WeightTransform};
pub use registry::{Gradients, ParamEntry, ParamId, ParamKind, ParamRegistry};
