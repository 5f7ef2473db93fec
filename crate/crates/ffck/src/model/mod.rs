//! Toy decoder-only transformer: configuration, weight bundle, planted
//! circuit construction, forward pass with full activation capture, and the
//! on-disk checkpoint format.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod plant;

pub use bundle::{ComponentId, HeadWeights, LayerWeights, ModelBundle};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use forward::{answer_probability, forward, recombine, ActivationTrace};
pub use plant::{plant_model, PlantedSpec};
