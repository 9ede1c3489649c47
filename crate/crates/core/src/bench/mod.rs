//! Desk-scale benchmark: procedural shapes, corruptions, a trained
//! reference model and accuracy evaluation.

mod corrupt;
mod data;
mod train;

pub use corrupt::{corrupt, mean_l2_distance, Corruption, CorruptionKind};
pub use data::{
    generate_dataset, load_dataset, read_dataset, save_dataset, write_dataset, ShapeDataset,
    IMAGE_SIZE, MAX_CLASSES,
};
pub use train::{
    evaluate, evaluate_raw, predict, train_deployed, train_network, ArchSpec, TrainConfig,
    TrainReport,
};
