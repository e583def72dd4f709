//! Learned refiners: segmentation and box regression networks over
//! object-centric point sets, their losses, training loop and model files.

pub mod layers;
pub mod model;
pub mod nets;
pub mod train;

pub use layers::Mode;
pub use model::{load_checkpoint, load_model, save_checkpoint, save_model, train_refiner, NetSpec, RefinerModel, RefinerTrainConfig};
pub use nets::{
    DynamicArch, DynamicLoss, DynamicNet, DynamicSample, HeadWeights, NetPrediction, PointBatch, StaticArch, StaticLoss,
    StaticNet, StaticSample, Weights,
};
pub use train::{
    adam_step, augment, dynamic_input, static_input, temporal_encode, train_dynamic, train_static, AdamConfig, AdamState,
    AugmentConfig, Augmentation, SampleConfig, TrainConfig, TrainState,
};
