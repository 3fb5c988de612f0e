//! Adversarial reconstruction: networks, losses, training and inference.

pub mod losses;
pub mod nets;
pub mod train;

pub use losses::{
    critic_loss, gaussian_level_weights, generator_loss, gradient_penalty, laplacian_loss, Adversary, LossTerms,
    LossVariant, LossWeights, ReconContext, ReconLoss,
};
pub use nets::{Critic, CriticSpec, Generator, GeneratorSpec};
pub use train::{load_generator, reconstruct, reconstruct_from_checkpoint, TrainConfig, TrainData, Trainer};
