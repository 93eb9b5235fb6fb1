//! Toy-scale masked autoencoder.
//!
//! Linear patch embedding with fixed 2-D sine/cosine positions, a pre-norm
//! MHSA encoder, and a light decoder that sees mask tokens at the hidden
//! positions. Gradients are computed by hand in `f64`.

pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use model::{reconstruction_loss, FeatureTape, MaeConfig, MaeModel};
pub use params::{AdamW, Grads, ParamStore};
pub use tensor::Mat;
pub use train::{mask_plan_for, prepare_samples, pretrain, EpochLoss, PretrainSample, Pretrainer};
