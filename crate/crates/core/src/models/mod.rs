//! Differentiable building blocks: tensors, layers, encoders, the temporal
//! U-Net denoiser, named parameter storage and the optimizer.

pub mod encoders;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod unet;

pub use encoders::{
    detect_contact, gate_torque, guidance_weight, softmax2, ContactGate, Encoder, FeatureVector,
    GuidanceWeight, Modality, Router, ScalePredictor, FEATURE_DIM,
};
pub use optim::AdamW;
pub use params::{ParamId, ParameterSet, Tensor};
pub use tensor::{Mat, Scalar};
pub use unet::{TemporalUnet, UnetDims};
