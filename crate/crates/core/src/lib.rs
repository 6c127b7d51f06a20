//! Mean-BOLD synthesis from T1-weighted MRI: a frozen ViT encoder, slice-wise
//! attention fusion and a multi-scale convolutional decoder.

pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod slicing;
pub mod synth;
pub mod training;
pub mod volume_io;

pub use dataset::{load_manifest, ManifestEntry, Subject};
pub use encoder::{Encoder, EncoderConfig, SkipSet, TokenTensor};
pub use error::{Error, Result};
pub use losses::{LossReport, LossSet, LossWeights};
pub use metrics::{EvalResult, Psnr, VolumePredictor};
pub use model::{Ablation, Backbone, BoldNet, ModelConfig};
pub use slicing::SliceWindow;
pub use synth::PhantomSpec;
pub use training::{Checkpoint, TrainConfig};
pub use volume_io::{Volume3D, Volume4D};
pub use candle_core::{DType, Device, Tensor, Var};
