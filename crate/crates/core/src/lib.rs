//! Text-to-video toy diffusion with region-routed cross-attention.
//!
//! The crate is organized bottom-up: `tensor` provides a reverse-mode
//! autograd engine over flat f32 buffers, `text`/`layout`/`attention`/`unet`
//! build the conditional denoiser, `diffusion` the noise schedule and
//! sampler, `scene` the procedural sprite world used for data synthesis,
//! `customize` the subject-binding finetune objectives, and `eval` the
//! metric suite that scores generated videos against reference subjects.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod customize;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod layout;
pub mod lora;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod text;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
