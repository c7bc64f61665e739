//! Differentiable 3D Gaussian splatting that renders RGB images and
//! N-dimensional feature maps in one fused pass, distills a teacher
//! feature field into per-Gaussian features, and supports promptable
//! selection and editing of the resulting scene.

pub mod camera;
pub mod decoder;
pub mod error;
pub mod gsplat;
pub mod loss;
pub mod oracle;
pub mod projection;
pub mod prompt;
pub mod raster;
pub mod scene;
pub mod session;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use camera::CameraView;
pub use decoder::ChannelDecoder;
pub use error::{Error, Result};
pub use raster::{render, render_backward, GradientBuffer, RenderOutput, RenderSettings, RenderState};
pub use scene::{Gaussian, GaussianCloud};
pub use tensor::FeatureMap;
