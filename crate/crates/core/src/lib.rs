//! Differentiable Gaussian splatting for scenes seen through water.
//!
//! Gaussians are projected and alpha-blended front to back; before blending,
//! each Gaussian's colour is attenuated and mixed with backscatter using
//! per-channel coefficients predicted by a small MLP from the Gaussian's
//! depth and the camera position. Every stage has hand-written adjoints so
//! the scene, the medium network and per-frame uncertainty weights can be
//! optimized together.

pub mod error;
pub mod gradcheck;
pub mod image;
pub mod interp;
pub mod io;
pub mod losses;
pub mod medium;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Plane};
pub use medium::{BackscatterMode, FrameWeight, MediumNet, MediumSample};
pub use render::{render, render_backward, GradientBuffer, RenderOutput, RenderUpstream};
pub use scene::{CameraView, Gaussian3D, GaussianCloud, Intrinsics, Pose, Splat2D};
