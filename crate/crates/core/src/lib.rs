//! Single-image intrinsic decomposition (albedo, normals, spherical-harmonic
//! lighting) and relighting under a Lambertian image model.

pub mod color;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod image;
pub mod io;
pub mod lightsolve;
pub mod metrics;
pub mod losses;
pub mod nn;
pub mod render;
pub mod sh;
pub mod synth;

pub use error::{Error, Result};
pub use image::{ColorSpace, ImagePlane, Mask, NormalMap};
pub use sh::ShLighting;
