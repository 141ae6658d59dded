pub mod camera;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod ply;
pub mod sh;

pub use error::{Error, Result};
pub mod par;
pub mod raster;
pub mod dataset;
pub mod field;
pub mod init;
pub mod densify;
pub mod loss;
pub mod analysis;
pub mod optimize;
pub mod equivalence;
pub mod synthetic;
pub mod gradcheck;
