//! Synthetic spatial point patterns from log-Gaussian Cox processes, with
//! CPO-based disclosure risk and model-based pMSE utility.

pub mod data_io;
pub mod error;
pub mod geom;
pub mod mcmc;
pub mod mesh;
pub mod model;
pub mod pipeline;
pub mod risk;
pub mod snow;
pub mod sparse;
pub mod synthesis;
pub mod utility;

pub use error::{Error, Result};
pub use geom::{Point, Rect};
