//! Compositional object light fields: single-image scene decomposition into
//! per-object light field networks, composed by a learned visibility network.

pub mod checkpoint;
pub mod compositor;
pub mod editor;
pub mod encoder;
pub mod error;
pub mod lfdecoder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raygeom;
pub mod scenegen;
pub mod train;
pub mod volbaseline;

pub use error::{ColfError, Result};
