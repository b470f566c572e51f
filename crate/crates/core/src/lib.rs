pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mip;
pub mod model;
pub mod phantom;
pub mod train;
pub mod volume;

pub use error::{CoreError, Result};
pub use volume::{Dims, PatchSpec, VesselMask, Volume3D};
