//! Single-session HTTP service for slice-wise label refinement: windowed
//! slices, adaptive projections, brush and flood edits with undo, and a
//! voxel cloud for the 3D preview.

pub mod api;
pub mod error;
pub mod session;

pub use api::{router, serve};
pub use error::{LabelError, Result};
pub use session::{BrushMode, Connectivity, Delta, LabelSession, Overlay, View, MAX_HISTORY};
