//! Orchestration behind the `maskgst` binary: an output directory per
//! experiment, one method per subcommand, and frame-grid rendering.

mod grid;
mod workspace;

pub use grid::{render_frame_grid, GAP, SCALE};
pub use workspace::{sweep_table, SweepRow, Workspace, SIDECAR};
