//! Reading and writing every external artifact: splat PLY scenes, camera
//! JSON, 16-bit mask PNGs, `SPLF` feature tables, query sets and the binary
//! index/cluster/contribution dumps.

mod dumps;
mod features;
mod ply;
mod views;

pub use dumps::*;
pub use features::*;
pub use ply::*;
pub use views::*;
