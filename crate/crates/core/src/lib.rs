//! Safety-aware retraining of neural-network controllers for planar polygonal
//! robots.
//!
//! The safe configuration set is covered by an adaptive box partition, each
//! cell's one-step reachable set is over-approximated with interval bound
//! propagation, and the controller is retrained against a penalty on the part
//! of those reachable sets not covered by safe cells.

pub mod geom;
pub mod interval;
pub mod neuralnet;
pub mod partition;
pub mod reach;
pub mod train;
pub mod data;
pub mod cli;

/// Two 2 × 2.8 rooms joined by a 1 × 0.8 corridor, with a 0.4 × 0.3 robot.
pub const TWO_ROOM_WORLD: &str = include_str!("../assets/two_room.json");
