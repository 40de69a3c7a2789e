//! Sector: replicated file storage over a Chord ring, with Sphere stream
//! processing on top.

pub mod angle;
pub mod bench;
pub mod cli;
pub mod client;
pub mod clock;
pub mod cluster;
pub mod node;
pub mod routing;
pub mod sphere;
pub mod transport;
pub mod wire;
