//! Live session service: streams scene-graph snapshots and deltas to
//! browser clients over a websocket and accepts operator room commands.

pub mod hub;
pub mod protocol;
pub mod server;

pub use hub::Hub;
pub use protocol::{decode, encode, Message, Mirror, PROTOCOL_VERSION};
