//! Wire codec, in-process and TCP links, and traffic accounting.

pub mod codec;
pub mod counter;
pub mod link;

pub use codec::{decode, encode, Control, MsgType, WireMessage};
pub use counter::{ClientTraffic, Direction, Observer, Peer, Tally, TrafficCounter};
pub use link::{connect, Endpoint, Link, LinkPair, MessageTrace, Side, TraceEntry, TransportKind};
