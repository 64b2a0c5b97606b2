//! Session resumption across client address changes for a DTLS-style
//! datagram protocol, with a deterministic network simulator to measure it.

pub mod bench;
pub mod client;
pub mod dispatch;
pub mod netsim;
pub mod server;
pub mod session;
pub mod transport;
pub mod udp;
pub mod wire;
