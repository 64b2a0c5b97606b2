//! The contract between endpoint state machines and whatever moves their
//! datagrams: the deterministic simulator or real OS sockets.

use std::any::Any;
use std::net::SocketAddrV4;

use crate::dispatch::{DispatchError, Interface, SendError, SocketId};

/// Endpoint-chosen timer key. Setting a key that is already armed replaces it.
pub type TimerId = u64;

pub trait Transport {
    /// Current time in milliseconds.
    fn now(&self) -> u64;
    fn bind(&mut self, local: SocketAddrV4) -> Result<SocketId, DispatchError>;
    fn bind_connected(
        &mut self,
        local: SocketAddrV4,
        peer: SocketAddrV4,
    ) -> Result<SocketId, DispatchError>;
    fn connect(&mut self, socket: SocketId, peer: SocketAddrV4) -> Result<(), DispatchError>;
    fn close(&mut self, socket: SocketId);
    fn port_in_use(&self, port: u16) -> bool;
    fn send_to(
        &mut self,
        socket: SocketId,
        dst: SocketAddrV4,
        bytes: Vec<u8>,
    ) -> Result<(), SendError>;
    fn set_timer(&mut self, timer: TimerId, at_ms: u64);
    fn cancel_timer(&mut self, timer: TimerId);
    fn interfaces(&self) -> Vec<Interface>;
    fn trace(&mut self, line: String);
}

/// A protocol endpoint driven entirely by callbacks. Callbacks must not block.
pub trait Endpoint: Any {
    fn start(&mut self, io: &mut dyn Transport);
    fn on_datagram(
        &mut self,
        io: &mut dyn Transport,
        socket: SocketId,
        src: SocketAddrV4,
        bytes: Vec<u8>,
    );
    fn on_timer(&mut self, io: &mut dyn Transport, timer: TimerId);
    /// Called after an interface changed state; `iface` is the new state.
    fn on_interface(&mut self, _io: &mut dyn Transport, _iface: Interface) {}
}
