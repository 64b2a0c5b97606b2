//! Runs endpoint state machines over real OS datagram sockets.
//!
//! This is a demo boundary, not a hardened stack: sockets are non-blocking
//! and [`UdpHost::poll`] is meant to be called in a loop. Sockets sharing a
//! port are bound with `SO_REUSEADDR`, so the kernel applies the same
//! connected-over-unconnected preference the simulator models.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::time::Instant;

use socket2::{Domain, Protocol, Socket, Type};

use crate::dispatch::{DispatchError, IfaceId, Interface, SendError, SocketId};
use crate::transport::{Endpoint, TimerId, Transport};

const RECV_BUF_LEN: usize = 1 << 16;

struct Bound {
    socket: UdpSocket,
    peer: Option<SocketAddrV4>,
}

pub struct UdpHost {
    epoch: Instant,
    interfaces: Vec<Interface>,
    sockets: BTreeMap<SocketId, Bound>,
    next_socket: u32,
    timers: BTreeMap<TimerId, u64>,
    trace: Vec<String>,
}

impl UdpHost {
    /// `ips` become interfaces `if0`, `if1`, ... and must be local addresses.
    pub fn new(ips: &[Ipv4Addr]) -> Self {
        UdpHost {
            epoch: Instant::now(),
            interfaces: ips
                .iter()
                .enumerate()
                .map(|(i, &ip)| Interface {
                    id: IfaceId(i as u32),
                    ip,
                    up: true,
                })
                .collect(),
            sockets: BTreeMap::new(),
            next_socket: 0,
            timers: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    pub fn start(&mut self, ep: &mut dyn Endpoint) {
        ep.start(self);
    }

    /// Fires due timers and delivers queued datagrams. Returns how many
    /// callbacks ran, so callers can back off when idle.
    pub fn poll(&mut self, ep: &mut dyn Endpoint) -> io::Result<usize> {
        let mut work = 0;
        let now = self.now();
        let due: Vec<TimerId> = self
            .timers
            .iter()
            .filter(|(_, &at)| at <= now)
            .map(|(&id, _)| id)
            .collect();
        for id in due {
            // an earlier callback may have re-armed or cancelled it
            if self.timers.get(&id).is_some_and(|&at| at <= now) {
                self.timers.remove(&id);
                ep.on_timer(self, id);
                work += 1;
            }
        }
        let mut buf = vec![0u8; RECV_BUF_LEN];
        let ids: Vec<SocketId> = self.sockets.keys().copied().collect();
        for id in ids {
            while let Some(bound) = self.sockets.get(&id) {
                match bound.socket.recv_from(&mut buf) {
                    Ok((n, SocketAddr::V4(src))) => {
                        ep.on_datagram(self, id, src, buf[..n].to_vec());
                        work += 1;
                    }
                    Ok(_) => {}
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    // ICMP errors surface here on connected sockets
                    Err(e) if e.kind() == ErrorKind::ConnectionRefused => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(work)
    }

    /// Drains endpoint trace lines, prefixed with `t=<ms>`.
    pub fn take_trace(&mut self) -> Vec<String> {
        std::mem::take(&mut self.trace)
    }

    pub fn local_addr(&self, socket: SocketId) -> Option<SocketAddrV4> {
        match self.sockets.get(&socket)?.socket.local_addr().ok()? {
            SocketAddr::V4(a) => Some(a),
            SocketAddr::V6(_) => None,
        }
    }

    fn open(
        &mut self,
        local: SocketAddrV4,
        peer: Option<SocketAddrV4>,
    ) -> Result<SocketId, DispatchError> {
        if local.port() == 0 {
            return Err(DispatchError::ZeroPort);
        }
        if !self.interfaces.iter().any(|i| i.ip == *local.ip()) && !local.ip().is_unspecified() {
            return Err(DispatchError::ForeignAddress(*local.ip()));
        }
        let os = |e: io::Error| match e.kind() {
            ErrorKind::AddrInUse => DispatchError::AddrInUse(local.to_string()),
            _ => DispatchError::Os(e.to_string()),
        };
        let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP)).map_err(os)?;
        socket.set_reuse_address(true).map_err(os)?;
        socket.bind(&SocketAddr::V4(local).into()).map_err(os)?;
        if let Some(peer) = peer {
            socket.connect(&SocketAddr::V4(peer).into()).map_err(os)?;
        }
        socket.set_nonblocking(true).map_err(os)?;
        let id = SocketId(self.next_socket);
        self.next_socket += 1;
        self.sockets.insert(
            id,
            Bound {
                socket: socket.into(),
                peer,
            },
        );
        Ok(id)
    }
}

impl Transport for UdpHost {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn bind(&mut self, local: SocketAddrV4) -> Result<SocketId, DispatchError> {
        self.open(local, None)
    }

    fn bind_connected(
        &mut self,
        local: SocketAddrV4,
        peer: SocketAddrV4,
    ) -> Result<SocketId, DispatchError> {
        self.open(local, Some(peer))
    }

    fn connect(&mut self, socket: SocketId, peer: SocketAddrV4) -> Result<(), DispatchError> {
        let bound = self
            .sockets
            .get_mut(&socket)
            .ok_or(DispatchError::UnknownSocket(socket))?;
        bound
            .socket
            .connect(peer)
            .map_err(|e| DispatchError::Os(e.to_string()))?;
        bound.peer = Some(peer);
        Ok(())
    }

    fn close(&mut self, socket: SocketId) {
        self.sockets.remove(&socket);
    }

    fn port_in_use(&self, port: u16) -> bool {
        self.sockets
            .values()
            .any(|b| b.socket.local_addr().is_ok_and(|a| a.port() == port))
    }

    fn send_to(
        &mut self,
        socket: SocketId,
        dst: SocketAddrV4,
        bytes: Vec<u8>,
    ) -> Result<(), SendError> {
        let bound = self
            .sockets
            .get(&socket)
            .ok_or(SendError::UnknownSocket(socket))?;
        let sent = match bound.peer {
            Some(peer) if peer != dst => return Err(SendError::NotPeer(dst)),
            Some(_) => bound.socket.send(&bytes),
            None => bound.socket.send_to(&bytes, dst),
        };
        sent.map(drop).map_err(|_| SendError::NoRoute)
    }

    fn set_timer(&mut self, timer: TimerId, at_ms: u64) {
        self.timers.insert(timer, at_ms);
    }

    fn cancel_timer(&mut self, timer: TimerId) {
        self.timers.remove(&timer);
    }

    fn interfaces(&self) -> Vec<Interface> {
        self.interfaces.clone()
    }

    fn trace(&mut self, line: String) {
        let now = self.now();
        self.trace.push(format!("t={now} {line}"));
    }
}
