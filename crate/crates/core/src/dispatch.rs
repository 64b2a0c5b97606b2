//! Emulated kernel UDP demultiplexing for one host.
//!
//! A host owns interfaces and sockets. Several sockets may share a local
//! address as long as at most one of them is non-connected; a connected
//! socket only ever sees datagrams from its peer and always wins over the
//! non-connected socket on the same address.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SocketId(pub u32);

impl fmt::Display for SocketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sock{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IfaceId(pub u32);

impl fmt::Display for IfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "if{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("address {0} already in use")]
    AddrInUse(String),
    #[error("port 0 cannot be bound")]
    ZeroPort,
    #[error("{0} is not an address of this host")]
    ForeignAddress(Ipv4Addr),
    #[error("unknown interface {0}")]
    UnknownInterface(IfaceId),
    #[error("unknown socket {0}")]
    UnknownSocket(SocketId),
    /// Reported by OS-backed transports.
    #[error("socket error: {0}")]
    Os(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("no route: source address is not on an up interface")]
    NoRoute,
    #[error("unknown socket {0}")]
    UnknownSocket(SocketId),
    #[error("connected socket cannot send to {0}")]
    NotPeer(SocketAddrV4),
}

#[derive(Debug, Clone)]
pub struct SocketEntry {
    pub id: SocketId,
    pub local: SocketAddrV4,
    pub peer: Option<SocketAddrV4>,
    pub rx_queue: VecDeque<(SocketAddrV4, Vec<u8>)>,
}

impl SocketEntry {
    pub fn is_connected(&self) -> bool {
        self.peer.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interface {
    pub id: IfaceId,
    pub ip: Ipv4Addr,
    pub up: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryReason {
    ConnectedMatch,
    Unconnected,
    None,
}

impl fmt::Display for DeliveryReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeliveryReason::ConnectedMatch => "connected-match",
            DeliveryReason::Unconnected => "unconnected",
            DeliveryReason::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Socket(SocketId, DeliveryReason),
    Dropped,
}

impl Delivery {
    pub fn socket(&self) -> Option<SocketId> {
        match self {
            Delivery::Socket(id, _) => Some(*id),
            Delivery::Dropped => None,
        }
    }

    pub fn reason(&self) -> DeliveryReason {
        match self {
            Delivery::Socket(_, reason) => *reason,
            Delivery::Dropped => DeliveryReason::None,
        }
    }
}

/// `DISPATCH <dst> from <src> -> {socket-id|DROP} reason=...`
pub fn dispatch_line(dst: SocketAddrV4, src: SocketAddrV4, delivery: Delivery) -> String {
    let target = match delivery.socket() {
        Some(id) => id.to_string(),
        None => "DROP".to_string(),
    };
    format!(
        "DISPATCH {dst} from {src} -> {target} reason={}",
        delivery.reason()
    )
}

fn wildcard(port: u16) -> SocketAddrV4 {
    SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, port)
}

#[derive(Debug, Clone, Default)]
pub struct HostStack {
    sockets: BTreeMap<SocketId, SocketEntry>,
    connected: BTreeMap<(SocketAddrV4, SocketAddrV4), SocketId>,
    unconnected: BTreeMap<SocketAddrV4, SocketId>,
    interfaces: Vec<Interface>,
    next_socket: u32,
}

impl HostStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_interfaces(ips: &[Ipv4Addr]) -> Self {
        let mut stack = Self::new();
        for ip in ips {
            stack.add_interface(*ip);
        }
        stack
    }

    pub fn add_interface(&mut self, ip: Ipv4Addr) -> IfaceId {
        let id = IfaceId(self.interfaces.len() as u32);
        self.interfaces.push(Interface { id, ip, up: true });
        id
    }

    pub fn interfaces(&self) -> &[Interface] {
        &self.interfaces
    }

    pub fn interface(&self, id: IfaceId) -> Option<&Interface> {
        self.interfaces.iter().find(|i| i.id == id)
    }

    /// Whether `ip` is owned by any interface, up or down.
    pub fn owns_ip(&self, ip: Ipv4Addr) -> bool {
        self.interfaces.iter().any(|i| i.ip == ip)
    }

    /// Whether `ip` is owned by an interface that is currently up.
    pub fn ip_is_up(&self, ip: Ipv4Addr) -> bool {
        self.interfaces.iter().any(|i| i.ip == ip && i.up)
    }

    fn check_local(&self, local: SocketAddrV4) -> Result<(), DispatchError> {
        if local.port() == 0 {
            return Err(DispatchError::ZeroPort);
        }
        if !local.ip().is_unspecified() && !self.owns_ip(*local.ip()) {
            return Err(DispatchError::ForeignAddress(*local.ip()));
        }
        Ok(())
    }

    fn insert(&mut self, local: SocketAddrV4, peer: Option<SocketAddrV4>) -> SocketId {
        let id = SocketId(self.next_socket);
        self.next_socket += 1;
        self.sockets.insert(
            id,
            SocketEntry {
                id,
                local,
                peer,
                rx_queue: VecDeque::new(),
            },
        );
        match peer {
            Some(peer) => self.connected.insert((local, peer), id),
            None => self.unconnected.insert(local, id),
        };
        id
    }

    /// Registers a non-connected socket on `local`.
    pub fn bind(&mut self, local: SocketAddrV4) -> Result<SocketId, DispatchError> {
        self.check_local(local)?;
        if self.unconnected.contains_key(&local) {
            return Err(DispatchError::AddrInUse(local.to_string()));
        }
        Ok(self.insert(local, None))
    }

    /// Registers a socket on `local` that only exchanges datagrams with `peer`.
    pub fn bind_connected(
        &mut self,
        local: SocketAddrV4,
        peer: SocketAddrV4,
    ) -> Result<SocketId, DispatchError> {
        self.check_local(local)?;
        if self.connected.contains_key(&(local, peer)) {
            return Err(DispatchError::AddrInUse(format!("{local} -> {peer}")));
        }
        Ok(self.insert(local, Some(peer)))
    }

    /// Turns a non-connected socket into one connected to `peer`.
    pub fn connect(&mut self, id: SocketId, peer: SocketAddrV4) -> Result<(), DispatchError> {
        let entry = self
            .sockets
            .get(&id)
            .ok_or(DispatchError::UnknownSocket(id))?;
        let local = entry.local;
        if entry.peer == Some(peer) {
            return Ok(());
        }
        if self.connected.contains_key(&(local, peer)) {
            return Err(DispatchError::AddrInUse(format!("{local} -> {peer}")));
        }
        match entry.peer {
            Some(old) => {
                self.connected.remove(&(local, old));
            }
            None => {
                self.unconnected.remove(&local);
            }
        }
        self.connected.insert((local, peer), id);
        let entry = self.sockets.get_mut(&id).expect("checked above");
        entry.peer = Some(peer);
        entry.rx_queue.retain(|(src, _)| *src == peer);
        Ok(())
    }

    pub fn close(&mut self, id: SocketId) -> Option<SocketEntry> {
        let entry = self.sockets.remove(&id)?;
        match entry.peer {
            Some(peer) => self.connected.remove(&(entry.local, peer)),
            None => self.unconnected.remove(&entry.local),
        };
        Some(entry)
    }

    pub fn socket(&self, id: SocketId) -> Option<&SocketEntry> {
        self.sockets.get(&id)
    }

    pub fn sockets(&self) -> impl Iterator<Item = &SocketEntry> {
        self.sockets.values()
    }

    /// Whether any socket, connected or not, is bound to `port`.
    pub fn port_in_use(&self, port: u16) -> bool {
        self.sockets.values().any(|s| s.local.port() == port)
    }

    /// Picks the receiving socket for a datagram and enqueues it there.
    pub fn deliver(&mut self, src: SocketAddrV4, dst: SocketAddrV4, bytes: Vec<u8>) -> Delivery {
        let delivery = self.lookup(src, dst);
        if let Delivery::Socket(id, _) = delivery {
            let entry = self.sockets.get_mut(&id).expect("index and table agree");
            entry.rx_queue.push_back((src, bytes));
        }
        delivery
    }

    /// The socket `deliver` would choose, without enqueueing anything.
    pub fn lookup(&self, src: SocketAddrV4, dst: SocketAddrV4) -> Delivery {
        let any = wildcard(dst.port());
        if let Some(id) = self
            .connected
            .get(&(dst, src))
            .or_else(|| self.connected.get(&(any, src)))
        {
            return Delivery::Socket(*id, DeliveryReason::ConnectedMatch);
        }
        if let Some(id) = self
            .unconnected
            .get(&dst)
            .or_else(|| self.unconnected.get(&any))
        {
            return Delivery::Socket(*id, DeliveryReason::Unconnected);
        }
        Delivery::Dropped
    }

    pub fn recv(&mut self, id: SocketId) -> Option<(SocketAddrV4, Vec<u8>)> {
        self.sockets.get_mut(&id)?.rx_queue.pop_front()
    }

    /// Resolves the source address for a send from `id` to `dst`.
    pub fn source_for(&self, id: SocketId, dst: SocketAddrV4) -> Result<SocketAddrV4, SendError> {
        let entry = self.sockets.get(&id).ok_or(SendError::UnknownSocket(id))?;
        if let Some(peer) = entry.peer {
            if peer != dst {
                return Err(SendError::NotPeer(dst));
            }
        }
        let ip = if entry.local.ip().is_unspecified() {
            self.interfaces
                .iter()
                .find(|i| i.up)
                .map(|i| i.ip)
                .ok_or(SendError::NoRoute)?
        } else if self.ip_is_up(*entry.local.ip()) {
            *entry.local.ip()
        } else {
            return Err(SendError::NoRoute);
        };
        Ok(SocketAddrV4::new(ip, entry.local.port()))
    }

    /// Brings an interface down or up; `new_ip` renumbers it.
    pub fn set_interface(
        &mut self,
        iface: IfaceId,
        up: bool,
        new_ip: Option<Ipv4Addr>,
    ) -> Result<Interface, DispatchError> {
        let entry = self
            .interfaces
            .iter_mut()
            .find(|i| i.id == iface)
            .ok_or(DispatchError::UnknownInterface(iface))?;
        entry.up = up;
        if let Some(ip) = new_ip {
            entry.ip = ip;
        }
        Ok(*entry)
    }
}
