//! Independent reference models used as test oracles.

#![allow(dead_code)]

use std::collections::HashSet;
use std::net::{Ipv4Addr, SocketAddrV4};

use fastresume::dispatch::{Delivery, DeliveryReason, HostStack, SocketId};

pub const HOST_A: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);
pub const HOST_B: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 2);

pub fn sa(ip: Ipv4Addr, port: u16) -> SocketAddrV4 {
    SocketAddrV4::new(ip, port)
}

/// One socket of an enumerated table: bound address and optional peer.
pub type SocketSpec = (SocketAddrV4, Option<SocketAddrV4>);

/// Every socket an enumerated table may contain: {A, wildcard} on one port,
/// each unconnected or connected to one of two peers.
pub fn socket_universe() -> Vec<SocketSpec> {
    let p1 = sa(Ipv4Addr::new(198, 51, 100, 1), 1111);
    let p2 = sa(Ipv4Addr::new(198, 51, 100, 2), 2222);
    let mut out = Vec::new();
    for local in [sa(HOST_A, 4433), sa(Ipv4Addr::UNSPECIFIED, 4433)] {
        for peer in [None, Some(p1), Some(p2)] {
            out.push((local, peer));
        }
    }
    out
}

/// Datagram (src, dst) pairs probed against every table.
pub fn probes() -> Vec<(SocketAddrV4, SocketAddrV4)> {
    let sources = [
        sa(Ipv4Addr::new(198, 51, 100, 1), 1111),
        sa(Ipv4Addr::new(198, 51, 100, 2), 2222),
        // same ip as the first peer, different port
        sa(Ipv4Addr::new(198, 51, 100, 1), 3333),
        sa(Ipv4Addr::new(203, 0, 113, 9), 1111),
    ];
    let dsts = [sa(HOST_A, 4433), sa(HOST_B, 4433), sa(HOST_A, 9999)];
    let mut out = Vec::new();
    for src in sources {
        for dst in dsts {
            out.push((src, dst));
        }
    }
    out
}

/// Scores every eligible socket and returns the index of the best one.
/// A socket is eligible when its port matches, its address equals the
/// destination or is the wildcard, and it is unconnected or connected to
/// exactly the source. A connected match outranks any address match.
pub fn reference_dispatch(
    table: &[SocketSpec],
    src: SocketAddrV4,
    dst: SocketAddrV4,
) -> Option<(usize, bool)> {
    let mut best: Option<(u8, usize, bool)> = None;
    for (idx, (local, peer)) in table.iter().enumerate() {
        if local.port() != dst.port() {
            continue;
        }
        let exact = local.ip() == dst.ip();
        if !exact && !local.ip().is_unspecified() {
            continue;
        }
        if peer.is_some_and(|p| p != src) {
            continue;
        }
        let score = 2 * u8::from(peer.is_some()) + u8::from(exact);
        match best {
            Some((s, _, _)) if s > score => {}
            Some((s, _, _)) if s == score => panic!("ambiguous table {table:?}"),
            _ => best = Some((score, idx, peer.is_some())),
        }
    }
    best.map(|(_, idx, connected)| (idx, connected))
}

/// Builds the table on a real stack; returns the stack and the ids in table order.
pub fn build_stack(table: &[SocketSpec]) -> (HostStack, Vec<SocketId>) {
    let mut stack = HostStack::with_interfaces(&[HOST_A, HOST_B]);
    let ids = table
        .iter()
        .map(|&(local, peer)| match peer {
            Some(p) => stack.bind_connected(local, p),
            None => stack.bind(local),
        })
        .collect::<Result<Vec<_>, _>>()
        .expect("universe tables are always bindable");
    (stack, ids)
}

/// Outcome of one probe on a real stack, in the oracle's terms.
pub fn observed(ids: &[SocketId], delivery: Delivery) -> Option<(usize, bool)> {
    match delivery {
        Delivery::Dropped => None,
        Delivery::Socket(id, reason) => {
            let idx = ids.iter().position(|&i| i == id).expect("known socket");
            Some((idx, reason == DeliveryReason::ConnectedMatch))
        }
    }
}

/// All subsets of the socket universe, as tables.
pub fn all_tables() -> Vec<Vec<SocketSpec>> {
    let universe = socket_universe();
    (0u32..1 << universe.len())
        .map(|mask| {
            universe
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| *s)
                .collect()
        })
        .collect()
}

/// Sliding-window replay reference: remembers every accepted sequence
/// number and accepts a new one only if unseen and no more than 63 below
/// the highest accepted.
#[derive(Debug, Default)]
pub struct ReferenceWindow {
    seen: HashSet<u64>,
    highest: Option<u64>,
}

impl ReferenceWindow {
    pub const SIZE: u64 = 64;

    pub fn accept(&mut self, seq: u64) -> bool {
        if self.seen.contains(&seq) {
            return false;
        }
        if let Some(h) = self.highest {
            if seq + Self::SIZE <= h {
                return false;
            }
        }
        self.seen.insert(seq);
        self.highest = Some(self.highest.map_or(seq, |h| h.max(seq)));
        true
    }
}
