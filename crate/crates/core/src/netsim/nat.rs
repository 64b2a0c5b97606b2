use std::collections::BTreeSet;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use super::Datagram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NatMode {
    None,
    FullCone,
    AddressRestricted,
    PortRestricted,
    Symmetric,
}

impl NatMode {
    pub const ALL: [NatMode; 5] = [
        NatMode::None,
        NatMode::FullCone,
        NatMode::AddressRestricted,
        NatMode::PortRestricted,
        NatMode::Symmetric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NatMode::None => "none",
            NatMode::FullCone => "full-cone",
            NatMode::AddressRestricted => "address-restricted",
            NatMode::PortRestricted => "port-restricted",
            NatMode::Symmetric => "symmetric",
        }
    }
}

impl fmt::Display for NatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NatMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown NAT mode '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NatPolicy {
    pub mode: NatMode,
    pub mapping_ttl_ms: u64,
}

impl NatPolicy {
    pub const DEFAULT_TTL_MS: u64 = 120_000;

    pub fn new(mode: NatMode) -> Self {
        NatPolicy {
            mode,
            mapping_ttl_ms: Self::DEFAULT_TTL_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Outbound,
    Inbound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NatBinding {
    pub internal: SocketAddrV4,
    pub external: SocketAddrV4,
    /// Symmetric mode keeps one binding per destination.
    pub remote: Option<SocketAddrV4>,
    pub permitted_peers: BTreeSet<(Ipv4Addr, Option<u16>)>,
    pub last_used: u64,
}

/// A single gateway translating one private side to one public address.
#[derive(Debug, Clone)]
pub struct Nat {
    policy: NatPolicy,
    external_ip: Ipv4Addr,
    bindings: Vec<NatBinding>,
    next_port: u16,
}

const FIRST_EXTERNAL_PORT: u16 = 40000;

impl Nat {
    pub fn new(policy: NatPolicy, external_ip: Ipv4Addr) -> Self {
        Nat {
            policy,
            external_ip,
            bindings: Vec::new(),
            next_port: FIRST_EXTERNAL_PORT,
        }
    }

    pub fn policy(&self) -> NatPolicy {
        self.policy
    }

    pub fn external_ip(&self) -> Ipv4Addr {
        self.external_ip
    }

    pub fn bindings(&self) -> &[NatBinding] {
        &self.bindings
    }

    pub fn translate(
        &mut self,
        dgram: Datagram,
        direction: Direction,
        now: u64,
    ) -> Option<Datagram> {
        match direction {
            Direction::Outbound => Some(self.translate_outbound(dgram, now)),
            Direction::Inbound => self.translate_inbound(dgram, now),
        }
    }

    fn expire(&mut self, now: u64) {
        let ttl = self.policy.mapping_ttl_ms;
        self.bindings
            .retain(|b| now.saturating_sub(b.last_used) <= ttl);
    }

    fn allocate_port(&mut self) -> u16 {
        loop {
            let port = self.next_port;
            self.next_port = if self.next_port == u16::MAX {
                FIRST_EXTERNAL_PORT
            } else {
                self.next_port + 1
            };
            if !self.bindings.iter().any(|b| b.external.port() == port) {
                return port;
            }
        }
    }

    pub fn translate_outbound(&mut self, mut dgram: Datagram, now: u64) -> Datagram {
        if self.policy.mode == NatMode::None {
            return dgram;
        }
        self.expire(now);
        let mode = self.policy.mode;
        let remote = (mode == NatMode::Symmetric).then_some(dgram.dst);
        let idx = match self
            .bindings
            .iter()
            .position(|b| b.internal == dgram.src && b.remote == remote)
        {
            Some(idx) => idx,
            None => {
                let port = self.allocate_port();
                self.bindings.push(NatBinding {
                    internal: dgram.src,
                    external: SocketAddrV4::new(self.external_ip, port),
                    remote,
                    permitted_peers: BTreeSet::new(),
                    last_used: now,
                });
                self.bindings.len() - 1
            }
        };
        let binding = &mut self.bindings[idx];
        let peer = match mode {
            NatMode::AddressRestricted => (*dgram.dst.ip(), None),
            _ => (*dgram.dst.ip(), Some(dgram.dst.port())),
        };
        binding.permitted_peers.insert(peer);
        binding.last_used = now;
        dgram.src = binding.external;
        dgram
    }

    pub fn translate_inbound(&mut self, mut dgram: Datagram, now: u64) -> Option<Datagram> {
        if self.policy.mode == NatMode::None {
            return Some(dgram);
        }
        self.expire(now);
        let src = dgram.src;
        let binding = self.bindings.iter().find(|b| b.external == dgram.dst)?;
        let allowed = match self.policy.mode {
            NatMode::None | NatMode::FullCone => true,
            NatMode::AddressRestricted => binding.permitted_peers.contains(&(*src.ip(), None)),
            NatMode::PortRestricted => binding
                .permitted_peers
                .contains(&(*src.ip(), Some(src.port()))),
            NatMode::Symmetric => binding.remote == Some(src),
        };
        if !allowed {
            return None;
        }
        dgram.dst = binding.internal;
        Some(dgram)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> SocketAddrV4 {
        s.parse().unwrap()
    }

    fn dgram(src: &str, dst: &str) -> Datagram {
        Datagram {
            src: addr(src),
            dst: addr(dst),
            bytes: vec![0],
            inject_time: 0,
        }
    }

    fn nat(mode: NatMode) -> Nat {
        Nat::new(NatPolicy::new(mode), "203.0.113.1".parse().unwrap())
    }

    #[test]
    fn outbound_rewrites_source_and_reuses_binding() {
        let mut n = nat(NatMode::PortRestricted);
        let out = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:4433"), 0);
        assert_eq!(out.src, addr("203.0.113.1:40000"));
        let again = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:2345"), 1);
        assert_eq!(again.src, out.src);
        let other = n.translate_outbound(dgram("192.168.1.3:1234", "108.110.11.12:4433"), 1);
        assert_eq!(other.src, addr("203.0.113.1:40001"));
    }

    #[test]
    fn port_restricted_filters_new_server_port() {
        let mut n = nat(NatMode::PortRestricted);
        let out = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:4433"), 0);
        let ext = out.src.to_string();
        assert!(n
            .translate_inbound(dgram("108.110.11.12:2345", &ext), 5)
            .is_none());
        let back = n
            .translate_inbound(dgram("108.110.11.12:4433", &ext), 5)
            .unwrap();
        assert_eq!(back.dst, addr("192.168.1.2:1234"));
    }

    #[test]
    fn full_cone_forwards_anything_mapped() {
        let mut n = nat(NatMode::FullCone);
        let out = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:4433"), 0);
        let ext = out.src.to_string();
        assert!(n
            .translate_inbound(dgram("108.110.11.12:2345", &ext), 1)
            .is_some());
        assert!(n.translate_inbound(dgram("9.9.9.9:1", &ext), 1).is_some());
        // nothing mapped on this port
        assert!(n
            .translate_inbound(dgram("9.9.9.9:1", "203.0.113.1:50000"), 1)
            .is_none());
    }

    #[test]
    fn symmetric_uses_one_binding_per_destination() {
        let mut n = nat(NatMode::Symmetric);
        let a = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:4433"), 0);
        let b = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:2345"), 0);
        assert_ne!(a.src, b.src);
        let a_ext = a.src.to_string();
        assert!(n
            .translate_inbound(dgram("108.110.11.12:2345", &a_ext), 1)
            .is_none());
        assert!(n
            .translate_inbound(dgram("108.110.11.12:4433", &a_ext), 1)
            .is_some());
    }

    #[test]
    fn bindings_expire_after_ttl() {
        let mut n = Nat::new(
            NatPolicy {
                mode: NatMode::FullCone,
                mapping_ttl_ms: 100,
            },
            "203.0.113.1".parse().unwrap(),
        );
        let out = n.translate_outbound(dgram("192.168.1.2:1234", "108.110.11.12:4433"), 0);
        let ext = out.src.to_string();
        assert!(n
            .translate_inbound(dgram("108.110.11.12:4433", &ext), 100)
            .is_some());
        assert!(n
            .translate_inbound(dgram("108.110.11.12:4433", &ext), 101)
            .is_none());
        assert!(n.bindings().is_empty());
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in NatMode::ALL {
            assert_eq!(mode.as_str().parse::<NatMode>().unwrap(), mode);
        }
        assert!("cone".parse::<NatMode>().is_err());
    }
}
