//! Server endpoint for the three session variants.
//!
//! All variants share the stateless cookie exchange on the welcome socket.
//! They differ in where the per-client socket lives once the cookie checks
//! out:
//!
//! * `Baseline`: a socket on the welcome port connected to the client. A
//!   client that changes address lands on the welcome socket and is dropped.
//! * `Ipc`: a non-connected socket on a freshly allocated port. The
//!   ServerHello already comes from that port.
//! * `Tcs`: a temporary socket on the welcome port connected to the client
//!   carries the handshake, then an AddressRedirect moves the client to a
//!   non-connected socket on a fresh port. The redirect is retransmitted
//!   until the client shows up there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::dispatch::{DispatchError, SocketId};
use crate::session::{generate_cookie, session_id_for, verify_cookie, Role, ServerSecret, Session};
use crate::transport::{Endpoint, TimerId, Transport};
use crate::wire::{
    AckPayload, CookiePayload, DataPayload, MessageType, RedirectPayload, SessionId, WireMessage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Ipc,
    Tcs,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Ipc, Variant::Tcs];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ipc => "ipc",
            Variant::Tcs => "tcs",
        }
    }

    /// Whether established sessions survive a client address change.
    pub fn resumable(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub welcome_addr: SocketAddrV4,
    pub variant: Variant,
    pub idle_timeout_ms: u64,
    pub redirect_retx_ms: u64,
    pub port_range: (u16, u16),
    /// Seeds the cookie secret and the nonce stream.
    pub seed: u64,
}

impl ServerConfig {
    pub const DEFAULT_IDLE_TIMEOUT_MS: u64 = 1000;
    pub const DEFAULT_REDIRECT_RETX_MS: u64 = 500;
    pub const DEFAULT_PORT_RANGE: (u16, u16) = (20000, 29999);

    pub fn new(welcome_addr: SocketAddrV4, variant: Variant) -> Self {
        ServerConfig {
            welcome_addr,
            variant,
            idle_timeout_ms: Self::DEFAULT_IDLE_TIMEOUT_MS,
            redirect_retx_ms: Self::DEFAULT_REDIRECT_RETX_MS,
            port_range: Self::DEFAULT_PORT_RANGE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServerError {
    #[error("port range {0}-{1} exhausted")]
    PortsExhausted(u16, u16),
    #[error("invalid server configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// Hands out ports sequentially from a range, skipping ports in use.
#[derive(Debug, Clone)]
pub struct PortAllocator {
    first: u16,
    last: u16,
    next: u16,
}

impl PortAllocator {
    pub fn new((first, last): (u16, u16)) -> Self {
        PortAllocator {
            first,
            last,
            next: first,
        }
    }

    pub fn allocate(&mut self, in_use: impl Fn(u16) -> bool) -> Result<u16, ServerError> {
        let span = u32::from(self.last - self.first) + 1;
        for _ in 0..span {
            let port = self.next;
            self.next = if self.next == self.last {
                self.first
            } else {
                self.next + 1
            };
            if !in_use(port) {
                return Ok(port);
            }
        }
        Err(ServerError::PortsExhausted(self.first, self.last))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    AwaitHello,
    AwaitCookieHello,
    AwaitHandshakeAck,
    Redirecting,
    Established,
    Closed,
}

impl ServerPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ServerPhase::AwaitHello => "await_hello",
            ServerPhase::AwaitCookieHello => "await_cookie_hello",
            ServerPhase::AwaitHandshakeAck => "await_handshake_ack",
            ServerPhase::Redirecting => "redirecting",
            ServerPhase::Established => "established",
            ServerPhase::Closed => "closed",
        }
    }
}

impl fmt::Display for ServerPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ServerSession {
    pub phase: ServerPhase,
    pub sess: Session,
    /// TCS only: connected socket on the welcome port used for the handshake.
    pub temp: Option<SocketId>,
    pub com: Option<SocketId>,
    pub com_addr: Option<SocketAddrV4>,
    pub client_hint: SocketAddrV4,
    pub redirect_transmissions: u32,
    timer_base: TimerId,
    seen_messages: BTreeSet<u64>,
}

impl ServerSession {
    fn idle_timer(&self) -> TimerId {
        self.timer_base
    }

    fn redirect_timer(&self) -> TimerId {
        self.timer_base + 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub hello_verify_sent: u64,
    pub cookie_rejects: u64,
    pub server_hellos: Vec<SocketAddrV4>,
    pub handshakes_completed: u64,
    pub redirect_transmissions: u64,
    pub data_received: u64,
    pub unique_messages: u64,
    pub acks_sent: u64,
    pub sessions_closed: u64,
    pub dropped: u64,
}

pub struct Server {
    cfg: ServerConfig,
    secret: ServerSecret,
    nonces: ChaCha20Rng,
    ports: PortAllocator,
    welcome: Option<SocketId>,
    sessions: BTreeMap<SessionId, ServerSession>,
    by_socket: BTreeMap<SocketId, SessionId>,
    timer_owner: BTreeMap<TimerId, SessionId>,
    next_timer: TimerId,
    stats: ServerStats,
}

impl Server {
    pub fn new(cfg: ServerConfig) -> Result<Self, ServerError> {
        if cfg.idle_timeout_ms == 0 || cfg.redirect_retx_ms == 0 {
            return Err(ServerError::InvalidConfig("timeouts must be positive"));
        }
        if cfg.port_range.0 == 0 || cfg.port_range.0 > cfg.port_range.1 {
            return Err(ServerError::InvalidConfig("bad port range"));
        }
        let secret = ServerSecret::from_seed(cfg.seed);
        let nonces = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6e63_6573_0000);
        let ports = PortAllocator::new(cfg.port_range);
        Ok(Server {
            cfg,
            secret,
            nonces,
            ports,
            welcome: None,
            sessions: BTreeMap::new(),
            by_socket: BTreeMap::new(),
            timer_owner: BTreeMap::new(),
            next_timer: 1,
            stats: ServerStats::default(),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn welcome_socket(&self) -> Option<SocketId> {
        self.welcome
    }

    pub fn sessions(&self) -> impl Iterator<Item = (&SessionId, &ServerSession)> {
        self.sessions.iter()
    }

    pub fn session(&self, id: &SessionId) -> Option<&ServerSession> {
        self.sessions.get(id)
    }

    /// Next port for a per-client socket, as `port_allocator` would pick it.
    pub fn allocate_port(&mut self, io: &dyn Transport) -> Result<u16, ServerError> {
        self.ports.allocate(|p| io.port_in_use(p))
    }

    fn server_ip(&self, io: &dyn Transport) -> Ipv4Addr {
        let ip = *self.cfg.welcome_addr.ip();
        if ip.is_unspecified() {
            io.interfaces()
                .first()
                .map(|i| i.ip)
                .unwrap_or(Ipv4Addr::UNSPECIFIED)
        } else {
            ip
        }
    }

    fn trace(&self, io: &mut dyn Transport, sid: SessionId, event: impl fmt::Display) {
        io.trace(format!("SRV {} {} {}", self.cfg.variant, sid, event));
    }

    fn transition(&mut self, io: &mut dyn Transport, sid: SessionId, to: ServerPhase) {
        let Some(s) = self.sessions.get_mut(&sid) else {
            return;
        };
        let from = s.phase;
        s.phase = to;
        self.trace(io, sid, format_args!("{from}->{to}"));
    }

    fn send_protected(
        &mut self,
        io: &mut dyn Transport,
        sid: SessionId,
        socket: SocketId,
        dst: SocketAddrV4,
        msg: WireMessage,
    ) {
        let Some(s) = self.sessions.get_mut(&sid) else {
            return;
        };
        let msg = s.sess.protect(msg);
        if let Ok(bytes) = msg.encode() {
            // a failed send is indistinguishable from loss; retransmission covers it
            let _ = io.send_to(socket, dst, bytes);
        }
    }

    fn drop_msg(&mut self, io: &mut dyn Transport, why: impl fmt::Display) {
        self.stats.dropped += 1;
        io.trace(format!("SRV {} - drop {}", self.cfg.variant, why));
    }

    fn on_welcome(&mut self, io: &mut dyn Transport, src: SocketAddrV4, msg: WireMessage) {
        if msg.msg_type != MessageType::ClientHello {
            self.drop_msg(io, format_args!("{} from {src} on welcome", msg.msg_type));
            return;
        }
        if msg.payload.is_empty() {
            let mut nonce = [0u8; 8];
            self.nonces.fill_bytes(&mut nonce);
            let cookie = generate_cookie(&self.secret, src, nonce);
            let reply = WireMessage::new(
                MessageType::HelloVerifyRequest,
                CookiePayload {
                    cookie: cookie.value,
                    nonce,
                }
                .to_bytes(),
            );
            if let (Some(welcome), Ok(bytes)) = (self.welcome, reply.encode()) {
                let _ = io.send_to(welcome, src, bytes);
                self.stats.hello_verify_sent += 1;
            }
            return;
        }
        let Ok(payload) = CookiePayload::from_bytes(&msg.payload) else {
            self.drop_msg(io, format_args!("malformed cookie from {src}"));
            return;
        };
        if !verify_cookie(&self.secret, src, &payload.nonce, &payload.cookie) {
            self.stats.cookie_rejects += 1;
            self.drop_msg(io, format_args!("bad cookie from {src}"));
            return;
        }
        let sid = session_id_for(&payload.cookie);
        if self.sessions.contains_key(&sid) {
            self.drop_msg(io, format_args!("duplicate cookie hello for {sid}"));
            return;
        }
        let mut sess = Session::from_cookie(&payload.cookie, Role::Server);
        if let Err(reason) = sess.unprotect(&msg, src) {
            self.drop_msg(io, format_args!("cookie hello from {src}: {reason}"));
            return;
        }
        if let Err(err) = self.open_session(io, sid, sess, src) {
            self.drop_msg(io, format_args!("cannot open session for {src}: {err}"));
        }
    }

    fn open_session(
        &mut self,
        io: &mut dyn Transport,
        sid: SessionId,
        sess: Session,
        client: SocketAddrV4,
    ) -> Result<(), ServerError> {
        let welcome_addr = self.cfg.welcome_addr;
        // A new handshake from the same address supersedes any unfinished one
        // (whose TCS temp socket would otherwise block the new bind) and, in
        // the baseline, the old connected channel.
        let baseline = self.cfg.variant == Variant::Baseline;
        let stale: Vec<SessionId> = self
            .sessions
            .iter()
            .filter(|(_, s)| {
                s.client_hint == client && (baseline || s.phase != ServerPhase::Established)
            })
            .map(|(id, _)| *id)
            .collect();
        for old in stale {
            self.close_session(io, old);
        }
        let (hello_socket, hello_src, temp, com, com_addr) = match self.cfg.variant {
            Variant::Baseline => {
                let com = io.bind_connected(welcome_addr, client)?;
                (com, welcome_addr, None, Some(com), Some(welcome_addr))
            }
            Variant::Ipc => {
                let port = self.allocate_port(io)?;
                let addr = SocketAddrV4::new(self.server_ip(io), port);
                let com = io.bind(addr)?;
                (com, addr, None, Some(com), Some(addr))
            }
            Variant::Tcs => {
                let temp = io.bind_connected(welcome_addr, client)?;
                (temp, welcome_addr, Some(temp), None, None)
            }
        };
        let timer_base = self.next_timer;
        self.next_timer += 2;
        self.timer_owner.insert(timer_base, sid);
        self.timer_owner.insert(timer_base + 1, sid);
        self.by_socket.insert(hello_socket, sid);
        self.sessions.insert(
            sid,
            ServerSession {
                phase: ServerPhase::AwaitCookieHello,
                sess,
                temp,
                com,
                com_addr,
                client_hint: client,
                redirect_transmissions: 0,
                timer_base,
                seen_messages: BTreeSet::new(),
            },
        );
        self.transition(io, sid, ServerPhase::AwaitHandshakeAck);
        self.stats.server_hellos.push(hello_src);
        self.send_protected(
            io,
            sid,
            hello_socket,
            client,
            WireMessage::new(MessageType::ServerHello, Vec::new()),
        );
        // baseline idle teardown, or expiry of a half-open IPC/TCS handshake
        let at = io.now() + self.cfg.idle_timeout_ms;
        io.set_timer(timer_base, at);
        Ok(())
    }

    fn close_session(&mut self, io: &mut dyn Transport, sid: SessionId) {
        self.transition(io, sid, ServerPhase::Closed);
        let Some(s) = self.sessions.remove(&sid) else {
            return;
        };
        for socket in [s.temp, s.com].into_iter().flatten() {
            io.close(socket);
            self.by_socket.remove(&socket);
        }
        io.cancel_timer(s.idle_timer());
        io.cancel_timer(s.redirect_timer());
        self.timer_owner.remove(&s.idle_timer());
        self.timer_owner.remove(&s.redirect_timer());
        self.stats.sessions_closed += 1;
    }

    fn send_redirect(&mut self, io: &mut dyn Transport, sid: SessionId) {
        let Some(s) = self.sessions.get_mut(&sid) else {
            return;
        };
        let (Some(temp), Some(addr)) = (s.temp, s.com_addr) else {
            return;
        };
        s.redirect_transmissions += 1;
        let client = s.client_hint;
        let timer = s.redirect_timer();
        self.stats.redirect_transmissions += 1;
        let msg = WireMessage::new(
            MessageType::AddressRedirect,
            RedirectPayload { addr }.to_bytes(),
        );
        self.send_protected(io, sid, temp, client, msg);
        let at = io.now() + self.cfg.redirect_retx_ms;
        io.set_timer(timer, at);
    }

    fn on_session_message(
        &mut self,
        io: &mut dyn Transport,
        sid: SessionId,
        socket: SocketId,
        src: SocketAddrV4,
        msg: WireMessage,
    ) {
        let variant = self.cfg.variant;
        let idle_timeout = self.cfg.idle_timeout_ms;
        let Some(s) = self.sessions.get_mut(&sid) else {
            return;
        };
        if let Err(reason) = s.sess.unprotect(&msg, src) {
            self.drop_msg(io, format_args!("{} from {src}: {reason}", msg.msg_type));
            return;
        }
        if variant == Variant::Baseline {
            let at = io.now() + idle_timeout;
            io.set_timer(s.idle_timer(), at);
        }
        match s.phase {
            ServerPhase::AwaitHandshakeAck => {
                if msg.msg_type != MessageType::HandshakeAck {
                    return;
                }
                let idle_timer = s.idle_timer();
                self.send_protected(
                    io,
                    sid,
                    socket,
                    src,
                    WireMessage::new(MessageType::ServerFinished, Vec::new()),
                );
                match variant {
                    Variant::Baseline => self.establish(io, sid),
                    Variant::Ipc => {
                        io.cancel_timer(idle_timer);
                        self.establish(io, sid);
                    }
                    Variant::Tcs => {
                        io.cancel_timer(idle_timer);
                        if let Err(err) = self.open_final_socket(io, sid) {
                            self.drop_msg(io, format_args!("cannot open final socket: {err}"));
                            self.close_session(io, sid);
                            return;
                        }
                        self.transition(io, sid, ServerPhase::Redirecting);
                        self.send_redirect(io, sid);
                    }
                }
            }
            ServerPhase::Redirecting => {
                if Some(socket) != s.com {
                    return;
                }
                let redirect_timer = s.redirect_timer();
                if let Some(temp) = s.temp.take() {
                    io.close(temp);
                    self.by_socket.remove(&temp);
                }
                io.cancel_timer(redirect_timer);
                self.establish(io, sid);
                self.on_established_message(io, sid, socket, src, msg);
            }
            ServerPhase::Established => self.on_established_message(io, sid, socket, src, msg),
            ServerPhase::AwaitHello | ServerPhase::AwaitCookieHello | ServerPhase::Closed => {}
        }
    }

    fn open_final_socket(
        &mut self,
        io: &mut dyn Transport,
        sid: SessionId,
    ) -> Result<(), ServerError> {
        let port = self.allocate_port(io)?;
        let addr = SocketAddrV4::new(self.server_ip(io), port);
        let com = io.bind(addr)?;
        self.by_socket.insert(com, sid);
        if let Some(s) = self.sessions.get_mut(&sid) {
            s.com = Some(com);
            s.com_addr = Some(addr);
        }
        Ok(())
    }

    fn establish(&mut self, io: &mut dyn Transport, sid: SessionId) {
        self.stats.handshakes_completed += 1;
        self.transition(io, sid, ServerPhase::Established);
    }

    fn on_established_message(
        &mut self,
        io: &mut dyn Transport,
        sid: SessionId,
        socket: SocketId,
        src: SocketAddrV4,
        msg: WireMessage,
    ) {
        if msg.msg_type != MessageType::Data {
            return;
        }
        let Ok(data) = DataPayload::from_bytes(&msg.payload) else {
            self.drop_msg(io, format_args!("malformed data from {src}"));
            return;
        };
        self.stats.data_received += 1;
        if let Some(s) = self.sessions.get_mut(&sid) {
            s.client_hint = src;
            if s.seen_messages.insert(data.message_id) {
                self.stats.unique_messages += 1;
            }
        }
        let ack = AckPayload {
            acked_seq: msg.seq,
            message_id: data.message_id,
        };
        self.send_protected(
            io,
            sid,
            socket,
            src,
            WireMessage::new(MessageType::DataAck, ack.to_bytes()),
        );
        self.stats.acks_sent += 1;
    }
}

impl Endpoint for Server {
    fn start(&mut self, io: &mut dyn Transport) {
        match io.bind(self.cfg.welcome_addr) {
            Ok(socket) => {
                self.welcome = Some(socket);
                io.trace(format!(
                    "SRV {} - listening on {}",
                    self.cfg.variant, self.cfg.welcome_addr
                ));
            }
            Err(err) => io.trace(format!(
                "SRV {} - cannot bind welcome: {err}",
                self.cfg.variant
            )),
        }
    }

    fn on_datagram(
        &mut self,
        io: &mut dyn Transport,
        socket: SocketId,
        src: SocketAddrV4,
        bytes: Vec<u8>,
    ) {
        let msg = match WireMessage::decode(&bytes) {
            Ok(msg) => msg,
            Err(err) => {
                self.drop_msg(io, format_args!("undecodable datagram from {src}: {err}"));
                return;
            }
        };
        // A connected socket on the welcome port shadows the welcome socket for
        // its peer, so a restarted handshake from that peer lands here.
        let restart = msg.msg_type == MessageType::ClientHello
            && self
                .by_socket
                .get(&socket)
                .and_then(|sid| self.sessions.get(sid))
                .is_some_and(|s| {
                    s.temp == Some(socket)
                        || (self.cfg.variant == Variant::Baseline && s.com == Some(socket))
                });
        if Some(socket) == self.welcome || restart {
            self.on_welcome(io, src, msg);
        } else if let Some(sid) = self.by_socket.get(&socket).copied() {
            self.on_session_message(io, sid, socket, src, msg);
        } else {
            self.drop_msg(
                io,
                format_args!("{} from {src} on unowned {socket}", msg.msg_type),
            );
        }
    }

    fn on_timer(&mut self, io: &mut dyn Transport, timer: TimerId) {
        let Some(sid) = self.timer_owner.get(&timer).copied() else {
            return;
        };
        let Some(s) = self.sessions.get(&sid) else {
            return;
        };
        if timer == s.redirect_timer() {
            if s.phase == ServerPhase::Redirecting {
                self.send_redirect(io, sid);
            }
        } else if self.cfg.variant == Variant::Baseline || s.phase == ServerPhase::AwaitHandshakeAck
        {
            self.close_session(io, sid);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_allocation_skips_used_ports() {
        let mut ports = PortAllocator::new((20000, 29999));
        assert_eq!(ports.allocate(|_| false), Ok(20000));
        assert_eq!(ports.allocate(|p| p == 20001), Ok(20002));
        assert_eq!(ports.allocate(|_| false), Ok(20003));
    }

    #[test]
    fn allocation_wraps_and_exhausts() {
        let mut ports = PortAllocator::new((100, 102));
        assert_eq!(ports.allocate(|_| false), Ok(100));
        assert_eq!(ports.allocate(|_| false), Ok(101));
        assert_eq!(ports.allocate(|_| false), Ok(102));
        assert_eq!(ports.allocate(|p| p == 101), Ok(100));
        assert_eq!(
            ports.allocate(|_| true),
            Err(ServerError::PortsExhausted(100, 102))
        );
    }

    #[test]
    fn allocation_is_deterministic() {
        let run = || {
            let mut ports = PortAllocator::new((20000, 29999));
            (0..50)
                .map(|i| ports.allocate(|p| p % 7 == i % 7).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ServerConfig::new("10.0.0.1:4433".parse().unwrap(), Variant::Tcs);
        cfg.redirect_retx_ms = 0;
        assert!(Server::new(cfg.clone()).is_err());
        cfg.redirect_retx_ms = 500;
        cfg.port_range = (10, 9);
        assert!(Server::new(cfg).is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("dtls".parse::<Variant>().is_err());
    }
}
