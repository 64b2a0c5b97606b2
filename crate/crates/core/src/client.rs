//! Client endpoint and its stop-and-wait workload.
//!
//! The client completes a handshake, then sends `total_messages` Data
//! messages one at a time, each waiting for its DataAck. Every message
//! carries an application id so a retransmission (which always uses a fresh
//! sequence number) can be matched to its acknowledgment.
//!
//! On an interface change, resumable variants open a new socket on the new
//! address and resend the pending message straight to the server's
//! communication address. The baseline client also resends, but the server
//! no longer recognises the address; recovery waits for the application
//! timeout and a full new handshake.

use std::fmt;
use std::net::SocketAddrV4;

use thiserror::Error;

use crate::dispatch::{IfaceId, Interface, SocketId};
use crate::server::Variant;
use crate::session::{Role, Session};
use crate::transport::{Endpoint, TimerId, Transport};
use crate::wire::{
    AckPayload, CookiePayload, DataPayload, MessageType, RedirectPayload, WireMessage,
};

const APP_TIMER: TimerId = 1;
const PACE_TIMER: TimerId = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub server_welcome: SocketAddrV4,
    pub variant: Variant,
    pub app_timeout_ms: u64,
    pub total_messages: u64,
    pub payload_len: usize,
    /// Minimum spacing between the first transmissions of consecutive
    /// messages. Zero sends each message as soon as the previous is acked.
    pub send_interval_ms: u64,
    pub local_port: u16,
    /// Reuse `local_port` after a handover instead of taking a fresh one.
    pub keep_port_on_handover: bool,
}

impl ClientConfig {
    pub const DEFAULT_APP_TIMEOUT_MS: u64 = 1000;
    pub const DEFAULT_TOTAL_MESSAGES: u64 = 600;
    pub const DEFAULT_PAYLOAD_LEN: usize = 64;
    pub const DEFAULT_LOCAL_PORT: u16 = 1234;

    pub fn new(server_welcome: SocketAddrV4, variant: Variant) -> Self {
        ClientConfig {
            server_welcome,
            variant,
            app_timeout_ms: Self::DEFAULT_APP_TIMEOUT_MS,
            total_messages: Self::DEFAULT_TOTAL_MESSAGES,
            payload_len: Self::DEFAULT_PAYLOAD_LEN,
            send_interval_ms: 0,
            local_port: Self::DEFAULT_LOCAL_PORT,
            keep_port_on_handover: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("invalid client configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeStep {
    AwaitHelloVerify,
    AwaitServerHello,
    AwaitFinished,
    AwaitRedirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Idle,
    Handshaking(HandshakeStep),
    Established,
}

impl fmt::Display for ClientPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientPhase::Idle => f.write_str("idle"),
            ClientPhase::Handshaking(step) => write!(f, "handshaking({step:?})"),
            ClientPhase::Established => f.write_str("established"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inflight {
    pub message_id: u64,
    pub last_seq: Option<u64>,
    pub issued_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientMetrics {
    pub first_hello_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub handshakes_started: u64,
    pub handshakes_completed: u64,
    /// ClientHello and HandshakeAck messages sent after the first establishment.
    pub handshake_flights_after_establish: u64,
    pub data_sent: u64,
    pub retransmissions: u64,
    pub acks_received: u64,
    /// Active-interface shutdowns that hit an established, unfinished session.
    pub mid_session_handovers: u64,
    /// Time from each such shutdown to the next acknowledged message.
    pub recovery_latencies_ms: Vec<u64>,
    pub timeouts: u64,
}

impl ClientMetrics {
    pub fn wct_ms(&self) -> Option<u64> {
        Some(self.completed_at? - self.first_hello_at?)
    }
}

pub struct Client {
    cfg: ClientConfig,
    phase: ClientPhase,
    sess: Option<Session>,
    server_com_addr: Option<SocketAddrV4>,
    socket: Option<SocketId>,
    active_iface: Option<IfaceId>,
    acked_count: u64,
    next_message_id: u64,
    inflight: Option<Inflight>,
    last_issue_at: Option<u64>,
    ever_established: bool,
    port_offset: u16,
    recovering_since: Option<u64>,
    metrics: ClientMetrics,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        if cfg.total_messages == 0 {
            return Err(ClientError::InvalidConfig(
                "total_messages must be positive",
            ));
        }
        if cfg.app_timeout_ms == 0 {
            return Err(ClientError::InvalidConfig(
                "app_timeout_ms must be positive",
            ));
        }
        if cfg.local_port == 0 {
            return Err(ClientError::InvalidConfig("local_port must be non-zero"));
        }
        if cfg.payload_len < DataPayload::MIN_LEN {
            return Err(ClientError::InvalidConfig("payload_len below 8 bytes"));
        }
        Ok(Client {
            cfg,
            phase: ClientPhase::Idle,
            sess: None,
            server_com_addr: None,
            socket: None,
            active_iface: None,
            acked_count: 0,
            next_message_id: 0,
            inflight: None,
            last_issue_at: None,
            ever_established: false,
            port_offset: 0,
            recovering_since: None,
            metrics: ClientMetrics::default(),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn metrics(&self) -> &ClientMetrics {
        &self.metrics
    }

    pub fn acked_count(&self) -> u64 {
        self.acked_count
    }

    pub fn inflight(&self) -> Option<Inflight> {
        self.inflight
    }

    pub fn server_com_addr(&self) -> Option<SocketAddrV4> {
        self.server_com_addr
    }

    pub fn active_iface(&self) -> Option<IfaceId> {
        self.active_iface
    }

    pub fn session(&self) -> Option<&Session> {
        self.sess.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.metrics.completed_at.is_some()
    }

    fn trace(&self, io: &mut dyn Transport, event: impl fmt::Display) {
        io.trace(format!("CLI {} {}", self.cfg.variant, event));
    }

    fn local_port(&self) -> u16 {
        if self.cfg.keep_port_on_handover {
            self.cfg.local_port
        } else {
            self.cfg.local_port.wrapping_add(self.port_offset).max(1)
        }
    }

    fn active_interface(&self, io: &dyn Transport) -> Option<Interface> {
        let id = self.active_iface?;
        io.interfaces().into_iter().find(|i| i.id == id)
    }

    /// Makes the active interface an up one, preferring the current choice.
    fn select_interface(&mut self, io: &dyn Transport) -> Option<Interface> {
        if let Some(current) = self.active_interface(io).filter(|i| i.up) {
            return Some(current);
        }
        let next = io.interfaces().into_iter().find(|i| i.up)?;
        self.active_iface = Some(next.id);
        Some(next)
    }

    fn close_socket(&mut self, io: &mut dyn Transport) {
        if let Some(socket) = self.socket.take() {
            io.close(socket);
        }
    }

    fn count_flight(&mut self) {
        if self.ever_established {
            self.metrics.handshake_flights_after_establish += 1;
        }
    }

    fn send_raw(&mut self, io: &mut dyn Transport, dst: SocketAddrV4, msg: &WireMessage) -> bool {
        let (Some(socket), Ok(bytes)) = (self.socket, msg.encode()) else {
            return false;
        };
        io.send_to(socket, dst, bytes).is_ok()
    }

    fn arm_app_timer(&self, io: &mut dyn Transport) {
        let at = io.now() + self.cfg.app_timeout_ms;
        io.set_timer(APP_TIMER, at);
    }

    /// Sends a fresh ClientHello to the welcome address.
    pub fn start_handshake(&mut self, io: &mut dyn Transport) {
        self.close_socket(io);
        self.sess = None;
        self.server_com_addr = None;
        let Some(iface) = self.select_interface(io) else {
            self.phase = ClientPhase::Idle;
            self.trace(io, "no interface up, handshake deferred");
            return;
        };
        let local = SocketAddrV4::new(iface.ip, self.local_port());
        match io.bind(local) {
            Ok(socket) => self.socket = Some(socket),
            Err(err) => {
                self.phase = ClientPhase::Idle;
                self.trace(io, format_args!("cannot bind {local}: {err}"));
                return;
            }
        }
        self.phase = ClientPhase::Handshaking(HandshakeStep::AwaitHelloVerify);
        self.metrics.handshakes_started += 1;
        if self.metrics.first_hello_at.is_none() {
            self.metrics.first_hello_at = Some(io.now());
        }
        self.count_flight();
        let hello = WireMessage::new(MessageType::ClientHello, Vec::new());
        let welcome = self.cfg.server_welcome;
        self.send_raw(io, welcome, &hello);
        self.trace(io, format_args!("hello from {local}"));
        self.arm_app_timer(io);
    }

    fn establish(&mut self, io: &mut dyn Transport) {
        self.phase = ClientPhase::Established;
        self.ever_established = true;
        self.metrics.handshakes_completed += 1;
        if let (Some(socket), Some(com)) = (self.socket, self.server_com_addr) {
            let _ = io.connect(socket, com);
        }
        io.cancel_timer(APP_TIMER);
        self.trace(
            io,
            format_args!(
                "established server={}",
                self.server_com_addr
                    .map(|a| a.to_string())
                    .unwrap_or_default()
            ),
        );
        if self.inflight.is_some() {
            self.transmit(io);
            self.arm_app_timer(io);
        } else {
            self.schedule_next(io);
        }
    }

    fn schedule_next(&mut self, io: &mut dyn Transport) {
        if self.acked_count >= self.cfg.total_messages || self.inflight.is_some() {
            return;
        }
        let earliest = self
            .last_issue_at
            .map_or(0, |t| t + self.cfg.send_interval_ms);
        if earliest > io.now() {
            io.set_timer(PACE_TIMER, earliest);
        } else {
            self.issue_next(io);
        }
    }

    fn issue_next(&mut self, io: &mut dyn Transport) {
        let now = io.now();
        self.inflight = Some(Inflight {
            message_id: self.next_message_id,
            last_seq: None,
            issued_at: now,
        });
        self.next_message_id += 1;
        self.last_issue_at = Some(now);
        if self.phase == ClientPhase::Established {
            self.transmit(io);
        }
        self.arm_app_timer(io);
    }

    /// Sends the pending message under a fresh sequence number.
    fn transmit(&mut self, io: &mut dyn Transport) -> bool {
        let (Some(inflight), Some(com)) = (self.inflight, self.server_com_addr) else {
            return false;
        };
        let Some(sess) = self.sess.as_mut() else {
            return false;
        };
        let payload = DataPayload::patterned(inflight.message_id, self.cfg.payload_len);
        let msg = sess.protect(WireMessage::new(MessageType::Data, payload.to_bytes()));
        let seq = msg.seq;
        let sent = self.send_raw(io, com, &msg);
        if let Some(pending) = self.inflight.as_mut() {
            pending.last_seq = Some(seq);
        }
        if sent {
            self.metrics.data_sent += 1;
        }
        sent
    }

    fn retransmit(&mut self, io: &mut dyn Transport) {
        if self.inflight.is_none() {
            return;
        }
        self.metrics.retransmissions += 1;
        self.transmit(io);
    }

    /// Moves the session onto a new socket after an address change.
    fn resume_on_new_address(&mut self, io: &mut dyn Transport) {
        match self.phase {
            ClientPhase::Idle | ClientPhase::Handshaking(_) => {
                if !self.is_done() {
                    self.start_handshake(io);
                }
            }
            ClientPhase::Established => {
                if self.is_done() {
                    return;
                }
                let (Some(iface), Some(com)) = (self.select_interface(io), self.server_com_addr)
                else {
                    return;
                };
                self.close_socket(io);
                self.port_offset = self.port_offset.wrapping_add(1);
                let local = SocketAddrV4::new(iface.ip, self.local_port());
                match io.bind_connected(local, com) {
                    Ok(socket) => self.socket = Some(socket),
                    Err(err) => {
                        self.trace(io, format_args!("cannot bind {local}: {err}"));
                        return;
                    }
                }
                self.trace(io, format_args!("resume from {local}"));
                if self.inflight.is_some() {
                    self.retransmit(io);
                    if self.cfg.variant.resumable() {
                        self.arm_app_timer(io);
                    }
                }
            }
        }
    }

    fn on_message(&mut self, io: &mut dyn Transport, src: SocketAddrV4, msg: WireMessage) {
        use HandshakeStep::*;
        match (self.phase, msg.msg_type) {
            (ClientPhase::Handshaking(AwaitHelloVerify), MessageType::HelloVerifyRequest) => {
                let Ok(cookie) = CookiePayload::from_bytes(&msg.payload) else {
                    return;
                };
                let mut sess = Session::from_cookie(&cookie.cookie, Role::Client);
                let hello = sess.protect(WireMessage::new(
                    MessageType::ClientHello,
                    cookie.to_bytes(),
                ));
                self.sess = Some(sess);
                self.phase = ClientPhase::Handshaking(AwaitServerHello);
                self.count_flight();
                let welcome = self.cfg.server_welcome;
                self.send_raw(io, welcome, &hello);
                self.arm_app_timer(io);
            }
            (ClientPhase::Handshaking(AwaitServerHello), MessageType::ServerHello) => {
                if !self.authenticate(&msg, src) {
                    return;
                }
                self.server_com_addr = Some(src);
                let Some(sess) = self.sess.as_mut() else {
                    return;
                };
                let ack = sess.protect(WireMessage::new(MessageType::HandshakeAck, Vec::new()));
                self.phase = ClientPhase::Handshaking(AwaitFinished);
                self.count_flight();
                self.send_raw(io, src, &ack);
                self.arm_app_timer(io);
            }
            (ClientPhase::Handshaking(AwaitFinished), MessageType::ServerFinished) => {
                if !self.authenticate(&msg, src) {
                    return;
                }
                if self.cfg.variant == Variant::Tcs {
                    // the server retransmits the redirect until we use it
                    self.phase = ClientPhase::Handshaking(AwaitRedirect);
                    io.cancel_timer(APP_TIMER);
                } else {
                    self.establish(io);
                }
            }
            (
                ClientPhase::Handshaking(AwaitFinished | AwaitRedirect),
                MessageType::AddressRedirect,
            ) if self.cfg.variant == Variant::Tcs => {
                let Ok(redirect) = RedirectPayload::from_bytes(&msg.payload) else {
                    return;
                };
                if !self.authenticate(&msg, src) {
                    return;
                }
                self.server_com_addr = Some(redirect.addr);
                self.establish(io);
            }
            (ClientPhase::Established, MessageType::DataAck) => {
                let Ok(ack) = AckPayload::from_bytes(&msg.payload) else {
                    return;
                };
                if !self.authenticate(&msg, src) {
                    return;
                }
                self.on_ack(io, ack);
            }
            _ => {}
        }
    }

    fn authenticate(&mut self, msg: &WireMessage, src: SocketAddrV4) -> bool {
        self.sess
            .as_mut()
            .is_some_and(|sess| sess.unprotect(msg, src).is_ok())
    }

    fn on_ack(&mut self, io: &mut dyn Transport, ack: AckPayload) {
        self.metrics.acks_received += 1;
        let Some(pending) = self.inflight else {
            return;
        };
        if pending.message_id != ack.message_id {
            return;
        }
        self.inflight = None;
        self.acked_count += 1;
        io.cancel_timer(APP_TIMER);
        let now = io.now();
        if let Some(since) = self.recovering_since.take() {
            self.metrics.recovery_latencies_ms.push(now - since);
        }
        if self.acked_count >= self.cfg.total_messages {
            self.metrics.completed_at = Some(now);
            self.trace(io, format_args!("done acked={}", self.acked_count));
        } else {
            self.schedule_next(io);
        }
    }
}

impl Endpoint for Client {
    fn start(&mut self, io: &mut dyn Transport) {
        self.start_handshake(io);
    }

    fn on_datagram(
        &mut self,
        io: &mut dyn Transport,
        socket: SocketId,
        src: SocketAddrV4,
        bytes: Vec<u8>,
    ) {
        if Some(socket) != self.socket {
            return;
        }
        if let Ok(msg) = WireMessage::decode(&bytes) {
            self.on_message(io, src, msg);
        }
    }

    fn on_timer(&mut self, io: &mut dyn Transport, timer: TimerId) {
        if self.is_done() {
            return;
        }
        if timer == PACE_TIMER {
            self.issue_next(io);
            return;
        }
        self.metrics.timeouts += 1;
        match self.phase {
            ClientPhase::Idle | ClientPhase::Handshaking(_) => {
                self.trace(io, "handshake timeout, restarting");
                self.start_handshake(io);
            }
            ClientPhase::Established if self.inflight.is_some() => {
                if self.cfg.variant.resumable() {
                    self.trace(io, "ack timeout, retransmitting");
                    self.retransmit(io);
                    self.arm_app_timer(io);
                } else {
                    self.trace(io, "connection interrupted, reconnecting");
                    self.start_handshake(io);
                }
            }
            ClientPhase::Established => {}
        }
    }

    fn on_interface(&mut self, io: &mut dyn Transport, iface: Interface) {
        if iface.up {
            let active_up = self.active_interface(io).is_some_and(|i| i.up)
                && self.active_iface != Some(iface.id);
            if !active_up {
                self.active_iface = Some(iface.id);
                self.trace(io, format_args!("{} up with {}", iface.id, iface.ip));
                self.resume_on_new_address(io);
            }
            return;
        }
        if self.active_iface != Some(iface.id) {
            return;
        }
        self.trace(io, format_args!("{} down", iface.id));
        if self.phase == ClientPhase::Established && !self.is_done() {
            self.metrics.mid_session_handovers += 1;
            if self.recovering_since.is_none() {
                self.recovering_since = Some(io.now());
            }
        }
        if let Some(next) = self.select_interface(io) {
            self.trace(io, format_args!("failover to {}", next.id));
            self.resume_on_new_address(io);
        }
    }
}
