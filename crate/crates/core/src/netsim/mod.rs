//! Deterministic discrete-event network.
//!
//! Hosts sit on a single path with a fixed one-way delay. Hosts may be
//! placed behind one NAT gateway. Time is virtual and advances in whole
//! milliseconds; events at the same instant run in insertion order, so a
//! run is a pure function of its configuration and seed.

mod nat;

pub use nat::{Direction, Nat, NatBinding, NatMode, NatPolicy};

use std::any::Any;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dispatch::{
    dispatch_line, Delivery, DispatchError, HostStack, IfaceId, Interface, SendError, SocketId,
};
use crate::transport::{Endpoint, TimerId, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HostId(pub usize);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub bytes: Vec<u8>,
    pub inject_time: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub delay_ms: u64,
    pub loss_rate: f64,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            delay_ms: 5,
            loss_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandoverSchedule {
    pub period_ms: u64,
    pub offset_ms: u64,
    pub downtime_ms: u64,
    /// Give the interface a fresh address each time it comes back up.
    pub renumber: bool,
    /// Each shutdown fires a seeded uniform `[0, jitter_ms)` after its
    /// nominal instant. Nominal instants stay on the period grid.
    pub jitter_ms: u64,
}

impl HandoverSchedule {
    pub const DEFAULT_DOWNTIME_MS: u64 = 200;

    pub fn every(period_ms: u64) -> Self {
        HandoverSchedule {
            period_ms,
            offset_ms: 0,
            downtime_ms: Self::DEFAULT_DOWNTIME_MS,
            renumber: true,
            jitter_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.period_ms <= self.downtime_ms.saturating_add(self.jitter_ms) {
            return Err(NetError::InvalidSchedule(*self));
        }
        Ok(())
    }

    /// First shutdown instant: one full period after the phase offset.
    pub fn first_down(&self) -> u64 {
        self.offset_ms + self.period_ms
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("handover period must exceed downtime plus jitter: {0:?}")]
    InvalidSchedule(HandoverSchedule),
    #[error("loss rate {0} outside [0, 1]")]
    InvalidLossRate(f64),
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Send {
        host: HostId,
        src: SocketAddrV4,
        dst: SocketAddrV4,
        summary: String,
    },
    SendFailed {
        host: HostId,
        socket: SocketId,
        dst: SocketAddrV4,
        error: SendError,
    },
    Lost {
        src: SocketAddrV4,
        dst: SocketAddrV4,
        scripted: bool,
    },
    NatDropped {
        src: SocketAddrV4,
        dst: SocketAddrV4,
    },
    Undeliverable {
        src: SocketAddrV4,
        dst: SocketAddrV4,
        reason: &'static str,
    },
    Dispatch {
        host: HostId,
        src: SocketAddrV4,
        dst: SocketAddrV4,
        delivery: Delivery,
    },
    InterfaceDown {
        host: HostId,
        iface: IfaceId,
        ip: Ipv4Addr,
    },
    InterfaceUp {
        host: HostId,
        iface: IfaceId,
        ip: Ipv4Addr,
    },
    Endpoint {
        host: HostId,
        line: String,
    },
}

impl fmt::Display for NetEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetEvent::Send {
                host,
                src,
                dst,
                summary,
            } => write!(f, "SEND {host} {src} -> {dst} {summary}"),
            NetEvent::SendFailed {
                host,
                socket,
                dst,
                error,
            } => write!(f, "SEND-FAILED {host} {socket} -> {dst} {error}"),
            NetEvent::Lost { src, dst, scripted } => write!(
                f,
                "LOST {src} -> {dst} cause={}",
                if *scripted { "scripted" } else { "random" }
            ),
            NetEvent::NatDropped { src, dst } => write!(f, "NAT-DROP {src} -> {dst}"),
            NetEvent::Undeliverable { src, dst, reason } => {
                write!(f, "UNDELIVERABLE {src} -> {dst} reason={reason}")
            }
            NetEvent::Dispatch {
                host,
                src,
                dst,
                delivery,
            } => write!(f, "{} at {host}", dispatch_line(*dst, *src, *delivery)),
            NetEvent::InterfaceDown { host, iface, ip } => {
                write!(f, "IFACE-DOWN {host} {iface} {ip}")
            }
            NetEvent::InterfaceUp { host, iface, ip } => write!(f, "IFACE-UP {host} {iface} {ip}"),
            NetEvent::Endpoint { line, .. } => f.write_str(line),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: u64,
    pub event: NetEvent,
}

/// `t=<ms> <EVENT> <details>`
impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} {}", self.time, self.event)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HostCounters {
    pub sent: u64,
    pub received: u64,
}

#[derive(Debug)]
enum EventKind {
    Arrival(Datagram),
    Timer {
        host: HostId,
        timer: TimerId,
        generation: u64,
    },
    Interface {
        host: HostId,
        iface: IfaceId,
        up: bool,
        new_ip: Option<Ipv4Addr>,
    },
    Handover {
        host: HostId,
        iface: IfaceId,
        schedule: HandoverSchedule,
        nominal: u64,
    },
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    order: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.order) == (other.time, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.order).cmp(&(other.time, other.order))
    }
}

struct Host {
    name: String,
    stack: HostStack,
    behind_nat: bool,
    counters: HostCounters,
}

/// Keeps handover jitter draws off the loss stream.
const HANDOVER_STREAM: u64 = 0x6861_6e64_6f76_6572;

pub type DropFilter = Box<dyn FnMut(&Datagram) -> bool + Send>;

struct Core {
    now: u64,
    link: LinkConfig,
    rng: ChaCha8Rng,
    handover_rng: ChaCha8Rng,
    hosts: Vec<Host>,
    nat: Option<Nat>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    next_order: u64,
    timers: HashMap<(HostId, TimerId), u64>,
    next_generation: u64,
    drop_filter: Option<DropFilter>,
    describe: fn(&[u8]) -> String,
    events: Vec<TraceEvent>,
    record: bool,
}

fn describe_len(bytes: &[u8]) -> String {
    format!("len={}", bytes.len())
}

impl Core {
    fn push(&mut self, time: u64, kind: EventKind) {
        let order = self.next_order;
        self.next_order += 1;
        self.queue.push(Reverse(Scheduled { time, order, kind }));
    }

    fn emit(&mut self, event: NetEvent) {
        if self.record {
            self.events.push(TraceEvent {
                time: self.now,
                event,
            });
        }
    }

    fn host(&self, host: HostId) -> &Host {
        &self.hosts[host.0]
    }

    fn host_mut(&mut self, host: HostId) -> &mut Host {
        &mut self.hosts[host.0]
    }

    fn send(
        &mut self,
        host: HostId,
        socket: SocketId,
        dst: SocketAddrV4,
        bytes: Vec<u8>,
    ) -> Result<(), SendError> {
        let src = match self.host(host).stack.source_for(socket, dst) {
            Ok(src) => src,
            Err(error) => {
                self.emit(NetEvent::SendFailed {
                    host,
                    socket,
                    dst,
                    error,
                });
                return Err(error);
            }
        };
        self.host_mut(host).counters.sent += 1;
        if self.record {
            let summary = (self.describe)(&bytes);
            self.emit(NetEvent::Send {
                host,
                src,
                dst,
                summary,
            });
        }
        let mut dgram = Datagram {
            src,
            dst,
            bytes,
            inject_time: self.now,
        };
        if let Some(filter) = self.drop_filter.as_mut() {
            if filter(&dgram) {
                self.emit(NetEvent::Lost {
                    src,
                    dst,
                    scripted: true,
                });
                return Ok(());
            }
        }
        let loss = self.link.loss_rate;
        let lost = if loss >= 1.0 {
            true
        } else if loss > 0.0 {
            self.rng.gen::<f64>() < loss
        } else {
            false
        };
        if lost {
            self.emit(NetEvent::Lost {
                src,
                dst,
                scripted: false,
            });
            return Ok(());
        }
        if self.host(host).behind_nat {
            if let Some(nat) = self.nat.as_mut() {
                dgram = nat.translate_outbound(dgram, self.now);
            }
        }
        let at = self.now + self.link.delay_ms;
        self.push(at, EventKind::Arrival(dgram));
        Ok(())
    }

    /// Resolves the receiving host, applying inbound NAT translation.
    fn route(&mut self, dgram: Datagram) -> Option<(HostId, Datagram)> {
        let ip = *dgram.dst.ip();
        if let Some(nat) = self.nat.as_mut() {
            if nat.external_ip() == ip {
                let (src, dst) = (dgram.src, dgram.dst);
                let Some(inside) = nat.translate_inbound(dgram, self.now) else {
                    self.emit(NetEvent::NatDropped { src, dst });
                    return None;
                };
                let target = self
                    .hosts
                    .iter()
                    .position(|h| h.behind_nat && h.stack.owns_ip(*inside.dst.ip()));
                return match target {
                    Some(idx) => Some((HostId(idx), inside)),
                    None => {
                        self.emit(NetEvent::Undeliverable {
                            src,
                            dst: inside.dst,
                            reason: "no-host",
                        });
                        None
                    }
                };
            }
        }
        let target = self
            .hosts
            .iter()
            .position(|h| !h.behind_nat && h.stack.owns_ip(ip));
        match target {
            Some(idx) => Some((HostId(idx), dgram)),
            None => {
                self.emit(NetEvent::Undeliverable {
                    src: dgram.src,
                    dst: dgram.dst,
                    reason: "no-host",
                });
                None
            }
        }
    }
}

struct SimIo<'a> {
    core: &'a mut Core,
    host: HostId,
}

impl Transport for SimIo<'_> {
    fn now(&self) -> u64 {
        self.core.now
    }

    fn bind(&mut self, local: SocketAddrV4) -> Result<SocketId, DispatchError> {
        self.core.host_mut(self.host).stack.bind(local)
    }

    fn bind_connected(
        &mut self,
        local: SocketAddrV4,
        peer: SocketAddrV4,
    ) -> Result<SocketId, DispatchError> {
        self.core
            .host_mut(self.host)
            .stack
            .bind_connected(local, peer)
    }

    fn connect(&mut self, socket: SocketId, peer: SocketAddrV4) -> Result<(), DispatchError> {
        self.core.host_mut(self.host).stack.connect(socket, peer)
    }

    fn close(&mut self, socket: SocketId) {
        self.core.host_mut(self.host).stack.close(socket);
    }

    fn port_in_use(&self, port: u16) -> bool {
        self.core.host(self.host).stack.port_in_use(port)
    }

    fn send_to(
        &mut self,
        socket: SocketId,
        dst: SocketAddrV4,
        bytes: Vec<u8>,
    ) -> Result<(), SendError> {
        self.core.send(self.host, socket, dst, bytes)
    }

    fn set_timer(&mut self, timer: TimerId, at_ms: u64) {
        let generation = self.core.next_generation;
        self.core.next_generation += 1;
        self.core.timers.insert((self.host, timer), generation);
        let at = at_ms.max(self.core.now);
        self.core.push(
            at,
            EventKind::Timer {
                host: self.host,
                timer,
                generation,
            },
        );
    }

    fn cancel_timer(&mut self, timer: TimerId) {
        self.core.timers.remove(&(self.host, timer));
    }

    fn interfaces(&self) -> Vec<Interface> {
        self.core.host(self.host).stack.interfaces().to_vec()
    }

    fn trace(&mut self, line: String) {
        let host = self.host;
        self.core.emit(NetEvent::Endpoint { host, line });
    }
}

/// The virtual network: hosts, their endpoints, the NAT and the event queue.
pub struct Network {
    core: Core,
    endpoints: Vec<Option<Box<dyn Endpoint>>>,
}

impl Network {
    pub fn new(link: LinkConfig) -> Result<Self, NetError> {
        if !(0.0..=1.0).contains(&link.loss_rate) {
            return Err(NetError::InvalidLossRate(link.loss_rate));
        }
        Ok(Network {
            core: Core {
                now: 0,
                link,
                rng: ChaCha8Rng::seed_from_u64(link.seed),
                handover_rng: ChaCha8Rng::seed_from_u64(link.seed ^ HANDOVER_STREAM),
                hosts: Vec::new(),
                nat: None,
                queue: BinaryHeap::new(),
                next_order: 0,
                timers: HashMap::new(),
                next_generation: 0,
                drop_filter: None,
                describe: describe_len,
                events: Vec::new(),
                record: true,
            },
            endpoints: Vec::new(),
        })
    }

    pub fn now(&self) -> u64 {
        self.core.now
    }

    pub fn link(&self) -> LinkConfig {
        self.core.link
    }

    /// Disables event recording; `advance` then returns no events.
    pub fn set_recording(&mut self, record: bool) {
        self.core.record = record;
    }

    /// Formatter used for datagram payloads in SEND trace lines.
    pub fn set_describer(&mut self, describe: fn(&[u8]) -> String) {
        self.core.describe = describe;
    }

    /// Datagrams for which `filter` returns true are dropped at send time.
    pub fn set_drop_filter(&mut self, filter: DropFilter) {
        self.core.drop_filter = Some(filter);
    }

    pub fn set_nat(&mut self, policy: NatPolicy, external_ip: Ipv4Addr) {
        self.core.nat = Some(Nat::new(policy, external_ip));
    }

    pub fn nat(&self) -> Option<&Nat> {
        self.core.nat.as_ref()
    }

    pub fn nat_mut(&mut self) -> Option<&mut Nat> {
        self.core.nat.as_mut()
    }

    pub fn add_host(&mut self, name: &str, ips: &[Ipv4Addr], behind_nat: bool) -> HostId {
        self.core.hosts.push(Host {
            name: name.to_string(),
            stack: HostStack::with_interfaces(ips),
            behind_nat,
            counters: HostCounters::default(),
        });
        self.endpoints.push(None);
        HostId(self.core.hosts.len() - 1)
    }

    pub fn host_name(&self, host: HostId) -> &str {
        &self.core.host(host).name
    }

    pub fn stack(&self, host: HostId) -> &HostStack {
        &self.core.host(host).stack
    }

    pub fn stack_mut(&mut self, host: HostId) -> &mut HostStack {
        &mut self.core.host_mut(host).stack
    }

    pub fn counters(&self, host: HostId) -> HostCounters {
        self.core.host(host).counters
    }

    /// Installs an endpoint on `host` and runs its start callback now.
    pub fn attach(&mut self, host: HostId, endpoint: Box<dyn Endpoint>) {
        self.endpoints[host.0] = Some(endpoint);
        self.with_endpoint(host, |ep, io| ep.start(io));
    }

    pub fn endpoint<T: Endpoint>(&self, host: HostId) -> Option<&T> {
        let ep = self.endpoints.get(host.0)?.as_deref()?;
        (ep as &dyn Any).downcast_ref::<T>()
    }

    pub fn endpoint_mut<T: Endpoint>(&mut self, host: HostId) -> Option<&mut T> {
        let ep = self.endpoints.get_mut(host.0)?.as_deref_mut()?;
        (ep as &mut dyn Any).downcast_mut::<T>()
    }

    fn with_endpoint(
        &mut self,
        host: HostId,
        f: impl FnOnce(&mut dyn Endpoint, &mut dyn Transport),
    ) {
        let Some(mut ep) = self.endpoints[host.0].take() else {
            return;
        };
        {
            let mut io = SimIo {
                core: &mut self.core,
                host,
            };
            f(ep.as_mut(), &mut io);
        }
        self.endpoints[host.0] = Some(ep);
    }

    /// Sends a datagram from `socket` on `host` as if the endpoint had.
    pub fn schedule_send(
        &mut self,
        host: HostId,
        socket: SocketId,
        dst: SocketAddrV4,
        bytes: Vec<u8>,
    ) -> Result<(), SendError> {
        self.core.send(host, socket, dst, bytes)
    }

    /// Registers a recurring shutdown/reactivation cycle for an interface.
    pub fn add_handover(
        &mut self,
        host: HostId,
        iface: IfaceId,
        schedule: HandoverSchedule,
    ) -> Result<(), NetError> {
        schedule.validate()?;
        if host.0 >= self.core.hosts.len() {
            return Err(NetError::UnknownHost(host));
        }
        if self.core.host(host).stack.interface(iface).is_none() {
            return Err(DispatchError::UnknownInterface(iface).into());
        }
        let nominal = self.core.now + schedule.first_down();
        self.push_handover(host, iface, schedule, nominal);
        Ok(())
    }

    fn push_handover(
        &mut self,
        host: HostId,
        iface: IfaceId,
        schedule: HandoverSchedule,
        nominal: u64,
    ) {
        let jitter = match schedule.jitter_ms {
            0 => 0,
            j => self.core.handover_rng.gen_range(0..j),
        };
        self.core.push(
            nominal + jitter,
            EventKind::Handover {
                host,
                iface,
                schedule,
                nominal,
            },
        );
    }

    /// Queues an interface change at virtual time `at`.
    pub fn schedule_interface(
        &mut self,
        at: u64,
        host: HostId,
        iface: IfaceId,
        up: bool,
        new_ip: Option<Ipv4Addr>,
    ) {
        let at = at.max(self.core.now);
        self.core.push(
            at,
            EventKind::Interface {
                host,
                iface,
                up,
                new_ip,
            },
        );
    }

    /// Applies an interface change immediately and notifies the endpoint.
    pub fn set_interface(
        &mut self,
        host: HostId,
        iface: IfaceId,
        up: bool,
        new_ip: Option<Ipv4Addr>,
    ) -> Result<(), NetError> {
        let state = self
            .core
            .host_mut(host)
            .stack
            .set_interface(iface, up, new_ip)?;
        let event = if up {
            NetEvent::InterfaceUp {
                host,
                iface,
                ip: state.ip,
            }
        } else {
            NetEvent::InterfaceDown {
                host,
                iface,
                ip: state.ip,
            }
        };
        self.core.emit(event);
        self.with_endpoint(host, |ep, io| ep.on_interface(io, state));
        Ok(())
    }

    pub fn pending_events(&self) -> usize {
        self.core.queue.len()
    }

    /// Time of the next queued event, if any.
    pub fn next_event_time(&self) -> Option<u64> {
        self.core.queue.peek().map(|Reverse(s)| s.time)
    }

    /// Processes every event scheduled at or before `until`, then sets the
    /// clock to `until`. Returns the events recorded during the call.
    pub fn advance(&mut self, until: u64) -> Vec<TraceEvent> {
        let until = until.max(self.core.now);
        while self.next_event_time().is_some_and(|t| t <= until) {
            self.step();
        }
        self.core.now = until;
        std::mem::take(&mut self.core.events)
    }

    /// Processes the next event, if any, and returns its time.
    pub fn step(&mut self) -> Option<u64> {
        let Reverse(next) = self.core.queue.pop()?;
        debug_assert!(next.time >= self.core.now);
        self.core.now = next.time;
        match next.kind {
            EventKind::Arrival(dgram) => self.arrive(dgram),
            EventKind::Timer {
                host,
                timer,
                generation,
            } => {
                if self.core.timers.get(&(host, timer)) == Some(&generation) {
                    self.core.timers.remove(&(host, timer));
                    self.with_endpoint(host, |ep, io| ep.on_timer(io, timer));
                }
            }
            EventKind::Interface {
                host,
                iface,
                up,
                new_ip,
            } => {
                // unknown interfaces were rejected when scheduled by handover;
                // explicit schedules report nothing on failure
                let _ = self.set_interface(host, iface, up, new_ip);
            }
            EventKind::Handover {
                host,
                iface,
                schedule,
                nominal,
            } => self.handover(host, iface, schedule, nominal),
        }
        Some(self.core.now)
    }

    /// Drains and returns events recorded since the last drain.
    pub fn take_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.core.events)
    }

    fn handover(&mut self, host: HostId, iface: IfaceId, schedule: HandoverSchedule, nominal: u64) {
        let Some(current) = self.core.host(host).stack.interface(iface).copied() else {
            return;
        };
        let now = self.core.now;
        let new_ip = schedule
            .renumber
            .then(|| Ipv4Addr::from(u32::from(current.ip).wrapping_add(1)));
        let _ = self.set_interface(host, iface, false, None);
        self.core.push(
            now + schedule.downtime_ms,
            EventKind::Interface {
                host,
                iface,
                up: true,
                new_ip,
            },
        );
        self.push_handover(host, iface, schedule, nominal + schedule.period_ms);
    }

    fn arrive(&mut self, dgram: Datagram) {
        let Some((host, dgram)) = self.core.route(dgram) else {
            return;
        };
        let (src, dst) = (dgram.src, dgram.dst);
        if !self.core.host(host).stack.ip_is_up(*dst.ip()) {
            self.core.emit(NetEvent::Undeliverable {
                src,
                dst,
                reason: "iface-down",
            });
            return;
        }
        let delivery = self
            .core
            .host_mut(host)
            .stack
            .deliver(src, dst, dgram.bytes);
        self.core.emit(NetEvent::Dispatch {
            host,
            src,
            dst,
            delivery,
        });
        if let Delivery::Socket(socket, _) = delivery {
            while let Some((from, bytes)) = self.core.host_mut(host).stack.recv(socket) {
                self.core.host_mut(host).counters.received += 1;
                self.with_endpoint(host, |ep, io| ep.on_datagram(io, socket, from, bytes));
            }
        }
    }
}
