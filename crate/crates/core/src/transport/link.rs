use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::codec::{decode, encode, Control, MsgType, WireMessage, MAX_FRAME_BODY};
use super::counter::{Direction, Observer, Peer, TrafficCounter};
use crate::error::{Error, Result};

/// A reliable, ordered, bidirectional frame pipe.
pub trait Link: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>>;
}

pub struct InprocLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl InprocLink {
    pub fn pair() -> (InprocLink, InprocLink) {
        let (a_tx, b_rx) = mpsc::channel();
        let (b_tx, a_rx) = mpsc::channel();
        (InprocLink { tx: a_tx, rx: a_rx }, InprocLink { tx: b_tx, rx: b_rx })
    }
}

impl Link for InprocLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.tx.send(frame).map_err(|_| Error::PeerDisconnected("in-process peer dropped".into()))
    }

    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        let gone = || Error::PeerDisconnected("in-process peer dropped".into());
        match timeout {
            None => self.rx.recv().map_err(|_| gone()),
            Some(d) => self.rx.recv_timeout(d).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Timeout(d),
                RecvTimeoutError::Disconnected => gone(),
            }),
        }
    }
}

pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

fn io_to_link(e: io::Error, timeout: Option<Duration>) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout(timeout.unwrap_or_default()),
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => Error::PeerDisconnected(e.to_string()),
        _ => Error::Io(e),
    }
}

impl Link for TcpLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.stream.write_all(&frame).map_err(|e| io_to_link(e, None))
    }

    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        self.stream.set_read_timeout(timeout)?;
        let mut len = [0u8; 4];
        self.stream.read_exact(&mut len).map_err(|e| io_to_link(e, timeout))?;
        let body = u32::from_be_bytes(len) as usize;
        if body > MAX_FRAME_BODY {
            return Err(Error::PayloadTooLarge(body));
        }
        let mut frame = vec![0u8; 4 + body];
        frame[..4].copy_from_slice(&len);
        self.stream.read_exact(&mut frame[4..]).map_err(|e| io_to_link(e, timeout))?;
        Ok(frame)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TransportKind {
    #[default]
    InProc,
    Tcp,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        })
    }
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::Config(format!("unknown transport {other:?} (inproc|tcp)"))),
        }
    }
}

/// Both ends of one client's connection to one server.
pub struct LinkPair {
    pub client: Box<dyn Link>,
    pub server: Box<dyn Link>,
}

fn send_msg(link: &mut dyn Link, m: &WireMessage) -> Result<()> {
    link.send_frame(encode(m)?)
}

fn recv_msg(link: &mut dyn Link, timeout: Duration) -> Result<WireMessage> {
    decode(&link.recv_frame(Some(timeout))?)
}

fn expect_control(m: &WireMessage, kind: Control) -> Result<()> {
    if m.control_kind() == Some(kind) {
        Ok(())
    } else {
        Err(Error::Protocol(format!("expected CONTROL {kind:?}, got {}", m.msg_type)))
    }
}

/// Opens one connection per client and performs the hello/ack handshake.
/// Handshake frames are not tallied. Index `k` of the result is client `k`.
pub fn connect(kind: TransportKind, clients: usize, timeout: Duration) -> Result<Vec<LinkPair>> {
    match kind {
        TransportKind::InProc => (0..clients)
            .map(|k| {
                let (mut c, mut s) = InprocLink::pair();
                send_msg(&mut c, &WireMessage::control(Control::Hello, 0, k as u32))?;
                let hello = recv_msg(&mut s, timeout)?;
                expect_control(&hello, Control::Hello)?;
                send_msg(&mut s, &WireMessage::control(Control::Ack, 0, hello.client_id))?;
                expect_control(&recv_msg(&mut c, timeout)?, Control::Ack)?;
                Ok(LinkPair { client: Box::new(c), server: Box::new(s) })
            })
            .collect(),
        TransportKind::Tcp => {
            let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
            let addr = listener.local_addr()?;
            let mut client_ends = Vec::with_capacity(clients);
            for k in 0..clients {
                let mut link = TcpLink::new(TcpStream::connect_timeout(&addr, timeout)?)?;
                send_msg(&mut link, &WireMessage::control(Control::Hello, 0, k as u32))?;
                client_ends.push(link);
            }
            let mut server_ends: Vec<Option<TcpLink>> = (0..clients).map(|_| None).collect();
            for _ in 0..clients {
                let (stream, _) = listener.accept()?;
                let mut link = TcpLink::new(stream)?;
                let hello = recv_msg(&mut link, timeout)?;
                expect_control(&hello, Control::Hello)?;
                let id = hello.client_id as usize;
                if id >= clients || server_ends[id].is_some() {
                    return Err(Error::Protocol(format!("unexpected hello from client {id}")));
                }
                send_msg(&mut link, &WireMessage::control(Control::Ack, 0, hello.client_id))?;
                server_ends[id] = Some(link);
            }
            client_ends
                .into_iter()
                .zip(server_ends)
                .map(|(mut c, s)| {
                    expect_control(&recv_msg(&mut c, timeout)?, Control::Ack)?;
                    let s = s.expect("every client said hello");
                    Ok(LinkPair { client: Box::new(c) as Box<dyn Link>, server: Box::new(s) as Box<dyn Link> })
                })
                .collect()
        }
    }
}

/// One line of the optional message trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub round: u32,
    pub msg_type: MsgType,
    pub client: usize,
    pub peer: Peer,
    pub direction: Direction,
    pub batch: Option<u32>,
    pub elements: u64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.round, self.msg_type, self.client, self.elements)
    }
}

#[derive(Debug, Default)]
pub struct MessageTrace {
    entries: Mutex<Vec<TraceEntry>>,
}

impl MessageTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, e: TraceEntry) {
        self.entries.lock().expect("trace poisoned").push(e);
    }

    pub fn entries(&self) -> Vec<TraceEntry> {
        self.entries.lock().expect("trace poisoned").clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
}

/// A link end that knows whose traffic it carries and tallies every frame.
pub struct Endpoint {
    link: Box<dyn Link>,
    pub client: usize,
    pub peer: Peer,
    pub side: Side,
    counter: Arc<TrafficCounter>,
    trace: Option<Arc<MessageTrace>>,
    timeout: Option<Duration>,
}

impl Endpoint {
    pub fn new(
        link: Box<dyn Link>,
        client: usize,
        peer: Peer,
        side: Side,
        counter: Arc<TrafficCounter>,
        timeout: Option<Duration>,
    ) -> Self {
        Self { link, client, peer, side, counter, trace: None, timeout }
    }

    pub fn with_trace(mut self, trace: Arc<MessageTrace>) -> Self {
        self.trace = Some(trace);
        self
    }

    /// Both ends of `pair`, client end first.
    pub fn pair(
        pair: LinkPair,
        client: usize,
        peer: Peer,
        counter: &Arc<TrafficCounter>,
        trace: Option<&Arc<MessageTrace>>,
        timeout: Option<Duration>,
    ) -> (Endpoint, Endpoint) {
        let mut c = Endpoint::new(pair.client, client, peer, Side::Client, counter.clone(), timeout);
        let mut s = Endpoint::new(pair.server, client, peer, Side::Server, counter.clone(), timeout);
        if let Some(t) = trace {
            c.trace = Some(t.clone());
            s.trace = Some(t.clone());
        }
        (c, s)
    }

    fn outgoing(&self) -> Direction {
        match self.side {
            Side::Client => Direction::Up,
            Side::Server => Direction::Down,
        }
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let frame = encode(msg)?;
        let bytes = frame.len();
        let direction = self.outgoing();
        // Tallied before the frame leaves so the receiver can never observe
        // a message the sender has not yet counted.
        self.counter.record(self.client, self.peer, direction, Observer::Sender, msg, bytes);
        if let Some(trace) = &self.trace {
            trace.push(TraceEntry {
                round: msg.round,
                msg_type: msg.msg_type,
                client: self.client,
                peer: self.peer,
                direction,
                batch: msg.meta("batch").map(|b| b as u32),
                elements: msg.payload_elements(),
            });
        }
        self.link.send_frame(frame)
    }

    pub fn recv(&mut self) -> Result<WireMessage> {
        let frame = self.link.recv_frame(self.timeout)?;
        let msg = decode(&frame)?;
        let direction = match self.outgoing() {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        };
        self.counter.record(self.client, self.peer, direction, Observer::Receiver, &msg, frame.len());
        Ok(msg)
    }
}
