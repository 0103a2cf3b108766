//! Pluggable server/client transports.
//!
//! Both implementations deliver frames reliably and in order, count every
//! transferred payload byte, and keep an ordered log of message types so a
//! session's traffic can be audited after the fact. The in-memory transport
//! moves buffers over channels with zero latency; the loopback transport
//! runs one TCP stream per client on 127.0.0.1 with length-prefixed frames
//! and real wall-clock behavior.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Error, Result};

/// How long a blocking receive waits before reporting a stalled peer.
const RECV_TIMEOUT: Duration = Duration::from_secs(120);

/// Endpoint address: the aggregation server or one client by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Peer {
    Server,
    Client(u32),
}

impl std::fmt::Display for Peer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Peer::Server => write!(f, "server"),
            Peer::Client(id) => write!(f, "client{id}"),
        }
    }
}

/// Message-type tag carried in front of every payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Params = 0,
    Scores = 1,
    Mask = 2,
    SparseGrad = 3,
    DenseGrad = 4,
    HashAck = 5,
}

impl MsgType {
    pub fn from_u8(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => MsgType::Params,
            1 => MsgType::Scores,
            2 => MsgType::Mask,
            3 => MsgType::SparseGrad,
            4 => MsgType::DenseGrad,
            5 => MsgType::HashAck,
            other => return Err(Error::Transport(format!("unknown message tag {other}"))),
        })
    }
}

/// One message: type tag plus serialized payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }
}

/// Cumulative payload bytes toward the server (`up`) and away (`down`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteCounters {
    pub up: u64,
    pub down: u64,
}

impl ByteCounters {
    pub fn total(&self) -> u64 {
        self.up + self.down
    }
}

/// One transfer observed by the transport, in global send order.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub seq: u64,
    pub from: Peer,
    pub to: Peer,
    pub msg_type: MsgType,
    pub payload_len: usize,
}

/// Reliable, ordered, loss-free delivery between the server and N clients.
/// Every transferred buffer increments the byte counters by its exact
/// payload length.
pub trait Transport: Send + Sync {
    fn send(&self, from: Peer, to: Peer, frame: Frame) -> Result<()>;
    fn recv(&self, me: Peer, from: Peer) -> Result<Frame>;
    fn counters(&self) -> ByteCounters;
    fn message_log(&self) -> Vec<LogRecord>;
    fn n_clients(&self) -> u32;
}

#[derive(Default)]
struct Accounting {
    up: AtomicU64,
    down: AtomicU64,
    seq: AtomicU64,
    log: Mutex<Vec<LogRecord>>,
}

impl Accounting {
    fn record(&self, from: Peer, to: Peer, msg_type: MsgType, payload_len: usize) {
        match to {
            Peer::Server => self.up.fetch_add(payload_len as u64, Ordering::Relaxed),
            Peer::Client(_) => self.down.fetch_add(payload_len as u64, Ordering::Relaxed),
        };
        let mut log = self.log.lock().expect("accounting log poisoned");
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        log.push(LogRecord {
            seq,
            from,
            to,
            msg_type,
            payload_len,
        });
    }

    fn counters(&self) -> ByteCounters {
        ByteCounters {
            up: self.up.load(Ordering::Relaxed),
            down: self.down.load(Ordering::Relaxed),
        }
    }

    fn log(&self) -> Vec<LogRecord> {
        self.log.lock().expect("accounting log poisoned").clone()
    }
}

fn check_route(from: Peer, to: Peer, n: u32) -> Result<u32> {
    match (from, to) {
        (Peer::Client(i), Peer::Server) | (Peer::Server, Peer::Client(i)) if i < n => Ok(i),
        _ => Err(Error::Transport(format!("no route {from} -> {to}"))),
    }
}

/// Channel-backed transport: deterministic, zero latency, safe for N
/// concurrent senders.
pub struct InMemoryTransport {
    n: u32,
    up_tx: Vec<Sender<Frame>>,
    up_rx: Vec<Mutex<Receiver<Frame>>>,
    down_tx: Vec<Sender<Frame>>,
    down_rx: Vec<Mutex<Receiver<Frame>>>,
    acct: Accounting,
}

impl InMemoryTransport {
    pub fn new(n_clients: u32) -> Self {
        let mut up_tx = Vec::new();
        let mut up_rx = Vec::new();
        let mut down_tx = Vec::new();
        let mut down_rx = Vec::new();
        for _ in 0..n_clients {
            let (tx, rx) = channel();
            up_tx.push(tx);
            up_rx.push(Mutex::new(rx));
            let (tx, rx) = channel();
            down_tx.push(tx);
            down_rx.push(Mutex::new(rx));
        }
        InMemoryTransport {
            n: n_clients,
            up_tx,
            up_rx,
            down_tx,
            down_rx,
            acct: Accounting::default(),
        }
    }
}

impl Transport for InMemoryTransport {
    fn send(&self, from: Peer, to: Peer, frame: Frame) -> Result<()> {
        let i = check_route(from, to, self.n)? as usize;
        self.acct.record(from, to, frame.msg_type, frame.payload.len());
        let tx = match to {
            Peer::Server => &self.up_tx[i],
            Peer::Client(_) => &self.down_tx[i],
        };
        tx.send(frame)
            .map_err(|_| Error::Transport(format!("{to} disconnected")))
    }

    fn recv(&self, me: Peer, from: Peer) -> Result<Frame> {
        let i = check_route(from, me, self.n)? as usize;
        let rx = match me {
            Peer::Server => &self.up_rx[i],
            Peer::Client(_) => &self.down_rx[i],
        };
        let rx = rx.lock().expect("receiver poisoned");
        rx.recv_timeout(RECV_TIMEOUT).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Transport(format!("{me} timed out waiting for {from}")),
            RecvTimeoutError::Disconnected => Error::Transport(format!("{from} disconnected")),
        })
    }

    fn counters(&self) -> ByteCounters {
        self.acct.counters()
    }

    fn message_log(&self) -> Vec<LogRecord> {
        self.acct.log()
    }

    fn n_clients(&self) -> u32 {
        self.n
    }
}

/// TCP transport over 127.0.0.1: one stream per client, frames sent as
/// `[u32 LE length][u8 tag][payload]`.
pub struct LoopbackTransport {
    n: u32,
    server_side: Vec<Mutex<TcpStream>>,
    client_side: Vec<Mutex<TcpStream>>,
    acct: Accounting,
}

impl LoopbackTransport {
    /// Binds an ephemeral listener and connects one stream per client.
    pub fn connect(n_clients: u32) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let mut client_side: Vec<Option<TcpStream>> = Vec::new();
        for i in 0..n_clients {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            // identify ourselves so accept order does not matter
            let mut s = stream;
            s.write_all(&i.to_le_bytes())?;
            client_side.push(Some(s));
        }
        let mut server_side: Vec<Option<TcpStream>> = (0..n_clients).map(|_| None).collect();
        for _ in 0..n_clients {
            let (mut stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            let mut id_buf = [0u8; 4];
            stream.read_exact(&mut id_buf)?;
            let id = u32::from_le_bytes(id_buf);
            if id >= n_clients || server_side[id as usize].is_some() {
                return Err(Error::Transport(format!("bad client handshake id {id}")));
            }
            server_side[id as usize] = Some(stream);
        }
        let wrap = |streams: Vec<Option<TcpStream>>| -> Result<Vec<Mutex<TcpStream>>> {
            streams
                .into_iter()
                .map(|s| {
                    let s = s.ok_or_else(|| Error::Transport("missing client stream".into()))?;
                    s.set_read_timeout(Some(RECV_TIMEOUT))?;
                    Ok(Mutex::new(s))
                })
                .collect()
        };
        Ok(LoopbackTransport {
            n: n_clients,
            server_side: wrap(server_side)?,
            client_side: wrap(client_side.into_iter().collect())?,
            acct: Accounting::default(),
        })
    }

    fn stream_for(&self, endpoint: Peer, i: usize) -> &Mutex<TcpStream> {
        match endpoint {
            Peer::Server => &self.server_side[i],
            Peer::Client(_) => &self.client_side[i],
        }
    }
}

fn write_frame(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    let len = (frame.payload.len() + 1) as u32;
    stream.write_all(&len.to_le_bytes())?;
    stream.write_all(&[frame.msg_type as u8])?;
    stream.write_all(&frame.payload)?;
    stream.flush()
}

fn read_frame(stream: &mut TcpStream) -> Result<Frame> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len == 0 {
        return Err(Error::Transport("empty frame".into()));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    let msg_type = MsgType::from_u8(buf[0])?;
    buf.drain(..1);
    Ok(Frame::new(msg_type, buf))
}

impl Transport for LoopbackTransport {
    fn send(&self, from: Peer, to: Peer, frame: Frame) -> Result<()> {
        let i = check_route(from, to, self.n)? as usize;
        let mut stream = self.stream_for(from, i).lock().expect("stream poisoned");
        write_frame(&mut stream, &frame)?;
        self.acct.record(from, to, frame.msg_type, frame.payload.len());
        Ok(())
    }

    fn recv(&self, me: Peer, from: Peer) -> Result<Frame> {
        let i = check_route(from, me, self.n)? as usize;
        let mut stream = self.stream_for(me, i).lock().expect("stream poisoned");
        read_frame(&mut stream)
    }

    fn counters(&self) -> ByteCounters {
        self.acct.counters()
    }

    fn message_log(&self) -> Vec<LogRecord> {
        self.acct.log()
    }

    fn n_clients(&self) -> u32 {
        self.n
    }
}
