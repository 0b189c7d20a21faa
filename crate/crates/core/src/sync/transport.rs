//! Frame transports: an in-memory one for simulation and tests, and TCP.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::wire::HEADER_LEN;
use super::Responder;
use crate::db::Microdb;
use crate::error::{Error, Result};

/// Carries whole frames between the two ends of a sync round.
pub trait Transport {
    fn send(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToPeer,
    FromPeer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// Shared on/off switch for a link, flipped by outage schedules.
#[derive(Debug, Clone)]
pub struct LinkSwitch(Arc<AtomicBool>);

impl Default for LinkSwitch {
    fn default() -> Self {
        Self(Arc::new(AtomicBool::new(true)))
    }
}

impl LinkSwitch {
    pub fn set_up(&self, up: bool) {
        self.0.store(up, Ordering::SeqCst);
    }

    pub fn is_up(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// In-process transport that hands frames directly to the peer instance's
/// responder, byte-for-byte as a socket would carry them. Supports frame
/// capture and cutting the connection after a fixed number of frames.
pub struct MemoryTransport {
    peer: Arc<Microdb>,
    responder: Responder,
    inbox: VecDeque<Vec<u8>>,
    switch: LinkSwitch,
    budget: Option<usize>,
    capture: Option<Arc<Mutex<Vec<CapturedFrame>>>>,
}

impl MemoryTransport {
    pub fn new(peer: Arc<Microdb>) -> Self {
        Self {
            peer,
            responder: Responder::default(),
            inbox: VecDeque::new(),
            switch: LinkSwitch::default(),
            budget: None,
            capture: None,
        }
    }

    pub fn with_switch(mut self, switch: LinkSwitch) -> Self {
        self.switch = switch;
        self
    }

    /// Deliver at most `frames` frames (both directions), then fail.
    pub fn cut_after(mut self, frames: usize) -> Self {
        self.budget = Some(frames);
        self
    }

    pub fn capture_into(mut self, sink: Arc<Mutex<Vec<CapturedFrame>>>) -> Self {
        self.capture = Some(sink);
        self
    }

    fn spend(&mut self) -> bool {
        match &mut self.budget {
            None => true,
            Some(0) => {
                self.switch_off();
                false
            }
            Some(n) => {
                *n -= 1;
                true
            }
        }
    }

    fn switch_off(&mut self) {
        self.budget = Some(0);
        self.inbox.clear();
    }

    fn record(&self, direction: Direction, bytes: &[u8]) {
        if let Some(c) = &self.capture {
            c.lock().push(CapturedFrame {
                direction,
                bytes: bytes.to_vec(),
            });
        }
    }

    fn down(&self) -> bool {
        !self.switch.is_up() || self.budget == Some(0)
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        if self.down() || !self.spend() {
            return Err(Error::TransportDown("link is down".into()));
        }
        self.record(Direction::ToPeer, &frame);
        let replies = self.peer.respond(&mut self.responder, &frame)?;
        for r in replies {
            if !self.spend() {
                break;
            }
            self.record(Direction::FromPeer, &r);
            self.inbox.push_back(r);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        if !self.switch.is_up() {
            return Err(Error::TransportDown("link is down".into()));
        }
        self.inbox
            .pop_front()
            .ok_or_else(|| Error::TransportDown("peer sent nothing".into()))
    }
}

pub(crate) fn read_frame(stream: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(header[..4].try_into().unwrap()) as usize;
    let mut frame = Vec::with_capacity(HEADER_LEN + len);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + len, 0);
    stream.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::TransportDown(e.to_string()))?;
        stream.set_nodelay(true).ok();
        Ok(Self { stream })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        self.stream
            .write_all(&frame)
            .map_err(|e| Error::TransportDown(e.to_string()))
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        match read_frame(&mut self.stream) {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(Error::TransportDown("peer closed the connection".into())),
            Err(Error::Io(e)) => Err(Error::TransportDown(e.to_string())),
            Err(e) => Err(e),
        }
    }
}

/// Answer sync rounds on `listener` until `stop` is set. Each connection
/// is served on its own thread.
pub fn serve(db: Arc<Microdb>, listener: TcpListener, stop: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let db = db.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(&db, stream) {
                        log::warn!("sync session from {peer}: {e}");
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(std::time::Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn serve_connection(db: &Microdb, mut stream: TcpStream) -> Result<()> {
    stream.set_nonblocking(false)?;
    let mut responder = Responder::default();
    while let Some(frame) = read_frame(&mut stream)? {
        for reply in db.respond(&mut responder, &frame)? {
            stream.write_all(&reply)?;
        }
        if responder.is_done() {
            break;
        }
    }
    Ok(())
}
